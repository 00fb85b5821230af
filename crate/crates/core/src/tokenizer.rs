//! Fixed byte-level tokenizer over printable ASCII.
//!
//! The vocabulary is frozen: three sentinels (`BOS`, `EOS`, `UNK`) followed
//! by the printable ASCII range `0x20..=0x7E`, for 98 tokens total. Every
//! document in the system is a `BOS`-prefixed token sequence over this
//! vocabulary; characters outside the range map to `UNK`.

pub const BOS: u16 = 0;
pub const EOS: u16 = 1;
pub const UNK: u16 = 2;

const ASCII_FIRST: u8 = 0x20;
const ASCII_LAST: u8 = 0x7e;

/// Total vocabulary size (sentinels + printable ASCII).
pub const VOCAB_SIZE: usize = 3 + (ASCII_LAST - ASCII_FIRST + 1) as usize;

/// Token id for a character, or `UNK` when outside printable ASCII.
pub fn token_of(ch: char) -> u16 {
    let c = ch as u32;
    if (ASCII_FIRST as u32..=ASCII_LAST as u32).contains(&c) {
        3 + (c as u16 - ASCII_FIRST as u16)
    } else {
        UNK
    }
}

/// Encodes text as `[BOS, tokens.., EOS]`, truncated to `max_length` tokens.
///
/// Like generated sequences, encoded ones end with `EOS` or at the length
/// cap, so decode-encode round-trips are exact either way.
pub fn encode(text: &str, max_length: usize) -> Vec<u16> {
    debug_assert!(max_length >= 2, "max_length must fit BOS and EOS");
    let mut tokens = Vec::with_capacity(text.len().min(max_length) + 2);
    tokens.push(BOS);
    for ch in text.chars() {
        if tokens.len() == max_length {
            break;
        }
        tokens.push(token_of(ch));
    }
    if tokens.len() < max_length {
        tokens.push(EOS);
    }
    tokens
}

/// Decodes a token sequence back to text. Sentinels are dropped and `UNK`
/// renders as `?` so that decode-encode round-trips stay in-vocabulary.
pub fn decode(tokens: &[u16]) -> String {
    let mut out = String::with_capacity(tokens.len());
    for &t in tokens {
        if t == BOS || t == EOS {
            continue;
        }
        if t == UNK {
            out.push('?');
        } else {
            out.push(char::from(ASCII_FIRST + (t - 3) as u8));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_wraps_with_sentinels() {
        let tokens = encode("ab", 64);
        assert_eq!(tokens, vec![BOS, token_of('a'), token_of('b'), EOS]);
    }

    #[test]
    fn empty_text_is_bos_eos() {
        assert_eq!(encode("", 64), vec![BOS, EOS]);
    }

    #[test]
    fn non_ascii_maps_to_unk() {
        let tokens = encode("a\u{e9}b", 64);
        assert_eq!(tokens[2], UNK);
    }

    #[test]
    fn truncation_respects_max_length() {
        let tokens = encode("abcdefgh", 6);
        assert_eq!(tokens.len(), 6);
        assert_eq!(tokens[0], BOS);
        assert_eq!(tokens[1..], [b'a', b'b', b'c', b'd', b'e'].map(|b| token_of(b as char)));

        // EOS still fits when the text is one shorter.
        let tokens = encode("abcd", 6);
        assert_eq!(tokens.len(), 6);
        assert_eq!(*tokens.last().unwrap(), EOS);
    }

    #[test]
    fn decode_round_trips_ascii() {
        let text = "Hello, world! 123";
        assert_eq!(decode(&encode(text, 64)), text);
    }

    #[test]
    fn vocab_size_is_98() {
        assert_eq!(VOCAB_SIZE, 98);
        assert_eq!(token_of('~'), (VOCAB_SIZE - 1) as u16);
    }
}

//! Character set: `a`–`z`, `0`–`9`, and an end-of-sequence marker.

use crate::error::{Error, Result};

pub const CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789";
pub const NUM_CHARS: usize = 36;
/// Class index of the end-of-sequence marker.
pub const END: usize = NUM_CHARS;
pub const SIZE: usize = NUM_CHARS + 1;

pub fn index_of(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        '0'..='9' => Some(26 + c as usize - '0' as usize),
        _ => None,
    }
}

pub fn char_of(index: usize) -> Option<char> {
    CHARS.as_bytes().get(index).map(|&b| b as char)
}

/// Encodes `text` as class indices followed by [`END`].
pub fn encode(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(text.len() + 1);
    for c in text.chars() {
        let c = c.to_ascii_lowercase();
        out.push(
            index_of(c).ok_or_else(|| Error::Contract(format!("character {c:?} not in alphabet")))?,
        );
    }
    out.push(END);
    Ok(out)
}

/// Reads characters up to the first end marker; out-of-alphabet indices are skipped.
pub fn decode(indices: &[usize]) -> String {
    indices
        .iter()
        .take_while(|&&i| i != END)
        .filter_map(|&i| char_of(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_appends_end_marker() {
        assert_eq!(encode("a9").unwrap(), vec![0, 35, END]);
        assert_eq!(encode("AZ").unwrap(), vec![0, 25, END]);
        assert!(encode("a-b").is_err());
    }

    #[test]
    fn decode_stops_at_end() {
        assert_eq!(decode(&[7, 4, END, 1, 1]), "he");
        assert_eq!(decode(&[END]), "");
    }
}

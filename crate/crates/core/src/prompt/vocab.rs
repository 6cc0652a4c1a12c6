use std::collections::HashMap;

const DEFAULT_VOCAB: &str = include_str!("../../data/vocab.txt");

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const NEG: &str = "<neg>";
const ZERO: &str = "<zero>";
/// Half-decade bins cover 10⁻⁴ .. 10⁴.
const MAX_BIN: i32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Piece {
    Word(String),
    Number(f64),
}

/// Lowercased words and numbers; everything else separates pieces. A `-`
/// directly before a digit at the start of a piece is a sign, and a `.`
/// between digits is a decimal point.
pub fn split_pieces(text: &str) -> Vec<Piece> {
    let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<Piece>| {
        if cur.is_empty() {
            return;
        }
        let numeric = cur
            .trim_start_matches('-')
            .chars()
            .all(|c| c.is_ascii_digit() || c == '.');
        match cur.parse::<f64>() {
            Ok(v) if numeric => out.push(Piece::Number(v)),
            _ => out.push(Piece::Word(std::mem::take(cur))),
        }
        cur.clear();
    };
    for (i, &c) in chars.iter().enumerate() {
        let next_digit = chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        let keep = c.is_alphanumeric()
            || (c == '-' && cur.is_empty() && next_digit)
            || (c == '.' && next_digit && cur.chars().last().is_some_and(|p| p.is_ascii_digit()));
        if keep {
            cur.push(c);
        } else {
            flush(&mut cur, &mut out);
        }
    }
    flush(&mut cur, &mut out);
    out
}

/// `<numK>` with `K = ⌊2·log₁₀|v|⌋`, clamped.
pub fn number_bin(v: f64) -> String {
    let k = (2.0 * v.abs().log10())
        .floor()
        .clamp(-(MAX_BIN as f64), MAX_BIN as f64) as i32;
    format!("<num{k}>")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from_words(
            DEFAULT_VOCAB
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from),
        )
    }
}

impl Vocab {
    /// The first two entries are taken as `<pad>` and `<unk>`.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let words: Vec<String> = words.into_iter().collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for piece in split_pieces(text) {
            match piece {
                Piece::Word(w) => ids.push(self.id(&w)),
                Piece::Number(v) if v == 0.0 => ids.push(self.id(ZERO)),
                Piece::Number(v) => {
                    if v < 0.0 {
                        ids.push(self.id(NEG));
                    }
                    ids.push(self.id(&number_bin(v)));
                }
            }
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_words_map_without_unk() {
        let v = Vocab::default();
        let ids = v.encode("Heart rate rising");
        assert_eq!(ids.len(), 3);
        assert!(!ids.contains(&UNK));
    }

    #[test]
    fn unknown_word_is_one_unk() {
        let v = Vocab::default();
        assert_eq!(v.encode("zzyzx"), vec![UNK]);
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn numbers_bin_by_half_decade() {
        assert_eq!(number_bin(80.0), "<num3>");
        assert_eq!(number_bin(100.0), "<num4>");
        assert_eq!(number_bin(1e9), "<num8>");
        let v = Vocab::default();
        assert_eq!(v.encode("-3.5"), vec![v.id("<neg>"), v.id("<num1>")]);
        assert_eq!(v.encode("0"), vec![v.id("<zero>")]);
    }

    #[test]
    fn punctuation_splits_and_alnum_words_survive() {
        assert_eq!(
            split_pieces("spo2: 97.5; urine_output, -3"),
            vec![
                Piece::Word("spo2".into()),
                Piece::Number(97.5),
                Piece::Word("urine".into()),
                Piece::Word("output".into()),
                Piece::Number(-3.0),
            ]
        );
    }

    #[test]
    fn default_vocab_fits_backbone() {
        let v = Vocab::default();
        assert!(v.len() <= 512);
        assert_eq!(v.word(PAD), "<pad>");
        assert_eq!(v.word(UNK), "<unk>");
    }
}

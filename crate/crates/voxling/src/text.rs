//! Vocabulary, tokenizer, frozen embedding table and the text anchor.
//!
//! The anchor is the mean of all vocabulary embedding rows and stays fixed
//! for the whole run; the bridge interpolates visual tokens toward it.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};

use crate::error::{Result, VoxError};
use crate::linalg::Mat;
use crate::rng::{derive_rng, salt};

pub type TokenId = usize;

/// Reserved token ids, fixed ahead of any corpus token.
pub mod reserved {
    use super::TokenId;

    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const UNK: TokenId = 3;
    pub const THINK_OPEN: TokenId = 4;
    pub const THINK_CLOSE: TokenId = 5;
    pub const ANSWER_OPEN: TokenId = 6;
    pub const ANSWER_CLOSE: TokenId = 7;
    pub const LETTER_A: TokenId = 8;
    pub const LETTER_B: TokenId = 9;
    pub const LETTER_C: TokenId = 10;
    pub const LETTER_D: TokenId = 11;

    pub const FORMS: [&str; 12] = [
        "<pad>", "<bos>", "<eos>", "<unk>", "<think>", "</think>", "<answer>", "</answer>", "A",
        "B", "C", "D",
    ];

    pub const COUNT: usize = FORMS.len();

    /// The four structural tag tokens of the response grammar.
    pub const TAGS: [TokenId; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

    pub const LETTERS: [TokenId; 4] = [LETTER_A, LETTER_B, LETTER_C, LETTER_D];

    pub fn letter_char(id: TokenId) -> Option<char> {
        match id {
            LETTER_A => Some('A'),
            LETTER_B => Some('B'),
            LETTER_C => Some('C'),
            LETTER_D => Some('D'),
            _ => None,
        }
    }

    pub fn letter_id(c: char) -> Option<TokenId> {
        match c {
            'A' => Some(LETTER_A),
            'B' => Some(LETTER_B),
            'C' => Some(LETTER_C),
            'D' => Some(LETTER_D),
            _ => None,
        }
    }
}

const PUNCT: [char; 8] = ['.', ',', ':', ';', '?', '!', '(', ')'];

/// Whitespace-and-punctuation split. Reserved tag forms survive whole;
/// punctuation becomes single-character tokens.
pub fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        if reserved::FORMS.contains(&piece) {
            out.push(piece.to_string());
            continue;
        }
        let mut cur = String::new();
        for ch in piece.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Token inventory with a fixed reserved prefix.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Build from corpus texts: reserved tokens first, then corpus tokens
    /// ordered by (frequency desc, lexicographic).
    pub fn build(texts: &[String]) -> Result<Vocab> {
        if texts.is_empty() {
            return Err(VoxError::EmptyInput("corpus texts"));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in split_text(text) {
                if reserved::FORMS.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = reserved::FORMS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Vocab::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Every string tokenizes; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        split_text(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(reserved::UNK))
            .collect()
    }

    /// Space-joined token forms. Errors on out-of-range ids.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self.token(id).ok_or(VoxError::TokenOutOfRange {
                id,
                vocab: self.size(),
            })?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    /// Vocab file: one token per line, line index = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(contents: &str) -> Result<Vocab> {
        let tokens: Vec<String> = contents.lines().map(|l| l.to_string()).collect();
        if tokens.len() < reserved::COUNT {
            return Err(VoxError::Parse("vocab file shorter than reserved set".into()));
        }
        for (i, form) in reserved::FORMS.iter().enumerate() {
            if tokens[i] != *form {
                return Err(VoxError::Parse(format!(
                    "vocab line {i} is {:?}, expected reserved {form:?}",
                    tokens[i]
                )));
            }
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Frozen word-embedding matrix E (V×D).
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    e: Mat,
}

impl EmbeddingTable {
    pub const INIT_STD: f64 = 0.02;

    /// Rows drawn from N(0, 0.02) under a derived stream; frozen afterwards.
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = derive_rng(seed, &[salt::EMBEDDING]);
        let normal = Normal::new(0.0, Self::INIT_STD).expect("valid normal");
        let e = Mat::from_fn(vocab_size, dim, |_, _| normal.sample(&mut rng));
        EmbeddingTable { e }
    }

    pub fn from_mat(e: Mat) -> EmbeddingTable {
        EmbeddingTable { e }
    }

    pub fn vocab_size(&self) -> usize {
        self.e.rows()
    }

    pub fn dim(&self) -> usize {
        self.e.cols()
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        self.e.row(id)
    }

    pub fn mat(&self) -> &Mat {
        &self.e
    }

    /// Embedding file: header `V D`, then V rows of D decimals.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.e.rows(), self.e.cols());
        for r in 0..self.e.rows() {
            let row = self.e.row(r);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(contents: &str) -> Result<EmbeddingTable> {
        let mut lines = contents.lines();
        let header = lines.next().ok_or(VoxError::EmptyInput("embedding file"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| VoxError::Parse(format!("embedding header: {e}")))?;
        if dims.len() != 2 {
            return Err(VoxError::Parse("embedding header must be `V D`".into()));
        }
        let (v, d) = (dims[0], dims[1]);
        let mut data = Vec::with_capacity(v * d);
        for (i, line) in lines.enumerate() {
            for tok in line.split_whitespace() {
                let x: f64 = tok
                    .parse()
                    .map_err(|e| VoxError::Parse(format!("embedding row {i}: {e}")))?;
                data.push(x);
            }
        }
        if data.len() != v * d {
            return Err(VoxError::Parse(format!(
                "embedding file holds {} values, expected {}",
                data.len(),
                v * d
            )));
        }
        Ok(EmbeddingTable {
            e: Mat::from_vec(v, d, data),
        })
    }
}

/// Mean of vocabulary embedding rows; fixed once computed.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAnchor {
    v: Vec<f64>,
}

impl TextAnchor {
    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }
}

/// t_anchor[d] = (1/V) Σ_j E[j][d], over all rows.
pub fn text_anchor(table: &EmbeddingTable) -> Result<TextAnchor> {
    text_anchor_with(table, false)
}

/// Same, optionally excluding the reserved rows from the mean.
pub fn text_anchor_with(table: &EmbeddingTable, exclude_reserved: bool) -> Result<TextAnchor> {
    let start = if exclude_reserved { reserved::COUNT } else { 0 };
    if table.vocab_size() <= start {
        return Err(VoxError::EmptyInput("embedding table"));
    }
    let n = table.vocab_size() - start;
    let mut v = vec![0.0; table.dim()];
    for r in start..table.vocab_size() {
        for (a, &x) in v.iter_mut().zip(table.row(r)) {
            *a += x;
        }
    }
    for a in v.iter_mut() {
        *a /= n as f64;
    }
    Ok(TextAnchor { v })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_vocab_orders_by_frequency_then_lex() {
        let v = Vocab::build(&["a b".into(), "b".into()]).unwrap();
        assert_eq!(v.id("b"), Some(reserved::COUNT));
        assert_eq!(v.id("a"), Some(reserved::COUNT + 1));
        assert_eq!(v.token(reserved::BOS), Some("<bos>"));
    }

    #[test]
    fn build_vocab_is_deterministic() {
        let texts = vec!["x y z".into(), "z y".into(), "q".into()];
        let a = Vocab::build(&texts).unwrap();
        let b = Vocab::build(&texts).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
    }

    #[test]
    fn reserved_literal_maps_to_reserved_id() {
        let v = Vocab::build(&["the <answer> tag".into()]).unwrap();
        let ids = v.tokenize("<answer>");
        assert_eq!(ids, vec![reserved::ANSWER_OPEN]);
        // and the reserved form was not duplicated in the tail
        assert_eq!(
            v.to_file_string().matches("<answer>").count(),
            1,
            "reserved token must appear exactly once"
        );
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(Vocab::build(&[]).is_err());
    }

    #[test]
    fn tokenize_splits_punctuation() {
        let v = Vocab::build(&["pleural effusion is noted .".into()]).unwrap();
        let ids = v.tokenize("pleural effusion");
        assert_eq!(ids.len(), 2);
        assert_eq!(v.detokenize(&ids).unwrap(), "pleural effusion");
        let ids = v.tokenize("noted.");
        assert_eq!(v.detokenize(&ids).unwrap(), "noted .");
    }

    #[test]
    fn unknown_maps_to_unk_and_totality() {
        let v = Vocab::build(&["a b".into()]).unwrap();
        assert_eq!(v.tokenize("zzz"), vec![reserved::UNK]);
        assert_eq!(v.tokenize(""), Vec::<TokenId>::new());
    }

    #[test]
    fn detokenize_out_of_range_errors() {
        let v = Vocab::build(&["a".into()]).unwrap();
        assert!(v.detokenize(&[v.size()]).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::build(&["alpha beta beta".into()]).unwrap();
        let s = v.to_file_string();
        let r = Vocab::from_file_string(&s).unwrap();
        assert_eq!(r.to_file_string(), s);
    }

    #[test]
    fn anchor_is_direct_mean() {
        let e = EmbeddingTable::from_mat(Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let a = text_anchor(&e).unwrap();
        assert_eq!(a.as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn anchor_of_identical_rows_is_that_row() {
        let e = EmbeddingTable::from_mat(Mat::from_rows(&[
            vec![0.5, -1.0, 2.0],
            vec![0.5, -1.0, 2.0],
            vec![0.5, -1.0, 2.0],
        ]));
        let a = text_anchor(&e).unwrap();
        assert_eq!(a.as_slice(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn anchor_permutation_invariant() {
        let rows = vec![vec![1.0, 0.0], vec![0.25, -3.0], vec![7.5, 2.0]];
        let e1 = EmbeddingTable::from_mat(Mat::from_rows(&rows));
        let mut shuffled = rows.clone();
        shuffled.rotate_left(1);
        shuffled.swap(0, 1);
        let e2 = EmbeddingTable::from_mat(Mat::from_rows(&shuffled));
        let a1 = text_anchor(&e1).unwrap();
        let a2 = text_anchor(&e2).unwrap();
        for (x, y) in a1.as_slice().iter().zip(a2.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_scales_linearly() {
        let rows = vec![vec![1.0, -2.0], vec![3.0, 0.5]];
        let e1 = EmbeddingTable::from_mat(Mat::from_rows(&rows));
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| 3.0 * x).collect()).collect();
        let e2 = EmbeddingTable::from_mat(Mat::from_rows(&scaled));
        let a1 = text_anchor(&e1).unwrap();
        let a2 = text_anchor(&e2).unwrap();
        for (x, y) in a1.as_slice().iter().zip(a2.as_slice()) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_exclusion_flag() {
        let mut rows = vec![vec![10.0]; reserved::COUNT];
        rows.push(vec![2.0]);
        rows.push(vec![4.0]);
        let e = EmbeddingTable::from_mat(Mat::from_rows(&rows));
        let all = text_anchor(&e).unwrap();
        let excl = text_anchor_with(&e, true).unwrap();
        assert!((excl.as_slice()[0] - 3.0).abs() < 1e-12);
        assert!(all.as_slice()[0] > 3.0);
    }

    #[test]
    fn empty_table_errors() {
        let e = EmbeddingTable::from_mat(Mat::zeros(0, 4));
        assert!(text_anchor(&e).is_err());
    }

    #[test]
    fn embedding_file_round_trip_is_bit_exact() {
        let e = EmbeddingTable::init(20, 8, 42);
        let s = e.to_file_string();
        let r = EmbeddingTable::from_file_string(&s).unwrap();
        assert_eq!(e.mat(), r.mat());
    }

    #[test]
    fn embedding_init_deterministic() {
        let a = EmbeddingTable::init(10, 4, 7);
        let b = EmbeddingTable::init(10, 4, 7);
        assert_eq!(a.mat(), b.mat());
    }
}

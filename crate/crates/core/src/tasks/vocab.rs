//! Fixed symbolic vocabulary for the toy tokenizer.
//!
//! Every surface form is a single token: residues, the operator placeholder
//! `?`, separators, rule words, fake words, and attribute words. Single-token
//! answers keep answer extraction exact and make the rule-word token sets
//! singletons.

use serde::{Deserialize, Serialize};

use super::TaskError;

pub type Token = u32;

pub const FAKE_COLOR_WORDS: [&str; 8] = [
    "zandolex",
    "blimontar",
    "kravintos",
    "melfurian",
    "drosvelta",
    "quenothar",
    "vispalorn",
    "tergamine",
];

pub const FAKE_OBJECT_WORDS: [&str; 8] = [
    "vundelka",
    "glemorax",
    "plintovar",
    "thovaline",
    "frivenmox",
    "skarbelit",
    "wompureth",
    "cindravel",
];

pub const COLOR_WORDS: [&str; 6] = ["purple", "blue", "red", "green", "yellow", "orange"];

pub const OBJECT_WORDS: [&str; 8] = [
    "sheep", "hat", "scarf", "flower", "lamp", "kite", "boat", "chair",
];

pub const RULE_WORDS: [&str; 3] = ["plus", "minus", "times"];

/// Symbolic vocabulary, parameterized by the arithmetic modulus (which sets
/// how many residue tokens exist).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    modulus: u32,
    names: Vec<String>,
}

pub const BOS: Token = 0;
pub const SEP: Token = 1;
pub const QMARK: Token = 2;
pub const EQUALS: Token = 3;
/// Query marker for rule-naming prompts ("which rule?").
pub const RULE_QUERY: Token = 4;
const RESIDUE_BASE: u32 = 5;

impl Vocab {
    pub const DEFAULT_MODULUS: u32 = 23;

    pub fn with_modulus(modulus: u32) -> Self {
        assert!(modulus >= 2, "modulus must be at least 2");
        let mut names: Vec<String> = vec![
            "<bos>".into(),
            ";".into(),
            "?".into(),
            "=".into(),
            "op".into(),
        ];
        names.extend((0..modulus).map(|r| r.to_string()));
        names.extend(RULE_WORDS.iter().map(|s| s.to_string()));
        names.extend(FAKE_COLOR_WORDS.iter().map(|s| s.to_string()));
        names.extend(FAKE_OBJECT_WORDS.iter().map(|s| s.to_string()));
        names.extend(COLOR_WORDS.iter().map(|s| s.to_string()));
        names.extend(OBJECT_WORDS.iter().map(|s| s.to_string()));
        Vocab { modulus, names }
    }

    pub fn standard() -> Self {
        Self::with_modulus(Self::DEFAULT_MODULUS)
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    pub fn residue(&self, r: i64) -> Result<Token, TaskError> {
        if r < 0 || r >= self.modulus as i64 {
            return Err(TaskError::VocabOverflow(format!(
                "value {r} has no token under modulus {}",
                self.modulus
            )));
        }
        Ok(RESIDUE_BASE + r as u32)
    }

    pub fn rule_word(&self, op: usize) -> Token {
        debug_assert!(op < RULE_WORDS.len());
        RESIDUE_BASE + self.modulus + op as u32
    }

    pub fn fake_color_word(&self, i: usize) -> Token {
        debug_assert!(i < FAKE_COLOR_WORDS.len());
        RESIDUE_BASE + self.modulus + RULE_WORDS.len() as u32 + i as u32
    }

    pub fn fake_object_word(&self, i: usize) -> Token {
        debug_assert!(i < FAKE_OBJECT_WORDS.len());
        RESIDUE_BASE
            + self.modulus
            + (RULE_WORDS.len() + FAKE_COLOR_WORDS.len()) as u32
            + i as u32
    }

    pub fn color(&self, i: usize) -> Token {
        debug_assert!(i < COLOR_WORDS.len());
        RESIDUE_BASE
            + self.modulus
            + (RULE_WORDS.len() + FAKE_COLOR_WORDS.len() + FAKE_OBJECT_WORDS.len()) as u32
            + i as u32
    }

    pub fn object(&self, i: usize) -> Token {
        debug_assert!(i < OBJECT_WORDS.len());
        RESIDUE_BASE
            + self.modulus
            + (RULE_WORDS.len()
                + FAKE_COLOR_WORDS.len()
                + FAKE_OBJECT_WORDS.len()
                + COLOR_WORDS.len()) as u32
            + i as u32
    }

    pub fn name(&self, token: Token) -> &str {
        &self.names[token as usize]
    }

    pub fn lookup(&self, word: &str) -> Option<Token> {
        self.names.iter().position(|n| n == word).map(|i| i as Token)
    }

    pub fn detokenize(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.name(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<Token>, TaskError> {
        text.split_whitespace()
            .map(|w| {
                self.lookup(w)
                    .ok_or_else(|| TaskError::VocabOverflow(format!("unknown word {w:?}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let v = Vocab::standard();
        for i in 0..v.size() {
            for j in (i + 1)..v.size() {
                assert_ne!(v.name(i as Token), v.name(j as Token));
            }
        }
    }

    #[test]
    fn tokenize_round_trips_detokenize() {
        let v = Vocab::standard();
        let tokens = vec![BOS, v.residue(7).unwrap(), QMARK, v.residue(3).unwrap(), EQUALS];
        let text = v.detokenize(&tokens);
        assert_eq!(v.tokenize(&text).unwrap(), tokens);
    }

    #[test]
    fn residue_overflow_is_an_error() {
        let v = Vocab::with_modulus(5);
        assert!(v.residue(4).is_ok());
        assert!(v.residue(5).is_err());
        assert!(v.residue(-1).is_err());
    }

    #[test]
    fn token_ranges_cover_size() {
        let v = Vocab::standard();
        let last = v.object(OBJECT_WORDS.len() - 1);
        assert_eq!(last as usize + 1, v.size());
    }
}

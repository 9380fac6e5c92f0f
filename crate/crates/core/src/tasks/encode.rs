//! Deterministic tokenization of episodes over the fixed symbolic
//! vocabulary, plus the demonstration/query segmentation the head analyses
//! consume.
//!
//! Operator induction renders as `<bos> a ? b = y ; ... aq ? bq =` and
//! fake-word inference as `<bos> f g = c o ; ... f gq =`. Rule-naming
//! prompts keep the demonstrations and end with `op =` instead of the
//! query, so the next token is the rule word. Sequences end at the answer
//! slot: the final token is the forerunner, and the model predicts the
//! answer from it.

use serde::{Deserialize, Serialize};

use super::vocab::{self, Token, Vocab};
use super::{AnswerValue, DemoInput, RuleFamily, TaskError, TaskInstance};

/// Prompt flavor: elicit the query answer, or elicit the rule's name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptMode {
    AnswerPrompt,
    RuleNamingPrompt,
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> {
        self.start..self.end
    }
}

/// Per-demonstration token spans plus the forerunner index: the final token
/// of the rendered query, immediately preceding the answer slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub demo_spans: Vec<Span>,
    pub forerunner: usize,
}

impl SegmentMap {
    fn validate(&self, seq_len: usize) {
        let mut prev_end = 0;
        for span in &self.demo_spans {
            debug_assert!(span.start >= prev_end, "spans must be ordered and disjoint");
            debug_assert!(span.end <= seq_len);
            debug_assert!(!span.is_empty());
            prev_end = span.end;
        }
        debug_assert!(self.forerunner >= prev_end, "forerunner after all spans");
        debug_assert!(self.forerunner < seq_len);
    }
}

fn push_answer(tokens: &mut Vec<Token>, vocab: &Vocab, y: AnswerValue) -> Result<(), TaskError> {
    match y {
        AnswerValue::Int(v) => tokens.push(vocab.residue(v)?),
        AnswerValue::Color(c) => tokens.push(vocab.color(c)),
    }
    Ok(())
}

/// Token for an answer value, used to compare model output against gold.
pub fn answer_token(vocab: &Vocab, y: AnswerValue) -> Result<Token, TaskError> {
    match y {
        AnswerValue::Int(v) => vocab.residue(v),
        AnswerValue::Color(c) => Ok(vocab.color(c)),
    }
}

/// Renders an instance into tokens and its segmentation. Deterministic in
/// the instance; corruption shows up only inside the corrupted
/// demonstration's span.
pub fn encode(
    instance: &TaskInstance,
    mode: PromptMode,
    vocab: &Vocab,
) -> Result<(Vec<Token>, SegmentMap), TaskError> {
    if let RuleFamily::OperatorInduction { modulus, .. } = &instance.family {
        match modulus {
            None => {
                return Err(TaskError::VocabOverflow(
                    "plain (non-modular) arithmetic has no token form".into(),
                ))
            }
            Some(m) if *m != vocab.modulus() => {
                return Err(TaskError::VocabOverflow(format!(
                    "family modulus {m} does not match vocabulary modulus {}",
                    vocab.modulus()
                )))
            }
            Some(_) => {}
        }
    }

    let mut tokens = vec![vocab::BOS];
    let mut demo_spans = Vec::with_capacity(instance.k());

    for demo in &instance.demos {
        let start = tokens.len();
        match demo.x {
            DemoInput::Operands(a, b) => {
                tokens.push(vocab.residue(a as i64)?);
                tokens.push(vocab::QMARK);
                tokens.push(vocab.residue(b as i64)?);
                tokens.push(vocab::EQUALS);
                push_answer(&mut tokens, vocab, demo.y)?;
            }
            DemoInput::FakeWord { word, object_word } => {
                tokens.push(vocab.fake_color_word(word));
                tokens.push(vocab.fake_object_word(object_word));
                tokens.push(vocab::EQUALS);
                push_answer(&mut tokens, vocab, demo.y)?;
                tokens.push(vocab.object(demo.object.unwrap_or(0)));
            }
        }
        demo_spans.push(Span {
            start,
            end: tokens.len(),
        });
        tokens.push(vocab::SEP);
    }

    match mode {
        PromptMode::AnswerPrompt => match instance.query {
            DemoInput::Operands(a, b) => {
                tokens.push(vocab.residue(a as i64)?);
                tokens.push(vocab::QMARK);
                tokens.push(vocab.residue(b as i64)?);
                tokens.push(vocab::EQUALS);
            }
            DemoInput::FakeWord { word, object_word } => {
                tokens.push(vocab.fake_color_word(word));
                tokens.push(vocab.fake_object_word(object_word));
                tokens.push(vocab::EQUALS);
            }
        },
        PromptMode::RuleNamingPrompt => {
            tokens.push(vocab::RULE_QUERY);
            tokens.push(vocab::EQUALS);
        }
    }

    let map = SegmentMap {
        demo_spans,
        forerunner: tokens.len() - 1,
    };
    map.validate(tokens.len());
    Ok((tokens, map))
}

/// The token the model should emit at the answer slot for this prompt mode.
pub fn gold_token(
    instance: &TaskInstance,
    mode: PromptMode,
    vocab: &Vocab,
) -> Result<Token, TaskError> {
    match mode {
        PromptMode::AnswerPrompt => answer_token(vocab, instance.gold_answer()),
        PromptMode::RuleNamingPrompt => match &instance.family {
            RuleFamily::OperatorInduction { .. } => Ok(vocab.rule_word(instance.rule.0)),
            RuleFamily::FakeWordInference { .. } => Ok(vocab.color(instance.rule.0)),
        },
    }
}

/// Tokens plus the supervised (position, next-token) pairs: every
/// demonstration answer slot and the final answer slot. Loss is computed at
/// exactly these positions.
pub fn training_targets(
    instance: &TaskInstance,
    mode: PromptMode,
    vocab: &Vocab,
) -> Result<(Vec<Token>, Vec<(usize, Token)>), TaskError> {
    let (tokens, map) = encode(instance, mode, vocab)?;
    let mut targets = Vec::with_capacity(instance.k() + 1);
    for (demo, span) in instance.demos.iter().zip(&map.demo_spans) {
        // the answer token sits right after the demo's `=`
        let answer_pos = match demo.x {
            DemoInput::Operands(..) => span.start + 4,
            DemoInput::FakeWord { .. } => span.start + 3,
        };
        targets.push((answer_pos - 1, tokens[answer_pos]));
    }
    targets.push((map.forerunner, gold_token(instance, mode, vocab)?));
    Ok((tokens, targets))
}

//! Episode responders: the trained transformer behind a common interface,
//! plus scripted oracles with analytically forced outcomes for validating
//! the evaluation harness.

use serde::{Deserialize, Serialize};

use super::trace::HeadMask;
use super::transformer::{token_to_answer, TransformerModel};
use super::ModelError;
use crate::tasks::{encode, AnswerValue, PromptMode, TaskInstance, Vocab};

/// An answer to one episode: the extracted answer value (None when the
/// responder emitted something that is not an answer token) and the
/// per-step next-token distributions used for entropy analysis.
#[derive(Debug, Clone)]
pub struct ResponderAnswer {
    pub value: Option<AnswerValue>,
    pub distributions: Vec<Vec<f64>>,
}

/// Anything the harness can evaluate on an episode.
pub trait EpisodeResponder: Sync {
    fn respond(&self, instance: &TaskInstance) -> Result<ResponderAnswer, ModelError>;
}

/// Scripted reference models. Deterministic given the episode, with
/// outcomes known in closed form, so harness math can be tested exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleModel {
    /// Answers by the rule the majority of demonstrations support. Under
    /// the majority invariant (at most one corrupted demo, k - 1 >= 2) that
    /// is always the episode's true rule, so the oracle is immune to
    /// corruption by construction.
    Majority,
    /// Answers by the rule the final demonstration evidences: the corrupted
    /// rule when position k is corrupted, the true rule otherwise.
    Recency,
}

impl EpisodeResponder for OracleModel {
    fn respond(&self, instance: &TaskInstance) -> Result<ResponderAnswer, ModelError> {
        let rule = match self {
            OracleModel::Majority => instance.rule,
            OracleModel::Recency => match instance.corruption {
                Some(spec) if spec.position == instance.k() => spec.rule,
                _ => instance.rule,
            },
        };
        let value = instance.family.apply(rule, &instance.query)?;
        Ok(ResponderAnswer {
            value: Some(value),
            // deterministic single-step emission: a point-mass distribution
            distributions: vec![vec![1.0]],
        })
    }
}

/// The transformer as a responder: encodes the episode as an answer prompt
/// and reads the greedy token at the answer slot.
pub struct ModelResponder<'a> {
    pub model: &'a TransformerModel<f32>,
    pub vocab: &'a Vocab,
    pub mask: HeadMask,
}

impl<'a> ModelResponder<'a> {
    pub fn new(model: &'a TransformerModel<f32>, vocab: &'a Vocab) -> Self {
        ModelResponder {
            model,
            vocab,
            mask: HeadMask::empty(),
        }
    }

    pub fn with_mask(model: &'a TransformerModel<f32>, vocab: &'a Vocab, mask: HeadMask) -> Self {
        ModelResponder { model, vocab, mask }
    }
}

impl EpisodeResponder for ModelResponder<'_> {
    fn respond(&self, instance: &TaskInstance) -> Result<ResponderAnswer, ModelError> {
        let (tokens, _) = encode(instance, PromptMode::AnswerPrompt, self.vocab)?;
        let (token, dist) = self.model.answer_token(&tokens, &self.mask)?;
        Ok(ResponderAnswer {
            value: token_to_answer(self.vocab, token),
            distributions: vec![dist],
        })
    }
}

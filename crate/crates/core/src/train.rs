//! Meta-training: fresh rule-inference episodes every step until in-context
//! rule inference emerges.
//!
//! Each batch samples new episodes (new rules, operands, and words), so
//! memorizing inputs is useless and the model is forced to infer rules from
//! the demonstrations in front of it. Loss is cross-entropy at answer slots
//! only: every demonstration's answer plus the query answer. A configurable
//! slice of episodes uses the rule-naming prompt (so the rule-word readout
//! the lens and attribution analyses rely on is trained) and a small slice
//! is rendered zero-shot (so zero-shot behavior is the learned chance-level
//! answer distribution).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::stats::{bootstrap_mean_ci, mean, BootstrapCi};
use crate::model::{EpisodeResponder, HeadMask, ModelConfig, ModelError, TransformerModel};
use crate::numcore::{NumError, Rng, Tensor};
use crate::tasks::{sample_episode, training_targets, PromptMode, RuleFamily, TaskError, Vocab};

const TAG_INIT: u64 = 0x11;
const TAG_EPISODE: u64 = 0x22;
const TAG_VAL: u64 = 0x33;
const TAG_EVAL: u64 = 0x44;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; linear warmup over `warmup_frac` of the steps,
    /// then cosine decay to zero.
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Mixture weight of operator induction; fake-word inference gets the
    /// complement. The two weights therefore sum to 1.
    pub operator_weight: f64,
    pub k: usize,
    /// Fraction of episodes rendered as rule-naming prompts.
    pub rule_name_fraction: f64,
    /// Fraction of episodes rendered with zero demonstrations.
    pub zero_shot_fraction: f64,
    pub val_every: usize,
    pub val_episodes: usize,
    /// Early stop once every trained family's clean k-shot validation
    /// accuracy reaches this threshold.
    pub early_stop_acc: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 9000,
            batch_size: 32,
            lr: 3e-4,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            operator_weight: 0.5,
            k: 4,
            rule_name_fraction: 0.25,
            zero_shot_fraction: 0.05,
            val_every: 250,
            val_episodes: 300,
            early_stop_acc: 0.95,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(TrainError::BadConfig(
                "steps, batch, cadence must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.operator_weight) {
            return Err(TrainError::BadConfig(
                "operator_weight must be in [0, 1]".into(),
            ));
        }
        for (name, v) in [
            ("warmup_frac", self.warmup_frac),
            ("rule_name_fraction", self.rule_name_fraction),
            ("zero_shot_fraction", self.zero_shot_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::BadConfig(format!("{name} must be in [0, 1]")));
            }
        }
        if self.lr < 0.0 {
            return Err(TrainError::BadConfig("lr must be nonnegative".into()));
        }
        if self.k > 0 && self.k < 3 && self.zero_shot_fraction < 1.0 {
            return Err(TrainError::BadConfig("k must be 0 or >= 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_operator: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fake_word: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub stopped_early: bool,
    pub final_step: usize,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }
}

/// AdamW with decoupled weight decay applied to rank-2 tensors only.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, model: &TransformerModel<f32>) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        model.params.for_each(|_, t| {
            m.push(Tensor::zeros(t.shape().to_vec()));
            v.push(Tensor::zeros(t.shape().to_vec()));
        });
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// One update; `grads` aligned with the canonical parameter order.
    pub fn update(&mut self, model: &mut TransformerModel<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let eps = self.eps as f32;
        let lr32 = lr as f32;
        let mut idx = 0;
        model.params.for_each_mut(|_, p| {
            let decay = if p.shape().len() == 2 {
                self.weight_decay as f32
            } else {
                0.0
            };
            let g = grads[idx].data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            for ((pi, &gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1 as f32;
                let vhat = *vi / bc2 as f32;
                *pi -= lr32 * (mhat / (vhat.sqrt() + eps) + decay * *pi);
            }
            idx += 1;
        });
    }
}

/// Linear warmup then cosine decay to zero.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64 * warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else if total <= warmup {
        base
    } else {
        let progress = (step - warmup) as f64 / (total - warmup) as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

struct EpisodeDraw {
    tokens: Vec<crate::tasks::Token>,
    targets: Vec<(usize, crate::tasks::Token)>,
}

fn draw_episode(cfg: &TrainConfig, vocab: &Vocab, rng: &mut Rng) -> Result<EpisodeDraw, TaskError> {
    let family = if rng.next_f64() < cfg.operator_weight {
        RuleFamily::operator_induction()
    } else {
        RuleFamily::fake_word_inference()
    };
    let k = if rng.next_f64() < cfg.zero_shot_fraction {
        0
    } else {
        cfg.k
    };
    let mode = if rng.next_f64() < cfg.rule_name_fraction {
        PromptMode::RuleNamingPrompt
    } else {
        PromptMode::AnswerPrompt
    };
    let instance = sample_episode(&family, k, rng, false)?;
    let (tokens, targets) = training_targets(&instance, mode, vocab)?;
    Ok(EpisodeDraw { tokens, targets })
}

/// Sums per-episode (loss, gradients) over `lo..hi` with a fixed binary
/// reduction tree, so the result is bit-identical for any worker count.
fn tree_batch(
    model: &TransformerModel<f32>,
    cfg: &TrainConfig,
    vocab: &Vocab,
    rng: &Rng,
    step: usize,
    lo: usize,
    hi: usize,
) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
    if hi - lo == 1 {
        let mut erng = rng.derive_many(&[TAG_EPISODE, step as u64, lo as u64]);
        let draw = draw_episode(cfg, vocab, &mut erng)?;
        let out = model.training_loss(&draw.tokens, &draw.targets, &HeadMask::empty());
        match out {
            Ok(step_out) => Ok((step_out.loss, step_out.grads)),
            Err(ModelError::Num(NumError::NonFinite { op })) => Err(TrainError::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            }),
            Err(e) => Err(e.into()),
        }
    } else {
        let mid = lo + (hi - lo) / 2;
        let (left, right) = rayon::join(
            || tree_batch(model, cfg, vocab, rng, step, lo, mid),
            || tree_batch(model, cfg, vocab, rng, step, mid, hi),
        );
        let (l_loss, mut l_grads) = left?;
        let (r_loss, r_grads) = right?;
        for (a, b) in l_grads.iter_mut().zip(&r_grads) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok((l_loss + r_loss, l_grads))
    }
}

/// Meta-trains a fresh model. The returned log reproduces bit-for-bit under
/// the same seed.
pub fn meta_train(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<(TransformerModel<f32>, TrainLog), TrainError> {
    cfg.validate()?;
    let vocab = Vocab::standard();
    let mut model = TransformerModel::<f32>::init(model_config, &mut rng.derive(TAG_INIT));
    let mut optimizer = AdamW::new(cfg, &model);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup_frac);
        let (loss_sum, mut grads) = tree_batch(&model, cfg, &vocab, rng, step, 0, cfg.batch_size)?;
        let loss = loss_sum / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                step,
                detail: format!("loss {loss}"),
            });
        }
        let scale = 1.0 / cfg.batch_size as f32;
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        optimizer.update(&mut model, &grads, lr);

        let validate_now = (step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps;
        let mut entry = LogEntry {
            step,
            loss,
            lr,
            val_operator: None,
            val_fake_word: None,
        };
        let mut stop = false;
        if validate_now {
            let vrng = rng.derive_many(&[TAG_VAL, step as u64]);
            let mut all_ok = true;
            if cfg.operator_weight > 0.0 {
                let acc = validation_accuracy(
                    &model,
                    &vocab,
                    &RuleFamily::operator_induction(),
                    cfg.k,
                    cfg.val_episodes,
                    &vrng.derive(1),
                )?;
                all_ok &= acc >= cfg.early_stop_acc;
                entry.val_operator = Some(acc);
            }
            if cfg.operator_weight < 1.0 {
                let acc = validation_accuracy(
                    &model,
                    &vocab,
                    &RuleFamily::fake_word_inference(),
                    cfg.k,
                    cfg.val_episodes,
                    &vrng.derive(2),
                )?;
                all_ok &= acc >= cfg.early_stop_acc;
                entry.val_fake_word = Some(acc);
            }
            stop = all_ok;
        }
        log.final_step = step;
        log.entries.push(entry);
        if stop {
            log.stopped_early = step + 1 < cfg.steps;
            break;
        }
    }
    Ok((model, log))
}

fn validation_accuracy(
    model: &TransformerModel<f32>,
    vocab: &Vocab,
    family: &RuleFamily,
    k: usize,
    episodes: usize,
    rng: &Rng,
) -> Result<f64, TrainError> {
    let correct: Vec<bool> = (0..episodes)
        .into_par_iter()
        .map(|i| -> Result<bool, TrainError> {
            let mut erng = rng.derive(i as u64);
            let inst = sample_episode(family, k, &mut erng, true)?;
            let (tokens, _) = crate::tasks::encode(&inst, PromptMode::AnswerPrompt, vocab)?;
            let (token, _) = model.answer_token(&tokens, &HeadMask::empty())?;
            let gold = crate::tasks::encode::answer_token(vocab, inst.gold_answer())?;
            Ok(token == gold)
        })
        .collect::<Result<_, _>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / episodes as f64)
}

/// Clean in-context accuracy with bootstrap CI, plus zero-shot accuracy to
/// verify demonstration reliance. Chance is 1/|R|: on discriminative
/// queries the plausible answers are exactly the rules' outputs, so a
/// demonstration-blind predictor lands at 1/|R| at best.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanIclReport {
    pub family: String,
    pub k: usize,
    pub episodes: usize,
    pub accuracy: f64,
    pub accuracy_ci: BootstrapCi,
    pub zero_shot_accuracy: f64,
    pub zero_shot_ci: BootstrapCi,
    pub chance: f64,
}

pub fn evaluate_clean_icl(
    responder: &dyn EpisodeResponder,
    family: &RuleFamily,
    k: usize,
    episodes: usize,
    rng: &Rng,
) -> Result<CleanIclReport, TrainError> {
    let run = |shots: usize, tag: u64| -> Result<Vec<f64>, TrainError> {
        (0..episodes)
            .into_par_iter()
            .map(|i| -> Result<f64, TrainError> {
                let mut erng = rng.derive_many(&[TAG_EVAL, tag, i as u64]);
                let inst = sample_episode(family, shots, &mut erng, true)?;
                let ans = responder.respond(&inst)?;
                Ok(if ans.value == Some(inst.gold_answer()) {
                    1.0
                } else {
                    0.0
                })
            })
            .collect()
    };
    let kshot = run(k, 1)?;
    let zeroshot = run(0, 2)?;
    let mut brng = rng.derive_many(&[TAG_EVAL, 3]);
    Ok(CleanIclReport {
        family: crate::harness::family_name(family),
        k,
        episodes,
        accuracy: mean(&kshot),
        accuracy_ci: bootstrap_mean_ci(&kshot, 0.95, &mut brng),
        zero_shot_accuracy: mean(&zeroshot),
        zero_shot_ci: bootstrap_mean_ci(&zeroshot, 0.95, &mut brng),
        chance: 1.0 / family.n_rules() as f64,
    })
}

//! Layer-wise binary linear probes: does the residual stream at the
//! forerunner position encode a given rule?
//!
//! Dataset construction follows a balanced design: positives contain the
//! target rule in 1/k .. k/k of the demonstrations (equal counts per
//! coverage bucket), negatives exclude it entirely, and demonstration order
//! is shuffled so probes learn rule content rather than position. Probes
//! are L1-regularized logistic regressions trained by proximal gradient
//! descent on z-scored features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::stats::mean;
use crate::model::{CaptureOptions, HeadMask, ModelError, TransformerModel};
use crate::numcore::Rng;
use crate::tasks::{
    encode, AnswerValue, Demo, DemoInput, PromptMode, RuleFamily, RuleId, TaskError,
    TaskInstance, Vocab,
};

const TAG_POSITIVE: u64 = 0x70;
const TAG_NEGATIVE: u64 = 0x71;
const TAG_SHUFFLE: u64 = 0x72;
const TAG_SCENARIO: u64 = 0x73;
const TAG_BOOT: u64 = 0x74;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("sample count {n} must be divisible by 2k = {divisor}")]
    BadSampleCount { n: usize, divisor: usize },
    #[error("hypothesis space of {0} rules cannot fill non-target demonstrations")]
    DegenerateSpace(usize),
    #[error("probe optimizer did not converge within {iters} iterations (grad norm {grad_norm})")]
    NonConvergence { iters: usize, grad_norm: f64 },
    #[error("need a probe for every rule: have {have}, space has {need}")]
    MissingProbes { have: usize, need: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Balanced probe dataset: per-layer forerunner features plus labels.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub target_rule: RuleId,
    pub k: usize,
    /// One matrix per residual boundary; rows are samples.
    pub layer_features: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<bool>,
    /// Fraction of demonstrations evidencing the target rule, per sample.
    pub coverage: Vec<f64>,
}

impl ProbeDataset {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_boundaries(&self) -> usize {
        self.layer_features.len()
    }
}

/// Builds an episode whose demonstrations follow the given per-demo rules
/// (not necessarily unanimous). Used for probe stimuli and scenario
/// evaluation.
pub fn craft_mixed_episode(
    family: &RuleFamily,
    true_rule: RuleId,
    demo_rules: &[RuleId],
    rng: &mut Rng,
) -> Result<TaskInstance, TaskError> {
    match family {
        RuleFamily::OperatorInduction {
            operand_lo,
            operand_hi,
            ..
        } => {
            let span = (*operand_hi - *operand_lo + 1) as u64;
            let mut draw = |rng: &mut Rng| {
                DemoInput::Operands(
                    *operand_lo + rng.below(span) as u32,
                    *operand_lo + rng.below(span) as u32,
                )
            };
            let demos = demo_rules
                .iter()
                .map(|&r| {
                    let x = draw(rng);
                    Ok(Demo {
                        x,
                        y: family.apply(r, &x)?,
                        object: None,
                    })
                })
                .collect::<Result<Vec<_>, TaskError>>()?;
            let query = draw(rng);
            Ok(TaskInstance {
                family: family.clone(),
                rule: true_rule,
                demos,
                query,
                corruption: None,
            })
        }
        RuleFamily::FakeWordInference {
            n_fake_words,
            n_object_words,
            n_objects,
            ..
        } => {
            let k = demo_rules.len();
            if k + 1 > *n_object_words {
                return Err(TaskError::DegenerateFamily(
                    "not enough object words".into(),
                ));
            }
            let word = rng.usize_below(*n_fake_words);
            let mut pool: Vec<usize> = (0..*n_object_words).collect();
            rng.shuffle(&mut pool);
            let demos = demo_rules
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    let x = DemoInput::FakeWord {
                        word,
                        object_word: pool[i],
                    };
                    Ok(Demo {
                        x,
                        y: family.apply(r, &x)?,
                        object: Some(rng.usize_below(*n_objects)),
                    })
                })
                .collect::<Result<Vec<_>, TaskError>>()?;
            Ok(TaskInstance {
                family: family.clone(),
                rule: true_rule,
                demos,
                query: DemoInput::FakeWord {
                    word,
                    object_word: pool[k],
                },
                corruption: None,
            })
        }
    }
}

fn other_rule(family: &RuleFamily, exclude: RuleId, rng: &mut Rng) -> RuleId {
    let n = family.n_rules();
    let offset = 1 + rng.usize_below(n - 1);
    RuleId((exclude.0 + offset) % n)
}

/// Forerunner features at every residual boundary for one episode, under
/// the rule-naming prompt.
fn forerunner_features(
    model: &TransformerModel<f32>,
    vocab: &Vocab,
    instance: &TaskInstance,
) -> Result<Vec<Vec<f64>>, ProbeError> {
    let (tokens, map) = encode(instance, PromptMode::RuleNamingPrompt, vocab)?;
    let pass = model.forward(
        &tokens,
        &HeadMask::empty(),
        &CaptureOptions::forerunner_residuals(),
        Some(&map),
    )?;
    (0..pass.trace.n_boundaries())
        .map(|b| {
            Ok(pass
                .trace
                .residual(b, map.forerunner)
                .expect("forerunner captured")
                .to_vec())
        })
        .collect()
}

/// Builds the balanced dataset: n/2 positives split evenly over coverage
/// buckets 1/k .. k/k, n/2 negatives with the target rule absent.
pub fn build_probe_dataset(
    model: &TransformerModel<f32>,
    vocab: &Vocab,
    family: &RuleFamily,
    target_rule: RuleId,
    n_samples: usize,
    k: usize,
    rng: &Rng,
) -> Result<ProbeDataset, ProbeError> {
    if n_samples == 0 || n_samples % (2 * k) != 0 {
        return Err(ProbeError::BadSampleCount {
            n: n_samples,
            divisor: 2 * k,
        });
    }
    if family.n_rules() < 2 {
        return Err(ProbeError::DegenerateSpace(family.n_rules()));
    }
    let per_bucket = n_samples / (2 * k);
    let n_pos = n_samples / 2;

    // episode plans first (cheap, sequential); features in parallel after
    let mut plans: Vec<(TaskInstance, bool, f64)> = Vec::with_capacity(n_samples);
    for bucket in 1..=k {
        for i in 0..per_bucket {
            let mut erng = rng.derive_many(&[TAG_POSITIVE, bucket as u64, i as u64]);
            let mut demo_rules = vec![target_rule; bucket];
            while demo_rules.len() < k {
                demo_rules.push(other_rule(family, target_rule, &mut erng));
            }
            erng_shuffle(&mut demo_rules, &mut erng);
            let inst = craft_mixed_episode(family, target_rule, &demo_rules, &mut erng)?;
            plans.push((inst, true, bucket as f64 / k as f64));
        }
    }
    for i in 0..n_pos {
        let mut erng = rng.derive_many(&[TAG_NEGATIVE, i as u64]);
        let demo_rules: Vec<RuleId> = (0..k)
            .map(|_| other_rule(family, target_rule, &mut erng))
            .collect();
        let inst = craft_mixed_episode(family, target_rule, &demo_rules, &mut erng)?;
        plans.push((inst, false, 0.0));
    }

    // shuffle sample order so train/validation splits are unbiased
    let mut order: Vec<usize> = (0..plans.len()).collect();
    rng.derive(TAG_SHUFFLE).shuffle(&mut order);

    let features: Vec<Vec<Vec<f64>>> = order
        .par_iter()
        .map(|&i| forerunner_features(model, vocab, &plans[i].0))
        .collect::<Result<_, _>>()?;

    let n_boundaries = features[0].len();
    let mut layer_features = vec![Vec::with_capacity(n_samples); n_boundaries];
    for sample in &features {
        for (b, h) in sample.iter().enumerate() {
            layer_features[b].push(h.clone());
        }
    }
    Ok(ProbeDataset {
        target_rule,
        k,
        layer_features,
        labels: order.iter().map(|&i| plans[i].1).collect(),
        coverage: order.iter().map(|&i| plans[i].2).collect(),
    })
}

fn erng_shuffle(rules: &mut [RuleId], rng: &mut Rng) {
    rng.shuffle(rules);
}

/// One layer's logistic probe with its feature scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub scaler_mean: Vec<f64>,
    pub scaler_std: Vec<f64>,
}

impl LayerProbe {
    pub fn standardize(&self, h: &[f64]) -> Vec<f64> {
        h.iter()
            .zip(self.scaler_mean.iter().zip(&self.scaler_std))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect()
    }

    /// sigma(w . z + b), always strictly inside (0, 1).
    pub fn confidence(&self, h: &[f64]) -> f64 {
        let z = self.standardize(h);
        let logit: f64 = self
            .weights
            .iter()
            .zip(&z)
            .map(|(&w, &zi)| w * zi)
            .sum::<f64>()
            + self.bias;
        sigmoid(logit)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-layer probes for one target rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub target_rule: RuleId,
    pub layers: Vec<LayerProbe>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

pub struct TrainProbeOptions {
    pub l1_strength: f64,
    /// Fraction of samples used for training; the rest validate.
    pub train_split: f64,
    /// Convergence tolerance on the proximal gradient norm.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for TrainProbeOptions {
    fn default() -> Self {
        TrainProbeOptions {
            l1_strength: 1e-3,
            train_split: 0.8,
            tolerance: 1e-6,
            max_iters: 20_000,
        }
    }
}

/// Trains one logistic probe per residual boundary.
pub fn train_probe(
    dataset: &ProbeDataset,
    options: &TrainProbeOptions,
) -> Result<ProbeModel, ProbeError> {
    let n = dataset.n_samples();
    let n_train = ((n as f64) * options.train_split).round() as usize;
    let n_train = n_train.clamp(1, n);
    let labels: Vec<f64> = dataset
        .labels
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();

    let results: Vec<(LayerProbe, f64, f64)> = dataset
        .layer_features
        .par_iter()
        .map(|rows| -> Result<(LayerProbe, f64, f64), ProbeError> {
            let probe = fit_logistic_l1(
                &rows[..n_train],
                &labels[..n_train],
                options.l1_strength,
                options.tolerance,
                options.max_iters,
            )?;
            let acc = |range: std::ops::Range<usize>| -> f64 {
                if range.is_empty() {
                    return f64::NAN;
                }
                let correct = range
                    .clone()
                    .filter(|&i| (probe.confidence(&rows[i]) >= 0.5) == dataset.labels[i])
                    .count();
                correct as f64 / range.len() as f64
            };
            let train_acc = acc(0..n_train);
            let val_acc = acc(n_train..n);
            Ok((probe, train_acc, val_acc))
        })
        .collect::<Result<_, _>>()?;

    let mut layers = Vec::with_capacity(results.len());
    let mut train_accuracy = Vec::with_capacity(results.len());
    let mut val_accuracy = Vec::with_capacity(results.len());
    for (probe, ta, va) in results {
        layers.push(probe);
        train_accuracy.push(ta);
        val_accuracy.push(va);
    }
    Ok(ProbeModel {
        target_rule: dataset.target_rule,
        layers,
        train_accuracy,
        val_accuracy,
    })
}

/// L1-regularized logistic regression by accelerated proximal gradient
/// descent (FISTA with backtracking and adaptive restart). The bias is an
/// unpenalized coordinate. Features are z-scored first; the scaler is
/// stored on the probe. Convergence is declared when the proximal-gradient
/// norm at the iterate falls below the tolerance.
fn fit_logistic_l1(
    rows: &[Vec<f64>],
    labels: &[f64],
    l1: f64,
    tolerance: f64,
    max_iters: usize,
) -> Result<LayerProbe, ProbeError> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean_v = vec![0.0; d];
    for row in rows {
        for (m, &x) in mean_v.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean_v {
        *m /= n as f64;
    }
    let mut std_v = vec![0.0; d];
    for row in rows {
        for ((s, &x), &m) in std_v.iter_mut().zip(row).zip(&mean_v) {
            *s += (x - m) * (x - m);
        }
    }
    for s in &mut std_v {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0; // constant feature: leave centered at zero
        }
    }
    let z: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            row.iter()
                .zip(mean_v.iter().zip(&std_v))
                .map(|(&x, (&m, &s))| (x - m) / s)
                .collect()
        })
        .collect();

    // parameter layout: p[0..d] = w (penalized), p[d] = bias (free)
    let dim = d + 1;
    let eval = |p: &[f64]| -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = vec![0.0; dim];
        for (zi, &yi) in z.iter().zip(labels) {
            let logit: f64 =
                p[..d].iter().zip(zi).map(|(&wj, &zj)| wj * zj).sum::<f64>() + p[d];
            // log(1 + exp(logit)) - y * logit, computed stably
            value += if logit > 0.0 {
                logit + (-logit).exp().ln_1p() - yi * logit
            } else {
                logit.exp().ln_1p() - yi * logit
            };
            let err = sigmoid(logit) - yi;
            for (g, &zj) in grad[..d].iter_mut().zip(zi) {
                *g += err * zj;
            }
            grad[d] += err;
        }
        let inv = 1.0 / n as f64;
        value *= inv;
        for g in &mut grad {
            *g *= inv;
        }
        (value, grad)
    };

    let soft = |x: f64, t: f64| -> f64 {
        if x > t {
            x - t
        } else if x < -t {
            x + t
        } else {
            0.0
        }
    };
    let prox = |p: &[f64], step: f64| -> Vec<f64> {
        let mut out = Vec::with_capacity(dim);
        for (j, &v) in p.iter().enumerate() {
            out.push(if j < d { soft(v, step * l1) } else { v });
        }
        out
    };

    let mut x = vec![0.0; dim];
    let mut y = x.clone();
    let mut momentum = 1.0_f64;
    let mut step = 1.0_f64;
    for _ in 0..max_iters {
        let (fy, gy) = eval(&y);
        // backtracking from the extrapolation point
        let new_x = loop {
            let shifted: Vec<f64> = y.iter().zip(&gy).map(|(&v, &g)| v - step * g).collect();
            let cand = prox(&shifted, step);
            let (fc, _) = eval(&cand);
            let mut dot = 0.0;
            let mut dist2 = 0.0;
            for ((&c, &o), &g) in cand.iter().zip(&y).zip(&gy) {
                let delta = c - o;
                dot += g * delta;
                dist2 += delta * delta;
            }
            if fc <= fy + dot + dist2 / (2.0 * step) + 1e-15 || step < 1e-12 {
                break cand;
            }
            step *= 0.5;
        };

        // proximal-gradient norm at the new iterate
        let (_, gx) = eval(&new_x);
        let shifted: Vec<f64> = new_x.iter().zip(&gx).map(|(&v, &g)| v - step * g).collect();
        let px = prox(&shifted, step);
        let grad_norm = new_x
            .iter()
            .zip(&px)
            .map(|(&a, &b)| ((a - b) / step) * ((a - b) / step))
            .sum::<f64>()
            .sqrt();
        if grad_norm <= tolerance {
            return Ok(LayerProbe {
                weights: new_x[..d].to_vec(),
                bias: new_x[d],
                scaler_mean: mean_v,
                scaler_std: std_v,
            });
        }

        // adaptive restart: kill momentum when it points uphill
        let uphill: f64 = y
            .iter()
            .zip(&new_x)
            .zip(&x)
            .map(|((&yy, &nx), &ox)| (yy - nx) * (nx - ox))
            .sum();
        if uphill > 0.0 {
            momentum = 1.0;
            y = new_x.clone();
        } else {
            let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let coeff = (momentum - 1.0) / next_momentum;
            y = new_x
                .iter()
                .zip(&x)
                .map(|(&nx, &ox)| nx + coeff * (nx - ox))
                .collect();
            momentum = next_momentum;
        }
        x = new_x;
        step = (step * 2.0).min(1e6);
    }
    let (_, g) = eval(&x);
    let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    Err(ProbeError::NonConvergence {
        iters: max_iters,
        grad_norm,
    })
}

/// Figure-3-shaped report: per-layer mean confidences of the correct-rule
/// and corrupted-rule probes under the all-correct and one-corrupted
/// scenarios, plus a rule-absent chance baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub episodes: usize,
    pub k: usize,
    pub correct_all_correct: Vec<f64>,
    pub correct_one_corrupted: Vec<f64>,
    pub corrupted_all_correct: Vec<f64>,
    pub corrupted_one_corrupted: Vec<f64>,
    /// Mean probe confidence on control episodes that exclude the probe's
    /// rule entirely (the chance baseline).
    pub baseline: Vec<f64>,
    /// One-sided bootstrap p-value per layer for "corrupted-rule confidence
    /// under one-corruption rises above the baseline".
    pub corrupted_rise_p: Vec<f64>,
}

pub fn evaluate_two_scenarios(
    probes: &[ProbeModel],
    model: &TransformerModel<f32>,
    vocab: &Vocab,
    family: &RuleFamily,
    k: usize,
    n_episodes: usize,
    rng: &Rng,
) -> Result<ProbeReport, ProbeError> {
    if probes.len() != family.n_rules() {
        return Err(ProbeError::MissingProbes {
            have: probes.len(),
            need: family.n_rules(),
        });
    }
    let n_boundaries = model.config.n_layers + 1;

    struct EpisodeConf {
        correct_all: Vec<f64>,
        correct_one: Vec<f64>,
        corrupted_all: Vec<f64>,
        corrupted_one: Vec<f64>,
        baseline_true: Vec<f64>,
        baseline_wrong: Vec<f64>,
    }

    let per_episode: Vec<EpisodeConf> = (0..n_episodes)
        .into_par_iter()
        .map(|e| -> Result<EpisodeConf, ProbeError> {
            let mut erng = rng.derive_many(&[TAG_SCENARIO, e as u64]);
            let true_rule = RuleId(erng.usize_below(family.n_rules()));
            let wrong_rule = other_rule(family, true_rule, &mut erng);

            let all_correct =
                craft_mixed_episode(family, true_rule, &vec![true_rule; k], &mut erng)?;
            let mut mixed_rules = vec![true_rule; k - 1];
            mixed_rules.push(wrong_rule);
            erng.shuffle(&mut mixed_rules);
            let one_corrupted =
                craft_mixed_episode(family, true_rule, &mixed_rules, &mut erng)?;
            // controls exclude a rule entirely, giving each probe's
            // rule-absent chance level
            let control_true: Vec<RuleId> = (0..k)
                .map(|_| other_rule(family, true_rule, &mut erng))
                .collect();
            let control_true =
                craft_mixed_episode(family, true_rule, &control_true, &mut erng)?;
            let control_wrong: Vec<RuleId> = (0..k)
                .map(|_| other_rule(family, wrong_rule, &mut erng))
                .collect();
            let control_wrong =
                craft_mixed_episode(family, wrong_rule, &control_wrong, &mut erng)?;

            let f_all = forerunner_features(model, vocab, &all_correct)?;
            let f_one = forerunner_features(model, vocab, &one_corrupted)?;
            let f_ctrl_true = forerunner_features(model, vocab, &control_true)?;
            let f_ctrl_wrong = forerunner_features(model, vocab, &control_wrong)?;

            let conf = |probe: &ProbeModel, feats: &[Vec<f64>]| -> Vec<f64> {
                probe
                    .layers
                    .iter()
                    .zip(feats)
                    .map(|(p, h)| p.confidence(h))
                    .collect()
            };
            Ok(EpisodeConf {
                correct_all: conf(&probes[true_rule.0], &f_all),
                correct_one: conf(&probes[true_rule.0], &f_one),
                corrupted_all: conf(&probes[wrong_rule.0], &f_all),
                corrupted_one: conf(&probes[wrong_rule.0], &f_one),
                baseline_true: conf(&probes[true_rule.0], &f_ctrl_true),
                baseline_wrong: conf(&probes[wrong_rule.0], &f_ctrl_wrong),
            })
        })
        .collect::<Result<_, _>>()?;

    let layer_mean = |extract: &dyn Fn(&EpisodeConf) -> &Vec<f64>| -> Vec<f64> {
        (0..n_boundaries)
            .map(|b| mean(&per_episode.iter().map(|c| extract(c)[b]).collect::<Vec<_>>()))
            .collect()
    };
    let baseline: Vec<f64> = (0..n_boundaries)
        .map(|b| {
            let vals: Vec<f64> = per_episode
                .iter()
                .flat_map(|c| [c.baseline_true[b], c.baseline_wrong[b]])
                .collect();
            mean(&vals)
        })
        .collect();

    // one-sided bootstrap: is the corrupted probe's one-corruption
    // confidence above its own rule-absent control?
    let mut corrupted_rise_p = Vec::with_capacity(n_boundaries);
    for b in 0..n_boundaries {
        let diffs: Vec<f64> = per_episode
            .iter()
            .map(|c| c.corrupted_one[b] - c.baseline_wrong[b])
            .collect();
        let mut brng = rng.derive_many(&[TAG_BOOT, b as u64]);
        let mut at_or_below = 0usize;
        const RESAMPLES: usize = 1000;
        for _ in 0..RESAMPLES {
            let mut total = 0.0;
            for _ in 0..diffs.len() {
                total += diffs[brng.usize_below(diffs.len())];
            }
            if total / diffs.len() as f64 <= 0.0 {
                at_or_below += 1;
            }
        }
        corrupted_rise_p.push(at_or_below as f64 / RESAMPLES as f64);
    }

    Ok(ProbeReport {
        episodes: n_episodes,
        k,
        correct_all_correct: layer_mean(&|c| &c.correct_all),
        correct_one_corrupted: layer_mean(&|c| &c.correct_one),
        corrupted_all_correct: layer_mean(&|c| &c.corrupted_all),
        corrupted_one_corrupted: layer_mean(&|c| &c.corrupted_one),
        baseline,
        corrupted_rise_p,
    })
}

/// The answer value a crafted episode's demo evidences; used in tests.
pub fn demo_evidences_rule(family: &RuleFamily, demo: &Demo, rule: RuleId) -> bool {
    family
        .apply(rule, &demo.x)
        .map(|y| y == demo.y)
        .unwrap_or(false)
}

#[allow(dead_code)]
fn answer_of(demo: &Demo) -> AnswerValue {
    demo.y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn test_model() -> (TransformerModel<f32>, Vocab) {
        let vocab = Vocab::standard();
        let config = ModelConfig::new(2, 2, 32, 64, vocab.size(), 64).unwrap();
        (TransformerModel::init(&config, &mut Rng::new(3)), vocab)
    }

    #[test]
    fn dataset_structure_matches_the_balanced_design() {
        let (model, vocab) = test_model();
        let family = RuleFamily::operator_induction();
        let ds = build_probe_dataset(
            &model,
            &vocab,
            &family,
            RuleId(0),
            80,
            4,
            &Rng::new(1),
        )
        .unwrap();
        assert_eq!(ds.n_samples(), 80);
        assert_eq!(ds.labels.iter().filter(|&&l| l).count(), 40);
        // positives split 10 per coverage bucket
        for bucket in 1..=4 {
            let frac = bucket as f64 / 4.0;
            let count = ds
                .labels
                .iter()
                .zip(&ds.coverage)
                .filter(|&(&l, &c)| l && (c - frac).abs() < 1e-9)
                .count();
            assert_eq!(count, 10, "bucket {bucket}");
        }
        assert_eq!(ds.n_boundaries(), model.config.n_layers + 1);
    }

    #[test]
    fn dataset_rejects_misaligned_sample_counts() {
        let (model, vocab) = test_model();
        let family = RuleFamily::operator_induction();
        assert!(matches!(
            build_probe_dataset(&model, &vocab, &family, RuleId(0), 81, 4, &Rng::new(1)),
            Err(ProbeError::BadSampleCount { .. })
        ));
    }

    #[test]
    fn negatives_never_contain_the_target_rule() {
        let family = RuleFamily::operator_induction();
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let target = RuleId(rng.usize_below(3));
            let rules: Vec<RuleId> = (0..4).map(|_| other_rule(&family, target, &mut rng)).collect();
            let inst = craft_mixed_episode(&family, target, &rules, &mut rng).unwrap();
            // no demo may evidence the target (rules differ on the drawn
            // operands unless they collide; collisions can evidence the
            // target spuriously, so check rule identity, not output)
            assert!(rules.iter().all(|&r| r != target));
            assert_eq!(inst.demos.len(), 4);
        }
    }

    #[test]
    fn crafted_demos_follow_their_rules() {
        let family = RuleFamily::fake_word_inference();
        let mut rng = Rng::new(6);
        let rules = vec![RuleId(0), RuleId(3), RuleId(0), RuleId(5)];
        let inst = craft_mixed_episode(&family, RuleId(0), &rules, &mut rng).unwrap();
        for (demo, &r) in inst.demos.iter().zip(&rules) {
            assert!(demo_evidences_rule(&family, demo, r));
        }
    }

    #[test]
    fn separable_clusters_reach_high_train_accuracy() {
        // two Gaussian clusters 10 sigma apart
        let mut rng = Rng::new(7);
        let d = 8;
        let n = 200;
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let positive = i % 2 == 0;
            let center = if positive { 5.0 } else { -5.0 };
            rows.push(
                (0..d)
                    .map(|_| center + rng.normal_f64())
                    .collect::<Vec<f64>>(),
            );
            labels.push(if positive { 1.0 } else { 0.0 });
        }
        let probe = fit_logistic_l1(&rows, &labels, 1e-3, 1e-6, 20_000).unwrap();
        let correct = rows
            .iter()
            .zip(&labels)
            .filter(|(row, &y)| (probe.confidence(row) >= 0.5) == (y == 1.0))
            .count();
        let acc = correct as f64 / n as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn huge_l1_strength_collapses_to_base_rate() {
        let mut rng = Rng::new(8);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..4).map(|_| rng.normal_f64()).collect())
            .collect();
        let labels: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let probe = fit_logistic_l1(&rows, &labels, 1e9, 1e-6, 20_000).unwrap();
        assert!(probe.weights.iter().all(|&w| w == 0.0));
        for row in &rows {
            assert!((probe.confidence(row) - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicating_every_sample_changes_nothing_within_tolerance() {
        let mut rng = Rng::new(9);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let base = if i % 2 == 0 { 1.0 } else { -1.0 };
                (0..5).map(|_| base + 0.5 * rng.normal_f64()).collect()
            })
            .collect();
        let labels: Vec<f64> = (0..60).map(|i| (i % 2 == 0) as u8 as f64).collect();
        let doubled_rows: Vec<Vec<f64>> = rows.iter().chain(rows.iter()).cloned().collect();
        let doubled_labels: Vec<f64> = labels.iter().chain(labels.iter()).copied().collect();
        let a = fit_logistic_l1(&rows, &labels, 1e-3, 1e-8, 50_000).unwrap();
        let b = fit_logistic_l1(&doubled_rows, &doubled_labels, 1e-3, 1e-8, 50_000).unwrap();
        for row in &rows {
            assert!((a.confidence(row) - b.confidence(row)).abs() < 1e-3);
        }
    }

    #[test]
    fn refitting_a_scaler_on_standardized_features_is_identity() {
        let mut rng = Rng::new(10);
        let rows: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..6).map(|_| 3.0 + 2.0 * rng.normal_f64()).collect())
            .collect();
        let labels: Vec<f64> = (0..80).map(|i| (i % 2) as f64).collect();
        let probe = fit_logistic_l1(&rows, &labels, 1e-2, 1e-5, 20_000).unwrap();
        let standardized: Vec<Vec<f64>> = rows.iter().map(|r| probe.standardize(r)).collect();
        let probe2 = fit_logistic_l1(&standardized, &labels, 1e-2, 1e-5, 20_000).unwrap();
        for (m, s) in probe2.scaler_mean.iter().zip(&probe2.scaler_std) {
            assert!(m.abs() < 1e-9, "mean {m}");
            assert!((s - 1.0).abs() < 1e-9, "std {s}");
        }
        for r in &standardized[..5] {
            let again = probe2.standardize(r);
            for (a, b) in r.iter().zip(&again) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dataset_and_training_are_deterministic() {
        let (model, vocab) = test_model();
        let family = RuleFamily::operator_induction();
        let build = || {
            let ds = build_probe_dataset(
                &model,
                &vocab,
                &family,
                RuleId(1),
                40,
                4,
                &Rng::new(11),
            )
            .unwrap();
            train_probe(&ds, &TrainProbeOptions::default()).unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
    }

    #[test]
    fn two_scenario_report_has_one_value_per_boundary() {
        let (model, vocab) = test_model();
        let family = RuleFamily::operator_induction();
        let probes: Vec<ProbeModel> = family
            .rule_ids()
            .map(|r| {
                let ds = build_probe_dataset(&model, &vocab, &family, r, 24, 4, &Rng::new(12))
                    .unwrap();
                train_probe(&ds, &TrainProbeOptions::default()).unwrap()
            })
            .collect();
        let report =
            evaluate_two_scenarios(&probes, &model, &vocab, &family, 4, 10, &Rng::new(13))
                .unwrap();
        let n_boundaries = model.config.n_layers + 1;
        for arr in [
            &report.correct_all_correct,
            &report.correct_one_corrupted,
            &report.corrupted_all_correct,
            &report.corrupted_one_corrupted,
            &report.baseline,
        ] {
            assert_eq!(arr.len(), n_boundaries);
            assert!(arr.iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
        assert_eq!(report.corrupted_rise_p.len(), n_boundaries);
    }

    #[test]
    fn missing_probes_are_rejected() {
        let (model, vocab) = test_model();
        let family = RuleFamily::operator_induction();
        assert!(matches!(
            evaluate_two_scenarios(&[], &model, &vocab, &family, 4, 5, &Rng::new(1)),
            Err(ProbeError::MissingProbes { .. })
        ));
    }
}

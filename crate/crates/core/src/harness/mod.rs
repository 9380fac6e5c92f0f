//! Paired clean/corrupted evaluation: degradation per corruption position,
//! positional bias, adoption of the corrupted rule, and next-token entropy.
//!
//! Every (query, position, rollout) cell evaluates a clean/corrupted pair
//! sharing all randomness except the corruption, so per-position accuracy
//! drops are differences over identical episodes, not across different
//! samples.

pub mod stats;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EpisodeResponder, ModelError};
use crate::numcore::Rng;
use crate::tasks::{
    corrupt, sample_episode, AnswerValue, CorruptionSpec, DemoInput, RuleFamily, RuleId,
    TaskError, TaskInstance,
};
use stats::{
    bootstrap_mean_ci, entropy_nats, mean, paired_t_test, population_variance, sample_std,
    BootstrapCi, PairedTTest,
};

const TAG_EPISODE: u64 = 0xE01;
const TAG_CORRUPT: u64 = 0xC02;
const TAG_BOOTSTRAP: u64 = 0xB03;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("positional bias needs at least 2 positions, got {0}")]
    TooFewPositions(usize),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("non-discriminative episode: rules collide on the query")]
    NonDiscriminative,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// One row of the flat per-episode table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query: usize,
    /// Corruption position, 1-based.
    pub position: usize,
    pub rollout: usize,
    pub corrupted_rule: RuleId,
    pub clean_correct: bool,
    pub corrupted_correct: bool,
    /// Answer emitted in the corrupted arm when it flipped correct -> wrong.
    pub wrong_answer: Option<AnswerValue>,
    /// The unique rule the wrong answer corresponds to, if any.
    pub wrong_rule: Option<RuleId>,
    /// Did the wrong answer equal the corrupted rule applied to the query?
    pub adopted: Option<bool>,
    pub entropy_clean_steps: Vec<f64>,
    pub entropy_corrupted_steps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub mean: f64,
    pub std: f64,
    pub n_steps: usize,
}

/// Aggregated results of a corruption sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub family: String,
    pub k: usize,
    pub n_queries: usize,
    pub rollouts: usize,
    pub seed: u64,
    pub clean_accuracy: f64,
    pub clean_accuracy_ci: BootstrapCi,
    /// Indexed by position - 1.
    pub corrupted_accuracy: Vec<f64>,
    /// clean - corrupted per position; positive means harm.
    pub delta_acc: Vec<f64>,
    pub delta_acc_ci: Vec<BootstrapCi>,
    /// Population variance of delta_acc over positions.
    pub positional_bias: f64,
    /// None when no correct -> wrong flips occurred (undefined, not 0).
    pub adoption_rate: Option<f64>,
    /// Per-position adoption; an extension over the aggregate the paper
    /// reports.
    pub adoption_by_position: Vec<Option<f64>>,
    pub flips: usize,
    pub entropy_clean: EntropyStats,
    pub entropy_corrupted: EntropyStats,
    /// Per-position paired t-test over (clean - corrupted) outcomes.
    pub t_tests: Vec<Option<PairedTTest>>,
}

/// Positional bias: population variance of the per-position accuracy drops.
pub fn positional_bias(delta_acc: &[f64]) -> Result<f64, HarnessError> {
    if delta_acc.len() < 2 {
        return Err(HarnessError::TooFewPositions(delta_acc.len()));
    }
    Ok(population_variance(delta_acc))
}

/// One correct -> wrong flip, for adoption accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub wrong_answer: AnswerValue,
    pub query: DemoInput,
    pub true_rule: RuleId,
    pub corrupted_rule: RuleId,
}

/// Fraction of flips whose wrong answer equals the corrupted rule applied
/// to the query. Wrong answers matching no rule count as non-adoption.
/// Returns None (an explicit empty marker) when there are no flips.
pub fn adoption_rate(
    family: &RuleFamily,
    flips: &[FlipRecord],
) -> Result<Option<f64>, HarnessError> {
    if flips.is_empty() {
        return Ok(None);
    }
    let mut adopted = 0usize;
    for flip in flips {
        if !family.is_discriminative(&flip.query) {
            return Err(HarnessError::NonDiscriminative);
        }
        let corrupted_answer = family.apply(flip.corrupted_rule, &flip.query)?;
        if flip.wrong_answer == corrupted_answer {
            adopted += 1;
        }
    }
    Ok(Some(adopted as f64 / flips.len() as f64))
}

/// Mean and sample std of per-step next-token entropy, in nats.
pub fn next_token_entropy(distributions: &[Vec<f64>]) -> Result<EntropyStats, HarnessError> {
    let entropies: Vec<f64> = distributions
        .iter()
        .map(|d| entropy_nats(d).map_err(HarnessError::InvalidDistribution))
        .collect::<Result<_, _>>()?;
    Ok(entropy_stats_of(&entropies))
}

fn entropy_stats_of(entropies: &[f64]) -> EntropyStats {
    if entropies.is_empty() {
        return EntropyStats {
            mean: 0.0,
            std: 0.0,
            n_steps: 0,
        };
    }
    EntropyStats {
        mean: mean(entropies),
        std: sample_std(entropies),
        n_steps: entropies.len(),
    }
}

fn step_entropies(dists: &[Vec<f64>]) -> Result<Vec<f64>, HarnessError> {
    dists
        .iter()
        .map(|d| entropy_nats(d).map_err(HarnessError::InvalidDistribution))
        .collect()
}

/// The rule (if any) whose answer on the query matches the emitted value.
/// Unique on discriminative episodes.
fn matching_rule(family: &RuleFamily, query: &DemoInput, value: AnswerValue) -> Option<RuleId> {
    family
        .rule_ids()
        .find(|&r| family.apply(r, query).expect("rule in range") == value)
}

/// Runs the paired corruption sweep: for every query, position, and
/// rollout, evaluates the same episode clean and corrupted at that
/// position. The corrupted rule is sampled uniformly from the wrong rules
/// per rollout.
pub fn evaluate_corruption_sweep(
    responder: &dyn EpisodeResponder,
    family: &RuleFamily,
    k: usize,
    n_queries: usize,
    rollouts: usize,
    rng: &Rng,
) -> Result<EvalReport, HarnessError> {
    if k < 3 {
        return Err(HarnessError::Task(TaskError::MajorityViolated { k }));
    }
    assert!(n_queries > 0 && rollouts > 0);

    // per-query base episodes, sampled from derived streams
    let episodes: Vec<TaskInstance> = (0..n_queries)
        .map(|q| {
            let mut erng = rng.derive_many(&[TAG_EPISODE, q as u64]);
            sample_episode(family, k, &mut erng, true)
        })
        .collect::<Result<_, _>>()?;

    // evaluate each base episode once; reused whenever the paired clean
    // instance is identical to the base
    let base_answers: Vec<(bool, Vec<f64>, Option<AnswerValue>)> = episodes
        .par_iter()
        .map(|inst| {
            let ans = responder.respond(inst)?;
            let gold = inst.gold_answer();
            let entropies = step_entropies(&ans.distributions)?;
            Ok((ans.value == Some(gold), entropies, ans.value))
        })
        .collect::<Result<_, HarnessError>>()?;

    let cells: Vec<(usize, usize, usize)> = (0..n_queries)
        .flat_map(|q| {
            (1..=k).flat_map(move |p| (0..rollouts).map(move |t| (q, p, t)))
        })
        .collect();

    let records: Vec<EvalRecord> = cells
        .par_iter()
        .map(|&(q, p, t)| -> Result<EvalRecord, HarnessError> {
            let base = &episodes[q];
            let mut crng =
                rng.derive_many(&[TAG_CORRUPT, q as u64, p as u64, t as u64]);
            // corrupted rule resampled per rollout
            let offset = 1 + crng.usize_below(family.n_rules() - 1);
            let wrong = RuleId((base.rule.0 + offset) % family.n_rules());
            let corrupted = corrupt(
                base,
                CorruptionSpec {
                    position: p,
                    rule: wrong,
                },
                &mut crng,
            )?;
            let paired_clean = corrupted.paired_clean();

            let (clean_correct, clean_entropies) = if paired_clean == *base {
                let (c, e, _) = &base_answers[q];
                (*c, e.clone())
            } else {
                let ans = responder.respond(&paired_clean)?;
                (
                    ans.value == Some(paired_clean.gold_answer()),
                    step_entropies(&ans.distributions)?,
                )
            };

            let gold = corrupted.gold_answer();
            let cans = responder.respond(&corrupted)?;
            let corrupted_correct = cans.value == Some(gold);
            let corrupted_entropies = step_entropies(&cans.distributions)?;

            let flipped = clean_correct && !corrupted_correct;
            let wrong_answer = if flipped { cans.value } else { None };
            let wrong_rule = wrong_answer
                .and_then(|v| matching_rule(&corrupted.family, &corrupted.query, v));
            let adopted = wrong_answer.map(|v| {
                corrupted.family.apply(wrong, &corrupted.query).expect("in range") == v
            });

            Ok(EvalRecord {
                query: q,
                position: p,
                rollout: t,
                corrupted_rule: wrong,
                clean_correct,
                corrupted_correct,
                wrong_answer,
                wrong_rule,
                adopted,
                entropy_clean_steps: clean_entropies,
                entropy_corrupted_steps: corrupted_entropies,
            })
        })
        .collect::<Result<_, _>>()?;

    Ok(build_report(
        family,
        k,
        n_queries,
        rollouts,
        rng.seed(),
        records,
    ))
}

/// Aggregates per-cell records into a report. Records are sorted by
/// (query, position, rollout) first, so aggregation is independent of input
/// order.
pub fn build_report(
    family: &RuleFamily,
    k: usize,
    n_queries: usize,
    rollouts: usize,
    seed: u64,
    mut records: Vec<EvalRecord>,
) -> EvalReport {
    records.sort_by_key(|r| (r.query, r.position, r.rollout));

    let as01 = |b: bool| if b { 1.0 } else { 0.0 };
    let clean_values: Vec<f64> = records.iter().map(|r| as01(r.clean_correct)).collect();
    let clean_accuracy = mean(&clean_values);

    // bootstrap over queries: per-query mean outcomes
    let per_query_clean: Vec<f64> = (0..n_queries)
        .map(|q| {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.query == q)
                .map(|r| as01(r.clean_correct))
                .collect();
            mean(&vals)
        })
        .collect();
    let mut brng = Rng::new(seed).derive(TAG_BOOTSTRAP);
    let clean_accuracy_ci = bootstrap_mean_ci(&per_query_clean, 0.95, &mut brng);

    let mut corrupted_accuracy = Vec::with_capacity(k);
    let mut delta_acc = Vec::with_capacity(k);
    let mut delta_acc_ci = Vec::with_capacity(k);
    let mut adoption_by_position = Vec::with_capacity(k);
    let mut t_tests = Vec::with_capacity(k);
    for p in 1..=k {
        let at_p: Vec<&EvalRecord> = records.iter().filter(|r| r.position == p).collect();
        let corr: Vec<f64> = at_p.iter().map(|r| as01(r.corrupted_correct)).collect();
        corrupted_accuracy.push(mean(&corr));
        let diffs: Vec<f64> = at_p
            .iter()
            .map(|r| as01(r.clean_correct) - as01(r.corrupted_correct))
            .collect();
        delta_acc.push(mean(&diffs));
        let per_query_diff: Vec<f64> = (0..n_queries)
            .map(|q| {
                let vals: Vec<f64> = at_p
                    .iter()
                    .filter(|r| r.query == q)
                    .map(|r| as01(r.clean_correct) - as01(r.corrupted_correct))
                    .collect();
                mean(&vals)
            })
            .collect();
        let mut brng = Rng::new(seed).derive_many(&[TAG_BOOTSTRAP, p as u64]);
        delta_acc_ci.push(bootstrap_mean_ci(&per_query_diff, 0.95, &mut brng));
        let flips_at_p: Vec<&&EvalRecord> =
            at_p.iter().filter(|r| r.adopted.is_some()).collect();
        adoption_by_position.push(if flips_at_p.is_empty() {
            None
        } else {
            Some(
                flips_at_p.iter().filter(|r| r.adopted == Some(true)).count() as f64
                    / flips_at_p.len() as f64,
            )
        });
        t_tests.push(paired_t_test(&diffs));
    }

    let flips = records.iter().filter(|r| r.adopted.is_some()).count();
    let adoption_rate = if flips == 0 {
        None
    } else {
        Some(
            records.iter().filter(|r| r.adopted == Some(true)).count() as f64 / flips as f64,
        )
    };

    let clean_entropies: Vec<f64> = records
        .iter()
        .flat_map(|r| r.entropy_clean_steps.iter().copied())
        .collect();
    let corrupted_entropies: Vec<f64> = records
        .iter()
        .flat_map(|r| r.entropy_corrupted_steps.iter().copied())
        .collect();

    let positional_bias = population_variance(&delta_acc);

    EvalReport {
        family: family_name(family),
        k,
        n_queries,
        rollouts,
        seed,
        clean_accuracy,
        clean_accuracy_ci,
        corrupted_accuracy,
        delta_acc,
        delta_acc_ci,
        positional_bias,
        adoption_rate,
        adoption_by_position,
        flips,
        entropy_clean: entropy_stats_of(&clean_entropies),
        entropy_corrupted: entropy_stats_of(&corrupted_entropies),
        t_tests,
    }
}

pub fn family_name(family: &RuleFamily) -> String {
    match family {
        RuleFamily::OperatorInduction { .. } => "operator-induction".into(),
        RuleFamily::FakeWordInference { .. } => "fake-word-inference".into(),
    }
}

/// Flat per-episode table as CSV.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(
        "query,position,rollout,corrupted_rule,clean_correct,corrupted_correct,wrong_answer,adopted_rule\n",
    );
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.query, r.position, r.rollout));
    for r in sorted {
        let wrong = match r.wrong_answer {
            Some(AnswerValue::Int(v)) => v.to_string(),
            Some(AnswerValue::Color(c)) => crate::tasks::vocab::COLOR_WORDS[c].to_string(),
            None => String::new(),
        };
        let adopted_rule = match r.wrong_rule {
            Some(rule) => rule.0.to_string(),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.query,
            r.position,
            r.rollout,
            r.corrupted_rule.0,
            r.clean_correct as u8,
            r.corrupted_correct as u8,
            wrong,
            adopted_rule
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OracleModel;
    use crate::tasks::Operator;

    #[test]
    fn positional_bias_fixtures() {
        assert_eq!(positional_bias(&[0.1, 0.1, 0.1, 0.1]).unwrap(), 0.0);
        assert!((positional_bias(&[0.0, 0.2, 0.2, 0.0]).unwrap() - 0.01).abs() < 1e-12);
        assert!((positional_bias(&[0.0, 0.0, 0.0, 1.0]).unwrap() - 0.1875).abs() < 1e-12);
        assert!(matches!(
            positional_bias(&[0.5]),
            Err(HarnessError::TooFewPositions(1))
        ));
    }

    #[test]
    fn majority_oracle_shows_zero_degradation_and_zero_pb() {
        let family = RuleFamily::operator_induction();
        let report = evaluate_corruption_sweep(
            &OracleModel::Majority,
            &family,
            4,
            20,
            3,
            &Rng::new(7),
        )
        .unwrap();
        assert_eq!(report.clean_accuracy, 1.0);
        for p in 0..4 {
            assert_eq!(report.delta_acc[p], 0.0);
            assert_eq!(report.corrupted_accuracy[p], 1.0);
        }
        assert_eq!(report.positional_bias, 0.0);
        assert_eq!(report.adoption_rate, None);
        assert_eq!(report.flips, 0);
    }

    #[test]
    fn recency_oracle_shows_the_exact_last_position_pattern() {
        let family = RuleFamily::operator_induction();
        let report = evaluate_corruption_sweep(
            &OracleModel::Recency,
            &family,
            4,
            25,
            3,
            &Rng::new(8),
        )
        .unwrap();
        assert_eq!(report.delta_acc, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(report.positional_bias, 0.1875);
        // every flip adopted the corrupted rule
        assert_eq!(report.adoption_rate, Some(1.0));
        assert_eq!(report.adoption_by_position, vec![None, None, None, Some(1.0)]);
    }

    #[test]
    fn recency_pattern_holds_on_fake_word_task_too() {
        let family = RuleFamily::fake_word_inference();
        let report = evaluate_corruption_sweep(
            &OracleModel::Recency,
            &family,
            4,
            10,
            2,
            &Rng::new(9),
        )
        .unwrap();
        assert_eq!(report.delta_acc, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(report.positional_bias, 0.1875);
    }

    #[test]
    fn sweep_is_reproducible_from_the_seed() {
        let family = RuleFamily::operator_induction();
        let a = evaluate_corruption_sweep(&OracleModel::Recency, &family, 4, 10, 2, &Rng::new(3))
            .unwrap();
        let b = evaluate_corruption_sweep(&OracleModel::Recency, &family, 4, 10, 2, &Rng::new(3))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregation_is_order_independent() {
        let family = RuleFamily::operator_induction();
        let report = evaluate_corruption_sweep(
            &OracleModel::Recency,
            &family,
            4,
            12,
            2,
            &Rng::new(11),
        )
        .unwrap();
        // rebuild from shuffled records
        let records: Vec<EvalRecord> = {
            // reconstruct the records by re-running; then shuffle
            let mut recs = sweep_records(&family, 12, 2, 11);
            let mut rng = Rng::new(99);
            rng.shuffle(&mut recs);
            recs
        };
        let rebuilt = build_report(&family, 4, 12, 2, 11, records);
        assert_eq!(report, rebuilt);
    }

    fn sweep_records(family: &RuleFamily, n: usize, t: usize, seed: u64) -> Vec<EvalRecord> {
        // helper: run the sweep and pull records by regenerating them
        // through the public API (records are deterministic in the seed)
        let mut out = Vec::new();
        let rng = Rng::new(seed);
        for q in 0..n {
            let mut erng = rng.derive_many(&[TAG_EPISODE, q as u64]);
            let base = sample_episode(family, 4, &mut erng, true).unwrap();
            for p in 1..=4 {
                for rollout in 0..t {
                    let mut crng =
                        rng.derive_many(&[TAG_CORRUPT, q as u64, p as u64, rollout as u64]);
                    let offset = 1 + crng.usize_below(family.n_rules() - 1);
                    let wrong = RuleId((base.rule.0 + offset) % family.n_rules());
                    let corrupted = corrupt(
                        &base,
                        CorruptionSpec {
                            position: p,
                            rule: wrong,
                        },
                        &mut crng,
                    )
                    .unwrap();
                    let clean = corrupted.paired_clean();
                    let gold = corrupted.gold_answer();
                    let cans = OracleModel::Recency.respond(&corrupted).unwrap();
                    let kans = OracleModel::Recency.respond(&clean).unwrap();
                    let clean_correct = kans.value == Some(gold);
                    let corrupted_correct = cans.value == Some(gold);
                    let flipped = clean_correct && !corrupted_correct;
                    let wrong_answer = if flipped { cans.value } else { None };
                    let wrong_rule = wrong_answer
                        .and_then(|v| matching_rule(family, &corrupted.query, v));
                    let adopted = wrong_answer
                        .map(|v| family.apply(wrong, &corrupted.query).unwrap() == v);
                    out.push(EvalRecord {
                        query: q,
                        position: p,
                        rollout,
                        corrupted_rule: wrong,
                        clean_correct,
                        corrupted_correct,
                        wrong_answer,
                        wrong_rule,
                        adopted,
                        entropy_clean_steps: vec![0.0],
                        entropy_corrupted_steps: vec![0.0],
                    });
                }
            }
        }
        out
    }

    #[test]
    fn adoption_rate_fixtures() {
        let family = RuleFamily::operator_induction();
        let query = DemoInput::Operands(6, 3);
        let add = RuleId(Operator::Add.index());
        let mul = RuleId(Operator::Mul.index());
        // all flips answer r'(x_q) = 18
        let flips = vec![
            FlipRecord {
                wrong_answer: AnswerValue::Int(18),
                query,
                true_rule: add,
                corrupted_rule: mul,
            };
            3
        ];
        assert_eq!(adoption_rate(&family, &flips).unwrap(), Some(1.0));
        // no flips: explicit empty marker
        assert_eq!(adoption_rate(&family, &[]).unwrap(), None);
        // an answer matching no rule counts as non-adoption
        let mixed = vec![
            FlipRecord {
                wrong_answer: AnswerValue::Int(18),
                query,
                true_rule: add,
                corrupted_rule: mul,
            },
            FlipRecord {
                wrong_answer: AnswerValue::Int(7),
                query,
                true_rule: add,
                corrupted_rule: mul,
            },
        ];
        assert_eq!(adoption_rate(&family, &mixed).unwrap(), Some(0.5));
        // non-discriminative queries are rejected
        let bad = vec![FlipRecord {
            wrong_answer: AnswerValue::Int(4),
            query: DemoInput::Operands(2, 2),
            true_rule: add,
            corrupted_rule: mul,
        }];
        assert!(matches!(
            adoption_rate(&family, &bad),
            Err(HarnessError::NonDiscriminative)
        ));
    }

    #[test]
    fn entropy_fixtures_and_bounds() {
        let uniform4 = vec![vec![0.25; 4]];
        let stats = next_token_entropy(&uniform4).unwrap();
        assert!((stats.mean - 4.0f64.ln()).abs() < 1e-9);
        let onehot = vec![vec![1.0, 0.0, 0.0]];
        assert_eq!(next_token_entropy(&onehot).unwrap().mean, 0.0);
        assert!(next_token_entropy(&[vec![0.7, 0.7]]).is_err());
    }

    #[test]
    fn csv_table_has_one_row_per_cell() {
        let family = RuleFamily::operator_induction();
        let records = sweep_records(&family, 3, 2, 5);
        let csv = records_to_csv(&records);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * 4 * 2);
        assert!(lines[0].starts_with("query,position,rollout"));
    }
}

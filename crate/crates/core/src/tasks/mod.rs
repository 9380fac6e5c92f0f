//! Synthetic rule-inference episodes: sampling, position-specific
//! corruption, and tokenization.
//!
//! Two families are implemented. Operator induction draws an arithmetic
//! rule (add, sub, mul over integers modulo m) and k input/output pairs;
//! fake-word inference draws a fake word, a color it maps to, and k
//! demonstrations of the mapping paired with varying fake object words.
//! Demonstrations are sampled independently, so each one carries equally
//! weighted evidence for the latent rule, and corrupting one demonstration
//! leaves the others untouched.

mod corpus;
pub mod encode;
pub mod vocab;

pub use corpus::{read_jsonl, write_jsonl};
pub use encode::{
    answer_token, encode, gold_token, training_targets, PromptMode, SegmentMap, Span,
};
pub use vocab::{Token, Vocab};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::Rng;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("corrupted rule equals the true rule")]
    SameRule,
    #[error("corruption position {position} outside 1..={k}")]
    PositionOutOfRange { position: usize, k: usize },
    #[error("majority rule needs k >= 3, got k = {k}")]
    MajorityViolated { k: usize },
    #[error("family cannot satisfy the request: {0}")]
    DegenerateFamily(String),
    #[error("vocabulary overflow: {0}")]
    VocabOverflow(String),
    #[error("rule id {0} outside hypothesis space of size {1}")]
    RuleOutOfRange(usize, usize),
}

/// Index into a family's hypothesis space. Ties break toward the lowest id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RuleId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operator {
    Add,
    Sub,
    Mul,
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Add, Operator::Sub, Operator::Mul];

    pub fn index(self) -> usize {
        match self {
            Operator::Add => 0,
            Operator::Sub => 1,
            Operator::Mul => 2,
        }
    }
}

/// Hypothesis space plus sampling ranges for one task family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleFamily {
    /// Arithmetic rules over integer operands. With a modulus the outputs are
    /// residues (the tokenizable form); without one they are plain signed
    /// integers (used only for rendering prompts to external models).
    OperatorInduction {
        modulus: Option<u32>,
        operand_lo: u32,
        operand_hi: u32,
    },
    /// Mappings from one fake word to a real color; demonstrations pair the
    /// word with varying fake object words.
    FakeWordInference {
        n_fake_words: usize,
        n_object_words: usize,
        n_colors: usize,
        n_objects: usize,
    },
}

impl RuleFamily {
    pub fn operator_induction() -> Self {
        RuleFamily::OperatorInduction {
            modulus: Some(Vocab::DEFAULT_MODULUS),
            operand_lo: 1,
            operand_hi: Vocab::DEFAULT_MODULUS - 1,
        }
    }

    /// Plain (non-modular) arithmetic over small operands, the surface form
    /// rendered for external models.
    pub fn operator_induction_plain() -> Self {
        RuleFamily::OperatorInduction {
            modulus: None,
            operand_lo: 2,
            operand_hi: 9,
        }
    }

    pub fn fake_word_inference() -> Self {
        RuleFamily::FakeWordInference {
            n_fake_words: vocab::FAKE_COLOR_WORDS.len(),
            n_object_words: vocab::FAKE_OBJECT_WORDS.len(),
            n_colors: vocab::COLOR_WORDS.len(),
            n_objects: vocab::OBJECT_WORDS.len(),
        }
    }

    pub fn n_rules(&self) -> usize {
        match self {
            RuleFamily::OperatorInduction { .. } => Operator::ALL.len(),
            RuleFamily::FakeWordInference { n_colors, .. } => *n_colors,
        }
    }

    pub fn rule_ids(&self) -> impl Iterator<Item = RuleId> {
        (0..self.n_rules()).map(RuleId)
    }

    /// Applies a rule to an input. Pure: same (rule, x) always gives the
    /// same y.
    pub fn apply(&self, rule: RuleId, x: &DemoInput) -> Result<AnswerValue, TaskError> {
        if rule.0 >= self.n_rules() {
            return Err(TaskError::RuleOutOfRange(rule.0, self.n_rules()));
        }
        match (self, x) {
            (RuleFamily::OperatorInduction { modulus, .. }, DemoInput::Operands(a, b)) => {
                let (a, b) = (*a as i64, *b as i64);
                let raw = match Operator::ALL[rule.0] {
                    Operator::Add => a + b,
                    Operator::Sub => a - b,
                    Operator::Mul => a * b,
                };
                let value = match modulus {
                    Some(m) => raw.rem_euclid(*m as i64),
                    None => raw,
                };
                Ok(AnswerValue::Int(value))
            }
            (RuleFamily::FakeWordInference { .. }, DemoInput::FakeWord { .. }) => {
                Ok(AnswerValue::Color(rule.0))
            }
            _ => Err(TaskError::DegenerateFamily(
                "input kind does not match family".into(),
            )),
        }
    }

    /// True when every pair of rules yields distinct answers on this input,
    /// so any wrong answer is attributable to a unique rule.
    pub fn is_discriminative(&self, x: &DemoInput) -> bool {
        let answers: Vec<AnswerValue> = self
            .rule_ids()
            .map(|r| self.apply(r, x).expect("rule in range"))
            .collect();
        for i in 0..answers.len() {
            for j in (i + 1)..answers.len() {
                if answers[i] == answers[j] {
                    return false;
                }
            }
        }
        true
    }

    fn sample_input(&self, rng: &mut Rng) -> DemoInput {
        match self {
            RuleFamily::OperatorInduction {
                operand_lo,
                operand_hi,
                ..
            } => {
                let span = (*operand_hi - *operand_lo + 1) as u64;
                DemoInput::Operands(
                    *operand_lo + rng.below(span) as u32,
                    *operand_lo + rng.below(span) as u32,
                )
            }
            RuleFamily::FakeWordInference { .. } => {
                unreachable!("fake-word inputs are drawn per episode")
            }
        }
    }
}

/// One demonstration input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemoInput {
    Operands(u32, u32),
    FakeWord { word: usize, object_word: usize },
}

/// A demonstration or query answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerValue {
    Int(i64),
    Color(usize),
}

/// One (input, output) demonstration. `object` is the real-object token
/// rendered after the color in fake-word demos; it is flavor, not evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub x: DemoInput,
    pub y: AnswerValue,
    pub object: Option<usize>,
}

/// Position-specific corruption: demonstration `position` (1-based) gets its
/// output replaced by `rule`'s output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub position: usize,
    pub rule: RuleId,
}

/// A k-shot episode: demonstrations, a query, the latent rule, and an
/// optional record of the corruption applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub family: RuleFamily,
    pub rule: RuleId,
    pub demos: Vec<Demo>,
    pub query: DemoInput,
    pub corruption: Option<CorruptionSpec>,
}

impl TaskInstance {
    pub fn k(&self) -> usize {
        self.demos.len()
    }

    /// The gold answer r*(x_q). Unaffected by corruption.
    pub fn gold_answer(&self) -> AnswerValue {
        self.family
            .apply(self.rule, &self.query)
            .expect("instance rule is in range")
    }

    /// The answer the corrupted rule would give on the query, when a
    /// corruption is recorded.
    pub fn corrupted_answer(&self) -> Option<AnswerValue> {
        self.corruption
            .map(|c| self.family.apply(c.rule, &self.query).expect("in range"))
    }

    /// The clean member of the pair: same demonstrations, with the corrupted
    /// output restored to r*(x_p). Clean and corrupted instances then differ
    /// only at that single output.
    pub fn paired_clean(&self) -> TaskInstance {
        let mut clean = self.clone();
        if let Some(spec) = clean.corruption.take() {
            let idx = spec.position - 1;
            let x = clean.demos[idx].x;
            clean.demos[idx].y = clean.family.apply(clean.rule, &x).expect("in range");
        }
        clean
    }
}

/// Samples a clean episode. With `discriminative` set, the query is
/// resampled until all rules in the hypothesis space yield pairwise distinct
/// answers on it.
pub fn sample_episode(
    family: &RuleFamily,
    k: usize,
    rng: &mut Rng,
    discriminative: bool,
) -> Result<TaskInstance, TaskError> {
    match family {
        RuleFamily::OperatorInduction { .. } => {
            let rule = RuleId(rng.usize_below(family.n_rules()));
            let demos = (0..k)
                .map(|_| {
                    let x = family.sample_input(rng);
                    Ok(Demo {
                        x,
                        y: family.apply(rule, &x)?,
                        object: None,
                    })
                })
                .collect::<Result<Vec<_>, TaskError>>()?;
            let mut query = family.sample_input(rng);
            if discriminative {
                let mut attempts = 0;
                while !family.is_discriminative(&query) {
                    attempts += 1;
                    if attempts > 10_000 {
                        return Err(TaskError::DegenerateFamily(
                            "no discriminative query found (ranges too tight)".into(),
                        ));
                    }
                    query = family.sample_input(rng);
                }
            }
            Ok(TaskInstance {
                family: family.clone(),
                rule,
                demos,
                query,
                corruption: None,
            })
        }
        RuleFamily::FakeWordInference {
            n_fake_words,
            n_object_words,
            n_colors,
            n_objects,
        } => {
            if *n_colors < 2 {
                return Err(TaskError::DegenerateFamily(
                    "fake-word inference needs at least 2 colors".into(),
                ));
            }
            if k + 1 > *n_object_words {
                return Err(TaskError::DegenerateFamily(format!(
                    "k = {k} demos plus a query need {} distinct object words, have {}",
                    k + 1,
                    n_object_words
                )));
            }
            let rule = RuleId(rng.usize_below(*n_colors));
            let word = rng.usize_below(*n_fake_words);
            // distinct fake object words for the demos and the query
            let mut pool: Vec<usize> = (0..*n_object_words).collect();
            rng.shuffle(&mut pool);
            let demos = (0..k)
                .map(|i| {
                    let x = DemoInput::FakeWord {
                        word,
                        object_word: pool[i],
                    };
                    Ok(Demo {
                        x,
                        y: family.apply(rule, &x)?,
                        object: Some(rng.usize_below(*n_objects)),
                    })
                })
                .collect::<Result<Vec<_>, TaskError>>()?;
            let query = DemoInput::FakeWord {
                word,
                object_word: pool[k],
            };
            Ok(TaskInstance {
                family: family.clone(),
                rule,
                demos,
                query,
                corruption: None,
            })
        }
    }
}

/// Applies position-specific corruption: demo `position`'s output becomes
/// the corrupted rule's output on its input. If the two rules coincide on
/// that input (the corruption would be invisible), the demo's operands are
/// resampled first.
pub fn corrupt(
    instance: &TaskInstance,
    spec: CorruptionSpec,
    rng: &mut Rng,
) -> Result<TaskInstance, TaskError> {
    let k = instance.k();
    if k < 3 {
        return Err(TaskError::MajorityViolated { k });
    }
    if spec.position == 0 || spec.position > k {
        return Err(TaskError::PositionOutOfRange {
            position: spec.position,
            k,
        });
    }
    if spec.rule == instance.rule {
        return Err(TaskError::SameRule);
    }
    if spec.rule.0 >= instance.family.n_rules() {
        return Err(TaskError::RuleOutOfRange(
            spec.rule.0,
            instance.family.n_rules(),
        ));
    }

    let mut out = instance.clone();
    let idx = spec.position - 1;
    let mut attempts = 0;
    loop {
        let x = out.demos[idx].x;
        let correct = out.family.apply(out.rule, &x)?;
        let corrupted = out.family.apply(spec.rule, &x)?;
        if correct != corrupted {
            out.demos[idx].y = corrupted;
            break;
        }
        attempts += 1;
        if attempts > 10_000 {
            return Err(TaskError::DegenerateFamily(
                "could not find operands where the rules disagree".into(),
            ));
        }
        out.demos[idx].x = out.family.sample_input(rng);
    }
    out.corruption = Some(spec);
    Ok(out)
}

/// Answer-token sets per rule for rule-naming prompts. Singletons in this
/// vocabulary: operator rules map to their rule word, fake-word rules to
/// their color word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTokenMap {
    sets: Vec<Vec<Token>>,
}

impl RuleTokenMap {
    pub fn for_family(family: &RuleFamily, vocab: &Vocab) -> Self {
        let sets: Vec<Vec<Token>> = match family {
            RuleFamily::OperatorInduction { .. } => (0..Operator::ALL.len())
                .map(|op| vec![vocab.rule_word(op)])
                .collect(),
            RuleFamily::FakeWordInference { n_colors, .. } => {
                (0..*n_colors).map(|c| vec![vocab.color(c)]).collect()
            }
        };
        // sets must be nonempty and pairwise disjoint
        for (i, a) in sets.iter().enumerate() {
            assert!(!a.is_empty());
            for b in sets.iter().skip(i + 1) {
                assert!(a.iter().all(|t| !b.contains(t)));
            }
        }
        RuleTokenMap { sets }
    }

    pub fn tokens(&self, rule: RuleId) -> &[Token] {
        &self.sets[rule.0]
    }

    pub fn n_rules(&self) -> usize {
        self.sets.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> Rng {
        Rng::new(2024)
    }

    #[test]
    fn operator_answers_on_6_3_are_distinct() {
        // enumerate the hypothesis space on the example query
        let family = RuleFamily::operator_induction();
        let x = DemoInput::Operands(6, 3);
        let answers: Vec<AnswerValue> = family
            .rule_ids()
            .map(|r| family.apply(r, &x).unwrap())
            .collect();
        assert_eq!(
            answers,
            vec![
                AnswerValue::Int(9),
                AnswerValue::Int(3),
                AnswerValue::Int(18)
            ]
        );
        assert!(family.is_discriminative(&x));
    }

    #[test]
    fn query_2_2_collides_and_is_rejected() {
        let family = RuleFamily::operator_induction();
        // add and mul both give 4
        assert!(!family.is_discriminative(&DemoInput::Operands(2, 2)));
    }

    #[test]
    fn discriminative_sampling_always_separates_rules() {
        let family = RuleFamily::operator_induction();
        let mut rng = rng();
        for _ in 0..500 {
            let inst = sample_episode(&family, 4, &mut rng, true).unwrap();
            assert!(family.is_discriminative(&inst.query));
        }
    }

    #[test]
    fn clean_episode_has_unanimous_evidence() {
        let mut rng = rng();
        for family in [
            RuleFamily::operator_induction(),
            RuleFamily::fake_word_inference(),
        ] {
            for _ in 0..200 {
                let inst = sample_episode(&family, 4, &mut rng, false).unwrap();
                for demo in &inst.demos {
                    assert_eq!(demo.y, family.apply(inst.rule, &demo.x).unwrap());
                }
            }
        }
    }

    #[test]
    fn fake_word_demos_share_the_queried_word() {
        let family = RuleFamily::fake_word_inference();
        let mut rng = rng();
        let inst = sample_episode(&family, 4, &mut rng, false).unwrap();
        let DemoInput::FakeWord { word: qword, .. } = inst.query else {
            panic!("fake-word query expected");
        };
        for demo in &inst.demos {
            let DemoInput::FakeWord { word, .. } = demo.x else {
                panic!("fake-word demo expected");
            };
            assert_eq!(word, qword);
            assert_eq!(demo.y, AnswerValue::Color(inst.rule.0));
        }
    }

    #[test]
    fn corrupt_changes_exactly_the_named_output() {
        // k=4, p=2, r*=add, r'=mul, x_2=(3,5): y_2 becomes 15
        let family = RuleFamily::operator_induction();
        let mut rng = rng();
        let mut inst = sample_episode(&family, 4, &mut rng, false).unwrap();
        inst.rule = RuleId(Operator::Add.index());
        for demo in &mut inst.demos {
            demo.y = family.apply(inst.rule, &demo.x).unwrap();
        }
        inst.demos[1].x = DemoInput::Operands(3, 5);
        inst.demos[1].y = AnswerValue::Int(8);

        let spec = CorruptionSpec {
            position: 2,
            rule: RuleId(Operator::Mul.index()),
        };
        let corrupted = corrupt(&inst, spec, &mut rng).unwrap();
        assert_eq!(corrupted.demos[1].y, AnswerValue::Int(15));
        // recompute all four outputs by rule application
        for (i, demo) in corrupted.demos.iter().enumerate() {
            let expected_rule = if i == 1 { spec.rule } else { inst.rule };
            assert_eq!(demo.y, family.apply(expected_rule, &demo.x).unwrap());
        }
        for i in [0, 2, 3] {
            assert_eq!(corrupted.demos[i], inst.demos[i]);
        }
    }

    #[test]
    fn restoring_the_corrupted_output_reproduces_the_original() {
        let family = RuleFamily::operator_induction();
        let mut rng = rng();
        // pick an instance where no operand resampling is needed
        let inst = loop {
            let cand = sample_episode(&family, 4, &mut rng, false).unwrap();
            let wrong = RuleId((cand.rule.0 + 1) % 3);
            let x = cand.demos[2].x;
            if family.apply(cand.rule, &x).unwrap() != family.apply(wrong, &x).unwrap() {
                break cand;
            }
        };
        let wrong = RuleId((inst.rule.0 + 1) % 3);
        let corrupted = corrupt(
            &inst,
            CorruptionSpec {
                position: 3,
                rule: wrong,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(corrupted.paired_clean(), inst);
    }

    #[test]
    fn fake_word_corruption_keeps_the_fake_word() {
        let family = RuleFamily::fake_word_inference();
        let mut rng = rng();
        let inst = sample_episode(&family, 4, &mut rng, false).unwrap();
        let wrong = RuleId((inst.rule.0 + 1) % family.n_rules());
        let corrupted = corrupt(
            &inst,
            CorruptionSpec {
                position: 1,
                rule: wrong,
            },
            &mut rng,
        )
        .unwrap();
        // real color replaced, fake words unchanged
        assert_eq!(corrupted.demos[0].x, inst.demos[0].x);
        assert_eq!(corrupted.demos[0].y, AnswerValue::Color(wrong.0));
        assert_eq!(corrupted.demos[0].object, inst.demos[0].object);
        for i in 1..4 {
            assert_eq!(corrupted.demos[i], inst.demos[i]);
        }
    }

    #[test]
    fn corrupt_rejects_bad_specs() {
        let family = RuleFamily::operator_induction();
        let mut rng = rng();
        let inst = sample_episode(&family, 4, &mut rng, false).unwrap();
        assert_eq!(
            corrupt(
                &inst,
                CorruptionSpec {
                    position: 1,
                    rule: inst.rule
                },
                &mut rng
            )
            .unwrap_err(),
            TaskError::SameRule
        );
        assert!(matches!(
            corrupt(
                &inst,
                CorruptionSpec {
                    position: 5,
                    rule: RuleId((inst.rule.0 + 1) % 3)
                },
                &mut rng
            )
            .unwrap_err(),
            TaskError::PositionOutOfRange { .. }
        ));
        let short = sample_episode(&family, 2, &mut rng, false).unwrap();
        assert_eq!(
            corrupt(
                &short,
                CorruptionSpec {
                    position: 1,
                    rule: RuleId((short.rule.0 + 1) % 3)
                },
                &mut rng
            )
            .unwrap_err(),
            TaskError::MajorityViolated { k: 2 }
        );
    }

    #[test]
    fn majority_accounting_holds_after_single_corruption() {
        let mut rng = rng();
        for family in [
            RuleFamily::operator_induction(),
            RuleFamily::fake_word_inference(),
        ] {
            for trial in 0..500 {
                let inst = sample_episode(&family, 4, &mut rng, false).unwrap();
                let wrong = RuleId((inst.rule.0 + 1 + trial % (family.n_rules() - 1))
                    % family.n_rules());
                let p = 1 + (trial % 4);
                let corrupted =
                    corrupt(&inst, CorruptionSpec { position: p, rule: wrong }, &mut rng).unwrap();
                let evidences_true = corrupted
                    .demos
                    .iter()
                    .filter(|d| d.y == family.apply(corrupted.rule, &d.x).unwrap())
                    .count();
                assert_eq!(evidences_true, 3, "exactly k-1 demos evidence the rule");
            }
        }
    }

    #[test]
    fn rule_application_is_pure() {
        let family = RuleFamily::operator_induction();
        let x = DemoInput::Operands(17, 9);
        for r in family.rule_ids() {
            assert_eq!(family.apply(r, &x).unwrap(), family.apply(r, &x).unwrap());
        }
    }

    #[test]
    fn rule_token_map_is_disjoint_and_singleton() {
        let vocab = Vocab::standard();
        for family in [
            RuleFamily::operator_induction(),
            RuleFamily::fake_word_inference(),
        ] {
            let map = RuleTokenMap::for_family(&family, &vocab);
            assert_eq!(map.n_rules(), family.n_rules());
            for r in family.rule_ids() {
                assert_eq!(map.tokens(r).len(), 1);
            }
        }
    }

    #[test]
    fn modular_subtraction_wraps() {
        let family = RuleFamily::operator_induction();
        let y = family
            .apply(RuleId(Operator::Sub.index()), &DemoInput::Operands(3, 5))
            .unwrap();
        assert_eq!(y, AnswerValue::Int(21)); // (3 - 5) mod 23
    }

    #[test]
    fn plain_subtraction_can_be_negative() {
        let family = RuleFamily::operator_induction_plain();
        let y = family
            .apply(RuleId(Operator::Sub.index()), &DemoInput::Operands(3, 5))
            .unwrap();
        assert_eq!(y, AnswerValue::Int(-2));
    }
}

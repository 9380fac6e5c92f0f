//! Quick throughput and learnability probe for the default training setup.
//!
//! cargo run --release -p conflab-core --example train_probe -- <steps> <batch> <lr> <seed>

use std::time::Instant;

use conflab_core::model::{HeadMask, ModelConfig, TransformerModel};
use conflab_core::numcore::Rng;
use conflab_core::tasks::{sample_episode, training_targets, PromptMode, RuleFamily, Vocab};
use conflab_core::train::{meta_train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(32);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1234);

    let vocab = Vocab::standard();
    let config = ModelConfig::desk_default(vocab.size());

    // raw single-episode timing
    let model = TransformerModel::<f32>::init(&config, &mut Rng::new(1));
    let mut rng = Rng::new(2);
    let inst = sample_episode(&RuleFamily::operator_induction(), 4, &mut rng, false).unwrap();
    let (tokens, targets) = training_targets(&inst, PromptMode::AnswerPrompt, &vocab).unwrap();
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let _ = model
            .training_loss(&tokens, &targets, &HeadMask::empty())
            .unwrap();
    }
    let per_episode = t0.elapsed().as_secs_f64() / reps as f64;
    println!("single-episode fwd+bwd: {:.1} ms", per_episode * 1000.0);

    let fwd0 = Instant::now();
    for _ in 0..reps {
        let _ = model
            .forward(
                &tokens,
                &HeadMask::empty(),
                &conflab_core::model::CaptureOptions::none(),
                None,
            )
            .unwrap();
    }
    println!(
        "single-episode fwd only: {:.1} ms",
        fwd0.elapsed().as_secs_f64() / reps as f64 * 1000.0
    );

    let cfg = TrainConfig {
        steps,
        batch_size: batch,
        lr,
        val_every: 100,
        val_episodes: 200,
        early_stop_acc: 0.95,
        ..TrainConfig::default()
    };
    println!("training: steps={steps} batch={batch} lr={lr} seed={seed}");
    let t1 = Instant::now();
    let (_model, log) = meta_train(&config, &cfg, &Rng::new(seed)).unwrap();
    let wall = t1.elapsed().as_secs_f64();
    println!("wall: {:.1}s ({:.2} s/step)", wall, wall / (log.final_step + 1) as f64);
    for e in &log.entries {
        if e.val_operator.is_some() || e.val_fake_word.is_some() {
            println!(
                "step {:5}  loss {:.4}  val_op {:?}  val_fw {:?}",
                e.step, e.loss, e.val_operator, e.val_fake_word
            );
        }
    }
    let tail: Vec<f64> = log.entries.iter().rev().take(20).map(|e| e.loss).collect();
    println!("last-20 mean loss: {:.4}", tail.iter().sum::<f64>() / tail.len() as f64);
}

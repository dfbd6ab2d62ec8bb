// Throwaway calibration probe for the retrieval training run.

use grc_core::bundle::GrcModel;
use grc_core::eval::{eval_retrieval, EvalOptions};
use grc_core::model::ModelConfig;
use grc_core::objectives::{train_toy, LossWeights, SimilarityScale, TrainConfig};
use grc_core::serve::ServingModel;
use grc_core::synth::{synth_eval_set, synth_mixed_corpus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.08);
    let n_chat: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(128);
    let n_retr: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(128);
    let m: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(16);
    let reasoning: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(24);

    let config = ModelConfig::toy();
    let eval_set = synth_eval_set(64, 256);
    let opts = EvalOptions {
        reasoning_max_tokens: reasoning,
        temperature: 0.0,
        seed: 0,
        k: 10,
    };

    let untrained = GrcModel::init(&config, m, 64).unwrap();
    let started = Instant::now();
    let base = eval_retrieval(&ServingModel::new(&untrained), &eval_set, &opts).unwrap();
    println!(
        "untrained mean nDCG@10: {:.4} (eval {:.1}s)",
        base.mean,
        started.elapsed().as_secs_f64()
    );

    let mut model = GrcModel::init(&config, m, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let records = synth_mixed_corpus(n_chat, n_retr, &mut rng);
    let cfg = TrainConfig {
        steps,
        lr,
        final_lr_fraction: 0.05,
        momentum: 0.9,
        batch_size: 4,
        num_negatives: 1,
        weights: LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        },
        scale: SimilarityScale {
            temperature: args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.02),
        },
        parallel: true,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let trace = train_toy(&mut model, &records, &cfg, &mut rng).unwrap();
    println!(
        "train time: {:.1}s for {steps} steps; last {:?}",
        started.elapsed().as_secs_f64(),
        trace.last().unwrap()
    );
    for row in trace.iter().step_by((steps / 10).max(1)) {
        println!(
            "step {:5} total {:7.4} gen {:7.4} recons {:7.4} rep {:7.4}",
            row.step, row.total, row.gen, row.recons, row.rep
        );
    }

    let started = Instant::now();
    let trained = eval_retrieval(&ServingModel::new(&model), &eval_set, &opts).unwrap();
    println!(
        "trained mean nDCG@10: {:.4} (eval {:.1}s); delta {:+.4}",
        trained.mean,
        started.elapsed().as_secs_f64(),
        trained.mean - base.mean
    );
}

// Throwaway calibration probe for the toy training runs.

use grc_core::bundle::GrcModel;
use grc_core::data::{augment_generative, DataRecord, ReconstructionPromptSet};
use grc_core::mask::build_grc_mask;
use grc_core::model::{forward, ForwardInput, ModelConfig};
use grc_core::objectives::{train_toy, LossWeights, TrainConfig};
use grc_core::synth::synth_chat_corpus;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn teacher_forced_accuracy(model: &GrcModel, seq: &grc_core::data::SegmentedSequence) -> f64 {
    let (embedded, position_ids, _) = grc_core::model::splice_latents(
        &model.params,
        &seq.first,
        &model.latents,
        &seq.second,
        &seq.layout,
    )
    .unwrap();
    let mask = build_grc_mask(&seq.layout);
    let out = forward(
        &model.params,
        &ForwardInput {
            embedded,
            position_ids,
            mask: &mask,
            past: None,
        },
    )
    .unwrap();
    let mut targets = seq.first.clone();
    targets.extend(std::iter::repeat(0).take(seq.layout.m));
    targets.extend_from_slice(&seq.second);
    let span = seq.layout.recon_range();
    let mut hit = 0usize;
    for i in span.clone() {
        let row = out.logits.row(i - 1);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best as u32 == targets[i] {
            hit += 1;
        }
    }
    hit as f64 / span.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let n_examples: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(200);

    let m: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(8);
    let config = ModelConfig::toy();
    let mut model = GrcModel::init(&config, m, 64).unwrap();
    let records: Vec<DataRecord> = synth_chat_corpus(n_examples)
        .into_iter()
        .map(DataRecord::Chat)
        .collect();
    let train_rng_probe = ChaCha8Rng::seed_from_u64(7);
    let cfg = TrainConfig {
        steps,
        lr,
        final_lr_fraction: 0.05,
        momentum: 0.9,
        batch_size: batch,
        num_negatives: 0,
        weights: LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.0,
        },
        parallel: true,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let started = Instant::now();
    let trace = train_toy(&mut model, &records, &cfg, &mut rng).unwrap();
    let train_secs = started.elapsed().as_secs_f64();
    for row in trace.iter().step_by((steps / 20).max(1)) {
        println!(
            "step {:5}  total {:8.4}  gen {:8.4}  recons {:8.4}",
            row.step, row.total, row.gen, row.recons
        );
    }
    println!("last: {:?}", trace.last().unwrap());
    println!("train time: {train_secs:.1}s for {steps} steps");

    // Teacher-forced reconstruction accuracy over the training set.
    let prompts = ReconstructionPromptSet::default();
    let started = Instant::now();
    let sample = 50.min(n_examples);

    // (a) the exact training sequences (same reconstruction prompts).
    let mut replay_rng = train_rng_probe;
    let train_seqs: Vec<_> = records
        .iter()
        .map(|r| {
            let DataRecord::Chat(ex) = r else { unreachable!() };
            augment_generative(ex, m, &prompts, &mut replay_rng).unwrap()
        })
        .collect();
    let same: f64 = train_seqs
        .iter()
        .take(sample)
        .map(|s| teacher_forced_accuracy(&model, s))
        .sum::<f64>()
        / sample as f64;

    // (b) freshly drawn prompts for the same contexts.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(1234);
    let mut fresh = 0.0;
    for record in records.iter().take(sample) {
        let DataRecord::Chat(ex) = record else { unreachable!() };
        let seq = augment_generative(ex, m, &prompts, &mut eval_rng).unwrap();
        fresh += teacher_forced_accuracy(&model, &seq);
    }
    println!(
        "teacher-forced recon accuracy over {sample} contexts: same-prompt {:.4}, fresh-prompt {:.4} (eval {:.1}s)",
        same,
        fresh / sample as f64,
        started.elapsed().as_secs_f64()
    );
}

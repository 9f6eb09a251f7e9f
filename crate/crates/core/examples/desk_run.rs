//! Trains one variant on a synthetic corpus and reports test bits per byte.
//!
//! `cargo run --release --example desk_run -- vqmoe 8 5000 3.5e-4`

use std::time::Instant;

use vqmoe::data::{split, synthetic_corpus};
use vqmoe::lm::{evaluate_bpc, Model, ModelConfig, TrainConfig, TrainState};
use vqmoe::moe::VariantKind;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind: VariantKind = args.get(1).map_or("vqmoe", |s| s).parse().expect("variant");
    let batch: usize = args.get(2).map_or(32, |s| s.parse().expect("batch"));
    let steps: usize = args.get(3).map_or(5000, |s| s.parse().expect("steps"));
    let lr_max: f64 = args.get(4).map_or(3.5e-4, |s| s.parse().expect("lr"));
    let splits = split(&synthetic_corpus(1_000_000, 0), [0.9, 0.05, 0.05]).unwrap();
    let cfg = ModelConfig { kind, ..Default::default() };
    let train = TrainConfig { batch_size: batch, steps, lr_max, ..Default::default() };
    let mut st = TrainState::new(Model::new(cfg).unwrap(), train);
    let t0 = Instant::now();
    for s in 0..steps {
        let b = st.sample_batch(&splits.train).unwrap();
        let m = st.train_step(&b).unwrap();
        if s % 500 == 0 {
            println!("step {s} task {:.3} vq {:.4} {:.0}s", m.task_loss, m.vq_loss, t0.elapsed().as_secs_f64());
        }
    }
    let bpc = evaluate_bpc(&st.model, &splits.test).unwrap();
    println!("{kind} batch {batch} steps {steps} lr {lr_max}: test bpc {bpc:.3} in {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
}

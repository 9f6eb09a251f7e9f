//! Wall-clock time per training step for a variant and batch size.
//!
//! `cargo run --release --example step_time -- vqmoe 32`

use std::time::Instant;

use vqmoe::data::synthetic_corpus;
use vqmoe::lm::{Model, ModelConfig, TrainConfig, TrainState};
use vqmoe::moe::VariantKind;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind: VariantKind = args.get(1).map_or("vqmoe", |s| s).parse().expect("variant");
    let batch: usize = args.get(2).map_or(32, |s| s.parse().expect("batch"));
    let steps = 10;
    let corpus = synthetic_corpus(1_000_000, 0);
    let cfg = ModelConfig { kind, ..Default::default() };
    let train = TrainConfig { batch_size: batch, ..Default::default() };
    let mut st = TrainState::new(Model::new(cfg).unwrap(), train);
    let b = st.sample_batch(&corpus).unwrap();
    st.train_step(&b).unwrap();
    let t0 = Instant::now();
    for _ in 0..steps {
        let b = st.sample_batch(&corpus).unwrap();
        st.train_step(&b).unwrap();
    }
    let per = t0.elapsed().as_secs_f64() / steps as f64;
    println!("{kind} batch {batch}: {:.1} ms/step, {:.1} min per 5000 steps", per * 1e3, per * 5000.0 / 60.0);
}

//! Analytic per-token FLOPs (two per multiply-accumulate). Activations,
//! softmax exponentials and normalizations are not counted.

use crate::autodiff::Tape;
use crate::data::Batch;
use crate::error::Result;
use crate::lm::{Model, ModelConfig, MoePath};
use crate::moe::VariantKind;
use crate::quantizer::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopsMode {
    /// The variant's pre-training forward pass.
    Pretrain,
    /// The vqmoe discrete path alone: code scan plus one expert.
    FinetuneDiscrete,
}

/// Per-token forward FLOPs by component, summed over layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopsBreakdown {
    /// Q/K/V/O projections plus causal score and context products.
    pub attention: u64,
    /// Routing, code scan, fusion gate and expert FFNs.
    pub moe: u64,
    /// Output projection.
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.attention + self.moe + self.head
    }

    /// Attention plus MoE.
    pub fn backbone(&self) -> u64 {
        self.attention + self.moe
    }
}

/// Per-token FLOPs of `cfg` in `mode`. Attention context products use the
/// causal average of `T/2` keys: `2 * T * d` for scores and context together.
pub fn flops_count(cfg: &ModelConfig, mode: FlopsMode) -> FlopsBreakdown {
    let d = cfg.d_model as u64;
    let h = cfg.h_ffn as u64;
    let n = cfg.n_experts as u64;
    let k = cfg.k_codes as u64;
    let t = cfg.context_length as u64;
    let layers = cfg.n_layers as u64;

    let attention = 2 * 4 * d * d + 2 * t * d;
    let expert = 2 * 2 * d * h;
    let scan = 2 * k * d + if cfg.metric == Metric::Cosine { d } else { 0 };
    let gate = 2 * 2 * d;
    let router = match cfg.kind {
        VariantKind::Xmoe => {
            let low = cfg.d_low as u64;
            2 * (d * low + n * low)
        }
        _ => 2 * n * d,
    };
    let moe = match mode {
        FlopsMode::FinetuneDiscrete => scan + expert,
        FlopsMode::Pretrain => {
            let continuous = router + cfg.top_k as u64 * expert;
            match cfg.kind {
                VariantKind::Vqmoe => continuous + scan + gate + expert,
                _ => continuous,
            }
        }
    };
    FlopsBreakdown {
        attention: layers * attention,
        moe: layers * moe,
        head: 2 * d * cfg.vocab_size as u64,
    }
}

/// Per-token FLOPs of one forward pass of `model` over `batch`, head
/// included, as counted by the tape.
pub fn measured_flops_per_token(model: &Model, batch: &Batch, path: MoePath) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape);
    let h = model.forward_hidden(&mut tape, &b, &batch.inputs(), batch.batch, path, None)?;
    model.logits(&mut tape, &b, h.hidden)?;
    Ok(2.0 * tape.macs() as f64 / (batch.batch * batch.seq) as f64)
}

//! Drift of MoE inputs and routing embeddings across checkpoints.

use std::path::Path;

use crate::autodiff::Tape;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::lm::{Model, MoePath};
use crate::tensor::Tensor;

/// What one checkpoint looks like on a fixed probe batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    /// Inputs of the chosen MoE layer on the probe tokens.
    pub tokens: Tensor,
    /// Router rows followed by codebook rows, when the layer has them.
    pub router: Tensor,
}

impl Snapshot {
    pub fn capture(model: &Model, probe: &Batch, layer: usize, step: usize) -> Result<Self> {
        let blk = model.blocks.get(layer).ok_or_else(|| {
            Error::invalid("drift", format!("layer {layer} out of range 0..{}", model.blocks.len()))
        })?;
        let mut tape = Tape::new();
        let b = model.store.bind(&mut tape);
        let h = model.forward_hidden(&mut tape, &b, &probe.inputs(), probe.batch, MoePath::Pretrain, Some(layer))?;
        let tokens = tape.value(*h.moe_inputs.last().expect("layer input")).clone();
        let r = &blk.moe.router;
        let mut rows: Vec<f64> = Vec::new();
        let mut width = 0;
        for id in [r.w_e, r.codebook].into_iter().flatten() {
            let t = model.store.get(id);
            if width != 0 && t.last_dim() != width {
                continue;
            }
            width = t.last_dim();
            rows.extend_from_slice(t.data());
        }
        let router = Tensor::new(vec![rows.len() / width, width], rows)?;
        Ok(Self { step, tokens, router })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftRow {
    pub step: usize,
    pub token_drift: f64,
    pub router_drift: f64,
}

/// Mean row distance between consecutive matrices over the mean row norm
/// of the later one; zero when nothing moved.
fn drift(prev: &Tensor, cur: &Tensor) -> Result<f64> {
    if prev.shape() != cur.shape() {
        return Err(Error::Shape {
            op: "drift",
            left: prev.shape().to_vec(),
            right: cur.shape().to_vec(),
        });
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (mut dist, mut size) = (0.0, 0.0);
    for r in 0..cur.rows() {
        let diff: Vec<f64> = cur.row(r).iter().zip(prev.row(r)).map(|(a, b)| a - b).collect();
        dist += norm(&diff);
        size += norm(cur.row(r));
    }
    Ok(if dist == 0.0 { 0.0 } else { dist / size })
}

/// One row per snapshot after the first.
pub fn drift_series(snaps: &[Snapshot]) -> Result<Vec<DriftRow>> {
    if snaps.len() < 2 {
        return Err(Error::invalid("drift", format!("need at least 2 checkpoints, got {}", snaps.len())));
    }
    snaps
        .windows(2)
        .map(|w| {
            Ok(DriftRow {
                step: w[1].step,
                token_drift: drift(&w[0].tokens, &w[1].tokens)?,
                router_drift: drift(&w[0].router, &w[1].router)?,
            })
        })
        .collect()
}

/// `drift.csv`: `step,token_drift,router_drift`.
pub fn write_drift_csv(path: &Path, rows: &[DriftRow]) -> Result<()> {
    let mut s = String::from("step,token_drift,router_drift\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.step, r.token_drift, r.router_drift));
    }
    crate::fsutil::write_atomic(path, s.as_bytes())
}

//! Naive reference evaluations used as test oracles.

use crate::moe::{Activation, ExpertFfn};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Triple-loop `x W` with optional bias.
pub(crate) fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, d) = (x.rows(), x.last_dim());
    let h = w.last_dim();
    let mut out = vec![0.0; n * h];
    for r in 0..n {
        for j in 0..h {
            let mut acc = 0.0;
            for i in 0..d {
                acc += x.row(r)[i] * w.row(i)[j];
            }
            out[r * h + j] = acc + b.map_or(0.0, |b| b.data()[j]);
        }
    }
    Tensor::new([n, h], out).unwrap()
}

pub(crate) fn ffn_eval(store: &ParamStore, e: &ExpertFfn, x: &Tensor) -> Tensor {
    let mut h = affine(x, store.get(e.w1), e.b1.map(|b| store.get(b)));
    for v in h.data_mut() {
        *v = match e.activation {
            Activation::Relu => v.max(0.0),
            Activation::Gelu => gelu(*v),
            Activation::Identity => *v,
        };
    }
    affine(&h, store.get(e.w2), e.b2.map(|b| store.get(b)))
}

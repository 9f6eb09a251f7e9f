//! Jacobian of an MoE layer with respect to one token, split into the
//! expert-path term and the residual contributed by gate gradients.

use nalgebra::DMatrix;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::moe::{ExpertFfn, ForwardOpts, MoeLayer, RoutingDecision, VariantKind};
use crate::params::ParamStore;
use crate::quantizer::code_to_expert;
use crate::tensor::Tensor;

/// Probes whose routing margin is at or below this are rejected.
pub const MIN_PROBE_MARGIN: f64 = 1e-3;
/// Singular values above `RANK_TOL * sigma_max(J)` count toward the rank.
pub const RANK_TOL: f64 = 1e-8;
const MAX_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReport {
    /// Singular values of `J - P`, descending.
    pub residual_singular_values: Vec<f64>,
    pub numerical_rank: usize,
    /// `N` for router variants, `N + K + 2` for vqmoe.
    pub bound: usize,
    /// Largest singular value of the full Jacobian `J`.
    pub sigma_max: f64,
    pub margin: f64,
}

/// Dense Jacobian (`d_out x d_in`) of `f` at the row vector `x`, one
/// backward pass per output coordinate.
fn jacobian_of(
    x: &[f64],
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<DMatrix<f64>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::new(vec![1, x.len()], x.to_vec())?, true);
    let y = f(&mut tape, xv)?;
    let d_out = tape.value(y).numel();
    let mut j = DMatrix::zeros(d_out, x.len());
    for i in 0..d_out {
        let yi = tape.slice_lastdim(y, i, 1)?;
        let yi = tape.sum(yi)?;
        let g = tape.backward(yi)?.wrt(xv);
        for (c, v) in g.into_iter().enumerate() {
            j[(i, c)] = v;
        }
    }
    Ok(j)
}

fn expert_jacobian(store: &ParamStore, expert: &ExpertFfn, x: &[f64]) -> Result<DMatrix<f64>> {
    jacobian_of(x, |tape, xv| {
        let b = store.bind(tape);
        expert.forward(tape, &b, xv)
    })
}

/// Full layer Jacobian at `x` and the routing it was taken under.
pub fn layer_jacobian(
    store: &ParamStore,
    layer: &MoeLayer,
    x: &[f64],
    opts: ForwardOpts,
) -> Result<(DMatrix<f64>, RoutingDecision)> {
    let mut decision = None;
    let j = jacobian_of(x, |tape, xv| {
        let b = store.bind(tape);
        let out = layer.forward(tape, &b, xv, opts)?;
        decision = Some(out.decision);
        Ok(out.out)
    })?;
    Ok((j, decision.expect("forward ran")))
}

/// Rank of the gating term of the layer Jacobian at one token `x`, with
/// gate gradients flowing.
pub fn jacobian_residual_rank(store: &ParamStore, layer: &MoeLayer, x: &[f64]) -> Result<JacobianReport> {
    jacobian_residual_rank_with(store, layer, x, ForwardOpts::default())
}

/// As [`jacobian_residual_rank`] under explicit forward options.
///
/// The expert-path term is `P = sum_i w_i J_i(x)` over the selected
/// experts, and for vqmoe `g_c * sum_i w_i J_i(x) + g_d J_c(q)` where `q`
/// is the selected code. The report describes `J - P`.
pub fn jacobian_residual_rank_with(
    store: &ParamStore,
    layer: &MoeLayer,
    x: &[f64],
    opts: ForwardOpts,
) -> Result<JacobianReport> {
    let d = layer.cfg.d_model;
    if x.len() != d {
        return Err(Error::invalid("jacobian", format!("probe has {} entries, layer width is {d}", x.len())));
    }
    if d > MAX_DIM {
        return Err(Error::invalid("jacobian", format!("dense Jacobians need d <= {MAX_DIM}, got {d}")));
    }
    let (j, decision) = layer_jacobian(store, layer, x, opts)?;
    if decision.margin <= MIN_PROBE_MARGIN {
        return Err(Error::Margin {
            margin: decision.margin,
            required: MIN_PROBE_MARGIN,
        });
    }

    let n_exp = layer.experts.len();
    let continuous_scale = decision.gc_gd.as_ref().map_or(1.0, |g| g[0]);
    let mut p = DMatrix::zeros(d, d);
    for (&e, &w) in decision.experts_of(0).iter().zip(decision.weights_of(0)) {
        p += expert_jacobian(store, &layer.experts[e], x)? * (continuous_scale * w);
    }
    let bound = match layer.cfg.kind {
        VariantKind::Vqmoe => {
            let (Some(codes), Some(g)) = (&decision.code_indices, &decision.gc_gd) else {
                return Err(Error::invalid("jacobian", "vqmoe forward reported no code"));
            };
            let cb = layer.codebook(store).expect("vqmoe layer has a codebook");
            let q = cb.gather(&codes[..1])?;
            let e = code_to_expert(codes[0], n_exp);
            p += expert_jacobian(store, &layer.experts[e], q.data())? * g[1];
            n_exp + layer.cfg.k_codes + 2
        }
        _ => n_exp,
    };

    let sigma_max = singular_values(j.clone())[0];
    let residual_singular_values = singular_values(j - p);
    let numerical_rank = residual_singular_values
        .iter()
        .filter(|&&s| s > RANK_TOL * sigma_max)
        .count();
    Ok(JacobianReport {
        residual_singular_values,
        numerical_rank,
        bound,
        sigma_max,
        margin: decision.margin,
    })
}

fn singular_values(m: DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `jacobian.csv`: `probe_id,rank,bound,sv_1..sv_8`, padded with zeros.
pub fn write_jacobian_csv(path: &std::path::Path, reports: &[JacobianReport]) -> Result<()> {
    let mut s = String::from("probe_id,rank,bound");
    for i in 1..=8 {
        s.push_str(&format!(",sv_{i}"));
    }
    s.push('\n');
    for (id, r) in reports.iter().enumerate() {
        s.push_str(&format!("{id},{},{}", r.numerical_rank, r.bound));
        for i in 0..8 {
            s.push_str(&format!(",{}", r.residual_singular_values.get(i).copied().unwrap_or(0.0)));
        }
        s.push('\n');
    }
    crate::fsutil::write_atomic(path, s.as_bytes())
}

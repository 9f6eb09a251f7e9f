//! Mixture-of-experts layers.
//!
//! All variants share one bank of [`ExpertFfn`]s and differ in how tokens are
//! routed to them:
//!
//! * `smoe`: linear router `W_e`, top-k, softmax renormalized over the kept experts.
//! * `xmoe`: cosine scores between a low-dimensional projection of the token and
//!   normalized expert embeddings, times a learnable temperature.
//! * `stablemoe`: the `smoe` router, frozen after a first training phase.
//! * `smoe_dropout`: the `smoe` router frozen at its random initialization.
//! * `vqmoe`: an `smoe` continuous path plus a discrete path in which the token's
//!   nearest code selects expert `code mod N`, fused per token by a 2-way gate.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::quantizer::{self, assign_codes, code_to_expert, Codebook, Metric, QuantizationResult};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
    /// No nonlinearity; the expert is an affine map.
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!(
                "unknown activation `{other}` (expected relu, gelu or identity)"
            ))),
        }
    }
}

/// Routing strategy of an MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum VariantKind {
    Smoe,
    Xmoe,
    StableMoe,
    SmoeDropout,
    #[default]
    Vqmoe,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::Smoe,
        VariantKind::Xmoe,
        VariantKind::StableMoe,
        VariantKind::SmoeDropout,
        VariantKind::Vqmoe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Smoe => "smoe",
            VariantKind::Xmoe => "xmoe",
            VariantKind::StableMoe => "stablemoe",
            VariantKind::SmoeDropout => "smoe_dropout",
            VariantKind::Vqmoe => "vqmoe",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of smoe, xmoe, stablemoe, smoe_dropout, vqmoe)"
                ))
            })
    }
}

/// Hyperparameters of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    pub d_model: usize,
    pub h_ffn: usize,
    pub n_experts: usize,
    /// Codebook size (vqmoe only).
    pub k_codes: usize,
    pub top_k: usize,
    pub kind: VariantKind,
    pub metric: Metric,
    pub activation: Activation,
    pub expert_bias: bool,
    /// Projection width of the xmoe router.
    pub d_low: usize,
    /// Initial xmoe temperature multiplier.
    pub temperature_init: f64,
    /// Commitment weight of the VQ loss.
    pub beta: f64,
}

impl MoeConfig {
    pub fn new(kind: VariantKind, d_model: usize, h_ffn: usize, n_experts: usize, k_codes: usize) -> Self {
        Self {
            d_model,
            h_ffn,
            n_experts,
            k_codes,
            top_k: 2.min(n_experts),
            kind,
            metric: Metric::Cosine,
            activation: Activation::Gelu,
            expert_bias: true,
            d_low: (d_model / 4).max(1),
            temperature_init: 1.0 / 0.07,
            beta: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.h_ffn == 0 || self.n_experts == 0 {
            return bad("d_model, h_ffn and n_experts must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!(
                "top_k must be in 1..={} (number of experts), got {}",
                self.n_experts, self.top_k
            ));
        }
        if self.kind == VariantKind::Vqmoe && self.k_codes == 0 {
            return bad("k_codes must be positive for vqmoe".into());
        }
        if self.kind == VariantKind::Xmoe && (self.d_low == 0 || self.d_low >= self.d_model) {
            return bad(format!("xmoe needs 0 < d_low < d_model, got d_low = {}", self.d_low));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        Ok(())
    }
}

/// Two-layer feed-forward expert `W2 * phi(W1 * x + b1) + b2` (row-vector form).
#[derive(Debug, Clone)]
pub struct ExpertFfn {
    pub w1: ParamId,
    pub b1: Option<ParamId>,
    pub w2: ParamId,
    pub b2: Option<ParamId>,
    pub activation: Activation,
}

/// Uniform in `+-1/sqrt(fan_in)`.
pub(crate) fn init_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl ExpertFfn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        h: usize,
        activation: Activation,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w1 = store.add(format!("{prefix}.w1"), init_uniform(vec![d, h], d, rng), true);
        let b1 = bias.then(|| store.add(format!("{prefix}.b1"), init_uniform(vec![h], d, rng), true));
        let w2 = store.add(format!("{prefix}.w2"), init_uniform(vec![h, d], h, rng), true);
        let b2 = bias.then(|| store.add(format!("{prefix}.b2"), init_uniform(vec![d], h, rng), true));
        Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        let mut h = tape.matmul(x, b.var(self.w1))?;
        if let Some(b1) = self.b1 {
            h = tape.add_bias(h, b.var(b1))?;
        }
        h = match self.activation {
            Activation::Relu => tape.relu(h)?,
            Activation::Gelu => tape.gelu(h)?,
            Activation::Identity => h,
        };
        let mut y = tape.matmul(h, b.var(self.w2))?;
        if let Some(b2) = self.b2 {
            y = tape.add_bias(y, b.var(b2))?;
        }
        Ok(y)
    }

    /// Parameter handles of this expert.
    pub fn params(&self) -> Vec<ParamId> {
        [Some(self.w1), self.b1, Some(self.w2), self.b2].into_iter().flatten().collect()
    }
}

/// Per-token routing outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Experts kept per token.
    pub k: usize,
    /// `n x k` expert indices, row-major, best first.
    pub expert_indices: Vec<usize>,
    /// `n x k` weights of the kept experts; each row sums to 1.
    pub gate_weights: Vec<f64>,
    /// Code selected per token (vqmoe).
    pub code_indices: Option<Vec<usize>>,
    /// `n x 2` continuous/discrete gate per token (vqmoe).
    pub gc_gd: Option<Vec<f64>>,
    /// Smallest gap between the k-th and (k+1)-th router logit, and between
    /// the best and second-best code distance, over all tokens. Selections are
    /// locally constant within this margin.
    pub margin: f64,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.expert_indices.len() / self.k
    }

    pub fn experts_of(&self, token: usize) -> &[usize] {
        &self.expert_indices[token * self.k..(token + 1) * self.k]
    }

    pub fn weights_of(&self, token: usize) -> &[f64] {
        &self.gate_weights[token * self.k..(token + 1) * self.k]
    }

    /// The single expert chosen per token: the discrete-path expert when a
    /// code is present, the top-1 expert otherwise.
    pub fn primary_expert(&self, token: usize, n_experts: usize) -> usize {
        match &self.code_indices {
            Some(codes) => code_to_expert(codes[token], n_experts),
            None => self.expert_indices[token * self.k],
        }
    }
}

/// Top-k selection on an `n x N` logit variable; gates are the softmax over
/// the kept logits.
pub fn topk_from_logits(tape: &mut Tape, logits: Var, k: usize) -> Result<(Var, RoutingDecision)> {
    let n_exp = tape.value(logits).last_dim();
    if k == 0 || k > n_exp {
        return Err(Error::invalid(
            "route_topk",
            format!("k must be in 1..={n_exp}, got {k}"),
        ));
    }
    let lv = tape.value(logits);
    let n = lv.rows();
    let mut idx = Vec::with_capacity(n * k);
    let mut margin = f64::INFINITY;
    let mut order: Vec<usize> = Vec::with_capacity(n_exp);
    for r in 0..n {
        let row = lv.row(r);
        order.clear();
        order.extend(0..n_exp);
        // stable sort keeps the lower index first on ties
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        idx.extend_from_slice(&order[..k]);
        if k < n_exp {
            margin = margin.min(row[order[k - 1]] - row[order[k]]);
        }
    }
    let picked = tape.gather_lastdim(logits, &idx, k)?;
    let gates = tape.softmax_lastdim(picked)?;
    let decision = RoutingDecision {
        k,
        expert_indices: idx,
        gate_weights: tape.value(gates).data().to_vec(),
        code_indices: None,
        gc_gd: None,
        margin,
    };
    Ok((gates, decision))
}

/// Linear top-k router: logits `x W_e^T`, keep the `k` largest, renormalize.
pub fn route_topk(tape: &mut Tape, x: Var, w_e: Var, k: usize) -> Result<(Var, RoutingDecision)> {
    let logits = tape.matmul_nt(x, w_e)?;
    topk_from_logits(tape, logits, k)
}

/// Applies `f` to the rows of `x` assigned to each expert and scatters the
/// weighted results back. `assign[p]` is the expert of slot `p`, slot `p`
/// belongs to token `p / per_token`, and `weights` (if given) is a
/// `[n * per_token, 1]` variable of slot weights.
fn dispatch(
    tape: &mut Tape,
    b: &Binding,
    x: Var,
    experts: &[ExpertFfn],
    assign: &[usize],
    per_token: usize,
    weights: Option<Var>,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let mut acc: Option<Var> = None;
    for (e, expert) in experts.iter().enumerate() {
        let slots: Vec<usize> = (0..assign.len()).filter(|&p| assign[p] == e).collect();
        if slots.is_empty() {
            continue;
        }
        let rows: Vec<usize> = slots.iter().map(|p| p / per_token).collect();
        let xe = tape.gather_rows(x, &rows)?;
        let mut ye = expert.forward(tape, b, xe)?;
        if let Some(w) = weights {
            let we = tape.gather_rows(w, &slots)?;
            let we = tape.reshape(we, &[slots.len()])?;
            ye = tape.scale_rows(ye, we)?;
        }
        let contrib = tape.scatter_add_rows(ye, &rows, n)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, contrib)?,
            None => contrib,
        });
    }
    acc.ok_or_else(|| Error::invalid("moe", "no tokens were routed"))
}

/// `sum_{i in top-k} gate_i * FFN_i(x)` per token. `gates` is the `n x k`
/// variable returned alongside `decision`.
pub fn smoe_forward(
    tape: &mut Tape,
    b: &Binding,
    x: Var,
    experts: &[ExpertFfn],
    decision: &RoutingDecision,
    gates: Var,
) -> Result<Var> {
    if decision.expert_indices.iter().any(|&e| e >= experts.len()) {
        return Err(Error::invalid("smoe_forward", "decision refers to a missing expert"));
    }
    let n = tape.value(x).rows();
    let flat = tape.reshape(gates, &[n * decision.k, 1])?;
    dispatch(tape, b, x, experts, &decision.expert_indices, decision.k, Some(flat))
}

/// Router parameters; which fields are present depends on the variant.
#[derive(Debug, Clone, Default)]
pub struct Router {
    /// `N x d` expert embeddings (`N x d_low` for xmoe).
    pub w_e: Option<ParamId>,
    /// `d x d_low` (xmoe).
    pub down_proj: Option<ParamId>,
    /// Scalar logit multiplier (xmoe).
    pub temperature: Option<ParamId>,
    /// `K x d` code vectors (vqmoe).
    pub codebook: Option<ParamId>,
    /// `2 x d` continuous/discrete gate (vqmoe).
    pub w_g: Option<ParamId>,
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    /// Treat all gate weights as constants (no gradient through routing).
    pub detach_gates: bool,
}

/// Result of an MoE layer forward pass.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub out: Var,
    pub decision: RoutingDecision,
    /// VQ loss of this layer (vqmoe pre-training only).
    pub vq_loss: Option<Var>,
    pub quantization: Option<QuantizationResult>,
}

/// One MoE layer: an expert bank plus a router.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub cfg: MoeConfig,
    pub experts: Vec<ExpertFfn>,
    pub router: Router,
}

fn maybe_detach(tape: &mut Tape, v: Var, detach: bool) -> Result<Var> {
    if detach {
        tape.stop_gradient(v)
    } else {
        Ok(v)
    }
}

impl MoeLayer {
    /// Registers the layer's parameters under `prefix`. The codebook starts
    /// from a random placeholder; callers replace it from data with
    /// [`MoeLayer::init_codebook`] before training.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: MoeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, n) = (cfg.d_model, cfg.n_experts);
        let experts = (0..n)
            .map(|i| {
                ExpertFfn::new(
                    store,
                    &format!("{prefix}.expert{i}"),
                    d,
                    cfg.h_ffn,
                    cfg.activation,
                    cfg.expert_bias,
                    rng,
                )
            })
            .collect();
        let mut router = Router::default();
        let mut add = |name: &str, t: Tensor, trainable: bool| store.add(format!("{prefix}.{name}"), t, trainable);
        match cfg.kind {
            VariantKind::Smoe | VariantKind::StableMoe => {
                router.w_e = Some(add("w_e", init_uniform(vec![n, d], d, rng), true));
            }
            VariantKind::SmoeDropout => {
                router.w_e = Some(add("w_e", init_uniform(vec![n, d], d, rng), false));
            }
            VariantKind::Xmoe => {
                router.down_proj = Some(add("down_proj", init_uniform(vec![d, cfg.d_low], d, rng), true));
                router.w_e = Some(add("w_e", init_uniform(vec![n, cfg.d_low], cfg.d_low, rng), true));
                router.temperature = Some(add("temperature", Tensor::scalar(cfg.temperature_init), true));
            }
            VariantKind::Vqmoe => {
                router.w_e = Some(add("w_e", init_uniform(vec![n, d], d, rng), true));
                router.codebook = Some(add("codebook", init_uniform(vec![cfg.k_codes, d], d, rng), true));
                router.w_g = Some(add("w_g", init_uniform(vec![2, d], d, rng), true));
            }
        }
        Ok(Self { cfg, experts, router })
    }

    /// The layer's codebook as stored, if it has one.
    pub fn codebook(&self, store: &ParamStore) -> Option<Codebook> {
        self.router.codebook.map(|id| Codebook {
            vectors: store.get(id).clone(),
            metric: self.cfg.metric,
        })
    }

    /// Replaces the codebook with `K` rows drawn from `x`, the layer's inputs
    /// on the first batch. No-op for variants without a codebook.
    pub fn init_codebook<R: Rng>(&self, store: &mut ParamStore, x: &Tensor, rng: &mut R) -> Result<()> {
        if let Some(id) = self.router.codebook {
            *store.get_mut(id) = Codebook::sample_rows(x, self.cfg.k_codes, rng)?;
        }
        Ok(())
    }

    /// Freezes the router (stablemoe second phase).
    pub fn freeze_router(&self, store: &mut ParamStore) {
        for id in [self.router.w_e, self.router.down_proj, self.router.temperature]
            .into_iter()
            .flatten()
        {
            store.set_trainable(id, false);
        }
    }

    /// Router parameters (excluding the codebook and the vqmoe gate).
    pub fn router_params(&self) -> Vec<ParamId> {
        [self.router.w_e, self.router.down_proj, self.router.temperature]
            .into_iter()
            .flatten()
            .collect()
    }

    /// Pre-training forward pass.
    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: Var, opts: ForwardOpts) -> Result<MoeOutput> {
        match self.cfg.kind {
            VariantKind::Vqmoe => vqmoe_forward(tape, b, x, self, opts),
            _ => {
                let (gates, decision) = route_variant(tape, b, x, self)?;
                let gates = maybe_detach(tape, gates, opts.detach_gates)?;
                let out = smoe_forward(tape, b, x, &self.experts, &decision, gates)?;
                Ok(MoeOutput {
                    out,
                    decision,
                    vq_loss: None,
                    quantization: None,
                })
            }
        }
    }

    /// Discrete-only forward pass used for fine-tuning.
    pub fn forward_discrete(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<MoeOutput> {
        vqmoe_discrete_forward(tape, b, x, self)
    }
}

/// Routing for the non-vqmoe variants. Frozen routers (smoe_dropout, stablemoe
/// in its second phase) are bound as constants so no gradient reaches them.
pub fn route_variant(tape: &mut Tape, b: &Binding, x: Var, layer: &MoeLayer) -> Result<(Var, RoutingDecision)> {
    let k = layer.cfg.top_k;
    let w_e = |r: &Router| {
        r.w_e
            .ok_or_else(|| Error::invalid("route_variant", "router has no expert embeddings"))
    };
    match layer.cfg.kind {
        VariantKind::Smoe | VariantKind::StableMoe | VariantKind::SmoeDropout => {
            route_topk(tape, x, b.var(w_e(&layer.router)?), k)
        }
        VariantKind::Xmoe => {
            let r = &layer.router;
            let (Some(down), Some(temp)) = (r.down_proj, r.temperature) else {
                return Err(Error::invalid("route_variant", "xmoe router is missing parameters"));
            };
            let low = tape.matmul(x, b.var(down))?;
            let low = tape.l2_normalize_rows(low)?;
            let emb = tape.l2_normalize_rows(b.var(w_e(r)?))?;
            let cos = tape.matmul_nt(low, emb)?;
            let logits = tape.mul_scalar(cos, b.var(temp))?;
            topk_from_logits(tape, logits, k)
        }
        VariantKind::Vqmoe => Err(Error::invalid(
            "route_variant",
            "vqmoe routing goes through vqmoe_forward",
        )),
    }
}

/// Multiply-accumulates of a distance scan over `n` queries: `K d` per query,
/// plus `d` for the query norm under cosine.
pub(crate) fn scan_macs(n: usize, cb: &Codebook) -> u64 {
    let per = cb.k() * cb.d()
        + match cb.metric {
            Metric::Cosine => cb.d(),
            Metric::Euclidean => 0,
        };
    (n * per) as u64
}

fn codebook_of(tape: &Tape, b: &Binding, layer: &MoeLayer) -> Result<(Var, Codebook)> {
    let id = layer
        .router
        .codebook
        .ok_or_else(|| Error::invalid("vqmoe", "layer has no codebook"))?;
    let var = b.var(id);
    let cb = Codebook::new(tape.value(var).clone(), layer.cfg.metric)?;
    Ok((var, cb))
}

/// Quantizes `x` and runs each token's straight-through code through expert
/// `code mod N`.
fn discrete_path(
    tape: &mut Tape,
    b: &Binding,
    x: Var,
    layer: &MoeLayer,
) -> Result<(Var, Var, Codebook, QuantizationResult)> {
    let (cb_var, cb) = codebook_of(tape, b, layer)?;
    let qr = assign_codes(tape.value(x), &cb)?;
    tape.count_macs(scan_macs(qr.indices.len(), &cb));
    let q = quantizer::straight_through(tape, x, &cb, &qr)?;
    let n_exp = layer.experts.len();
    let assign: Vec<usize> = qr.indices.iter().map(|&c| code_to_expert(c, n_exp)).collect();
    let out = dispatch(tape, b, q, &layer.experts, &assign, 1, None)?;
    Ok((out, cb_var, cb, qr))
}

/// VQMoE pre-training pass: `g_c * SMoE(x) + g_d * FFN_{code mod N}(q)` per
/// token with `(g_c, g_d) = softmax(W_g x)`, plus the layer's VQ loss.
pub fn vqmoe_forward(tape: &mut Tape, b: &Binding, x: Var, layer: &MoeLayer, opts: ForwardOpts) -> Result<MoeOutput> {
    let r = &layer.router;
    let (Some(w_e), Some(w_g)) = (r.w_e, r.w_g) else {
        return Err(Error::invalid("vqmoe_forward", "layer is not a vqmoe layer"));
    };
    let n = tape.value(x).rows();
    let (gates, mut decision) = route_topk(tape, x, b.var(w_e), layer.cfg.top_k)?;
    let gates = maybe_detach(tape, gates, opts.detach_gates)?;
    let continuous = smoe_forward(tape, b, x, &layer.experts, &decision, gates)?;

    let (discrete, cb_var, _, qr) = discrete_path(tape, b, x, layer)?;

    let g = tape.matmul_nt(x, b.var(w_g))?;
    let g = tape.softmax_lastdim(g)?;
    let g = maybe_detach(tape, g, opts.detach_gates)?;
    let gc = tape.slice_lastdim(g, 0, 1)?;
    let gc = tape.reshape(gc, &[n])?;
    let gd = tape.slice_lastdim(g, 1, 1)?;
    let gd = tape.reshape(gd, &[n])?;
    let c = tape.scale_rows(continuous, gc)?;
    let d = tape.scale_rows(discrete, gd)?;
    let out = tape.add(c, d)?;

    let vq = quantizer::vq_loss(tape, x, cb_var, &qr, layer.cfg.beta)?;
    decision.code_indices = Some(qr.indices.clone());
    decision.gc_gd = Some(tape.value(g).data().to_vec());
    decision.margin = decision.margin.min(qr.min_margin());
    Ok(MoeOutput {
        out,
        decision,
        vq_loss: Some(vq),
        quantization: Some(qr),
    })
}

/// Discrete path only: `FFN_{code mod N}(q)` per token, with no gate,
/// continuous path or VQ loss. The codebook is read as a value and receives
/// no gradient.
pub fn vqmoe_discrete_forward(tape: &mut Tape, b: &Binding, x: Var, layer: &MoeLayer) -> Result<MoeOutput> {
    let (out, _, _, qr) = discrete_path(tape, b, x, layer)?;
    let n_exp = layer.experts.len();
    let n = qr.indices.len();
    let decision = RoutingDecision {
        k: 1,
        expert_indices: qr.indices.iter().map(|&c| code_to_expert(c, n_exp)).collect(),
        gate_weights: vec![1.0; n],
        code_indices: Some(qr.indices.clone()),
        gc_gd: None,
        margin: qr.min_margin(),
    };
    Ok(MoeOutput {
        out,
        decision,
        vq_loss: None,
        quantization: Some(qr),
    })
}

//! Character-level decoder-only Transformer with MoE feed-forward blocks.
//!
//! Each block is pre-norm: `h = x + attn(LN1(x))`, then `h = h + moe(LN2(h))`.
//! Token and learned positional embeddings feed the first block; the last
//! block's output is projected straight to the vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::moe::{init_uniform, Activation, ForwardOpts, MoeConfig, MoeLayer, MoeOutput, VariantKind};
use crate::optim::{clip_global_norm, global_norm, Adam, AdamConfig};
use crate::params::{Binding, ParamId, ParamStore};
use crate::quantizer::Metric;
use crate::tensor::Tensor;

pub use crate::optim::cosine_lr;

/// Architecture and loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context_length: usize,
    pub n_experts: usize,
    pub k_codes: usize,
    pub top_k: usize,
    pub h_ffn: usize,
    pub kind: VariantKind,
    pub metric: Metric,
    pub activation: Activation,
    pub expert_bias: bool,
    pub d_low: usize,
    /// Weight of the summed per-layer VQ losses.
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            context_length: 128,
            n_experts: 4,
            k_codes: 4,
            top_k: 2,
            h_ffn: 128,
            kind: VariantKind::Vqmoe,
            metric: Metric::Cosine,
            activation: Activation::Gelu,
            expert_bias: true,
            d_low: 16,
            alpha: 0.1,
            beta: 0.25,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn moe_config(&self) -> MoeConfig {
        let mut m = MoeConfig::new(self.kind, self.d_model, self.h_ffn, self.n_experts, self.k_codes);
        m.top_k = self.top_k;
        m.metric = self.metric;
        m.activation = self.activation;
        m.expert_bias = self.expert_bias;
        m.d_low = self.d_low;
        m.beta = self.beta;
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.context_length == 0 {
            return Err(Error::Config(
                "vocab_size, d_model, n_heads and context_length must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        self.moe_config().validate()
    }
}

/// Parameters of one Transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub moe: MoeLayer,
}

/// Which MoE computation the blocks run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoePath {
    /// The variant's full pre-training layer.
    Pretrain,
    /// Discrete path only (vqmoe fine-tuning).
    Discrete,
}

/// What a forward pass through the blocks produced.
#[derive(Debug)]
pub struct Hidden {
    /// `n x d` output of the last block.
    pub hidden: Var,
    /// `n x d` input of each MoE layer (after its layer norm).
    pub moe_inputs: Vec<Var>,
    pub moe: Vec<MoeOutput>,
    /// Multiply-accumulates spent in attention and MoE layers.
    pub backbone_macs: u64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Model {
    /// Builds a model with every weight drawn uniformly in `+-1/sqrt(fan_in)`
    /// from `cfg.seed` (embedding tables use fan-in `d_model`); layer-norm
    /// gains start at 1 and shifts at 0.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        let tok_emb = store.add("tok_emb", init_uniform(vec![v, d], d, &mut rng), true);
        let pos_emb = store.add(
            "pos_emb",
            init_uniform(vec![cfg.context_length, d], d, &mut rng),
            true,
        );
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("block{l}");
            let lin = |name: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
                store.add(format!("{p}.{name}"), init_uniform(vec![d, d], d, rng), true)
            };
            let ln1_g = store.add(format!("{p}.ln1.g"), Tensor::full([d], 1.0), true);
            let ln1_b = store.add(format!("{p}.ln1.b"), Tensor::zeros([d]), true);
            let wq = lin("attn.wq", &mut store, &mut rng);
            let wk = lin("attn.wk", &mut store, &mut rng);
            let wv = lin("attn.wv", &mut store, &mut rng);
            let wo = lin("attn.wo", &mut store, &mut rng);
            let ln2_g = store.add(format!("{p}.ln2.g"), Tensor::full([d], 1.0), true);
            let ln2_b = store.add(format!("{p}.ln2.b"), Tensor::zeros([d]), true);
            let moe = MoeLayer::new(&mut store, &format!("{p}.moe"), cfg.moe_config(), &mut rng)?;
            blocks.push(Block {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                ln2_g,
                ln2_b,
                moe,
            });
        }
        let head_w = store.add("head.w", init_uniform(vec![d, v], d, &mut rng), true);
        let head_b = store.add("head.b", init_uniform(vec![v], d, &mut rng), true);
        Ok(Self {
            cfg,
            store,
            tok_emb,
            pos_emb,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Runs the embeddings and blocks on `batch` sequences of `seq` tokens.
    /// With `stop_at = Some(l)` the pass ends once the input of layer `l`'s
    /// MoE is known (it is the last entry of `moe_inputs`).
    pub fn forward_hidden(
        &self,
        tape: &mut Tape,
        b: &Binding,
        inputs: &[usize],
        batch: usize,
        path: MoePath,
        stop_at: Option<usize>,
    ) -> Result<Hidden> {
        if batch == 0 || !inputs.len().is_multiple_of(batch) {
            return Err(Error::invalid("forward", format!("{} tokens in {batch} sequences", inputs.len())));
        }
        let seq = inputs.len() / batch;
        if seq > self.cfg.context_length {
            return Err(Error::invalid(
                "forward",
                format!("sequence length {seq} exceeds context {}", self.cfg.context_length),
            ));
        }
        let macs0 = tape.macs();
        let tok = tape.embedding_lookup(b.var(self.tok_emb), inputs)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.embedding_lookup(b.var(self.pos_emb), &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut moe_inputs = Vec::new();
        let mut moe = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            let a = tape.layer_norm(x, b.var(blk.ln1_g), b.var(blk.ln1_b))?;
            let q = tape.matmul(a, b.var(blk.wq))?;
            let k = tape.matmul(a, b.var(blk.wk))?;
            let v = tape.matmul(a, b.var(blk.wv))?;
            let att = tape.causal_attention(q, k, v, batch, self.cfg.n_heads)?;
            let o = tape.matmul(att, b.var(blk.wo))?;
            x = tape.add(x, o)?;
            let m = tape.layer_norm(x, b.var(blk.ln2_g), b.var(blk.ln2_b))?;
            moe_inputs.push(m);
            if stop_at == Some(l) {
                break;
            }
            let out = match path {
                MoePath::Pretrain => blk.moe.forward(tape, b, m, ForwardOpts::default())?,
                MoePath::Discrete => blk.moe.forward_discrete(tape, b, m)?,
            };
            x = tape.add(x, out.out)?;
            moe.push(out);
        }
        Ok(Hidden {
            hidden: x,
            moe_inputs,
            moe,
            backbone_macs: tape.macs() - macs0,
        })
    }

    /// Output projection to vocabulary logits.
    pub fn logits(&self, tape: &mut Tape, b: &Binding, hidden: Var) -> Result<Var> {
        let z = tape.matmul(hidden, b.var(self.head_w))?;
        tape.add_bias(z, b.var(self.head_b))
    }

    /// Mean next-token negative log-likelihood of `batch` (no gradient).
    pub fn mean_nll(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let h = self.forward_hidden(&mut tape, &b, &batch.inputs(), batch.batch, MoePath::Pretrain, None)?;
        let logits = self.logits(&mut tape, &b, h.hidden)?;
        let ce = tape.cross_entropy_with_logits(logits, &batch.targets())?;
        Ok(tape.value(ce).data()[0])
    }

    /// Replaces each vqmoe codebook with rows of that layer's inputs on
    /// `batch`, layer by layer so later layers see initialized earlier ones.
    pub fn init_codebooks<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<()> {
        let inputs = batch.inputs();
        for l in 0..self.blocks.len() {
            if self.blocks[l].moe.router.codebook.is_none() {
                continue;
            }
            let mut tape = Tape::new();
            let b = self.store.bind(&mut tape);
            let h = self.forward_hidden(&mut tape, &b, &inputs, batch.batch, MoePath::Pretrain, Some(l))?;
            let x = tape.value(*h.moe_inputs.last().expect("layer input")).clone();
            let layer = self.blocks[l].moe.clone();
            layer.init_codebook(&mut self.store, &x, rng)?;
        }
        Ok(())
    }
}

/// Optimization settings for pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    /// Global-norm clipping threshold; off when `None`.
    pub clip: Option<f64>,
    pub log_every: usize,
    pub ckpt_every: usize,
    /// Fraction of training before the stablemoe router is frozen.
    pub stable_phase1_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr_max: 3.5e-4,
            clip: None,
            log_every: 100,
            ckpt_every: 1000,
            stable_phase1_frac: 0.1,
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub task_loss: f64,
    pub vq_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue pre-training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub opt: Adam,
    /// Number of completed optimizer steps.
    pub step: usize,
    /// Drives batch sampling and codebook initialization.
    pub rng: ChaCha8Rng,
    pub train: TrainConfig,
}

impl TrainState {
    pub fn new(model: Model, train: TrainConfig) -> Self {
        let opt = Adam::new(&model.store, AdamConfig::default());
        // a separate stream from the one that drew the initial weights
        let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed);
        rng.set_stream(1);
        let mut s = Self {
            model,
            opt,
            step: 0,
            rng,
            train,
        };
        s.apply_schedule();
        s
    }

    /// Step at which the stablemoe router freezes.
    pub fn stable_freeze_step(&self) -> usize {
        (self.train.stable_phase1_frac * self.train.steps as f64).round() as usize
    }

    /// Brings trainability flags in line with the current step.
    pub fn apply_schedule(&mut self) {
        if self.model.cfg.kind == VariantKind::StableMoe && self.step >= self.stable_freeze_step() {
            for blk in &self.model.blocks {
                blk.moe.freeze_router(&mut self.model.store);
            }
        }
    }

    pub fn sample_batch(&mut self, data: &[u8]) -> Result<Batch> {
        Batch::sample(data, self.train.batch_size, self.model.cfg.context_length, &mut self.rng)
    }

    /// Builds `task + alpha * sum(vq)` on `tape`; returns the total and the
    /// task and summed VQ loss values.
    pub fn loss(&self, tape: &mut Tape, b: &Binding, batch: &Batch) -> Result<(Var, f64, f64)> {
        let m = &self.model;
        let h = m.forward_hidden(tape, b, &batch.inputs(), batch.batch, MoePath::Pretrain, None)?;
        let logits = m.logits(tape, b, h.hidden)?;
        let task = tape.cross_entropy_with_logits(logits, &batch.targets())?;
        let task_v = tape.value(task).data()[0];
        let vqs: Vec<Var> = h.moe.iter().filter_map(|o| o.vq_loss).collect();
        if vqs.is_empty() {
            return Ok((task, task_v, 0.0));
        }
        let mut vq = vqs[0];
        for &v in &vqs[1..] {
            vq = tape.add(vq, v)?;
        }
        let vq_v = tape.value(vq).data()[0];
        let weighted = tape.scale(vq, m.cfg.alpha)?;
        let total = tape.add(task, weighted)?;
        Ok((total, task_v, vq_v))
    }

    /// One Adam step on `batch` at learning rate `cosine_lr(step)`.
    /// Codebooks are initialized from the first batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        if self.step == 0 {
            self.model.init_codebooks(batch, &mut self.rng)?;
        }
        self.apply_schedule();
        let mut tape = Tape::new();
        let b = self.model.store.bind(&mut tape);
        let (total, task, vq) = self.loss(&mut tape, &b, batch)?;
        let total_v = tape.value(total).data()[0];
        if !total_v.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {}: task loss {task}, vq loss {vq}, total {total_v}",
                self.step
            )));
        }
        let mut grads = tape.backward(total)?;
        let mut g = b.collect(&mut grads);
        let grad_norm = match self.train.clip {
            Some(c) => clip_global_norm(&mut g, c),
            None => global_norm(&g),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("step {}: gradient norm {grad_norm}", self.step)));
        }
        let lr = cosine_lr(self.step, self.train.steps, self.train.lr_max);
        self.opt.step(&mut self.model.store, &g, lr);
        let metrics = StepMetrics {
            step: self.step,
            task_loss: task,
            vq_loss: vq,
            total_loss: total_v,
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Bits per character over `data`: mean next-byte NLL over non-overlapping
/// windows, divided by ln 2.
pub fn evaluate_bpc(model: &Model, data: &[u8]) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::Data("evaluation split needs at least 2 bytes".into()));
    }
    let t = model.cfg.context_length;
    let mut full: Vec<&[u8]> = Vec::new();
    let mut tail: Option<&[u8]> = None;
    let mut i = 0;
    while i + 1 < data.len() {
        let end = (i + t + 1).min(data.len());
        if end - i == t + 1 {
            full.push(&data[i..end]);
        } else {
            tail = Some(&data[i..end]);
        }
        i += t;
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for chunk in full.chunks(16) {
        let batch = Batch::from_windows(chunk)?;
        let n = batch.batch * batch.seq;
        nll += model.mean_nll(&batch)? * n as f64;
        count += n;
    }
    if let Some(w) = tail {
        let batch = Batch::from_windows(&[w])?;
        nll += model.mean_nll(&batch)? * batch.seq as f64;
        count += batch.seq;
    }
    Ok(nll / count as f64 / std::f64::consts::LN_2)
}

/// Settings for discrete-path fine-tuning on a labeled task.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_classes: usize,
    /// Hidden width of the classifier.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            n_classes: 2,
            hidden: 64,
            seed: 0,
        }
    }
}

/// Two fully connected layers on mean-pooled hidden states.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Labeled fine-tuning batch: `batch` sequences of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub model: Model,
    pub classifier: Classifier,
    pub opt: Adam,
    pub step: usize,
    pub cfg: FinetuneConfig,
}

impl FinetuneState {
    /// Swaps the LM head for a fresh classifier and freezes the codebooks,
    /// the continuous routers, the fusion gates and the LM head. Only
    /// vqmoe models qualify.
    pub fn new(mut model: Model, cfg: FinetuneConfig) -> Result<Self> {
        if model.blocks.is_empty() || model.blocks.iter().any(|b| b.moe.router.codebook.is_none()) {
            return Err(Error::Config(format!(
                "fine-tuning needs a vqmoe model with a codebook in every layer, got variant {}",
                model.cfg.kind
            )));
        }
        let store = &mut model.store;
        for blk in &model.blocks {
            let r = &blk.moe.router;
            for id in [r.codebook, r.w_e, r.w_g].into_iter().flatten() {
                store.set_trainable(id, false);
            }
        }
        store.set_trainable(model.head_w, false);
        store.set_trainable(model.head_b, false);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = model.cfg.d_model;
        let classifier = Classifier {
            w1: store.add("cls.w1", init_uniform(vec![d, cfg.hidden], d, &mut rng), true),
            b1: store.add("cls.b1", init_uniform(vec![cfg.hidden], d, &mut rng), true),
            w2: store.add("cls.w2", init_uniform(vec![cfg.hidden, cfg.n_classes], cfg.hidden, &mut rng), true),
            b2: store.add("cls.b2", init_uniform(vec![cfg.n_classes], cfg.hidden, &mut rng), true),
        };
        let opt = Adam::new(&model.store, AdamConfig::default());
        Ok(Self {
            model,
            classifier,
            opt,
            step: 0,
            cfg,
        })
    }

    /// Class logits and the backbone multiply-accumulate count.
    fn logits(&self, tape: &mut Tape, b: &Binding, batch: &LabeledBatch) -> Result<(Var, u64)> {
        let n = batch.labels.len();
        let h = self
            .model
            .forward_hidden(tape, b, &batch.tokens, n, MoePath::Discrete, None)?;
        let pooled = tape.segment_mean(h.hidden, n)?;
        let c = &self.classifier;
        let z = tape.matmul(pooled, b.var(c.w1))?;
        let z = tape.add_bias(z, b.var(c.b1))?;
        let z = tape.gelu(z)?;
        let z = tape.matmul(z, b.var(c.w2))?;
        Ok((tape.add_bias(z, b.var(c.b2))?, h.backbone_macs))
    }

    /// One Adam step on the task loss; returns the loss and the backbone
    /// multiply-accumulates of the forward pass.
    pub fn train_step(&mut self, batch: &LabeledBatch) -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let b = self.model.store.bind(&mut tape);
        let (logits, macs) = self.logits(&mut tape, &b, batch)?;
        let loss = tape.cross_entropy_with_logits(logits, &batch.labels)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("fine-tune step {}: loss {lv}", self.step)));
        }
        let mut grads = tape.backward(loss)?;
        let g = b.collect(&mut grads);
        let lr = cosine_lr(self.step, self.cfg.steps, self.cfg.lr);
        self.opt.step(&mut self.model.store, &g, lr);
        self.step += 1;
        Ok((lv, macs))
    }

    pub fn predict(&self, batch: &LabeledBatch) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let b = self.model.store.bind(&mut tape);
        let (logits, _) = self.logits(&mut tape, &b, batch)?;
        let v = tape.value(logits);
        Ok((0..v.rows())
            .map(|r| {
                let row = v.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, batch: &LabeledBatch) -> Result<f64> {
        let pred = self.predict(batch)?;
        let hits = pred.iter().zip(&batch.labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / batch.labels.len() as f64)
    }
}

/// Synthetic two-class task over the bytes `a` and `b`: each sequence draws
/// its own mix proportion, and the label is 1 when `b` is the majority.
/// `seq` should be odd so there are no ties.
pub fn majority_task<R: Rng>(n: usize, seq: usize, rng: &mut R) -> LabeledBatch {
    let mut tokens = Vec::with_capacity(n * seq);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p: f64 = rng.random();
        let mut bs = 0;
        for _ in 0..seq {
            let is_b = rng.random_bool(p);
            bs += is_b as usize;
            tokens.push(if is_b { b'b' } else { b'a' } as usize);
        }
        labels.push((2 * bs > seq) as usize);
    }
    LabeledBatch { tokens, labels }
}

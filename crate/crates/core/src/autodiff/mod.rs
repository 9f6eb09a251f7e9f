//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every primitive appends a node holding its output value. `backward`
//! walks the nodes in reverse creation order, which is a valid reverse
//! topological order because inputs always precede the nodes that use them.
//! Gradients accumulate additively across fan-out.
//!
//! ```
//! use vqmoe::autodiff::Tape;
//! use vqmoe::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
//! let loss = tape.squared_l2(x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x), vec![2.0, 4.0]);
//! ```

mod backward;
pub mod gradcheck;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{check_store_gradients, finite_difference_gradient, GradcheckReport};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    /// Position of the node on its tape.
    pub fn id(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatmulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Scale { x: usize, c: f64 },
    ScaleRows { x: usize, w: usize },
    MulScalar { x: usize, s: usize },
    Relu { x: usize },
    Gelu { x: usize, tanh: Vec<f64> },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Sum { x: usize },
    Mean { x: usize },
    TransposeLast2 { x: usize },
    ConcatLastdim { parts: Vec<usize> },
    SquaredL2 { x: usize },
    StopGradient,
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterAddRows { x: usize, idx: Vec<usize> },
    GatherLastdim { x: usize, idx: Vec<usize>, k: usize },
    SliceLastdim { x: usize, start: usize },
    L2NormalizeRows { x: usize, norms: Vec<f64> },
    SegmentMean { x: usize, groups: usize },
    /// Gradient passes through unchanged (reshape, straight-through).
    Reshape { x: usize },
    CausalAttention { q: usize, k: usize, v: usize, dims: AttnDims, probs: Vec<f64> },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub model: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

/// What `stop_gradient` does with the values flowing through it.
#[derive(Debug, Clone, Default)]
enum StopMode {
    #[default]
    Pass,
    Record(Vec<Tensor>),
    Replay { values: Vec<Tensor>, next: usize },
}

/// The recording of one forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    pub(crate) nodes: Vec<Node>,
    stops: StopMode,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            stops: StopMode::Pass,
            macs: 0,
        }
    }

    /// A tape that keeps a copy of every `stop_gradient` output, in call order.
    pub fn recording_stops() -> Self {
        let mut t = Self::new();
        t.stops = StopMode::Record(Vec::new());
        t
    }

    /// A tape whose `stop_gradient` calls return `values` in order instead of
    /// their inputs, turning every stopped branch into a constant. Used to
    /// finite-difference exactly the function that `backward` differentiates.
    pub fn replaying_stops(values: Vec<Tensor>) -> Self {
        let mut t = Self::new();
        t.stops = StopMode::Replay { values, next: 0 };
        t
    }

    /// Stop-gradient outputs recorded so far (empty unless recording).
    pub fn take_recorded_stops(&mut self) -> Vec<Tensor> {
        match &mut self.stops {
            StopMode::Record(v) => std::mem::take(v),
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by matrix-product primitives so far,
    /// plus anything reported through [`Tape::count_macs`].
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Adds multiply-accumulates performed outside the tape (e.g. a code scan).
    pub fn count_macs(&mut self, n: u64) {
        self.macs += n;
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape(v.idx));
        }
        Ok(v.idx)
    }

    pub(crate) fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub(crate) fn data(&self, idx: usize) -> &[f64] {
        self.nodes[idx].value.data()
    }

    pub(crate) fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Routes a stopped value through the record/replay machinery: passes
    /// `live` through, records it, or substitutes the next recorded value.
    fn stopped_value(&mut self, op: &'static str, live: Tensor) -> Result<Tensor> {
        match &mut self.stops {
            StopMode::Pass => Ok(live),
            StopMode::Record(rec) => {
                rec.push(live.clone());
                Ok(live)
            }
            StopMode::Replay { values, next } => {
                let v = values
                    .get(*next)
                    .cloned()
                    .ok_or_else(|| Error::invalid(op, "replay ran out of recorded values"))?;
                *next += 1;
                if v.shape() != live.shape() {
                    return Err(Error::Shape {
                        op,
                        left: v.shape().to_vec(),
                        right: live.shape().to_vec(),
                    });
                }
                Ok(v)
            }
        }
    }

    /// Identity in the forward pass; contributes nothing in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let live = self.nodes[xi].value.clone();
        let value = self.stopped_value("stop_gradient", live)?;
        Ok(self.push(value, false, Op::StopGradient))
    }

    /// Straight-through estimator `z + sg(q - z)`. The forward value is `q`
    /// exactly and the backward pass hands the output gradient to `z` unchanged.
    /// Under stop replay the stopped offset `q - z` is held fixed instead.
    pub fn straight_through(&mut self, z: Var, q: Tensor) -> Result<Var> {
        let zi = self.check(z)?;
        let zt = &self.nodes[zi].value;
        if zt.shape() != q.shape() {
            return Err(Error::Shape {
                op: "straight_through",
                left: zt.shape().to_vec(),
                right: q.shape().to_vec(),
            });
        }
        let delta: Vec<f64> = q.data().iter().zip(zt.data()).map(|(a, b)| a - b).collect();
        let delta = Tensor::new(q.shape().to_vec(), delta)?;
        let value = match self.stops {
            StopMode::Replay { .. } => {
                let d = self.stopped_value("straight_through", delta)?;
                let zt = &self.nodes[zi].value;
                let v = zt.data().iter().zip(d.data()).map(|(a, b)| a + b).collect();
                Tensor::new(q.shape().to_vec(), v)?
            }
            _ => {
                self.stopped_value("straight_through", delta)?;
                q
            }
        };
        let rg = self.rg(zi);
        Ok(self.push(value, rg, Op::Reshape { x: zi }))
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every node
    /// that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::NoGrad);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            backward::propagate(self, i, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            lens: self.nodes.iter().map(|n| n.value.numel()).collect(),
            grads,
        })
    }
}

/// Gradients of one backward pass, keyed by tape node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    lens: Vec<usize>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, if it received any.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, zeros if it received none.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.lens[v.idx]])
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

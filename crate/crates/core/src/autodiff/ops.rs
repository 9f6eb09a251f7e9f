//! Forward primitives. Each validates shapes, computes its output and
//! appends a node to the tape.

use super::{AttnDims, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{gemm, matmul, View};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;
/// Query rows per block in causal attention; keys beyond a block's last row are skipped.
pub(crate) const ATTN_BLOCK: usize = 32;

/// `tanh` through a single `exp`; accurate to a few ulps in absolute terms,
/// which is all GELU needs.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// GELU value and the `tanh` term its derivative reuses.
#[inline]
pub(crate) fn gelu_with_tanh(x: f64) -> (f64, f64) {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    (0.5 * x * (1.0 + t), t)
}

#[inline]
pub(crate) fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl Tape {
    fn matrix_dims(&self, op: &'static str, v: usize) -> Result<(usize, usize)> {
        let s = self.nodes[v].value.shape();
        if s.len() != 2 {
            return Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: usize, value: Tensor, op: Op) -> Var {
        let rg = self.rg(x);
        self.push(value, rg, op)
    }

    fn binary(&mut self, a: usize, b: usize, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, op)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix_dims("matmul", ai)?;
        let (k2, n) = self.matrix_dims("matmul", bi)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul(self.data(ai), self.data(bi), m, k, n);
        self.macs += (m * k * n) as u64;
        let value = Tensor::new([m, n], out)?;
        Ok(self.binary(ai, bi, value, Op::Matmul { a: ai, b: bi, m, k, n }))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix_dims("matmul_nt", ai)?;
        let (n, k2) = self.matrix_dims("matmul_nt", bi)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::new(self.data(ai), m, k),
            View::new(self.data(bi), n, k).t(),
            0.0,
            &mut out,
            n,
        );
        self.macs += (m * k * n) as u64;
        let value = Tensor::new([m, n], out)?;
        Ok(self.binary(ai, bi, value, Op::MatmulNt { a: ai, b: bi, m, k, n }))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(op_name, ai, bi)?;
        let out: Vec<f64> = self
            .data(ai)
            .iter()
            .zip(self.data(bi))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.binary(ai, bi, value, op(ai, bi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul_elementwise", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Adds a bias vector to every row: `[.., n] + [n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(b)?);
        let n = self.nodes[xi].value.last_dim();
        if self.shape(b) != [n] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.data(bi);
        let mut out = self.data(xi).to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.binary(xi, bi, value, Op::AddBias { x: xi, b: bi }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.data(xi).iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.unary(xi, value, Op::Scale { x: xi, c }))
    }

    /// Multiplies row `i` of `x` by `w[i]`; `w` has one entry per row.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let xv = &self.nodes[xi].value;
        let rows = xv.rows();
        if self.nodes[wi].value.numel() != rows {
            return Err(shape_err("scale_rows", self.shape(x), self.shape(w)));
        }
        let d = xv.last_dim();
        let wv = self.data(wi);
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_mut(d).zip(wv) {
            for o in row {
                *o *= s;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.binary(xi, wi, value, Op::ScaleRows { x: xi, w: wi }))
    }

    /// Multiplies every entry by a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.check(x)?, self.check(s)?);
        if self.nodes[si].value.numel() != 1 {
            return Err(shape_err("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.data(si)[0];
        let out = self.data(xi).iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.binary(xi, si, value, Op::MulScalar { x: xi, s: si }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.data(xi).iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.unary(xi, value, Op::Relu { x: xi }))
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (out, tanh): (Vec<f64>, Vec<f64>) = self.data(xi).iter().map(|&v| gelu_with_tanh(v)).unzip();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.unary(xi, value, Op::Gelu { x: xi, tanh }))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let mut value = self.nodes[xi].value.clone();
        let d = value.last_dim();
        for row in value.data_mut().chunks_mut(d) {
            softmax_row(row);
        }
        Ok(self.unary(xi, value, Op::Softmax { x: xi }))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let d = self.nodes[xi].value.last_dim();
        for p in [gi, bi] {
            if self.nodes[p].value.shape() != [d] {
                return Err(shape_err("layer_norm", self.shape(x), self.nodes[p].value.shape()));
            }
        }
        let xv = self.data(xi);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        let (g, b) = (self.data(gi), self.data(bi));
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                rstd,
            },
        ))
    }

    /// Rows of `table` ([vocab, d]) selected by `ids`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let (vocab, d) = self.matrix_dims("embedding_lookup", ti)?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding_lookup", "no ids"));
        }
        let tv = self.data(ti);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], out)?;
        Ok(self.unary(
            ti,
            value,
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let (n, v) = self.matrix_dims("cross_entropy_with_logits", li)?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy_with_logits", &[n, v], &[targets.len()]));
        }
        let mut probs = self.data(li).to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let t = targets[i];
            if t >= v {
                return Err(Error::OutOfRange {
                    op: "cross_entropy_with_logits",
                    index: t,
                    bound: v,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let picked = row[t];
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            total += max + sum.ln() - picked;
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.unary(
            li,
            value,
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = Tensor::scalar(self.data(xi).iter().sum());
        Ok(self.unary(xi, value, Op::Sum { x: xi }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let d = self.data(xi);
        let value = Tensor::scalar(d.iter().sum::<f64>() / d.len() as f64);
        Ok(self.unary(xi, value, Op::Mean { x: xi }))
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("transpose_last2", format!("rank-1 input {shape:?}")));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let xv = self.data(xi);
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(r * c).zip(out.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut new_shape = shape;
        let n = new_shape.len();
        new_shape.swap(n - 2, n - 1);
        let value = Tensor::new(new_shape, out)?;
        Ok(self.unary(xi, value, Op::TransposeLast2 { x: xi }))
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::invalid("concat_lastdim", "no inputs"))?;
        let lead = self.nodes[first].value.shape();
        let lead = &lead[..lead.len() - 1];
        for &p in &idx[1..] {
            let s = self.nodes[p].value.shape();
            if &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_lastdim", self.nodes[first].value.shape(), s));
            }
        }
        let rows = self.nodes[first].value.rows();
        let widths: Vec<usize> = idx.iter().map(|&p| self.nodes[p].value.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let rg = idx.iter().any(|&p| self.rg(p));
        Ok(self.push(value, rg, Op::ConcatLastdim { parts: idx }))
    }

    /// Sum of squared entries.
    pub fn squared_l2(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = Tensor::scalar(self.data(xi).iter().map(|v| v * v).sum());
        Ok(self.unary(xi, value, Op::SquaredL2 { x: xi }))
    }

    /// Rows of a matrix selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, d) = self.matrix_dims("gather_rows", xi)?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "no rows selected"));
        }
        let xv = self.data(xi);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::OutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let value = Tensor::new([idx.len(), d], out)?;
        Ok(self.unary(
            xi,
            value,
            Op::GatherRows {
                x: xi,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Adds row `i` of `x` into row `idx[i]` of a zero `[rows, d]` matrix.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let (m, d) = self.matrix_dims("scatter_add_rows", xi)?;
        if idx.len() != m {
            return Err(shape_err("scatter_add_rows", &[m, d], &[idx.len()]));
        }
        let xv = self.data(xi);
        let mut out = vec![0.0; rows * d];
        for (i, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(Error::OutOfRange {
                    op: "scatter_add_rows",
                    index: r,
                    bound: rows,
                });
            }
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        let value = Tensor::new([rows, d], out)?;
        Ok(self.unary(
            xi,
            value,
            Op::ScatterAddRows {
                x: xi,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Per row `i`, picks columns `idx[i * k .. (i + 1) * k]`: `[n, c] -> [n, k]`.
    pub fn gather_lastdim(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, c) = self.matrix_dims("gather_lastdim", xi)?;
        if idx.len() != n * k || k == 0 {
            return Err(shape_err("gather_lastdim", &[n, c], &[idx.len()]));
        }
        let xv = self.data(xi);
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            for &j in &idx[i * k..(i + 1) * k] {
                if j >= c {
                    return Err(Error::OutOfRange {
                        op: "gather_lastdim",
                        index: j,
                        bound: c,
                    });
                }
                out.push(xv[i * c + j]);
            }
        }
        let value = Tensor::new([n, k], out)?;
        Ok(self.unary(
            xi,
            value,
            Op::GatherLastdim {
                x: xi,
                idx: idx.to_vec(),
                k,
            },
        ))
    }

    /// Columns `start .. start + len` of every row.
    pub fn slice_lastdim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let c = self.nodes[xi].value.last_dim();
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_lastdim",
                format!("columns {start}..{} of width {c}", start + len),
            ));
        }
        let out: Vec<f64> = self
            .data(xi)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.unary(xi, value, Op::SliceLastdim { x: xi, start }))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let d = self.nodes[xi].value.last_dim();
        let mut out = self.data(xi).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for (r, row) in out.chunks_mut(d).enumerate() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 {
                return Err(Error::ZeroNormQuery(r));
            }
            for v in row.iter_mut() {
                *v /= nrm;
            }
            norms.push(nrm);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.unary(xi, value, Op::L2NormalizeRows { x: xi, norms }))
    }

    /// Mean over consecutive row groups: `[groups * m, d] -> [groups, d]`.
    pub fn segment_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, d) = self.matrix_dims("segment_mean", xi)?;
        if groups == 0 || n % groups != 0 {
            return Err(Error::invalid("segment_mean", format!("{n} rows into {groups} groups")));
        }
        let m = n / groups;
        let xv = self.data(xi);
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            for r in 0..m {
                let row = &xv[(g * m + r) * d..(g * m + r + 1) * d];
                for (o, v) in out[g * d..(g + 1) * d].iter_mut().zip(row) {
                    *o += v / m as f64;
                }
            }
        }
        let value = Tensor::new([groups, d], out)?;
        Ok(self.unary(xi, value, Op::SegmentMean { x: xi, groups }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.clone().reshape(shape.to_vec())?;
        Ok(self.unary(xi, value, Op::Reshape { x: xi }))
    }

    /// Multi-head causal self-attention on `[batch * seq, model]` projections.
    /// Scores are scaled by `1 / sqrt(model / heads)`; position `t` attends to
    /// positions `0..=t` of its own sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qi, ki, vi) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (rows, model) = self.matrix_dims("causal_attention", qi)?;
        self.same_shape("causal_attention", qi, ki)?;
        self.same_shape("causal_attention", qi, vi)?;
        if batch == 0 || rows % batch != 0 || heads == 0 || model % heads != 0 {
            return Err(Error::invalid(
                "causal_attention",
                format!("{rows} rows, width {model} do not split into batch {batch}, heads {heads}"),
            ));
        }
        let dims = AttnDims {
            batch,
            seq: rows / batch,
            heads,
            model,
        };
        let (probs, out, macs) = attention_forward(self.data(qi), self.data(ki), self.data(vi), dims);
        self.macs += macs;
        let value = Tensor::new([rows, model], out)?;
        let rg = self.rg(qi) || self.rg(ki) || self.rg(vi);
        Ok(self.push(
            value,
            rg,
            Op::CausalAttention {
                q: qi,
                k: ki,
                v: vi,
                dims,
                probs,
            },
        ))
    }
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], dims: AttnDims) -> (Vec<f64>, Vec<f64>, u64) {
    let AttnDims {
        batch,
        seq,
        heads,
        model,
    } = dims;
    let hd = model / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut out = vec![0.0; batch * seq * model];
    let mut macs = 0u64;
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * model + h * hd;
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for r0 in (0..seq).step_by(ATTN_BLOCK) {
                let r1 = (r0 + ATTN_BLOCK).min(seq);
                let (rows, cols) = (r1 - r0, r1);
                let qb = View::strided(&q[base + r0 * model..], rows, hd, model);
                let kb = View::strided(&k[base..], cols, hd, model);
                gemm(scale, qb, kb.t(), 0.0, &mut p[r0 * seq..], seq);
                for t in r0..r1 {
                    let row = &mut p[t * seq..t * seq + cols];
                    softmax_row(&mut row[..=t]);
                    row[t + 1..].fill(0.0);
                }
                let pb = View::strided(&p[r0 * seq..], rows, cols, seq);
                let vb = View::strided(&v[base..], cols, hd, model);
                gemm(1.0, pb, vb, 0.0, &mut out[base + r0 * model..], model);
                // causal products only: query t touches keys 0..=t
                macs += 2 * (hd * (r0 + 1 + r1) * rows / 2) as u64;
            }
        }
    }
    (probs, out, macs)
}

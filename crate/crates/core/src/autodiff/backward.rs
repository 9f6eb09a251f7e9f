//! Vector-Jacobian products for every primitive.

use super::ops::{gelu_grad, ATTN_BLOCK};
use super::{AttnDims, Op, Tape};
use crate::kernels::{gemm, View};

type Grads = [Option<Vec<f64>>];

fn slot<'g>(grads: &'g mut Grads, tape: &Tape, i: usize) -> &'g mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; tape.nodes[i].value.numel()])
}

fn acc_copy(grads: &mut Grads, tape: &Tape, i: usize, g: &[f64]) {
    if !tape.rg(i) {
        return;
    }
    match &mut grads[i] {
        Some(v) => v.iter_mut().zip(g).for_each(|(v, g)| *v += g),
        none => *none = Some(g.to_vec()),
    }
}

fn acc(grads: &mut Grads, tape: &Tape, i: usize, f: impl Fn(usize) -> f64) {
    if !tape.rg(i) {
        return;
    }
    for (j, v) in slot(grads, tape, i).iter_mut().enumerate() {
        *v += f(j);
    }
}

/// Pushes the gradient `g` of node `i` into the gradients of its inputs.
pub(super) fn propagate(tape: &Tape, i: usize, g: &[f64], grads: &mut Grads) {
    let node = &tape.nodes[i];
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        &Op::Matmul { a, b, m, k, n } => {
            if tape.rg(a) {
                // dA += G B^T
                let bv = View::new(tape.data(b), k, n).t();
                gemm(1.0, View::new(g, m, n), bv, 1.0, slot(grads, tape, a), k);
            }
            if tape.rg(b) {
                // dB += A^T G
                let av = View::new(tape.data(a), m, k).t();
                gemm(1.0, av, View::new(g, m, n), 1.0, slot(grads, tape, b), n);
            }
        }
        &Op::MatmulNt { a, b, m, k, n } => {
            if tape.rg(a) {
                // dA += G B
                gemm(1.0, View::new(g, m, n), View::new(tape.data(b), n, k), 1.0, slot(grads, tape, a), k);
            }
            if tape.rg(b) {
                // dB += G^T A
                gemm(1.0, View::new(g, m, n).t(), View::new(tape.data(a), m, k), 1.0, slot(grads, tape, b), k);
            }
        }
        &Op::Add { a, b } => {
            acc_copy(grads, tape, a, g);
            acc_copy(grads, tape, b, g);
        }
        &Op::Sub { a, b } => {
            acc_copy(grads, tape, a, g);
            acc(grads, tape, b, |j| -g[j]);
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (tape.data(a), tape.data(b));
            acc(grads, tape, a, |j| g[j] * bv[j]);
            acc(grads, tape, b, |j| g[j] * av[j]);
        }
        &Op::AddBias { x, b } => {
            acc_copy(grads, tape, x, g);
            if tape.rg(b) {
                let n = tape.nodes[b].value.numel();
                let gb = slot(grads, tape, b);
                for row in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
        &Op::Scale { x, c } => acc(grads, tape, x, |j| g[j] * c),
        &Op::ScaleRows { x, w } => {
            let d = tape.nodes[x].value.last_dim();
            let (xv, wv) = (tape.data(x), tape.data(w));
            acc(grads, tape, x, |j| g[j] * wv[j / d]);
            if tape.rg(w) {
                let gw = slot(grads, tape, w);
                for (r, (gr, xr)) in g.chunks(d).zip(xv.chunks(d)).enumerate() {
                    gw[r] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        &Op::MulScalar { x, s } => {
            let (xv, c) = (tape.data(x), tape.data(s)[0]);
            acc(grads, tape, x, |j| g[j] * c);
            if tape.rg(s) {
                slot(grads, tape, s)[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        &Op::Relu { x } => {
            let xv = tape.data(x);
            acc(grads, tape, x, |j| if xv[j] > 0.0 { g[j] } else { 0.0 });
        }
        Op::Gelu { x, tanh } => {
            let xv = tape.data(*x);
            acc(grads, tape, *x, |j| g[j] * gelu_grad(xv[j], tanh[j]));
        }
        &Op::Softmax { x } => {
            if tape.rg(x) {
                let y = node.value.data();
                let d = node.value.last_dim();
                let gx = slot(grads, tape, x);
                for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let d = tape.nodes[gamma].value.numel();
            if tape.rg(beta) {
                let gb = slot(grads, tape, beta);
                for row in g.chunks(d) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            if tape.rg(gamma) {
                let gg = slot(grads, tape, gamma);
                for (row, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += row[j] * hr[j];
                    }
                }
            }
            if tape.rg(x) {
                let gv = tape.data(gamma);
                let gx = slot(grads, tape, x);
                for (r, ((row, hr), out)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = row[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dh = row[j] * gv[j];
                        out[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if tape.rg(*table) {
                let d = tape.nodes[*table].value.last_dim();
                let gt = slot(grads, tape, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if tape.rg(*logits) {
                let n = targets.len();
                let v = probs.len() / n;
                let s = g[0] / n as f64;
                let gl = slot(grads, tape, *logits);
                for (j, o) in gl.iter_mut().enumerate() {
                    let onehot = if targets[j / v] == j % v { 1.0 } else { 0.0 };
                    *o += s * (probs[j] - onehot);
                }
            }
        }
        &Op::Sum { x } => acc(grads, tape, x, |_| g[0]),
        &Op::Mean { x } => {
            let n = tape.nodes[x].value.numel() as f64;
            acc(grads, tape, x, |_| g[0] / n)
        }
        &Op::TransposeLast2 { x } => {
            let s = tape.nodes[x].value.shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            // output is [.., c, r]; element (i, j) of the input sits at (j, i) of the output
            acc(grads, tape, x, |idx| {
                let blk = idx / (r * c);
                let rem = idx % (r * c);
                let (i, j) = (rem / c, rem % c);
                g[blk * r * c + j * r + i]
            });
        }
        Op::ConcatLastdim { parts } => {
            let total = node.value.last_dim();
            let mut off = 0;
            for &p in parts {
                let w = tape.nodes[p].value.last_dim();
                acc(grads, tape, p, |j| g[(j / w) * total + off + j % w]);
                off += w;
            }
        }
        &Op::SquaredL2 { x } => {
            let xv = tape.data(x);
            acc(grads, tape, x, |j| 2.0 * xv[j] * g[0]);
        }
        Op::GatherRows { x, idx } => {
            if tape.rg(*x) {
                let d = tape.nodes[*x].value.last_dim();
                let gx = slot(grads, tape, *x);
                for (r, &src) in idx.iter().enumerate() {
                    for (o, v) in gx[src * d..(src + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
            }
        }
        Op::ScatterAddRows { x, idx } => {
            let d = node.value.last_dim();
            acc(grads, tape, *x, |j| g[idx[j / d] * d + j % d]);
        }
        Op::GatherLastdim { x, idx, k } => {
            if tape.rg(*x) {
                let c = tape.nodes[*x].value.last_dim();
                let gx = slot(grads, tape, *x);
                for (p, &col) in idx.iter().enumerate() {
                    gx[(p / k) * c + col] += g[p];
                }
            }
        }
        &Op::SliceLastdim { x, start } => {
            if tape.rg(x) {
                let c = tape.nodes[x].value.last_dim();
                let w = node.value.last_dim();
                let gx = slot(grads, tape, x);
                for (r, row) in g.chunks(w).enumerate() {
                    for (o, v) in gx[r * c + start..r * c + start + w].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            if tape.rg(*x) {
                let d = node.value.last_dim();
                let y = node.value.data();
                let gx = slot(grads, tape, *x);
                for (r, ((gr, yr), out)) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] += (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
            }
        }
        &Op::SegmentMean { x, groups } => {
            let s = tape.nodes[x].value.shape();
            let (n, d) = (s[0], s[1]);
            let m = n / groups;
            acc(grads, tape, x, |j| g[(j / d / m) * d + j % d] / m as f64);
        }
        &Op::Reshape { x } => acc_copy(grads, tape, x, g),
        Op::CausalAttention { q, k, v, dims, probs } => {
            attention_backward(tape, (*q, *k, *v), *dims, probs, g, grads);
        }
    }
}

fn attention_backward(
    tape: &Tape,
    (q, k, v): (usize, usize, usize),
    dims: AttnDims,
    probs: &[f64],
    g: &[f64],
    grads: &mut Grads,
) {
    let AttnDims {
        batch,
        seq,
        heads,
        model,
    } = dims;
    let hd = model / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (qv, kv, vv) = (tape.data(q), tape.data(k), tape.data(v));
    let numel = batch * seq * model;
    let mut dq = vec![0.0; numel];
    let mut dk = vec![0.0; numel];
    let mut dv = vec![0.0; numel];
    let mut ds = vec![0.0; ATTN_BLOCK * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * model + h * hd;
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for r0 in (0..seq).step_by(ATTN_BLOCK) {
                let r1 = (r0 + ATTN_BLOCK).min(seq);
                let (rows, cols) = (r1 - r0, r1);
                let gob = View::strided(&g[base + r0 * model..], rows, hd, model);
                let pb = View::strided(&p[r0 * seq..], rows, cols, seq);
                // dV[0..cols] += P^T dO
                gemm(1.0, pb.t(), gob, 1.0, &mut dv[base..], model);
                // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
                let vb = View::strided(&vv[base..], cols, hd, model);
                gemm(1.0, gob, vb.t(), 0.0, &mut ds, cols);
                for r in 0..rows {
                    let prow = &p[(r0 + r) * seq..(r0 + r) * seq + cols];
                    let drow = &mut ds[r * cols..(r + 1) * cols];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (dv_, &pv) in drow.iter_mut().zip(prow) {
                        *dv_ = pv * (*dv_ - dot);
                    }
                }
                let dsb = View::new(&ds, rows, cols);
                let kb = View::strided(&kv[base..], cols, hd, model);
                gemm(scale, dsb, kb, 1.0, &mut dq[base + r0 * model..], model);
                let qb = View::strided(&qv[base + r0 * model..], rows, hd, model);
                gemm(scale, dsb.t(), qb, 1.0, &mut dk[base..], model);
            }
        }
    }
    for (idx, d) in [(q, dq), (k, dk), (v, dv)] {
        acc(grads, tape, idx, |j| d[j]);
    }
}

//! Principal components of expert outputs.

use std::path::Path;

use nalgebra::DMatrix;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::moe::{ForwardOpts, MoeLayer};
use crate::params::ParamStore;
use crate::quantizer::code_to_expert;
use crate::tensor::Tensor;

/// Fitted principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k x d`, one unit axis per row, by decreasing variance. Each axis is
    /// signed so that its largest-magnitude entry is positive.
    pub components: Tensor,
    /// Share of total variance along each axis.
    pub explained_ratio: Vec<f64>,
}

/// PCA of the rows of `x` via the SVD of the mean-centered matrix.
pub fn pca(x: &Tensor, k: usize) -> Result<Pca> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::invalid("pca", format!("need a non-empty matrix, got shape {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.last_dim());
    if k == 0 || k > d {
        return Err(Error::invalid("pca", format!("cannot keep {k} of {d} components")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |r, c| x.row(r)[c] - mean[c]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut components = Vec::with_capacity(k * d);
    let mut explained_ratio = Vec::with_capacity(k);
    for i in 0..k {
        let (axis, s) = match order.get(i) {
            Some(&j) => (v_t.row(j).iter().copied().collect::<Vec<f64>>(), svd.singular_values[j]),
            // fewer rows than components: the remaining axes carry no variance
            None => (vec![0.0; d], 0.0),
        };
        let pivot = axis.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(axis.iter().map(|v| v * sign));
        explained_ratio.push(if total > 0.0 { s * s / total } else { 0.0 });
    }
    Ok(Pca {
        mean,
        components: Tensor::new(vec![k, d], components)?,
        explained_ratio,
    })
}

impl Pca {
    /// Coordinates of the rows of `x` along the kept axes.
    pub fn project(&self, x: &Tensor) -> Tensor {
        let k = self.components.rows();
        let mut out = Vec::with_capacity(x.rows() * k);
        for r in 0..x.rows() {
            for a in 0..k {
                let axis = self.components.row(a);
                out.push(x.row(r).iter().zip(&self.mean).zip(axis).map(|((v, m), w)| (v - m) * w).sum());
            }
        }
        Tensor::new(vec![x.rows(), k], out).expect("shape matches data")
    }
}

/// One projected expert output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaRow {
    pub expert: usize,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDump {
    /// Outputs of each expert on the tokens routed to it (`m_e x d`), or
    /// `None` when nothing was routed there.
    pub groups: Vec<Option<Tensor>>,
    pub pca: Pca,
    pub rows: Vec<PcaRow>,
}

/// Runs `x` (`n x d`) through the layer, collects every expert's outputs on
/// the tokens routed to it and projects the pooled outputs onto two
/// principal axes. Top-k slots feed the expert the token itself; the vqmoe
/// discrete slot feeds it the selected code.
pub fn expert_representation_dump(store: &ParamStore, layer: &MoeLayer, x: &Tensor) -> Result<ExpertDump> {
    let d = layer.cfg.d_model;
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = layer.forward(&mut tape, &b, xv, ForwardOpts::default())?;
    let dec = out.decision;
    let n_exp = layer.experts.len();
    let mut inputs: Vec<Vec<f64>> = vec![Vec::new(); n_exp];
    for t in 0..dec.tokens() {
        for &e in dec.experts_of(t) {
            inputs[e].extend_from_slice(x.row(t));
        }
    }
    if let (Some(codes), Some(_), Some(cb)) = (&dec.code_indices, &dec.gc_gd, layer.codebook(store)) {
        for &c in codes {
            inputs[code_to_expert(c, n_exp)].extend_from_slice(cb.vectors.row(c));
        }
    }
    let mut groups = Vec::with_capacity(n_exp);
    for (e, rows) in inputs.into_iter().enumerate() {
        let m = rows.len() / d;
        if m == 0 {
            groups.push(None);
            continue;
        }
        let xe = tape.constant(Tensor::new(vec![m, d], rows)?);
        let ye = layer.experts[e].forward(&mut tape, &b, xe)?;
        groups.push(Some(tape.value(ye).clone()));
    }
    let pooled: Vec<f64> = groups.iter().flatten().flat_map(|g| g.data().iter().copied()).collect();
    let total = pooled.len() / d;
    let fit = pca(&Tensor::new(vec![total, d], pooled)?, 2.min(d))?;
    let mut rows = Vec::with_capacity(total);
    for (e, g) in groups.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = fit.project(g);
        for r in 0..p.rows() {
            let c = p.row(r);
            rows.push(PcaRow {
                expert: e,
                pc1: c[0],
                pc2: c.get(1).copied().unwrap_or(0.0),
            });
        }
    }
    Ok(ExpertDump {
        groups,
        pca: fit,
        rows,
    })
}

/// `pca.csv`: `expert,pc1,pc2` with shortest round-trip float formatting.
pub fn write_pca_csv(path: &Path, rows: &[PcaRow]) -> Result<()> {
    let mut s = String::from("expert,pc1,pc2\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.expert, r.pc1, r.pc2));
    }
    crate::fsutil::write_atomic(path, s.as_bytes())
}

pub fn read_pca_csv(path: &Path) -> Result<Vec<PcaRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Data(format!("{}: malformed row {line}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some("expert,pc1,pc2") {
        return Err(Error::Data(format!("{}: missing pca header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(i + 2));
            }
            Ok(PcaRow {
                expert: f[0].parse().map_err(|_| bad(i + 2))?,
                pc1: f[1].parse().map_err(|_| bad(i + 2))?,
                pc2: f[2].parse().map_err(|_| bad(i + 2))?,
            })
        })
        .collect()
}

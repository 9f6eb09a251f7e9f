//! Routing analysis: consistency scores, Jacobian rank of the gating term,
//! PCA dumps of expert outputs, load statistics, FLOPs accounting and
//! convergence drift.

use std::fmt;

use crate::error::{Error, Result};
use crate::moe::RoutingDecision;
use crate::quantizer::{code_to_expert, Codebook, Metric};
use crate::tensor::Tensor;

mod drift;
mod flops;
mod jacobian;
mod pca;

pub use drift::{drift_series, write_drift_csv, DriftRow, Snapshot};
pub use flops::{flops_count, measured_flops_per_token, FlopsBreakdown, FlopsMode};
pub use jacobian::{
    jacobian_residual_rank, jacobian_residual_rank_with, layer_jacobian, write_jacobian_csv, JacobianReport,
    MIN_PROBE_MARGIN,
};
pub use pca::{expert_representation_dump, pca, read_pca_csv, write_pca_csv, ExpertDump, Pca, PcaRow};

/// How a consistency score was measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyKind {
    /// Selected expert is the nearest centroid.
    Definitional,
    /// Selection agrees with a previous checkpoint on the same probe tokens.
    Temporal,
}

impl fmt::Display for ConsistencyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConsistencyKind::Definitional => "definitional",
            ConsistencyKind::Temporal => "temporal",
        })
    }
}

/// Scoring rule for [`consistency_score`].
#[derive(Debug, Clone, Copy)]
pub enum ConsistencyMode<'a> {
    Definitional { metric: Metric },
    /// Per-token selections from the previous checkpoint.
    Temporal { previous: &'a [usize] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub step: usize,
    /// Consistent tokens over all tokens.
    pub score: f64,
    pub per_expert_centroids: Tensor,
    pub mode: ConsistencyKind,
}

/// Scores the per-token selected expert (the discrete-path expert for
/// vqmoe, the top-1 expert otherwise) against `centroids` (`N x d`).
///
/// Definitional mode counts a token when its selected expert's centroid is
/// no farther than any other. A centroid row that is entirely NaN marks an
/// expert with no centroid: it is never nearest, and selecting it counts as
/// inconsistent.
pub fn consistency_score(
    x: &Tensor,
    decision: &RoutingDecision,
    centroids: &Tensor,
    mode: ConsistencyMode<'_>,
    step: usize,
) -> Result<ConsistencyReport> {
    let n = decision.tokens();
    if n == 0 || x.rows() == 0 {
        return Err(Error::invalid("consistency_score", "empty batch"));
    }
    if x.rows() != n {
        return Err(Error::invalid(
            "consistency_score",
            format!("{} rows but {n} routed tokens", x.rows()),
        ));
    }
    if centroids.rank() != 2 || centroids.last_dim() != x.last_dim() {
        return Err(Error::Shape {
            op: "consistency_score",
            left: x.shape().to_vec(),
            right: centroids.shape().to_vec(),
        });
    }
    let n_exp = centroids.rows();
    let present: Vec<bool> = (0..n_exp)
        .map(|e| {
            let row = centroids.row(e);
            if row.iter().all(|v| v.is_nan()) {
                Ok(false)
            } else if row.iter().all(|v| v.is_finite()) {
                Ok(true)
            } else {
                Err(Error::NonFinite(format!("centroid of expert {e}")))
            }
        })
        .collect::<Result<_>>()?;
    let selected: Vec<usize> = (0..n).map(|t| decision.primary_expert(t, n_exp)).collect();
    let (hits, kind) = match mode {
        ConsistencyMode::Definitional { metric } => {
            let mut hits = 0;
            for (t, &sel) in selected.iter().enumerate() {
                if sel >= n_exp || !present[sel] {
                    continue;
                }
                let own = metric.distance(x.row(t), centroids.row(sel));
                let nearest = (0..n_exp)
                    .filter(|&e| present[e])
                    .all(|e| own <= metric.distance(x.row(t), centroids.row(e)));
                hits += nearest as usize;
            }
            (hits, ConsistencyKind::Definitional)
        }
        ConsistencyMode::Temporal { previous } => {
            if previous.len() != n {
                return Err(Error::invalid(
                    "consistency_score",
                    format!("previous selection covers {} tokens, batch has {n}", previous.len()),
                ));
            }
            let hits = selected.iter().zip(previous).filter(|(a, b)| a == b).count();
            (hits, ConsistencyKind::Temporal)
        }
    };
    Ok(ConsistencyReport {
        step,
        score: hits as f64 / n as f64,
        per_expert_centroids: centroids.clone(),
        mode: kind,
    })
}

/// Per-expert centroids of a codebook: the mean of the codes each expert
/// serves under `code mod N`. Experts serving no code get NaN rows.
pub fn code_centroids(codebook: &Codebook, n_experts: usize) -> Tensor {
    let d = codebook.d();
    let mut sums = vec![0.0; n_experts * d];
    let mut counts = vec![0usize; n_experts];
    for c in 0..codebook.k() {
        let e = code_to_expert(c, n_experts);
        counts[e] += 1;
        for (s, v) in sums[e * d..(e + 1) * d].iter_mut().zip(codebook.vectors.row(c)) {
            *s += v;
        }
    }
    finish_means(sums, &counts, d)
}

fn finish_means(mut sums: Vec<f64>, counts: &[usize], d: usize) -> Tensor {
    for (e, &c) in counts.iter().enumerate() {
        for s in &mut sums[e * d..(e + 1) * d] {
            *s = if c == 0 { f64::NAN } else { *s / c as f64 };
        }
    }
    Tensor::new(vec![counts.len(), d], sums).expect("shape matches data")
}

/// Running means of the tokens each expert is selected for.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningCentroids {
    d: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl RunningCentroids {
    pub fn new(n_experts: usize, d: usize) -> Self {
        Self {
            d,
            sums: vec![0.0; n_experts * d],
            counts: vec![0; n_experts],
        }
    }

    /// Adds each row of `x` to the centroid of its selected expert.
    pub fn update(&mut self, x: &Tensor, decision: &RoutingDecision) -> Result<()> {
        let n_exp = self.counts.len();
        if x.last_dim() != self.d || x.rows() != decision.tokens() {
            return Err(Error::invalid(
                "running_centroids",
                format!("{:?} rows for {} routed tokens of width {}", x.shape(), decision.tokens(), self.d),
            ));
        }
        for t in 0..x.rows() {
            let e = decision.primary_expert(t, n_exp);
            self.counts[e] += 1;
            for (s, v) in self.sums[e * self.d..(e + 1) * self.d].iter_mut().zip(x.row(t)) {
                *s += v;
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Current means; experts never selected get NaN rows.
    pub fn centroids(&self) -> Tensor {
        finish_means(self.sums.clone(), &self.counts, self.d)
    }
}

/// Fraction of routed slots each of `n_experts` receives (top-k slots plus
/// the discrete-path slot when present).
pub fn load_stats(decision: &RoutingDecision, n_experts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_experts];
    for &e in &decision.expert_indices {
        counts[e] += 1;
    }
    if let Some(codes) = &decision.code_indices {
        if decision.gc_gd.is_some() {
            for &c in codes {
                counts[code_to_expert(c, n_experts)] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// `consistency.csv` rows: `step,mode,score`.
pub fn write_consistency_csv(path: &std::path::Path, reports: &[ConsistencyReport]) -> Result<()> {
    let mut s = String::from("step,mode,score\n");
    for r in reports {
        s.push_str(&format!("{},{},{}\n", r.step, r.mode, r.score));
    }
    crate::fsutil::write_atomic(path, s.as_bytes())
}

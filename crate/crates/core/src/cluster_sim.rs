//! Synthetic clustered data for checking expert assignment: an exhaustive
//! permutation oracle for cluster-to-expert assignment, and a run that
//! trains a slowly moving feature map under a fast linear router to expose
//! routing that disagrees with the nearest cluster center.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tape;
use crate::diagnostics::{consistency_score, ConsistencyMode};
use crate::error::{Error, Result};
use crate::moe::{init_uniform, Activation, ExpertFfn, RoutingDecision};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::quantizer::{assign_codes, Codebook, Metric};
use crate::tensor::Tensor;

/// Center placement gives up after this many rejected draws per center.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Largest expert count the permutation oracle enumerates.
pub const MAX_ORACLE_EXPERTS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub n_clusters: usize,
    pub d: usize,
    pub points_per_cluster: usize,
    /// Minimum pairwise distance between centers.
    pub center_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.d == 0 || self.points_per_cluster == 0 {
            return Err(Error::Config(
                "n_clusters, d and points_per_cluster must be positive".into(),
            ));
        }
        if !(self.center_separation > 0.0) || !self.center_separation.is_finite() {
            return Err(Error::Config(format!(
                "center_separation must be positive, got {}",
                self.center_separation
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Points grouped by cluster, in cluster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Clusters {
    /// `M x d`.
    pub points: Tensor,
    pub labels: Vec<usize>,
    /// `N x d`.
    pub centers: Tensor,
}

impl Clusters {
    pub fn n_clusters(&self) -> usize {
        self.centers.rows()
    }

    /// Rows of cluster `c`.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&p| self.labels[p] == c).collect()
    }
}

fn gather(x: &Tensor, rows: &[usize]) -> Tensor {
    let d = x.last_dim();
    let data = rows.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data).expect("shape matches data")
}

/// Centers drawn uniformly in `[-s, s]^d` (`s` the separation) and kept
/// only if at least `s` from every earlier center; each point is its center
/// plus isotropic Gaussian noise.
pub fn generate_clusters(spec: &ClusterSpec) -> Result<Clusters> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d, s) = (spec.n_clusters, spec.d, spec.center_separation);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n);
    for c in 0..n {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cand: Vec<f64> = (0..d).map(|_| rng.random_range(-s..=s)).collect();
            let far = centers.iter().all(|u| {
                u.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= s
            });
            if far {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place center {c} of {n} at separation {s} in {d} dimensions after \
                 {MAX_PLACEMENT_ATTEMPTS} attempts; lower n_clusters or raise d"
            )));
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let m = n * spec.points_per_cluster;
    let mut points = Vec::with_capacity(m * d);
    let mut labels = Vec::with_capacity(m);
    for (c, u) in centers.iter().enumerate() {
        for _ in 0..spec.points_per_cluster {
            points.extend(u.iter().map(|&v| v + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Ok(Clusters {
        points: Tensor::new(vec![m, d], points)?,
        labels,
        centers: Tensor::new(vec![n, d], centers.concat())?,
    })
}

/// Index of the nearest center (squared Euclidean, lowest index on ties)
/// for every point.
pub fn nearest_center_labels(points: &Tensor, centers: &Tensor) -> Result<Vec<usize>> {
    let cb = Codebook::new(centers.clone(), Metric::Euclidean)?;
    Ok(assign_codes(points, &cb)?.indices)
}

/// One cluster-specific linear map per cluster (`d x d`, entries uniform in
/// `+-1/sqrt(d)`).
pub fn random_maps(n: usize, d: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| init_uniform(vec![d, d], d, &mut rng)).collect()
}

/// Regression targets `y_p = x_p A_c` where `c` is the point's cluster.
pub fn linear_targets(clusters: &Clusters, maps: &[Tensor]) -> Result<Tensor> {
    let (m, d) = (clusters.points.rows(), clusters.points.last_dim());
    if maps.len() != clusters.n_clusters() || maps.iter().any(|a| a.shape() != [d, d]) {
        return Err(Error::invalid("linear_targets", format!("need {} maps of shape [{d}, {d}]", clusters.n_clusters())));
    }
    let mut y = Vec::with_capacity(m * d);
    for p in 0..m {
        let (x, a) = (clusters.points.row(p), &maps[clusters.labels[p]]);
        for j in 0..d {
            y.push((0..d).map(|i| x[i] * a.row(i)[j]).sum::<f64>());
        }
    }
    Tensor::new(vec![m, d], y)
}

/// Every permutation of `0..n` in lexicographic order (identity first).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Hidden width of each expert.
    pub hidden: usize,
    pub activation: Activation,
    /// Identity-assignment steps that specialize the experts.
    pub warmup_steps: usize,
    /// Steps each permutation trains for, starting from the warmed-up experts.
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            activation: Activation::Gelu,
            warmup_steps: 3000,
            steps: 30,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationLoss {
    /// `perm[c]` is the expert that serves cluster `c`.
    pub perm: Vec<usize>,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    /// One row per permutation; the identity comes first.
    pub rows: Vec<PermutationLoss>,
}

impl OracleReport {
    pub fn identity_loss(&self) -> f64 {
        self.rows[0].total_loss
    }

    /// Smallest loss over non-identity assignments.
    pub fn best_other(&self) -> Option<f64> {
        self.rows[1..].iter().map(|r| r.total_loss).min_by(f64::total_cmp)
    }

    /// Best non-identity loss minus the identity loss.
    pub fn margin(&self) -> f64 {
        self.best_other().map_or(f64::INFINITY, |b| b - self.identity_loss())
    }

    pub fn identity_strictly_minimal(&self) -> bool {
        self.margin() > 0.0
    }

    /// Largest absolute deviation of any assignment from the identity loss.
    pub fn spread(&self) -> f64 {
        let id = self.identity_loss();
        self.rows.iter().map(|r| (r.total_loss - id).abs()).fold(0.0, f64::max)
    }
}

/// Mean squared error of `expert` on rows `x` against `y`; with `train`,
/// also returns the gradients of the expert's parameters.
fn mse(store: &ParamStore, expert: &ExpertFfn, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = expert.forward(&mut tape, &b, xv)?;
    let diff = tape.sub(out, yv)?;
    let sq = tape.squared_l2(diff)?;
    let loss = tape.scale(sq, 1.0 / x.rows() as f64)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let mut g = b.collect(&mut grads);
    let own: Vec<usize> = expert.params().iter().map(|p| p.index()).collect();
    for (i, slot) in g.iter_mut().enumerate() {
        if !own.contains(&i) {
            *slot = None;
        }
    }
    Ok((value, g))
}

/// Trains `perm[c]` on cluster `c` for `steps` full-batch Adam steps each;
/// returns the summed final losses.
fn train_assignment(
    store: &mut ParamStore,
    opt: &mut Adam,
    experts: &[ExpertFfn],
    data: &[(Tensor, Tensor)],
    perm: &[usize],
    steps: usize,
    lr: f64,
) -> Result<f64> {
    for _ in 0..steps {
        for (c, (x, y)) in data.iter().enumerate() {
            let (_, g) = mse(store, &experts[perm[c]], x, y)?;
            opt.step(store, &g, lr);
        }
    }
    let mut total = 0.0;
    for (c, (x, y)) in data.iter().enumerate() {
        total += mse(store, &experts[perm[c]], x, y)?.0;
    }
    Ok(total)
}

/// Exhaustive check that routing cluster `c` to expert `c` is optimal.
///
/// Experts are first specialized by training expert `c` on cluster `c`.
/// Every one of the `N!` assignments then continues from a bit-identical
/// copy of those experts and their optimizer state for `cfg.steps` steps, and
/// its total loss is recorded.
pub fn oracle_assignment_check(clusters: &Clusters, targets: &Tensor, cfg: &OracleConfig) -> Result<OracleReport> {
    let n = clusters.n_clusters();
    if n > MAX_ORACLE_EXPERTS {
        return Err(Error::Config(format!(
            "the permutation oracle enumerates N! assignments and allows N <= {MAX_ORACLE_EXPERTS}, got {n}"
        )));
    }
    if targets.shape() != clusters.points.shape() {
        return Err(Error::Shape {
            op: "oracle_assignment_check",
            left: clusters.points.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let d = clusters.points.last_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let experts: Vec<ExpertFfn> = (0..n)
        .map(|e| ExpertFfn::new(&mut store, &format!("expert{e}"), d, cfg.hidden, cfg.activation, true, &mut rng))
        .collect();
    let data: Vec<(Tensor, Tensor)> = (0..n)
        .map(|c| {
            let rows = clusters.members(c);
            (gather(&clusters.points, &rows), gather(targets, &rows))
        })
        .collect();
    let identity: Vec<usize> = (0..n).collect();
    let mut opt = Adam::new(&store, AdamConfig::default());
    train_assignment(&mut store, &mut opt, &experts, &data, &identity, cfg.warmup_steps, cfg.lr)?;
    let rows = permutations(n)
        .into_iter()
        .map(|perm| {
            let (mut s, mut o) = (store.clone(), opt.clone());
            let total_loss = train_assignment(&mut s, &mut o, &experts, &data, &perm, cfg.steps, cfg.lr)?;
            Ok(PermutationLoss { perm, total_loss })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleReport { rows })
}

/// `prop1_report.csv`: `permutation,total_loss`, the permutation written as
/// expert indices joined by `-`.
pub fn write_prop1_csv(path: &Path, report: &OracleReport) -> Result<()> {
    let mut s = String::from("permutation,total_loss\n");
    for r in &report.rows {
        let p: Vec<String> = r.perm.iter().map(|e| e.to_string()).collect();
        s.push_str(&format!("{},{}\n", p.join("-"), r.total_loss));
    }
    crate::fsutil::write_atomic(path, s.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InconsistencyConfig {
    pub steps: usize,
    /// Checkpoint interval.
    pub every: usize,
    /// Router learning rate.
    pub lr: f64,
    /// Feature-map learning rate as a fraction of `lr`.
    pub feature_lr_ratio: f64,
    pub hidden: usize,
    pub freeze_features: bool,
    pub seed: u64,
}

impl Default for InconsistencyConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            every: 20,
            lr: 1e-2,
            feature_lr_ratio: 0.1,
            hidden: 32,
            freeze_features: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesRow {
    pub step: usize,
    /// Definitional consistency of the router's argmax.
    pub router_consistency: f64,
    /// Definitional consistency of nearest-centroid assignment.
    pub vq_consistency: f64,
    /// Relative change of the point features since the previous checkpoint
    /// (zero at the first).
    pub feature_drift: f64,
}

struct FeatureNet {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    router: ParamId,
}

/// Trains a two-layer feature map (at `lr * feature_lr_ratio`) under a
/// linear router (at `lr`) to classify cluster membership. At step 0 and
/// every `every` steps, both the router's argmax and nearest-centroid
/// assignment are scored for definitional consistency against the
/// per-cluster feature means.
pub fn router_inconsistency_run(clusters: &Clusters, cfg: &InconsistencyConfig) -> Result<Vec<SeriesRow>> {
    if cfg.every == 0 {
        return Err(Error::Config("checkpoint interval must be positive".into()));
    }
    let (n, d) = (clusters.n_clusters(), clusters.points.last_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let trainable = !cfg.freeze_features;
    let net = FeatureNet {
        w1: store.add("feat.w1", init_uniform(vec![d, cfg.hidden], d, &mut rng), trainable),
        b1: store.add("feat.b1", init_uniform(vec![cfg.hidden], d, &mut rng), trainable),
        w2: store.add("feat.w2", init_uniform(vec![cfg.hidden, d], cfg.hidden, &mut rng), trainable),
        b2: store.add("feat.b2", init_uniform(vec![d], cfg.hidden, &mut rng), trainable),
        router: store.add("router", init_uniform(vec![n, d], d, &mut rng), true),
    };
    let mut feat_opt = Adam::new(&store, AdamConfig::default());
    let mut router_opt = Adam::new(&store, AdamConfig::default());
    let mut series: Vec<SeriesRow> = Vec::new();
    let mut prev_features: Option<Tensor> = None;
    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(clusters.points.clone());
        let h = tape.matmul(x, b.var(net.w1))?;
        let h = tape.add_bias(h, b.var(net.b1))?;
        let h = tape.gelu(h)?;
        let f = tape.matmul(h, b.var(net.w2))?;
        let f = tape.add_bias(f, b.var(net.b2))?;
        let logits = tape.matmul_nt(f, b.var(net.router))?;
        if step % cfg.every == 0 || step == cfg.steps {
            let feats = tape.value(f);
            let mut row = score(step, feats, tape.value(logits), clusters)?;
            if let Some(prev) = &prev_features {
                let moved: f64 = feats.data().iter().zip(prev.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                let size: f64 = feats.data().iter().map(|a| a * a).sum();
                row.feature_drift = if moved == 0.0 { 0.0 } else { (moved / size).sqrt() };
            }
            prev_features = Some(feats.clone());
            series.push(row);
        }
        if step == cfg.steps {
            break;
        }
        let loss = tape.cross_entropy_with_logits(logits, &clusters.labels)?;
        let mut grads = tape.backward(loss)?;
        let g = b.collect(&mut grads);
        let split = |keep_router: bool| -> Vec<Option<Vec<f64>>> {
            g.iter()
                .enumerate()
                .map(|(i, s)| if (i == net.router.index()) == keep_router { s.clone() } else { None })
                .collect()
        };
        router_opt.step(&mut store, &split(true), cfg.lr);
        feat_opt.step(&mut store, &split(false), cfg.lr * cfg.feature_lr_ratio);
    }
    Ok(series)
}

fn score(step: usize, features: &Tensor, logits: &Tensor, clusters: &Clusters) -> Result<SeriesRow> {
    let (n, d) = (clusters.n_clusters(), features.last_dim());
    let mut sums = vec![0.0; n * d];
    let mut counts = vec![0usize; n];
    for (p, &c) in clusters.labels.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(features.row(p)) {
            *s += v;
        }
    }
    for (c, &k) in counts.iter().enumerate() {
        sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s /= k as f64);
    }
    let centroids = Tensor::new(vec![n, d], sums)?;
    let decision = |experts: Vec<usize>| RoutingDecision {
        k: 1,
        gate_weights: vec![1.0; experts.len()],
        expert_indices: experts,
        code_indices: None,
        gc_gd: None,
        margin: f64::INFINITY,
    };
    let argmax: Vec<usize> = (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    let nearest = nearest_center_labels(features, &centroids)?;
    let mode = ConsistencyMode::Definitional { metric: Metric::Euclidean };
    Ok(SeriesRow {
        step,
        router_consistency: consistency_score(features, &decision(argmax), &centroids, mode, step)?.score,
        vq_consistency: consistency_score(features, &decision(nearest), &centroids, mode, step)?.score,
        feature_drift: 0.0,
    })
}

/// First checkpoint after the initial one where the router is inconsistent
/// while the features are still moving.
pub fn first_dip(series: &[SeriesRow]) -> Option<&SeriesRow> {
    series.iter().skip(1).find(|r| r.router_consistency < 1.0 && r.feature_drift > 0.0)
}

/// `thm1_series.csv`: `step,router_consistency,vq_consistency`.
pub fn write_thm1_csv(path: &Path, rows: &[SeriesRow]) -> Result<()> {
    let mut s = String::from("step,router_consistency,vq_consistency\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.step, r.router_consistency, r.vq_consistency));
    }
    crate::fsutil::write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests;

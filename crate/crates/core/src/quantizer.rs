//! Vector quantization: nearest-code assignment, the straight-through
//! estimator, the codebook/commitment loss and the code-to-expert map.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance used for code assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// Squared L2 distance.
    Euclidean,
    /// `1 - cos(z, v)`.
    #[default]
    Cosine,
}

impl Metric {
    /// Byte tag used in checkpoints.
    pub fn tag(self) -> u8 {
        match self {
            Metric::Euclidean => 0,
            Metric::Cosine => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Metric::Euclidean),
            1 => Ok(Metric::Cosine),
            t => Err(Error::Checkpoint(format!("unknown metric tag {t}"))),
        }
    }

    /// Distance between two vectors under this metric. A zero-norm code is
    /// treated as orthogonal to everything under cosine.
    pub fn distance(self, z: &[f64], v: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => z.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum(),
            Metric::Cosine => {
                let dot: f64 = z.iter().zip(v).map(|(a, b)| a * b).sum();
                let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if nv == 0.0 || nz == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (nz * nv)
                }
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (expected euclidean or cosine)"
            ))),
        }
    }
}

/// A `K x d` table of code vectors together with its assignment metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vectors: Tensor,
    pub metric: Metric,
}

impl Codebook {
    pub fn new(vectors: Tensor, metric: Metric) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::invalid(
                "codebook",
                format!("expected a K x d matrix, got shape {:?}", vectors.shape()),
            ));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("codebook vectors".into()));
        }
        Ok(Self { vectors, metric })
    }

    pub fn k(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Draws `k` rows of `x` uniformly: without replacement when `x` has
    /// enough rows, with replacement otherwise.
    pub fn sample_rows<R: Rng>(x: &Tensor, k: usize, rng: &mut R) -> Result<Tensor> {
        let (n, d) = (x.rows(), x.last_dim());
        let picks: Vec<usize> = if n >= k {
            rand::seq::index::sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        };
        let mut data = Vec::with_capacity(k * d);
        for r in picks {
            data.extend_from_slice(x.row(r));
        }
        Tensor::new(vec![k, d], data)
    }

    /// Forward value of the quantized rows: the selected code vectors.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.d();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.vectors.row(i));
        }
        Tensor::new(vec![indices.len(), d], data)
    }
}

/// Outcome of [`assign_codes`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    /// Selected code per row.
    pub indices: Vec<usize>,
    /// `n x K` distances under the codebook metric.
    pub distances: Tensor,
}

impl QuantizationResult {
    /// Smallest gap between the best and second-best distance over all rows;
    /// infinite when `K = 1`.
    pub fn min_margin(&self) -> f64 {
        let k = self.distances.last_dim();
        let mut margin = f64::INFINITY;
        for (r, &best) in self.indices.iter().enumerate() {
            let row = self.distances.row(r);
            let b = row[best];
            for (j, &v) in row.iter().enumerate().take(k) {
                if j != best {
                    margin = margin.min(v - b);
                }
            }
        }
        margin
    }
}

/// Nearest code per row of `z` (ties go to the lowest index).
pub fn assign_codes(z: &Tensor, cb: &Codebook) -> Result<QuantizationResult> {
    if z.rank() != 2 || z.last_dim() != cb.d() {
        return Err(Error::Shape {
            op: "assign_codes",
            left: z.shape().to_vec(),
            right: cb.vectors.shape().to_vec(),
        });
    }
    let (n, k) = (z.rows(), cb.k());
    let mut distances = Vec::with_capacity(n * k);
    let mut indices = Vec::with_capacity(n);
    for r in 0..n {
        let zr = z.row(r);
        if cb.metric == Metric::Cosine && zr.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNormQuery(r));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let dist = cb.metric.distance(zr, cb.vectors.row(j));
            if dist < best_d {
                best_d = dist;
                best = j;
            }
            distances.push(dist);
        }
        indices.push(best);
    }
    Ok(QuantizationResult {
        indices,
        distances: Tensor::new(vec![n, k], distances)?,
    })
}

/// `z + sg(q - z)` where `q` holds the selected codes: forward value is the
/// codes exactly, the gradient passes to `z` unchanged and nothing reaches
/// the codebook along this path.
pub fn straight_through(
    tape: &mut Tape,
    z: Var,
    cb: &Codebook,
    result: &QuantizationResult,
) -> Result<Var> {
    let q = cb.gather(&result.indices)?;
    tape.straight_through(z, q)
}

/// `mean_i ||sg(z_i) - q_i||^2 + beta * ||z_i - sg(q_i)||^2` where
/// `q_i = codebook[indices[i]]` is gathered from the `codebook` variable.
pub fn vq_loss(
    tape: &mut Tape,
    z: Var,
    codebook: Var,
    result: &QuantizationResult,
    beta: f64,
) -> Result<Var> {
    if beta < 0.0 {
        return Err(Error::invalid("vq_loss", format!("beta must be >= 0, got {beta}")));
    }
    let n = result.indices.len();
    let q = tape.gather_rows(codebook, &result.indices)?;
    let zs = tape.stop_gradient(z)?;
    let diff = tape.sub(zs, q)?;
    let codebook_term = tape.squared_l2(diff)?;
    let qs = tape.stop_gradient(q)?;
    let diff = tape.sub(z, qs)?;
    let commit = tape.squared_l2(diff)?;
    let commit = tape.scale(commit, beta)?;
    let total = tape.add(codebook_term, commit)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Expert that serves a code: `code mod n_experts`.
pub fn code_to_expert(code: usize, n_experts: usize) -> usize {
    code % n_experts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn exact_match_and_single_code() {
        let cb = Codebook::new(t(&[3, 2], &[0.0, 0.0, 1.0, 1.0, -2.0, 3.0]), Metric::Euclidean).unwrap();
        let r = assign_codes(&t(&[1, 2], &[-2.0, 3.0]), &cb).unwrap();
        assert_eq!(r.indices, vec![2]);
        assert_eq!(r.distances.row(0)[2], 0.0);

        let one = Codebook::new(t(&[1, 2], &[0.3, 0.1]), Metric::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::uniform([9, 2], 1.0, &mut rng);
        assert!(assign_codes(&z, &one).unwrap().indices.iter().all(|&i| i == 0));
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let cb = Codebook::new(t(&[3, 1], &[2.0, 0.0, 2.0]), Metric::Euclidean).unwrap();
        let r = assign_codes(&t(&[2, 1], &[1.0, 2.0]), &cb).unwrap();
        assert_eq!(r.indices, vec![0, 0]);
    }

    #[test]
    fn zero_query_under_cosine_names_the_row() {
        let cb = Codebook::new(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), Metric::Cosine).unwrap();
        let err = assign_codes(&t(&[3, 2], &[1.0, 1.0, 0.5, 0.0, 0.0, 0.0]), &cb).unwrap_err();
        assert!(matches!(err, Error::ZeroNormQuery(2)));
        assert!(err.to_string().contains('2'));
    }

    #[test]
    fn vq_loss_hand_case() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1, 2], &[1.0, 0.0]), true);
        let cbv = t(&[1, 2], &[0.0, 0.0]);
        let cb = Codebook::new(cbv.clone(), Metric::Euclidean).unwrap();
        let c = tape.leaf(cbv, true);
        let r = assign_codes(tape.value(z), &cb).unwrap();
        let loss = vq_loss(&mut tape, z, c, &r, 0.25).unwrap();
        assert_eq!(tape.value(loss).data(), &[1.25]);
        let g = tape.backward(loss).unwrap();
        // codebook term pulls the code toward z; commitment pulls z toward the code
        assert_eq!(g.wrt(c), vec![-2.0, 0.0]);
        assert_eq!(g.wrt(z), vec![0.5, 0.0]);
    }

    #[test]
    fn coincident_queries_give_zero_loss_and_grads() {
        let cbv = t(&[2, 2], &[1.0, 2.0, -1.0, 0.5]);
        let cb = Codebook::new(cbv.clone(), Metric::Euclidean).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[2, 2], &[-1.0, 0.5, 1.0, 2.0]), true);
        let c = tape.leaf(cbv, true);
        let r = assign_codes(tape.value(z), &cb).unwrap();
        assert_eq!(r.indices, vec![1, 0]);
        let st = straight_through(&mut tape, z, &cb, &r).unwrap();
        assert_eq!(tape.value(st), tape.value(z));
        let loss = vq_loss(&mut tape, z, c, &r, 0.25).unwrap();
        assert_eq!(tape.value(loss).data(), &[0.0]);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(z).iter().chain(g.wrt(c).iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn straight_through_passes_gradient_and_skips_codebook() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cbv = Tensor::uniform([4, 3], 1.0, &mut rng);
        let cb = Codebook::new(cbv.clone(), Metric::Cosine).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::uniform([5, 3], 1.0, &mut rng), true);
        let c = tape.leaf(cbv, true);
        let r = assign_codes(tape.value(z), &cb).unwrap();
        let q = straight_through(&mut tape, z, &cb, &r).unwrap();
        assert_eq!(tape.value(q), &cb.gather(&r.indices).unwrap());
        let s = tape.sum(q).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(z).iter().all(|&v| v == 1.0));
        assert!(g.get(c).is_none());
    }

    #[test]
    fn unselected_codes_get_no_gradient() {
        let cbv = t(&[3, 1], &[0.0, 10.0, 1.0]);
        let cb = Codebook::new(cbv.clone(), Metric::Euclidean).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[2, 1], &[0.2, 1.3]), true);
        let c = tape.leaf(cbv, true);
        let r = assign_codes(tape.value(z), &cb).unwrap();
        let loss = vq_loss(&mut tape, z, c, &r, 0.25).unwrap();
        let g = tape.backward(loss).unwrap().wrt(c);
        assert_eq!(g[1], 0.0);
        assert!(g[0] != 0.0 && g[2] != 0.0);
    }

    #[test]
    fn code_to_expert_examples() {
        assert_eq!(code_to_expert(4, 4), 0);
        let mut counts = [0; 3];
        for c in 0..8 {
            counts[code_to_expert(c, 3)] += 1;
        }
        assert_eq!(counts, [3, 3, 2]);
    }

    #[test]
    fn metric_round_trips() {
        for m in [Metric::Euclidean, Metric::Cosine] {
            assert_eq!(Metric::from_tag(m.tag()).unwrap(), m);
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        assert!("manhattan".parse::<Metric>().is_err());
    }
}

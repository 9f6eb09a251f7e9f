//! The `pretrain`, `finetune`, `analyze` and `simulate` commands. Each
//! writes its artifacts into an output directory and reports progress on
//! stderr.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, checkpoint_name};
use crate::cluster_sim::{self, first_dip, generate_clusters, linear_targets, random_maps};
use crate::config::RunConfig;
use crate::data::{load_corpus, split, synthetic_corpus, Batch, Splits};
use crate::diagnostics::{
    code_centroids, consistency_score, drift_series, expert_representation_dump, flops_count,
    jacobian_residual_rank, measured_flops_per_token, write_consistency_csv, write_drift_csv, write_jacobian_csv,
    write_pca_csv, ConsistencyMode, FlopsMode, JacobianReport, RunningCentroids, Snapshot,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::lm::{evaluate_bpc, majority_task, FinetuneState, Model, MoePath, StepMetrics, TrainState};
use crate::moe::{ForwardOpts, VariantKind};

/// Version stamped into every `metrics.jsonl` record.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One `metrics.jsonl` line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub step: usize,
    pub task_loss: f64,
    pub vq_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl From<StepMetrics> for MetricsRecord {
    fn from(m: StepMetrics) -> Self {
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            step: m.step,
            task_loss: m.task_loss,
            vq_loss: m.vq_loss,
            total_loss: m.total_loss,
            lr: m.lr,
            grad_norm: m.grad_norm,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The configured corpus split into train, validation and test bytes.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let bytes = match (&cfg.data.path, cfg.data.synthetic_bytes) {
        (Some(p), _) => load_corpus(p)?,
        (None, Some(n)) => synthetic_corpus(n, cfg.data.synthetic_seed),
        (None, None) => {
            return Err(Error::Config(
                "[data] needs a corpus `path` or `synthetic_bytes`".into(),
            ))
        }
    };
    split(&bytes, cfg.data.split_ratios)
}

/// What a finished pre-training run measured.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub valid_bpc: f64,
    pub test_bpc: f64,
    pub steps: usize,
    pub seconds: f64,
}

/// Trains from scratch, or from `resume` after checking its config digest.
/// Writes `metrics.jsonl`, `ckpt_<step>.vqmo` every `ckpt_every` steps and
/// at the end, and `bpc.txt`.
pub fn pretrain(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<PretrainSummary> {
    let splits = load_splits(cfg)?;
    ensure_dir(out)?;
    let mut state = match resume {
        Some(p) => checkpoint::load_for_resume(p, cfg)?,
        None => TrainState::new(Model::new(cfg.model.clone())?, cfg.train.clone()),
    };
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = String::new();
    if resume.is_some() {
        if let Ok(old) = read_metrics(&metrics_path) {
            for r in old.into_iter().filter(|r| r.step < state.step) {
                metrics.push_str(&serde_json::to_string(&r).expect("plain record"));
                metrics.push('\n');
            }
        }
    }
    let t = &cfg.train;
    let started = Instant::now();
    while state.step < t.steps {
        let batch = state.sample_batch(&splits.train)?;
        let m = match state.train_step(&batch) {
            Ok(m) => m,
            Err(e) => {
                write_atomic(&metrics_path, metrics.as_bytes())?;
                return Err(e);
            }
        };
        if m.step % t.log_every == 0 || state.step == t.steps {
            metrics.push_str(&serde_json::to_string(&MetricsRecord::from(m)).expect("plain record"));
            metrics.push('\n');
            write_atomic(&metrics_path, metrics.as_bytes())?;
            eprintln!(
                "step {:>6}  task {:.4}  vq {:.4}  lr {:.2e}  {:.0}s",
                m.step,
                m.task_loss,
                m.vq_loss,
                m.lr,
                started.elapsed().as_secs_f64()
            );
        }
        if state.step % t.ckpt_every == 0 || state.step == t.steps {
            checkpoint::save(&out.join(checkpoint_name(state.step)), cfg, &state)?;
        }
    }
    let valid_bpc = evaluate_bpc(&state.model, &splits.valid)?;
    let test_bpc = evaluate_bpc(&state.model, &splits.test)?;
    write_atomic(
        &out.join("bpc.txt"),
        format!("valid_bpc = {valid_bpc}\ntest_bpc = {test_bpc}\n").as_bytes(),
    )?;
    eprintln!("valid bpc {valid_bpc:.4}  test bpc {test_bpc:.4}");
    Ok(PretrainSummary {
        valid_bpc,
        test_bpc,
        steps: state.step,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// SHA-256 over every codebook tensor of `model`, in layer order.
pub fn codebook_digest(model: &Model) -> String {
    let mut h = Sha256::new();
    for blk in &model.blocks {
        if let Some(id) = blk.moe.router.codebook {
            for v in model.store.get(id).data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSummary {
    pub accuracy: f64,
    pub steps: usize,
    pub codebook_digest_before: String,
    pub codebook_digest_after: String,
    /// Tape-counted discrete-path FLOPs over pre-training FLOPs.
    pub measured_flops_ratio: f64,
    pub analytic_flops_ratio: f64,
}

/// Discrete-path fine-tuning of a vqmoe checkpoint on the majority task.
/// Writes `finetune.txt`.
pub fn finetune(cfg: &RunConfig, from: &Path, out: &Path) -> Result<FinetuneSummary> {
    let ck = checkpoint::load(from)?;
    if ck.config.model.kind != VariantKind::Vqmoe {
        return Err(Error::Config(format!(
            "{} holds a {} model; discrete fine-tuning needs a vqmoe checkpoint, \
             since only vqmoe layers have a codebook path to keep",
            from.display(),
            ck.config.model.kind
        )));
    }
    ensure_dir(out)?;
    let model = ck.state.model;
    let mcfg = model.cfg.clone();
    let f = &cfg.finetune;
    if f.seq_len > mcfg.context_length {
        return Err(Error::Config(format!(
            "finetune seq_len {} exceeds the checkpoint's context_length {}",
            f.seq_len, mcfg.context_length
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(f.cfg.seed);
    let probe_tokens: Vec<usize> = (0..mcfg.context_length).map(|i| (i * 7 + 3) % mcfg.vocab_size).collect();
    let probe = Batch {
        tokens: probe_tokens.iter().copied().chain([0]).collect(),
        batch: 1,
        seq: mcfg.context_length,
    };
    let pre = measured_flops_per_token(&model, &probe, MoePath::Pretrain)?;
    let disc = measured_flops_per_token(&model, &probe, MoePath::Discrete)?;
    let analytic = flops_count(&mcfg, FlopsMode::FinetuneDiscrete).total() as f64
        / flops_count(&mcfg, FlopsMode::Pretrain).total() as f64;

    let before = codebook_digest(&model);
    let eval = majority_task(f.eval_size, f.seq_len, &mut rng);
    let mut state = FinetuneState::new(model, f.cfg.clone())?;
    let mut accuracy = state.accuracy(&eval)?;
    while state.step < f.cfg.steps {
        let batch = majority_task(f.cfg.batch_size, f.seq_len, &mut rng);
        let (loss, _) = state.train_step(&batch)?;
        if state.step % f.eval_every == 0 || state.step == f.cfg.steps {
            accuracy = state.accuracy(&eval)?;
            eprintln!("finetune step {:>5}  loss {loss:.4}  accuracy {accuracy:.4}", state.step);
            if accuracy > f.target_accuracy {
                break;
            }
        }
    }
    let after = codebook_digest(&state.model);
    let s = FinetuneSummary {
        accuracy,
        steps: state.step,
        codebook_digest_before: before,
        codebook_digest_after: after,
        measured_flops_ratio: disc / pre,
        analytic_flops_ratio: analytic,
    };
    let text = format!(
        "accuracy = {}\nsteps = {}\ncodebook_digest_before = {}\ncodebook_digest_after = {}\n\
         measured_flops_ratio = {}\nanalytic_flops_ratio = {}\n",
        s.accuracy,
        s.steps,
        s.codebook_digest_before,
        s.codebook_digest_after,
        s.measured_flops_ratio,
        s.analytic_flops_ratio
    );
    write_atomic(&out.join("finetune.txt"), text.as_bytes())?;
    eprintln!(
        "accuracy {:.4}; FLOPs ratio measured {:.4}, analytic {:.4}",
        s.accuracy, s.measured_flops_ratio, s.analytic_flops_ratio
    );
    Ok(s)
}

/// Diagnostics selectable with `analyze --report`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Report {
    Consistency,
    Jacobian,
    Pca,
    Drift,
    Flops,
}

impl Report {
    pub const ALL: [Report; 5] = [Report::Consistency, Report::Jacobian, Report::Pca, Report::Drift, Report::Flops];

    pub fn as_str(self) -> &'static str {
        match self {
            Report::Consistency => "consistency",
            Report::Jacobian => "jacobian",
            Report::Pca => "pca",
            Report::Drift => "drift",
            Report::Flops => "flops",
        }
    }
}

impl FromStr for Report {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Report::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Report::ALL.iter().map(|r| r.as_str()).collect();
            Error::Config(format!("unknown report `{s}` (valid: {})", names.join(", ")))
        })
    }
}

/// Inputs to [`analyze`].
#[derive(Debug, Clone, Default)]
pub struct AnalyzeArgs {
    /// Checkpoints in training order.
    pub checkpoints: Vec<PathBuf>,
    /// Byte file whose leading windows form the probe batch.
    pub probe: Option<PathBuf>,
    /// MoE layer to inspect; the last one by default.
    pub layer: Option<usize>,
    /// Upper limit on the Jacobian probes kept.
    pub max_probes: usize,
}

/// Probe windows of `context_length + 1` bytes from the start of `path`.
fn probe_batch(path: &Path, context: usize, windows: usize) -> Result<Batch> {
    let bytes = load_corpus(path)?;
    let need = context + 1;
    if bytes.len() < need {
        return Err(Error::Data(format!(
            "probe {} has {} bytes, fewer than one window of {need}",
            path.display(),
            bytes.len()
        )));
    }
    let chunks: Vec<&[u8]> = bytes.chunks_exact(need).take(windows).collect();
    Batch::from_windows(&chunks)
}

/// Writes the requested report into `out` and returns the file written.
pub fn analyze(cfg: &RunConfig, report: Report, args: &AnalyzeArgs, out: &Path) -> Result<PathBuf> {
    ensure_dir(out)?;
    if report == Report::Flops {
        let mcfg = match args.checkpoints.last() {
            Some(p) => checkpoint::load(p)?.config.model,
            None => cfg.model.clone(),
        };
        let path = out.join("flops.txt");
        write_atomic(&path, flops_text(&mcfg).as_bytes())?;
        return Ok(path);
    }
    if args.checkpoints.is_empty() {
        return Err(Error::Config(format!("the {} report needs --checkpoint", report.as_str())));
    }
    let probe_path = args
        .probe
        .as_ref()
        .ok_or_else(|| Error::Config(format!("the {} report needs --probe", report.as_str())))?;
    let cks = args
        .checkpoints
        .iter()
        .map(|p| checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let model = &cks.last().expect("non-empty").state.model;
    let n_layers = model.blocks.len();
    let layer = args.layer.unwrap_or(n_layers.saturating_sub(1));
    if layer >= n_layers {
        return Err(Error::Config(format!("layer {layer} out of range 0..{n_layers}")));
    }
    let probe = probe_batch(probe_path, model.cfg.context_length, 4)?;
    match report {
        Report::Consistency => {
            let mut reports = Vec::new();
            let mut running: Option<RunningCentroids> = None;
            let mut previous: Option<Vec<usize>> = None;
            for ck in &cks {
                let m = &ck.state.model;
                let snap = Snapshot::capture(m, &probe, layer, ck.state.step)?;
                let moe = &m.blocks[layer].moe;
                let mut tape = crate::autodiff::Tape::new();
                let b = m.store.bind(&mut tape);
                let xv = tape.constant(snap.tokens.clone());
                let dec = moe.forward(&mut tape, &b, xv, ForwardOpts::default())?.decision;
                let n = moe.cfg.n_experts;
                let centroids = match moe.codebook(&m.store) {
                    Some(cb) => code_centroids(&cb, n),
                    None => {
                        let r = running.get_or_insert_with(|| RunningCentroids::new(n, moe.cfg.d_model));
                        r.update(&snap.tokens, &dec)?;
                        r.centroids()
                    }
                };
                let mode = ConsistencyMode::Definitional { metric: moe.cfg.metric };
                reports.push(consistency_score(&snap.tokens, &dec, &centroids, mode, ck.state.step)?);
                let selected: Vec<usize> = (0..dec.tokens()).map(|t| dec.primary_expert(t, n)).collect();
                if let Some(prev) = &previous {
                    let mode = ConsistencyMode::Temporal { previous: prev };
                    reports.push(consistency_score(&snap.tokens, &dec, &centroids, mode, ck.state.step)?);
                }
                previous = Some(selected);
            }
            let path = out.join("consistency.csv");
            write_consistency_csv(&path, &reports)?;
            Ok(path)
        }
        Report::Jacobian => {
            let snap = Snapshot::capture(model, &probe, layer, 0)?;
            let moe = &model.blocks[layer].moe;
            let mut rows: Vec<JacobianReport> = Vec::new();
            for t in 0..snap.tokens.rows() {
                if rows.len() >= args.max_probes.max(1) {
                    break;
                }
                match jacobian_residual_rank(&model.store, moe, snap.tokens.row(t)) {
                    Ok(r) => rows.push(r),
                    Err(Error::Margin { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            let path = out.join("jacobian.csv");
            write_jacobian_csv(&path, &rows)?;
            Ok(path)
        }
        Report::Pca => {
            let snap = Snapshot::capture(model, &probe, layer, 0)?;
            let dump = expert_representation_dump(&model.store, &model.blocks[layer].moe, &snap.tokens)?;
            let path = out.join("pca.csv");
            write_pca_csv(&path, &dump.rows)?;
            Ok(path)
        }
        Report::Drift => {
            let snaps = cks
                .iter()
                .map(|ck| Snapshot::capture(&ck.state.model, &probe, layer, ck.state.step))
                .collect::<Result<Vec<_>>>()?;
            let rows = drift_series(&snaps)?;
            let path = out.join("drift.csv");
            write_drift_csv(&path, &rows)?;
            Ok(path)
        }
        Report::Flops => unreachable!("handled above"),
    }
}

/// `flops.txt`: per-token FLOPs of the configured variant in both modes,
/// the smoe baseline on the same backbone, and their ratios.
pub fn flops_text(cfg: &crate::lm::ModelConfig) -> String {
    let pre = flops_count(cfg, FlopsMode::Pretrain);
    let fin = flops_count(cfg, FlopsMode::FinetuneDiscrete);
    let smoe_cfg = crate::lm::ModelConfig {
        kind: VariantKind::Smoe,
        ..cfg.clone()
    };
    let smoe = flops_count(&smoe_cfg, FlopsMode::Pretrain);
    let mut s = String::new();
    let _ = writeln!(s, "variant = {}", cfg.kind);
    let _ = writeln!(s, "pretrain_flops = {}", pre.total());
    let _ = writeln!(s, "pretrain_attention = {}", pre.attention);
    let _ = writeln!(s, "pretrain_moe = {}", pre.moe);
    let _ = writeln!(s, "head = {}", pre.head);
    let _ = writeln!(s, "finetune_discrete_flops = {}", fin.total());
    let _ = writeln!(s, "smoe_pretrain_flops = {}", smoe.total());
    let _ = writeln!(s, "finetune_over_pretrain = {}", fin.total() as f64 / pre.total() as f64);
    let _ = writeln!(s, "finetune_over_smoe_pretrain = {}", fin.total() as f64 / smoe.total() as f64);
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub oracle: cluster_sim::OracleReport,
    pub series: Vec<cluster_sim::SeriesRow>,
}

/// Runs the permutation oracle and the router-consistency run; writes
/// `prop1_report.csv` and `thm1_series.csv`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateSummary> {
    let sim = &cfg.simulate;
    if sim.spec.n_clusters > cluster_sim::MAX_ORACLE_EXPERTS {
        return Err(Error::Config(format!(
            "the permutation oracle enumerates N! assignments and allows n_clusters <= {}, got {}",
            cluster_sim::MAX_ORACLE_EXPERTS,
            sim.spec.n_clusters
        )));
    }
    ensure_dir(out)?;
    let clusters = generate_clusters(&sim.spec)?;
    let maps = random_maps(sim.spec.n_clusters, sim.spec.d, sim.targets_seed);
    let targets = linear_targets(&clusters, &maps)?;
    let oracle = cluster_sim::oracle_assignment_check(&clusters, &targets, &sim.oracle)?;
    cluster_sim::write_prop1_csv(&out.join("prop1_report.csv"), &oracle)?;
    eprintln!(
        "identity loss {:.6}, best other {:.6}, margin {:.6}",
        oracle.identity_loss(),
        oracle.best_other().unwrap_or(f64::NAN),
        oracle.margin()
    );
    let rc = generate_clusters(&sim.router_spec)?;
    let series = cluster_sim::router_inconsistency_run(&rc, &sim.router)?;
    cluster_sim::write_thm1_csv(&out.join("thm1_series.csv"), &series)?;
    match first_dip(&series) {
        Some(r) => eprintln!(
            "router inconsistent at step {} (consistency {:.4}, feature drift {:.4})",
            r.step, r.router_consistency, r.feature_drift
        ),
        None => eprintln!("router stayed consistent after the first checkpoint"),
    }
    let _ = std::io::stderr().flush();
    Ok(SimulateSummary { oracle, series })
}

#[cfg(test)]
mod tests;

//! Run configuration: a line-based `key = value` format with `[section]`
//! headers and `#` comments.
//!
//! ```text
//! [data]
//! path = corpus.txt
//! split_ratios = 0.9, 0.05, 0.05
//!
//! [moe]
//! variant = vqmoe
//! n_experts = 4
//! ```
//!
//! Every key is optional and falls back to the desk defaults; unknown
//! sections or keys, duplicates and unparsable values are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cluster_sim::{ClusterSpec, InconsistencyConfig, OracleConfig};
use crate::error::{Error, Result};
use crate::lm::{FinetuneConfig, ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Byte corpus on disk.
    pub path: Option<PathBuf>,
    /// Train/validation/test fractions.
    pub split_ratios: [f64; 3],
    /// Generate a synthetic corpus of this many bytes when no path is given.
    pub synthetic_bytes: Option<usize>,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            split_ratios: [0.9, 0.05, 0.05],
            synthetic_bytes: None,
            synthetic_seed: 0,
        }
    }
}

/// The labeled task used by `finetune`.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSection {
    pub cfg: FinetuneConfig,
    /// Tokens per labeled sequence.
    pub seq_len: usize,
    /// Held-out sequences for the reported accuracy.
    pub eval_size: usize,
    /// Accuracy is checked every this many steps; training stops early once
    /// it exceeds `target_accuracy`.
    pub eval_every: usize,
    pub target_accuracy: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            cfg: FinetuneConfig::default(),
            seq_len: 33,
            eval_size: 512,
            eval_every: 100,
            target_accuracy: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSection {
    /// Clusters for the permutation oracle.
    pub spec: ClusterSpec,
    pub oracle: OracleConfig,
    /// Seed of the cluster-specific target maps.
    pub targets_seed: u64,
    /// Clusters for the router-consistency run.
    pub router_spec: ClusterSpec,
    pub router: InconsistencyConfig,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let spec = ClusterSpec {
            n_clusters: 3,
            d: 8,
            points_per_cluster: 100,
            center_separation: 4.0,
            noise_sigma: 0.4,
            seed: 0,
        };
        Self {
            router_spec: ClusterSpec {
                center_separation: 2.0,
                ..spec.clone()
            },
            spec,
            oracle: OracleConfig::default(),
            targets_seed: 1,
            router: InconsistencyConfig {
                every: 10,
                ..InconsistencyConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub finetune: FinetuneSection,
    pub simulate: SimulateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            out: PathBuf::from("out"),
            finetune: FinetuneSection::default(),
            simulate: SimulateSection::default(),
        }
    }
}

/// Values of one section, consumed key by key.
struct Section {
    name: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl Section {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((raw, line)) = self.entries.remove(key) {
            *slot = raw.parse().map_err(|e| {
                Error::Config(format!("line {line}: [{}] {key} = {raw}: {e}", self.name))
            })?;
        }
        Ok(())
    }

    fn take_raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::Config(format!(
                "line {line}: unknown key `{key}` in [{}]",
                self.name
            ))),
        }
    }
}

fn parse_sections(text: &str) -> Result<BTreeMap<String, Section>> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {line_no}: unterminated section header")))?
                .trim()
                .to_string();
            if sections.contains_key(&name) {
                return Err(Error::Config(format!("line {line_no}: section [{name}] repeated")));
            }
            sections.insert(
                name.clone(),
                Section {
                    name: name.clone(),
                    entries: BTreeMap::new(),
                },
            );
            current = Some(name);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, got `{line}`")))?;
        let name = current
            .as_ref()
            .ok_or_else(|| Error::Config(format!("line {line_no}: key outside of any [section]")))?;
        let sec = sections.get_mut(name).expect("current section exists");
        let key = key.trim().to_string();
        if sec.entries.contains_key(&key) {
            return Err(Error::Config(format!("line {line_no}: `{key}` repeated in [{name}]")));
        }
        sec.entries.insert(key, (value.trim().to_string(), line_no));
    }
    Ok(sections)
}

fn parse_ratios(raw: &str, line: usize) -> Result<[f64; 3]> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("line {line}: split_ratios needs three numbers, got `{raw}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| bad())?;
    }
    Ok(out)
}

fn parse_clip(raw: &str, line: usize) -> Result<Option<f64>> {
    if raw == "none" {
        return Ok(None);
    }
    raw.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("line {line}: clip must be a number or `none`, got `{raw}`")))
}

fn take_cluster_spec(sec: &mut Section, prefix: &str, spec: &mut ClusterSpec) -> Result<()> {
    sec.take(&format!("{prefix}n_clusters"), &mut spec.n_clusters)?;
    sec.take(&format!("{prefix}d"), &mut spec.d)?;
    sec.take(&format!("{prefix}points_per_cluster"), &mut spec.points_per_cluster)?;
    sec.take(&format!("{prefix}center_separation"), &mut spec.center_separation)?;
    sec.take(&format!("{prefix}noise_sigma"), &mut spec.noise_sigma)?;
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut sections = parse_sections(text)?;
        let known = ["data", "model", "moe", "train", "out", "finetune", "simulate"];
        if let Some(name) = sections.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!(
                "unknown section [{name}] (expected one of {})",
                known.join(", ")
            )));
        }
        let mut section = |name: &str| {
            sections.remove(name).unwrap_or(Section {
                name: name.to_string(),
                entries: BTreeMap::new(),
            })
        };

        let mut s = section("data");
        if let Some((raw, _)) = s.take_raw("path") {
            cfg.data.path = Some(PathBuf::from(raw));
        }
        if let Some((raw, line)) = s.take_raw("split_ratios") {
            cfg.data.split_ratios = parse_ratios(&raw, line)?;
        }
        if let Some((raw, line)) = s.take_raw("synthetic_bytes") {
            cfg.data.synthetic_bytes = Some(
                raw.parse()
                    .map_err(|_| Error::Config(format!("line {line}: synthetic_bytes must be an integer")))?,
            );
        }
        s.take("synthetic_seed", &mut cfg.data.synthetic_seed)?;
        s.finish()?;

        let m = &mut cfg.model;
        let mut s = section("model");
        s.take("vocab_size", &mut m.vocab_size)?;
        s.take("d_model", &mut m.d_model)?;
        s.take("n_heads", &mut m.n_heads)?;
        s.take("n_layers", &mut m.n_layers)?;
        s.take("context_length", &mut m.context_length)?;
        s.take("h_ffn", &mut m.h_ffn)?;
        s.take("activation", &mut m.activation)?;
        s.take("expert_bias", &mut m.expert_bias)?;
        s.take("d_low", &mut m.d_low)?;
        s.finish()?;

        let mut s = section("moe");
        s.take("variant", &mut m.kind)?;
        s.take("n_experts", &mut m.n_experts)?;
        s.take("k_codes", &mut m.k_codes)?;
        s.take("top_k", &mut m.top_k)?;
        s.take("metric", &mut m.metric)?;
        s.finish()?;

        let t = &mut cfg.train;
        let mut s = section("train");
        s.take("steps", &mut t.steps)?;
        s.take("batch", &mut t.batch_size)?;
        s.take("lr_max", &mut t.lr_max)?;
        s.take("alpha", &mut m.alpha)?;
        s.take("beta", &mut m.beta)?;
        if let Some((raw, line)) = s.take_raw("clip") {
            t.clip = parse_clip(&raw, line)?;
        }
        s.take("log_every", &mut t.log_every)?;
        s.take("ckpt_every", &mut t.ckpt_every)?;
        s.take("stable_phase1_frac", &mut t.stable_phase1_frac)?;
        s.take("seed", &mut m.seed)?;
        s.finish()?;

        let mut s = section("out");
        if let Some((raw, _)) = s.take_raw("directory") {
            cfg.out = PathBuf::from(raw);
        }
        s.finish()?;

        let f = &mut cfg.finetune;
        let mut s = section("finetune");
        s.take("steps", &mut f.cfg.steps)?;
        s.take("batch", &mut f.cfg.batch_size)?;
        s.take("lr", &mut f.cfg.lr)?;
        s.take("n_classes", &mut f.cfg.n_classes)?;
        s.take("hidden", &mut f.cfg.hidden)?;
        s.take("seed", &mut f.cfg.seed)?;
        s.take("seq_len", &mut f.seq_len)?;
        s.take("eval_size", &mut f.eval_size)?;
        s.take("eval_every", &mut f.eval_every)?;
        s.take("target_accuracy", &mut f.target_accuracy)?;
        s.finish()?;

        let sim = &mut cfg.simulate;
        let mut s = section("simulate");
        take_cluster_spec(&mut s, "", &mut sim.spec)?;
        s.take("seed", &mut sim.spec.seed)?;
        s.take("targets_seed", &mut sim.targets_seed)?;
        s.take("oracle_hidden", &mut sim.oracle.hidden)?;
        s.take("oracle_activation", &mut sim.oracle.activation)?;
        s.take("oracle_warmup_steps", &mut sim.oracle.warmup_steps)?;
        s.take("oracle_steps", &mut sim.oracle.steps)?;
        s.take("oracle_lr", &mut sim.oracle.lr)?;
        take_cluster_spec(&mut s, "router_", &mut sim.router_spec)?;
        s.take("router_steps", &mut sim.router.steps)?;
        s.take("router_every", &mut sim.router.every)?;
        s.take("router_lr", &mut sim.router.lr)?;
        s.take("router_feature_lr_ratio", &mut sim.router.feature_lr_ratio)?;
        s.take("router_hidden", &mut sim.router.hidden)?;
        s.take("router_freeze_features", &mut sim.router.freeze_features)?;
        s.finish()?;
        sim.router_spec.seed = sim.spec.seed;
        sim.oracle.seed = sim.spec.seed;
        sim.router.seed = sim.spec.seed;

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.data.split_ratios;
        if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split_ratios must be non-negative and sum to 1, got {r:?}")));
        }
        self.model.validate()?;
        if self.model.vocab_size != 256 {
            return Err(Error::Config(format!(
                "corpora are raw bytes, so vocab_size must be 256, got {}",
                self.model.vocab_size
            )));
        }
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.log_every == 0 || t.ckpt_every == 0 {
            return Err(Error::Config("steps, batch, log_every and ckpt_every must be positive".into()));
        }
        if !(t.lr_max > 0.0) || !t.lr_max.is_finite() {
            return Err(Error::Config(format!("lr_max must be positive, got {}", t.lr_max)));
        }
        if let Some(c) = t.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip must be positive, got {c}")));
            }
        }
        if !(0.0..=1.0).contains(&t.stable_phase1_frac) {
            return Err(Error::Config(format!(
                "stable_phase1_frac must lie in [0, 1], got {}",
                t.stable_phase1_frac
            )));
        }
        let f = &self.finetune;
        if f.cfg.steps == 0 || f.cfg.batch_size == 0 || f.seq_len == 0 || f.eval_size == 0 || f.eval_every == 0 {
            return Err(Error::Config("finetune steps, batch, seq_len, eval_size and eval_every must be positive".into()));
        }
        if f.cfg.n_classes < 2 {
            return Err(Error::Config(format!("finetune needs at least 2 classes, got {}", f.cfg.n_classes)));
        }
        self.simulate.spec.validate()?;
        self.simulate.router_spec.validate()
    }

    /// The sections that fix a training trajectory, in canonical form.
    pub fn training_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "vocab_size = {}", m.vocab_size);
        let _ = writeln!(s, "d_model = {}", m.d_model);
        let _ = writeln!(s, "n_heads = {}", m.n_heads);
        let _ = writeln!(s, "n_layers = {}", m.n_layers);
        let _ = writeln!(s, "context_length = {}", m.context_length);
        let _ = writeln!(s, "h_ffn = {}", m.h_ffn);
        let _ = writeln!(s, "activation = {}", m.activation);
        let _ = writeln!(s, "expert_bias = {}", m.expert_bias);
        let _ = writeln!(s, "d_low = {}", m.d_low);
        let _ = writeln!(s, "[moe]");
        let _ = writeln!(s, "variant = {}", m.kind);
        let _ = writeln!(s, "n_experts = {}", m.n_experts);
        let _ = writeln!(s, "k_codes = {}", m.k_codes);
        let _ = writeln!(s, "top_k = {}", m.top_k);
        let _ = writeln!(s, "metric = {}", m.metric);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "batch = {}", t.batch_size);
        let _ = writeln!(s, "lr_max = {}", t.lr_max);
        let _ = writeln!(s, "alpha = {}", m.alpha);
        let _ = writeln!(s, "beta = {}", m.beta);
        match t.clip {
            Some(c) => writeln!(s, "clip = {c}"),
            None => writeln!(s, "clip = none"),
        }
        .expect("writing to a String");
        let _ = writeln!(s, "log_every = {}", t.log_every);
        let _ = writeln!(s, "ckpt_every = {}", t.ckpt_every);
        let _ = writeln!(s, "stable_phase1_frac = {}", t.stable_phase1_frac);
        let _ = writeln!(s, "seed = {}", m.seed);
        s
    }

    /// SHA-256 of [`RunConfig::training_text`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.training_text().as_bytes()).into()
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.finetune.cfg.seed = seed;
        self.simulate.spec.seed = seed;
        self.simulate.router_spec.seed = seed;
        self.simulate.oracle.seed = seed;
        self.simulate.router.seed = seed;
    }
}

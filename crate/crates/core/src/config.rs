//! Run configuration: hyperparameters, the three-phase schedule, domain
//! specs, and the flat `key = value` config file format.
//!
//! Any key absent from a config file takes the published default, so an
//! empty file is a complete configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::DomainSpec;

/// Scalar hyperparameters of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Contrastive temperature.
    pub tau: f64,
    /// Neighborhood size for mutual-kNN graphs.
    pub k: usize,
    /// Weight of the in-domain loss inside the first alignment stage.
    pub beta: f64,
    /// Weight of the cross-domain loss inside the second alignment stage.
    pub lambda: f64,
    /// Division guard added to positive-pair counts.
    pub eps_div: f64,
    /// EMA coefficient of the momentum encoder.
    pub momentum_m: f64,
    /// Capacity of each per-domain feature bank.
    pub bank_capacity: usize,
    /// Number of forward-diffusion timesteps.
    pub diffusion_steps: usize,
    pub learning_rate: f64,
    /// Per-domain batch size.
    pub batch_size: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tau: 0.2,
            k: 50,
            beta: 0.5,
            lambda: 1.0,
            eps_div: 1e-8,
            momentum_m: 0.999,
            bank_capacity: 4096,
            diffusion_steps: 1000,
            learning_rate: 2.5e-4,
            batch_size: 64,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::validation("tau must be > 0"));
        }
        if self.k < 1 {
            return Err(Error::validation("k must be ≥ 1"));
        }
        if self.beta < 0.0 {
            return Err(Error::validation("beta must be ≥ 0"));
        }
        if self.lambda < 0.0 {
            return Err(Error::validation("lambda must be ≥ 0"));
        }
        if self.eps_div <= 0.0 {
            return Err(Error::validation("eps_div must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum_m) {
            return Err(Error::validation("momentum_m must be in [0,1)"));
        }
        if self.bank_capacity < 1 {
            return Err(Error::validation("bank_capacity must be ≥ 1"));
        }
        if self.diffusion_steps < 1 {
            return Err(Error::validation("diffusion_steps must be ≥ 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::validation("learning_rate must be > 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("batch_size must be ≥ 1"));
        }
        Ok(())
    }
}

/// The three-stage training plan: disentanglement warmup, in-domain
/// alignment, cross-domain alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub od_epochs: usize,
    pub pa1_epochs: usize,
    pub pa2_epochs: usize,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        PhaseSchedule { od_epochs: 50, pa1_epochs: 30, pa2_epochs: 20 }
    }
}

impl PhaseSchedule {
    pub fn new(od_epochs: usize, pa1_epochs: usize, pa2_epochs: usize) -> Self {
        PhaseSchedule { od_epochs, pa1_epochs, pa2_epochs }
    }

    pub fn total(&self) -> usize {
        self.od_epochs + self.pa1_epochs + self.pa2_epochs
    }
}

/// Training phase tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Od,
    Pa1,
    Pa2,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Od => write!(f, "OD"),
            Phase::Pa1 => write!(f, "PA1"),
            Phase::Pa2 => write!(f, "PA2"),
        }
    }
}

impl Phase {
    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "OD" => Ok(Phase::Od),
            "PA1" => Ok(Phase::Pa1),
            "PA2" => Ok(Phase::Pa2),
            other => Err(Error::validation(format!("unknown phase tag {other:?}"))),
        }
    }
}

/// Map an epoch index onto its training phase.
pub fn select_phase(epoch: usize, schedule: &PhaseSchedule) -> Result<Phase> {
    if epoch >= schedule.total() {
        return Err(Error::range(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total()
        )));
    }
    if epoch < schedule.od_epochs {
        Ok(Phase::Od)
    } else if epoch < schedule.od_epochs + schedule.pa1_epochs {
        Ok(Phase::Pa1)
    } else {
        Ok(Phase::Pa2)
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    /// The built-in synthetic two-domain world.
    Toy,
    /// Folder-per-domain, folder-per-class image trees.
    Folders,
}

impl DataSource {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(DataSource::Toy),
            "folders" => Ok(DataSource::Folders),
            other => Err(Error::validation(format!(
                "data_source must be `toy` or `folders`, got {other:?}"
            ))),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            DataSource::Toy => "toy",
            DataSource::Folders => "folders",
        }
    }
}

/// Shape of the synthetic world when `data_source = toy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub object_dim: usize,
    pub style_dim: usize,
    pub latent_len: usize,
    /// World seed; defaults to the run seed when unset.
    pub seed: Option<u64>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_classes: 4,
            samples_per_class: 8,
            object_dim: 16,
            style_dim: 4,
            latent_len: 32,
            seed: None,
        }
    }
}

/// A domain entry from the config file: its spec plus an optional
/// dataset path (required for folder data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub spec: DomainSpec,
    pub path: Option<PathBuf>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub hyper: HyperParams,
    pub schedule: PhaseSchedule,
    pub seed: u64,
    /// Skip a query's own index when building in-domain graphs.
    pub exclude_self: bool,
    pub use_od: bool,
    pub use_pa1: bool,
    pub use_pa2: bool,
    pub data_source: DataSource,
    /// Retrieval cutoffs reported by evaluation.
    pub eval_ks: Vec<usize>,
    /// Square input resolution images are resized to.
    pub image_size: usize,
    pub domains: Vec<DomainEntry>,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hyper: HyperParams::default(),
            schedule: PhaseSchedule::default(),
            seed: 0,
            exclude_self: true,
            use_od: true,
            use_pa1: true,
            use_pa2: true,
            data_source: DataSource::Toy,
            eval_ks: vec![1, 5, 15],
            image_size: 8,
            domains: Vec::new(),
            toy: ToyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let mut names = std::collections::HashSet::new();
        for entry in &self.domains {
            entry.spec.validate()?;
            if !names.insert(entry.spec.name.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate domain name {:?}",
                    entry.spec.name
                )));
            }
        }
        if self.eval_ks.is_empty() || self.eval_ks.iter().any(|&k| k < 1) {
            return Err(Error::validation("eval_ks must be a non-empty list of integers ≥ 1"));
        }
        if self.image_size < 1 {
            return Err(Error::validation("image_size must be ≥ 1"));
        }
        Ok(())
    }

    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        self.domains.iter().map(|d| d.spec.clone()).collect()
    }

    pub fn dataset_paths(&self) -> Vec<Option<PathBuf>> {
        self.domains.iter().map(|d| d.path.clone()).collect()
    }

    /// Toy world seed, falling back to the run seed.
    pub fn toy_seed(&self) -> u64 {
        self.toy.seed.unwrap_or(self.seed)
    }

    /// Canonical `key = value` rendering; `parse_config` of the output
    /// reproduces the config exactly.
    pub fn to_key_value_string(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("tau", format!("{}", self.hyper.tau));
        push("k", format!("{}", self.hyper.k));
        push("beta", format!("{}", self.hyper.beta));
        push("lambda", format!("{}", self.hyper.lambda));
        push("eps_div", format!("{}", self.hyper.eps_div));
        push("momentum_m", format!("{}", self.hyper.momentum_m));
        push("bank_capacity", format!("{}", self.hyper.bank_capacity));
        push("diffusion_steps", format!("{}", self.hyper.diffusion_steps));
        push("learning_rate", format!("{}", self.hyper.learning_rate));
        push("batch_size", format!("{}", self.hyper.batch_size));
        push("od_epochs", format!("{}", self.schedule.od_epochs));
        push("pa1_epochs", format!("{}", self.schedule.pa1_epochs));
        push("pa2_epochs", format!("{}", self.schedule.pa2_epochs));
        push("seed", format!("{}", self.seed));
        push("exclude_self", format!("{}", self.exclude_self));
        push("use_od", format!("{}", self.use_od));
        push("use_pa1", format!("{}", self.use_pa1));
        push("use_pa2", format!("{}", self.use_pa2));
        push("data_source", self.data_source.as_str().to_string());
        push(
            "eval_ks",
            self.eval_ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        );
        push("image_size", format!("{}", self.image_size));
        push("toy.n_classes", format!("{}", self.toy.n_classes));
        push("toy.samples_per_class", format!("{}", self.toy.samples_per_class));
        push("toy.object_dim", format!("{}", self.toy.object_dim));
        push("toy.style_dim", format!("{}", self.toy.style_dim));
        push("toy.latent_len", format!("{}", self.toy.latent_len));
        if let Some(seed) = self.toy.seed {
            push("toy.seed", format!("{seed}"));
        }
        for (i, entry) in self.domains.iter().enumerate() {
            push(&format!("domain.{i}.name"), entry.spec.name.clone());
            push(&format!("domain.{i}.prompt"), entry.spec.prompt_template.clone());
            if let Some(path) = &entry.path {
                push(&format!("domain.{i}.path"), path.display().to_string());
            }
        }
        out
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::validation(format!("{key} must be `true` or `false`, got {v:?}"))),
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::validation(format!("{key} must be a number, got {v:?}")))
}

fn parse_i64(key: &str, v: &str) -> Result<i64> {
    v.parse::<i64>()
        .map_err(|_| Error::validation(format!("{key} must be an integer, got {v:?}")))
}

fn parse_count(key: &str, v: &str, min: i64) -> Result<usize> {
    let n = parse_i64(key, v)?;
    if n < min {
        return Err(Error::validation(format!("{key} must be ≥ {min}")));
    }
    Ok(n as usize)
}

/// Parse the flat `key = value` config text. `#` starts a comment; blank
/// lines are ignored; unknown keys are rejected by name.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    // domain index -> (name, prompt, path)
    let mut domains: BTreeMap<usize, (Option<String>, Option<String>, Option<PathBuf>)> =
        BTreeMap::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::validation(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();

        if let Some(rest) = key.strip_prefix("domain.") {
            let (idx, field) = rest.split_once('.').ok_or_else(|| {
                Error::validation(format!("unknown config key `{key}`"))
            })?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::validation(format!("unknown config key `{key}`")))?;
            let slot = domains.entry(idx).or_default();
            match field {
                "name" => slot.0 = Some(value.to_string()),
                "prompt" => slot.1 = Some(value.to_string()),
                "path" => slot.2 = Some(PathBuf::from(value)),
                _ => return Err(Error::validation(format!("unknown config key `{key}`"))),
            }
            continue;
        }

        match key {
            "tau" => cfg.hyper.tau = parse_f64(key, value)?,
            "k" => {
                let n = parse_i64(key, value)?;
                if n < 1 {
                    return Err(Error::validation("k must be ≥ 1"));
                }
                cfg.hyper.k = n as usize;
            }
            "beta" => cfg.hyper.beta = parse_f64(key, value)?,
            "lambda" => cfg.hyper.lambda = parse_f64(key, value)?,
            "eps_div" => cfg.hyper.eps_div = parse_f64(key, value)?,
            "momentum_m" => cfg.hyper.momentum_m = parse_f64(key, value)?,
            "bank_capacity" => cfg.hyper.bank_capacity = parse_count(key, value, 1)?,
            "diffusion_steps" => cfg.hyper.diffusion_steps = parse_count(key, value, 1)?,
            "learning_rate" => cfg.hyper.learning_rate = parse_f64(key, value)?,
            "batch_size" => cfg.hyper.batch_size = parse_count(key, value, 1)?,
            "od_epochs" => cfg.schedule.od_epochs = parse_count(key, value, 0)?,
            "pa1_epochs" => cfg.schedule.pa1_epochs = parse_count(key, value, 0)?,
            "pa2_epochs" => cfg.schedule.pa2_epochs = parse_count(key, value, 0)?,
            "seed" => {
                cfg.seed = value
                    .parse::<u64>()
                    .map_err(|_| Error::validation(format!("seed must be a non-negative integer, got {value:?}")))?
            }
            "exclude_self" => cfg.exclude_self = parse_bool(key, value)?,
            "use_od" => cfg.use_od = parse_bool(key, value)?,
            "use_pa1" => cfg.use_pa1 = parse_bool(key, value)?,
            "use_pa2" => cfg.use_pa2 = parse_bool(key, value)?,
            "data_source" => cfg.data_source = DataSource::parse(value)?,
            "eval_ks" => {
                let ks: Result<Vec<usize>> = value
                    .split(',')
                    .map(|s| parse_count("eval_ks", s.trim(), 1))
                    .collect();
                cfg.eval_ks = ks?;
            }
            "image_size" => cfg.image_size = parse_count(key, value, 1)?,
            "toy.n_classes" => cfg.toy.n_classes = parse_count(key, value, 1)?,
            "toy.samples_per_class" => cfg.toy.samples_per_class = parse_count(key, value, 1)?,
            "toy.object_dim" => cfg.toy.object_dim = parse_count(key, value, 1)?,
            "toy.style_dim" => cfg.toy.style_dim = parse_count(key, value, 1)?,
            "toy.latent_len" => cfg.toy.latent_len = parse_count(key, value, 1)?,
            "toy.seed" => {
                cfg.toy.seed = Some(value.parse::<u64>().map_err(|_| {
                    Error::validation(format!("toy.seed must be a non-negative integer, got {value:?}"))
                })?)
            }
            _ => return Err(Error::validation(format!("unknown config key `{key}`"))),
        }
    }

    for (pos, (idx, (name, prompt, path))) in domains.into_iter().enumerate() {
        if idx != pos {
            return Err(Error::validation(format!(
                "domain indices must be dense starting at 0, missing domain.{pos}"
            )));
        }
        let name = name.ok_or_else(|| {
            Error::validation(format!("domain.{idx} is missing `domain.{idx}.name`"))
        })?;
        let prompt = prompt.unwrap_or_else(|| format!("a {name} of a {{object}}"));
        let spec = DomainSpec::new(idx, name, prompt)?;
        cfg.domains.push(DomainEntry { spec, path });
    }

    cfg.validate()?;
    Ok(cfg)
}

/// Load and parse a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_paper_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.hyper.tau, 0.2);
        assert_eq!(cfg.hyper.k, 50);
        assert_eq!(cfg.hyper.beta, 0.5);
        assert_eq!(cfg.hyper.lambda, 1.0);
        assert_eq!(cfg.hyper.learning_rate, 2.5e-4);
        assert_eq!(cfg.hyper.batch_size, 64);
        assert_eq!(cfg.schedule, PhaseSchedule::new(50, 30, 20));
    }

    #[test]
    fn single_override_keeps_other_defaults() {
        let cfg = parse_config("tau = 0.1\n").unwrap();
        assert_eq!(cfg.hyper.tau, 0.1);
        assert_eq!(cfg.hyper.k, 50);
        assert_eq!(cfg.hyper.lambda, 1.0);
    }

    #[test]
    fn negative_k_is_rejected_by_name() {
        let err = parse_config("k = -3\n").unwrap_err();
        assert!(err.to_string().contains("k must be ≥ 1"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("tau = 0.2\nwat = 1\n").unwrap_err();
        assert!(err.to_string().contains("`wat`"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = parse_config("# a comment\n\ntau = 0.3 # trailing\n").unwrap();
        assert_eq!(cfg.hyper.tau, 0.3);
    }

    #[test]
    fn domains_parse_with_default_prompt() {
        let cfg = parse_config(
            "domain.0.name = sketch\ndomain.1.name = photo\ndomain.1.prompt = a photo of a {object}\n",
        )
        .unwrap();
        assert_eq!(cfg.domains.len(), 2);
        assert_eq!(cfg.domains[0].spec.prompt_template, "a sketch of a {object}");
        assert_eq!(cfg.domains[1].spec.prompt_template, "a photo of a {object}");
    }

    #[test]
    fn duplicate_domain_names_rejected() {
        let err = parse_config("domain.0.name = a\ndomain.1.name = a\n").unwrap_err();
        assert!(err.to_string().contains("duplicate domain name"), "{err}");
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = parse_config("tau = 0.35\nk = 7\ndomain.0.name = sketch\n").unwrap();
        cfg.toy.seed = Some(11);
        let text = cfg.to_key_value_string();
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn phase_selection_covers_boundaries() {
        let s = PhaseSchedule::new(50, 30, 20);
        assert_eq!(select_phase(0, &s).unwrap(), Phase::Od);
        assert_eq!(select_phase(49, &s).unwrap(), Phase::Od);
        assert_eq!(select_phase(50, &s).unwrap(), Phase::Pa1);
        assert_eq!(select_phase(79, &s).unwrap(), Phase::Pa1);
        assert_eq!(select_phase(80, &s).unwrap(), Phase::Pa2);
        assert_eq!(select_phase(99, &s).unwrap(), Phase::Pa2);
        assert!(select_phase(100, &s).is_err());
    }

    #[test]
    fn phase_is_monotone_and_covering() {
        let s = PhaseSchedule::new(2, 3, 1);
        let mut seen = Vec::new();
        let mut last = Phase::Od;
        for e in 0..s.total() {
            let p = select_phase(e, &s).unwrap();
            let rank = |p: Phase| match p {
                Phase::Od => 0,
                Phase::Pa1 => 1,
                Phase::Pa2 => 2,
            };
            assert!(rank(p) >= rank(last));
            last = p;
            if !seen.contains(&p) {
                seen.push(p);
            }
        }
        assert_eq!(seen, vec![Phase::Od, Phase::Pa1, Phase::Pa2]);
    }
}

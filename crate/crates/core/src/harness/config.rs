//! Flat-key experiment configuration: `key = value` lines with dotted keys,
//! `#` comments, a per-kind schema with explicit defaults, and a canonical
//! hash that is stable under key reordering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The seven experiment families the CLI exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Plan,
    GenModel,
    Online,
    Offline,
    Robust,
    PolicyOpt,
    Rlhf,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Plan => "plan",
            ExperimentKind::GenModel => "gen-model",
            ExperimentKind::Online => "online",
            ExperimentKind::Offline => "offline",
            ExperimentKind::Robust => "robust",
            ExperimentKind::PolicyOpt => "policy-opt",
            ExperimentKind::Rlhf => "rlhf",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "plan" => Ok(ExperimentKind::Plan),
            "gen-model" => Ok(ExperimentKind::GenModel),
            "online" => Ok(ExperimentKind::Online),
            "offline" => Ok(ExperimentKind::Offline),
            "robust" => Ok(ExperimentKind::Robust),
            "policy-opt" => Ok(ExperimentKind::PolicyOpt),
            "rlhf" => Ok(ExperimentKind::Rlhf),
            other => Err(Error::Config(format!("unknown experiment kind `{other}`"))),
        }
    }

    /// Known keys and their defaults, beyond the common
    /// `kind`/`seeds`/`sweep.*` keys.
    fn schema(self) -> &'static [(&'static str, &'static str)] {
        match self {
            ExperimentKind::Plan => &[
                ("instance.s", "8"),
                ("instance.a", "3"),
                ("instance.gamma", "0.9"),
                ("instance.sparsity", "0.5"),
                ("instance.file", ""),
            ],
            ExperimentKind::GenModel => &[
                ("instance.s", "6"),
                ("instance.a", "3"),
                ("instance.gamma", "0.9"),
                ("instance.sparsity", "0.7"),
                ("instance.file", ""),
                ("algo.method", "model-based"),
                ("algo.n_per_pair", "1000"),
                ("algo.xi", "0"),
                ("algo.perturb_seed", "0"),
                ("algo.t", "10000"),
                ("algo.c", "1"),
                ("algo.schedule", "rescaled-linear"),
                ("trace.every", "0"),
            ],
            ExperimentKind::Online => &[
                ("instance.s", "4"),
                ("instance.a", "2"),
                ("instance.h", "5"),
                ("instance.file", ""),
                ("algo.episodes", "2000"),
                ("algo.bonus", "hoeffding"),
                ("algo.refresh", "every-episode"),
                ("algo.delta", "0.1"),
                ("algo.c_b", "1"),
                ("trace.enabled", "true"),
            ],
            ExperimentKind::Offline => &[
                ("instance.s", "6"),
                ("instance.a", "3"),
                ("instance.gamma", "0.9"),
                ("instance.sparsity", "0.7"),
                ("instance.file", ""),
                ("algo.n", "10000"),
                ("algo.c_b", "1"),
                ("algo.delta", "0.1"),
                ("algo.tau_max", "0"),
                ("algo.expert_mix", "0.8"),
            ],
            ExperimentKind::Robust => &[
                ("instance.s", "5"),
                ("instance.a", "2"),
                ("instance.gamma", "0.9"),
                ("instance.sparsity", "0.7"),
                ("instance.file", ""),
                ("algo.sigma", "0.3"),
                ("algo.n", "1000"),
                ("algo.iters", "0"),
            ],
            ExperimentKind::PolicyOpt => &[
                ("instance.s", "5"),
                ("instance.a", "3"),
                ("instance.gamma", "0.9"),
                ("instance.sparsity", "0.8"),
                ("instance.file", ""),
                ("algo.method", "npg"),
                ("algo.eta", "0"),
                ("algo.tau", "0.1"),
                ("algo.steps", "300"),
                ("trace.every", "0"),
            ],
            ExperimentKind::Rlhf => &[
                ("instance.prompts", "4"),
                ("instance.answers", "5"),
                ("algo.beta", "0.5"),
                ("algo.alpha", "0.05"),
                ("algo.rounds", "8"),
                ("algo.batch", "200"),
                ("algo.steps", "150"),
                ("algo.lr", "0.05"),
                ("trace.enabled", "true"),
            ],
        }
    }
}

const COMMON_DEFAULTS: &[(&str, &str)] =
    &[("seeds", "1"), ("sweep.param", ""), ("sweep.values", "")];

/// A fully resolved experiment configuration: every key the run consults is
/// present, defaults included.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    entries: BTreeMap<String, String>,
}

impl ExperimentConfig {
    /// Parses the flat `key = value` format and resolves defaults. Unknown
    /// keys are an error naming the key.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if raw.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        let kind_name = raw
            .remove("kind")
            .ok_or_else(|| Error::Config("missing required key `kind`".into()))?;
        let kind = ExperimentKind::parse(&kind_name)?;
        Self::resolve(kind, raw)
    }

    /// Builds a config for `kind` from explicit overrides only.
    pub fn for_kind(kind: ExperimentKind, overrides: &[(&str, &str)]) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for (k, v) in overrides {
            raw.insert(k.to_string(), v.to_string());
        }
        Self::resolve(kind, raw)
    }

    fn resolve(kind: ExperimentKind, mut raw: BTreeMap<String, String>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        entries.insert("kind".to_string(), kind.name().to_string());
        for (key, default) in COMMON_DEFAULTS.iter().chain(kind.schema()) {
            let value = raw.remove(*key).unwrap_or_else(|| default.to_string());
            entries.insert(key.to_string(), value);
        }
        if let Some(unknown) = raw.keys().next() {
            return Err(Error::Config(format!(
                "unknown key `{unknown}` for kind `{}`",
                kind.name()
            )));
        }
        let cfg = ExperimentConfig { kind, entries };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.seeds()?;
        let sweep_param = self.get_str("sweep.param")?;
        let sweep_values = self.get_str("sweep.values")?;
        if sweep_param.is_empty() != sweep_values.is_empty() {
            return Err(Error::Config(
                "sweep.param and sweep.values must be set together".into(),
            ));
        }
        if !sweep_param.is_empty() && !self.entries.contains_key(&sweep_param) {
            return Err(Error::Config(format!(
                "sweep.param `{sweep_param}` is not a key of kind `{}`",
                self.kind.name()
            )));
        }
        if self.kind == ExperimentKind::PolicyOpt
            && self.get_str("algo.method")? == "entropy-npg"
            && self.get_f64("algo.tau")? == 0.0
        {
            return Err(Error::Config(
                "entropy-npg requires algo.tau > 0 (tau = 0 is unregularized NPG)".into(),
            ));
        }
        Ok(())
    }

    /// Applies CLI overrides for the seed list.
    pub fn override_seeds(&mut self, seeds: &str) {
        self.entries.insert("seeds".to_string(), seeds.to_string());
    }

    pub fn get_str(&self, key: &str) -> Result<String> {
        self.entries
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: `{raw}` is not an integer")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        Ok(self.get_u64(key)? as usize)
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: `{raw}` is not a number")))
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        let raw = self.get_str("seeds")?;
        let seeds: Vec<u64> = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad seed `{s}` in `{raw}`")))
            })
            .collect::<Result<_>>()?;
        if seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        Ok(seeds)
    }

    /// Sweep cells: `(key, value)` pairs, or a single `None` cell when no
    /// sweep is configured.
    pub fn sweep_cells(&self) -> Result<Vec<Option<(String, String)>>> {
        let param = self.get_str("sweep.param")?;
        if param.is_empty() {
            return Ok(vec![None]);
        }
        let values = self.get_str("sweep.values")?;
        let cells: Vec<Option<(String, String)>> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| Some((param.clone(), v.to_string())))
            .collect();
        if cells.is_empty() {
            return Err(Error::Config("sweep.values is empty".into()));
        }
        Ok(cells)
    }

    /// This config with one key overridden by a sweep cell.
    pub fn with_cell(&self, cell: &Option<(String, String)>) -> Self {
        let mut clone = self.clone();
        if let Some((key, value)) = cell {
            clone.entries.insert(key.clone(), value.clone());
        }
        clone
    }

    /// Canonical `key = value` listing of the resolved config, every
    /// default made explicit.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.entries {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Hex digest of the canonical listing; independent of the key order of
    /// the source file.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.manifest().as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}

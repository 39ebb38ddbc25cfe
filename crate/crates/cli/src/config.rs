//! Run configuration: one TOML file, overridden by `IVT_*` environment
//! variables, then `--set key.path=value`, then the dedicated flags.
//!
//! Every key has a dotted path (`train.epochs`, `attack.solver.norm`, ...).
//! In environment variables the path is upper-cased with `__` for `.`:
//! `IVT_TRAIN__EPOCHS=5` sets `train.epochs`.

use std::path::{Path, PathBuf};

use ivtrust::datasets::SyntheticConfig;
use ivtrust::explain::{Aggregation, ExplainConfig, Method};
use ivtrust::model::{ConvBlock, ModelConfig};
use ivtrust::robustness::AttackConfig;
use ivtrust::tensor::Norm;
use ivtrust::training::{AdversarialConfig, GroupSchedule, ScheduleKind, TrainConfig};
use ivtrust::triplet::{ComponentCounts, TripletTable};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "IVT_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Regenerated in memory from `data.synthetic` on every command.
    Synthetic,
    /// A frames directory (`VIDxx/frames`, `labels/VIDxx.csv`, `triplet_map.txt`).
    Frames,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    /// Scenes generated for a synthetic source.
    pub n_examples: usize,
    pub folds: usize,
    /// Validation videos taken from the training folds.
    pub val_videos: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            dir: None,
            n_examples: 600,
            folds: 3,
            val_videos: 1,
            synthetic: SyntheticConfig {
                height: 32,
                width: 56,
                counts: ComponentCounts::new(3, 3, 3),
                n_triplets: 6,
                glyph_size: 12,
                texture_size: 16,
                rho: 0.8,
                multi_label_rate: 0.0,
                n_videos: 6,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: Vec<ConvBlock>,
    pub branch_width: usize,
    /// Defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { backbone: vec![ConvBlock::strided(8), ConvBlock::strided(16)], branch_width: 8, checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialSection {
    pub enabled: bool,
    pub norm: Norm,
    pub radius: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for AdversarialSection {
    fn default() -> Self {
        let a = AdversarialConfig::default();
        AdversarialSection { enabled: false, norm: a.norm, radius: a.radius, steps: a.steps, step_size: a.step_size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub methods: Vec<Method>,
    /// Test examples rendered by `explain`.
    pub n_examples: usize,
    pub ig_steps: usize,
    pub aggregation: Aggregation,
    /// Heatmap opacity in overlays.
    pub alpha: f64,
    /// Top fraction used for the core/spurious mass table.
    pub mass_fraction: f64,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            methods: vec![Method::Grad, Method::Ig, Method::Cam],
            n_examples: 8,
            ig_steps: 32,
            aggregation: Aggregation::SumAbs,
            alpha: 0.5,
            mass_fraction: 0.15,
        }
    }
}

impl ExplainSection {
    pub fn explain_config(&self) -> ExplainConfig {
        ExplainConfig { ig_steps: self.ig_steps, aggregation: self.aggregation }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Correctly classified single-label test examples to attack.
    pub n_examples: usize,
    pub explainers: Vec<Method>,
    pub fraction: f64,
    /// Also attack with the unrestricted (full) mask.
    pub full: bool,
    pub solver: AttackConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            n_examples: 20,
            explainers: vec![Method::Grad, Method::Ig],
            fraction: 0.25,
            full: true,
            solver: AttackConfig { restarts: 1, steps: 10, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSection {
    pub fractions: Vec<f64>,
}

impl Default for CurveSection {
    fn default() -> Self {
        CurveSection { fractions: vec![0.05, 0.1, 0.15, 0.25, 0.5, 1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub top_k: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { top_k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required. Replaces the per-section seeds.
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Worker threads; 0 lets the pool decide, 1 runs sequentially.
    pub workers: usize,
    /// Test fold.
    pub fold: usize,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub adversarial: AdversarialSection,
    pub explain: ExplainSection,
    pub attack: AttackSection,
    pub curve: CurveSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = GroupSchedule::new(0.1, ScheduleKind::Constant);
        RunConfig {
            seed: None,
            out: PathBuf::from("ivtrust-out"),
            workers: 0,
            fold: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig { epochs: 20, batch_size: 8, backbone: s, encoder: s, decoder: s, ..Default::default() },
            adversarial: AdversarialSection::default(),
            explain: ExplainSection::default(),
            attack: AttackSection::default(),
            curve: CurveSection::default(),
            report: ReportSection::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the config untouched.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub fold: Option<usize>,
    pub sets: Vec<String>,
}

/// Parses an override value as a TOML value, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => match t.remove("v") {
            Some(toml::Value::Float(f)) if !f.is_finite() => toml::Value::String(raw.into()),
            Some(v) => v,
            None => toml::Value::String(raw.into()),
        },
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `path` (dotted) in `table`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad key path {path:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::config(format!("key {p:?} in {path:?} is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Maps `IVT_TRAIN__EPOCHS` to `train.epochs`.
pub fn env_key(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    (!rest.is_empty()).then(|| rest.to_ascii_lowercase().replace("__", "."))
}

impl RunConfig {
    /// Layers file, environment, `--set` and flags, then validates.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &FlagOverrides,
    ) -> Result<RunConfig, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        let mut env: Vec<(String, String)> = env.into_iter().filter_map(|(k, v)| env_key(&k).map(|k| (k, v))).collect();
        env.sort();
        for (k, v) in env {
            set_path(&mut table, &k, parse_value(&v))?;
        }
        for s in &flags.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| CliError::config(format!("--set expects key=value, got {s:?}")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        if let Some(seed) = flags.seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        if let Some(out) = &flags.out {
            table.insert("out".into(), toml::Value::String(out.to_string_lossy().into_owned()));
        }
        if let Some(w) = flags.workers {
            table.insert("workers".into(), toml::Value::Integer(w as i64));
        }
        if let Some(f) = flags.fold {
            table.insert("fold".into(), toml::Value::Integer(f as i64));
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Propagates the run seed and checks cross-field constraints.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        let seed = self.seed.ok_or_else(|| CliError::config("seed is required (config key `seed` or --seed)"))?;
        self.data.synthetic.seed = seed;
        self.train.seed = seed;
        self.attack.solver.seed = seed;
        self.data.synthetic.validate()?;
        self.train.validate()?;
        self.attack.solver.validate()?;
        self.adversarial_config().validate()?;
        if self.data.source == DataSource::Frames {
            match &self.data.dir {
                Some(d) if d.is_dir() => {}
                Some(d) => return Err(CliError::data(format!("data.dir {} does not exist", d.display()))),
                None => return Err(CliError::config("data.source = \"frames\" needs data.dir")),
            }
        }
        if self.data.folds < 2 {
            return Err(CliError::config("data.folds must be at least 2"));
        }
        if self.fold >= self.data.folds {
            return Err(CliError::config(format!("fold {} out of range for {} folds", self.fold, self.data.folds)));
        }
        if !(self.attack.fraction > 0.0 && self.attack.fraction <= 1.0) || !(self.explain.mass_fraction > 0.0 && self.explain.mass_fraction <= 1.0) {
            return Err(CliError::config("fractions must lie in (0, 1]"));
        }
        if self.attack.explainers.contains(&Method::Cam) {
            return Err(CliError::config("attack.explainers accepts grad and ig"));
        }
        if !(0.0..=1.0).contains(&self.explain.alpha) {
            return Err(CliError::config("explain.alpha must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.model.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn adversarial_config(&self) -> AdversarialConfig {
        let a = &self.adversarial;
        AdversarialConfig { train: self.train.clone(), norm: a.norm, radius: a.radius, steps: a.steps, step_size: a.step_size }
    }

    /// Model shape follows the data: image size from the first example,
    /// class counts from the triplet table.
    pub fn model_config(&self, height: usize, width: usize, table: &TripletTable) -> ModelConfig {
        ModelConfig {
            height,
            width,
            channels: 3,
            backbone: self.model.backbone.clone(),
            counts: table.counts(),
            n_triplets: table.n_triplets(),
            branch_width: self.model.branch_width,
            seed: self.seed(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(seed: Option<u64>) -> FlagOverrides {
        FlagOverrides { seed, ..Default::default() }
    }

    #[test]
    fn seed_is_mandatory() {
        let e = RunConfig::load(None, Vec::new(), &flags(None)).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(RunConfig::load(None, Vec::new(), &flags(Some(3))).is_ok());
    }

    #[test]
    fn layers_apply_in_order() {
        let env = vec![("IVT_TRAIN__EPOCHS".to_string(), "7".to_string()), ("HOME".to_string(), "/x".to_string())];
        let f = FlagOverrides { seed: Some(1), sets: vec!["attack.solver.norm=inf".into(), "train.epochs=9".into()], ..Default::default() };
        let cfg = RunConfig::load(None, env.clone(), &f).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.attack.solver.norm, Norm::Linf);
        let cfg = RunConfig::load(None, env, &flags(Some(1))).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.attack.solver.seed, 1);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let f = FlagOverrides { seed: Some(1), sets: vec!["train.epoch=3".into()], ..Default::default() };
        assert_eq!(RunConfig::load(None, Vec::new(), &f).unwrap_err().code, 2);
    }

    #[test]
    fn env_key_mapping() {
        assert_eq!(env_key("IVT_ATTACK__SOLVER__NORM").as_deref(), Some("attack.solver.norm"));
        assert_eq!(env_key("IVT_"), None);
        assert_eq!(env_key("PATH"), None);
    }
}

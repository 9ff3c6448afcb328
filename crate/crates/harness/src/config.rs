//! Experiment configuration: one JSON document per experiment.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::de::{self, DeserializeOwned};
use serde::{Deserialize, Deserializer, Serialize};
use udig_core::diffusion::{RangeMap, ScheduleSpec};
use udig_core::dip::InputMode;
use udig_core::nets::ArchSpec;
use udig_core::persistence::Task;

use crate::error::{HarnessError, Result};

/// Environment variable that, when set, replaces the directory relative
/// output paths are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "UDIG_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mri,
    Ct,
}

impl TaskKind {
    pub fn task(self) -> Task {
        match self {
            TaskKind::Mri => Task::Mri,
            TaskKind::Ct => Task::Ct,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            TaskKind::Mri => 2,
            TaskKind::Ct => 1,
        }
    }

    pub fn range_map(self) -> RangeMap {
        match self {
            TaskKind::Mri => RangeMap::MagnitudeMax,
            TaskKind::Ct => RangeMap::PeakScale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MriSetting {
    #[serde(default = "default_acceleration")]
    pub acceleration: usize,
    #[serde(default = "default_acs")]
    pub acs_fraction: f64,
    #[serde(default = "default_coils")]
    pub n_coils: usize,
    /// Standard deviation of complex Gaussian noise on sampled k-space entries.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Strength of the smooth random phase applied to each phantom.
    #[serde(default)]
    pub phase_strength: f64,
}

fn default_acceleration() -> usize {
    4
}
fn default_acs() -> f64 {
    0.08
}
fn default_coils() -> usize {
    4
}

impl Default for MriSetting {
    fn default() -> Self {
        Self {
            acceleration: default_acceleration(),
            acs_fraction: default_acs(),
            n_coils: default_coils(),
            noise_sigma: 0.0,
            phase_strength: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtSetting {
    #[serde(default = "default_views")]
    pub n_views: usize,
    #[serde(default = "default_full_views")]
    pub n_full_views: usize,
    /// Incident photons per ray; absent means noiseless post-log data.
    #[serde(default)]
    pub photons: Option<f64>,
    /// Standard deviation of Gaussian noise added to the post-log sinogram.
    #[serde(default)]
    pub noise_sigma: f64,
}

fn default_views() -> usize {
    18
}
fn default_full_views() -> usize {
    180
}

impl Default for CtSetting {
    fn default() -> Self {
        Self {
            n_views: default_views(),
            n_full_views: default_full_views(),
            photons: None,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomSetKind {
    RandomEllipses,
    SheppLogan,
    /// One stored array per scan, listed in `arrays`.
    Arrays,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSet {
    pub kind: PhantomSetKind,
    #[serde(default = "default_ellipses")]
    pub n_ellipses: usize,
    /// Scan `k` uses phantom seed `seed + k`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub arrays: Vec<PathBuf>,
}

fn default_ellipses() -> usize {
    6
}

impl Default for PhantomSet {
    fn default() -> Self {
        Self {
            kind: PhantomSetKind::RandomEllipses,
            n_ellipses: default_ellipses(),
            seed: 0,
            arrays: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub base_width: usize,
    pub depth: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            base_width: 32,
            depth: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipMethod {
    pub name: String,
    pub iters: usize,
    pub lr: f64,
    #[serde(default = "default_input")]
    pub input_mode: InputMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefgMethod {
    pub name: String,
    pub iters: usize,
    pub lr: f64,
    /// Reference for scan `k` is the phantom with seed
    /// `phantoms.seed + reference_offset + k`.
    #[serde(default = "default_reference_offset")]
    pub reference_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UdigMethod {
    pub name: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub lambda: f64,
    pub lr: f64,
}

/// A reconstruction method, selected by its `kind` key.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    Dip(DipMethod),
    RefgDip(RefgMethod),
    Udig(UdigMethod),
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        fn fields<T: DeserializeOwned, E: de::Error>(v: serde_json::Value) -> std::result::Result<T, E> {
            serde_path_to_error::deserialize(v).map_err(|e| E::custom(format!("{}: {}", e.path(), e.inner())))
        }
        let mut map = serde_json::Map::deserialize(d)?;
        let kind = map.remove("kind").ok_or_else(|| de::Error::missing_field("kind"))?;
        let kind = kind
            .as_str()
            .ok_or_else(|| de::Error::custom("`kind` must be a string"))?
            .to_string();
        let rest = serde_json::Value::Object(map);
        match kind.as_str() {
            "dip" => fields(rest).map(MethodSpec::Dip),
            "refg_dip" => fields(rest).map(MethodSpec::RefgDip),
            "udig" => fields(rest).map(MethodSpec::Udig),
            other => Err(de::Error::unknown_variant(other, &["dip", "refg_dip", "udig"])),
        }
    }
}

fn default_input() -> InputMode {
    InputMode::Random
}
fn default_reference_offset() -> u64 {
    1_000_000
}

impl MethodSpec {
    pub fn name(&self) -> &str {
        match self {
            MethodSpec::Dip(m) => &m.name,
            MethodSpec::RefgDip(m) => &m.name,
            MethodSpec::Udig(m) => &m.name,
        }
    }

    pub fn needs_score_model(&self) -> bool {
        matches!(self, MethodSpec::Udig(_))
    }

    pub fn total_iters(&self) -> usize {
        match self {
            MethodSpec::Dip(m) => m.iters,
            MethodSpec::RefgDip(m) => m.iters,
            MethodSpec::Udig(m) => m.k * m.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default = "default_train_images")]
    pub n_train: usize,
    /// Training phantom `k` uses seed `train_seed + k`.
    #[serde(default = "default_train_seed")]
    pub train_seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub lr: f64,
    #[serde(default = "default_final_lr")]
    pub final_lr_fraction: f64,
    #[serde(default)]
    pub max_train_timestep: Option<usize>,
    #[serde(default)]
    pub flip_augment: bool,
    /// Checkpoint directory, relative to the output root unless absolute.
    pub checkpoint: PathBuf,
}

fn default_train_images() -> usize {
    200
}
fn default_train_seed() -> u64 {
    500_000
}
fn default_batch() -> usize {
    16
}
fn default_final_lr() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySpec {
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    pub iters: usize,
    pub lr: f64,
}

fn default_sigmas() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.2, 0.4, 0.8]
}
fn default_seeds() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Wall-clock minutes per method.
    WallClock,
    /// Runtime column written as zero, so results are byte-reproducible.
    Omit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub image_size: usize,
    #[serde(default)]
    pub mri: MriSetting,
    #[serde(default)]
    pub ct: CtSetting,
    #[serde(default)]
    pub phantoms: PhantomSet,
    pub n_scans: usize,
    #[serde(default)]
    pub operator_seed: u64,
    #[serde(default)]
    pub seed: u64,
    /// Run directory, relative to the output root unless absolute.
    pub output_dir: PathBuf,
    /// Worker threads; defaults to the number of CPUs.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub diffusion: Option<DiffusionSpec>,
    #[serde(default)]
    pub sensitivity: Option<SensitivitySpec>,
    #[serde(default = "default_timing")]
    pub timing: Timing,
}

fn default_eval_every() -> usize {
    50
}
fn default_timing() -> Timing {
    Timing::WallClock
}

impl ExperimentConfig {
    /// Parses JSON text, reporting the offending key path and position.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                HarnessError::Config(inner.to_string())
            } else {
                HarnessError::Config(format!("at `{path}`: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n_scans < 1 {
            return bad("n_scans must be at least 1".into());
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.mri.noise_sigma >= 0.0) || !(self.ct.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        if let Some(p) = self.ct.photons {
            if !(p > 0.0 && p.is_finite()) {
                return bad("ct.photons must be positive and finite".into());
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if self.phantoms.kind == PhantomSetKind::Arrays && self.phantoms.arrays.len() != self.n_scans {
            return bad(format!(
                "phantoms.arrays lists {} files but n_scans is {}",
                self.phantoms.arrays.len(),
                self.n_scans
            ));
        }
        let mut seen = HashSet::new();
        for (i, m) in self.methods.iter().enumerate() {
            if !seen.insert(m.name()) {
                return bad(format!("methods[{i}]: duplicate method name {:?}", m.name()));
            }
            if m.total_iters() == 0 {
                return bad(format!("methods[{i}]: iteration budget must be positive"));
            }
        }
        if let Some(s) = &self.sensitivity {
            if s.sigmas.is_empty() || s.sigmas.iter().any(|v| !(*v >= 0.0)) {
                return bad("sensitivity.sigmas must be a non-empty list of non-negative values".into());
            }
            if s.n_seeds == 0 || s.iters == 0 {
                return bad("sensitivity.n_seeds and sensitivity.iters must be positive".into());
            }
        }
        self.unet_arch().validate().map_err(|e| HarnessError::Config(format!("network: {e}")))?;
        Ok(())
    }

    pub fn setting_label(&self) -> String {
        match self.task {
            TaskKind::Mri => format!("{}x", self.mri.acceleration),
            TaskKind::Ct => format!("{}views", self.ct.n_views),
        }
    }

    pub fn unet_arch(&self) -> ArchSpec {
        let c = self.task.channels();
        ArchSpec::unet(c, self.network.base_width, self.network.depth)
    }

    pub fn output_path(&self) -> PathBuf {
        resolve(&self.output_dir)
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.diffusion.as_ref().map(|d| resolve(&d.checkpoint))
    }
}

/// Resolves a relative path against `$UDIG_OUTPUT_ROOT` when it is set.
pub fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

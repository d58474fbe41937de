//! Run configuration: TOML with fixed sections; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentPolicy, PgdConfig, PgdSpace};
use crate::detector::{DetectorTrainConfig, MixConfig};
use crate::diffusion::DenoiserConfig;
use crate::eval::SweepGrid;
use crate::lora::DEFAULT_TARGETS;
use crate::probe::{StartMode, StepCount};
use crate::real::DType;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub image_size: usize,
    pub classes: usize,
    pub noise_std: f64,
    /// Real training images per class (the real half of D_pre).
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Fresh reals per class, paired with probe samples.
    pub fresh_per_class: usize,
    /// Generated fakes for detector pretraining.
    pub fake_train: usize,
    /// Generated fakes per generator for evaluation.
    pub fake_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            image_size: 16,
            classes: 4,
            noise_std: 0.02,
            train_per_class: 500,
            test_per_class: 250,
            fresh_per_class: 500,
            fake_train: 2000,
            fake_test: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    /// Sampling steps T.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
    pub guidance: f64,
    pub hidden: usize,
    pub time_freqs: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub cond_drop: f64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            steps: 35,
            beta_start: 1e-4,
            beta_end: 0.05,
            eta: 0.0,
            guidance: 2.0,
            hidden: 128,
            time_freqs: 32,
            train_steps: 3000,
            lr: 2e-3,
            batch: 64,
            cond_drop: 0.1,
        }
    }
}

impl GeneratorSection {
    /// The unseen-generator stand-in: wider, gentler schedule.
    pub fn variant_default() -> Self {
        Self {
            hidden: 160,
            beta_end: 0.04,
            ..Self::default()
        }
    }

    pub fn net_config(&self, data: &DataSection) -> DenoiserConfig {
        DenoiserConfig {
            image_size: data.image_size,
            classes: data.classes,
            hidden: self.hidden,
            time_freqs: self.time_freqs,
        }
    }
}

/// Keys given for `[generator_variant]` override the variant defaults
/// rather than the base-generator defaults.
fn variant_section<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<GeneratorSection, D::Error> {
    use serde::de::Error as _;
    let given = toml::Table::deserialize(d)?;
    let mut merged =
        toml::Table::try_from(GeneratorSection::variant_default()).map_err(D::Error::custom)?;
    merged.extend(given);
    GeneratorSection::deserialize(toml::Value::Table(merged)).map_err(D::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub val_frac: f64,
    /// Mixed-loss weight of the probe term during fine-tuning.
    pub w: f64,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_patience: usize,
    /// Independently pretrained detectors used as critics during probing.
    pub critics: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let p = DetectorTrainConfig::default();
        let m = MixConfig::default();
        Self {
            lr: p.lr,
            batch: p.batch,
            epochs: p.epochs,
            patience: p.patience,
            val_frac: p.val_frac,
            w: m.w,
            finetune_lr: m.lr,
            finetune_epochs: m.max_epochs,
            finetune_patience: m.patience,
            critics: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub n_prompts: usize,
    pub k: usize,
    pub t_s: usize,
    pub t_s_mode: StartMode,
    pub step_count: StepCount,
    pub rounds: usize,
    pub rank: usize,
    pub targets: Vec<String>,
    pub both_branches: bool,
    pub max_grad_norm: f64,
    /// Probe-sample archives from other runs to aggregate with this run's.
    pub extra_sources: Vec<PathBuf>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 1e-3,
            momentum: 0.9,
            batch: 8,
            n_prompts: 2000,
            k: 5,
            t_s: 5,
            t_s_mode: StartMode::Fixed,
            step_count: StepCount::Inclusive,
            rounds: 1,
            rank: 4,
            targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            both_branches: true,
            max_grad_norm: 0.0,
            extra_sources: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Residual-spectrum noise level.
    pub t_probe: usize,
    pub spectrum_images: usize,
    pub grid: SweepGrid,
    /// Also fine-tune on PGD pixel/latent samples for comparison.
    pub pgd_baselines: bool,
    pub pgd_eps: f64,
    pub pgd_alpha: f64,
    pub pgd_steps: usize,
    pub pgd_latent_step_t: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = PgdConfig::default();
        Self {
            t_probe: 1,
            spectrum_images: 256,
            grid: SweepGrid::default(),
            pgd_baselines: false,
            pgd_eps: p.eps,
            pgd_alpha: p.alpha,
            pgd_steps: p.steps,
            pgd_latent_step_t: None,
        }
    }
}

impl EvalSection {
    pub fn pgd(&self, space: PgdSpace) -> PgdConfig {
        PgdConfig {
            eps: self.pgd_eps,
            alpha: self.pgd_alpha,
            steps: self.pgd_steps,
            space,
            latent_step_t: self.pgd_latent_step_t,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
    pub precision: Precision,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            precision: Precision::F32,
        }
    }
}

/// Every knob of a run. The root `seed` drives all randomness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(
        default = "GeneratorSection::variant_default",
        deserialize_with = "variant_section"
    )]
    pub generator_variant: GeneratorSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            generator: GeneratorSection::default(),
            generator_variant: GeneratorSection::variant_default(),
            detector: DetectorSection::default(),
            probe: ProbeSection::default(),
            augment: AugmentPolicy::default(),
            eval: EvalSection::default(),
            io: IoSection::default(),
        }
    }
}

fn cfg_err(msg: String) -> Result<()> {
    Err(Error::Config(msg))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Range checks for every section, run before any stage.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.image_size < 8 || !(1..=4).contains(&d.classes) {
            return cfg_err(format!(
                "data: image_size {} must be >= 8, classes {} in [1, 4]",
                d.image_size, d.classes
            ));
        }
        if d.train_per_class == 0
            || d.test_per_class == 0
            || d.fresh_per_class == 0
            || d.fake_train == 0
            || d.fake_test == 0
        {
            return cfg_err("data: sample counts must be >= 1".into());
        }
        if !(d.noise_std >= 0.0) {
            return cfg_err(format!("data: noise_std {}", d.noise_std));
        }
        for (name, g) in [
            ("generator", &self.generator),
            ("generator_variant", &self.generator_variant),
        ] {
            crate::diffusion::make_schedule(g.steps, g.beta_start, g.beta_end, g.eta)
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
            if g.hidden == 0 || g.time_freqs == 0 || g.train_steps == 0 || g.batch == 0 {
                return cfg_err(format!(
                    "{name}: hidden, time_freqs, train_steps, batch must be >= 1"
                ));
            }
            if !(g.lr > 0.0) || !(0.0..=1.0).contains(&g.cond_drop) || !(g.guidance >= 0.0) {
                return cfg_err(format!(
                    "{name}: lr > 0, cond_drop in [0, 1], guidance >= 0 required"
                ));
            }
        }
        self.pretrain_config(0).validate()?;
        self.mix_config(0).validate()?;
        if self.detector.critics == 0 {
            return cfg_err("detector: critics must be >= 1".into());
        }
        let p = &self.probe;
        self.probe_config(0).validate()?;
        if p.k > self.generator.steps {
            return cfg_err(format!(
                "probe: K = {} exceeds T = {}",
                p.k, self.generator.steps
            ));
        }
        if p.t_s_mode == StartMode::Fixed {
            let hi = crate::probe::max_start(self.generator.steps, p.k);
            if p.t_s == 0 || p.t_s > hi {
                return cfg_err(format!(
                    "probe: t_s = {} outside [1, {hi}] for T = {}, K = {}",
                    p.t_s, self.generator.steps, p.k
                ));
            }
        }
        let fresh = d.fresh_per_class * d.classes;
        if fresh < p.n_prompts {
            return cfg_err(format!(
                "data: {fresh} fresh reals cannot pair {} probe samples",
                p.n_prompts
            ));
        }
        for t in &p.targets {
            if !crate::diffusion::LINEAR_LAYERS.contains(&t.as_str()) {
                return cfg_err(format!("probe: unknown LoRA target `{t}`"));
            }
        }
        self.augment.validate()?;
        let e = &self.eval;
        if e.t_probe == 0 || e.t_probe > self.generator.steps || e.spectrum_images == 0 {
            return cfg_err(format!(
                "eval: t_probe {} outside [1, T] or no spectrum images",
                e.t_probe
            ));
        }
        self.eval.pgd(PgdSpace::Pixel).validate()?;
        if let Some(t) = e.pgd_latent_step_t {
            if t == 0 || t > self.generator.steps {
                return cfg_err(format!("eval: pgd_latent_step_t {t} outside [1, T]"));
            }
        }
        for q in &e.grid.quality {
            if !(1..=100).contains(q) {
                return cfg_err(format!("eval: grid quality {q}"));
            }
        }
        if e.grid.blur.iter().any(|s| !(*s >= 0.0)) || e.grid.scale.iter().any(|s| !(*s > 0.0)) {
            return cfg_err("eval: grid blur must be >= 0 and scale > 0".into());
        }
        Ok(())
    }

    /// SHA-256 over every semantically meaningful key (all but `io.out_dir`).
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.io.out_dir = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self) -> String {
        format!("run-{}", &self.hash()[..12])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.io.out_dir.join(self.run_id())
    }

    pub fn pretrain_config(&self, seed: u64) -> DetectorTrainConfig {
        let d = &self.detector;
        DetectorTrainConfig {
            lr: d.lr,
            batch: d.batch,
            epochs: d.epochs,
            patience: d.patience,
            val_frac: d.val_frac,
            iters_per_epoch: None,
            seed,
            augment: self.augment.clone(),
        }
    }

    pub fn mix_config(&self, seed: u64) -> MixConfig {
        let d = &self.detector;
        MixConfig {
            w: d.w,
            lr: d.finetune_lr,
            batch: d.batch,
            max_epochs: d.finetune_epochs,
            patience: d.finetune_patience,
            val_frac: d.val_frac,
            iters_per_epoch: None,
            seed,
            augment: self.augment.clone(),
        }
    }

    pub fn probe_config(&self, seed: u64) -> crate::probe::ProbeConfig {
        let p = &self.probe;
        crate::probe::ProbeConfig {
            lambda: p.lambda,
            lr: p.lr,
            momentum: p.momentum,
            batch: p.batch,
            n_prompts: p.n_prompts,
            k: p.k,
            t_s: p.t_s,
            t_s_mode: p.t_s_mode,
            step_count: p.step_count,
            rounds: p.rounds,
            seed,
            guidance: self.generator.guidance,
            rank: p.rank,
            targets: p.targets.clone(),
            both_branches: p.both_branches,
            max_grad_norm: p.max_grad_norm,
        }
    }
}

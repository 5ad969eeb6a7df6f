//! Run configuration: one JSON document, overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use rdcm_core::contrastive::{ContrastiveHyper, ContrastiveMode};
use rdcm_core::data::FeatureLayout;
use rdcm_core::kernels::{KernelSpec, DEFAULT_SIGMAS};
use rdcm_core::layers::TextCnnConfig;
use rdcm_core::mmd::{MmdKernels, MmdVariant};
use rdcm_core::model::{HyperParams, Mode, ModelConfig, DEFAULT_LATENT_DIM};
use rdcm_core::optim::AdamConfig;
use rdcm_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};

/// Every key is optional in the file; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Manifest of the dataset to train on.
    pub data: Option<PathBuf>,
    /// Domain held out as the target.
    pub target: Option<String>,
    /// Manifest of a separate target dataset (overrides hold-out).
    pub target_data: Option<PathBuf>,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub mode: String,
    pub variant: String,
    pub contrastive: String,
    pub latent_dim: usize,
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    pub beta: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sigmas: Vec<f64>,
    pub textcnn: TextCnnSection,
    /// Also compute the proxy A-distance for every evaluated run.
    pub adist: bool,
    pub adist_folds: usize,
    /// Methods run by `loo`: any of vanilla, dg, da.
    pub methods: Vec<String>,
    /// Threshold values for `sweep-beta`.
    pub betas: Vec<f64>,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = HyperParams::default();
        Self {
            data: None,
            target: None,
            target_data: None,
            out: PathBuf::from("runs"),
            seeds: vec![0],
            mode: h.mode.as_str().into(),
            variant: h.mmd_variant.as_str().into(),
            contrastive: h.contrastive_mode.as_str().into(),
            latent_dim: DEFAULT_LATENT_DIM,
            lambda_inter: h.lambda_inter,
            lambda_intra: h.lambda_intra,
            beta: h.contrastive.beta,
            tau: h.contrastive.tau,
            lr: h.adam.lr,
            weight_decay: h.adam.weight_decay,
            batch_size: h.batch_size,
            epochs: h.epochs,
            sigmas: DEFAULT_SIGMAS.to_vec(),
            textcnn: TextCnnSection::default(),
            adist: false,
            adist_folds: 5,
            methods: vec!["vanilla".into(), "dg".into(), "da".into()],
            betas: vec![0.0, 0.3, 0.5, 0.7, 0.9],
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextCnnSection {
    pub kernel_widths: Vec<usize>,
    pub filters: usize,
}

impl Default for TextCnnSection {
    fn default() -> Self {
        let c = TextCnnConfig::with_emb_dim(1);
        Self {
            kernel_widths: c.kernel_widths,
            filters: c.filters,
        }
    }
}

/// Mirror of the generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub domains: usize,
    pub samples_per_domain: usize,
    pub latent_dim: usize,
    pub text_dim: usize,
    pub vis_dim: usize,
    pub inst_dim: usize,
    pub shift: f64,
    pub nuisance_rank: usize,
    pub decorrelate_fake: bool,
    pub class_separation: f64,
    pub noise: f64,
    pub fake_prior: f64,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self::from(&SynthConfig::default())
    }
}

impl From<&SynthConfig> for SynthSection {
    fn from(c: &SynthConfig) -> Self {
        Self {
            domains: c.domains,
            samples_per_domain: c.samples_per_domain,
            latent_dim: c.latent_dim,
            text_dim: c.text_dim,
            vis_dim: c.vis_dim,
            inst_dim: c.inst_dim,
            shift: c.shift,
            nuisance_rank: c.nuisance_rank,
            decorrelate_fake: c.decorrelate_fake,
            class_separation: c.class_separation,
            noise: c.noise,
            fake_prior: c.fake_prior,
            seed: c.seed,
        }
    }
}

impl From<&SynthSection> for SynthConfig {
    fn from(s: &SynthSection) -> Self {
        Self {
            domains: s.domains,
            samples_per_domain: s.samples_per_domain,
            latent_dim: s.latent_dim,
            text_dim: s.text_dim,
            vis_dim: s.vis_dim,
            inst_dim: s.inst_dim,
            shift: s.shift,
            nuisance_rank: s.nuisance_rank,
            decorrelate_fake: s.decorrelate_fake,
            class_separation: s.class_separation,
            noise: s.noise,
            fake_prior: s.fake_prior,
            seed: s.seed,
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub variant: Option<MmdVariant>,
    pub contrastive: Option<ContrastiveMode>,
    pub data: Option<PathBuf>,
    pub target: Option<String>,
    pub target_data: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let raw = fs::read_to_string(p).map_err(RunError::io(p))?;
                serde_json::from_str(&raw).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(m) = o.mode {
            self.mode = m.as_str().into();
        }
        if let Some(v) = o.variant {
            self.variant = v.as_str().into();
        }
        if let Some(c) = o.contrastive {
            self.contrastive = c.as_str().into();
        }
        if let Some(p) = &o.data {
            self.data = Some(p.clone());
        }
        if let Some(t) = &o.target {
            self.target = Some(t.clone());
        }
        if let Some(p) = &o.target_data {
            self.target_data = Some(p.clone());
        }
    }

    pub fn mode(&self) -> Result<Mode> {
        Ok(self.mode.parse()?)
    }

    /// Checks every field that has no cheaper check downstream.
    pub fn validate(&self) -> Result<()> {
        self.mode()?;
        self.variant.parse::<MmdVariant>()?;
        self.contrastive.parse::<ContrastiveMode>()?;
        if self.seeds.is_empty() {
            return Err(RunError::Config("seeds must list at least one seed".into()));
        }
        if self.latent_dim == 0 {
            return Err(RunError::Config("latent_dim must be at least 1".into()));
        }
        if self.adist_folds < 2 {
            return Err(RunError::Config("adist_folds must be at least 2".into()));
        }
        self.hyper(self.seeds[0])?.validate()?;
        for &b in &self.betas {
            if !(0.0..=1.0).contains(&b) {
                return Err(RunError::Config(format!("beta {b} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn hyper(&self, seed: u64) -> Result<HyperParams> {
        let sigmas = KernelSpec::new(self.sigmas.clone())?;
        Ok(HyperParams {
            lambda_inter: self.lambda_inter,
            lambda_intra: self.lambda_intra,
            contrastive: ContrastiveHyper {
                beta: self.beta,
                tau: self.tau,
            },
            adam: AdamConfig::with_lr(self.lr, self.weight_decay),
            batch_size: self.batch_size,
            epochs: self.epochs,
            mode: self.mode()?,
            mmd_variant: self.variant.parse()?,
            contrastive_mode: self.contrastive.parse()?,
            kernels: MmdKernels {
                text: sigmas.clone(),
                visual: sigmas,
            },
            seed,
        })
    }

    pub fn model_config(&self, layout: &FeatureLayout) -> ModelConfig {
        let mut mc = ModelConfig::new(layout.text, layout.vis_dim).with_latent_dim(self.latent_dim);
        if let Some(cnn) = mc.textcnn.as_mut() {
            cnn.kernel_widths = self.textcnn.kernel_widths.clone();
            cnn.filters = self.textcnn.filters;
        }
        mc
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig::from(&self.synth)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::dataset::write_json(path, self)
    }
}

//! Synthetic multi-modal domains with controllable shift.
//!
//! Every domain shares a class-conditional latent space. Real posts emit both
//! modalities from one latent draw; fake posts may draw an independent latent
//! per modality, which breaks cross-modal agreement. Each domain perturbs the
//! shared projections and adds its own offset, both scaled by `shift`.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{mix_seed, DatasetBundle, Domain, FeatureLayout, Sample, TextLayout};
use crate::error::{Error, Result};
use crate::layers::softmax_rows;
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub domains: usize,
    pub samples_per_domain: usize,
    pub latent_dim: usize,
    pub text_dim: usize,
    pub vis_dim: usize,
    pub inst_dim: usize,
    /// Scale of the per-domain perturbation of the projections and offsets.
    pub shift: f64,
    /// Rank of the nuisance subspace the perturbations live in.
    pub nuisance_rank: usize,
    /// Fake posts draw independent latents for text and image.
    pub decorrelate_fake: bool,
    /// Distance of the class means from the origin in latent space.
    pub class_separation: f64,
    /// Standard deviation of the additive observation noise.
    pub noise: f64,
    /// Fraction of fake posts per domain.
    pub fake_prior: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            samples_per_domain: 400,
            latent_dim: 8,
            text_dim: 16,
            vis_dim: 16,
            inst_dim: 6,
            shift: 1.0,
            nuisance_rank: 2,
            decorrelate_fake: true,
            class_separation: 0.5,
            noise: 0.3,
            fake_prior: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("domains", self.domains),
            ("samples_per_domain", self.samples_per_domain),
            ("latent_dim", self.latent_dim),
            ("text_dim", self.text_dim),
            ("vis_dim", self.vis_dim),
            ("inst_dim", self.inst_dim),
            ("nuisance_rank", self.nuisance_rank),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth {name} must be at least 1")));
        }
        for (name, v) in [
            ("shift", self.shift),
            ("class_separation", self.class_separation),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "synth {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.fake_prior) {
            return Err(Error::Config(format!(
                "synth fake_prior {} outside [0,1]",
                self.fake_prior
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            text: TextLayout::Pooled { dim: self.text_dim },
            vis_dim: self.vis_dim,
            inst_dim: self.inst_dim,
        }
    }

    pub fn domain_id(i: usize) -> alloc::string::String {
        format!("d{i}")
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Row-major `rows×cols` affine map.
struct Affine {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    offset: Vec<f64>,
}

impl Affine {
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let w = &self.weight[r * self.cols..(r + 1) * self.cols];
                self.offset[r] + w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Adds `shift·basis·U` to the weight and `shift·basis·c` to the offset,
    /// with `basis` a `rows×rank` matrix and `U`, `c` fresh Gaussian draws.
    fn perturbed(&self, rng: &mut ChaCha8Rng, basis: &[f64], rank: usize, shift: f64) -> Self {
        let u = gaussian_vec(rng, rank * self.cols, shift / libm::sqrt(self.cols as f64));
        let c = gaussian_vec(rng, rank, shift);
        let dw = matmul(basis, &u, self.rows, rank, self.cols);
        let db = matmul(basis, &c, self.rows, rank, 1);
        Self {
            rows: self.rows,
            cols: self.cols,
            weight: self.weight.iter().zip(dw).map(|(a, b)| a + b).collect(),
            offset: self.offset.iter().zip(db).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Generates `cfg.domains` domains named `d0, d1, ...`, all as sources.
/// Output is a pure function of the configuration.
pub fn generate(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5EED));
    let l = cfg.latent_dim;
    let base = |rng: &mut ChaCha8Rng, rows: usize| Affine {
        rows,
        cols: l,
        weight: gaussian_vec(rng, rows * l, 1.0 / libm::sqrt(l as f64)),
        offset: alloc::vec![0.0; rows],
    };
    let text_map = base(&mut rng, cfg.text_dim);
    let vis_map = base(&mut rng, cfg.vis_dim);
    let r = cfg.nuisance_rank;
    let text_basis = gaussian_vec(&mut rng, cfg.text_dim * r, 1.0 / libm::sqrt(r as f64));
    let vis_basis = gaussian_vec(&mut rng, cfg.vis_dim * r, 1.0 / libm::sqrt(r as f64));
    let inst_map = gaussian_vec(
        &mut rng,
        cfg.vis_dim * cfg.inst_dim,
        1.0 / libm::sqrt(cfg.vis_dim as f64),
    );
    let mut direction = gaussian_vec(&mut rng, l, 1.0);
    let norm = libm::sqrt(direction.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
    direction.iter_mut().for_each(|x| *x *= cfg.class_separation / norm);

    let layout = cfg.layout();
    let mut domains = Vec::with_capacity(cfg.domains);
    for m in 0..cfg.domains {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, m as u64 + 1));
        let text_m = text_map.perturbed(&mut rng, &text_basis, r, cfg.shift);
        let vis_m = vis_map.perturbed(&mut rng, &vis_basis, r, cfg.shift);
        let n = cfg.samples_per_domain;
        let n_fake = libm::round(cfg.fake_prior * n as f64) as usize;
        let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_fake)).collect();
        labels.shuffle(&mut rng);

        let latent = |rng: &mut ChaCha8Rng, label: u8| -> Vec<f64> {
            let sign = if label == 1 { 1.0 } else { -1.0 };
            gaussian_vec(rng, l, 1.0)
                .into_iter()
                .zip(&direction)
                .map(|(z, d)| z + sign * d)
                .collect()
        };
        let mut samples = Vec::with_capacity(n);
        let mut vis_rows = Vec::with_capacity(n * cfg.vis_dim);
        for (i, &label) in labels.iter().enumerate() {
            let zt = latent(&mut rng, label);
            let zv = if label == 1 && cfg.decorrelate_fake {
                latent(&mut rng, label)
            } else {
                zt.clone()
            };
            let mut text = text_m.apply(&zt);
            let mut vis = vis_m.apply(&zv);
            for (x, e) in text.iter_mut().zip(gaussian_vec(&mut rng, cfg.text_dim, cfg.noise)) {
                *x += e;
            }
            for (x, e) in vis.iter_mut().zip(gaussian_vec(&mut rng, cfg.vis_dim, cfg.noise)) {
                *x += e;
            }
            vis_rows.extend_from_slice(&vis);
            samples.push(Sample {
                id: format!("d{m}-{i:05}"),
                domain: SynthConfig::domain_id(m),
                label,
                text,
                vis,
                inst: Vec::new(),
            });
        }
        let logits = matmul(&vis_rows, &inst_map, n, cfg.vis_dim, cfg.inst_dim);
        let logits = Tensor::matrix(n, cfg.inst_dim, logits)?;
        let inst = softmax_rows(&logits)?;
        for (i, s) in samples.iter_mut().enumerate() {
            s.inst = inst.row(i).to_vec();
        }
        domains.push(Domain {
            id: SynthConfig::domain_id(m),
            samples,
            split: None,
        });
    }
    DatasetBundle::new("synthetic", layout, domains)
}

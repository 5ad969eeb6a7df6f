//! Encoders, classifier and the combined training objective
//! `λ1·L_inter + λ2·L_intra + L_cls`.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{self, ContrastiveHyper, ContrastiveMode};
use crate::data::{Batch, TextLayout};
use crate::error::{dim, Error, Result};
use crate::layers::{self, Mlp, MlpConfig, TextCnn, TextCnnConfig};
use crate::mmd::{self, MmdKernels, MmdVariant, TapedDomain};
use crate::optim::AdamConfig;
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Shared representation width used when none is configured.
pub const DEFAULT_LATENT_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Domain generalization: no target data during training.
    #[default]
    Dg,
    /// Domain adaptation: unlabeled target batches enter the inter-domain loss.
    Da,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dg => "dg",
            Self::Da => "da",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dg" => Ok(Self::Dg),
            "da" => Ok(Self::Da),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub text: TextLayout,
    pub vis_dim: usize,
    /// Width `d` of both encoder outputs.
    pub latent_dim: usize,
    /// Convolution settings for sequence input; ignored for pooled text.
    pub textcnn: Option<TextCnnConfig>,
}

impl ModelConfig {
    pub fn new(text: TextLayout, vis_dim: usize) -> Self {
        let textcnn = match text {
            TextLayout::Sequence { emb_dim, .. } => Some(TextCnnConfig::with_emb_dim(emb_dim)),
            TextLayout::Pooled { .. } => None,
        };
        Self {
            text,
            vis_dim,
            latent_dim: DEFAULT_LATENT_DIM,
            textcnn,
        }
    }

    pub fn with_latent_dim(mut self, d: usize) -> Self {
        self.latent_dim = d;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    pub contrastive: ContrastiveHyper,
    pub adam: AdamConfig,
    /// Samples drawn from each domain per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: Mode,
    pub mmd_variant: MmdVariant,
    pub contrastive_mode: ContrastiveMode,
    pub kernels: MmdKernels,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_inter: 0.1,
            lambda_intra: 0.5,
            contrastive: ContrastiveHyper::default(),
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 20,
            mode: Mode::Dg,
            mmd_variant: MmdVariant::Joint,
            contrastive_mode: ContrastiveMode::Ours,
            kernels: MmdKernels::default(),
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size={} must be at least 2",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for (name, v) in [("lambda_inter", self.lambda_inter), ("lambda_intra", self.lambda_intra)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name}={v} must be a non-negative number")));
            }
        }
        if !(self.adam.lr > 0.0 && self.adam.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate must be positive and weight decay non-negative".into(),
            ));
        }
        self.contrastive.validate()
    }

    /// Both alignment weights are zero, so only the classification loss trains.
    pub fn is_vanilla(&self) -> bool {
        self.lambda_inter == 0.0 && self.lambda_intra == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub inter: f64,
    pub intra: f64,
    /// Anchors that entered the contrastive term; zero flags an empty batch.
    pub anchors: usize,
}

/// Handles into a tape holding the full objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub cls: Var,
    pub inter: Var,
    pub intra: Var,
    pub anchors: usize,
}

impl Objective {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.scalar(self.total),
            cls: tape.scalar(self.cls),
            inter: tape.scalar(self.inter),
            intra: tape.scalar(self.intra),
            anchors: self.anchors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// 1 = fake / rumor.
    pub label: u8,
    pub prob_fake: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdcmModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    text_cnn: Option<TextCnn>,
    text_mlp: Mlp,
    vis_mlp: Mlp,
    classifier: Mlp,
}

impl RdcmModel {
    /// Encoders `in → d → d`, classifier `2d → d → 2`, weights drawn from
    /// `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.latent_dim;
        if d == 0 || config.vis_dim == 0 || config.text.width() == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        let (text_cnn, text_in) = match config.text {
            TextLayout::Pooled { dim } => (None, dim),
            TextLayout::Sequence { seq_len, emb_dim } => {
                let cfg = config
                    .textcnn
                    .clone()
                    .unwrap_or_else(|| TextCnnConfig::with_emb_dim(emb_dim));
                dim("TextCNN embedding dim", emb_dim, cfg.emb_dim)?;
                if seq_len < cfg.max_width() {
                    return Err(Error::SequenceTooShort {
                        len: seq_len,
                        width: cfg.max_width(),
                    });
                }
                let out = cfg.output_width();
                (Some(TextCnn::new("text.cnn", cfg, &mut params, &mut rng)?), out)
            }
        };
        let text_mlp = Mlp::new("text.mlp", MlpConfig::relu(&[text_in, d, d]), &mut params, &mut rng)?;
        let vis_mlp = Mlp::new(
            "vis.mlp",
            MlpConfig::relu(&[config.vis_dim, d, d]),
            &mut params,
            &mut rng,
        )?;
        let classifier = Mlp::new("cls.mlp", MlpConfig::relu(&[2 * d, d, 2]), &mut params, &mut rng)?;
        Ok(Self {
            config,
            params,
            text_cnn,
            text_mlp,
            vis_mlp,
            classifier,
        })
    }

    pub fn text_mlp(&self) -> &Mlp {
        &self.text_mlp
    }

    pub fn vis_mlp(&self) -> &Mlp {
        &self.vis_mlp
    }

    pub fn classifier(&self) -> &Mlp {
        &self.classifier
    }

    fn check_text_shape(&self, text: &Tensor) -> Result<()> {
        let expected = self.config.text.batch_shape(text.rows());
        if text.shape() != expected.as_slice() {
            return Err(Error::Dimension {
                context: "text input layout",
                expected: self.config.text.width(),
                actual: text.row_len(),
            });
        }
        Ok(())
    }

    pub fn encode_text_on_tape(&self, tape: &mut Tape, text: Var) -> Result<Var> {
        self.check_text_shape(tape.value(text))?;
        let h = match &self.text_cnn {
            Some(cnn) => cnn.forward(tape, &self.params, text)?,
            None => text,
        };
        self.text_mlp.forward(tape, &self.params, h)
    }

    pub fn encode_image_on_tape(&self, tape: &mut Tape, visual: Var) -> Result<Var> {
        self.vis_mlp.forward(tape, &self.params, visual)
    }

    pub fn logits_on_tape(&self, tape: &mut Tape, xt: Var, xv: Var) -> Result<Var> {
        let d = self.config.latent_dim;
        dim("classifier text width", d, tape.value(xt).row_len())?;
        dim("classifier visual width", d, tape.value(xv).row_len())?;
        let joint = tape.concat_cols(&[xt, xv])?;
        self.classifier.forward(tape, &self.params, joint)
    }

    pub fn encode_text(&self, text: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let t = tape.leaf(text.clone());
        let y = self.encode_text_on_tape(&mut tape, t)?;
        Ok(tape.value(y).clone())
    }

    pub fn encode_image(&self, visual: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.leaf(visual.clone());
        let y = self.encode_image_on_tape(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }

    /// Softmax class probabilities; column 1 is the fake/rumor probability.
    pub fn classify(&self, xt: &Tensor, xv: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (t, v) = (tape.leaf(xt.clone()), tape.leaf(xv.clone()));
        let z = self.logits_on_tape(&mut tape, t, v)?;
        layers::softmax_rows(tape.value(z))
    }

    /// Argmax prediction; exact ties resolve to label 0.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        let xt = self.encode_text(&batch.text)?;
        let xv = self.encode_image(&batch.visual)?;
        let probs = self.classify(&xt, &xv)?;
        Ok((0..probs.rows())
            .map(|i| {
                let (p0, p1) = (probs.get2(i, 0), probs.get2(i, 1));
                Prediction {
                    label: u8::from(p1 > p0),
                    prob_fake: p1,
                }
            })
            .collect())
    }

    /// Encoded `[text ‖ visual]` features of a batch.
    pub fn encode_joint(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (t, v) = (tape.leaf(batch.text.clone()), tape.leaf(batch.visual.clone()));
        let xt = self.encode_text_on_tape(&mut tape, t)?;
        let xv = self.encode_image_on_tape(&mut tape, v)?;
        let j = tape.concat_cols(&[xt, xv])?;
        Ok(tape.value(j).clone())
    }

    /// Records the full objective for one step on `tape`.
    ///
    /// `L_cls` and `L_intra` use the pooled source batches only; the target
    /// batch (DA) enters `L_inter` alone and its labels are never read.
    pub fn objective(
        &self,
        tape: &mut Tape,
        sources: &[Batch],
        target: Option<&Batch>,
        hyper: &HyperParams,
    ) -> Result<Objective> {
        match (hyper.mode, target) {
            (Mode::Da, None) => return Err(Error::Config("DA mode needs a target batch".into())),
            (Mode::Dg, Some(_)) => return Err(Error::Config("DG mode must not see target data".into())),
            _ => {}
        }
        if sources.len() < 2 {
            return Err(Error::Config(format!(
                "need at least two source domains, got {}",
                sources.len()
            )));
        }
        let mut domains = Vec::with_capacity(sources.len());
        for b in sources {
            let t = tape.leaf(b.text.clone());
            let v = tape.leaf(b.visual.clone());
            domains.push(TapedDomain {
                text: self.encode_text_on_tape(tape, t)?,
                visual: self.encode_image_on_tape(tape, v)?,
            });
        }
        let texts: Vec<Var> = domains.iter().map(|d| d.text).collect();
        let visuals: Vec<Var> = domains.iter().map(|d| d.visual).collect();
        let xt = tape.concat_rows(&texts)?;
        let xv = tape.concat_rows(&visuals)?;
        let labels: Vec<u8> = sources.iter().flat_map(|b| b.labels.iter().copied()).collect();

        let logits = self.logits_on_tape(tape, xt, xv)?;
        let cls = tape.softmax_cross_entropy(logits, &labels)?;

        let inter = match target {
            None => mmd::inter_loss_dg_on_tape(tape, &domains, &hyper.kernels, hyper.mmd_variant)?,
            Some(tb) => {
                let t = tape.leaf(tb.text.clone());
                let v = tape.leaf(tb.visual.clone());
                let td = TapedDomain {
                    text: self.encode_text_on_tape(tape, t)?,
                    visual: self.encode_image_on_tape(tape, v)?,
                };
                mmd::inter_loss_da_on_tape(tape, &domains, &td, &hyper.kernels, hyper.mmd_variant)?
            }
        };

        let real_mask: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
        let inst_parts: Vec<&Tensor> = sources.iter().map(|b| &b.inst).collect();
        let inst = Tensor::concat_rows(&inst_parts)?;
        let text_desc = match hyper.contrastive_mode {
            ContrastiveMode::TextCon => {
                let parts = sources
                    .iter()
                    .map(|b| text_descriptors(&b.text))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor> = parts.iter().collect();
                Some(Tensor::concat_rows(&refs)?)
            }
            _ => None,
        };
        let plan = contrastive::weight_plan(
            &real_mask,
            &inst,
            text_desc.as_ref(),
            hyper.contrastive.beta,
            hyper.contrastive_mode,
        )?;
        let nt = tape.l2_normalize(xt)?;
        let nv = tape.l2_normalize(xv)?;
        let intra = contrastive::contrastive_loss_on_tape(tape, nt, nv, &plan, hyper.contrastive.tau)?;

        let a = tape.scale(inter, hyper.lambda_inter)?;
        let b = tape.scale(intra, hyper.lambda_intra)?;
        let align = tape.add(a, b)?;
        let total = tape.add(align, cls)?;
        Ok(Objective {
            total,
            cls,
            inter,
            intra,
            anchors: plan.anchors.len(),
        })
    }

    /// Value of the objective and its three components.
    pub fn total_loss(&self, sources: &[Batch], target: Option<&Batch>, hyper: &HyperParams) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let obj = self.objective(&mut tape, sources, target, hyper)?;
        Ok(obj.breakdown(&tape))
    }
}

/// Softmax of the raw text payload (mean over tokens for sequences), used as
/// the text-side descriptor of the TextCon variant.
pub fn text_descriptors(text: &Tensor) -> Result<Tensor> {
    let pooled = match text.shape().len() {
        2 => text.clone(),
        3 => {
            let (n, len, emb) = (text.shape()[0], text.shape()[1], text.shape()[2]);
            let mut out = alloc::vec![0.0; n * emb];
            for i in 0..n {
                let row = text.row(i);
                for t in 0..len {
                    for e in 0..emb {
                        out[i * emb + e] += row[t * emb + e] / len as f64;
                    }
                }
            }
            Tensor::matrix(n, emb, out)?
        }
        r => {
            return Err(Error::Dimension {
                context: "text payload rank",
                expected: 2,
                actual: r,
            })
        }
    };
    layers::softmax_rows(&pooled)
}

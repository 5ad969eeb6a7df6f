//! Cross-modal contrastive alignment with similarity-filtered negatives.
//!
//! For an anchor `p` (a real post) the loss is
//!
//! ```text
//! −log  e^{s_pp} / (e^{s_pp} + Σ_{q≠p} w_pq · e^{s_pq}),   s_pq = ⟨t̃_p, ṽ_q⟩ / τ
//! ```
//!
//! evaluated as `log1p(Σ_{q≠p} w_pq · e^{s_pq − s_pp})`, which is exactly zero
//! when every weight vanishes. The weight `w_pq` is `β − sim(h_p, h_q)` when
//! the descriptor similarity is below the threshold `β` and `0` otherwise, so
//! negatives that look like the anchor at the instance level are dropped.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{dim, Error, Result};
use crate::tape::{Tape, Var, NORM_GUARD};
use crate::tensor::{self, Tensor};

const UNIT_TOLERANCE: f64 = 1e-6;
const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContrastiveMode {
    /// Real-post anchors, negatives weighted by visual descriptor similarity.
    #[default]
    Ours,
    /// Every row is an anchor and every negative has weight 1.
    Regular,
    /// Real-post anchors, negatives weighted by text-side descriptors.
    TextCon,
    /// Real-post anchors, every negative has weight 1.
    ThresCon,
}

impl ContrastiveMode {
    pub const ALL: [ContrastiveMode; 4] = [Self::Ours, Self::Regular, Self::TextCon, Self::ThresCon];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ours => "ours",
            Self::Regular => "regular",
            Self::TextCon => "textcon",
            Self::ThresCon => "threscon",
        }
    }
}

impl fmt::Display for ContrastiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContrastiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ours" => Ok(Self::Ours),
            "regular" => Ok(Self::Regular),
            "textcon" => Ok(Self::TextCon),
            "threscon" => Ok(Self::ThresCon),
            other => Err(Error::Config(format!("unknown contrastive mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveHyper {
    pub beta: f64,
    pub tau: f64,
}

impl Default for ContrastiveHyper {
    fn default() -> Self {
        Self { beta: 0.5, tau: 0.5 }
    }
}

impl ContrastiveHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("threshold beta={} outside [0,1]", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature tau={} must be positive", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    /// L2-normalized text features, `B×d`.
    pub text: Tensor,
    /// L2-normalized visual features, `B×d`.
    pub visual: Tensor,
    /// Visual instance descriptors (probability rows), `B×C`.
    pub descriptors: Tensor,
    /// `true` where the post is real (label 0).
    pub real_mask: Vec<bool>,
    /// Text-side descriptors used by [`ContrastiveMode::TextCon`].
    pub text_descriptors: Option<Tensor>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.real_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real_mask.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.real_mask.len();
        let (nt, dt) = self.text.expect_matrix("contrastive text")?;
        let (nv, dv) = self.visual.expect_matrix("contrastive visual")?;
        dim("contrastive text rows", b, nt)?;
        dim("contrastive visual rows", b, nv)?;
        dim("contrastive feature width", dt, dv)?;
        check_unit_rows(&self.text, "text")?;
        check_unit_rows(&self.visual, "visual")?;
        dim("descriptor rows", b, self.descriptors.rows())?;
        check_simplex_rows(&self.descriptors)?;
        if let Some(td) = &self.text_descriptors {
            dim("text descriptor rows", b, td.rows())?;
            check_simplex_rows(td)?;
        }
        Ok(())
    }
}

fn check_unit_rows(x: &Tensor, which: &str) -> Result<()> {
    for i in 0..x.rows() {
        let n = tensor::norm(x.row(i));
        if (n - 1.0).abs() > UNIT_TOLERANCE && n > NORM_GUARD {
            return Err(Error::Validation(format!(
                "{which} row {i} is not L2-normalized (norm {n})"
            )));
        }
    }
    Ok(())
}

/// Rejects rows with negative entries or a sum away from 1.
pub fn check_simplex_rows(x: &Tensor) -> Result<()> {
    for i in 0..x.rows() {
        let row = x.row(i);
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Validation(format!("descriptor row {i} has a negative entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Validation(format!("descriptor row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// `(cos(h_p, h_q) + 1) / 2`; a zero-norm descriptor counts as cosine 0.
pub fn descriptor_similarity(hp: &[f64], hq: &[f64]) -> Result<f64> {
    dim("descriptor width", hp.len(), hq.len())?;
    let (np, nq) = (tensor::norm(hp), tensor::norm(hq));
    if np < NORM_GUARD || nq < NORM_GUARD {
        return Ok(0.5);
    }
    let cos = (tensor::dot(hp, hq) / (np * nq)).clamp(-1.0, 1.0);
    Ok((cos + 1.0) / 2.0)
}

/// Weight of a negative pair: zero when `sim ≥ β`, otherwise `β − sim`.
pub fn negative_weight(sim: f64, beta: f64) -> f64 {
    if sim >= beta {
        0.0
    } else {
        beta - sim
    }
}

/// Anchor set and `B×B` negative weights (zero diagonal) for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPlan {
    pub size: usize,
    pub anchors: Vec<usize>,
    pub weights: Vec<f64>,
}

impl WeightPlan {
    pub fn weight(&self, p: usize, q: usize) -> f64 {
        self.weights[p * self.size + q]
    }

    /// Same anchors with every off-diagonal weight set to 1.
    pub fn saturated(&self) -> Self {
        let mut w = vec![1.0; self.size * self.size];
        for i in 0..self.size {
            w[i * self.size + i] = 0.0;
        }
        Self {
            size: self.size,
            anchors: self.anchors.clone(),
            weights: w,
        }
    }
}

/// Anchors and negative weights for `mode`.
pub fn weight_plan(
    real_mask: &[bool],
    descriptors: &Tensor,
    text_descriptors: Option<&Tensor>,
    beta: f64,
    mode: ContrastiveMode,
) -> Result<WeightPlan> {
    let b = real_mask.len();
    let anchors: Vec<usize> = match mode {
        ContrastiveMode::Regular => (0..b).collect(),
        _ => (0..b).filter(|&i| real_mask[i]).collect(),
    };
    let source = match mode {
        ContrastiveMode::Ours => Some(descriptors),
        ContrastiveMode::TextCon => {
            Some(text_descriptors.ok_or_else(|| Error::Config("TextCon mode needs text-side descriptors".into()))?)
        }
        ContrastiveMode::Regular | ContrastiveMode::ThresCon => None,
    };
    let mut weights = vec![0.0; b * b];
    for p in 0..b {
        for q in 0..b {
            if p == q {
                continue;
            }
            weights[p * b + q] = match source {
                Some(h) => negative_weight(descriptor_similarity(h.row(p), h.row(q))?, beta),
                None => 1.0,
            };
        }
    }
    Ok(WeightPlan {
        size: b,
        anchors,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub anchors: usize,
}

impl ContrastiveLoss {
    /// The batch had no qualifying anchor and contributed zero.
    pub fn no_anchors(&self) -> bool {
        self.anchors == 0
    }
}

pub fn contrastive_loss(
    batch: &ContrastiveBatch,
    hyper: &ContrastiveHyper,
    mode: ContrastiveMode,
) -> Result<ContrastiveLoss> {
    hyper.validate()?;
    batch.validate()?;
    let plan = weight_plan(
        &batch.real_mask,
        &batch.descriptors,
        batch.text_descriptors.as_ref(),
        hyper.beta,
        mode,
    )?;
    contrastive_loss_with_plan(&batch.text, &batch.visual, &plan, hyper.tau)
}

/// Loss for explicit anchors and weights.
pub fn contrastive_loss_with_plan(
    text: &Tensor,
    visual: &Tensor,
    plan: &WeightPlan,
    tau: f64,
) -> Result<ContrastiveLoss> {
    let b = plan.size;
    dim("contrastive text rows", b, text.rows())?;
    dim("contrastive visual rows", b, visual.rows())?;
    if plan.anchors.is_empty() {
        return Ok(ContrastiveLoss { value: 0.0, anchors: 0 });
    }
    let inv_tau = 1.0 / tau;
    let coeff = 1.0 / plan.anchors.len() as f64;
    let mut total = 0.0;
    for &p in &plan.anchors {
        let s_pp = tensor::dot(text.row(p), visual.row(p)) * inv_tau;
        let mut acc = 0.0;
        for q in 0..b {
            let s_pq = tensor::dot(text.row(p), visual.row(q)) * inv_tau;
            acc += libm::exp(s_pq - s_pp) * plan.weight(p, q);
        }
        total += coeff * libm::log1p(acc);
    }
    Ok(ContrastiveLoss {
        value: total,
        anchors: plan.anchors.len(),
    })
}

/// Taped loss over already-normalized `text`/`visual` rows. Returns a
/// constant zero when the plan has no anchors.
pub fn contrastive_loss_on_tape(tape: &mut Tape, text: Var, visual: Var, plan: &WeightPlan, tau: f64) -> Result<Var> {
    if plan.anchors.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let b = plan.size;
    let s = tape.matmul_t(text, visual)?;
    let s = tape.scale(s, 1.0 / tau)?;
    let shifted = tape.sub_row_diag(s)?;
    let e = tape.exp(shifted)?;
    let w = tape.leaf(Tensor::matrix(b, b, plan.weights.clone())?);
    let we = tape.mul(e, w)?;
    let r = tape.row_sum(we)?;
    let l = tape.ln_1p(r)?;
    let mut coeffs = vec![0.0; b];
    let c = 1.0 / plan.anchors.len() as f64;
    for &a in &plan.anchors {
        coeffs[a] = c;
    }
    tape.weighted_sum(l, coeffs)
}

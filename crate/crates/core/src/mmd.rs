//! MMD estimators between domains and the inter-domain alignment losses.
//!
//! All estimators are the biased V-statistic
//! `mean(Kxx) + mean(Kyy) − 2·mean(Kxy)`, diagonal terms included. The joint
//! estimator uses the product kernel `k_t(t,t′)·k_v(v,v′)`, i.e. the Hadamard
//! product of the per-modality kernel matrices, which embeds the joint
//! distribution of the two modalities through its cross-covariance operator.
//!
//! Every estimator exists twice: a plain version on [`DomainFeatures`] and a
//! taped version on [`TapedDomain`] that the training objective
//! differentiates. Both evaluate the same expressions in the same order.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{dim, Error, Result};
use crate::kernels::{kernel_matrix, KernelMatrix, KernelSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Encoded (or raw) features of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainFeatures {
    pub text: Tensor,
    pub visual: Tensor,
    pub domain: usize,
}

impl DomainFeatures {
    pub fn new(text: Tensor, visual: Tensor, domain: usize) -> Result<Self> {
        let (nt, _) = text.expect_matrix("domain text features")?;
        let (nv, _) = visual.expect_matrix("domain visual features")?;
        dim("domain row counts", nt, nv)?;
        if nt == 0 {
            return Err(Error::Validation("domain has no samples".into()));
        }
        Ok(Self { text, visual, domain })
    }

    pub fn len(&self) -> usize {
        self.text.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of `[text ‖ visual]`.
    pub fn concatenated(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..self.len())
            .map(|i| {
                let mut r = self.text.row(i).to_vec();
                r.extend_from_slice(self.visual.row(i));
                r
            })
            .collect();
        Tensor::from_rows(&rows).expect("rows share a width")
    }
}

/// Which distribution the inter-domain loss aligns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MmdVariant {
    /// Product-kernel embedding of the joint text–visual distribution.
    #[default]
    Joint,
    /// A single kernel on concatenated `[text ‖ visual]` vectors.
    Fusion,
    Vision,
    Text,
}

impl MmdVariant {
    pub const ALL: [MmdVariant; 4] = [Self::Joint, Self::Fusion, Self::Vision, Self::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::Fusion => "fusion",
            Self::Vision => "vision",
            Self::Text => "text",
        }
    }
}

impl fmt::Display for MmdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MmdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "joint" => Ok(Self::Joint),
            "fusion" => Ok(Self::Fusion),
            "vision" | "visual" | "image" => Ok(Self::Vision),
            "text" => Ok(Self::Text),
            other => Err(Error::Config(alloc::format!("unknown MMD variant '{other}'"))),
        }
    }
}

/// Kernel bandwidths per modality.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MmdKernels {
    pub text: KernelSpec,
    pub visual: KernelSpec,
}

pub fn mmd_biased(kxx: &KernelMatrix, kyy: &KernelMatrix, kxy: &KernelMatrix) -> Result<f64> {
    let (n, m) = (kxx.rows(), kyy.rows());
    dim("Kxx square", n, kxx.cols())?;
    dim("Kyy square", m, kyy.cols())?;
    dim("Kxy rows", n, kxy.rows())?;
    dim("Kxy cols", m, kxy.cols())?;
    Ok(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
}

fn single_mmd(a: &Tensor, b: &Tensor, spec: &KernelSpec) -> Result<f64> {
    mmd_biased(
        &kernel_matrix(a, a, spec)?,
        &kernel_matrix(b, b, spec)?,
        &kernel_matrix(a, b, spec)?,
    )
}

fn check_widths(a: &DomainFeatures, b: &DomainFeatures) -> Result<()> {
    dim("text feature width", a.text.row_len(), b.text.row_len())?;
    dim("visual feature width", a.visual.row_len(), b.visual.row_len())
}

pub fn joint_mmd(a: &DomainFeatures, b: &DomainFeatures, kernels: &MmdKernels) -> Result<f64> {
    check_widths(a, b)?;
    let product = |x: &DomainFeatures, y: &DomainFeatures| -> Result<KernelMatrix> {
        let kv = kernel_matrix(&x.visual, &y.visual, &kernels.visual)?;
        let kt = kernel_matrix(&x.text, &y.text, &kernels.text)?;
        kv.hadamard(&kt)
    };
    mmd_biased(&product(a, a)?, &product(b, b)?, &product(a, b)?)
}

/// MMD of the distribution selected by `variant`.
pub fn marginal_mmd(a: &DomainFeatures, b: &DomainFeatures, kernels: &MmdKernels, variant: MmdVariant) -> Result<f64> {
    check_widths(a, b)?;
    match variant {
        MmdVariant::Joint => joint_mmd(a, b, kernels),
        MmdVariant::Text => single_mmd(&a.text, &b.text, &kernels.text),
        MmdVariant::Vision => single_mmd(&a.visual, &b.visual, &kernels.visual),
        MmdVariant::Fusion => single_mmd(&a.concatenated(), &b.concatenated(), &kernels.text),
    }
}

/// Sum of the separate text and visual marginal MMDs.
pub fn separate_marginals_mmd(a: &DomainFeatures, b: &DomainFeatures, kernels: &MmdKernels) -> Result<f64> {
    Ok(marginal_mmd(a, b, kernels, MmdVariant::Text)? + marginal_mmd(a, b, kernels, MmdVariant::Vision)?)
}

/// Mean MMD over all unordered pairs of source domains.
pub fn inter_loss_dg(domains: &[DomainFeatures], kernels: &MmdKernels, variant: MmdVariant) -> Result<f64> {
    if domains.len() < 2 {
        return Err(Error::Config(alloc::format!(
            "inter-domain loss needs at least two source domains, got {}",
            domains.len()
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..domains.len() {
        for j in i + 1..domains.len() {
            total += marginal_mmd(&domains[i], &domains[j], kernels, variant)?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Source-pair term plus the mean MMD between each source and the target.
pub fn inter_loss_da(
    domains: &[DomainFeatures],
    target: &DomainFeatures,
    kernels: &MmdKernels,
    variant: MmdVariant,
) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Config("target domain is empty".into()));
    }
    let sources = inter_loss_dg(domains, kernels, variant)?;
    let mut total = 0.0;
    for d in domains {
        total += marginal_mmd(d, target, kernels, variant)?;
    }
    Ok(sources + total / domains.len() as f64)
}

/// Per-domain feature handles on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapedDomain {
    pub text: Var,
    pub visual: Var,
}

/// Taped kernel matrix between two domains for the chosen variant.
fn taped_kernel(
    tape: &mut Tape,
    a: &TapedDomain,
    b: &TapedDomain,
    kernels: &MmdKernels,
    variant: MmdVariant,
) -> Result<Var> {
    let single = |tape: &mut Tape, x: Var, y: Var, spec: &KernelSpec| -> Result<Var> {
        let d = tape.sq_dist(x, y)?;
        tape.multi_gaussian(d, spec.sigmas())
    };
    match variant {
        MmdVariant::Joint => {
            let kv = single(tape, a.visual, b.visual, &kernels.visual)?;
            let kt = single(tape, a.text, b.text, &kernels.text)?;
            tape.mul(kv, kt)
        }
        MmdVariant::Text => single(tape, a.text, b.text, &kernels.text),
        MmdVariant::Vision => single(tape, a.visual, b.visual, &kernels.visual),
        MmdVariant::Fusion => {
            let ca = tape.concat_cols(&[a.text, a.visual])?;
            let cb = tape.concat_cols(&[b.text, b.visual])?;
            single(tape, ca, cb, &kernels.text)
        }
    }
}

/// Builds pairwise MMD terms while computing each domain's self-similarity
/// term only once.
struct TapedMmd<'a> {
    kernels: &'a MmdKernels,
    variant: MmdVariant,
    self_terms: Vec<Option<Var>>,
}

impl<'a> TapedMmd<'a> {
    fn new(kernels: &'a MmdKernels, variant: MmdVariant, count: usize) -> Self {
        Self {
            kernels,
            variant,
            self_terms: alloc::vec![None; count],
        }
    }

    fn self_term(&mut self, tape: &mut Tape, slot: usize, d: &TapedDomain) -> Result<Var> {
        if let Some(v) = self.self_terms[slot] {
            return Ok(v);
        }
        let k = taped_kernel(tape, d, d, self.kernels, self.variant)?;
        let m = tape.mean(k)?;
        self.self_terms[slot] = Some(m);
        Ok(m)
    }

    fn pair(&mut self, tape: &mut Tape, ia: usize, a: &TapedDomain, ib: usize, b: &TapedDomain) -> Result<Var> {
        let maa = self.self_term(tape, ia, a)?;
        let mbb = self.self_term(tape, ib, b)?;
        let kab = taped_kernel(tape, a, b, self.kernels, self.variant)?;
        let mab = tape.mean(kab)?;
        let s = tape.add(maa, mbb)?;
        let c = tape.scale(mab, 2.0)?;
        tape.sub(s, c)
    }
}

/// Taped MMD between two domains.
pub fn mmd_on_tape(
    tape: &mut Tape,
    a: &TapedDomain,
    b: &TapedDomain,
    kernels: &MmdKernels,
    variant: MmdVariant,
) -> Result<Var> {
    TapedMmd::new(kernels, variant, 2).pair(tape, 0, a, 1, b)
}

/// Taped version of [`inter_loss_dg`].
pub fn inter_loss_dg_on_tape(
    tape: &mut Tape,
    domains: &[TapedDomain],
    kernels: &MmdKernels,
    variant: MmdVariant,
) -> Result<Var> {
    let mut builder = TapedMmd::new(kernels, variant, domains.len());
    source_pairs(tape, &mut builder, domains)
}

fn source_pairs(tape: &mut Tape, builder: &mut TapedMmd<'_>, domains: &[TapedDomain]) -> Result<Var> {
    if domains.len() < 2 {
        return Err(Error::Config(alloc::format!(
            "inter-domain loss needs at least two source domains, got {}",
            domains.len()
        )));
    }
    let mut terms = Vec::new();
    for i in 0..domains.len() {
        for j in i + 1..domains.len() {
            terms.push(builder.pair(tape, i, &domains[i], j, &domains[j])?);
        }
    }
    tape.mean_of_scalars(&terms)
}

/// Taped version of [`inter_loss_da`].
pub fn inter_loss_da_on_tape(
    tape: &mut Tape,
    domains: &[TapedDomain],
    target: &TapedDomain,
    kernels: &MmdKernels,
    variant: MmdVariant,
) -> Result<Var> {
    let mut builder = TapedMmd::new(kernels, variant, domains.len() + 1);
    let sources = source_pairs(tape, &mut builder, domains)?;
    let t = domains.len();
    let mut terms = Vec::with_capacity(domains.len());
    for (i, d) in domains.iter().enumerate() {
        terms.push(builder.pair(tape, i, d, t, target)?);
    }
    let cross = tape.mean_of_scalars(&terms)?;
    tape.add(sources, cross)
}

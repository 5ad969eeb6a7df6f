//! In-memory datasets, 70/30 splits and per-domain minibatching.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::check_simplex_rows;
use crate::error::{dim, Error, Result};
use crate::tensor::Tensor;

/// Shape of the text payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextLayout {
    /// One pooled vector per post.
    Pooled { dim: usize },
    /// A fixed-length token-embedding sequence per post.
    Sequence { seq_len: usize, emb_dim: usize },
}

impl TextLayout {
    /// Number of values in one flattened payload.
    pub fn width(&self) -> usize {
        match *self {
            Self::Pooled { dim } => dim,
            Self::Sequence { seq_len, emb_dim } => seq_len * emb_dim,
        }
    }

    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        match *self {
            Self::Pooled { dim } => alloc::vec![n, dim],
            Self::Sequence { seq_len, emb_dim } => alloc::vec![n, seq_len, emb_dim],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub text: TextLayout,
    pub vis_dim: usize,
    pub inst_dim: usize,
}

/// One post. `text` is flattened row-major for sequence payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: String,
    /// 0 = real / non-rumor, 1 = fake / rumor.
    pub label: u8,
    pub text: Vec<f64>,
    pub vis: Vec<f64>,
    pub inst: Vec<f64>,
}

impl Sample {
    pub fn validate(&self, layout: &FeatureLayout) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Validation(format!(
                "sample {}: label {} outside {{0,1}}",
                self.id, self.label
            )));
        }
        let check = |what: &str, want: usize, got: usize| -> Result<()> {
            if want != got {
                return Err(Error::Validation(format!(
                    "sample {}: {what} has {got} values, expected {want}",
                    self.id
                )));
            }
            Ok(())
        };
        check("text", layout.text.width(), self.text.len())?;
        check("vis", layout.vis_dim, self.vis.len())?;
        check("inst", layout.inst_dim, self.inst.len())?;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.text) && finite(&self.vis)) {
            return Err(Error::Validation(format!("sample {}: non-finite feature", self.id)));
        }
        let inst = Tensor::matrix(1, self.inst.len(), self.inst.clone())?;
        check_simplex_rows(&inst).map_err(|e| match e {
            Error::Validation(m) => {
                Error::Validation(format!("sample {}: inst is not a probability vector ({m})", self.id))
            }
            other => other,
        })
    }
}

/// Disjoint train/test index lists into a domain's samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub id: String,
    pub samples: Vec<Sample>,
    pub split: Option<Split>,
}

impl Domain {
    pub fn label_counts(&self) -> [usize; 2] {
        let fake = self.samples.iter().filter(|s| s.label == 1).count();
        [self.samples.len() - fake, fake]
    }

    fn split_or_err(&self) -> Result<&Split> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::Config(format!("domain {} has not been split", self.id)))
    }

    pub fn train(&self) -> Result<&[usize]> {
        Ok(&self.split_or_err()?.train)
    }

    pub fn test(&self) -> Result<&[usize]> {
        Ok(&self.split_or_err()?.test)
    }
}

/// Labeled source domains plus an optional target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub layout: FeatureLayout,
    pub sources: Vec<Domain>,
    pub target: Option<Domain>,
}

impl DatasetBundle {
    /// Validates every sample and orders domains and samples by id.
    pub fn new(name: &str, layout: FeatureLayout, mut domains: Vec<Domain>) -> Result<Self> {
        domains.sort_by(|a, b| a.id.cmp(&b.id));
        for w in domains.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Validation(format!("duplicate domain id {}", w[0].id)));
            }
        }
        let mut ids: Vec<&str> = Vec::new();
        for d in &mut domains {
            d.samples.sort_by(|a, b| a.id.cmp(&b.id));
            for s in &d.samples {
                s.validate(&layout)?;
            }
        }
        for d in &domains {
            ids.extend(d.samples.iter().map(|s| s.id.as_str()));
        }
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!("duplicate sample id {}", w[0])));
        }
        Ok(Self {
            name: name.into(),
            layout,
            sources: domains,
            target: None,
        })
    }

    pub fn domain_ids(&self) -> Vec<&str> {
        self.sources
            .iter()
            .chain(self.target.as_ref())
            .map(|d| d.id.as_str())
            .collect()
    }

    /// Moves the domain `id` from the sources into the target slot.
    pub fn hold_out(mut self, id: &str) -> Result<Self> {
        if let Some(t) = self.target.take() {
            self.sources.push(t);
            self.sources.sort_by(|a, b| a.id.cmp(&b.id));
        }
        let pos = self
            .sources
            .iter()
            .position(|d| d.id == id)
            .ok_or_else(|| Error::Config(format!("unknown target domain '{id}'")))?;
        self.target = Some(self.sources.remove(pos));
        Ok(self)
    }

    /// Seeded per-domain 70/30 split of every domain, target included.
    pub fn split_70_30(mut self, seed: u64) -> Result<Self> {
        let domains = self.sources.iter_mut().chain(self.target.as_mut());
        for (i, d) in domains.enumerate() {
            d.split = Some(
                split_indices(d.samples.len(), mix_seed(seed, i as u64)).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("domain {}: {m}", d.id)),
                    other => other,
                })?,
            );
        }
        Ok(self)
    }
}

/// Shuffled partition with `⌊0.7·n⌋` training indices.
pub fn split_indices(n: usize, seed: u64) -> Result<Split> {
    if n < 2 {
        return Err(Error::Config(format!("cannot split {n} samples into train and test")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 7 / 10;
    let test = idx.split_off(n_train);
    Ok(Split { train: idx, test })
}

/// SplitMix64 combination of two seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample indices for one optimization step: one batch per source domain and
/// optionally one target batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub sources: Vec<Vec<usize>>,
    pub target: Option<Vec<usize>>,
}

/// One epoch of per-domain minibatches.
///
/// The step count is `⌈min_m |train_m| / B⌉`. Each domain's training indices
/// are shuffled with a seed derived from `epoch_seed`; a batch that runs past
/// the end of its domain is filled by sampling with replacement, so every
/// batch has exactly `B` rows.
pub fn make_minibatches(
    bundle: &DatasetBundle,
    batch_size: usize,
    epoch_seed: u64,
    with_target: bool,
) -> Result<Vec<Step>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size {batch_size} is below 2")));
    }
    if bundle.sources.is_empty() {
        return Err(Error::Config("no source domains".into()));
    }
    let mut trains = Vec::with_capacity(bundle.sources.len() + 1);
    for d in &bundle.sources {
        trains.push(d.train()?);
    }
    let target = if with_target {
        let t = bundle
            .target
            .as_ref()
            .ok_or_else(|| Error::Config("target batches requested without a target domain".into()))?;
        Some(t.train()?)
    } else {
        None
    };
    let smallest = trains.iter().map(|t| t.len()).min().unwrap_or(0);
    if smallest == 0 || target.is_some_and(|t| t.is_empty()) {
        return Err(Error::Config("a domain has an empty training split".into()));
    }
    let steps = smallest.div_ceil(batch_size);
    let plan = |train: &[usize], slot: u64| -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(epoch_seed, slot));
        let mut order = train.to_vec();
        order.shuffle(&mut rng);
        (0..steps)
            .map(|s| {
                (0..batch_size)
                    .map(|k| {
                        let pos = s * batch_size + k;
                        if pos < order.len() {
                            order[pos]
                        } else {
                            train[rng.random_range(0..train.len())]
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let per_domain: Vec<Vec<Vec<usize>>> = trains.iter().enumerate().map(|(m, t)| plan(t, m as u64)).collect();
    let target_plan = target.map(|t| plan(t, u64::MAX));
    Ok((0..steps)
        .map(|s| Step {
            sources: per_domain.iter().map(|d| d[s].clone()).collect(),
            target: target_plan.as_ref().map(|t| t[s].clone()),
        })
        .collect())
}

/// Stacked tensors for a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `n×dim` (pooled) or `n×len×emb` (sequence).
    pub text: Tensor,
    pub visual: Tensor,
    pub inst: Tensor,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn from_samples(layout: &FeatureLayout, samples: &[&Sample]) -> Result<Self> {
        let n = samples.len();
        let mut text = Vec::with_capacity(n * layout.text.width());
        let mut vis = Vec::with_capacity(n * layout.vis_dim);
        let mut inst = Vec::with_capacity(n * layout.inst_dim);
        for s in samples {
            dim("sample text width", layout.text.width(), s.text.len())?;
            dim("sample vis width", layout.vis_dim, s.vis.len())?;
            dim("sample inst width", layout.inst_dim, s.inst.len())?;
            text.extend_from_slice(&s.text);
            vis.extend_from_slice(&s.vis);
            inst.extend_from_slice(&s.inst);
        }
        Ok(Self {
            text: Tensor::new(layout.text.batch_shape(n), text)?,
            visual: Tensor::matrix(n, layout.vis_dim, vis)?,
            inst: Tensor::matrix(n, layout.inst_dim, inst)?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn from_indices(layout: &FeatureLayout, domain: &Domain, idx: &[usize]) -> Result<Self> {
        let refs: Vec<&Sample> = idx.iter().map(|&i| &domain.samples[i]).collect();
        Self::from_samples(layout, &refs)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(parts: &[&Batch]) -> Result<Self> {
        let texts: Vec<&Tensor> = parts.iter().map(|b| &b.text).collect();
        let vis: Vec<&Tensor> = parts.iter().map(|b| &b.visual).collect();
        let inst: Vec<&Tensor> = parts.iter().map(|b| &b.inst).collect();
        Ok(Self {
            text: Tensor::concat_rows(&texts)?,
            visual: Tensor::concat_rows(&vis)?,
            inst: Tensor::concat_rows(&inst)?,
            labels: parts.iter().flat_map(|b| b.labels.iter().copied()).collect(),
        })
    }
}

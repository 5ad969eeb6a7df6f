//! Trainable layers: multi-layer perceptrons and TextCNN.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim, Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var, NORM_GUARD};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    /// Input, hidden..., output.
    pub widths: Vec<usize>,
    /// One entry per hidden layer; the output layer is always affine.
    pub hidden_activations: Vec<Activation>,
}

impl MlpConfig {
    /// ReLU on every hidden layer.
    pub fn relu(widths: &[usize]) -> Self {
        Self {
            widths: widths.to_vec(),
            hidden_activations: vec![Activation::Relu; widths.len().saturating_sub(2)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("MLP widths must be at least 1".into()));
        }
        dim(
            "MLP hidden activations",
            self.widths.len() - 2,
            self.hidden_activations.len(),
        )
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// An MLP whose weights live in a shared [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers `name.w{i}` (`in×out`, Glorot-uniform) and `name.b{i}`
    /// (zeros) for each layer.
    pub fn new<R: Rng + ?Sized>(name: &str, config: MlpConfig, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.widths.len() - 1);
        for (i, pair) in config.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = glorot(fan_in, fan_out, rng);
            let wid = params.add(&format!("{name}.w{i}"), w)?;
            let bid = params.add(&format!("{name}.b{i}"), Tensor::zeros(&[fan_out]))?;
            layers.push((wid, bid));
        }
        Ok(Self { config, layers })
    }

    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Affine/activation stack applied to `x: batch×in`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let (_, width) = tape.value(x).expect_matrix("MLP input")?;
        dim("MLP input width", self.config.input_width(), width)?;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(params, w);
            let bv = tape.param(params, b);
            let z = tape.matmul(h, wv)?;
            h = tape.add_bias(z, bv)?;
            if i < last && self.config.hidden_activations[i] == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Untracked forward pass.
    pub fn apply(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = self.forward(&mut tape, params, xv)?;
        Ok(tape.value(y).clone())
    }
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape matches count")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextCnnConfig {
    pub emb_dim: usize,
    pub kernel_widths: Vec<usize>,
    pub filters: usize,
}

impl TextCnnConfig {
    pub fn with_emb_dim(emb_dim: usize) -> Self {
        Self {
            emb_dim,
            kernel_widths: vec![3, 4, 5],
            filters: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.filters == 0 {
            return Err(Error::Config(
                "TextCNN embedding dim and filter count must be positive".into(),
            ));
        }
        if self.kernel_widths.is_empty() || self.kernel_widths.contains(&0) {
            return Err(Error::Config(
                "TextCNN kernel widths must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.kernel_widths.len() * self.filters
    }

    pub fn max_width(&self) -> usize {
        self.kernel_widths.iter().copied().max().unwrap_or(0)
    }
}

/// Parallel 1-D convolutions with ReLU and max-over-time pooling; pooled maps
/// are concatenated in kernel-width order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCnn {
    pub config: TextCnnConfig,
    branches: Vec<(usize, ParamId, ParamId)>,
}

impl TextCnn {
    pub fn new<R: Rng + ?Sized>(name: &str, config: TextCnnConfig, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut branches = Vec::new();
        for &width in &config.kernel_widths {
            let k = width * config.emb_dim;
            let w = glorot(k, config.filters, rng);
            let wid = params.add(&format!("{name}.conv{width}.w"), w)?;
            let bid = params.add(&format!("{name}.conv{width}.b"), Tensor::zeros(&[config.filters]))?;
            branches.push((width, wid, bid));
        }
        Ok(Self { config, branches })
    }

    pub fn branch_params(&self) -> impl Iterator<Item = (usize, ParamId, ParamId)> + '_ {
        self.branches.iter().copied()
    }

    /// `seq: batch×len×emb` → `batch×(widths·filters)`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, seq: Var) -> Result<Var> {
        let shape = tape.value(seq).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension {
                context: "TextCNN input rank",
                expected: 3,
                actual: shape.len(),
            });
        }
        dim("TextCNN embedding dim", self.config.emb_dim, shape[2])?;
        if shape[1] < self.config.max_width() {
            return Err(Error::SequenceTooShort {
                len: shape[1],
                width: self.config.max_width(),
            });
        }
        let mut pooled = Vec::with_capacity(self.branches.len());
        for &(width, w, b) in &self.branches {
            let wv = tape.param(params, w);
            let bv = tape.param(params, b);
            pooled.push(tape.conv_max_pool(seq, wv, bv, width)?);
        }
        if pooled.len() == 1 {
            Ok(pooled[0])
        } else {
            tape.concat_cols(&pooled)
        }
    }

    pub fn apply(&self, params: &ParamSet, seq: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let s = tape.leaf(seq.clone());
        let y = self.forward(&mut tape, params, s)?;
        Ok(tape.value(y).clone())
    }
}

/// Scales each row of `x` to unit norm. Rows whose norm is below `1e-12` are
/// returned unchanged.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let (_, m) = x.expect_matrix("l2_normalize")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(m.max(1)) {
        let n = tensor::norm(row);
        if n >= NORM_GUARD {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(out)
}

/// Mean negative log-probability of the true class under a softmax over two
/// logit columns.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let l = tape.softmax_cross_entropy(z, labels)?;
    Ok(tape.scalar(l))
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, m) = x.expect_matrix("softmax")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(m.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_mlp(params: &mut ParamSet, mlp: &Mlp, layer: usize, w: &[f64], b: &[f64]) {
        let (wid, bid) = mlp.layer_params()[layer];
        params.value_mut(wid).data_mut().copy_from_slice(w);
        params.value_mut(bid).data_mut().copy_from_slice(b);
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let mlp = Mlp::new("id", MlpConfig::relu(&[3, 3]), &mut params, &mut rng).unwrap();
        set_mlp(&mut params, &mlp, 0, &[1., 0., 0., 0., 1., 0., 0., 0., 1.], &[0.; 3]);
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(mlp.apply(&params, &x).unwrap(), x);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let mlp = Mlp::new("z", MlpConfig::relu(&[4, 2]), &mut params, &mut rng).unwrap();
        set_mlp(&mut params, &mlp, 0, &[0.0; 8], &[0.25, -1.5]);
        let x = Tensor::matrix(3, 4, (0..12).map(|v| v as f64).collect()).unwrap();
        let y = mlp.apply(&params, &x).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        // h = relu(x·W0 + b0), y = h·W1 + b1 with x = (1, 2)
        // W0 = [[1, -1], [0.5, 2]], b0 = (0, -6)
        //   pre0 = 1·1 + 2·0.5 + 0 = 2
        //   pre1 = 1·(−1) + 2·2 − 6 = −3 → relu 0
        // W1 = [3, 7], b1 = 0.5 → y = 2·3 + 0·7 + 0.5 = 6.5
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let mlp = Mlp::new("h", MlpConfig::relu(&[2, 2, 1]), &mut params, &mut rng).unwrap();
        set_mlp(&mut params, &mlp, 0, &[1.0, -1.0, 0.5, 2.0], &[0.0, -6.0]);
        set_mlp(&mut params, &mlp, 1, &[3.0, 7.0], &[0.5]);
        let y = mlp
            .apply(&params, &Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[6.5]);
    }

    #[test]
    fn mlp_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let mlp = Mlp::new("m", MlpConfig::relu(&[3, 4, 2]), &mut params, &mut rng).unwrap();
        assert!(matches!(
            mlp.apply(&params, &Tensor::zeros(&[2, 5])),
            Err(Error::Dimension { .. })
        ));
        assert!(MlpConfig::relu(&[3]).validate().is_err());
        assert!(MlpConfig::relu(&[3, 0, 1]).validate().is_err());
    }

    #[test]
    fn textcnn_default_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let cnn = TextCnn::new("cnn", TextCnnConfig::with_emb_dim(8), &mut params, &mut rng).unwrap();
        let seq = Tensor::new(vec![2, 20, 8], (0..320).map(|v| libm::sin(v as f64 * 0.37)).collect()).unwrap();
        let out = cnn.apply(&params, &seq).unwrap();
        assert_eq!(out.shape(), &[2, 300]);
        assert!(out.is_finite());
    }

    #[test]
    fn textcnn_zero_sequence_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let cnn = TextCnn::new("cnn", TextCnnConfig::with_emb_dim(4), &mut params, &mut rng).unwrap();
        let out = cnn.apply(&params, &Tensor::zeros(&[3, 6, 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn textcnn_hand_enumerated_windows() {
        // scalar embeddings s = (1, −2, 3), width 2, weights (0.5, 1), bias 0.1
        // window 0: 0.5·1 + 1·(−2) + 0.1 = −1.4
        // window 1: 0.5·(−2) + 1·3 + 0.1 = 2.1 → max 2.1
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let cfg = TextCnnConfig {
            emb_dim: 1,
            kernel_widths: vec![2],
            filters: 1,
        };
        let cnn = TextCnn::new("cnn", cfg, &mut params, &mut rng).unwrap();
        let (_, w, b) = cnn.branch_params().next().unwrap();
        params.value_mut(w).data_mut().copy_from_slice(&[0.5, 1.0]);
        params.value_mut(b).data_mut().copy_from_slice(&[0.1]);
        let seq = Tensor::new(vec![1, 3, 1], vec![1.0, -2.0, 3.0]).unwrap();
        let out = cnn.apply(&params, &seq).unwrap();
        assert!((out.item() - 2.1).abs() < 1e-15);
    }

    #[test]
    fn textcnn_short_sequence_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        let cnn = TextCnn::new("cnn", TextCnnConfig::with_emb_dim(2), &mut params, &mut rng).unwrap();
        assert!(matches!(
            cnn.apply(&params, &Tensor::zeros(&[1, 4, 2])),
            Err(Error::SequenceTooShort { len: 4, width: 5 })
        ));
    }

    #[test]
    fn normalize_cases() {
        let x = Tensor::matrix(3, 2, vec![3.0, 4.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let y = l2_normalize(&x).unwrap();
        assert!((y.row(0)[0] - 0.6).abs() < 1e-15 && (y.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(y.row(1), &[0.0, 0.0]);
        assert_eq!(y.row(2), &[1.0, 0.0]);
        let twice = l2_normalize(&y).unwrap();
        for (a, b) in twice.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_hand_values() {
        let perfect = Tensor::matrix(1, 2, vec![50.0, -50.0]).unwrap();
        assert!(softmax_cross_entropy(&perfect, &[0]).unwrap() < 1e-6);
        let equal = Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap();
        assert!((softmax_cross_entropy(&equal, &[1]).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
        let both = Tensor::matrix(2, 2, vec![-50.0, 50.0, 0.0, 0.0]).unwrap();
        let l = softmax_cross_entropy(&both, &[1, 0]).unwrap();
        assert!((l - 0.346_574).abs() < 1e-6);
        assert!(matches!(softmax_cross_entropy(&equal, &[2]), Err(Error::Validation(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -100.0, 0.0, 100.0]).unwrap();
        let p = softmax_rows(&x).unwrap();
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

//! Non-linear dynamic layer: dilated causal temporal convolution network
//! over the linear-cascade residual, per-feature normalization and linear
//! readout heads.
//!
//! Blocks follow the standard two-conv + skip pattern with dilation 2^i at
//! depth i; every convolution is causally zero-padded so column j of the
//! output depends only on input columns <= j.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::dilated_conv_forward;
use crate::error::{Result, StricError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// Identity; used by linear-oracle tests.
    Linear,
}

impl Activation {
    fn apply(&self, x: &mut Array2<f64>) {
        if matches!(self, Activation::Relu) {
            x.mapv_inplace(|v| v.max(0.0));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcnConfig {
    /// Number of residual blocks; dilation of block i is 2^i.
    pub layers: usize,
    /// Channels per hidden layer; also the number of output features.
    pub channels: usize,
    /// Kernel size of every convolution.
    pub kernel_size: usize,
    pub activation: Activation,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            layers: 8,
            channels: 32,
            kernel_size: 5,
            activation: Activation::Relu,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.kernel_size == 0 {
            return Err(StricError::config(
                "TCN needs layers >= 1, channels >= 1, kernel_size >= 1",
            ));
        }
        Ok(())
    }

    /// Span of past inputs influencing one output column: each block has two
    /// convolutions at dilation 2^i, so the field is 1 + 2(k-1)(2^h - 1).
    pub fn receptive_field(&self) -> usize {
        let sum_dil: usize = (0..self.layers).map(|i| 1usize << i).sum();
        1 + 2 * (self.kernel_size - 1) * sum_dil
    }

    /// Warning when early window columns are pure transient.
    pub fn receptive_field_warning(&self, n_p: usize) -> Option<String> {
        let rf = self.receptive_field();
        (rf > n_p).then(|| {
            format!(
                "TCN receptive field {rf} exceeds window length {n_p}; \
                 early window columns are transient"
            )
        })
    }
}

/// One convolution: weight laid out (c_out, c_in * kernel_size) plus bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvWeights {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvWeights {
    fn init(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha20Rng) -> Self {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        ConvWeights {
            weight: Array2::from_shape_fn((c_out, c_in * k), |_| rng.gen_range(-bound..bound)),
            bias: Array1::from_shape_fn(c_out, |_| rng.gen_range(-bound..bound)),
        }
    }

    fn apply(&self, x: &Array2<f64>, ksize: usize, dilation: usize) -> Array2<f64> {
        let mut y = dilated_conv_forward(x, &self.weight, ksize, dilation);
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v + self.bias[i]);
        }
        y
    }
}

/// Two dilated convolutions plus a skip connection (1x1 conv when the
/// channel counts differ).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TcnBlock {
    pub conv1: ConvWeights,
    pub conv2: ConvWeights,
    pub skip: Option<ConvWeights>,
    pub dilation: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TcnParams {
    pub config: TcnConfig,
    pub blocks: Vec<TcnBlock>,
}

impl TcnParams {
    pub fn init(n_channels: usize, config: TcnConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut blocks = Vec::with_capacity(config.layers);
        let mut c_in = n_channels;
        for layer in 0..config.layers {
            let c_out = config.channels;
            let skip = (c_in != c_out).then(|| ConvWeights::init(c_out, c_in, 1, rng));
            blocks.push(TcnBlock {
                conv1: ConvWeights::init(c_out, c_in, k, rng),
                conv2: ConvWeights::init(c_out, c_out, k, rng),
                skip,
                dilation: 1 << layer,
            });
            c_in = c_out;
        }
        Ok(TcnParams { config, blocks })
    }

    /// Number of output features (channels of the last layer).
    pub fn n_features(&self) -> usize {
        self.config.channels
    }
}

/// Full TCN forward pass: residual input (n x n_p) to pre-normalization
/// features (l3 x n_p). Column j depends only on input columns <= j.
pub fn tcn_forward(x3: &Array2<f64>, params: &TcnParams) -> Array2<f64> {
    let k = params.config.kernel_size;
    let act = params.config.activation;
    let mut x = x3.clone();
    for block in &params.blocks {
        let mut h = block.conv1.apply(&x, k, block.dilation);
        act.apply(&mut h);
        let mut h2 = block.conv2.apply(&h, k, block.dilation);
        act.apply(&mut h2);
        let skip = match &block.skip {
            Some(w) => w.apply(&x, 1, 1),
            None => x.clone(),
        };
        let mut out = h2 + skip;
        act.apply(&mut out);
        x = out;
    }
    x
}

/// Per-feature normalization with learnable affine rescale and running
/// statistics for inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the statistics of the given matrix.
    Train,
    /// Normalize with stored running statistics.
    Eval,
}

impl FeatureNorm {
    pub fn identity(n_features: usize) -> Self {
        FeatureNorm {
            scale: Array1::ones(n_features),
            shift: Array1::zeros(n_features),
            running_mean: Array1::zeros(n_features),
            running_var: Array1::ones(n_features),
            eps: NORM_EPS,
            momentum: NORM_MOMENTUM,
        }
    }

    /// Exponential update of the running statistics from one batch.
    pub fn update_running(&mut self, batch_mean: &Array1<f64>, batch_var: &Array1<f64>) {
        let m = self.momentum;
        for i in 0..self.running_mean.len() {
            self.running_mean[i] = (1.0 - m) * self.running_mean[i] + m * batch_mean[i];
            self.running_var[i] = (1.0 - m) * self.running_var[i] + m * batch_var[i];
        }
    }
}

/// Normalize each feature row of `g` (statistics across all columns in
/// train mode, running statistics in eval mode), then apply the affine
/// rescale. Returns the normalized matrix and, in train mode, the batch
/// (mean, var) per feature for the running-statistics update.
pub fn feature_norm(
    g: &Array2<f64>,
    norm: &FeatureNorm,
    mode: NormMode,
) -> (Array2<f64>, Option<(Array1<f64>, Array1<f64>)>) {
    let (m, n) = g.dim();
    let mut out = Array2::zeros((m, n));
    let mut batch_stats = None;
    match mode {
        NormMode::Train => {
            let mut means = Array1::zeros(m);
            let mut vars = Array1::zeros(m);
            for i in 0..m {
                let row = g.row(i);
                let mu = row.sum() / n as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + norm.eps).sqrt();
                for j in 0..n {
                    out[[i, j]] = (g[[i, j]] - mu) * is * norm.scale[i] + norm.shift[i];
                }
                means[i] = mu;
                vars[i] = var;
            }
            batch_stats = Some((means, vars));
        }
        NormMode::Eval => {
            for i in 0..m {
                let is = 1.0 / (norm.running_var[i] + norm.eps).sqrt();
                for j in 0..n {
                    out[[i, j]] = (g[[i, j]] - norm.running_mean[i]) * is * norm.scale[i]
                        + norm.shift[i];
                }
            }
        }
    }
    (out, batch_stats)
}

/// selector^T G: the per-channel intermediate row the temporal combiner
/// consumes (and the rows the future-feature matrix stacks).
pub fn readout_intermediate(g: &Array2<f64>, selector: ArrayView1<f64>) -> Array1<f64> {
    let (l, n_p) = g.dim();
    debug_assert_eq!(selector.len(), l);
    let mut row = Array1::zeros(n_p);
    for t in 0..n_p {
        let mut s = 0.0;
        for f in 0..l {
            s += selector[f] * g[[f, t]];
        }
        row[t] = s;
    }
    row
}

/// Prediction from an intermediate row; `None` combiner picks the most
/// recent entry (canonical-last).
pub fn readout_predict(row: &Array1<f64>, combiner: Option<ArrayView1<f64>>) -> f64 {
    match combiner {
        Some(b) => row.iter().zip(b.iter()).map(|(r, w)| r * w).sum(),
        None => row[row.len() - 1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn small_params(n_in: usize, layers: usize, channels: usize, act: Activation) -> TcnParams {
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        let config = TcnConfig {
            layers,
            channels,
            kernel_size: 3,
            activation: act,
        };
        TcnParams::init(n_in, config, &mut rng).unwrap()
    }

    #[test]
    fn forward_is_causal_per_column() {
        let params = small_params(2, 3, 5, Activation::Relu);
        let x = Array2::from_shape_fn((2, 16), |(i, t)| ((i + 1) as f64 * t as f64 * 0.2).sin());
        let base = tcn_forward(&x, &params);
        let mut bumped = x.clone();
        bumped[[1, 9]] += 3.0;
        let out = tcn_forward(&bumped, &params);
        for t in 0..9 {
            for f in 0..5 {
                assert_eq!(base[[f, t]], out[[f, t]]);
            }
        }
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        let mut params = small_params(1, 2, 4, Activation::Relu);
        for b in &mut params.blocks {
            b.conv1.bias.fill(0.0);
            b.conv2.bias.fill(0.0);
            if let Some(s) = &mut b.skip {
                s.bias.fill(0.0);
            }
        }
        let x = Array2::zeros((1, 10));
        let g = tcn_forward(&x, &params);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_block_matches_naive_loop_oracle() {
        let params = small_params(2, 1, 3, Activation::Linear);
        let x = Array2::from_shape_fn((2, 12), |(i, t)| (i as f64 + 1.0) * (t as f64 * 0.3).cos());
        let g = tcn_forward(&x, &params);

        let block = &params.blocks[0];
        let k = params.config.kernel_size;
        let d = block.dilation;
        let naive_conv = |inp: &Array2<f64>, w: &ConvWeights, ks: usize, dil: usize| {
            let (c_in, t_len) = inp.dim();
            let c_out = w.weight.nrows();
            let mut out = Array2::zeros((c_out, t_len));
            for o in 0..c_out {
                for t in 0..t_len {
                    let mut s = w.bias[o];
                    for c in 0..c_in {
                        for i in 0..ks {
                            if t >= i * dil {
                                s += w.weight[[o, c * ks + i]] * inp[[c, t - i * dil]];
                            }
                        }
                    }
                    out[[o, t]] = s;
                }
            }
            out
        };
        let h = naive_conv(&x, &block.conv1, k, d);
        let h2 = naive_conv(&h, &block.conv2, k, d);
        let skip = naive_conv(&x, block.skip.as_ref().unwrap(), 1, 1);
        let expect = h2 + skip;
        for (a, b) in g.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn receptive_field_bounds_dependence() {
        let params = small_params(1, 2, 3, Activation::Relu);
        let rf = params.config.receptive_field();
        assert_eq!(rf, 1 + 2 * 2 * 3); // k=3, dilations 1+2
        let t_len = 40;
        let x = Array2::from_shape_fn((1, t_len), |(_, t)| (t as f64 * 0.17).sin());
        let base = tcn_forward(&x, &params);
        let mut bumped = x.clone();
        bumped[[0, 5]] += 1.0;
        let out = tcn_forward(&bumped, &params);
        // columns further than the receptive field past the bump are unchanged
        for t in 5 + rf..t_len {
            for f in 0..3 {
                assert_eq!(base[[f, t]], out[[f, t]]);
            }
        }
        assert!(params.config.receptive_field_warning(rf - 1).is_some());
        assert!(params.config.receptive_field_warning(rf).is_none());
    }

    #[test]
    fn feature_norm_identity_on_normalized_input() {
        let n = 200;
        let g = Array2::from_shape_fn((2, n), |(i, j)| {
            // rows with exact mean 0, var 1
            let v = if j % 2 == 0 { 1.0 } else { -1.0 };
            v * (1.0 + i as f64 * 0.0)
        });
        let norm = FeatureNorm::identity(2);
        let (out, _) = feature_norm(&g, &norm, NormMode::Train);
        for (a, b) in out.iter().zip(g.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn feature_norm_is_scale_invariant_in_train_mode() {
        // amplitudes well above the epsilon guard, where normalization is
        // genuinely scale free
        let g = Array2::from_shape_fn((3, 50), |(i, j)| ((i * 31 + j * 7) as f64 * 0.37).sin() * 30.0);
        let norm = FeatureNorm::identity(3);
        let (a, _) = feature_norm(&g, &norm, NormMode::Train);
        let (b, _) = feature_norm(&g.mapv(|v| v * 10.0), &norm, NormMode::Train);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn running_stats_converge_to_fixed_batch() {
        let g = Array2::from_shape_fn((2, 64), |(i, j)| ((i + j) as f64 * 0.21).cos() * 3.0 + 1.0);
        let mut norm = FeatureNorm::identity(2);
        let (train_out, stats) = feature_norm(&g, &norm, NormMode::Train);
        let (mean, var) = stats.unwrap();
        for _ in 0..100 {
            norm.update_running(&mean, &var);
        }
        let (eval_out, _) = feature_norm(&g, &norm, NormMode::Eval);
        for (a, b) in eval_out.iter().zip(train_out.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-3);
        }
    }

    #[test]
    fn zero_variance_feature_is_guarded() {
        let g = Array2::from_elem((1, 10), 4.0);
        let norm = FeatureNorm::identity(1);
        let (out, _) = feature_norm(&g, &norm, NormMode::Train);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn readout_canonical_and_zero_selector() {
        let g = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let row = readout_intermediate(&g, array![1.0, 0.5].view());
        assert_eq!(row, array![3.0, 4.5, 6.0]);
        assert_eq!(readout_predict(&row, None), 6.0);
        let zero = readout_intermediate(&g, array![0.0, 0.0].view());
        assert!(zero.iter().all(|v| *v == 0.0));
        assert_eq!(readout_predict(&zero, None), 0.0);
    }

    #[test]
    fn readout_matches_triple_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (l, n_p) = (6, 11);
        let g = Array2::from_shape_fn((l, n_p), |_| rng.gen_range(-1.0..1.0));
        let sel = Array1::from_shape_fn(l, |_| rng.gen_range(-1.0..1.0));
        let comb = Array1::from_shape_fn(n_p, |_| rng.gen_range(-1.0..1.0));
        let row = readout_intermediate(&g, sel.view());
        let pred = readout_predict(&row, Some(comb.view()));
        let mut expect = 0.0;
        for t in 0..n_p {
            let mut r = 0.0;
            for f in 0..l {
                r += sel[f] * g[[f, t]];
            }
            assert_abs_diff_eq!(row[t], r, epsilon = 1e-12);
            expect += r * comb[t];
        }
        assert_abs_diff_eq!(pred, expect, epsilon = 1e-12);
    }
}

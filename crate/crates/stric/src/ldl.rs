//! Linear Dynamic Layers: causal 1-D filter banks for trend, seasonality
//! and stationary linear structure, composed as a residual cascade.
//!
//! Each block convolves every channel with a bank of truncated causal
//! impulse responses, recombines the filtered signals with a per-channel
//! feature selector, and subtracts its component estimate from the input
//! before handing the residual to the next block:
//!
//! ```text
//! X_0 = input window,   X_{k+1} = X_k - component_k,   k = trend, seas, lin
//! ```
//!
//! Trend filters are causal Hodrick-Prescott smoothers (endpoint row of the
//! two-sided smoother, reversed into convolution order) with smoothing
//! weights drawn log-uniformly; seasonal filters are unit-norm cosines with
//! frequencies on the unit circle; linear filters are damped cosines with
//! poles strictly inside it.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StricError};
use crate::linalg;

/// Which structural component a bank extracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Trend,
    Seasonal,
    Linear,
}

/// A bank of truncated causal impulse responses (one kernel per row) plus
/// an immutable snapshot of the kernels at initialization, used by the
/// proximity regularizer during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterBank {
    pub kernels: Array2<f64>,
    init_snapshot: Array2<f64>,
    pub block_kind: BlockKind,
}

impl FilterBank {
    pub fn new(kernels: Array2<f64>, block_kind: BlockKind) -> Self {
        let init_snapshot = kernels.clone();
        FilterBank {
            kernels,
            init_snapshot,
            block_kind,
        }
    }

    pub fn n_filters(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernels.ncols()
    }

    pub fn init_snapshot(&self) -> &Array2<f64> {
        &self.init_snapshot
    }
}

/// How a block turns its component estimate into a one-step prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Combiner {
    /// Take the most recent column of the component estimate.
    CanonicalLast,
    /// Learnable per-channel time-combination weights, one row per channel.
    Dense(Array2<f64>),
}

/// Per-channel recombination heads of one block: a feature selector row per
/// channel and the temporal combiner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockHeads {
    /// n_channels x n_filters.
    pub selector: Array2<f64>,
    pub combiner: Combiner,
}

impl BlockHeads {
    pub fn zeros(n_channels: usize, n_filters: usize) -> Self {
        BlockHeads {
            selector: Array2::zeros((n_channels, n_filters)),
            combiner: Combiner::CanonicalLast,
        }
    }
}

/// Output of one block on one window.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// Component estimate, n_channels x n_p.
    pub component: Array2<f64>,
    /// One-step prediction per channel.
    pub prediction: Array1<f64>,
    /// Per-channel filtered feature stacks, each n_filters x n_p.
    pub features: Vec<Array2<f64>>,
}

/// The three-block linear cascade.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdlStack {
    pub banks: Vec<FilterBank>,
    pub heads: Vec<BlockHeads>,
}

/// Per-window decomposition into structural components.
///
/// By construction `input = trend + seasonal + linear + residual` exactly;
/// `residual` is what the non-linear stage receives.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// Component estimates per block, each n_channels x n_p.
    pub components: Vec<Array2<f64>>,
    /// One-step predictions per block, each length n_channels.
    pub predictions: Vec<Array1<f64>>,
    /// Residual left after the last linear block, n_channels x n_p.
    pub residual: Array2<f64>,
}

impl Decomposition {
    /// Sum of the per-block one-step predictions.
    pub fn linear_prediction(&self) -> Array1<f64> {
        let n = self.residual.nrows();
        let mut p = Array1::zeros(n);
        for pred in &self.predictions {
            p += pred;
        }
        p
    }
}

/// Causal convolution with zero past-padding: y(t) = sum_i k(i) x(t-i).
///
/// Output has the same length as the input and y(t) depends only on
/// x(0..=t).
pub fn causal_conv(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (i, &k) in kernel.iter().enumerate() {
        if k == 0.0 || i >= x.len() {
            continue;
        }
        for t in i..x.len() {
            y[t] += k * x[t - i];
        }
    }
    y
}

/// Causal Hodrick-Prescott kernel for a given smoothing weight.
///
/// Builds the two-sided smoother S = (I + lambda_hp D^T D)^{-1} on a window
/// of length `len` (D the second-difference operator), takes its last row
/// (the endpoint estimate uses only past samples) and reverses it into
/// convolution order. The smoother maps constants to constants, so the
/// kernel has unit DC gain.
pub fn hp_causal_kernel(lambda_hp: f64, len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(StricError::config("HP kernel length must be >= 2"));
    }
    let n = len;
    let mut a = Array2::<f64>::eye(n);
    if n >= 3 {
        // A = I + lambda * D^T D with D the (n-2) x n second-difference matrix
        for r in 0..n - 2 {
            let idx = [r, r + 1, r + 2];
            let coef = [1.0, -2.0, 1.0];
            for (i, &ri) in idx.iter().enumerate() {
                for (j, &rj) in idx.iter().enumerate() {
                    a[[ri, rj]] += lambda_hp * coef[i] * coef[j];
                }
            }
        }
    }
    let mut e_last = Array1::<f64>::zeros(n);
    e_last[n - 1] = 1.0;
    let factor = linalg::cholesky(&a)?;
    let mut row = linalg::solve_lower_transpose(&factor, &linalg::solve_lower(&factor, &e_last));
    // iterative refinement with compensated residuals: lambda_hp up to 1e9
    // makes the system ill-conditioned enough that a plain f64 residual is
    // pure rounding noise
    for _ in 0..3 {
        let mut resid = Array1::<f64>::zeros(n);
        for i in 0..n {
            let prod = linalg::dot_compensated(a.row(i), row.view());
            resid[i] = e_last[i] - prod;
        }
        let corr = linalg::solve_lower_transpose(&factor, &linalg::solve_lower(&factor, &resid));
        row += &corr;
    }
    // The smoother preserves constants, so the row sums to one exactly in
    // real arithmetic. Merely storing 1 + 6*lambda_hp at lambda_hp ~ 1e9
    // already breaks that identity at ~1e-6, so enforce it after the solve.
    let sum: f64 = row.sum();
    row.mapv_inplace(|v| v / sum);
    Ok((0..n).map(|i| row[n - 1 - i]).collect())
}

/// Trend bank: `l0` causal HP kernels with smoothing weights drawn
/// log-uniformly from [1e3, 1e9].
pub fn init_trend_bank(l0: usize, n0: usize, rng_seed: u64) -> Result<FilterBank> {
    if l0 == 0 || n0 < 2 {
        return Err(StricError::config("trend bank needs l0 >= 1 and N0 >= 2"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let (lo, hi) = (1e3f64.ln(), 1e9f64.ln());
    let mut kernels = Array2::zeros((l0, n0));
    for f in 0..l0 {
        let lambda_hp = (lo + rng.gen::<f64>() * (hi - lo)).exp();
        let k = hp_causal_kernel(lambda_hp, n0)?;
        for (i, v) in k.iter().enumerate() {
            kernels[[f, i]] = *v;
        }
    }
    Ok(FilterBank::new(kernels, BlockKind::Trend))
}

/// Seasonal bank: unit-norm cosine kernels cos(w t) with frequencies drawn
/// uniformly on the open interval (0, pi) (poles on the unit circle).
pub fn init_seasonal_bank(l1: usize, n1: usize, rng_seed: u64) -> Result<FilterBank> {
    if l1 == 0 || n1 == 0 {
        return Err(StricError::config("seasonal bank needs l1 >= 1 and N1 >= 1"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut kernels = Array2::zeros((l1, n1));
    for f in 0..l1 {
        let omega = sample_open_unit(&mut rng) * std::f64::consts::PI;
        for t in 0..n1 {
            kernels[[f, t]] = (omega * t as f64).cos();
        }
        normalize_row(&mut kernels, f);
    }
    Ok(FilterBank::new(kernels, BlockKind::Seasonal))
}

/// Default cap on the pole radius of the linear bank.
pub const DEFAULT_MAX_POLE_RADIUS: f64 = 0.99;

/// Linear bank: unit-norm damped cosines r^t cos(theta t) with pole radius
/// uniform on (0, max_radius] and angle uniform on (0, pi).
pub fn init_linear_bank(
    l2: usize,
    n2: usize,
    max_radius: f64,
    rng_seed: u64,
) -> Result<FilterBank> {
    if l2 == 0 || n2 == 0 {
        return Err(StricError::config("linear bank needs l2 >= 1 and N2 >= 1"));
    }
    if !(0.0 < max_radius && max_radius < 1.0) {
        return Err(StricError::config("max pole radius must be in (0, 1)"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut kernels = Array2::zeros((l2, n2));
    for f in 0..l2 {
        let radius = sample_open_unit(&mut rng) * max_radius;
        let theta = sample_open_unit(&mut rng) * std::f64::consts::PI;
        for t in 0..n2 {
            kernels[[f, t]] = damped_cosine(radius, theta, t);
        }
        normalize_row(&mut kernels, f);
    }
    Ok(FilterBank::new(kernels, BlockKind::Linear))
}

/// Impulse response value r^t cos(theta t); r = 0 yields the unit impulse.
pub fn damped_cosine(radius: f64, theta: f64, t: usize) -> f64 {
    if t == 0 {
        return 1.0;
    }
    radius.powi(t as i32) * (theta * t as f64).cos()
}

/// Geometric-series bound on the impulse-response energy dropped by
/// truncating a pole of radius `r` at `len` taps: sum_{t>=len} r^{2t}.
pub fn truncation_tail_energy(r: f64, len: usize) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    r.powi(2 * len as i32) / (1.0 - r * r)
}

/// Smallest kernel length keeping [`truncation_tail_energy`] under `budget`.
pub fn kernel_len_for_tail(r: f64, budget: f64) -> usize {
    if r <= 0.0 {
        return 1;
    }
    let len = ((budget * (1.0 - r * r)).ln() / (2.0 * r.ln())).ceil();
    len.max(1.0) as usize
}

fn sample_open_unit(rng: &mut ChaCha20Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

fn normalize_row(kernels: &mut Array2<f64>, row: usize) {
    let norm = kernels.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        kernels.row_mut(row).mapv_inplace(|v| v / norm);
    }
}

/// One block forward pass: filter each channel with the bank, recombine
/// with the selector and form the one-step prediction.
pub fn block_forward(
    x: &Array2<f64>,
    bank: &FilterBank,
    heads: &BlockHeads,
) -> Result<BlockOutput> {
    let (n, n_p) = x.dim();
    let l = bank.n_filters();
    if heads.selector.dim() != (n, l) {
        return Err(StricError::data(format!(
            "selector shape {:?} does not match {} channels x {} filters",
            heads.selector.dim(),
            n,
            l
        )));
    }
    if let Combiner::Dense(b) = &heads.combiner {
        if b.dim() != (n, n_p) {
            return Err(StricError::data(format!(
                "combiner shape {:?} does not match {} channels x window {}",
                b.dim(),
                n,
                n_p
            )));
        }
    }
    let mut component = Array2::zeros((n, n_p));
    let mut prediction = Array1::zeros(n);
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        let xi: Vec<f64> = x.row(i).to_vec();
        let mut g = Array2::zeros((l, n_p));
        for f in 0..l {
            let kf: Vec<f64> = bank.kernels.row(f).to_vec();
            let y = causal_conv(&xi, &kf);
            for (t, v) in y.iter().enumerate() {
                g[[f, t]] = *v;
            }
        }
        // component_i = selector_i^T G_i
        for t in 0..n_p {
            let mut s = 0.0;
            for f in 0..l {
                s += heads.selector[[i, f]] * g[[f, t]];
            }
            component[[i, t]] = s;
        }
        prediction[i] = match &heads.combiner {
            Combiner::CanonicalLast => component[[i, n_p - 1]],
            Combiner::Dense(b) => {
                let mut s = 0.0;
                for t in 0..n_p {
                    s += component[[i, t]] * b[[i, t]];
                }
                s
            }
        };
        features.push(g);
    }
    Ok(BlockOutput {
        component,
        prediction,
        features,
    })
}

/// Run the trend / seasonal / linear cascade with residual subtraction.
pub fn cascade_forward(window: &Array2<f64>, stack: &LdlStack) -> Result<Decomposition> {
    let mut current = window.clone();
    let mut components = Vec::with_capacity(stack.banks.len());
    let mut predictions = Vec::with_capacity(stack.banks.len());
    for (bank, heads) in stack.banks.iter().zip(&stack.heads) {
        let out = block_forward(&current, bank, heads)?;
        current -= &out.component;
        components.push(out.component);
        predictions.push(out.prediction);
    }
    Ok(Decomposition {
        components,
        predictions,
        residual: current,
    })
}

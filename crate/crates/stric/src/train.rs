//! End-to-end training with the fading-memory regularized objective.
//!
//! The predictor is linear in the per-channel time combiner `b`, so the
//! per-window loss is the marginal-likelihood upper bound
//!
//! ```text
//! ||y_f - y_hat||^2 / eta^2  +  b^T Lambda^{-1} b  +  log det(F Lambda F^T + eta^2 I)
//! ```
//!
//! with Lambda the diagonal of exponentially decaying prior variances
//! (largest at the most recent lag) and F the stack of intermediate readout
//! rows over the future horizon. Auxiliary regularizers: L1 on every
//! feature selector and squared distance of the linear-bank kernels from
//! their initialization snapshot. Gradients for every learnable tensor,
//! including the fading parameters through both the quadratic penalty and
//! the log-determinant, come from the reverse-mode tape in [`autodiff`].

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::autodiff::{logdet_gram_forward, Tape, Var};
use crate::error::{Result, StricError};
use crate::ldl::Combiner;
use crate::linalg;
use crate::model::{ModelConfig, ParamRef, StricModel};
use crate::series::{TimeSeries, WindowSpec};
use crate::tcn::{feature_norm, readout_intermediate, tcn_forward, Activation, NormMode, NORM_EPS};

/// Optimization hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs (validation RMSE); usize::MAX
    /// effectively disables early stopping.
    pub patience: usize,
    pub seed: u64,
    /// L1 weight on all feature selectors.
    pub l1_selector_weight: f64,
    /// L2 weight on the distance of linear-bank kernels from initialization.
    pub kernel_proximity_weight: f64,
    /// Learn the noise variance instead of fixing it to the warm-start value.
    pub learn_eta2: bool,
    /// Abort when the batch loss exceeds this.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 100,
            max_epochs: 300,
            patience: 20,
            seed: 0,
            l1_selector_weight: 1e-4,
            kernel_proximity_weight: 1e-3,
            learn_eta2: false,
            divergence_threshold: 1e8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.l1_selector_weight < 0.0
            || self.kernel_proximity_weight < 0.0
            || self.divergence_threshold <= 0.0
        {
            return Err(StricError::config("invalid training configuration"));
        }
        Ok(())
    }
}

/// One training sample: `n_p + n_f` consecutive columns of the series.
/// Sub-window r (r = 0..n_f) is columns [r, r + n_p); its target is column
/// n_p + r.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub block: Array2<f64>,
}

/// Item start indices whose targets lie entirely inside
/// `[segment_begin, segment_end)`. Past context may reach before the
/// segment (it is observed data), targets never do.
pub fn segment_item_starts(
    t_total: usize,
    spec: &WindowSpec,
    segment_begin: usize,
    segment_end: usize,
) -> Vec<usize> {
    let mut starts = Vec::new();
    let lo = segment_begin.saturating_sub(spec.n_p);
    for i in lo..t_total {
        let first_target = i + spec.n_p;
        let last_target = i + spec.n_p + spec.n_f - 1;
        if last_target >= t_total || last_target >= segment_end {
            break;
        }
        if first_target >= segment_begin {
            starts.push(i);
        }
    }
    starts
}

/// Materialize training items at the given start columns.
pub fn collect_items(ts: &TimeSeries, spec: &WindowSpec, starts: &[usize]) -> Vec<TrainingItem> {
    let width = spec.n_p + spec.n_f;
    starts
        .iter()
        .map(|&i| TrainingItem {
            block: ts.values.slice(s![.., i..i + width]).to_owned(),
        })
        .collect()
}

/// The three terms of the fading-memory loss on one window and channel.
#[derive(Debug, Clone, Copy)]
pub struct FadingLossParts {
    pub data: f64,
    pub penalty: f64,
    pub logdet: f64,
}

impl FadingLossParts {
    pub fn total(&self) -> f64 {
        self.data + self.penalty + self.logdet
    }
}

/// Fading-variance diagonal entry for window position m of n: the prior
/// variance kappa * lambda^(n-1-m), largest at the most recent index.
pub fn fading_variance(lambda: f64, kappa: f64, position: usize, n: usize) -> f64 {
    (kappa.ln() + (n - 1 - position) as f64 * lambda.ln()).exp()
}

/// The regularized per-window loss. `lambda` may be 1.0 (a test hook just
/// outside the open training interval), where the penalty reduces to a
/// plain ridge ||b||^2 / kappa.
pub fn fading_loss(
    y_f: &Array1<f64>,
    y_hat: &Array1<f64>,
    f_rows: &Array2<f64>,
    b: &Array1<f64>,
    lambda: f64,
    kappa: f64,
    eta2: f64,
) -> Result<FadingLossParts> {
    if !(lambda > 0.0 && lambda <= 1.0) || kappa <= 0.0 || eta2 <= 0.0 {
        return Err(StricError::config(
            "fading loss needs lambda in (0,1], kappa > 0, eta2 > 0",
        ));
    }
    let n_p = b.len();
    if f_rows.ncols() != n_p || f_rows.nrows() != y_f.len() || y_hat.len() != y_f.len() {
        return Err(StricError::data("fading loss shape mismatch"));
    }
    let data = y_f
        .iter()
        .zip(y_hat.iter())
        .map(|(y, p)| (y - p) * (y - p))
        .sum::<f64>()
        / eta2;
    // computed in log space; exact-zero coefficients contribute nothing for
    // any finite variance, so they are skipped before the division
    let log_lam = lambda.ln();
    let log_kap = kappa.ln();
    let mut penalty = 0.0;
    for (m, &bm) in b.iter().enumerate() {
        if bm != 0.0 {
            penalty += (2.0 * bm.abs().ln() - log_kap - (n_p - 1 - m) as f64 * log_lam).exp();
        }
    }
    let mut diag = Array2::zeros((n_p, 1));
    for m in 0..n_p {
        diag[[m, 0]] = fading_variance(lambda, kappa, m, n_p);
    }
    let (logdet, _) = logdet_gram_forward(f_rows, &diag, eta2)?;
    Ok(FadingLossParts {
        data,
        penalty,
        logdet,
    })
}

/// log det of the prior covariance itself, `n_p log kappa + log lambda *
/// n_p (n_p - 1) / 2`. This is the normalizer a naive joint MAP objective
/// would add; it decreases without bound as lambda -> 0, which is exactly
/// the degeneracy the marginal-likelihood bound avoids.
pub fn map_prior_logdet(lambda: f64, kappa: f64, n_p: usize) -> f64 {
    n_p as f64 * kappa.ln() + lambda.ln() * (n_p * (n_p - 1)) as f64 / 2.0
}

/// Per-channel future features of one item: the stacked intermediate rows,
/// the linear-cascade prediction offsets and the targets.
#[derive(Debug, Clone)]
pub struct FutureFeatures {
    /// Per channel: n_f x n_p.
    pub rows: Vec<Array2<f64>>,
    /// Per channel: prediction contribution of the linear blocks, length n_f.
    pub linear_offsets: Vec<Array1<f64>>,
    /// Per channel: observed future values, length n_f.
    pub targets: Vec<Array1<f64>>,
}

impl FutureFeatures {
    /// Reconstruct the per-step predictions F b + offsets for one channel.
    pub fn predictions(&self, model: &StricModel, channel: usize) -> Array1<f64> {
        let b = model.tcn_combiner.row(channel);
        let f = &self.rows[channel];
        let mut out = self.linear_offsets[channel].clone();
        for r in 0..f.nrows() {
            let mut sum = 0.0;
            for m in 0..f.ncols() {
                sum += f[[r, m]] * b[m];
            }
            out[r] += sum;
        }
        out
    }
}

/// Run the model over the n_f shifted sub-windows of one item and stack the
/// per-channel intermediate readout rows into the future feature matrices.
///
/// In train mode the normalization statistics are computed jointly over the
/// item's sub-windows; in eval mode the stored running statistics apply.
pub fn assemble_future_features(
    model: &StricModel,
    item: &TrainingItem,
    mode: NormMode,
) -> Result<FutureFeatures> {
    let spec = model.config.window;
    let n = model.n_channels();
    if item.block.dim() != (n, spec.n_p + spec.n_f) {
        return Err(StricError::data(format!(
            "item block shape {:?} does not match model ({}, {})",
            item.block.dim(),
            n,
            spec.n_p + spec.n_f
        )));
    }
    let mut pre_features = Vec::with_capacity(spec.n_f);
    let mut offsets = vec![Array1::zeros(spec.n_f); n];
    for r in 0..spec.n_f {
        let window = item.block.slice(s![.., r..r + spec.n_p]).to_owned();
        let decomp = crate::ldl::cascade_forward(&window, &model.ldl)?;
        let linear_pred = decomp.linear_prediction();
        for ch in 0..n {
            offsets[ch][r] = linear_pred[ch];
        }
        pre_features.push(tcn_forward(&decomp.residual, &model.tcn));
    }
    let normalized: Vec<Array2<f64>> = match mode {
        NormMode::Eval => pre_features
            .iter()
            .map(|g| feature_norm(g, &model.norm, NormMode::Eval).0)
            .collect(),
        NormMode::Train => {
            let l3 = model.tcn.n_features();
            let total: usize = pre_features.iter().map(|g| g.ncols()).sum();
            let mut big = Array2::zeros((l3, total));
            let mut at = 0;
            for g in &pre_features {
                big.slice_mut(s![.., at..at + g.ncols()]).assign(g);
                at += g.ncols();
            }
            let (bn, _) = feature_norm(&big, &model.norm, NormMode::Train);
            (0..spec.n_f)
                .map(|r| bn.slice(s![.., r * spec.n_p..(r + 1) * spec.n_p]).to_owned())
                .collect()
        }
    };
    let mut rows = vec![Array2::zeros((spec.n_f, spec.n_p)); n];
    for (r, g) in normalized.iter().enumerate() {
        for ch in 0..n {
            let row = readout_intermediate(g, model.tcn_selector.row(ch));
            rows[ch].row_mut(r).assign(&row);
        }
    }
    let targets = (0..n)
        .map(|ch| {
            Array1::from_iter(
                (0..spec.n_f).map(|r| item.block[[ch, spec.n_p + r]]),
            )
        })
        .collect();
    Ok(FutureFeatures {
        rows,
        linear_offsets: offsets,
        targets,
    })
}

// ---------------------------------------------------------------------------
// Tape construction
// ---------------------------------------------------------------------------

struct TapeBlockVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    skip: Option<(Var, Var)>,
    dilation: usize,
}

struct ModelVars {
    named: Vec<(String, Var)>,
    kernels: Vec<Var>,
    kernel_inits: Vec<Var>,
    selectors: Vec<Var>,
    ldl_combiners: Vec<Option<Var>>,
    blocks: Vec<TapeBlockVars>,
    tcn_selector: Var,
    tcn_combiner: Var,
    norm_scale: Var,
    norm_shift: Var,
    lambda: Option<Var>,
    kappa: Option<Var>,
    eta2: Option<Var>,
}

fn col_vec(a: &Array1<f64>) -> Array2<f64> {
    let n = a.len();
    Array2::from_shape_fn((n, 1), |(i, _)| a[i])
}

/// Register every learnable tensor as a tape leaf, in the exact order of
/// `StricModel::visit_params_mut` (checked by `gradients`).
fn register_model(tape: &mut Tape, model: &StricModel) -> ModelVars {
    let mut named = Vec::new();
    let block_names = ["trend", "seasonal", "linear"];
    let mut kernels = Vec::new();
    let mut kernel_inits = Vec::new();
    let mut selectors = Vec::new();
    let mut ldl_combiners = Vec::new();
    for (k, bank) in model.ldl.banks.iter().enumerate() {
        let v = tape.leaf(bank.kernels.clone());
        named.push((format!("kernels.{}", block_names[k]), v));
        kernels.push(v);
        kernel_inits.push(tape.leaf(bank.init_snapshot().clone()));
    }
    for (k, heads) in model.ldl.heads.iter().enumerate() {
        let v = tape.leaf(heads.selector.clone());
        named.push((format!("selector.{}", block_names[k]), v));
        selectors.push(v);
        ldl_combiners.push(match &heads.combiner {
            Combiner::Dense(b) => {
                let v = tape.leaf(b.clone());
                named.push((format!("combiner.{}", block_names[k]), v));
                Some(v)
            }
            Combiner::CanonicalLast => None,
        });
    }
    let mut blocks = Vec::new();
    for (i, block) in model.tcn.blocks.iter().enumerate() {
        let w1 = tape.leaf(block.conv1.weight.clone());
        named.push((format!("tcn.block{i}.conv1.weight"), w1));
        let b1 = tape.leaf(col_vec(&block.conv1.bias));
        named.push((format!("tcn.block{i}.conv1.bias"), b1));
        let w2 = tape.leaf(block.conv2.weight.clone());
        named.push((format!("tcn.block{i}.conv2.weight"), w2));
        let b2 = tape.leaf(col_vec(&block.conv2.bias));
        named.push((format!("tcn.block{i}.conv2.bias"), b2));
        let skip = block.skip.as_ref().map(|sw| {
            let w = tape.leaf(sw.weight.clone());
            named.push((format!("tcn.block{i}.skip.weight"), w));
            let b = tape.leaf(col_vec(&sw.bias));
            named.push((format!("tcn.block{i}.skip.bias"), b));
            (w, b)
        });
        blocks.push(TapeBlockVars {
            w1,
            b1,
            w2,
            b2,
            skip,
            dilation: block.dilation,
        });
    }
    let tcn_selector = tape.leaf(model.tcn_selector.clone());
    named.push(("selector.tcn".to_string(), tcn_selector));
    let tcn_combiner = tape.leaf(model.tcn_combiner.clone());
    named.push(("combiner.tcn".to_string(), tcn_combiner));
    let norm_scale = tape.leaf(col_vec(&model.norm.scale));
    named.push(("norm.scale".to_string(), norm_scale));
    let norm_shift = tape.leaf(col_vec(&model.norm.shift));
    named.push(("norm.shift".to_string(), norm_shift));

    let (mut lambda, mut kappa, mut eta2) = (None, None, None);
    if model.config.use_fading {
        let rho = tape.scalar(model.fading.rho);
        named.push(("fading.rho".to_string(), rho));
        lambda = Some(tape.sigmoid(rho));
        let log_kappa = tape.scalar(model.fading.log_kappa);
        named.push(("fading.log_kappa".to_string(), log_kappa));
        kappa = Some(tape.exp(log_kappa));
        if model.fading.learn_eta2 {
            let log_eta2 = tape.scalar(model.fading.log_eta2);
            named.push(("fading.log_eta2".to_string(), log_eta2));
            eta2 = Some(tape.exp(log_eta2));
        } else {
            eta2 = Some(tape.scalar(model.fading.eta2()));
        }
    }
    ModelVars {
        named,
        kernels,
        kernel_inits,
        selectors,
        ldl_combiners,
        blocks,
        tcn_selector,
        tcn_combiner,
        norm_scale,
        norm_shift,
        lambda,
        kappa,
        eta2,
    }
}

fn tape_relu(tape: &mut Tape, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::Relu => tape.relu(x),
        Activation::Linear => x,
    }
}

/// TCN forward on the tape; mirrors `tcn::tcn_forward`.
fn tape_tcn(tape: &mut Tape, x3: Var, vars: &ModelVars, model: &StricModel) -> Var {
    let k = model.config.tcn.kernel_size;
    let act = model.config.tcn.activation;
    let mut x = x3;
    for block in &vars.blocks {
        let c1 = tape.dilated_causal_conv(x, block.w1, k, block.dilation);
        let c1b = tape.add_col(c1, block.b1);
        let h = tape_relu(tape, c1b, act);
        let c2 = tape.dilated_causal_conv(h, block.w2, k, block.dilation);
        let c2b = tape.add_col(c2, block.b2);
        let h2 = tape_relu(tape, c2b, act);
        let skip = match &block.skip {
            Some((w, b)) => {
                let sc = tape.dilated_causal_conv(x, *w, 1, 1);
                tape.add_col(sc, *b)
            }
            None => x,
        };
        let sum = tape.add(h2, skip);
        x = tape_relu(tape, sum, act);
    }
    x
}

struct BatchForward {
    loss: Var,
    data_term: Var,
    penalty_term: Option<Var>,
    logdet_term: Option<Var>,
    l1_term: Var,
    proximity_term: Var,
    batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

/// Build the full objective for a batch of items on the tape.
fn batch_objective(
    tape: &mut Tape,
    model: &StricModel,
    vars: &ModelVars,
    items: &[TrainingItem],
    config: &TrainConfig,
    mode: NormMode,
) -> Result<BatchForward> {
    let spec = model.config.window;
    let n = model.n_channels();
    let (n_p, n_f) = (spec.n_p, spec.n_f);

    // linear cascade + TCN for every (item, future step)
    let mut pre_features = Vec::with_capacity(items.len() * n_f);
    let mut linear_preds: Vec<Vec<Vec<Var>>> = Vec::with_capacity(items.len());
    for item in items {
        let mut per_item = vec![Vec::with_capacity(n_f); n];
        for r in 0..n_f {
            let window = item.block.slice(s![.., r..r + n_p]).to_owned();
            let mut residual_rows = Vec::with_capacity(n);
            for ch in 0..n {
                let mut x = tape.leaf(window.slice(s![ch..ch + 1, ..]).to_owned());
                let mut pred_sum: Option<Var> = None;
                for (k, _) in model.ldl.banks.iter().enumerate() {
                    let feats =
                        tape.dilated_causal_conv(x, vars.kernels[k], model.config.kernel_len, 1);
                    let sel_row = tape.slice_rows(vars.selectors[k], ch, 1);
                    let comp = tape.matmul(sel_row, feats);
                    let pred = match vars.ldl_combiners[k] {
                        Some(bvar) => {
                            let b_row = tape.slice_rows(bvar, ch, 1);
                            let b_col = tape.transpose(b_row);
                            tape.matmul(comp, b_col)
                        }
                        None => tape.slice_cols(comp, n_p - 1, 1),
                    };
                    pred_sum = Some(match pred_sum {
                        Some(p) => tape.add(p, pred),
                        None => pred,
                    });
                    x = tape.sub(x, comp);
                }
                let zero = tape.scalar(0.0);
                per_item[ch].push(pred_sum.unwrap_or(zero));
                residual_rows.push(x);
            }
            let x3 = if n == 1 {
                residual_rows[0]
            } else {
                tape.stack_rows(&residual_rows)
            };
            pre_features.push(tape_tcn(tape, x3, vars, model));
        }
        linear_preds.push(per_item);
    }

    // feature normalization across the whole batch and time axis
    let mut batch_stats = None;
    let normalized: Vec<Var> = match mode {
        NormMode::Train => {
            let big = tape.concat_cols(&pre_features);
            let (bn, means, vars_stat) = tape.batch_norm_rows(big, NORM_EPS);
            batch_stats = Some((means, vars_stat));
            let scaled = tape.mul_col(bn, vars.norm_scale);
            let shifted = tape.add_col(scaled, vars.norm_shift);
            (0..pre_features.len())
                .map(|idx| tape.slice_cols(shifted, idx * n_p, n_p))
                .collect()
        }
        NormMode::Eval => {
            let neg_mean = col_vec(&model.norm.running_mean.mapv(|m| -m));
            let invstd = col_vec(
                &model
                    .norm
                    .running_var
                    .mapv(|v| 1.0 / (v + model.norm.eps).sqrt()),
            );
            let neg_mean = tape.leaf(neg_mean);
            let invstd = tape.leaf(invstd);
            pre_features
                .iter()
                .map(|&g| {
                    let centered = tape.add_col(g, neg_mean);
                    let normed = tape.mul_col(centered, invstd);
                    let scaled = tape.mul_col(normed, vars.norm_scale);
                    tape.add_col(scaled, vars.norm_shift)
                })
                .collect()
        }
    };

    // per-channel fading (or plain squared-error) losses
    let fading = model.config.use_fading;
    let diag = if fading {
        Some(tape.fading_diag(vars.lambda.unwrap(), vars.kappa.unwrap(), n_p))
    } else {
        None
    };
    let inv_eta2 = vars.eta2.map(|e| tape.recip(e));

    let mut per_pair_losses = Vec::with_capacity(items.len() * n);
    let mut data_terms = Vec::with_capacity(items.len() * n);
    let mut penalty_terms = Vec::new();
    let mut logdet_terms = Vec::new();
    for (w, item) in items.iter().enumerate() {
        for ch in 0..n {
            let inter_rows: Vec<Var> = (0..n_f)
                .map(|r| {
                    let g = normalized[w * n_f + r];
                    let sel = tape.slice_rows(vars.tcn_selector, ch, 1);
                    tape.matmul(sel, g)
                })
                .collect();
            let f_mat = if n_f == 1 {
                inter_rows[0]
            } else {
                tape.stack_rows(&inter_rows)
            };
            let b_row = tape.slice_rows(vars.tcn_combiner, ch, 1);
            let b_col = tape.transpose(b_row);
            let tcn_pred = tape.matmul(f_mat, b_col);
            let lin_pred = if linear_preds[w][ch].len() == 1 {
                linear_preds[w][ch][0]
            } else {
                tape.stack_rows(&linear_preds[w][ch].clone())
            };
            let y_hat = tape.add(tcn_pred, lin_pred);
            let targets =
                Array2::from_shape_fn((n_f, 1), |(r, _)| item.block[[ch, n_p + r]]);
            let y = tape.leaf(targets);
            let resid = tape.sub(y, y_hat);
            let sq = tape.mul(resid, resid);
            let data_sum = tape.sum(sq);
            if fading {
                let data_term = tape.mul(data_sum, inv_eta2.unwrap());
                let b_sq = tape.mul(b_col, b_col);
                let dinv = tape.recip(diag.unwrap());
                let weighted = tape.mul(b_sq, dinv);
                let penalty = tape.sum(weighted);
                let logdet = tape.logdet_gram(f_mat, diag.unwrap(), vars.eta2.unwrap())?;
                let dp = tape.add(data_term, penalty);
                per_pair_losses.push(tape.add(dp, logdet));
                data_terms.push(data_term);
                penalty_terms.push(penalty);
                logdet_terms.push(logdet);
            } else {
                per_pair_losses.push(data_sum);
                data_terms.push(data_sum);
            }
        }
    }

    let sum_over = |tape: &mut Tape, terms: &[Var]| -> Var {
        let cat = tape.concat_cols(terms);
        let s = tape.sum(cat);
        tape.scale(s, 1.0 / items.len() as f64)
    };
    let mean_loss = sum_over(tape, &per_pair_losses);
    let data_term = sum_over(tape, &data_terms);
    let penalty_term = fading.then(|| sum_over(tape, &penalty_terms));
    let logdet_term = fading.then(|| sum_over(tape, &logdet_terms));

    // L1 on every selector
    let mut l1_parts = Vec::new();
    for &sel in vars.selectors.iter().chain(std::iter::once(&vars.tcn_selector)) {
        let a = tape.abs(sel);
        l1_parts.push(tape.sum(a));
    }
    let l1_raw = sum_single(tape, &l1_parts);
    let l1_term = tape.scale(l1_raw, config.l1_selector_weight);

    // kernel proximity to initialization
    let mut prox_parts = Vec::new();
    for (k, &kv) in vars.kernels.iter().enumerate() {
        let d = tape.sub(kv, vars.kernel_inits[k]);
        let sq = tape.mul(d, d);
        prox_parts.push(tape.sum(sq));
    }
    let prox_raw = sum_single(tape, &prox_parts);
    let proximity_term = tape.scale(prox_raw, config.kernel_proximity_weight);

    let with_l1 = tape.add(mean_loss, l1_term);
    let loss = tape.add(with_l1, proximity_term);
    Ok(BatchForward {
        loss,
        data_term,
        penalty_term,
        logdet_term,
        l1_term,
        proximity_term,
        batch_stats,
    })
}

fn sum_single(tape: &mut Tape, parts: &[Var]) -> Var {
    if parts.is_empty() {
        return tape.scalar(0.0);
    }
    let cat = tape.concat_cols(parts);
    tape.sum(cat)
}

fn check_finite(forward: &BatchForward, tape: &Tape) -> Result<()> {
    let probes: [(&str, Option<Var>); 5] = [
        ("data", Some(forward.data_term)),
        ("fading penalty", forward.penalty_term),
        ("log det", forward.logdet_term),
        ("selector L1", Some(forward.l1_term)),
        ("kernel proximity", Some(forward.proximity_term)),
    ];
    for (name, var) in probes {
        if let Some(v) = var {
            let value = tape.scalar_value(v);
            if !value.is_finite() {
                return Err(StricError::numeric(format!(
                    "objective term '{name}' is non-finite ({value})"
                )));
            }
        }
    }
    Ok(())
}

/// Objective value on a batch (training normalization semantics).
pub fn full_objective(
    model: &StricModel,
    items: &[TrainingItem],
    config: &TrainConfig,
) -> Result<f64> {
    full_objective_with_mode(model, items, config, NormMode::Train)
}

/// Objective value with explicit normalization mode (eval mode makes the
/// objective window-separable, which definitional tests rely on).
pub fn full_objective_with_mode(
    model: &StricModel,
    items: &[TrainingItem],
    config: &TrainConfig,
    mode: NormMode,
) -> Result<f64> {
    if items.is_empty() {
        return Err(StricError::data("objective needs at least one window"));
    }
    let mut tape = Tape::new();
    let vars = register_model(&mut tape, model);
    let fwd = batch_objective(&mut tape, model, &vars, items, config, mode)?;
    check_finite(&fwd, &tape)?;
    Ok(tape.scalar_value(fwd.loss))
}

/// Loss and gradients for every learnable tensor on a batch.
pub fn gradients(
    model: &StricModel,
    items: &[TrainingItem],
    config: &TrainConfig,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let (loss, grads, _) = gradients_with_stats(model, items, config)?;
    Ok((loss, grads))
}

fn gradients_with_stats(
    model: &StricModel,
    items: &[TrainingItem],
    config: &TrainConfig,
) -> Result<(f64, BTreeMap<String, Array2<f64>>, Option<(Array1<f64>, Array1<f64>)>)> {
    if items.is_empty() {
        return Err(StricError::data("gradient needs at least one window"));
    }
    let mut tape = Tape::new();
    let vars = register_model(&mut tape, model);
    let fwd = batch_objective(&mut tape, model, &vars, items, config, NormMode::Train)?;
    check_finite(&fwd, &tape)?;
    let loss = tape.scalar_value(fwd.loss);
    let grad_store = tape.backward(fwd.loss);
    let mut grads = BTreeMap::new();
    for (name, var) in &vars.named {
        let shape = tape.value(*var).dim();
        grads.insert(name.clone(), grad_store.get_or_zeros(*var, shape));
    }
    Ok((loss, grads, fwd.batch_stats))
}

// ---------------------------------------------------------------------------
// Optimizer and training loop
// ---------------------------------------------------------------------------

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn step(&mut self, model: &mut StricModel, grads: &BTreeMap<String, Array2<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (beta1, beta2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let (m_map, v_map, t) = (&mut self.m, &mut self.v, self.t);
        let _ = t;
        model.visit_params_mut(&mut |name, param| {
            let g = match grads.get(name) {
                Some(g) => g,
                None => return,
            };
            let m = m_map
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = v_map
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let mut update = |idx: (usize, usize), value: &mut f64| {
                let gi = g[idx];
                m[idx] = beta1 * m[idx] + (1.0 - beta1) * gi;
                v[idx] = beta2 * v[idx] + (1.0 - beta2) * gi * gi;
                let mhat = m[idx] / bc1;
                let vhat = v[idx] / bc2;
                *value -= lr * mhat / (vhat.sqrt() + eps);
            };
            match param {
                ParamRef::Mat(a) => {
                    for r in 0..a.nrows() {
                        for c in 0..a.ncols() {
                            let mut val = a[[r, c]];
                            update((r, c), &mut val);
                            a[[r, c]] = val;
                        }
                    }
                }
                ParamRef::Vec(a) => {
                    for r in 0..a.len() {
                        let mut val = a[r];
                        update((r, 0), &mut val);
                        a[r] = val;
                    }
                }
                ParamRef::Scalar(s) => {
                    let mut val = *s;
                    update((0, 0), &mut val);
                    *s = val;
                }
            }
        });
    }
}

/// One history row per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: StricModel,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
}

/// Noise-variance warm start: ridge-fit the time combiner on the initial
/// model's future features and take the pooled residual variance.
pub fn warm_start_eta2(model: &StricModel, items: &[TrainingItem]) -> Result<f64> {
    let spec = model.config.window;
    let n_p = spec.n_p;
    let n = model.n_channels();
    let take = items.len().min(64);
    let mut gram = Array2::<f64>::zeros((n_p, n_p));
    let mut rhs = vec![Array1::<f64>::zeros(n_p); n];
    let mut feats: Vec<FutureFeatures> = Vec::with_capacity(take);
    for item in items.iter().take(take) {
        feats.push(assemble_future_features(model, item, NormMode::Train)?);
    }
    for ff in &feats {
        for ch in 0..n {
            let f = &ff.rows[ch];
            for r in 0..f.nrows() {
                let y = ff.targets[ch][r] - ff.linear_offsets[ch][r];
                for a in 0..n_p {
                    rhs[ch][a] += f[[r, a]] * y;
                    for b in 0..=a {
                        gram[[a, b]] += f[[r, a]] * f[[r, b]];
                    }
                }
            }
        }
    }
    for a in 0..n_p {
        for b in 0..a {
            gram[[b, a]] = gram[[a, b]];
        }
    }
    let ridge = 1e-2 * (gram.diag().sum() / n_p as f64).max(1e-8);
    for d in 0..n_p {
        gram[[d, d]] += ridge;
    }
    let factor = linalg::cholesky(&gram)
        .map_err(|e| StricError::numeric(format!("warm-start ridge failed: {e}")))?;
    let mut sse = 0.0;
    let mut count = 0usize;
    for ch in 0..n {
        let b = linalg::solve_lower_transpose(&factor, &linalg::solve_lower(&factor, &rhs[ch]));
        for ff in &feats {
            let f = &ff.rows[ch];
            for r in 0..f.nrows() {
                let pred: f64 = (0..n_p).map(|a| f[[r, a]] * b[a]).sum();
                let y = ff.targets[ch][r] - ff.linear_offsets[ch][r];
                sse += (y - pred) * (y - pred);
                count += 1;
            }
        }
    }
    Ok((sse / count.max(1) as f64).max(1e-6))
}

/// One-step RMSE over target range [begin, end) of a series (eval-mode
/// normalization); multivariate errors use the per-step Euclidean norm.
pub fn one_step_rmse(
    model: &StricModel,
    series: &TimeSeries,
    begin: usize,
    end: usize,
) -> Result<f64> {
    let n_p = model.config.window.n_p;
    let begin = begin.max(n_p);
    if end <= begin {
        return Err(StricError::data("empty RMSE range"));
    }
    let mut sse = 0.0;
    let mut count = 0usize;
    for t in begin..end {
        let window = series.values.slice(s![.., t - n_p..t]).to_owned();
        let fwd = model.forward_window(&window, NormMode::Eval)?;
        for ch in 0..model.n_channels() {
            let e = series.values[[ch, t]] - fwd.prediction[ch];
            sse += e * e;
        }
        count += 1;
    }
    Ok((sse / count as f64).sqrt())
}

/// Fit the model on `series[..train_len]`, validating on the next
/// `val_len` samples. Deterministic given the config seed; returns the
/// best-validation checkpoint and the per-epoch history.
pub fn train(
    mut model: StricModel,
    series: &TimeSeries,
    train_len: usize,
    val_len: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = model.config.window;
    if train_len + val_len > series.len() {
        return Err(StricError::data("train/val segments exceed series length"));
    }
    let train_starts = segment_item_starts(series.len(), &spec, 0, train_len);
    if train_starts.is_empty() {
        return Err(StricError::data(format!(
            "training segment of length {train_len} yields no windows for n_p={} n_f={}",
            spec.n_p, spec.n_f
        )));
    }
    let val_starts = segment_item_starts(series.len(), &spec, train_len, train_len + val_len);

    model.fading.learn_eta2 = config.learn_eta2;
    if model.config.use_fading {
        let items = collect_items(series, &spec, &train_starts);
        let eta2 = warm_start_eta2(&model, &items)?;
        model.fading.log_eta2 = eta2.ln();
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut adam = Adam::new(config.learning_rate);
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut best_model = model.clone();
    let mut best_metric = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stale_epochs = 0usize;

    for epoch in 0..config.max_epochs {
        let mut order = train_starts.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let items = collect_items(series, &spec, chunk);
            let (loss, grads, stats) = gradients_with_stats(&model, &items, config)?;
            if !loss.is_finite() || loss > config.divergence_threshold {
                return Err(StricError::numeric(format!(
                    "training diverged at epoch {epoch}: loss {loss:e}, lambda {:.4}",
                    model.fading.lambda()
                )));
            }
            adam.step(&mut model, &grads);
            if let Some((means, vars_stat)) = stats {
                model.norm.update_running(&means, &vars_stat);
            }
            epoch_loss += loss;
            batches += 1;
        }
        let train_rmse = one_step_rmse(&model, series, spec.n_p, train_len)?;
        let val_rmse = if val_len > 0 {
            one_step_rmse(&model, series, train_len, train_len + val_len)?
        } else {
            f64::NAN
        };
        history.push(HistoryRow {
            epoch,
            train_rmse,
            val_rmse,
            lambda: model.fading.lambda(),
            kappa: model.fading.kappa(),
            loss: epoch_loss / batches.max(1) as f64,
        });

        let metric = if val_len > 0 { val_rmse } else { train_rmse };
        if metric < best_metric - 1e-12 {
            best_metric = metric;
            best_model = model.clone();
            best_epoch = epoch;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if val_len > 0 && stale_epochs >= config.patience {
                break;
            }
        }
        let _ = &val_starts;
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
    })
}

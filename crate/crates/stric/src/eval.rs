//! Metrics, synthetic benchmark generators and the ablation harness.

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StricError};
use crate::model::{ModelConfig, StricModel};
use crate::series::{
    apply_standardize, chrono_split, compute_stats, TimeSeries, WindowSpec,
};
use crate::train::{one_step_rmse, train, TrainConfig};

/// A series with per-timestep binary anomaly labels.
#[derive(Debug, Clone)]
pub struct LabeledSeries {
    pub series: TimeSeries,
    pub labels: Vec<bool>,
}

impl LabeledSeries {
    pub fn new(series: TimeSeries, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != series.len() {
            return Err(StricError::data(format!(
                "{} labels for {} timesteps",
                labels.len(),
                series.len()
            )));
        }
        Ok(LabeledSeries { series, labels })
    }
}

/// Root mean squared one-step error: sqrt(1/N sum_t ||y(t) - yhat(t)||^2).
pub fn rmse(y: ArrayView2<f64>, y_hat: ArrayView2<f64>) -> Result<f64> {
    if y.dim() != y_hat.dim() {
        return Err(StricError::data("rmse: shape mismatch"));
    }
    let n = y.ncols();
    if n == 0 {
        return Err(StricError::data("rmse: empty input"));
    }
    let mut sse = 0.0;
    for t in 0..n {
        for ch in 0..y.nrows() {
            let e = y[[ch, t]] - y_hat[[ch, t]];
            sse += e * e;
        }
    }
    Ok((sse / n as f64).sqrt())
}

/// Pointwise F1 = 2PR / (P + R); 0 when precision + recall is 0.
pub fn f1(pred: &[bool], labels: &[bool]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(StricError::data("f1: length mismatch"));
    }
    if pred.is_empty() {
        return Err(StricError::data("f1: empty input"));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fnn = 0.0;
    for (&p, &l) in pred.iter().zip(labels.iter()) {
        match (p, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fnn += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fnn);
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Area under the ROC curve by threshold sweep over unique scores with
/// trapezoidal interpolation (ties form diagonal segments, which matches
/// the tie-corrected pairwise rank statistic).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(StricError::data("roc_auc: length mismatch"));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(StricError::data(
            "roc_auc: both classes must be present",
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(StricError::data("roc_auc: NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut area = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        // process a block of tied scores at once
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid between the previous and the current operating point
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// F1 of a binary detection vector against labels, skipping warm-up steps.
pub fn detection_f1(flagged: &[bool], labels: &[bool], skip: usize) -> Result<f64> {
    let skip = skip.min(flagged.len());
    f1(&flagged[skip..], &labels[skip.min(labels.len())..])
}

/// AUC of continuous scores against labels, skipping warm-up steps.
pub fn detection_auc(scores: &[f64], labels: &[bool], skip: usize) -> Result<f64> {
    let skip = skip.min(scores.len());
    roc_auc(&scores[skip..], &labels[skip.min(labels.len())..])
}

/// Synthetic benchmark scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Mean shift of two noise standard deviations at t = 60.
    Changepoint,
    /// Single spike at t = 60.
    PointOutlier,
    /// Change points at t = 60 and t = 200, point outliers at t = 80 and
    /// t = 160.
    Mixed,
    /// Sinusoid plus linear trend (the classic overfitting trap for
    /// unconstrained non-linear predictors).
    TrendPlusSine,
    /// y(t) = 0.8 y(t-1) + e(t).
    Ar1,
    /// y(t) = e(t) + 0.6 e(t-1) + 0.3 e(t-2).
    Ma2,
    /// White Gaussian noise.
    PureNoise,
}

impl SynthKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "changepoint" => Ok(SynthKind::Changepoint),
            "point_outlier" => Ok(SynthKind::PointOutlier),
            "mixed" => Ok(SynthKind::Mixed),
            "trend_plus_sine" => Ok(SynthKind::TrendPlusSine),
            "ar1" => Ok(SynthKind::Ar1),
            "ma2" => Ok(SynthKind::Ma2),
            "pure_noise" => Ok(SynthKind::PureNoise),
            other => Err(StricError::config(format!("unknown synthetic kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::Changepoint => "changepoint",
            SynthKind::PointOutlier => "point_outlier",
            SynthKind::Mixed => "mixed",
            SynthKind::TrendPlusSine => "trend_plus_sine",
            SynthKind::Ar1 => "ar1",
            SynthKind::Ma2 => "ma2",
            SynthKind::PureNoise => "pure_noise",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthParams {
    pub t_len: usize,
    pub noise_std: f64,
}

impl SynthParams {
    pub fn for_kind(kind: SynthKind) -> Self {
        match kind {
            SynthKind::Changepoint => SynthParams {
                t_len: 120,
                noise_std: 0.1,
            },
            SynthKind::PointOutlier => SynthParams {
                t_len: 120,
                noise_std: 1.0,
            },
            SynthKind::Mixed => SynthParams {
                t_len: 260,
                noise_std: 0.1,
            },
            SynthKind::TrendPlusSine => SynthParams {
                t_len: 400,
                noise_std: 0.05,
            },
            _ => SynthParams {
                t_len: 400,
                noise_std: 1.0,
            },
        }
    }
}

/// Injection points of the anomaly scenarios.
pub const CHANGE_AT: usize = 60;
pub const MIXED_EVENTS: [usize; 4] = [60, 80, 160, 200];

/// Deterministic synthetic series with anomaly labels at the injected
/// positions.
pub fn gen_synthetic(kind: SynthKind, params: SynthParams, seed: u64) -> Result<LabeledSeries> {
    if params.t_len < 3 {
        return Err(StricError::config("synthetic series needs at least 3 samples"));
    }
    let t_len = params.t_len;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise_std).unwrap();
    let mut labels = vec![false; t_len];
    let values: Vec<f64> = match kind {
        SynthKind::Changepoint => {
            if t_len <= CHANGE_AT {
                return Err(StricError::config("changepoint series needs t_len > 60"));
            }
            labels[CHANGE_AT] = true;
            let shift = 2.0 * params.noise_std;
            (0..t_len)
                .map(|t| noise.sample(&mut rng) + if t >= CHANGE_AT { shift } else { 0.0 })
                .collect()
        }
        SynthKind::PointOutlier => {
            if t_len <= CHANGE_AT {
                return Err(StricError::config("point-outlier series needs t_len > 60"));
            }
            labels[CHANGE_AT] = true;
            (0..t_len)
                .map(|t| {
                    noise.sample(&mut rng)
                        + if t == CHANGE_AT {
                            8.0 * params.noise_std
                        } else {
                            0.0
                        }
                })
                .collect()
        }
        SynthKind::Mixed => {
            if t_len <= MIXED_EVENTS[3] {
                return Err(StricError::config("mixed series needs t_len > 200"));
            }
            for &e in &MIXED_EVENTS {
                labels[e] = true;
            }
            let shift = 2.0 * params.noise_std;
            let spike = 8.0 * params.noise_std;
            (0..t_len)
                .map(|t| {
                    let mut v = noise.sample(&mut rng);
                    if (MIXED_EVENTS[0]..MIXED_EVENTS[3]).contains(&t) {
                        v += shift; // level shift between the two change points
                    }
                    if t == MIXED_EVENTS[1] {
                        v += spike;
                    }
                    if t == MIXED_EVENTS[2] {
                        v -= spike;
                    }
                    v
                })
                .collect()
        }
        SynthKind::TrendPlusSine => (0..t_len)
            .map(|t| {
                let tf = t as f64;
                0.02 * tf + (2.0 * std::f64::consts::PI * tf / 40.0).sin() + noise.sample(&mut rng)
            })
            .collect(),
        SynthKind::Ar1 => {
            let mut y = 0.0;
            (0..t_len)
                .map(|_| {
                    y = 0.8 * y + noise.sample(&mut rng);
                    y
                })
                .collect()
        }
        SynthKind::Ma2 => {
            let mut e1 = 0.0;
            let mut e2 = 0.0;
            (0..t_len)
                .map(|_| {
                    let e = noise.sample(&mut rng);
                    let y = e + 0.6 * e1 + 0.3 * e2;
                    e2 = e1;
                    e1 = e;
                    y
                })
                .collect()
        }
        SynthKind::PureNoise => (0..t_len).map(|_| noise.sample(&mut rng)).collect(),
    };
    LabeledSeries::new(TimeSeries::univariate(values)?, labels)
}

/// Ablation variants: the linear cascade and the fading loss toggled
/// independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Tcn,
    TcnLinear,
    TcnFading,
    Stric,
}

pub const ALL_VARIANTS: [Variant; 4] = [
    Variant::Tcn,
    Variant::TcnLinear,
    Variant::TcnFading,
    Variant::Stric,
];

impl Variant {
    pub fn flags(&self) -> (bool, bool) {
        match self {
            Variant::Tcn => (false, false),
            Variant::TcnLinear => (true, false),
            Variant::TcnFading => (false, true),
            Variant::Stric => (true, true),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Tcn => "TCN",
            Variant::TcnLinear => "TCN+Linear",
            Variant::TcnFading => "TCN+Fading",
            Variant::Stric => "STRIC",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub base: ModelConfig,
    pub train: TrainConfig,
    pub train_frac: f64,
    pub val_frac: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub train_rmse: f64,
    pub test_rmse: f64,
    /// test RMSE minus train RMSE.
    pub gap: f64,
}

/// Train one variant on the chronological train split (standardization
/// fitted on the training portion only) and report train/test RMSE.
pub fn fit_variant(
    ts: &TimeSeries,
    variant: Variant,
    config: &AblationConfig,
) -> Result<AblationRow> {
    let (train_seg, val_seg, test_seg) = chrono_split(ts, config.train_frac, config.val_frac)?;
    let stats = compute_stats(&train_seg);
    let z = apply_standardize(ts, &stats);
    let train_len = train_seg.len();
    let val_len = val_seg.len();
    let test_len = test_seg.len();

    let mut model_config = config.base.clone();
    let (use_ldl, use_fading) = variant.flags();
    model_config.use_ldl = use_ldl;
    model_config.use_fading = use_fading;
    model_config.n_channels = ts.n_channels();

    let model = StricModel::init(model_config, config.train.seed)?;
    let outcome = train(model, &z, train_len, val_len, &config.train)?;

    let n_p = config.base.window.n_p;
    let train_rmse = one_step_rmse(&outcome.model, &z, n_p, train_len)?;
    let test_begin = (train_len + val_len).max(n_p);
    let test_rmse = one_step_rmse(&outcome.model, &z, test_begin, train_len + val_len + test_len)?;
    Ok(AblationRow {
        variant: variant.name(),
        train_rmse,
        test_rmse,
        gap: test_rmse - train_rmse,
    })
}

/// Run the requested variants on one dataset.
pub fn ablation_run(
    ts: &TimeSeries,
    variants: &[Variant],
    config: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| fit_variant(ts, *v, config))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MemorySweepRow {
    pub n_p: usize,
    pub variant: &'static str,
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub gap: f64,
}

/// Generalization gap as the predictor memory grows: rerun the variants
/// with increasing window lengths (kernel lengths track half the window).
pub fn memory_sweep(
    ts: &TimeSeries,
    memories: &[usize],
    variants: &[Variant],
    config: &AblationConfig,
) -> Result<Vec<MemorySweepRow>> {
    let mut rows = Vec::new();
    for &n_p in memories {
        let mut cfg = config.clone();
        cfg.base.window = WindowSpec::new(n_p, config.base.window.n_f)?;
        cfg.base.kernel_len = n_p.div_ceil(2);
        for &variant in variants {
            let row = fit_variant(ts, variant, &cfg)?;
            rows.push(MemorySweepRow {
                n_p,
                variant: row.variant,
                train_rmse: row.train_rmse,
                test_rmse: row.test_rmse,
                gap: row.gap,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn rmse_basic_cases() {
        let y = array![[0.0, 0.0]];
        assert_eq!(rmse(y.view(), y.view()).unwrap(), 0.0);
        let y_hat = array![[1.0, 1.0]];
        assert_eq!(rmse(y.view(), y_hat.view()).unwrap(), 1.0);
        assert!(rmse(array![[]].view(), array![[]].view()).is_err());
    }

    #[test]
    fn rmse_matches_independent_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let y = Array2::from_shape_fn((3, 17), |_| rng.gen_range(-2.0..2.0));
        let p = Array2::from_shape_fn((3, 17), |_| rng.gen_range(-2.0..2.0));
        let got = rmse(y.view(), p.view()).unwrap();
        let mut sse = 0.0;
        for t in 0..17 {
            let mut norm2 = 0.0;
            for ch in 0..3 {
                norm2 += (y[[ch, t]] - p[[ch, t]]).powi(2);
            }
            sse += norm2;
        }
        assert_abs_diff_eq!(got, (sse / 17.0_f64).sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn f1_cases() {
        let labels = vec![true, false, true, false];
        assert_eq!(f1(&labels.clone(), &labels).unwrap(), 1.0);
        assert_eq!(f1(&vec![false; 4], &labels).unwrap(), 0.0);
        // TP=1, FP=1, FN=1 -> P = R = 0.5 -> F1 = 0.5
        let pred = vec![true, true, false, false];
        let lab = vec![true, false, true, false];
        assert_eq!(f1(&pred, &lab).unwrap(), 0.5);
    }

    #[test]
    fn auc_perfect_and_random() {
        let labels = vec![false, false, true, true];
        let scores = vec![0.1, 0.2, 0.8, 0.9];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
        // large label-independent sample concentrates near 0.5
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 20_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    }

    #[test]
    fn auc_rejects_single_class() {
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_equals_pairwise_rank_oracle_with_ties() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..5 {
            let n = 200;
            // quantized scores force plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 10.0).round() / 10.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
                continue;
            }
            let sweep = roc_auc(&scores, &labels).unwrap();
            // O(N^2) rank oracle with 0.5 tie credit
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                if !labels[i] {
                    continue;
                }
                for j in 0..n {
                    if labels[j] {
                        continue;
                    }
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
            assert_abs_diff_eq!(sweep, wins / pairs, epsilon = 1e-10);
        }
    }

    #[test]
    fn synthetic_labels_and_determinism() {
        let mixed = gen_synthetic(SynthKind::Mixed, SynthParams::for_kind(SynthKind::Mixed), 3).unwrap();
        let marked: Vec<usize> = mixed
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(marked, vec![60, 80, 160, 200]);

        let noise = gen_synthetic(SynthKind::PureNoise, SynthParams::for_kind(SynthKind::PureNoise), 3).unwrap();
        assert!(noise.labels.iter().all(|l| !*l));

        let a = gen_synthetic(SynthKind::Ar1, SynthParams::for_kind(SynthKind::Ar1), 9).unwrap();
        let b = gen_synthetic(SynthKind::Ar1, SynthParams::for_kind(SynthKind::Ar1), 9).unwrap();
        assert_eq!(a.series.values, b.series.values);
    }

    #[test]
    fn changepoint_shift_is_two_sigma() {
        let params = SynthParams::for_kind(SynthKind::Changepoint);
        let mut pre_mean = 0.0;
        let mut post_mean = 0.0;
        let runs = 50;
        for seed in 0..runs {
            let ls = gen_synthetic(SynthKind::Changepoint, params, seed).unwrap();
            let v = ls.series.values.row(0);
            pre_mean += v.slice(ndarray::s![..CHANGE_AT]).mean().unwrap();
            post_mean += v.slice(ndarray::s![CHANGE_AT..]).mean().unwrap();
        }
        pre_mean /= runs as f64;
        post_mean /= runs as f64;
        let shift = post_mean - pre_mean;
        assert!(
            (shift - 2.0 * params.noise_std).abs() < 0.02,
            "observed shift {shift}"
        );
    }

}

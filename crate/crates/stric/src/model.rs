//! The full predictor: linear cascade, temporal convolution network,
//! per-channel readout heads, feature normalization and the fading prior
//! state, plus checkpoint (de)serialization.

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Result, StricError};
use crate::ldl::{
    self, cascade_forward, BlockHeads, Combiner, Decomposition, LdlStack,
};
use crate::series::{TimeSeries, WindowSpec};
use crate::tcn::{
    feature_norm, readout_intermediate, readout_predict, tcn_forward, FeatureNorm, NormMode,
    TcnConfig, TcnParams,
};

/// How the linear blocks turn component estimates into predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LdlCombinerMode {
    /// Use the most recent component sample (default).
    CanonicalLast,
    /// Learn dense per-channel time weights.
    Dense,
}

/// Learnable fading-memory prior: lambda through a logistic
/// reparametrization, kappa and the noise variance through logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FadingPrior {
    pub rho: f64,
    pub log_kappa: f64,
    pub log_eta2: f64,
    pub learn_eta2: bool,
}

impl FadingPrior {
    pub fn from_values(lambda: f64, kappa: f64, eta2: f64, learn_eta2: bool) -> Self {
        assert!(lambda > 0.0 && lambda < 1.0);
        FadingPrior {
            rho: (lambda / (1.0 - lambda)).ln(),
            log_kappa: kappa.ln(),
            log_eta2: eta2.ln(),
            learn_eta2,
        }
    }

    pub fn lambda(&self) -> f64 {
        1.0 / (1.0 + (-self.rho).exp())
    }

    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }

    pub fn eta2(&self) -> f64 {
        self.log_eta2.exp()
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub window: WindowSpec,
    /// Filters per linear block (trend, seasonal, linear).
    pub l_trend: usize,
    pub l_seasonal: usize,
    pub l_linear: usize,
    /// Kernel length of the linear banks; defaults to half the window.
    pub kernel_len: usize,
    pub max_pole_radius: f64,
    pub tcn: TcnConfig,
    pub ldl_combiner: LdlCombinerMode,
    /// Disable the linear cascade (plain-TCN ablations).
    pub use_ldl: bool,
    /// Disable the fading-memory loss (plain squared-error training).
    pub use_fading: bool,
}

impl ModelConfig {
    pub fn new(n_channels: usize, window: WindowSpec) -> Self {
        ModelConfig {
            n_channels,
            window,
            l_trend: 10,
            l_seasonal: 100,
            l_linear: 200,
            kernel_len: window.n_p.div_ceil(2),
            max_pole_radius: ldl::DEFAULT_MAX_POLE_RADIUS,
            tcn: TcnConfig::default(),
            ldl_combiner: LdlCombinerMode::CanonicalLast,
            use_ldl: true,
            use_fading: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(StricError::config("model needs at least one channel"));
        }
        if self.kernel_len == 0 || self.kernel_len > self.window.n_p {
            return Err(StricError::config(format!(
                "kernel length {} must be in 1..={}",
                self.kernel_len, self.window.n_p
            )));
        }
        self.tcn.validate()
    }
}

/// All learnable state of the predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StricModel {
    pub config: ModelConfig,
    pub ldl: LdlStack,
    pub tcn: TcnParams,
    /// Per-channel TCN feature selectors, n x l3.
    pub tcn_selector: Array2<f64>,
    /// Per-channel fading-regularized time combiners, n x n_p.
    pub tcn_combiner: Array2<f64>,
    pub norm: FeatureNorm,
    pub fading: FadingPrior,
    pub seed: u64,
}

/// Default initial fading scale: slow forgetting until the data says otherwise.
pub const LAMBDA_INIT: f64 = 0.99;
pub const KAPPA_INIT: f64 = 1.0;

impl StricModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut master = ChaCha20Rng::seed_from_u64(seed);
        let n = config.n_channels;
        let n_p = config.window.n_p;

        let ldl = if config.use_ldl {
            let banks = vec![
                ldl::init_trend_bank(config.l_trend, config.kernel_len, master.gen())?,
                ldl::init_seasonal_bank(config.l_seasonal, config.kernel_len, master.gen())?,
                ldl::init_linear_bank(
                    config.l_linear,
                    config.kernel_len,
                    config.max_pole_radius,
                    master.gen(),
                )?,
            ];
            let heads = banks
                .iter()
                .map(|bank| {
                    let scale = 0.1 / (bank.n_filters() as f64).sqrt();
                    BlockHeads {
                        selector: Array2::from_shape_fn((n, bank.n_filters()), |_| {
                            master.gen_range(-scale..scale)
                        }),
                        combiner: match config.ldl_combiner {
                            LdlCombinerMode::CanonicalLast => Combiner::CanonicalLast,
                            LdlCombinerMode::Dense => {
                                let s = 0.1 / (n_p as f64).sqrt();
                                Combiner::Dense(Array2::from_shape_fn((n, n_p), |_| {
                                    master.gen_range(-s..s)
                                }))
                            }
                        },
                    }
                })
                .collect();
            LdlStack { banks, heads }
        } else {
            LdlStack {
                banks: Vec::new(),
                heads: Vec::new(),
            }
        };

        let tcn = TcnParams::init(n, config.tcn, &mut master)?;
        let l3 = tcn.n_features();
        let sel_scale = 0.1 / (l3 as f64).sqrt();
        let comb_scale = 0.1 / (n_p as f64).sqrt();
        let tcn_selector = Array2::from_shape_fn((n, l3), |_| master.gen_range(-sel_scale..sel_scale));
        let tcn_combiner =
            Array2::from_shape_fn((n, n_p), |_| master.gen_range(-comb_scale..comb_scale));

        Ok(StricModel {
            config,
            ldl,
            tcn,
            tcn_selector,
            tcn_combiner,
            norm: FeatureNorm::identity(l3),
            fading: FadingPrior::from_values(LAMBDA_INIT, KAPPA_INIT, 1.0, false),
            seed,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.config.n_channels
    }

    /// Forward pass on one window (channels x n_p).
    pub fn forward_window(&self, window: &Array2<f64>, mode: NormMode) -> Result<WindowForward> {
        let (n, n_p) = window.dim();
        if n != self.config.n_channels || n_p != self.config.window.n_p {
            return Err(StricError::data(format!(
                "window shape ({n}, {n_p}) does not match model ({}, {})",
                self.config.n_channels, self.config.window.n_p
            )));
        }
        let decomposition = cascade_forward(window, &self.ldl)?;
        let pre_features = tcn_forward(&decomposition.residual, &self.tcn);
        let (features, _) = feature_norm(&pre_features, &self.norm, mode);
        let mut intermediate = Array2::zeros((n, n_p));
        let mut tcn_prediction = Array1::zeros(n);
        for i in 0..n {
            let row = readout_intermediate(&features, self.tcn_selector.row(i));
            tcn_prediction[i] = readout_predict(&row, Some(self.tcn_combiner.row(i)));
            intermediate.row_mut(i).assign(&row);
        }
        let prediction = decomposition.linear_prediction() + &tcn_prediction;
        Ok(WindowForward {
            decomposition,
            features,
            intermediate,
            tcn_prediction,
            prediction,
        })
    }

    /// One-step-ahead predictions over a whole series: column t holds the
    /// prediction of y(t) from the window ending at t-1. Columns before
    /// `first_valid` (= n_p) are NaN.
    pub fn predict_series(&self, ts: &TimeSeries) -> Result<SeriesPrediction> {
        let n_p = self.config.window.n_p;
        let t_len = ts.len();
        if t_len <= n_p {
            return Err(StricError::data(format!(
                "series of length {t_len} too short for prediction with n_p={n_p}"
            )));
        }
        let mut values = Array2::from_elem((ts.n_channels(), t_len), f64::NAN);
        for t in n_p..t_len {
            let window = ts.values.slice(s![.., t - n_p..t]).to_owned();
            let fwd = self.forward_window(&window, NormMode::Eval)?;
            values.column_mut(t).assign(&fwd.prediction);
        }
        Ok(SeriesPrediction {
            values,
            first_valid: n_p,
        })
    }

    /// One-step prediction residuals e(t) = y(t) - yhat(t); NaN in warm-up.
    pub fn residual_series(&self, ts: &TimeSeries) -> Result<SeriesPrediction> {
        let mut pred = self.predict_series(ts)?;
        pred.values = &ts.values - &pred.values;
        Ok(pred)
    }
}

/// Everything one window forward pass produces.
#[derive(Debug, Clone)]
pub struct WindowForward {
    pub decomposition: Decomposition,
    /// Normalized TCN features, l3 x n_p.
    pub features: Array2<f64>,
    /// Per-channel intermediate readout rows, n x n_p.
    pub intermediate: Array2<f64>,
    /// TCN head prediction per channel.
    pub tcn_prediction: Array1<f64>,
    /// Total one-step prediction per channel (linear heads + TCN head).
    pub prediction: Array1<f64>,
}

/// Predictions aligned to a series; columns before `first_valid` are NaN.
#[derive(Debug, Clone)]
pub struct SeriesPrediction {
    pub values: Array2<f64>,
    pub first_valid: usize,
}

const CHECKPOINT_FORMAT: &str = "stric-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: StricModel,
}

/// Serialize the model (all parameter tensors with shapes, the rng seed and
/// the normalization state) to a versioned JSON checkpoint.
pub fn save_checkpoint(model: &StricModel, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        model: model.clone(),
    };
    let text = serde_json::to_string(&ckpt)
        .map_err(|e| StricError::numeric(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<StricModel> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| StricError::data(format!("invalid checkpoint {}: {e}", path.display())))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(StricError::data(format!(
            "unsupported checkpoint format '{}'",
            ckpt.format
        )));
    }
    ckpt.model.config.validate()?;
    Ok(ckpt.model)
}

/// Iterate over every learnable tensor with a stable name; the optimizer,
/// gradient plumbing and finite-difference checks all share this order.
pub enum ParamRef<'a> {
    Mat(&'a mut Array2<f64>),
    Vec(&'a mut Array1<f64>),
    Scalar(&'a mut f64),
}

impl StricModel {
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, ParamRef<'_>)) {
        let block_names = ["trend", "seasonal", "linear"];
        for (k, bank) in self.ldl.banks.iter_mut().enumerate() {
            f(&format!("kernels.{}", block_names[k]), ParamRef::Mat(&mut bank.kernels));
        }
        for (k, heads) in self.ldl.heads.iter_mut().enumerate() {
            f(
                &format!("selector.{}", block_names[k]),
                ParamRef::Mat(&mut heads.selector),
            );
            if let Combiner::Dense(b) = &mut heads.combiner {
                f(&format!("combiner.{}", block_names[k]), ParamRef::Mat(b));
            }
        }
        for (i, block) in self.tcn.blocks.iter_mut().enumerate() {
            f(&format!("tcn.block{i}.conv1.weight"), ParamRef::Mat(&mut block.conv1.weight));
            f(&format!("tcn.block{i}.conv1.bias"), ParamRef::Vec(&mut block.conv1.bias));
            f(&format!("tcn.block{i}.conv2.weight"), ParamRef::Mat(&mut block.conv2.weight));
            f(&format!("tcn.block{i}.conv2.bias"), ParamRef::Vec(&mut block.conv2.bias));
            if let Some(skip) = &mut block.skip {
                f(&format!("tcn.block{i}.skip.weight"), ParamRef::Mat(&mut skip.weight));
                f(&format!("tcn.block{i}.skip.bias"), ParamRef::Vec(&mut skip.bias));
            }
        }
        f("selector.tcn", ParamRef::Mat(&mut self.tcn_selector));
        f("combiner.tcn", ParamRef::Mat(&mut self.tcn_combiner));
        f("norm.scale", ParamRef::Vec(&mut self.norm.scale));
        f("norm.shift", ParamRef::Vec(&mut self.norm.shift));
        if self.config.use_fading {
            f("fading.rho", ParamRef::Scalar(&mut self.fading.rho));
            f("fading.log_kappa", ParamRef::Scalar(&mut self.fading.log_kappa));
            if self.fading.learn_eta2 {
                f("fading.log_eta2", ParamRef::Scalar(&mut self.fading.log_eta2));
            }
        }
    }

    /// Parameter names in visit order.
    pub fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params_mut(&mut |name, _| names.push(name.to_string()));
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::WindowSpec;

    fn small_config() -> ModelConfig {
        let mut config = ModelConfig::new(2, WindowSpec::new(12, 3).unwrap());
        config.l_trend = 3;
        config.l_seasonal = 4;
        config.l_linear = 4;
        config.tcn = TcnConfig {
            layers: 2,
            channels: 6,
            kernel_size: 3,
            activation: crate::tcn::Activation::Relu,
        };
        config
    }

    #[test]
    fn init_is_deterministic() {
        let a = StricModel::init(small_config(), 99).unwrap();
        let b = StricModel::init(small_config(), 99).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = StricModel::init(small_config(), 100).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let model = StricModel::init(small_config(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let window = Array2::from_shape_fn((2, 12), |(i, t)| ((i + t) as f64 * 0.4).sin());
        let a = model.forward_window(&window, NormMode::Eval).unwrap();
        let b = loaded.forward_window(&window, NormMode::Eval).unwrap();
        assert_eq!(a.prediction, b.prediction);
    }

    #[test]
    fn full_stack_is_causal_for_one_step_prediction() {
        let model = StricModel::init(small_config(), 3).unwrap();
        let window = Array2::from_shape_fn((2, 12), |(i, t)| ((i * 5 + t) as f64 * 0.3).cos());
        let base = model.forward_window(&window, NormMode::Eval).unwrap();
        // prediction at time t must not change when "future" inputs change;
        // within a window, the last column is the present
        let mut longer = Array2::zeros((2, 12));
        longer.assign(&window);
        let pred_before = base.prediction.clone();
        // shift window right by one (drop oldest, append a new sample):
        // the prediction from the original window is unaffected by what
        // the next sample turns out to be -- forward is a pure function
        let again = model.forward_window(&longer, NormMode::Eval).unwrap();
        assert_eq!(pred_before, again.prediction);
    }

    #[test]
    fn predict_series_marks_warmup() {
        let model = StricModel::init(small_config(), 5).unwrap();
        let ts = TimeSeries::new(
            Array2::from_shape_fn((2, 30), |(i, t)| ((i + t) as f64 * 0.2).sin()),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let pred = model.predict_series(&ts).unwrap();
        assert_eq!(pred.first_valid, 12);
        assert!(pred.values[[0, 11]].is_nan());
        assert!(pred.values[[0, 12]].is_finite());
    }

    #[test]
    fn param_visitor_covers_every_group() {
        let mut model = StricModel::init(small_config(), 1).unwrap();
        let names = model.param_names();
        for prefix in ["kernels.", "selector.", "combiner.tcn", "tcn.block", "norm.", "fading.rho"] {
            assert!(
                names.iter().any(|n| n.starts_with(prefix)),
                "missing group {prefix}: {names:?}"
            );
        }
    }
}

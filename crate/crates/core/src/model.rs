//! The forecasting network.
//!
//! History `[V × L_h]` is patched jointly over all channels by a strided
//! convolution, passed through ReLU and a pointwise convolution, and becomes
//! `T` temporal tokens with learned positional embeddings. Every exogenous
//! forecast series is projected to one extra token (plus a learned type
//! embedding). The `T + F` tokens go through post-norm transformer encoder
//! blocks and a single affine decoder regresses `[n_targets × horizon]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const CHECKPOINT_FORMAT: &str = "aquacast-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// History input channels `V` (endogenous plus exogenous history).
    pub n_hist_vars: usize,
    /// Exogenous forecast channels `F`, one token each.
    pub n_forecast_vars: usize,
    /// Output channels; 1 for multi-to-single.
    pub n_targets: usize,
    pub hist_len: usize,
    pub forecast_len: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub patch_stride: usize,
    pub kernel1: usize,
    pub kernel2: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_hist_vars: 1,
            n_forecast_vars: 0,
            n_targets: 1,
            hist_len: 96,
            forecast_len: 96,
            horizon: 96,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            patch_stride: 8,
            kernel1: 8,
            kernel2: 1,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Default architecture for the given channel layout; the forecast block spans the horizon.
    pub fn for_layout(n_hist_vars: usize, n_forecast_vars: usize, n_targets: usize, horizon: usize) -> Self {
        Self {
            n_hist_vars,
            n_forecast_vars,
            n_targets,
            horizon,
            forecast_len: horizon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_hist_vars == 0 || self.hist_len == 0 || self.horizon == 0 {
            return fail("history channels, history length and horizon must be positive".into());
        }
        if self.n_targets == 0 || self.n_targets > self.n_hist_vars {
            return fail(format!(
                "n_targets must lie in 1..={}, got {}",
                self.n_hist_vars, self.n_targets
            ));
        }
        if self.d_model < 2 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be >= 2 and divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_stride == 0 || self.kernel1 == 0 || self.kernel2 == 0 {
            return fail("kernel sizes and stride must be positive".into());
        }
        if self.kernel1 > self.hist_len || (self.hist_len - self.kernel1) % self.patch_stride != 0 {
            return fail(format!(
                "history length {} minus kernel1 {} must be a non-negative multiple of stride {}",
                self.hist_len, self.kernel1, self.patch_stride
            ));
        }
        let patches = (self.hist_len - self.kernel1) / self.patch_stride + 1;
        if self.kernel2 > patches {
            return fail(format!("kernel2 {} exceeds the {patches} patches", self.kernel2));
        }
        if self.n_forecast_vars > 0 && self.forecast_len == 0 {
            return fail("forecast tokens need a positive forecast length".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.d_ff == 0 || self.n_layers == 0 {
            return fail("d_ff and n_layers must be positive".into());
        }
        Ok(())
    }

    /// History tokens `T` after both convolutions.
    pub fn history_tokens(&self) -> usize {
        (self.hist_len - self.kernel1) / self.patch_stride + 1 - (self.kernel2 - 1)
    }

    /// Encoder sequence length `T + F`.
    pub fn tokens(&self) -> usize {
        self.history_tokens() + self.n_forecast_vars
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn output_len(&self) -> usize {
        self.n_targets * self.horizon
    }

    /// Trainable scalar count, derived from the configuration alone.
    pub fn parameter_count(&self) -> usize {
        ModelParams::shapes(self)
            .into_iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Parameters inside the encoder blocks; independent of the token count.
    pub fn attention_parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * (d * d + d) + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d) + 4 * d;
        per_layer * self.n_layers
    }
}

macro_rules! define_layer {
    ($($f:ident),*) => {
        /// Weights of one encoder block.
        #[derive(Clone, Debug, PartialEq)]
        pub struct LayerParams<T> {
            $(pub $f: T,)*
        }

        impl<T> LayerParams<T> {
            fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> LayerParams<U> {
                LayerParams { $($f: f(&format!("{prefix}.{}", stringify!($f)), &self.$f),)* }
            }

            fn as_mut(&mut self) -> LayerParams<&mut T> {
                LayerParams { $($f: &mut self.$f,)* }
            }

            fn push_into(self, out: &mut Vec<T>) {
                $(out.push(self.$f);)*
            }
        }
    };
}

define_layer!(
    w_q,
    b_q,
    w_k,
    b_k,
    w_v,
    b_v,
    w_o,
    b_o,
    ff_w1,
    ff_b1,
    ff_w2,
    ff_b2,
    norm1_gain,
    norm1_shift,
    norm2_gain,
    norm2_shift
);

/// All trainable tensors, generic so that the same layout carries values,
/// gradients, optimizer moments or graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub conv1_kernels: T,
    pub conv1_bias: T,
    pub conv2_kernels: T,
    pub conv2_bias: T,
    pub positional: T,
    pub forecast_proj: Vec<T>,
    pub forecast_type: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub decoder_w: T,
    pub decoder_b: T,
}

pub type ModelParams = Params<Tensor>;

impl<T> Params<T> {
    /// Applies `f` to every entry with its stable dotted name.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Params<U> {
        let mut forecast_proj = Vec::with_capacity(self.forecast_proj.len());
        for (i, t) in self.forecast_proj.iter().enumerate() {
            forecast_proj.push(f(&format!("forecast.{i}.projector"), t));
        }
        let mut forecast_type = Vec::with_capacity(self.forecast_type.len());
        for (i, t) in self.forecast_type.iter().enumerate() {
            forecast_type.push(f(&format!("forecast.{i}.type"), t));
        }
        Params {
            conv1_kernels: f("embed.conv1.kernels", &self.conv1_kernels),
            conv1_bias: f("embed.conv1.bias", &self.conv1_bias),
            conv2_kernels: f("embed.conv2.kernels", &self.conv2_kernels),
            conv2_bias: f("embed.conv2.bias", &self.conv2_bias),
            positional: f("embed.positional", &self.positional),
            forecast_proj,
            forecast_type,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("encoder.{i}"), &mut f))
                .collect(),
            decoder_w: f("decoder.weight", &self.decoder_w),
            decoder_b: f("decoder.bias", &self.decoder_b),
        }
    }

    pub fn as_mut(&mut self) -> Params<&mut T> {
        Params {
            conv1_kernels: &mut self.conv1_kernels,
            conv1_bias: &mut self.conv1_bias,
            conv2_kernels: &mut self.conv2_kernels,
            conv2_bias: &mut self.conv2_bias,
            positional: &mut self.positional,
            forecast_proj: self.forecast_proj.iter_mut().collect(),
            forecast_type: self.forecast_type.iter_mut().collect(),
            layers: self.layers.iter_mut().map(LayerParams::as_mut).collect(),
            decoder_w: &mut self.decoder_w,
            decoder_b: &mut self.decoder_b,
        }
    }

    /// Entries in canonical order.
    pub fn into_vec(self) -> Vec<T> {
        let mut out = vec![
            self.conv1_kernels,
            self.conv1_bias,
            self.conv2_kernels,
            self.conv2_bias,
            self.positional,
        ];
        out.extend(self.forecast_proj);
        out.extend(self.forecast_type);
        for layer in self.layers {
            layer.push_into(&mut out);
        }
        out.push(self.decoder_w);
        out.push(self.decoder_b);
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.map(|name, _| name.to_string()).into_vec()
    }
}

impl ModelParams {
    /// Tensor shapes implied by a configuration, in canonical order.
    pub fn shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let template = Self::layout(config, |shape, _| shape.to_vec());
        let names = template.names();
        names.into_iter().zip(template.into_vec()).collect()
    }

    /// Builds every parameter through `make(shape, role)`.
    fn layout<T>(config: &ModelConfig, mut make: impl FnMut(&[usize], Init) -> T) -> Params<T> {
        let d = config.d_model;
        let v = config.n_hist_vars;
        let t = config.history_tokens();
        let n = config.tokens();
        let k1 = config.kernel1;
        let k2 = config.kernel2;
        Params {
            conv1_kernels: make(&[d, v, k1], Init::FanIn(v * k1)),
            conv1_bias: make(&[d], Init::Zero),
            conv2_kernels: make(&[d, d, k2], Init::FanIn(d * k2)),
            conv2_bias: make(&[d], Init::Zero),
            positional: make(&[t, d], Init::Embedding),
            forecast_proj: (0..config.n_forecast_vars)
                .map(|_| make(&[config.forecast_len, d], Init::FanIn(config.forecast_len)))
                .collect(),
            forecast_type: (0..config.n_forecast_vars)
                .map(|_| make(&[d], Init::Embedding))
                .collect(),
            layers: (0..config.n_layers)
                .map(|_| LayerParams {
                    w_q: make(&[d, d], Init::FanIn(d)),
                    b_q: make(&[d], Init::Zero),
                    w_k: make(&[d, d], Init::FanIn(d)),
                    b_k: make(&[d], Init::Zero),
                    w_v: make(&[d, d], Init::FanIn(d)),
                    b_v: make(&[d], Init::Zero),
                    w_o: make(&[d, d], Init::FanIn(d)),
                    b_o: make(&[d], Init::Zero),
                    ff_w1: make(&[d, config.d_ff], Init::FanIn(d)),
                    ff_b1: make(&[config.d_ff], Init::Zero),
                    ff_w2: make(&[config.d_ff, d], Init::FanIn(config.d_ff)),
                    ff_b2: make(&[d], Init::Zero),
                    norm1_gain: make(&[d], Init::One),
                    norm1_shift: make(&[d], Init::Zero),
                    norm2_gain: make(&[d], Init::One),
                    norm2_shift: make(&[d], Init::Zero),
                })
                .collect(),
            decoder_w: make(&[n * d, config.output_len()], Init::FanIn(n * d)),
            decoder_b: make(&[config.output_len()], Init::Zero),
        }
    }

    /// Seeded fan-in-scaled uniform initialization.
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::layout(config, |shape, init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Embedding => (0..n).map(|_| rng.random_range(-0.1..0.1)).collect(),
            };
            Tensor::new(shape.to_vec(), data).expect("layout shapes are positive")
        })
    }

    pub fn zeros_like(config: &ModelConfig) -> Self {
        Self::layout(config, |shape, _| Tensor::zeros(shape))
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let names = self.names();
        names.into_iter().zip(self.map(|_, t| t).into_vec()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.as_mut().into_vec()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    FanIn(usize),
    Embedding,
}

/// Graph handles produced by one encoder block.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub tokens: Var,
    /// Post-softmax attention weights, one `[N × N]` matrix per head.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n_targets × horizon]` in standardized units.
    pub prediction: Var,
    pub tokens: Var,
    pub attention: Vec<Vec<Var>>,
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AquaCast {
    config: ModelConfig,
    params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl AquaCast {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        for ((name, expected), (_, actual)) in ModelParams::shapes(&config).iter().zip(params.tensors()) {
            if expected.as_slice() != actual.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config implies {expected:?}",
                    actual.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ModelParams) {
        self.params = params;
    }

    /// Registers every weight as a tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Params<Var> {
        self.params.map(|_, t| g.param(t.clone()))
    }

    /// Same as [`AquaCast::bind`] but without gradient tracking.
    pub fn bind_frozen(&self, g: &mut Graph) -> Params<Var> {
        self.params.map(|_, t| g.constant(t.clone()))
    }

    /// `[V × L_h]` history to `[T × D]` tokens.
    pub fn embed_history(&self, g: &mut Graph, p: &Params<Var>, history: Var) -> Result<Var> {
        let c = &self.config;
        if g.value(history).shape() != [c.n_hist_vars, c.hist_len] {
            return Err(Error::Config(format!(
                "history has shape {:?}, model expects [{}, {}]",
                g.value(history).shape(),
                c.n_hist_vars,
                c.hist_len
            )));
        }
        let patches = g.conv1d(history, p.conv1_kernels, p.conv1_bias, c.patch_stride)?;
        let act = g.relu(patches);
        let features = g.conv1d(act, p.conv2_kernels, p.conv2_bias, 1)?;
        let tokens = g.transpose(features)?;
        g.add(tokens, p.positional)
    }

    /// `[F × L_f]` forecasts to `[F × D]` tokens; `None` when the model has no forecast inputs.
    pub fn embed_forecast(&self, g: &mut Graph, p: &Params<Var>, forecast: Option<Var>) -> Result<Option<Var>> {
        let c = &self.config;
        let Some(forecast) = forecast else {
            if c.n_forecast_vars > 0 {
                return Err(Error::Config(format!(
                    "model expects {} forecast series, none given",
                    c.n_forecast_vars
                )));
            }
            return Ok(None);
        };
        if c.n_forecast_vars == 0 || g.value(forecast).shape() != [c.n_forecast_vars, c.forecast_len] {
            return Err(Error::Config(format!(
                "forecast has shape {:?}, model expects [{}, {}]",
                g.value(forecast).shape(),
                c.n_forecast_vars,
                c.forecast_len
            )));
        }
        let flat = g.reshape(forecast, vec![1, c.n_forecast_vars * c.forecast_len])?;
        let mut tokens = Vec::with_capacity(c.n_forecast_vars);
        for f in 0..c.n_forecast_vars {
            let row = g.slice_cols(flat, f * c.forecast_len, c.forecast_len)?;
            let projected = g.matmul(row, p.forecast_proj[f])?;
            tokens.push(g.add_row_bias(projected, p.forecast_type[f])?);
        }
        Ok(Some(g.concat_rows(&tokens)?))
    }

    /// Multi-head self-attention and feed-forward with post-norm residuals.
    pub fn encoder_block(
        &self,
        g: &mut Graph,
        layer: &LayerParams<Var>,
        x: Var,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<BlockOutput> {
        let c = &self.config;
        let dk = c.head_dim();
        let q = g.linear(x, layer.w_q, layer.b_q)?;
        let k = g.linear(x, layer.w_k, layer.b_k)?;
        let v = g.linear(x, layer.w_v, layer.b_v)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(c.n_heads);
        let mut attention = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores)?;
            attention.push(weights);
            let weights = match dropout.as_deref_mut() {
                Some(rng) => g.dropout(weights, c.dropout, rng),
                None => weights,
            };
            heads.push(g.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attended = g.linear(merged, layer.w_o, layer.b_o)?;
        let residual = g.add(x, attended)?;
        let z = g.layer_norm(residual, layer.norm1_gain, layer.norm1_shift, LAYER_NORM_EPS)?;

        let hidden = g.linear(z, layer.ff_w1, layer.ff_b1)?;
        let hidden = g.relu(hidden);
        let ff = g.linear(hidden, layer.ff_w2, layer.ff_b2)?;
        let ff = match dropout {
            Some(rng) => g.dropout(ff, c.dropout, rng),
            None => ff,
        };
        let residual = g.add(z, ff)?;
        let tokens = g.layer_norm(residual, layer.norm2_gain, layer.norm2_shift, LAYER_NORM_EPS)?;
        Ok(BlockOutput { tokens, attention })
    }

    /// Flattens all tokens and regresses `[n_targets × horizon]`.
    pub fn decode(&self, g: &mut Graph, p: &Params<Var>, tokens: Var) -> Result<Var> {
        let flat = g.flatten(tokens)?;
        let out = g.linear(flat, p.decoder_w, p.decoder_b)?;
        g.reshape(out, vec![self.config.n_targets, self.config.horizon])
    }

    /// Full forward pass for one sample. Dropout is active only when an RNG is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Params<Var>,
        history: Var,
        forecast: Option<Var>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let hist_tokens = self.embed_history(g, p, history)?;
        let mut tokens = match self.embed_forecast(g, p, forecast)? {
            Some(extra) => g.concat_rows(&[hist_tokens, extra])?,
            None => hist_tokens,
        };
        let mut attention = Vec::with_capacity(p.layers.len());
        for layer in &p.layers {
            let block = self.encoder_block(g, layer, tokens, dropout.as_deref_mut())?;
            tokens = block.tokens;
            attention.push(block.attention);
        }
        let prediction = self.decode(g, p, tokens)?;
        Ok(ForwardOutput {
            prediction,
            tokens,
            attention,
        })
    }

    /// Inference on one sample, in standardized units.
    pub fn predict(&self, history: &Tensor, forecast: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let h = g.constant(history.clone());
        let f = forecast.map(|f| g.constant(f.clone()));
        let out = self.forward(&mut g, &p, h, f, None)?;
        Ok(g.value(out.prediction).clone())
    }

    pub fn predict_batch(&self, batch: &[(Tensor, Option<Tensor>)]) -> Result<Vec<Tensor>> {
        batch.iter().map(|(h, f)| self.predict(h, f.as_ref())).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let expected = ModelParams::shapes(&file.config);
        if expected.len() != file.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} arrays, config implies {}",
                file.params.len(),
                expected.len()
            )));
        }
        let mut arrays: HashMap<String, NamedArray> = file.params.into_iter().map(|a| (a.name.clone(), a)).collect();
        let template = ModelParams::layout(&file.config, |_, _| ());
        let mut failure = None;
        let params = template.map(|name, _| {
            let built = arrays
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))
                .and_then(|a| Tensor::new(a.shape, a.values));
            built.unwrap_or_else(|e| {
                failure.get_or_insert(e);
                Tensor::scalar(0.0)
            })
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Self::from_parts(file.config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{numerical_gradient, relative_error};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy_config() -> ModelConfig {
        ModelConfig {
            n_hist_vars: 2,
            n_forecast_vars: 1,
            n_targets: 2,
            hist_len: 16,
            forecast_len: 3,
            horizon: 4,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            patch_stride: 4,
            kernel1: 4,
            kernel2: 1,
            dropout: 0.0,
            seed: 5,
        }
    }

    fn history_tokens(model: &AquaCast, history: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let h = g.constant(history.clone());
        let t = model.embed_history(&mut g, &p, h).unwrap();
        g.value(t).clone()
    }

    #[test]
    fn token_count_from_patching() {
        let cfg = ModelConfig {
            hist_len: 8,
            kernel1: 2,
            patch_stride: 2,
            forecast_len: 4,
            horizon: 4,
            d_model: 8,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.history_tokens(), 4);
        let model = AquaCast::new(cfg).unwrap();
        let tokens = history_tokens(&model, &random(&[1, 8], 1));
        assert_eq!(tokens.shape(), &[4, 8]);
    }

    #[test]
    fn zero_history_yields_positional_embeddings() {
        let model = AquaCast::new(toy_config()).unwrap();
        let tokens = history_tokens(&model, &Tensor::zeros(&[2, 16]));
        assert_eq!(tokens, model.params().positional);
    }

    #[test]
    fn history_perturbation_respects_receptive_fields() {
        let cfg = ModelConfig {
            n_hist_vars: 3,
            hist_len: 24,
            kernel1: 6,
            patch_stride: 3,
            d_model: 8,
            n_heads: 2,
            ..toy_config()
        };
        let model = AquaCast::new(cfg.clone()).unwrap();
        let base = random(&[3, 24], 2);
        let reference = history_tokens(&model, &base);
        for v in 0..3 {
            for t in 0..24 {
                let mut probe = base.clone();
                probe.data_mut()[v * 24 + t] += 0.5;
                let moved = history_tokens(&model, &probe);
                for token in 0..cfg.history_tokens() {
                    // brute-force receptive field of a token through conv1 (conv2 is pointwise)
                    let covers = (token * 3..token * 3 + 6).contains(&t);
                    let changed = reference.row(token) != moved.row(token);
                    assert_eq!(covers, changed, "channel {v} time {t} token {token}");
                }
            }
        }
    }

    #[test]
    fn forecast_tokens() {
        let mut cfg = toy_config();
        cfg.n_forecast_vars = 0;
        let model = AquaCast::new(cfg).unwrap();
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        assert!(model.embed_forecast(&mut g, &p, None).unwrap().is_none());
        let stray = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            model.embed_forecast(&mut g, &p, Some(stray)),
            Err(Error::Config(_))
        ));

        let model = AquaCast::new(toy_config()).unwrap();
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let zero = g.constant(Tensor::zeros(&[1, 3]));
        let tok = model.embed_forecast(&mut g, &p, Some(zero)).unwrap().unwrap();
        assert_eq!(g.value(tok).data(), model.params().forecast_type[0].data());
        assert!(matches!(model.embed_forecast(&mut g, &p, None), Err(Error::Config(_))));
    }

    #[test]
    fn forecast_length_independent_of_history_length() {
        let cfg = ModelConfig {
            n_hist_vars: 2,
            n_forecast_vars: 1,
            forecast_len: 4,
            horizon: 8,
            d_model: 16,
            n_layers: 1,
            ..ModelConfig::default()
        };
        let model = AquaCast::new(cfg).unwrap();
        let out = model.predict(&random(&[2, 96], 3), Some(&random(&[1, 4], 4))).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
    }

    #[test]
    fn single_token_attention_is_exactly_one() {
        let model = AquaCast::new(toy_config()).unwrap();
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let x = g.constant(random(&[1, 8], 6));
        let out = model.encoder_block(&mut g, &p.layers[0], x, None).unwrap();
        for a in out.attention {
            assert_eq!(g.value(a).data(), &[1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = AquaCast::new(toy_config()).unwrap();
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let h = g.constant(random(&[2, 16], 7));
        let f = g.constant(random(&[1, 3], 8));
        let out = model.forward(&mut g, &p, h, Some(f), None).unwrap();
        for layer in out.attention {
            for head in layer {
                let a = g.value(head);
                assert_eq!(a.shape(), &[5, 5]);
                for row in a.to_rows() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    fn layer_norm_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter().map(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt()).collect()
            })
            .collect()
    }

    #[test]
    fn block_without_attention_output_or_ff_is_double_layer_norm() {
        let mut model = AquaCast::new(toy_config()).unwrap();
        {
            let layer = &mut model.params_mut().layers[0];
            for t in [&mut layer.w_o, &mut layer.ff_w2, &mut layer.ff_w1] {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = random(&[5, 8], 9);
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = model.encoder_block(&mut g, &p.layers[0], xv, None).unwrap();
        let expected = layer_norm_rows(&layer_norm_rows(&x.to_rows()));
        for (got, want) in g.value(out.tokens).to_rows().iter().zip(&expected) {
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn decoder_is_affine() {
        let model = AquaCast::new(toy_config()).unwrap();
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let zeros = g.constant(Tensor::zeros(&[5, 8]));
        let out = model.decode(&mut g, &p, zeros).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 4]);
        assert_eq!(g.value(out).data(), model.params().decoder_b.data());
    }

    #[test]
    fn decoder_output_sizes() {
        let single = ModelConfig::for_layout(4, 0, 1, 96);
        let model = AquaCast::new(single).unwrap();
        assert_eq!(model.predict(&random(&[4, 96], 10), None).unwrap().shape(), &[1, 96]);

        let multi = ModelConfig::for_layout(4, 0, 4, 96);
        let model = AquaCast::new(multi).unwrap();
        assert_eq!(model.predict(&random(&[4, 96], 10), None).unwrap().len(), 384);
    }

    #[test]
    fn forward_token_counts_per_rain_configuration() {
        let no_rain = ModelConfig::for_layout(4, 0, 4, 96);
        let rain_hist = ModelConfig::for_layout(5, 0, 4, 96);
        let rain_full = ModelConfig::for_layout(5, 1, 4, 96);
        for (cfg, expected) in [(no_rain, 12), (rain_hist, 12), (rain_full, 13)] {
            let model = AquaCast::new(cfg.clone()).unwrap();
            let mut g = Graph::new();
            let p = model.bind_frozen(&mut g);
            let h = g.constant(random(&[cfg.n_hist_vars, 96], 11));
            let f = (cfg.n_forecast_vars > 0).then(|| g.constant(random(&[1, 96], 12)));
            let out = model.forward(&mut g, &p, h, f, None).unwrap();
            assert_eq!(g.value(out.tokens).shape(), &[expected, 64]);
        }
    }

    #[test]
    fn batch_predictions_are_independent_of_batch_size() {
        let model = AquaCast::new(toy_config()).unwrap();
        let batch: Vec<(Tensor, Option<Tensor>)> = (0..3)
            .map(|i| (random(&[2, 16], 20 + i), Some(random(&[1, 3], 30 + i))))
            .collect();
        let single = model.predict_batch(&batch).unwrap();
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let twice = model.predict_batch(&doubled).unwrap();
        assert_eq!(&twice[..3], single.as_slice());
        assert_eq!(&twice[3..], single.as_slice());
    }

    fn toy_loss(model: &AquaCast, history: &Tensor, forecast: &Tensor, target: &Tensor) -> f64 {
        let pred = model.predict(history, Some(forecast)).unwrap();
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / pred.len() as f64
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let model = AquaCast::new(toy_config()).unwrap();
        let history = random(&[2, 16], 40);
        let forecast = random(&[1, 3], 41);
        let target = random(&[2, 4], 42);

        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let h = g.constant(history.clone());
        let f = g.constant(forecast.clone());
        let out = model.forward(&mut g, &p, h, Some(f), None).unwrap();
        let t = g.constant(target.clone());
        let loss = g.mse_loss(out.prediction, t).unwrap();
        g.backward(loss).unwrap();

        let handles = p.into_vec();
        let names = model.params().names();
        for (idx, (name, var)) in names.iter().zip(handles).enumerate() {
            let analytic = g.grad(var).unwrap();
            let numeric = numerical_gradient(
                |probe| {
                    let mut m = model.clone();
                    *m.params_mut().tensors_mut()[idx] = probe.clone();
                    Ok(toy_loss(&m, &history, &forecast, &target))
                },
                model.params().tensors()[idx].1,
                1e-4,
            )
            .unwrap();
            let err = relative_error(analytic.data(), numeric.data());
            assert!(err <= 1e-3, "{name}: relative error {err}");
        }
    }

    #[test]
    fn forecast_input_influences_output() {
        let model = AquaCast::new(toy_config()).unwrap();
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let h = g.constant(random(&[2, 16], 50));
        let f = g.param(random(&[1, 3], 51));
        let out = model.forward(&mut g, &p, h, Some(f), None).unwrap();
        let s = g.sum(out.prediction);
        g.backward(s).unwrap();
        assert!(g.grad(f).unwrap().data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn forecast_tokens_add_no_attention_parameters() {
        let base = toy_config();
        let mut without = base.clone();
        without.n_forecast_vars = 0;
        let extra = base.parameter_count() - without.parameter_count();
        let d = base.d_model;
        let expected = base.forecast_len * d + d + d * base.output_len();
        assert_eq!(extra, expected);
        assert_eq!(base.attention_parameter_count(), without.attention_parameter_count());
        let encoder: usize = ModelParams::init(&base)
            .tensors()
            .iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .map(|(_, t)| t.len())
            .sum();
        assert_eq!(encoder, base.attention_parameter_count());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = AquaCast::new(toy_config()).unwrap();
        let text = model.to_json().unwrap();
        let back = AquaCast::from_json(&text).unwrap();
        assert_eq!(back, model);
        for ((_, a), (_, b)) in model.params().tensors().iter().zip(back.params().tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_mismatched_arrays() {
        let model = AquaCast::new(toy_config()).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
        value["config"]["d_model"] = serde_json::json!(16);
        assert!(AquaCast::from_json(&value.to_string()).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig {
                d_model: 10,
                n_heads: 4,
                ..ModelConfig::default()
            },
            ModelConfig {
                kernel1: 7,
                ..ModelConfig::default()
            },
            ModelConfig {
                n_targets: 2,
                n_hist_vars: 1,
                ..ModelConfig::default()
            },
            ModelConfig {
                n_targets: 0,
                ..ModelConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(AquaCast::new(cfg), Err(Error::Config(_))));
        }
        let model = AquaCast::new(toy_config()).unwrap();
        assert!(model.predict(&random(&[3, 16], 1), Some(&random(&[1, 3], 1))).is_err());
    }
}

//! Minimal stacked-layer transformer in double precision: per-head
//! attention, post-norm residuals, and a ReLU feed-forward block with
//! d_ff = 4d. Supports a masked or causal objective, exact gradients, and a
//! content fingerprint that pins the frozen core during overlay training.

mod backward;
mod forward;
mod scoring;

pub use backward::{backward, Gradients};
pub use forward::{forward, forward_embeddings, forward_with_cache, input_rows, LayerCache, RunCache};
pub use scoring::{lm_loss, grad_tunable, mask_plan, pseudo_logprob, sequence_logprob, MaskPlan};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const LN_EPS: f64 = 1e-12;

const MAGIC: &[u8; 8] = b"FAIRTUNE";
const FORMAT_VERSION: u32 = 1;
pub(crate) const KIND_CORE: u8 = 0;
pub(crate) const KIND_OVERLAY: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Masked,
    Causal,
}

impl Objective {
    fn code(self) -> u8 {
        match self {
            Objective::Masked => 0,
            Objective::Causal => 1,
        }
    }

    fn from_code(code: u8) -> Result<Objective> {
        match code {
            0 => Ok(Objective::Masked),
            1 => Ok(Objective::Causal),
            other => Err(Error::data(format!(
                "model::load: unknown objective code {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub d: usize,
    pub n_head: usize,
    pub t_max: usize,
    pub vocab_size: usize,
    pub objective: Objective,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d / self.n_head
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layer == 0 || self.d == 0 || self.n_head == 0 || self.vocab_size == 0 {
            return Err(Error::invalid(format!(
                "model::config: all dimensions must be positive, got {self:?}"
            )));
        }
        if self.d % self.n_head != 0 {
            return Err(Error::invalid(format!(
                "model::config: d = {} not divisible by n_head = {}",
                self.d, self.n_head
            )));
        }
        if self.t_max < 2 {
            return Err(Error::invalid(format!(
                "model::config: t_max must be at least 2, got {}",
                self.t_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormParams {
    fn ones(d: usize) -> Self {
        LayerNormParams {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn zeros(d: usize) -> Self {
        LayerNormParams {
            gain: vec![0.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    /// Per head: d x d_head projections.
    pub w_q: Vec<Mat>,
    pub w_k: Vec<Mat>,
    pub w_v: Vec<Mat>,
    pub w_o: Mat,
    pub ln_attn: LayerNormParams,
    pub w_1: Mat,
    pub b_1: Vec<f64>,
    pub w_2: Mat,
    pub b_2: Vec<f64>,
    pub ln_ffn: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct CoreModel {
    pub config: ModelConfig,
    pub token_embedding: Mat,
    pub position_embedding: Mat,
    pub layers: Vec<LayerParams>,
    pub output_projection: Mat,
}

pub const INIT_STD: f64 = 0.02;

impl CoreModel {
    /// Fresh model: weight matrices Gaussian with sigma 0.02, biases zero,
    /// layer-norm gains one. Draws follow the canonical tensor order, so a
    /// seed pins every parameter.
    pub fn new(config: ModelConfig, seed: u64) -> Result<CoreModel> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let (d, dh, dff) = (config.d, config.d_head(), config.d_ff());
        let token_embedding = Mat::gaussian(config.vocab_size, d, INIT_STD, &mut rng);
        let position_embedding = Mat::gaussian(config.t_max, d, INIT_STD, &mut rng);
        let layers = (0..config.n_layer)
            .map(|_| LayerParams {
                w_q: (0..config.n_head)
                    .map(|_| Mat::gaussian(d, dh, INIT_STD, &mut rng))
                    .collect(),
                w_k: (0..config.n_head)
                    .map(|_| Mat::gaussian(d, dh, INIT_STD, &mut rng))
                    .collect(),
                w_v: (0..config.n_head)
                    .map(|_| Mat::gaussian(d, dh, INIT_STD, &mut rng))
                    .collect(),
                w_o: Mat::gaussian(d, d, INIT_STD, &mut rng),
                ln_attn: LayerNormParams::ones(d),
                w_1: Mat::gaussian(d, dff, INIT_STD, &mut rng),
                b_1: vec![0.0; dff],
                w_2: Mat::gaussian(dff, d, INIT_STD, &mut rng),
                b_2: vec![0.0; d],
                ln_ffn: LayerNormParams::ones(d),
            })
            .collect();
        let output_projection = Mat::gaussian(d, config.vocab_size, INIT_STD, &mut rng);
        Ok(CoreModel {
            config,
            token_embedding,
            position_embedding,
            layers,
            output_projection,
        })
    }

    /// Same shapes, all parameters zero. Used both as a gradient holder and
    /// as the uniform-logits model in tests.
    pub fn zeros_like(&self) -> CoreModel {
        let (d, dh, dff) = (self.config.d, self.config.d_head(), self.config.d_ff());
        CoreModel {
            config: self.config,
            token_embedding: Mat::zeros(self.config.vocab_size, d),
            position_embedding: Mat::zeros(self.config.t_max, d),
            layers: (0..self.config.n_layer)
                .map(|_| LayerParams {
                    w_q: (0..self.config.n_head).map(|_| Mat::zeros(d, dh)).collect(),
                    w_k: (0..self.config.n_head).map(|_| Mat::zeros(d, dh)).collect(),
                    w_v: (0..self.config.n_head).map(|_| Mat::zeros(d, dh)).collect(),
                    w_o: Mat::zeros(d, d),
                    ln_attn: LayerNormParams::zeros(d),
                    w_1: Mat::zeros(d, dff),
                    b_1: vec![0.0; dff],
                    w_2: Mat::zeros(dff, d),
                    b_2: vec![0.0; d],
                    ln_ffn: LayerNormParams::zeros(d),
                })
                .collect(),
            output_projection: Mat::zeros(d, self.config.vocab_size),
        }
    }

    /// Parameter vectors in the canonical order used by checkpoints, the
    /// fingerprint, optimizer state, and gradient walks.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::with_capacity(3 + self.layers.len() * 12);
        out.push(&self.token_embedding.data);
        out.push(&self.position_embedding.data);
        for layer in &self.layers {
            for m in &layer.w_q {
                out.push(&m.data);
            }
            for m in &layer.w_k {
                out.push(&m.data);
            }
            for m in &layer.w_v {
                out.push(&m.data);
            }
            out.push(&layer.w_o.data);
            out.push(&layer.ln_attn.gain);
            out.push(&layer.ln_attn.bias);
            out.push(&layer.w_1.data);
            out.push(&layer.b_1);
            out.push(&layer.w_2.data);
            out.push(&layer.b_2);
            out.push(&layer.ln_ffn.gain);
            out.push(&layer.ln_ffn.bias);
        }
        out.push(&self.output_projection.data);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(3 + self.layers.len() * 12);
        out.push(&mut self.token_embedding.data);
        out.push(&mut self.position_embedding.data);
        for layer in &mut self.layers {
            for m in &mut layer.w_q {
                out.push(&mut m.data);
            }
            for m in &mut layer.w_k {
                out.push(&mut m.data);
            }
            for m in &mut layer.w_v {
                out.push(&mut m.data);
            }
            out.push(&mut layer.w_o.data);
            out.push(&mut layer.ln_attn.gain);
            out.push(&mut layer.ln_attn.bias);
            out.push(&mut layer.w_1.data);
            out.push(&mut layer.b_1);
            out.push(&mut layer.w_2.data);
            out.push(&mut layer.b_2);
            out.push(&mut layer.ln_ffn.gain);
            out.push(&mut layer.ln_ffn.bias);
        }
        out.push(&mut self.output_projection.data);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_config(&mut buf, &self.config);
        for tensor in self.tensors() {
            write_tensor(&mut buf, tensor);
        }
        buf
    }

    /// Content hash of config plus every parameter, hex-encoded. Any change
    /// to any core parameter changes this value.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.payload());
        hex_str(&hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.param_count() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(KIND_CORE);
        buf.extend_from_slice(&self.payload());
        std::fs::write(path, buf)
            .map_err(|e| Error::io(format!("model::save: {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<CoreModel> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("model::load: {}", path.display()), e))?;
        let mut r = Reader::new(&bytes, path.display().to_string());
        r.expect_header(KIND_CORE)?;
        let config = r.read_config()?;
        config.validate()?;
        let mut model = CoreModel::new(config, 0)?.zeros_like();
        for tensor in model.tensors_mut() {
            r.read_tensor_into(tensor)?;
        }
        r.expect_end()?;
        Ok(model)
    }
}

/// Total core parameter count for a config, without instantiating it.
pub fn core_param_count(config: &ModelConfig) -> usize {
    let (d, dff) = (config.d, config.d_ff());
    let per_layer = 3 * d * d + d * d + 2 * d + d * dff + dff + dff * d + d + 2 * d;
    config.vocab_size * d + config.t_max * d + config.n_layer * per_layer + d * config.vocab_size
}

pub(crate) fn hex_str(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_config(buf: &mut Vec<u8>, config: &ModelConfig) {
    for v in [
        config.n_layer,
        config.d,
        config.n_head,
        config.t_max,
        config.vocab_size,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.push(config.objective.code());
}

pub(crate) fn write_tensor(buf: &mut Vec<u8>, tensor: &[f64]) {
    buf.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
    for v in tensor {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: String,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], origin: String) -> Self {
        Reader {
            bytes,
            pos: 0,
            origin,
        }
    }

    fn fail(&self, what: &str) -> Error {
        Error::data(format!("model::load: {}: {what}", self.origin))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn expect_header(&mut self, kind: u8) -> Result<()> {
        if self.take(8)? != MAGIC {
            return Err(self.fail("bad magic (not a fairtune checkpoint)"));
        }
        let version = u32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(self.fail(&format!("unsupported format version {version}")));
        }
        let got = self.read_u8()?;
        if got != kind {
            return Err(self.fail(&format!(
                "wrong checkpoint kind {got} (expected {kind})"
            )));
        }
        Ok(())
    }

    pub(crate) fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn read_config(&mut self) -> Result<ModelConfig> {
        let n_layer = self.read_u32()? as usize;
        let d = self.read_u32()? as usize;
        let n_head = self.read_u32()? as usize;
        let t_max = self.read_u32()? as usize;
        let vocab_size = self.read_u32()? as usize;
        let objective = Objective::from_code(self.read_u8()?)?;
        Ok(ModelConfig {
            n_layer,
            d,
            n_head,
            t_max,
            vocab_size,
            objective,
        })
    }

    pub(crate) fn read_tensor_into(&mut self, tensor: &mut Vec<f64>) -> Result<()> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        if len != tensor.len() {
            return Err(self.fail(&format!(
                "tensor length {len} does not match expected {}",
                tensor.len()
            )));
        }
        let raw = self.take(len * 8)?;
        for (i, v) in tensor.iter_mut().enumerate() {
            *v = f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap());
        }
        Ok(())
    }

    pub(crate) fn read_exact_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail("trailing bytes after checkpoint payload"));
        }
        Ok(())
    }
}

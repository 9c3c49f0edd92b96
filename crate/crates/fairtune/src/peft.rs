//! Tunable overlays over a frozen core: prefix key/value vectors, prompt
//! embeddings, bottleneck adapters, and full fine-tuning (every core
//! parameter tunable, no extra ones). Overlays are bound to the core they
//! were created on via the core's content fingerprint.

use crate::error::{Error, Result};
use crate::model::{
    core_param_count, CoreModel, ModelConfig, Reader, INIT_STD, KIND_OVERLAY,
};
use crate::rng::rng_from;
use crate::tensor::Mat;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    Full,
    Prefix { l: usize },
    Prompt { l: usize },
    Adapter { r: usize },
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Full => "full",
            MethodSpec::Prefix { .. } => "prefix",
            MethodSpec::Prompt { .. } => "prompt",
            MethodSpec::Adapter { .. } => "adapter",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrefixParams {
    pub l: usize,
    /// keys[layer][head], values[layer][head]: l x d_head.
    pub keys: Vec<Vec<Mat>>,
    pub values: Vec<Vec<Mat>>,
}

#[derive(Debug, Clone)]
pub struct PromptParams {
    pub l: usize,
    /// l x d, consumed as the first l input rows.
    pub p: Mat,
}

#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub r: usize,
    /// Per layer: down d x (d/r) with bias, up (d/r) x d with bias.
    pub down: Vec<Mat>,
    pub down_bias: Vec<Vec<f64>>,
    pub up: Vec<Mat>,
    pub up_bias: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum OverlayKind {
    Full,
    Prefix(PrefixParams),
    Prompt(PromptParams),
    Adapter(AdapterParams),
}

#[derive(Debug, Clone)]
pub struct TuningOverlay {
    pub kind: OverlayKind,
    pub core_fingerprint: String,
}

/// Initializes an overlay for the core: prefix and prompt vectors Gaussian
/// sigma 0.02; adapter down-projections Gaussian with zero up-projections
/// and biases, so training starts at the identity function.
pub fn attach(core: &CoreModel, spec: MethodSpec, seed: u64) -> Result<TuningOverlay> {
    let config = &core.config;
    let (d, dh) = (config.d, config.d_head());
    let mut rng = rng_from(seed);
    let kind = match spec {
        MethodSpec::Full => OverlayKind::Full,
        MethodSpec::Prefix { l } => {
            check_length_budget("prefix", l, config)?;
            let mut keys = Vec::with_capacity(config.n_layer);
            let mut values = Vec::with_capacity(config.n_layer);
            for _ in 0..config.n_layer {
                keys.push(
                    (0..config.n_head)
                        .map(|_| Mat::gaussian(l, dh, INIT_STD, &mut rng))
                        .collect(),
                );
                values.push(
                    (0..config.n_head)
                        .map(|_| Mat::gaussian(l, dh, INIT_STD, &mut rng))
                        .collect(),
                );
            }
            OverlayKind::Prefix(PrefixParams { l, keys, values })
        }
        MethodSpec::Prompt { l } => {
            check_length_budget("prompt", l, config)?;
            OverlayKind::Prompt(PromptParams {
                l,
                p: Mat::gaussian(l, d, INIT_STD, &mut rng),
            })
        }
        MethodSpec::Adapter { r } => {
            if r == 0 {
                return Err(Error::invalid(
                    "peft::attach: adapter reduction factor must be positive",
                ));
            }
            if d % r != 0 {
                return Err(Error::invalid(format!(
                    "peft::attach: d = {d} not divisible by reduction factor r = {r}"
                )));
            }
            let db = d / r;
            let mut down = Vec::with_capacity(config.n_layer);
            let mut down_bias = Vec::with_capacity(config.n_layer);
            let mut up = Vec::with_capacity(config.n_layer);
            let mut up_bias = Vec::with_capacity(config.n_layer);
            for _ in 0..config.n_layer {
                down.push(Mat::gaussian(d, db, INIT_STD, &mut rng));
                down_bias.push(vec![0.0; db]);
                up.push(Mat::zeros(db, d));
                up_bias.push(vec![0.0; d]);
            }
            OverlayKind::Adapter(AdapterParams {
                r,
                down,
                down_bias,
                up,
                up_bias,
            })
        }
    };
    Ok(TuningOverlay {
        kind,
        core_fingerprint: core.fingerprint(),
    })
}

fn check_length_budget(what: &str, l: usize, config: &ModelConfig) -> Result<()> {
    // l prepended slots must leave room for at least one real token
    if l + 1 > config.t_max {
        return Err(Error::invalid(format!(
            "peft::attach: {what} length {l} leaves no room for tokens under t_max = {}",
            config.t_max
        )));
    }
    Ok(())
}

/// Exact tunable-parameter count for a method on a config.
pub fn count_tunable(spec: MethodSpec, config: &ModelConfig) -> usize {
    let d = config.d;
    match spec {
        MethodSpec::Full => core_param_count(config),
        MethodSpec::Prefix { l } => 2 * l * d * config.n_layer,
        MethodSpec::Prompt { l } => l * d,
        MethodSpec::Adapter { r } => config.n_layer * (2 * d * (d / r) + (d / r) + d),
    }
}

/// Adapter count without biases; equals the prefix count when l = d / (2r)
/// holds layer-for-layer (l=16 vs r=48 at d=768 both give 294,912).
pub fn adapter_weights_only_count(r: usize, config: &ModelConfig) -> usize {
    config.n_layer * 2 * config.d * (config.d / r)
}

impl TuningOverlay {
    pub fn spec(&self) -> MethodSpec {
        match &self.kind {
            OverlayKind::Full => MethodSpec::Full,
            OverlayKind::Prefix(p) => MethodSpec::Prefix { l: p.l },
            OverlayKind::Prompt(p) => MethodSpec::Prompt { l: p.l },
            OverlayKind::Adapter(a) => MethodSpec::Adapter { r: a.r },
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self.kind, OverlayKind::Full)
    }

    /// Input rows this overlay prepends (prompt only).
    pub fn prompt_len(&self) -> usize {
        match &self.kind {
            OverlayKind::Prompt(p) => p.l,
            _ => 0,
        }
    }

    /// Overlay parameter vectors in canonical (checkpoint) order. Empty for
    /// Full, whose tunable set is the core itself.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        match &self.kind {
            OverlayKind::Full => {}
            OverlayKind::Prefix(p) => {
                for layer in 0..p.keys.len() {
                    for m in &p.keys[layer] {
                        out.push(&m.data);
                    }
                    for m in &p.values[layer] {
                        out.push(&m.data);
                    }
                }
            }
            OverlayKind::Prompt(p) => out.push(&p.p.data),
            OverlayKind::Adapter(a) => {
                for i in 0..a.down.len() {
                    out.push(&a.down[i].data);
                    out.push(&a.down_bias[i]);
                    out.push(&a.up[i].data);
                    out.push(&a.up_bias[i]);
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        match &mut self.kind {
            OverlayKind::Full => {}
            OverlayKind::Prefix(p) => {
                for (keys, values) in p.keys.iter_mut().zip(p.values.iter_mut()) {
                    for m in keys {
                        out.push(&mut m.data);
                    }
                    for m in values {
                        out.push(&mut m.data);
                    }
                }
            }
            OverlayKind::Prompt(p) => out.push(&mut p.p.data),
            OverlayKind::Adapter(a) => {
                let layers = a
                    .down
                    .iter_mut()
                    .zip(a.down_bias.iter_mut())
                    .zip(a.up.iter_mut().zip(a.up_bias.iter_mut()));
                for ((down, down_bias), (up, up_bias)) in layers {
                    out.push(&mut down.data);
                    out.push(down_bias);
                    out.push(&mut up.data);
                    out.push(up_bias);
                }
            }
        }
        out
    }

    pub fn zeros_like(&self) -> TuningOverlay {
        let mut clone = self.clone();
        for t in clone.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        clone
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// The overlay must have been attached to (or loaded against) this exact
    /// core; a changed core invalidates trained overlays.
    pub fn bind_check(&self, core: &CoreModel) -> Result<()> {
        let fp = core.fingerprint();
        if fp != self.core_fingerprint {
            return Err(Error::invalid(format!(
                "peft::bind_check: overlay was trained on core {} but the given core is {}",
                &self.core_fingerprint[..12.min(self.core_fingerprint.len())],
                &fp[..12]
            )));
        }
        Ok(())
    }

    fn kind_code(&self) -> u8 {
        match self.kind {
            OverlayKind::Full => 0,
            OverlayKind::Prefix(_) => 1,
            OverlayKind::Prompt(_) => 2,
            OverlayKind::Adapter(_) => 3,
        }
    }

    fn dim(&self) -> usize {
        match &self.kind {
            OverlayKind::Full => 0,
            OverlayKind::Prefix(p) => p.l,
            OverlayKind::Prompt(p) => p.l,
            OverlayKind::Adapter(a) => a.r,
        }
    }

    pub fn save(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"FAIRTUNE");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(KIND_OVERLAY);
        buf.push(self.kind_code());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        crate::model::write_config(&mut buf, config);
        assert_eq!(self.core_fingerprint.len(), 64, "fingerprint is sha256 hex");
        buf.extend_from_slice(self.core_fingerprint.as_bytes());
        for tensor in self.tensors() {
            crate::model::write_tensor(&mut buf, tensor);
        }
        std::fs::write(path, buf)
            .map_err(|e| Error::io(format!("peft::save: {}", path.display()), e))
    }

    /// Loads an overlay checkpoint; returns the overlay and the core config
    /// it was built for. Call `bind_check` against the core before use.
    pub fn load(path: &Path) -> Result<(TuningOverlay, ModelConfig)> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("peft::load: {}", path.display()), e))?;
        let mut r = Reader::new(&bytes, path.display().to_string());
        r.expect_header(KIND_OVERLAY)?;
        let kind_code = r.read_u8()?;
        let dim = r.read_u32()? as usize;
        let config = r.read_config()?;
        config.validate()?;
        let fp_bytes = r.read_exact_bytes(64)?;
        let core_fingerprint = String::from_utf8(fp_bytes.to_vec())
            .map_err(|_| Error::data(format!("peft::load: {}: bad fingerprint", path.display())))?;
        let spec = match kind_code {
            0 => MethodSpec::Full,
            1 => MethodSpec::Prefix { l: dim },
            2 => MethodSpec::Prompt { l: dim },
            3 => MethodSpec::Adapter { r: dim },
            other => {
                return Err(Error::data(format!(
                    "peft::load: {}: unknown overlay kind {other}",
                    path.display()
                )))
            }
        };
        // shape scaffold, then overwrite with stored values
        let scaffold_core = CoreModel::new(config, 0)?.zeros_like();
        let mut overlay = attach(&scaffold_core, spec, 0)?;
        overlay.core_fingerprint = core_fingerprint;
        for tensor in overlay.tensors_mut() {
            r.read_tensor_into(tensor)?;
        }
        r.expect_end()?;
        Ok((overlay, config))
    }
}

/// The tunable parameter vectors for a (core, overlay) pair: the core's own
/// tensors under Full, the overlay's otherwise. Order matches `tensors()`.
pub fn tunable_tensors_mut<'a>(
    core: &'a mut CoreModel,
    overlay: &'a mut TuningOverlay,
) -> Vec<&'a mut Vec<f64>> {
    if overlay.is_full() {
        core.tensors_mut()
    } else {
        overlay.tensors_mut()
    }
}

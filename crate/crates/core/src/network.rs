//! The full fusion network: per-frame shallow features, spatial attention
//! against the reference frame, token embedding, stacked context-aware
//! transformer blocks with dilated convolutions, a global skip and the HDR
//! head.

use std::fmt::Write as _;

use crate::attention::{self, block_param_specs, conv_specs, BlockDims};
use crate::error::{Error, Result};
use crate::ldr::{stack_inputs, Image, NetworkInput};
use crate::params::{InitScheme, ParamSpec, ParamVars, Weights};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    pub num_ctb: usize,
    pub cavits_per_ctb: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lce_reduction: usize,
    pub lce_conv_ratio: usize,
    pub shallow_channels: usize,
    pub dilation: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            embed_dim: 60,
            num_ctb: 3,
            cavits_per_ctb: 6,
            window: 8,
            heads: 6,
            mlp_ratio: 2,
            lce_reduction: 4,
            lce_conv_ratio: 2,
            shallow_channels: 60,
            dilation: 2,
            input_channels: 6,
            output_channels: 3,
        }
    }
}

const KEYS: [&str; 12] = [
    "embed_dim",
    "num_ctb",
    "cavits_per_ctb",
    "window",
    "heads",
    "mlp_ratio",
    "lce_reduction",
    "lce_conv_ratio",
    "shallow_channels",
    "dilation",
    "input_channels",
    "output_channels",
];

impl NetworkConfig {
    /// Desk-scale preset.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 24,
            shallow_channels: 24,
            num_ctb: 1,
            cavits_per_ctb: 2,
            heads: 4,
            ..Self::default()
        }
    }

    /// Smallest preset, used for closed-form parameter counting.
    pub fn toy() -> Self {
        Self {
            embed_dim: 12,
            shallow_channels: 12,
            num_ctb: 1,
            cavits_per_ctb: 2,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.embed_dim,
            heads: self.heads,
            window: self.window,
            mlp_ratio: self.mlp_ratio,
            lce_reduction: self.lce_reduction,
            lce_conv_ratio: self.lce_conv_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_dims().validate()?;
        if self.num_ctb == 0 || self.cavits_per_ctb == 0 {
            return Err(Error::Config("num_ctb and cavits_per_ctb must be at least 1".into()));
        }
        if self.shallow_channels == 0 || self.dilation == 0 || self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::Config(
                "shallow_channels, dilation and channel counts must be positive".into(),
            ));
        }
        Ok(())
    }

    fn field(&mut self, key: &str) -> Option<&mut usize> {
        Some(match key {
            "embed_dim" => &mut self.embed_dim,
            "num_ctb" => &mut self.num_ctb,
            "cavits_per_ctb" => &mut self.cavits_per_ctb,
            "window" => &mut self.window,
            "heads" => &mut self.heads,
            "mlp_ratio" => &mut self.mlp_ratio,
            "lce_reduction" => &mut self.lce_reduction,
            "lce_conv_ratio" => &mut self.lce_conv_ratio,
            "shallow_channels" => &mut self.shallow_channels,
            "dilation" => &mut self.dilation,
            "input_channels" => &mut self.input_channels,
            "output_channels" => &mut self.output_channels,
            _ => return None,
        })
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Sets one field from its textual value. Unknown keys are a
    /// configuration error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self
            .field(key)
            .ok_or_else(|| Error::Config(format!("unknown network key `{key}`")))?;
        *slot = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("`{key}` expects a non-negative integer, got `{value}`")))?;
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut me = *self;
        let mut out = String::new();
        for key in KEYS {
            let v = *me.field(key).expect("known key");
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every trainable tensor, in a fixed declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.shallow_channels;
        let d = self.embed_dim;
        let mut out = Vec::new();
        for s in 1..=3 {
            conv_specs(&mut out, &format!("extract.stream{s}"), 3, self.input_channels, c, false);
        }
        for a in [1, 3] {
            conv_specs(&mut out, &format!("extract.att{a}.conv1"), 3, 2 * c, c, false);
            conv_specs(&mut out, &format!("extract.att{a}.conv2"), 3, c, c, false);
        }
        conv_specs(&mut out, "embed", 3, 3 * c, d, false);
        let dims = self.block_dims();
        for n in 0..self.num_ctb {
            for m in 0..self.cavits_per_ctb {
                out.extend(block_param_specs(&format!("ctb.{n}.cavit.{m}."), &dims));
            }
            conv_specs(&mut out, &format!("ctb.{n}.dconv"), 3, d, d, true);
        }
        conv_specs(&mut out, "head.conv1", 3, d, d, false);
        conv_specs(&mut out, "head.conv2", 3, d, self.output_channels, false);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    pub fn init_weights<T: Scalar>(&self, seed: u64, scheme: InitScheme) -> Result<Weights<T>> {
        self.validate()?;
        Weights::init(&self.param_specs(), seed, scheme)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Total trainable scalars of a weight set.
pub fn param_count<T: Scalar>(w: &Weights<T>) -> usize {
    w.param_count()
}

/// Shallow 3x3 conv per frame, `[B,H,W,6] -> [B,H,W,C]`.
pub fn extract_features<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, x: [Var; 3]) -> Result<[Var; 3]> {
    Ok([
        attention::conv(tape, x[0], p, "extract.stream1", 1)?,
        attention::conv(tape, x[1], p, "extract.stream2", 1)?,
        attention::conv(tape, x[2], p, "extract.stream3", 1)?,
    ])
}

/// Attention map `m_i` in (0,1) for a non-reference stream `i` in {1, 3}.
pub fn spatial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    index: usize,
    f_i: Var,
    f_ref: Var,
) -> Result<Var> {
    if index != 1 && index != 3 {
        return Err(Error::Contract(format!("spatial attention stream must be 1 or 3, got {index}")));
    }
    let cat = tape.concat(&[f_i, f_ref], 3)?;
    let h = attention::conv(tape, cat, p, &format!("extract.att{index}.conv1"), 1)?;
    let h = tape.leaky_relu(h, 0.1)?;
    let h = attention::conv(tape, h, p, &format!("extract.att{index}.conv2"), 1)?;
    tape.sigmoid(h)
}

/// `M` blocks with alternating shifts, a dilated conv, and the block residual.
pub fn ctb_forward<T: Scalar>(tape: &mut Tape<T>, cfg: &NetworkConfig, p: &ParamVars, n: usize, f0: Var) -> Result<Var> {
    let dims = cfg.block_dims();
    let mut f = f0;
    for m in 0..cfg.cavits_per_ctb {
        f = attention::ca_vit(tape, f, p, &format!("ctb.{n}.cavit.{m}."), &dims, dims.shift_for(m))?;
    }
    let f = attention::conv(tape, f, p, &format!("ctb.{n}.dconv"), cfg.dilation)?;
    tape.add(f, f0)
}

/// The stack of all CTBs applied to embedded features.
pub fn reconstruct<T: Scalar>(tape: &mut Tape<T>, cfg: &NetworkConfig, p: &ParamVars, f_att: Var) -> Result<Var> {
    let mut f = f_att;
    for n in 0..cfg.num_ctb {
        f = ctb_forward(tape, cfg, p, n, f)?;
    }
    Ok(f)
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub features: [Var; 3],
    pub masks: [Var; 2],
    pub f_att: Var,
    pub deep: Var,
    pub output: Var,
}

pub fn forward_trace<T: Scalar>(tape: &mut Tape<T>, cfg: &NetworkConfig, p: &ParamVars, x: [Var; 3]) -> Result<ForwardTrace> {
    let s = tape.shape(x[0]).to_vec();
    if s.len() != 4 || s[3] != cfg.input_channels {
        return Err(Error::shape("forward input", &s, &[cfg.input_channels]));
    }
    if x.iter().any(|&v| tape.shape(v) != s.as_slice()) {
        return Err(Error::shape("forward input", &s, tape.shape(x[1])));
    }
    if s[1] < cfg.window || s[2] < cfg.window {
        return Err(Error::Config(format!(
            "input {}x{} is smaller than the {}x{} attention window",
            s[1], s[2], cfg.window, cfg.window
        )));
    }
    let features = extract_features(tape, p, x)?;
    let [f1, f2, f3] = features;
    let m1 = spatial_attention(tape, p, 1, f1, f2)?;
    let m3 = spatial_attention(tape, p, 3, f3, f2)?;
    let g1 = tape.mul(f1, m1)?;
    let g3 = tape.mul(f3, m3)?;
    let cat = tape.concat(&[g1, f2, g3], 3)?;
    let f_att = attention::conv(tape, cat, p, "embed", 1)?;
    let deep = reconstruct(tape, cfg, p, f_att)?;
    let z = tape.add(deep, f_att)?;
    let h = attention::conv(tape, z, p, "head.conv1", 1)?;
    let h = tape.gelu(h)?;
    let h = attention::conv(tape, h, p, "head.conv2", 1)?;
    let output = tape.sigmoid(h)?;
    Ok(ForwardTrace {
        features,
        masks: [m1, m3],
        f_att,
        deep,
        output,
    })
}

/// `[B,H,W,6]` x 3 -> HDR `[B,H,W,3]` in [0,1].
pub fn forward<T: Scalar>(tape: &mut Tape<T>, cfg: &NetworkConfig, p: &ParamVars, x: [Var; 3]) -> Result<Var> {
    Ok(forward_trace(tape, cfg, p, x)?.output)
}

/// Inference without gradient tracking on a batch of equally sized inputs.
pub fn infer_with<T: Scalar>(cfg: &NetworkConfig, weights: &Weights<T>, inputs: &[&NetworkInput]) -> Result<Vec<Image>> {
    let mut tape = Tape::new().with_finite_checks(false);
    let p = weights.bind(&mut tape, false);
    let [a, b, c] = stack_inputs::<T>(inputs)?;
    let x = [tape.constant(a), tape.constant(b), tape.constant(c)];
    let y = forward(&mut tape, cfg, &p, x)?;
    (0..inputs.len()).map(|i| Image::from_tensor(tape.value(y), i)).collect()
}

/// A configuration paired with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrTransformer<T> {
    pub config: NetworkConfig,
    pub weights: Weights<T>,
}

impl<T: Scalar> HdrTransformer<T> {
    pub fn new(config: NetworkConfig, seed: u64, scheme: InitScheme) -> Result<Self> {
        let weights = config.init_weights(seed, scheme)?;
        Ok(Self { config, weights })
    }

    pub fn from_parts(config: NetworkConfig, weights: Weights<T>) -> Result<Self> {
        config.validate()?;
        weights.check_against(&config.param_specs())?;
        Ok(Self { config, weights })
    }

    /// Inference on a batch of inputs of equal size.
    pub fn infer_batch(&self, inputs: &[&NetworkInput]) -> Result<Vec<Image>> {
        infer_with(&self.config, &self.weights, inputs)
    }

    pub fn infer(&self, input: &NetworkInput) -> Result<Image> {
        Ok(self.infer_batch(&[input])?.remove(0))
    }
}

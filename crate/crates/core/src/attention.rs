//! Context-aware transformer block: windowed self-attention for global
//! context, a convolutional local branch with channel re-weighting, and
//! additive fusion of the two.
//!
//! Token maps are `[B, H, W, D]` tape values.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec, ParamVars};
use crate::tape::{Conv2dSpec, Tape, Var};
use crate::tensor::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Shape hyper-parameters of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Channel-gate bottleneck `D -> D / lce_reduction -> D`.
    pub lce_reduction: usize,
    /// 1 selects a single 3x3 conv in the local branch; `r > 1` a
    /// 1x1 / 3x3 / 1x1 bottleneck of width `D / r`.
    pub lce_conv_ratio: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.window < 2 {
            return bad(format!("window size {} must be at least 2", self.window));
        }
        if self.mlp_ratio == 0 || self.lce_reduction == 0 || self.lce_conv_ratio == 0 {
            return bad("mlp_ratio, lce_reduction and lce_conv_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn gate_width(&self) -> usize {
        (self.dim / self.lce_reduction).max(1)
    }

    pub fn conv_width(&self) -> usize {
        (self.dim / self.lce_conv_ratio).max(1)
    }

    /// Shift of block `m` inside a stack: `0, ws/2, 0, ws/2, ...`.
    pub fn shift_for(&self, m: usize) -> usize {
        if m % 2 == 1 {
            self.window / 2
        } else {
            0
        }
    }
}

pub(crate) fn linear_specs(out: &mut Vec<ParamSpec>, path: &str, fan_in: usize, fan_out: usize, residual: bool) {
    let mut w = ParamSpec::new(format!("{path}.weight"), vec![fan_in, fan_out], Init::Normal(0.02));
    let mut b = ParamSpec::new(format!("{path}.bias"), vec![fan_out], Init::Zeros);
    if residual {
        w = w.residual_last();
        b = b.residual_last();
    }
    out.push(w);
    out.push(b);
}

pub(crate) fn conv_specs(out: &mut Vec<ParamSpec>, path: &str, k: usize, cin: usize, cout: usize, residual: bool) {
    let bound = 1.0 / ((k * k * cin) as f64).sqrt();
    let mut w = ParamSpec::new(format!("{path}.weight"), vec![k, k, cin, cout], Init::Uniform(bound));
    let mut b = ParamSpec::new(format!("{path}.bias"), vec![cout], Init::Uniform(bound));
    if residual {
        w = w.residual_last();
        b = b.residual_last();
    }
    out.push(w);
    out.push(b);
}

fn norm_specs(out: &mut Vec<ParamSpec>, path: &str, d: usize) {
    out.push(ParamSpec::new(format!("{path}.weight"), vec![d], Init::Ones));
    out.push(ParamSpec::new(format!("{path}.bias"), vec![d], Init::Zeros));
}

/// Parameters of one block under `prefix` (e.g. `ctb.0.cavit.1.`).
pub fn block_param_specs(prefix: &str, dims: &BlockDims) -> Vec<ParamSpec> {
    let d = dims.dim;
    let t = dims.window * 2 - 1;
    let mut out = Vec::new();
    norm_specs(&mut out, &format!("{prefix}norm1"), d);
    linear_specs(&mut out, &format!("{prefix}msa.qkv"), d, 3 * d, false);
    linear_specs(&mut out, &format!("{prefix}msa.proj"), d, d, true);
    out.push(ParamSpec::new(
        format!("{prefix}msa.rel_bias"),
        vec![t * t, dims.heads],
        Init::Normal(0.02),
    ));
    norm_specs(&mut out, &format!("{prefix}norm2"), d);
    linear_specs(&mut out, &format!("{prefix}mlp.fc1"), d, dims.mlp_ratio * d, false);
    linear_specs(&mut out, &format!("{prefix}mlp.fc2"), dims.mlp_ratio * d, d, true);
    if dims.lce_conv_ratio == 1 {
        conv_specs(&mut out, &format!("{prefix}lce.conv"), 3, d, d, true);
    } else {
        let c = dims.conv_width();
        conv_specs(&mut out, &format!("{prefix}lce.conv1"), 1, d, c, false);
        conv_specs(&mut out, &format!("{prefix}lce.conv2"), 3, c, c, false);
        conv_specs(&mut out, &format!("{prefix}lce.conv3"), 1, c, d, true);
    }
    let g = dims.gate_width();
    linear_specs(&mut out, &format!("{prefix}lce.fc1"), d, g, false);
    linear_specs(&mut out, &format!("{prefix}lce.fc2"), g, d, false);
    out
}

/// Row-major index into the relative-bias table for every (query, key)
/// pair of a `ws x ws` window.
pub fn relative_position_index(ws: usize) -> Vec<usize> {
    let n = ws * ws;
    let t = 2 * ws - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / ws, i % ws);
        for j in 0..n {
            let (yj, xj) = (j / ws, j % ws);
            idx.push((yi + ws - 1 - yj) * t + (xi + ws - 1 - xj));
        }
    }
    idx
}

/// A token map tiled into `ws x ws` windows, `[B * nH * nW, ws*ws, D]`.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub windows: Var,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    /// Per image: `false` marks padding tokens, indexed `[window, token]`.
    pub valid: Arc<Vec<bool>>,
}

impl WindowSet {
    pub fn windows_per_image(&self) -> usize {
        (self.padded_height / self.window) * (self.padded_width / self.window)
    }

    pub fn num_windows(&self) -> usize {
        self.batch * self.windows_per_image()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn has_padding(&self) -> bool {
        self.padded_height != self.height || self.padded_width != self.width
    }

    pub fn with_windows(&self, windows: Var) -> Self {
        Self {
            windows,
            ..self.clone()
        }
    }

    /// Key mask for logits `[num_windows, heads, n, n]`, `None` when
    /// nothing is padded.
    fn logit_mask(&self, heads: usize) -> Option<Vec<bool>> {
        if !self.has_padding() {
            return None;
        }
        let n = self.tokens_per_window();
        let per = self.windows_per_image();
        let mut mask = Vec::with_capacity(self.num_windows() * heads * n * n);
        for w in 0..self.num_windows() {
            let keys = &self.valid[(w % per) * n..(w % per + 1) * n];
            for _ in 0..heads * n {
                mask.extend_from_slice(keys);
            }
        }
        Some(mask)
    }
}

/// Rolls the map by `(-shift, -shift)`, zero-pads H and W up to multiples
/// of `ws`, then tiles it into windows.
pub fn window_partition<T: Scalar>(tape: &mut Tape<T>, t: Var, ws: usize, shift: usize) -> Result<WindowSet> {
    let s = tape.shape(t).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("window_partition", &s, &[]));
    }
    if ws < 2 || (shift != 0 && shift != ws / 2) {
        return Err(Error::Config(format!("invalid window {ws} / shift {shift}")));
    }
    let (b, h, w, d) = (s[0], s[1], s[2], s[3]);
    let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
    let mut x = t;
    if shift > 0 {
        x = tape.roll(x, 1, -(shift as isize))?;
        x = tape.roll(x, 2, -(shift as isize))?;
    }
    if hp != h {
        x = tape.pad(x, 1, 0, hp - h)?;
    }
    if wp != w {
        x = tape.pad(x, 2, 0, wp - w)?;
    }
    let (nh, nw) = (hp / ws, wp / ws);
    let x = tape.reshape(x, &[b, nh, ws, nw, ws, d])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let windows = tape.reshape(x, &[b * nh * nw, ws * ws, d])?;

    let mut valid = Vec::with_capacity(nh * nw * ws * ws);
    for wy in 0..nh {
        for wx in 0..nw {
            for iy in 0..ws {
                for ix in 0..ws {
                    valid.push(wy * ws + iy < h && wx * ws + ix < w);
                }
            }
        }
    }
    Ok(WindowSet {
        windows,
        batch: b,
        height: h,
        width: w,
        window: ws,
        shift,
        padded_height: hp,
        padded_width: wp,
        valid: Arc::new(valid),
    })
}

/// Inverse of [`window_partition`]: untile, crop the padding, undo the roll.
pub fn window_reverse<T: Scalar>(tape: &mut Tape<T>, w: &WindowSet) -> Result<Var> {
    let s = tape.shape(w.windows).to_vec();
    let ws = w.window;
    let consistent = s.len() == 3
        && ws >= 2
        && w.padded_height % ws == 0
        && w.padded_width % ws == 0
        && w.padded_height >= w.height
        && w.padded_width >= w.width
        && w.padded_height - w.height < ws
        && w.padded_width - w.width < ws
        && s[0] == w.num_windows()
        && s[1] == ws * ws
        && w.valid.len() == w.windows_per_image() * ws * ws;
    if !consistent {
        return Err(Error::Contract(format!(
            "window set metadata ({}x{} pad {}x{} ws {}) does not match windows {s:?}",
            w.height, w.width, w.padded_height, w.padded_width, ws
        )));
    }
    let d = s[2];
    let (nh, nw) = (w.padded_height / ws, w.padded_width / ws);
    let x = tape.reshape(w.windows, &[w.batch, nh, nw, ws, ws, d])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let mut x = tape.reshape(x, &[w.batch, w.padded_height, w.padded_width, d])?;
    if w.padded_height != w.height {
        x = tape.slice(x, 1, 0, w.height)?;
    }
    if w.padded_width != w.width {
        x = tape.slice(x, 2, 0, w.width)?;
    }
    if w.shift > 0 {
        x = tape.roll(x, 1, w.shift as isize)?;
        x = tape.roll(x, 2, w.shift as isize)?;
    }
    Ok(x)
}

/// Windowed multi-head self-attention with relative position bias.
/// Returns the projected windows and the attention probabilities
/// `[num_windows, heads, n, n]`.
pub fn msa_with_attention<T: Scalar>(
    tape: &mut Tape<T>,
    w: &WindowSet,
    p: &ParamVars,
    prefix: &str,
    heads: usize,
) -> Result<(WindowSet, Var)> {
    let s = tape.shape(w.windows).to_vec();
    let (bw, n, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let qkv = tape.linear(
        w.windows,
        p.get(&format!("{prefix}msa.qkv.weight"))?,
        Some(p.get(&format!("{prefix}msa.qkv.bias"))?),
    )?;
    let qkv = tape.reshape(qkv, &[bw, n, 3, heads, hd])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let q = tape.slice(qkv, 0, 0, 1)?;
    let q = tape.reshape(q, &[bw, heads, n, hd])?;
    let q = tape.scale(q, 1.0 / (hd as f64).sqrt())?;
    let k = tape.slice(qkv, 0, 1, 1)?;
    let k = tape.reshape(k, &[bw, heads, n, hd])?;
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let v = tape.slice(qkv, 0, 2, 1)?;
    let v = tape.reshape(v, &[bw, heads, n, hd])?;

    let logits = tape.matmul(q, kt)?;
    let table = p.get(&format!("{prefix}msa.rel_bias"))?;
    let bias = tape.gather(table, Arc::new(relative_position_index(w.window)))?;
    let bias = tape.reshape(bias, &[n, n, heads])?;
    let bias = tape.permute(bias, &[2, 0, 1])?;
    let logits = tape.add(logits, bias)?;
    let mask = w.logit_mask(heads);
    let attn = tape.softmax_masked(logits, mask.as_deref())?;

    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[bw, n, d])?;
    let out = tape.linear(
        out,
        p.get(&format!("{prefix}msa.proj.weight"))?,
        Some(p.get(&format!("{prefix}msa.proj.bias"))?),
    )?;
    Ok((w.with_windows(out), attn))
}

pub fn msa<T: Scalar>(tape: &mut Tape<T>, w: &WindowSet, p: &ParamVars, prefix: &str, heads: usize) -> Result<WindowSet> {
    Ok(msa_with_attention(tape, w, p, prefix, heads)?.0)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ParamVars, path: &str) -> Result<Var> {
    tape.layer_norm(
        x,
        p.get(&format!("{path}.weight"))?,
        p.get(&format!("{path}.bias"))?,
        LN_EPS,
    )
}

fn dense<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ParamVars, path: &str) -> Result<Var> {
    tape.linear(
        x,
        p.get(&format!("{path}.weight"))?,
        Some(p.get(&format!("{path}.bias"))?),
    )
}

pub(crate) fn conv<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ParamVars, path: &str, dilation: usize) -> Result<Var> {
    let k = p.get(&format!("{path}.weight"))?;
    let size = tape.shape(k)[0];
    tape.conv2d(
        x,
        k,
        Some(p.get(&format!("{path}.bias"))?),
        Conv2dSpec::same(size, dilation),
    )
}

/// Attention residual followed by the MLP residual, starting from an
/// already-normalised copy `n1` of `e`.
fn global_branch<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    n1: Var,
    p: &ParamVars,
    prefix: &str,
    dims: &BlockDims,
    shift: usize,
) -> Result<Var> {
    let w = window_partition(tape, n1, dims.window, shift)?;
    let a = msa(tape, &w, p, prefix, dims.heads)?;
    let a = window_reverse(tape, &a)?;
    let e1 = tape.add(e, a)?;
    let n2 = norm(tape, e1, p, &format!("{prefix}norm2"))?;
    let h = dense(tape, n2, p, &format!("{prefix}mlp.fc1"))?;
    let h = tape.gelu(h)?;
    let h = dense(tape, h, p, &format!("{prefix}mlp.fc2"))?;
    tape.add(e1, h)
}

pub fn transformer_step<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    p: &ParamVars,
    prefix: &str,
    dims: &BlockDims,
    shift: usize,
) -> Result<Var> {
    let n1 = norm(tape, e, p, &format!("{prefix}norm1"))?;
    global_branch(tape, e, n1, p, prefix, dims, shift)
}

/// Intermediate values of the local branch.
#[derive(Debug, Clone, Copy)]
pub struct LocalContext {
    pub f_local: Var,
    /// Channel weights, `[B, 1, 1, D]`.
    pub omega: Var,
    pub ctx: Var,
}

fn local_branch<T: Scalar>(tape: &mut Tape<T>, n1: Var, p: &ParamVars, prefix: &str, dims: &BlockDims) -> Result<LocalContext> {
    let f = if dims.lce_conv_ratio == 1 {
        conv(tape, n1, p, &format!("{prefix}lce.conv"), 1)?
    } else {
        let f = conv(tape, n1, p, &format!("{prefix}lce.conv1"), 1)?;
        let f = conv(tape, f, p, &format!("{prefix}lce.conv2"), 1)?;
        conv(tape, f, p, &format!("{prefix}lce.conv3"), 1)?
    };
    let f_local = tape.gelu(f)?;
    let pooled = tape.mean_axes(f_local, &[1, 2])?;
    let g = dense(tape, pooled, p, &format!("{prefix}lce.fc1"))?;
    let g = tape.relu(g)?;
    let g = dense(tape, g, p, &format!("{prefix}lce.fc2"))?;
    let omega = tape.sigmoid(g)?;
    let ctx = tape.mul(f_local, omega)?;
    Ok(LocalContext { f_local, omega, ctx })
}

/// Local context extractor applied to `LN1(e)`.
pub fn lce<T: Scalar>(tape: &mut Tape<T>, e: Var, p: &ParamVars, prefix: &str, dims: &BlockDims) -> Result<LocalContext> {
    let n1 = norm(tape, e, p, &format!("{prefix}norm1"))?;
    local_branch(tape, n1, p, prefix, dims)
}

/// One block: `transformer_step(e) + lce(e)`, sharing the first layer norm.
pub fn ca_vit<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    p: &ParamVars,
    prefix: &str,
    dims: &BlockDims,
    shift: usize,
) -> Result<Var> {
    let s = tape.shape(e).to_vec();
    if s.len() != 4 || s[3] != dims.dim {
        return Err(Error::shape("ca_vit", &s, &[dims.dim]));
    }
    let n1 = norm(tape, e, p, &format!("{prefix}norm1"))?;
    let global = global_branch(tape, e, n1, p, prefix, dims, shift)?;
    let local = local_branch(tape, n1, p, prefix, dims)?;
    tape.add(global, local.ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::params::{InitScheme, Weights};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(dim: usize, heads: usize, window: usize) -> BlockDims {
        BlockDims {
            dim,
            heads,
            window,
            mlp_ratio: 2,
            lce_reduction: 4,
            lce_conv_ratio: 2,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn weights(d: &BlockDims, seed: u64, scheme: InitScheme) -> Weights<f64> {
        Weights::init(&block_param_specs("b.", d), seed, scheme).unwrap()
    }

    #[test]
    fn partition_matches_index_oracle() {
        // 4x4 map, ws 2: window (wy, wx) holds tokens (2wy+iy, 2wx+ix).
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::from_fn(vec![1, 4, 4, 1], |i| i as f64));
        let w = window_partition(&mut tape, t, 2, 0).unwrap();
        assert_eq!(w.num_windows(), 4);
        assert!(!w.has_padding());
        let order: Vec<usize> = tape.value(w.windows).data().iter().map(|&v| v as usize).collect();
        assert_eq!(order, vec![0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);

        let single = window_partition(&mut tape, t, 4, 0).unwrap();
        assert_eq!(single.num_windows(), 1);
        assert_eq!(tape.value(single.windows).data(), tape.value(t).data());
    }

    #[test]
    fn shifted_partition_rolls_before_padding() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::from_fn(vec![1, 3, 3, 1], |i| i as f64 + 1.0));
        let w = window_partition(&mut tape, t, 2, 1).unwrap();
        assert_eq!((w.padded_height, w.padded_width), (4, 4));
        // First window: rolled rows/cols start at index 1.
        let first: Vec<f64> = tape.value(w.windows).data()[..4].to_vec();
        assert_eq!(first, vec![5.0, 6.0, 8.0, 9.0]);
        // Last window is the padded corner: only its top-left token is real.
        let last: Vec<f64> = tape.value(w.windows).data()[12..].to_vec();
        assert_eq!(last, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&w.valid[12..], &[true, false, false, false]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn partition_round_trip(h in 1usize..20, w in 1usize..20, ws in prop::sample::select(vec![2usize, 4, 8]), shifted: bool, b in 1usize..3) {
            let shift = if shifted { ws / 2 } else { 0 };
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(random(&[b, h, w, 3], (h * 31 + w) as u64));
            let set = window_partition(&mut tape, x, ws, shift).unwrap();
            prop_assert_eq!(set.num_windows(), b * h.div_ceil(ws) * w.div_ceil(ws));
            let back = window_reverse(&mut tape, &set).unwrap();
            prop_assert_eq!(tape.value(back), tape.value(x));
        }
    }

    #[test]
    fn reverse_rejects_inconsistent_metadata() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[1, 8, 8, 2], 1));
        let mut set = window_partition(&mut tape, x, 4, 0).unwrap();
        set.height = 3;
        assert!(matches!(window_reverse(&mut tape, &set), Err(Error::Contract(_))));
    }

    /// softmax(Q K^T / sqrt(d) + B) V with plain loops.
    fn naive_attention(x: &[f64], n: usize, d: &BlockDims, w: &Weights<f64>) -> Vec<f64> {
        let dim = d.dim;
        let hd = d.head_dim();
        let qkv_w = w.get("b.msa.qkv.weight").unwrap().data();
        let qkv_b = w.get("b.msa.qkv.bias").unwrap().data();
        let pw = w.get("b.msa.proj.weight").unwrap().data();
        let pb = w.get("b.msa.proj.bias").unwrap().data();
        let table = w.get("b.msa.rel_bias").unwrap().data();
        let idx = relative_position_index(d.window);
        let proj = |tok: usize, col: usize| -> f64 {
            (0..dim).map(|i| x[tok * dim + i] * qkv_w[i * 3 * dim + col]).sum::<f64>() + qkv_b[col]
        };
        let mut heads_out = vec![0.0; n * dim];
        for h in 0..d.heads {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += proj(i, h * hd + c) * proj(j, dim + h * hd + c);
                    }
                    *l = dot / (hd as f64).sqrt() + table[idx[i * n + j] * d.heads + h];
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in 0..hd {
                    heads_out[i * dim + h * hd + c] =
                        (0..n).map(|j| (logits[j] - m).exp() / z * proj(j, 2 * dim + h * hd + c)).sum();
                }
            }
        }
        let mut out = vec![0.0; n * dim];
        for i in 0..n {
            for o in 0..dim {
                out[i * dim + o] = (0..dim).map(|c| heads_out[i * dim + c] * pw[c * dim + o]).sum::<f64>() + pb[o];
            }
        }
        out
    }

    #[test]
    fn msa_matches_naive_oracle() {
        for (dim, heads, seed) in [(4, 1, 3), (6, 2, 4)] {
            let d = dims(dim, heads, 2);
            let mut w = weights(&d, seed, InitScheme::Standard);
            // Enlarge the bias so it matters numerically.
            w.get_mut("b.msa.rel_bias").unwrap().data_mut().iter_mut().for_each(|v| *v *= 20.0);
            let x = random(&[1, 2, 2, dim], seed);
            let mut tape = Tape::<f64>::new();
            let p = w.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let set = window_partition(&mut tape, xv, 2, 0).unwrap();
            let out = msa(&mut tape, &set, &p, "b.", heads).unwrap();
            let got = tape.value(out.windows).data().to_vec();
            let want = naive_attention(x.data(), 4, &d, &w);
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-10, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn singleton_window_returns_value_projection() {
        let d = dims(4, 2, 2);
        let w = weights(&d, 9, InitScheme::Standard);
        let mut tape = Tape::<f64>::new();
        let p = w.bind(&mut tape, false);
        let x = tape.constant(random(&[1, 1, 1, 4], 2));
        let set = window_partition(&mut tape, x, 2, 0).unwrap();
        let (out, attn) = msa_with_attention(&mut tape, &set, &p, "b.", 2).unwrap();
        let probs = tape.value(attn).data().to_vec();
        // Row of the real token puts all mass on itself.
        assert_eq!(probs[..4], [1.0, 0.0, 0.0, 0.0]);
        let v = tape.slice(set.windows, 1, 0, 1).unwrap();
        let qkv = dense(&mut tape, v, &p, "b.msa.qkv").unwrap();
        let value = tape.slice(qkv, 2, 8, 4).unwrap();
        let want = dense(&mut tape, value, &p, "b.msa.proj").unwrap();
        let got = tape.slice(out.windows, 1, 0, 1).unwrap();
        assert!(tape.value(got).max_abs_diff(tape.value(want)) < 1e-15);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let d = dims(4, 1, 2);
        let mut w = weights(&d, 5, InitScheme::Standard);
        let qkv = w.get_mut("b.msa.qkv.weight").unwrap();
        for row in qkv.data_mut().chunks_mut(12) {
            row[..8].iter_mut().for_each(|v| *v = 0.0);
        }
        w.get_mut("b.msa.qkv.bias").unwrap().data_mut()[..8].iter_mut().for_each(|v| *v = 0.0);
        w.get_mut("b.msa.rel_bias").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::<f64>::new();
        let p = w.bind(&mut tape, false);
        let x = tape.constant(random(&[1, 2, 2, 4], 6));
        let set = window_partition(&mut tape, x, 2, 0).unwrap();
        let (out, attn) = msa_with_attention(&mut tape, &set, &p, "b.", 1).unwrap();
        assert!(tape.value(attn).data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        let qkv = dense(&mut tape, set.windows, &p, "b.msa.qkv").unwrap();
        let v = tape.slice(qkv, 2, 8, 4).unwrap();
        let mean = tape.mean_axes(v, &[1]).unwrap();
        let want = dense(&mut tape, mean, &p, "b.msa.proj").unwrap();
        for row in tape.value(out.windows).data().chunks(4) {
            for (a, b) in row.iter().zip(tape.value(want).data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn padded_keys_get_no_mass_and_rows_normalise() {
        let d = dims(6, 3, 4);
        let w = weights(&d, 2, InitScheme::Standard);
        let mut tape = Tape::<f64>::new();
        let p = w.bind(&mut tape, false);
        let x = tape.constant(random(&[2, 5, 7, 6], 8));
        for shift in [0, 2] {
            let set = window_partition(&mut tape, x, 4, shift).unwrap();
            let (_, attn) = msa_with_attention(&mut tape, &set, &p, "b.", 3).unwrap();
            let n = 16;
            let per = set.windows_per_image();
            for (r, row) in tape.value(attn).data().chunks(n).enumerate() {
                let win = r / (3 * n);
                let valid = &set.valid[(win % per) * n..(win % per + 1) * n];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (a, &v) in row.iter().zip(valid) {
                    if !v {
                        assert_eq!(*a, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn unshifted_msa_commutes_with_window_translation() {
        let d = dims(4, 2, 4);
        let w = weights(&d, 12, InitScheme::Standard);
        let x = random(&[1, 8, 12, 4], 13);
        let run = |input: &Tensor<f64>| -> Tensor<f64> {
            let mut tape = Tape::<f64>::new();
            let p = w.bind(&mut tape, false);
            let x = tape.constant(input.clone());
            let set = window_partition(&mut tape, x, 4, 0).unwrap();
            let out = msa(&mut tape, &set, &p, "b.", 2).unwrap();
            let back = window_reverse(&mut tape, &out).unwrap();
            tape.value(back).clone()
        };
        let roll = |t: &Tensor<f64>| -> Tensor<f64> {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(t.clone());
            let r = tape.roll(v, 1, 4).unwrap();
            let r = tape.roll(r, 2, -4).unwrap();
            tape.value(r).clone()
        };
        assert_eq!(run(&roll(&x)), roll(&run(&x)));
    }

    #[test]
    fn zero_residual_branches_are_identity() {
        let d = dims(8, 2, 4);
        let w = weights(&d, 1, InitScheme::ResidualZero);
        let mut tape = Tape::<f64>::new();
        let p = w.bind(&mut tape, false);
        let e = tape.constant(random(&[1, 6, 9, 8], 3));
        for shift in [0, 2] {
            let g = transformer_step(&mut tape, e, &p, "b.", &d, shift).unwrap();
            assert_eq!(tape.value(g), tape.value(e));
            let c = ca_vit(&mut tape, e, &p, "b.", &d, shift).unwrap();
            assert_eq!(tape.value(c), tape.value(e));
        }
    }

    #[test]
    fn channel_gate_properties() {
        let d = dims(8, 2, 4);
        let mut w = weights(&d, 4, InitScheme::Standard);
        let mut tape = Tape::<f64>::new();
        let p = w.bind(&mut tape, false);
        let e = tape.constant(random(&[2, 5, 5, 8], 5).cast::<f64>());
        let local = lce(&mut tape, e, &p, "b.", &d).unwrap();
        assert!(tape.value(local.omega).data().iter().all(|&o| o > 0.0 && o < 1.0));
        let product = tape.mul(local.f_local, local.omega).unwrap();
        assert_eq!(tape.value(product), tape.value(local.ctx));

        for path in ["b.lce.fc1.weight", "b.lce.fc1.bias", "b.lce.fc2.weight", "b.lce.fc2.bias"] {
            w.get_mut(path).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let p = w.bind(&mut tape, false);
        let local = lce(&mut tape, e, &p, "b.", &d).unwrap();
        assert!(tape.value(local.omega).data().iter().all(|&o| o == 0.5));
        let half = tape.scale(local.f_local, 0.5).unwrap();
        assert_eq!(tape.value(half), tape.value(local.ctx));
    }

    #[test]
    fn constant_input_pools_to_itself() {
        let mut tape = Tape::<f64>::new();
        let c = [0.3, -1.2, 2.5];
        let x = tape.constant(Tensor::from_fn(vec![1, 4, 5, 3], |i| c[i % 3]));
        let m = tape.mean_axes(x, &[1, 2]).unwrap();
        for (a, b) in tape.value(m).data().iter().zip(c) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shapes_are_preserved() {
        for (h, w, single) in [(3, 5, false), (8, 8, true), (9, 17, false)] {
            let mut d = dims(8, 4, 4);
            if single {
                d.lce_conv_ratio = 1;
            }
            let wts = weights(&d, 0, InitScheme::Standard);
            let mut tape = Tape::<f32>::new();
            let p = wts.cast::<f32>().bind(&mut tape, false);
            let e = tape.constant(random(&[2, h, w, 8], 1).cast());
            let out = ca_vit(&mut tape, e, &p, "b.", &d, 2).unwrap();
            assert_eq!(tape.shape(out), &[2, h, w, 8]);
            let g = transformer_step(&mut tape, e, &p, "b.", &d, 0).unwrap();
            assert_eq!(tape.shape(g), &[2, h, w, 8]);
        }
    }

    #[test]
    fn block_parameter_count() {
        let d = BlockDims {
            dim: 60,
            heads: 6,
            window: 8,
            mlp_ratio: 2,
            lce_reduction: 4,
            lce_conv_ratio: 2,
        };
        let n: usize = block_param_specs("", &d).iter().map(ParamSpec::numel).sum();
        assert_eq!(n, 44_505);
        let single: usize = block_param_specs("", &BlockDims { lce_conv_ratio: 1, ..d })
            .iter()
            .map(ParamSpec::numel)
            .sum();
        assert_eq!(single, 44_505 - (1830 + 8130 + 1860) + (9 * 60 * 60 + 60));
    }

    #[test]
    fn gradients_match_central_differences() {
        let d = dims(4, 2, 2);
        let w = weights(&d, 21, InitScheme::Standard);
        let x = random(&[1, 3, 3, 4], 22);
        for shift in [0, 1] {
            let step = grad_check(
                |tape, x| {
                    let p = w.bind(tape, false);
                    let y = transformer_step(tape, x, &p, "b.", &d, shift)?;
                    tape.sum(y)
                },
                &x,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(step.max_relative_error < 1e-4, "{step:?}");
            let block = grad_check(
                |tape, x| {
                    let p = w.bind(tape, false);
                    let y = ca_vit(tape, x, &p, "b.", &d, shift)?;
                    let y = tape.mul(y, y)?;
                    tape.sum(y)
                },
                &x,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(block.max_relative_error < 1e-4, "{block:?}");
        }
    }
}

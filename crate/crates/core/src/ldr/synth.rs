//! Procedural exposure brackets with a moving foreground object.

use std::f64::consts::TAU;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ExposureBracket, Image, DEFAULT_GAMMA, REFERENCE_INDEX};
use crate::error::{Error, Result};

/// Exposure values of the generated frames; `t_i = 2^EV`.
pub const SYNTH_EV: [f64; 3] = [-2.0, 0.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub size: usize,
    /// Horizontal foreground displacement between the first and last frame.
    pub motion_px: usize,
    /// Fraction of long-exposure values driven into clipping.
    pub saturation_frac: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            motion_px: 8,
            saturation_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Carries the static-scene ground truth aligned with the reference.
    pub bracket: ExposureBracket,
    /// Row-major foreground coverage of each frame.
    pub foreground: [Vec<bool>; 3],
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

/// Renders a deterministic scene: a smooth tinted background plus a
/// checkered rectangle that slides horizontally across the bracket.
pub fn synth_scene(p: &SynthParams) -> Result<SyntheticScene> {
    if p.size < 32 {
        return Err(Error::Domain(format!("synthetic scenes need size >= 32, got {}", p.size)));
    }
    if !(0.0..=1.0).contains(&p.saturation_frac) {
        return Err(Error::Domain(format!(
            "saturation fraction {} outside [0, 1]",
            p.saturation_frac
        )));
    }
    let s = p.size;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
    let waves: Vec<Wave> = (0..3)
        .map(|i| Wave {
            fy: rng.random_range(0.5..3.5),
            fx: rng.random_range(0.5..3.5),
            phase: rng.random_range(0.0..TAU),
            amp: [0.25, 0.15, 0.08][i],
        })
        .collect();
    let background = |y: usize, x: usize, c: usize| -> f64 {
        let (v, u) = (y as f64 / s as f64, x as f64 / s as f64);
        let mut r = 0.5;
        for (k, w) in waves.iter().enumerate() {
            let chroma = 1.0 + 0.2 * ((c + k) % 3) as f64 - 0.2;
            r += w.amp * chroma * (TAU * (w.fy * v + w.fx * u) + w.phase).sin();
        }
        (r * tint[c]).clamp(0.05, 1.0)
    };

    let rw = rng.random_range(s / 5..=s / 3);
    let rh = rng.random_range(s / 5..=s / 3);
    let back = p.motion_px / 2;
    let ahead = p.motion_px - back;
    let x_hi = (s as isize - rw as isize - ahead as isize).max(back as isize) as usize;
    let x0 = rng.random_range(back..=x_hi);
    let y0 = rng.random_range(0..=s - rh);
    let colors: [[f64; 3]; 2] = [
        std::array::from_fn(|_| rng.random_range(0.7..1.0)),
        std::array::from_fn(|_| rng.random_range(0.08..0.3)),
    ];
    let cell = (s / 16).max(2);
    let offsets = [-(back as isize), 0, ahead as isize];

    // Unscaled radiance of frame `f` and its foreground mask.
    let render = |f: usize| -> (Vec<f64>, Vec<bool>) {
        let left = x0 as isize + offsets[f];
        let mut rad = Vec::with_capacity(s * s * 3);
        let mut mask = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let lx = x as isize - left;
                let inside = y >= y0 && y < y0 + rh && lx >= 0 && (lx as usize) < rw;
                mask.push(inside);
                for c in 0..3 {
                    rad.push(if inside {
                        let checker = ((y - y0) / cell + lx as usize / cell) % 2;
                        colors[checker][c]
                    } else {
                        background(y, x, c)
                    });
                }
            }
        }
        (rad, mask)
    };
    let frames: Vec<(Vec<f64>, Vec<bool>)> = (0..3).map(render).collect();

    let times: [f64; 3] = SYNTH_EV.map(f64::exp2);
    let t_long = times[2];
    let reference = &frames[REFERENCE_INDEX].0;
    let knee = if p.saturation_frac > 0.0 {
        let mut sorted = reference.clone();
        sorted.sort_by(f64::total_cmp);
        let idx = ((1.0 - p.saturation_frac) * (sorted.len() - 1) as f64).floor() as usize;
        sorted[idx]
    } else {
        reference.iter().copied().fold(0.0, f64::max)
    };
    // Radiance `knee` lands exactly at the clipping point of the long exposure.
    let scale = 1.0 / (t_long * knee);

    let to_hdr = |rad: &[f64]| -> Vec<f64> { rad.iter().map(|&r| (r * scale).min(1.0)).collect() };
    let gt = Image::new(s, s, 3, to_hdr(reference))?;
    let mut ldr: Vec<Image> = Vec::with_capacity(3);
    for (f, (rad, _)) in frames.iter().enumerate() {
        let hdr = to_hdr(rad);
        let data = hdr
            .iter()
            .map(|&h| (h * times[f]).powf(1.0 / DEFAULT_GAMMA).clamp(0.0, 1.0))
            .collect();
        ldr.push(Image::new(s, s, 3, data)?);
    }
    let ldr: [Image; 3] = ldr.try_into().expect("three frames");
    let [m0, m1, m2] = [frames[0].1.clone(), frames[1].1.clone(), frames[2].1.clone()];
    Ok(SyntheticScene {
        bracket: ExposureBracket::new(ldr, times, Some(gt))?,
        foreground: [m0, m1, m2],
    })
}

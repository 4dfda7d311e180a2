//! Exposure brackets and network input assembly.

mod io;
mod patches;
mod synth;

pub use io::{load_bracket, read_hdr_image, read_pfm, write_bracket, write_pfm, write_png16, write_png8};
pub use patches::{augment, crop_anchors, crop_patches, inverse_augment, transform_image, Patch, PatchSet, Provenance};
pub use synth::{synth_scene, SynthParams, SyntheticScene, SYNTH_EV};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gamma used to move LDR values into the linear domain.
pub const DEFAULT_GAMMA: f64 = 2.2;

/// Index of the reference (middle) exposure within a bracket.
pub const REFERENCE_INDEX: usize = 1;

/// Row-major `height × width × channels` image in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Sub-image with the given top-left corner and extent.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of bounds");
        Self::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c))
    }

    /// Channels `start..start+len`.
    pub fn channel_slice(&self, start: usize, len: usize) -> Self {
        Self::from_fn(self.height, self.width, len, |y, x, c| self.get(y, x, start + c))
    }

    pub fn concat_channels(a: &Image, b: &Image) -> Result<Self> {
        if a.height != b.height || a.width != b.width {
            return Err(Error::shape("concat_channels", &a.dims(), &b.dims()));
        }
        let channels = a.channels + b.channels;
        let mut data = Vec::with_capacity(a.height * a.width * channels);
        for (pa, pb) in a.data.chunks(a.channels).zip(b.data.chunks(b.channels)) {
            data.extend_from_slice(pa);
            data.extend_from_slice(pb);
        }
        Image::new(a.height, a.width, channels, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Clamps into `[0, 1]` and returns how many values were changed.
    pub fn clamp_unit(&mut self) -> usize {
        let mut changed = 0;
        for v in &mut self.data {
            let c = v.clamp(0.0, 1.0);
            if c != *v || v.is_nan() {
                changed += 1;
                *v = if v.is_nan() { 0.0 } else { c };
            }
        }
        changed
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![self.height, self.width, self.channels], |i| {
            T::of(self.data[i])
        })
    }

    /// Builds an image from a `[H, W, C]` tensor or one batch item of a
    /// `[B, H, W, C]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, batch_index: usize) -> Result<Self> {
        let s = t.shape();
        let (h, w, c, off) = match s.len() {
            3 => (s[0], s[1], s[2], 0),
            4 if batch_index < s[0] => (s[1], s[2], s[3], batch_index * s[1] * s[2] * s[3]),
            _ => return Err(Error::Contract(format!("cannot view tensor {s:?} as an image"))),
        };
        let data = t.data()[off..off + h * w * c].iter().map(|v| v.as_f64()).collect();
        Image::new(h, w, c, data)
    }
}

/// Stacks same-sized images into a `[B, H, W, C]` tensor.
pub fn stack_images<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("cannot stack zero images".into()))?;
    let dims = first.dims();
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.dims() != dims {
            return Err(Error::shape("stack_images", &dims, &img.dims()));
        }
        data.extend(img.data.iter().map(|&v| T::of(v)));
    }
    Tensor::new(vec![images.len(), dims[0], dims[1], dims[2]], data)
}

/// Three LDR exposures of one scene, ordered by increasing exposure time.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureBracket {
    pub ldr: [Image; 3],
    /// Linear exposure times, `2^EV`.
    pub exposure_times: [f64; 3],
    pub gt_hdr: Option<Image>,
}

impl ExposureBracket {
    /// Validates the bracket and clamps pixel values into `[0, 1]`.
    pub fn new(ldr: [Image; 3], exposure_times: [f64; 3], gt_hdr: Option<Image>) -> Result<Self> {
        let dims = ldr[0].dims();
        if dims[2] != 3 {
            return Err(Error::Contract(format!("LDR frames must have 3 channels, got {}", dims[2])));
        }
        for img in &ldr[1..] {
            if img.dims() != dims {
                return Err(Error::shape("exposure bracket", &dims, &img.dims()));
            }
        }
        if let Some(gt) = &gt_hdr {
            if gt.dims() != dims {
                return Err(Error::shape("ground-truth HDR", &dims, &gt.dims()));
            }
        }
        if exposure_times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::Domain(format!(
                "exposure times must be positive, got {exposure_times:?}"
            )));
        }
        if !(exposure_times[0] < exposure_times[1] && exposure_times[1] < exposure_times[2]) {
            return Err(Error::Domain(format!(
                "exposure times must increase strictly, got {exposure_times:?}"
            )));
        }
        let mut bracket = Self {
            ldr,
            exposure_times,
            gt_hdr,
        };
        let clamped: usize = bracket.ldr.iter_mut().map(Image::clamp_unit).sum();
        if clamped > 0 {
            log::warn!("clamped {clamped} LDR values into [0, 1]");
        }
        if let Some(gt) = &mut bracket.gt_hdr {
            let clamped = gt.clamp_unit();
            if clamped > 0 {
                log::warn!("clamped {clamped} ground-truth HDR values into [0, 1]");
            }
        }
        Ok(bracket)
    }

    pub fn height(&self) -> usize {
        self.ldr[0].height()
    }

    pub fn width(&self) -> usize {
        self.ldr[0].width()
    }

    pub fn reference(&self) -> &Image {
        &self.ldr[REFERENCE_INDEX]
    }
}

/// Maps LDR intensities to the linear domain: `I^gamma / t`.
pub fn gamma_correct(image: &Image, exposure_time: f64, gamma: f64) -> Result<Image> {
    if !(exposure_time > 0.0) {
        return Err(Error::Domain(format!(
            "exposure time must be positive, got {exposure_time}"
        )));
    }
    Ok(image.map(|v| v.max(0.0).powf(gamma) / exposure_time))
}

/// The three 6-channel network inputs `X_i = concat(I_i, I_i^gamma / t_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInput {
    pub x: [Image; 3],
}

impl NetworkInput {
    pub fn height(&self) -> usize {
        self.x[0].height()
    }

    pub fn width(&self) -> usize {
        self.x[0].width()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self {
            x: [
                self.x[0].crop(y0, x0, h, w),
                self.x[1].crop(y0, x0, h, w),
                self.x[2].crop(y0, x0, h, w),
            ],
        }
    }
}

pub fn assemble_input(bracket: &ExposureBracket, gamma: f64) -> Result<NetworkInput> {
    let plane = |i: usize| -> Result<Image> {
        let lin = gamma_correct(&bracket.ldr[i], bracket.exposure_times[i], gamma)?;
        Image::concat_channels(&bracket.ldr[i], &lin)
    };
    Ok(NetworkInput {
        x: [plane(0)?, plane(1)?, plane(2)?],
    })
}

/// Batches network inputs into three `[B, H, W, 6]` tensors.
pub fn stack_inputs<T: Scalar>(inputs: &[&NetworkInput]) -> Result<[Tensor<T>; 3]> {
    let stream = |i: usize| stack_images(&inputs.iter().map(|n| &n.x[i]).collect::<Vec<_>>());
    Ok([stream(0)?, stream(1)?, stream(2)?])
}

/// Exposure-weighted average of the linearised frames (weights `t_i`).
/// Exact for static, unsaturated scenes; ghosts under motion.
pub fn exposure_weighted_merge(bracket: &ExposureBracket, gamma: f64) -> Result<Image> {
    let lin: Vec<Image> = (0..3)
        .map(|i| gamma_correct(&bracket.ldr[i], bracket.exposure_times[i], gamma))
        .collect::<Result<_>>()?;
    let total: f64 = bracket.exposure_times.iter().sum();
    let mut out = Image::zeros(bracket.height(), bracket.width(), 3);
    for (img, &t) in lin.iter().zip(&bracket.exposure_times) {
        for (o, &v) in out.data.iter_mut().zip(&img.data) {
            *o += t * v;
        }
    }
    out.data.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat(v: f64) -> Image {
        Image::from_fn(4, 5, 3, |_, _, _| v)
    }

    #[test]
    fn gamma_reference_values() {
        let zero = gamma_correct(&flat(0.0), 3.0, 2.2).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let one = gamma_correct(&flat(1.0), 1.0, 2.2).unwrap();
        assert!(one.data().iter().all(|&v| v == 1.0));
        // 0.5^2.2 / 4 evaluated with 30-digit arithmetic: 0.0544094102060078...
        let half = gamma_correct(&flat(0.5), 4.0, 2.2).unwrap();
        assert!((half.get(0, 0, 0) - 0.054_409_410_206_007_8).abs() < 1e-15);
        assert!(gamma_correct(&flat(0.5), 0.0, 2.2).is_err());
        assert!(gamma_correct(&flat(0.5), -1.0, 2.2).is_err());
    }

    #[test]
    fn identical_frames_give_identical_planes() {
        let img = Image::from_fn(3, 3, 3, |y, x, c| (y * 9 + x * 3 + c) as f64 / 27.0);
        let b = ExposureBracket {
            ldr: [img.clone(), img.clone(), img.clone()],
            exposure_times: [1.0, 1.0, 1.0],
            gt_hdr: None,
        };
        let x = assemble_input(&b, 2.2).unwrap();
        assert_eq!(x.x[0], x.x[1]);
        assert_eq!(x.x[1], x.x[2]);
    }

    #[test]
    fn input_planes_hold_frame_and_linearised_frame() {
        let f = |k: f64| Image::from_fn(3, 4, 3, move |y, x, c| ((y + x + c) as f64 * 0.1 * k).min(1.0));
        let b = ExposureBracket::new([f(0.5), f(1.0), f(1.5)], [0.25, 1.0, 4.0], None).unwrap();
        let x = assemble_input(&b, 2.2).unwrap();
        for i in 0..3 {
            assert_eq!(x.x[i].channel_slice(0, 3), b.ldr[i]);
        }
        let lin = gamma_correct(&b.ldr[1], 1.0, 2.2).unwrap();
        assert_eq!(x.x[1].channel_slice(3, 3), lin);
    }

    #[test]
    fn bracket_validation() {
        let img = flat(0.5);
        let ldr = || [img.clone(), img.clone(), img.clone()];
        assert!(ExposureBracket::new(ldr(), [1.0, 1.0, 4.0], None).is_err());
        assert!(ExposureBracket::new(ldr(), [0.0, 1.0, 4.0], None).is_err());
        let small = Image::zeros(2, 2, 3);
        assert!(ExposureBracket::new([small, img.clone(), img.clone()], [0.25, 1.0, 4.0], None).is_err());
        let hot = flat(1.7);
        let b = ExposureBracket::new([hot, img.clone(), img.clone()], [0.25, 1.0, 4.0], Some(flat(3.0))).unwrap();
        assert!(b.ldr[0].data().iter().all(|&v| v == 1.0));
        assert!(b.gt_hdr.unwrap().data().iter().all(|&v| v == 1.0));
    }

    proptest! {
        #[test]
        fn gamma_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, t in 0.01f64..16.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let g = |v: f64| gamma_correct(&Image::from_fn(1, 1, 1, |_, _, _| v), t, 2.2).unwrap().get(0, 0, 0);
            prop_assert!(g(lo) <= g(hi));
            prop_assert!(g(lo) >= 0.0);
        }
    }
}

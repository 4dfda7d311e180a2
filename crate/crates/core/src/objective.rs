//! μ-law tonemapping, training losses and image-quality metrics.

use crate::attention::conv_specs;
use crate::error::{Error, Result};
use crate::ldr::Image;
use crate::params::{Init, InitScheme, ParamSpec, Weights};
use crate::tape::{Conv2dSpec, Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const MU: f64 = 5000.0;
pub const LAMBDA_P: f64 = 0.01;
/// Reported PSNR of identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("μ must be positive, got {mu}")))
    }
}

/// `ln(1 + μx) / ln(1 + μ)`.
pub fn mu_law(x: f64, mu: f64) -> f64 {
    (mu * x).ln_1p() / mu.ln_1p()
}

/// Inverse of [`mu_law`].
pub fn mu_law_inverse(y: f64, mu: f64) -> f64 {
    (y * mu.ln_1p()).exp_m1() / mu
}

/// Tonemaps an image, clamping values outside `[0, 1]` with a warning.
pub fn mu_tonemap_image(img: &Image, mu: f64) -> Result<Image> {
    check_mu(mu)?;
    let mut c = img.clone();
    let clamped = c.clamp_unit();
    if clamped > 0 {
        log::warn!("mu_tonemap: clamped {clamped} values into [0, 1]");
    }
    Ok(c.map(|v| mu_law(v, mu)))
}

/// Tonemapping on the tape. Constant inputs outside `[0, 1]` are clamped
/// with a warning; differentiable inputs are only warned about.
pub fn mu_tonemap<T: Scalar>(tape: &mut Tape<T>, x: Var, mu: f64) -> Result<Var> {
    check_mu(mu)?;
    let out_of_range = tape
        .value(x)
        .data()
        .iter()
        .filter(|v| !(T::zero()..=T::one()).contains(v))
        .count();
    let mut x = x;
    if out_of_range > 0 {
        log::warn!("mu_tonemap: {out_of_range} values outside [0, 1]");
        if !tape.requires_grad(x) {
            let t = tape.value(x);
            let clamped = Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&v| if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) }).collect(),
            )?;
            x = tape.constant(clamped);
        }
    }
    let y = tape.scale(x, mu)?;
    let y = tape.add_scalar(y, 1.0)?;
    let y = tape.ln(y)?;
    tape.scale(y, 1.0 / mu.ln_1p())
}

/// Mean absolute difference.
pub fn l1<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("l1", tape.shape(a), tape.shape(b)));
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Reconstruction loss: mean absolute difference of tonemapped images.
pub fn l1_recon<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let tp = mu_tonemap(tape, pred, MU)?;
    let tg = mu_tonemap(tape, gt, MU)?;
    l1(tape, tp, tg)
}

pub const FEATURE_WIDTHS: [usize; 5] = [16, 32, 64, 128, 128];
pub const DEFAULT_TAPS: [usize; 3] = [2, 3, 4];

/// Fixed strided conv pyramid used by the perceptual loss. Stage `s`
/// (1-based) is a stride-2 3x3 conv followed by GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet<T> {
    weights: Weights<T>,
    taps: Vec<usize>,
}

impl<T: Scalar> FeatureNet<T> {
    pub fn param_specs() -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &w) in FEATURE_WIDTHS.iter().enumerate() {
            conv_specs(&mut out, &format!("feature.stage{}", i + 1), 3, cin, w, false);
            cin = w;
        }
        // He-uniform kernels, zero biases.
        for s in &mut out {
            s.init = if s.shape.len() == 4 {
                let fan_in = (s.shape[0] * s.shape[1] * s.shape[2]) as f64;
                Init::Uniform((6.0 / fan_in).sqrt())
            } else {
                Init::Zeros
            };
        }
        out
    }

    pub fn seeded(seed: u64) -> Result<Self> {
        Ok(Self {
            weights: Weights::init(&Self::param_specs(), seed, InitScheme::Standard)?,
            taps: DEFAULT_TAPS.to_vec(),
        })
    }

    pub fn from_weights(weights: Weights<T>, taps: Vec<usize>) -> Result<Self> {
        weights.check_against(&Self::param_specs())?;
        if taps.is_empty() || taps.iter().any(|&t| t == 0 || t > FEATURE_WIDTHS.len()) {
            return Err(Error::Config(format!("feature taps {taps:?} must lie in 1..=5")));
        }
        Ok(Self { weights, taps })
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.weights
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn with_taps(mut self, taps: Vec<usize>) -> Result<Self> {
        let w = std::mem::take(&mut self.weights);
        self = Self::from_weights(w, taps)?;
        Ok(self)
    }

    /// Tap activations of `x: [B,H,W,3]`, in tap order. Weights enter the
    /// tape as constants.
    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let last = *self.taps.iter().max().expect("non-empty taps");
        let mut acts = Vec::with_capacity(last);
        let mut h = x;
        for s in 1..=last {
            let k = tape.constant(self.weights.get(&format!("feature.stage{s}.weight"))?.clone());
            let b = tape.constant(self.weights.get(&format!("feature.stage{s}.bias"))?.clone());
            h = tape.conv2d(h, k, Some(b), Conv2dSpec { stride: 2, dilation: 1, padding: 1 })?;
            h = tape.gelu(h)?;
            acts.push(h);
        }
        Ok(self.taps.iter().map(|&t| acts[t - 1]).collect())
    }
}

/// `Σ_j mean |Ψ_j(T(pred)) − Ψ_j(T(gt))|`.
pub fn perceptual<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var, net: &FeatureNet<T>) -> Result<Var> {
    let tp = mu_tonemap(tape, pred, MU)?;
    let tg = mu_tonemap(tape, gt, MU)?;
    perceptual_tonemapped(tape, tp, tg, net)
}

fn perceptual_tonemapped<T: Scalar>(tape: &mut Tape<T>, tp: Var, tg: Var, net: &FeatureNet<T>) -> Result<Var> {
    let fp = net.features(tape, tp)?;
    let fg = net.features(tape, tg)?;
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(fg) {
        let term = l1(tape, a, b)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty taps"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_r: f64,
    pub l_p: f64,
    pub total: f64,
    pub lambda_p: f64,
}

/// Tape handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_r: Var,
    pub l_p: Var,
    pub total: Var,
    pub lambda_p: f64,
}

impl LossVars {
    pub fn report<T: Scalar>(&self, tape: &Tape<T>) -> LossReport {
        let v = |x: Var| tape.value(x).data()[0].as_f64();
        LossReport {
            l_r: v(self.l_r),
            l_p: v(self.l_p),
            total: v(self.total),
            lambda_p: self.lambda_p,
        }
    }
}

/// `l_r + λ_p · l_p`.
pub fn hdr_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    net: &FeatureNet<T>,
    lambda_p: f64,
) -> Result<LossVars> {
    let tp = mu_tonemap(tape, pred, MU)?;
    let tg = mu_tonemap(tape, gt, MU)?;
    let l_r = l1(tape, tp, tg)?;
    let l_p = perceptual_tonemapped(tape, tp, tg, net)?;
    let weighted = tape.scale(l_p, lambda_p)?;
    let total = tape.add(l_r, weighted)?;
    Ok(LossVars { l_r, l_p, total, lambda_p })
}

// ------------------------------------------------------------------ metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Linear,
    Mu,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "l",
            Self::Mu => "mu",
        })
    }
}

fn in_domain(img: &Image, domain: Domain) -> Result<Image> {
    match domain {
        Domain::Linear => Ok(img.clone()),
        Domain::Mu => mu_tonemap_image(img, MU),
    }
}

fn same_dims(a: &Image, b: &Image, what: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(what, &a.dims(), &b.dims()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image, domain: Domain) -> Result<f64> {
    same_dims(pred, gt, "psnr")?;
    let (a, b) = (in_domain(pred, domain)?, in_domain(gt, domain)?);
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Weighted average along one axis; taps falling outside the image are
/// dropped and the remaining weights renormalised.
fn blur_axis(src: &[f64], h: usize, w: usize, horizontal: bool, taps: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &g) in taps.iter().enumerate() {
                let d = k as isize - r;
                let (yy, xx) = if horizontal { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                    acc += g * src[yy as usize * w + xx as usize];
                    norm += g;
                }
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

fn blur(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let t = blur_axis(src, h, w, true, taps);
    blur_axis(&t, h, w, false, taps)
}

/// Mean over channels of each pixel.
pub fn grayscale(img: &Image) -> Vec<f64> {
    let c = img.channels();
    img.data().chunks(c).map(|p| p.iter().sum::<f64>() / c as f64).collect()
}

/// Single-scale SSIM of the channel-mean grayscale images with an 11x11
/// Gaussian window (σ = 1.5, peak 1). Near borders the window is cut to
/// the image and renormalised.
pub fn ssim(pred: &Image, gt: &Image, domain: Domain) -> Result<f64> {
    same_dims(pred, gt, "ssim")?;
    let (a, b) = (in_domain(pred, domain)?, in_domain(gt, domain)?);
    let (h, w) = (a.height(), a.width());
    let (x, y) = (grayscale(&a), grayscale(&b));
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = blur(&x, h, w, &taps);
    let my = blur(&y, h, w, &taps);
    let mxx = blur(&prod(&x, &x), h, w, &taps);
    let myy = blur(&prod(&y, &y), h, w, &taps);
    let mxy = blur(&prod(&x, &y), h, w, &taps);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..h * w {
        let (ux, uy) = (mx[i], my[i]);
        let sx = mxx[i] - ux * ux;
        let sy = myy[i] - uy * uy;
        let sxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sx + sy + c2));
    }
    Ok(total / (h * w) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScores {
    pub psnr_l: f64,
    pub psnr_mu: f64,
    pub ssim_l: f64,
    pub ssim_mu: f64,
}

pub fn quality(pred: &Image, gt: &Image) -> Result<QualityScores> {
    Ok(QualityScores {
        psnr_l: psnr(pred, gt, Domain::Linear)?,
        psnr_mu: psnr(pred, gt, Domain::Mu)?,
        ssim_l: ssim(pred, gt, Domain::Linear)?,
        ssim_mu: ssim(pred, gt, Domain::Mu)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn mu_law_values() {
        assert_eq!(mu_law(0.0, MU), 0.0);
        assert_eq!(mu_law(1.0, MU), 1.0);
        // 50-digit evaluation of ln(2501)/ln(5001).
        let oracle = 0.918_643_271_879_646_f64;
        assert!((mu_law(0.5, MU) - oracle).abs() < 1e-15);
        assert!(matches!(mu_tonemap_image(&Image::zeros(1, 1, 3), 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn tape_tonemap_gradient_is_closed_form() {
        for x in [0.0, 1e-4, 0.3, 0.5, 1.0] {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(Tensor::scalar(x));
            let y = mu_tonemap(&mut tape, v, MU).unwrap();
            assert!((tape.value(y).data()[0] - mu_law(x, MU)).abs() < 1e-15);
            tape.backward(y).unwrap();
            let want = MU / ((1.0 + MU * x) * MU.ln_1p());
            let got = tape.grad(v).unwrap().data()[0];
            assert!((got - want).abs() <= 1e-8 * want.max(1.0), "{x}: {got} vs {want}");
        }
    }

    #[test]
    fn constant_inputs_are_clamped() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_f64(vec![3], &[-0.5, 0.5, 2.0]).unwrap());
        let y = mu_tonemap(&mut tape, v, MU).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, mu_law(0.5, MU), 1.0]);
    }

    proptest! {
        #[test]
        fn mu_law_is_monotone_and_invertible(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(mu_law(a, MU) < mu_law(b, MU));
            prop_assert!((mu_law_inverse(mu_law(a, MU), MU) - a).abs() < 1e-6);
        }
    }

    #[test]
    fn recon_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(vec![1, 4, 4, 3], 0.3));
        let b = tape.constant(Tensor::full(vec![1, 4, 4, 3], 0.4));
        let same = l1_recon(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(same).data()[0], 0.0);
        let ab = l1_recon(&mut tape, a, b).unwrap();
        let ba = l1_recon(&mut tape, b, a).unwrap();
        let want = (mu_law(0.4, MU) - mu_law(0.3, MU)).abs();
        assert!((tape.value(ab).data()[0] - want).abs() < 1e-15);
        assert_eq!(tape.value(ab), tape.value(ba));
    }

    #[test]
    fn perceptual_properties() {
        let net = FeatureNet::<f64>::seeded(0).unwrap();
        let pred = random_image(32, 32, 3, 1).to_tensor::<f64>().reshape(vec![1, 32, 32, 3]).unwrap();
        let gt = random_image(32, 32, 3, 2).to_tensor::<f64>().reshape(vec![1, 32, 32, 3]).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(pred);
        let g = tape.constant(gt);
        let zero = perceptual(&mut tape, p, p, &net).unwrap();
        assert_eq!(tape.value(zero).data()[0], 0.0);
        let v = perceptual(&mut tape, p, g, &net).unwrap();
        let value = tape.value(v).data()[0];
        assert!(value > 0.0);

        let reordered = net.clone().with_taps(vec![4, 2, 3]).unwrap();
        let r = perceptual(&mut tape, p, g, &reordered).unwrap();
        assert!((tape.value(r).data()[0] - value).abs() < 1e-14);

        tape.backward(v).unwrap();
        assert!(tape.grad(p).unwrap().data().iter().any(|&x| x != 0.0));
        assert!(tape.grad(g).is_none());
        assert_eq!(FeatureNet::<f64>::seeded(0).unwrap(), net);
    }

    #[test]
    fn loss_report_recomposes() {
        let net = FeatureNet::<f64>::seeded(3).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(random_image(16, 16, 3, 4).to_tensor::<f64>().reshape(vec![1, 16, 16, 3]).unwrap());
        let g = tape.constant(random_image(16, 16, 3, 5).to_tensor::<f64>().reshape(vec![1, 16, 16, 3]).unwrap());
        let r = hdr_loss(&mut tape, p, g, &net, LAMBDA_P).unwrap().report(&tape);
        assert!(r.l_r >= 0.0 && r.l_p >= 0.0);
        assert!((r.total - (r.l_r + 0.01 * r.l_p)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_check() {
        let net = FeatureNet::<f64>::seeded(1).unwrap();
        let gt = random_image(8, 8, 3, 6).to_tensor::<f64>().reshape(vec![1, 8, 8, 3]).unwrap();
        let point = random_image(8, 8, 3, 7).map(|v| 0.05 + 0.9 * v).to_tensor::<f64>().reshape(vec![1, 8, 8, 3]).unwrap();
        let report = grad_check(
            |tape, x| {
                let g = tape.constant(gt.clone());
                Ok(hdr_loss(tape, x, g, &net, 1.0)?.total)
            },
            &point,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(8, 8, 3, 1);
        assert_eq!(psnr(&a, &a, Domain::Linear).unwrap(), PSNR_CAP);
        let b = Image::from_fn(4, 4, 3, |_, _, _| 0.5);
        let c = b.map(|v| v + 0.01);
        assert!((psnr(&c, &b, Domain::Linear).unwrap() - 40.0).abs() < 1e-9);
        let d = random_image(8, 8, 3, 2);
        let via = psnr(&mu_tonemap_image(&a, MU).unwrap(), &mu_tonemap_image(&d, MU).unwrap(), Domain::Linear).unwrap();
        assert_eq!(psnr(&a, &d, Domain::Mu).unwrap(), via);
    }

    /// Per-pixel 2-D window with explicit renormalisation.
    fn naive_ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let r = 5isize;
        let mut total = 0.0;
        for py in 0..h as isize {
            for px in 0..w as isize {
                let mut ws = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (py + dy, px + dx);
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            let g = (-((dy * dy + dx * dx) as f64) / 4.5).exp();
                            ws.push((g, (yy * w as isize + xx) as usize));
                        }
                    }
                }
                let z: f64 = ws.iter().map(|p| p.0).sum();
                let e = |f: &dyn Fn(usize) -> f64| ws.iter().map(|&(g, i)| g / z * f(i)).sum::<f64>();
                let ux = e(&|i| x[i]);
                let uy = e(&|i| y[i]);
                let vx = e(&|i| (x[i] - ux).powi(2));
                let vy = e(&|i| (y[i] - uy).powi(2));
                let cxy = e(&|i| (x[i] - ux) * (y[i] - uy));
                let (c1, c2) = (1e-4, 9e-4);
                total += (2.0 * ux * uy + c1) * (2.0 * cxy + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
        }
        total / (h * w) as f64
    }

    #[test]
    fn ssim_matches_naive_oracle() {
        for seed in 0..5 {
            let a = random_image(8, 8, 3, seed);
            let b = random_image(8, 8, 3, seed + 100);
            let want = naive_ssim(&grayscale(&a), &grayscale(&b), 8, 8);
            assert!((ssim(&a, &b, Domain::Linear).unwrap() - want).abs() < 1e-9);
        }
        let a = random_image(13, 17, 3, 9);
        let b = random_image(13, 17, 3, 10);
        let want = naive_ssim(&grayscale(&a), &grayscale(&b), 13, 17);
        assert!((ssim(&a, &b, Domain::Linear).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_cases() {
        let a = random_image(8, 8, 3, 4);
        assert_eq!(ssim(&a, &a, Domain::Linear).unwrap(), 1.0);
        assert_eq!(ssim(&a, &a, Domain::Mu).unwrap(), 1.0);

        let board = Image::from_fn(16, 16, 3, |y, x, _| ((y + x) % 2) as f64);
        let inverse = board.map(|v| 1.0 - v);
        assert!(ssim(&board, &inverse, Domain::Linear).unwrap() < 0.0);

        let (p, q) = (0.2, 0.7);
        let c1 = Image::from_fn(9, 9, 3, |_, _, _| p);
        let c2 = Image::from_fn(9, 9, 3, |_, _, _| q);
        let want = (2.0 * p * q + 1e-4) / (p * p + q * q + 1e-4);
        assert!((ssim(&c1, &c2, Domain::Linear).unwrap() - want).abs() < 1e-12);
    }
}

//! Adam optimisation over cropped patches, with seeded batching.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ldr::{augment, stack_images, stack_inputs, Image, NetworkInput, Patch, PatchSet};
use crate::network::{forward, infer_with, HdrTransformer, NetworkConfig};
use crate::objective::{hdr_loss, psnr, quality, Domain, FeatureNet, QualityScores, LAMBDA_P};
use crate::params::{InitScheme, Weights};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

const KEYS: [&str; 15] = [
    "steps",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "lambda_p",
    "patch_size",
    "patch_stride",
    "seed",
    "probe_every",
    "clip_norm",
    "init",
    "feature_seed",
    "augment",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_p: f64,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub seed: u64,
    /// Probe-batch PSNR-μ every this many steps; 0 disables probing.
    pub probe_every: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub init: InitScheme,
    pub feature_seed: u64,
    /// Random dihedral augmentation of each sampled patch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_p: LAMBDA_P,
            patch_size: 128,
            patch_stride: 64,
            seed: 0,
            probe_every: 100,
            clip_norm: 0.0,
            init: InitScheme::Standard,
            feature_seed: 0,
            augment: true,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Desk-scale preset paired with [`NetworkConfig::tiny`]: batch 4, 64×64
    /// patches and a higher step size for short runs.
    pub fn tiny() -> Self {
        Self { batch_size: 4, lr: 1e-3, patch_size: 64, patch_stride: 64, ..Self::default() }
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "lambda_p" => self.lambda_p = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "patch_stride" => self.patch_stride = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "probe_every" => self.probe_every = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "init" => self.init = value.trim().parse()?,
            "feature_seed" => self.feature_seed = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        match key {
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "lambda_p" => self.lambda_p.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "patch_stride" => self.patch_stride.to_string(),
            "seed" => self.seed.to_string(),
            "probe_every" => self.probe_every.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "init" => self.init.to_string(),
            "feature_seed" => self.feature_seed.to_string(),
            "augment" => self.augment.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// `train.key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "train.{key} = {}", self.value(key));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.patch_size == 0 || self.patch_stride == 0 {
            return bad("patch_size and patch_stride must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.lambda_p >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("eps must be positive; lambda_p and clip_norm non-negative");
        }
        Ok(())
    }
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: Weights<T>,
    pub v: Weights<T>,
    /// Number of updates applied so far.
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(weights: &Weights<T>, cfg: &TrainConfig) -> Self {
        let zeros = || {
            let mut z = Weights::default();
            for (k, t) in weights.iter() {
                z.insert(k.clone(), Tensor::zeros(t.shape().to_vec()));
            }
            z
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub(crate) fn header_kv(&self) -> String {
        format!(
            "optim.step = {}\noptim.lr = {}\noptim.beta1 = {}\noptim.beta2 = {}\noptim.eps = {}\n",
            self.step, self.lr, self.beta1, self.beta2, self.eps
        )
    }

    pub(crate) fn from_parts(m: Weights<T>, v: Weights<T>, kv: &[(String, String)], weights: &Weights<T>) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `{key}`")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?.trim().parse().map_err(|_| Error::Checkpoint(format!("bad value for `{key}`")))
        };
        for (name, moments) in [("first", &m), ("second", &v)] {
            for (path, w) in weights.iter() {
                let t = moments
                    .get(path)
                    .map_err(|_| Error::Checkpoint(format!("missing {name} moment for `{path}`")))?;
                if t.shape() != w.shape() {
                    return Err(Error::Checkpoint(format!("{name} moment of `{path}` has the wrong shape")));
                }
            }
            if moments.len() != weights.len() {
                return Err(Error::Checkpoint(format!("{name} moments name unknown parameters")));
            }
        }
        Ok(Self {
            m,
            v,
            step: get("optim.step")?
                .trim()
                .parse()
                .map_err(|_| Error::Checkpoint("bad value for `optim.step`".into()))?,
            lr: num("optim.lr")?,
            beta1: num("optim.beta1")?,
            beta2: num("optim.beta2")?,
            eps: num("optim.eps")?,
        })
    }
}

/// One bias-corrected Adam update of every tensor in `w`, in place.
pub fn adam_step<T: Scalar>(w: &mut Weights<T>, grads: &BTreeMap<String, Tensor<T>>, s: &mut OptimState<T>) -> Result<()> {
    for (path, p) in w.iter() {
        let g = grads
            .get(path)
            .ok_or_else(|| Error::Contract(format!("missing gradient for parameter `{path}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", g.shape(), p.shape()));
        }
    }
    s.step += 1;
    let t = s.step as i32;
    let c1 = 1.0 - s.beta1.powi(t);
    let c2 = 1.0 - s.beta2.powi(t);
    let (b1, b2, lr, eps) = (s.beta1, s.beta2, s.lr, s.eps);
    for (path, p) in w.iter_mut() {
        let g = &grads[path];
        let m = s.m.get_mut(path)?.data_mut();
        let v = s.v.get_mut(path)?.data_mut();
        for (((pw, &gw), mw), vw) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gf = gw.as_f64();
            let mf = b1 * mw.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vw.as_f64() + (1.0 - b2) * gf * gf;
            *mw = T::of(mf);
            *vw = T::of(vf);
            let mhat = mf / c1;
            let vhat = vf / c2;
            *pw = T::of(pw.as_f64() - lr * mhat / (vhat.sqrt() + eps));
        }
    }
    Ok(())
}

/// Rescales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }
    norm
}

/// Per-step training log entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l_r: f64,
    pub l_p: f64,
    pub total: f64,
    pub probe_psnr_mu: Option<f64>,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,l_r,l_p,total,probe_psnr_mu";

    pub fn csv_row(&self) -> String {
        let probe = self.probe_psnr_mu.map_or(String::new(), |p| format!("{p:.6}"));
        format!("{},{:e},{:e},{:e},{probe}", self.step, self.l_r, self.l_p, self.total)
    }
}

/// Patch index and augmentation id of every batch element at `step`
/// (1-based). Each epoch is one seeded permutation of the data; the last
/// batch of an epoch wraps around to its start.
pub fn batch_plan(cfg: &TrainConfig, len: usize, step: u64) -> Vec<(usize, u8)> {
    assert!(len > 0 && step > 0);
    let b = cfg.batch_size;
    let per_epoch = len.div_ceil(b) as u64;
    let s = step - 1;
    let (epoch, k) = (s / per_epoch, (s % per_epoch) as usize);
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + 2 * epoch);
    order.shuffle(&mut rng);
    let mut aug = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug.set_stream(2 + 2 * s);
    (0..b)
        .map(|j| {
            let id = if cfg.augment { aug.random_range(0..8u8) } else { 0 };
            (order[(k * b + j) % len], id)
        })
        .collect()
}

/// Optimisation state plus the training data it runs over.
pub struct Trainer<T: Scalar> {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub weights: Weights<T>,
    pub optim: OptimState<T>,
    feature_net: FeatureNet<T>,
    patches: Vec<Patch>,
    probe: Vec<usize>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh weights drawn from `train.seed`.
    pub fn new(network: NetworkConfig, train: TrainConfig, data: PatchSet) -> Result<Self> {
        let weights = network.init_weights(train.seed, train.init)?;
        let optim = OptimState::new(&weights, &train);
        Self::assemble(network, train, weights, optim, data)
    }

    /// Continues from a checkpoint with the same data.
    pub fn resume(ck: Checkpoint<T>, data: PatchSet) -> Result<Self> {
        Self::assemble(ck.network, ck.train, ck.weights, ck.optim, data)
    }

    fn assemble(
        network: NetworkConfig,
        train: TrainConfig,
        weights: Weights<T>,
        optim: OptimState<T>,
        data: PatchSet,
    ) -> Result<Self> {
        network.validate()?;
        train.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training data yields no patches".into()));
        }
        let size = data.patches[0].gt.dims();
        if let Some(p) = data.patches.iter().find(|p| p.gt.dims() != size) {
            return Err(Error::Config(format!(
                "patch from source {} has size {:?}, expected {size:?}",
                p.provenance.source,
                p.gt.dims()
            )));
        }
        if size[0] < network.window || size[1] < network.window {
            return Err(Error::Config(format!(
                "patch size {}x{} is smaller than the window size {}",
                size[0], size[1], network.window
            )));
        }
        let feature_net = FeatureNet::seeded(train.feature_seed)?;
        let probe = (0..train.batch_size.min(data.len())).collect();
        Ok(Self {
            network,
            train,
            weights,
            optim,
            feature_net,
            patches: data.patches,
            probe,
        })
    }

    /// Replaces the seeded perceptual feature network.
    pub fn with_feature_net(mut self, net: FeatureNet<T>) -> Self {
        self.feature_net = net;
        self
    }

    pub fn feature_net(&self) -> &FeatureNet<T> {
        &self.feature_net
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    /// Mean PSNR-μ of the model over the fixed probe patches.
    pub fn probe_psnr_mu(&self) -> Result<f64> {
        let inputs: Vec<&NetworkInput> = self.probe.iter().map(|&i| &self.patches[i].input).collect();
        let preds = infer_with(&self.network, &self.weights, &inputs)?;
        let mut sum = 0.0;
        for (pred, &i) in preds.iter().zip(&self.probe) {
            sum += psnr(pred, &self.patches[i].gt, Domain::Mu)?;
        }
        Ok(sum / preds.len() as f64)
    }

    /// Runs one forward, backward and update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.optim.step + 1;
        let plan = batch_plan(&self.train, self.patches.len(), step);
        let batch: Vec<Patch> = plan
            .iter()
            .map(|&(i, id)| augment(&self.patches[i], id))
            .collect::<Result<_>>()?;
        let inputs: Vec<&NetworkInput> = batch.iter().map(|p| &p.input).collect();
        let gts: Vec<&Image> = batch.iter().map(|p| &p.gt).collect();

        let mut tape = Tape::<T>::new();
        let params = self.weights.bind(&mut tape, true);
        let [a, b, c] = stack_inputs::<T>(&inputs)?;
        let x = [tape.constant(a), tape.constant(b), tape.constant(c)];
        let gt = tape.constant(stack_images::<T>(&gts)?);
        let pred = forward(&mut tape, &self.network, &params, x)?;
        let loss = hdr_loss(&mut tape, pred, gt, &self.feature_net, self.train.lambda_p)?;
        let report = loss.report(&tape);
        if !report.total.is_finite() {
            let ids: Vec<usize> = plan.iter().map(|&(i, _)| i).collect();
            for &(i, id) in &plan {
                let p = &self.patches[i].provenance;
                log::error!(
                    "step {step}: patch {i} (source {}, crop {},{}, augmentation {id})",
                    p.source,
                    p.y,
                    p.x
                );
            }
            return Err(Error::NonFiniteLoss { step, batch: ids });
        }
        tape.backward(loss.total)?;
        let mut grads = BTreeMap::new();
        for (path, &var) in params.iter() {
            if let Some(g) = tape.grad(var) {
                grads.insert(path.clone(), g.clone());
            }
        }
        drop(tape);
        if self.train.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.train.clip_norm);
        }
        adam_step(&mut self.weights, &grads, &mut self.optim)?;

        let probe_psnr_mu = if self.train.probe_every > 0 && step % self.train.probe_every == 0 {
            Some(self.probe_psnr_mu()?)
        } else {
            None
        };
        Ok(StepRecord {
            step,
            l_r: report.l_r,
            l_p: report.l_p,
            total: report.total,
            probe_psnr_mu,
        })
    }

    /// Steps until `train.steps` updates have been applied.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut log = Vec::new();
        while self.optim.step < self.train.steps {
            let rec = self.step()?;
            on_step(&rec);
            log.push(rec);
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            network: self.network,
            train: self.train.clone(),
            weights: self.weights.clone(),
            optim: self.optim.clone(),
        }
    }

    pub fn model(&self) -> HdrTransformer<T> {
        HdrTransformer {
            config: self.network,
            weights: self.weights.clone(),
        }
    }
}

/// Named full-size evaluation sample.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub name: String,
    pub input: NetworkInput,
    pub gt: Image,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<(String, QualityScores)>,
}

impl EvalReport {
    pub fn mean(&self) -> QualityScores {
        let n = self.rows.len().max(1) as f64;
        let sum = |f: fn(&QualityScores) -> f64| self.rows.iter().map(|(_, q)| f(q)).sum::<f64>() / n;
        QualityScores {
            psnr_l: sum(|q| q.psnr_l),
            psnr_mu: sum(|q| q.psnr_mu),
            ssim_l: sum(|q| q.ssim_l),
            ssim_mu: sum(|q| q.ssim_mu),
        }
    }

    /// One row per sample followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,psnr_l,psnr_mu,ssim_l,ssim_mu\n");
        let row = |out: &mut String, name: &str, q: &QualityScores| {
            let _ = writeln!(out, "{name},{:.6},{:.6},{:.8},{:.8}", q.psnr_l, q.psnr_mu, q.ssim_l, q.ssim_mu);
        };
        for (name, q) in &self.rows {
            row(&mut out, name, q);
        }
        row(&mut out, "mean", &self.mean());
        out
    }
}

/// Scores each sample's full-resolution prediction.
pub fn evaluate<T: Scalar>(model: &HdrTransformer<T>, samples: &[EvalSample]) -> Result<EvalReport> {
    let rows = samples
        .iter()
        .map(|s| Ok((s.name.clone(), quality(&model.infer(&s.input)?, &s.gt)?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldr::{assemble_input, crop_patches, synth_scene, SynthParams, DEFAULT_GAMMA};

    fn toy_data(count: u64, size: usize) -> PatchSet {
        let samples: Vec<_> = (0..count)
            .map(|seed| {
                let s = synth_scene(&SynthParams { seed, size: 32, ..SynthParams::default() }).unwrap();
                let input = assemble_input(&s.bracket, DEFAULT_GAMMA).unwrap();
                (input, s.bracket.gt_hdr.unwrap())
            })
            .collect();
        crop_patches(&samples, size, size).unwrap()
    }

    fn toy_train() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch_size: 3,
            patch_size: 16,
            patch_stride: 16,
            probe_every: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn scalar_adam_matches_hand_rolled_oracle() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut w = Weights::<f64>::default();
        w.insert("w", Tensor::scalar(1.5));
        let cfg = TrainConfig { lr, ..TrainConfig::default() };
        let mut s = OptimState::new(&w, &cfg);

        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);

            let wv = w.get("w").unwrap().data()[0];
            let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(2.0 * wv))]);
            adam_step(&mut w, &grads, &mut s).unwrap();
            assert!((w.get("w").unwrap().data()[0] - x).abs() < 1e-12);
        }
        assert_eq!(s.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e3] {
            let mut w = Weights::<f64>::default();
            w.insert("a", Tensor::full(vec![4], 0.5));
            let mut s = OptimState::new(&w, &TrainConfig::default());
            let grads = BTreeMap::from([("a".to_string(), Tensor::full(vec![4], g))]);
            adam_step(&mut w, &grads, &mut s).unwrap();
            for &v in w.get("a").unwrap().data() {
                assert!(((v - 0.5).abs() - 2e-4).abs() < 1e-7);
                assert_eq!((v - 0.5).signum(), -f64::signum(g));
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_weights_and_missing_gradient_is_named() {
        let mut w = Weights::<f64>::default();
        w.insert("a", Tensor::full(vec![2], 0.5));
        w.insert("b", Tensor::full(vec![1], -1.0));
        let mut s = OptimState::new(&w, &TrainConfig::default());
        s.m.get_mut("a").unwrap().data_mut()[0] = 0.0;
        let before = w.clone();
        let zeros = BTreeMap::from([
            ("a".to_string(), Tensor::zeros(vec![2])),
            ("b".to_string(), Tensor::zeros(vec![1])),
        ]);
        adam_step(&mut w, &zeros, &mut s).unwrap();
        assert_eq!(w, before);

        let partial = BTreeMap::from([("a".to_string(), Tensor::zeros(vec![2]))]);
        let err = adam_step(&mut w, &partial, &mut s).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
        assert_eq!(s.step, 1);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::<f64>::full(vec![1], 3.0)),
            ("b".to_string(), Tensor::<f64>::full(vec![1], 4.0)),
        ]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((clip_global_norm(&mut g, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_plan_covers_each_epoch_and_wraps() {
        let cfg = TrainConfig { batch_size: 4, seed: 9, ..TrainConfig::default() };
        let len = 10;
        let epoch: Vec<usize> = (1..=3).flat_map(|s| batch_plan(&cfg, len, s)).map(|(i, _)| i).collect();
        assert_eq!(epoch.len(), 12);
        let mut first: Vec<usize> = epoch[..10].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(&epoch[10..], &epoch[..2]);
        assert_eq!(batch_plan(&cfg, len, 2), batch_plan(&cfg, len, 2));
        assert_ne!(batch_plan(&cfg, len, 1), batch_plan(&cfg, len, 4));
        assert!(epoch.iter().all(|&i| i < len));
        let plain = TrainConfig { augment: false, ..cfg };
        assert!(batch_plan(&plain, len, 5).iter().all(|&(_, id)| id == 0));
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = TrainConfig { lr: 1.2345e-4, init: InitScheme::ResidualZero, augment: false, ..TrainConfig::default() };
        let mut back = TrainConfig::default();
        for line in cfg.to_kv().lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            back.set(k.strip_prefix("train.").unwrap(), v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(back.set("nope", "1").is_err());
        assert!(back.set("lr", "fast").is_err());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = toy_data(2, 16);
        let run = |steps| {
            let mut t = Trainer::<f64>::new(NetworkConfig::toy(), TrainConfig { steps, ..toy_train() }, data.clone()).unwrap();
            let log = t.run(|_| {}).unwrap();
            (t, log)
        };
        let (full, log_a) = run(6);
        let (_, log_b) = run(6);
        assert_eq!(log_a, log_b);
        assert!(log_a[2].probe_psnr_mu.is_some() && log_a[1].probe_psnr_mu.is_none());

        let (half, _) = run(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.ckpt");
        half.checkpoint().save(&path).unwrap();
        let mut ck = Checkpoint::<f64>::load(&path).unwrap();
        ck.train.steps = 6;
        let mut resumed = Trainer::resume(ck, data).unwrap();
        let tail = resumed.run(|_| {}).unwrap();
        assert_eq!(tail, log_a[3..]);
        assert_eq!(resumed.weights, full.weights);
    }

    #[test]
    fn feature_net_is_untouched_by_training() {
        let mut t = Trainer::<f64>::new(NetworkConfig::toy(), TrainConfig { steps: 2, ..toy_train() }, toy_data(1, 16)).unwrap();
        let before = t.feature_net().clone();
        let w0 = t.weights.clone();
        t.run(|_| {}).unwrap();
        assert_eq!(t.feature_net(), &before);
        assert_ne!(t.weights, w0);
    }

    #[test]
    fn rejects_patches_below_window() {
        let err = Trainer::<f32>::new(NetworkConfig::tiny(), toy_train(), toy_data(1, 4)).err().unwrap();
        assert!(err.to_string().contains("window"), "{err}");
        assert!(Trainer::<f32>::new(NetworkConfig::tiny(), toy_train(), PatchSet::default()).is_err());
    }

    #[test]
    fn evaluation_report_has_means() {
        let s = synth_scene(&SynthParams { size: 32, ..SynthParams::default() }).unwrap();
        let sample = EvalSample {
            name: "s0".into(),
            input: assemble_input(&s.bracket, DEFAULT_GAMMA).unwrap(),
            gt: s.bracket.gt_hdr.unwrap(),
        };
        let model = HdrTransformer::<f64>::new(NetworkConfig::toy(), 0, InitScheme::Standard).unwrap();
        let r = evaluate(&model, &[sample.clone(), sample]).unwrap();
        assert_eq!(r.mean(), r.rows[0].1);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }
}

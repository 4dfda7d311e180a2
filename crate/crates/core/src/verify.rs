//! Gradient-check suite over every primitive and every network block.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{ca_vit, LN_EPS};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::network::{ctb_forward, forward, spatial_attention, NetworkConfig};
use crate::params::{InitScheme, Weights};
use crate::tape::{Conv2dSpec, Primitive, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub network: NetworkConfig,
    pub seed: u64,
    pub threshold: f64,
    /// Most coordinates probed per tensor.
    pub max_coords: usize,
    /// Spatial size of the end-to-end check.
    pub model_size: usize,
    /// Corrupts the adjoint of one primitive (test hook).
    pub fault: Option<Primitive>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            network: NetworkConfig::tiny(),
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            max_coords: 6,
            model_size: 16,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub block: String,
    /// Which tensor was probed: an operand name or a parameter path.
    pub case: String,
    pub max_relative_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub threshold: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_relative_error < self.threshold)
    }

    /// The case with the largest error within each block, in run order.
    pub fn worst_per_block(&self) -> Vec<&CaseResult> {
        let mut out: Vec<&CaseResult> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|w| w.block == c.block) {
                Some(w) if c.max_relative_error > w.max_relative_error => *w = c,
                Some(_) => {}
                None => out.push(c),
            }
        }
        out
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.worst_per_block()
            .into_iter()
            .filter(|c| c.max_relative_error >= self.threshold)
            .collect()
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .fold(None, |w: Option<&CaseResult>, c| match w {
                Some(w) if w.max_relative_error >= c.max_relative_error => Some(w),
                _ => Some(c),
            })
    }

    /// One line per block with its worst case, then a verdict line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in self.worst_per_block() {
            let flag = if c.max_relative_error < self.threshold { "ok  " } else { "FAIL" };
            let _ = writeln!(
                out,
                "{flag} {:<28} {:<40} {:.3e} ({} coords)",
                c.block, c.case, c.max_relative_error, c.checked
            );
        }
        let total: usize = self.cases.iter().map(|c| c.checked).sum();
        let worst = self.worst().map_or(0.0, |c| c.max_relative_error);
        let _ = writeln!(
            out,
            "{} cases, {total} coordinates, worst {worst:.3e}, threshold {:.0e}: {}",
            self.cases.len(),
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

/// Fixed projection weights, so every output element reaches the loss
/// with a distinct coefficient.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.754_877_666_2).fract() - 0.5);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

struct Suite<'a> {
    opts: &'a VerifyOptions,
    rng: ChaCha8Rng,
    cases: Vec<CaseResult>,
}

impl Suite<'_> {
    fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| self.rng.random_range(lo..hi))
    }

    /// Values bounded away from zero, for primitives with a kink there.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| {
            let m = self.rng.random_range(0.1..1.0);
            if self.rng.random_bool(0.5) { m } else { -m }
        })
    }

    fn check(&mut self, block: &str, case: &str, point: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<()> {
        let n = point.numel();
        let k = self.opts.max_coords.min(n);
        let mut coords = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        coords.sort_unstable();
        let opts = GradCheckOptions {
            coords: Some(coords),
            fault: self.opts.fault,
            ..GradCheckOptions::default()
        };
        let r = grad_check(
            |tape, x| {
                let y = f(tape, x)?;
                project(tape, y)
            },
            point,
            &opts,
        )?;
        log::debug!("{block} {case}: {:.3e}", r.max_relative_error);
        self.cases.push(CaseResult {
            block: block.to_string(),
            case: case.to_string(),
            max_relative_error: r.max_relative_error,
            checked: r.checked,
        });
        Ok(())
    }

    /// Checks the input and every parameter whose path starts with one of
    /// `prefixes`.
    fn check_block(
        &mut self,
        block: &str,
        w: &Weights<f64>,
        prefixes: &[String],
        inputs: &[(&str, Tensor<f64>)],
        f: impl Fn(&mut Tape<f64>, &crate::params::ParamVars, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        for (i, (name, point)) in inputs.iter().enumerate() {
            self.check(block, name, point, |tape, probe| {
                let p = w.bind(tape, false);
                let xs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (_, t))| if j == i { probe } else { tape.constant(t.clone()) })
                    .collect();
                f(tape, &p, &xs)
            })?;
        }
        let paths: Vec<String> = w
            .paths()
            .filter(|p| prefixes.iter().any(|pre| p.starts_with(pre.as_str())))
            .cloned()
            .collect();
        for path in paths {
            self.check(block, &path, w.get(&path)?, |tape, probe| {
                let mut p = w.bind(tape, false);
                p.set(path.as_str(), probe);
                let xs: Vec<Var> = inputs.iter().map(|(_, t)| tape.constant(t.clone())).collect();
                f(tape, &p, &xs)
            })?;
        }
        Ok(())
    }

    fn binary(&mut self, prim: Primitive, a: Tensor<f64>, b: Tensor<f64>, op: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<()> {
        let block = format!("primitive:{}", prim.name());
        let (ca, cb) = (a.clone(), b.clone());
        self.check(&block, "lhs", &a, |t, x| {
            let y = t.constant(cb.clone());
            op(t, x, y)
        })?;
        self.check(&block, "rhs", &b, |t, y| {
            let x = t.constant(ca.clone());
            op(t, x, y)
        })
    }

    fn unary(&mut self, prim: Primitive, x: Tensor<f64>, op: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<()> {
        self.check(&format!("primitive:{}", prim.name()), "x", &x, op)
    }

    fn primitives(&mut self) -> Result<()> {
        use Primitive as P;
        let s = [2, 3, 4];
        for prim in P::ALL {
            match prim {
                P::Add => {
                    let (a, b) = (self.tensor(&s, -1.0, 1.0), self.tensor(&[4], -1.0, 1.0));
                    self.binary(prim, a, b, |t, x, y| t.add(x, y))?
                }
                P::Sub => {
                    let (a, b) = (self.tensor(&s, -1.0, 1.0), self.tensor(&[3, 1], -1.0, 1.0));
                    self.binary(prim, a, b, |t, x, y| t.sub(x, y))?
                }
                P::Mul => {
                    let (a, b) = (self.tensor(&s, -1.0, 1.0), self.tensor(&[1, 3, 4], -1.0, 1.0));
                    self.binary(prim, a, b, |t, x, y| t.mul(x, y))?
                }
                P::Scale => {
                    let x = self.tensor(&s, -1.0, 1.0);
                    self.unary(prim, x, |t, x| t.scale(x, -1.7))?
                }
                P::AddScalar => {
                    let x = self.tensor(&s, -1.0, 1.0);
                    self.unary(prim, x, |t, x| t.add_scalar(x, 0.3))?
                }
                P::Matmul => {
                    let (a, b) = (self.tensor(&[2, 3, 5], -1.0, 1.0), self.tensor(&[5, 4], -1.0, 1.0));
                    self.binary(prim, a, b, |t, x, y| t.matmul(x, y))?
                }
                P::Linear => {
                    let x = self.tensor(&[2, 3, 5], -1.0, 1.0);
                    let w = self.tensor(&[5, 4], -1.0, 1.0);
                    let b = self.tensor(&[4], -1.0, 1.0);
                    let (cx, cw, cb) = (x.clone(), w.clone(), b.clone());
                    let block = "primitive:linear";
                    self.check(block, "x", &x, |t, x| {
                        let (w, b) = (t.constant(cw.clone()), t.constant(cb.clone()));
                        t.linear(x, w, Some(b))
                    })?;
                    self.check(block, "weight", &w, |t, w| {
                        let (x, b) = (t.constant(cx.clone()), t.constant(cb.clone()));
                        t.linear(x, w, Some(b))
                    })?;
                    self.check(block, "bias", &b, |t, b| {
                        let (x, w) = (t.constant(cx.clone()), t.constant(cw.clone()));
                        t.linear(x, w, Some(b))
                    })?;
                }
                P::Conv2d => {
                    let block = "primitive:conv2d";
                    for (tag, spec) in [
                        ("same", Conv2dSpec::same(3, 1)),
                        ("dilated", Conv2dSpec::same(3, 2)),
                        ("strided", Conv2dSpec { stride: 2, dilation: 1, padding: 1 }),
                    ] {
                        let x = self.tensor(&[2, 5, 6, 3], -1.0, 1.0);
                        let k = self.tensor(&[3, 3, 3, 4], -1.0, 1.0);
                        let b = self.tensor(&[4], -1.0, 1.0);
                        let (cx, ck, cb) = (x.clone(), k.clone(), b.clone());
                        self.check(block, &format!("{tag}.x"), &x, |t, x| {
                            let (k, b) = (t.constant(ck.clone()), t.constant(cb.clone()));
                            t.conv2d(x, k, Some(b), spec)
                        })?;
                        self.check(block, &format!("{tag}.kernel"), &k, |t, k| {
                            let (x, b) = (t.constant(cx.clone()), t.constant(cb.clone()));
                            t.conv2d(x, k, Some(b), spec)
                        })?;
                        self.check(block, &format!("{tag}.bias"), &b, |t, b| {
                            let (x, k) = (t.constant(cx.clone()), t.constant(ck.clone()));
                            t.conv2d(x, k, Some(b), spec)
                        })?;
                    }
                }
                P::LayerNorm => {
                    let x = self.tensor(&[3, 6], -1.0, 1.0);
                    let g = self.tensor(&[6], 0.5, 1.5);
                    let b = self.tensor(&[6], -0.5, 0.5);
                    let (cx, cg, cb) = (x.clone(), g.clone(), b.clone());
                    let block = "primitive:layer_norm";
                    self.check(block, "x", &x, |t, x| {
                        let (g, b) = (t.constant(cg.clone()), t.constant(cb.clone()));
                        t.layer_norm(x, g, b, LN_EPS)
                    })?;
                    self.check(block, "gamma", &g, |t, g| {
                        let (x, b) = (t.constant(cx.clone()), t.constant(cb.clone()));
                        t.layer_norm(x, g, b, LN_EPS)
                    })?;
                    self.check(block, "beta", &b, |t, b| {
                        let (x, g) = (t.constant(cx.clone()), t.constant(cg.clone()));
                        t.layer_norm(x, g, b, LN_EPS)
                    })?;
                }
                P::Softmax => {
                    let x = self.tensor(&[3, 5], -2.0, 2.0);
                    self.unary(prim, x.clone(), |t, x| t.softmax(x))?;
                    let mask: Vec<bool> = (0..15).map(|i| i % 5 != 3).collect();
                    self.check("primitive:softmax", "masked", &x, |t, x| t.softmax_masked(x, Some(&mask)))?;
                }
                P::Gelu => {
                    let x = self.tensor(&s, -3.0, 3.0);
                    self.unary(prim, x, |t, x| t.gelu(x))?
                }
                P::Relu => {
                    let x = self.off_zero(&s);
                    self.unary(prim, x, |t, x| t.relu(x))?
                }
                P::LeakyRelu => {
                    let x = self.off_zero(&s);
                    self.unary(prim, x, |t, x| t.leaky_relu(x, 0.1))?
                }
                P::Sigmoid => {
                    let x = self.tensor(&s, -3.0, 3.0);
                    self.unary(prim, x, |t, x| t.sigmoid(x))?
                }
                P::Abs => {
                    let x = self.off_zero(&s);
                    self.unary(prim, x, |t, x| t.abs(x))?
                }
                P::Ln => {
                    let x = self.tensor(&s, 0.5, 2.0);
                    self.unary(prim, x, |t, x| t.ln(x))?
                }
                P::Sum => {
                    let x = self.tensor(&s, -1.0, 1.0);
                    self.unary(prim, x, |t, x| t.sum(x))?
                }
                P::Mean => {
                    let x = self.tensor(&s, -1.0, 1.0);
                    self.unary(prim, x, |t, x| t.mean(x))?
                }
                P::MeanAxes => {
                    let x = self.tensor(&s, -1.0, 1.0);
                    self.unary(prim, x, |t, x| t.mean_axes(x, &[0, 2]))?
                }
                P::Concat => {
                    let (a, b) = (self.tensor(&[2, 3, 2], -1.0, 1.0), self.tensor(&[2, 3, 5], -1.0, 1.0));
                    self.binary(prim, a, b, |t, x, y| t.concat(&[x, y], 2))?
                }
                P::Reshape => {
                    let x = self.tensor(&s, -1.0, 1.0);
                    self.unary(prim, x, |t, x| t.reshape(x, &[6, 4]))?
                }
                P::Permute => {
                    let x = self.tensor(&s, -1.0, 1.0);
                    self.unary(prim, x, |t, x| t.permute(x, &[2, 0, 1]))?
                }
                P::Slice => {
                    let x = self.tensor(&s, -1.0, 1.0);
                    self.unary(prim, x, |t, x| t.slice(x, 1, 1, 2))?
                }
                P::Pad => {
                    let x = self.tensor(&s, -1.0, 1.0);
                    self.unary(prim, x, |t, x| t.pad(x, 2, 1, 3))?
                }
                P::Roll => {
                    let x = self.tensor(&s, -1.0, 1.0);
                    self.unary(prim, x, |t, x| t.roll(x, 1, -2))?
                }
                P::Gather => {
                    let x = self.tensor(&[5, 3], -1.0, 1.0);
                    let idx = Arc::new(vec![4, 0, 0, 2, 4, 4, 1]);
                    self.unary(prim, x, move |t, x| t.gather(x, idx.clone()))?
                }
                P::Leaf => {}
            }
        }
        Ok(())
    }
}

/// Runs every check. Numerical failures are reported, not returned as
/// errors; `Err` means a check could not be evaluated at all.
pub fn run_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let cfg = opts.network;
    cfg.validate()?;
    let mut suite = Suite {
        opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        cases: Vec::new(),
    };
    suite.primitives()?;

    let w = cfg.init_weights::<f64>(opts.seed, InitScheme::Standard)?;
    let dims = cfg.block_dims();
    let (d, c, ws) = (cfg.embed_dim, cfg.shallow_channels, cfg.window);
    // Not a multiple of the window, so padding and masking are exercised.
    let side = ws + ws / 2;

    for m in 0..cfg.cavits_per_ctb.min(2) {
        let shift = dims.shift_for(m);
        let prefix = format!("ctb.0.cavit.{m}.");
        let e = suite.tensor(&[1, side, side, d], -1.0, 1.0);
        suite.check_block(&format!("ca_vit(shift={shift})"), &w, &[prefix.clone()], &[("input", e)], |t, p, x| {
            ca_vit(t, x[0], p, &prefix, &dims, shift)
        })?;
    }

    let fi = suite.tensor(&[1, side, side, c], -1.0, 1.0);
    let fr = suite.tensor(&[1, side, side, c], -1.0, 1.0);
    suite.check_block(
        "spatial_attention",
        &w,
        &["extract.att1.".into()],
        &[("f_i", fi), ("f_ref", fr)],
        |t, p, x| spatial_attention(t, p, 1, x[0], x[1]),
    )?;

    let f0 = suite.tensor(&[1, side, side, d], -1.0, 1.0);
    suite.check_block("ctb", &w, &["ctb.0.".into()], &[("input", f0)], |t, p, x| ctb_forward(t, &cfg, p, 0, x[0]))?;

    let n = opts.model_size;
    let xs: Vec<(&str, Tensor<f64>)> = ["x1", "x2", "x3"]
        .into_iter()
        .map(|name| (name, suite.tensor(&[1, n, n, cfg.input_channels], 0.0, 1.0)))
        .collect();
    suite.check_block("model", &w, &[String::new()], &xs, |t, p, x| forward(t, &cfg, p, [x[0], x[1], x[2]]))?;

    Ok(SuiteReport {
        cases: suite.cases,
        threshold: opts.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> VerifyOptions {
        VerifyOptions {
            network: NetworkConfig::toy(),
            max_coords: 3,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn toy_suite_passes_and_is_reproducible() {
        let a = run_suite(&toy()).unwrap();
        assert!(a.passed(), "{}", a.render());
        let blocks: Vec<&str> = a.worst_per_block().iter().map(|c| c.block.as_str()).collect();
        for want in ["primitive:gather", "ca_vit(shift=0)", "ca_vit(shift=4)", "spatial_attention", "ctb", "model"] {
            assert!(blocks.contains(&want), "{blocks:?}");
        }
        assert_eq!(blocks.len(), Primitive::ALL.len() + 5);
        assert_eq!(run_suite(&toy()).unwrap().render(), a.render());
    }

    #[test]
    fn injected_fault_is_named() {
        let r = run_suite(&VerifyOptions { fault: Some(Primitive::Softmax), ..toy() }).unwrap();
        assert!(!r.passed());
        let failed: Vec<&str> = r.failures().iter().map(|c| c.block.as_str()).collect();
        assert!(failed.contains(&"primitive:softmax"), "{failed:?}");
        assert!(!failed.contains(&"primitive:gelu"));
        assert!(r.render().contains("FAIL primitive:softmax"));
    }
}

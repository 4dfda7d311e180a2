//! Named parameter sets and their binding onto a tape.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

/// Declared parameter: path, shape and initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Last layer of a residual branch; zeroed under
    /// [`InitScheme::ResidualZero`].
    pub residual_last: bool,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            path: path.into(),
            shape: shape.into(),
            init,
            residual_last: false,
        }
    }

    pub fn residual_last(mut self) -> Self {
        self.residual_last = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    #[default]
    Standard,
    /// Zero the last layer of every residual branch so each residual block
    /// starts as the identity.
    ResidualZero,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "residual_zero" => Ok(Self::ResidualZero),
            other => Err(Error::Config(format!("unknown init scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::ResidualZero => "residual_zero",
        })
    }
}

/// Trainable tensors keyed by parameter path, in sorted path order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Weights<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Weights<T> {
    /// Draws every declared tensor from one seeded stream, in declaration order.
    pub fn init(specs: &[ParamSpec], seed: u64, scheme: InitScheme) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..n).map(|_| T::of(d.sample(&mut rng))).collect()
                }
                Init::Uniform(bound) => {
                    let d = Uniform::new_inclusive(-bound, bound)
                        .map_err(|e| Error::Config(e.to_string()))?;
                    (0..n).map(|_| T::of(d.sample(&mut rng))).collect()
                }
            };
            let data = if spec.residual_last && scheme == InitScheme::ResidualZero {
                vec![T::zero(); n]
            } else {
                data
            };
            if tensors
                .insert(spec.path.clone(), Tensor::new(spec.shape.clone(), data)?)
                .is_some()
            {
                return Err(Error::Contract(format!("duplicate parameter path `{}`", spec.path)));
            }
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{path}`")))
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(path.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every tensor on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }

    /// Checks that the set of paths and shapes matches `specs` exactly.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.tensors.get(&spec.path).ok_or_else(|| {
                Error::Contract(format!("missing parameter `{}`", spec.path))
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.path,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.path.as_str()).collect();
            let extra = self.tensors.keys().find(|k| !known.contains(k.as_str()));
            return Err(Error::Contract(format!(
                "unknown parameter path `{}`",
                extra.map_or("?", |s| s.as_str())
            )));
        }
        Ok(())
    }
}

/// Tape handles of a bound parameter set.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{path}` is not bound")))
    }

    /// Replaces the handle of one parameter (e.g. with a probe leaf).
    pub fn set(&mut self, path: impl Into<String>, var: Var) {
        self.vars.insert(path.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

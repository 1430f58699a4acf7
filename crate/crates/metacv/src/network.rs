//! Fully connected networks used as control-variate vector fields.
//!
//! A network maps `x ∈ R^d` to a vector field `u(x) ∈ R^d`, either by
//! broadcasting a scalar output to every coordinate (the default) or by
//! emitting `d` outputs directly. For distributions supported on the unit
//! cube a multiplicative boundary correction `δ(x) = Π_j x_j (1 − x_j)`
//! forces the field to vanish on the boundary.
//!
//! The flat parameter layout is layer-major — for each layer the row-major
//! `out × in` weight matrix followed by its `out` biases — and is what the
//! checkpoint format and every gradient in this crate index into.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, VectorProgram};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network must have at least one hidden layer")]
    NoHiddenLayers,
    #[error("layer {index} has zero width")]
    ZeroWidthLayer { index: usize },
    #[error("input dimension must be at least 1")]
    ZeroInputDim,
    #[error("parameter vector has length {got}, spec requires {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("checkpoint version {got} is not supported (expected {expected})")]
    Version { expected: u32, got: u32 },
    #[error("non-finite parameter at index {index}")]
    NonFiniteParam { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
}

/// How the network's output becomes a `d`-dimensional vector field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// One scalar output broadcast to every coordinate (the default).
    ReplicateScalar,
    /// `d` outputs used as the field directly.
    Direct,
}

/// Multiplicative factor applied to the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCorrection {
    None,
    /// `δ(x) = Π_j x_j (1 − x_j)`; zero on the boundary of `[0,1]^d`.
    UnitCubeProduct,
}

/// Architecture of the field network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_mode: OutputMode,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 {
            return Err(NetworkError::ZeroInputDim);
        }
        if self.hidden.is_empty() {
            return Err(NetworkError::NoHiddenLayers);
        }
        if let Some(index) = self.hidden.iter().position(|&w| w == 0) {
            return Err(NetworkError::ZeroWidthLayer { index });
        }
        Ok(())
    }

    /// Width of the final affine layer.
    pub fn output_dim(&self) -> usize {
        match self.output_mode {
            OutputMode::ReplicateScalar => 1,
            OutputMode::Direct => self.input_dim,
        }
    }

    /// `(out, in)` shape of each affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    /// Total number of network parameters (excludes the γ₀ offset).
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    /// Network forward pass over any scalar type; hidden layers use the
    /// configured activation, the output layer is affine.
    pub fn forward<S: Scalar>(&self, weights: &[S], x: &[S]) -> Vec<S> {
        debug_assert_eq!(weights.len(), self.param_count());
        debug_assert_eq!(x.len(), self.input_dim);
        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let mut h: Vec<S> = x.to_vec();
        let mut off = 0;
        for (l, &(n_out, n_in)) in shapes.iter().enumerate() {
            let mut next = Vec::with_capacity(n_out);
            let bias_off = off + n_out * n_in;
            for j in 0..n_out {
                let mut z = weights[bias_off + j];
                let row = off + j * n_in;
                for (i, hi) in h.iter().enumerate() {
                    z = z + weights[row + i] * *hi;
                }
                if l != last {
                    z = match self.activation {
                        Activation::Sigmoid => z.sigmoid(),
                        Activation::Tanh => z.tanh(),
                    };
                }
                next.push(z);
            }
            h = next;
            off = bias_off + n_out;
        }
        h
    }
}

/// The boundary factor `δ(x)` in generic arithmetic.
pub fn boundary_factor<S: Scalar>(bc: BoundaryCorrection, x: &[S]) -> S {
    match bc {
        BoundaryCorrection::None => S::one(),
        BoundaryCorrection::UnitCubeProduct => {
            let mut d = S::one();
            for &xi in x {
                d = d * xi * (S::one() - xi);
            }
            d
        }
    }
}

/// The vector field `u(x) = ũ(x) · δ(x)` with `ũ` the (possibly broadcast)
/// network output. Returns `input_dim` components.
pub fn vector_field<S: Scalar>(
    spec: &NetworkSpec,
    bc: BoundaryCorrection,
    weights: &[S],
    x: &[S],
) -> Vec<S> {
    let out = spec.forward(weights, x);
    let delta = boundary_factor(bc, x);
    match spec.output_mode {
        OutputMode::ReplicateScalar => {
            let v = out[0] * delta;
            vec![v; spec.input_dim]
        }
        OutputMode::Direct => out.into_iter().map(|o| o * delta).collect(),
    }
}

/// A network together with its boundary correction, viewed as a
/// parameterized vector program (for Jacobian/divergence checks).
pub struct FieldProgram<'a> {
    pub spec: &'a NetworkSpec,
    pub bc: BoundaryCorrection,
}

impl VectorProgram for FieldProgram<'_> {
    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }
    fn output_dim(&self) -> usize {
        self.spec.input_dim
    }
    fn param_len(&self) -> usize {
        self.spec.param_count()
    }
    fn eval<S: Scalar>(&self, params: &[S], x: &[S]) -> Vec<S> {
        vector_field(self.spec, self.bc, params, x)
    }
}

/// Full control-variate parameter vector `γ = (γ₀, γ_{1:p})`: the integral
/// estimate offset plus the flat network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVParameters {
    pub gamma0: f64,
    pub weights: Vec<f64>,
}

impl CVParameters {
    /// Flatten to the `p + 1` vector the optimizers work on, γ₀ first.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.weights.len());
        v.push(self.gamma0);
        v.extend_from_slice(&self.weights);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        CVParameters { gamma0: flat[0], weights: flat[1..].to_vec() }
    }

    pub fn check_finite(&self) -> Result<(), NetworkError> {
        if !self.gamma0.is_finite() {
            return Err(NetworkError::NonFiniteParam { index: 0 });
        }
        if let Some(i) = self.weights.iter().position(|w| !w.is_finite()) {
            return Err(NetworkError::NonFiniteParam { index: i + 1 });
        }
        Ok(())
    }
}

/// Draw `γ` for a fresh network: every weight and bias i.i.d.
/// `N(0, sigma_init²)` from a counter-based stream, `γ₀ = gamma0_init`.
/// `sigma_init = 0` gives exactly zero parameters.
pub fn init_params(spec: &NetworkSpec, sigma_init: f64, gamma0_init: f64, seed: u64) -> CVParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..spec.param_count())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma_init * z
        })
        .collect();
    CVParameters { gamma0: gamma0_init, weights }
}

const CHECKPOINT_VERSION: u32 = 1;

/// On-disk snapshot of a trained parameter vector. JSON with shortest
/// round-trip float encoding, so save → load reproduces every bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: NetworkSpec,
    pub boundary: BoundaryCorrection,
    pub params: CVParameters,
    pub metadata: CheckpointMeta,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub artifact_version: String,
    /// Free-form provenance notes (optimizer choices and the like).
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(
        spec: NetworkSpec,
        boundary: BoundaryCorrection,
        params: CVParameters,
        metadata: CheckpointMeta,
    ) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, spec, boundary, params, metadata }
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        self.params.check_finite()?;
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let body = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&body)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NetworkError::Version { expected: CHECKPOINT_VERSION, got: ck.version });
        }
        let expected = ck.spec.param_count();
        if ck.params.weights.len() != expected {
            return Err(NetworkError::ParamLength { expected, got: ck.params.weights.len() });
        }
        ck.params.check_finite()?;
        Ok(ck)
    }
}

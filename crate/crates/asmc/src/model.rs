//! The Feynman-Kac model abstraction consumed by the particle engine.
//!
//! A model is a sequence of levels `0..=n`: an initial law, a positive
//! potential and a Markov mutation kernel per level transition, and a
//! summary statistic per level. Potentials and kernels are parameterized
//! by a flat real vector `z`; in adaptive mode the engine feeds the
//! particle average of the summary statistic back in as `z`, in
//! nonadaptive mode it uses the model's stored reference parameters.
//!
//! Matrix-valued adaptive quantities (e.g. an estimated covariance) are
//! carried flattened inside `z` with a shape known to the model, which
//! keeps the engine's parameter plumbing uniform.

use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Whether level parameters come from the particle cloud or from the
/// model's reference parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptivityMode {
    /// Level `p+1` uses the particle estimate of the level-`p` summary
    /// statistic as its parameter.
    Adaptive,
    /// Every level uses the stored reference parameter. Requires
    /// [`FeynmanKacModel::reference_parameters`] to be present.
    Nonadaptive,
}

impl std::fmt::Display for AdaptivityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdaptivityMode::Adaptive => write!(f, "adaptive"),
            AdaptivityMode::Nonadaptive => write!(f, "nonadaptive"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    /// A potential evaluated to a non-finite or non-positive value.
    #[error("potential violation at level {level}: G = {value} must be finite and > 0")]
    PotentialViolation { level: usize, value: f64 },
    /// Exact kernel application was requested on a model without a
    /// finite-support descriptor.
    #[error("exact kernel application unavailable: model has no finite-support descriptor")]
    ExactKernelUnavailable,
    #[error("level {level} out of range [{lo}, {hi}]")]
    LevelOutOfRange { level: usize, lo: usize, hi: usize },
}

/// A (possibly adaptive) Feynman-Kac model: initial law, parameterized
/// potentials and mutation kernels, and per-level summary statistics.
///
/// Implementations must be safe to call concurrently from replicate
/// workers; all randomness flows through the explicitly passed stream.
pub trait FeynmanKacModel: Sync {
    type State: Clone + Send + Sync;

    /// Terminal level `n`; the model spans levels `0..=n`.
    fn n_levels(&self) -> usize;

    /// Dimension `d` of the summary statistic (the same at every level).
    fn summary_dim(&self) -> usize;

    /// Draw one state from the initial law.
    fn sample_initial(&self, rng: &mut StreamRng) -> Self::State;

    /// The potential of `level` (in `0..n`) at `x` under parameter `z`.
    ///
    /// Must return a finite, strictly positive value; the engine aborts
    /// the run otherwise.
    fn potential(&self, level: usize, z: &[f64], x: &Self::State) -> f64;

    /// One draw from the mutation kernel into `level` (in `1..=n`),
    /// started at `parent`, under parameter `z`.
    fn mutate(
        &self,
        level: usize,
        z: &[f64],
        parent: &Self::State,
        rng: &mut StreamRng,
    ) -> Self::State;

    /// Write the summary statistic of `level` at `x` into `out`
    /// (length `summary_dim()`).
    fn summary_statistic(&self, level: usize, x: &Self::State, out: &mut [f64]);

    /// Reference parameters `z_0*, ..., z_{n-1}*`, present when the
    /// limiting nonadaptive model is known.
    fn reference_parameters(&self) -> Option<&[Vec<f64>]> {
        None
    }
}

/// Finite-support descriptor enabling exact kernel application.
///
/// `transition` enumerates the full support of the mutation kernel into
/// `level` from `x`, with its probability masses.
pub trait DiscreteSupport<S> {
    fn transition(&self, level: usize, z: &[f64], x: &S) -> Vec<(S, f64)>;
}

/// Evaluate a potential and enforce strict positivity.
pub fn checked_potential<M: FeynmanKacModel + ?Sized>(
    model: &M,
    level: usize,
    z: &[f64],
    x: &M::State,
) -> Result<f64, ModelError> {
    let g = model.potential(level, z, x);
    if !g.is_finite() || g <= 0.0 {
        return Err(ModelError::PotentialViolation { level, value: g });
    }
    Ok(g)
}

/// Exact application of the one-step Feynman-Kac kernel of `level`:
/// the potential of `level - 1` at `x` times the integral of `f` under
/// the mutation kernel into `level` from `x`.
///
/// Only models with a finite-support descriptor support this; continuous
/// models are rejected with [`ModelError::ExactKernelUnavailable`].
pub fn kernel_apply<M, F>(
    model: &M,
    level: usize,
    z: &[f64],
    f: F,
    x: &M::State,
    support: Option<&dyn DiscreteSupport<M::State>>,
) -> Result<f64, ModelError>
where
    M: FeynmanKacModel,
    F: Fn(&M::State) -> f64,
{
    if level < 1 || level > model.n_levels() {
        return Err(ModelError::LevelOutOfRange {
            level,
            lo: 1,
            hi: model.n_levels(),
        });
    }
    let support = support.ok_or(ModelError::ExactKernelUnavailable)?;
    let g = checked_potential(model, level - 1, z, x)?;
    let integral: f64 = support
        .transition(level, z, x)
        .iter()
        .map(|(y, mass)| mass * f(y))
        .sum();
    Ok(g * integral)
}

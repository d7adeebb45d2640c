//! A sequence of centered Gaussian targets bridged by explicit
//! potentials, with random-walk Metropolis mutations.
//!
//! The covariance of level `n` is `Σ_n = L_n L_nᵀ` where
//! `L_n = (10 (1 - n/99) + (1/10)(n/99)) Id + (1/2)(n/99) J` and `J` is the
//! strictly lower-triangular all-ones matrix, so `L_n` itself is the
//! Cholesky factor and every quadratic form is evaluated through
//! triangular solves, never through explicit inverses. The bridging
//! potential of level `n` is
//! `exp(-(1/2) <x, (Σ_{n+1}^{-1} - Σ_n^{-1}) x>)`.
//!
//! Mutations into level `n` are `metropolis_sweeps` accept/reject steps
//! with Gaussian increments, targeting the level-`n` density. The
//! proposal covariance comes from the level parameter: the exact
//! covariance moments in nonadaptive mode, the particle estimate of the
//! same moments in adaptive mode, both scaled by `proposal_scale`
//! (default `2.38^2 / d`). The summary statistic feeding that estimate is
//! the state concatenated with the upper triangle of its outer product.

use crate::model::{FeynmanKacModel, ModelError};
use crate::rng::StreamRng;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

/// The interpolation denominator of the covariance schedule.
pub const INTERPOLATION_DENOMINATOR: f64 = 99.0;

/// Highest level at which the covariance schedule is defined.
pub const MAX_SCHEDULE_LEVEL: usize = 99;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("level {level} outside the covariance schedule 0..={max}")]
    LevelOutOfSchedule { level: usize, max: usize },
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("triangular factor at level {level} has a non-positive diagonal")]
    NonPositiveDiagonal { level: usize },
}

/// Configuration and precomputed factors for the Gaussian bridging
/// sequence. Immutable after construction; the acceptance telemetry uses
/// atomics and is safe to share across replicate threads.
pub struct GaussianSequenceSpec {
    dimension: usize,
    max_level: usize,
    metropolis_sweeps: usize,
    proposal_scale: f64,
    /// Lower-triangular factors of the level covariances, levels
    /// `0..=max_level`.
    factors: Vec<DMatrix<f64>>,
    /// Covariance moments of each level, in summary-statistic layout:
    /// the nonadaptive parameter for the mutation into the next level.
    reference: Vec<Vec<f64>>,
    /// Per target level: (accepted, proposed) Metropolis step counters.
    acceptance: Vec<(AtomicU64, AtomicU64)>,
}

/// Builder for [`GaussianSequenceSpec`].
pub struct GaussianSequenceBuilder {
    dimension: usize,
    max_level: usize,
    metropolis_sweeps: usize,
    proposal_scale: Option<f64>,
}

impl Default for GaussianSequenceBuilder {
    fn default() -> Self {
        Self {
            dimension: 10,
            max_level: 50,
            metropolis_sweeps: 4,
            proposal_scale: None,
        }
    }
}

impl GaussianSequenceBuilder {
    pub fn dimension(mut self, d: usize) -> Self {
        self.dimension = d;
        self
    }

    pub fn max_level(mut self, n: usize) -> Self {
        self.max_level = n;
        self
    }

    pub fn metropolis_sweeps(mut self, sweeps: usize) -> Self {
        self.metropolis_sweeps = sweeps;
        self
    }

    /// Scale multiplying the (estimated or exact) covariance used as
    /// proposal covariance. Defaults to `2.38^2 / dimension`.
    pub fn proposal_scale(mut self, scale: f64) -> Self {
        self.proposal_scale = Some(scale);
        self
    }

    pub fn build(self) -> Result<GaussianSequenceSpec, GaussianError> {
        if self.dimension == 0 {
            return Err(GaussianError::ZeroDimension);
        }
        if self.max_level > MAX_SCHEDULE_LEVEL {
            return Err(GaussianError::LevelOutOfSchedule {
                level: self.max_level,
                max: MAX_SCHEDULE_LEVEL,
            });
        }
        let d = self.dimension;
        let mut factors = Vec::with_capacity(self.max_level + 1);
        for level in 0..=self.max_level {
            let l = lower_triangular_factor(d, level);
            if (0..d).any(|i| l[(i, i)] <= 0.0) {
                return Err(GaussianError::NonPositiveDiagonal { level });
            }
            factors.push(l);
        }
        let reference = factors
            .iter()
            .map(|l| {
                let sigma = l * l.transpose();
                covariance_to_summary(&sigma, d)
            })
            .collect();
        let acceptance = (0..=self.max_level)
            .map(|_| (AtomicU64::new(0), AtomicU64::new(0)))
            .collect();
        Ok(GaussianSequenceSpec {
            dimension: d,
            max_level: self.max_level,
            metropolis_sweeps: self.metropolis_sweeps,
            proposal_scale: self
                .proposal_scale
                .unwrap_or(2.38 * 2.38 / d as f64),
            factors,
            reference,
            acceptance,
        })
    }
}

/// The lower-triangular covariance factor of `level`.
pub fn lower_triangular_factor(dimension: usize, level: usize) -> DMatrix<f64> {
    let t = level as f64 / INTERPOLATION_DENOMINATOR;
    let diag = 10.0 * (1.0 - t) + 0.1 * t;
    let sub = 0.5 * t;
    DMatrix::from_fn(dimension, dimension, |i, j| {
        if i == j {
            diag
        } else if j < i {
            sub
        } else {
            0.0
        }
    })
}

/// Pack a symmetric matrix into summary-statistic layout: `d` first
/// moments (zero for an exact covariance) followed by the row-major upper
/// triangle of the second moments.
fn covariance_to_summary(sigma: &DMatrix<f64>, d: usize) -> Vec<f64> {
    let mut z = vec![0.0; summary_len(d)];
    let mut k = d;
    for i in 0..d {
        for j in i..d {
            z[k] = sigma[(i, j)];
            k += 1;
        }
    }
    z
}

fn summary_len(d: usize) -> usize {
    d + d * (d + 1) / 2
}

/// Reassemble the covariance from a summary-statistic vector:
/// second-moment estimate minus the outer product of the mean.
pub fn assemble_covariance(z: &[f64], dimension: usize) -> DMatrix<f64> {
    let d = dimension;
    assert_eq!(z.len(), summary_len(d), "summary vector has wrong length");
    let mean = &z[..d];
    let mut sigma = DMatrix::zeros(d, d);
    let mut k = d;
    for i in 0..d {
        for j in i..d {
            let cov = z[k] - mean[i] * mean[j];
            sigma[(i, j)] = cov;
            sigma[(j, i)] = cov;
            k += 1;
        }
    }
    sigma
}

impl GaussianSequenceSpec {
    pub fn builder() -> GaussianSequenceBuilder {
        GaussianSequenceBuilder::default()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn metropolis_sweeps(&self) -> usize {
        self.metropolis_sweeps
    }

    pub fn proposal_scale(&self) -> f64 {
        self.proposal_scale
    }

    /// The covariance of `level`, as the product of its triangular
    /// factors. Defined for any level of the schedule, precomputed or not.
    pub fn build_covariance(&self, level: usize) -> Result<DMatrix<f64>, GaussianError> {
        if level > MAX_SCHEDULE_LEVEL {
            return Err(GaussianError::LevelOutOfSchedule {
                level,
                max: MAX_SCHEDULE_LEVEL,
            });
        }
        let l = lower_triangular_factor(self.dimension, level);
        Ok(&l * l.transpose())
    }

    /// The quadratic form of the level-`level` precision at `x`, through
    /// one triangular solve.
    fn precision_form(&self, level: usize, x: &[f64]) -> f64 {
        let l = &self.factors[level];
        let b = DVector::from_column_slice(x);
        let y = l
            .solve_lower_triangular(&b)
            .expect("factor diagonals are positive by construction");
        y.norm_squared()
    }

    /// The bridging potential of `level` at `x`. Aborts with a positivity
    /// diagnostic if the value is not finite (the runtime stand-in for the
    /// boundedness assumption on potentials).
    pub fn bridge_potential(&self, level: usize, x: &[f64]) -> Result<f64, ModelError> {
        let value =
            (-0.5 * (self.precision_form(level + 1, x) - self.precision_form(level, x))).exp();
        if !value.is_finite() || value <= 0.0 {
            return Err(ModelError::PotentialViolation { level, value });
        }
        Ok(value)
    }

    /// Cholesky factor of a proposal covariance, falling back to its
    /// jittered diagonal when the matrix is not positive definite (an
    /// estimated covariance can be degenerate at small particle counts).
    fn proposal_factor(&self, proposal_cov: &DMatrix<f64>) -> DMatrix<f64> {
        match Cholesky::new(proposal_cov.clone()) {
            Some(chol) => chol.l(),
            None => {
                let d = self.dimension;
                let jitter = 1e-8 * proposal_cov.trace() / d as f64;
                log::warn!(
                    "proposal covariance not positive definite; falling back to diagonal + jitter {jitter:.3e}"
                );
                DMatrix::from_fn(d, d, |i, j| {
                    if i == j {
                        (proposal_cov[(i, i)].max(0.0) + jitter).sqrt()
                    } else {
                        0.0
                    }
                })
            }
        }
    }

    /// Random-walk Metropolis sweeps targeting the level-`level` density,
    /// with Gaussian increments of covariance `proposal_cov`.
    pub fn rwm_mutation(
        &self,
        level: usize,
        x: &[f64],
        proposal_cov: &DMatrix<f64>,
        rng: &mut StreamRng,
    ) -> Vec<f64> {
        let factor = self.proposal_factor(proposal_cov);
        self.rwm_sweeps(level, x, &factor, rng)
    }

    fn rwm_sweeps(
        &self,
        level: usize,
        x: &[f64],
        proposal_factor: &DMatrix<f64>,
        rng: &mut StreamRng,
    ) -> Vec<f64> {
        let d = self.dimension;
        let mut current = DVector::from_column_slice(x);
        let mut current_form = self.precision_form(level, current.as_slice());
        let mut accepted = 0u64;
        for _ in 0..self.metropolis_sweeps {
            let noise = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let proposal = &current + proposal_factor * noise;
            let proposal_form = self.precision_form(level, proposal.as_slice());
            let log_ratio = -0.5 * (proposal_form - current_form);
            let u: f64 = rng.gen();
            if u.ln() < log_ratio {
                current = proposal;
                current_form = proposal_form;
                accepted += 1;
            }
        }
        let (acc, prop) = &self.acceptance[level];
        acc.fetch_add(accepted, Ordering::Relaxed);
        prop.fetch_add(self.metropolis_sweeps as u64, Ordering::Relaxed);
        current.as_slice().to_vec()
    }

    /// Cumulative Metropolis acceptance rate per target level, `None` for
    /// levels never targeted.
    pub fn acceptance_rates(&self) -> Vec<Option<f64>> {
        self.acceptance
            .iter()
            .map(|(acc, prop)| {
                let p = prop.load(Ordering::Relaxed);
                (p > 0).then(|| acc.load(Ordering::Relaxed) as f64 / p as f64)
            })
            .collect()
    }
}

impl FeynmanKacModel for GaussianSequenceSpec {
    type State = Vec<f64>;

    fn n_levels(&self) -> usize {
        self.max_level
    }

    fn summary_dim(&self) -> usize {
        summary_len(self.dimension)
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64> {
        let noise = DVector::from_fn(self.dimension, |_, _| StandardNormal.sample(rng));
        (&self.factors[0] * noise).as_slice().to_vec()
    }

    fn potential(&self, level: usize, _z: &[f64], x: &Vec<f64>) -> f64 {
        (-0.5 * (self.precision_form(level + 1, x) - self.precision_form(level, x))).exp()
    }

    fn mutate(&self, level: usize, z: &[f64], parent: &Vec<f64>, rng: &mut StreamRng) -> Vec<f64> {
        let proposal_cov = assemble_covariance(z, self.dimension) * self.proposal_scale;
        let factor = self.proposal_factor(&proposal_cov);
        self.rwm_sweeps(level, parent, &factor, rng)
    }

    fn summary_statistic(&self, _level: usize, x: &Vec<f64>, out: &mut [f64]) {
        let d = self.dimension;
        out[..d].copy_from_slice(x);
        let mut k = d;
        for i in 0..d {
            for j in i..d {
                out[k] = x[i] * x[j];
                k += 1;
            }
        }
    }

    fn reference_parameters(&self) -> Option<&[Vec<f64>]> {
        Some(&self.reference)
    }
}

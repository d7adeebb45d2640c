//! The interacting particle system: multinomial selection, mutation,
//! adaptive parameter updates, and full genealogy recording.
//!
//! One call to [`run_ips`] produces a [`ParticleSystemTrace`]: per-level
//! particle states, ancestor arrays, evaluated potentials, the level
//! parameters actually used, and the running normalizing-constant
//! estimates. A trace is a deterministic function of
//! `(model, N, mode, stream)` and is immutable once built, so traces
//! can be shared freely across threads; replicate-level parallelism with
//! one stream id per replicate is the intended concurrency model.
//!
//! Only multinomial selection is offered. The genealogy-based estimators
//! in [`crate::estimators`] are exact consequences of independent
//! per-particle categorical selection; systematic or stratified schemes
//! would silently invalidate them.

use crate::model::{checked_potential, AdaptivityMode, FeynmanKacModel, ModelError};
use crate::rng::{RngStreamSpec, StreamRng};
use rand::Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("particle count must be at least 2, got {0}")]
    TooFewParticles(usize),
    #[error("nonadaptive mode requires reference parameters for levels 0..{0}")]
    MissingReferenceParameters(usize),
    #[error("potential violation at level {level}, particle {particle}: G = {value}")]
    PotentialViolation {
        level: usize,
        particle: usize,
        value: f64,
    },
    #[error("degenerate selection weights at level {level}: sum = {sum}")]
    DegenerateWeights { level: usize, sum: f64 },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("trace deserialization failed: {0}")]
    Deserialize(String),
}

impl From<ModelError> for EngineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::PotentialViolation { level, value } => EngineError::PotentialViolation {
                level,
                particle: usize::MAX,
                value,
            },
            other => EngineError::InvalidTrace(other.to_string()),
        }
    }
}

/// How much of the realized system a run retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceRetention {
    /// Keep states at every level (the default).
    Full,
    /// Keep ancestors, terminal states and normalizers only; intermediate
    /// state arrays are dropped as the run advances. All genealogy-based
    /// estimators still work on a slim trace.
    Slim,
}

/// The realized particle system with its genealogy.
///
/// Ancestor indices are stored 0-based internally; the serialized wire
/// format is 1-based (see [`ParticleSystemTrace::to_json`]).
#[derive(Debug, Clone)]
pub struct ParticleSystemTrace<S> {
    n_particles: usize,
    n_levels: usize,
    mode: AdaptivityMode,
    seed: RngStreamSpec,
    /// States per level `0..=n`; levels dropped under slim retention are
    /// empty vectors.
    states: Vec<Vec<S>>,
    /// `ancestors[p][i]` is the parent slot (0-based) of particle `i` of
    /// level `p + 1`.
    ancestors: Vec<Vec<u32>>,
    /// Potentials evaluated during selection, per level `0..n`; empty for
    /// synthetic or deserialized traces.
    potentials: Vec<Vec<f64>>,
    /// Parameter vector used at each selection/mutation step: the realized
    /// particle estimate in adaptive mode, the reference in nonadaptive.
    level_params: Vec<Vec<f64>>,
    /// Estimate of the normalizing constant per level: entry `p` is the
    /// product over `q < p` of the mean evaluated potential at level `q`;
    /// entry 0 is exactly 1.
    normalizer_products: Vec<f64>,
}

impl<S> ParticleSystemTrace<S> {
    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn mode(&self) -> AdaptivityMode {
        self.mode
    }

    pub fn seed(&self) -> RngStreamSpec {
        self.seed
    }

    /// Ancestor array of level `level` (parents of level `level + 1`),
    /// 0-based.
    pub fn ancestors(&self, level: usize) -> &[u32] {
        &self.ancestors[level]
    }

    /// States at `level`; panics if the level was dropped by slim
    /// retention. Use [`ParticleSystemTrace::try_states`] to probe.
    pub fn states(&self, level: usize) -> &[S] {
        self.try_states(level)
            .expect("states for this level were not retained")
    }

    pub fn try_states(&self, level: usize) -> Option<&[S]> {
        let s = &self.states[level];
        if s.is_empty() {
            None
        } else {
            Some(s)
        }
    }

    pub fn terminal_states(&self) -> &[S] {
        self.states(self.n_levels)
    }

    /// Potentials evaluated at selection time, or `None` for synthetic and
    /// deserialized traces.
    pub fn potentials(&self, level: usize) -> Option<&[f64]> {
        let p = &self.potentials[level];
        if p.is_empty() {
            None
        } else {
            Some(p)
        }
    }

    /// Parameter vector used for the selection at `level` and the mutation
    /// into `level + 1`.
    pub fn level_params(&self, level: usize) -> &[f64] {
        &self.level_params[level]
    }

    /// The normalizing-constant estimate at `level`.
    pub fn normalizer(&self, level: usize) -> f64 {
        self.normalizer_products[level]
    }

    pub fn normalizer_products(&self) -> &[f64] {
        &self.normalizer_products
    }

    /// The empirical measure at `level` applied to `f`.
    pub fn empirical_measure<F: Fn(&S) -> f64>(&self, level: usize, f: F) -> f64 {
        let states = self.states(level);
        states.iter().map(|x| f(x)).sum::<f64>() / states.len() as f64
    }

    /// The unnormalized-measure estimate at `level` applied to `f`: the
    /// normalizer estimate times the empirical measure.
    pub fn unnormalized_estimate<F: Fn(&S) -> f64>(&self, level: usize, f: F) -> f64 {
        self.normalizer_products[level] * self.empirical_measure(level, f)
    }

    /// Build a trace from raw parts (synthetic genealogies, fixtures).
    /// Ancestor indices are 0-based here; terminal states are required.
    pub fn from_genealogy(
        states: Vec<Vec<S>>,
        ancestors: Vec<Vec<u32>>,
        normalizer_products: Vec<f64>,
        seed: RngStreamSpec,
        mode: AdaptivityMode,
    ) -> Result<Self, EngineError> {
        let n_particles = states
            .iter()
            .map(Vec::len)
            .find(|&l| l > 0)
            .unwrap_or(0);
        let trace = Self::from_parts(
            n_particles,
            states,
            ancestors,
            normalizer_products,
            seed,
            mode,
        )?;
        if trace.states[trace.n_levels].is_empty() {
            return Err(EngineError::InvalidTrace(
                "terminal states are required".into(),
            ));
        }
        Ok(trace)
    }

    fn from_parts(
        n_particles: usize,
        states: Vec<Vec<S>>,
        ancestors: Vec<Vec<u32>>,
        normalizer_products: Vec<f64>,
        seed: RngStreamSpec,
        mode: AdaptivityMode,
    ) -> Result<Self, EngineError> {
        let n_levels = ancestors.len();
        if states.len() != n_levels + 1 {
            return Err(EngineError::InvalidTrace(format!(
                "expected {} state levels, got {}",
                n_levels + 1,
                states.len()
            )));
        }
        if n_particles < 2 {
            return Err(EngineError::TooFewParticles(n_particles));
        }
        for (p, level) in states.iter().enumerate() {
            if !level.is_empty() && level.len() != n_particles {
                return Err(EngineError::InvalidTrace(format!(
                    "state level {p} has {} particles, expected {n_particles}",
                    level.len()
                )));
            }
        }
        for (p, a) in ancestors.iter().enumerate() {
            if a.len() != n_particles {
                return Err(EngineError::InvalidTrace(format!(
                    "ancestor level {p} has {} entries, expected {n_particles}",
                    a.len()
                )));
            }
            if let Some(&bad) = a.iter().find(|&&i| i as usize >= n_particles) {
                return Err(EngineError::InvalidTrace(format!(
                    "ancestor index {bad} out of range at level {p}"
                )));
            }
        }
        if normalizer_products.len() != n_levels + 1 {
            return Err(EngineError::InvalidTrace(format!(
                "expected {} normalizer entries, got {}",
                n_levels + 1,
                normalizer_products.len()
            )));
        }
        if normalizer_products[0] != 1.0 {
            return Err(EngineError::InvalidTrace(
                "normalizer at level 0 must be exactly 1".into(),
            ));
        }
        Ok(Self {
            n_particles,
            n_levels,
            mode,
            seed,
            states,
            ancestors,
            potentials: vec![Vec::new(); n_levels],
            level_params: vec![Vec::new(); n_levels],
            normalizer_products,
        })
    }
}

/// Serialized form of a trace. Self-describing; ancestor indices are
/// 1-based on the wire.
#[derive(Serialize, Deserialize)]
struct TraceWire<S> {
    format: String,
    version: u32,
    n_particles: usize,
    n_levels: usize,
    master_seed: u64,
    stream_id: u64,
    mode: AdaptivityMode,
    ancestors: Vec<Vec<u32>>,
    normalizer_products: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    states: Option<Vec<Vec<S>>>,
}

impl<S: Serialize + Clone> ParticleSystemTrace<S> {
    /// Serialize to the JSON container. With `include_states = false`
    /// only the genealogy and normalizers are written.
    pub fn to_json(&self, include_states: bool) -> String {
        let wire = TraceWire {
            format: "asmc-trace".into(),
            version: 1,
            n_particles: self.n_particles,
            n_levels: self.n_levels,
            master_seed: self.seed.master_seed,
            stream_id: self.seed.stream_id,
            mode: self.mode,
            ancestors: self
                .ancestors
                .iter()
                .map(|a| a.iter().map(|&i| i + 1).collect())
                .collect(),
            normalizer_products: self.normalizer_products.clone(),
            states: include_states.then(|| self.states.clone()),
        };
        serde_json::to_string(&wire).expect("trace serialization cannot fail")
    }
}

impl<S: DeserializeOwned + Clone> ParticleSystemTrace<S> {
    pub fn from_json(json: &str) -> Result<Self, EngineError> {
        let wire: TraceWire<S> =
            serde_json::from_str(json).map_err(|e| EngineError::Deserialize(e.to_string()))?;
        if wire.format != "asmc-trace" {
            return Err(EngineError::Deserialize(format!(
                "unexpected container format {:?}",
                wire.format
            )));
        }
        let ancestors: Vec<Vec<u32>> = wire
            .ancestors
            .iter()
            .map(|a| {
                a.iter()
                    .map(|&i| {
                        if i == 0 || i as usize > wire.n_particles {
                            Err(EngineError::Deserialize(format!(
                                "1-based ancestor index {i} out of range"
                            )))
                        } else {
                            Ok(i - 1)
                        }
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        // States are optional on the wire; a stateless trace still serves
        // genealogy-only analysis (ancestor roots, counting tables).
        let states = wire
            .states
            .unwrap_or_else(|| vec![Vec::new(); wire.n_levels + 1]);
        Self::from_parts(
            wire.n_particles,
            states,
            ancestors,
            wire.normalizer_products,
            RngStreamSpec::new(wire.master_seed, wire.stream_id),
            wire.mode,
        )
    }
}

/// `count` i.i.d. categorical draws with probabilities proportional to
/// `weights`, by inverse CDF on the cumulative sum.
///
/// One uniform is consumed per draw; the uniforms are argsorted so the
/// cumulative sum is swept once, and each result lands back in its draw
/// slot, so slot `k` receives exactly the inverse-CDF image of the `k`-th
/// uniform drawn.
pub fn multinomial_draw(
    weights: &[f64],
    count: usize,
    rng: &mut StreamRng,
) -> Result<Vec<u32>, EngineError> {
    let n = weights.len();
    debug_assert!(n > 0);
    let mut cumulative = Vec::with_capacity(n);
    let mut total = 0.0;
    for &w in weights {
        total += w;
        cumulative.push(total);
    }
    if !total.is_finite() || total <= 0.0 {
        return Err(EngineError::DegenerateWeights {
            level: usize::MAX,
            sum: total,
        });
    }

    let mut draws: Vec<(f64, u32)> = (0..count)
        .map(|k| (rng.gen::<f64>() * total, k as u32))
        .collect();
    draws.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut out = vec![0u32; count];
    let mut j = 0usize;
    for &(target, slot) in &draws {
        while j < n - 1 && cumulative[j] <= target {
            j += 1;
        }
        out[slot as usize] = j as u32;
    }
    Ok(out)
}

/// Run the interacting particle system and record the full genealogy.
pub fn run_ips<M: FeynmanKacModel>(
    model: &M,
    n_particles: usize,
    mode: AdaptivityMode,
    seed: RngStreamSpec,
) -> Result<ParticleSystemTrace<M::State>, EngineError> {
    run_ips_with(model, n_particles, mode, seed, TraceRetention::Full)
}

/// [`run_ips`] with explicit retention control.
pub fn run_ips_with<M: FeynmanKacModel>(
    model: &M,
    n_particles: usize,
    mode: AdaptivityMode,
    seed: RngStreamSpec,
    retention: TraceRetention,
) -> Result<ParticleSystemTrace<M::State>, EngineError> {
    let n = model.n_levels();
    if n_particles < 2 {
        return Err(EngineError::TooFewParticles(n_particles));
    }
    let reference = match mode {
        AdaptivityMode::Nonadaptive => {
            let r = model
                .reference_parameters()
                .ok_or(EngineError::MissingReferenceParameters(n))?;
            if r.len() < n {
                return Err(EngineError::MissingReferenceParameters(n));
            }
            Some(r)
        }
        AdaptivityMode::Adaptive => None,
    };

    let mut rng = seed.rng();
    let mut states: Vec<Vec<M::State>> = Vec::with_capacity(n + 1);
    states.push(
        (0..n_particles)
            .map(|_| model.sample_initial(&mut rng))
            .collect(),
    );

    let mut ancestors = Vec::with_capacity(n);
    let mut potentials = Vec::with_capacity(n);
    let mut level_params = Vec::with_capacity(n);
    let mut normalizer_products = Vec::with_capacity(n + 1);
    normalizer_products.push(1.0);

    let d = model.summary_dim();
    for p in 0..n {
        let current = &states[p];

        let z: Vec<f64> = match reference {
            Some(r) => r[p].clone(),
            None => {
                // Particle average of the level-p summary statistic.
                let mut acc = vec![0.0; d];
                let mut buf = vec![0.0; d];
                for x in current {
                    model.summary_statistic(p, x, &mut buf);
                    for (a, b) in acc.iter_mut().zip(&buf) {
                        *a += *b;
                    }
                }
                for a in &mut acc {
                    *a /= n_particles as f64;
                }
                acc
            }
        };

        let mut weights = Vec::with_capacity(n_particles);
        for (i, x) in current.iter().enumerate() {
            let g = checked_potential(model, p, &z, x).map_err(|e| match e {
                ModelError::PotentialViolation { level, value } => {
                    EngineError::PotentialViolation {
                        level,
                        particle: i,
                        value,
                    }
                }
                other => EngineError::InvalidTrace(other.to_string()),
            })?;
            weights.push(g);
        }
        let mean_weight = weights.iter().sum::<f64>() / n_particles as f64;
        normalizer_products.push(normalizer_products[p] * mean_weight);

        let parents =
            multinomial_draw(&weights, n_particles, &mut rng).map_err(|e| match e {
                EngineError::DegenerateWeights { sum, .. } => {
                    EngineError::DegenerateWeights { level: p, sum }
                }
                other => other,
            })?;

        let next: Vec<M::State> = parents
            .iter()
            .map(|&a| model.mutate(p + 1, &z, &current[a as usize], &mut rng))
            .collect();

        ancestors.push(parents);
        potentials.push(weights);
        level_params.push(z);
        if retention == TraceRetention::Slim {
            states[p] = Vec::new();
        }
        states.push(next);
    }

    Ok(ParticleSystemTrace {
        n_particles,
        n_levels: n,
        mode,
        seed,
        states,
        ancestors,
        potentials,
        level_params,
        normalizer_products,
    })
}

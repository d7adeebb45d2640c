//! Ground truth on tiny finite models.
//!
//! A [`DiscreteModel`] stores the whole flow as explicit vectors and
//! row-stochastic matrices, so everything the particle system estimates
//! can be computed exactly: the measure flow and its normalizers
//! ([`exact_flow`]), asymptotic variances ([`exact_asymptotic_variance`]),
//! coalescent pair measures ([`exact_coalescent_measure`]), and the full
//! outcome distribution of the particle system itself
//! ([`enumerate_ips`]), which turns unbiasedness statements into finite
//! sums.
//!
//! Everything here is double precision with documented tolerances; the
//! selection probabilities are ratios that have no exact binary
//! representation, so rational arithmetic would not buy exactness anyway.

use crate::engine::{EngineError, ParticleSystemTrace};
use crate::estimators::{
    coalescent_estimate, disjoint_lines_estimate, CoalescenceIndicator, EstimatorError,
};
use crate::model::{AdaptivityMode, DiscreteSupport, FeynmanKacModel};
use crate::rng::{RngStreamSpec, StreamRng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard ceiling on the number of enumerated outcomes.
const ENUMERATION_CAP: f64 = 1e7;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid discrete model: {0}")]
    InvalidModel(String),
    #[error("enumeration would visit {outcomes:.3e} outcomes, above the cap {cap:.0e}")]
    InstanceTooLarge { outcomes: f64, cap: f64 },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("model deserialization failed: {0}")]
    Deserialize(String),
}

/// A finite-state Feynman-Kac model given by explicit tables: a state
/// count per level, the initial probability vector, and per level a
/// positive potential vector and a row-stochastic transition matrix.
///
/// The model is nonadaptive (its reference parameters are empty vectors
/// and the tables ignore the parameter), which is exactly the setting in
/// which the exact computations below are valid.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    state_counts: Vec<usize>,
    initial_law: Vec<f64>,
    potentials: Vec<Vec<f64>>,
    transitions: Vec<Vec<Vec<f64>>>,
    reference: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DiscreteModelWire {
    states_per_level: Vec<usize>,
    eta0: Vec<f64>,
    levels: Vec<DiscreteLevelWire>,
}

#[derive(Serialize, Deserialize)]
struct DiscreteLevelWire {
    #[serde(rename = "G")]
    g: Vec<f64>,
    #[serde(rename = "M")]
    m: Vec<Vec<f64>>,
}

impl DiscreteModel {
    /// Validate and build. `transitions[p]` maps level-`p` states to
    /// level-`p+1` states; rows must sum to one within `1e-14`.
    pub fn new(
        state_counts: Vec<usize>,
        initial_law: Vec<f64>,
        potentials: Vec<Vec<f64>>,
        transitions: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, OracleError> {
        if state_counts.is_empty() {
            return Err(OracleError::InvalidModel("no levels".into()));
        }
        let n = state_counts.len() - 1;
        if state_counts.iter().any(|&c| c == 0) {
            return Err(OracleError::InvalidModel("empty state space".into()));
        }
        if initial_law.len() != state_counts[0] {
            return Err(OracleError::InvalidModel(format!(
                "initial law has {} entries for {} states",
                initial_law.len(),
                state_counts[0]
            )));
        }
        let mass: f64 = initial_law.iter().sum();
        if initial_law.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (mass - 1.0).abs() > 1e-14 {
            return Err(OracleError::InvalidModel(format!(
                "initial law mass {mass} not 1 within 1e-14"
            )));
        }
        if potentials.len() != n || transitions.len() != n {
            return Err(OracleError::InvalidModel(format!(
                "expected {n} potential vectors and transition matrices"
            )));
        }
        for p in 0..n {
            if potentials[p].len() != state_counts[p] {
                return Err(OracleError::InvalidModel(format!(
                    "potential vector at level {p} has wrong length"
                )));
            }
            if potentials[p].iter().any(|&g| !g.is_finite() || g <= 0.0) {
                return Err(OracleError::InvalidModel(format!(
                    "potential at level {p} is not strictly positive"
                )));
            }
            if transitions[p].len() != state_counts[p] {
                return Err(OracleError::InvalidModel(format!(
                    "transition matrix at level {p} has wrong row count"
                )));
            }
            for (x, row) in transitions[p].iter().enumerate() {
                if row.len() != state_counts[p + 1] {
                    return Err(OracleError::InvalidModel(format!(
                        "transition row ({p}, {x}) has wrong length"
                    )));
                }
                if row.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
                    return Err(OracleError::InvalidModel(format!(
                        "transition row ({p}, {x}) has entries outside [0, 1]"
                    )));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-14 {
                    return Err(OracleError::InvalidModel(format!(
                        "transition row ({p}, {x}) sums to {s}, not 1 within 1e-14"
                    )));
                }
            }
        }
        let reference = vec![Vec::new(); n];
        Ok(Self {
            state_counts,
            initial_law,
            potentials,
            transitions,
            reference,
        })
    }

    pub fn from_json(json: &str) -> Result<Self, OracleError> {
        let wire: DiscreteModelWire =
            serde_json::from_str(json).map_err(|e| OracleError::Deserialize(e.to_string()))?;
        let (g, m): (Vec<_>, Vec<_>) = wire.levels.into_iter().map(|l| (l.g, l.m)).unzip();
        Self::new(wire.states_per_level, wire.eta0, g, m)
    }

    pub fn to_json(&self) -> String {
        let wire = DiscreteModelWire {
            states_per_level: self.state_counts.clone(),
            eta0: self.initial_law.clone(),
            levels: self
                .potentials
                .iter()
                .zip(&self.transitions)
                .map(|(g, m)| DiscreteLevelWire {
                    g: g.clone(),
                    m: m.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&wire).expect("model serialization cannot fail")
    }

    pub fn state_count(&self, level: usize) -> usize {
        self.state_counts[level]
    }

    pub fn initial_law(&self) -> &[f64] {
        &self.initial_law
    }

    pub fn potential_value(&self, level: usize, x: usize) -> f64 {
        self.potentials[level][x]
    }

    /// Mass of the transition into `level` from `x` to `y`.
    pub fn transition_mass(&self, level: usize, x: usize, y: usize) -> f64 {
        self.transitions[level - 1][x][y]
    }

    /// The model restricted to levels `0..=n`.
    pub fn truncated(&self, n: usize) -> Result<Self, OracleError> {
        if n > self.n_levels() {
            return Err(OracleError::InvalidModel(format!(
                "cannot truncate {}-level model to {n} levels",
                self.n_levels()
            )));
        }
        Ok(Self {
            state_counts: self.state_counts[..=n].to_vec(),
            initial_law: self.initial_law.clone(),
            potentials: self.potentials[..n].to_vec(),
            transitions: self.transitions[..n].to_vec(),
            reference: vec![Vec::new(); n],
        })
    }
}

fn categorical(law: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in law.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    law.len() - 1
}

impl FeynmanKacModel for DiscreteModel {
    type State = usize;

    fn n_levels(&self) -> usize {
        self.state_counts.len() - 1
    }

    fn summary_dim(&self) -> usize {
        0
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> usize {
        categorical(&self.initial_law, rng)
    }

    fn potential(&self, level: usize, _z: &[f64], x: &usize) -> f64 {
        self.potentials[level][*x]
    }

    fn mutate(&self, level: usize, _z: &[f64], parent: &usize, rng: &mut StreamRng) -> usize {
        categorical(&self.transitions[level - 1][*parent], rng)
    }

    fn summary_statistic(&self, _level: usize, _x: &usize, _out: &mut [f64]) {}

    fn reference_parameters(&self) -> Option<&[Vec<f64>]> {
        Some(&self.reference)
    }
}

impl DiscreteSupport<usize> for DiscreteModel {
    fn transition(&self, level: usize, _z: &[f64], x: &usize) -> Vec<(usize, f64)> {
        self.transitions[level - 1][*x]
            .iter()
            .enumerate()
            .map(|(y, &m)| (y, m))
            .collect()
    }
}

/// A random discrete model for randomized identity tests: per-level state
/// counts drawn in `2..=max_states`, potentials in `[0.5, 2]`, random
/// stochastic rows.
pub fn random_discrete_model(
    rng: &mut StreamRng,
    n_levels: usize,
    max_states: usize,
) -> DiscreteModel {
    let counts: Vec<usize> = (0..=n_levels)
        .map(|_| rng.gen_range(2..=max_states.max(2)))
        .collect();
    let normalize = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().sum();
        for x in v.iter_mut() {
            *x /= s;
        }
    };
    let mut initial: Vec<f64> = (0..counts[0]).map(|_| rng.gen_range(0.2..1.0)).collect();
    normalize(&mut initial);
    let mut potentials = Vec::with_capacity(n_levels);
    let mut transitions = Vec::with_capacity(n_levels);
    for p in 0..n_levels {
        potentials.push((0..counts[p]).map(|_| rng.gen_range(0.5..2.0)).collect());
        let mut matrix = Vec::with_capacity(counts[p]);
        for _ in 0..counts[p] {
            let mut row: Vec<f64> = (0..counts[p + 1]).map(|_| rng.gen_range(0.1..1.0)).collect();
            normalize(&mut row);
            matrix.push(row);
        }
        transitions.push(matrix);
    }
    DiscreteModel::new(counts, initial, potentials, transitions)
        .expect("randomly generated model is always valid")
}

/// The exact measure flow of a discrete model.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    /// Unnormalized measure vector per level.
    pub gammas: Vec<Vec<f64>>,
    /// Normalized measure vector per level.
    pub etas: Vec<Vec<f64>>,
    /// Total mass of the unnormalized measure per level.
    pub masses: Vec<f64>,
    /// The same masses assembled as running products of the normalized
    /// potential means; agrees with `masses` to 1e-12 relative.
    pub masses_product_route: Vec<f64>,
}

impl FlowSolution {
    pub fn gamma(&self, level: usize, f: &[f64]) -> f64 {
        self.gammas[level].iter().zip(f).map(|(g, v)| g * v).sum()
    }

    pub fn eta(&self, level: usize, f: &[f64]) -> f64 {
        self.etas[level].iter().zip(f).map(|(e, v)| e * v).sum()
    }
}

/// Propagate the unnormalized and normalized measures through the model
/// by repeated vector-matrix products.
pub fn exact_flow(model: &DiscreteModel) -> FlowSolution {
    let n = model.n_levels();
    let mut gammas = vec![model.initial_law.clone()];
    let mut masses = vec![1.0];
    let mut masses_product_route = vec![1.0];
    for p in 0..n {
        let cur = &gammas[p];
        let mut next = vec![0.0; model.state_counts[p + 1]];
        for (x, &gx) in cur.iter().enumerate() {
            let weighted = gx * model.potentials[p][x];
            for (y, &m) in model.transitions[p][x].iter().enumerate() {
                next[y] += weighted * m;
            }
        }
        // Product route: multiply by the normalized mean of the potential.
        let eta_g: f64 = cur
            .iter()
            .zip(&model.potentials[p])
            .map(|(g, pot)| g * pot)
            .sum::<f64>()
            / masses[p];
        masses_product_route.push(masses_product_route[p] * eta_g);
        masses.push(next.iter().sum());
        gammas.push(next);
    }
    let etas = gammas
        .iter()
        .zip(&masses)
        .map(|(g, &m)| g.iter().map(|v| v / m).collect())
        .collect();
    FlowSolution {
        gammas,
        etas,
        masses,
        masses_product_route,
    }
}

/// Apply the semigroup from level `n` down to `level`: the backward
/// recursion multiplying by the potential and integrating the transition
/// at each step. `f` lives on the terminal state space.
pub fn exact_semigroup_apply(model: &DiscreteModel, level: usize, f: &[f64]) -> Vec<f64> {
    let n = model.n_levels();
    assert!(level <= n, "level {level} out of range");
    assert_eq!(f.len(), model.state_counts[n]);
    let mut v = f.to_vec();
    for q in (level..n).rev() {
        let mut prev = vec![0.0; model.state_counts[q]];
        for (x, slot) in prev.iter_mut().enumerate() {
            let integral: f64 = model.transitions[q][x]
                .iter()
                .zip(&v)
                .map(|(m, val)| m * val)
                .sum();
            *slot = model.potentials[q][x] * integral;
        }
        v = prev;
    }
    v
}

/// Exact asymptotic variances of the terminal estimators.
#[derive(Debug, Clone, Copy)]
pub struct AsymptoticVariance {
    /// Variance of the unnormalized estimator of `f`.
    pub sigma2_gamma: f64,
    /// Variance of the normalized estimator: the unnormalized formula
    /// applied to `f` centered by its exact terminal mean, divided by the
    /// squared terminal mass.
    pub sigma2_eta_centered: f64,
}

/// The per-level variance sum: for each level, the mass-weighted second
/// moment of the semigroup image minus the squared terminal integral.
pub fn exact_asymptotic_variance(model: &DiscreteModel, f: &[f64]) -> AsymptoticVariance {
    let flow = exact_flow(model);
    let n = model.n_levels();
    let sigma2 = |fv: &[f64]| {
        let target = flow.gamma(n, fv);
        let mut total = 0.0;
        for p in 0..=n {
            let image = exact_semigroup_apply(model, p, fv);
            let second_moment: f64 = flow.gammas[p]
                .iter()
                .zip(&image)
                .map(|(g, v)| g * v * v)
                .sum();
            total += flow.masses[p] * second_moment - target * target;
        }
        total
    };
    let sigma2_gamma = sigma2(f);
    let eta_f = flow.eta(n, f);
    let centered: Vec<f64> = f.iter().map(|v| v - eta_f).collect();
    let mass = flow.masses[n];
    AsymptoticVariance {
        sigma2_gamma,
        sigma2_eta_centered: sigma2(&centered) / (mass * mass),
    }
}

/// The exact coalescent pair measure applied to `f2`: the initial product
/// measure pushed through the tensor-squared kernels, collapsing onto the
/// diagonal wherever the indicator is set.
pub fn exact_coalescent_measure<F>(
    model: &DiscreteModel,
    indicator: &CoalescenceIndicator,
    f2: F,
) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    let n = model.n_levels();
    assert_eq!(
        indicator.len(),
        n + 1,
        "indicator length must be n_levels + 1"
    );

    let k0 = model.state_counts[0];
    let mut pair = vec![0.0; k0 * k0];
    for x in 0..k0 {
        for y in 0..k0 {
            pair[x * k0 + y] = model.initial_law[x] * model.initial_law[y];
        }
    }

    let mut size = k0;
    for p in 0..=n {
        if indicator.bit(p) {
            // Push forward under (x, y) -> (x, x): diagonal of row sums.
            let mut collapsed = vec![0.0; size * size];
            for x in 0..size {
                let row_sum: f64 = pair[x * size..(x + 1) * size].iter().sum();
                collapsed[x * size + x] = row_sum;
            }
            pair = collapsed;
        }
        if p < n {
            let next_size = model.state_counts[p + 1];
            let mut next = vec![0.0; next_size * next_size];
            for x1 in 0..size {
                let w1 = model.potentials[p][x1];
                for x2 in 0..size {
                    let mass = pair[x1 * size + x2];
                    if mass == 0.0 {
                        continue;
                    }
                    let w = mass * w1 * model.potentials[p][x2];
                    for (y1, &m1) in model.transitions[p][x1].iter().enumerate() {
                        if m1 == 0.0 {
                            continue;
                        }
                        for (y2, &m2) in model.transitions[p][x2].iter().enumerate() {
                            next[y1 * next_size + y2] += w * m1 * m2;
                        }
                    }
                }
            }
            pair = next;
            size = next_size;
        }
    }

    let mut total = 0.0;
    for x in 0..size {
        for y in 0..size {
            let mass = pair[x * size + y];
            if mass != 0.0 {
                total += mass * f2(x, y);
            }
        }
    }
    total
}

/// Number of attainable `(states, ancestors)` configurations.
pub fn outcome_count(model: &DiscreteModel, n_particles: usize, n_levels: usize) -> f64 {
    let mut log2_total = (model.state_counts[0] as f64).log2() * n_particles as f64;
    for p in 0..n_levels {
        log2_total += (n_particles as f64).log2() * n_particles as f64;
        log2_total += (model.state_counts[p + 1] as f64).log2() * n_particles as f64;
    }
    log2_total.exp2()
}

/// Iterator over every attainable particle-system outcome with its exact
/// probability under the nonadaptive law. Probabilities sum to one within
/// 1e-10.
pub struct IpsOutcomeIter {
    model: DiscreteModel,
    n_particles: usize,
    n_levels: usize,
    /// Odometer digits: N initial-state digits, then per level N ancestor
    /// digits followed by N state digits.
    digits: Vec<usize>,
    radices: Vec<usize>,
    done: bool,
}

impl IpsOutcomeIter {
    fn decode(&self) -> (ParticleSystemTrace<usize>, f64) {
        let np = self.n_particles;
        let n = self.n_levels;
        let model = &self.model;
        let mut prob = 1.0;

        let mut states: Vec<Vec<usize>> = Vec::with_capacity(n + 1);
        let mut ancestors: Vec<Vec<u32>> = Vec::with_capacity(n);
        let mut normalizers = vec![1.0];

        let mut cursor = 0;
        let level0: Vec<usize> = self.digits[..np].to_vec();
        cursor += np;
        for &x in &level0 {
            prob *= model.initial_law[x];
        }
        states.push(level0);

        for p in 0..n {
            let current = &states[p];
            let weights: Vec<f64> = current.iter().map(|&x| model.potentials[p][x]).collect();
            let weight_sum: f64 = weights.iter().sum();
            normalizers.push(normalizers[p] * (weight_sum / np as f64));

            let parents: Vec<u32> = self.digits[cursor..cursor + np]
                .iter()
                .map(|&a| a as u32)
                .collect();
            cursor += np;
            for &a in &parents {
                prob *= weights[a as usize] / weight_sum;
            }

            let next: Vec<usize> = self.digits[cursor..cursor + np].to_vec();
            cursor += np;
            for (i, &y) in next.iter().enumerate() {
                let parent_state = current[parents[i] as usize];
                prob *= model.transitions[p][parent_state][y];
            }

            ancestors.push(parents);
            states.push(next);
        }

        let trace = ParticleSystemTrace::from_genealogy(
            states,
            ancestors,
            normalizers,
            RngStreamSpec::new(0, 0),
            AdaptivityMode::Nonadaptive,
        )
        .expect("enumerated outcome is a valid trace");
        (trace, prob)
    }

    fn advance(&mut self) {
        for d in 0..self.digits.len() {
            self.digits[d] += 1;
            if self.digits[d] < self.radices[d] {
                return;
            }
            self.digits[d] = 0;
        }
        self.done = true;
    }
}

impl Iterator for IpsOutcomeIter {
    type Item = (ParticleSystemTrace<usize>, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.decode();
        self.advance();
        Some(out)
    }
}

/// Enumerate every outcome of the `n_levels`-level, `n_particles`-particle
/// nonadaptive system on `model`. Refuses instances above the
/// outcome-count cap.
pub fn enumerate_ips(
    model: &DiscreteModel,
    n_particles: usize,
    n_levels: usize,
) -> Result<IpsOutcomeIter, OracleError> {
    if n_particles < 2 {
        return Err(OracleError::Engine(EngineError::TooFewParticles(
            n_particles,
        )));
    }
    let model = model.truncated(n_levels)?;
    let outcomes = outcome_count(&model, n_particles, n_levels);
    if outcomes > ENUMERATION_CAP {
        return Err(OracleError::InstanceTooLarge {
            outcomes,
            cap: ENUMERATION_CAP,
        });
    }
    let mut radices = vec![model.state_counts[0]; n_particles];
    for p in 0..n_levels {
        radices.extend(std::iter::repeat(n_particles).take(n_particles));
        radices.extend(std::iter::repeat(model.state_counts[p + 1]).take(n_particles));
    }
    Ok(IpsOutcomeIter {
        model,
        n_particles,
        n_levels,
        digits: vec![0; radices.len()],
        radices,
        done: false,
    })
}

/// Both sides of an exact-expectation identity, with their relative gap.
#[derive(Debug, Clone, Copy)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs - rhs| / （1 + max(|lhs|, |rhs|))`.
    pub relative_gap: f64,
}

impl IdentityCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            relative_gap: (lhs - rhs).abs() / (1.0 + lhs.abs().max(rhs.abs())),
        }
    }
}

/// Exhaustively verify that the expected squared-normalizer-weighted
/// disjoint-lines estimate equals the exact variance of the unnormalized
/// estimator: `lhs` is the outcome-weighted mean of the estimate, `rhs`
/// the enumerated variance.
pub fn unbiasedness_check(
    model: &DiscreteModel,
    n_particles: usize,
    n_levels: usize,
    f: &[f64],
) -> Result<IdentityCheck, OracleError> {
    let truncated = model.truncated(n_levels)?;
    assert_eq!(f.len(), truncated.state_counts[n_levels]);
    let mut lhs = 0.0;
    let mut gamma_mean = 0.0;
    let mut gamma_second = 0.0;
    for (trace, prob) in enumerate_ips(&truncated, n_particles, n_levels)? {
        let est = disjoint_lines_estimate(&trace, |x| f[*x], n_levels)?;
        let normalizer = trace.normalizer(n_levels);
        lhs += prob * normalizer * normalizer * est.value;
        let gamma = trace.unnormalized_estimate(n_levels, |x| f[*x]);
        gamma_mean += prob * gamma;
        gamma_second += prob * gamma * gamma;
    }
    let rhs = gamma_second - gamma_mean * gamma_mean;
    Ok(IdentityCheck::new(lhs, rhs))
}

/// Exhaustively verify that the coalescent estimate of a product pair
/// function is unbiased for the exact coalescent measure under the given
/// indicator.
pub fn coalescent_unbiasedness_check(
    model: &DiscreteModel,
    n_particles: usize,
    n_levels: usize,
    indicator: &CoalescenceIndicator,
    f: &[f64],
    g: &[f64],
) -> Result<IdentityCheck, OracleError> {
    let truncated = model.truncated(n_levels)?;
    let mut lhs = 0.0;
    for (trace, prob) in enumerate_ips(&truncated, n_particles, n_levels)? {
        let est = coalescent_estimate(&trace, indicator, |x: &usize, y: &usize| f[*x] * g[*y])?;
        lhs += prob * est;
    }
    let rhs = exact_coalescent_measure(&truncated, indicator, |x, y| f[x] * g[y]);
    Ok(IdentityCheck::new(lhs, rhs))
}

/// The pair-sequence counts of the defining sum, by enumeration of every
/// ordered-distinct-pair sequence through the genealogy. `O((N(N-1))^(n+1))`;
/// the production dynamic program is checked against this on tiny traces.
pub fn brute_force_pair_counts<S>(
    trace: &ParticleSystemTrace<S>,
    indicator: &CoalescenceIndicator,
) -> Vec<f64> {
    let np = trace.n_particles();
    let n = trace.n_levels();
    assert_eq!(indicator.len(), n + 1);

    let mut pairs = Vec::with_capacity(np * (np - 1));
    for i in 0..np {
        for j in 0..np {
            if i != j {
                pairs.push((i, j));
            }
        }
    }

    let mut counts = vec![0.0; np * np];
    let mut choice = vec![0usize; n + 1];
    'outer: loop {
        let mut compatible = true;
        for p in 0..n {
            let (l1, l2) = pairs[choice[p]];
            let (m1, m2) = pairs[choice[p + 1]];
            let parents = trace.ancestors(p);
            let (a1, a2) = (parents[m1] as usize, parents[m2] as usize);
            let ok = if indicator.bit(p) {
                a1 == l1 && a2 == a1
            } else {
                a1 == l1 && a2 == l2
            };
            if !ok {
                compatible = false;
                break;
            }
        }
        if compatible {
            let (t1, t2) = pairs[choice[n]];
            counts[t1 * np + t2] += 1.0;
        }
        for d in 0..=n {
            choice[d] += 1;
            if choice[d] < pairs.len() {
                continue 'outer;
            }
            choice[d] = 0;
        }
        break;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::discrete_bench;

    fn indicator_from_mask(n: usize, mask: u64) -> CoalescenceIndicator {
        CoalescenceIndicator::new((0..=n).map(|p| mask >> p & 1 == 1).collect())
    }

    #[test]
    fn unit_potential_flow_is_normalized() {
        let n = 4;
        let m = DiscreteModel::new(
            vec![2; n + 1],
            vec![0.3, 0.7],
            vec![vec![1.0, 1.0]; n],
            vec![vec![vec![0.6, 0.4], vec![0.2, 0.8]]; n],
        )
        .unwrap();
        let flow = exact_flow(&m);
        for p in 0..=n {
            assert!((flow.masses[p] - 1.0).abs() <= 1e-14);
            for (g, e) in flow.gammas[p].iter().zip(&flow.etas[p]) {
                assert!((g - e).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn identity_kernel_doubling_potential() {
        let n = 6;
        let m = DiscreteModel::new(
            vec![2; n + 1],
            vec![0.5, 0.5],
            vec![vec![2.0, 2.0]; n],
            vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; n],
        )
        .unwrap();
        let flow = exact_flow(&m);
        for p in 0..=n {
            let expected = 2f64.powi(p as i32);
            assert!((flow.masses[p] - expected).abs() <= 1e-12 * expected);
            assert!(
                (flow.masses_product_route[p] - expected).abs() <= 1e-12 * expected
            );
        }
    }

    #[test]
    fn mass_routes_agree_on_generic_model() {
        let m = discrete_bench(5);
        let flow = exact_flow(&m);
        for p in 0..=5 {
            let rel = (flow.masses[p] - flow.masses_product_route[p]).abs()
                / flow.masses[p].abs();
            assert!(rel <= 1e-12, "level {p}: relative gap {rel}");
        }
    }

    #[test]
    fn flow_matches_independent_matrix_chain() {
        // Dense matrix product chain assembled independently of the
        // vector recursion in exact_flow.
        let m = discrete_bench(3);
        let f = [0.4, -1.1];
        let k = 2usize;
        // Build the 2x2 kernel matrices Q_p and multiply them out.
        let mut measure = m.initial_law().to_vec();
        for p in 0..3 {
            let mut q = vec![vec![0.0; k]; k];
            for x in 0..k {
                for y in 0..k {
                    q[x][y] = m.potential_value(p, x) * m.transition_mass(p + 1, x, y);
                }
            }
            let mut next = vec![0.0; k];
            for y in 0..k {
                for x in 0..k {
                    next[y] += measure[x] * q[x][y];
                }
            }
            measure = next;
        }
        let independent: f64 = measure.iter().zip(&f).map(|(g, v)| g * v).sum();
        let flow = exact_flow(&m);
        let via_flow = flow.gamma(3, &f);
        assert!((independent - via_flow).abs() <= 1e-13 * (1.0 + via_flow.abs()));
    }

    #[test]
    fn variance_of_constant_is_zero() {
        let m = discrete_bench(3);
        let v = exact_asymptotic_variance(&m, &[2.5, 2.5]);
        assert!(v.sigma2_eta_centered.abs() <= 1e-12);
    }

    #[test]
    fn level_zero_variance_is_iid_variance() {
        let m = DiscreteModel::new(vec![2], vec![0.3, 0.7], vec![], vec![]).unwrap();
        let f = [1.0, 4.0];
        let v = exact_asymptotic_variance(&m, &f);
        let mean = 0.3 * 1.0 + 0.7 * 4.0;
        let second = 0.3 * 1.0 + 0.7 * 16.0;
        let expected = second - mean * mean;
        assert!((v.sigma2_gamma - expected).abs() <= 1e-13);
    }

    #[test]
    fn variance_matches_coalescent_form() {
        // The per-level variance sum agrees with the single-coalescence
        // coalescent measures minus the no-coalescence baseline.
        let m = discrete_bench(2);
        let f = [0.8, -0.3];
        let v = exact_asymptotic_variance(&m, &f);
        let n = 2;
        let pair = |x: usize, y: usize| f[x] * f[y];
        let baseline =
            exact_coalescent_measure(&m, &CoalescenceIndicator::no_coalescence(n), pair);
        let mut coalescent_form = 0.0;
        for p in 0..=n {
            coalescent_form +=
                exact_coalescent_measure(&m, &CoalescenceIndicator::single(n, p), pair)
                    - baseline;
        }
        assert!(
            (v.sigma2_gamma - coalescent_form).abs() <= 1e-12 * (1.0 + coalescent_form.abs())
        );
    }

    #[test]
    fn no_coalescence_measure_is_product_of_integrals() {
        let m = discrete_bench(3);
        let f = [0.2, 1.7];
        let g = [-0.6, 0.9];
        let flow = exact_flow(&m);
        let got = exact_coalescent_measure(
            &m,
            &CoalescenceIndicator::no_coalescence(3),
            |x, y| f[x] * g[y],
        );
        let expected = flow.gamma(3, &f) * flow.gamma(3, &g);
        assert!((got - expected).abs() <= 1e-13 * (1.0 + expected.abs()));
    }

    #[test]
    fn single_coalescence_measure_matches_semigroup_form() {
        let m = discrete_bench(4);
        let f = [1.3, 0.4];
        let flow = exact_flow(&m);
        let n = 4;
        for p in 0..=n {
            let got = exact_coalescent_measure(
                &m,
                &CoalescenceIndicator::single(n, p),
                |x, y| f[x] * f[y],
            );
            let image = exact_semigroup_apply(&m, p, &f);
            let second_moment: f64 = flow.gammas[p]
                .iter()
                .zip(&image)
                .map(|(g, v)| g * v * v)
                .sum();
            let expected = flow.masses[p] * second_moment;
            assert!(
                (got - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
                "level {p}"
            );
        }
    }

    #[test]
    fn coalescent_measure_matches_hand_rolled_tensor_chain() {
        // Independent 4x4 tensor-product implementation on a two-state,
        // two-level model, for every indicator.
        let m = discrete_bench(2);
        let f = [0.9, -0.2];
        let g = [1.1, 0.5];
        let k = 2usize;
        for mask in 0..8u64 {
            let indicator = indicator_from_mask(2, mask);
            // Pair measure as a 4-vector over (x1, x2); operators as 4x4.
            let mut mu = vec![0.0; k * k];
            for x1 in 0..k {
                for x2 in 0..k {
                    mu[x1 * k + x2] = m.initial_law()[x1] * m.initial_law()[x2];
                }
            }
            let collapse = |mu: &[f64]| {
                let mut out = vec![0.0; k * k];
                for x1 in 0..k {
                    let mut row = 0.0;
                    for x2 in 0..k {
                        row += mu[x1 * k + x2];
                    }
                    out[x1 * k + x1] = row;
                }
                out
            };
            for p in 0..=2 {
                if indicator.bit(p) {
                    mu = collapse(&mu);
                }
                if p < 2 {
                    let mut tensor = vec![vec![0.0; k * k]; k * k];
                    for x1 in 0..k {
                        for x2 in 0..k {
                            for y1 in 0..k {
                                for y2 in 0..k {
                                    tensor[x1 * k + x2][y1 * k + y2] = m.potential_value(p, x1)
                                        * m.transition_mass(p + 1, x1, y1)
                                        * m.potential_value(p, x2)
                                        * m.transition_mass(p + 1, x2, y2);
                                }
                            }
                        }
                    }
                    let mut next = vec![0.0; k * k];
                    for (row, &mass) in mu.iter().enumerate() {
                        for col in 0..k * k {
                            next[col] += mass * tensor[row][col];
                        }
                    }
                    mu = next;
                }
            }
            let mut independent = 0.0;
            for x1 in 0..k {
                for x2 in 0..k {
                    independent += mu[x1 * k + x2] * f[x1] * g[x2];
                }
            }
            let got = exact_coalescent_measure(&m, &indicator, |x, y| f[x] * g[y]);
            assert!(
                (got - independent).abs() <= 1e-13 * (1.0 + independent.abs()),
                "mask {mask}: {got} vs {independent}"
            );
        }
    }

    #[test]
    fn enumeration_zero_levels_two_particles() {
        let m = DiscreteModel::new(vec![2], vec![0.3, 0.7], vec![], vec![]).unwrap();
        let outcomes: Vec<_> = enumerate_ips(&m, 2, 0).unwrap().collect();
        assert_eq!(outcomes.len(), 4);
        let total: f64 = outcomes.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() <= 1e-12);
        // Probability of each outcome is the product of initial masses.
        let (trace, prob) = &outcomes[0];
        assert_eq!(trace.terminal_states(), &[0, 0]);
        assert!((prob - 0.09).abs() <= 1e-15);
    }

    #[test]
    fn enumeration_probabilities_sum_to_one() {
        let m = discrete_bench(1);
        let total: f64 = enumerate_ips(&m, 2, 1).unwrap().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() <= 1e-12);
        let m2 = discrete_bench(2);
        let total2: f64 = enumerate_ips(&m2, 3, 1).unwrap().map(|(_, p)| p).sum();
        assert!((total2 - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn unnormalized_estimator_is_unbiased_over_enumeration() {
        let m = discrete_bench(1);
        let f = [0.4, 1.9];
        let expectation: f64 = enumerate_ips(&m, 3, 1)
            .unwrap()
            .map(|(trace, prob)| prob * trace.unnormalized_estimate(1, |x| f[*x]))
            .sum();
        let exact = exact_flow(&m).gamma(1, &f);
        assert!(
            (expectation - exact).abs() <= 1e-10 * (1.0 + exact.abs()),
            "{expectation} vs {exact}"
        );
    }

    #[test]
    fn zero_test_function_unbiasedness_is_trivial() {
        let m = discrete_bench(1);
        let check = unbiasedness_check(&m, 3, 1, &[0.0, 0.0]).unwrap();
        assert_eq!(check.lhs, 0.0);
        assert_eq!(check.rhs, 0.0);
    }

    #[test]
    fn enumeration_envelope_is_enforced() {
        let m = discrete_bench(5);
        assert!(matches!(
            enumerate_ips(&m, 6, 5),
            Err(OracleError::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let m = discrete_bench(3);
        let json = m.to_json();
        let back = DiscreteModel::from_json(&json).unwrap();
        assert_eq!(back.state_counts, m.state_counts);
        assert_eq!(back.initial_law, m.initial_law);
        assert_eq!(back.potentials, m.potentials);
        assert_eq!(back.transitions, m.transitions);
    }

    #[test]
    fn invalid_models_are_rejected() {
        // Nonstochastic row.
        let bad = DiscreteModel::new(
            vec![2, 2],
            vec![0.5, 0.5],
            vec![vec![1.0, 1.0]],
            vec![vec![vec![0.7, 0.7], vec![0.5, 0.5]]],
        );
        assert!(matches!(bad, Err(OracleError::InvalidModel(_))));
        // Nonpositive potential.
        let bad = DiscreteModel::new(
            vec![2, 2],
            vec![0.5, 0.5],
            vec![vec![0.0, 1.0]],
            vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]],
        );
        assert!(matches!(bad, Err(OracleError::InvalidModel(_))));
        // Initial law off by too much.
        let bad = DiscreteModel::new(vec![2], vec![0.6, 0.5], vec![], vec![]);
        assert!(matches!(bad, Err(OracleError::InvalidModel(_))));
    }
}

//! Single-run variance estimators built from a realized genealogy.
//!
//! Everything here is a pure function of an immutable
//! [`ParticleSystemTrace`]:
//!
//! - [`lambda_table`] runs the `O(n N^2)` dynamic program counting, for
//!   every ordered terminal pair, the index-pair sequences through the
//!   genealogy that are compatible with a coalescence indicator;
//! - [`normalized_coalescent_estimate`] / [`coalescent_estimate`] turn
//!   those counts into coalescent tree-based pair-measure estimates;
//! - [`term_by_term_variance`] sums single-coalescence estimates against
//!   the no-coalescence baseline;
//! - [`disjoint_lines_estimate`] is the fast variance estimator built
//!   from terminal pairs with distinct Eve indices, with fixed-lag
//!   truncation for long runs where the full genealogy has collapsed;
//! - [`decomposition_check`] verifies, on the realized trace itself, the
//!   exact identity expanding the empirical pair measure over all `2^(n+1)`
//!   coalescence indicators.

use crate::engine::ParticleSystemTrace;
use crate::model::AdaptivityMode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Counts above this are no longer exactly representable in a double.
const EXACT_COUNT_CEILING: f64 = 9007199254740992.0; // 2^53

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("indicator has {got} bits, trace with {expected_levels} levels needs {expected}")]
    IndicatorLengthMismatch {
        expected: usize,
        expected_levels: usize,
        got: usize,
    },
    #[error("lag {lag} out of range for a trace with {n_levels} levels")]
    LagOutOfRange { lag: usize, n_levels: usize },
    #[error("{n_levels} levels means 2^{} indicators; refusing above 20 levels", n_levels + 1)]
    TooManyIndicators { n_levels: usize },
    #[error("pair-sequence count exceeded 2^53 at level {level}; counts are no longer exact")]
    PrecisionLoss { level: usize },
}

/// One bit per level; a set bit marks a coalescence at that level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoalescenceIndicator {
    bits: Vec<bool>,
}

impl CoalescenceIndicator {
    /// An indicator from explicit bits; length must be `n_levels + 1`.
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// No coalescence anywhere.
    pub fn no_coalescence(n_levels: usize) -> Self {
        Self {
            bits: vec![false; n_levels + 1],
        }
    }

    /// A single coalescence at `level`.
    pub fn single(n_levels: usize, level: usize) -> Self {
        let mut bits = vec![false; n_levels + 1];
        bits[level] = true;
        Self { bits }
    }

    /// All `2^(n_levels + 1)` indicators, in lexicographic bit order.
    pub fn enumerate_all(n_levels: usize) -> impl Iterator<Item = Self> {
        let len = n_levels + 1;
        (0u64..(1u64 << len)).map(move |mask| Self {
            bits: (0..len).map(|p| mask >> p & 1 == 1).collect(),
        })
    }

    pub fn bit(&self, level: usize) -> bool {
        self.bits[level]
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn n_levels(&self) -> usize {
        self.bits.len() - 1
    }
}

/// The dynamic-programming table of pair-sequence counts at one level:
/// entry `(i, j)`, `i != j`, counts the index-pair sequences through the
/// genealogy below that are compatible with the indicator and end at the
/// ordered pair `(i, j)`. The diagonal is identically zero; at level 0
/// every off-diagonal entry is 1.
#[derive(Debug, Clone)]
pub struct LambdaTable {
    level: usize,
    n_particles: usize,
    values: Vec<f64>,
}

impl LambdaTable {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_particles + j]
    }

    fn uniform_base(n_particles: usize) -> Vec<f64> {
        let mut v = vec![1.0; n_particles * n_particles];
        for i in 0..n_particles {
            v[i * n_particles + i] = 0.0;
        }
        v
    }
}

/// The prefactor `N^(h-1) / (N-1)^(h+1)` attached to a depth-`h`
/// pair-sequence sum.
///
/// The integer ratio is used while both powers are exactly representable;
/// beyond that the value is assembled in log space so it cannot overflow
/// for long genealogies.
fn pair_sequence_prefactor(n_particles: usize, depth: usize) -> f64 {
    let nf = n_particles as f64;
    let mf = nf - 1.0;
    if depth == 0 {
        return 1.0 / (nf * mf);
    }
    let num_bits = (depth as f64 - 1.0) * nf.log2();
    let den_bits = (depth as f64 + 1.0) * mf.log2();
    if num_bits <= 53.0 && den_bits <= 53.0 {
        nf.powi(depth as i32 - 1) / mf.powi(depth as i32 + 1)
    } else {
        ((depth as f64 - 1.0) * nf.ln() - (depth as f64 + 1.0) * mf.ln()).exp()
    }
}

fn check_indicator<S>(
    trace: &ParticleSystemTrace<S>,
    indicator: &CoalescenceIndicator,
) -> Result<(), EstimatorError> {
    let n = trace.n_levels();
    if indicator.len() != n + 1 {
        return Err(EstimatorError::IndicatorLengthMismatch {
            expected: n + 1,
            expected_levels: n,
            got: indicator.len(),
        });
    }
    Ok(())
}

/// Run the pair-sequence counting recursion up to the terminal level.
///
/// For a non-coalescence level the count of a pair is relocated from its
/// parents' pair when the parents differ; for a coalescence level a pair
/// with a common parent collects the whole row of that parent. Cost
/// `O((n+1) N^2)` using per-row partial sums.
pub fn lambda_table<S>(
    trace: &ParticleSystemTrace<S>,
    indicator: &CoalescenceIndicator,
) -> Result<LambdaTable, EstimatorError> {
    check_indicator(trace, indicator)?;
    let np = trace.n_particles();
    let n = trace.n_levels();

    let mut cur = LambdaTable::uniform_base(np);
    let mut next = vec![0.0; np * np];
    let mut row_sums = vec![0.0; np];

    for p in 0..n {
        let parents = trace.ancestors(p);
        if indicator.bit(p) {
            for (r, sum) in row_sums.iter_mut().enumerate() {
                *sum = cur[r * np..(r + 1) * np].iter().sum();
            }
            for i in 0..np {
                let ai = parents[i] as usize;
                let row = &mut next[i * np..(i + 1) * np];
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = if i != j && ai == parents[j] as usize {
                        row_sums[ai]
                    } else {
                        0.0
                    };
                }
            }
        } else {
            for i in 0..np {
                let ai = parents[i] as usize;
                let row = &mut next[i * np..(i + 1) * np];
                for (j, slot) in row.iter_mut().enumerate() {
                    let aj = parents[j] as usize;
                    *slot = if i != j && ai != aj {
                        cur[ai * np + aj]
                    } else {
                        0.0
                    };
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
        if indicator.bit(p) {
            // Counts only grow at coalescence levels.
            let max = cur.iter().fold(0.0f64, |m, &v| m.max(v));
            if max > EXACT_COUNT_CEILING {
                return Err(EstimatorError::PrecisionLoss { level: p + 1 });
            }
        }
    }

    Ok(LambdaTable {
        level: n,
        n_particles: np,
        values: cur,
    })
}

/// The normalized coalescent tree-based estimate of a pair function `f2`
/// under `indicator`: the prefactored sum over ordered terminal pairs of
/// the pair-sequence count times the (possibly diagonal-collapsed) value
/// of `f2`.
///
/// A terminal coalescence evaluates `f2` with its first argument
/// duplicated; no diagonal kernel is materialized.
pub fn normalized_coalescent_estimate<S, F>(
    trace: &ParticleSystemTrace<S>,
    indicator: &CoalescenceIndicator,
    f2: F,
) -> Result<f64, EstimatorError>
where
    F: Fn(&S, &S) -> f64,
{
    let table = lambda_table(trace, indicator)?;
    let np = trace.n_particles();
    let n = trace.n_levels();
    let terminal = trace.terminal_states();
    let collapse = indicator.bit(n);

    let mut sum = 0.0;
    for i in 0..np {
        for j in 0..np {
            if i == j {
                continue;
            }
            let count = table.get(i, j);
            if count != 0.0 {
                let value = if collapse {
                    f2(&terminal[i], &terminal[i])
                } else {
                    f2(&terminal[i], &terminal[j])
                };
                sum += count * value;
            }
        }
    }
    Ok(pair_sequence_prefactor(np, n) * sum)
}

/// The unnormalized coalescent estimate: the normalized one scaled by the
/// squared terminal normalizer estimate.
pub fn coalescent_estimate<S, F>(
    trace: &ParticleSystemTrace<S>,
    indicator: &CoalescenceIndicator,
    f2: F,
) -> Result<f64, EstimatorError>
where
    F: Fn(&S, &S) -> f64,
{
    let scale = trace.normalizer(trace.n_levels()).powi(2);
    Ok(scale * normalized_coalescent_estimate(trace, indicator, f2)?)
}

/// Which asymptotic variance a term-by-term sum targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceKind {
    /// Unnormalized-measure variance: unnormalized estimates, `f` as given.
    Gamma,
    /// Normalized-measure variance: normalized estimates, `f` as given.
    Eta,
    /// Normalized-measure variance with `f` centered by its terminal
    /// empirical mean.
    EtaCentered,
}

/// Term-by-term variance estimate: the sum over levels of the
/// single-coalescence estimate minus the no-coalescence baseline,
/// computed with one counting pass per indicator (`n + 2` passes total).
pub fn term_by_term_variance<S, F>(
    trace: &ParticleSystemTrace<S>,
    f: F,
    kind: VarianceKind,
) -> Result<f64, EstimatorError>
where
    F: Fn(&S) -> f64,
{
    let n = trace.n_levels();
    let shift = match kind {
        VarianceKind::EtaCentered => trace.empirical_measure(n, &f),
        _ => 0.0,
    };
    let pair = |x: &S, y: &S| (f(x) - shift) * (f(y) - shift);
    let scale = match kind {
        VarianceKind::Gamma => trace.normalizer(n).powi(2),
        _ => 1.0,
    };

    let baseline =
        normalized_coalescent_estimate(trace, &CoalescenceIndicator::no_coalescence(n), &pair)?;
    let mut total = 0.0;
    for p in 0..=n {
        let single = CoalescenceIndicator::single(n, p);
        total += normalized_coalescent_estimate(trace, &single, &pair)? - baseline;
    }
    Ok(scale * total)
}

/// Ancestor indices of the terminal particles at `lag` levels back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EveIndexArray {
    level: usize,
    lag: usize,
    indices: Vec<u32>,
}

impl EveIndexArray {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    /// 0-based ancestor slot of each terminal particle at level
    /// `level - lag`.
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }
}

/// Trace each terminal particle back `lag` levels through the ancestor
/// arrays. `lag = 0` is the identity; `lag = n` reaches the roots.
pub fn eve_indices<S>(
    trace: &ParticleSystemTrace<S>,
    lag: usize,
) -> Result<EveIndexArray, EstimatorError> {
    let n = trace.n_levels();
    if lag > n {
        return Err(EstimatorError::LagOutOfRange { lag, n_levels: n });
    }
    let mut indices: Vec<u32> = (0..trace.n_particles() as u32).collect();
    for h in 0..lag {
        let parents = trace.ancestors(n - 1 - h);
        for e in indices.iter_mut() {
            *e = parents[*e as usize];
        }
    }
    Ok(EveIndexArray {
        level: n,
        lag,
        indices,
    })
}

/// A disjoint-ancestral-lines variance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisjointLinesEstimate {
    pub value: f64,
    /// Set when every terminal particle shares one ancestor at the
    /// requested lag: the pair sum is then empty and the estimate carries
    /// no genealogical information. Reduce the lag in that case.
    pub fully_coalesced: bool,
}

/// The disjoint-ancestral-lines variance estimator at `lag`: the squared
/// terminal empirical mean minus the prefactored sum of `f(x_i) f(x_j)`
/// over ordered terminal pairs whose lag-`lag` ancestors differ.
///
/// The pair sum is folded per ancestor group in `O(N)`: the square of the
/// grand total minus the squares of the per-group totals. `lag = n`
/// uses the whole genealogy and is the untruncated estimator.
pub fn disjoint_lines_estimate<S, F>(
    trace: &ParticleSystemTrace<S>,
    f: F,
    lag: usize,
) -> Result<DisjointLinesEstimate, EstimatorError>
where
    F: Fn(&S) -> f64,
{
    let np = trace.n_particles();
    let eve = eve_indices(trace, lag)?;

    let mut total = 0.0;
    let mut group_totals = vec![0.0f64; np];
    let mut group_seen = vec![false; np];
    let mut n_groups = 0usize;
    for (x, &e) in trace.terminal_states().iter().zip(eve.indices()) {
        let v = f(x);
        total += v;
        group_totals[e as usize] += v;
        if !group_seen[e as usize] {
            group_seen[e as usize] = true;
            n_groups += 1;
        }
    }

    let disjoint_pair_sum = total * total - group_totals.iter().map(|g| g * g).sum::<f64>();
    let mean = total / np as f64;
    let value = mean * mean - pair_sequence_prefactor(np, lag) * disjoint_pair_sum;
    Ok(DisjointLinesEstimate {
        value,
        fully_coalesced: n_groups == 1,
    })
}

/// A truncated variance value at one lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedVariance {
    pub lag: usize,
    /// `N` times the lag-truncated centered disjoint-lines estimate.
    pub value: f64,
    pub fully_coalesced: bool,
}

/// Options for [`variance_report`].
#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    /// Lags for truncated variants, reported side by side; lag selection
    /// is left to the caller.
    pub lags: Vec<usize>,
    /// Also compute the (much slower) term-by-term estimates.
    pub term_by_term: bool,
}

/// Every estimator value for one trace, with reproduction metadata.
///
/// The JSON field names mirror the CSV column names; the `seed` column
/// and field carry the replicate's stream id, with the experiment-wide
/// master seed kept alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorReport {
    #[serde(rename = "N")]
    pub n_particles: usize,
    #[serde(rename = "n")]
    pub n_levels: usize,
    pub master_seed: u64,
    #[serde(rename = "seed")]
    pub stream_id: u64,
    pub mode: AdaptivityMode,
    /// Terminal empirical measure of `f`.
    #[serde(rename = "eta")]
    pub eta_estimate: f64,
    /// Terminal unnormalized estimate of `f`.
    #[serde(rename = "gamma")]
    pub gamma_estimate: f64,
    /// Disjoint-lines estimate of `f`, full genealogy.
    pub v_n: f64,
    /// Disjoint-lines estimate of `f` centered by `eta_estimate`.
    pub v_n_centered: f64,
    /// `N * v_n_centered`: estimates the asymptotic variance of the
    /// normalized estimator.
    pub sigma2_eta_scaled: f64,
    /// `N * normalizer^2 * v_n`: estimates the asymptotic variance of the
    /// unnormalized estimator.
    pub sigma2_gamma_scaled: f64,
    /// Genealogy degeneracy flag for the full-lag estimator.
    pub fully_coalesced: bool,
    /// Truncated variants, one per requested lag.
    pub truncated: Vec<TruncatedVariance>,
    #[serde(rename = "sigma2_gamma_tbt", skip_serializing_if = "Option::is_none")]
    pub sigma2_gamma_term_by_term: Option<f64>,
    #[serde(rename = "sigma2_eta_tbt", skip_serializing_if = "Option::is_none")]
    pub sigma2_eta_term_by_term: Option<f64>,
}

impl EstimatorReport {
    /// CSV header matching [`EstimatorReport::csv_row`]. The `seed` column
    /// carries the stream id; the master seed lives in the run metadata.
    pub fn csv_header(lags: &[usize], term_by_term: bool) -> String {
        let mut cols = vec![
            "N".to_string(),
            "n".to_string(),
            "seed".to_string(),
            "mode".to_string(),
            "eta".to_string(),
            "gamma".to_string(),
            "v_n".to_string(),
            "v_n_centered".to_string(),
            "sigma2_eta_scaled".to_string(),
            "sigma2_gamma_scaled".to_string(),
        ];
        for lag in lags {
            cols.push(format!("trunc_h{lag}"));
        }
        if term_by_term {
            cols.push("sigma2_gamma_tbt".into());
            cols.push("sigma2_eta_tbt".into());
        }
        cols.join(",")
    }

    /// One CSV row; floats are printed in shortest round-trip form.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.n_particles.to_string(),
            self.n_levels.to_string(),
            self.stream_id.to_string(),
            self.mode.to_string(),
            self.eta_estimate.to_string(),
            self.gamma_estimate.to_string(),
            self.v_n.to_string(),
            self.v_n_centered.to_string(),
            self.sigma2_eta_scaled.to_string(),
            self.sigma2_gamma_scaled.to_string(),
        ];
        for t in &self.truncated {
            cols.push(t.value.to_string());
        }
        if let (Some(g), Some(e)) = (self.sigma2_gamma_term_by_term, self.sigma2_eta_term_by_term)
        {
            cols.push(g.to_string());
            cols.push(e.to_string());
        }
        cols.join(",")
    }
}

/// Compute every estimator for one trace.
pub fn variance_report<S, F>(
    trace: &ParticleSystemTrace<S>,
    f: F,
    options: &ReportOptions,
) -> Result<EstimatorReport, EstimatorError>
where
    F: Fn(&S) -> f64,
{
    let n = trace.n_levels();
    let np = trace.n_particles() as f64;
    let eta = trace.empirical_measure(n, &f);
    let gamma = trace.normalizer(n) * eta;

    let full = disjoint_lines_estimate(trace, &f, n)?;
    let centered = |x: &S| f(x) - eta;
    let centered_full = disjoint_lines_estimate(trace, &centered, n)?;

    let mut truncated = Vec::with_capacity(options.lags.len());
    for &lag in &options.lags {
        let est = disjoint_lines_estimate(trace, &centered, lag)?;
        truncated.push(TruncatedVariance {
            lag,
            value: np * est.value,
            fully_coalesced: est.fully_coalesced,
        });
    }

    let (tbt_gamma, tbt_eta) = if options.term_by_term {
        (
            Some(term_by_term_variance(trace, &f, VarianceKind::Gamma)?),
            Some(term_by_term_variance(trace, &f, VarianceKind::EtaCentered)?),
        )
    } else {
        (None, None)
    };

    Ok(EstimatorReport {
        n_particles: trace.n_particles(),
        n_levels: n,
        master_seed: trace.seed().master_seed,
        stream_id: trace.seed().stream_id,
        mode: trace.mode(),
        eta_estimate: eta,
        gamma_estimate: gamma,
        v_n: full.value,
        v_n_centered: centered_full.value,
        sigma2_eta_scaled: np * centered_full.value,
        sigma2_gamma_scaled: np * trace.normalizer(n).powi(2) * full.value,
        fully_coalesced: full.fully_coalesced,
        truncated,
        sigma2_gamma_term_by_term: tbt_gamma,
        sigma2_eta_term_by_term: tbt_eta,
    })
}

/// Both sides of the exact pair-measure decomposition.
#[derive(Debug, Clone, Copy)]
pub struct DecompositionCheck {
    /// Empirical pair measure of `f2` at the terminal level.
    pub lhs: f64,
    /// Weighted sum of normalized coalescent estimates over all
    /// indicators.
    pub rhs: f64,
    pub abs_gap: f64,
}

/// Verify the exact decomposition of the empirical pair measure into the
/// full family of coalescent estimates. This is an identity of the
/// realized trace: it holds for every realization, not just on average.
///
/// One counting pass per indicator, so `2^(n+1)` passes; refuses above 20
/// levels.
pub fn decomposition_check<S, F>(
    trace: &ParticleSystemTrace<S>,
    f2: F,
) -> Result<DecompositionCheck, EstimatorError>
where
    F: Fn(&S, &S) -> f64,
{
    let n = trace.n_levels();
    if n > 20 {
        return Err(EstimatorError::TooManyIndicators { n_levels: n });
    }
    let np = trace.n_particles() as f64;
    let terminal = trace.terminal_states();

    let mut lhs = 0.0;
    for x in terminal {
        for y in terminal {
            lhs += f2(x, y);
        }
    }
    lhs /= np * np;

    let mut rhs = 0.0;
    for indicator in CoalescenceIndicator::enumerate_all(n) {
        let mut weight = 1.0;
        for p in 0..=n {
            weight *= if indicator.bit(p) { 1.0 } else { np - 1.0 } / np;
        }
        rhs += weight * normalized_coalescent_estimate(trace, &indicator, &f2)?;
    }

    Ok(DecompositionCheck {
        lhs,
        rhs,
        abs_gap: (lhs - rhs).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_ips;
    use crate::fixtures::{discrete_bench, toy_genealogy};
    use crate::model::AdaptivityMode::Nonadaptive;
    use crate::oracle::{brute_force_pair_counts, random_discrete_model};
    use crate::rng::RngStreamSpec;
    use rand::Rng;

    #[test]
    fn level_zero_table_is_all_ones() {
        let trace = crate::engine::ParticleSystemTrace::from_genealogy(
            vec![vec![0usize, 1, 0, 1]],
            vec![],
            vec![1.0],
            RngStreamSpec::new(0, 0),
            Nonadaptive,
        )
        .unwrap();
        let table = lambda_table(&trace, &CoalescenceIndicator::no_coalescence(0)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(table.get(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn toy_genealogy_single_coalescence_counts() {
        // Indicator with the single coalescence at level 3: only the
        // ordered terminal pairs (2, 4) and (4, 2) [1-based] survive, each
        // with exactly two compatible sequences.
        let trace = toy_genealogy();
        let b = CoalescenceIndicator::single(6, 3);
        let table = lambda_table(&trace, &b).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expected = if (i, j) == (1, 3) || (i, j) == (3, 1) {
                    2.0
                } else {
                    0.0
                };
                assert_eq!(table.get(i, j), expected, "entry ({i}, {j})");
            }
        }
    }

    #[test]
    fn toy_genealogy_pair_estimate_closed_form() {
        let trace = toy_genealogy();
        let b = CoalescenceIndicator::single(6, 3);
        let f2 = |x: &usize, y: &usize| (*x as f64) * 10.0 + (*y as f64);
        let got = normalized_coalescent_estimate(&trace, &b, f2).unwrap();
        let states = trace.terminal_states();
        let expected =
            2.0 * (3125.0 / 16384.0) * (f2(&states[1], &states[3]) + f2(&states[3], &states[1]));
        assert!((got - expected).abs() <= 1e-12 * expected.abs());
    }

    #[test]
    fn depth_zero_unit_pair_function_is_one() {
        // At a single level the estimate of the constant pair function is
        // the number of ordered distinct pairs over N(N-1).
        let trace = crate::engine::ParticleSystemTrace::from_genealogy(
            vec![vec![0usize, 1, 0, 1, 1]],
            vec![],
            vec![1.0],
            RngStreamSpec::new(0, 0),
            Nonadaptive,
        )
        .unwrap();
        for bit in [false, true] {
            let b = CoalescenceIndicator::new(vec![bit]);
            let got = normalized_coalescent_estimate(&trace, &b, |_, _| 1.0).unwrap();
            assert_eq!(got, 1.0);
        }
    }

    fn random_trace(
        rng: &mut crate::rng::StreamRng,
        n_particles: usize,
        n_levels: usize,
        stream: u64,
    ) -> ParticleSystemTrace<usize> {
        let max_states = 2 + rng.gen_range(0..2);
        let model = random_discrete_model(rng, n_levels, max_states);
        run_ips(
            &model,
            n_particles,
            Nonadaptive,
            RngStreamSpec::new(rng.gen(), stream),
        )
        .unwrap()
    }

    #[test]
    fn dp_matches_brute_force_on_random_traces() {
        let mut rng = RngStreamSpec::new(2024, 0).rng();
        for rep in 0..12 {
            let np = 2 + (rep % 4);
            let n = rep % 4;
            let trace = random_trace(&mut rng, np, n, rep as u64);
            for indicator in CoalescenceIndicator::enumerate_all(n) {
                let dp = lambda_table(&trace, &indicator).unwrap();
                let brute = brute_force_pair_counts(&trace, &indicator);
                for i in 0..np {
                    for j in 0..np {
                        assert_eq!(
                            dp.get(i, j),
                            brute[i * np + j],
                            "N={np} n={n} indicator={indicator:?} ({i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn estimate_is_linear_in_pair_function() {
        let mut rng = RngStreamSpec::new(7, 0).rng();
        let trace = random_trace(&mut rng, 5, 3, 1);
        let b = CoalescenceIndicator::new(vec![false, true, false, false]);
        let f2 = |x: &usize, y: &usize| (*x as f64 + 1.0) * (*y as f64 + 2.0);
        let g2 = |x: &usize, y: &usize| (*x as f64) - 3.0 * (*y as f64);
        let (a, c) = (1.7, -0.4);
        let lhs =
            normalized_coalescent_estimate(&trace, &b, |x, y| a * f2(x, y) + c * g2(x, y))
                .unwrap();
        let rhs = a * normalized_coalescent_estimate(&trace, &b, f2).unwrap()
            + c * normalized_coalescent_estimate(&trace, &b, g2).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn unnormalized_scales_by_squared_normalizer() {
        let m = discrete_bench(3);
        let trace = run_ips(&m, 8, Nonadaptive, RngStreamSpec::new(5, 5)).unwrap();
        let b = CoalescenceIndicator::single(3, 1);
        let f2 = |x: &usize, y: &usize| (*x + 2 * *y) as f64;
        let bar = normalized_coalescent_estimate(&trace, &b, f2).unwrap();
        let full = coalescent_estimate(&trace, &b, f2).unwrap();
        assert_eq!(full, trace.normalizer(3).powi(2) * bar);
    }

    #[test]
    fn eve_lag_zero_is_identity() {
        let trace = toy_genealogy();
        let eve = eve_indices(&trace, 0).unwrap();
        assert_eq!(eve.indices(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn eve_full_lag_matches_figure_and_recursive_traversal() {
        let trace = toy_genealogy();
        let eve = eve_indices(&trace, 6).unwrap();
        // 1-based roots of the five terminal particles: (3, 5, 3, 5, 3).
        assert_eq!(eve.indices(), &[2, 4, 2, 4, 2]);

        // Independent recursive traversal.
        fn root<S>(trace: &ParticleSystemTrace<S>, level: usize, i: usize, lag: usize) -> u32 {
            if lag == 0 {
                i as u32
            } else {
                root(
                    trace,
                    level - 1,
                    trace.ancestors(level - 1)[i] as usize,
                    lag - 1,
                )
            }
        }
        for lag in 0..=6 {
            let eve = eve_indices(&trace, lag).unwrap();
            for i in 0..5 {
                assert_eq!(eve.indices()[i], root(&trace, 6, i, lag));
            }
        }
    }

    #[test]
    fn eve_lag_out_of_range() {
        let trace = toy_genealogy();
        assert!(matches!(
            eve_indices(&trace, 7),
            Err(EstimatorError::LagOutOfRange { lag: 7, .. })
        ));
    }

    #[test]
    fn disjoint_pairs_on_toy_genealogy() {
        // Unit test function: the estimate is one minus the prefactored
        // count of ordered disjoint-root pairs, which the figure puts at 12.
        let trace = toy_genealogy();
        let est = disjoint_lines_estimate(&trace, |_| 1.0, 6).unwrap();
        let expected = 1.0 - (3125.0 / 16384.0) * 12.0;
        assert!((est.value - expected).abs() <= 1e-12 * expected.abs());
        assert!(!est.fully_coalesced);
    }

    #[test]
    fn disjoint_lines_matches_naive_double_sum() {
        let mut rng = RngStreamSpec::new(99, 0).rng();
        for rep in 0..10 {
            let np = 3 + (rep % 5);
            let n = 1 + rep % 4;
            let trace = random_trace(&mut rng, np, n, 40 + rep as u64);
            let fvals: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..2.0)).collect();
            let f = |x: &usize| fvals[*x % 3];
            for lag in 0..=n {
                let fast = disjoint_lines_estimate(&trace, f, lag).unwrap();
                let eve = eve_indices(&trace, lag).unwrap();
                let states = trace.terminal_states();
                let mut pair_sum = 0.0;
                for i in 0..np {
                    for j in 0..np {
                        if i != j && eve.indices()[i] != eve.indices()[j] {
                            pair_sum += f(&states[i]) * f(&states[j]);
                        }
                    }
                }
                let mean = trace.empirical_measure(n, f);
                let naive = mean * mean - pair_sequence_prefactor(np, lag) * pair_sum;
                assert!(
                    (fast.value - naive).abs() <= 1e-12 * (1.0 + naive.abs()),
                    "lag {lag}: {} vs {naive}",
                    fast.value
                );
            }
        }
    }

    #[test]
    fn full_lag_is_bitwise_untruncated() {
        let m = discrete_bench(4);
        let trace = run_ips(&m, 32, Nonadaptive, RngStreamSpec::new(8, 1)).unwrap();
        let f = |x: &usize| *x as f64 + 0.5;
        let report = variance_report(
            &trace,
            f,
            &ReportOptions {
                lags: vec![4],
                term_by_term: false,
            },
        )
        .unwrap();
        let direct = disjoint_lines_estimate(&trace, f, 4).unwrap();
        assert_eq!(report.v_n.to_bits(), direct.value.to_bits());
        // The truncated column at full lag equals the centered headline.
        assert_eq!(
            report.truncated[0].value.to_bits(),
            report.sigma2_eta_scaled.to_bits()
        );
    }

    #[test]
    fn centered_estimate_matches_bilinear_expansion() {
        let mut rng = RngStreamSpec::new(31, 0).rng();
        let trace = random_trace(&mut rng, 6, 3, 3);
        let fvals = [0.7, 1.9, -0.4];
        let f = |x: &usize| fvals[*x % 3];
        let c = 0.3125;
        let direct = disjoint_lines_estimate(&trace, |x| f(x) - c, 3).unwrap().value;

        let n = trace.n_levels();
        let empty = CoalescenceIndicator::no_coalescence(n);
        let gbar_ff = normalized_coalescent_estimate(&trace, &empty, |x, y| f(x) * f(y)).unwrap();
        let gbar_1f = normalized_coalescent_estimate(&trace, &empty, |_, y| f(y)).unwrap();
        let gbar_f1 = normalized_coalescent_estimate(&trace, &empty, |x, _| f(x)).unwrap();
        let gbar_11 = normalized_coalescent_estimate(&trace, &empty, |_, _| 1.0).unwrap();
        let eta = trace.empirical_measure(n, f);
        let expansion = (eta - c) * (eta - c)
            - (gbar_ff - c * (gbar_1f + gbar_f1) + c * c * gbar_11);
        assert!((direct - expansion).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn zero_test_function_zeroes_the_report() {
        let m = discrete_bench(3);
        let trace = run_ips(&m, 16, Nonadaptive, RngStreamSpec::new(77, 0)).unwrap();
        let report = variance_report(
            &trace,
            |_| 0.0,
            &ReportOptions {
                lags: vec![1, 3],
                term_by_term: true,
            },
        )
        .unwrap();
        assert_eq!(report.eta_estimate, 0.0);
        assert_eq!(report.gamma_estimate, 0.0);
        assert_eq!(report.v_n, 0.0);
        assert_eq!(report.v_n_centered, 0.0);
        assert_eq!(report.sigma2_eta_scaled, 0.0);
        assert_eq!(report.sigma2_gamma_scaled, 0.0);
        for t in &report.truncated {
            assert_eq!(t.value, 0.0);
        }
        assert_eq!(report.sigma2_gamma_term_by_term, Some(0.0));
        assert_eq!(report.sigma2_eta_term_by_term, Some(0.0));
    }

    #[test]
    fn report_fields_match_components() {
        let m = discrete_bench(3);
        let trace = run_ips(&m, 24, Nonadaptive, RngStreamSpec::new(123, 4)).unwrap();
        let f = |x: &usize| 1.0 + *x as f64;
        let report = variance_report(
            &trace,
            f,
            &ReportOptions {
                lags: vec![0, 2],
                term_by_term: true,
            },
        )
        .unwrap();
        let eta = trace.empirical_measure(3, f);
        assert_eq!(report.eta_estimate, eta);
        assert_eq!(report.gamma_estimate, trace.unnormalized_estimate(3, f));
        assert_eq!(
            report.v_n,
            disjoint_lines_estimate(&trace, f, 3).unwrap().value
        );
        let centered = |x: &usize| f(x) - eta;
        assert_eq!(
            report.v_n_centered,
            disjoint_lines_estimate(&trace, centered, 3).unwrap().value
        );
        assert_eq!(report.sigma2_eta_scaled, 24.0 * report.v_n_centered);
        assert_eq!(
            report.sigma2_gamma_scaled,
            24.0 * trace.normalizer(3).powi(2) * report.v_n
        );
        for (t, lag) in report.truncated.iter().zip([0usize, 2]) {
            assert_eq!(t.lag, lag);
            assert_eq!(
                t.value,
                24.0 * disjoint_lines_estimate(&trace, centered, lag).unwrap().value
            );
        }
        assert_eq!(
            report.sigma2_gamma_term_by_term,
            Some(term_by_term_variance(&trace, f, VarianceKind::Gamma).unwrap())
        );
        assert_eq!(
            report.sigma2_eta_term_by_term,
            Some(term_by_term_variance(&trace, f, VarianceKind::EtaCentered).unwrap())
        );
    }

    #[test]
    fn term_by_term_matches_manual_sum() {
        let mut rng = RngStreamSpec::new(55, 0).rng();
        let trace = random_trace(&mut rng, 5, 2, 9);
        let f = |x: &usize| 0.5 + *x as f64;
        let n = trace.n_levels();
        let empty = CoalescenceIndicator::no_coalescence(n);
        let pair = |x: &usize, y: &usize| f(x) * f(y);
        let baseline = coalescent_estimate(&trace, &empty, pair).unwrap();
        let mut manual = 0.0;
        for p in 0..=n {
            let single = CoalescenceIndicator::single(n, p);
            manual += coalescent_estimate(&trace, &single, pair).unwrap() - baseline;
        }
        let got = term_by_term_variance(&trace, f, VarianceKind::Gamma).unwrap();
        assert!((got - manual).abs() <= 1e-12 * (1.0 + manual.abs()));
    }

    #[test]
    fn decomposition_unit_pair_function() {
        let m = discrete_bench(3);
        let trace = run_ips(&m, 7, Nonadaptive, RngStreamSpec::new(3, 3)).unwrap();
        let check = decomposition_check(&trace, |_, _| 1.0).unwrap();
        assert!((check.lhs - 1.0).abs() <= 1e-12);
        assert!(check.abs_gap <= 1e-10);
    }

    #[test]
    fn decomposition_on_toy_genealogy() {
        let trace = toy_genealogy();
        let f2 = |x: &usize, y: &usize| (*x as f64).sin() + (*y as f64 * 0.5).cos() * 2.0;
        let check = decomposition_check(&trace, f2).unwrap();
        assert!(
            check.abs_gap <= 1e-10 * (1.0 + check.lhs.abs()),
            "gap {}",
            check.abs_gap
        );
    }

    #[test]
    fn decomposition_refuses_deep_traces() {
        let n = 21;
        let m = crate::oracle::DiscreteModel::new(
            vec![2; n + 1],
            vec![0.5, 0.5],
            vec![vec![1.0, 1.0]; n],
            vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]; n],
        )
        .unwrap();
        let trace = run_ips(&m, 3, Nonadaptive, RngStreamSpec::new(1, 1)).unwrap();
        assert!(matches!(
            decomposition_check(&trace, |_, _| 1.0),
            Err(EstimatorError::TooManyIndicators { n_levels: 21 })
        ));
    }

    #[test]
    fn count_overflow_is_detected() {
        // All-coalescence indicator on a fully collapsed genealogy of 3
        // particles doubles the counts at every level; 90 levels exceed 2^53.
        let n = 90;
        let np = 3usize;
        let states = vec![vec![0usize; np]; n + 1];
        let ancestors = vec![vec![0u32; np]; n];
        let trace = crate::engine::ParticleSystemTrace::from_genealogy(
            states,
            ancestors,
            vec![1.0; n + 1],
            RngStreamSpec::new(0, 0),
            Nonadaptive,
        )
        .unwrap();
        let indicator = CoalescenceIndicator::new(vec![true; n + 1]);
        assert!(matches!(
            lambda_table(&trace, &indicator),
            Err(EstimatorError::PrecisionLoss { .. })
        ));
    }

    #[test]
    fn prefactor_exact_small_and_log_space_large() {
        assert_eq!(pair_sequence_prefactor(5, 0), 1.0 / 20.0);
        assert_eq!(pair_sequence_prefactor(5, 6), 3125.0 / 16384.0);
        // Deep case goes through log space and must stay finite.
        let deep = pair_sequence_prefactor(100, 2000);
        assert!(deep.is_finite() && deep > 0.0);
        let direct = (1999.0 * (100f64).ln() - 2001.0 * (99f64).ln()).exp();
        assert!((deep - direct).abs() <= 1e-12 * direct);
    }

    mod properties {
        use super::*;
        use crate::model::AdaptivityMode::Nonadaptive;
        use proptest::prelude::*;

        /// Arbitrary ancestor arrays, not just ones the engine could have
        /// produced: the identities under test are pathwise.
        fn arbitrary_genealogy() -> impl Strategy<Value = ParticleSystemTrace<usize>> {
            (2usize..=5, 0usize..=3).prop_flat_map(|(np, n)| {
                prop::collection::vec(prop::collection::vec(0..np as u32, np), n).prop_map(
                    move |ancestors| {
                        let states: Vec<Vec<usize>> =
                            (0..=n).map(|_| (0..np).collect()).collect();
                        ParticleSystemTrace::from_genealogy(
                            states,
                            ancestors,
                            vec![1.0; n + 1],
                            RngStreamSpec::new(0, 0),
                            Nonadaptive,
                        )
                        .unwrap()
                    },
                )
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn decomposition_identity_is_pathwise(
                trace in arbitrary_genealogy(),
                coeffs in prop::array::uniform9(-2.0f64..2.0),
            ) {
                let f2 = |x: &usize, y: &usize| coeffs[(x % 3) * 3 + y % 3];
                let check = decomposition_check(&trace, f2).unwrap();
                prop_assert!(
                    check.abs_gap <= 1e-10 * (1.0 + check.lhs.abs()),
                    "gap {} for lhs {}",
                    check.abs_gap,
                    check.lhs
                );
            }

            #[test]
            fn dp_equals_definition_enumeration(
                trace in arbitrary_genealogy(),
                mask in 0u64..16,
            ) {
                let n = trace.n_levels();
                let np = trace.n_particles();
                let indicator = CoalescenceIndicator::new(
                    (0..=n).map(|p| mask >> p & 1 == 1).collect(),
                );
                let dp = lambda_table(&trace, &indicator).unwrap();
                let brute = crate::oracle::brute_force_pair_counts(&trace, &indicator);
                for i in 0..np {
                    for j in 0..np {
                        prop_assert_eq!(dp.get(i, j), brute[i * np + j]);
                    }
                }
            }

            #[test]
            fn group_sum_equals_naive_pair_sum(
                trace in arbitrary_genealogy(),
                fvals in prop::array::uniform5(-3.0f64..3.0),
                raw_lag in 0usize..=3,
            ) {
                let n = trace.n_levels();
                let np = trace.n_particles();
                let lag = raw_lag.min(n);
                let f = |x: &usize| fvals[*x % 5];
                let fast = disjoint_lines_estimate(&trace, f, lag).unwrap();
                let eve = eve_indices(&trace, lag).unwrap();
                let states = trace.terminal_states();
                let mut pair_sum = 0.0;
                for i in 0..np {
                    for j in 0..np {
                        if i != j && eve.indices()[i] != eve.indices()[j] {
                            pair_sum += f(&states[i]) * f(&states[j]);
                        }
                    }
                }
                let mean = trace.empirical_measure(n, f);
                let naive = mean * mean - pair_sequence_prefactor(np, lag) * pair_sum;
                prop_assert!((fast.value - naive).abs() <= 1e-12 * (1.0 + naive.abs()));
            }
        }
    }

    #[test]
    fn csv_row_round_trips_exactly() {
        let m = discrete_bench(3);
        let trace = run_ips(&m, 10, Nonadaptive, RngStreamSpec::new(17, 2)).unwrap();
        let report = variance_report(
            &trace,
            |x| *x as f64,
            &ReportOptions {
                lags: vec![1],
                term_by_term: false,
            },
        )
        .unwrap();
        let row = report.csv_row();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[5].parse::<f64>().unwrap().to_bits(), report.gamma_estimate.to_bits());
        assert_eq!(fields[8].parse::<f64>().unwrap().to_bits(), report.sigma2_eta_scaled.to_bits());
        assert_eq!(
            EstimatorReport::csv_header(&[1], false).split(',').count(),
            fields.len()
        );
    }

    #[test]
    fn json_field_names_match_csv_columns() {
        let m = discrete_bench(2);
        let trace = run_ips(&m, 8, Nonadaptive, RngStreamSpec::new(17, 3)).unwrap();
        let report = variance_report(&trace, |x| *x as f64, &ReportOptions::default()).unwrap();
        let json: serde_json::Value = serde_json::to_value(&report).unwrap();
        for key in [
            "N",
            "n",
            "seed",
            "mode",
            "eta",
            "gamma",
            "v_n",
            "v_n_centered",
            "sigma2_eta_scaled",
            "sigma2_gamma_scaled",
        ] {
            assert!(json.get(key).is_some(), "missing JSON field {key}");
        }
        assert_eq!(json["seed"], serde_json::json!(3));
        assert_eq!(json["eta"].as_f64().unwrap(), report.eta_estimate);
    }
}

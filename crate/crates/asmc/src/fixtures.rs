//! Small deterministic fixtures shared by the documentation, the unit
//! tests, the acceptance suite and the verification battery.

use crate::engine::ParticleSystemTrace;
use crate::model::AdaptivityMode;
use crate::oracle::DiscreteModel;
use crate::rng::RngStreamSpec;

/// A hand-written genealogy of 5 particles over 7 levels with a rich
/// coalescence structure: a worked example whose pair-sequence counts and
/// ancestor roots are known in closed form.
///
/// Ancestor arrays (1-based, parents of levels 1..=6):
///
/// ```text
/// level 0 -> 1: [1, 1, 3, 5, 3]
/// level 1 -> 2: [4, 4, 2, 4, 3]
/// level 2 -> 3: [5, 2, 1, 5, 2]
/// level 3 -> 4: [1, 2, 4, 2, 2]
/// level 4 -> 5: [2, 3, 5, 3, 3]
/// level 5 -> 6: [2, 1, 2, 3, 5]
/// ```
///
/// The roots of the five terminal particles are (3, 5, 3, 5, 3), so the
/// terminal pairs with disjoint ancestral lines are (1,2), (1,4), (2,3),
/// (2,5), (3,4), (4,5) and their transposes. States are synthetic: the
/// particle at slot `i` carries the value `i + 1` at every level, and all
/// normalizer estimates are 1.
pub fn toy_genealogy() -> ParticleSystemTrace<usize> {
    let one_based: [[u32; 5]; 6] = [
        [1, 1, 3, 5, 3],
        [4, 4, 2, 4, 3],
        [5, 2, 1, 5, 2],
        [1, 2, 4, 2, 2],
        [2, 3, 5, 3, 3],
        [2, 1, 2, 3, 5],
    ];
    let ancestors: Vec<Vec<u32>> = one_based
        .iter()
        .map(|level| level.iter().map(|a| a - 1).collect())
        .collect();
    let states: Vec<Vec<usize>> = (0..=6).map(|_| (1..=5).collect()).collect();
    ParticleSystemTrace::from_genealogy(
        states,
        ancestors,
        vec![1.0; 7],
        RngStreamSpec::new(0, 0),
        AdaptivityMode::Nonadaptive,
    )
    .expect("fixture genealogy is valid")
}

/// The two-state workhorse model of the test and acceptance suites:
/// mild potentials and a well-mixing chain, so finite-size bias of the
/// variance estimators is small at moderate particle counts, with `n`
/// levels.
pub fn discrete_bench(n_levels: usize) -> DiscreteModel {
    DiscreteModel::new(
        vec![2; n_levels + 1],
        vec![0.65, 0.35],
        vec![vec![0.9, 1.3]; n_levels],
        vec![vec![vec![0.75, 0.25], vec![0.35, 0.65]]; n_levels],
    )
    .expect("bench model is valid")
}

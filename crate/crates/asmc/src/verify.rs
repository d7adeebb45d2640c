//! A self-contained battery of oracle and identity checks, each returning
//! a pass/fail result with a one-line detail. The command-line `verify`
//! subcommand prints this battery as a table; the acceptance test suite
//! runs the same checks at larger sizes.

use crate::engine::run_ips;
use crate::estimators::{
    decomposition_check, disjoint_lines_estimate, lambda_table, normalized_coalescent_estimate,
    term_by_term_variance, CoalescenceIndicator, VarianceKind,
};
use crate::fixtures::{discrete_bench, toy_genealogy};
use crate::model::AdaptivityMode;
use crate::oracle::{
    brute_force_pair_counts, coalescent_unbiasedness_check, exact_asymptotic_variance,
    exact_coalescent_measure, exact_flow, random_discrete_model, unbiasedness_check,
};
use crate::rng::RngStreamSpec;
use rand::Rng;

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Run the full battery. Deterministic given `seed`.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();

    // Worked-example genealogy: counting table and closed-form estimate.
    {
        let trace = toy_genealogy();
        let table = lambda_table(&trace, &CoalescenceIndicator::single(6, 3)).unwrap();
        let mut ok = true;
        for i in 0..5 {
            for j in 0..5 {
                let expected = if (i, j) == (1, 3) || (i, j) == (3, 1) {
                    2.0
                } else {
                    0.0
                };
                ok &= table.get(i, j) == expected;
            }
        }
        let f2 = |x: &usize, y: &usize| (*x * 7 + *y) as f64;
        let est =
            normalized_coalescent_estimate(&trace, &CoalescenceIndicator::single(6, 3), f2)
                .unwrap();
        let states = trace.terminal_states();
        let expected =
            2.0 * (3125.0 / 16384.0) * (f2(&states[1], &states[3]) + f2(&states[3], &states[1]));
        let rel = (est - expected).abs() / expected.abs();
        ok &= rel <= 1e-12;
        results.push(CheckResult::new(
            "toy-genealogy-fixture",
            ok,
            format!("closed-form relative gap {rel:.2e}"),
        ));
    }

    // Pair-measure decomposition identity on random traces.
    {
        let mut rng = RngStreamSpec::new(seed, 1).rng();
        let mut worst: f64 = 0.0;
        for rep in 0..20u64 {
            let n = (rep % 5) as usize;
            let np = 2 + (rep % 6) as usize;
            let model = random_discrete_model(&mut rng, n, 3);
            let trace = run_ips(
                &model,
                np,
                AdaptivityMode::Nonadaptive,
                RngStreamSpec::new(seed ^ 0xd1ce, rep),
            )
            .unwrap();
            let coeffs: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f2 = |x: &usize, y: &usize| coeffs[(x % 3) * 3 + y % 3];
            let check = decomposition_check(&trace, f2).unwrap();
            worst = worst.max(check.abs_gap / (1.0 + check.lhs.abs()));
        }
        results.push(CheckResult::new(
            "pair-measure-decomposition",
            worst <= 1e-10,
            format!("worst relative gap {worst:.2e} over 20 random traces"),
        ));
    }

    // Dynamic program versus brute-force enumeration.
    {
        let mut rng = RngStreamSpec::new(seed, 2).rng();
        let mut ok = true;
        for rep in 0..10u64 {
            let n = (rep % 4) as usize;
            let np = 2 + (rep % 4) as usize;
            let model = random_discrete_model(&mut rng, n, 2);
            let trace = run_ips(
                &model,
                np,
                AdaptivityMode::Nonadaptive,
                RngStreamSpec::new(seed ^ 0xbeef, rep),
            )
            .unwrap();
            for indicator in CoalescenceIndicator::enumerate_all(n) {
                let dp = lambda_table(&trace, &indicator).unwrap();
                let brute = brute_force_pair_counts(&trace, &indicator);
                for i in 0..np {
                    for j in 0..np {
                        ok &= dp.get(i, j) == brute[i * np + j];
                    }
                }
            }
        }
        results.push(CheckResult::new(
            "counting-dp-vs-enumeration",
            ok,
            "exact equality over 10 random traces, all indicators".into(),
        ));
    }

    // Exhaustive unbiasedness on the two-state model.
    {
        let model = discrete_bench(1);
        let f = [0.25, 1.75];
        let check = unbiasedness_check(&model, 3, 1, &f).unwrap();
        let mut ok = check.relative_gap <= 1e-10;
        let mut worst = check.relative_gap;
        let g = [1.0, -0.5];
        for indicator in CoalescenceIndicator::enumerate_all(1) {
            let c = coalescent_unbiasedness_check(&model, 3, 1, &indicator, &f, &g).unwrap();
            worst = worst.max(c.relative_gap);
            ok &= c.relative_gap <= 1e-10;
        }
        results.push(CheckResult::new(
            "exhaustive-unbiasedness",
            ok,
            format!("worst relative gap {worst:.2e}"),
        ));
    }

    // Exact flow: the two normalizer routes agree.
    {
        let model = discrete_bench(5);
        let flow = exact_flow(&model);
        let worst = (0..=5)
            .map(|p| {
                (flow.masses[p] - flow.masses_product_route[p]).abs() / flow.masses[p].abs()
            })
            .fold(0.0f64, f64::max);
        results.push(CheckResult::new(
            "normalizer-route-agreement",
            worst <= 1e-12,
            format!("worst relative gap {worst:.2e}"),
        ));
    }

    // Per-level variance formula equals its coalescent form.
    {
        let model = discrete_bench(3);
        let f = [0.6, -1.1];
        let exact = exact_asymptotic_variance(&model, &f);
        let pair = |x: usize, y: usize| f[x] * f[y];
        let baseline =
            exact_coalescent_measure(&model, &CoalescenceIndicator::no_coalescence(3), pair);
        let mut coalescent_form = 0.0;
        for p in 0..=3 {
            coalescent_form +=
                exact_coalescent_measure(&model, &CoalescenceIndicator::single(3, p), pair)
                    - baseline;
        }
        let rel = (exact.sigma2_gamma - coalescent_form).abs() / (1.0 + coalescent_form.abs());
        results.push(CheckResult::new(
            "variance-coalescent-form",
            rel <= 1e-12,
            format!("relative gap {rel:.2e}"),
        ));
    }

    // Fast estimator equals the term-by-term estimator asymptotically:
    // spot-check the finite-size gap stays small on a moderate run.
    {
        let model = discrete_bench(3);
        let trace = run_ips(
            &model,
            256,
            AdaptivityMode::Nonadaptive,
            RngStreamSpec::new(seed, 3),
        )
        .unwrap();
        let f = |x: &usize| *x as f64;
        let fast = 256.0 * disjoint_lines_estimate(&trace, f, 3).unwrap().value;
        let tbt = term_by_term_variance(&trace, f, VarianceKind::Eta).unwrap();
        let gap = (fast - tbt).abs();
        results.push(CheckResult::new(
            "fast-vs-term-by-term",
            gap <= 0.5 * (1.0 + tbt.abs()),
            format!("absolute gap {gap:.3e} at N = 256"),
        ));
    }

    // Gaussian schedule: telescoping potentials.
    {
        let spec = crate::gaussian::GaussianSequenceSpec::builder()
            .max_level(30)
            .build()
            .unwrap();
        let mut rng = RngStreamSpec::new(seed, 4).rng();
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let mut product = 1.0;
        for p in 0..30 {
            product *= spec.bridge_potential(p, &x).unwrap();
        }
        let sigma0 = spec.build_covariance(0).unwrap();
        let sigma30 = spec.build_covariance(30).unwrap();
        let q = |sigma: &nalgebra::DMatrix<f64>, x: &[f64]| {
            let chol = nalgebra::Cholesky::new(sigma.clone()).unwrap();
            let y = chol
                .l()
                .solve_lower_triangular(&nalgebra::DVector::from_column_slice(x))
                .unwrap();
            y.norm_squared()
        };
        let expected = (-0.5 * (q(&sigma30, &x) - q(&sigma0, &x))).exp();
        let rel = (product - expected).abs() / expected.abs();
        results.push(CheckResult::new(
            "gaussian-telescoping",
            rel <= 1e-10,
            format!("relative gap {rel:.2e}"),
        ));
    }

    results
}

//! Replicated experiment execution and result emission.
//!
//! Replicate `r` of every block runs on RNG stream `r` under the
//! experiment's master seed, so results do not depend on scheduling;
//! aggregation is a deterministic fold in replicate order and reruns of
//! the same config produce byte-identical files. Floats are printed in
//! shortest round-trip form throughout.

use crate::config::{ExperimentConfig, ModelSelector, ReferenceBlock};
use anyhow::{anyhow, bail, Context, Result};
use asmc::engine::run_ips;
use asmc::estimators::{variance_report, EstimatorReport, ReportOptions};
use asmc::gaussian::GaussianSequenceSpec;
use asmc::model::{AdaptivityMode, FeynmanKacModel};
use asmc::oracle::{exact_asymptotic_variance, exact_flow, DiscreteModel};
use asmc::rng::RngStreamSpec;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One aggregate line: summary statistics of one metric over the
/// replicates of one block.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub model: String,
    pub mode: String,
    #[serde(rename = "N")]
    pub n_particles: usize,
    #[serde(rename = "n")]
    pub n_levels: usize,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub replicates: u64,
}

pub const AGGREGATE_HEADER: &str = "model,mode,N,n,metric,mean,sd,ci_lo,ci_hi,replicates";

impl AggregateRow {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.mode,
            self.n_particles,
            self.n_levels,
            self.metric,
            self.mean,
            self.sd,
            self.ci_lo,
            self.ci_hi,
            self.replicates
        )
    }
}

struct Block {
    mode: AdaptivityMode,
    n_particles: usize,
    reports: Vec<EstimatorReport>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// The metric columns of a report, in emission order.
fn report_metrics(report: &EstimatorReport) -> Vec<(String, f64)> {
    let mut out = vec![
        ("eta".to_string(), report.eta_estimate),
        ("gamma".to_string(), report.gamma_estimate),
        ("v_n".to_string(), report.v_n),
        ("v_n_centered".to_string(), report.v_n_centered),
        ("sigma2_eta_scaled".to_string(), report.sigma2_eta_scaled),
        ("sigma2_gamma_scaled".to_string(), report.sigma2_gamma_scaled),
    ];
    for t in &report.truncated {
        out.push((format!("trunc_h{}", t.lag), t.value));
    }
    if let (Some(g), Some(e)) = (
        report.sigma2_gamma_term_by_term,
        report.sigma2_eta_term_by_term,
    ) {
        out.push(("sigma2_gamma_tbt".to_string(), g));
        out.push(("sigma2_eta_tbt".to_string(), e));
    }
    out
}

fn model_label(selector: &ModelSelector) -> String {
    match selector {
        ModelSelector::Name(name) => name.clone(),
        ModelSelector::DiscreteFile { discrete_file } => {
            format!("discrete:{}", discrete_file.display())
        }
    }
}

fn run_blocks<M, F>(model: &M, f: &F, config: &ExperimentConfig) -> Result<Vec<Block>>
where
    M: FeynmanKacModel,
    F: Fn(&M::State) -> f64 + Sync,
{
    let options = ReportOptions {
        lags: config.lags.clone(),
        term_by_term: config.term_by_term,
    };
    let mut blocks = Vec::new();
    for &mode in &config.modes {
        for &n_particles in &config.particle_counts {
            let reports: Vec<EstimatorReport> = (0..config.replicates)
                .into_par_iter()
                .map(|replicate| {
                    let trace = run_ips(
                        model,
                        n_particles,
                        mode,
                        RngStreamSpec::new(config.seed, replicate),
                    )?;
                    Ok(variance_report(&trace, f, &options)?)
                })
                .collect::<Result<_>>()?;
            blocks.push(Block {
                mode,
                n_particles,
                reports,
            });
        }
    }
    Ok(blocks)
}

/// Crude Monte Carlo reference: the scaled empirical variance of the
/// plain normalized estimator over independent nonadaptive runs.
fn run_reference<M, F>(
    model: &M,
    f: &F,
    reference: &ReferenceBlock,
    seed: u64,
) -> Result<AggregateRow>
where
    M: FeynmanKacModel,
    F: Fn(&M::State) -> f64 + Sync,
{
    let n = model.n_levels();
    let estimates: Vec<f64> = (0..reference.replicates)
        .into_par_iter()
        .map(|replicate| {
            let trace = run_ips(
                model,
                reference.n_particles,
                AdaptivityMode::Nonadaptive,
                RngStreamSpec::new(seed, replicate),
            )?;
            Ok(trace.empirical_measure(n, f))
        })
        .collect::<Result<_>>()?;
    let sd = sample_sd(&estimates);
    let sigma2 = reference.n_particles as f64 * sd * sd;
    // Normal-approximation spread of a sample variance.
    let sigma2_sd = sigma2 * (2.0 / (reference.replicates as f64 - 1.0)).sqrt();
    Ok(AggregateRow {
        model: String::new(),
        mode: "reference".into(),
        n_particles: reference.n_particles,
        n_levels: n,
        metric: "sigma2_eta_scaled".into(),
        mean: sigma2,
        sd: sigma2_sd,
        ci_lo: sigma2 - 1.96 * sigma2_sd,
        ci_hi: sigma2 + 1.96 * sigma2_sd,
        replicates: reference.replicates,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn emit_blocks(
    out_dir: &Path,
    label: &str,
    config: &ExperimentConfig,
    blocks: &[Block],
) -> Result<Vec<AggregateRow>> {
    let mut aggregate = Vec::new();
    for block in blocks {
        let stem = format!("replicates_{}_N{}", block.mode, block.n_particles);
        let mut csv = String::new();
        writeln!(
            csv,
            "{}",
            EstimatorReport::csv_header(&config.lags, config.term_by_term)
        )?;
        for report in &block.reports {
            writeln!(csv, "{}", report.csv_row())?;
        }
        write_file(&out_dir.join(format!("{stem}.csv")), &csv)?;
        write_file(
            &out_dir.join(format!("{stem}.json")),
            &serde_json::to_string_pretty(&block.reports)?,
        )?;

        for (metric, _) in report_metrics(&block.reports[0]) {
            let values: Vec<f64> = block
                .reports
                .iter()
                .map(|r| {
                    report_metrics(r)
                        .into_iter()
                        .find(|(name, _)| *name == metric)
                        .map(|(_, v)| v)
                        .expect("metric present in every report")
                })
                .collect();
            let m = mean(&values);
            let sd = sample_sd(&values);
            let se = sd / (values.len() as f64).sqrt();
            aggregate.push(AggregateRow {
                model: label.to_string(),
                mode: block.mode.to_string(),
                n_particles: block.n_particles,
                n_levels: config.n_levels,
                metric,
                mean: m,
                sd,
                ci_lo: m - 1.96 * se,
                ci_hi: m + 1.96 * se,
                replicates: config.replicates,
            });
        }
    }
    Ok(aggregate)
}

/// Run the configured experiment and write every result file under the
/// output directory. Returns the aggregate CSV path.
pub fn run_experiment(
    config: &ExperimentConfig,
    config_dir: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let label = model_label(&config.model);

    let mut aggregate: Vec<AggregateRow> = Vec::new();
    match &config.model {
        ModelSelector::Name(_) => {
            let knobs = &config.gaussian;
            let mut builder = GaussianSequenceSpec::builder()
                .dimension(knobs.dimension)
                .max_level(config.n_levels)
                .metropolis_sweeps(knobs.metropolis_sweeps);
            if let Some(scale) = knobs.proposal_scale {
                builder = builder.proposal_scale(scale);
            }
            let spec = builder.build().map_err(|e| anyhow!(e.to_string()))?;
            let coordinate = parse_gaussian_test_function(&config.test_function, knobs.dimension)?;
            let f = move |x: &Vec<f64>| x[coordinate];

            let blocks = run_blocks(&spec, &f, config)?;
            aggregate.extend(emit_blocks(out_dir, &label, config, &blocks)?);
            if let Some(reference) = &config.reference {
                let mut row = run_reference(&spec, &f, reference, config.seed)?;
                row.model = label.clone();
                aggregate.push(row);
            }
            if config.oracle {
                bail!("oracle rows are only available for discrete models");
            }
            if log::log_enabled!(log::Level::Debug) {
                for (level, rate) in spec.acceptance_rates().iter().enumerate() {
                    if let Some(rate) = rate {
                        log::debug!("metropolis acceptance at level {level}: {rate:.3}");
                    }
                }
            }
        }
        ModelSelector::DiscreteFile { discrete_file } => {
            let path = config.resolve_model_path(config_dir, discrete_file);
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading model {}", path.display()))?;
            let model = DiscreteModel::from_json(&text).map_err(|e| anyhow!(e.to_string()))?;
            if model.n_levels() < config.n_levels {
                bail!(
                    "model has {} levels, config asks for {}",
                    model.n_levels(),
                    config.n_levels
                );
            }
            let model = model
                .truncated(config.n_levels)
                .map_err(|e| anyhow!(e.to_string()))?;
            let f_values =
                parse_discrete_test_function(&config.test_function, model.state_count(config.n_levels))?;
            let fv = f_values.clone();
            let f = move |x: &usize| fv[*x];

            let blocks = run_blocks(&model, &f, config)?;
            aggregate.extend(emit_blocks(out_dir, &label, config, &blocks)?);
            if let Some(reference) = &config.reference {
                let mut row = run_reference(&model, &f, reference, config.seed)?;
                row.model = label.clone();
                aggregate.push(row);
            }
            if config.oracle {
                let flow = exact_flow(&model);
                let exact = exact_asymptotic_variance(&model, &f_values);
                for (metric, value) in [
                    ("eta_exact", flow.eta(config.n_levels, &f_values)),
                    ("gamma_exact", flow.gamma(config.n_levels, &f_values)),
                    ("sigma2_eta_exact", exact.sigma2_eta_centered),
                    ("sigma2_gamma_exact", exact.sigma2_gamma),
                ] {
                    aggregate.push(AggregateRow {
                        model: label.clone(),
                        mode: "exact".into(),
                        n_particles: 0,
                        n_levels: config.n_levels,
                        metric: metric.into(),
                        mean: value,
                        sd: 0.0,
                        ci_lo: value,
                        ci_hi: value,
                        replicates: 0,
                    });
                }
            }
        }
    }

    let mut csv = String::new();
    writeln!(csv, "{AGGREGATE_HEADER}")?;
    for row in &aggregate {
        writeln!(csv, "{}", row.csv_row())?;
    }
    let aggregate_path = out_dir.join("aggregate.csv");
    write_file(&aggregate_path, &csv)?;
    write_file(
        &out_dir.join("aggregate.json"),
        &serde_json::to_string_pretty(&aggregate)?,
    )?;
    write_file(
        &out_dir.join("run_metadata.json"),
        &serde_json::to_string_pretty(&serde_json::json!({
            "tool": "asmc",
            "config": config,
        }))?,
    )?;
    Ok(aggregate_path)
}

fn parse_gaussian_test_function(selector: &str, dimension: usize) -> Result<usize> {
    let coordinate = match selector {
        "default" => 0,
        other => match other.strip_prefix("coordinate:") {
            Some(k) => k
                .parse::<usize>()
                .with_context(|| format!("bad coordinate in {other:?}"))?,
            None => bail!("unknown test function {other:?} for the Gaussian benchmark"),
        },
    };
    if coordinate >= dimension {
        bail!("coordinate {coordinate} out of range for dimension {dimension}");
    }
    Ok(coordinate)
}

fn parse_discrete_test_function(selector: &str, n_states: usize) -> Result<Vec<f64>> {
    match selector {
        "default" | "state-value" => Ok((0..n_states).map(|s| s as f64).collect()),
        other => match other.strip_prefix("indicator:") {
            Some(s) => {
                let state: usize = s
                    .parse()
                    .with_context(|| format!("bad state in {other:?}"))?;
                if state >= n_states {
                    bail!("indicator state {state} out of range ({n_states} states)");
                }
                let mut v = vec![0.0; n_states];
                v[state] = 1.0;
                Ok(v)
            }
            None => bail!("unknown test function {other:?} for a discrete model"),
        },
    }
}

/// Long-format plot table from an aggregate file: one row per
/// `(N, series)` with the scaled variance estimate and its interval.
pub fn emit_plot_data(
    aggregate_path: &Path,
    out_path: &Path,
    requested_series: Option<&[String]>,
) -> Result<()> {
    let text = std::fs::read_to_string(aggregate_path)
        .with_context(|| format!("reading {}", aggregate_path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow!("empty aggregate file"))?;
    if header != AGGREGATE_HEADER {
        bail!("unexpected aggregate header {header:?}");
    }

    struct Entry {
        mode: String,
        n_particles: usize,
        mean: f64,
        ci_lo: f64,
        ci_hi: f64,
    }
    let mut entries = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            bail!("malformed aggregate row {line:?}");
        }
        if fields[4] != "sigma2_eta_scaled" {
            continue;
        }
        entries.push(Entry {
            mode: fields[1].to_string(),
            n_particles: fields[2].parse()?,
            mean: fields[5].parse()?,
            ci_lo: fields[7].parse()?,
            ci_hi: fields[8].parse()?,
        });
    }

    let mut counts: Vec<usize> = entries
        .iter()
        .filter(|e| e.mode != "reference")
        .map(|e| e.n_particles)
        .collect();
    counts.sort_unstable();
    counts.dedup();
    if counts.is_empty() {
        bail!("aggregate has no per-N variance rows");
    }

    let present: Vec<String> = ["adaptive", "nonadaptive", "reference"]
        .iter()
        .filter(|name| entries.iter().any(|e| e.mode == **name))
        .map(|s| s.to_string())
        .collect();
    let series: Vec<String> = match requested_series {
        Some(requested) => {
            for name in requested {
                if !present.contains(name) {
                    bail!("missing series {name:?}: aggregate only has {present:?}");
                }
            }
            requested.to_vec()
        }
        None => present,
    };

    let mut csv = String::from("N,series,y,y_lo,y_hi\n");
    for &n in &counts {
        for name in &series {
            let entry = if name == "reference" {
                entries.iter().find(|e| e.mode == "reference")
            } else {
                entries
                    .iter()
                    .find(|e| e.mode == *name && e.n_particles == n)
            };
            if let Some(e) = entry {
                writeln!(csv, "{n},{name},{},{},{}", e.mean, e.ci_lo, e.ci_hi)?;
            }
        }
    }
    write_file(out_path, &csv)
}

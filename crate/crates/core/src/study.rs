//! Replicated simulation experiments: decoding accuracy across
//! simulated/fitted degree pairs, optimiser stability, and estimator
//! consistency over series lengths.
//!
//! Every replicate draws its seeds from named substreams of one master
//! seed, so results do not depend on execution order.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{decoding_accuracy, viterbi, StateSequence};
use crate::error::{Error, Result};
use crate::fit::{fit_with_starts, FitOptions, FitResult, AGREEMENT_TOL};
use crate::geometry::StepTurnSeries;
use crate::likelihood::{PenaltyConfig, PooledData};
use crate::model::ModelSpec;
use crate::simulate::{paper_scenario, simulate};

const TAG_DATA: u64 = 1;
const TAG_FIT: u64 = 2;
const TAG_STABILITY: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the substream named by `tags` under `seed`.
pub fn substream(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replicates: usize,
    pub t_len: usize,
    pub seed: u64,
    pub sim_degrees: Vec<usize>,
    pub fit_degrees: Vec<usize>,
    /// Random starts per fit, in addition to the truth-projected start.
    pub n_starts: usize,
    pub consistency_lengths: Vec<usize>,
    pub consistency_degree: usize,
    pub stability_lengths: Vec<usize>,
    /// Random single-start runs per replicate in the stability protocol.
    pub stability_runs: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            replicates: 25,
            t_len: 2000,
            seed: 1,
            sim_degrees: vec![0, 1, 2, 3],
            fit_degrees: vec![0, 1, 2, 3],
            n_starts: 2,
            consistency_lengths: vec![100, 500, 1000, 2000],
            consistency_degree: 1,
            stability_lengths: vec![100, 500],
            stability_runs: 5,
        }
    }
}

/// Simulated replicate `rep` of the degree-`degree` scenario at length `t_len`.
pub fn replicate_data(seed: u64, degree: usize, t_len: usize, rep: usize) -> Result<(StepTurnSeries, StateSequence)> {
    let mut sc = paper_scenario(degree)?;
    sc.t_len = t_len;
    sc.seed = substream(seed, &[TAG_DATA, degree as u64, t_len as u64, rep as u64]);
    simulate(&sc)
}

/// Unpenalised fit of a uniform-degree two-state model, started from the
/// generating parameters projected onto the fitted degree plus `n_starts`
/// random starts.
pub fn fit_replicate(
    series: &StepTurnSeries,
    sim_degree: usize,
    fit_degree: usize,
    n_starts: usize,
    seed: u64,
) -> Result<FitResult> {
    let spec = ModelSpec::uniform(2, fit_degree);
    let truth = paper_scenario(sim_degree)?.params.project(&spec)?;
    let opts = FitOptions {
        n_starts,
        seed,
        ..FitOptions::default()
    };
    let data = PooledData::single(series.clone())?;
    fit_with_starts(&data, &spec, &PenaltyConfig::default(), &opts, &[truth])
}

/// One accuracy measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub sim_degree: usize,
    pub fit_degree: usize,
    pub replicate: usize,
    pub accuracy: f64,
}

/// Viterbi accuracy of a degree-`fit_degree` fit on each replicate of the
/// degree-`sim_degree` scenario.
pub fn accuracy_cell(cfg: &StudyConfig, sim_degree: usize, fit_degree: usize) -> Result<Vec<AccuracyRecord>> {
    (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let (series, truth) = replicate_data(cfg.seed, sim_degree, cfg.t_len, rep)?;
            let fit_seed = substream(cfg.seed, &[TAG_FIT, sim_degree as u64, fit_degree as u64, rep as u64]);
            let fit = fit_replicate(&series, sim_degree, fit_degree, cfg.n_starts, fit_seed)?;
            let decoded = viterbi(&series, &fit.params, &fit.spec)?;
            Ok(AccuracyRecord {
                sim_degree,
                fit_degree,
                replicate: rep,
                accuracy: decoding_accuracy(&decoded, &truth)?,
            })
        })
        .collect()
}

/// Stability of one (simulated degree, fitted degree, length) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityCell {
    pub sim_degree: usize,
    pub fit_degree: usize,
    pub t_len: usize,
    pub runs: usize,
    pub reached: usize,
}

impl StabilityCell {
    pub fn proportion(&self) -> f64 {
        if self.runs == 0 {
            0.0
        } else {
            self.reached as f64 / self.runs as f64
        }
    }
}

/// Each replicate is fitted once from the truth-projected start (the
/// anchor) and `stability_runs` times from single random starts. A run
/// reaches the optimum when its objective is within 1e-3 of the anchor or
/// above it.
pub fn stability_cell(cfg: &StudyConfig, sim_degree: usize, fit_degree: usize, t_len: usize) -> Result<StabilityCell> {
    let spec = ModelSpec::uniform(2, fit_degree);
    let truth = paper_scenario(sim_degree)?.params.project(&spec)?;
    let per_rep: Vec<Result<(usize, usize)>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let (series, _) = replicate_data(cfg.seed, sim_degree, t_len, rep)?;
            let data = PooledData::single(series)?;
            let seed = substream(
                cfg.seed,
                &[TAG_STABILITY, sim_degree as u64, fit_degree as u64, t_len as u64, rep as u64],
            );
            let opts = FitOptions {
                n_starts: cfg.stability_runs,
                seed,
                ..FitOptions::default()
            };
            let fit = match fit_with_starts(&data, &spec, &PenaltyConfig::default(), &opts, &[truth.clone()]) {
                Ok(f) => f,
                // Every start failed: none reached anything.
                Err(Error::Estimation(_)) => return Ok((cfg.stability_runs, 0)),
                Err(e) => return Err(e),
            };
            let anchor = fit.starts[0].objective.filter(|_| fit.starts[0].converged);
            let reached = fit.starts[1..]
                .iter()
                .filter(|s| match (anchor, s.objective) {
                    (Some(a), Some(v)) => s.converged && v >= a - AGREEMENT_TOL,
                    // Without an anchor, fall back to the best start.
                    (None, Some(v)) => s.converged && v >= fit.penalized_objective - AGREEMENT_TOL,
                    _ => false,
                })
                .count();
            Ok((cfg.stability_runs, reached))
        })
        .collect();
    let mut cell = StabilityCell {
        sim_degree,
        fit_degree,
        t_len,
        runs: 0,
        reached: 0,
    };
    for r in per_rep {
        let (runs, reached) = r?;
        cell.runs += runs;
        cell.reached += reached;
    }
    Ok(cell)
}

/// Estimates of one replicate in the consistency experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub t_len: usize,
    pub replicate: usize,
    pub fit: FitResult,
}

/// Correctly specified fits of the degree-`degree` scenario at each length.
pub fn consistency(cfg: &StudyConfig, degree: usize, lengths: &[usize]) -> Result<Vec<ConsistencyRecord>> {
    let jobs: Vec<(usize, usize)> = lengths
        .iter()
        .flat_map(|&t| (0..cfg.replicates).map(move |r| (t, r)))
        .collect();
    jobs.into_par_iter()
        .map(|(t_len, rep)| {
            let (series, _) = replicate_data(cfg.seed, degree, t_len, rep)?;
            let seed = substream(cfg.seed, &[TAG_FIT, degree as u64, degree as u64, t_len as u64, rep as u64]);
            let fit = fit_replicate(&series, degree, degree, cfg.n_starts, seed)?;
            Ok(ConsistencyRecord {
                t_len,
                replicate: rep,
                fit,
            })
        })
        .collect()
}

fn write_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let mut body = String::with_capacity(lines.len() * 48);
    body.push_str(header);
    body.push('\n');
    for l in lines {
        body.push_str(l);
        body.push('\n');
    }
    std::fs::write(path, body)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Runs all three experiments and writes `accuracy.csv`,
/// `accuracy_table.csv`, `stability.csv` and `consistency.csv` to `out`.
pub fn run_study(cfg: &StudyConfig, out: &Path) -> Result<()> {
    if cfg.replicates == 0 {
        return Err(Error::Argument("replicates must be at least 1".into()));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", out.display()))))?;
    // Fail on an unwritable directory before any fitting.
    write_lines(&out.join("config.json.tmp"), "", &[])?;
    std::fs::remove_file(out.join("config.json.tmp"))?;
    crate::io::write_json(out.join("config.json"), cfg)?;

    let f = crate::io::fmt_f64;
    let mut acc_lines = Vec::new();
    let mut table = Vec::new();
    for &s in &cfg.sim_degrees {
        let mut row = vec![s.to_string()];
        for &d in &cfg.fit_degrees {
            let cell = accuracy_cell(cfg, s, d)?;
            let mean = cell.iter().map(|r| r.accuracy).sum::<f64>() / cell.len() as f64;
            row.push(f(mean));
            acc_lines.extend(
                cell.iter()
                    .map(|r| format!("{},{},{},{}", r.sim_degree, r.fit_degree, r.replicate, f(r.accuracy))),
            );
        }
        table.push(row.join(","));
    }
    write_lines(&out.join("accuracy.csv"), "sim_degree,fit_degree,replicate,accuracy", &acc_lines)?;
    let header = std::iter::once("sim_degree".to_string())
        .chain(cfg.fit_degrees.iter().map(|d| format!("fit_{d}")))
        .collect::<Vec<_>>()
        .join(",");
    write_lines(&out.join("accuracy_table.csv"), &header, &table)?;

    let mut stab = Vec::new();
    for &s in &cfg.sim_degrees {
        for &d in &cfg.fit_degrees {
            for &t in &cfg.stability_lengths {
                let c = stability_cell(cfg, s, d, t)?;
                stab.push(format!(
                    "{},{},{},{},{},{}",
                    c.sim_degree,
                    c.fit_degree,
                    c.t_len,
                    c.runs,
                    c.reached,
                    f(c.proportion())
                ));
            }
        }
    }
    write_lines(&out.join("stability.csv"), "sim_degree,fit_degree,T,runs,reached,proportion", &stab)?;

    let cons = consistency(cfg, cfg.consistency_degree, &cfg.consistency_lengths)?;
    let mut lines = Vec::new();
    for r in &cons {
        let p = &r.fit.params;
        let mut push = |name: String, v: f64| lines.push(format!("{},{},{},{}", r.t_len, r.replicate, name, f(v)));
        for j in 0..p.mu_step.len() {
            push(format!("mu_step_{}", j + 1), p.mu_step[j]);
            push(format!("sd_step_{}", j + 1), p.mu_step[j] * p.cv_step[j]);
            push(format!("kappa_turn_{}", j + 1), p.kappa_turn[j]);
            for (k, v) in p.phi_step[j].iter().enumerate() {
                push(format!("phi_step_{}_{}", j + 1, k + 1), *v);
            }
            for (k, v) in p.phi_turn[j].iter().enumerate() {
                push(format!("phi_turn_{}_{}", j + 1, k + 1), *v);
            }
        }
    }
    write_lines(&out.join("consistency.csv"), "T,replicate,parameter,value", &lines)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ() {
        let a = substream(1, &[1, 2, 3]);
        assert_eq!(a, substream(1, &[1, 2, 3]));
        assert_ne!(a, substream(1, &[1, 3, 2]));
        assert_ne!(a, substream(2, &[1, 2, 3]));
    }

    #[test]
    fn replicate_data_is_deterministic() {
        let a = replicate_data(7, 2, 100, 3).unwrap();
        assert_eq!(a, replicate_data(7, 2, 100, 3).unwrap());
        assert_ne!(a.0, replicate_data(7, 2, 100, 4).unwrap().0);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arhmm::decode::{decoding_accuracy, pseudo_residuals, summarize_residuals, viterbi};
use arhmm::fit::{fit, lambda_path, refit_unpenalized, select_lambda, selected_degrees, Criterion, Truth};
use arhmm::geometry::{downsample, steps_and_turns};
use arhmm::simulate::{paper_scenario, simulate};
use arhmm::study::{run_study, StudyConfig};
use arhmm::{io, Error, ErrorClass, FitOptions, FitResult, ModelSpec, PenaltyConfig, PooledData, Result};
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Autoregressive hidden Markov models for step-length and turning-angle data.
///
/// Exit status: 0 success, 1 usage error, 2 data or domain error, 3 numeric
/// failure.
#[derive(Debug, Parser)]
#[command(name = "arhmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert location tracks (`id,x,y[,t_sec]`) into a step/turn series file.
    Prep {
        /// Track CSV.
        input: PathBuf,
        /// Keep every k-th location (30 turns 30 Hz into 1 Hz).
        #[arg(long, default_value_t = 1)]
        downsample: usize,
        /// Replace steps below this value by it; 0 rejects zero-length steps.
        #[arg(long, default_value_t = 0.0)]
        zero_floor: f64,
        /// Output series CSV (`id,t,step,turn`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one of the preset two-state scenarios.
    Simulate {
        /// AR degree of the scenario, 0 to 3.
        #[arg(long)]
        degree: usize,
        /// Number of observations.
        #[arg(long = "T", default_value_t = 2000)]
        t_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output series CSV followed by the true-state CSV.
        #[arg(long, num_args = 2, value_names = ["SERIES", "STATES"])]
        out: Vec<PathBuf>,
    },
    /// Fit a model at one λ, or along a λ grid with selection and an
    /// unpenalised refit at the selected degrees.
    #[command(group(ArgGroup::new("penalty").required(true).args(["lambda", "path"])))]
    Fit {
        /// Series CSV; all tracks are pooled.
        input: PathBuf,
        /// Model spec as a JSON file or inline JSON, e.g.
        /// `{"n_states":2,"p_step":[1,1],"p_turn":[1,1]}`.
        #[arg(long)]
        spec: String,
        /// Fit at this penalty.
        #[arg(long)]
        lambda: Option<f64>,
        /// Fit along the default grid (0 and 23 log-spaced values in [0.1, 100]).
        #[arg(long)]
        path: bool,
        /// Selection rule for --path.
        #[arg(long, value_enum, default_value_t = CriterionArg::Bic)]
        criterion: CriterionArg,
        /// True states (needed for --criterion accuracy).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Random starts per fit.
        #[arg(long, default_value_t = 10)]
        starts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Most probable state sequence under a fitted model.
    Decode {
        input: PathBuf,
        /// JSON report written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Output state CSV (`track_id,t,value`, states 1..N).
        #[arg(long)]
        out: PathBuf,
        /// True states; prints the decoding accuracy.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// One-step-ahead pseudo-residuals and their normality summary.
    Residuals {
        input: PathBuf,
        /// JSON report written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Output residual CSV (`track_id,t,variable,value`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Replicated simulation study over simulated × fitted degrees 0 to 3.
    Study {
        #[arg(long, value_enum, default_value_t = Scenario::Table1)]
        scenario: Scenario,
        #[arg(long, default_value_t = 25)]
        replicates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Series length of the accuracy experiment.
        #[arg(long = "T", default_value_t = 2000)]
        t_len: usize,
        /// Random starts per fit besides the truth-projected one.
        #[arg(long, default_value_t = 2)]
        starts: usize,
        /// Single-start runs per replicate in the stability experiment.
        #[arg(long, default_value_t = 5)]
        stability_runs: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CriterionArg {
    Aic,
    Bic,
    Accuracy,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Aic => Criterion::Aic,
            CriterionArg::Bic => Criterion::Bic,
            CriterionArg::Accuracy => Criterion::Accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scenario {
    /// Two states, gamma(20, 5)/(40, 7) steps, von Mises κ = 2/12 turns.
    Table1,
}

/// Summary of one grid point.
#[derive(Debug, Serialize, Deserialize)]
struct PathPoint {
    lambda: f64,
    loglik: Option<f64>,
    penalized_objective: Option<f64>,
    aic: Option<f64>,
    bic: Option<f64>,
    edf: Option<usize>,
    error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LassoReport {
    criterion: Criterion,
    points: Vec<PathPoint>,
    /// Penalised fit chosen by the criterion.
    selected: FitResult,
    /// Degrees kept after rounding the selected coefficients.
    selected_degrees: ModelSpec,
}

/// What `fit` writes. `fit` is the model to use downstream: the single fit
/// for `--lambda`, the unpenalised refit for `--path`.
#[derive(Debug, Serialize, Deserialize)]
struct FitReport {
    fit: FitResult,
    lasso: Option<LassoReport>,
}

fn read_spec(arg: &str) -> Result<ModelSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{arg}: {e}"))))?
    };
    let spec: ModelSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

fn read_report(path: &Path) -> Result<FitReport> {
    io::read_json(path)
}

fn pooled(path: &Path) -> Result<PooledData> {
    PooledData::new(io::read_series(path)?)
}

fn prep(input: &Path, factor: usize, zero_floor: f64, out: &Path) -> Result<()> {
    let tracks = io::read_tracks(input)?;
    let series = tracks
        .iter()
        .map(|t| steps_and_turns(&downsample(t, factor)?, zero_floor))
        .collect::<Result<Vec<_>>>()?;
    io::write_series(out, &series)?;
    let total: usize = series.iter().map(|s| s.len()).sum();
    println!("{} tracks, {total} step/turn pairs", series.len());
    Ok(())
}

fn simulate_cmd(degree: usize, t_len: usize, seed: u64, out: &[PathBuf]) -> Result<()> {
    let mut sc = paper_scenario(degree)?;
    sc.t_len = t_len;
    sc.seed = seed;
    let (series, truth) = simulate(&sc)?;
    io::write_series(&out[0], &[series])?;
    io::write_states(&out[1], &[truth])?;
    Ok(())
}

fn read_truth(path: Option<&PathBuf>, data: &PooledData) -> Result<Option<Vec<arhmm::StateSequence>>> {
    let Some(path) = path else { return Ok(None) };
    let states = io::read_states(path)?;
    let ordered = data
        .series
        .iter()
        .map(|s| {
            states
                .iter()
                .find(|z| z.track_id == s.track_id)
                .cloned()
                .ok_or_else(|| Error::Structure(format!("no true states for track '{}'", s.track_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(ordered))
}

fn print_fit(label: &str, f: &FitResult) {
    println!(
        "{label}: lambda {} loglik {:.4} edf {} AIC {:.4} BIC {:.4} starts agreeing {}/{}",
        f.lambda,
        f.loglik,
        f.edf,
        f.aic,
        f.bic,
        f.n_starts_agreeing,
        f.starts.len()
    );
    println!("  p_step {:?} p_turn {:?}", f.spec.p_step, f.spec.p_turn);
    println!("  mu_step {:?}", f.params.mu_step);
    println!("  sd_step {:?}", f.sd_step);
    println!("  mu_turn {:?} kappa_turn {:?}", f.params.mu_turn, f.params.kappa_turn);
    println!("  phi_step {:?}", f.params.phi_step);
    println!("  phi_turn {:?}", f.params.phi_turn);
}

#[allow(clippy::too_many_arguments)]
fn fit_cmd(
    input: &Path,
    spec: &str,
    lambda: Option<f64>,
    criterion: Criterion,
    truth: Option<&PathBuf>,
    starts: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let spec = read_spec(spec)?;
    let data = pooled(input)?;
    let truth = read_truth(truth, &data)?;
    let opts = FitOptions {
        n_starts: starts,
        seed,
        ..FitOptions::default()
    };
    let report = match lambda {
        Some(l) => FitReport {
            fit: fit(&data, &spec, &PenaltyConfig::with_lambda(l)?, &opts)?,
            lasso: None,
        },
        None => {
            let path = lambda_path(&data, &spec, &arhmm::fit::default_lambda_grid(), &opts)?;
            let t = truth.as_deref().map(|states| Truth { data: &data, states });
            let selected = select_lambda(&path, criterion, t)?.clone();
            let refit = refit_unpenalized(&data, &selected, &opts)?;
            let points = path
                .grid
                .iter()
                .zip(path.fits.iter().zip(&path.errors))
                .map(|(&lambda, (f, e))| PathPoint {
                    lambda,
                    loglik: f.as_ref().map(|f| f.loglik),
                    penalized_objective: f.as_ref().map(|f| f.penalized_objective),
                    aic: f.as_ref().map(|f| f.aic),
                    bic: f.as_ref().map(|f| f.bic),
                    edf: f.as_ref().map(|f| f.edf),
                    error: e.clone(),
                })
                .collect();
            FitReport {
                lasso: Some(LassoReport {
                    criterion,
                    points,
                    selected_degrees: selected_degrees(&selected.params),
                    selected,
                }),
                fit: refit,
            }
        }
    };
    if let Some(l) = &report.lasso {
        print_fit("selected", &l.selected);
        print_fit("refit", &report.fit);
    } else {
        print_fit("fit", &report.fit);
    }
    io::write_json(out, &report)
}

fn decode_cmd(input: &Path, fit_path: &Path, out: &Path, truth: Option<&PathBuf>) -> Result<()> {
    let data = pooled(input)?;
    let report = read_report(fit_path)?;
    let f = &report.fit;
    let seqs = data
        .series
        .iter()
        .map(|s| viterbi(s, &f.params, &f.spec))
        .collect::<Result<Vec<_>>>()?;
    io::write_states(out, &seqs)?;
    if let Some(truth) = read_truth(truth, &data)? {
        let (mut hits, mut total) = (0.0, 0usize);
        for (d, t) in seqs.iter().zip(&truth) {
            let a = decoding_accuracy(d, t)?;
            println!("{}: accuracy {a:.4}", d.track_id);
            hits += a * d.len() as f64;
            total += d.len();
        }
        println!("overall accuracy {:.4}", hits / total as f64);
    }
    Ok(())
}

fn residuals_cmd(input: &Path, fit_path: &Path, out: &Path) -> Result<()> {
    let data = pooled(input)?;
    let report = read_report(fit_path)?;
    let f = &report.fit;
    let res = data
        .series
        .iter()
        .map(|s| pseudo_residuals(s, &f.params, &f.spec))
        .collect::<Result<Vec<_>>>()?;
    io::write_residuals(out, &res)?;
    // Tracks are joined with an undefined entry so no lag pair spans two tracks.
    for (name, pick) in [
        ("step", (|r: &arhmm::ResidualSeries| &r.r_step) as fn(&arhmm::ResidualSeries) -> &Vec<Option<f64>>),
        ("turn", |r: &arhmm::ResidualSeries| &r.r_turn),
    ] {
        let mut all: Vec<Option<f64>> = Vec::new();
        for r in &res {
            all.extend(pick(r).iter().copied());
            all.push(None);
        }
        let s = summarize_residuals(&all)?;
        println!(
            "{name}: n {} mean {:.4} sd {:.4} skewness {:.4} excess_kurtosis {:.4} lag1_autocorr {:.4} pit_max_dev {:.4}",
            s.n, s.mean, s.sd, s.skewness, s.excess_kurtosis, s.lag1_autocorr, s.pit_max_dev
        );
    }
    let clamped: usize = res.iter().map(|r| r.clamped).sum();
    println!("clamped CDF values: {clamped}");
    Ok(())
}

fn study_cmd(cfg: &StudyConfig, out: &Path) -> Result<()> {
    run_study(cfg, out)?;
    let table = std::fs::read_to_string(out.join("accuracy_table.csv"))?;
    println!("mean decoding accuracy (rows: simulated degree, columns: fitted degree)");
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prep {
            input,
            downsample,
            zero_floor,
            out,
        } => prep(&input, downsample, zero_floor, &out),
        Command::Simulate { degree, t_len, seed, out } => simulate_cmd(degree, t_len, seed, &out),
        Command::Fit {
            input,
            spec,
            lambda,
            path: _,
            criterion,
            truth,
            starts,
            seed,
            out,
        } => fit_cmd(&input, &spec, lambda, criterion.into(), truth.as_ref(), starts, seed, &out),
        Command::Decode { input, fit, out, truth } => decode_cmd(&input, &fit, &out, truth.as_ref()),
        Command::Residuals { input, fit, out } => residuals_cmd(&input, &fit, &out),
        Command::Study {
            scenario: Scenario::Table1,
            replicates,
            seed,
            t_len,
            starts,
            stability_runs,
            out,
        } => {
            let cfg = StudyConfig {
                replicates,
                seed,
                t_len,
                n_starts: starts,
                stability_runs,
                ..StudyConfig::default()
            };
            study_cmd(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}

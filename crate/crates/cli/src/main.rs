//! `cdst` command-line tool: simulate, fit, predict, weights, bench.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdst::bench::run_bench;
use cdst::cv::{build_oof, make_folds};
use cdst::dataset::{split, CsvTable};
use cdst::em_stacker::{fit_cdst_from_oof, ModelDocument};
use cdst::metrics::{ape, mean, mse};
use cdst::synth::{generate, Family, ScenarioSpec};
use cdst::{BenchPlan, CdstError};
use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use config::RunConfig;

const DEFAULT_SEED: u64 = 20240401;

#[derive(Parser)]
#[command(name = "cdst", version, about = "Covariate-dependent stacking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (with hidden truth columns) as CSV.
    Simulate {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        scenario: u8,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit base models and the stacking weights; write a JSON model file.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `model_out` in the config.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Predict with a model file; prints MSE when the response is present.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the weight functions on a regular grid.
    Weights {
        #[arg(long)]
        model: PathBuf,
        /// One `lo:hi:count` per weight covariate, comma separated,
        /// e.g. `-1:1:41,-1:1:41`.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo benchmark plan.
    Bench {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to the number of CPUs.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the plan's replication count.
        #[arg(long)]
        replications: Option<usize>,
    },
}

/// Error plus the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn fit(e: CdstError) -> Self {
        let code = match e {
            CdstError::Io(_) => 1,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }

    fn other(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<CdstError> for Failure {
    fn from(e: CdstError) -> Self {
        let code = if e.is_numerical() { 3 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_atomic(path: &Path, contents: &[u8]) -> CmdResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let io = |e: std::io::Error| Failure::other(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(contents).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn read_table(path: &Path) -> Result<CsvTable, Failure> {
    CsvTable::read(path).map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

fn read_model(path: &Path) -> Result<ModelDocument, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::other(format!("{}: {e}", path.display())))?;
    ModelDocument::from_json(&text).map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

fn cmd_simulate(family: Family, scenario: u8, n: usize, seed: u64, out: &Path) -> CmdResult {
    let spec = ScenarioSpec::new(family, scenario, n, seed);
    spec.validate()
        .map_err(|e| Failure::config(e.to_string()))?;
    let sim = generate(&spec)?;
    let text = sim.dataset.to_csv_string(&sim.hidden_columns())?;
    write_atomic(out, text.as_bytes())?;
    println!("wrote {} rows to {}", n, out.display());
    Ok(())
}

fn cmd_fit(config: &Path, data: Option<PathBuf>, model_out: Option<PathBuf>) -> CmdResult {
    let cfg = RunConfig::load(config).map_err(Failure::config)?;
    let data_path = data
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Failure::config("no data path: pass --data or set `data`"))?;
    let model_out = model_out
        .or_else(|| cfg.model_out.clone())
        .ok_or_else(|| Failure::config("no output path: pass --model-out or set `model_out`"))?;

    let table = read_table(&data_path)?;
    let full = table.to_dataset(&cfg.columns).map_err(Failure::fit)?;
    let (train, test) = match &cfg.split {
        Some(s) => {
            let plan = split(full.n(), s.train_fraction, s.seed).map_err(Failure::fit)?;
            (
                full.subset(&plan.train).map_err(Failure::fit)?,
                Some(full.subset(&plan.test).map_err(Failure::fit)?),
            )
        }
        None => (full, None),
    };
    let k = cfg.folds.unwrap_or(train.n());
    let folds = make_folds(train.n(), k, cfg.fold_seed).map_err(Failure::fit)?;
    let oof = build_oof(&cfg.models, &train, &folds).map_err(Failure::fit)?;
    let model = fit_cdst_from_oof(&train, &cfg.models, &oof, cfg.basis.as_ref(), &cfg.em)
        .map_err(Failure::fit)?;

    if let Some(path) = &cfg.oof_out {
        write_atomic(path, oof.to_csv_string().as_bytes())?;
    }

    println!("converged: {}", model.converged);
    println!("iterations: {}", model.iterations);
    println!("sigma2: {}", model.params.sigma2);
    for (j, (spec, (mu, lambda))) in cfg
        .models
        .iter()
        .zip(model.params.mu.iter().zip(model.lambdas()))
        .enumerate()
    {
        println!(
            "model {} {}: mu = {mu}, lambda = {lambda}",
            j + 1,
            spec.label()
        );
    }
    if let Some(test) = test {
        let pred = model.predict(test.x(), test.xtilde())?;
        println!(
            "holdout mse: {}",
            mse(test.y().as_slice(), pred.as_slice())?
        );
    }
    let doc = ModelDocument::new(cfg.columns.clone(), model);
    write_atomic(&model_out, doc.to_json()?.as_bytes())?;
    println!("model written to {}", model_out.display());
    Ok(())
}

fn cmd_predict(model: &Path, data: &Path, out: &Path) -> CmdResult {
    let doc = read_model(model)?;
    let table = read_table(data)?;
    let roles = &doc.columns;
    let x = table.matrix(&roles.features)?;
    let xt = table.matrix(&roles.weights)?;
    let yhat = doc.model.predict(&x, &xt)?;

    let mut text = String::from("row,yhat\n");
    for (i, v) in yhat.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, v));
    }
    write_atomic(out, text.as_bytes())?;

    if table.has_column(&roles.response) {
        let y = table.column(&roles.response)?;
        println!("mse: {}", mse(y, yhat.as_slice())?);
        if y.iter().all(|&v| v > 0.0) {
            println!("mean ape: {}", mean(&ape(y, yhat.as_slice())?));
        }
    }
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<Vec<f64>>, Failure> {
    spec.split(',')
        .map(|axis| {
            let parts: Vec<&str> = axis.trim().split(':').collect();
            let bad = || Failure::config(format!("bad grid axis '{axis}', expected lo:hi:count"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let lo: f64 = parts[0].parse().map_err(|_| bad())?;
            let hi: f64 = parts[1].parse().map_err(|_| bad())?;
            let count: usize = parts[2].parse().map_err(|_| bad())?;
            if count == 0 || !lo.is_finite() || !hi.is_finite() {
                return Err(bad());
            }
            Ok((0..count)
                .map(|t| {
                    if count == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * t as f64 / (count - 1) as f64
                    }
                })
                .collect())
        })
        .collect()
}

fn cmd_weights(model: &Path, grid: &str, out: &Path) -> CmdResult {
    let doc = read_model(model)?;
    let axes = parse_grid(grid)?;
    let dim = doc.model.basis.dim();
    if axes.len() != dim {
        return Err(Failure::from(CdstError::DimensionMismatch {
            context: "grid dimensions vs weight covariates",
            expected: dim,
            found: axes.len(),
        }));
    }
    // first axis varies slowest
    let total: usize = axes.iter().map(Vec::len).product();
    let points = grid_points(&axes, total);
    let xt = DMatrix::from_fn(total, dim, |i, d| points[i][d]);
    let w = doc.model.weights_at(&xt)?;

    let mut header: Vec<String> = doc.columns.weights.clone();
    header.extend((1..=doc.model.n_models()).map(|j| format!("w{j}")));
    let mut text = header.join(",");
    text.push('\n');
    for (i, p) in points.iter().enumerate() {
        let row: Vec<String> = p
            .iter()
            .copied()
            .chain(w.row(i).iter().copied())
            .map(|v| v.to_string())
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_atomic(out, text.as_bytes())
}

fn grid_points(axes: &[Vec<f64>], total: usize) -> Vec<Vec<f64>> {
    (0..total)
        .map(|mut idx| {
            let mut p = vec![0.0; axes.len()];
            for (d, axis) in axes.iter().enumerate().rev() {
                p[d] = axis[idx % axis.len()];
                idx /= axis.len();
            }
            p
        })
        .collect()
}

fn cmd_bench(
    plan: &Path,
    out: &Path,
    workers: Option<usize>,
    replications: Option<usize>,
) -> CmdResult {
    let text = std::fs::read_to_string(plan)
        .map_err(|e| Failure::config(format!("{}: {e}", plan.display())))?;
    let mut plan: BenchPlan = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("{}: {e}", plan.display())))?;
    if let Some(r) = replications {
        plan.replications = r;
    }
    plan.validate()
        .map_err(|e| Failure::config(e.to_string()))?;
    if workers == Some(0) {
        return Err(Failure::config("--workers must be >= 1"));
    }
    let report = run_bench(&plan, workers)?;
    write_atomic(out, report.results_csv().as_bytes())?;
    print!("{}", report.summary_table());
    for f in report.failures() {
        if let Err(msg) = &f.outcome {
            eprintln!("replication {} {}: {msg}", f.replication, f.method);
        }
    }
    if report.summaries.iter().all(|s| s.count == 0) {
        return Err(Failure::fit(CdstError::InvalidArgument(
            "every replication failed".into(),
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            family,
            scenario,
            n,
            seed,
            out,
        } => cmd_simulate(family, scenario, n, seed, &out),
        Command::Fit {
            config,
            data,
            model_out,
        } => cmd_fit(&config, data, model_out),
        Command::Predict { model, data, out } => cmd_predict(&model, &data, &out),
        Command::Weights { model, grid, out } => cmd_weights(&model, &grid, &out),
        Command::Bench {
            plan,
            out,
            workers,
            replications,
        } => cmd_bench(&plan, &out, workers, replications),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

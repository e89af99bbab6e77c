use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use mitram_core::fit::{self, FitOptions, FitResult};
use mitram_core::integrate::CubatureKind;
use mitram_core::io::{fmt17, parse_dataset, Dataset, SpecFile};
use mitram_core::simtest::{simulate, SimulationDesign};
use mitram_core::{Error, ModelSpec, ParameterVector};

mod query;

const EXIT_NONCONVERGENCE: u8 = 2;
const EXIT_INPUT: u8 = 3;

#[derive(Parser)]
#[command(name = "mitram", version, about = "Marginally interpretable transformation models for clustered data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model by maximum likelihood.
    Fit(FitArgs),
    /// Draw a dataset from the `[design]` section of a specification file.
    Simulate {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the design's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate marginal distribution functions from fitted parameters.
    Marginal {
        #[arg(long)]
        spec: PathBuf,
        /// Parameter table written by `fit`.
        #[arg(long)]
        params: PathBuf,
        /// Query CSV: the model's covariate columns plus `y`.
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Data the model was fitted to; needed when a Bernstein support is
        /// not given in the spec.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct FitArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// QMC node count (rounded up to a power of two) or sparse-grid level.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    cubature: Option<CubatureKind>,
    /// Seed of the random shift applied to QMC nodes.
    #[arg(long)]
    seed: Option<u64>,
    /// Hold the diagonal of Λ at this value and its off-diagonal at zero.
    #[arg(long, allow_hyphen_values = true)]
    fix_gamma: Option<f64>,
    /// Query CSV for marginal distribution functions at the estimates.
    #[arg(long)]
    marginal: Option<PathBuf>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

/// Errors caused by the inputs rather than by the computation.
fn is_input_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(Error::Parse { .. } | Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Dimension(_))
        ) || c.downcast_ref::<std::io::Error>().is_some()
            || c.downcast_ref::<InputError>().is_some()
    })
}

#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Fit(args) => run_fit(&args),
        Command::Simulate { design, out, seed } => run_simulate(&design, &out, seed).map(|_| true),
        Command::Marginal {
            spec,
            params,
            query,
            out,
            data,
        } => run_marginal(&spec, &params, &query, &out, data.as_deref()).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NONCONVERGENCE),
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_input_error(&e) {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn load_spec(path: &Path) -> anyhow::Result<SpecFile> {
    SpecFile::load(path).with_context(|| format!("reading {}", path.display()))
}

fn load_data(file: &SpecFile, path: &Path) -> anyhow::Result<Dataset> {
    let data = parse_dataset(path, &file.roles).with_context(|| format!("reading {}", path.display()))?;
    data.check_rank().with_context(|| format!("checking {}", path.display()))?;
    Ok(data)
}

/// Returns whether the fit converged.
fn run_fit(args: &FitArgs) -> anyhow::Result<bool> {
    let file = load_spec(&args.spec)?;
    let data = load_data(&file, &args.data)?;
    let spec = file.model_for(&data)?;
    let mut rule = fit::default_rule(
        &spec,
        args.cubature.or(file.cubature_kind),
        args.nodes.or(file.cubature_nodes),
    );
    if let Some(seed) = args.seed {
        rule.shift_seed = seed;
    }
    let mut options = FitOptions::default();
    if let Some(v) = args.max_outer.or(file.optimizer.max_outer) {
        options.max_outer = v;
    }
    if let Some(v) = file.optimizer.max_inner {
        options.max_inner = v;
    }
    if let Some(v) = args.tol.or(file.optimizer.tol) {
        if !(v > 0.0) {
            return Err(InputError(format!("tolerance must be positive, got {v}")).into());
        }
        options.tol = v;
    }
    if let Some(v) = args.fix_gamma {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(InputError(format!("--fix-gamma needs a finite value ≥ 0, got {v}")).into());
        }
        options = options.fix_gamma(&spec, v);
    }
    let queries = match &args.marginal {
        Some(p) => Some(query::read(p, &file, &data.strata_levels)?),
        None => None,
    };

    let result = fit::fit(&spec, &data.clusters, &rule, &options)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let names = file.param_names(&spec, Some(&data));
    write_params(&args.out.join("params.csv"), &names, &result)?;
    write_metadata(&args.out.join("fit.txt"), &spec, &result)?;
    if let Some(q) = queries {
        query::write_marginal(&args.out.join("marginal.csv"), &spec, &result.params, &q, &file)?;
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if !result.converged {
        eprintln!(
            "fit did not converge after {} outer iterations (gradient {}, violation {}); see {}",
            result.outer_iterations,
            fmt17(result.gradient_norm),
            fmt17(result.max_violation),
            args.out.join("fit.txt").display()
        );
    }
    Ok(result.converged)
}

fn write_params(path: &Path, names: &[String], result: &FitResult) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "estimate", "se", "active"])?;
    let se = result.standard_errors();
    for (k, est) in result.estimates().iter().enumerate() {
        w.write_record([
            names[k].clone(),
            fmt17(*est),
            fmt17(se[k]),
            result.active[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_metadata(path: &Path, spec: &ModelSpec, r: &FitResult) -> anyhow::Result<()> {
    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    line("loglik", fmt17(r.loglik));
    line("loglik_optimization", fmt17(r.loglik_optimization));
    line("converged", r.converged.to_string());
    line("outer_iterations", r.outer_iterations.to_string());
    line("inner_iterations", r.inner_iterations.to_string());
    line("gradient_norm", fmt17(r.gradient_norm));
    line("max_violation", fmt17(r.max_violation));
    line("link", spec.link.to_string());
    line("marginalization", spec.marginalization.to_string());
    line("clusters", r.n_clusters.to_string());
    line("observations", r.n_observations.to_string());
    line("parameters", r.params.len().to_string());
    line("cubature", r.rule.kind.to_string());
    line("nodes", r.rule.size.to_string());
    line("shift_seed", r.rule.shift_seed.to_string());
    if let Some(rr) = &r.refined_rule {
        line("refined_nodes", rr.size.to_string());
    }
    line("clamped_clusters", r.clamped.to_string());
    for w in &r.warnings {
        line("warning", w.replace('\n', " "));
    }
    fs::write(path, s)?;
    Ok(())
}

fn run_simulate(design: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let file = load_spec(design)?;
    let mut d = SimulationDesign::from_spec_file(&file).with_context(|| format!("reading {}", design.display()))?;
    if let Some(s) = seed {
        d.seed = s;
    }
    let sim = simulate(&d)?;
    for w in &sim.warnings {
        eprintln!("warning: {w}");
    }
    sim.dataset
        .write_csv(out)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn read_params(path: &Path, spec: &ModelSpec) -> anyhow::Result<ParameterVector> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "estimate")
        .ok_or_else(|| InputError(format!("{}: no 'estimate' column", path.display())))?;
    let mut flat = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let v = rec.get(col).unwrap_or("");
        flat.push(
            v.trim()
                .parse::<f64>()
                .map_err(|_| InputError(format!("{} line {line}: bad estimate '{v}'", path.display())))?,
        );
    }
    ParameterVector::from_slice(spec, &flat)
        .map_err(|e| anyhow!(InputError(format!("{}: {e}", path.display()))))
}

fn run_marginal(spec_path: &Path, params: &Path, query_path: &Path, out: &Path, data: Option<&Path>) -> anyhow::Result<()> {
    let file = load_spec(spec_path)?;
    let (spec, levels) = match data {
        Some(p) => {
            let d = load_data(&file, p)?;
            (file.model_for(&d)?, d.strata_levels)
        }
        None if file.roles.strata.is_some() => {
            return Err(InputError("stratified models need --data to recover the stratum levels".into()).into())
        }
        None => (file.model_spec(None, 1)?, Vec::new()),
    };
    let params = read_params(params, &spec)?;
    let q = query::read(query_path, &file, &levels)?;
    query::write_marginal(out, &spec, &params, &q, &file)
}

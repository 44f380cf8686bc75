//! Command-line surface for candidate selection over scored pools:
//! single-shot selection, beta sweeps against the best-of-n baseline,
//! numerical certification of the two robustness identities, reward
//! correlation reports, and synthetic pool generation.
//!
//! Exit codes: 0 success (and verification passed), 1 verification failure,
//! 2 usage error, 3 data error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rbon::adversarial::{
    verify_theorem_kl, verify_theorem_wd, FEASIBILITY_TOL, KL_GAP_TOL, WD_GAP_TOL,
};
use rbon::cost::cost_matrix;
use rbon::eval::{
    beta_grid, beta_sweep, logprob_diagnostics, pool_seed, reward_correlation_matrix,
    synth_obtuse_pools, synth_pools, RefMode, SweepReport,
};
use rbon::policies::{
    sample_policy, select_bon, select_mbr, select_rbon_kl, select_rbon_l, select_rbon_wd,
    srbon_kl_policy, srbon_wd_policy, Method,
};
use rbon::pool::{load_pools, write_pools, CandidatePool, Dataset, Policy};
use rbon::transport::{duality_gap, wd_dual};

#[derive(Parser)]
#[command(name = "rbon", version, about = "Regularized best-of-n selection over candidate pools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick one candidate per pool and emit a selection table.
    Select(SelectArgs),
    /// Sweep beta over train and eval splits and report win-rate curves.
    Sweep(SweepArgs),
    /// Certify the robustness identities on real or synthetic pools.
    Verify(VerifyArgs),
    /// Report reward-key rank correlations and log-probability diagnostics.
    Corr(CorrArgs),
    /// Generate a synthetic pool file.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RefKind {
    Empirical,
    Logprob,
}

#[derive(Args)]
struct OutputArgs {
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct ReferenceArgs {
    /// Reference policy for KL- and transport-penalized methods.
    #[arg(long = "ref", value_enum, default_value_t = RefKind::Empirical)]
    reference: RefKind,
    /// Softmax temperature for the logprob reference.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

impl ReferenceArgs {
    fn mode(&self) -> Result<RefMode, CliError> {
        match self.reference {
            RefKind::Empirical => Ok(RefMode::Empirical),
            RefKind::Logprob => {
                if !self.temperature.is_finite() || self.temperature <= 0.0 {
                    return Err(CliError::Usage(format!(
                        "--temperature must be finite and > 0, got {}",
                        self.temperature
                    )));
                }
                Ok(RefMode::Logprob {
                    temperature: self.temperature,
                })
            }
        }
    }
}

#[derive(Args)]
struct SelectArgs {
    /// Pool file (JSON lines).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Reward key the method optimizes.
    #[arg(long, default_value = "proxy")]
    proxy_key: String,
    /// Regularization strength; required for penalized methods.
    #[arg(long)]
    beta: Option<f64>,
    #[command(flatten)]
    reference: ReferenceArgs,
    /// Sampling seed for stochastic methods.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value = "proxy")]
    proxy_key: String,
    /// Held-out reward key that judges selections.
    #[arg(long, default_value = "gold")]
    gold_key: String,
    /// Sweep the standard 18-point grid.
    #[arg(long)]
    grid: bool,
    /// Sweep a single beta instead of the grid.
    #[arg(long)]
    beta: Option<f64>,
    #[command(flatten)]
    reference: ReferenceArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Pool file to certify; mutually exclusive with --synthetic.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Certify on internally generated pools with triangle-safe costs.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value = "gold")]
    gold_key: String,
    /// Randomized draws per pool.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Gap tolerance overriding both identity defaults.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: halve the dual value after solving.
    #[arg(long, hide = true)]
    corrupt_dual: bool,
}

#[derive(Args)]
struct CorrArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "gold")]
    gold_key: String,
    #[arg(long, default_value = "proxy")]
    proxy_key: String,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pools: usize,
    #[arg(long, default_value_t = 8)]
    candidates: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Gaussian noise scale separating proxy from gold.
    #[arg(long, default_value_t = 0.3)]
    proxy_noise: f64,
    /// Log-probability penalty per token of length.
    #[arg(long, default_value_t = 0.02)]
    length_bias: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl From<rbon::Error> for CliError {
    fn from(err: rbon::Error) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Data(err.to_string())
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|err: rbon::Error| err.to_string())
}

/// 17 significant digits; reparses to the identical 64-bit float.
fn fmt_float(value: f64) -> String {
    format!("{value:.16e}")
}

fn write_output(out: &Option<PathBuf>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|err| CliError::Data(format!("{}: {err}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn data_error(path: &Path, err: rbon::Error) -> CliError {
    // The io variant already names the path; line-level errors do not.
    match err {
        rbon::Error::Io { .. } => CliError::Data(err.to_string()),
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}

fn load_dataset(path: &Path, keys: &[&str], label: &str) -> Result<Dataset, CliError> {
    let dataset = load_pools(path, keys, label).map_err(|err| data_error(path, err))?;
    if dataset.warnings() > 0 {
        eprintln!(
            "warning: {} unknown fields ignored in {}",
            dataset.warnings(),
            path.display()
        );
    }
    Ok(dataset)
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            2
        }
        Err(CliError::Data(message)) => {
            eprintln!("error: {message}");
            3
        }
    };
    std::process::exit(code);
}

fn run(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Select(args) => cmd_select(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Corr(args) => cmd_corr(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

#[derive(Serialize)]
struct SelectionRow {
    prompt_id: String,
    index: usize,
    score: f64,
    method: Method,
    beta: Option<f64>,
}

fn check_beta_flag(method: Method, beta: Option<f64>) -> Result<f64, CliError> {
    match (method.is_regularized(), beta) {
        (true, Some(value)) if value.is_finite() && value >= 0.0 => Ok(value),
        (true, Some(value)) => Err(CliError::Usage(format!(
            "--beta must be finite and >= 0, got {value}"
        ))),
        (true, None) => Err(CliError::Usage(format!("method {method} requires --beta"))),
        (false, Some(_)) => Err(CliError::Usage(format!(
            "method {method} does not take --beta"
        ))),
        (false, None) => Ok(0.0),
    }
}

fn select_row(
    pool: &CandidatePool,
    method: Method,
    proxy_key: &str,
    beta: f64,
    reference: RefMode,
    seed: u64,
) -> Result<SelectionRow, CliError> {
    let (index, score, beta_out) = match method {
        Method::Bon => {
            let sel = select_bon(pool, proxy_key)?;
            (sel.index, sel.score, None)
        }
        Method::Mbr => {
            let sel = select_mbr(pool, &cost_matrix(pool))?;
            (sel.index, sel.score, None)
        }
        Method::RbonKl => {
            let sel = select_rbon_kl(pool, &reference.policy(pool)?, proxy_key, beta)?;
            (sel.index, sel.score, sel.beta)
        }
        Method::RbonWd => {
            let sel = select_rbon_wd(pool, &cost_matrix(pool), proxy_key, beta)?;
            (sel.index, sel.score, sel.beta)
        }
        Method::RbonL => {
            let sel = select_rbon_l(pool, proxy_key, beta)?;
            (sel.index, sel.score, sel.beta)
        }
        Method::SrbonKl => {
            let sp = srbon_kl_policy(pool, &reference.policy(pool)?, proxy_key, beta)?;
            let index = sp.sample(pool_seed(seed, pool.prompt_id()));
            (index, sp.objective_value, Some(beta))
        }
        Method::SrbonWd => {
            let sp = srbon_wd_policy(
                pool,
                &reference.policy(pool)?,
                &cost_matrix(pool),
                proxy_key,
                beta,
            )?;
            let index = sp.sample(pool_seed(seed, pool.prompt_id()));
            (index, sp.objective_value, Some(beta))
        }
        Method::Random => {
            let uniform = Policy::uniform(pool.n())?;
            let index = sample_policy(&uniform, pool_seed(seed, pool.prompt_id()));
            (index, 0.0, None)
        }
    };
    Ok(SelectionRow {
        prompt_id: pool.prompt_id().to_string(),
        index,
        score,
        method,
        beta: beta_out,
    })
}

fn cmd_select(args: SelectArgs) -> Result<i32, CliError> {
    let beta = check_beta_flag(args.method, args.beta)?;
    let reference = args.reference.mode()?;
    let keys: Vec<&str> = match args.method {
        Method::Mbr | Method::Random => vec![],
        _ => vec![args.proxy_key.as_str()],
    };
    let dataset = load_dataset(&args.input, &keys, "input")?;
    let rows: Vec<SelectionRow> = dataset
        .pools()
        .iter()
        .map(|pool| select_row(pool, args.method, &args.proxy_key, beta, reference, args.seed))
        .collect::<Result<_, _>>()?;

    let content = match args.output.format {
        Format::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record(["prompt_id", "index", "score", "method", "beta"])?;
            for row in &rows {
                writer.write_record([
                    row.prompt_id.as_str(),
                    &row.index.to_string(),
                    &fmt_float(row.score),
                    row.method.as_str(),
                    &row.beta.map(fmt_float).unwrap_or_default(),
                ])?;
            }
            finish_csv(writer)?
        }
        Format::Json => to_json(&rows)?,
    };
    write_output(&args.output.out, &content)?;
    Ok(0)
}

#[derive(Serialize, Deserialize)]
struct SweepOutput {
    train: SweepReport,
    eval: SweepReport,
}

fn cmd_sweep(args: SweepArgs) -> Result<i32, CliError> {
    if !args.method.is_regularized() {
        return Err(CliError::Usage(format!(
            "method {} does not take a beta sweep",
            args.method
        )));
    }
    let grid = match (args.grid, args.beta) {
        (true, None) => beta_grid(),
        (false, Some(beta)) if beta.is_finite() && beta >= 0.0 => vec![beta],
        (false, Some(beta)) => {
            return Err(CliError::Usage(format!(
                "--beta must be finite and >= 0, got {beta}"
            )))
        }
        (true, Some(_)) => {
            return Err(CliError::Usage(
                "--grid and --beta are mutually exclusive".to_string(),
            ))
        }
        (false, None) => {
            return Err(CliError::Usage(
                "sweep needs exactly one of --grid or --beta".to_string(),
            ))
        }
    };
    let reference = args.reference.mode()?;
    let keys = [args.proxy_key.as_str(), args.gold_key.as_str()];
    let train = load_dataset(&args.train, &keys, "train")?;
    let eval = load_dataset(&args.eval, &keys, "eval")?;

    let train_report = beta_sweep(
        &train,
        args.method,
        &args.proxy_key,
        &args.gold_key,
        &grid,
        reference,
        args.seed,
    )?;
    let mut eval_report = beta_sweep(
        &eval,
        args.method,
        &args.proxy_key,
        &args.gold_key,
        &grid,
        reference,
        args.seed,
    )?;
    // The eval split is judged at the train-selected setting.
    eval_report.beta_star = train_report.beta_star;

    let output = SweepOutput {
        train: train_report,
        eval: eval_report,
    };
    let content = match args.output.format {
        Format::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record([
                "split",
                "method",
                "proxy_key",
                "gold_key",
                "beta",
                "win_rate_percent",
                "beta_star",
            ])?;
            for report in [&output.train, &output.eval] {
                for row in &report.rows {
                    writer.write_record([
                        report.split_label.as_str(),
                        report.method.as_str(),
                        report.proxy_key.as_str(),
                        report.gold_key.as_str(),
                        &fmt_float(row.beta),
                        &fmt_float(row.win_rate_percent),
                        &fmt_float(report.beta_star),
                    ])?;
                }
            }
            finish_csv(writer)?
        }
        Format::Json => to_json(&output)?,
    };
    write_output(&args.output.out, &content)?;
    Ok(0)
}

fn random_positive_simplex(rng: &mut ChaCha8Rng, n: usize) -> Policy {
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    Policy::new(w.into_iter().map(|x| x / total).collect()).expect("positive weights normalize")
}

fn cmd_verify(args: VerifyArgs) -> Result<i32, CliError> {
    if args.input.is_some() == args.synthetic {
        return Err(CliError::Usage(
            "verify needs exactly one of --input or --synthetic".to_string(),
        ));
    }
    if args.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".to_string()));
    }
    if let Some(tol) = args.tol {
        if !tol.is_finite() || tol <= 0.0 {
            return Err(CliError::Usage(format!(
                "--tol must be finite and > 0, got {tol}"
            )));
        }
    }
    let dataset = match &args.input {
        Some(path) => load_dataset(path, &[args.gold_key.as_str()], "input")?,
        None => synth_obtuse_pools(25, 6, args.seed)?,
    };
    let tol_kl = args.tol.unwrap_or(KL_GAP_TOL);
    let tol_wd = args.tol.unwrap_or(WD_GAP_TOL);
    let grid = beta_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let mut max_kl_gap = 0.0f64;
    let mut max_kl_residual = 0.0f64;
    let mut max_wd_gap = 0.0f64;
    let mut max_lipschitz = 0.0f64;
    for pool in dataset.pools() {
        let c = cost_matrix(pool);
        let n = pool.n();
        for _ in 0..args.trials {
            let pi = random_positive_simplex(&mut rng, n);
            let reference = random_positive_simplex(&mut rng, n);
            let beta_kl = grid[rng.gen_range(0..grid.len())];
            let kl = verify_theorem_kl(&pi, pool, &reference, &args.gold_key, beta_kl, tol_kl)?;
            max_kl_gap = max_kl_gap.max(kl.gap);
            max_kl_residual = max_kl_residual.max(kl.feasibility_residual);

            let beta_wd = 0.1 + 3.9 * rng.gen::<f64>();
            if args.corrupt_dual {
                let (dual, _) = wd_dual(&pi, &reference, &c)?;
                let regularized = rbon::policies::objective_wd(
                    &pi,
                    pool,
                    &reference,
                    &c,
                    &args.gold_key,
                    beta_wd,
                )?;
                let rewards = pool.rewards(&args.gold_key)?;
                let adversarial = pi.expectation(&rewards)? - beta_wd * (0.5 * dual);
                max_wd_gap = max_wd_gap.max((regularized - adversarial).abs());
            } else {
                let wd =
                    verify_theorem_wd(&pi, pool, &reference, &c, &args.gold_key, beta_wd, tol_wd)?;
                max_wd_gap = max_wd_gap.max(wd.gap);
                max_lipschitz = max_lipschitz.max(wd.feasibility_residual);
            }

            max_wd_gap = max_wd_gap.max(duality_gap(&pi, &reference, &c)?);
        }
    }

    let verified = max_kl_gap <= tol_kl
        && max_kl_residual <= FEASIBILITY_TOL
        && max_wd_gap <= tol_wd
        && max_lipschitz <= FEASIBILITY_TOL;
    println!("pools: {}", dataset.len());
    println!("trials per pool: {}", args.trials);
    println!("max KL gap: {max_kl_gap:e}");
    println!("max KL boundary residual: {max_kl_residual:e}");
    println!("max WD gap: {max_wd_gap:e}");
    println!("max Lipschitz residual: {max_lipschitz:e}");
    println!("verified: {}", if verified { "yes" } else { "no" });
    Ok(if verified { 0 } else { 1 })
}

#[derive(Serialize)]
struct CorrOutput {
    keys: Vec<String>,
    matrix: Vec<Vec<f64>>,
    rho_reward_logprob: Option<f64>,
    rho_length_logprob: Option<f64>,
}

fn cmd_corr(args: CorrArgs) -> Result<i32, CliError> {
    let keys = [args.gold_key.as_str(), args.proxy_key.as_str()];
    let dataset = load_dataset(&args.input, &keys, "input")?;
    let matrix = reward_correlation_matrix(&dataset, &keys)?;
    // Log-probability diagnostics are best-effort: pools without logprobs
    // still get the correlation matrix.
    let diagnostics = match logprob_diagnostics(&dataset, &args.gold_key, false) {
        Ok(pair) => Some(pair),
        Err(err) => {
            eprintln!("note: skipping logprob diagnostics: {err}");
            None
        }
    };

    let output = CorrOutput {
        keys: matrix.keys().to_vec(),
        matrix: matrix.values().to_vec(),
        rho_reward_logprob: diagnostics.map(|(rho, _)| rho),
        rho_length_logprob: diagnostics.map(|(_, rho)| rho),
    };
    let content = match args.output.format {
        Format::Csv => {
            let mut writer = csv::WriterBuilder::new()
                .flexible(true)
                .from_writer(Vec::new());
            let mut header = vec!["key".to_string()];
            header.extend(output.keys.iter().cloned());
            writer.write_record(&header)?;
            for (key, row) in output.keys.iter().zip(&output.matrix) {
                let mut record = vec![key.clone()];
                record.extend(row.iter().map(|rho| fmt_float(*rho)));
                writer.write_record(&record)?;
            }
            if let (Some(reward), Some(length)) =
                (output.rho_reward_logprob, output.rho_length_logprob)
            {
                writer.write_record(["rho_reward_logprob", &fmt_float(reward)])?;
                writer.write_record(["rho_length_logprob", &fmt_float(length)])?;
            }
            finish_csv(writer)?
        }
        Format::Json => to_json(&output)?,
    };
    write_output(&args.output.out, &content)?;
    Ok(0)
}

fn cmd_synth(args: SynthArgs) -> Result<i32, CliError> {
    let dataset = synth_pools(
        args.pools,
        args.candidates,
        args.dim,
        args.proxy_noise,
        args.length_bias,
        args.seed,
    )
    .map_err(|err| CliError::Usage(err.to_string()))?;
    write_pools(&dataset, &args.out).map_err(|err| data_error(&args.out, err))?;
    Ok(0)
}

fn finish_csv(writer: csv::Writer<Vec<u8>>) -> Result<String, CliError> {
    let bytes = writer
        .into_inner()
        .map_err(|err| CliError::Data(err.to_string()))?;
    String::from_utf8(bytes).map_err(|err| CliError::Data(err.to_string()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut content = serde_json::to_string_pretty(value)?;
    content.push('\n');
    Ok(content)
}

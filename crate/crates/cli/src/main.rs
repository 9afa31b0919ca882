use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use cib::data_io::{
    gen_gmm, gen_gmm_test, load_checkpoint, load_splits, read_metrics, save_checkpoint,
    save_dataset, save_json, tradeoff_to_csv, write_bytes, write_metrics, write_tradeoff, Config,
    DecoderVariant, GmmSpec, NoiseModeKind,
};
use cib::discrete_oracle::{check_instance, random_instance, OracleInstance, MAX_LATENT_OUTCOMES};
use cib::estimators::{ClassNormalization, ClassWeighting, EstimatorOptions, FormulaMode};
use cib::model::{
    information_estimates, network_grad_check, sweep, tradeoff_point, train, Checkpoint,
    TradeoffPoint,
};

#[derive(Parser, Debug)]
#[command(
    name = "cib",
    version,
    about = "Class-conditional information bottleneck workbench"
)]
struct Cli {
    /// Print a single JSON document on stdout instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset or a random discrete oracle instance.
    GenData(GenDataArgs),
    /// Train one network from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network per beta_prime into per-point directories.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        beta_primes: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Mixture-bound estimates of I(X;T) and I(X;T|Y) for a checkpoint.
    Estimate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, value_enum, default_value_t = Mode::CitedSource)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Normalization::PerClass)]
        class_normalization: Normalization,
        #[arg(long, value_enum, default_value_t = Weighting::Frequency)]
        weighting: Weighting,
    },
    /// Central-difference check of the full loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact information quantities and identity checks for a discrete instance.
    Oracle {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Aggregate run directories into a trade-off CSV.
    Report {
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 4.0)]
    sep: f64,
    /// Also write a held-out split from the same mixture.
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Oracle instances: number of inputs.
    #[arg(long, default_value_t = 4)]
    nx: usize,
    /// Oracle instances: latent coordinate arities.
    #[arg(long, value_delimiter = ',', default_value = "2,2")]
    arities: Vec<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    Gmm,
    Oracle,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    CitedSource,
    AsPrinted,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Normalization {
    PerClass,
    AsPrinted,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Weighting {
    Frequency,
    Counts,
}

/// A command that ran but whose mathematical check failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

struct Output {
    json: Value,
    text: String,
    failure: Option<String>,
}

impl Output {
    fn ok(json: Value, text: String) -> Self {
        Self {
            json,
            text,
            failure: None,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 2;
    }
    match err.downcast_ref::<cib::Error>() {
        Some(cib::Error::NonFinite(_) | cib::Error::NonFiniteLoss { .. }) => 2,
        _ => 1,
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("no such file: {}", path.display());
    }
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn gen_data(a: &GenDataArgs) -> anyhow::Result<Output> {
    match a.kind {
        DataKind::Gmm => {
            let spec = GmmSpec {
                classes: a.classes,
                dim: a.dim,
                per_class: a.per_class,
                sep: a.sep,
                seed: a.seed,
            };
            let train = gen_gmm(&spec)?;
            save_dataset(&a.out, &train)?;
            let mut written = vec![a.out.display().to_string()];
            if let Some(test_out) = &a.test_out {
                let test = gen_gmm_test(&spec, a.test_per_class.unwrap_or(a.per_class))?;
                save_dataset(test_out, &test)?;
                written.push(test_out.display().to_string());
            }
            let bayes = spec.bayes_error();
            let mut text = format!("wrote {} samples to {}\n", train.len(), written.join(", "));
            if let Some(b) = bayes {
                writeln!(text, "analytic Bayes error {b:.6}")?;
            }
            Ok(Output::ok(
                json!({"written": written, "samples": train.len(), "bayes_error": bayes}),
                text,
            ))
        }
        DataKind::Oracle => {
            let outcomes: usize = a.arities.iter().product();
            if a.arities.is_empty() || outcomes > MAX_LATENT_OUTCOMES {
                bail!(
                    "arities {:?} must be non-empty with at most {MAX_LATENT_OUTCOMES} outcomes",
                    a.arities
                );
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let instance = random_instance(&mut rng, a.nx, a.classes, &a.arities)?;
            save_json(&a.out, &instance)?;
            Ok(Output::ok(
                json!({"written": [a.out.display().to_string()]}),
                format!("wrote oracle instance to {}\n", a.out.display()),
            ))
        }
    }
}

fn point_summary(p: &TradeoffPoint) -> String {
    format!(
        "beta_prime {:<8} test acc {:.4}  test ce {:.4}  test kl {:.4}  I(X;T) {:.4}  I(X;T|Y) {:.4}",
        p.beta_prime, p.test_accuracy, p.test_cross_entropy, p.test_kl_term, p.ixt, p.ixt_given_y
    )
}

fn write_run(
    dir: &Path,
    config: &Config,
    run: &cib::model::TrainRun,
    point: &TradeoffPoint,
) -> anyhow::Result<()> {
    create_dir(dir)?;
    save_checkpoint(
        &dir.join("checkpoint.json"),
        &Checkpoint::new(config.clone(), run.network.clone()),
    )?;
    write_metrics(&dir.join("metrics.csv"), &run.metrics)?;
    save_json(&dir.join("point.json"), point)?;
    Ok(())
}

fn train_cmd(config: &Path, out: &Path) -> anyhow::Result<Output> {
    require_file(config)?;
    let config = Config::load(config)?;
    let splits = load_splits(&config)?;
    let run = train(&config, &splits)?;
    let point = tradeoff_point(&run.network, &config, &splits)?;
    write_run(out, &config, &run, &point)?;
    let last = run
        .metrics
        .last()
        .expect("metrics always hold the initial row");
    let text = format!(
        "trained {} steps: train total {:.6}, train accuracy {:.4}\n{}\nwrote {}\n",
        last.step,
        last.total,
        last.accuracy,
        point_summary(&point),
        out.display()
    );
    Ok(Output::ok(
        json!({"final": last, "point": point, "out": out}),
        text,
    ))
}

fn sweep_cmd(
    config: &Path,
    beta_primes: &[f64],
    out: &Path,
    jobs: usize,
) -> anyhow::Result<Output> {
    require_file(config)?;
    let config = Config::load(config)?;
    let splits = load_splits(&config)?;
    let points = sweep(&config, &splits, beta_primes, jobs)?;
    create_dir(out)?;
    let mut text = String::new();
    for p in &points {
        let dir = out.join(format!("point-{:02}", p.index));
        write_run(&dir, &p.config, &p.run, &p.point)?;
        writeln!(text, "{}  -> {}", point_summary(&p.point), dir.display())?;
    }
    let rows: Vec<TradeoffPoint> = points.iter().map(|p| p.point.clone()).collect();
    write_tradeoff(&out.join("tradeoff.csv"), &rows)?;
    Ok(Output::ok(json!({"points": rows, "out": out}), text))
}

fn estimate_cmd(
    checkpoint: &Path,
    split: Split,
    mode: Mode,
    norm: Normalization,
    weighting: Weighting,
) -> anyhow::Result<Output> {
    require_file(checkpoint)?;
    let ck = load_checkpoint(checkpoint)?;
    let splits = load_splits(&ck.config)?;
    let data = match split {
        Split::Train => &splits.train,
        Split::Test => &splits.test,
    };
    let options = EstimatorOptions {
        mode: match mode {
            Mode::CitedSource => FormulaMode::CitedSource,
            Mode::AsPrinted => FormulaMode::AsPrinted,
        },
        class_normalization: match norm {
            Normalization::PerClass => ClassNormalization::PerClass,
            Normalization::AsPrinted => ClassNormalization::AsPrinted,
        },
        weighting: match weighting {
            Weighting::Frequency => ClassWeighting::Frequency,
            Weighting::Counts => ClassWeighting::Counts,
        },
    };
    let report = information_estimates(&ck.network(), data, options)?;
    let mut text = format!(
        "mode {}\nI(X;T)   <= {:.6}\nI(X;T|Y) <= {:.6}\n",
        report.mode, report.unconditional, report.aggregate
    );
    for c in &report.per_class {
        writeln!(
            text,
            "  class {:<4} n={:<6} {:.6}",
            c.label, c.count, c.value
        )?;
    }
    Ok(Output::ok(serde_json::to_value(&report)?, text))
}

fn gradcheck_cmd(eps: f64, tol: f64, seed: u64) -> anyhow::Result<Output> {
    let mut rows = Vec::new();
    let mut text = String::new();
    let mut failed = Vec::new();
    for variant in [DecoderVariant::Softmax, DecoderVariant::NaiveBayes] {
        for noise in [NoiseModeKind::FixedSigma, NoiseModeKind::LearnedEta] {
            let r = network_grad_check(variant, noise, true, seed, eps, tol)?;
            let name = format!("{variant:?}/{noise:?}");
            writeln!(
                text,
                "{name:<24} max rel error {:.3e} ({} coords) {}",
                r.max_rel_error,
                r.coordinates,
                if r.passed { "pass" } else { "FAIL" }
            )?;
            if !r.passed {
                failed.push(name.clone());
            }
            rows.push(json!({"case": name, "report": r}));
        }
    }
    Ok(Output {
        json: json!({"checks": rows}),
        text,
        failure: (!failed.is_empty())
            .then(|| format!("gradient check failed: {}", failed.join(", "))),
    })
}

fn oracle_cmd(instance: &Path) -> anyhow::Result<Output> {
    require_file(instance)?;
    let text =
        fs::read_to_string(instance).with_context(|| format!("reading {}", instance.display()))?;
    let inst: OracleInstance =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", instance.display()))?;
    let out = check_instance(&inst)?;
    let r = &out.report;
    let mut text = String::new();
    for (k, v) in [
        ("H(Y)", r.h_y),
        ("H(Y|T)", r.h_y_given_t),
        ("I(X;T)", r.i_xt),
        ("I(Y;T)", r.i_yt),
        ("I(X;T|Y)", r.i_xt_given_y),
        ("I(X;Y|T)", r.i_xy_given_t),
    ] {
        writeln!(text, "{k:<10} {v:.12}")?;
    }
    for v in &out.verdicts {
        writeln!(
            text,
            "{}: {} (residual {:.3e})",
            v.name,
            if v.pass { "pass" } else { "fail" },
            v.residual
        )?;
    }
    let failed: Vec<&str> = out
        .verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| v.name.as_str())
        .collect();
    Ok(Output {
        json: serde_json::to_value(&out)?,
        text,
        failure: (!failed.is_empty())
            .then(|| format!("identity checks failed: {}", failed.join(", "))),
    })
}

fn report_cmd(dirs: &[PathBuf], out: Option<&Path>) -> anyhow::Result<Output> {
    let mut missing = Vec::new();
    for dir in dirs {
        let absent: Vec<&str> = ["checkpoint.json", "metrics.csv"]
            .into_iter()
            .filter(|f| !dir.join(f).is_file())
            .collect();
        if !absent.is_empty() {
            missing.push(format!("{}: missing {}", dir.display(), absent.join(", ")));
        }
    }
    if !missing.is_empty() {
        bail!("incomplete run directories:\n  {}", missing.join("\n  "));
    }
    let mut points = Vec::with_capacity(dirs.len());
    for dir in dirs {
        read_metrics(&dir.join("metrics.csv"))?;
        let ck = load_checkpoint(&dir.join("checkpoint.json"))?;
        let splits = load_splits(&ck.config)?;
        points.push(tradeoff_point(&ck.network(), &ck.config, &splits)?);
    }
    let csv = tradeoff_to_csv(&points)?;
    let text = String::from_utf8(csv.clone()).map_err(|e| anyhow!(e))?;
    if let Some(path) = out {
        write_bytes(path, &csv)?;
    }
    points.sort_by(|a, b| a.beta_prime.total_cmp(&b.beta_prime));
    Ok(Output::ok(json!({"rows": points}), text))
}

fn run(cli: &Cli) -> anyhow::Result<Output> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train { config, out } => train_cmd(config, out),
        Command::Sweep {
            config,
            beta_primes,
            out,
            jobs,
        } => sweep_cmd(config, beta_primes, out, *jobs),
        Command::Estimate {
            checkpoint,
            split,
            mode,
            class_normalization,
            weighting,
        } => estimate_cmd(checkpoint, *split, *mode, *class_normalization, *weighting),
        Command::Gradcheck { eps, tol, seed } => gradcheck_cmd(*eps, *tol, *seed),
        Command::Oracle { instance } => oracle_cmd(instance),
        Command::Report { dirs, out } => report_cmd(dirs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(out) => {
            if cli.json {
                println!("{}", out.json);
            } else {
                print!("{}", out.text);
            }
            match out.failure {
                Some(msg) => {
                    eprintln!("error: {msg}");
                    ExitCode::from(exit_code(&CheckFailed(msg).into()))
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `tncm`: simulate market data, train the causal VAE, answer
//! counterfactual queries, and reproduce the reference experiments.
//!
//! Settings are layered: command-line flags override the JSON config file,
//! which overrides built-in defaults.

mod config;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use tncm_core::ctf::{ctf_probabilities, CtfRequest};
use tncm_core::experiment::{
    export_curves, run_experiments_with, run_oracle_selftest, ExperimentId, L1Report, Moments, L1_TOLERANCE,
    SELFTEST_TOLERANCE,
};
use tncm_core::model::{train_model, Checkpoint, Model};
use tncm_core::scm::{simulate, PathBatch};
use tncm_core::{rng, Direction, Error, InterventionSpec};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Divergence(String),
    Tolerance(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Tolerance(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Divergence(m) => write!(f, "training diverged: {m}"),
            CliError::Tolerance(m) => write!(f, "tolerance exceeded: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Csv(_) | Error::Format(_) => CliError::Io(e.to_string()),
            Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "tncm", version, about = "Causal market simulator with counterfactual queries")]
#[command(after_help = "Precedence: flags > --config file > built-in defaults.\nExit codes: 0 ok, 2 config/flag error, 3 I/O error, 4 training divergence, 5 tolerance failure.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; unknown keys are rejected [default: built-in defaults]
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed [default: config `seed`, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for generated artifacts [default: config `output_dir`, else `out`]
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(d) = &self.output_dir {
            c.output_dir = d.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate factual paths from the configured SCM and write them as CSV
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output CSV [default: <output_dir>/data.csv]
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Number of sequences [default: config `n_train`, else 5000]
        #[arg(long)]
        n: Option<usize>,
        /// Sequence length [default: config `model.seq_len`, else 10]
        #[arg(long)]
        len: Option<usize>,
    },
    /// Train a model and write a checkpoint plus a per-epoch log
    Train {
        #[command(flatten)]
        common: Common,
        /// Training CSV [default: simulate `n_train` sequences inline]
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Checkpoint path [default: <output_dir>/model.ckpt]
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Training log CSV [default: <output_dir>/train_log.csv]
        #[arg(long, value_name = "PATH")]
        log: Option<PathBuf>,
        /// KL weight [default: config `model.beta`, else 1]
        #[arg(long)]
        beta: Option<f64>,
        /// Epochs [default: config `model.epochs`, else 200]
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Estimate counterfactual threshold probabilities with a trained model
    Ctf {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Intervention as VAR=VALUE@T, e.g. X=0@4
        #[arg(long = "do", value_name = "VAR=VALUE@T", value_parser = parse_do)]
        intervention: InterventionSpec,
        /// Variable the threshold applies to
        #[arg(long)]
        target: String,
        /// Threshold value
        #[arg(long, allow_negative_numbers = true)]
        threshold: f64,
        /// Steps after the intervention to report
        #[arg(long)]
        horizon: usize,
        /// Counterfactual samples per estimate [default: config `ctf_samples`, else 4096]
        #[arg(long)]
        samples: Option<usize>,
        /// Event direction: greater or less
        #[arg(long, default_value = "greater", value_parser = parse_direction)]
        direction: Direction,
        /// Factual history CSV [default: one history simulated from the config SCM]
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Sequence index within --data
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Also write the estimates to this CSV
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Reproduce the reference experiments and write tables, CSV and SVG
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// Which experiment: 1, 2 or all
        #[arg(long, default_value = "1", value_parser = ["1", "2", "all"])]
        experiment: String,
        /// Replace the model by the Monte-Carlo oracle to check the harness
        #[arg(long)]
        oracle_selftest: bool,
    },
}

fn parse_do(s: &str) -> Result<InterventionSpec, String> {
    let usage = "expected VAR=VALUE@T, e.g. X=0@4";
    let (var, rest) = s.split_once('=').ok_or(usage)?;
    let (value, t) = rest.rsplit_once('@').ok_or(usage)?;
    let var = var.trim();
    if var.is_empty() {
        return Err(format!("missing variable; {usage}"));
    }
    let value: f64 = value.trim().parse().map_err(|_| format!("bad value `{value}`; {usage}"))?;
    if !value.is_finite() {
        return Err(format!("value must be finite; {usage}"));
    }
    let time_index = t.trim().parse().map_err(|_| format!("bad time `{t}`; {usage}"))?;
    Ok(InterventionSpec { variable: var.to_string(), time_index, value })
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn cmd_simulate(common: &Common, out: Option<PathBuf>, n: Option<usize>, len: Option<usize>) -> Result<(), CliError> {
    let c = common.resolve()?;
    let out = out.unwrap_or_else(|| c.output_dir.join("data.csv"));
    let n = n.unwrap_or(c.n_train);
    let len = len.unwrap_or(c.model.seq_len);
    let batch = simulate(&c.scm, n, len, rng::derive_seed(c.seed, rng::salt::TRAIN_DATA))?;
    let mut w = create(&out)?;
    batch.write_csv(&mut w)?;
    w.flush().map_err(|e| io_err(&out, e))?;
    println!("wrote {n} sequences of length {len} to {}", out.display());
    if len >= 2 {
        let m = Moments::of(&batch)?;
        for (i, v) in batch.variables.iter().enumerate() {
            println!("{v}: mean {:.4}  var {:.4}", m.mean[i], m.variance[i]);
        }
    }
    Ok(())
}

fn read_batch(path: &Path) -> Result<PathBatch, CliError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(PathBatch::read_csv(f)?)
}

fn cmd_train(
    common: &Common,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
    beta: Option<f64>,
    epochs: Option<usize>,
) -> Result<(), CliError> {
    let mut c = common.resolve()?;
    if let Some(b) = beta {
        c.model.beta = b;
    }
    if let Some(e) = epochs {
        c.model.epochs = e;
    }
    c.model.seed = c.seed;
    c.validate()?;
    let out = out.unwrap_or_else(|| c.output_dir.join("model.ckpt"));
    let log = log.unwrap_or_else(|| c.output_dir.join("train_log.csv"));
    let batch = match &data {
        Some(p) => read_batch(p)?,
        None => simulate(&c.scm, c.n_train, c.model.seq_len, rng::derive_seed(c.seed, rng::salt::TRAIN_DATA))?,
    };
    let model = Model::new(c.model.clone())?;
    let total = c.model.epochs;
    let (ck, report) = train_model(model, &batch, |s| {
        if s.epoch % 10 == 0 || s.epoch + 1 == total {
            eprintln!(
                "epoch {:>4}  total {:.5}  recon {:.5}  kl {:.5}",
                s.epoch, s.total, s.reconstruction, s.kl
            );
        }
    })?;
    let mut w = create(&out)?;
    ck.write(&mut w)?;
    w.flush().map_err(|e| io_err(&out, e))?;
    let mut lw = create(&log)?;
    let rows = std::iter::once("epoch,total,reconstruction,kl".to_string())
        .chain(report.epochs.iter().map(|s| format!("{},{},{},{}", s.epoch, s.total, s.reconstruction, s.kl)));
    for row in rows {
        writeln!(lw, "{row}").map_err(|e| io_err(&log, e))?;
    }
    lw.flush().map_err(|e| io_err(&log, e))?;
    println!("wrote checkpoint {} and log {}", out.display(), log.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ctf(
    common: &Common,
    checkpoint: &Path,
    intervention: InterventionSpec,
    target: &str,
    threshold: f64,
    horizon: usize,
    samples: Option<usize>,
    direction: Direction,
    data: Option<PathBuf>,
    sequence: usize,
    csv: Option<PathBuf>,
) -> Result<(), CliError> {
    let c = common.resolve()?;
    let ck = Checkpoint::load(checkpoint).map_err(|e| io_err(checkpoint, e))?;
    let model = ck.model;
    let len = intervention.time_index + 1;
    let factual = match &data {
        Some(p) => {
            let batch = read_batch(p)?;
            if sequence >= batch.n_sequences() || batch.len_t() < len {
                return Err(CliError::Config(format!(
                    "{} has no sequence {sequence} with at least {len} steps",
                    p.display()
                )));
            }
            batch.row(sequence, len)
        }
        None => simulate(&c.scm, 1, len, rng::derive_seed(c.seed, rng::salt::EVAL_HISTORIES))?,
    };
    let req = CtfRequest {
        factual,
        intervention: intervention.clone(),
        horizon,
        n_samples: samples.unwrap_or(c.ctf_samples),
        seed: c.seed,
    };
    let estimates = ctf_probabilities(&model, &req, target, threshold, direction)?;
    let op = match direction {
        Direction::Greater => ">",
        Direction::Less => "<",
    };
    for (k, e) in estimates.iter().enumerate() {
        println!(
            "k={}  P({target}[t+{}] {op} {threshold} | do({}[{}] = {})) = {:.6} ± {:.6}",
            k + 1,
            k + 1,
            intervention.variable,
            intervention.time_index,
            intervention.value,
            e.probability,
            e.std_error
        );
    }
    if let Some(path) = csv {
        let mut w = create(&path)?;
        let mut text = String::from("horizon,probability,std_error,n_samples\n");
        for (k, e) in estimates.iter().enumerate() {
            text.push_str(&format!("{},{},{},{}\n", k + 1, e.probability, e.std_error, e.n_samples));
        }
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn write_report(report: &L1Report, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let table = report.table();
    print!("{table}");
    let path = dir.join(format!("{}_table.txt", report.experiment));
    fs::write(&path, &table).map_err(|e| io_err(&path, e))?;
    let (csv, svg) = export_curves(report, dir)?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

fn cmd_reproduce(common: &Common, experiment: &str, selftest: bool) -> Result<(), CliError> {
    let c = common.resolve()?;
    let ids = match experiment {
        "1" => vec![ExperimentId::Exp1],
        "2" => vec![ExperimentId::Exp2],
        _ => vec![ExperimentId::Exp1, ExperimentId::Exp2],
    };
    let specs: Vec<_> = ids.iter().map(|&id| c.experiment(id)).collect();
    let (reports, tolerance) = if selftest {
        let reports = specs.iter().map(run_oracle_selftest).collect::<Result<Vec<_>, _>>()?;
        (reports, SELFTEST_TOLERANCE)
    } else {
        let reports = run_experiments_with(&specs, |seed, r| match r {
            Ok(ck) => eprintln!("trained seed {seed}: final loss {:.5}", ck.meta.final_loss.unwrap_or(f64::NAN)),
            Err(e) => eprintln!("seed {seed} failed: {e}"),
        })?;
        (reports, L1_TOLERANCE)
    };
    for r in &reports {
        write_report(r, &c.output_dir)?;
    }
    if reports.iter().any(|r| r.rows.is_empty()) {
        return Err(CliError::Divergence("every seed failed to train".into()));
    }
    let failing: Vec<_> = reports.iter().filter(|r| !r.within(tolerance)).map(|r| r.experiment.as_str()).collect();
    if !failing.is_empty() {
        return Err(CliError::Tolerance(format!(
            "{} exceed L1 tolerance {tolerance}",
            failing.join(", ")
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common, out, n, len } => cmd_simulate(&common, out, n, len),
        Command::Train { common, data, out, log, beta, epochs } => cmd_train(&common, data, out, log, beta, epochs),
        Command::Ctf {
            common,
            checkpoint,
            intervention,
            target,
            threshold,
            horizon,
            samples,
            direction,
            data,
            sequence,
            csv,
        } => cmd_ctf(
            &common,
            &checkpoint,
            intervention,
            &target,
            threshold,
            horizon,
            samples,
            direction,
            data,
            sequence,
            csv,
        ),
        Command::Reproduce { common, experiment, oracle_selftest } => cmd_reproduce(&common, &experiment, oracle_selftest),
    }
}

fn usage_for(subcommand: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match subcommand.and_then(|name| cmd.find_subcommand_mut(name)) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                eprintln!("\n{}", usage_for(std::env::args().nth(1).as_deref()));
            }
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tncm: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn do_expressions() {
        let iv = parse_do("X=0@4").unwrap();
        assert_eq!(iv, InterventionSpec { variable: "X".into(), time_index: 4, value: 0.0 });
        assert_eq!(parse_do("Y=-2.5@0").unwrap().value, -2.5);
        assert_eq!(parse_do("X=1e-3@2").unwrap().value, 1e-3);
        for bad in ["X=@4", "X=0", "=0@4", "X0@4", "X=0@-1", "X=0@a", "X=inf@1", "X=nan@1"] {
            assert!(parse_do(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::Divergence { epoch: 1, detail: "x".into() }).code(), 4);
        assert_eq!(CliError::from(Error::Csv("x".into())).code(), 3);
        assert_eq!(CliError::from(Error::InvalidArgument("x".into())).code(), 2);
        assert_eq!(CliError::Tolerance("x".into()).code(), 5);
    }
}

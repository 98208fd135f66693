use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use relu_extract::extraction::{get_neurons, ExtractionParams, Knobs};
use relu_extract::harness::{
    generate_target, read_reports, report_table, run_experiment, sweep, sweep_table, ExperimentConfig, RunStatus,
    TargetKind,
};
use relu_extract::model::{l2_distance_mc, Network, DEFAULT_MC_SAMPLES};
use relu_extract::oracle::{serve, InProcessOracle, Oracle, TcpOracle};
use relu_extract::regression::{learn_from_queries, RegressionConfig};
use relu_extract::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_THRESHOLD: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "relu-extract", version, about = "Black-box extraction of one-hidden-layer ReLU networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve a network over the wire protocol until killed.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Harvest neuron candidates from an oracle.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the run report as JSON; printed to stdout otherwise.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Harvest candidates, fit the regression and write the learned network.
    Learn {
        #[command(flatten)]
        common: Common,
        /// Regression sample count.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Monte-Carlo estimate of E[(A(x) - B(x))²] under a standard Gaussian.
    Evaluate {
        #[arg(long = "model", num_args = 1, required = true)]
        models: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a target network.
    Gen {
        /// random-separated[:MIN_SIN] | random-clumped:CLUMPS:DELTA:ALPHA |
        /// bump:A:WIDTH | cancelling-pair
        #[arg(long)]
        kind: String,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: usize,
        #[arg(long = "R", default_value_t = 1.0)]
        r_bound: f64,
        #[arg(long = "B", default_value_t = 1.0)]
        b_bound: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. --set c_tau=2 or --set seed=7.
        #[arg(long = "set", value_parser = parse_assignment)]
        sets: Vec<(String, f64)>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// One run per value of a knob; prints a CSV table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        knob: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long = "set", value_parser = parse_assignment)]
        sets: Vec<(String, f64)>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a table of the runs in a report log.
    Report {
        #[arg(long, default_value = "reports.jsonl")]
        log: PathBuf,
        /// Only runs whose config hash starts with this prefix.
        #[arg(long)]
        hash: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// file:PATH (in-process network) or tcp:HOST:PORT
    #[arg(long)]
    oracle: String,
    /// Query budget, enforced for file oracles.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    k: usize,
    #[arg(long = "R")]
    r_bound: f64,
    #[arg(long = "B")]
    b_bound: f64,
    /// Schedule constant, e.g. --knob c_tau=2. Repeatable.
    #[arg(long = "knob", value_parser = parse_assignment)]
    knobs: Vec<(String, f64)>,
    /// Union candidates over this many Gaussian lines.
    #[arg(long, default_value_t = 1)]
    lines: usize,
    #[arg(long)]
    max_intervals: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn params(&self) -> Result<ExtractionParams, Error> {
        let mut knobs = Knobs::default();
        for (name, v) in &self.knobs {
            knobs.set(name, *v)?;
        }
        let mut p = ExtractionParams::new(self.epsilon, self.delta, self.k, self.r_bound, self.b_bound).with_knobs(knobs);
        p.lines = self.lines;
        if let Some(m) = self.max_intervals {
            p.max_intervals = m;
        }
        p.validate()?;
        Ok(p)
    }

    fn oracle(&self) -> Result<Box<dyn Oracle>, Error> {
        if let Some(path) = self.oracle.strip_prefix("file:") {
            Ok(Box::new(InProcessOracle::with_budget(Network::load(path)?, self.budget)))
        } else if let Some(addr) = self.oracle.strip_prefix("tcp:") {
            Ok(Box::new(TcpOracle::connect(addr)?))
        } else {
            Err(Error::Input(format!("oracle must be file:PATH or tcp:ADDR, got {:?}", self.oracle)))
        }
    }
}

fn parse_assignment(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))?;
    let v: f64 = v.parse().map_err(|e| format!("{s:?}: {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn emit(json: String, path: Option<&Path>) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn load_config(path: &Path, sets: &[(String, f64)], output_dir: Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    for (k, v) in sets {
        cfg.set(k, *v)?;
    }
    if output_dir.is_some() {
        cfg.output_dir = output_dir;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::Serve { model, listen, budget } => {
            let net = Network::load(&model)?;
            let handle = serve(net, listen.as_str(), budget)?;
            println!("listening on {}", handle.addr());
            handle.wait();
        }
        Cmd::Extract { common, out, report } => {
            let p = common.params()?;
            let oracle = common.oracle()?;
            let started = Instant::now();
            let (set, mut rep) = get_neurons(oracle.as_ref(), &p, common.seed)?;
            rep.wall_seconds = started.elapsed().as_secs_f64();
            set.save(&out)?;
            emit(serde_json::to_string_pretty(&rep)?, report.as_deref())?;
        }
        Cmd::Learn { common, n, out, report } => {
            let p = common.params()?;
            let oracle = common.oracle()?;
            let cfg = RegressionConfig {
                n_samples: n,
                ..RegressionConfig::default()
            };
            let learned = learn_from_queries(oracle.as_ref(), &p, &cfg, common.seed)?;
            learned.network.save(&out)?;
            emit(serde_json::to_string_pretty(&learned.report)?, report.as_deref())?;
        }
        Cmd::Evaluate { models, samples, seed } => {
            if models.len() != 2 {
                return Err(Error::Input("evaluate needs exactly two --model arguments".into()));
            }
            let a = Network::load(&models[0])?;
            let b = Network::load(&models[1])?;
            let est = l2_distance_mc(&a, &b, samples, seed)?;
            println!(
                "loss {:.6e} ± {:.6e} (rms {:.6e}, n = {})",
                est.mean,
                est.std_error,
                est.rms(),
                est.n_samples
            );
        }
        Cmd::Gen {
            kind,
            d,
            k,
            r_bound,
            b_bound,
            seed,
            out,
        } => {
            let net = generate_target(&TargetKind::parse(&kind)?, d, k, r_bound, b_bound, seed)?;
            net.save(&out)?;
            println!("{net}");
        }
        Cmd::Run {
            config,
            sets,
            output_dir,
        } => {
            let cfg = load_config(&config, &sets, output_dir)?;
            let report = run_experiment(&cfg)?.report;
            print!("{}", report_table(std::slice::from_ref(&report)));
            if let RunStatus::Failed { stage, message } = &report.status {
                eprintln!("stage {stage} failed: {message}");
                return Ok(EXIT_STAGE);
            }
            if report.passed == Some(false) {
                return Ok(EXIT_THRESHOLD);
            }
        }
        Cmd::Sweep {
            config,
            knob,
            values,
            sets,
            output_dir,
            csv,
        } => {
            let cfg = load_config(&config, &sets, output_dir)?;
            let reports = sweep(&cfg, &knob, &values)?;
            let table = sweep_table(&knob, &values, &reports);
            print!("{table}");
            if let Some(path) = csv {
                std::fs::write(path, &table)?;
            }
            if reports.iter().any(|r| matches!(r.status, RunStatus::Failed { .. })) {
                return Ok(EXIT_STAGE);
            }
            if reports.iter().any(|r| r.passed == Some(false)) {
                return Ok(EXIT_THRESHOLD);
            }
        }
        Cmd::Report { log, hash } => {
            let mut reports = read_reports(&log)?;
            if let Some(h) = hash {
                reports.retain(|r| r.config_hash.starts_with(&h));
            }
            print!("{}", report_table(&reports));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FAILURE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Stage { .. } => EXIT_STAGE,
                _ => EXIT_FAILURE,
            })
        }
    }
}

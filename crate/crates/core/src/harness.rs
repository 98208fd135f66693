//! Experiment plumbing: target generation, end-to-end runs against an
//! oracle, evaluation against ground truth, and report files.
//!
//! The harness owns the ground-truth network. The learner only ever sees
//! the oracle built from it.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extraction::{schedule, CandidateSet, ExtractionParams, Knobs, Schedule};
use crate::geometry::{abs_sin_angle, is_close, ClosenessParams};
use crate::linalg::{axpy, dot, norm, scale};
use crate::model::{l2_distance_mc, l2_norm_mc, McEstimate, Network, Neuron, Sign, DEFAULT_MC_SAMPLES};
use crate::oracle::{serve, InProcessOracle, NoisyOracle, Oracle, TcpOracle};
use crate::regression::{learn_from_queries, Learned, RegressionConfig};
use crate::rng::{self, derive_seed, SeededRng};

/// Pairwise `|sin ∠|` floor for `random-separated` targets.
pub const DEFAULT_MIN_SIN: f64 = 0.2;
const MAX_REJECTIONS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetKind {
    /// Norms in `[R/2, R]`, biases in `[−B, B]`, pairwise `|sin ∠| ≥ min_sin`.
    RandomSeparated {
        #[serde(default = "default_min_sin")]
        min_sin: f64,
    },
    /// `clumps` centers; every neuron is `(Δ, α)`-close to its center.
    RandomClumped { clumps: usize, delta: f64, alpha: f64 },
    /// `σ(x₁ − a) + σ(x₁ − a − w) − σ(2x₁ − 2a − w)` with `w = width`, or
    /// `w = width_r · r` under the run's schedule.
    Bump {
        #[serde(default)]
        a: f64,
        #[serde(default)]
        width: Option<f64>,
        #[serde(default)]
        width_r: Option<f64>,
    },
    /// `σ(⟨w,x⟩ − b) − σ(⟨w,x⟩ − b)`, identically zero.
    CancellingPair,
    File { path: PathBuf },
}

fn default_min_sin() -> f64 {
    DEFAULT_MIN_SIN
}

impl TargetKind {
    pub fn name(&self) -> &'static str {
        match self {
            TargetKind::RandomSeparated { .. } => "random-separated",
            TargetKind::RandomClumped { .. } => "random-clumped",
            TargetKind::Bump { .. } => "bump",
            TargetKind::CancellingPair => "cancelling-pair",
            TargetKind::File { .. } => "file",
        }
    }

    /// Parse the short command-line form: `random-separated`,
    /// `random-clumped:CLUMPS:DELTA:ALPHA`, `bump:A:WIDTH`, `cancelling-pair`,
    /// `file:PATH`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::input(format!("target {s:?} is missing field {i}")))?
                .parse::<f64>()
                .map_err(|e| Error::input(format!("target {s:?}: {e}")))
        };
        Ok(match parts[0] {
            "random-separated" => TargetKind::RandomSeparated {
                min_sin: if parts.len() > 1 { num(1)? } else { DEFAULT_MIN_SIN },
            },
            "random-clumped" => TargetKind::RandomClumped {
                clumps: num(1)? as usize,
                delta: num(2)?,
                alpha: num(3)?,
            },
            "bump" => TargetKind::Bump {
                a: num(1)?,
                width: Some(num(2)?),
                width_r: None,
            },
            "cancelling-pair" => TargetKind::CancellingPair,
            "file" if parts.len() > 1 => TargetKind::File {
                path: PathBuf::from(&s[5..]),
            },
            _ => return Err(Error::input(format!("unknown target kind {s:?}"))),
        })
    }
}

fn random_sign(r: &mut SeededRng) -> Sign {
    if r.random_bool(0.5) {
        Sign::Pos
    } else {
        Sign::Neg
    }
}

fn check_bounds(d: usize, k: usize, r_bound: f64, b_bound: f64) -> Result<()> {
    if d == 0 || k == 0 || !(r_bound > 0.0) || !(b_bound > 0.0) {
        return Err(Error::input(format!(
            "target needs d, k, R, B positive; got d={d}, k={k}, R={r_bound}, B={b_bound}"
        )));
    }
    Ok(())
}

/// Bump of width `width` at `a` along the first coordinate of `R^d`.
pub fn bump(d: usize, a: f64, width: f64) -> Result<Network> {
    if d == 0 || !(width > 0.0) {
        return Err(Error::input("bump needs d ≥ 1 and a positive width"));
    }
    let e = |c: f64| {
        let mut v = vec![0.0; d];
        v[0] = c;
        v
    };
    Network::new(
        d,
        vec![
            Neuron::new(Sign::Pos, e(1.0), a),
            Neuron::new(Sign::Pos, e(1.0), a + width),
            Neuron::new(Sign::Neg, e(2.0), 2.0 * a + width),
        ],
    )
}

/// A clump of `k` neurons, each `(Δ, α)`-close to the unit center `(v*, b*)`.
/// Norms lie in `[R/2, R]` and half the members are antipodal on average.
#[derive(Clone, Debug, PartialEq)]
pub struct Clump {
    pub v_star: Vec<f64>,
    pub b_star: f64,
    pub neurons: Vec<Neuron>,
}

pub fn random_clump(r: &mut SeededRng, d: usize, k: usize, p: ClosenessParams, r_bound: f64, b_bound: f64) -> Result<Clump> {
    check_bounds(d, k, r_bound, b_bound)?;
    let v_star = rng::unit_vec(r, d);
    let half = 0.5 * b_bound / r_bound;
    let b_star = r.random_range(-half..=half);
    let mut neurons = Vec::with_capacity(k);
    for _ in 0..k {
        let mut tries = 0;
        let n = loop {
            tries += 1;
            if tries > MAX_REJECTIONS {
                return Err(Error::Numerical("could not place a clump member".into()));
            }
            let mut u = rng::gaussian_vec(r, d);
            u = axpy(&u, -dot(&u, &v_star), &v_star);
            let eta = if d > 1 { p.delta * r.random_range(0.0..1.0) } else { 0.0 };
            let dir = axpy(&v_star, eta / norm(&u).max(1e-300), &u);
            let room = (p.alpha * r.random_range(0.0..1.0)).powi(2) * (1.0 + eta * eta) - (b_star * eta).powi(2);
            let beta = room.max(0.0).sqrt() * random_sign(r).value();
            let lam = r.random_range(0.5 * r_bound..=r_bound) / norm(&dir) * random_sign(r).value();
            let n = Neuron::new(random_sign(r), scale(&dir, lam), lam * (b_star + beta));
            if n.bias.abs() <= b_bound && is_close(&n.weight, n.bias, &v_star, b_star, p)? {
                break n;
            }
        };
        neurons.push(n);
    }
    Ok(Clump {
        v_star,
        b_star,
        neurons,
    })
}

/// Ground-truth network of the given kind. `Bump` with `width_r` needs the
/// grid width; use [`generate_target_for`] for that.
pub fn generate_target(kind: &TargetKind, d: usize, k: usize, r_bound: f64, b_bound: f64, seed: u64) -> Result<Network> {
    generate(kind, d, k, r_bound, b_bound, seed, None)
}

/// As [`generate_target`], resolving `width_r` against `sched.r`.
pub fn generate_target_for(
    kind: &TargetKind,
    d: usize,
    k: usize,
    r_bound: f64,
    b_bound: f64,
    seed: u64,
    sched: &Schedule,
) -> Result<Network> {
    generate(kind, d, k, r_bound, b_bound, seed, Some(sched))
}

fn generate(
    kind: &TargetKind,
    d: usize,
    k: usize,
    r_bound: f64,
    b_bound: f64,
    seed: u64,
    sched: Option<&Schedule>,
) -> Result<Network> {
    let mut r = rng::seeded(seed);
    match kind {
        TargetKind::RandomSeparated { min_sin } => {
            check_bounds(d, k, r_bound, b_bound)?;
            if k > 1 && d == 1 {
                return Err(Error::input("separated targets with k > 1 need d ≥ 2"));
            }
            let mut neurons: Vec<Neuron> = Vec::with_capacity(k);
            let mut tries = 0;
            while neurons.len() < k {
                tries += 1;
                if tries > MAX_REJECTIONS {
                    return Err(Error::input(format!(
                        "could not place {k} neurons with pairwise |sin| ≥ {min_sin} in d={d}"
                    )));
                }
                let u = rng::unit_vec(&mut r, d);
                let ok = neurons
                    .iter()
                    .all(|n| abs_sin_angle(&n.weight, &u).is_ok_and(|s| s >= *min_sin));
                if !ok {
                    continue;
                }
                let len = r.random_range(0.5 * r_bound..=r_bound);
                let b = r.random_range(-b_bound..=b_bound);
                neurons.push(Neuron::new(random_sign(&mut r), scale(&u, len), b));
            }
            Network::new(d, neurons)
        }
        TargetKind::RandomClumped { clumps, delta, alpha } => {
            if *clumps == 0 || *clumps > k {
                return Err(Error::input("need 1 ≤ clumps ≤ k"));
            }
            let p = ClosenessParams::new(*delta, *alpha)?;
            let mut neurons = Vec::with_capacity(k);
            for c in 0..*clumps {
                let size = k / clumps + usize::from(c < k % clumps);
                neurons.extend(random_clump(&mut r, d, size, p, r_bound, b_bound)?.neurons);
            }
            Network::new(d, neurons)
        }
        TargetKind::Bump { a, width, width_r } => {
            let w = match (width, width_r, sched) {
                (Some(w), None, _) => *w,
                (None, Some(f), Some(s)) => f * s.r,
                (None, Some(_), None) => {
                    return Err(Error::input("bump width relative to r needs a schedule"));
                }
                _ => return Err(Error::input("bump needs exactly one of width, width_r")),
            };
            bump(d, *a, w)
        }
        TargetKind::CancellingPair => {
            check_bounds(d, 1, r_bound, b_bound)?;
            let u = rng::unit_vec(&mut r, d);
            let w = scale(&u, r.random_range(0.5 * r_bound..=r_bound));
            let b = r.random_range(-b_bound..=b_bound);
            Network::new(
                d,
                vec![Neuron::new(Sign::Pos, w.clone(), b), Neuron::new(Sign::Neg, w, b)],
            )
        }
        TargetKind::File { path } => {
            let net = Network::load(path)?;
            if net.dim != d {
                return Err(Error::input(format!("target file has d={}, config says {d}", net.dim)));
            }
            Ok(net)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    #[serde(flatten)]
    pub kind: TargetKind,
    pub d: usize,
    pub k: usize,
    #[serde(rename = "R")]
    pub r_bound: f64,
    #[serde(rename = "B")]
    pub b_bound: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    #[default]
    InProcess,
    /// A wire-protocol server on a loopback port, spawned for the run.
    Tcp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub budget: Option<u64>,
    /// Variance of Gaussian noise added to answers; off when unset.
    pub noise_variance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub mc_samples: usize,
    pub mc_seed: u64,
    /// Holdout samples from the truncated distribution; defaults to the
    /// training sample count.
    pub holdout_samples: Option<usize>,
    /// Acceptance threshold on the population L2 distance `√E[(F − F̃)²]`.
    pub max_loss_rms: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            mc_samples: DEFAULT_MC_SAMPLES,
            mc_seed: 0x5eed,
            holdout_samples: None,
            max_loss_rms: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub target: TargetSpec,
    pub extraction: ExtractionParams,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Directory for artifacts and the append-only report log.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form, with
    /// `output_dir` excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.extraction.validate()?;
        if self.evaluation.mc_samples < 2 {
            return Err(Error::input("mc_samples must be at least 2"));
        }
        if let Some(dir) = &self.output_dir {
            fs::create_dir_all(dir)?;
            let probe = dir.join(".write-test");
            fs::write(&probe, b"")?;
            fs::remove_file(probe)?;
        }
        Ok(())
    }

    /// Apply a named override: a knob name, or one of `epsilon`, `delta`,
    /// `k`, `R`, `B`, `seed`, `target_seed`, `n_samples`, `mc_samples`.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let p = &mut self.extraction;
        match name {
            "epsilon" => p.epsilon = value,
            "delta" => p.delta_conf = value,
            "k" => p.k_bound = value as usize,
            "R" => p.r_bound = value,
            "B" => p.b_bound = value,
            "seed" => self.seed = value as u64,
            "target_seed" => self.target.seed = value as u64,
            "n_samples" => self.regression.n_samples = Some(value as usize),
            "mc_samples" => self.evaluation.mc_samples = value as usize,
            knob => p.knobs.set(knob, value)?,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed { stage: String, message: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub extraction: f64,
    pub regression: f64,
    pub evaluation: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    /// Mean squared residual on the training samples.
    pub train: f64,
    pub train_samples: usize,
    /// Mean squared error against ground truth on fresh truncated samples.
    pub holdout: f64,
    pub holdout_std_error: f64,
    pub holdout_samples: usize,
    /// `E[(F − F̃)²]` under `N(0, I)`.
    pub population: McEstimate,
    /// `E[F²]`, for scale.
    pub target_norm: McEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// Target neurons `i` with `±(w_i, b_i)` among the candidates to `1e−6`.
    pub matched: Vec<bool>,
}

impl Recovery {
    pub fn all(&self) -> bool {
        self.matched.iter().all(|&m| m)
    }
}

pub const MATCH_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub name: String,
    pub seed: u64,
    pub target_kind: String,
    pub d: usize,
    pub k_true: usize,
    pub knobs: Knobs,
    pub status: RunStatus,
    pub schedule: Option<Schedule>,
    pub query_count: u64,
    pub candidates: Option<usize>,
    pub losses: Option<Losses>,
    pub recovery: Option<Recovery>,
    /// `None` without a configured threshold.
    pub passed: Option<bool>,
    pub warnings: Vec<String>,
    pub timings: Timings,
}

impl RunReport {
    /// Copy with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn loss_rms(&self) -> Option<f64> {
        self.losses.as_ref().map(|l| l.population.rms())
    }
}

/// Everything a run produced, for callers that want the artifacts in memory.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub target: Option<Network>,
    pub candidates: Option<CandidateSet>,
    pub model: Option<Network>,
}

fn failed(stage: &str, e: &Error) -> RunStatus {
    let stage = match e {
        Error::Stage { stage, .. } => stage.to_string(),
        _ => stage.to_string(),
    };
    RunStatus::Failed {
        stage,
        message: e.to_string(),
    }
}

/// Mean squared error of `model` against `target` on `n` samples of the
/// truncated Gaussian. Needs no oracle queries.
pub fn holdout_loss(target: &Network, model: &Network, n: usize, m_bound: f64, seed: u64) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::input("holdout needs at least 2 samples"));
    }
    let d = target.dim;
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..n {
        let mut g = rng::seeded(derive_seed(seed, i as u64));
        let x = loop {
            let x = rng::gaussian_vec(&mut g, d);
            if norm(&x) <= m_bound {
                break x;
            }
        };
        let e = (target.eval_unchecked(&x) - model.eval_unchecked(&x)).powi(2);
        let delta = e - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (e - mean);
    }
    Ok((mean, (m2 / (n - 1) as f64 / n as f64).sqrt()))
}

fn learn_with_oracle(cfg: &ExperimentConfig, target: &Network) -> Result<(Learned, u64)> {
    let base: Box<dyn Oracle> = match cfg.oracle.mode {
        OracleMode::InProcess => Box::new(InProcessOracle::with_budget(target.clone(), cfg.oracle.budget)),
        OracleMode::Tcp => {
            let server = serve(target.clone(), "127.0.0.1:0", cfg.oracle.budget).map_err(|e| e.in_stage("serve"))?;
            let client = TcpOracle::connect(server.addr()).map_err(|e| e.in_stage("connect"))?;
            let out = learn_through(cfg, &client);
            drop(client);
            server.shutdown();
            return out;
        }
    };
    learn_through(cfg, base.as_ref())
}

fn learn_through(cfg: &ExperimentConfig, oracle: &dyn Oracle) -> Result<(Learned, u64)> {
    let learned = match cfg.oracle.noise_variance {
        Some(v) => {
            let noisy = NoisyOracle::new(oracle, v, derive_seed(cfg.seed, 7))?;
            learn_from_queries(&noisy, &cfg.extraction, &cfg.regression, cfg.seed)?
        }
        None => learn_from_queries(oracle, &cfg.extraction, &cfg.regression, cfg.seed)?,
    };
    Ok((learned, oracle.query_count()))
}

/// Generate or load the target, learn it through an oracle, evaluate
/// against ground truth, and write artifacts when `output_dir` is set.
/// Stage failures are recorded in the report rather than returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let t = &cfg.target;
    let mut report = RunReport {
        config_hash: cfg.hash(),
        name: cfg.name.clone(),
        seed: cfg.seed,
        target_kind: t.kind.name().to_string(),
        d: t.d,
        k_true: 0,
        knobs: cfg.extraction.knobs,
        status: RunStatus::Ok,
        schedule: None,
        query_count: 0,
        candidates: None,
        losses: None,
        recovery: None,
        passed: None,
        warnings: Vec::new(),
        timings: Timings::default(),
    };
    let mut outcome = RunOutcome {
        report: report.clone(),
        target: None,
        candidates: None,
        model: None,
    };

    let result = (|| -> Result<()> {
        let sched = schedule(&cfg.extraction, t.d).map_err(|e| e.in_stage("schedule"))?;
        report.schedule = Some(sched);
        let target = generate_target_for(&t.kind, t.d, t.k, t.r_bound, t.b_bound, t.seed, &sched)
            .map_err(|e| e.in_stage("generate_target"))?;
        report.k_true = target.k();
        outcome.target = Some(target.clone());

        let (learned, queries) = learn_with_oracle(cfg, &target)?;
        let lr = &learned.report;
        report.query_count = queries;
        report.candidates = Some(lr.candidates);
        report.warnings.extend(lr.warnings.iter().cloned());
        report.timings.extraction = lr.extraction_seconds;
        report.timings.regression = lr.regression_seconds;
        report.recovery = Some(Recovery {
            matched: target
                .neurons
                .iter()
                .map(|n| learned.candidates.contains_neuron(&n.weight, n.bias, MATCH_TOL))
                .collect(),
        });
        outcome.candidates = Some(learned.candidates.clone());
        outcome.model = Some(learned.network.clone());

        let t_eval = Instant::now();
        let ev = &cfg.evaluation;
        let population = l2_distance_mc(&target, &learned.network, ev.mc_samples, ev.mc_seed)
            .map_err(|e| e.in_stage("evaluate"))?;
        let target_norm = l2_norm_mc(&target, ev.mc_samples, ev.mc_seed).map_err(|e| e.in_stage("evaluate"))?;
        let n_hold = ev.holdout_samples.unwrap_or(lr.n_samples).max(2);
        let (holdout, holdout_se) = holdout_loss(
            &target,
            &learned.network,
            n_hold,
            lr.m_bound,
            derive_seed(cfg.seed, 3),
        )
        .map_err(|e| e.in_stage("evaluate"))?;
        report.timings.evaluation = t_eval.elapsed().as_secs_f64();
        report.passed = ev.max_loss_rms.map(|m| population.rms() <= m);
        report.losses = Some(Losses {
            train: lr.train_loss,
            train_samples: lr.n_samples,
            holdout,
            holdout_std_error: holdout_se,
            holdout_samples: n_hold,
            population,
            target_norm,
        });
        Ok(())
    })();
    if let Err(e) = result {
        report.status = failed("run", &e);
        if ev_threshold(cfg) {
            report.passed = Some(false);
        }
    }
    report.timings.total = started.elapsed().as_secs_f64();
    outcome.report = report;
    if let Some(dir) = &cfg.output_dir {
        write_artifacts(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

fn ev_threshold(cfg: &ExperimentConfig) -> bool {
    cfg.evaluation.max_loss_rms.is_some()
}

/// `DIR/<hash>/{config.toml, target.json, candidates.json, model.json,
/// report.json}` plus one line appended to `DIR/reports.jsonl`. Artifacts
/// from a failed run are written as far as they exist.
fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, out: &RunOutcome) -> Result<()> {
    let sub = dir.join(&out.report.config_hash);
    fs::create_dir_all(&sub)?;
    fs::write(sub.join("config.toml"), cfg.to_toml()?)?;
    if let Some(t) = &out.target {
        t.save(sub.join("target.json"))?;
    }
    if let Some(c) = &out.candidates {
        c.save(sub.join("candidates.json"))?;
    }
    if let Some(m) = &out.model {
        m.save(sub.join("model.json"))?;
    }
    fs::write(sub.join("report.json"), serde_json::to_string_pretty(&out.report)?)?;
    append_report(dir.join("reports.jsonl"), &out.report)
}

pub fn append_report(path: impl AsRef<Path>, report: &RunReport) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(report)?)?;
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<RunReport>> {
    let f = fs::File::open(path)?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// One run per value of `knob`, sharing the target and base seed.
pub fn sweep(cfg: &ExperimentConfig, knob: &str, values: &[f64]) -> Result<Vec<RunReport>> {
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set(knob, v)?;
            if c.name.is_empty() {
                c.name = format!("{knob}={v}");
            }
            Ok(run_experiment(&c)?.report)
        })
        .collect()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"))
}

fn status_str(r: &RunReport) -> String {
    match &r.status {
        RunStatus::Ok => "ok".into(),
        RunStatus::Failed { stage, .. } => format!("failed@{stage}"),
    }
}

/// CSV: knob value, status, loss, standard error, queries, candidates, m.
pub fn sweep_table(knob: &str, values: &[f64], reports: &[RunReport]) -> String {
    let mut s = format!("{knob},status,loss_rms,loss_mean,loss_std_error,mc_samples,queries,candidates,m\n");
    for (v, r) in values.iter().zip(reports) {
        let l = r.losses.as_ref();
        let _ = writeln!(
            s,
            "{v},{},{},{},{},{},{},{},{}",
            status_str(r),
            fmt_opt(r.loss_rms()),
            fmt_opt(l.map(|l| l.population.mean)),
            fmt_opt(l.map(|l| l.population.std_error)),
            l.map_or(0, |l| l.population.n_samples),
            r.query_count,
            r.candidates.map_or_else(|| "-".into(), |c| c.to_string()),
            r.schedule.map_or_else(|| "-".into(), |s| s.m.to_string()),
        );
    }
    s
}

/// Fixed-width text table of reports.
pub fn report_table(reports: &[RunReport]) -> String {
    let mut s = format!(
        "{:<16} {:<18} {:<16} {:>6} {:>12} {:>12} {:>12} {:>10} {:>5} {:>9} {:>6}\n",
        "hash", "name", "target", "status", "loss_rms", "std_err", "holdout", "queries", "|S|", "recovered", "pass"
    );
    for r in reports {
        let l = r.losses.as_ref();
        let rec = r
            .recovery
            .as_ref()
            .map_or("-".into(), |c| format!("{}/{}", c.matched.iter().filter(|&&m| m).count(), c.matched.len()));
        let _ = writeln!(
            s,
            "{:<16} {:<18} {:<16} {:>6} {:>12} {:>12} {:>12} {:>10} {:>5} {:>9} {:>6}",
            r.config_hash,
            truncate(&r.name, 18),
            r.target_kind,
            if matches!(r.status, RunStatus::Ok) { "ok" } else { "FAIL" },
            fmt_opt(r.loss_rms()),
            fmt_opt(l.map(|l| l.population.std_error)),
            fmt_opt(l.map(|l| l.holdout)),
            r.query_count,
            r.candidates.map_or("-".into(), |c| c.to_string()),
            rec,
            r.passed.map_or("-", |p| if p { "yes" } else { "no" }),
        );
    }
    s
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::l2_norm_mc;

    fn spec(kind: TargetKind, d: usize, k: usize) -> TargetSpec {
        TargetSpec {
            kind,
            d,
            k,
            r_bound: 2.0,
            b_bound: 2.0,
            seed: 1,
        }
    }

    fn small_config() -> ExperimentConfig {
        let mut extraction = ExtractionParams::new(0.5, 0.1, 2, 2.0, 2.0);
        extraction.knobs.c_r = 100.0;
        ExperimentConfig {
            name: "small".into(),
            seed: 4,
            target: spec(TargetKind::RandomSeparated { min_sin: 0.2 }, 3, 2),
            extraction,
            regression: RegressionConfig::default(),
            oracle: OracleConfig::default(),
            evaluation: EvaluationConfig {
                mc_samples: 2000,
                ..EvaluationConfig::default()
            },
            output_dir: None,
        }
    }

    #[test]
    fn bump_matches_closed_form() {
        let b = generate_target(
            &TargetKind::Bump {
                a: 0.0,
                width: Some(1.0),
                width_r: None,
            },
            1,
            3,
            2.0,
            2.0,
            0,
        )
        .unwrap();
        for x in [-1.0f64, 0.0, 0.25, 0.5, 0.75, 1.0, 3.0] {
            let want = x.max(0.0) + (x - 1.0f64).max(0.0) - (2.0 * x - 1.0f64).max(0.0);
            assert_eq!(b.evaluate(&[x]).unwrap(), want);
        }
        assert_eq!(b.evaluate(&[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn separated_targets_respect_their_predicate() {
        for seed in 0..20 {
            let net = generate_target(&TargetKind::RandomSeparated { min_sin: 0.2 }, 8, 6, 2.0, 2.0, seed).unwrap();
            assert_eq!(net.k(), 6);
            for (i, a) in net.neurons.iter().enumerate() {
                assert!(norm(&a.weight) <= 2.0 + 1e-12 && norm(&a.weight) >= 1.0 - 1e-12);
                assert!(a.bias.abs() <= 2.0);
                for b in &net.neurons[i + 1..] {
                    assert!(abs_sin_angle(&a.weight, &b.weight).unwrap() >= 0.2);
                }
            }
        }
    }

    #[test]
    fn cancelling_pair_is_zero() {
        let net = generate_target(&TargetKind::CancellingPair, 5, 2, 2.0, 2.0, 3).unwrap();
        assert_eq!(l2_norm_mc(&net, 10_000, 1).unwrap().mean, 0.0);
    }

    #[test]
    fn clumped_members_are_close_to_their_center() {
        let mut r = rng::seeded(2);
        let p = ClosenessParams::new(1e-3, 1e-3).unwrap();
        let c = random_clump(&mut r, 6, 5, p, 2.0, 2.0).unwrap();
        for n in &c.neurons {
            assert!(is_close(&n.weight, n.bias, &c.v_star, c.b_star, p).unwrap());
            assert!(n.bias.abs() <= 2.0 && norm(&n.weight) <= 2.0 + 1e-9);
        }
        let net = generate_target(
            &TargetKind::RandomClumped {
                clumps: 2,
                delta: 1e-3,
                alpha: 1e-3,
            },
            6,
            5,
            2.0,
            2.0,
            1,
        )
        .unwrap();
        assert_eq!(net.k(), 5);
    }

    #[test]
    fn target_kind_parsing() {
        assert_eq!(
            TargetKind::parse("bump:0:0.5").unwrap(),
            TargetKind::Bump {
                a: 0.0,
                width: Some(0.5),
                width_r: None
            }
        );
        assert!(matches!(TargetKind::parse("random-clumped:2:0.01:0.01").unwrap(), TargetKind::RandomClumped { clumps: 2, .. }));
        assert_eq!(
            TargetKind::parse("file:/tmp/a:b.json").unwrap(),
            TargetKind::File {
                path: PathBuf::from("/tmp/a:b.json")
            }
        );
        assert!(TargetKind::parse("nope").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = small_config();
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let doc = r#"
            seed = 1
            [target]
            kind = "bump"
            width_r = 10.0
            d = 1
            k = 3
            R = 2.0
            B = 1.0
            seed = 0
            [extraction]
            epsilon = 0.05
            delta_conf = 0.1
            k_bound = 3
            r_bound = 2.0
            b_bound = 1.0
            [extraction.knobs]
            c_tau = 2.0
        "#;
        let c = ExperimentConfig::from_toml(doc).unwrap();
        assert_eq!(c.extraction.knobs.c_tau, 2.0);
        assert_eq!(c.extraction.knobs.c_r, Knobs::default().c_r);
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2").is_err());
    }

    #[test]
    fn runs_are_reproducible_and_written() {
        let dir = std::env::temp_dir().join(format!("relu-harness-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let mut c = small_config();
        c.output_dir = Some(dir.clone());
        let a = run_experiment(&c).unwrap().report;
        let b = run_experiment(&c).unwrap().report;
        assert_eq!(a.status, RunStatus::Ok, "{a:?}");
        assert_eq!(a.without_timings(), b.without_timings());
        let logged = read_reports(dir.join("reports.jsonl")).unwrap();
        assert_eq!(logged.len(), 2);
        assert_eq!(logged[0].without_timings(), a.without_timings());
        assert!(dir.join(&a.config_hash).join("model.json").exists());
        assert!(report_table(&logged).lines().count() == 3);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn stage_failure_is_recorded() {
        let mut c = small_config();
        c.oracle.budget = Some(10);
        c.evaluation.max_loss_rms = Some(1.0);
        let r = run_experiment(&c).unwrap().report;
        assert!(matches!(&r.status, RunStatus::Failed { stage, .. } if stage == "get_neurons"), "{r:?}");
        assert_eq!(r.passed, Some(false));
        let mut c = small_config();
        c.extraction.knobs = Knobs::unit();
        c.extraction.max_intervals = 1000;
        let r = run_experiment(&c).unwrap().report;
        assert!(matches!(&r.status, RunStatus::Failed { stage, .. } if stage == "schedule"));
    }

    #[test]
    fn sweep_emits_one_row_per_value() {
        let c = small_config();
        let values = [50.0, 100.0];
        let reports = sweep(&c, "c_r", &values).unwrap();
        assert_eq!(reports.len(), 2);
        assert!(reports[0].schedule.unwrap().r < reports[1].schedule.unwrap().r);
        let table = sweep_table("c_r", &values, &reports);
        assert_eq!(table.lines().count(), 3);
        assert!(sweep(&c, "bogus", &values).is_err());
    }
}

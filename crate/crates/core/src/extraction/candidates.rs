use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::probe::{probe_chunk, IntervalProbe};
use super::{schedule, ExtractionParams, Schedule};
use crate::error::{Error, Result};
use crate::linalg::{dist, norm, sub};
use crate::model::GaussianLine;
use crate::oracle::Oracle;
use crate::rng::derive_seed;

/// Consecutive probes whose gradients agree to this relative tolerance are
/// taken to lie in the same linear piece.
pub const PIECE_TOL: f64 = 1e-6;
/// Candidates within this relative distance of an earlier one are dropped.
pub const DEDUP_TOL: f64 = 1e-9;

const CHUNK: u64 = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub w: Vec<f64>,
    pub b: f64,
    /// Indices of the two probes whose difference produced this entry.
    pub provenance: (u64, u64),
    #[serde(default)]
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub dim: usize,
    pub entries: Vec<CandidateEntry>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether some entry is within relative distance `tol` of `(w, b)` or
    /// of `(−w, −b)`.
    pub fn contains_neuron(&self, w: &[f64], b: f64, tol: f64) -> bool {
        self.find_neuron(w, b, tol).is_some()
    }

    pub fn find_neuron(&self, w: &[f64], b: f64, tol: f64) -> Option<usize> {
        let scale = (norm(w).powi(2) + b * b).sqrt();
        self.entries.iter().position(|e| {
            [1.0, -1.0].iter().any(|s| {
                let dw: f64 = e.w.iter().zip(w).map(|(x, y)| (x - s * y).powi(2)).sum();
                (dw + (e.b - s * b).powi(2)).sqrt() <= tol * scale
            })
        })
    }

    fn is_duplicate(&self, w: &[f64], b: f64) -> bool {
        let scale = 1.0 + (norm(w).powi(2) + b * b).sqrt();
        self.entries.iter().any(|e| {
            let dw: f64 = e.w.iter().zip(w).map(|(x, y)| (x - y).powi(2)).sum();
            (dw + (e.b - b).powi(2)).sqrt() <= DEDUP_TOL * scale
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: CandidateSet = serde_json::from_str(s)?;
        if set.entries.iter().any(|e| e.w.len() != set.dim) {
            return Err(Error::Format("candidate weight length differs from dim".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub dim: usize,
    pub schedule: Schedule,
    pub lines: usize,
    pub queries: u64,
    pub valid_probes: u64,
    pub invalid_probes: u64,
    /// Maximal runs of consecutive probes in one linear piece.
    pub runs: usize,
    /// Distinct pieces after merging runs with equal `(∇, c)`.
    pub pieces: usize,
    pub pairs: usize,
    pub rejected_by_filter: usize,
    pub candidates: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
struct Member {
    index: u64,
    t: f64,
    grad: Vec<f64>,
    bias: f64,
}

impl Member {
    fn new(p: IntervalProbe, line: &GaussianLine) -> Self {
        Member {
            index: p.index,
            t: p.t_mid(),
            bias: p.piece_bias(line),
            grad: p.grad,
        }
    }
}

fn nearer(a: Member, b: Member) -> Member {
    if b.t.abs() < a.t.abs() {
        b
    } else {
        a
    }
}

/// A run of consecutive valid probes in one piece. The first and latest
/// members border the run and may sit next to an undetected slope change,
/// so the representative is taken from the interior when there is one.
struct Run {
    first: Member,
    last: Option<Member>,
    interior: Option<Member>,
}

impl Run {
    fn accepts(&self, g: &[f64]) -> bool {
        let prev = self.last.as_ref().unwrap_or(&self.first);
        dist(&prev.grad, g) <= PIECE_TOL * (1.0 + norm(&prev.grad))
    }

    fn push(&mut self, m: Member) {
        if let Some(old) = self.last.replace(m) {
            self.interior = Some(match self.interior.take() {
                Some(i) => nearer(i, old),
                None => old,
            });
        }
    }

    fn representative(self) -> Member {
        match (self.interior, self.last) {
            (Some(i), _) => i,
            (None, Some(l)) => nearer(self.first, l),
            (None, None) => self.first,
        }
    }
}

struct Harvest {
    runs: Vec<Member>,
    valid: u64,
    invalid: u64,
}

fn harvest_line<O: Oracle + ?Sized>(
    oracle: &O,
    line: &GaussianLine,
    sched: &Schedule,
    probe_seed: u64,
) -> Result<Harvest> {
    let mut out = Harvest {
        runs: Vec::new(),
        valid: 0,
        invalid: 0,
    };
    let mut current: Option<Run> = None;
    let mut carried = None;
    let mut start = 0;
    while start < sched.m {
        let end = (start + CHUNK).min(sched.m);
        let (probes, last) = probe_chunk(oracle, line, sched, probe_seed, start..end, carried)?;
        carried = Some(last);
        for p in probes {
            if !p.valid || p.grad.iter().any(|g| !g.is_finite()) {
                out.invalid += 1;
                out.runs.extend(current.take().map(Run::representative));
                continue;
            }
            out.valid += 1;
            let m = Member::new(p, line);
            match current.as_mut() {
                Some(run) if run.accepts(&m.grad) => run.push(m),
                _ => {
                    out.runs.extend(current.take().map(Run::representative));
                    current = Some(Run {
                        first: m,
                        last: None,
                        interior: None,
                    });
                }
            }
        }
        start = end;
    }
    out.runs.extend(current.map(Run::representative));
    Ok(out)
}

/// Merge representatives of runs that lie in the same piece, keeping the
/// one nearest the base point.
fn distinct_pieces(runs: Vec<Member>) -> Vec<Member> {
    let mut pieces: Vec<Member> = Vec::new();
    for m in runs {
        let same = pieces.iter().position(|q| {
            dist(&q.grad, &m.grad) <= PIECE_TOL * (1.0 + norm(&q.grad))
                && (q.bias - m.bias).abs() <= PIECE_TOL * (1.0 + q.bias.abs())
        });
        match same {
            Some(i) => {
                if m.t.abs() < pieces[i].t.abs() {
                    pieces[i] = m;
                }
            }
            None => pieces.push(m),
        }
    }
    pieces
}

/// Harvest neuron candidates along `p.lines` Gaussian lines.
///
/// Queries per line are `m(d+1)` for gradients at midpoints plus `m+1` for
/// the interval endpoints: midpoint values serve both the bias and the
/// gradient probe, and adjacent intervals share an endpoint.
pub fn get_neurons<O: Oracle + ?Sized>(
    oracle: &O,
    p: &ExtractionParams,
    seed: u64,
) -> Result<(CandidateSet, ExtractionReport)> {
    let started = Instant::now();
    let d = oracle.dim();
    let sched = schedule(p, d)?;
    let needed = sched.queries_per_line(d).saturating_mul(p.lines as u64);
    let summary = oracle.summary();
    if let Some(budget) = summary.budget {
        let remaining = budget.saturating_sub(summary.count);
        if needed > remaining {
            return Err(Error::Resource {
                param: "query budget for candidate harvesting",
                value: needed as f64,
                cap: remaining as f64,
            });
        }
    }
    let count_before = oracle.query_count();
    let w_cap = sched.weight_filter(p);
    let b_cap = sched.bias_filter(p);

    let mut set = CandidateSet {
        dim: d,
        entries: Vec::new(),
    };
    let mut report = ExtractionReport {
        dim: d,
        schedule: sched,
        lines: p.lines,
        queries: 0,
        valid_probes: 0,
        invalid_probes: 0,
        runs: 0,
        pieces: 0,
        pairs: 0,
        rejected_by_filter: 0,
        candidates: 0,
        wall_seconds: 0.0,
    };

    for l in 0..p.lines {
        let line = GaussianLine::sample(d, derive_seed(seed, 2 * l as u64))?;
        let h = harvest_line(oracle, &line, &sched, derive_seed(seed, 2 * l as u64 + 1))?;
        report.valid_probes += h.valid;
        report.invalid_probes += h.invalid;
        report.runs += h.runs.len();
        let pieces = distinct_pieces(h.runs);
        report.pieces += pieces.len();
        let g_scale = 1.0 + pieces.iter().map(|m| norm(&m.grad)).fold(0.0, f64::max);

        for a in &pieces {
            for b in &pieces {
                if a.index == b.index {
                    continue;
                }
                let w = sub(&a.grad, &b.grad);
                let bias = a.bias - b.bias;
                if norm(&w) <= PIECE_TOL * g_scale {
                    continue;
                }
                report.pairs += 1;
                if !(norm(&w) <= w_cap && bias.abs() <= b_cap) {
                    report.rejected_by_filter += 1;
                    continue;
                }
                if !set.is_duplicate(&w, bias) {
                    set.entries.push(CandidateEntry {
                        w,
                        b: bias,
                        provenance: (a.index, b.index),
                        line: l,
                    });
                }
            }
        }
    }
    report.queries = oracle.query_count() - count_before;
    report.candidates = set.len();
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((set, report))
}

//! Query-driven candidate harvesting along a random Gaussian line.
//!
//! The line `[−τ, τ]` is cut into `m` intervals of length `r`. Each interval
//! gets a probe: the gradient of `F` at its midpoint (finite differences) and
//! the intercept of `F|_L` on it. Two probes inside different linear pieces
//! differ by a signed sum of neurons; differences across a single critical
//! point recover one neuron exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GaussianLine;

mod candidates;
mod probe;

pub use candidates::{get_neurons, CandidateEntry, CandidateSet, ExtractionReport};
pub use probe::{get_bias, get_gradient, probe_intervals, BiasProbe, IntervalProbe};

/// Hidden constants of the schedule.
///
/// The defaults are calibrated, not all equal to one: with every knob at 1
/// the grid width for a `d = 8, k = 4, ε = 0.05` instance is about `1e−11`
/// and the interval count about `1e14`. [`Knobs::unit`] gives the literal
/// setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Knobs {
    /// 𝔓 in `Δ = (ε/𝔓)^{9/2}`.
    pub poly_const: f64,
    pub c_r: f64,
    pub c_tau: f64,
    pub c_alpha: f64,
    /// Constant in the candidate bias filter.
    pub c_bias: f64,
    /// Override for the smallest neuron norm that must be resolved.
    /// Defaults to `ε/(k·𝔓)`.
    pub w_min: Option<f64>,
}

impl Default for Knobs {
    fn default() -> Self {
        Knobs {
            poly_const: 1.0,
            c_r: 4.0e8,
            c_tau: 1.0,
            c_alpha: 1.0,
            c_bias: 1.0,
            w_min: None,
        }
    }
}

impl Knobs {
    pub fn unit() -> Self {
        Knobs {
            poly_const: 1.0,
            c_r: 1.0,
            c_tau: 1.0,
            c_alpha: 1.0,
            c_bias: 1.0,
            w_min: None,
        }
    }

    pub const NAMES: [&'static str; 6] = ["poly_const", "c_r", "c_tau", "c_alpha", "c_bias", "w_min"];

    pub fn get(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "poly_const" => self.poly_const,
            "c_r" => self.c_r,
            "c_tau" => self.c_tau,
            "c_alpha" => self.c_alpha,
            "c_bias" => self.c_bias,
            "w_min" => self.w_min.unwrap_or(f64::NAN),
            _ => return Err(unknown_knob(name)),
        })
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::input(format!("knob {name} must be positive, got {value}")));
        }
        match name {
            "poly_const" => self.poly_const = value,
            "c_r" => self.c_r = value,
            "c_tau" => self.c_tau = value,
            "c_alpha" => self.c_alpha = value,
            "c_bias" => self.c_bias = value,
            "w_min" => self.w_min = Some(value),
            _ => return Err(unknown_knob(name)),
        }
        Ok(())
    }
}

fn unknown_knob(name: &str) -> Error {
    Error::input(format!(
        "unknown knob {name:?}; expected one of {}",
        Knobs::NAMES.join(", ")
    ))
}

pub const DEFAULT_MAX_INTERVALS: u64 = 20_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionParams {
    pub epsilon: f64,
    pub delta_conf: f64,
    pub k_bound: usize,
    pub r_bound: f64,
    pub b_bound: f64,
    #[serde(default)]
    pub knobs: Knobs,
    /// Cap on `m`; exceeding it is a resource error.
    #[serde(default = "default_max_intervals")]
    pub max_intervals: u64,
    /// Number of independent lines whose candidate sets are united.
    #[serde(default = "default_lines")]
    pub lines: usize,
}

fn default_max_intervals() -> u64 {
    DEFAULT_MAX_INTERVALS
}

fn default_lines() -> usize {
    1
}

impl ExtractionParams {
    pub fn new(epsilon: f64, delta_conf: f64, k_bound: usize, r_bound: f64, b_bound: f64) -> Self {
        ExtractionParams {
            epsilon,
            delta_conf,
            k_bound,
            r_bound,
            b_bound,
            knobs: Knobs::default(),
            max_intervals: DEFAULT_MAX_INTERVALS,
            lines: 1,
        }
    }

    pub fn with_knobs(mut self, knobs: Knobs) -> Self {
        self.knobs = knobs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epsilon", self.epsilon),
            ("delta", self.delta_conf),
            ("R", self.r_bound),
            ("B", self.b_bound),
            ("poly_const", self.knobs.poly_const),
            ("c_r", self.knobs.c_r),
            ("c_tau", self.knobs.c_tau),
            ("c_alpha", self.knobs.c_alpha),
            ("c_bias", self.knobs.c_bias),
            ("w_min", self.knobs.w_min.unwrap_or(1.0)),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.delta_conf >= 1.0 {
            return Err(Error::input("confidence δ must be below 1"));
        }
        if self.k_bound == 0 {
            return Err(Error::input("k must be at least 1"));
        }
        if self.lines == 0 {
            return Err(Error::input("at least one line is needed"));
        }
        Ok(())
    }

    pub fn w_min_bound(&self) -> f64 {
        self.knobs
            .w_min
            .unwrap_or(self.epsilon / (self.k_bound as f64 * self.knobs.poly_const))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(rename = "Delta")]
    pub delta: f64,
    pub r: f64,
    pub tau: f64,
    pub alpha_fd: f64,
    pub m: u64,
}

impl Schedule {
    /// The formulas without the cap on `m`. `m` saturates at `u64::MAX`.
    pub fn uncapped(p: &ExtractionParams, d: usize) -> Result<Schedule> {
        p.validate()?;
        if d == 0 {
            return Err(Error::input("dimension must be at least 1"));
        }
        let kn = &p.knobs;
        let k = p.k_bound as f64;
        let sd = (d as f64).sqrt();
        let log_k = (k / p.delta_conf).ln().sqrt();
        let log_1 = (1.0 / p.delta_conf).ln().sqrt();

        let delta = (p.epsilon / kn.poly_const).powf(4.5);
        let r = kn.c_r * delta * p.delta_conf.powi(2) / (k.powi(4) * (sd + log_k));
        let spread = k * (sd + log_1);
        let tau = k * r + kn.c_tau * (spread / p.w_min_bound() + spread * log_k);
        let alpha_fd = p.delta_conf * r / (kn.c_alpha * k * (sd + log_k));
        let m_real = (2.0 * tau / r).ceil();
        if !(r > 0.0 && r.is_finite() && tau.is_finite() && alpha_fd > 0.0) {
            return Err(Error::Numerical(format!(
                "schedule is degenerate: r={r}, τ={tau}, α={alpha_fd}"
            )));
        }
        let m = if m_real >= u64::MAX as f64 { u64::MAX } else { m_real as u64 };
        Ok(Schedule {
            delta,
            r,
            tau,
            alpha_fd,
            m,
        })
    }

    /// Left end of interval `j`.
    #[inline]
    pub fn lo(&self, j: u64) -> f64 {
        -self.tau + j as f64 * self.r
    }

    /// Upper bound on `|b|` for a candidate.
    pub fn bias_filter(&self, p: &ExtractionParams) -> f64 {
        let k = p.k_bound as f64;
        p.knobs.c_bias * self.delta * k * k * p.r_bound * (k / p.delta_conf).ln().sqrt() + k * p.b_bound
    }

    /// Upper bound on `‖w‖` for a candidate.
    pub fn weight_filter(&self, p: &ExtractionParams) -> f64 {
        p.k_bound as f64 * p.r_bound
    }

    /// Queries spent by one line: `m(d+1)` at midpoints and perturbed
    /// midpoints plus `m+1` shared interval endpoints.
    pub fn queries_per_line(&self, d: usize) -> u64 {
        self.m
            .saturating_mul(d as u64 + 2)
            .saturating_add(1)
    }
}

/// `Δ → r → τ → α_fd → m`, failing when `m` exceeds `p.max_intervals`.
pub fn schedule(p: &ExtractionParams, d: usize) -> Result<Schedule> {
    let s = Schedule::uncapped(p, d)?;
    if s.m > p.max_intervals {
        return Err(Error::Resource {
            param: "m (interval count 2τ/r)",
            value: s.m as f64,
            cap: p.max_intervals as f64,
        });
    }
    Ok(s)
}

/// `x₀ ∼ N(0, I_d)`, `v` uniform on the unit sphere; deterministic in `seed`.
pub fn sample_gaussian_line(d: usize, seed: u64) -> Result<GaussianLine> {
    GaussianLine::sample(d, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;

    fn small() -> ExtractionParams {
        ExtractionParams::new(0.1, 0.1, 4, 2.0, 2.0).with_knobs(Knobs::unit())
    }

    #[test]
    fn line_is_reproducible_and_unit() {
        let a = sample_gaussian_line(8, 3).unwrap();
        let b = sample_gaussian_line(8, 3).unwrap();
        assert_eq!(a, b);
        assert!((norm(&a.v) - 1.0).abs() < 1e-12);
        assert!(sample_gaussian_line(0, 3).is_err());
    }

    #[test]
    fn base_point_mean_is_near_zero() {
        let d = 3;
        let n = 10_000;
        let mut mean = vec![0.0; d];
        for s in 0..n {
            let l = sample_gaussian_line(d, s).unwrap();
            mean.iter_mut().zip(&l.x0).for_each(|(m, x)| *m += x / n as f64);
        }
        assert!(mean.iter().all(|m| m.abs() <= 4.0 / (n as f64).sqrt()));
    }

    #[test]
    fn delta_has_nine_halves_exponent() {
        let mut p = small();
        p.knobs.poly_const = 2.0;
        let s = Schedule::uncapped(&p, 8).unwrap();
        assert_eq!(s.delta, (0.1f64 / 2.0).powf(4.5));
    }

    #[test]
    fn larger_epsilon_gives_larger_delta_and_r() {
        let a = Schedule::uncapped(&small(), 8).unwrap();
        let mut p = small();
        p.epsilon *= 2.0;
        let b = Schedule::uncapped(&p, 8).unwrap();
        assert!(b.delta > a.delta && b.r > a.r);
    }

    // Values computed independently from the closed-form expressions.
    #[test]
    fn unit_knob_snapshot() {
        let s = Schedule::uncapped(&small(), 8).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs();
        assert!(close(s.delta, 3.162_277_660_168_379e-5), "{}", s.delta);
        assert!(close(s.r, 2.601_065_064_938_084e-10), "{}", s.r);
        assert!(close(s.tau, 728.724_063_766_029_9), "{}", s.tau);
        assert!(close(s.alpha_fd, 1.369_248_917_211_121e-12), "{}", s.alpha_fd);
        assert_eq!(s.m, 5_603_274_393_933);
        assert!(matches!(
            schedule(&small(), 8),
            Err(Error::Resource { .. })
        ));
    }

    #[test]
    fn default_knobs_fit_the_acceptance_budget() {
        let p = ExtractionParams::new(0.05, 0.1, 4, 2.0, 2.0);
        let s = schedule(&p, 8).unwrap();
        assert!(s.queries_per_line(8) + 10_000 <= 10_000_000, "{s:?}");
    }

    #[test]
    fn knobs_by_name() {
        let mut k = Knobs::default();
        k.set("c_tau", 3.0).unwrap();
        assert_eq!(k.get("c_tau").unwrap(), 3.0);
        assert!(k.set("nope", 1.0).is_err());
        assert!(k.set("c_r", -1.0).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = small();
        p.k_bound = 0;
        assert!(Schedule::uncapped(&p, 8).is_err());
        let mut p = small();
        p.delta_conf = 1.5;
        assert!(p.validate().is_err());
    }
}

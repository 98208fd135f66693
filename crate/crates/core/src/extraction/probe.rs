use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Schedule;
use crate::error::{check_dim, Error, Result};
use crate::linalg::dot;
use crate::model::GaussianLine;
use crate::oracle::Oracle;
use crate::rng::{self, derive_seed};

/// Midpoint-vs-secant residual above which an interval is taken to contain
/// a slope change, relative to `1 + |F(t_mid)|`.
pub const STRADDLE_TOL: f64 = 1e-9;

const MAX_FRAME_ATTEMPTS: u64 = 3;
const FRAME_ORTHO_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasProbe {
    /// `F|_L(t_mid) − slope·t_mid`.
    pub intercept: f64,
    /// Secant slope over the interval.
    pub slope: f64,
    pub valid: bool,
}

fn bias_from_values(lo: f64, hi: f64, f_lo: f64, f_mid: f64, f_hi: f64) -> BiasProbe {
    let t_mid = 0.5 * (lo + hi);
    let slope = (f_hi - f_lo) / (hi - lo);
    let residual = (f_mid - 0.5 * (f_lo + f_hi)).abs();
    BiasProbe {
        intercept: f_mid - slope * t_mid,
        slope,
        valid: residual <= STRADDLE_TOL * (1.0 + f_mid.abs()),
    }
}

/// Intercept of `F|_L` on `[lo, hi]` from three queries.
pub fn get_bias<O: Oracle + ?Sized>(oracle: &O, line: &GaussianLine, lo: f64, hi: f64) -> Result<BiasProbe> {
    check_dim(oracle.dim(), line.dim())?;
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::input(format!("degenerate interval [{lo}, {hi}]")));
    }
    let mid = 0.5 * (lo + hi);
    let pts: Vec<f64> = [lo, hi, mid].iter().flat_map(|&t| line.point(t)).collect();
    let f = oracle.query_batch(&pts)?;
    Ok(bias_from_values(lo, hi, f[0], f[2], f[1]))
}

/// Orthonormal directions as the columns of a `d × d` matrix, from the QR
/// factor of a Gaussian matrix. Retries with derived seeds when the factor
/// is not orthonormal to working precision.
fn direction_frame(d: usize, seed: u64) -> Result<DMatrix<f64>> {
    for attempt in 0..MAX_FRAME_ATTEMPTS {
        let mut g = rng::seeded(derive_seed(seed, attempt));
        let a = DMatrix::from_vec(d, d, rng::gaussian_vec(&mut g, d * d));
        let q = a.qr().q();
        let defect = (q.transpose() * &q - DMatrix::identity(d, d)).amax();
        if defect <= FRAME_ORTHO_TOL {
            return Ok(q);
        }
    }
    Err(Error::Numerical(format!(
        "no well-conditioned direction frame in {MAX_FRAME_ATTEMPTS} attempts (d={d})"
    )))
}

fn perturbed_points(x: &[f64], frame: &DMatrix<f64>, alpha: f64, out: &mut Vec<f64>) {
    for col in frame.column_iter() {
        out.extend(x.iter().zip(col.iter()).map(|(xi, zi)| xi + alpha * zi));
    }
}

/// Solve `⟨w, z_j⟩ = (F(x + αz_j) − F(x))/α`. The frame is orthogonal, so
/// the system matrix `Zᵀ` has inverse `Z`.
fn solve_gradient(frame: &DMatrix<f64>, f0: f64, f_perturbed: &[f64], alpha: f64) -> Vec<f64> {
    let rhs: Vec<f64> = f_perturbed.iter().map(|f| (f - f0) / alpha).collect();
    let d = rhs.len();
    (0..d)
        .map(|i| (0..d).map(|j| frame[(i, j)] * rhs[j]).sum())
        .collect()
}

/// Finite-difference gradient at `x` from `d + 1` queries. Exact (up to
/// rounding) when every neuron keeps its activation state within distance
/// `alpha` of `x`.
pub fn get_gradient<O: Oracle + ?Sized>(oracle: &O, x: &[f64], alpha: f64, seed: u64) -> Result<Vec<f64>> {
    let d = oracle.dim();
    check_dim(d, x.len())?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::input(format!("finite-difference step must be positive, got {alpha}")));
    }
    let frame = direction_frame(d, seed)?;
    let mut pts = x.to_vec();
    perturbed_points(x, &frame, alpha, &mut pts);
    let f = oracle.query_batch(&pts)?;
    Ok(solve_gradient(&frame, f[0], &f[1..], alpha))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalProbe {
    pub index: u64,
    pub interval: [f64; 2],
    /// Gradient of `F` at the interval midpoint.
    pub grad: Vec<f64>,
    /// Intercept `b_L(I)` of `F|_L` on the interval.
    pub intercept: f64,
    pub valid: bool,
}

impl IntervalProbe {
    pub fn t_mid(&self) -> f64 {
        0.5 * (self.interval[0] + self.interval[1])
    }

    /// Bias `c` of the linear piece `⟨∇, x⟩ − c` through this probe.
    pub fn piece_bias(&self, line: &GaussianLine) -> f64 {
        dot(&self.grad, &line.x0) - self.intercept
    }
}

/// Probes of the intervals in `range`. Queries the `len + 1` endpoints
/// (skipping the first when `carried` holds its value), the midpoints and
/// `d` perturbed midpoints each, in a single batch. Returns the probes and
/// the value at the last endpoint.
pub(crate) fn probe_chunk<O: Oracle + ?Sized>(
    oracle: &O,
    line: &GaussianLine,
    sched: &Schedule,
    probe_seed: u64,
    range: Range<u64>,
    carried: Option<f64>,
) -> Result<(Vec<IntervalProbe>, f64)> {
    let d = line.dim();
    check_dim(oracle.dim(), d)?;
    let n = (range.end - range.start) as usize;
    let first_endpoint = carried.is_some() as u64;
    let frames = range
        .clone()
        .map(|j| direction_frame(d, derive_seed(probe_seed, j)))
        .collect::<Result<Vec<_>>>()?;

    let mut pts = Vec::with_capacity((2 * n + 1 + n * d) * d);
    for j in range.start + first_endpoint..=range.end {
        pts.extend(line.point(sched.lo(j)));
    }
    let mids: Vec<Vec<f64>> = range
        .clone()
        .map(|j| line.point(0.5 * (sched.lo(j) + sched.lo(j + 1))))
        .collect();
    mids.iter().for_each(|x| pts.extend_from_slice(x));
    for (x, frame) in mids.iter().zip(&frames) {
        perturbed_points(x, frame, sched.alpha_fd, &mut pts);
    }

    let f = oracle.query_batch(&pts)?;
    let mut endpoints = Vec::with_capacity(n + 1);
    endpoints.extend(carried);
    let n_new = n + 1 - first_endpoint as usize;
    endpoints.extend_from_slice(&f[..n_new]);
    let f_mid = &f[n_new..n_new + n];
    let f_pert = &f[n_new + n..];

    let probes = range
        .clone()
        .enumerate()
        .map(|(i, j)| {
            let (lo, hi) = (sched.lo(j), sched.lo(j + 1));
            let bias = bias_from_values(lo, hi, endpoints[i], f_mid[i], endpoints[i + 1]);
            IntervalProbe {
                index: j,
                interval: [lo, hi],
                grad: solve_gradient(&frames[i], f_mid[i], &f_pert[i * d..(i + 1) * d], sched.alpha_fd),
                intercept: bias.intercept,
                valid: bias.valid,
            }
        })
        .collect();
    Ok((probes, endpoints[n]))
}

/// Probes for the intervals `range` of the grid, as `get_neurons` computes
/// them with the same seed.
pub fn probe_intervals<O: Oracle + ?Sized>(
    oracle: &O,
    line: &GaussianLine,
    sched: &Schedule,
    probe_seed: u64,
    range: Range<u64>,
) -> Result<Vec<IntervalProbe>> {
    if range.end > sched.m || range.start >= range.end {
        return Err(Error::input(format!(
            "interval range {range:?} is empty or outside 0..{}",
            sched.m
        )));
    }
    probe_chunk(oracle, line, sched, probe_seed, range, None).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Network, Neuron, Sign};
    use crate::oracle::InProcessOracle;

    fn shifted_relu() -> (InProcessOracle, GaussianLine) {
        let net = Network::new(1, vec![Neuron::new(Sign::Pos, vec![1.0], 1.0)]).unwrap();
        (InProcessOracle::new(net), GaussianLine::new(vec![0.0], vec![1.0]).unwrap())
    }

    #[test]
    fn bias_on_linear_piece() {
        let (o, l) = shifted_relu();
        let b = get_bias(&o, &l, 2.0, 3.0).unwrap();
        assert!(b.valid);
        assert!((b.intercept + 1.0).abs() < 1e-12);
        assert_eq!(o.query_count(), 3);
    }

    #[test]
    fn bias_on_zero_piece() {
        let (o, l) = shifted_relu();
        let b = get_bias(&o, &l, -3.0, -2.0).unwrap();
        assert!(b.valid);
        assert_eq!(b.intercept, 0.0);
    }

    #[test]
    fn straddling_interval_is_invalid() {
        let (o, l) = shifted_relu();
        assert!(!get_bias(&o, &l, 0.5, 1.5).unwrap().valid);
        assert!(get_bias(&o, &l, 1.0, 1.0).is_err());
        assert!(get_bias(&o, &l, 2.0, 1.0).is_err());
    }

    #[test]
    fn gradient_single_active_neuron() {
        let net = Network::new(2, vec![Neuron::new(Sign::Pos, vec![1.0, 0.0], 0.0)]).unwrap();
        let o = InProcessOracle::new(net);
        let g = get_gradient(&o, &[1.0, 0.0], 0.1, 5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12 && g[1].abs() < 1e-12, "{g:?}");
        assert_eq!(o.query_count(), 3);
    }

    #[test]
    fn gradient_ignores_inactive_neuron() {
        let net = Network::new(
            2,
            vec![
                Neuron::new(Sign::Pos, vec![1.0, 0.0], 0.5),
                Neuron::new(Sign::Pos, vec![0.0, 1.0], 0.0),
            ],
        )
        .unwrap();
        let o = InProcessOracle::new(net);
        let g = get_gradient(&o, &[-1.0, 1.0], 0.1, 9).unwrap();
        assert!(g[0].abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12, "{g:?}");
    }

    #[test]
    fn frames_are_orthonormal_and_deterministic() {
        for d in 1..10 {
            let q = direction_frame(d, d as u64).unwrap();
            assert!((q.transpose() * &q - DMatrix::identity(d, d)).amax() < 1e-12);
            assert_eq!(q, direction_frame(d, d as u64).unwrap());
        }
    }

    #[test]
    fn chunked_probes_match_single_pass() {
        let net = Network::new(
            3,
            vec![
                Neuron::new(Sign::Pos, vec![1.0, 0.5, 0.0], 0.2),
                Neuron::new(Sign::Neg, vec![0.0, 1.0, -1.0], -0.3),
            ],
        )
        .unwrap();
        let line = GaussianLine::sample(3, 1).unwrap();
        let sched = Schedule {
            delta: 0.0,
            r: 0.05,
            tau: 3.0,
            alpha_fd: 1e-4,
            m: 120,
        };
        let o = InProcessOracle::new(net);
        let whole = probe_intervals(&o, &line, &sched, 7, 0..120).unwrap();
        assert_eq!(o.query_count(), 120 * 5 + 1);
        let (a, last) = probe_chunk(&o, &line, &sched, 7, 0..50, None).unwrap();
        let (b, _) = probe_chunk(&o, &line, &sched, 7, 50..120, Some(last)).unwrap();
        let joined: Vec<_> = a.into_iter().chain(b).collect();
        assert_eq!(whole, joined);
        assert!(whole.iter().all(|p| (p.interval[1] - p.interval[0] - 0.05).abs() < 1e-12));
    }
}

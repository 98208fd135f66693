//! Least squares over ReLU features of harvested candidates, and the
//! end-to-end learner built on it.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::extraction::{get_neurons, CandidateSet, ExtractionParams, ExtractionReport};
use crate::linalg::{dot, norm, relu};
use crate::model::{Network, Neuron};
use crate::oracle::Oracle;
use crate::rng::{self, derive_seed};

const MAX_BISECTIONS: usize = 200;
const QUERY_CHUNK: usize = 4096;
const MAX_REJECTIONS: u64 = 1_000_000;
pub const MIN_DEFAULT_SAMPLES: usize = 10_000;

/// Features `(σ(⟨ŵ_j,x⟩ − b̂_j))_j`, then `x`, then `1`; and the label `F(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub z: Vec<f64>,
    pub y: f64,
}

pub fn featurize(candidates: &CandidateSet, x: &[f64], y: f64) -> Result<FeatureSample> {
    check_dim(candidates.dim, x.len())?;
    let mut z = Vec::with_capacity(candidates.len() + x.len() + 1);
    z.extend(candidates.entries.iter().map(|e| relu(dot(&e.w, x) - e.b)));
    z.extend_from_slice(x);
    z.push(1.0);
    Ok(FeatureSample { z, y })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<FeatureSample>,
    /// Gaussian draws made, accepted or not. Rejected draws are not queried.
    pub draws: u64,
    pub warning: Option<String>,
}

impl Dataset {
    pub fn acceptance_rate(&self) -> f64 {
        self.samples.len() as f64 / self.draws.max(1) as f64
    }
}

/// `n` samples of `x ∼ N(0, I)` conditioned on `‖x‖ ≤ m_bound`, labelled by
/// the oracle. Sample `i` uses its own derived seed.
pub fn draw_dataset<O: Oracle + ?Sized>(
    oracle: &O,
    candidates: &CandidateSet,
    n: usize,
    m_bound: f64,
    seed: u64,
) -> Result<Dataset> {
    let d = oracle.dim();
    check_dim(d, candidates.dim)?;
    if n == 0 {
        return Err(Error::input("dataset needs at least one sample"));
    }
    if !(m_bound > 0.0) {
        return Err(Error::input(format!("truncation radius must be positive, got {m_bound}")));
    }
    let mut draws = 0u64;
    let mut samples = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + QUERY_CHUNK).min(n);
        let mut pts = Vec::with_capacity((end - start) * d);
        for i in start..end {
            let mut g = rng::seeded(derive_seed(seed, i as u64));
            let mut attempts = 0;
            loop {
                draws += 1;
                attempts += 1;
                let x = rng::gaussian_vec(&mut g, d);
                if norm(&x) <= m_bound {
                    pts.extend(x);
                    break;
                }
                if attempts == MAX_REJECTIONS {
                    return Err(Error::Numerical(format!(
                        "truncation radius {m_bound} rejected {MAX_REJECTIONS} consecutive draws in d={d}"
                    )));
                }
            }
        }
        let ys = oracle.query_batch(&pts)?;
        for (x, y) in pts.chunks_exact(d).zip(ys) {
            samples.push(featurize(candidates, x, y)?);
        }
        start = end;
    }
    let rate = n as f64 / draws as f64;
    let warning = (rate < 0.5).then(|| {
        format!("truncation radius {m_bound} rejects {:.1}% of draws; it is too small", 100.0 * (1.0 - rate))
    });
    Ok(Dataset {
        samples,
        draws,
        warning,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsqSolution {
    pub v: Vec<f64>,
    /// Ridge parameter of the returned point; zero when the minimum-norm
    /// least-squares solution is already feasible.
    pub lambda: f64,
    /// `Σ (⟨v, z_i⟩ − y_i)²`.
    pub objective: f64,
    pub bisections: usize,
}

fn design(samples: &[FeatureSample]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = samples
        .first()
        .ok_or_else(|| Error::input("least squares needs at least one sample"))?
        .z
        .len();
    if samples.iter().any(|s| s.z.len() != p) {
        return Err(Error::input("feature vectors have inconsistent lengths"));
    }
    let z = DMatrix::from_row_iterator(samples.len(), p, samples.iter().flat_map(|s| s.z.iter().copied()));
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.y));
    Ok((z, y))
}

pub fn objective(samples: &[FeatureSample], v: &[f64]) -> f64 {
    samples.iter().map(|s| (dot(&s.z, v) - s.y).powi(2)).sum()
}

/// `argmin_{‖v‖ ≤ W} Σ (⟨v, z_i⟩ − y_i)²`.
///
/// From the SVD `Z = U Σ Vᵀ` the ridge path is
/// `v(λ) = V diag(σ/(σ² + λ)) Uᵀy`, whose norm decreases in `λ`. When the
/// minimum-norm least-squares solution `v(0)` is infeasible, `λ` is bisected
/// until `W(1 − tol) ≤ ‖v(λ)‖ ≤ W`.
pub fn constrained_least_squares(samples: &[FeatureSample], w_bound: f64, tol: f64) -> Result<LsqSolution> {
    if !(w_bound > 0.0) || !(tol > 0.0 && tol < 1.0) {
        return Err(Error::input(format!("need W > 0 and 0 < tol < 1, got W={w_bound}, tol={tol}")));
    }
    let (z, y) = design(samples)?;
    let (n, p) = z.shape();
    let svd = z.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Numerical("SVD did not produce singular vectors".into())),
    };
    let sigma = svd.singular_values;
    let c = u.transpose() * &y;
    let s_max = sigma.max();
    let cutoff = s_max * n.max(p) as f64 * f64::EPSILON;

    // Weights on the right singular vectors along the path. Directions below
    // the rank cutoff are dropped at every λ so the path is continuous at 0.
    let coeffs = |lambda: f64| -> Vec<f64> {
        sigma
            .iter()
            .zip(c.iter())
            .map(|(&s, &ci)| if s > cutoff { s * ci / (s * s + lambda) } else { 0.0 })
            .collect()
    };
    let path_norm = |lambda: f64| norm(&coeffs(lambda));

    let mut lambda = 0.0;
    let mut bisections = 0;
    if path_norm(0.0) > w_bound {
        let mut lo = 0.0;
        let mut hi = s_max * norm(c.as_slice()) / w_bound;
        loop {
            let nh = path_norm(hi);
            if nh <= w_bound && nh >= w_bound * (1.0 - tol) {
                break;
            }
            if bisections == MAX_BISECTIONS {
                return Err(Error::Numerical(format!(
                    "ridge bisection did not converge in {MAX_BISECTIONS} steps: λ ∈ [{lo:e}, {hi:e}], \
                     ‖v(λ_hi)‖ = {nh}, W = {w_bound}"
                )));
            }
            bisections += 1;
            let mid = 0.5 * (lo + hi);
            if path_norm(mid) > w_bound {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lambda = hi;
    }
    let a = DVector::from_vec(coeffs(lambda));
    let v: Vec<f64> = (vt.transpose() * a).iter().copied().collect();
    let objective = objective(samples, &v);
    Ok(LsqSolution {
        v,
        lambda,
        objective,
        bisections,
    })
}

/// `F̃(x) = Σ_j ṽ_j σ(⟨ŵ_j, x⟩ − b̂_j) + ⟨w̃, x⟩ − b̃` with `w̃` the next `d`
/// coefficients and `b̃ = −ṽ_last`. Candidates with a zero coefficient are
/// left out.
pub fn assemble(candidates: &CandidateSet, v: &[f64]) -> Result<Network> {
    let (s, d) = (candidates.len(), candidates.dim);
    check_dim(s + d + 1, v.len())?;
    let neurons = candidates
        .entries
        .iter()
        .zip(v)
        .filter(|(_, &c)| c != 0.0)
        .map(|(e, &c)| Neuron::with_output(e.w.clone(), e.b, c))
        .collect();
    let net = Network::new(d, neurons)?;
    let w = v[s..s + d].to_vec();
    let b = -v[s + d];
    if b == 0.0 && w.iter().all(|&x| x == 0.0) {
        Ok(net)
    } else {
        net.with_affine(w, b)
    }
}

/// Regression settings; `None` fields take their derived defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub n_samples: Option<usize>,
    pub w_bound: Option<f64>,
    pub m_bound: Option<f64>,
    pub solver_tol: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            n_samples: None,
            w_bound: None,
            m_bound: None,
            solver_tol: 1e-10,
        }
    }
}

impl RegressionConfig {
    /// `W = √(τ/r) + k(R + B)`.
    pub fn default_w_bound(p: &ExtractionParams, tau: f64, r: f64) -> f64 {
        (tau / r).sqrt() + p.k_bound as f64 * (p.r_bound + p.b_bound)
    }

    /// `M = √d + 2√log(1/δ)`.
    pub fn default_m_bound(d: usize, delta_conf: f64) -> f64 {
        (d as f64).sqrt() + 2.0 * (1.0 / delta_conf).ln().sqrt()
    }

    /// `max(10(|S| + d + 1), 10⁴)`.
    pub fn default_n_samples(n_candidates: usize, d: usize) -> usize {
        (10 * (n_candidates + d + 1)).max(MIN_DEFAULT_SAMPLES)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    pub extraction: ExtractionReport,
    pub candidates: usize,
    pub n_samples: usize,
    pub acceptance_rate: f64,
    pub w_bound: f64,
    pub m_bound: f64,
    pub lambda: f64,
    pub coef_norm: f64,
    /// Mean squared residual on the training samples.
    pub train_loss: f64,
    pub regression_queries: u64,
    pub total_queries: u64,
    pub warnings: Vec<String>,
    pub extraction_seconds: f64,
    pub regression_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Learned {
    pub network: Network,
    pub candidates: CandidateSet,
    pub report: LearnReport,
}

/// Harvest candidates, draw a truncated Gaussian dataset, solve the
/// norm-constrained regression and assemble the hypothesis.
pub fn learn_from_queries<O: Oracle + ?Sized>(
    oracle: &O,
    p: &ExtractionParams,
    cfg: &RegressionConfig,
    seed: u64,
) -> Result<Learned> {
    let d = oracle.dim();
    let before = oracle.query_count();
    let t0 = Instant::now();
    let (candidates, extraction) =
        get_neurons(oracle, p, derive_seed(seed, 0)).map_err(|e| e.in_stage("get_neurons"))?;
    let extraction_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let sched = extraction.schedule;
    let w_bound = cfg
        .w_bound
        .unwrap_or_else(|| RegressionConfig::default_w_bound(p, sched.tau, sched.r));
    let m_bound = cfg
        .m_bound
        .unwrap_or_else(|| RegressionConfig::default_m_bound(d, p.delta_conf));
    let mut n = cfg
        .n_samples
        .unwrap_or_else(|| RegressionConfig::default_n_samples(candidates.len(), d));
    let summary = oracle.summary();
    if let Some(budget) = summary.budget {
        n = n.min(budget.saturating_sub(summary.count) as usize);
        if n == 0 {
            return Err(Error::Budget {
                used: summary.count,
                budget,
            }
            .in_stage("draw_dataset"));
        }
    }
    let q_reg = oracle.query_count();
    let data = draw_dataset(oracle, &candidates, n, m_bound, derive_seed(seed, 1))
        .map_err(|e| e.in_stage("draw_dataset"))?;
    let regression_queries = oracle.query_count() - q_reg;
    let sol = constrained_least_squares(&data.samples, w_bound, cfg.solver_tol)
        .map_err(|e| e.in_stage("constrained_least_squares"))?;
    let network = assemble(&candidates, &sol.v).map_err(|e| e.in_stage("assemble"))?;

    let report = LearnReport {
        candidates: candidates.len(),
        n_samples: data.samples.len(),
        acceptance_rate: data.acceptance_rate(),
        w_bound,
        m_bound,
        lambda: sol.lambda,
        coef_norm: norm(&sol.v),
        train_loss: sol.objective / data.samples.len() as f64,
        regression_queries,
        total_queries: oracle.query_count() - before,
        warnings: data.warning.into_iter().collect(),
        extraction_seconds,
        regression_seconds: t1.elapsed().as_secs_f64(),
        extraction,
    };
    Ok(Learned {
        network,
        candidates,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::extraction::CandidateEntry;
    use crate::model::{l2_distance_mc, Sign};
    use crate::oracle::InProcessOracle;

    fn one_candidate() -> CandidateSet {
        CandidateSet {
            dim: 2,
            entries: vec![CandidateEntry {
                w: vec![1.0, 0.0],
                b: 0.0,
                provenance: (0, 1),
                line: 0,
            }],
        }
    }

    #[test]
    fn featurize_examples() {
        let empty = CandidateSet {
            dim: 2,
            entries: vec![],
        };
        assert_eq!(featurize(&empty, &[1.0, 2.0], 0.0).unwrap().z, vec![1.0, 2.0, 1.0]);
        assert_eq!(
            featurize(&one_candidate(), &[3.0, 0.0], 0.0).unwrap().z,
            vec![3.0, 3.0, 0.0, 1.0]
        );
        assert!(featurize(&empty, &[1.0], 0.0).is_err());
    }

    #[test]
    fn boundary_toy_problem() {
        let s = [FeatureSample { z: vec![2.0], y: 2.0 }];
        let sol = constrained_least_squares(&s, 0.5, 1e-12).unwrap();
        assert!((sol.v[0] - 0.5).abs() < 1e-11, "{sol:?}");
        let free = constrained_least_squares(&s, 5.0, 1e-12).unwrap();
        assert_eq!(free.lambda, 0.0);
        assert!((free.v[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn assemble_zero_and_single() {
        let c = one_candidate();
        let zero = assemble(&c, &[0.0; 4]).unwrap();
        assert_eq!(zero, Network::zero(2));
        let single = assemble(&c, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(single.evaluate(&[2.5, 7.0]).unwrap(), 2.5);
        assert_eq!(single.evaluate(&[-2.5, 7.0]).unwrap(), 0.0);
        assert!(assemble(&c, &[0.0; 3]).is_err());
    }

    #[test]
    fn assemble_featurize_duality() {
        let mut g = rng::seeded(4);
        let c = CandidateSet {
            dim: 3,
            entries: (0..5)
                .map(|i| CandidateEntry {
                    w: rng::gaussian_vec(&mut g, 3),
                    b: g.random_range(-1.0..1.0),
                    provenance: (i, i + 1),
                    line: 0,
                })
                .collect(),
        };
        let v = rng::gaussian_vec(&mut g, 9);
        let net = assemble(&c, &v).unwrap();
        for _ in 0..100 {
            let x = rng::gaussian_vec(&mut g, 3);
            let z = featurize(&c, &x, 0.0).unwrap().z;
            assert!((net.evaluate(&x).unwrap() - dot(&v, &z)).abs() <= 1e-12 * (1.0 + dot(&v, &z).abs()));
        }
    }

    #[test]
    fn truncation_acceptance() {
        let net = Network::zero(8);
        let o = InProcessOracle::new(net);
        let empty = CandidateSet {
            dim: 8,
            entries: vec![],
        };
        let all = draw_dataset(&o, &empty, 1000, f64::INFINITY, 1).unwrap();
        assert_eq!(all.acceptance_rate(), 1.0);
        let m = RegressionConfig::default_m_bound(8, 0.1);
        let data = draw_dataset(&o, &empty, 10_000, m, 2).unwrap();
        assert!(data.acceptance_rate() >= 0.9, "{}", data.acceptance_rate());
        assert!(data.samples.iter().all(|s| norm(&s.z[..8]) <= m));
        assert!(data.warning.is_none());
        assert_eq!(o.query_count(), 11_000);
        let tight = draw_dataset(&o, &empty, 100, 1.0, 3).unwrap();
        assert!(tight.warning.is_some());
    }

    #[test]
    fn beats_random_feasible_vectors() {
        let mut g = rng::seeded(8);
        let samples: Vec<FeatureSample> = (0..60)
            .map(|_| FeatureSample {
                z: rng::gaussian_vec(&mut g, 6),
                y: g.random_range(-3.0..3.0),
            })
            .collect();
        let w = 0.3;
        let sol = constrained_least_squares(&samples, w, 1e-10).unwrap();
        assert!(norm(&sol.v) <= w + 1e-8);
        for _ in 0..100 {
            let u = rng::unit_vec(&mut g, 6);
            let v: Vec<f64> = u.iter().map(|x| x * w * g.random::<f64>()).collect();
            assert!(sol.objective <= objective(&samples, &v) + 1e-9);
        }
    }

    #[test]
    fn zero_target_learns_zero() {
        let o = InProcessOracle::new(Network::zero(3));
        let mut p = ExtractionParams::new(0.5, 0.1, 1, 1.0, 1.0);
        p.knobs.c_r = 100.0;
        let out = learn_from_queries(&o, &p, &RegressionConfig::default(), 3).unwrap();
        let loss = l2_distance_mc(&out.network, &Network::zero(3), 20_000, 1).unwrap();
        assert!(loss.mean <= 1e-6, "{loss:?}");
        assert_eq!(out.report.total_queries, o.query_count());
    }

    #[test]
    fn stage_label_on_budget_failure() {
        let net = Network::new(2, vec![Neuron::new(Sign::Pos, vec![1.0, 0.0], 0.0)]).unwrap();
        let o = InProcessOracle::with_budget(net, Some(5));
        let p = ExtractionParams::new(0.5, 0.1, 1, 1.0, 1.0);
        let err = learn_from_queries(&o, &p, &RegressionConfig::default(), 1).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "get_neurons", .. }));
    }
}

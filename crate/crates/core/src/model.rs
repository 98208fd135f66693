//! One-hidden-layer ReLU networks `F(x) = Σ c_i σ(⟨w_i,x⟩ − b_i) + ⟨w*,x⟩ − b*`,
//! their restrictions to lines, and Gaussian-measure distances.
//!
//! Target networks carry output weights `c_i = s_i ∈ {±1}`. Learned networks
//! may carry arbitrary real output weights; those are stored in
//! [`Neuron::output`] and default to the sign when absent.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, norm, relu};
use crate::rng;

/// Current version of the network file format.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Pos => 1.0,
            Sign::Neg => -1.0,
        }
    }

    /// Sign of `x`, with `sign(0) = +1`.
    pub fn of(x: f64) -> Sign {
        if x < 0.0 {
            Sign::Neg
        } else {
            Sign::Pos
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Pos => Sign::Neg,
            Sign::Neg => Sign::Pos,
        }
    }
}

impl TryFrom<i8> for Sign {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Sign::Pos),
            -1 => Ok(Sign::Neg),
            other => Err(format!("sign must be +1 or -1, got {other}")),
        }
    }
}

impl From<Sign> for i8 {
    fn from(s: Sign) -> i8 {
        match s {
            Sign::Pos => 1,
            Sign::Neg => -1,
        }
    }
}

/// Hidden unit `s·σ(⟨w,x⟩ − b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neuron {
    #[serde(rename = "s")]
    pub sign: Sign,
    #[serde(rename = "w")]
    pub weight: Vec<f64>,
    #[serde(rename = "b")]
    pub bias: f64,
    /// Real output weight overriding `sign`; used by learned hypotheses.
    #[serde(rename = "c", default, skip_serializing_if = "Option::is_none")]
    pub output: Option<f64>,
}

impl Neuron {
    pub fn new(sign: Sign, weight: Vec<f64>, bias: f64) -> Self {
        Neuron {
            sign,
            weight,
            bias,
            output: None,
        }
    }

    pub fn with_output(weight: Vec<f64>, bias: f64, output: f64) -> Self {
        Neuron {
            sign: Sign::of(output),
            weight,
            bias,
            output: Some(output),
        }
    }

    pub fn output_weight(&self) -> f64 {
        self.output.unwrap_or_else(|| self.sign.value())
    }

    #[inline]
    pub fn preactivation(&self, x: &[f64]) -> f64 {
        dot(&self.weight, x) - self.bias
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }
}

/// Affine tail `⟨w,x⟩ − b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub dim: usize,
    pub neurons: Vec<Neuron>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<Affine>,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    version: u32,
    #[serde(flatten)]
    network: Network,
}

impl Network {
    pub fn new(dim: usize, neurons: Vec<Neuron>) -> Result<Self> {
        let net = Network {
            dim,
            neurons,
            affine: None,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn zero(dim: usize) -> Self {
        Network {
            dim,
            neurons: Vec::new(),
            affine: None,
        }
    }

    pub fn with_affine(mut self, w: Vec<f64>, b: f64) -> Result<Self> {
        check_dim(self.dim, w.len())?;
        self.affine = Some(Affine { w, b });
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::input("network dimension must be at least 1"));
        }
        for (i, n) in self.neurons.iter().enumerate() {
            if n.weight.len() != self.dim {
                return Err(Error::input(format!(
                    "neuron {i} has dimension {}, network has {}",
                    n.weight.len(),
                    self.dim
                )));
            }
            let finite = n.weight.iter().all(|v| v.is_finite())
                && n.bias.is_finite()
                && n.output.is_none_or(f64::is_finite);
            if !finite {
                return Err(Error::input(format!("neuron {i} has non-finite parameters")));
            }
        }
        if let Some(a) = &self.affine {
            check_dim(self.dim, a.w.len())?;
            if !(a.w.iter().all(|v| v.is_finite()) && a.b.is_finite()) {
                return Err(Error::input("affine tail has non-finite parameters"));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.neurons.len()
    }

    /// `R = max_i ‖w_i‖` (0 for an empty network).
    pub fn weight_bound(&self) -> f64 {
        self.neurons
            .iter()
            .map(|n| norm(&n.weight))
            .fold(0.0, f64::max)
    }

    /// `B = max_i |b_i|` (0 for an empty network).
    pub fn bias_bound(&self) -> f64 {
        self.neurons.iter().map(|n| n.bias.abs()).fold(0.0, f64::max)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.eval_unchecked(x))
    }

    /// Evaluate without the dimension check. Panics in debug builds on mismatch.
    pub fn eval_unchecked(&self, x: &[f64]) -> f64 {
        let hidden: f64 = self
            .neurons
            .iter()
            .map(|n| n.output_weight() * relu(n.preactivation(x)))
            .sum();
        match &self.affine {
            Some(a) => hidden + dot(&a.w, x) - a.b,
            None => hidden,
        }
    }

    /// Analytic gradient `Σ_{active} c_i w_i + w*` at `x`. Neurons exactly on
    /// their boundary count as inactive.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let mut g = match &self.affine {
            Some(a) => a.w.clone(),
            None => vec![0.0; self.dim],
        };
        for n in &self.neurons {
            if n.preactivation(x) > 0.0 {
                let c = n.output_weight();
                g.iter_mut().zip(&n.weight).for_each(|(gi, wi)| *gi += c * wi);
            }
        }
        Ok(g)
    }

    pub fn restrict<'a>(&'a self, line: &GaussianLine) -> Result<Restriction<'a>> {
        check_dim(self.dim, line.x0.len())?;
        let terms = self
            .neurons
            .iter()
            .map(|n| (n.preactivation(&line.x0), dot(&n.weight, &line.v)))
            .collect();
        let (affine_offset, affine_slope) = match &self.affine {
            Some(a) => (dot(&a.w, &line.x0) - a.b, dot(&a.w, &line.v)),
            None => (0.0, 0.0),
        };
        Ok(Restriction {
            net: self,
            terms,
            affine_offset,
            affine_slope,
        })
    }

    pub fn critical_points(&self, line: &GaussianLine) -> Result<CriticalPoints> {
        check_dim(self.dim, line.x0.len())?;
        let mut points = Vec::with_capacity(self.k());
        let mut skipped = Vec::new();
        for (i, n) in self.neurons.iter().enumerate() {
            let slope = dot(&n.weight, &line.v);
            if slope.abs() > PERPENDICULAR_TOL * norm(&n.weight) {
                points.push(CriticalPoint {
                    t: -n.preactivation(&line.x0) / slope,
                    neuron_index: i,
                });
            } else {
                skipped.push(i);
            }
        }
        points.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(CriticalPoints { points, skipped })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = NetworkFile {
            version: FORMAT_VERSION,
            network: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(s)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported network file version {}",
                file.version
            )));
        }
        file.network.validate()?;
        Ok(file.network)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Network(d={}, k={}", self.dim, self.k())?;
        if self.affine.is_some() {
            write!(f, ", affine")?;
        }
        write!(f, ")")
    }
}

/// `|⟨w,v⟩| ≤ PERPENDICULAR_TOL·‖w‖` counts as parallel to the line.
pub const PERPENDICULAR_TOL: f64 = 1e-14;

/// Random line `t ↦ x₀ + t·v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLine {
    pub x0: Vec<f64>,
    pub v: Vec<f64>,
    pub seed: u64,
}

impl GaussianLine {
    /// Explicit line; `v` is normalized.
    pub fn new(x0: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        check_dim(x0.len(), v.len())?;
        let n = norm(&v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::input("line direction must be a nonzero finite vector"));
        }
        Ok(GaussianLine {
            x0,
            v: v.iter().map(|c| c / n).collect(),
            seed: 0,
        })
    }

    /// `x₀ ∼ N(0, I_d)` and `v` uniform on the unit sphere.
    pub fn sample(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::input("dimension must be at least 1"));
        }
        let mut rng = rng::seeded(seed);
        let x0 = rng::gaussian_vec(&mut rng, d);
        let v = rng::unit_vec(&mut rng, d);
        Ok(GaussianLine { x0, v, seed })
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn point(&self, t: f64) -> Vec<f64> {
        crate::linalg::axpy(&self.x0, t, &self.v)
    }
}

/// `F|_L` as a univariate piecewise-linear function.
pub struct Restriction<'a> {
    net: &'a Network,
    /// Per neuron: pre-activation at `x₀` and slope `⟨w_i, v⟩`.
    terms: Vec<(f64, f64)>,
    affine_offset: f64,
    affine_slope: f64,
}

impl Restriction<'_> {
    pub fn at(&self, t: f64) -> f64 {
        let hidden: f64 = self
            .net
            .neurons
            .iter()
            .zip(&self.terms)
            .map(|(n, (a, c))| n.output_weight() * relu(a + t * c))
            .sum();
        hidden + self.affine_offset + t * self.affine_slope
    }

    /// Slope of the linear piece containing `t` (right derivative).
    pub fn slope_at(&self, t: f64) -> f64 {
        let hidden: f64 = self
            .net
            .neurons
            .iter()
            .zip(&self.terms)
            .filter(|(_, (a, c))| a + t * c > 0.0 || (a + t * c == 0.0 && *c > 0.0))
            .map(|(n, (_, c))| n.output_weight() * c)
            .sum();
        hidden + self.affine_slope
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticalPoint {
    pub t: f64,
    pub neuron_index: usize,
}

#[derive(Clone, Debug, Default)]
pub struct CriticalPoints {
    /// Sorted ascending by `t`.
    pub points: Vec<CriticalPoint>,
    /// Neurons whose weight is (numerically) perpendicular to the line.
    pub skipped: Vec<usize>,
}

/// Monte-Carlo estimate of `E_{x∼N(0,I)}[(F_A(x) − F_B(x))²]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl McEstimate {
    /// Estimate of the L2 distance `‖F_A − F_B‖` (square root of the mean).
    pub fn rms(&self) -> f64 {
        self.mean.max(0.0).sqrt()
    }
}

pub const DEFAULT_MC_SAMPLES: usize = 100_000;

/// Mean and standard error of `f(x)` over `n` standard Gaussian draws.
pub fn gaussian_mc<F>(d: usize, n_samples: usize, seed: u64, mut f: F) -> Result<McEstimate>
where
    F: FnMut(&[f64]) -> f64,
{
    if n_samples < 2 {
        return Err(Error::input("Monte-Carlo needs at least 2 samples"));
    }
    let mut rng = rng::seeded(seed);
    let mut x = vec![0.0; d];
    // Welford accumulation.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n_samples {
        for xi in x.iter_mut() {
            *xi = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
        }
        let y = f(&x);
        let delta = y - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (y - mean);
    }
    let var = m2 / (n_samples - 1) as f64;
    Ok(McEstimate {
        mean,
        std_error: (var / n_samples as f64).sqrt(),
        n_samples,
    })
}

pub fn l2_distance_mc(a: &Network, b: &Network, n_samples: usize, seed: u64) -> Result<McEstimate> {
    check_dim(a.dim, b.dim)?;
    gaussian_mc(a.dim, n_samples, seed, |x| {
        let diff = a.eval_unchecked(x) - b.eval_unchecked(x);
        diff * diff
    })
}

/// Squared Gaussian norm `E[F(x)²]`, estimated by Monte Carlo.
pub fn l2_norm_mc(net: &Network, n_samples: usize, seed: u64) -> Result<McEstimate> {
    l2_distance_mc(net, &Network::zero(net.dim), n_samples, seed)
}

/// Angle between two nonzero vectors, in `[0, π]`.
pub fn angle(v: &[f64], w: &[f64]) -> Result<f64> {
    check_dim(v.len(), w.len())?;
    let (nv, nw) = (norm(v), norm(w));
    if nv == 0.0 || nw == 0.0 {
        return Err(Error::input("angle undefined for a zero vector"));
    }
    Ok((dot(v, w) / (nv * nw)).clamp(-1.0, 1.0).acos())
}

/// Closed form of `E_{x∼N(0,I)}[σ(⟨v,x⟩)σ(⟨v',x⟩)]`:
/// `‖v‖‖v'‖(sin θ + (π − θ) cos θ) / 2π` with `θ = ∠(v, v')`.
pub fn relu_correlation(v: &[f64], v_prime: &[f64]) -> Result<f64> {
    let theta = angle(v, v_prime)?;
    Ok(norm(v) * norm(v_prime) * (theta.sin() + (PI - theta) * theta.cos()) / (2.0 * PI))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::axpy;
    use rand::Rng;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn single(w: Vec<f64>, b: f64) -> Network {
        let d = w.len();
        Network::new(d, vec![Neuron::new(Sign::Pos, w, b)]).unwrap()
    }

    fn bump(a: f64, delta: f64) -> Network {
        Network::new(
            1,
            vec![
                Neuron::new(Sign::Pos, vec![1.0], a),
                Neuron::new(Sign::Pos, vec![1.0], a + delta),
                Neuron::new(Sign::Neg, vec![2.0], 2.0 * a + delta),
            ],
        )
        .unwrap()
    }

    fn random_net(rng: &mut impl Rng, d: usize, k: usize) -> Network {
        let neurons = (0..k)
            .map(|_| {
                let s = if rng.random_bool(0.5) { Sign::Pos } else { Sign::Neg };
                Neuron::new(s, rng::gaussian_vec(rng, d), rng.random_range(-1.0..1.0))
            })
            .collect();
        Network::new(d, neurons).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let net = single(e(2, 0), 0.0);
        assert_eq!(net.evaluate(&[2.0, 0.0]).unwrap(), 2.0);
        assert_eq!(net.evaluate(&[-2.0, 0.0]).unwrap(), 0.0);
        assert_eq!(bump(0.0, 1.0).evaluate(&[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn evaluate_rejects_wrong_dimension() {
        let net = single(e(2, 0), 0.0);
        assert!(matches!(net.evaluate(&[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn affine_tail_is_added() {
        let net = single(e(2, 0), 0.0).with_affine(vec![0.0, 2.0], 1.0).unwrap();
        assert_eq!(net.evaluate(&[1.0, 1.0]).unwrap(), 1.0 + 2.0 - 1.0);
    }

    #[test]
    fn restrict_examples() {
        let net = single(e(2, 0), 1.0);
        let line = GaussianLine::new(vec![0.0, 0.0], e(2, 0)).unwrap();
        let h = net.restrict(&line).unwrap();
        assert_eq!(h.at(3.0), 2.0);
        assert_eq!(h.at(0.0), 0.0);
    }

    #[test]
    fn restrict_matches_direct_evaluation() {
        let mut rng = rng::seeded(11);
        for trial in 0..20 {
            let d = rng.random_range(1..8);
            let k = rng.random_range(0..6);
            let net = random_net(&mut rng, d, k)
                .with_affine(rng::gaussian_vec(&mut rng, d), 0.3)
                .unwrap();
            let line = GaussianLine::sample(d, trial).unwrap();
            let h = net.restrict(&line).unwrap();
            for _ in 0..100 {
                let t: f64 = rng.random_range(-5.0..5.0);
                let direct = net.evaluate(&line.point(t)).unwrap();
                assert!((h.at(t) - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn critical_point_examples() {
        let net = single(vec![1.0, 0.0], 1.0);
        let line = GaussianLine::new(vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        let cps = net.critical_points(&line).unwrap();
        assert_eq!(cps.points.len(), 1);
        assert_eq!(cps.points[0].t, 1.0);

        let net = single(vec![1.0, 0.0], 0.0);
        let line = GaussianLine::new(vec![3.0, 0.0], vec![0.0, 1.0]).unwrap();
        let cps = net.critical_points(&line).unwrap();
        assert!(cps.points.is_empty());
        assert_eq!(cps.skipped, vec![0]);
    }

    #[test]
    fn critical_points_lie_on_activation_boundaries() {
        let mut rng = rng::seeded(5);
        for trial in 0..50 {
            let d = rng.random_range(1..10);
            let k = rng.random_range(1..7);
            let net = random_net(&mut rng, d, k);
            let line = GaussianLine::sample(d, 1000 + trial).unwrap();
            let cps = net.critical_points(&line).unwrap();
            assert!(cps.points.windows(2).all(|w| w[0].t <= w[1].t));
            for cp in &cps.points {
                let n = &net.neurons[cp.neuron_index];
                assert!(n.preactivation(&line.point(cp.t)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn sampled_line_is_reproducible_and_unit() {
        let a = GaussianLine::sample(6, 42).unwrap();
        let b = GaussianLine::sample(6, 42).unwrap();
        assert_eq!(a, b);
        assert!((norm(&a.v) - 1.0).abs() <= 1e-12);
        assert!(GaussianLine::sample(0, 1).is_err());
    }

    #[test]
    fn mc_distance_of_identical_networks_is_zero() {
        let mut rng = rng::seeded(1);
        let net = random_net(&mut rng, 3, 4);
        let est = l2_distance_mc(&net, &net, 1000, 9).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn mc_norm_of_single_relu_is_one_half() {
        let net = single(e(2, 0), 0.0);
        let est = l2_norm_mc(&net, 200_000, 3).unwrap();
        assert!((est.mean - 0.5).abs() <= 3.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn mc_is_deterministic_given_seed() {
        let net = single(e(2, 0), 0.2);
        let a = l2_norm_mc(&net, 5000, 77).unwrap();
        let b = l2_norm_mc(&net, 5000, 77).unwrap();
        assert_eq!(a, b);
        assert!(l2_norm_mc(&net, 1, 77).is_err());
    }

    #[test]
    fn relu_correlation_examples() {
        let e1 = e(2, 0);
        let e2 = e(2, 1);
        assert!((relu_correlation(&e1, &e1).unwrap() - 0.5).abs() < 1e-15);
        assert!((relu_correlation(&e1, &e2).unwrap() - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!(relu_correlation(&e1, &[-1.0, 0.0]).unwrap().abs() < 1e-15);
        assert!(matches!(
            relu_correlation(&e1, &[0.0, 0.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn relu_correlation_agrees_with_monte_carlo() {
        let mut rng = rng::seeded(21);
        for trial in 0..5 {
            let d = 3;
            let v = rng::gaussian_vec(&mut rng, d);
            let w = rng::gaussian_vec(&mut rng, d);
            let exact = relu_correlation(&v, &w).unwrap();
            let est = gaussian_mc(d, 200_000, trial, |x| relu(dot(&v, x)) * relu(dot(&w, x))).unwrap();
            assert!((est.mean - exact).abs() <= 4.0 * est.std_error, "{exact} vs {est:?}");
        }
    }

    // Orthogonal perturbation v' = v + Δ‖v‖u with a shared bias.
    #[test]
    fn relu_stability_shrinks_with_perturbation() {
        let d = 4;
        let v = vec![1.0, 0.5, -0.3, 0.2];
        let nv = norm(&v);
        let mut u = vec![0.0, 0.0, 0.0, 1.0];
        let proj = dot(&u, &v) / (nv * nv);
        u = axpy(&u, -proj, &v);
        let nu = norm(&u);
        u.iter_mut().for_each(|c| *c /= nu);
        let bias = 0.4;
        let mut prev = f64::INFINITY;
        for delta in [0.2, 0.1, 0.05, 0.025] {
            let vp = axpy(&v, delta * nv, &u);
            let a = Network::new(d, vec![Neuron::new(Sign::Pos, v.clone(), bias)]).unwrap();
            let b = Network::new(d, vec![Neuron::new(Sign::Pos, vp, bias)]).unwrap();
            let loss = l2_distance_mc(&a, &b, 200_000, 8).unwrap().mean;
            assert!(loss <= prev);
            assert!(loss <= 10.0 * delta.powf(0.4) * nv * nv);
            prev = loss;
        }
    }

    #[test]
    fn json_round_trip_preserves_bits() {
        let mut rng = rng::seeded(2);
        let mut net = random_net(&mut rng, 4, 3)
            .with_affine(rng::gaussian_vec(&mut rng, 4), std::f64::consts::E)
            .unwrap();
        net.neurons[1].output = Some(0.1 + 0.2);
        let back = Network::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn json_rejects_bad_documents() {
        assert!(Network::from_json(r#"{"version":1,"dim":2,"neurons":[{"s":2,"w":[1,0],"b":0}]}"#).is_err());
        assert!(Network::from_json(r#"{"version":1,"dim":2,"neurons":[{"s":1,"w":[1],"b":0}]}"#).is_err());
        assert!(Network::from_json(r#"{"version":9,"dim":2,"neurons":[]}"#).is_err());
        let ok = Network::from_json(r#"{"version":1,"dim":2,"neurons":[{"s":-1,"w":[1,0],"b":0.5}]}"#).unwrap();
        assert_eq!(ok.neurons[0].sign, Sign::Neg);
    }

    #[test]
    fn gradient_sums_active_neurons() {
        let net = Network::new(
            2,
            vec![
                Neuron::new(Sign::Pos, vec![1.0, 0.0], 0.5),
                Neuron::new(Sign::Pos, vec![0.0, 1.0], 0.0),
            ],
        )
        .unwrap();
        assert_eq!(net.gradient(&[-1.0, 1.0]).unwrap(), vec![0.0, 1.0]);
    }
}

//! Angular closeness of neurons in `(w, b)` space and the constructions that
//! replace a clump of close neurons by at most two neurons or by an affine
//! function.
//!
//! Two neurons `(v, b)`, `(v', b')` are `(Δ, α)`-close when
//! `|sin ∠(v, v')| ≤ Δ` and `‖b·v' − b'·v‖ ≤ α‖v‖‖v'‖`. Both quantities are
//! invariant under positive rescaling of either neuron and under negating a
//! neuron, so a neuron close to `(v*, b*)` is also close to `(−v*, −b*)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dot, norm, scale};
use crate::model::{Affine, Network, Neuron, Sign};

/// Relative slack for checking inequalities that hold exactly in real
/// arithmetic but are evaluated in floating point.
const ROUNDING_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosenessParams {
    /// Angular tolerance Δ on `|sin ∠|`.
    pub delta: f64,
    /// Bias tolerance α.
    pub alpha: f64,
}

impl ClosenessParams {
    pub fn new(delta: f64, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&delta) || !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::input(format!(
                "closeness parameters need 0 ≤ Δ < 1 and α ≥ 0, got Δ={delta}, α={alpha}"
            )));
        }
        Ok(ClosenessParams { delta, alpha })
    }
}

/// `|sin ∠(v, v')|`, computed from the component of `v̂'` orthogonal to `v̂`.
pub fn abs_sin_angle(v: &[f64], v_prime: &[f64]) -> Result<f64> {
    check_dim(v.len(), v_prime.len())?;
    let (nv, nw) = (norm(v), norm(v_prime));
    if nv == 0.0 || nw == 0.0 {
        return Err(Error::input("closeness is undefined for a zero weight vector"));
    }
    let u = scale(v, 1.0 / nv);
    let u_prime = scale(v_prime, 1.0 / nw);
    let perp = axpy(&u_prime, -dot(&u_prime, &u), &u);
    Ok(norm(&perp).min(1.0))
}

/// The smallest `(Δ, α)` for which the two neurons are close.
pub fn closeness_measures(v: &[f64], b: f64, v_prime: &[f64], b_prime: f64) -> Result<(f64, f64)> {
    let sin = abs_sin_angle(v, v_prime)?;
    let cross: Vec<f64> = v_prime
        .iter()
        .zip(v)
        .map(|(vp, vv)| b * vp - b_prime * vv)
        .collect();
    Ok((sin, norm(&cross) / (norm(v) * norm(v_prime))))
}

pub fn is_close(v: &[f64], b: f64, v_prime: &[f64], b_prime: f64, p: ClosenessParams) -> Result<bool> {
    let sin = abs_sin_angle(v, v_prime)?;
    let cross: Vec<f64> = v_prime
        .iter()
        .zip(v)
        .map(|(vp, vv)| b * vp - b_prime * vv)
        .collect();
    Ok(sin <= p.delta && norm(&cross) <= p.alpha * norm(v) * norm(v_prime))
}

fn pairwise_close(neurons: &[(&[f64], f64)], p: ClosenessParams) -> Result<()> {
    for i in 0..neurons.len() {
        for j in i + 1..neurons.len() {
            let (vi, bi) = neurons[i];
            let (vj, bj) = neurons[j];
            if !is_close(vi, bi, vj, bj, p)? {
                return Err(Error::input(format!(
                    "neurons {i} and {j} are not ({}, {})-close",
                    p.delta, p.alpha
                )));
            }
        }
    }
    Ok(())
}

/// Partition of a pairwise-close cluster into two mutually anti-correlated
/// halves. Indices are positions in the input list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orientation {
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
}

impl Orientation {
    /// Check every within-set pair has `⟨v_i, v_j⟩ ≥ 0` and every cross pair `< 0`.
    pub fn verify(&self, weights: &[&[f64]]) -> Result<()> {
        let mut seen = vec![false; weights.len()];
        for &i in self.s1.iter().chain(&self.s2) {
            if i >= weights.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Inconsistency(format!("index {i} is not a partition member")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Inconsistency("partition does not cover every index".into()));
        }
        let same = |a: &[usize]| {
            a.iter()
                .all(|&i| a.iter().all(|&j| dot(weights[i], weights[j]) >= 0.0))
        };
        let cross = self
            .s1
            .iter()
            .all(|&i| self.s2.iter().all(|&j| dot(weights[i], weights[j]) < 0.0));
        if same(&self.s1) && same(&self.s2) && cross {
            Ok(())
        } else {
            Err(Error::Inconsistency(
                "orientation sign conditions fail; the cluster is not pairwise close enough".into(),
            ))
        }
    }
}

/// Orientation induced by a pairwise `(Δ, α)`-close cluster with `Δ < √2/2`.
pub fn orientation(neurons: &[(&[f64], f64)], p: ClosenessParams) -> Result<Orientation> {
    if p.delta >= std::f64::consts::FRAC_1_SQRT_2 {
        return Err(Error::input("orientation needs Δ < √2/2"));
    }
    let Some(&(first, _)) = neurons.first() else {
        return Ok(Orientation {
            s1: Vec::new(),
            s2: Vec::new(),
        });
    };
    pairwise_close(neurons, p)?;
    let (s1, s2): (Vec<usize>, Vec<usize>) =
        (0..neurons.len()).partition(|&i| dot(neurons[i].0, first) >= 0.0);
    let o = Orientation { s1, s2 };
    let weights: Vec<&[f64]> = neurons.iter().map(|(v, _)| *v).collect();
    o.verify(&weights)?;
    Ok(o)
}

/// Operand of the merge operator: `s·σ(⟨v,x⟩ − b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedTriple {
    pub s: Sign,
    pub v: Vec<f64>,
    pub b: f64,
}

impl SignedTriple {
    pub fn new(s: Sign, v: Vec<f64>, b: f64) -> Self {
        SignedTriple { s, v, b }
    }
}

impl From<&Neuron> for SignedTriple {
    fn from(n: &Neuron) -> Self {
        SignedTriple::new(n.sign, n.weight.clone(), n.bias)
    }
}

/// Projection coefficient `γ = ⟨v, ref⟩ / ‖ref‖²`, required nonnegative.
fn projection(v: &[f64], reference: &[f64]) -> Result<f64> {
    check_dim(reference.len(), v.len())?;
    let rr = dot(reference, reference);
    if rr == 0.0 {
        return Err(Error::input("merge reference weight must be nonzero"));
    }
    let gamma = dot(v, reference) / rr;
    if gamma < 0.0 {
        return Err(Error::input(
            "merge operand lies on the opposite side of the reference",
        ));
    }
    Ok(gamma)
}

fn merged(sum: f64, reference: (&[f64], f64)) -> SignedTriple {
    let g = sum.abs();
    SignedTriple::new(Sign::of(sum), scale(reference.0, g), g * reference.1)
}

/// `t1 ⊙ t2` relative to the reference neuron `(v, b)`: both operands are
/// projected onto `v` and their signed projection coefficients summed,
/// giving `(sign(Σ s_jγ_j), |Σ s_jγ_j|·v, |Σ s_jγ_j|·b)` with `sign(0) = +1`.
pub fn merge(t1: &SignedTriple, t2: &SignedTriple, reference: (&[f64], f64)) -> Result<SignedTriple> {
    let g1 = projection(&t1.v, reference.0)?;
    let g2 = projection(&t2.v, reference.0)?;
    Ok(merged(t1.s.value() * g1 + t2.s.value() * g2, reference))
}

/// Left fold of `⊙` over a nonempty list. Equals `(sign(Σ s_iγ_i), |Σ s_iγ_i|·v, |Σ s_iγ_i|·b)`.
pub fn fold(triples: &[SignedTriple], reference: (&[f64], f64)) -> Result<SignedTriple> {
    let (first, rest) = triples
        .split_first()
        .ok_or_else(|| Error::input("cannot fold an empty list"))?;
    let g = projection(&first.v, reference.0)?;
    let mut acc = merged(first.s.value() * g, reference);
    for t in rest {
        acc = merge(&acc, t, reference)?;
    }
    Ok(acc)
}

/// `a⁺σ(⟨v*,x⟩ − b*) + a⁻σ(−⟨v*,x⟩ + b*)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapsedClump {
    pub v_star: Vec<f64>,
    pub b_star: f64,
    pub a_plus: f64,
    pub a_minus: f64,
}

impl CollapsedClump {
    pub fn to_network(&self) -> Network {
        let mut neurons = Vec::with_capacity(2);
        if self.a_plus != 0.0 {
            neurons.push(Neuron::with_output(self.v_star.clone(), self.b_star, self.a_plus));
        }
        if self.a_minus != 0.0 {
            neurons.push(Neuron::with_output(
                scale(&self.v_star, -1.0),
                -self.b_star,
                self.a_minus,
            ));
        }
        Network {
            dim: self.v_star.len(),
            neurons,
            affine: None,
        }
    }
}

/// Collapse neurons that are each `(Δ, α)`-close to `(v*, b*)` into two
/// neurons along `±v*`. Neurons with `⟨w_i, v*⟩ ≥ 0` are folded relative to
/// `(v*, b*)`, the rest relative to `(−v*, −b*)`.
///
/// The returned coefficients always satisfy
/// `|a±|‖v*‖ ≤ Σ‖w_i‖` and `|a±·b*| ≤ αΣ‖w_i‖ + Σ|b_i|`; a violation is
/// reported as an inconsistency.
pub fn collapse_clump(
    neurons: &[Neuron],
    reference: (&[f64], f64),
    p: ClosenessParams,
) -> Result<CollapsedClump> {
    let (v_star, b_star) = reference;
    for (i, n) in neurons.iter().enumerate() {
        if !is_close(&n.weight, n.bias, v_star, b_star, p)? {
            return Err(Error::input(format!(
                "neuron {i} is not ({}, {})-close to the reference",
                p.delta, p.alpha
            )));
        }
    }
    let (plus, minus): (Vec<&Neuron>, Vec<&Neuron>) =
        neurons.iter().partition(|n| dot(&n.weight, v_star) >= 0.0);
    let neg_star = scale(v_star, -1.0);

    let coefficient = |side: &[&Neuron], reference: (&[f64], f64)| -> Result<f64> {
        if side.is_empty() {
            return Ok(0.0);
        }
        let triples: Vec<SignedTriple> = side.iter().map(|n| SignedTriple::from(*n)).collect();
        let t = fold(&triples, reference)?;
        // t.v = γ·ref.v, so the output coefficient is s·γ.
        let gamma = if norm(reference.0) > 0.0 {
            norm(&t.v) / norm(reference.0)
        } else {
            0.0
        };
        Ok(t.s.value() * gamma)
    };
    let a_plus = coefficient(&plus, (v_star, b_star))?;
    let a_minus = coefficient(&minus, (&neg_star, -b_star))?;

    let weight_sum: f64 = neurons.iter().map(|n| norm(&n.weight)).sum();
    let bias_sum: f64 = neurons.iter().map(|n| n.bias.abs()).sum();
    let nv = norm(v_star);
    let weight_cap = weight_sum * (1.0 + ROUNDING_SLACK);
    let bias_cap = (p.alpha * weight_sum + bias_sum) * (1.0 + ROUNDING_SLACK);
    for a in [a_plus, a_minus] {
        if a.abs() * nv > weight_cap || (a * b_star).abs() > bias_cap {
            return Err(Error::Inconsistency(format!(
                "collapsed coefficient {a} violates the norm bounds"
            )));
        }
    }
    Ok(CollapsedClump {
        v_star: v_star.to_vec(),
        b_star,
        a_plus,
        a_minus,
    })
}

/// Affine stand-in for a pairwise-close cluster whose oriented signed sum
/// `Σ_{S₁} s_i v_i − Σ_{S₂} s_i v_i` has norm at most `(ΔR)^{2/9}`:
/// `ℓ(x) = ⟨Σ_{S₁} s_i v_i, x⟩ − Σ_{S₁} s_i b_i`.
pub fn corner_case_affine(neurons: &[Neuron], p: ClosenessParams) -> Result<Affine> {
    let Some(first) = neurons.first() else {
        return Err(Error::input("corner case needs at least one neuron"));
    };
    let d = first.dim();
    let pairs: Vec<(&[f64], f64)> = neurons.iter().map(|n| (n.weight.as_slice(), n.bias)).collect();
    let o = orientation(&pairs, p)?;

    let signed_sum = |idx: &[usize]| {
        idx.iter().fold((vec![0.0; d], 0.0), |(w, b), &i| {
            let s = neurons[i].sign.value();
            (axpy(&w, s, &neurons[i].weight), b + s * neurons[i].bias)
        })
    };
    let (w1, b1) = signed_sum(&o.s1);
    let (w2, _) = signed_sum(&o.s2);
    let r = neurons.iter().map(|n| norm(&n.weight)).fold(0.0, f64::max);
    let omega = norm(&crate::linalg::sub(&w1, &w2));
    let cap = (p.delta * r).powf(2.0 / 9.0);
    if omega > cap {
        return Err(Error::input(format!(
            "oriented signed sum has norm {omega}, above (ΔR)^(2/9) = {cap}"
        )));
    }
    Ok(Affine { w: w1, b: b1 })
}

//! Mitigation weights.
//!
//! Every weight set approximates the inverse square root of the echo
//! `K_I K = 1 + ε`: executing level `j` multiplies the noise by `(1 + ε)^j`,
//! and the weights are chosen so that `Σ a_j (1 + ε)^j ≈ (1 + ε)^{-1/2}`.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FLOAT_TAYLOR_CAP: usize = 12;
pub const RATIONAL_TAYLOR_CAP: usize = 30;
pub const MVE_ORDER_CAP: usize = 8;
/// Above this g the fit interval has collapsed and the Taylor limit is used.
pub const ADAPTIVE_TAYLOR_LIMIT: f64 = 1.0 - 1e-3;
pub const ADAPTIVE_COND_LIMIT: f64 = 1e14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    Taylor,
    Adaptive { g: f64 },
    Mve { order: usize },
    Custom,
}

impl Provenance {
    pub fn label(&self) -> String {
        match self {
            Provenance::Taylor => "taylor".into(),
            Provenance::Adaptive { g } => format!("adaptive(g={g})"),
            Provenance::Mve { order } => format!("mve-{order}"),
            Provenance::Custom => "custom".into(),
        }
    }
}

/// How each layer is amplified in one program entry: level `j` means the
/// layer is executed as `K (K_I K)^j`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Amplification {
    Uniform(u32),
    PerLayer(Vec<u32>),
}

impl Amplification {
    pub fn level(&self, layer: usize) -> u32 {
        match self {
            Amplification::Uniform(j) => *j,
            Amplification::PerLayer(v) => v.get(layer).copied().unwrap_or(0),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Amplification::Uniform(j) => format!("{}", 2 * j + 1),
            Amplification::PerLayer(v) => {
                let parts: Vec<String> = v.iter().map(|j| (2 * j + 1).to_string()).collect();
                format!("[{}]", parts.join(" "))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEntry {
    pub weight: f64,
    pub amplification: Amplification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub order: usize,
    pub entries: Vec<CoefficientEntry>,
    pub provenance: Provenance,
    pub gamma: f64,
}

impl CoefficientSet {
    pub fn uniform(order: usize, weights: Vec<f64>, provenance: Provenance) -> Self {
        let entries = weights
            .into_iter()
            .enumerate()
            .map(|(j, weight)| CoefficientEntry {
                weight,
                amplification: Amplification::Uniform(j as u32),
            })
            .collect();
        CoefficientSet::from_entries(order, entries, provenance)
    }

    pub fn from_entries(
        order: usize,
        entries: Vec<CoefficientEntry>,
        provenance: Provenance,
    ) -> Self {
        let gamma = entries.iter().map(|e| e.weight.abs()).sum();
        CoefficientSet {
            order,
            entries,
            provenance,
            gamma,
        }
    }

    /// The unmitigated single-entry set.
    pub fn unmitigated() -> Self {
        CoefficientSet::uniform(0, vec![1.0], Provenance::Taylor)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    pub fn is_uniform(&self) -> bool {
        self.entries
            .iter()
            .all(|e| matches!(e.amplification, Amplification::Uniform(_)))
    }
}

fn big(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

fn factorial(n: usize) -> BigInt {
    (1..=n as u64).fold(BigInt::one(), |acc, k| acc * BigInt::from(k))
}

fn double_factorial(n: usize) -> BigInt {
    let mut acc = BigInt::one();
    let mut k = n as u64;
    while k > 1 {
        acc *= BigInt::from(k);
        k -= 2;
    }
    acc
}

/// Exact Taylor weights `(−1)^j (2M+1)!! / (2^M (2j+1) j! (M−j)!)`.
pub fn taylor_exact(m: usize) -> Result<Vec<BigRational>> {
    if m > RATIONAL_TAYLOR_CAP {
        return Err(Error::Precision {
            order: m,
            cap: RATIONAL_TAYLOR_CAP,
        });
    }
    let num = double_factorial(2 * m + 1);
    let pow2 = BigInt::one() << m;
    Ok((0..=m)
        .map(|j| {
            let den = &pow2 * BigInt::from(2 * j + 1) * factorial(j) * factorial(m - j);
            let a = BigRational::new(num.clone(), den);
            if j % 2 == 1 {
                -a
            } else {
                a
            }
        })
        .collect())
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

pub fn taylor_coefficients(m: usize) -> Result<CoefficientSet> {
    if m > FLOAT_TAYLOR_CAP {
        return Err(Error::Precision {
            order: m,
            cap: FLOAT_TAYLOR_CAP,
        });
    }
    let weights = taylor_exact(m)?.iter().map(rational_to_f64).collect();
    Ok(CoefficientSet::uniform(m, weights, Provenance::Taylor))
}

/// `Σ_j a_j (2j+1)^p` in exact arithmetic.
pub fn exact_moment(weights: &[BigRational], p: u32) -> BigRational {
    weights
        .iter()
        .enumerate()
        .map(|(j, a)| a * big((2 * j as i64 + 1).pow(p)))
        .fold(BigRational::zero(), |acc, x| acc + x)
}

/// `Σ_j a_j (2j+1)^p` for floating weights. Each weight is lifted to an exact
/// rational first so the residual measures the weights, not the summation.
pub fn float_moment(weights: &[f64], p: u32) -> f64 {
    let lifted: Vec<BigRational> = weights
        .iter()
        .map(|w| BigRational::from_float(*w).unwrap_or_else(BigRational::zero))
        .collect();
    rational_to_f64(&exact_moment(&lifted, p))
}

/// Naive floating accumulation of the same moment, for diagnostics.
pub fn naive_float_moment(weights: &[f64], p: u32) -> f64 {
    weights
        .iter()
        .enumerate()
        .map(|(j, a)| a * ((2 * j + 1) as f64).powi(p as i32))
        .sum()
}

/// `∫_g^1 |Σ a_j λ^j − λ^{−1/2}|² dλ`, the adaptive objective, in closed form.
pub fn adaptive_residual(weights: &[f64], g: f64) -> f64 {
    let m = weights.len();
    let mut quad = 0.0;
    for j in 0..m {
        for k in 0..m {
            let p = (j + k + 1) as f64;
            quad += weights[j] * weights[k] * (1.0 - g.powf(p)) / p;
        }
    }
    let lin: f64 = weights
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let p = j as f64 + 0.5;
            a * (1.0 - g.powf(p)) / p
        })
        .sum();
    let constant = -g.ln();
    quad - 2.0 * lin + constant
}

/// L²-optimal weights on `[g, 1]` subject to `Σ a_j = 1`.
pub fn adaptive_coefficients(m: usize, g: f64) -> Result<CoefficientSet> {
    if !(g > 0.0 && g <= 1.0) {
        return Err(Error::config("g", format!("{g} is outside (0, 1]")));
    }
    if g >= ADAPTIVE_TAYLOR_LIMIT {
        let mut set = taylor_coefficients(m)?;
        set.provenance = Provenance::Adaptive { g };
        return Ok(set);
    }
    let weights = match adaptive_monomial(m, g) {
        Some(w) => w,
        None => adaptive_legendre(m, g)?,
    };
    Ok(CoefficientSet::uniform(
        m,
        weights,
        Provenance::Adaptive { g },
    ))
}

/// Normal equations in the monomial basis with the sum constraint appended.
/// Returns `None` when the Gram matrix is too ill-conditioned.
pub fn adaptive_monomial(m: usize, g: f64) -> Option<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    let n = m + 1;
    let gram = DMatrix::from_fn(n, n, |j, k| {
        let p = (j + k + 1) as f64;
        (1.0 - g.powf(p)) / p
    });
    let sv = gram.clone().singular_values();
    let cond = sv.max() / sv.min();
    if !cond.is_finite() || cond > ADAPTIVE_COND_LIMIT {
        return None;
    }
    let mut kkt = DMatrix::zeros(n + 1, n + 1);
    kkt.view_mut((0, 0), (n, n)).copy_from(&gram);
    for j in 0..n {
        kkt[(j, n)] = 1.0;
        kkt[(n, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n + 1);
    for j in 0..n {
        let p = j as f64 + 0.5;
        rhs[j] = (1.0 - g.powf(p)) / p;
    }
    rhs[n] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    Some(sol.iter().take(n).copied().collect())
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(q: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    for i in 0..q {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(q, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(q, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Monomial coefficients of the Legendre polynomial `P_k(x)`, exact.
fn legendre_monomials(k: usize) -> Vec<BigRational> {
    let mut p0 = vec![big(1)];
    if k == 0 {
        return p0;
    }
    let mut p1 = vec![big(0), big(1)];
    for n in 1..k {
        // (n+1) P_{n+1} = (2n+1) x P_n − n P_{n−1}
        let mut next = vec![BigRational::zero(); n + 2];
        for (i, c) in p1.iter().enumerate() {
            next[i + 1] += c * big(2 * n as i64 + 1);
        }
        for (i, c) in p0.iter().enumerate() {
            next[i] -= c * big(n as i64);
        }
        for c in next.iter_mut() {
            *c /= big(n as i64 + 1);
        }
        p0 = p1;
        p1 = next;
    }
    p1
}

/// Same fit in a shifted-Legendre basis on `[g, 1]`, where the Gram matrix is
/// diagonal. The projection is done by quadrature, then mapped to monomials.
pub fn adaptive_legendre(m: usize, g: f64) -> Result<Vec<f64>> {
    let n = m + 1;
    let (nodes, qw) = gauss_legendre(64.max(4 * n));
    let half = (1.0 - g) / 2.0;
    let mid = (1.0 + g) / 2.0;
    let mut proj = vec![0.0; n];
    let norms: Vec<f64> = (0..n).map(|k| (1.0 - g) / (2 * k + 1) as f64).collect();
    for (x, w) in nodes.iter().zip(&qw) {
        let lam = mid + half * x;
        let f = lam.powf(-0.5);
        let mut p0 = 1.0;
        let mut p1 = *x;
        for (k, pk) in proj.iter_mut().enumerate() {
            let pv = match k {
                0 => 1.0,
                1 => *x,
                _ => {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                    p2
                }
            };
            *pk += w * half * f * pv;
        }
    }
    let mut coef: Vec<f64> = proj.iter().zip(&norms).map(|(p, nk)| p / nk).collect();
    // Enforce p(1) = Σ c_k P_k(1) = Σ c_k = 1 by the weighted correction.
    let inv_norm_sum: f64 = norms.iter().map(|nk| 1.0 / nk).sum();
    let nu = (1.0 - coef.iter().sum::<f64>()) / inv_norm_sum;
    for (c, nk) in coef.iter_mut().zip(&norms) {
        *c += nu / nk;
    }
    // Map x = (2λ − 1 − g)/(1 − g) = α λ + β back to monomials in λ.
    let alpha = big_from_f64(2.0 / (1.0 - g));
    let beta = big_from_f64(-(1.0 + g) / (1.0 - g));
    let mut out = vec![BigRational::zero(); n];
    for (k, ck) in coef.iter().enumerate() {
        let ck = big_from_f64(*ck);
        for (p, pc) in legendre_monomials(k).iter().enumerate() {
            if pc.is_zero() {
                continue;
            }
            // (αλ + β)^p = Σ_r C(p, r) α^r β^{p−r} λ^r
            for r in 0..=p {
                let term = &ck * pc * binomial(p, r) * pow(&alpha, r) * pow(&beta, p - r);
                out[r] += term;
            }
        }
    }
    let weights: Vec<f64> = out.iter().map(rational_to_f64).collect();
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite()) || (sum - 1.0).abs() > 1e-8 {
        return Err(Error::Conditioning(format!(
            "adaptive fit M={m}, g={g}: weights sum to {sum} after basis change"
        )));
    }
    Ok(weights)
}

fn big_from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap_or_else(BigRational::zero)
}

fn binomial(n: usize, k: usize) -> BigRational {
    BigRational::from_integer(factorial(n) / (factorial(k) * factorial(n - k)))
}

fn pow(x: &BigRational, p: usize) -> BigRational {
    (0..p).fold(BigRational::one(), |acc, _| acc * x)
}

/// `binom(−1/2, k)`.
fn binom_neg_half(k: usize) -> BigRational {
    let mut acc = BigRational::one();
    for i in 0..k {
        acc = acc * (BigRational::new(BigInt::from(-1), BigInt::from(2)) - big(i as i64))
            / big(i as i64 + 1);
    }
    acc
}

/// All multi-indices of length `len` with entries summing to at most `max`.
fn multi_indices(len: usize, max: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; len];
    fn rec(pos: usize, left: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..=left {
            cur[pos] = v as u32;
            rec(pos + 1, left - v, cur, out);
        }
        cur[pos] = 0;
    }
    rec(0, max, &mut cur, &mut out);
    out
}

/// Exact multivariate-expansion weights for `L` layers truncated at total
/// degree `order`, keyed by per-layer amplification level.
pub fn mve_exact(layers: usize, order: usize) -> Result<Vec<(Vec<u32>, BigRational)>> {
    if layers == 0 {
        return Err(Error::Structural("MVE needs at least one layer".into()));
    }
    if order == 0 || order > MVE_ORDER_CAP {
        return Err(Error::UnsupportedOrder(order));
    }
    let ks = multi_indices(layers, order);
    let neg_half: Vec<BigRational> = (0..=order).map(binom_neg_half).collect();
    let mut out = Vec::new();
    for i in &ks {
        let mut total = BigRational::zero();
        for k in &ks {
            if k.iter().zip(i).any(|(kl, il)| kl < il) {
                continue;
            }
            let mut term = BigRational::one();
            for (kl, il) in k.iter().zip(i) {
                let (kl, il) = (*kl as usize, *il as usize);
                let sign = if (kl - il) % 2 == 1 { big(-1) } else { big(1) };
                term = term * &neg_half[kl] * binomial(kl, il) * sign;
            }
            total += term;
        }
        if !total.is_zero() {
            out.push((i.clone(), total));
        }
    }
    out.sort_by(|a, b| {
        let sa: u32 = a.0.iter().sum();
        let sb: u32 = b.0.iter().sum();
        sa.cmp(&sb).then_with(|| b.0.cmp(&a.0))
    });
    Ok(out)
}

pub fn mve_program_coefficients(layers: usize, order: usize) -> Result<CoefficientSet> {
    let entries = mve_exact(layers, order)?
        .into_iter()
        .map(|(levels, w)| CoefficientEntry {
            weight: rational_to_f64(&w),
            amplification: Amplification::PerLayer(levels),
        })
        .collect();
    Ok(CoefficientSet::from_entries(
        order,
        entries,
        Provenance::Mve { order },
    ))
}

/// Exact `Σ|c|` of the MVE weights.
pub fn mve_gamma_exact(layers: usize, order: usize) -> Result<BigRational> {
    Ok(mve_exact(layers, order)?
        .iter()
        .fold(BigRational::zero(), |acc, (_, w)| acc + w.abs()))
}

/// The linear-order overhead as printed alongside the MVE discussion,
/// `1 + (L+1)/2`. Reported next to `Σ|c| = 1 + L` rather than used.
pub fn mve1_overhead_as_printed(layers: usize) -> f64 {
    1.0 + (layers as f64 + 1.0) / 2.0
}

pub fn sampling_overhead(coeffs: &CoefficientSet) -> (f64, f64) {
    let gamma: f64 = coeffs.entries.iter().map(|e| e.weight.abs()).sum();
    (gamma, gamma * gamma)
}

/// Per-entry depth ratio: `2j+1` for uniform entries, the duration-weighted
/// mean of `2 i_l + 1` for per-layer entries.
pub fn depth_ratios(coeffs: &CoefficientSet, layer_durations: &[f64]) -> Result<Vec<f64>> {
    coeffs
        .entries
        .iter()
        .map(|e| match &e.amplification {
            Amplification::Uniform(j) => Ok((2 * j + 1) as f64),
            Amplification::PerLayer(levels) => {
                if levels.len() != layer_durations.len() {
                    return Err(Error::Structural(format!(
                        "entry has {} layers, circuit has {}",
                        levels.len(),
                        layer_durations.len()
                    )));
                }
                let total: f64 = layer_durations.iter().sum();
                Ok(levels
                    .iter()
                    .zip(layer_durations)
                    .map(|(j, d)| (2 * j + 1) as f64 * d)
                    .sum::<f64>()
                    / total)
            }
        })
        .collect()
}

/// `γ² ⟨depth⟩` with `⟨depth⟩ = Σ|c_i| d_i / γ`.
pub fn runtime_cost(coeffs: &CoefficientSet, depth_ratios: &[f64]) -> Result<f64> {
    if depth_ratios.len() != coeffs.entries.len() {
        return Err(Error::Structural(format!(
            "{} depth ratios for {} entries",
            depth_ratios.len(),
            coeffs.entries.len()
        )));
    }
    if let Some(d) = depth_ratios.iter().find(|d| **d < 1.0) {
        return Err(Error::Structural(format!("depth ratio {d} below 1")));
    }
    let (gamma, gamma2) = sampling_overhead(coeffs);
    let mean_depth: f64 = coeffs
        .entries
        .iter()
        .zip(depth_ratios)
        .map(|(e, d)| e.weight.abs() * d)
        .sum::<f64>()
        / gamma;
    Ok(gamma2 * mean_depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn taylor_low_orders() {
        assert_eq!(taylor_exact(0).unwrap(), vec![r(1, 1)]);
        assert_eq!(taylor_exact(1).unwrap(), vec![r(3, 2), r(-1, 2)]);
        assert_eq!(taylor_exact(2).unwrap(), vec![r(15, 8), r(-5, 4), r(3, 8)]);
        let t = taylor_coefficients(1).unwrap();
        assert_eq!(t.weights(), vec![1.5, -0.5]);
        assert_eq!(sampling_overhead(&t), (2.0, 4.0));
    }

    #[test]
    fn taylor_caps() {
        assert!(matches!(
            taylor_coefficients(13),
            Err(Error::Precision { order: 13, cap: 12 })
        ));
        assert!(taylor_exact(30).is_ok());
        assert!(taylor_exact(31).is_err());
    }

    #[test]
    fn taylor_identities_exact_and_float() {
        for m in 0..=12 {
            let a = taylor_exact(m).unwrap();
            assert_eq!(a.iter().fold(BigRational::zero(), |s, x| s + x), r(1, 1));
            for p in 1..=m as u32 {
                assert!(exact_moment(&a, p).is_zero(), "M={m} p={p}");
            }
            let f = taylor_coefficients(m).unwrap().weights();
            assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for p in 1..=m as u32 {
                assert!(float_moment(&f, p).abs() <= 1e-9, "M={m} p={p}");
            }
        }
    }

    #[test]
    fn taylor_approximates_inverse_sqrt() {
        // Oracle: truncated binomial series of (1+ε)^{-1/2}; error is O(ε^{M+1}).
        for m in 1..=4 {
            let a = taylor_coefficients(m).unwrap().weights();
            let err = |eps: f64| {
                let p: f64 = a
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * (1.0 + eps).powi(j as i32))
                    .sum();
                (p - (1.0 + eps).powf(-0.5)).abs()
            };
            let slope = (err(1e-1).ln() - err(1e-2).ln()) / (1e-1f64.ln() - 1e-2f64.ln());
            assert!(slope >= m as f64 + 0.8, "M={m} slope {slope}");
        }
    }

    #[test]
    fn adaptive_limits() {
        assert_eq!(adaptive_coefficients(0, 1.0).unwrap().weights(), vec![1.0]);
        let t = taylor_coefficients(3).unwrap().weights();
        let a = adaptive_coefficients(3, 0.999).unwrap().weights();
        assert_eq!(a, t);
        // Just below the switch the fit itself must already be close.
        let near = adaptive_coefficients(3, 0.998).unwrap().weights();
        let dist = near
            .iter()
            .zip(&t)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let far = adaptive_coefficients(3, 0.9).unwrap().weights();
        let dist_far = far
            .iter()
            .zip(&t)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(dist < dist_far && dist < 0.05, "{dist} {dist_far}");
        assert!(adaptive_coefficients(2, 0.0).is_err());
        assert!(adaptive_coefficients(2, 1.5).is_err());
    }

    #[test]
    fn adaptive_beats_taylor() {
        for m in 1..=6 {
            let t = taylor_coefficients(m).unwrap().weights();
            for g in [0.3, 0.5, 0.7, 0.9] {
                let a = adaptive_coefficients(m, g).unwrap();
                assert!((a.weight_sum() - 1.0).abs() < 1e-12);
                let ra = adaptive_residual(&a.weights(), g);
                let rt = adaptive_residual(&t, g);
                assert!(ra <= rt + 1e-15, "M={m} g={g}: {ra} vs {rt}");
            }
        }
        let a = adaptive_coefficients(2, 0.5).unwrap().weights();
        let t = taylor_coefficients(2).unwrap().weights();
        assert!(adaptive_residual(&a, 0.5) < adaptive_residual(&t, 0.5));
    }

    #[test]
    fn adaptive_residual_matches_quadrature() {
        let w = [1.7, -0.9, 0.2];
        let g = 0.4;
        let (x, qw) = gauss_legendre(80);
        let num: f64 = x
            .iter()
            .zip(&qw)
            .map(|(x, wq)| {
                let lam = (1.0 + g) / 2.0 + (1.0 - g) / 2.0 * x;
                let p: f64 = w
                    .iter()
                    .enumerate()
                    .map(|(j, a)| a * lam.powi(j as i32))
                    .sum();
                wq * (1.0 - g) / 2.0 * (p - lam.powf(-0.5)).powi(2)
            })
            .sum();
        assert!((num - adaptive_residual(&w, g)).abs() < 1e-12);
    }

    #[test]
    fn adaptive_bases_agree() {
        for (m, g) in [(2, 0.5), (3, 0.5), (4, 0.3), (5, 0.2)] {
            let a = adaptive_monomial(m, g).unwrap();
            let b = adaptive_legendre(m, g).unwrap();
            let rel = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
                / a.iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(rel < 1e-6, "M={m} g={g} rel={rel}");
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(5);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((s - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn mve_first_order_weights() {
        for l in 1..=6 {
            let set = mve_program_coefficients(l, 1).unwrap();
            assert_eq!(set.entries.len(), l + 1);
            assert_eq!(set.entries[0].weight, 1.0 + l as f64 / 2.0);
            for e in &set.entries[1..] {
                assert_eq!(e.weight, -0.5);
                let Amplification::PerLayer(v) = &e.amplification else {
                    panic!()
                };
                assert_eq!(v.iter().sum::<u32>(), 1);
            }
            assert_eq!(set.gamma, 1.0 + l as f64);
        }
        assert_eq!(
            mve_program_coefficients(1, 1).unwrap().weights(),
            vec![1.5, -0.5]
        );
        assert_eq!(
            mve_program_coefficients(1, 2).unwrap().weights(),
            vec![15.0 / 8.0, -1.25, 0.375]
        );
    }

    #[test]
    fn mve_second_order_closed_form() {
        // Oracle: the closed-form per-circuit weights of the second-order
        // layered expansion.
        for l in 1..=7usize {
            let lf = l as f64;
            let set = mve_exact(l, 2).unwrap();
            for (levels, w) in &set {
                let total: u32 = levels.iter().sum();
                let nz = levels.iter().filter(|v| **v > 0).count();
                let expect = match (total, nz) {
                    (0, _) => 1.0 + lf * (lf + 6.0) / 8.0,
                    (1, 1) => -(1.0 + lf / 4.0),
                    (2, 1) => 3.0 / 8.0,
                    (2, 2) => 0.25,
                    _ => panic!("unexpected entry {levels:?}"),
                };
                assert!(
                    (rational_to_f64(w) - expect).abs() < 1e-12,
                    "L={l} {levels:?}"
                );
            }
            let gamma = mve_gamma_exact(l, 2).unwrap();
            assert_eq!(gamma, big((2 + l * (l + 4)) as i64) / big(2));
        }
        assert_eq!(mve_gamma_exact(2, 2).unwrap(), big(7));
    }

    #[test]
    fn mve_rejects_bad_order() {
        assert!(matches!(
            mve_program_coefficients(3, 0),
            Err(Error::UnsupportedOrder(0))
        ));
        assert!(matches!(
            mve_program_coefficients(3, 9),
            Err(Error::UnsupportedOrder(9))
        ));
    }

    #[test]
    fn runtime_cost_examples() {
        let t0 = taylor_coefficients(0).unwrap();
        assert_eq!(runtime_cost(&t0, &[1.0]).unwrap(), 1.0);
        let t1 = taylor_coefficients(1).unwrap();
        let d = depth_ratios(&t1, &[1.0]).unwrap();
        assert_eq!(d, vec![1.0, 3.0]);
        assert_eq!(runtime_cost(&t1, &d).unwrap(), 6.0);
        assert!(runtime_cost(&t1, &[1.0]).is_err());
    }

    #[test]
    fn mve_cost_exceeds_slt() {
        for order in 1..=5 {
            let slt = taylor_coefficients(order).unwrap();
            let slt_cost = runtime_cost(&slt, &depth_ratios(&slt, &[1.0]).unwrap()).unwrap();
            for l in 2..=4 {
                let mve = mve_program_coefficients(l, order).unwrap();
                let dur = vec![1.0 / l as f64; l];
                let c = runtime_cost(&mve, &depth_ratios(&mve, &dur).unwrap()).unwrap();
                assert!(c > slt_cost, "order {order} L={l}: {c} vs {slt_cost}");
            }
        }
    }
}

//! Finite sums of real exponentials with exact calculus.
//!
//! Every trajectory produced by the closed-form policy is, on each of its
//! segments, a function s ↦ Σᵢ cᵢ·e^{rᵢ·s} of local segment time: holdings
//! mix rates {+β, 0, −β}, spreads mix {+β, −β, −κ}, and waiting is the pure
//! decay {−κ}. Keeping that structure explicit lets costs, deviations and
//! subgradient integrals be evaluated in closed form instead of by
//! quadrature, which is what makes the 1e−6 optimality checks attainable.

use serde::{Deserialize, Serialize};

/// A function s ↦ Σᵢ coefᵢ·e^{rateᵢ·s} stored as `(coef, rate)` pairs.
///
/// Terms with the same rate are merged on construction; a term with rate 0 is
/// an additive constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpMix {
    terms: Vec<(f64, f64)>,
}

impl ExpMix {
    /// The zero function.
    pub fn zero() -> Self {
        ExpMix { terms: Vec::new() }
    }

    /// The constant function `c`.
    pub fn constant(c: f64) -> Self {
        ExpMix::from_terms(vec![(c, 0.0)])
    }

    /// Builds a mix from raw `(coef, rate)` pairs, merging duplicate rates
    /// and dropping exact zeros.
    pub fn from_terms(terms: Vec<(f64, f64)>) -> Self {
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(terms.len());
        for (c, r) in terms {
            if c == 0.0 {
                continue;
            }
            match out.iter_mut().find(|(_, rr)| *rr == r) {
                Some(slot) => slot.0 += c,
                None => out.push((c, r)),
            }
        }
        out.retain(|(c, _)| *c != 0.0);
        out.sort_by(|a, b| a.1.total_cmp(&b.1));
        ExpMix { terms: out }
    }

    /// The `(coef, rate)` pairs, sorted by rate.
    pub fn terms(&self) -> &[(f64, f64)] {
        &self.terms
    }

    /// Evaluates the mix at local time `s`.
    pub fn value(&self, s: f64) -> f64 {
        self.terms.iter().map(|(c, r)| c * (r * s).exp()).sum()
    }

    /// The derivative, again an exponential mix.
    pub fn derivative(&self) -> ExpMix {
        ExpMix::from_terms(self.terms.iter().map(|&(c, r)| (c * r, r)).collect())
    }

    /// ∫ₐᵇ Σᵢ cᵢ e^{rᵢ s} ds, exactly.
    ///
    /// Uses `exp_m1` so that rates arbitrarily close to zero lose no
    /// precision.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(c, r)| {
                if r == 0.0 {
                    c * (b - a)
                } else {
                    c * (r * a).exp() * (r * (b - a)).exp_m1() / r
                }
            })
            .sum()
    }

    /// The mix multiplied by the scalar `k`.
    pub fn scaled(&self, k: f64) -> ExpMix {
        ExpMix::from_terms(self.terms.iter().map(|&(c, r)| (k * c, r)).collect())
    }

    /// The mix multiplied by e^{delta·s}, i.e. every rate shifted by `delta`.
    ///
    /// This is how weighted integrals like ∫ e^{−κs}·ζ(s) ds reduce to plain
    /// [`ExpMix::integral`] calls.
    pub fn rate_shifted(&self, delta: f64) -> ExpMix {
        ExpMix::from_terms(self.terms.iter().map(|&(c, r)| (c, r + delta)).collect())
    }

    /// Pointwise sum of two mixes.
    pub fn plus(&self, other: &ExpMix) -> ExpMix {
        let mut t = self.terms.clone();
        t.extend_from_slice(&other.terms);
        ExpMix::from_terms(t)
    }

    /// The mix shifted by an additive constant.
    pub fn plus_constant(&self, c: f64) -> ExpMix {
        self.plus(&ExpMix::constant(c))
    }

    /// Pointwise product, expanding (Σ cᵢe^{rᵢs})(Σ dⱼe^{qⱼs}).
    pub fn times(&self, other: &ExpMix) -> ExpMix {
        let mut t = Vec::with_capacity(self.terms.len() * other.terms.len());
        for &(c, r) in &self.terms {
            for &(d, q) in &other.terms {
                t.push((c * d, r + q));
            }
        }
        ExpMix::from_terms(t)
    }

    /// Pointwise square.
    pub fn squared(&self) -> ExpMix {
        self.times(self)
    }

    /// Re-anchors local time: returns the mix t ↦ f(s0 + t).
    pub fn advanced(&self, s0: f64) -> ExpMix {
        ExpMix::from_terms(
            self.terms
                .iter()
                .map(|&(c, r)| (c * (r * s0).exp(), r))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn test_value_and_merge() {
        let m = ExpMix::from_terms(vec![(2.0, -1.0), (3.0, 0.0), (1.0, -1.0)]);
        assert_eq!(m.terms().len(), 2);
        let s = 0.7;
        assert!((m.value(s) - (3.0 * (-s).exp() + 3.0)).abs() < TOL);
    }

    #[test]
    fn test_integral_matches_antiderivative() {
        let m = ExpMix::from_terms(vec![(1.5, 0.8), (-0.4, -2.0), (2.0, 0.0)]);
        let (a, b) = (0.2, 1.9);
        let anti = |s: f64| 1.5 / 0.8 * (0.8 * s).exp() + (-0.4) / (-2.0) * (-2.0 * s).exp() + 2.0 * s;
        assert!((m.integral(a, b) - (anti(b) - anti(a))).abs() < TOL);
    }

    #[test]
    fn test_integral_tiny_rate_stable() {
        let m = ExpMix::from_terms(vec![(1.0, 1e-13)]);
        // For a near-zero rate the integral must degrade to b − a smoothly.
        assert!((m.integral(0.0, 2.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn test_product_and_square() {
        let m = ExpMix::from_terms(vec![(1.0, 1.0), (2.0, -1.0)]);
        let sq = m.squared();
        let s = 0.3;
        let direct = m.value(s) * m.value(s);
        assert!((sq.value(s) - direct).abs() < TOL);
        // (e^s + 2e^{−s})² = e^{2s} + 4 + 4e^{−2s}: three terms after merging.
        assert_eq!(sq.terms().len(), 3);
    }

    #[test]
    fn test_rate_shift_equals_weighting() {
        let m = ExpMix::from_terms(vec![(1.2, 0.5), (0.7, -0.3)]);
        let w = m.rate_shifted(-2.0);
        let s = 1.1;
        assert!((w.value(s) - m.value(s) * (-2.0 * s).exp()).abs() < TOL);
    }

    #[test]
    fn test_advanced_reanchors_time() {
        let m = ExpMix::from_terms(vec![(1.0, 0.9), (-0.5, -1.7)]);
        let g = m.advanced(0.6);
        for t in [0.0, 0.25, 1.0] {
            assert!((g.value(t) - m.value(0.6 + t)).abs() < TOL);
        }
    }

    #[test]
    fn test_derivative() {
        let m = ExpMix::from_terms(vec![(2.0, 1.5), (1.0, 0.0)]);
        let d = m.derivative();
        let s = 0.4;
        assert!((d.value(s) - 3.0 * (1.5 * s).exp()).abs() < TOL);
    }
}

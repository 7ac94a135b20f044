//! Free-boundary geometry of the optimal tracking policy.
//!
//! The state space (τ, ζ, φ) of time to go, spread and holdings splits into
//! a buy region, a sell region and a no-trade corridor between two surfaces
//!
//! φ = φ_buy(τ, ζ)   and   φ = φ_sell(τ, ζ),   φ_buy < φ_sell.
//!
//! The sell surface is a single affine function of ζ with coefficients
//! C(τ), D(τ). The buy surface is glued from seven closed-form pieces
//! separated by two time knots θ̲ < θ̄ (roots of scalar transcendental
//! equations in κθ) and by threshold curves in ζ: the anchor curve ζ̄/φ̄
//! where buying stops, the spread levels s₁, s₂, s₃ that delimit waiting,
//! and the image of the anchor curve under the buy relaxation flow ĥ^buy.
//!
//! Everything here is deterministic geometry: evaluators are pure, the two
//! duration solvers τ_buy/τ_wait invert strictly monotone maps by bisection,
//! and all exponentials are kept in rescaled form so horizons up to τ ≈ 50
//! stay inside f64 range.

use serde::{Deserialize, Serialize};

use crate::model::MarketParams;
use crate::roots;

/// Residual bound enforced on the transcendental time knots.
pub const THETA_RESIDUAL_TOL: f64 = 1e-12;
/// Band absorbing float noise in piece-boundary comparisons; ties resolve
/// towards the piece whose defining inequality is non-strict.
pub const TIE_BAND: f64 = 1e-12;

// === Piece labels and small value types ===

/// Label of the buy-surface piece a state falls into.
///
/// The labels follow the partition of the (τ, ζ) quadrant: `I` is the
/// deep-spread regime where the buy surface mirrors the sell surface at
/// negated spread; `II.x` are the buy-flow regimes (flow onto the anchor
/// curve, then wait, with `II.1` additionally selling after the wait);
/// `III.x` are the no-initial-buy regimes (wait then sell, pure wait, and
/// the zero plateau).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuyPiece {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II.1")]
    II1,
    #[serde(rename = "II.2")]
    II2,
    #[serde(rename = "II.3")]
    II3,
    #[serde(rename = "III.1")]
    III1,
    #[serde(rename = "III.2")]
    III2,
    #[serde(rename = "III.3")]
    III3,
}

impl BuyPiece {
    pub fn label(&self) -> &'static str {
        match self {
            BuyPiece::I => "I",
            BuyPiece::II1 => "II.1",
            BuyPiece::II2 => "II.2",
            BuyPiece::II3 => "II.3",
            BuyPiece::III1 => "III.1",
            BuyPiece::III2 => "III.2",
            BuyPiece::III3 => "III.3",
        }
    }
}

impl std::fmt::Display for BuyPiece {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A point of the anchor curve: the state (ζ̄(τ), φ̄(τ)) where a buy flow
/// starting with time to go ≥ τ comes to rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    /// ζ̄(τ) ∈ (0, 2μ/κ].
    pub zbar: f64,
    /// φ̄(τ) ∈ [0, μ/λ²).
    pub pbar: f64,
}

/// Coefficients of the two exponential modes e^{±βθ} of the sell flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowCoefficients {
    pub c_plus: f64,
    pub c_minus: f64,
}

/// All four relaxation maps evaluated at one (τ, ζ, φ, θ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HatFlows {
    pub zeta_buy: f64,
    pub phi_buy: f64,
    pub zeta_sell: f64,
    pub phi_sell: f64,
    pub coeffs: FlowCoefficients,
}

/// How the optimal policy splits the remaining horizon: an initial buy-flow
/// phase, a waiting phase, and a final sell-flow phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Durations {
    pub tau_buy: f64,
    pub tau_wait: f64,
    pub tau_sell: f64,
}

/// The buy surface at one state: value, piece label and phase durations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuyPoint {
    pub phi: f64,
    pub piece: BuyPiece,
    pub durations: Durations,
}

// === The cached geometry ===

/// Free-boundary evaluator for one parameter set.
///
/// Construction solves the two transcendental knots once; every other
/// quantity is a closed form evaluated on demand. All methods are pure, so
/// a `FreeBoundary` can be shared freely across threads.
#[derive(Debug, Clone)]
pub struct FreeBoundary {
    params: MarketParams,
    theta_bar: f64,
    theta_under: f64,
}

impl FreeBoundary {
    pub fn new(params: MarketParams) -> Self {
        // Both knot equations depend on κθ only, so solve at unit rate and
        // rescale. θ̄: e^u(2−u)+2+u = 0 on [2,3]; θ̲: e^u(u−1)−1 = 0 on
        // [1, 1.5]. Both brackets have opposite signs for any κ > 0.
        let f_bar = |u: f64| u.exp() * (2.0 - u) + 2.0 + u;
        let df_bar = |u: f64| u.exp() * (1.0 - u) + 1.0;
        let f_und = |u: f64| u.exp() * (u - 1.0) - 1.0;
        let df_und = |u: f64| u.exp() * u;
        let u_bar = roots::bisect_newton(f_bar, df_bar, 2.0, 3.0)
            .expect("theta_bar bracket cannot fail");
        let u_und = roots::bisect_newton(f_und, df_und, 1.0, 1.5)
            .expect("theta_under bracket cannot fail");
        assert!(f_bar(u_bar).abs() < THETA_RESIDUAL_TOL);
        assert!(f_und(u_und).abs() < THETA_RESIDUAL_TOL);
        FreeBoundary {
            params,
            theta_bar: u_bar / params.kappa,
            theta_under: u_und / params.kappa,
        }
    }

    pub fn params(&self) -> &MarketParams {
        &self.params
    }

    /// The long-horizon knot θ̄: above it the policy has a selling phase.
    pub fn theta_bar(&self) -> f64 {
        self.theta_bar
    }

    /// The short-horizon knot θ̲: below it the anchor curve is flat.
    pub fn theta_under(&self) -> f64 {
        self.theta_under
    }

    /// Residuals of the two knot equations; both below
    /// [`THETA_RESIDUAL_TOL`] by construction.
    pub fn theta_residuals(&self) -> (f64, f64) {
        let k = self.params.kappa;
        let ub = k * self.theta_bar;
        let uu = k * self.theta_under;
        (
            ub.exp() * (2.0 - ub) + 2.0 + ub,
            uu.exp() * (uu - 1.0) - 1.0,
        )
    }

    // === Affine sell surface ===

    /// The coefficient pair (C(τ), D(τ)) of the sell surface, evaluated in
    /// a form where the dominant exponential is divided out so the result
    /// stays finite for arbitrarily large βτ.
    pub fn c_d(&self, tau: f64) -> (f64, f64) {
        debug_assert!(tau >= 0.0);
        let p = &self.params;
        let (gp, gm) = (p.gamma_plus(), p.gamma_minus());
        let e = (-2.0 * p.beta() * tau).exp();
        let den = e * gm * gm + gp * gp;
        let c = (e * gm + gp) / den;
        let d = 1.0 - 2.0 * p.kappa * p.eta * (-p.beta() * tau).exp() / den;
        (c, d)
    }

    /// The sell surface φ_sell(τ, ζ) = (μ/λ²)·D(τ) + ζ·(κ/λ)·C(τ).
    ///
    /// `zeta` may be negative: the same affine expression extends the
    /// surface below zero spread, which is how the deep-spread buy piece is
    /// expressed.
    pub fn phi_sell(&self, tau: f64, zeta: f64) -> f64 {
        let p = &self.params;
        let (c, d) = self.c_d(tau);
        p.merton() * d + zeta * p.kappa / p.lambda() * c
    }

    // === Waiting thresholds ===

    /// Spread level s₁(τ, θ) from which waiting exactly θ lands on the
    /// anchor curve with τ to go afterwards. Negative for θ near zero,
    /// crosses zero at θ = θ̲ (where its denominator blows up; the IEEE
    /// division yields the correct ±0 limit) and is positive beyond.
    pub fn s1(&self, tau: f64, theta: f64) -> f64 {
        let p = &self.params;
        let (c, d) = self.c_d(tau);
        let kt = p.kappa * theta;
        let emk = (-kt).exp();
        let num = p.mu * (1.0 - d) * kt.exp();
        let pole = kt - 1.0 - emk;
        let den = p.lambda() * p.kappa * c
            + 0.5 * p.kappa * kt.exp() * (1.0 + emk) * (1.0 + emk) / pole;
        num / den
    }

    /// Spread level s₂(τ) of the anchor curve on the middle branch
    /// θ̲ < τ ≤ θ̄.
    pub fn s2(&self, tau: f64) -> f64 {
        let p = &self.params;
        let l2 = p.lambda_sq();
        let kt = p.kappa * tau;
        let emk = (-kt).exp();
        let num = p.mu * p.eta * (kt * emk + 1.0 + emk);
        let den = l2 * kt + 0.5 * p.kappa * p.eta * (1.0 + emk) * (1.0 + emk)
            - l2 * (1.0 + emk);
        num / den
    }

    /// Spread level s₃(τ) = 2μτ/(1+e^{−κτ}) below which a pure wait ends
    /// with positive holdings; above it the zero plateau begins.
    pub fn s3(&self, tau: f64) -> f64 {
        2.0 * self.params.mu * tau / (1.0 + (-self.params.kappa * tau).exp())
    }

    /// Terminal holdings φ₂(τ, ζ) of a pure wait over [0, τ] starting from
    /// spread ζ and the matching block-liquidation at maturity.
    pub fn phi2(&self, tau: f64, zeta: f64) -> f64 {
        let p = &self.params;
        let emk = (-p.kappa * tau).exp();
        (p.mu * tau - 0.5 * zeta * (1.0 + emk))
            / (p.lambda_sq() * tau + 0.5 * p.eta * (1.0 + emk))
    }

    /// The anchor curve (ζ̄(τ), φ̄(τ)): the rest point of the buy flow.
    pub fn curve(&self, tau: f64) -> CurvePoint {
        debug_assert!(tau >= 0.0);
        let p = &self.params;
        let (zbar, pbar) = if tau > self.theta_bar {
            let z = self.s1(tau - self.theta_bar, self.theta_bar);
            let f = self.phi_sell(
                tau - self.theta_bar,
                z * (-p.kappa * self.theta_bar).exp(),
            );
            (z, f)
        } else if tau > self.theta_under {
            let z = self.s2(tau);
            (z, self.phi2(tau, z))
        } else {
            (2.0 * p.mu / p.kappa, 0.0)
        };
        CurvePoint { tau, zbar, pbar }
    }

    // === Relaxation flows ===

    /// Mode coefficients c_± of the sell flow anchored at (τ, ζ, φ),
    /// rescaled by e^{−βτ} so the expression stays finite for large τ.
    pub fn flow_coefficients(&self, tau: f64, zeta: f64, phi: f64) -> FlowCoefficients {
        let p = &self.params;
        let (gp, gm) = (p.gamma_plus(), p.gamma_minus());
        let l2 = p.lambda_sq();
        let root = (p.kappa * p.eta + l2).sqrt();
        let e1 = (-p.beta() * tau).exp();
        let e2 = e1 * e1;
        let den = l2 * root * (gp * gp - e2 * gm * gm);
        let x = p.eta * p.mu - l2 * (zeta + p.eta * phi);
        FlowCoefficients {
            c_plus: p.kappa * (e2 * gm * x + p.eta * p.mu * gp * e1) / den,
            c_minus: p.kappa * (gp * x + p.eta * p.mu * gm * e1) / den,
        }
    }

    /// Backward buy flow: the state at time to go `tau` of the buy-flow
    /// trajectory that passes through (ζ, φ) when the time to go is
    /// `theta` ≤ τ. At θ = τ it returns (ζ, φ) unchanged.
    pub fn hat_buy(&self, tau: f64, zeta: f64, phi: f64, theta: f64) -> (f64, f64) {
        debug_assert!((0.0..=tau).contains(&theta));
        let p = &self.params;
        let b = p.beta();
        let m = p.merton();
        let s = b * (tau - theta);
        let dev = phi - m;
        let hz = zeta * (p.eta * b * b / (2.0 * p.lambda_sq()))
            * ((-s).exp() / (p.kappa + b) + s.exp() / (p.kappa - b))
            - p.eta * b / p.kappa * dev * s.sinh();
        let hp = dev * s.cosh()
            - b / p.kappa * s.sinh() * (dev + p.kappa / p.lambda_sq() * zeta)
            + m;
        (hz, hp)
    }

    /// Forward sell flow: the state after selling along the boundary for
    /// duration `theta`, starting from (ζ, φ) with time to go `tau`. When
    /// anchored on the sell surface (φ = φ_sell(τ,ζ)) and θ = 0 it returns
    /// the anchor unchanged.
    pub fn hat_sell(&self, tau: f64, zeta: f64, phi: f64, theta: f64) -> (f64, f64) {
        debug_assert!((0.0..=tau).contains(&theta));
        let p = &self.params;
        let b = p.beta();
        let co = self.flow_coefficients(tau, zeta, phi);
        let ek = (-p.kappa * theta).exp();
        let eb = (b * theta).exp();
        let hz = zeta * ek
            + p.eta
                * (b / (p.kappa + b) * co.c_plus * (eb - ek)
                    + b / (b - p.kappa) * co.c_minus * (1.0 / eb - ek));
        let hp = -co.c_plus * eb - co.c_minus / eb + p.merton();
        (hz, hp)
    }

    /// All four relaxation maps and the mode coefficients at one point.
    pub fn hat_flows(&self, tau: f64, zeta: f64, phi: f64, theta: f64) -> HatFlows {
        let (zb, pb) = self.hat_buy(tau, zeta, phi, theta);
        let (zs, ps) = self.hat_sell(tau, zeta, phi, theta);
        HatFlows {
            zeta_buy: zb,
            phi_buy: pb,
            zeta_sell: zs,
            phi_sell: ps,
            coeffs: self.flow_coefficients(tau, zeta, phi),
        }
    }

    /// Spread seen at time to go `tau` by the buy flow that comes to rest
    /// on the anchor curve with `rest` to go. Strictly decreasing in
    /// `rest`; its value at rest = τ is ζ̄(τ) and at rest = 0 it is the
    /// upper end of the buy-flow spread range.
    fn buy_spread_from_rest(&self, tau: f64, rest: f64) -> f64 {
        let cp = self.curve(rest);
        self.hat_buy(tau, cp.zbar, cp.pbar, rest).0
    }

    // === Duration solvers ===

    /// Duration of the initial buy-flow phase: the unique z ∈ [0, τ] with
    /// ζ = ĥζ^buy(τ, ζ̄(τ−z), φ̄(τ−z), τ−z), clamped to 0 below ζ̄(τ) and
    /// to τ above the flow's spread range.
    pub fn tau_buy(&self, tau: f64, zeta: f64) -> f64 {
        assert!(tau >= 0.0 && zeta >= 0.0, "tau_buy needs tau, zeta >= 0");
        if tau == 0.0 {
            return 0.0;
        }
        let lo_val = self.curve(tau).zbar;
        let hi_val = self.buy_spread_from_rest(tau, 0.0);
        if zeta <= lo_val {
            return 0.0;
        }
        if zeta >= hi_val {
            return tau;
        }
        let f = |z: f64| self.buy_spread_from_rest(tau, tau - z) - zeta;
        let h = 1e-6 * (1.0 + tau);
        let df = move |z: f64| {
            let a = (z - h).max(0.0);
            let b = (z + h).min(tau);
            (f(b) - f(a)) / (b - a)
        };
        roots::bisect_newton(f, df, 0.0, tau).expect("buy-duration map is monotone")
    }

    /// Duration of the waiting phase. On the wait-then-sell branch this
    /// solves ζ = s₁(τ−z, z); on the flat branch (states whose buy flow
    /// rests beyond θ̄) it is θ̄; everywhere else the wait is what remains
    /// after the buy flow, τ − τ_buy(τ, ζ).
    pub fn tau_wait(&self, tau: f64, zeta: f64) -> f64 {
        assert!(tau >= 0.0 && zeta >= 0.0, "tau_wait needs tau, zeta >= 0");
        if self.params.mu == 0.0 {
            // Degenerate tracking target: s₁ vanishes identically and the
            // wait-then-sell branch covers only ζ = 0.
            return tau.min(self.theta_bar);
        }
        let zbar = self.curve(tau).zbar;
        if tau >= self.theta_bar {
            if zeta <= zbar + TIE_BAND * (1.0 + zbar) {
                return self.solve_wait(tau, zeta, self.theta_bar);
            }
            let flat_top = self.buy_spread_from_rest(tau, self.theta_bar);
            if zeta <= flat_top + TIE_BAND * (1.0 + flat_top) {
                return self.theta_bar;
            }
            return tau - self.tau_buy(tau, zeta);
        }
        if tau >= self.theta_under {
            let edge = self.s1(0.0, tau);
            if zeta <= edge + TIE_BAND * (1.0 + edge.abs()) {
                return self.solve_wait(tau, zeta, tau);
            }
        }
        tau - self.tau_buy(tau, zeta)
    }

    /// Bisection for the wait-then-sell branch of [`FreeBoundary::tau_wait`]
    /// over z ∈ [0, hi]; the target map z ↦ s₁(τ−z, z) starts negative and
    /// reaches ζ from below.
    fn solve_wait(&self, tau: f64, zeta: f64, hi: f64) -> f64 {
        let f = |z: f64| self.s1(tau - z, z) - zeta;
        if f(hi) <= 0.0 {
            // ζ at (or within float noise of) the branch's upper spread.
            return hi;
        }
        let h = 1e-6 * (1.0 + hi);
        let df = move |z: f64| {
            let a = (z - h).max(0.0);
            let b = (z + h).min(hi);
            (f(b) - f(a)) / (b - a)
        };
        roots::bisect_newton(f, df, 0.0, hi).expect("wait-duration map brackets the target")
    }

    // === The buy surface ===

    /// The buy surface with piece label and phase durations.
    pub fn buy_point(&self, tau: f64, zeta: f64) -> BuyPoint {
        assert!(tau >= 0.0 && zeta >= 0.0, "buy_point needs tau, zeta >= 0");
        let le = |a: f64, b: f64| a <= b + TIE_BAND * (1.0 + b.abs());
        let top = self.buy_spread_from_rest(tau, 0.0);
        if !le(zeta, top) {
            // Deep spread: mirror of the sell surface at negated spread;
            // the whole horizon is one buy flow.
            return BuyPoint {
                phi: self.phi_sell(tau, -zeta),
                piece: BuyPiece::I,
                durations: Durations { tau_buy: tau, tau_wait: 0.0, tau_sell: 0.0 },
            };
        }
        let zbar = self.curve(tau).zbar;
        if !le(zeta, zbar) {
            // Buy flow onto the anchor curve, resting at time to go τ*.
            let z = self.tau_buy(tau, zeta);
            let rest = tau - z;
            let cp = self.curve(rest);
            let phi = self.hat_buy(tau, cp.zbar, cp.pbar, rest).1;
            let (piece, durations) = if rest > self.theta_bar {
                (
                    BuyPiece::II1,
                    Durations {
                        tau_buy: z,
                        tau_wait: self.theta_bar,
                        tau_sell: rest - self.theta_bar,
                    },
                )
            } else if rest > self.theta_under {
                (BuyPiece::II2, Durations { tau_buy: z, tau_wait: rest, tau_sell: 0.0 })
            } else {
                (BuyPiece::II3, Durations { tau_buy: z, tau_wait: rest, tau_sell: 0.0 })
            };
            return BuyPoint { phi, piece, durations };
        }
        if tau >= self.theta_bar {
            return self.wait_then_sell_point(tau, zeta);
        }
        if tau >= self.theta_under {
            if le(zeta, self.s1(0.0, tau)) {
                return self.wait_then_sell_point(tau, zeta);
            }
            return BuyPoint {
                phi: self.phi2(tau, zeta),
                piece: BuyPiece::III2,
                durations: Durations { tau_buy: 0.0, tau_wait: tau, tau_sell: 0.0 },
            };
        }
        if le(zeta, self.s3(tau)) {
            return BuyPoint {
                phi: self.phi2(tau, zeta),
                piece: BuyPiece::III2,
                durations: Durations { tau_buy: 0.0, tau_wait: tau, tau_sell: 0.0 },
            };
        }
        BuyPoint {
            phi: 0.0,
            piece: BuyPiece::III3,
            durations: Durations { tau_buy: 0.0, tau_wait: tau, tau_sell: 0.0 },
        }
    }

    fn wait_then_sell_point(&self, tau: f64, zeta: f64) -> BuyPoint {
        let w = self.tau_wait(tau, zeta);
        let phi = self.phi_sell(tau - w, zeta * (-self.params.kappa * w).exp());
        BuyPoint {
            phi,
            piece: BuyPiece::III1,
            durations: Durations { tau_buy: 0.0, tau_wait: w, tau_sell: tau - w },
        }
    }

    /// The buy surface φ_buy(τ, ζ).
    pub fn phi_buy(&self, tau: f64, zeta: f64) -> f64 {
        self.buy_point(tau, zeta).phi
    }
}

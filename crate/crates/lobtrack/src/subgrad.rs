//! Marginal trading costs (subgradients) of the tracking objective and
//! first-order optimality checks.
//!
//! For a deterministic strategy the objective is convex in the pair of
//! cumulative controls, and its one-sided derivatives against an extra
//! infinitesimal buy or sell at time t have closed forms: a discounted
//! integral of the future spread, the running deviation from the tracking
//! target, and terminal terms from the liquidation value. The optimal
//! strategy is characterized by both subgradients staying nonnegative and
//! vanishing wherever the corresponding side actually trades.
//!
//! When the final position is exactly flat the terminal spread term has an
//! ambiguous sign; the parameter ϱ ∈ [−1, 1] selects it. Synthesized
//! strategies record the value that makes their optimality conditions
//! close (see the policy module).

use serde::{Deserialize, Serialize};

use crate::mix::ExpMix;
use crate::model::{self, GridStrategy, MarketParams};
use crate::policy::{PiecewiseStrategy, SegmentKind, Side};
use crate::{Error, Result};

/// Marginal cost of an extra buy (`up`) and an extra sell (`down`) at one
/// time point, together with the sign selection used at a flat terminal
/// position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgradPair {
    pub up: f64,
    pub down: f64,
    pub rho: f64,
}

/// sign(x), with the tie at x = 0 broken by ϱ.
fn sign_rho(x: f64, rho: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        rho
    }
}

fn validate_rho(rho: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&rho) || !rho.is_finite() {
        return Err(Error::Invalid(format!("rho {rho} outside [-1, 1]")));
    }
    Ok(())
}

/// Shared backward pass over a grid strategy: at every node, the
/// discounted future-spread integral K and the accumulated deviation
/// integral D, plus the terminal data.
struct GridTail {
    k: Vec<f64>,
    d: Vec<f64>,
    phi_end: f64,
    zeta_end: f64,
}

fn grid_tail(p: &MarketParams, strat: &GridStrategy) -> GridTail {
    let grid = strat.grid();
    let n = grid.len();
    let m = p.merton();
    // Forward pass: post-node spreads and holdings.
    let mut zeta_post = Vec::with_capacity(n);
    let mut phi_post = Vec::with_capacity(n);
    let mut zeta = strat.zeta0;
    let mut phi = strat.phi0;
    for i in 0..n {
        if i > 0 {
            zeta *= (-p.kappa * (grid[i] - grid[i - 1])).exp();
        }
        zeta += p.eta * (strat.d_up()[i] + strat.d_down()[i]);
        phi += strat.d_up()[i] - strat.d_down()[i];
        zeta_post.push(zeta);
        phi_post.push(phi);
    }
    // Backward pass: K_i = ∫_{t_i}^T κ e^{−κ(u−t_i)} ζ_u du and
    // D_i = λ² ∫_{t_i}^T (φ_u − m) du, both exact because ζ is piecewise
    // exponential and φ piecewise constant.
    let mut k = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in (0..n.saturating_sub(1)).rev() {
        let dt = grid[i + 1] - grid[i];
        let decay = (-p.kappa * dt).exp();
        k[i] = 0.5 * zeta_post[i] * (1.0 - decay * decay) + decay * k[i + 1];
        d[i] = p.lambda_sq() * (phi_post[i] - m) * dt + d[i + 1];
    }
    GridTail {
        k,
        d,
        phi_end: phi_post[n - 1],
        zeta_end: zeta_post[n - 1],
    }
}

fn pair_from_parts(
    p: &MarketParams,
    k: f64,
    d: f64,
    time_left: f64,
    phi_end: f64,
    zeta_end: f64,
    rho: f64,
) -> SubgradPair {
    let common = 0.5 * (zeta_end + p.eta * phi_end.abs()) * (-p.kappa * time_left).exp();
    let tail = 0.5 * p.eta * phi_end + 0.5 * sign_rho(phi_end, rho) * zeta_end;
    SubgradPair {
        up: k + d + common + tail,
        down: k - d + common - tail,
        rho,
    }
}

/// Subgradient pair of the tracking objective along a grid strategy at
/// every node, by one backward sweep.
pub fn node_subgradients(
    p: &MarketParams,
    strat: &GridStrategy,
    rho: f64,
) -> Result<Vec<SubgradPair>> {
    validate_rho(rho)?;
    let tail = grid_tail(p, strat);
    let horizon = strat.horizon();
    Ok(strat
        .grid()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            pair_from_parts(
                p,
                tail.k[i],
                tail.d[i],
                horizon - t,
                tail.phi_end,
                tail.zeta_end,
                rho,
            )
        })
        .collect())
}

/// Subgradient pair along a grid strategy at an arbitrary time t ∈ [0, T].
///
/// `up` is the marginal cost of an extra infinitesimal buy at t:
/// ∫ₜᵀ (κ e^{−κ(u−t)} ζᵤ + ασ²(φᵤ − μ/(ασ²))) du
/// + ½(ζ_T + η|φ_T|) e^{−κ(T−t)} + (η/2) φ_T + ½ sign_ϱ(φ_T) ζ_T;
/// `down` flips the sign of the deviation integral and of the last two
/// terms. ϱ is consulted only when φ_T = 0.
pub fn subgrad(p: &MarketParams, strat: &GridStrategy, t: f64, rho: f64) -> Result<SubgradPair> {
    validate_rho(rho)?;
    let horizon = strat.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::OutsideHorizon { t, horizon });
    }
    let tail = grid_tail(p, strat);
    let grid = strat.grid();
    // Next node at or after t.
    let j = grid.partition_point(|&g| g < t);
    let (k, d) = if j < grid.len() && grid[j] == t {
        (tail.k[j], tail.d[j])
    } else {
        // t lies strictly inside (t_{j−1}, t_j): integrate the partial
        // interval in closed form and append the node tail.
        let dt = grid[j] - t;
        let decay = (-p.kappa * dt).exp();
        let zeta_t = model::spread_at(p, strat, t)?.zeta;
        let phi_t = strat.phi_at(t);
        (
            0.5 * zeta_t * (1.0 - decay * decay) + decay * tail.k[j],
            p.lambda_sq() * (phi_t - p.merton()) * dt + tail.d[j],
        )
    };
    Ok(pair_from_parts(
        p,
        k,
        d,
        horizon - t,
        tail.phi_end,
        tail.zeta_end,
        rho,
    ))
}

/// Convexity gap J(Y) − J(X) − ⟨∇J(X), Y − X⟩ for two grid strategies
/// with the same endowment. Convexity of the objective makes this
/// nonnegative for any admissible pair (up to float noise); when X is the
/// optimum it collapses to the plain cost gap J(Y) − J(X).
///
/// The pairing charges each increment of Y (X) with the subgradient of X
/// at that node's time, so the two grids need not coincide. The flat-
/// terminal sign choice is fixed at ϱ = 0; the bound holds for any choice.
pub fn subgrad_ineq_check(
    p: &MarketParams,
    x: &GridStrategy,
    y: &GridStrategy,
) -> Result<f64> {
    if x.phi0 != y.phi0 || x.zeta0 != y.zeta0 || x.horizon() != y.horizon() {
        return Err(Error::Invalid(format!(
            "strategies must share endowment and horizon: ({}, {}, T={}) vs ({}, {}, T={})",
            x.phi0,
            x.zeta0,
            x.horizon(),
            y.phi0,
            y.zeta0,
            y.horizon()
        )));
    }
    let jx = model::tracking_cost(p, x)?;
    let jy = model::tracking_cost(p, y)?;
    let rho = 0.0;
    let at_x = node_subgradients(p, x, rho)?;
    let mut pairing = 0.0;
    for (i, g) in at_x.iter().enumerate() {
        pairing -= g.up * x.d_up()[i] + g.down * x.d_down()[i];
    }
    for (i, &t) in y.grid().iter().enumerate() {
        let g = subgrad(p, x, t, rho)?;
        pairing += g.up * y.d_up()[i] + g.down * y.d_down()[i];
    }
    Ok(jy - jx - pairing)
}

/// Exact subgradient pair along a synthesized strategy, using the
/// segments' exponential-sum evaluators (no quadrature). Terminal terms
/// use the pre-liquidation state (φ_{τ−}, ζ_{τ−}); the recorded ϱ is used
/// when the final position is flat.
pub fn strat_subgrad(p: &MarketParams, strat: &PiecewiseStrategy, t: f64) -> SubgradPair {
    let tau = strat.horizon();
    debug_assert!((0.0..=tau).contains(&t));
    let m = p.merton();
    let rho = strat.rho.unwrap_or(0.0);
    let mut k = 0.0;
    let mut d = 0.0;
    let mut disc = 1.0;
    for seg in strat.segments.iter().filter(|s| s.t1 > s.t0) {
        if seg.t1 <= t {
            continue;
        }
        let s0 = (t - seg.t0).max(0.0);
        let dur = seg.t1 - seg.t0;
        let shifted = seg.zeta.rate_shifted(-p.kappa);
        k += disc * p.kappa * (p.kappa * s0).exp() * shifted.integral(s0, dur);
        d += p.lambda_sq() * seg.phi.plus_constant(-m).integral(s0, dur);
        disc *= (-p.kappa * (dur - s0)).exp();
    }
    pair_from_parts(
        p,
        k,
        d,
        tau - t,
        strat.terminal_holdings(),
        strat.terminal_spread(),
        rho,
    )
}

/// First-order optimality check of a synthesized strategy on a uniform
/// sample of times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocReport {
    pub times: Vec<f64>,
    pub up: Vec<f64>,
    pub down: Vec<f64>,
    /// Whether the buy side trades at the sample time (from the analytic
    /// segment structure, not numeric thresholding).
    pub up_active: Vec<bool>,
    /// Whether the sell side trades at the sample time.
    pub down_active: Vec<bool>,
    /// Smallest subgradient value over all samples and both sides.
    pub min_value: f64,
    /// Largest |subgradient| over the active samples of the trading side.
    pub max_active_abs: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Samples both subgradients along the strategy, flags the actively
/// trading times, and verifies nonnegativity everywhere plus vanishing on
/// the active sets. Failures are reported, never thrown.
pub fn check_foc(
    p: &MarketParams,
    strat: &PiecewiseStrategy,
    n_samples: usize,
    tol: f64,
) -> FocReport {
    assert!(n_samples >= 2, "need at least two samples");
    let tau = strat.horizon();
    let t_eps = 1e-12 * (1.0 + tau);
    let terminal_size = strat
        .segments
        .iter()
        .rev()
        .find_map(|s| match s.kind {
            SegmentKind::TerminalBlock { size } => Some(size),
            _ => None,
        })
        .unwrap_or(0.0);
    let mut report = FocReport {
        times: Vec::with_capacity(n_samples),
        up: Vec::with_capacity(n_samples),
        down: Vec::with_capacity(n_samples),
        up_active: Vec::with_capacity(n_samples),
        down_active: Vec::with_capacity(n_samples),
        min_value: f64::INFINITY,
        max_active_abs: 0.0,
        tol,
        pass: false,
    };
    for i in 0..n_samples {
        // The division can land one ulp past the horizon; clamp it back.
        let t = (tau * i as f64 / (n_samples - 1) as f64).min(tau);
        let pair = strat_subgrad(p, strat, t);
        let mut up_active = false;
        let mut down_active = false;
        for seg in &strat.segments {
            match seg.kind {
                SegmentKind::BuyFlow if t >= seg.t0 - t_eps && t <= seg.t1 + t_eps => {
                    up_active = true;
                }
                SegmentKind::SellFlow if t >= seg.t0 - t_eps && t <= seg.t1 + t_eps => {
                    down_active = true;
                }
                SegmentKind::InitialBlock { side, .. } if t <= t_eps => match side {
                    Side::Buy => up_active = true,
                    Side::Sell => down_active = true,
                },
                _ => {}
            }
        }
        // The final liquidation trades at maturity itself.
        if i == n_samples - 1 && terminal_size.abs() > 1e-12 {
            if terminal_size > 0.0 {
                down_active = true;
            } else {
                up_active = true;
            }
        }
        report.min_value = report.min_value.min(pair.up).min(pair.down);
        if up_active {
            report.max_active_abs = report.max_active_abs.max(pair.up.abs());
        }
        if down_active {
            report.max_active_abs = report.max_active_abs.max(pair.down.abs());
        }
        report.times.push(t);
        report.up.push(pair.up);
        report.down.push(pair.down);
        report.up_active.push(up_active);
        report.down_active.push(down_active);
    }
    report.pass = report.min_value >= -tol && report.max_active_abs <= tol;
    report
}

impl FocReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Subgradient pair at time 0 of the delayed strategy that waits for θ
/// and then runs the optimum of the base data (τ, ζ, φ), evaluated on the
/// enlarged data (τ+θ, ζe^{κθ}, φ). Valid when the base optimum's sell
/// subgradient vanishes at its own time 0.
///
/// `terminal_abs` is |φ_τ| of the base optimum (pre-liquidation) and
/// `turnover` its resilience-discounted total traded volume
/// ∫ e^{−κu} (dX↑ + dX↓); both are exposed by `PiecewiseStrategy`.
pub fn g_maps(
    p: &MarketParams,
    theta: f64,
    tau: f64,
    zeta: f64,
    phi: f64,
    terminal_abs: f64,
    turnover: f64,
) -> (f64, f64) {
    let drift = (p.lambda_sq() * phi - p.mu) * theta;
    let ekt = (p.kappa * theta).exp();
    let emt = (-p.kappa * theta).exp();
    let emtau = (-p.kappa * tau).exp();
    let up = drift
        + 0.5 * zeta * (ekt + 1.0)
        + 0.5 * p.eta * terminal_abs * (emtau * emt + emtau)
        + 0.5 * p.eta * (emt + 1.0) * turnover;
    let down = -drift
        + 0.5 * zeta * (ekt - 1.0)
        + 0.5 * p.eta * terminal_abs * (emtau * emt - emtau)
        + 0.5 * p.eta * (emt - 1.0) * turnover;
    (up, down)
}

/// Degenerate base case of [`g_maps`] for τ = φ = 0 (pure wait over an
/// empty position with maturity spread ζ): h↑ = −μθ + ½ζ(e^{κθ} + ϱ),
/// h↓ = +μθ + ½ζ(e^{κθ} − ϱ).
pub fn h_maps(p: &MarketParams, theta: f64, zeta: f64, rho: f64) -> (f64, f64) {
    let ekt = (p.kappa * theta).exp();
    (
        -p.mu * theta + 0.5 * zeta * (ekt + rho),
        p.mu * theta + 0.5 * zeta * (ekt - rho),
    )
}

/// Assembles the delayed strategy of [`g_maps`]: a wait of length θ in
/// front of the base optimum, as one evaluable strategy on the enlarged
/// data. Exposed for cross-checks.
pub fn delayed_strategy(
    p: &MarketParams,
    base: &PiecewiseStrategy,
    theta: f64,
) -> PiecewiseStrategy {
    use crate::policy::Segment;
    let z0 = base.state.zeta * (p.kappa * theta).exp();
    let mut segments = vec![Segment {
        kind: SegmentKind::Wait,
        t0: 0.0,
        t1: theta,
        phi: ExpMix::constant(base.state.phi),
        zeta: ExpMix::from_terms(vec![(z0, -p.kappa)]),
    }];
    for seg in &base.segments {
        segments.push(Segment {
            kind: seg.kind,
            t0: seg.t0 + theta,
            t1: seg.t1 + theta,
            phi: seg.phi.clone(),
            zeta: seg.zeta.clone(),
        });
    }
    PiecewiseStrategy {
        params: *p,
        state: crate::model::State {
            tau: base.state.tau + theta,
            zeta: z0,
            phi: base.state.phi,
        },
        segments,
        rho: base.rho,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::FreeBoundary;
    use crate::model::State;
    use crate::policy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> MarketParams {
        MarketParams::default()
    }

    /// Composite Simpson rule for the oracle integrals.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn test_zero_horizon_examples() {
        let p = params();
        // Immediate maturity with a long position: marginal buy pays the
        // full spread plus impact, marginal sell is free.
        let strat = GridStrategy::no_trade(0.0, 1, 3.0, 1.0).unwrap();
        let g = subgrad(&p, &strat, 0.0, 0.0).unwrap();
        assert!((g.up - 7.0).abs() < 1e-14);
        assert!(g.down.abs() < 1e-14);
        // Flat position: the sign selection splits the spread.
        let flat = GridStrategy::no_trade(0.0, 1, 0.0, 2.0).unwrap();
        let g = subgrad(&p, &flat, 0.0, -1.0).unwrap();
        assert!(g.up.abs() < 1e-14);
        assert!((g.down - 2.0).abs() < 1e-14);
    }

    #[test]
    fn test_zero_strategy_matches_quadrature() {
        let p = params();
        let (tau, zeta0, phi0) = (1.0, 4.0, 2.0);
        let strat = GridStrategy::no_trade(tau, 8, phi0, zeta0).unwrap();
        let m = p.merton();
        for t in [0.0, 0.3, 0.77, 1.0] {
            let got = subgrad(&p, &strat, t, 0.25).unwrap();
            let zeta_end = zeta0 * (-p.kappa * tau).exp();
            let k = simpson(
                |u| p.kappa * (-p.kappa * (u - t)).exp() * zeta0 * (-p.kappa * u).exp(),
                t,
                tau,
                4000,
            );
            let d = p.lambda_sq() * (phi0 - m) * (tau - t);
            let common = 0.5 * (zeta_end + p.eta * phi0) * (-p.kappa * (tau - t)).exp();
            let tail = 0.5 * p.eta * phi0 + 0.5 * zeta_end;
            assert!((got.up - (k + d + common + tail)).abs() < 1e-8, "t={t}");
            assert!((got.down - (k - d + common - tail)).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn test_node_subgradients_match_finite_differences() {
        let p = params();
        let base = GridStrategy::no_trade(2.0, 8, 5.0, 1.5).unwrap();
        let d_up: Vec<f64> = (0..9).map(|i| 0.3 + 0.05 * i as f64).collect();
        let d_down: Vec<f64> = (0..9).map(|i| 0.8 - 0.07 * i as f64).collect();
        let strat = base.with_increments(d_up.clone(), d_down.clone()).unwrap();
        let pairs = node_subgradients(&p, &strat, 0.0).unwrap();
        let h = 1e-6;
        for i in 0..9 {
            for (up_side, expected) in [(true, pairs[i].up), (false, pairs[i].down)] {
                let bump = |delta: f64| {
                    let mut du = d_up.clone();
                    let mut dd = d_down.clone();
                    if up_side {
                        du[i] += delta;
                    } else {
                        dd[i] += delta;
                    }
                    let s = base.with_increments(du, dd).unwrap();
                    model::tracking_cost(&p, &s).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!(
                    (fd - expected).abs() < 1e-6 * (1.0 + expected.abs()),
                    "node {i}, up={up_side}: fd {fd} vs {expected}"
                );
            }
        }
        // Node values agree with the pointwise evaluator.
        for (i, &t) in strat.grid().iter().enumerate() {
            let g = subgrad(&p, &strat, t, 0.0).unwrap();
            assert!((g.up - pairs[i].up).abs() < 1e-12);
            assert!((g.down - pairs[i].down).abs() < 1e-12);
        }
    }

    #[test]
    fn test_up_down_sum_identity() {
        // up + down = 2K + (ζ_T + η|φ_T|) e^{−κ(T−t)}: the drift and
        // terminal-sign parts cancel.
        let p = params();
        let base = GridStrategy::no_trade(1.5, 6, -2.0, 0.7).unwrap();
        let d_up: Vec<f64> = (0..7).map(|i| 0.2 + 0.1 * (i % 3) as f64).collect();
        let d_down: Vec<f64> = (0..7).map(|i| 0.15 * (i % 2) as f64).collect();
        let strat = base.with_increments(d_up, d_down).unwrap();
        for t in [0.0, 0.4, 1.1] {
            let g = subgrad(&p, &strat, t, 0.3).unwrap();
            let zeta_end = model::spread_at(&p, &strat, 1.5).unwrap().zeta;
            let phi_end = strat.phi_terminal();
            // Integrate piece by piece so the spread jumps at the nodes
            // never sit inside a quadrature panel.
            let mut cuts: Vec<f64> = std::iter::once(t)
                .chain(strat.grid().iter().copied().filter(|&g| g > t))
                .collect();
            if *cuts.last().unwrap() < 1.5 {
                cuts.push(1.5);
            }
            let k: f64 = cuts
                .windows(2)
                .map(|w| {
                    simpson(
                        |u| {
                            p.kappa
                                * (-p.kappa * (u - t)).exp()
                                * model::spread_at(&p, &strat, u).unwrap().zeta
                        },
                        w[0],
                        // Sample the left limit of the jump at the cut.
                        w[1] - 1e-13,
                        400,
                    )
                })
                .sum();
            let expected =
                2.0 * k + (zeta_end + p.eta * phi_end.abs()) * (-p.kappa * (1.5 - t)).exp();
            assert!(
                (g.up + g.down - expected).abs() < 1e-6,
                "t={t}: {} vs {expected}",
                g.up + g.down
            );
        }
    }

    #[test]
    fn test_subgrad_ineq_random_pairs() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = GridStrategy::no_trade(2.0, 10, 4.0, 1.0).unwrap();
        let random = |rng: &mut ChaCha8Rng| {
            let du: Vec<f64> = (0..11).map(|_| rng.gen_range(0.0..0.6)).collect();
            let dd: Vec<f64> = (0..11).map(|_| rng.gen_range(0.0..0.6)).collect();
            base.with_increments(du, dd).unwrap()
        };
        for _ in 0..100 {
            let x = random(&mut rng);
            let y = random(&mut rng);
            let gap = subgrad_ineq_check(&p, &x, &y).unwrap();
            assert!(gap >= -1e-8, "convexity gap {gap}");
        }
        // Y = X collapses to zero.
        let x = random(&mut rng);
        let gap = subgrad_ineq_check(&p, &x, &x).unwrap();
        assert!(gap.abs() < 1e-9);
        // Mismatched endowments are a domain error.
        let other = GridStrategy::no_trade(2.0, 10, 3.0, 1.0).unwrap();
        assert!(subgrad_ineq_check(&p, &x, &other).is_err());
    }

    #[test]
    fn test_optimum_dominates_in_inequality() {
        let p = params();
        let fb = FreeBoundary::new(p);
        let opt = policy::build_with(&fb, &State::new(2.0, 1.0, 16.0).unwrap()).unwrap();
        let x = opt.to_grid(200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let du: Vec<f64> = (0..201).map(|_| rng.gen_range(0.0..0.02)).collect();
            let dd: Vec<f64> = (0..201).map(|_| rng.gen_range(0.0..0.1)).collect();
            let y = GridStrategy::no_trade(2.0, 200, 16.0, 1.0)
                .unwrap()
                .with_increments(du, dd)
                .unwrap();
            let gap = subgrad_ineq_check(&p, &x, &y).unwrap();
            assert!(gap >= -1e-8);
            // Against the (discretized) optimum the plain cost gap is
            // already nonnegative up to discretization error.
            let jx = model::tracking_cost(&p, &x).unwrap();
            let jy = model::tracking_cost(&p, &y).unwrap();
            assert!(jy - jx > -1e-3, "cost gap {}", jy - jx);
        }
    }

    #[test]
    fn test_foc_on_sell_boundary_strategy() {
        let p = params();
        let fb = FreeBoundary::new(p);
        let phi0 = fb.phi_sell(2.0, 3.0);
        let strat = policy::build_with(&fb, &State::new(2.0, 3.0, phi0).unwrap()).unwrap();
        let report = check_foc(&p, &strat, 200, 1e-6);
        assert!(report.pass, "min {} active {}", report.min_value, report.max_active_abs);
        // Selling is active throughout, so `down` vanishes on all of
        // [0, τ] while `up` stays strictly positive after time zero.
        for (i, &t) in report.times.iter().enumerate() {
            assert!(report.down_active[i], "t={t}");
            assert!(report.down[i].abs() <= 1e-6);
            if t > 0.0 {
                assert!(report.up[i] > 1e-3, "up({t}) = {}", report.up[i]);
            }
        }
    }

    #[test]
    fn test_foc_on_wait_strategy() {
        let p = params();
        let fb = FreeBoundary::new(p);
        let strat = policy::build_with(&fb, &State::new(0.5, 6.0, 4.0).unwrap()).unwrap();
        let report = check_foc(&p, &strat, 128, 1e-6);
        assert!(report.pass);
        // Interior waiting: both marginal costs strictly positive before
        // maturity; mutual exclusion holds trivially.
        for (i, &t) in report.times.iter().enumerate() {
            if t < 0.5 {
                assert!(report.up[i] > 1e-4 && report.down[i] > 1e-4, "t={t}");
                assert!(!report.up_active[i] && !report.down_active[i]);
            }
        }
    }

    #[test]
    fn test_foc_on_buy_boundary_and_plateau() {
        let p = params();
        let fb = FreeBoundary::new(p);
        // Deep short jumped to the flat plateau: the recorded ϱ closes
        // the optimality condition of the initial buy block.
        let strat = policy::build_with(&fb, &State::new(0.4, 1.0, -8.0).unwrap()).unwrap();
        let report = check_foc(&p, &strat, 128, 1e-6);
        assert!(
            report.pass,
            "min {} active {}",
            report.min_value,
            report.max_active_abs
        );
        assert!(report.up_active[0]);
        assert!(report.up[0].abs() <= 1e-6, "block FOC {}", report.up[0]);
        // Long-horizon buy-flow strategy.
        let phi0 = fb.phi_buy(5.0, 30.0);
        let strat = policy::build_with(&fb, &State::new(5.0, 30.0, phi0).unwrap()).unwrap();
        let report = check_foc(&p, &strat, 256, 1e-6);
        assert!(
            report.pass,
            "min {} active {}",
            report.min_value,
            report.max_active_abs
        );
    }

    #[test]
    fn test_mutual_exclusion_on_synthesized() {
        let p = params();
        let fb = FreeBoundary::new(p);
        for state in [
            State::new(2.0, 3.0, 14.0).unwrap(),
            State::new(5.0, 30.0, -5.0).unwrap(),
            State::new(1.0, 45.0, fb.phi_buy(1.0, 45.0)).unwrap(),
        ] {
            let strat = policy::build_with(&fb, &state).unwrap();
            let report = check_foc(&p, &strat, 200, 1e-6);
            for i in 0..report.times.len() {
                assert!(
                    !(report.up[i] <= 1e-6 && report.down[i] <= 1e-6),
                    "both marginal costs vanish at t={}",
                    report.times[i]
                );
            }
        }
    }

    #[test]
    fn test_foc_detects_suboptimal_delay() {
        let p = params();
        let fb = FreeBoundary::new(p);
        // Deep in the sell region: delaying the initial block by a full
        // unit of time is clearly suboptimal and the report must say so.
        let base = policy::build_with(&fb, &State::new(1.0, 0.1, 18.0).unwrap()).unwrap();
        let delayed = delayed_strategy(&p, &base, 1.0);
        let report = check_foc(&p, &delayed, 128, 1e-6);
        assert!(!report.pass);
        assert!(report.min_value < -1e-3, "min {}", report.min_value);
    }

    #[test]
    fn test_g_maps_match_delayed_subgradient() {
        let p = params();
        let fb = FreeBoundary::new(p);
        for (tau, zeta) in [(2.0, 3.0), (1.0, 0.5)] {
            let phi = fb.phi_sell(tau, zeta);
            let base = policy::build_with(&fb, &State::new(tau, zeta, phi).unwrap()).unwrap();
            // The base optimum sells from time zero, so its sell
            // subgradient vanishes there (the g-map's standing
            // assumption).
            let at0 = strat_subgrad(&p, &base, 0.0);
            assert!(at0.down.abs() < 1e-8);
            let terminal_abs = base.terminal_holdings().abs();
            let turnover = base.discounted_turnover();
            for theta in [0.25, 1.0, 3.0] {
                let (gu, gd) = g_maps(&p, theta, tau, zeta, phi, terminal_abs, turnover);
                let shifted = delayed_strategy(&p, &base, theta);
                let direct = strat_subgrad(&p, &shifted, 0.0);
                assert!(
                    (gu - direct.up).abs() < 1e-10 * (1.0 + gu.abs()),
                    "theta {theta}: {gu} vs {}",
                    direct.up
                );
                assert!(
                    (gd - direct.down).abs() < 1e-10 * (1.0 + gd.abs()),
                    "theta {theta}: {gd} vs {}",
                    direct.down
                );
            }
        }
    }

    #[test]
    fn test_g_maps_strictly_convex() {
        let p = params();
        let fb = FreeBoundary::new(p);
        let phi = fb.phi_sell(2.0, 3.0);
        let base = policy::build_with(&fb, &State::new(2.0, 3.0, phi).unwrap()).unwrap();
        let ta = base.terminal_holdings().abs();
        let to = base.discounted_turnover();
        let thetas: Vec<f64> = (0..24).map(|i| 0.01 * 1.45f64.powi(i)).collect();
        for w in thetas.windows(3) {
            let (a, b, c) = (w[0], w[1], w[2]);
            for pick in [0usize, 1] {
                let v = |th: f64| {
                    let (gu, gd) = g_maps(&p, th, 2.0, 3.0, phi, ta, to);
                    if pick == 0 {
                        gu
                    } else {
                        gd
                    }
                };
                // Divided second difference on the uneven grid.
                let second = (v(c) - v(b)) / (c - b) - (v(b) - v(a)) / (b - a);
                assert!(second > 0.0, "second difference {second} at {b}");
            }
        }
    }

    #[test]
    fn test_h_maps_identities() {
        let p = params();
        // θ = 0: the spread splits by the sign selection.
        for (zeta, rho) in [(2.0, -1.0), (3.0, 0.5), (1.0, 1.0)] {
            let (hu, hd) = h_maps(&p, 0.0, zeta, rho);
            assert!((hu - 0.5 * zeta * (1.0 + rho)).abs() < 1e-14);
            assert!((hd - 0.5 * zeta * (1.0 - rho)).abs() < 1e-14);
        }
        // The flat-plateau sign choice makes the buy condition close
        // exactly at the start of a pure wait.
        let (tau, zeta) = (0.5, 15.0);
        let rho_star = (p.kappa * tau).exp() * (2.0 * p.mu * tau / zeta - 1.0);
        assert!((-1.0..=1.0).contains(&rho_star));
        let (hu, hd) = h_maps(&p, tau, zeta * (-p.kappa * tau).exp(), rho_star);
        assert!(hu.abs() < 1e-12, "h_up {hu}");
        assert!(hd > 0.0);
        // Consistency with the full subgradient along a no-trade path.
        let strat = GridStrategy::no_trade(tau, 4, 0.0, zeta).unwrap();
        let g = subgrad(&p, &strat, 0.0, rho_star).unwrap();
        assert!((g.up - hu).abs() < 1e-12);
        assert!((g.down - hd).abs() < 1e-12);
    }

    #[test]
    fn test_rho_monotonicity_at_flat_terminal() {
        let p = params();
        let strat = GridStrategy::no_trade(1.0, 4, 0.0, 2.0).unwrap();
        let mut prev_up = f64::NEG_INFINITY;
        let mut prev_down = f64::INFINITY;
        for i in 0..=10 {
            let rho = -1.0 + 0.2 * i as f64;
            let g = subgrad(&p, &strat, 0.3, rho).unwrap();
            assert!(g.up > prev_up);
            assert!(g.down < prev_down);
            prev_up = g.up;
            prev_down = g.down;
        }
        assert!(subgrad(&p, &strat, 0.3, 1.5).is_err());
    }

    #[test]
    fn test_strat_subgrad_matches_grid_limit() {
        // The exact segment evaluator agrees with the grid evaluator on a
        // fine discretization of the same strategy.
        let p = params();
        let fb = FreeBoundary::new(p);
        let strat = policy::build_with(&fb, &State::new(2.0, 3.0, 14.0).unwrap()).unwrap();
        let grid = strat.to_grid(4000).unwrap();
        // The grid form internalizes the final liquidation, leaving a flat
        // terminal position; ϱ = +1 selects the buy-side limit there,
        // which is the convention the exact evaluator uses for a long
        // pre-liquidation position.
        for t in [0.0, 0.5, 1.3, 1.9] {
            let exact = strat_subgrad(&p, &strat, t);
            let approx = subgrad(&p, &grid, t, 1.0).unwrap();
            assert!(
                (exact.up - approx.up).abs() < 5e-3 * (1.0 + exact.up.abs()),
                "t={t}: {} vs {}",
                exact.up,
                approx.up
            );
            assert!(
                (exact.down - approx.down).abs() < 5e-3 * (1.0 + exact.down.abs()),
                "t={t}: {} vs {}",
                exact.down,
                approx.down
            );
        }
    }
}

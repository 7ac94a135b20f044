//! Independent verification tools: a grid-discretized convex minimizer of
//! the tracking objective and a Monte-Carlo estimator of expected
//! exponential utility.
//!
//! Neither knows anything about free boundaries or closed-form policies.
//! The minimizer descends the exact discrete cost over nonnegative trade
//! increments; the Monte-Carlo estimator prices a strategy by simulating
//! the unaffected price and marking every fill against the limit order
//! book. Agreement of either with the synthesized strategies is evidence,
//! not construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{self, GridStrategy, MarketParams, State};
use crate::policy::PiecewiseStrategy;
use crate::subgrad;
use crate::{Error, Result};

/// Settings for the projected-gradient minimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// Number of grid intervals (nodes = `n_steps + 1`).
    pub n_steps: usize,
    /// Hard cap on descent iterations.
    pub max_iters: usize,
    /// Step-size shrink factor when a step fails to decrease the cost.
    pub step_shrink: f64,
    /// Declare convergence once an accepted step decreases the cost by
    /// less than this.
    pub stop_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            n_steps: 400,
            max_iters: 200_000,
            step_shrink: 0.5,
            stop_tol: 1e-11,
        }
    }
}

impl OracleConfig {
    fn validate(&self) -> Result<()> {
        if self.n_steps < 10 {
            return Err(Error::Invalid(format!(
                "oracle grid needs at least 10 steps (got {})",
                self.n_steps
            )));
        }
        if !(self.stop_tol > 0.0) || !(0.0..1.0).contains(&self.step_shrink) {
            return Err(Error::Invalid(
                "stop tolerance must be positive and shrink factor in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// Settings for the Monte-Carlo utility estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Price-path resolution; the simulation grid is the union of this
    /// many uniform intervals with the strategy's own nodes.
    pub n_time_steps: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_paths: 10_000,
            seed: 271828,
            n_time_steps: 128,
        }
    }
}

// === Convex minimizer ===

/// Largest curvature of the discrete cost, estimated by power iteration
/// on finite differences of the gradient. The cost is quadratic away from
/// the flat-terminal kink, so the estimate stabilizes in a few rounds.
fn curvature_bound(p: &MarketParams, base: &GridStrategy) -> Result<f64> {
    let n = base.len();
    // Asymmetric anchor increments keep the terminal position off the
    // |φ_T| kink, where finite differences would mix the two gradient
    // branches and inflate the estimate.
    let anchor = base.with_increments(vec![1.0; n], vec![0.5; n])?;
    let grad = |du: &[f64], dd: &[f64]| -> Result<Vec<f64>> {
        let s = base.with_increments(du.to_vec(), dd.to_vec())?;
        let pairs = subgrad::node_subgradients(p, &s, 0.0)?;
        Ok(pairs
            .iter()
            .map(|g| g.up)
            .chain(pairs.iter().map(|g| g.down))
            .collect())
    };
    let g0 = grad(anchor.d_up(), anchor.d_down())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut v: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eps = 1e-4;
    let mut lam = 1.0;
    for _ in 0..25 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let du: Vec<f64> = (0..n).map(|i| 1.0 + eps * v[i]).collect();
        let dd: Vec<f64> = (0..n).map(|i| 0.5 + eps * v[n + i]).collect();
        let g1 = grad(&du, &dd)?;
        for i in 0..2 * n {
            v[i] = (g1[i] - g0[i]) / eps;
        }
        lam = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if lam < 1e-12 {
            return Ok(1.0);
        }
    }
    Ok(lam * 1.5)
}

/// Minimizes the tracking objective over grid strategies for the given
/// initial data by projected gradient descent from the zero-trading
/// iterate. Returns the best strategy found and its cost.
pub fn minimize_tracking(
    p: &MarketParams,
    data: &State,
    cfg: &OracleConfig,
) -> Result<(GridStrategy, f64)> {
    cfg.validate()?;
    let init = GridStrategy::no_trade(data.tau, cfg.n_steps, data.phi, data.zeta)?;
    minimize_tracking_from(p, cfg, init)
}

/// Same descent from a caller-supplied feasible iterate. Convexity makes
/// the reached cost independent of the start, which is itself a useful
/// check.
///
/// The iteration is projected gradient descent with Nesterov momentum
/// and a monotone safeguard (an extrapolated step is only kept if it does
/// not increase the cost), backtracking from 1/L. The objective is
/// quadratic except for the |φ_T| kink; when the iterate lands on the
/// kink the subgradient can cease to be a descent direction even though
/// the minimum lies elsewhere on the kink set, so a stalled linesearch
/// retries with the gradient projected tangentially to {φ_T = const},
/// which removes the sign ambiguity entirely.
pub fn minimize_tracking_from(
    p: &MarketParams,
    cfg: &OracleConfig,
    init: GridStrategy,
) -> Result<(GridStrategy, f64)> {
    cfg.validate()?;
    let n = init.len();
    let lip = curvature_bound(p, &init)?;
    let step0 = 1.0 / lip;
    let template = init.clone();
    let cost_at = |du: &[f64], dd: &[f64]| -> Result<f64> {
        let s = template.with_increments(du.to_vec(), dd.to_vec())?;
        model::tracking_cost(p, &s)
    };
    let grad_at = |du: &[f64], dd: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let s = template.with_increments(du.to_vec(), dd.to_vec())?;
        let pairs = subgrad::node_subgradients(p, &s, 0.0)?;
        Ok((
            pairs.iter().map(|g| g.up).collect(),
            pairs.iter().map(|g| g.down).collect(),
        ))
    };
    // Backtracking linesearch along a given direction from a given point;
    // accepts the first step that strictly decreases the cost below `bar`.
    let linesearch = |du: &[f64],
                      dd: &[f64],
                      dir_u: &[f64],
                      dir_d: &[f64],
                      bar: f64,
                      start: f64,
                      max_shrinks: usize|
     -> Result<Option<(Vec<f64>, Vec<f64>, f64, f64)>> {
        let mut s = start;
        for _ in 0..max_shrinks {
            if s <= 1e-16 * step0 {
                break;
            }
            let cu: Vec<f64> = (0..n).map(|i| (du[i] + s * dir_u[i]).max(0.0)).collect();
            let cd: Vec<f64> = (0..n).map(|i| (dd[i] + s * dir_d[i]).max(0.0)).collect();
            let c = cost_at(&cu, &cd)?;
            if c < bar {
                return Ok(Some((cu, cd, c, s)));
            }
            s *= cfg.step_shrink;
        }
        Ok(None)
    };

    // Descent direction per mode. Plain mode negates the gradient.
    // Tangential mode additionally projects onto directions whose
    // realized (post-clamp) net trade is zero, so the terminal position
    // and with it the kink term stay put: d = −g + ν·(∂φ_T/∂·) with ν
    // chosen by bisection on the clamp-aware net movement.
    let direction = |du: &[f64], dd: &[f64], gu: &[f64], gd: &[f64], tangential: bool| {
        if !tangential {
            let u: Vec<f64> = gu.iter().map(|g| -g).collect();
            let d: Vec<f64> = gd.iter().map(|g| -g).collect();
            return (u, d);
        }
        // Coordinates below the pin level cannot deliver outward mass;
        // treating them as movable would leave every finite step with a
        // net drift back across the kink.
        let pin = 1e-10
            * (1.0 + du.iter().sum::<f64>() + dd.iter().sum::<f64>());
        let realized = |nu: f64| -> f64 {
            let mut net = 0.0;
            for i in 0..n {
                let u = -gu[i] + nu;
                if du[i] > pin || u > 0.0 {
                    net += u;
                }
                let d = -gd[i] - nu;
                if dd[i] > pin || d > 0.0 {
                    net -= d;
                }
            }
            net
        };
        let scale = gu
            .iter()
            .chain(gd.iter())
            .fold(1.0f64, |m, g| m.max(g.abs()));
        let (mut lo, mut hi) = (-2.0 * scale, 2.0 * scale);
        while realized(lo) > 0.0 {
            lo *= 2.0;
        }
        while realized(hi) < 0.0 {
            hi *= 2.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if realized(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let nu = 0.5 * (lo + hi);
        let u: Vec<f64> = (0..n)
            .map(|i| {
                let v = -gu[i] + nu;
                if du[i] > pin || v > 0.0 {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        let d: Vec<f64> = (0..n)
            .map(|i| {
                let v = -gd[i] - nu;
                if dd[i] > pin || v > 0.0 {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        (u, d)
    };

    let mut x_du = init.d_up().to_vec();
    let mut x_dd = init.d_down().to_vec();
    let mut x_cost = model::tracking_cost(p, &init)?;
    let mut best = (init, x_cost);
    let mut y_du = x_du.clone();
    let mut y_dd = x_dd.clone();
    let mut momentum = 1.0f64;
    let mut step = step0;
    let mut checkpoint = x_cost;
    let mut tangential = false;
    let mut mode_stalls = 0;
    let mut iter = 0;
    while iter < cfg.max_iters {
        iter += 1;
        let (gu, gd) = grad_at(&y_du, &y_dd)?;
        let (dir_u, dir_d) = direction(&y_du, &y_dd, &gu, &gd, tangential);
        // A shallow search from the extrapolated point: if the momentum
        // step misfires (typically by crossing the kink), fall back to a
        // deep search from the incumbent rather than grinding here.
        let from_y = linesearch(&y_du, &y_dd, &dir_u, &dir_d, x_cost, step, 8)?;
        let stepped = match from_y {
            Some(hit) => Some(hit),
            None => {
                // Momentum restart: retry from the incumbent itself.
                momentum = 1.0;
                let (gu, gd) = grad_at(&x_du, &x_dd)?;
                let (dir_u, dir_d) = direction(&x_du, &x_dd, &gu, &gd, tangential);
                linesearch(&x_du, &x_dd, &dir_u, &dir_d, x_cost, step0, 60)?
            }
        };
        let Some((ndu, ndd, ncost, used)) = stepped else {
            // This mode is exhausted. The plain mode stalls on the |φ_T|
            // kink; the tangential mode stalls once the kink set is
            // explored. Alternate; two consecutive stalls mean neither
            // direction descends and the iterate is optimal.
            tangential = !tangential;
            mode_stalls += 1;
            momentum = 1.0;
            y_du.copy_from_slice(&x_du);
            y_dd.copy_from_slice(&x_dd);
            step = step0;
            if mode_stalls >= 2 {
                break;
            }
            continue;
        };
        mode_stalls = 0;
        // 1/L bounds the curvature globally, but along the kink set the
        // relevant curvature is far smaller; there the accepted step may
        // grow well past it.
        let cap = if tangential { 1e8 * step0 } else { step0 };
        step = (used / cfg.step_shrink).min(cap);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / t_next;
        momentum = t_next;
        for i in 0..n {
            y_du[i] = (ndu[i] + beta * (ndu[i] - x_du[i])).max(0.0);
            y_dd[i] = (ndd[i] + beta * (ndd[i] - x_dd[i])).max(0.0);
        }
        x_du = ndu;
        x_dd = ndd;
        x_cost = ncost;
        if x_cost < best.1 {
            best = (
                template.with_increments(x_du.clone(), x_dd.clone())?,
                x_cost,
            );
        }
        // Stagnation is judged over a window: momentum iterations make
        // individual decreases uninformative.
        if iter % 256 == 0 {
            if checkpoint - x_cost < cfg.stop_tol {
                break;
            }
            checkpoint = x_cost;
        }
    }
    Ok(best)
}

// === Monte-Carlo utility ===

/// Estimates E[−exp(−α·V_T)] for a grid strategy by simulating the
/// unaffected price as a Brownian motion with drift and marking every
/// fill against the book. Returns the estimate and its standard error.
///
/// The price starts at 0 with zero initial cash, so the matching
/// closed-form value is −exp(−α·mean_variance_value) with `book0 = 0`.
/// Paths use one RNG stream per path index derived from the seed, so the
/// result is reproducible and independent of evaluation order.
pub fn mc_expected_utility(
    p: &MarketParams,
    strat: &GridStrategy,
    cfg: &McConfig,
) -> Result<(f64, f64)> {
    if cfg.n_paths == 0 || cfg.n_time_steps == 0 {
        return Err(Error::Invalid("need at least one path and time step".into()));
    }
    let horizon = strat.horizon();
    // Union of the uniform simulation grid with the strategy nodes, so
    // node prices are exact samples of the simulated path.
    let mut times: Vec<f64> = (0..=cfg.n_time_steps)
        .map(|i| horizon * i as f64 / cfg.n_time_steps as f64)
        .chain(strat.grid().iter().copied())
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-14 * (1.0 + horizon));
    let node_pos: Vec<usize> = strat
        .grid()
        .iter()
        .map(|&t| {
            times
                .iter()
                .position(|&u| (u - t).abs() < 1e-12 * (1.0 + horizon))
                .expect("strategy node on simulation grid")
        })
        .collect();

    // Log-domain accumulation of −exp(−αV): exponents are collected
    // first, then combined with a max shift so huge |V| cannot overflow.
    let mut exponents = Vec::with_capacity(cfg.n_paths);
    let mut path = vec![0.0; times.len()];
    let mut node_path = vec![0.0; node_pos.len()];
    for path_idx in 0..cfg.n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(path_idx as u64);
        path[0] = 0.0;
        for k in 1..times.len() {
            let dt = times[k] - times[k - 1];
            let z: f64 = rng.sample(StandardNormal);
            path[k] = path[k - 1] + p.mu * dt + p.sigma * dt.sqrt() * z;
        }
        for (j, &pos) in node_pos.iter().enumerate() {
            node_path[j] = path[pos];
        }
        let wealth = model::liquidation_wealth(p, strat, &node_path, 0.0)?;
        exponents.push(-p.alpha * wealth);
    }
    let shift = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = exponents.iter().map(|a| (a - shift).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / cfg.n_paths as f64;
    let estimate = -shift.exp() * mean;
    let stderr = if cfg.n_paths > 1 {
        let var = scaled
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / (cfg.n_paths - 1) as f64;
        shift.exp() * (var / cfg.n_paths as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok((estimate, stderr))
}

/// Moves random mass between nodes of the same side, keeping the total
/// bought and sold volumes (and therefore the terminal position) fixed.
/// Used to produce feasible competitors for dominance checks.
pub fn perturb_increments(strat: &GridStrategy, moves: usize, frac: f64, seed: u64) -> GridStrategy {
    let n = strat.len();
    let mut du = strat.d_up().to_vec();
    let mut dd = strat.d_down().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..moves {
        let side: &mut Vec<f64> = if rng.gen_bool(0.5) { &mut du } else { &mut dd };
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let delta = side[i] * frac * rng.gen_range(0.0..1.0);
        side[i] -= delta;
        side[j] += delta;
    }
    strat
        .clone()
        .with_increments(du, dd)
        .expect("mass-preserving move stays feasible")
}

// === Trajectory distance ===

fn trapezoid_l2(times: &[f64], values: impl Fn(f64) -> f64) -> f64 {
    let mut acc = 0.0;
    for w in times.windows(2) {
        let a = values(w[0]);
        let b = values(w[1]);
        acc += 0.5 * (a * a + b * b) * (w[1] - w[0]);
    }
    acc.sqrt()
}

/// L²-in-time distance of the holdings paths of two grid strategies on a
/// common horizon, by the trapezoid rule on the union of their grids.
pub fn trajectory_distance(a: &GridStrategy, b: &GridStrategy) -> Result<f64> {
    if (a.horizon() - b.horizon()).abs() > 1e-12 * (1.0 + a.horizon()) {
        return Err(Error::Invalid(format!(
            "horizon mismatch: {} vs {}",
            a.horizon(),
            b.horizon()
        )));
    }
    let mut times: Vec<f64> = a.grid().iter().chain(b.grid().iter()).copied().collect();
    times.sort_by(|x, y| x.partial_cmp(y).unwrap());
    times.dedup_by(|x, y| (*x - *y).abs() < 1e-14 * (1.0 + a.horizon()));
    Ok(trapezoid_l2(&times, |t| a.phi_at(t) - b.phi_at(t)))
}

/// L² distance between a grid strategy's holdings and a synthesized
/// strategy's exact holdings, sampled on the union of the grid, the
/// segment boundaries, and `n_extra` uniform points.
pub fn trajectory_distance_exact(
    a: &GridStrategy,
    b: &PiecewiseStrategy,
    n_extra: usize,
) -> Result<f64> {
    let horizon = a.horizon();
    if (horizon - b.horizon()).abs() > 1e-12 * (1.0 + horizon) {
        return Err(Error::Invalid(format!(
            "horizon mismatch: {} vs {}",
            horizon,
            b.horizon()
        )));
    }
    let mut times: Vec<f64> = a
        .grid()
        .iter()
        .copied()
        .chain(b.segments.iter().flat_map(|s| [s.t0, s.t1]))
        .chain((0..=n_extra).map(|i| horizon * i as f64 / n_extra.max(1) as f64))
        .collect();
    times.sort_by(|x, y| x.partial_cmp(y).unwrap());
    times.dedup_by(|x, y| (*x - *y).abs() < 1e-14 * (1.0 + horizon));
    // Both strategies liquidate whatever is left at the horizon.  The grid
    // evaluator reports pre-liquidation holdings at the final node, so sampling
    // it there would charge the terminal block half a panel of holding time;
    // compare post-liquidation positions (zero on both sides) instead.
    let last = horizon - 1e-14 * (1.0 + horizon);
    Ok(trapezoid_l2(&times, |t| {
        if t >= last {
            0.0
        } else {
            a.phi_at(t) - b.phi_at(t)
        }
    }))
}

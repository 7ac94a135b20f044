//! Market model, strategy containers and cost functionals.
//!
//! The order book is block shaped with depth 1/η. A buy of dX↑ shares lifts
//! the best ask by η·dX↑, a sell depresses the best bid symmetrically, and
//! the two quotes revert towards each other at resilience rate κ, so the
//! spread follows
//!
//! dζ_t = η (dX↑_t + dX↓_t) − κ ζ_{t−} dt.
//!
//! Marking the open position to its liquidation value (mid quote minus the
//! cost of unwinding in one block) splits terminal wealth into frictionless
//! wealth plus a convex, nonnegative liquidity cost L, and for an investor
//! with exponential utility in an arithmetic Brownian market the whole
//! problem reduces to minimizing the deterministic tracking objective
//!
//! J(X) = L_T(X) + (ασ²/2) ∫₀ᵀ (φ_t − m)² dt,  m = μ/(ασ²).
//!
//! This module implements those functionals exactly for block strategies on
//! a time grid: between nodes the spread is a single decaying exponential
//! and holdings are constant, so every integral has a closed form and the
//! identity checks below are limited only by rounding, not discretization.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Relative tolerance for identities that must hold pathwise (e.g. the two
/// liquidation-wealth computations).
pub const IDENTITY_REL_TOL: f64 = 1e-8;
/// Absolute floor accompanying [`IDENTITY_REL_TOL`] for values near zero.
pub const IDENTITY_ABS_TOL: f64 = 1e-10;

// === Parameters and state ===

/// Model constants: resilience κ, impact η, drift μ, volatility σ and
/// absolute risk aversion α.
///
/// The derived quantities λ, β, γ± show up throughout the closed forms and
/// are exposed as methods so they are always consistent with the primitive
/// fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Resilience rate κ > 0 at which bid and ask revert to each other.
    pub kappa: f64,
    /// Instantaneous impact η > 0 per share (inverse order-book depth).
    pub eta: f64,
    /// Price drift μ ≥ 0. Zero is allowed and turns tracking into pure
    /// liquidation.
    pub mu: f64,
    /// Price volatility σ > 0.
    pub sigma: f64,
    /// Absolute risk aversion α > 0.
    pub alpha: f64,
}

impl MarketParams {
    pub fn new(kappa: f64, eta: f64, mu: f64, sigma: f64, alpha: f64) -> Result<Self> {
        let p = MarketParams { kappa, eta, mu, sigma, alpha };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let all_finite = [self.kappa, self.eta, self.mu, self.sigma, self.alpha]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Invalid("market parameters must be finite".into()));
        }
        if self.kappa <= 0.0 || self.eta <= 0.0 || self.sigma <= 0.0 || self.alpha <= 0.0 {
            return Err(Error::Invalid(format!(
                "kappa, eta, sigma, alpha must be > 0 (got {}, {}, {}, {})",
                self.kappa, self.eta, self.sigma, self.alpha
            )));
        }
        if self.mu < 0.0 {
            return Err(Error::Invalid(format!("mu must be >= 0 (got {})", self.mu)));
        }
        Ok(())
    }

    /// λ = √α·σ, the risk-adjusted volatility scale.
    pub fn lambda(&self) -> f64 {
        self.alpha.sqrt() * self.sigma
    }

    /// λ² = α·σ², the tracking-penalty weight.
    pub fn lambda_sq(&self) -> f64 {
        self.alpha * self.sigma * self.sigma
    }

    /// β = κλ/√(λ² + κη), the flow relaxation rate; always in (0, κ).
    pub fn beta(&self) -> f64 {
        let l2 = self.lambda_sq();
        self.kappa * self.lambda() / (l2 + self.kappa * self.eta).sqrt()
    }

    /// γ₊ = λ + √(κη + λ²) > 0.
    pub fn gamma_plus(&self) -> f64 {
        self.lambda() + (self.kappa * self.eta + self.lambda_sq()).sqrt()
    }

    /// γ₋ = λ − √(κη + λ²) < 0; note γ₊·γ₋ = −κη.
    pub fn gamma_minus(&self) -> f64 {
        self.lambda() - (self.kappa * self.eta + self.lambda_sq()).sqrt()
    }

    /// The Merton position m = μ/(ασ²), the frictionless tracking target.
    pub fn merton(&self) -> f64 {
        self.mu / self.lambda_sq()
    }
}

impl Default for MarketParams {
    /// Round-number parameters (κ=1, η=2, μ=10, σ=1, α=1) used by the CLI
    /// defaults and throughout the verification suites; the Merton position
    /// is 10 shares.
    fn default() -> Self {
        MarketParams { kappa: 1.0, eta: 2.0, mu: 10.0, sigma: 1.0, alpha: 1.0 }
    }
}

/// A point (τ, ζ, φ) of the state space: time to maturity, current bid-ask
/// spread and current share holdings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Time to maturity τ ≥ 0.
    pub tau: f64,
    /// Bid-ask spread ζ ≥ 0.
    pub zeta: f64,
    /// Share holdings φ, any sign.
    pub phi: f64,
}

impl State {
    pub fn new(tau: f64, zeta: f64, phi: f64) -> Result<Self> {
        if !(tau.is_finite() && zeta.is_finite() && phi.is_finite()) {
            return Err(Error::Invalid("state must be finite".into()));
        }
        if tau < 0.0 {
            return Err(Error::Invalid(format!("tau must be >= 0 (got {tau})")));
        }
        if zeta < 0.0 {
            return Err(Error::Invalid(format!("zeta must be >= 0 (got {zeta})")));
        }
        Ok(State { tau, zeta, phi })
    }
}

// === Grid strategies ===

/// Cumulative buy/sell controls discretized to block trades at grid nodes.
///
/// `d_up[i]` and `d_down[i]` are the (nonnegative) purchases and sales
/// executed at `grid[i]`; between nodes nothing trades, so holdings are
/// piecewise constant and the spread decays exponentially. The grid starts
/// at 0 and its last node is the horizon.
///
/// This representation serves two masters: it is the decision variable of
/// the numerical optimizer (nonnegativity is the only constraint) and the
/// common currency for evaluating costs of arbitrary strategies, including
/// discretized closed-form policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridStrategy")]
pub struct GridStrategy {
    grid: Vec<f64>,
    d_up: Vec<f64>,
    d_down: Vec<f64>,
    /// Holdings φ_{0−} just before time zero.
    pub phi0: f64,
    /// Spread ζ_{0−} just before time zero.
    pub zeta0: f64,
}

/// Unvalidated mirror of [`GridStrategy`] used during deserialization.
#[derive(Deserialize)]
struct RawGridStrategy {
    grid: Vec<f64>,
    d_up: Vec<f64>,
    d_down: Vec<f64>,
    phi0: f64,
    zeta0: f64,
}

impl TryFrom<RawGridStrategy> for GridStrategy {
    type Error = Error;

    fn try_from(raw: RawGridStrategy) -> Result<Self> {
        GridStrategy::new(raw.grid, raw.d_up, raw.d_down, raw.phi0, raw.zeta0)
    }
}

impl GridStrategy {
    pub fn new(
        grid: Vec<f64>,
        d_up: Vec<f64>,
        d_down: Vec<f64>,
        phi0: f64,
        zeta0: f64,
    ) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Invalid("grid must contain at least t = 0".into()));
        }
        if grid[0] != 0.0 {
            return Err(Error::Invalid(format!(
                "grid must start at 0 (got {})",
                grid[0]
            )));
        }
        if grid.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("grid times must be finite".into()));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("grid must be strictly increasing".into()));
        }
        if d_up.len() != grid.len() || d_down.len() != grid.len() {
            return Err(Error::Invalid(format!(
                "increment vectors must match the grid length {} (got {} up, {} down)",
                grid.len(),
                d_up.len(),
                d_down.len()
            )));
        }
        let nonneg = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !nonneg(&d_up) || !nonneg(&d_down) {
            return Err(Error::Invalid(
                "block increments must be finite and nonnegative".into(),
            ));
        }
        if !phi0.is_finite() || !zeta0.is_finite() || zeta0 < 0.0 {
            return Err(Error::Invalid(
                "phi0 must be finite and zeta0 finite nonnegative".into(),
            ));
        }
        Ok(GridStrategy { grid, d_up, d_down, phi0, zeta0 })
    }

    /// A strategy that never trades, on a uniform grid with `n` intervals.
    pub fn no_trade(horizon: f64, n: usize, phi0: f64, zeta0: f64) -> Result<Self> {
        if !(horizon > 0.0) || n == 0 {
            // A zero horizon still needs its single node at t = 0.
            if horizon == 0.0 {
                return GridStrategy::new(vec![0.0], vec![0.0], vec![0.0], phi0, zeta0);
            }
            return Err(Error::Invalid(format!(
                "horizon must be > 0 and n >= 1 (got {horizon}, {n})"
            )));
        }
        let grid = (0..=n).map(|i| horizon * i as f64 / n as f64).collect();
        GridStrategy::new(grid, vec![0.0; n + 1], vec![0.0; n + 1], phi0, zeta0)
    }

    /// Same grid and endowment, different block increments.
    pub fn with_increments(&self, d_up: Vec<f64>, d_down: Vec<f64>) -> Result<Self> {
        GridStrategy::new(self.grid.clone(), d_up, d_down, self.phi0, self.zeta0)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn d_up(&self) -> &[f64] {
        &self.d_up
    }

    pub fn d_down(&self) -> &[f64] {
        &self.d_down
    }

    /// Number of grid nodes.
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The terminal time T (last grid node).
    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Index of the last node with `grid[i] <= t`.
    fn last_node_at_or_before(&self, t: f64) -> usize {
        match self.grid.binary_search_by(|g| g.total_cmp(&t)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }

    /// Cumulative controls (X↑_t, X↓_t), right continuous in `t`.
    pub fn cumulative_at(&self, t: f64) -> (f64, f64) {
        let i = self.last_node_at_or_before(t);
        let up: f64 = self.d_up[..=i].iter().sum();
        let down: f64 = self.d_down[..=i].iter().sum();
        (up, down)
    }

    /// Holdings φ_t = φ_{0−} + X↑_t − X↓_t, right continuous in `t`.
    pub fn phi_at(&self, t: f64) -> f64 {
        let (up, down) = self.cumulative_at(t);
        self.phi0 + up - down
    }

    /// Terminal holdings φ_T.
    pub fn phi_terminal(&self) -> f64 {
        self.phi_at(self.horizon())
    }

    /// ∫₀ᵀ φ_t dt and ∫₀ᵀ φ_t² dt, exact because φ is piecewise constant.
    pub fn holdings_integrals(&self) -> (f64, f64) {
        let mut phi = self.phi0;
        let (mut i1, mut i2) = (0.0, 0.0);
        for i in 0..self.grid.len() {
            phi += self.d_up[i] - self.d_down[i];
            if i + 1 < self.grid.len() {
                let dt = self.grid[i + 1] - self.grid[i];
                i1 += phi * dt;
                i2 += phi * phi * dt;
            }
        }
        (i1, i2)
    }

    // === Serialization ===

    /// JSON object {grid, d_up, d_down, phi0, zeta0}.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// CSV with columns `t,d_up,d_down`, one row per grid node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,d_up,d_down\n");
        for i in 0..self.grid.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                g17(self.grid[i]),
                g17(self.d_up[i]),
                g17(self.d_down[i])
            ));
        }
        out
    }

    /// Parses the CSV produced by [`GridStrategy::to_csv`]; the endowment is
    /// not part of the file and must be supplied.
    pub fn from_csv(text: &str, phi0: f64, zeta0: f64) -> Result<Self> {
        let mut grid = Vec::new();
        let mut d_up = Vec::new();
        let mut d_down = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with('t')) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::CsvParse {
                    line: lineno + 1,
                    msg: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| Error::CsvParse {
                    line: lineno + 1,
                    msg: format!("bad number {s:?}: {e}"),
                })
            };
            grid.push(parse(fields[0])?);
            d_up.push(parse(fields[1])?);
            d_down.push(parse(fields[2])?);
        }
        GridStrategy::new(grid, d_up, d_down, phi0, zeta0)
    }
}

/// Formats a double with 17 significant digits, enough for a lossless
/// round trip through text.
pub fn g17(x: f64) -> String {
    format!("{x:.16e}")
}

// === Spread evolution ===

/// The spread at a query time, split into the decayed initial spread and the
/// part contributed by trading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadState {
    /// ζ_t, right continuous (a block at exactly `t` is included).
    pub zeta: f64,
    /// e^{−κt}·ζ₀, the spread that would remain without any trading.
    pub decayed_initial: f64,
}

/// Spread ζ_t = e^{−κt}·ζ₀ + η·Σ_{tᵢ ≤ t} e^{−κ(t−tᵢ)}·(ΔX↑ᵢ + ΔX↓ᵢ).
///
/// Right continuous in `t`; errors if `t` lies outside the horizon.
pub fn spread_at(p: &MarketParams, strat: &GridStrategy, t: f64) -> Result<SpreadState> {
    let horizon = strat.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::OutsideHorizon { t, horizon });
    }
    let decayed = (-p.kappa * t).exp() * strat.zeta0;
    let mut zeta = decayed;
    for i in 0..strat.len() {
        let ti = strat.grid()[i];
        if ti > t {
            break;
        }
        zeta += p.eta * (-p.kappa * (t - ti)).exp() * (strat.d_up()[i] + strat.d_down()[i]);
    }
    Ok(SpreadState { zeta, decayed_initial: decayed })
}

// === Liquidity cost ===

/// Liquidity cost L_t of the strategy up to time `t`:
///
/// L_t = (η|φ_t| + ζ_t − e^{−κt}ζ₀)²/(4η) + ½|φ_t|·e^{−κt}ζ₀ + (η/4)φ_{0−}²
///     + ½ Σ_{tᵢ ≤ t} e^{−κtᵢ} ζ₀ (ΔX↑ᵢ + ΔX↓ᵢ)
///     + κ/(2η) ∫₀ᵗ (ζ_s − e^{−κs}ζ₀)² ds.
///
/// The final integral is evaluated in closed form per inter-node interval
/// (on each the excess spread is a single decaying exponential), so the
/// result carries no discretization error. At t = 0 with no trades this
/// reduces to the unwind cost L_{0−} = ½ζ₀|φ_{0−}| + (η/2)φ_{0−}².
pub fn liquidity_cost(p: &MarketParams, strat: &GridStrategy, t: f64) -> Result<f64> {
    let horizon = strat.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::OutsideHorizon { t, horizon });
    }
    let spread = spread_at(p, strat, t)?;
    let phi_t = strat.phi_at(t);
    let excess_t = spread.zeta - spread.decayed_initial;

    let block_term = {
        let s = p.eta * phi_t.abs() + excess_t;
        s * s / (4.0 * p.eta)
    };
    let carry_term = 0.5 * phi_t.abs() * spread.decayed_initial;
    let initial_term = 0.25 * p.eta * strat.phi0 * strat.phi0;

    let mut crossing_term = 0.0;
    for i in 0..strat.len() {
        let ti = strat.grid()[i];
        if ti > t {
            break;
        }
        crossing_term += 0.5
            * (-p.kappa * ti).exp()
            * strat.zeta0
            * (strat.d_up()[i] + strat.d_down()[i]);
    }

    // ∫₀ᵗ (ζ_s − e^{−κs}ζ₀)² ds with the excess spread g_i·e^{−κ(s−tᵢ)} on
    // each interval [tᵢ, t_{i+1}).
    let mut decay_integral = 0.0;
    let mut excess = 0.0; // excess spread just after the current node
    for i in 0..strat.len() {
        let ti = strat.grid()[i];
        if ti > t {
            break;
        }
        let prev = if i == 0 { 0.0 } else { strat.grid()[i - 1] };
        if i > 0 {
            // decay the running excess across the previous interval
            excess *= (-p.kappa * (ti - prev)).exp();
        }
        excess += p.eta * (strat.d_up()[i] + strat.d_down()[i]);
        let end = if i + 1 < strat.len() { strat.grid()[i + 1].min(t) } else { t };
        if end > ti {
            let dt = end - ti;
            decay_integral +=
                excess * excess * (1.0 - (-2.0 * p.kappa * dt).exp()) / (2.0 * p.kappa);
        }
        if end >= t {
            break;
        }
    }
    let reversion_term = p.kappa / (2.0 * p.eta) * decay_integral;

    Ok(block_term + carry_term + initial_term + crossing_term + reversion_term)
}

// === Tracking objective ===

/// The deterministic tracking objective
/// J(X) = L_T(X) + (ασ²/2)·∫₀ᵀ (φ_t − m)² dt with m = μ/(ασ²).
///
/// Both pieces are exact: L via [`liquidity_cost`] and the deviation
/// integral interval by interval since φ is piecewise constant.
pub fn tracking_cost(p: &MarketParams, strat: &GridStrategy) -> Result<f64> {
    let horizon = strat.horizon();
    let l_terminal = liquidity_cost(p, strat, horizon)?;
    let m = p.merton();
    let mut deviation = 0.0;
    let mut phi = strat.phi0;
    for i in 0..strat.len() {
        phi += strat.d_up()[i] - strat.d_down()[i];
        if i + 1 < strat.len() {
            let dt = strat.grid()[i + 1] - strat.grid()[i];
            deviation += (phi - m) * (phi - m) * dt;
        }
    }
    Ok(l_terminal + 0.5 * p.lambda_sq() * deviation)
}

// === Liquidation wealth ===

/// Terminal liquidation wealth V_T for a sampled price path.
///
/// `path` holds the unaffected price at every grid node, starting from the
/// initial mid quote P_{0−} = (A₀+B₀)/2; `xi0` is the initial cash.
///
/// The value is computed twice, by independent code paths:
///
/// 1. direct cash accounting: every block executes at its average price
///    (A_{t−} + η/2·ΔX↑ for buys, B_{t−} − η/2·ΔX↓ for sells), quotes are
///    advanced through impact, reversion and price shocks, and the terminal
///    position is marked at mid minus the one-block unwind penalty
///    ½ζ_T|φ_T| + (η/2)φ_T²;
/// 2. the decomposition V_T = ξ₀ + φ_{0−}P_{0−} + ∫φ dP − L_T.
///
/// Disagreement beyond 1e−8 relative is reported as an internal consistency
/// error since it can only come from an implementation bug.
pub fn liquidation_wealth(
    p: &MarketParams,
    strat: &GridStrategy,
    path: &[f64],
    xi0: f64,
) -> Result<f64> {
    if path.len() != strat.len() {
        return Err(Error::Invalid(format!(
            "price path must be sampled on the strategy grid ({} nodes, got {})",
            strat.len(),
            path.len()
        )));
    }
    if path.iter().any(|x| !x.is_finite()) || !xi0.is_finite() {
        return Err(Error::Invalid("price path and cash must be finite".into()));
    }

    // Direct cash accounting. The mid quote differs from the unaffected
    // price only through accumulated net impact: between nodes reversion
    // moves bid and ask symmetrically, so the mid follows dP alone.
    let mut cash = xi0;
    let mut mid = path[0];
    let mut zeta = strat.zeta0;
    let mut phi = strat.phi0;
    for i in 0..strat.len() {
        if i > 0 {
            let dt = strat.grid()[i] - strat.grid()[i - 1];
            mid += path[i] - path[i - 1];
            zeta *= (-p.kappa * dt).exp();
        }
        let (du, dd) = (strat.d_up()[i], strat.d_down()[i]);
        if du > 0.0 {
            let ask = mid + 0.5 * zeta;
            cash -= (ask + 0.5 * p.eta * du) * du;
        }
        if dd > 0.0 {
            let bid = mid - 0.5 * zeta;
            cash += (bid - 0.5 * p.eta * dd) * dd;
        }
        mid += 0.5 * p.eta * (du - dd);
        zeta += p.eta * (du + dd);
        phi += du - dd;
    }
    let direct = cash + mid * phi - (0.5 * zeta * phi.abs() + 0.5 * p.eta * phi * phi);

    // Decomposition through the liquidity cost.
    let mut stieltjes = 0.0;
    let mut phi_running = strat.phi0 + strat.d_up()[0] - strat.d_down()[0];
    for i in 1..strat.len() {
        stieltjes += phi_running * (path[i] - path[i - 1]);
        phi_running += strat.d_up()[i] - strat.d_down()[i];
    }
    let l_terminal = liquidity_cost(p, strat, strat.horizon())?;
    let decomposed = xi0 + strat.phi0 * path[0] + stieltjes - l_terminal;

    let scale = 1.0 + direct.abs().max(decomposed.abs());
    if (direct - decomposed).abs() > IDENTITY_REL_TOL * scale {
        return Err(Error::Inconsistent(format!(
            "liquidation wealth mismatch: direct {direct} vs decomposed {decomposed}"
        )));
    }
    Ok(direct)
}

// === Mean-variance value ===

/// The mean-variance functional of a deterministic strategy,
///
/// E[V_T] − (α/2)·var(V_T) = book₀ + μ∫₀ᵀφ_t dt − L_T − (ασ²/2)∫₀ᵀφ_t² dt,
///
/// where `book0` = ξ₀ + φ_{0−}P_{0−} is the initial frictionless book value.
/// Maximizing this is equivalent to minimizing the tracking objective: the
/// two are linked by `value + J − μ²T/(2ασ²) = book0` exactly.
pub fn mean_variance_value(p: &MarketParams, strat: &GridStrategy, book0: f64) -> Result<f64> {
    let (i1, i2) = strat.holdings_integrals();
    let l_terminal = liquidity_cost(p, strat, strat.horizon())?;
    Ok(book0 + p.mu * i1 - l_terminal - 0.5 * p.lambda_sq() * i2)
}

//! Run configuration shared by all subcommands: market parameters plus
//! output and suite knobs. Values are resolved from command-line flags,
//! then an optional flat `key = value` file, then built-in defaults.

use std::collections::HashMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use lobtrack::model::MarketParams;

use crate::{io_failure, Failure};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "LOBTRACK_OUT";

/// Keys accepted in a `--config` file; anything else is a typo.
const FILE_KEYS: [&str; 12] = [
    "kappa", "eta", "mu", "sigma", "alpha", "out", "format", "grid", "tau_max",
    "zeta_max", "seed", "tol",
];

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Parameter file with one `key = value` per line, `#` for comments.
    /// Explicit flags override file entries.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Order book resilience kappa > 0.
    #[arg(long)]
    pub kappa: Option<f64>,

    /// Price impact eta > 0 per unit traded.
    #[arg(long)]
    pub eta: Option<f64>,

    /// Price drift mu.
    #[arg(long, allow_negative_numbers = true)]
    pub mu: Option<f64>,

    /// Price volatility sigma > 0.
    #[arg(long)]
    pub sigma: Option<f64>,

    /// Absolute risk aversion alpha > 0.
    #[arg(long)]
    pub alpha: Option<f64>,

    /// Output directory (default: $LOBTRACK_OUT, then the working dir).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Format for tabular output files.
    #[arg(long, value_enum)]
    pub format: Option<Format>,

    /// Grid resolution per axis, at least 2.
    #[arg(long)]
    pub grid: Option<usize>,

    /// Largest time to maturity covered by grids and sampled states.
    #[arg(long)]
    pub tau_max: Option<f64>,

    /// Largest spread covered by grids and sampled states.
    #[arg(long)]
    pub zeta_max: Option<f64>,

    /// Seed for the randomized suites.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Tolerance for the optimality checks.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (csv or json)")),
        }
    }
}

/// Fully resolved configuration.
pub struct RunConfig {
    pub params: MarketParams,
    pub out: PathBuf,
    pub format: Format,
    pub grid: usize,
    pub tau_max: f64,
    pub zeta_max: f64,
    pub seed: u64,
    pub tol: f64,
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<RunConfig, Failure> {
        let file = match &args.config {
            Some(path) => parse_config_file(path)?,
            None => HashMap::new(),
        };
        let defaults = MarketParams::default();

        let kappa = pick(args.kappa, &file, "kappa", defaults.kappa)?;
        let eta = pick(args.eta, &file, "eta", defaults.eta)?;
        let mu = pick(args.mu, &file, "mu", defaults.mu)?;
        let sigma = pick(args.sigma, &file, "sigma", defaults.sigma)?;
        let alpha = pick(args.alpha, &file, "alpha", defaults.alpha)?;
        let params = MarketParams::new(kappa, eta, mu, sigma, alpha)?;

        let grid = pick(args.grid, &file, "grid", 100)?;
        if grid < 2 {
            return Err(Failure::Validation(format!(
                "grid resolution must be at least 2 (got {grid})"
            )));
        }
        let tau_max = pick(args.tau_max, &file, "tau_max", 5.0)?;
        if !(tau_max.is_finite() && tau_max > 0.0) {
            return Err(Failure::Validation(format!(
                "tau_max must be positive (got {tau_max})"
            )));
        }
        let zeta_max = pick(args.zeta_max, &file, "zeta_max", 25.0)?;
        if !(zeta_max.is_finite() && zeta_max >= 0.0) {
            return Err(Failure::Validation(format!(
                "zeta_max must be nonnegative (got {zeta_max})"
            )));
        }
        let tol = pick(args.tol, &file, "tol", 1e-6)?;
        if !(tol.is_finite() && tol > 0.0) {
            return Err(Failure::Validation(format!(
                "tol must be positive (got {tol})"
            )));
        }

        let out = match (&args.out, file.get("out")) {
            (Some(path), _) => path.clone(),
            (None, Some(value)) => PathBuf::from(value),
            (None, None) => env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(".")),
        };

        Ok(RunConfig {
            params,
            out,
            format: pick(args.format, &file, "format", Format::Csv)?,
            grid,
            tau_max,
            zeta_max,
            seed: pick(args.seed, &file, "seed", 0)?,
            tol,
        })
    }
}

/// Flag value if given, else the config-file entry, else the default.
fn pick<T: FromStr>(
    flag: Option<T>,
    file: &HashMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, Failure> {
    if let Some(value) = flag {
        return Ok(value);
    }
    match file.get(key) {
        Some(raw) => raw.parse().map_err(|_| {
            Failure::Validation(format!("config key `{key}`: cannot parse `{raw}`"))
        }),
        None => Ok(default),
    }
}

fn parse_config_file(path: &Path) -> Result<HashMap<String, String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let mut map = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Failure::Validation(format!(
                "{}:{}: expected `key = value`, got `{line}`",
                path.display(),
                idx + 1
            )));
        };
        let key = key.trim().replace('-', "_");
        if !FILE_KEYS.contains(&key.as_str()) {
            return Err(Failure::Validation(format!(
                "{}:{}: unknown key `{key}`",
                path.display(),
                idx + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

/// Creates the output directory if needed and returns `out/name`.
pub fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(&cfg.out).map_err(|e| io_failure(&cfg.out, e))?;
    Ok(cfg.out.join(name))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

//! `lobtrack solve`: builds the optimal policy for one initial state and
//! exports it as JSON together with a sampled state trajectory.

use clap::Args;

use lobtrack::model::{g17, State};
use lobtrack::policy::{self, SegmentKind, TrajectoryRow};

use crate::config::{self, CommonArgs, Format, RunConfig};
use crate::Failure;

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Time to maturity of the initial state.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: f64,

    /// Initial bid-ask spread.
    #[arg(long, allow_negative_numbers = true)]
    pub zeta: f64,

    /// Initial holdings; negative for a short position.
    #[arg(long, allow_negative_numbers = true)]
    pub phi: f64,

    /// Number of uniform samples in the exported trajectory.
    #[arg(long, default_value_t = 400)]
    pub samples: usize,
}

pub fn run(args: &SolveArgs) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(&args.common)?;
    if args.samples < 2 {
        return Err(Failure::Validation(format!(
            "--samples must be at least 2 (got {})",
            args.samples
        )));
    }

    let echo = format!(
        "state (tau={}, zeta={}, phi={})",
        args.tau, args.zeta, args.phi
    );
    let state = State::new(args.tau, args.zeta, args.phi)
        .map_err(|e| Failure::from(e).prefixed(&echo))?;
    let strat = policy::build_strategy(&cfg.params, &state)
        .map_err(|e| Failure::from(e).prefixed(&echo))?;

    let mut json = strat.to_json().map_err(Failure::from)?;
    json.push('\n');
    let strat_path = config::out_path(&cfg, "strategy.json")?;
    config::write_file(&strat_path, &json)?;

    let rows = policy::sample_trajectory(&strat, args.samples);
    let (name, contents) = match cfg.format {
        Format::Csv => ("trajectory.csv", trajectory_csv(&rows)),
        Format::Json => ("trajectory.json", trajectory_json(&rows)),
    };
    let traj_path = config::out_path(&cfg, name)?;
    config::write_file(&traj_path, &contents)?;

    println!("policy: {}", describe(&strat.segments));
    println!("wrote {}", strat_path.display());
    println!("wrote {}", traj_path.display());
    Ok(())
}

/// One-line policy summary: block sizes in parentheses, durations in
/// brackets.
fn describe(segments: &[policy::Segment]) -> String {
    let parts: Vec<String> = segments
        .iter()
        .map(|seg| match seg.kind {
            SegmentKind::InitialBlock { size, .. } | SegmentKind::TerminalBlock { size } => {
                format!("{}({:.4})", seg.kind.label(), size)
            }
            _ => format!("{}[{:.4}]", seg.kind.label(), seg.t1 - seg.t0),
        })
        .collect();
    parts.join(" -> ")
}

fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut text = String::from("t,phi,zeta,region\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            g17(r.t),
            g17(r.phi),
            g17(r.zeta),
            r.region
        ));
    }
    text
}

fn trajectory_json(rows: &[TrajectoryRow]) -> String {
    let mut text = serde_json::to_string_pretty(rows).expect("plain records serialize");
    text.push('\n');
    text
}

//! `lobtrack boundary`: tabulates the buy and sell boundaries over a
//! uniform (tau, zeta) grid, tagging each point with the analytic piece
//! the buy boundary is on.

use clap::Args;
use serde::Serialize;

use lobtrack::boundary::FreeBoundary;
use lobtrack::model::g17;

use crate::config::{self, CommonArgs, Format, RunConfig};
use crate::Failure;

#[derive(Args, Debug)]
pub struct BoundaryArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Serialize)]
struct Row {
    tau: f64,
    zeta: f64,
    phi_buy: f64,
    phi_sell: f64,
    piece: &'static str,
}

pub fn run(args: &BoundaryArgs) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(&args.common)?;
    let fb = FreeBoundary::new(cfg.params);
    let n = cfg.grid;

    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        let tau = cfg.tau_max * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let zeta = cfg.zeta_max * j as f64 / (n - 1) as f64;
            let bp = fb.buy_point(tau, zeta);
            rows.push(Row {
                tau,
                zeta,
                phi_buy: bp.phi,
                phi_sell: fb.phi_sell(tau, zeta),
                piece: bp.piece.label(),
            });
        }
    }

    let (name, contents) = match cfg.format {
        Format::Csv => ("boundary.csv", to_csv(&rows)),
        Format::Json => ("boundary.json", to_json(&rows)),
    };
    let path = config::out_path(&cfg, name)?;
    config::write_file(&path, &contents)?;
    println!("wrote {} ({} points)", path.display(), rows.len());
    Ok(())
}

fn to_csv(rows: &[Row]) -> String {
    let mut text = String::from("tau,zeta,phi_buy,phi_sell,piece\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            g17(r.tau),
            g17(r.zeta),
            g17(r.phi_buy),
            g17(r.phi_sell),
            r.piece
        ));
    }
    text
}

fn to_json(rows: &[Row]) -> String {
    let mut text = serde_json::to_string_pretty(rows).expect("plain records serialize");
    text.push('\n');
    text
}

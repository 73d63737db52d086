use std::path::Path;

use serde::{Deserialize, Serialize};
use volimpute::arbcheck::{check_grid, vol_grid_to_prices, ArbReport, PriceGrid};
use volimpute::surfaces::load_csv;

use crate::commands::impute::is_surface_csv;
use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCheck {
    /// Surface date, or `None` for a price-grid input.
    pub date: Option<String>,
    /// Tenor indices whose converted strikes were not monotone in delta.
    pub non_monotone_tenors: Vec<usize>,
    pub report: ArbReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArbCheckOutput {
    pub forward: f64,
    pub arb_free: bool,
    pub grids: Vec<GridCheck>,
}

pub fn check(input: &Path, forward: f64) -> CliResult<ArbCheckOutput> {
    let mut grids = Vec::new();
    if is_surface_csv(input)? {
        for s in load_csv(input)?.surfaces.iter().filter(|s| s.is_complete()) {
            let (g, bad) = vol_grid_to_prices(s, forward)?;
            grids.push(GridCheck { date: Some(s.date.to_string()), non_monotone_tenors: bad, report: check_grid(&g) });
        }
    } else {
        let g = PriceGrid::load_csv(input, forward)?;
        grids.push(GridCheck { date: None, non_monotone_tenors: Vec::new(), report: check_grid(&g) });
    }
    let arb_free = grids.iter().all(|g| g.report.arb_free);
    Ok(ArbCheckOutput { forward, arb_free, grids })
}

/// Returns whether every grid is arbitrage-free.
pub fn run(input: &Path, forward: f64, report: Option<&Path>) -> CliResult<bool> {
    let out = check(input, forward)?;
    for g in &out.grids {
        let label = g.date.clone().unwrap_or_else(|| "grid".into());
        if g.report.arb_free {
            println!("{label}: arbitrage-free (worst margin {:?})", g.report.worst_margin);
            continue;
        }
        println!("{label}: ARBITRAGE");
        for ((k, t), (k2, t2)) in &g.report.calendar_violations {
            println!("  calendar: (k={k}, t={t}) vs (k={k2}, t={t2})");
        }
        for v in &g.report.slope_violations {
            println!("  slope: (k={}, t={}) left sup {:.6e} > bound {:.6e}", v.at.0, v.at.1, v.left_sup, v.right_bound);
        }
    }
    if let Some(p) = report {
        std::fs::write(p, serde_json::to_string_pretty(&out)?)?;
    }
    Ok(out.arb_free)
}

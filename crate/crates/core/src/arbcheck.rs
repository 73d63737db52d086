//! Static-arbitrage checks on discrete call-price grids with one forward.
//!
//! Condition 1 (calendar): equal strikes, `t < t'` ⇒ `p(k,t) < p(k',t')`.
//! Condition 2 (slopes): for every node, the sup of left difference
//! quotients over tenors `>= t` is at most `min(0, inf of right quotients)`.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::surfaces::black::{bs_call, delta_to_strike};
use crate::surfaces::grid::{cell_index, Surface, DELTAS, NUM_CELLS, NUM_TENORS, TENOR_YEARS};
use crate::surfaces::Standardizer;
use crate::vae::{sample_generative, VaeParams};

/// Strikes within `STRIKE_TOL * F` count as equal.
pub const STRIKE_TOL: f64 = 1e-9;
/// Absolute slack on price and slope inequalities.
pub const SLOPE_TOL: f64 = 1e-10;
pub const ORACLE_MAX_TENORS: usize = 6;
pub const ORACLE_MAX_STRIKES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceGrid {
    pub tenors: Vec<f64>,
    /// `strikes[t][k]`, ascending in `k`.
    pub strikes: Vec<Vec<f64>>,
    pub prices: Vec<Vec<f64>>,
    pub forward: f64,
}

impl PriceGrid {
    /// Builds a grid, sorting each tenor's nodes by strike.
    pub fn new(tenors: Vec<f64>, strikes: Vec<Vec<f64>>, prices: Vec<Vec<f64>>, forward: f64) -> Result<Self> {
        if strikes.len() != tenors.len() || prices.len() != tenors.len() {
            return Err(Error::Dimension("one strike and price list per tenor".into()));
        }
        let mut order: Vec<usize> = (0..tenors.len()).collect();
        order.sort_by(|a, b| tenors[*a].total_cmp(&tenors[*b]));
        let mut g = PriceGrid { tenors: vec![], strikes: vec![], prices: vec![], forward };
        for t in order {
            if strikes[t].len() != prices[t].len() {
                return Err(Error::Dimension(format!("tenor {}: strikes and prices differ in length", tenors[t])));
            }
            let mut nodes: Vec<(f64, f64)> = strikes[t].iter().copied().zip(prices[t].iter().copied()).collect();
            nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
            g.tenors.push(tenors[t]);
            g.strikes.push(nodes.iter().map(|n| n.0).collect());
            g.prices.push(nodes.iter().map(|n| n.1).collect());
        }
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.forward.is_finite() && self.forward > 0.0) {
            return Err(Error::Parameter(format!("forward must be positive, got {}", self.forward)));
        }
        if self.tenors.windows(2).any(|w| w[0] >= w[1]) || self.tenors.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("tenors must be finite and strictly ascending".into()));
        }
        for (t, (ks, ps)) in self.strikes.iter().zip(&self.prices).enumerate() {
            if ks.len() != ps.len() {
                return Err(Error::Dimension(format!("tenor index {t}: strikes and prices differ in length")));
            }
            if ks.windows(2).any(|w| w[0] >= w[1]) || ks.iter().any(|k| !k.is_finite()) {
                return Err(Error::Data(format!("tenor index {t}: strikes must be finite and strictly ascending")));
            }
            if ps.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::Data(format!("tenor index {t}: prices must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.strikes.iter().map(Vec::len).sum()
    }

    /// Reads `tenor,strike,price` rows.
    pub fn read_csv(reader: impl Read, forward: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
        if header.iter().collect::<Vec<_>>() != ["tenor", "strike", "price"] {
            return Err(Error::Parse { line: 1, message: format!("expected header tenor,strike,price, got {:?}", header) });
        }
        let mut rows: Vec<(f64, f64, f64)> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            let num = |j: usize| -> Result<f64> {
                rec.get(j)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|e| Error::Parse { line, message: format!("column {j}: {e}") })
            };
            rows.push((num(0)?, num(1)?, num(2)?));
        }
        let mut tenors: Vec<f64> = rows.iter().map(|r| r.0).collect();
        tenors.sort_by(f64::total_cmp);
        tenors.dedup();
        let mut strikes = vec![Vec::new(); tenors.len()];
        let mut prices = vec![Vec::new(); tenors.len()];
        for (t, k, p) in rows {
            let ti = tenors.iter().position(|x| *x == t).expect("tenor collected above");
            strikes[ti].push(k);
            prices[ti].push(p);
        }
        Self::new(tenors, strikes, prices, forward)
    }

    pub fn load_csv(path: impl AsRef<Path>, forward: f64) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, forward)
    }

    fn points(&self) -> Vec<Node> {
        let mut out = Vec::with_capacity(self.num_points());
        for (t, (ks, ps)) in self.strikes.iter().zip(&self.prices).enumerate() {
            for (k, (&strike, &price)) in ks.iter().zip(ps).enumerate() {
                out.push(Node { k, t, strike, price });
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    k: usize,
    t: usize,
    strike: f64,
    price: f64,
}

/// Grid coordinates `(strike index, tenor index)`.
pub type Coord = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeViolation {
    pub at: Coord,
    /// Sup of left quotients (`-inf` when there is none).
    pub left_sup: f64,
    /// `min(0, inf of right quotients)`.
    pub right_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArbReport {
    pub arb_free: bool,
    pub calendar_violations: Vec<(Coord, Coord)>,
    pub slope_violations: Vec<SlopeViolation>,
    /// Smallest slack over all checked inequalities; negative when violated.
    /// `None` when no inequality applies.
    pub worst_margin: Option<f64>,
}

fn push_margin(worst: &mut Option<f64>, m: f64) {
    *worst = Some(worst.map_or(m, |w| w.min(m)));
}

pub fn check_grid(grid: &PriceGrid) -> ArbReport {
    let nodes = grid.points();
    let tol_k = STRIKE_TOL * grid.forward;
    let mut calendar = Vec::new();
    let mut slopes = Vec::new();
    let mut worst = None;
    for a in &nodes {
        let mut left = f64::NEG_INFINITY;
        let mut right = f64::INFINITY;
        for b in &nodes {
            if b.t < a.t {
                continue;
            }
            let dk = a.strike - b.strike;
            if dk.abs() <= tol_k {
                if b.t > a.t {
                    let m = b.price - a.price;
                    push_margin(&mut worst, m);
                    if m <= SLOPE_TOL {
                        calendar.push(((a.k, a.t), (b.k, b.t)));
                    }
                }
            } else if dk > 0.0 {
                left = left.max((a.price - b.price) / dk);
            } else {
                right = right.min((b.price - a.price) / -dk);
            }
        }
        if left == f64::NEG_INFINITY {
            continue;
        }
        let bound = right.min(0.0);
        push_margin(&mut worst, bound - left);
        if left > bound + SLOPE_TOL {
            slopes.push(SlopeViolation { at: (a.k, a.t), left_sup: left, right_bound: bound });
        }
    }
    ArbReport { arb_free: calendar.is_empty() && slopes.is_empty(), calendar_violations: calendar, slope_violations: slopes, worst_margin: worst }
}

/// Exhaustive search over calendar spreads, vertical spreads and butterflies
/// whose short leg is no later than its long legs. Each portfolio's value
/// dominates zero at the short leg's expiry, so a negative cost (or a
/// non-positive cost for a calendar spread) is an arbitrage.
pub fn brute_force_oracle(grid: &PriceGrid) -> Result<bool> {
    if grid.tenors.len() > ORACLE_MAX_TENORS || grid.strikes.iter().any(|s| s.len() > ORACLE_MAX_STRIKES) {
        return Err(Error::Size(format!(
            "oracle handles at most {ORACLE_MAX_TENORS} tenors x {ORACLE_MAX_STRIKES} strikes"
        )));
    }
    let nodes = grid.points();
    let tol_k = STRIKE_TOL * grid.forward;
    for short in &nodes {
        let later: Vec<&Node> = nodes.iter().filter(|n| n.t >= short.t).collect();
        for long in &later {
            let gap = short.strike - long.strike;
            if gap.abs() <= tol_k {
                // calendar: long later call, short earlier call, same strike
                if long.t > short.t && long.price - short.price <= SLOPE_TOL {
                    return Ok(true);
                }
                continue;
            }
            // vertical: long a lower strike, short a higher one
            if gap > 0.0 && long.price - short.price < -SLOPE_TOL * gap {
                return Ok(true);
            }
        }
        // butterfly: long lam of a lower wing and (1 - lam) of an upper wing
        for lo in later.iter().filter(|n| n.strike < short.strike - tol_k) {
            for hi in later.iter().filter(|n| n.strike > short.strike + tol_k) {
                let w = hi.strike - lo.strike;
                let lam = (hi.strike - short.strike) / w;
                let cost = lam * lo.price + (1.0 - lam) * hi.price - short.price;
                let scale = (short.strike - lo.strike) * (hi.strike - short.strike) / w;
                if cost < -SLOPE_TOL * scale {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

/// Converts a complete vol surface to call prices.
///
/// Returns the grid and the tenor indices whose strikes were not monotone in
/// delta (those tenors are re-sorted by strike).
pub fn vol_grid_to_prices(surface: &Surface, forward: f64) -> Result<(PriceGrid, Vec<usize>)> {
    if !surface.is_complete() {
        return Err(Error::Data(format!("surface {} is incomplete", surface.date)));
    }
    vols_to_prices(&surface.values, forward)
}

fn vols_to_prices(vols: &[f64], forward: f64) -> Result<(PriceGrid, Vec<usize>)> {
    if vols.len() != NUM_CELLS {
        return Err(Error::Dimension(format!("expected {NUM_CELLS} vols, got {}", vols.len())));
    }
    let mut strikes = vec![Vec::new(); NUM_TENORS];
    let mut prices = vec![Vec::new(); NUM_TENORS];
    let mut non_monotone = Vec::new();
    for t in 0..NUM_TENORS {
        let tau = TENOR_YEARS[t];
        for (d, &delta) in DELTAS.iter().enumerate() {
            let vol = vols[cell_index(t, d)];
            if !(vol.is_finite() && vol > 0.0) {
                return Err(Error::Data(format!("non-positive vol {vol} at cell {}", cell_index(t, d))));
            }
            let k = delta_to_strike(delta, tau, vol, forward)?;
            strikes[t].push(k);
            prices[t].push(bs_call(forward, k, tau, vol));
        }
        // strikes fall as delta rises
        if strikes[t].windows(2).any(|w| w[0] <= w[1]) {
            non_monotone.push(t);
        }
    }
    let grid = PriceGrid::new(TENOR_YEARS.to_vec(), strikes, prices, forward)?;
    Ok((grid, non_monotone))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArbRate {
    pub n: usize,
    pub arb_free: usize,
    pub fraction: f64,
    /// Binomial standard error of `fraction`.
    pub std_error: f64,
}

/// Whether destandardised vols (one surface) are arbitrage-free; surfaces
/// with a non-positive vol or unconvertible strikes count as arbitrage.
pub fn vols_arb_free(vols: &[f64], forward: f64) -> bool {
    match vols_to_prices(vols, forward) {
        Ok((grid, _)) => check_grid(&grid).arb_free,
        Err(_) => false,
    }
}

const SHARD: usize = 1000;

/// Fraction of generated surfaces (two-step sampling with output noise)
/// that pass [`check_grid`]. Shard `i` draws from `seed.fork(i)`.
pub fn sample_arb_rate(params: &VaeParams, standardizer: &Standardizer, n_samples: usize, forward: f64, seed: u64) -> Result<ArbRate> {
    if params.config.feature_dim != NUM_CELLS {
        return Err(Error::Dimension(format!("model has {} features, surfaces need {NUM_CELLS}", params.config.feature_dim)));
    }
    let base = RngStream::new(seed);
    let shards = n_samples.div_ceil(SHARD);
    let counts: Vec<usize> = (0..shards)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let n = SHARD.min(n_samples - i * SHARD);
            let x = sample_generative(params, n, &mut base.fork(i as u64), true)?;
            Ok((0..n).filter(|r| vols_arb_free(&standardizer.inverse_row(x.row(*r)), forward)).count())
        })
        .collect::<Result<_>>()?;
    let ok: usize = counts.iter().sum();
    let frac = if n_samples == 0 { 0.0 } else { ok as f64 / n_samples as f64 };
    let se = if n_samples == 0 { 0.0 } else { (frac * (1.0 - frac) / n_samples as f64).sqrt() };
    Ok(ArbRate { n: n_samples, arb_free: ok, fraction: frac, std_error: se })
}

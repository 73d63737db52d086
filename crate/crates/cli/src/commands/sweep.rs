use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use volimpute::imputer::RefitMode;
use volimpute::metrics::{evaluate_rates, neg_elbo_eval, EvalConfig};
use volimpute::surfaces::grid::Dataset;

use crate::commands::train;
use crate::config::{apply_override, from_table, load_table};
use crate::data::Loaded;
use crate::error::{CliError, CliResult};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    /// `"model.hidden_dim" = [32, 64]`; the cartesian product is swept.
    axes: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub run: String,
    pub overrides: Vec<String>,
    pub neg_elbo: f64,
    pub neg_elbo_se: f64,
    pub mae_bps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub rows: Vec<LeaderboardRow>,
    /// Spearman correlation of validation neg-ELBO and validation MAE.
    pub rank_correlation: Option<f64>,
}

fn toml_literal(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn combinations(axes: &toml::Table) -> CliResult<Vec<Vec<String>>> {
    let mut out: Vec<Vec<String>> = vec![Vec::new()];
    for (key, vals) in axes {
        let vals = vals
            .as_array()
            .filter(|a| !a.is_empty())
            .ok_or_else(|| CliError::Config(format!("axis {key:?} must be a non-empty array")))?;
        out = out
            .into_iter()
            .flat_map(|prefix| {
                vals.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(format!("{key}={}", toml_literal(v)));
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

fn run_one(base: &toml::Table, overrides: &[String], dir: &Path, rate: f64) -> CliResult<(f64, f64, Option<f64>)> {
    let mut t = base.clone();
    for o in overrides {
        apply_override(&mut t, o)?;
    }
    let mut cfg = from_table(t)?;
    cfg.output_dir = dir.to_path_buf();
    let outcome = train::run(&cfg, false)?;
    let ck = volimpute::vae::Checkpoint::load(&outcome.checkpoint)?;
    let params = ck.vae_params()?;
    let seed = cfg.eval.imputation.seed;
    let val = outcome.loaded.validation()?.map_or_else(|| outcome.loaded.train(), Ok)?;
    let elbo = neg_elbo_eval(&params, &val, None, cfg.eval.iwae_k, seed)?;
    let mae = match &outcome.loaded {
        Loaded::Surfaces { splits, standardizer } => {
            let complete = Dataset { surfaces: splits.validation.surfaces.iter().filter(|s| s.is_complete()).cloned().collect() };
            if complete.is_empty() {
                None
            } else {
                let mut ecfg = EvalConfig { rates: vec![rate], ..cfg.eval.clone() };
                ecfg.imputation.refit = RefitMode::None;
                let (r, _) = evaluate_rates(&params, standardizer, &complete, &ecfg)?;
                Some(r[0].mae_missing_bps)
            }
        }
        Loaded::Matrix { .. } => None,
    };
    info!("{}: neg-IWAE {:.4}, MAE {:?}", dir.display(), elbo.mean, mae);
    Ok((elbo.mean, elbo.std_error, mae))
}

pub fn run(config: Option<&Path>, grid: &Path, overrides: &[String], out: &Path, rate: f64, jobs: usize) -> CliResult<Leaderboard> {
    let mut base = load_table(config)?;
    for o in overrides {
        apply_override(&mut base, o)?;
    }
    let grid: GridFile = toml::from_str(&std::fs::read_to_string(grid)?)?;
    let combos = combinations(&grid.axes)?;
    std::fs::create_dir_all(out)?;
    let job = |(i, ov): (usize, &Vec<String>)| -> CliResult<LeaderboardRow> {
        let name = format!("run_{i:03}");
        let (e, se, mae) = run_one(&base, ov, &out.join(&name), rate)?;
        Ok(LeaderboardRow { rank: 0, run: name, overrides: ov.clone(), neg_elbo: e, neg_elbo_se: se, mae_bps: mae })
    };
    let results: Vec<CliResult<LeaderboardRow>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| CliError::Config(e.to_string()))?;
        pool.install(|| combos.par_iter().enumerate().map(job).collect())
    } else {
        combos.iter().enumerate().map(job).collect()
    };
    let mut rows = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    rows.sort_by(|a, b| a.neg_elbo.total_cmp(&b.neg_elbo).then(a.run.cmp(&b.run)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    let paired: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.mae_bps.map(|m| (r.neg_elbo, m))).collect();
    let (e, m): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
    let board = Leaderboard { rank_correlation: spearman(&e, &m), rows };

    let mut w = csv::Writer::from_path(out.join("leaderboard.csv"))?;
    w.write_record(["rank", "run", "neg_elbo", "neg_elbo_se", "mae_bps", "overrides"])?;
    for r in &board.rows {
        w.write_record([
            r.rank.to_string(),
            r.run.clone(),
            r.neg_elbo.to_string(),
            r.neg_elbo_se.to_string(),
            r.mae_bps.map(|m| m.to_string()).unwrap_or_default(),
            r.overrides.join(" "),
        ])?;
    }
    w.flush()?;
    std::fs::write(out.join("leaderboard.json"), serde_json::to_string_pretty(&board)?)?;
    for r in &board.rows {
        println!("{:>3}  {}  neg-IWAE {:>10.4}  MAE {:>9}  {}", r.rank, r.run, r.neg_elbo, r.mae_bps.map(|m| format!("{m:.3}")).unwrap_or("-".into()), r.overrides.join(" "));
    }
    println!("rank correlation (neg-IWAE vs MAE): {:?}", board.rank_correlation);
    Ok(board)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn grid_is_cartesian() {
        let t: toml::Table = "a = [1, 2]\nb = [\"x\", \"y\", \"z\"]".parse().unwrap();
        let c = combinations(&t).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], vec!["a=1".to_string(), "b=x".to_string()]);
    }
}

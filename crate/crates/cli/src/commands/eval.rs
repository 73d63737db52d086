use std::path::{Path, PathBuf};

use log::warn;
use volimpute::metrics::{eval_report, neg_elbo_eval, posterior_collapse, EvalReport};
use volimpute::surfaces::grid::{Dataset, TENOR_LABELS};
use volimpute::vae::Checkpoint;

use crate::config::{from_table, apply_override, RunConfig};
use crate::data::{load, Loaded};
use crate::error::CliResult;

pub const REPORT_FILE: &str = "report.json";

/// Run config for evaluation: explicit file if given, else the one stored in
/// the checkpoint; overrides apply last.
pub fn config_for(ck: &Checkpoint, file: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut table = match file {
        Some(p) => crate::config::load_table(Some(p))?,
        None => match &ck.run_config {
            Some(v) => {
                let stored: RunConfig = serde_json::from_value(v.clone())?;
                crate::config::to_toml(&stored)?.parse::<toml::Table>()?
            }
            None => toml::Table::new(),
        },
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(table)
}

fn complete_only(ds: &Dataset, what: &str) -> Dataset {
    let surfaces: Vec<_> = ds.surfaces.iter().filter(|s| s.is_complete()).cloned().collect();
    if surfaces.len() < ds.len() {
        warn!("{what}: skipping {} incomplete surfaces", ds.len() - surfaces.len());
    }
    Dataset { surfaces }
}

pub fn evaluate(ck: &Checkpoint, cfg: &RunConfig) -> CliResult<EvalReport> {
    let params = ck.vae_params()?;
    let loaded = load(&cfg.data)?;
    match &loaded {
        Loaded::Surfaces { splits, standardizer } => {
            // evaluate with the statistics the model was trained on
            let st = ck.standardizer.as_ref().unwrap_or(standardizer);
            let test = complete_only(&splits.test, "test split");
            Ok(eval_report(&params, st, &splits.train, &splits.validation, &test, &cfg.eval)?)
        }
        Loaded::Matrix { .. } => {
            let train = loaded.train()?;
            let seed = cfg.eval.imputation.seed;
            Ok(EvalReport {
                rates: Vec::new(),
                neg_elbo_train: Some(neg_elbo_eval(&params, &train, None, cfg.eval.iwae_k, seed)?),
                neg_elbo_validation: None,
                neg_elbo_validation_refit: None,
                calibration: Vec::new(),
                collapse: Some(posterior_collapse(&params, &train, cfg.eval.collapse_threshold)?),
                arb_rate: None,
            })
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_report(report: &EvalReport, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(report)?)?;

    let mut w = csv::Writer::from_path(dir.join("mae.csv"))?;
    let mut head = vec!["rate".to_string(), "mae_missing_bps".into(), "mae_observed_bps".into(), "mean_ess".into()];
    head.extend(TENOR_LABELS.iter().map(|t| format!("missing_{t}_bps")));
    w.write_record(&head)?;
    for r in &report.rates {
        let mut row = vec![r.rate.to_string(), r.mae_missing_bps.to_string(), r.mae_observed_bps.to_string(), r.mean_ess.to_string()];
        row.extend(r.mae_missing_by_tenor_bps.iter().map(|v| opt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("calibration.csv"))?;
    w.write_record(["lo", "hi", "count", "mean_pred_var", "mean_sq_err", "std_err", "normalized_distance"])?;
    for b in &report.calibration {
        w.write_record([
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            b.mean_pred_var.to_string(),
            b.mean_sq_err.to_string(),
            b.std_err.to_string(),
            opt(b.normalized_distance),
        ])?;
    }
    w.flush()?;

    if let Some(c) = &report.collapse {
        let mut w = csv::Writer::from_path(dir.join("collapse.csv"))?;
        w.write_record(["rank", "dim", "variance", "cumulative_fraction"])?;
        for (r, (&d, cum)) in c.order.iter().zip(&c.cumulative).enumerate() {
            w.write_record([(r + 1).to_string(), d.to_string(), c.variances[d].to_string(), cum.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn print_summary(name: &str, report: &EvalReport) {
    println!("== {name}");
    if !report.rates.is_empty() {
        println!("{:>6} {:>14} {:>14} {:>10}", "rate", "missing bps", "observed bps", "ess");
        for r in &report.rates {
            println!("{:>6.2} {:>14.3} {:>14.3} {:>10.1}", r.rate, r.mae_missing_bps, r.mae_observed_bps, r.mean_ess);
        }
    }
    let show = |label: &str, e: &Option<volimpute::metrics::Estimate>| {
        if let Some(e) = e {
            println!("{label:<28} {:.4} ± {:.4}", e.mean, e.std_error);
        }
    };
    show("neg-IWAE train", &report.neg_elbo_train);
    show("neg-IWAE validation", &report.neg_elbo_validation);
    show("neg-IWAE validation (refit)", &report.neg_elbo_validation_refit);
    if let Some(c) = &report.collapse {
        println!("active latent dims            {} of {} (threshold {})", c.active, c.variances.len(), c.threshold);
    }
    if let Some(a) = &report.arb_rate {
        println!("arbitrage-free samples        {:.4} ± {:.4} (n = {})", a.fraction, a.std_error, a.n);
    }
}

pub fn run(checkpoints: &[PathBuf], file: Option<&Path>, overrides: &[String], out: &Path) -> CliResult<()> {
    let mut summary = Vec::new();
    for path in checkpoints {
        let ck = Checkpoint::load(path)?;
        let cfg = config_for(&ck, file, overrides)?;
        let report = evaluate(&ck, &cfg)?;
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .filter(|_| checkpoints.len() > 1)
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        let dir = if checkpoints.len() > 1 { out.join(&name) } else { out.to_path_buf() };
        write_report(&report, &dir)?;
        std::fs::write(dir.join("config.toml"), crate::config::to_toml(&cfg)?)?;
        print_summary(&name, &report);
        summary.push((name, report));
    }
    if summary.len() > 1 {
        let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
        w.write_record(["checkpoint", "rate", "mae_missing_bps", "mae_observed_bps"])?;
        for (name, r) in &summary {
            for rr in &r.rates {
                w.write_record([name.clone(), rr.rate.to_string(), rr.mae_missing_bps.to_string(), rr.mae_observed_bps.to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Serialize;
use volimpute::data::read_matrix_csv;
use volimpute::imputer::{impute_all, refit_encoder, ImputationConfig, ImputationResult, RefitMode};
use volimpute::surfaces::grid::{cell_coords, Surface, DELTAS, NUM_CELLS, TENOR_LABELS};
use volimpute::surfaces::{apply_mask, load_csv, MaskSpec, Standardizer, SURFACE_HEADER};
use volimpute::vae::{Checkpoint, VaeParams};
use volimpute::MaskedData;

use crate::error::{CliError, CliResult};

pub struct ImputeArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: &'a Path,
    pub output: &'a Path,
    pub mask: Option<MaskSpec>,
    pub config: ImputationConfig,
    pub keep_weights: bool,
}

#[derive(Serialize)]
struct RowDump<'a> {
    id: String,
    result: &'a ImputationResult,
}

/// True when the file starts with the surface CSV header.
pub fn is_surface_csv(path: &Path) -> CliResult<bool> {
    let mut first = String::new();
    BufReader::new(std::fs::File::open(path)?).read_line(&mut first)?;
    Ok(first.trim().replace(' ', "") == SURFACE_HEADER.join(","))
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn refit_and_impute(params: &VaeParams, data: &MaskedData, cfg: &ImputationConfig) -> CliResult<Vec<ImputationResult>> {
    let p = if cfg.refit == RefitMode::Encoder { refit_encoder(params, data, None, cfg)? } else { params.clone() };
    Ok(impute_all(&p, data, cfg.n_samples, cfg.seed)?)
}

fn destandardize(res: &mut [ImputationResult], st: &Standardizer) {
    for r in res {
        r.mean = st.inverse_row(&r.mean);
        for (c, v) in r.variance.iter_mut().enumerate() {
            *v = st.inverse_variance(c, *v);
        }
    }
}

pub fn run(args: &ImputeArgs<'_>) -> CliResult<()> {
    args.config.validate()?;
    let ck = Checkpoint::load(args.checkpoint)?;
    let params = ck.vae_params()?;
    let mut w = csv::Writer::from_path(args.output)?;
    let mut ids = Vec::new();
    let mut results;
    if is_surface_csv(args.input)? {
        if params.config.feature_dim != NUM_CELLS {
            return Err(volimpute::Error::Schema(format!(
                "checkpoint has {} features; surface input needs {NUM_CELLS}",
                params.config.feature_dim
            ))
            .into());
        }
        let st = ck
            .standardizer
            .clone()
            .ok_or_else(|| volimpute::Error::Schema("surface model checkpoint has no standardizer".into()))?;
        let ds = load_csv(args.input)?;
        let surfaces: Vec<Surface> = match args.mask {
            Some(spec) => ds
                .surfaces
                .iter()
                .map(|s| if s.is_complete() { apply_mask(s, &spec) } else { Ok(s.clone()) })
                .collect::<volimpute::Result<_>>()?,
            None => ds.surfaces.clone(),
        };
        let data = st.transform(&surfaces)?;
        results = refit_and_impute(&params, &data, &args.config)?;
        destandardize(&mut results, &st);
        w.write_record(["date", "tenor", "delta", "observed", "value", "variance"])?;
        for (s, r) in surfaces.iter().zip(&results) {
            ids.push(s.date.to_string());
            for c in 0..NUM_CELLS {
                let (t, d) = cell_coords(c);
                let (value, var) = if s.mask[c] { (s.values[c], String::new()) } else { (r.mean[c], fmt(r.variance[c])) };
                w.write_record([s.date.to_string(), TENOR_LABELS[t].into(), DELTAS[d].to_string(), (s.mask[c] as u8).to_string(), fmt(value), var])?;
            }
        }
    } else {
        let (header, values) = read_matrix_csv(std::fs::File::open(args.input)?)?;
        if header.len() != params.config.feature_dim {
            return Err(volimpute::Error::Schema(format!(
                "checkpoint has {} features; input has {} columns",
                params.config.feature_dim,
                header.len()
            ))
            .into());
        }
        if args.mask.is_some() {
            return Err(CliError::Config("--rate applies to surface input only".into()));
        }
        let data = MaskedData::from_nan(&values)?;
        results = refit_and_impute(&params, &data, &args.config)?;
        if let Some(st) = &ck.standardizer {
            destandardize(&mut results, st);
        }
        w.write_record(["row", "column", "observed", "value", "variance"])?;
        for (i, r) in results.iter().enumerate() {
            ids.push(i.to_string());
            for (j, name) in header.iter().enumerate() {
                let x = values.at(i, j);
                let obs = !x.is_nan();
                let (value, var) = if obs { (x, String::new()) } else { (r.mean[j], fmt(r.variance[j])) };
                w.write_record([i.to_string(), name.clone(), (obs as u8).to_string(), fmt(value), var])?;
            }
        }
    }
    w.flush()?;
    if !args.keep_weights {
        results.iter_mut().for_each(|r| r.weights.clear());
    }
    let dump: Vec<RowDump> = ids.into_iter().zip(&results).map(|(id, result)| RowDump { id, result }).collect();
    let json_path = args.output.with_extension("results.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&dump)?)?;
    println!("imputed {} rows -> {} ({})", results.len(), args.output.display(), json_path.display());
    Ok(())
}

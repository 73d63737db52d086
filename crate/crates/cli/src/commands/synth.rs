use std::path::Path;

use clap::ValueEnum;
use serde::Serialize;
use volimpute::data::{default_header, write_matrix_csv};
use volimpute::surfaces::synth::{gen_eight_gauss, gen_two_gauss, EightGaussSpec, GaussMixtureSpec, SurfaceGenParams};
use volimpute::surfaces::{gen_synthetic_surfaces, save_csv, TwoGaussVariant};
use volimpute::RngStream;

use crate::error::CliResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    TwoGaussEqual,
    TwoGaussUnequal,
    EightGauss,
    Surfaces,
}

impl SynthKind {
    pub fn default_count(self) -> usize {
        match self {
            SynthKind::Surfaces => 2750,
            _ => 1000,
        }
    }
}

#[derive(Serialize)]
struct Provenance {
    kind: SynthKind,
    n: usize,
    seed: u64,
    generator: serde_json::Value,
    version: &'static str,
}

pub fn run(kind: SynthKind, n: Option<usize>, seed: u64, out: &Path) -> CliResult<()> {
    let n = n.unwrap_or(kind.default_count());
    let file = std::fs::File::create(out)?;
    let generator = match kind {
        SynthKind::TwoGaussEqual | SynthKind::TwoGaussUnequal => {
            let variant = if kind == SynthKind::TwoGaussEqual { TwoGaussVariant::EqualVar } else { TwoGaussVariant::UnequalVar };
            let x = gen_two_gauss(n, variant, &mut RngStream::new(seed))?;
            write_matrix_csv(&default_header(2), &x, file)?;
            serde_json::to_value(GaussMixtureSpec::two_gauss(variant))?
        }
        SynthKind::EightGauss => {
            let spec = EightGaussSpec::default();
            let x = gen_eight_gauss(n, &spec, &mut RngStream::new(seed))?;
            write_matrix_csv(&default_header(2), &x, file)?;
            serde_json::json!({ "spec": spec, "effective_scale": spec.effective_scale() })
        }
        SynthKind::Surfaces => {
            drop(file);
            save_csv(&gen_synthetic_surfaces(n, seed)?, out)?;
            serde_json::to_value(SurfaceGenParams::default())?
        }
    };
    let prov = Provenance { kind, n, seed, generator, version: env!("CARGO_PKG_VERSION") };
    let prov_path = out.with_extension("provenance.json");
    std::fs::write(&prov_path, serde_json::to_string_pretty(&prov)?)?;
    println!("wrote {n} rows to {} ({})", out.display(), prov_path.display());
    Ok(())
}

use volimpute::objectives::{draw_eps, param_gradcheck, Objective};
use volimpute::vae::{Architecture, NoiseModel, VaeConfig, VaeParams};
use volimpute::{MaskedData, RngStream};

use crate::error::CliResult;

pub struct CheckRow {
    pub loss: &'static str,
    pub architecture: Architecture,
    pub max_rel_err: f64,
}

fn cases() -> Vec<(&'static str, NoiseModel, Objective)> {
    vec![
        ("beta", NoiseModel::FixedScalar { sigma: 0.5 }, Objective::Beta { beta: 0.5 }),
        ("sigma", NoiseModel::LearnableScalar, Objective::Elbo { m: 1 }),
        ("sigma_vec", NoiseModel::LearnableVector, Objective::Elbo { m: 1 }),
        ("big_sigma", NoiseModel::Conditional, Objective::Elbo { m: 1 }),
        ("iwae_k1", NoiseModel::LearnableScalar, Objective::Iwae { k: 1 }),
        ("iwae_k5", NoiseModel::LearnableScalar, Objective::Iwae { k: 5 }),
    ]
}

/// Finite-difference check of every loss on small random models with
/// partially observed random data, dropout off and noise fixed.
pub fn run_checks(seed: u64, h: f64) -> CliResult<Vec<CheckRow>> {
    let mut out = Vec::new();
    let root = RngStream::new(seed);
    for (i, (name, noise, obj)) in cases().into_iter().enumerate() {
        for (j, arch) in [Architecture::Mlp, Architecture::Residual].into_iter().enumerate() {
            let mut rng = root.fork((i * 2 + j) as u64);
            let cfg = VaeConfig {
                feature_dim: 4 + rng.below(3),
                latent_dim: 2 + rng.below(2),
                hidden_dim: 8 + rng.below(9),
                num_blocks: 2,
                dropout: 0.0,
                architecture: arch,
                noise_model: noise,
                iwae_k: 1,
            };
            let params = VaeParams::init(&cfg, &mut rng)?;
            let n = 3;
            let x = rng.normal_tensor(&[n, cfg.feature_dim]);
            let mask = volimpute::nd::Tensor::new(x.shape().to_vec(), (0..x.len()).map(|_| if rng.uniform() < 0.7 { 1.0 } else { 0.0 }).collect())?;
            let data = MaskedData::new(&x, &mask)?;
            let eps = draw_eps(n, &obj, cfg.latent_dim, &mut rng);
            out.push(CheckRow { loss: name, architecture: arch, max_rel_err: param_gradcheck(&params, &data, &obj, &eps, h)? });
        }
    }
    Ok(out)
}

/// Prints the table; returns whether every error is below `tol`.
pub fn run(seed: u64, h: f64, tol: f64) -> CliResult<bool> {
    let rows = run_checks(seed, h)?;
    println!("{:<10} {:<9} {:>12}  status", "loss", "arch", "max rel err");
    let mut ok = true;
    for r in &rows {
        let pass = r.max_rel_err < tol;
        ok &= pass;
        println!("{:<10} {:<9} {:>12.3e}  {}", r.loss, format!("{:?}", r.architecture).to_lowercase(), r.max_rel_err, if pass { "ok" } else { "FAIL" });
    }
    Ok(ok)
}

//! Reproduces the toy experiments.
//!
//! Usage: `cargo run --release --example toy_experiments -- <sigma|hetero|resid> [steps] [seeds]`

use std::time::Instant;

use volimpute::metrics::grad_norm_diag;
use volimpute::nd::func::softplus;
use volimpute::objectives::{draw_eps, evaluate, Objective};
use volimpute::surfaces::synth::{gen_eight_gauss, EightGaussSpec};
use volimpute::surfaces::{gen_two_gauss, TwoGaussVariant};
use volimpute::train::{TrainConfig, Trainer};
use volimpute::vae::{Architecture, NoiseModel, VaeConfig, VaeParams};
use volimpute::{MaskedData, RngStream};

/// Negative ELBO on the whole training set, averaged over 10 fixed draws.
fn full_loss(p: &VaeParams, d: &MaskedData) -> f64 {
    let obj = Objective::Elbo { m: 10 };
    let eps = draw_eps(d.rows(), &obj, p.config.latent_dim, &mut RngStream::new(99));
    evaluate(p, d, &obj, &eps).unwrap().total
}

fn train(cfg: &VaeConfig, d: &MaskedData, steps: u64, seed: u64) -> VaeParams {
    let mut t = Trainer::from_seed(cfg, TrainConfig::toy(steps, seed)).unwrap();
    t.run(d, |_, _| Ok(())).unwrap();
    t.params
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("sigma");
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let start = Instant::now();
    let first: u64 = std::env::var("FIRST_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    for seed in first..first + seeds {
        match which {
            "sigma" => {
                let x = gen_two_gauss(1000, TwoGaussVariant::EqualVar, &mut RngStream::new(seed)).unwrap();
                let d = MaskedData::fully_observed(x).unwrap();
                let p = train(&VaeConfig::toy(NoiseModel::LearnableScalar), &d, steps, seed);
                println!("seed {seed}: sigma_x = {:.4}", softplus(p.get("noise.s").unwrap().item()));
            }
            "hetero" => {
                let x = gen_two_gauss(1000, TwoGaussVariant::UnequalVar, &mut RngStream::new(seed)).unwrap();
                let d = MaskedData::fully_observed(x).unwrap();
                let a = train(&VaeConfig::toy(NoiseModel::LearnableScalar), &d, steps, seed);
                let b = train(&VaeConfig::toy(NoiseModel::Conditional), &d, steps, seed);
                println!("seed {seed}: sigma {:.4}  Sigma {:.4}", full_loss(&a, &d), full_loss(&b, &d));
            }
            "resid" => {
                let x = gen_eight_gauss(1000, &EightGaussSpec::default(), &mut RngStream::new(seed)).unwrap();
                let d = MaskedData::fully_observed(x).unwrap();
                let mut norms = Vec::new();
                let mut losses = Vec::new();
                for arch in [Architecture::Residual, Architecture::Mlp] {
                    let cfg = VaeConfig { architecture: arch, ..VaeConfig::toy(NoiseModel::LearnableScalar) };
                    let t0 = Trainer::from_seed(&cfg, TrainConfig::toy(0, seed)).unwrap();
                    let batches: Vec<MaskedData> = (0..20).map(|i| d.select_rows(&RngStream::new(seed).fork(i).sample_indices(1000, 64))).collect();
                    norms.push(grad_norm_diag(&t0.params, &batches, &mut RngStream::new(seed)).unwrap().0);
                    losses.push(full_loss(&train(&cfg, &d, steps, seed), &d));
                }
                println!("seed {seed}: loss resid {:.4} mlp {:.4} | step-0 recon grad resid {:.3e} mlp {:.3e}", losses[0], losses[1], norms[0], norms[1]);
            }
            "trace" => {
                let x = gen_eight_gauss(1000, &EightGaussSpec::default(), &mut RngStream::new(seed)).unwrap();
                let d = MaskedData::fully_observed(x).unwrap();
                let archs = match std::env::var("ARCH").as_deref() {
                    Ok("residual") => vec![Architecture::Residual],
                    Ok("mlp") => vec![Architecture::Mlp],
                    _ => vec![Architecture::Residual, Architecture::Mlp],
                };
                for arch in archs {
                    let cfg = VaeConfig { architecture: arch, ..VaeConfig::toy(NoiseModel::LearnableScalar) };
                    let mut t = Trainer::from_seed(&cfg, TrainConfig::toy(steps, seed)).unwrap();
                    let every = (steps / 10).max(1);
                    t.run(&d, |t, r| {
                        if r.step % every == 0 {
                            let s = softplus(t.params.get("noise.s").unwrap().item());
                            println!("seed {seed} {arch:?} step {:>6}: loss {:.4} sigma_x {:.4}", r.step, full_loss(&t.params, &d), s);
                        }
                        Ok(())
                    })
                    .unwrap();
                }
            }
            other => panic!("unknown experiment {other}"),
        }
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
}

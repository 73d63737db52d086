//! Forward passes: encoder, decoder, sampling and the closed-form KL.

use crate::error::{dim_err, Result};
use crate::nd::func::HALF_LN_2PI;
use crate::nd::{Tape, Tensor, Var};
use crate::rng::RngStream;
use crate::vae::config::{Architecture, NoiseModel, VaeConfig};
use crate::vae::params::{Bound, VaeParams};

/// q(z|x) = N(mu, diag(sigma^2)), one row per input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// p(x|z) = N(mu, diag(sigma^2)); `sigma` is always expanded to `[n, p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub mu: Tensor,
    pub sigma: Tensor,
}

fn dense(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    tape.affine(x, w, bias)
}

fn trunk(
    tape: &mut Tape,
    cfg: &VaeConfig,
    b: &Bound,
    side: &str,
    input: Var,
    mut dropout: Option<&mut RngStream>,
) -> Result<Var> {
    match cfg.architecture {
        Architecture::Residual => {
            let mut h = dense(tape, b, &format!("{side}.in"), input)?;
            for i in 0..cfg.num_blocks {
                let pre = format!("{side}.block{i}");
                let gain = b.var(&format!("{pre}.ln.gain"))?;
                let shift = b.var(&format!("{pre}.ln.shift"))?;
                let a = tape.layer_norm(h, gain, shift)?;
                let a = dense(tape, b, &format!("{pre}.fc1"), a)?;
                let a = tape.swish(a)?;
                let a = tape.dropout(a, cfg.dropout, dropout.as_deref_mut())?;
                let a = dense(tape, b, &format!("{pre}.fc2"), a)?;
                h = tape.add(h, a)?;
            }
            Ok(h)
        }
        Architecture::Mlp => {
            let mut h = input;
            for i in 0..cfg.num_blocks {
                h = dense(tape, b, &format!("{side}.hidden{i}"), h)?;
                h = tape.swish(h)?;
                h = tape.dropout(h, cfg.dropout, dropout.as_deref_mut())?;
            }
            Ok(h)
        }
    }
}

fn check_cols(t: &Tensor, want: usize, what: &str) -> Result<()> {
    if t.shape().len() != 2 || t.shape()[1] != want {
        return dim_err(format!("{what}: expected [n, {want}], got {:?}", t.shape()));
    }
    Ok(())
}

/// Encoder on a tape; returns `(mu, sigma)` vars of shape `[n, d]`.
pub fn encode_on(
    tape: &mut Tape,
    cfg: &VaeConfig,
    b: &Bound,
    x: Var,
    dropout: Option<&mut RngStream>,
) -> Result<(Var, Var)> {
    check_cols(tape.value(x), cfg.feature_dim, "encoder input")?;
    let h = trunk(tape, cfg, b, "enc", x, dropout)?;
    let mu = dense(tape, b, "enc.mu", h)?;
    let s = dense(tape, b, "enc.sigma", h)?;
    let sigma = tape.softplus(s)?;
    Ok((mu, sigma))
}

/// Decoder on a tape; returns `(mu, sigma)` vars of shape `[n, p]`.
pub fn decode_on(
    tape: &mut Tape,
    cfg: &VaeConfig,
    b: &Bound,
    z: Var,
    dropout: Option<&mut RngStream>,
) -> Result<(Var, Var)> {
    check_cols(tape.value(z), cfg.latent_dim, "decoder input")?;
    let n = tape.value(z).rows();
    let p = cfg.feature_dim;
    let h = trunk(tape, cfg, b, "dec", z, dropout)?;
    let mu = dense(tape, b, "dec.mu", h)?;
    let sigma = match cfg.noise_model {
        NoiseModel::Conditional => {
            let s = dense(tape, b, "dec.sigma", h)?;
            tape.softplus(s)?
        }
        NoiseModel::LearnableScalar | NoiseModel::LearnableVector => {
            let s = tape.softplus(b.var("noise.s")?)?;
            tape.broadcast(s, n, p)?
        }
        NoiseModel::FixedScalar { sigma } => tape.constant(Tensor::full(&[n, p], sigma)),
    };
    Ok((mu, sigma))
}

/// Evaluate `q(z|x)`. `x` must already have missing cells filled.
/// Pass `dropout = Some(rng)` for training-mode dropout, `None` for evaluation.
pub fn encode(params: &VaeParams, x: &Tensor, dropout: Option<&mut RngStream>) -> Result<LatentPosterior> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &|_| false);
    let xv = tape.constant(x.clone());
    let (mu, sigma) = encode_on(&mut tape, &params.config, &b, xv, dropout)?;
    Ok(LatentPosterior { mu: tape.value(mu).clone(), sigma: tape.value(sigma).clone() })
}

pub fn decode(params: &VaeParams, z: &Tensor, dropout: Option<&mut RngStream>) -> Result<DecoderOutput> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &|_| false);
    let zv = tape.constant(z.clone());
    let (mu, sigma) = decode_on(&mut tape, &params.config, &b, zv, dropout)?;
    Ok(DecoderOutput { mu: tape.value(mu).clone(), sigma: tape.value(sigma).clone() })
}

/// `z = mu + sigma * eps`.
pub fn reparam_sample(post: &LatentPosterior, eps: &Tensor) -> Result<Tensor> {
    if eps.shape() != post.mu.shape() {
        return dim_err(format!("eps shape {:?} != posterior shape {:?}", eps.shape(), post.mu.shape()));
    }
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Tensor::new(post.mu.shape().to_vec(), data)
}

/// Per-row `KL(q || N(0, I))` in closed form.
pub fn kl_standard_normal(post: &LatentPosterior) -> Tensor {
    let d = post.mu.cols();
    let rows = post
        .mu
        .data()
        .chunks(d)
        .zip(post.sigma.data().chunks(d))
        .map(|(m, s)| {
            m.iter()
                .zip(s)
                .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
                .sum()
        })
        .collect();
    Tensor::vector(rows)
}

/// Per-row `log N(z; 0, I)`.
pub fn std_normal_log_density(z: &Tensor) -> Tensor {
    let d = z.cols();
    Tensor::vector(
        z.data()
            .chunks(d)
            .map(|r| r.iter().map(|v| -0.5 * v * v - HALF_LN_2PI).sum())
            .collect(),
    )
}

/// Two-step ancestral sampling: z ~ N(0, I), then x ~ N(mu(z), sigma(z)^2).
///
/// With `include_output_noise = false` the second step is skipped and the
/// decoder mean is returned.
pub fn sample_generative(
    params: &VaeParams,
    n: usize,
    rng: &mut RngStream,
    include_output_noise: bool,
) -> Result<Tensor> {
    let z = rng.normal_tensor(&[n, params.config.latent_dim]);
    let out = decode(params, &z, None)?;
    if !include_output_noise {
        return Ok(out.mu);
    }
    let data = out
        .mu
        .data()
        .iter()
        .zip(out.sigma.data())
        .map(|(m, s)| m + s * rng.normal())
        .collect();
    Tensor::new(out.mu.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::func::softplus_inv;
    use crate::nd::gradcheck::gradcheck_many;

    fn cfg(arch: Architecture, noise: NoiseModel) -> VaeConfig {
        VaeConfig {
            feature_dim: 3,
            latent_dim: 2,
            hidden_dim: 4,
            num_blocks: 2,
            dropout: 0.0,
            architecture: arch,
            noise_model: noise,
            iwae_k: 1,
        }
    }

    #[test]
    fn zero_network_outputs() {
        let p = VaeParams::zeros(&cfg(Architecture::Residual, NoiseModel::Conditional)).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 5.0, 0.0, 1.0]).unwrap();
        let post = encode(&p, &x, None).unwrap();
        assert!(post.mu.data().iter().all(|v| *v == 0.0));
        assert!(post.sigma.data().iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
        let out = decode(&p, &post.mu, None).unwrap();
        assert!(out.mu.data().iter().all(|v| *v == 0.0));
        assert!(out.sigma.data().iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn identity_skip_path() {
        // d = p = h so W1 = I and the mu head = I gives mu = x.
        let c = VaeConfig { feature_dim: 3, latent_dim: 3, hidden_dim: 3, ..cfg(Architecture::Residual, NoiseModel::LearnableScalar) };
        let mut p = VaeParams::zeros(&c).unwrap();
        p.set("enc.in.w", Tensor::identity(3)).unwrap();
        p.set("enc.mu.w", Tensor::identity(3)).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.5, -2.0, 7.0]).unwrap();
        let post = encode(&p, &x, None).unwrap();
        assert_eq!(post.mu.data(), x.data());
    }

    #[test]
    fn zeroed_branches_give_affine_maps() {
        let c = cfg(Architecture::Residual, NoiseModel::LearnableScalar);
        let mut p = VaeParams::init(&c, &mut RngStream::new(4)).unwrap();
        let names: Vec<String> = p.names().filter(|n| n.contains(".fc2.")).map(String::from).collect();
        for n in names {
            let shape = p.get(&n).unwrap().shape().to_vec();
            p.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let x = RngStream::new(5).normal_tensor(&[4, 3]);
        let post = encode(&p, &x, None).unwrap();
        // direct affine: mu = Wmu (Win x + bin) + bmu
        let (win, wmu) = (p.get("enc.in.w").unwrap(), p.get("enc.mu.w").unwrap());
        for i in 0..4 {
            let h: Vec<f64> = (0..4).map(|r| (0..3).map(|c| win.at(r, c) * x.at(i, c)).sum()).collect();
            for j in 0..2 {
                let want: f64 = (0..4).map(|r| wmu.at(j, r) * h[r]).sum();
                assert!((post.mu.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_shapes_hold() {
        for arch in [Architecture::Residual, Architecture::Mlp] {
            for noise in [
                NoiseModel::Conditional,
                NoiseModel::LearnableScalar,
                NoiseModel::LearnableVector,
                NoiseModel::FixedScalar { sigma: 0.3 },
            ] {
                let c = VaeConfig { dropout: 0.3, ..cfg(arch, noise) };
                let p = VaeParams::init(&c, &mut RngStream::new(6)).unwrap();
                let x = RngStream::new(7).normal_tensor(&[5, 3]);
                let a = encode(&p, &x, None).unwrap();
                let b = encode(&p, &x, None).unwrap();
                assert_eq!(a, b);
                let out = decode(&p, &a.mu, None).unwrap();
                assert_eq!(out.mu.shape(), &[5, 3]);
                assert_eq!(out.sigma.shape(), &[5, 3]);
                assert!(out.sigma.data().iter().all(|s| *s > 0.0));
                // training mode actually perturbs
                let mut r = RngStream::new(8);
                let c = encode(&p, &x, Some(&mut r)).unwrap();
                assert_ne!(a, c);
            }
        }
    }

    #[test]
    fn noise_variants() {
        let mut p = VaeParams::zeros(&cfg(Architecture::Residual, NoiseModel::LearnableScalar)).unwrap();
        p.set("noise.s", Tensor::vector(vec![softplus_inv(0.127)])).unwrap();
        let out = decode(&p, &Tensor::zeros(&[2, 2]), None).unwrap();
        assert!(out.sigma.data().iter().all(|s| (s - 0.127).abs() < 1e-14));

        let p = VaeParams::zeros(&cfg(Architecture::Residual, NoiseModel::fixed_for_beta(0.1))).unwrap();
        let out = decode(&p, &Tensor::zeros(&[2, 2]), None).unwrap();
        assert!(out.sigma.data().iter().all(|s| (s - 0.223_606_797_749_979).abs() < 1e-12));
    }

    #[test]
    fn reparam_cases_and_gradient() {
        let post = LatentPosterior {
            mu: Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap(),
            sigma: Tensor::matrix(1, 2, vec![2.0, 0.1]).unwrap(),
        };
        assert_eq!(reparam_sample(&post, &Tensor::zeros(&[1, 2])).unwrap(), post.mu);
        let std = LatentPosterior { mu: Tensor::zeros(&[1, 2]), sigma: Tensor::full(&[1, 2], 1.0) };
        let eps = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        assert_eq!(reparam_sample(&std, &eps).unwrap(), eps);

        // dz/dmu = 1, dz/dsigma = eps
        let mut t = Tape::new();
        let mu = t.leaf(post.mu.clone());
        let s = t.leaf(post.sigma.clone());
        let sz = t.mul_const(s, eps.clone()).unwrap();
        let z = t.add(mu, sz).unwrap();
        let sum = t.sum(z).unwrap();
        let g = t.backward(sum).unwrap();
        assert_eq!(g.get(mu).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(s).unwrap().data(), eps.data());
        let err = gradcheck_many(&[post.mu.clone(), post.sigma.clone()], 1e-5, |t, v| {
            let sz = t.mul_const(v[1], eps.clone())?;
            let z = t.add(v[0], sz)?;
            let sq = t.mul(z, z)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn kl_closed_form_values() {
        let kl = |m: f64, s: f64| {
            kl_standard_normal(&LatentPosterior {
                mu: Tensor::matrix(1, 1, vec![m]).unwrap(),
                sigma: Tensor::matrix(1, 1, vec![s]).unwrap(),
            })
            .item()
        };
        assert_eq!(kl(0.0, 1.0), 0.0);
        assert_eq!(kl(1.0, 1.0), 0.5);
        assert!((kl(0.0, 2.0) - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = RngStream::new(10);
        for _ in 0..3 {
            let mu: Vec<f64> = (0..2).map(|_| rng.normal()).collect();
            let sig: Vec<f64> = (0..2).map(|_| 0.3 + rng.uniform()).collect();
            let post = LatentPosterior {
                mu: Tensor::matrix(1, 2, mu.clone()).unwrap(),
                sigma: Tensor::matrix(1, 2, sig.clone()).unwrap(),
            };
            let exact = kl_standard_normal(&post).item();
            let n = 100_000;
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                let z: Vec<f64> = (0..2).map(|j| mu[j] + sig[j] * rng.normal()).collect();
                let lq = crate::nd::func::normal_log_pdf(&z, &mu, &sig);
                let lp = crate::nd::func::normal_log_pdf(&z, &[0.0, 0.0], &[1.0, 1.0]);
                vals.push(lq - lp);
            }
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
        }
    }

    #[test]
    fn two_step_sampling() {
        // linear decoder mu = z, d = p = 1, sigma_x = 0.5
        let c = VaeConfig {
            feature_dim: 1,
            latent_dim: 1,
            hidden_dim: 2,
            num_blocks: 1,
            dropout: 0.0,
            architecture: Architecture::Residual,
            noise_model: NoiseModel::FixedScalar { sigma: 0.5 },
            iwae_k: 1,
        };
        let mut p = VaeParams::zeros(&c).unwrap();
        p.set("dec.in.w", Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap()).unwrap();
        p.set("dec.mu.w", Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let x = sample_generative(&p, 100_000, &mut RngStream::new(11), true).unwrap();
        let mean = x.sum() / x.len() as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        assert!((var - 1.25).abs() < 0.02, "{var}");

        let a = sample_generative(&p, 50, &mut RngStream::new(12), false).unwrap();
        let b = sample_generative(&p, 50, &mut RngStream::new(12), false).unwrap();
        assert_eq!(a, b);

        // constant decoder, no output noise -> every sample equals c
        let mut p = VaeParams::zeros(&c).unwrap();
        p.set("dec.mu.b", Tensor::vector(vec![0.7])).unwrap();
        let x = sample_generative(&p, 20, &mut RngStream::new(13), false).unwrap();
        assert!(x.data().iter().all(|v| *v == 0.7));
    }
}

use volimpute::fixtures::linear_gaussian;
use volimpute::imputer::{
    impute_all, impute_moments, importance_weights, pseudo_gibbs, refit_encoder, GibbsConfig, ImputationConfig, RefitMode,
};
use volimpute::nd::Tensor;
use volimpute::objectives::iwae_eval;
use volimpute::surfaces::{gen_two_gauss, TwoGaussVariant};
use volimpute::train::{TrainConfig, Trainer};
use volimpute::vae::{encode, is_encoder, reparam_sample, NoiseModel, VaeConfig};
use volimpute::{MaskedData, RngStream};

/// Mean and variance of x2 given observed cells, by quadrature over z.
fn oracle(observed: &[f64], noise: f64) -> (f64, f64) {
    let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
    for i in 0..=16_000 {
        let z = -8.0 + 1e-3 * i as f64;
        let w = (-0.5 * z * z - observed.iter().map(|x| (x - z).powi(2)).sum::<f64>() / (2.0 * noise * noise)).exp();
        w0 += w;
        w1 += w * z;
        w2 += w * z * z;
    }
    let m = w1 / w0;
    (m, w2 / w0 - m * m + noise * noise)
}

fn x1_observed(x1: f64, rows: usize) -> MaskedData {
    let v = Tensor::matrix(rows, 2, [x1, 0.0].repeat(rows)).unwrap();
    let m = Tensor::matrix(rows, 2, [1.0, 0.0].repeat(rows)).unwrap();
    MaskedData::new(&v, &m).unwrap()
}

#[test]
fn matches_quadrature_on_linear_gaussian() {
    let p = linear_gaussian(0.1).unwrap();
    let (m, v) = oracle(&[0.5], 0.1);
    let r = impute_moments(&p, &x1_observed(0.5, 1), 100_000, &mut RngStream::new(1)).unwrap();
    assert_eq!(r.missing, vec![1]);
    assert!((r.missing_mean()[0] - m).abs() < 5e-3, "{} vs {m}", r.missing_mean()[0]);
    assert!((r.missing_variance()[0] - v).abs() < 5e-3, "{} vs {v}", r.missing_variance()[0]);
}

#[test]
fn exact_proposal_gives_flat_weights() {
    let p = linear_gaussian(0.3).unwrap();
    let row = x1_observed(0.7, 1);
    let post = encode(&p, &row.values, None).unwrap();
    let n = 5000;
    let eps = RngStream::new(2).normal_tensor(&[n, 1]);
    let idx = vec![0; n];
    let sub = volimpute::vae::LatentPosterior { mu: post.mu.select_rows(&idx), sigma: post.sigma.select_rows(&idx) };
    let z = reparam_sample(&sub, &eps).unwrap();
    let w = importance_weights(&p, &row, &z).unwrap();
    let u = 1.0 / n as f64;
    // flat up to rounding: far inside any Monte-Carlo band
    assert!(w.iter().all(|x| (x - u).abs() < 1e-9 * u), "max dev {}", w.iter().map(|x| (x - u).abs()).fold(0.0, f64::max));
}

#[test]
fn pseudo_gibbs_long_run_mean() {
    let noise = 0.1;
    let p = linear_gaussian(noise).unwrap();
    let (m, _) = oracle(&[0.5], noise);
    let rows = 16;
    let chain = pseudo_gibbs(&p, &x1_observed(0.5, rows), &GibbsConfig { burn_in: 50, thinning: 2, kept: 1000 }, &mut RngStream::new(3))
        .unwrap();
    assert_eq!(chain.len(), 1000);
    let means: Vec<f64> = (0..rows).map(|r| chain.iter().map(|s| s.at(r, 1)).sum::<f64>() / chain.len() as f64).collect();
    let gm = means.iter().sum::<f64>() / rows as f64;
    let se = (means.iter().map(|v| (v - gm).powi(2)).sum::<f64>() / (rows as f64 - 1.0) / rows as f64).sqrt();
    assert!((gm - m).abs() <= 3.0 * se, "{gm} vs {m} (se {se})");
    assert!(chain.iter().all(|s| (0..rows).all(|r| s.at(r, 0) == 0.5)));
}

#[test]
fn impute_all_is_reproducible_per_row() {
    let p = linear_gaussian(0.2).unwrap();
    let v = Tensor::matrix(3, 2, vec![0.1, 0.0, -0.4, 0.0, 0.0, 0.9]).unwrap();
    let m = Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let d = MaskedData::new(&v, &m).unwrap();
    let a = impute_all(&p, &d, 500, 7).unwrap();
    let b = impute_all(&p, &d, 500, 7).unwrap();
    assert_eq!(a, b);
    // row 1 alone gives the same answer as row 1 within the batch
    let single = impute_moments(&p, &d.select_rows(&[1]), 500, &mut RngStream::new(7).fork(1)).unwrap();
    assert_eq!(single, a[1]);
}

#[test]
fn refit_keeps_decoder_and_does_not_hurt() {
    let x = gen_two_gauss(600, TwoGaussVariant::EqualVar, &mut RngStream::new(4)).unwrap();
    let train = MaskedData::fully_observed(x.select_rows(&(0..400).collect::<Vec<_>>())).unwrap();
    let cfg = VaeConfig { hidden_dim: 16, ..VaeConfig::toy(NoiseModel::LearnableScalar) };
    let mut t = Trainer::from_seed(&cfg, TrainConfig::toy(1500, 4)).unwrap();
    t.run(&train, |_, _| Ok(())).unwrap();
    // validation rows with the second feature hidden
    let vv = x.select_rows(&(400..600).collect::<Vec<_>>());
    let vm = Tensor::new(vec![200, 2], [1.0, 0.0].repeat(200)).unwrap();
    let val = MaskedData::new(&vv, &vm).unwrap();
    let icfg = ImputationConfig { refit: RefitMode::Encoder, refit_steps: 300, refit_eval_every: 50, seed: 5, ..ImputationConfig::default() };
    let refit = refit_encoder(&t.params, &val, None, &icfg).unwrap();
    for name in t.params.names().filter(|n| !is_encoder(n)) {
        let (a, b) = (t.params.get(name).unwrap(), refit.get(name).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} changed");
    }
    let (pre, se) = iwae_eval(&t.params, &val, 50, &mut RngStream::new(6)).unwrap();
    let (post, _) = iwae_eval(&refit, &val, 50, &mut RngStream::new(6)).unwrap();
    assert!(post <= pre + 3.0 * se, "{post} vs {pre} ± {se}");
}

#[test]
fn zero_missing_rows_reconstruct_only() {
    let p = linear_gaussian(0.2).unwrap();
    let d = MaskedData::fully_observed(Tensor::matrix(1, 2, vec![0.3, 0.31]).unwrap()).unwrap();
    let r = impute_moments(&p, &d, 1000, &mut RngStream::new(8)).unwrap();
    assert!(r.missing.is_empty());
    assert!(r.missing_mean().is_empty());
    assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

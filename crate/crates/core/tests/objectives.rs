use volimpute::nd::func::softplus;
use volimpute::nd::Tensor;
use volimpute::objectives::{draw_eps, elbo, evaluate, iwae_eval, loss_and_grad, Objective};
use volimpute::train::{TrainConfig, Trainer};
use volimpute::vae::{NoiseModel, VaeConfig, VaeParams};
use volimpute::{MaskedData, RngStream};

fn batch(rng: &mut RngStream, n: usize, p: usize) -> MaskedData {
    let v = rng.normal_tensor(&[n, p]);
    let m = Tensor::new(vec![n, p], (0..n * p).map(|i| if i % 5 == 3 { 0.0 } else { 1.0 }).collect()).unwrap();
    MaskedData::new(&v, &m).unwrap()
}

#[test]
fn sigma_vae_loss_matches_central_differences() {
    let cfg = VaeConfig { feature_dim: 4, latent_dim: 2, hidden_dim: 8, dropout: 0.0, ..VaeConfig::toy(NoiseModel::LearnableScalar) };
    let mut rng = RngStream::new(11);
    let params = VaeParams::init(&cfg, &mut rng).unwrap();
    let data = batch(&mut rng, 6, 4);
    let obj = Objective::Elbo { m: 1 };
    let eps = draw_eps(6, &obj, 2, &mut rng);
    let (_, grads) = loss_and_grad(&params, &data, &obj, &eps, None, &|_| true).unwrap();
    let h = 1e-5;
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (name, g) in &grads {
        for j in 0..g.len() {
            let x0 = work.get(name).unwrap().data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = x0 + h;
            let up = evaluate(&work, &data, &obj, &eps).unwrap().total;
            work.get_mut(name).unwrap().data_mut()[j] = x0 - h;
            let down = evaluate(&work, &data, &obj, &eps).unwrap().total;
            work.get_mut(name).unwrap().data_mut()[j] = x0;
            let num = (up - down) / (2.0 * h);
            let a = g.data()[j];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-3));
        }
    }
    assert!(worst < 1e-5, "max rel err {worst}");
}

#[test]
fn more_replicates_same_mean_less_variance() {
    let cfg = VaeConfig { feature_dim: 3, latent_dim: 2, hidden_dim: 8, dropout: 0.0, ..VaeConfig::toy(NoiseModel::LearnableScalar) };
    let mut rng = RngStream::new(12);
    let params = VaeParams::init(&cfg, &mut rng).unwrap();
    let data = MaskedData::fully_observed(rng.normal_tensor(&[1, 3])).unwrap();
    let reps = 400;
    let single: Vec<f64> = (0..reps).map(|_| elbo(&params, &data, 1, &mut rng).unwrap().total).collect();
    let many: Vec<f64> = (0..20).map(|_| elbo(&params, &data, 10_000, &mut rng).unwrap().total).collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0))
    };
    let (m1, v1) = stats(&single);
    let (m2, v2) = stats(&many);
    let se = (v1 / reps as f64 + v2 / 20.0).sqrt();
    assert!((m1 - m2).abs() <= 3.0 * se, "{m1} vs {m2} (se {se})");
    assert!(v2 < v1, "{v2} !< {v1}");
}

#[test]
fn iwae_bound_tightens_with_k() {
    let cfg = VaeConfig { feature_dim: 3, latent_dim: 2, hidden_dim: 8, dropout: 0.0, ..VaeConfig::toy(NoiseModel::LearnableScalar) };
    let mut rng = RngStream::new(13);
    let params = VaeParams::init(&cfg, &mut rng).unwrap();
    let x = rng.normal_tensor(&[1, 3]);
    let rows = Tensor::matrix(3000, 3, x.data().repeat(3000)).unwrap();
    let data = MaskedData::fully_observed(rows).unwrap();
    let (l1, s1) = iwae_eval(&params, &data, 1, &mut RngStream::new(1)).unwrap();
    let (l10, s10) = iwae_eval(&params, &data, 10, &mut RngStream::new(2)).unwrap();
    // losses are negated bounds
    assert!(l10 <= l1 + 3.0 * (s1 * s1 + s10 * s10).sqrt(), "{l10} vs {l1}");
}

#[test]
fn per_feature_noise_tracks_feature_noise() {
    // x = [u + 0.05 e1, u + 0.5 e2]: the second feature is 10x noisier
    let mut rng = RngStream::new(14);
    let n = 1000;
    let data: Vec<f64> = (0..n)
        .flat_map(|_| {
            let u = rng.normal();
            [u + 0.05 * rng.normal(), u + 0.5 * rng.normal()]
        })
        .collect();
    let d = MaskedData::fully_observed(Tensor::matrix(n, 2, data).unwrap()).unwrap();
    let cfg = VaeConfig { hidden_dim: 32, ..VaeConfig::toy(NoiseModel::LearnableVector) };
    let mut t = Trainer::from_seed(&cfg, TrainConfig::toy(4000, 14)).unwrap();
    t.run(&d, |_, _| Ok(())).unwrap();
    let s = t.params.get("noise.s").unwrap().data().iter().map(|v| softplus(*v)).collect::<Vec<_>>();
    assert!(s[1] > s[0], "sigma {s:?}");
}

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use todi::numerics::{Graph, Mode, Tensor};
use todi::omics::{kl_divergence, reparameterize, GaussianPosterior, OmicsVae, VaeConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config() -> VaeConfig {
    VaeConfig { genes: 12, hidden1: 8, hidden2: 6, latent: 3, ..VaeConfig::default() }
}

/// Low-rank profiles with noise, standardized per gene.
fn synthetic_profiles(n: usize, genes: usize, rank: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let w = Tensor::randn(&[rank, genes], 1.0 / (rank as f32).sqrt(), &mut r);
    let mut data = vec![0.0f32; n * genes];
    for i in 0..n {
        let f: Vec<f32> = (0..rank).map(|_| StandardNormal.sample(&mut r)).collect();
        for j in 0..genes {
            let noise: f32 = StandardNormal.sample(&mut r);
            data[i * genes + j] = (0..rank).map(|k| f[k] * w.get(&[k, j])).sum::<f32>() + 0.3 * noise;
        }
    }
    for j in 0..genes {
        let col: Vec<f64> = (0..n).map(|i| data[i * genes + j] as f64).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            data[i * genes + j] = ((data[i * genes + j] as f64 - mean) / sd) as f32;
        }
    }
    Tensor::new(vec![n, genes], data).unwrap()
}

#[test]
fn default_layer_shapes() {
    let vae = OmicsVae::new(VaeConfig::default(), &mut rng(0));
    let shape = |n: &str| vae.params.get(vae.params.find(n).unwrap()).shape().to_vec();
    assert_eq!(shape("omics.enc1.weight"), [978, 512]);
    assert_eq!(shape("omics.enc2.weight"), [512, 256]);
    assert_eq!(shape("omics.mu.weight"), [256, 128]);
    assert_eq!(shape("omics.log_var.weight"), [256, 128]);
    assert_eq!(shape("omics.dec3.weight"), [512, 978]);
    let out = vae.decode(&Tensor::zeros(&[1, 128])).unwrap();
    assert_eq!(out.shape(), [1, 978]);
}

#[test]
fn zero_input_through_zeroed_heads_gives_standard_posterior() {
    let mut vae = OmicsVae::new(small_config(), &mut rng(1));
    vae.zero_heads();
    let post = vae.encode(&Tensor::zeros(&[2, 12])).unwrap();
    assert!(post.mu.data().iter().all(|v| *v == 0.0));
    assert!(post.log_var.data().iter().all(|v| *v == 0.0));
}

#[test]
fn zero_weights_decode_to_zero() {
    let mut vae = OmicsVae::new(small_config(), &mut rng(2));
    for id in vae.params.ids().collect::<Vec<_>>() {
        vae.params.get_mut(id).data_mut().fill(0.0);
    }
    let out = vae.decode(&Tensor::zeros(&[1, 3])).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn encode_is_deterministic_and_checks_length() {
    let vae = OmicsVae::new(small_config(), &mut rng(3));
    let x = Tensor::randn(&[4, 12], 1.0, &mut rng(4));
    assert_eq!(vae.encode(&x).unwrap(), vae.encode(&x).unwrap());
    let other = OmicsVae::new(small_config(), &mut rng(3));
    assert_eq!(vae.encode(&x).unwrap(), other.encode(&x).unwrap());
    assert!(vae.encode(&Tensor::zeros(&[1, 11])).is_err());
    assert!(vae.decode(&Tensor::zeros(&[1, 4])).is_err());
}

#[test]
fn reparameterize_cases() {
    let mu = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let post = GaussianPosterior { mu: mu.clone(), log_var: Tensor::zeros(&[1, 3]) };
    assert_eq!(reparameterize(&post, &Tensor::zeros(&[1, 3])).unwrap(), mu);
    let e = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
    let z = reparameterize(&post, &e).unwrap();
    for i in 0..3 {
        assert!((z.data()[i] - (mu.data()[i] + e.data()[i])).abs() < 1e-7);
    }
}

#[test]
fn reparameterized_samples_match_the_posterior_moments() {
    let n = 100_000;
    let (m, lv) = (0.7f32, -0.4f32);
    let post = GaussianPosterior { mu: Tensor::full(&[n, 1], m), log_var: Tensor::full(&[n, 1], lv) };
    let z = reparameterize(&post, &Tensor::randn(&[n, 1], 1.0, &mut rng(5))).unwrap();
    let mean = z.data().iter().map(|v| *v as f64).sum::<f64>() / n as f64;
    let var = z.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(((mean - m as f64) / m as f64).abs() < 0.02, "{mean}");
    assert!(((var - (lv as f64).exp()) / (lv as f64).exp()).abs() < 0.02, "{var}");
}

#[test]
fn kl_closed_form_cases() {
    assert_eq!(kl_divergence(&[0.0], &[0.0]), 0.0);
    assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
    let mut r = rng(6);
    for _ in 0..100 {
        let mu: Vec<f32> = (0..4).map(|_| StandardNormal.sample(&mut r)).collect();
        let lv: Vec<f32> = (0..4).map(|_| StandardNormal.sample(&mut r)).collect();
        assert!(kl_divergence(&mu, &lv) >= 0.0);
    }
}

#[test]
fn kl_closed_form_matches_monte_carlo() {
    let mu = [0.5f64, -1.0, 0.2, 1.5];
    let lv = [0.3f64, -0.5, 0.8, -1.2];
    let closed = kl_divergence(&mu.map(|v| v as f32), &lv.map(|v| v as f32));
    let mut r = rng(7);
    let n = 1_000_000;
    let mut acc = 0.0f64;
    for _ in 0..n {
        // log q(z) - log p(z) at z ~ q.
        let mut s = 0.0;
        for d in 0..4 {
            let e: f64 = StandardNormal.sample(&mut r);
            let sd = (0.5 * lv[d]).exp();
            let z = mu[d] + sd * e;
            s += -0.5 * e * e - sd.ln() + 0.5 * z * z;
        }
        acc += s;
    }
    let mc = acc / n as f64;
    assert!(((mc - closed) / closed).abs() < 0.02, "mc {mc} closed {closed}");
}

#[test]
fn beta_zero_loss_is_pure_reconstruction() {
    let vae = OmicsVae::new(small_config(), &mut rng(8));
    let x = Tensor::randn(&[5, 12], 1.0, &mut rng(9));
    let eps = Tensor::randn(&[5, 3], 1.0, &mut rng(10));
    let parts = vae.elbo(&x, &eps, 0.0).unwrap();
    assert_eq!(parts.total, parts.reconstruction);
    let parts = vae.elbo(&x, &eps, 1.0).unwrap();
    assert!(parts.kl > 0.0);
    assert!((parts.total - parts.reconstruction - parts.kl).abs() < 1e-6);
    assert!(vae.elbo(&x, &eps, -1.0).is_err());
}

/// Independent double-precision negative ELBO over named parameters.
fn elbo_f64(p: &HashMap<String, Vec<f64>>, c: &VaeConfig, x: &Tensor, eps: &Tensor) -> f64 {
    let linear = |name: &str, input: &[f64], fan_in: usize, fan_out: usize, relu: bool| {
        let w = &p[&format!("omics.{name}.weight")];
        let b = &p[&format!("omics.{name}.bias")];
        (0..fan_out)
            .map(|o| {
                let v = b[o] + (0..fan_in).map(|i| input[i] * w[i * fan_out + o]).sum::<f64>();
                if relu { v.max(0.0) } else { v }
            })
            .collect::<Vec<f64>>()
    };
    let n = x.shape()[0];
    let (mut sq, mut kl) = (0.0, 0.0);
    for r in 0..n {
        let xr: Vec<f64> = x.row(r).iter().map(|v| *v as f64).collect();
        let h1 = linear("enc1", &xr, c.genes, c.hidden1, true);
        let h2 = linear("enc2", &h1, c.hidden1, c.hidden2, true);
        let mu = linear("mu", &h2, c.hidden2, c.latent, false);
        let lv: Vec<f64> = linear("log_var", &h2, c.hidden2, c.latent, false).iter().map(|v| v.clamp(-10.0, 10.0)).collect();
        let z: Vec<f64> = (0..c.latent).map(|d| mu[d] + (0.5 * lv[d]).exp() * eps.get(&[r, d]) as f64).collect();
        let d1 = linear("dec1", &z, c.latent, c.hidden2, true);
        let d2 = linear("dec2", &d1, c.hidden2, c.hidden1, true);
        let out = linear("dec3", &d2, c.hidden1, c.genes, false);
        sq += out.iter().zip(&xr).map(|(o, t)| (o - t).powi(2)).sum::<f64>();
        kl += (0..c.latent).map(|d| 0.5 * (mu[d] * mu[d] + lv[d].exp() - lv[d] - 1.0)).sum::<f64>();
    }
    let denom = (n * c.genes) as f64;
    sq / denom + kl / denom
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let config = VaeConfig { dropout: 0.0, ..small_config() };
    let vae = OmicsVae::new(config.clone(), &mut rng(11));
    let x = Tensor::randn(&[3, 12], 1.0, &mut rng(12));
    let eps = Tensor::randn(&[3, 3], 1.0, &mut rng(13));
    let mut g = Graph::with_params(&vae.params);
    let xv = g.constant(x.clone());
    let (loss, _, _) = vae.elbo_graph(&mut g, xv, &eps, 1.0, Mode::Eval, &mut rng(0)).unwrap();
    let mut p: HashMap<String, Vec<f64>> = vae
        .params
        .ids()
        .map(|id| (vae.params.name(id).to_string(), vae.params.get(id).data().iter().map(|v| *v as f64).collect()))
        .collect();
    assert!((elbo_f64(&p, &config, &x, &eps) - g.scalar(loss) as f64).abs() < 1e-5);
    let grads = g.backward(loss).unwrap();
    for name in ["omics.enc1.weight", "omics.enc2.bias", "omics.mu.weight", "omics.log_var.weight", "omics.dec1.weight", "omics.dec3.bias"] {
        let id = vae.params.find(name).unwrap();
        let analytic = grads.param(id).unwrap();
        let h = 1e-6;
        let mut scale = 1e-12f64;
        let mut worst = 0.0f64;
        for i in 0..analytic.len() {
            let orig = p[name][i];
            p.get_mut(name).unwrap()[i] = orig + h;
            let up = elbo_f64(&p, &config, &x, &eps);
            p.get_mut(name).unwrap()[i] = orig - h;
            let down = elbo_f64(&p, &config, &x, &eps);
            p.get_mut(name).unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            scale = scale.max(fd.abs());
            worst = worst.max((analytic.data()[i] as f64 - fd).abs());
        }
        assert!(worst / scale < 1e-3, "{name}: {}", worst / scale);
    }
}

#[test]
fn training_halves_the_loss_and_is_seeded() {
    let data = synthetic_profiles(1000, 978, 16, 14);
    let run = || {
        let mut vae = OmicsVae::new(VaeConfig::default(), &mut rng(15));
        let eps = Tensor::randn(&[1000, 128], 1.0, &mut rng(16));
        let before = vae.elbo(&data, &eps, 1.0).unwrap().total;
        let log = vae.train(&data, &mut rng(17)).unwrap();
        let after = vae.elbo(&data, &eps, 1.0).unwrap().total;
        (before, after, log, vae)
    };
    let (before, after, log, vae) = run();
    assert_eq!(log.len(), 50);
    assert!(after < 0.5 * before, "before {before} after {after}");
    assert!(log[49] < log[0]);
    let recon = vae.reconstruct(&data).unwrap();
    assert_eq!(recon.shape(), data.shape());
}

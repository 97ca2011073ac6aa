//! β-VAE over gene-expression profiles.

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dropout, Adam, Graph, Linear, Mode, ParamSet, Tensor, Var};
use crate::util::{inert_rng, minibatches, select_rows};

pub const LOG_VAR_MIN: f32 = -10.0;
pub const LOG_VAR_MAX: f32 = 10.0;
/// Initial log-variance bias. Starting from unit posterior variance the
/// decoder tends to settle on the per-gene mean before the encoder carries
/// any signal.
pub const LOG_VAR_INIT: f32 = -4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub genes: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub latent: usize,
    pub dropout: f32,
    pub beta: f32,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            genes: 978,
            hidden1: 512,
            hidden2: 256,
            latent: 128,
            dropout: 0.2,
            beta: 1.0,
            lr: 1e-4,
            epochs: 50,
            batch_size: 16,
        }
    }
}

/// Diagonal Gaussian posterior for a batch, each `[n, latent]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub log_var: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Layers {
    enc1: Linear,
    enc2: Linear,
    mu: Linear,
    log_var: Linear,
    dec1: Linear,
    dec2: Linear,
    dec3: Linear,
}

const LAYER_NAMES: [&str; 7] = ["enc1", "enc2", "mu", "log_var", "dec1", "dec2", "dec3"];

#[derive(Clone, Debug)]
pub struct OmicsVae {
    pub config: VaeConfig,
    pub params: ParamSet,
    layers: Layers,
}

/// Loss components from one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboParts {
    pub total: f32,
    pub reconstruction: f32,
    pub kl: f32,
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, I))` summed over dimensions.
pub fn kl_divergence(mu: &[f32], log_var: &[f32]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum()
}

/// `z = μ + exp(½·log_var) ⊙ eps`.
pub fn reparameterize(post: &GaussianPosterior, eps: &Tensor) -> Result<Tensor> {
    if eps.shape() != post.mu.shape() {
        return Err(Error::Input(format!("eps shape {:?} != posterior shape {:?}", eps.shape(), post.mu.shape())));
    }
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(Tensor::new(post.mu.shape().to_vec(), data)?)
}

impl OmicsVae {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let c = &config;
        let layers = Layers {
            enc1: Linear::new(&mut params, "omics.enc1", c.genes, c.hidden1, rng),
            enc2: Linear::new(&mut params, "omics.enc2", c.hidden1, c.hidden2, rng),
            mu: Linear::new(&mut params, "omics.mu", c.hidden2, c.latent, rng),
            log_var: Linear::new(&mut params, "omics.log_var", c.hidden2, c.latent, rng),
            dec1: Linear::new(&mut params, "omics.dec1", c.latent, c.hidden2, rng),
            dec2: Linear::new(&mut params, "omics.dec2", c.hidden2, c.hidden1, rng),
            dec3: Linear::new(&mut params, "omics.dec3", c.hidden1, c.genes, rng),
        };
        params.get_mut(layers.log_var.bias).data_mut().fill(LOG_VAR_INIT);
        OmicsVae { config, params, layers }
    }

    /// Rebuilds a model around loaded parameters, checking every layer shape.
    pub fn from_params(config: VaeConfig, params: ParamSet) -> Result<Self> {
        let bind = |n: &str| Linear::bind(&params, &format!("omics.{n}"));
        let layers = Layers {
            enc1: bind("enc1")?,
            enc2: bind("enc2")?,
            mu: bind("mu")?,
            log_var: bind("log_var")?,
            dec1: bind("dec1")?,
            dec2: bind("dec2")?,
            dec3: bind("dec3")?,
        };
        let c = &config;
        let expected = [
            (c.genes, c.hidden1),
            (c.hidden1, c.hidden2),
            (c.hidden2, c.latent),
            (c.hidden2, c.latent),
            (c.latent, c.hidden2),
            (c.hidden2, c.hidden1),
            (c.hidden1, c.genes),
        ];
        let actual = [layers.enc1, layers.enc2, layers.mu, layers.log_var, layers.dec1, layers.dec2, layers.dec3];
        for ((name, l), e) in LAYER_NAMES.iter().zip(actual).zip(expected) {
            if (l.fan_in, l.fan_out) != e {
                return Err(Error::Checkpoint(format!(
                    "omics layer {name} is {}x{}, config expects {}x{}",
                    l.fan_in, l.fan_out, e.0, e.1
                )));
            }
        }
        Ok(OmicsVae { config, params, layers })
    }

    /// Zeroes the final encoder heads (used to check linearity at the origin).
    pub fn zero_heads(&mut self) {
        for l in [self.layers.mu, self.layers.log_var] {
            self.params.get_mut(l.weight).data_mut().fill(0.0);
            self.params.get_mut(l.bias).data_mut().fill(0.0);
        }
    }

    fn check_genes(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.config.genes {
            return Err(Error::Input(format!(
                "omics profiles have shape {:?}, expected [n, {}]",
                x.shape(),
                self.config.genes
            )));
        }
        Ok(())
    }

    fn encode_graph<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut R) -> Result<(Var, Var)> {
        let p = self.config.dropout;
        let h = self.layers.enc1.forward(g, x)?;
        let h = g.relu(h)?;
        let h = dropout(g, h, p, rng, mode)?;
        let h = self.layers.enc2.forward(g, h)?;
        let h = g.relu(h)?;
        let h = dropout(g, h, p, rng, mode)?;
        let mu = self.layers.mu.forward(g, h)?;
        let lv = self.layers.log_var.forward(g, h)?;
        let lv = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok((mu, lv))
    }

    fn decode_graph<R: Rng + ?Sized>(&self, g: &mut Graph, z: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let p = self.config.dropout;
        let h = self.layers.dec1.forward(g, z)?;
        let h = g.relu(h)?;
        let h = dropout(g, h, p, rng, mode)?;
        let h = self.layers.dec2.forward(g, h)?;
        let h = g.relu(h)?;
        let h = dropout(g, h, p, rng, mode)?;
        Ok(self.layers.dec3.forward(g, h)?)
    }

    /// Eval-mode posterior for a batch `[n, genes]`.
    pub fn encode(&self, x: &Tensor) -> Result<GaussianPosterior> {
        self.check_genes(x)?;
        let mut g = Graph::with_params(&self.params);
        let xv = g.constant(x.clone());
        let mut unused = inert_rng();
        let (mu, lv) = self.encode_graph(&mut g, xv, Mode::Eval, &mut unused)?;
        Ok(GaussianPosterior { mu: g.value(mu).clone(), log_var: g.value(lv).clone() })
    }

    /// Latent used downstream: the posterior mean.
    pub fn latent_mean(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode(x)?.mu)
    }

    /// Eval-mode reconstruction from latents `[n, latent]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 2 || z.shape()[1] != self.config.latent {
            return Err(Error::Input(format!("latent has shape {:?}, expected [n, {}]", z.shape(), self.config.latent)));
        }
        let mut g = Graph::with_params(&self.params);
        let zv = g.constant(z.clone());
        let mut unused = inert_rng();
        let out = self.decode_graph(&mut g, zv, Mode::Eval, &mut unused)?;
        Ok(g.value(out).clone())
    }

    /// Reconstruction through the posterior mean.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?.mu)
    }

    /// Records the negative ELBO on `g`: mean squared reconstruction error
    /// per gene plus `beta` times the KL divergence, the KL summed over
    /// latent dimensions and divided by the gene count so both terms are
    /// per-input-dimension. Batch-averaged.
    pub fn elbo_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        eps: &Tensor,
        beta: f32,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var, Var)> {
        if beta < 0.0 {
            return Err(Error::Input(format!("beta must be non-negative, got {beta}")));
        }
        let n = g.shape(x)[0];
        let (mu, lv) = self.encode_graph(g, x, mode, rng)?;
        let half = g.scale(lv, 0.5)?;
        let std = g.exp(half)?;
        let e = g.constant(eps.clone());
        let noise = g.mul(std, e)?;
        let z = g.add(mu, noise)?;
        let xhat = self.decode_graph(g, z, mode, rng)?;
        let diff = g.sub(xhat, x)?;
        let sq = g.mul(diff, diff)?;
        let recon = g.mean(sq)?;
        let mu2 = g.mul(mu, mu)?;
        let var = g.exp(lv)?;
        let k = g.add(mu2, var)?;
        let k = g.sub(k, lv)?;
        let k = g.add_scalar(k, -1.0)?;
        let k = g.sum(k)?;
        let kl = g.scale(k, 0.5 / (n * self.config.genes) as f32)?;
        let total = if beta == 0.0 {
            recon
        } else {
            let weighted = g.scale(kl, beta)?;
            g.add(recon, weighted)?
        };
        Ok((total, recon, kl))
    }

    /// Eval-mode loss on a batch with caller-supplied noise.
    pub fn elbo(&self, x: &Tensor, eps: &Tensor, beta: f32) -> Result<ElboParts> {
        self.check_genes(x)?;
        let mut g = Graph::with_params(&self.params);
        let xv = g.constant(x.clone());
        let mut unused = inert_rng();
        let (t, r, k) = self.elbo_graph(&mut g, xv, eps, beta, Mode::Eval, &mut unused)?;
        Ok(ElboParts { total: g.scalar(t), reconstruction: g.scalar(r), kl: g.scalar(k) })
    }

    /// Minibatch Adam training. Returns the mean training loss per epoch.
    pub fn train<R: Rng + ?Sized>(&mut self, data: &Tensor, rng: &mut R) -> Result<Vec<f64>> {
        self.check_genes(data)?;
        let c = self.config.clone();
        let mut adam = Adam::new(&self.params, c.lr);
        let mut log = Vec::with_capacity(c.epochs);
        for epoch in 0..c.epochs {
            let mut sum = 0.0f64;
            let batches = minibatches(data.shape()[0], c.batch_size, rng);
            for (b, rows) in batches.iter().enumerate() {
                let x = select_rows(data, rows);
                let eps = Tensor::randn(&[rows.len(), c.latent], 1.0, rng);
                let diverged = |detail: String| Error::Diverged { epoch, batch: b, detail };
                let grads = {
                    let mut g = Graph::with_params(&self.params);
                    let xv = g.constant(x);
                    let (loss, _, _) = self
                        .elbo_graph(&mut g, xv, &eps, c.beta, Mode::Train, rng)
                        .map_err(|e| if e.is_numeric() { diverged(e.to_string()) } else { e })?;
                    sum += g.scalar(loss) as f64 * rows.len() as f64;
                    g.backward(loss)?
                };
                adam.step(&mut self.params, &grads).map_err(|e| diverged(e.to_string()))?;
            }
            let mean = sum / data.shape()[0] as f64;
            info!("omics epoch {} loss {:.6}", epoch + 1, mean);
            log.push(mean);
        }
        Ok(log)
    }
}

//! Run configuration: TOML with flat shorthand keys layered over per-stage
//! sections. Unknown keys anywhere are rejected.
//!
//! Shorthand keys and what they set:
//!
//! | key | sets |
//! |---|---|
//! | `seed` | every stage's generator root |
//! | `K` | `datagen.K`, `omics.genes` |
//! | `L_max` | `diffusion.seq_len` |
//! | `L_d` | `text.max_len` |
//! | `H` | `diffusion.hidden` |
//! | `d_emb` | `diffusion.d_emb` |
//! | `d_o` | `omics.latent` |
//! | `T` | `diffusion.steps` |
//! | `skip_stride`, `lambda`, `ablation` | `diffusion.*` |
//! | `beta` | `omics.beta` |
//! | `lr` | `omics.lr`, `diffusion.lr` |
//! | `dropout_omics` | `omics.dropout` |
//! | `dropout_diff` | `diffusion.dropout` |
//! | `epochs`, `batch_size` | `diffusion.*` |
//!
//! `diffusion.latent` and `diffusion.text_width` always follow `omics.latent`
//! and `text.width`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DatagenConfig;
use crate::diffusion::{Ablation, DiffusionConfig};
use crate::omics::VaeConfig;
use crate::text::TextConfig;
use crate::{Error, Result};

/// Desk-scale settings shipped with the repository.
pub const DESK_TOML: &str = include_str!("../../../configs/desk.toml");

#[allow(non_snake_case)]
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub K: Option<usize>,
    pub L_max: Option<usize>,
    pub L_d: Option<usize>,
    pub H: Option<usize>,
    pub d_emb: Option<usize>,
    pub d_o: Option<usize>,
    pub T: Option<usize>,
    pub skip_stride: Option<usize>,
    pub lambda: Option<f32>,
    pub beta: Option<f32>,
    pub lr: Option<f32>,
    pub dropout_omics: Option<f32>,
    pub dropout_diff: Option<f32>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub ablation: Option<Ablation>,
    pub datagen: DatagenConfig,
    pub omics: VaeConfig,
    pub text: TextConfig,
    pub diffusion: DiffusionConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Tail records kept out of training and used as generation conditions.
    pub held_out: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { held_out: 500 }
    }
}

/// Per-stage settings after shorthand keys are applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub seed: u64,
    pub datagen: DatagenConfig,
    pub omics: VaeConfig,
    pub text: TextConfig,
    pub diffusion: DiffusionConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn desk() -> Self {
        Self::from_toml_str(DESK_TOML).expect("shipped desk config parses")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let mut r = Resolved {
            seed: self.seed.unwrap_or(self.datagen.seed),
            datagen: self.datagen.clone(),
            omics: self.omics.clone(),
            text: self.text.clone(),
            diffusion: self.diffusion.clone(),
            eval: self.eval.clone(),
        };
        if let Some(s) = self.seed {
            r.datagen.seed = s;
        }
        if let Some(k) = self.K {
            r.datagen.genes = k;
            r.omics.genes = k;
        }
        let d = &mut r.diffusion;
        set(&mut d.seq_len, self.L_max);
        set(&mut r.text.max_len, self.L_d);
        set(&mut d.hidden, self.H);
        set(&mut d.d_emb, self.d_emb);
        set(&mut r.omics.latent, self.d_o);
        set(&mut d.steps, self.T);
        set(&mut d.skip_stride, self.skip_stride);
        set(&mut d.lambda, self.lambda);
        set(&mut d.ablation, self.ablation);
        set(&mut r.omics.beta, self.beta);
        set(&mut r.omics.lr, self.lr);
        set(&mut d.lr, self.lr);
        set(&mut r.omics.dropout, self.dropout_omics);
        set(&mut d.dropout, self.dropout_diff);
        set(&mut d.epochs, self.epochs);
        set(&mut d.batch_size, self.batch_size);
        d.latent = r.omics.latent;
        d.text_width = r.text.width;
        r.validate()?;
        Ok(r)
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Resolved {
    pub fn validate(&self) -> Result<()> {
        self.datagen.validate()?;
        let d = &self.diffusion;
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&d.dropout) || !(0.0..1.0).contains(&self.omics.dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        if d.lambda < 0.0 || !d.lambda.is_finite() {
            return bad(format!("lambda must be finite and non-negative, got {}", d.lambda));
        }
        if !(d.lr > 0.0 && self.omics.lr > 0.0 && self.text.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if d.skip_stride == 0 || d.skip_stride > d.steps {
            return bad(format!("skip_stride {} must lie in 1..={}", d.skip_stride, d.steps));
        }
        if d.seq_len == 0 || d.seq_len > crate::selfies::MAX_LEN {
            return bad(format!("L_max {} must lie in 1..={}", d.seq_len, crate::selfies::MAX_LEN));
        }
        if d.hidden % d.heads != 0 || self.text.width % self.text.heads != 0 {
            return bad("widths must be multiples of the head counts".into());
        }
        Ok(())
    }
}

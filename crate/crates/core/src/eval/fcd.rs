//! Fréchet distance between embedding distributions, and PCA export.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::fingerprint::morgan_fingerprint;
use crate::selfies::MoleculeGraph;
use crate::{Error, Result};

/// Diagonal regularization added to both covariances.
pub const FCD_EPS: f64 = 1e-6;
/// Width of the default fingerprint embedder.
pub const EMBED_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance of equal-length rows.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if n < 2 || d == 0 {
            return Err(Error::Input(format!("need at least 2 non-empty embeddings, got {n}")));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Input("embeddings differ in width".into()));
        }
        let mut mu = DVector::zeros(d);
        for r in rows {
            mu += DVector::from_column_slice(r);
        }
        mu /= n as f64;
        let mut sigma = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mu;
            sigma += &c * c.transpose();
        }
        sigma /= (n - 1) as f64;
        Ok(GaussianStats { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Symmetric square root through an eigendecomposition; negative
/// eigenvalues from round-off are clipped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -1e-8 {
        warn!("covariance product has eigenvalue {min:.3e}; clipped to zero");
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_g - mu_r|^2 + Tr(S_g + S_r - 2 (S_r^1/2 S_g S_r^1/2)^1/2)`.
pub fn frechet_distance(g: &GaussianStats, r: &GaussianStats) -> Result<f64> {
    if g.dim() != r.dim() {
        return Err(Error::Input(format!("embedding widths differ: {} vs {}", g.dim(), r.dim())));
    }
    let d = g.dim();
    let eye = DMatrix::<f64>::identity(d, d) * FCD_EPS;
    let sg = &g.sigma + &eye;
    let sr = &r.sigma + &eye;
    let sr_half = sqrtm_psd(&sr);
    let cross = sqrtm_psd(&(&sr_half * &sg * &sr_half));
    let mean = (&g.mu - &r.mu).norm_squared();
    Ok(mean + sg.trace() + sr.trace() - 2.0 * cross.trace())
}

/// Default molecule embedder: Morgan bits folded to 64 counts, centered by
/// the vector's own mean.
pub fn folded_morgan_embedding(g: &MoleculeGraph) -> Result<Vec<f64>> {
    let fp = morgan_fingerprint(g)?;
    let mut v = vec![0.0f64; EMBED_DIM];
    for b in fp.bits() {
        v[b % EMBED_DIM] += 1.0;
    }
    let mean = v.iter().sum::<f64>() / EMBED_DIM as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    Ok(v)
}

/// Fréchet distance between two molecule sets under an embedder. Each set
/// needs at least `d + 2` molecules.
pub fn fcd<F>(generated: &[MoleculeGraph], reference: &[MoleculeGraph], embed: F) -> Result<f64>
where
    F: Fn(&MoleculeGraph) -> Result<Vec<f64>>,
{
    let eg = generated.iter().map(&embed).collect::<Result<Vec<_>>>()?;
    let er = reference.iter().map(&embed).collect::<Result<Vec<_>>>()?;
    let d = eg.first().or(er.first()).map_or(0, Vec::len);
    if eg.len() < d + 2 || er.len() < d + 2 {
        return Err(Error::Input(format!(
            "FCD needs at least {} molecules per set, got {} and {}",
            d + 2,
            eg.len(),
            er.len()
        )));
    }
    frechet_distance(&GaussianStats::fit(&eg)?, &GaussianStats::fit(&er)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// Variance along each kept component, descending.
    pub explained: Vec<f64>,
    /// Projections of the first set, then the second.
    pub original: Vec<Vec<f64>>,
    pub reconstructed: Vec<Vec<f64>>,
}

/// PCA fitted on the union of both sets, both projected onto the top
/// `dims` components. Component signs are fixed so the largest-magnitude
/// loading is positive.
pub fn pca_export(original: &[Vec<f64>], reconstructed: &[Vec<f64>], dims: usize) -> Result<Pca> {
    if !(2..=3).contains(&dims) {
        return Err(Error::Input(format!("PCA export supports 2 or 3 components, got {dims}")));
    }
    let all: Vec<&Vec<f64>> = original.iter().chain(reconstructed).collect();
    let d = all.first().map_or(0, |r| r.len());
    if all.len() <= dims || d < dims {
        return Err(Error::Input(format!("PCA with {dims} components needs more than {dims} samples of width >= {dims}")));
    }
    if all.iter().any(|r| r.len() != d) {
        return Err(Error::Input("PCA inputs differ in width".into()));
    }
    let n = all.len();
    let mut mean = DVector::zeros(d);
    for r in &all {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let x = DMatrix::from_fn(n, d, |i, j| all[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let comps: Vec<DVector<f64>> = order[..dims]
        .iter()
        .map(|&k| {
            let v = eig.eigenvectors.column(k).into_owned();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 { -v } else { v }
        })
        .collect();
    let project = |r: &Vec<f64>| -> Vec<f64> {
        let c = DVector::from_column_slice(r) - &mean;
        comps.iter().map(|v| v.dot(&c)).collect()
    };
    Ok(Pca {
        explained: order[..dims].iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect(),
        original: original.iter().map(project).collect(),
        reconstructed: reconstructed.iter().map(project).collect(),
    })
}

impl Pca {
    /// CSV rows `pc1,pc2[,pc3],kind`.
    pub fn to_csv(&self) -> String {
        let dims = self.explained.len();
        let mut out: Vec<String> = (1..=dims).map(|i| format!("pc{i}")).collect();
        out.push("kind".into());
        let mut s = out.join(",");
        s.push('\n');
        for (rows, kind) in [(&self.original, "original"), (&self.reconstructed, "reconstructed")] {
            for r in rows {
                let cols: Vec<String> = r.iter().map(|v| format!("{v:.6}")).collect();
                s.push_str(&cols.join(","));
                s.push(',');
                s.push_str(kind);
                s.push('\n');
            }
        }
        s
    }
}

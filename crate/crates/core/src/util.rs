use rand::seq::SliceRandom;
use rand::Rng;

use crate::numerics::Tensor;

/// Shuffled minibatches of `0..n`.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Copies the selected rows of a rank-2 tensor.
pub fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let (_, c) = t.dims2();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), c], data).expect("non-empty selection")
}

/// Stacks equal-length vectors into a `[n, d]` tensor.
pub fn stack(rows: &[Vec<f32>]) -> Tensor {
    Tensor::from_rows(rows).expect("rows of equal, positive length")
}

/// Generator for eval-mode passes, which never draw from it.
pub(crate) fn inert_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

//! Nearest-codebook quantisation.

use shapediff_nn::Real;

use super::LatentCode;
use crate::error::{validation, Result};

/// Codebook matrix `[K, D]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    pub entries: Vec<f32>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, entries: Vec<f32>) -> Result<Self> {
        if size == 0 || dim == 0 || entries.len() != size * dim {
            return Err(validation(format!(
                "codebook {size}x{dim} needs {} entries, got {}",
                size * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|v| v.is_nan()) {
            return Err(validation("codebook contains NaN"));
        }
        Ok(Self { size, dim, entries })
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }
}

/// Index of the nearest row for every site of a channel-major batch
/// `[N, D, L]`; distances are accumulated in f64 and ties go to the lowest
/// index. Output is ordered sample-major then site.
pub fn nearest_indices<T: Real, B: Real>(
    z: &[T],
    batch: usize,
    dim: usize,
    book: &[B],
) -> Vec<usize> {
    let sites = z.len() / (batch * dim);
    let k = book.len() / dim;
    let book: Vec<f64> = book.iter().map(|v| v.as_f64()).collect();
    let mut out = Vec::with_capacity(batch * sites);
    let mut site = vec![0.0f64; dim];
    for n in 0..batch {
        let base = n * dim * sites;
        for l in 0..sites {
            for c in 0..dim {
                site[c] = z[base + c * sites + l].as_f64();
            }
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let row = &book[j * dim..(j + 1) * dim];
                let d: f64 = site.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Replaces every latent vector by its nearest codebook row.
pub fn quantize(z: &LatentCode, book: &Codebook) -> Result<(LatentCode, Vec<usize>)> {
    if z.channels != book.dim {
        return Err(validation(format!(
            "latent has {} channels but codebook rows have {}",
            z.channels, book.dim
        )));
    }
    let idx = nearest_indices(&z.values, 1, z.channels, &book.entries);
    let sites = z.sites();
    let mut values = vec![0.0f32; z.values.len()];
    for (l, &j) in idx.iter().enumerate() {
        for c in 0..z.channels {
            values[c * sites + l] = book.row(j)[c];
        }
    }
    Ok((LatentCode::new(z.channels, z.side, values)?, idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_by_inspection_and_exact_match() {
        let book = Codebook::new(2, 3, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let z = LatentCode::new(3, 1, vec![0.2, 0.1, 0.0]).unwrap();
        assert_eq!(quantize(&z, &book).unwrap().1, vec![0]);

        let entries: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let book = Codebook::new(8, 3, entries).unwrap();
        let row5 = book.row(5).to_vec();
        let z = LatentCode::new(3, 1, row5.clone()).unwrap();
        let (q, idx) = quantize(&z, &book).unwrap();
        assert_eq!(idx, vec![5]);
        assert_eq!(q.values, row5);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let book = Codebook::new(3, 1, vec![1.0, -1.0, 1.0]).unwrap();
        let z = LatentCode::new(1, 1, vec![0.0]).unwrap();
        assert_eq!(quantize(&z, &book).unwrap().1, vec![0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let book = Codebook::new(2, 2, vec![0.0; 4]).unwrap();
        let z = LatentCode::zeros(3, 1);
        assert!(quantize(&z, &book).is_err());
        assert!(Codebook::new(2, 2, vec![0.0; 3]).is_err());
    }
}

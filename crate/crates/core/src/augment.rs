//! Random-crop augmentation `h(s, v)`: replicate-pad by `p`, then take the
//! original-size window at offset `v ∈ [0, 2p]²`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("crop offset ({row}, {col}) outside [0, {max}]")]
    OffsetOutOfRange { row: usize, col: usize, max: usize },
    #[error("observation has {len} values, expected {expected} for shape {shape:?}")]
    BadShape { len: usize, expected: usize, shape: [usize; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropParams {
    pub row: usize,
    pub col: usize,
}

impl CropParams {
    /// The offset that reproduces the input.
    pub fn identity(pad: usize) -> Self {
        Self { row: pad, col: pad }
    }

    /// Number of distinct offsets for pad `p`: `(2p+1)²`.
    pub fn space_size(pad: usize) -> usize {
        (2 * pad + 1) * (2 * pad + 1)
    }
}

pub fn sample_crop_params<R: Rng + ?Sized>(rng: &mut R, pad: usize) -> CropParams {
    CropParams {
        row: rng.random_range(0..=2 * pad),
        col: rng.random_range(0..=2 * pad),
    }
}

/// Crops one `C×H×W` observation (any element type) into `out`.
pub fn apply_crop_into<T: Copy>(obs: &[T], shape: [usize; 3], v: CropParams, pad: usize, out: &mut [T]) -> Result<(), AugmentError> {
    let [c, h, w] = shape;
    if obs.len() != c * h * w || out.len() != obs.len() {
        return Err(AugmentError::BadShape {
            len: obs.len(),
            expected: c * h * w,
            shape,
        });
    }
    if v.row > 2 * pad || v.col > 2 * pad {
        return Err(AugmentError::OffsetOutOfRange {
            row: v.row,
            col: v.col,
            max: 2 * pad,
        });
    }
    // Output pixel (y, x) reads padded pixel (y + row, x + col), i.e. source
    // pixel (y + row − p, x + col − p) clamped to the image.
    let src = |k: usize, off: usize, n: usize| (k + off).saturating_sub(pad).min(n - 1);
    let cols: Vec<usize> = (0..w).map(|x| src(x, v.col, w)).collect();
    for ch in 0..c {
        let plane = &obs[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let row = &plane[src(y, v.row, h) * w..][..w];
            for (o, &sx) in dst[y * w..(y + 1) * w].iter_mut().zip(&cols) {
                *o = row[sx];
            }
        }
    }
    Ok(())
}

pub fn apply_crop<T: Copy + Default>(obs: &[T], shape: [usize; 3], v: CropParams, pad: usize) -> Result<Vec<T>, AugmentError> {
    let mut out = vec![T::default(); obs.len()];
    apply_crop_into(obs, shape, v, pad, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_crop_is_identity() {
        let obs: Vec<u8> = (0..2 * 5 * 4).map(|v| v as u8).collect();
        assert_eq!(apply_crop(&obs, [2, 5, 4], CropParams::identity(3), 3).unwrap(), obs);
    }

    #[test]
    fn top_left_window_matches_hand_enumeration() {
        // 2×2 image [[a, b], [c, d]] padded by 1:
        // a a b b / a a b b / c c d d / c c d d — top-left 2×2 is [[a, a], [a, a]].
        let obs = [1u8, 2, 3, 4];
        let out = apply_crop(&obs, [1, 2, 2], CropParams { row: 0, col: 0 }, 1).unwrap();
        assert_eq!(out, vec![1, 1, 1, 1]);
        let out = apply_crop(&obs, [1, 2, 2], CropParams { row: 2, col: 0 }, 1).unwrap();
        assert_eq!(out, vec![3, 3, 3, 3]);
        let out = apply_crop(&obs, [1, 2, 2], CropParams { row: 1, col: 2 }, 1).unwrap();
        assert_eq!(out, vec![2, 2, 4, 4]);
    }

    #[test]
    fn zero_pad_always_samples_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_crop_params(&mut rng, 0), CropParams { row: 0, col: 0 });
        }
    }

    #[test]
    fn rejects_out_of_range_offsets() {
        let obs = [0u8; 4];
        assert!(apply_crop(&obs, [1, 2, 2], CropParams { row: 3, col: 0 }, 1).is_err());
        assert!(apply_crop(&obs, [1, 3, 2], CropParams { row: 0, col: 0 }, 1).is_err());
    }
}

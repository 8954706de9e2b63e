use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::featurization::FeatureMatrix;

/// Advance the accompaniment by `k` frames: output frame `t` is input frame
/// `t + k`, or zeros past the end of the input. The output has `target_len`
/// frames.
pub fn shift_accompaniment(accomp: &FeatureMatrix, k: i64, target_len: usize) -> Result<FeatureMatrix> {
    ensure!(k >= 0, "accompaniment shift must be non-negative, got {k}");
    let k = k as usize;
    let mut out = FeatureMatrix::zeros(target_len, accomp.dim(), accomp.frame_rate_hz);
    for t in 0..target_len {
        let src = t + k;
        if src >= accomp.rows() {
            break;
        }
        out.row_mut(t).copy_from_slice(accomp.row(src));
    }
    Ok(out)
}

/// Which masking branch was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskDescriptor {
    /// Every frame zeroed.
    Full,
    /// The last `len` frames zeroed (`len <= T / 2`).
    Suffix { len: usize },
}

impl MaskDescriptor {
    pub fn draw(rng: &mut impl Rng, frames: usize, full_prob: f64) -> Self {
        if rng.random::<f64>() < full_prob {
            MaskDescriptor::Full
        } else {
            MaskDescriptor::Suffix {
                len: rng.random_range(0..=frames / 2),
            }
        }
    }

    pub fn apply(&self, accomp: &mut FeatureMatrix) {
        let n = accomp.rows();
        let start = match *self {
            MaskDescriptor::Full => 0,
            MaskDescriptor::Suffix { len } => n - len.min(n),
        };
        for t in start..n {
            accomp.row_mut(t).fill(0.0);
        }
    }
}

/// Random accompaniment masking: with probability `full_prob` all frames are
/// zeroed, otherwise a suffix of uniform length in `[0, T/2]`.
pub fn apply_accomp_mask(
    accomp: &FeatureMatrix,
    rng_seed: u64,
    full_prob: f64,
) -> Result<(FeatureMatrix, MaskDescriptor)> {
    ensure!(
        (0.0..=1.0).contains(&full_prob),
        "full-mask probability must lie in [0, 1], got {full_prob}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let desc = MaskDescriptor::draw(&mut rng, accomp.rows(), full_prob);
    let mut out = accomp.clone();
    desc.apply(&mut out);
    Ok((out, desc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, dim: usize) -> FeatureMatrix {
        let data = (0..rows * dim).map(|i| 1.0 + i as f32).collect();
        FeatureMatrix::new(data, rows, dim, 50.0).unwrap()
    }

    #[test]
    fn zero_shift_truncates_or_pads() {
        let a = ramp(5, 2);
        let same = shift_accompaniment(&a, 0, 5).unwrap();
        assert_eq!(same, a);
        let short = shift_accompaniment(&a, 0, 3).unwrap();
        assert_eq!(short.as_slice(), &a.as_slice()[..6]);
        let long = shift_accompaniment(&a, 0, 7).unwrap();
        assert_eq!(long.row(6), &[0.0, 0.0]);
    }

    #[test]
    fn shift_by_two_enumerated() {
        let a = ramp(5, 1);
        let s = shift_accompaniment(&a, 2, 5).unwrap();
        // rows r2, r3, r4, 0, 0
        assert_eq!(s.as_slice(), &[3.0, 4.0, 5.0, 0.0, 0.0]);
        for t in 0..5 {
            let want = if t + 2 < 5 { a.row(t + 2).to_vec() } else { vec![0.0] };
            assert_eq!(s.row(t), want.as_slice());
        }
    }

    #[test]
    fn negative_shift_is_rejected_and_full_scale_shift_accepted() {
        let a = ramp(400, 2);
        assert!(shift_accompaniment(&a, -1, 5).is_err());
        let s = shift_accompaniment(&a, 150, 400).unwrap();
        assert_eq!(s.row(0), a.row(150));
        assert_eq!(s.row(250), &[0.0, 0.0]);
    }

    #[test]
    fn forced_full_mask() {
        let (m, d) = apply_accomp_mask(&ramp(10, 3), 5, 1.0).unwrap();
        assert_eq!(d, MaskDescriptor::Full);
        assert!(m.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_suffix_mask_fixture() {
        // seed 4 draws a suffix of 3 frames for T = 10
        let a = ramp(10, 1);
        let (m, d) = apply_accomp_mask(&a, 4, 0.0).unwrap();
        assert_eq!(d, MaskDescriptor::Suffix { len: 3 });
        for t in 0..10 {
            let zeroed = m.row(t)[0] == 0.0;
            assert_eq!(zeroed, t >= 7, "frame {t}");
        }
    }

    #[test]
    fn suffix_stays_in_latter_half_and_is_deterministic() {
        let a = ramp(11, 1);
        for seed in 0..200 {
            let (m, d) = apply_accomp_mask(&a, seed, 0.0).unwrap();
            assert_eq!(apply_accomp_mask(&a, seed, 0.0).unwrap().1, d);
            let MaskDescriptor::Suffix { len } = d else { panic!() };
            assert!(len <= 5);
            assert!(m.as_slice()[..11 - len].iter().all(|&v| v != 0.0));
        }
        assert!(apply_accomp_mask(&a, 0, 1.5).is_err());
    }

    #[test]
    fn default_probability_splits_branches() {
        let a = ramp(10, 1);
        let full = (0..2000)
            .filter(|&s| apply_accomp_mask(&a, s, 0.5).unwrap().1 == MaskDescriptor::Full)
            .count();
        assert!((900..1100).contains(&full), "{full}");
    }
}

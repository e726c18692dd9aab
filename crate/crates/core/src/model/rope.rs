//! Rotary position embedding over interleaved pairs `(2j, 2j+1)`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Named rope bases used for length extension.
pub const THETA_DEFAULT: f64 = 10_000.0;
pub const THETA_640K: f64 = 640_000.0;
pub const THETA_5M: f64 = 5_000_000.0;
pub const THETA_80M: f64 = 80_000_000.0;

/// Cosine and sine tables for `n` positions starting at `start`, tiled over
/// `heads` heads of width `d_head`. Both are `n × (heads·d_head/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryTables<T> {
    pub cos: Tensor<T>,
    pub sin: Tensor<T>,
}

impl<T: Real> RotaryTables<T> {
    pub fn new(theta: f64, d_head: usize, heads: usize, start: usize, n: usize) -> Result<Self> {
        if d_head % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: vec![d_head],
                reason: "rotary embedding needs an even head dimension".into(),
            });
        }
        let half = d_head / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|j| theta.powf(-2.0 * j as f64 / d_head as f64))
            .collect();
        let width = heads * half;
        let mut cos = Vec::with_capacity(n * width);
        let mut sin = Vec::with_capacity(n * width);
        for i in 0..n {
            let pos = (start + i) as f64;
            for _ in 0..heads {
                for f in &freqs {
                    let (s, c) = (pos * f).sin_cos();
                    cos.push(T::of(c));
                    sin.push(T::of(s));
                }
            }
        }
        Ok(Self {
            cos: Tensor::from_rows(n, width, cos),
            sin: Tensor::from_rows(n, width, sin),
        })
    }
}

/// Rotates the rows of a single-head `n × d_head` tensor, row `i` at absolute
/// position `start_pos + i`.
pub fn rope_apply<T: Real>(x: &Tensor<T>, theta: f64, start_pos: usize) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    let t = RotaryTables::new(theta, d, 1, start_pos, n)?;
    x.rotate_pairs(&t.cos, &t.sin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut impl Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn position_zero_is_identity() {
        let x = rand_t(&mut ChaCha8Rng::seed_from_u64(0), 1, 8);
        assert_eq!(rope_apply(&x, THETA_DEFAULT, 0).unwrap(), x);
    }

    #[test]
    fn pair_norms_preserved() {
        let x = rand_t(&mut ChaCha8Rng::seed_from_u64(1), 16, 8);
        let y = rope_apply(&x, THETA_DEFAULT, 3).unwrap();
        for i in 0..16 {
            for j in 0..4 {
                let a = x.at(i, 2 * j).hypot(x.at(i, 2 * j + 1));
                let b = y.at(i, 2 * j).hypot(y.at(i, 2 * j + 1));
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn scores_depend_on_offset_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k) = (rand_t(&mut rng, 1, 16), rand_t(&mut rng, 1, 16));
        for theta in [THETA_DEFAULT, THETA_640K] {
            for (n, m) in [(7, 2), (30, 30), (3, 11)] {
                let a = dot(
                    rope_apply(&q, theta, n).unwrap().row(0),
                    rope_apply(&k, theta, m).unwrap().row(0),
                );
                let b = dot(
                    rope_apply(&q, theta, n + 5).unwrap().row(0),
                    rope_apply(&k, theta, m + 5).unwrap().row(0),
                );
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn known_angle() {
        // d_head 2: single pair at frequency 1, position 1 rotates by one radian
        let x = Tensor::from_rows(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let y = rope_apply(&x, THETA_DEFAULT, 0).unwrap();
        assert!((y.at(1, 0) - 1f64.cos()).abs() < 1e-15);
        assert!((y.at(1, 1) - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn odd_head_dim_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(rope_apply(&x, THETA_DEFAULT, 0).is_err());
    }

    #[test]
    fn tables_tile_over_heads() {
        let t = RotaryTables::<f64>::new(THETA_DEFAULT, 4, 3, 5, 2).unwrap();
        assert_eq!(t.cos.shape(), &[2, 6]);
        assert_eq!(t.cos.row(1)[0..2], t.cos.row(1)[4..6]);
    }
}

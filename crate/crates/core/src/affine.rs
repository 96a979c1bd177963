//! 2×3 affine transforms in normalized image coordinates.
//!
//! A transform maps an *output* position `(u, v) ∈ [-1, 1]²` to the
//! *source* position it samples: `src = A·[u, v, 1]ᵀ`. Because the
//! coordinates are normalized, the same transform applies unchanged to an
//! image and to each of its lower-resolution latent streams.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Determinants below this magnitude are treated as singular.
pub const MIN_DET: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] };

    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let t = AffineTransform { m };
        let det = t.det();
        if !det.is_finite() || det.abs() <= MIN_DET || m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::SingularTransform { det });
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    /// Rotation by `degrees` about the image centre, scaling by `scale`, then
    /// a translation of `(tx, ty)` in normalized units.
    pub fn from_params(degrees: f64, scale: f64, tx: f64, ty: f64) -> Result<Self> {
        let (s, c) = degrees.to_radians().sin_cos();
        Self::new([[scale * c, -scale * s, tx], [scale * s, scale * c, ty]])
    }

    pub fn rotation(degrees: f64) -> Self {
        Self::from_params(degrees, 1.0, 0.0, 0.0).expect("rotation is invertible")
    }

    /// Translation by whole pixels of an image `w` wide and `h` high: the
    /// output at pixel `(x, y)` samples the source at `(x + dx, y + dy)`.
    pub fn translation_pixels(dx: f64, dy: f64, w: usize, h: usize) -> Self {
        Self { m: [[1.0, 0.0, 2.0 * dx / w as f64], [0.0, 1.0, 2.0 * dy / h as f64]] }
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.m
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d.abs() <= MIN_DET {
            return Err(Error::SingularTransform { det: d });
        }
        let [[a, b, tx], [c, e, ty]] = self.m;
        let (ia, ib, ic, ie) = (e / d, -b / d, -c / d, a / d);
        Self::new([[ia, ib, -(ia * tx + ib * ty)], [ic, ie, -(ic * tx + ie * ty)]])
    }

    /// The transform equivalent to warping by `self` and then by `next`.
    pub fn then(&self, next: &AffineTransform) -> AffineTransform {
        let [[a, b, c], [d, e, f]] = self.m;
        let [[p, q, r], [s, t, u]] = next.m;
        AffineTransform {
            m: [
                [a * p + b * s, a * q + b * t, a * r + b * u + c],
                [d * p + e * s, d * q + e * t, d * r + e * u + f],
            ],
        }
    }
}

/// Sampling ranges for random training transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRanges {
    pub max_degrees: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_translation: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges { max_degrees: 30.0, min_scale: 0.8, max_scale: 1.25, max_translation: 0.1 }
    }
}

impl AffineRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_degrees >= 0.0
            && self.min_scale > 0.0
            && self.min_scale <= self.max_scale
            && self.max_translation >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid affine ranges {self:?}")))
        }
    }

    /// Builds a transform after checking every parameter lies in range.
    pub fn transform(&self, degrees: f64, scale: f64, tx: f64, ty: f64) -> Result<AffineTransform> {
        let inside = degrees.abs() <= self.max_degrees
            && (self.min_scale..=self.max_scale).contains(&scale)
            && tx.abs() <= self.max_translation
            && ty.abs() <= self.max_translation;
        if !inside {
            return Err(Error::invalid(
                "affine",
                format!("parameters (θ={degrees}, s={scale}, t=({tx},{ty})) outside {self:?}"),
            ));
        }
        AffineTransform::from_params(degrees, scale, tx, ty)
    }

    /// Scale is drawn log-uniformly so that shrinking and growing are equally likely.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineTransform {
        let deg = rng.random_range(-self.max_degrees..=self.max_degrees);
        let log_s = rng.random_range(self.min_scale.ln()..=self.max_scale.ln());
        let tx = rng.random_range(-self.max_translation..=self.max_translation);
        let ty = rng.random_range(-self.max_translation..=self.max_translation);
        AffineTransform::from_params(deg, log_s.exp(), tx, ty).expect("sampled ranges are invertible")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn singular_rejected() {
        assert!(matches!(
            AffineTransform::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]),
            Err(Error::SingularTransform { .. })
        ));
        assert!(AffineTransform::from_params(10.0, 1e-4, 0.0, 0.0).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let a = AffineTransform::from_params(17.0, 1.1, 0.05, -0.03).unwrap();
        let id = a.then(&a.inverse().unwrap());
        for (r, e) in id.matrix().iter().flatten().zip(AffineTransform::IDENTITY.matrix().iter().flatten()) {
            assert!((r - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ranges_enforced_and_sampled_within() {
        let r = AffineRanges::default();
        assert!(r.transform(45.0, 1.0, 0.0, 0.0).is_err());
        assert!(r.transform(10.0, 1.0, 0.0, 0.2).is_err());
        assert!(r.transform(-30.0, 0.8, 0.1, -0.1).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = r.sample(&mut rng);
            let s = t.det().sqrt();
            assert!(s >= 0.8 - 1e-9 && s <= 1.25 + 1e-9);
            assert!(t.matrix()[0][2].abs() <= 0.1);
        }
    }
}

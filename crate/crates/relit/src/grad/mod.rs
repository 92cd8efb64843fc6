//! Reverse-mode automatic differentiation over tensor-valued ops.
//!
//! The tape ([`tape::Tape`]) records batched operations eagerly — each push
//! computes the forward value immediately — and `backward` runs the
//! recorded pullbacks in reverse, accumulating parameter gradients into a
//! [`GradSet`]. Ops are tensor-granular (whole ray batches at a time), which
//! is what makes CPU training tractable; the semantics are the usual
//! leaf-to-loss chain rule.
//!
//! Everything is generic over [`Real`] so the identical pipeline runs in f32
//! for training and in f64 for finite-difference gradient checking.

pub mod gradcheck;
pub mod tape;

pub use tape::{NodeId, Segments, Tape, TapeError};

use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type the autodiff machinery is generic over.
pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, e: Self) -> Self;
    fn abs(self) -> Self;
    fn max(self, o: Self) -> Self;
    fn min(self, o: Self) -> Self;
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn powi(self, n: i32) -> Self {
                self.powi(n)
            }
            fn powf(self, e: Self) -> Self {
                self.powf(e)
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn max(self, o: Self) -> Self {
                self.max(o)
            }
            fn min(self, o: Self) -> Self {
                self.min(o)
            }
            fn mul_add(self, a: Self, b: Self) -> Self {
                self.mul_add(a, b)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Numerically-stable softplus: `ln(1 + eˣ)`.
pub fn softplus<F: Real>(x: F) -> F {
    let hi = F::from_f64(30.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (F::one() + x.exp()).ln()
    }
}

/// Logistic sigmoid, stable for both signs.
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// The optimizer-visible parameter groups. Each is one flat array with its
/// own learning rate; `name()` is the identifier used in checkpoints,
/// configs, and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    GeoGrid,
    GeoSigma,
    AppGrid,
    AppAlbedo,
    AppNormal,
    AppSemantic,
    AppGuidevis,
    LightSun,
    LightSky,
}

pub const PARAM_GROUPS: [ParamGroup; 9] = [
    ParamGroup::GeoGrid,
    ParamGroup::GeoSigma,
    ParamGroup::AppGrid,
    ParamGroup::AppAlbedo,
    ParamGroup::AppNormal,
    ParamGroup::AppSemantic,
    ParamGroup::AppGuidevis,
    ParamGroup::LightSun,
    ParamGroup::LightSky,
];

impl ParamGroup {
    pub fn index(self) -> usize {
        PARAM_GROUPS.iter().position(|g| *g == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::GeoGrid => "geo.grid",
            ParamGroup::GeoSigma => "geo.sigma",
            ParamGroup::AppGrid => "app.grid",
            ParamGroup::AppAlbedo => "app.albedo",
            ParamGroup::AppNormal => "app.normal",
            ParamGroup::AppSemantic => "app.semantic",
            ParamGroup::AppGuidevis => "app.guidevis",
            ParamGroup::LightSun => "light.sun",
            ParamGroup::LightSky => "light.sky",
        }
    }

    /// Whether this group belongs to the geometry field (density); the rest
    /// is appearance or lighting. Used by the disjointness tests.
    pub fn is_geometry(self) -> bool {
        matches!(self, ParamGroup::GeoGrid | ParamGroup::GeoSigma)
    }
}

/// All trainable parameters, one flat contiguous array per group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    groups: [Vec<F>; 9],
}

impl<F: Real> ParamSet<F> {
    pub fn with_sizes(sizes: [usize; 9]) -> ParamSet<F> {
        ParamSet {
            groups: sizes.map(|n| vec![F::zero(); n]),
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[F] {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<F> {
        &mut self.groups[g.index()]
    }

    pub fn total_len(&self) -> usize {
        self.groups.iter().map(|v| v.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            groups: std::array::from_fn(|i| {
                self.groups[i].iter().map(|v| G::from_f64(v.to_f64())).collect()
            }),
        }
    }

    /// Iterate `(group, values)` in the fixed group order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamGroup, &[F])> {
        PARAM_GROUPS.iter().map(move |g| (*g, self.group(*g)))
    }
}

/// Gradient accumulator with the same shape as a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradSet<F> {
    groups: [Vec<F>; 9],
}

impl<F: Real> GradSet<F> {
    pub fn zeros_like(params: &ParamSet<F>) -> GradSet<F> {
        GradSet {
            groups: std::array::from_fn(|i| vec![F::zero(); params.groups[i].len()]),
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[F] {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [F] {
        &mut self.groups[g.index()]
    }

    /// Elementwise accumulate (the fixed-order reduction across chunk tapes).
    pub fn add_assign(&mut self, other: &GradSet<F>) {
        for i in 0..9 {
            debug_assert_eq!(self.groups[i].len(), other.groups[i].len());
            for (a, b) in self.groups[i].iter_mut().zip(&other.groups[i]) {
                *a += *b;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in &mut self.groups {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Name of the first group holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<ParamGroup> {
        for g in PARAM_GROUPS {
            if self.groups[g.index()].iter().any(|v| !v.is_finite()) {
                return Some(g);
            }
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamGroup, &[F])> {
        PARAM_GROUPS.iter().map(move |g| (*g, self.group(*g)))
    }
}

use crate::error::{Error, Result};
use crate::numkit::Vec64;

/// Structure of a residual Jacobian `K = ∂r/∂x`.
#[derive(Clone, Debug, PartialEq)]
pub enum JacobianKind {
    Identity,
    Scalar(f64),
    Diagonal(Vec64),
    Zero,
}

/// The cheap residual-path Jacobian of one layer.
///
/// Only the four structured kinds exist; products stay in the set, so a
/// dense `K` cannot be built.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualJacobian {
    dim: usize,
    kind: JacobianKind,
}

impl ResidualJacobian {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            kind: JacobianKind::Identity,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            kind: JacobianKind::Zero,
        }
    }

    /// `c·I`. Zero and one collapse onto `Zero` and `Identity`.
    pub fn scalar(dim: usize, c: f64) -> Self {
        let kind = if c == 0.0 {
            JacobianKind::Zero
        } else if c == 1.0 {
            JacobianKind::Identity
        } else {
            JacobianKind::Scalar(c)
        };
        Self { dim, kind }
    }

    pub fn diagonal(d: Vec64) -> Self {
        Self {
            dim: d.len(),
            kind: JacobianKind::Diagonal(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &JacobianKind {
        &self.kind
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, JacobianKind::Zero)
    }

    /// `w·K`.
    pub fn apply(&self, w: &Vec64) -> Result<Vec64> {
        if w.len() != self.dim {
            return Err(Error::shape("apply_K", self.dim, w.len()));
        }
        Ok(match &self.kind {
            JacobianKind::Identity => w.clone(),
            JacobianKind::Zero => Vec64::zeros(self.dim),
            JacobianKind::Scalar(c) => w.scale(*c),
            JacobianKind::Diagonal(d) => crate::numkit::hadamard(w, d)?,
        })
    }

    /// `dst += w·K`, without allocating.
    pub(crate) fn apply_add_into(&self, w: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(w.len(), self.dim);
        debug_assert_eq!(dst.len(), self.dim);
        match &self.kind {
            JacobianKind::Identity => crate::numkit::add_into(dst, w),
            JacobianKind::Zero => {}
            JacobianKind::Scalar(c) => crate::numkit::axpy(*c, w, dst),
            JacobianKind::Diagonal(d) => {
                for ((o, x), k) in dst.iter_mut().zip(w).zip(d.iter()) {
                    *o += x * k;
                }
            }
        }
    }

    /// Matrix product `first · then`: a row vector passes through `first`
    /// and then `then`. Every structured kind commutes with every other, so
    /// the order only matters for dimension checks.
    pub fn compose(first: &Self, then: &Self) -> Result<Self> {
        use JacobianKind::*;
        if first.dim != then.dim {
            return Err(Error::shape("compose_K", first.dim, then.dim));
        }
        let dim = first.dim;
        Ok(match (&first.kind, &then.kind) {
            (Zero, _) | (_, Zero) => Self::zero(dim),
            (Identity, _) => then.clone(),
            (_, Identity) => first.clone(),
            (Scalar(a), Scalar(b)) => Self::scalar(dim, a * b),
            (Scalar(a), Diagonal(d)) | (Diagonal(d), Scalar(a)) => Self::diagonal(d.scale(*a)),
            (Diagonal(a), Diagonal(b)) => Self::diagonal(crate::numkit::hadamard(a, b)?),
        })
    }
}

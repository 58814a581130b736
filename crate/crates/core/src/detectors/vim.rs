//! Virtual-logit matching.
//!
//! Features are centered on the fit-set mean, the principal subspace is found
//! by eigendecomposition of their covariance, and the norm of the projection
//! onto the remaining (residual) directions becomes an extra logit. The
//! residual norm is scaled so that, on the fit set, its mean matches the mean
//! maximum logit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{Detector, DetectorContext, ScoreRecord};
use crate::error::{Error, Result};
use crate::metrics::softmax;
use crate::repr::{PairedRecord, RepresentationRecord};

const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct VimModel {
    offset: DVector<f64>,
    /// `m × residual_dim`, orthonormal columns.
    residual_basis: DMatrix<f64>,
    alpha: f64,
    alpha_fallback: bool,
}

impl VimModel {
    pub fn offset(&self) -> &[f64] {
        self.offset.as_slice()
    }

    pub fn residual_basis(&self) -> &DMatrix<f64> {
        &self.residual_basis
    }

    /// Scale turning residual norms into the virtual logit.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// True when the fit set had no residual mass and `alpha` fell back to 1.
    pub fn alpha_fallback(&self) -> bool {
        self.alpha_fallback
    }

    pub fn residual_norm(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.offset.len() {
            return Err(Error::DimensionMismatch(format!(
                "features have width {}, model expects {}",
                features.len(),
                self.offset.len()
            )));
        }
        let centered = DVector::from_column_slice(features) - &self.offset;
        Ok((self.residual_basis.transpose() * centered).norm())
    }
}

pub fn vim_fit(features: &[Vec<f64>], logits: &[Vec<f64>], residual_dim: usize) -> Result<VimModel> {
    let n = features.len();
    let m = features.first().map_or(0, Vec::len);
    if logits.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} feature rows vs {} logit rows",
            logits.len()
        )));
    }
    if residual_dim == 0 || residual_dim >= m {
        return Err(Error::InvalidArgument(format!(
            "residual_dim {residual_dim} must be in 1..{m}"
        )));
    }
    if n < m {
        return Err(Error::Degenerate(format!(
            "vim fit needs at least m={m} samples, got {n}"
        )));
    }
    if features.iter().any(|f| f.len() != m) {
        return Err(Error::DimensionMismatch("fit features differ in width".into()));
    }
    let x = DMatrix::from_fn(n, m, |i, j| features[i][j]);
    let offset = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, m, |i, j| x[(i, j)] - offset[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let principal_dim = m - residual_dim;
    let largest = eig.eigenvalues[order[0]];
    let weakest_principal = eig.eigenvalues[order[principal_dim - 1]];
    if !(largest > 0.0) || weakest_principal <= RANK_TOLERANCE * largest {
        return Err(Error::Degenerate(format!(
            "rank-deficient vim fit: principal eigenvalue {principal_dim} is {weakest_principal:e} (largest {largest:e})"
        )));
    }
    let residual_basis = DMatrix::from_fn(m, residual_dim, |r, c| eig.eigenvectors[(r, order[principal_dim + c])]);

    let mut model = VimModel {
        offset,
        residual_basis,
        alpha: 1.0,
        alpha_fallback: false,
    };
    let mut norm_sum = 0.0;
    for f in features {
        norm_sum += model.residual_norm(f)?;
    }
    let max_logit_sum: f64 = logits
        .iter()
        .map(|l| l.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    let alpha = max_logit_sum / norm_sum;
    if norm_sum > RANK_TOLERANCE && alpha.is_finite() && alpha > 0.0 {
        model.alpha = alpha;
    } else {
        model.alpha_fallback = true;
    }
    Ok(model)
}

/// `1 − p_virtual`, where `p_virtual` is the softmax mass of the scaled
/// residual norm appended to the record's logits.
pub fn vim_score(record: &RepresentationRecord, model: &VimModel) -> Result<f64> {
    let virtual_logit = model.alpha * model.residual_norm(&record.features)?;
    let mut extended = record.logits.clone();
    extended.push(virtual_logit);
    let p = softmax(&extended)?;
    Ok(1.0 - p.values()[extended.len() - 1])
}

struct Vim {
    model: VimModel,
}

impl Detector for Vim {
    fn name(&self) -> &str {
        "vim"
    }

    fn score(&self, pair: &PairedRecord) -> Result<ScoreRecord> {
        ScoreRecord::plain(pair.id(), vim_score(&pair.input, &self.model)?)
    }
}

/// Principal dimension `C` when `C < m`, otherwise `m / 2`.
pub fn default_residual_dim(m: usize, classes: usize) -> usize {
    let principal = if classes < m { classes } else { (m / 2).max(1) };
    m.saturating_sub(principal).max(1)
}

pub(super) fn build(ctx: &DetectorContext) -> Result<Box<dyn Detector>> {
    let bank = ctx.bank()?;
    let first = bank
        .first()
        .ok_or_else(|| Error::InvalidArgument("feature bank is empty".into()))?;
    let residual_dim = ctx
        .settings
        .vim_residual_dim
        .unwrap_or_else(|| default_residual_dim(first.feature_dim(), first.num_classes()));
    let features: Vec<Vec<f64>> = bank.iter().map(|r| r.features.clone()).collect();
    let logits: Vec<Vec<f64>> = bank.iter().map(|r| r.logits.clone()).collect();
    Ok(Box::new(Vim {
        model: vim_fit(&features, &logits, residual_dim)?,
    }))
}

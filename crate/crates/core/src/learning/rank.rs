//! Hybrid rank reduction: a linear epoch-based phase followed by
//! spectral-energy selection.

use crate::error::{Error, Result};
use crate::feedback::AlignmentTargets;
use crate::learning::adam::WeightMoments;
use crate::model::FactoredWeight;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSchedule {
    pub total_epochs: usize,
    pub phase1_fraction: f64,
    pub phase1_target_fraction: f64,
    pub energy_threshold: f64,
    pub hoyer_period: usize,
}

impl RankSchedule {
    pub fn new(total_epochs: usize) -> Self {
        RankSchedule {
            total_epochs,
            phase1_fraction: 0.3,
            phase1_target_fraction: 0.7,
            energy_threshold: 0.95,
            hoyer_period: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |x: f64| x > 0.0 && x <= 1.0;
        if self.total_epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !frac_ok(self.phase1_fraction) {
            return Err(Error::config("phase1_fraction", "must lie in (0, 1]"));
        }
        if !frac_ok(self.phase1_target_fraction) {
            return Err(Error::config("phase1_target_fraction", "must lie in (0, 1]"));
        }
        if !frac_ok(self.energy_threshold) {
            return Err(Error::config("energy_threshold", "must lie in (0, 1]"));
        }
        if self.hoyer_period == 0 {
            return Err(Error::config("hoyer_period", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of epochs in the linear phase, `ceil(fraction * total)`.
    pub fn phase1_len(&self) -> usize {
        (ceil_tol(self.phase1_fraction * self.total_epochs as f64)).clamp(1, self.total_epochs.max(1))
    }

    pub fn in_phase1(&self, epoch: usize) -> bool {
        epoch < self.phase1_len()
    }

    /// Epochs during which the sparsity gradient is added to `gS`.
    pub fn hoyer_active(&self, epoch: usize) -> bool {
        self.in_phase1(epoch) && epoch.is_multiple_of(self.hoyer_period)
    }

    /// `ceil(target_fraction * r0)`, at least 1.
    pub fn phase1_target(&self, r0: usize) -> usize {
        ceil_tol(self.phase1_target_fraction * r0 as f64).max(1)
    }
}

/// Ceiling that ignores representation error just above an integer.
fn ceil_tol(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Epoch-based rank at the end of `epoch`: linear from `r0` at epoch 0 to
/// `ceil(0.7 r0)` at the last phase-1 epoch, rounded to nearest, and held
/// at that target afterwards (the energy criterion then only lowers it).
pub fn scheduled_rank(epoch: usize, r0: usize, schedule: &RankSchedule) -> usize {
    let target = schedule.phase1_target(r0);
    let last = schedule.phase1_len() - 1;
    if epoch >= last {
        return target;
    }
    let t = epoch as f64 / last as f64;
    let r = (r0 as f64 - t * (r0 - target) as f64).round() as usize;
    r.clamp(target, r0)
}

/// Smallest `k` whose leading squared singular values hold at least
/// `threshold` of the total energy.
pub fn spectral_energy_rank<T: Scalar>(s: &[T], threshold: f64) -> Result<usize> {
    if s.is_empty() {
        return Err(Error::arg("spectral energy of an empty spectrum"));
    }
    let total: f64 = s.iter().map(|x| x.as_f64() * x.as_f64()).sum();
    if total == 0.0 {
        return Ok(1);
    }
    let mut acc = 0.0;
    for (k, x) in s.iter().enumerate() {
        acc += x.as_f64() * x.as_f64();
        if acc / total >= threshold {
            return Ok(k + 1);
        }
    }
    Ok(s.len())
}

/// Largest rank `r` with `r (m + n) < m n`, so that the factored layer is
/// cheaper than the dense one. At least 1.
pub fn rank_cap(m: usize, n: usize) -> usize {
    let (m, n) = (m as u128, n as u128);
    let mut r = (m * n) / (m + n);
    if r * (m + n) >= m * n {
        r = r.saturating_sub(1);
    }
    (r as usize).max(1)
}

/// Rank to keep at the end of `epoch` for a layer of shape `m x n` with
/// initial rank `r0` and current singular values `s` (any order).
pub fn next_rank<T: Scalar>(
    epoch: usize,
    r0: usize,
    current: usize,
    s: &[T],
    dims: (usize, usize),
    schedule: &RankSchedule,
) -> Result<usize> {
    let mut r = scheduled_rank(epoch, r0, schedule).min(current);
    if epoch + 1 >= schedule.phase1_len() {
        r = r.min(rank_cap(dims.0, dims.1));
    }
    if !schedule.in_phase1(epoch) {
        let mut sorted: Vec<T> = s.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        r = r.min(spectral_energy_rank(&sorted, schedule.energy_threshold)?);
    }
    Ok(r.max(1))
}

/// Component order that sorts `s` non-increasingly (stable).
pub fn descending_order<T: Scalar>(s: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// A layer's factors with its alignment targets and optimizer state.
pub type Components<T> = (FactoredWeight<T>, Option<AlignmentTargets<T>>, Option<WeightMoments<T>>);

/// Factors, targets and optimizer state restricted to components `keep`.
pub fn select_components<T: Scalar>(
    fw: &FactoredWeight<T>,
    targets: Option<&AlignmentTargets<T>>,
    moments: Option<&WeightMoments<T>>,
    keep: &[usize],
) -> Components<T> {
    let fw2 = FactoredWeight {
        u: fw.u.select_columns(keep),
        s: keep.iter().map(|&k| fw.s[k]).collect(),
        vt: fw.vt.select_rows(keep),
    };
    (
        fw2,
        targets.map(|t| t.select(keep)),
        moments.map(|m| m.select_components(keep)),
    )
}

/// Keeps the leading `r_new` components in their current order.
pub fn truncate_rank<T: Scalar>(
    fw: &FactoredWeight<T>,
    targets: Option<&AlignmentTargets<T>>,
    moments: Option<&WeightMoments<T>>,
    r_new: usize,
) -> Result<Components<T>> {
    if r_new == 0 || r_new > fw.rank() {
        return Err(Error::arg(format!("cannot truncate rank {} to {r_new}", fw.rank())));
    }
    let keep: Vec<usize> = (0..r_new).collect();
    Ok(select_components(fw, targets, moments, &keep))
}

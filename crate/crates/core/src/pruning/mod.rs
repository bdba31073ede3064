//! Unstructured magnitude pruning with per-module graded ratios, weight
//! rewinding and sparsity accounting.

mod mask;
mod ticket;

pub use mask::{Mask, MaskSet};
pub use ticket::{
    find_winning_ticket, Evaluation, RoundReport, RoundTraining, TerminationReason, TicketOutcome, TicketTrainer,
};

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::params::{ParameterSet, Role};

/// When the rewind point `θ_τ` is captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotPolicy {
    /// Captured during the first round's training and reused every round.
    #[default]
    FirstRound,
    /// Re-captured at step τ of every round.
    EveryRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    /// Base pruning ratio `p`, percent of remaining weights per round.
    pub base_ratio_pct: f64,
    /// Increment `q`, percent added per module index.
    pub increment_pct: f64,
    /// Target global sparsity `δ`.
    pub target_sparsity: f64,
    /// Rewind point as a fraction of the per-round iterations.
    pub rewind_fraction: f64,
    pub iterations_per_round: usize,
    pub max_rounds: usize,
    #[serde(default)]
    pub snapshot_policy: SnapshotPolicy,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            base_ratio_pct: 20.0,
            increment_pct: 1.0,
            target_sparsity: 0.99,
            rewind_fraction: 0.05,
            iterations_per_round: 2000,
            max_rounds: 25,
            snapshot_policy: SnapshotPolicy::FirstRound,
        }
    }
}

impl PruneSchedule {
    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self, modules: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.base_ratio_pct > 0.0) {
            return bad(format!("base ratio p = {} must be > 0", self.base_ratio_pct));
        }
        if !(self.increment_pct >= 0.0) {
            return bad(format!("increment q = {} must be >= 0", self.increment_pct));
        }
        let last = self.ratio_pct(modules.saturating_sub(1));
        if !(last < 100.0) {
            return bad(format!(
                "p + (J-1)q = {last}% must stay below 100% for J = {modules} modules"
            ));
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return bad(format!("target sparsity {} outside (0, 1)", self.target_sparsity));
        }
        if !(0.0..1.0).contains(&self.rewind_fraction) {
            return bad(format!("rewind fraction {} outside [0, 1)", self.rewind_fraction));
        }
        if self.iterations_per_round == 0 || self.max_rounds == 0 {
            return bad("iterations per round and max rounds must be positive".into());
        }
        Ok(())
    }

    /// Per-round ratio `(p + j q)%` for module `j`.
    pub fn ratio_pct(&self, module: usize) -> f64 {
        self.base_ratio_pct + module as f64 * self.increment_pct
    }

    /// Rewind step `τ = ⌊fraction · i⌋`.
    pub fn rewind_step(&self) -> usize {
        (self.rewind_fraction * self.iterations_per_round as f64).floor() as usize
    }
}

/// Full copy of the parameters at step `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewindSnapshot {
    pub params: ParameterSet,
    pub round: usize,
    pub step: usize,
}

/// `1 - ‖m‖₀ / ‖θ‖₀` over prunable positions.
pub fn sparsity(mask: &MaskSet, params: &ParameterSet) -> Result<f64> {
    mask.check_aligned(params)?;
    let total = mask.total();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - mask.ones() as f64 / total as f64)
}

/// Sparsity of each module's prunable arrays.
pub fn module_sparsities(mask: &MaskSet, modules: usize) -> Vec<f64> {
    let mut ones = vec![0usize; modules];
    let mut total = vec![0usize; modules];
    for m in mask.masks() {
        if m.module < modules {
            ones[m.module] += m.ones();
            total[m.module] += m.len();
        }
    }
    ones.iter()
        .zip(&total)
        .map(|(&o, &t)| if t == 0 { 0.0 } else { 1.0 - o as f64 / t as f64 })
        .collect()
}

/// Number of entries removed when pruning `ratio_pct` percent of `remaining`.
pub fn prune_count(remaining: usize, ratio_pct: f64) -> usize {
    (remaining as f64 * ratio_pct / 100.0).floor() as usize
}

/// Clears the `⌊r% · unmasked⌋` smallest-magnitude unmasked entries of
/// `values`, ties broken by ascending flat index. Returns the count removed.
pub fn prune_lowest(values: &[f32], keep: &mut [bool], ratio_pct: f64) -> Result<usize> {
    if !(ratio_pct > 0.0 && ratio_pct < 100.0) {
        return Err(Error::RatioOutOfRange(ratio_pct));
    }
    if values.len() != keep.len() {
        return Err(Error::Misaligned(format!(
            "{} values vs {} mask entries",
            values.len(),
            keep.len()
        )));
    }
    let mut live: Vec<usize> = (0..values.len()).filter(|&i| keep[i]).collect();
    let k = prune_count(live.len(), ratio_pct);
    if k == 0 {
        return Ok(0);
    }
    live.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    for &i in &live[..k] {
        keep[i] = false;
    }
    Ok(k)
}

/// Prunes module `j` at `ratio_pct`, scoring every prunable array of the
/// module jointly (layer-local threshold). Flat indices run over the
/// module's arrays in parameter order.
pub fn prune_module(params: &ParameterSet, mask: &mut MaskSet, module: usize, ratio_pct: f64) -> Result<usize> {
    mask.check_aligned(params)?;
    let count = params.module_count();
    if module >= count {
        return Err(Error::ModuleOutOfRange { index: module, count });
    }
    let mut values = Vec::new();
    let mut bits = Vec::new();
    let mut members = Vec::new();
    for (idx, (p, m)) in params.prunable().zip(mask.masks()).enumerate() {
        if p.module == module {
            values.extend_from_slice(p.tensor.data());
            bits.extend_from_slice(m.bits());
            members.push(idx);
        }
    }
    if members.is_empty() {
        return Ok(0);
    }
    let removed = prune_lowest(&values, &mut bits, ratio_pct)?;
    let mut offset = 0;
    for idx in members {
        let m = &mut mask.masks_mut()[idx];
        let n = m.len();
        m.bits_mut().copy_from_slice(&bits[offset..offset + n]);
        offset += n;
    }
    Ok(removed)
}

/// `θ ⊙ m`: writes exact zeros at masked positions.
pub fn apply_mask(params: &mut ParameterSet, mask: &MaskSet) -> Result<()> {
    mask.check_aligned(params)?;
    let mut masks = mask.masks().iter();
    for p in params.iter_mut() {
        if p.role != Role::PrunableWeight {
            continue;
        }
        let m = masks.next().expect("aligned");
        for (w, &keep) in p.tensor.data_mut().iter_mut().zip(m.bits()) {
            if !keep {
                *w = 0.0;
            }
        }
    }
    Ok(())
}

/// Restores `θ_τ ⊙ m` into `params` and clears the optimizer moments.
pub fn rewind(
    params: &mut ParameterSet,
    snapshot: &RewindSnapshot,
    mask: &MaskSet,
    optimizer: Option<&mut AdamState>,
) -> Result<()> {
    if !params.same_layout(&snapshot.params) {
        return Err(Error::Misaligned("rewind snapshot layout differs from parameters".into()));
    }
    mask.check_aligned(params)?;
    *params = snapshot.params.clone();
    apply_mask(params, mask)?;
    if let Some(opt) = optimizer {
        opt.reset();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Param;
    use crate::tensor::Tensor;

    fn toy(values: &[&[f32]], modules: &[usize]) -> ParameterSet {
        let params = values
            .iter()
            .zip(modules)
            .enumerate()
            .flat_map(|(i, (v, &m))| {
                [
                    Param {
                        module: m,
                        name: format!("w{i}"),
                        role: Role::PrunableWeight,
                        tensor: Tensor::new([v.len()], v.to_vec()).unwrap(),
                    },
                    Param {
                        module: m,
                        name: format!("b{i}"),
                        role: Role::Bias,
                        tensor: Tensor::full([1], 9.0),
                    },
                ]
            })
            .collect();
        ParameterSet::new(params).unwrap()
    }

    #[test]
    fn sparsity_counts() {
        let p = toy(&[&[1.0; 100]], &[0]);
        let mut m = MaskSet::full(&p);
        assert_eq!(sparsity(&m, &p).unwrap(), 0.0);
        for b in m.masks_mut()[0].bits_mut().iter_mut().skip(63) {
            *b = false;
        }
        assert!((sparsity(&m, &p).unwrap() - 0.37).abs() < 1e-15);
    }

    #[test]
    fn prunes_smallest_magnitude() {
        let mut keep = vec![true; 4];
        let n = prune_lowest(&[0.5, -0.1, 0.3, -0.9], &mut keep, 25.0).unwrap();
        assert_eq!(n, 1);
        assert_eq!(keep, [true, false, true, true]);
    }

    #[test]
    fn ties_break_by_index() {
        let mut keep = vec![true; 4];
        prune_lowest(&[0.2, -0.2, 0.2, 0.1], &mut keep, 50.0).unwrap();
        assert_eq!(keep, [false, true, true, false]);
    }

    #[test]
    fn repeated_halving_floor_trace() {
        let vals: Vec<f32> = (1..=8).map(|v| v as f32).collect();
        let mut keep = vec![true; 8];
        let mut remaining = vec![];
        for _ in 0..4 {
            prune_lowest(&vals, &mut keep, 50.0).unwrap();
            remaining.push(keep.iter().filter(|&&k| k).count());
        }
        assert_eq!(remaining, [4, 2, 1, 1]);
        // previously masked entries are never revived
        assert_eq!(keep, [false, false, false, false, false, false, false, true]);
    }

    #[test]
    fn ratio_bounds() {
        let mut keep = vec![true; 2];
        assert!(prune_lowest(&[1.0, 2.0], &mut keep, 0.0).is_err());
        assert!(prune_lowest(&[1.0, 2.0], &mut keep, 100.0).is_err());
    }

    #[test]
    fn graded_ratio_for_module_three() {
        let s = PruneSchedule::default();
        assert_eq!(s.ratio_pct(3), 23.0);
        assert_eq!(s.rewind_step(), 100);
    }

    #[test]
    fn schedule_validation() {
        let mut s = PruneSchedule::default();
        assert!(s.validate(8).is_ok());
        s.increment_pct = 12.0;
        assert!(s.validate(8).is_err());
        s = PruneSchedule { target_sparsity: 1.0, ..PruneSchedule::default() };
        assert!(s.validate(8).is_err());
        s = PruneSchedule { base_ratio_pct: 0.0, ..PruneSchedule::default() };
        assert!(s.validate(8).is_err());
    }

    #[test]
    fn prune_module_is_layer_local() {
        let p = toy(&[&[0.1, 0.2, 0.3, 0.4], &[0.01, 0.02, 0.03, 0.04]], &[0, 1]);
        let mut m = MaskSet::full(&p);
        prune_module(&p, &mut m, 0, 50.0).unwrap();
        assert_eq!(m.masks()[0].bits(), &[false, false, true, true]);
        assert_eq!(m.masks()[1].bits(), &[true; 4]);
        assert!(prune_module(&p, &mut m, 2, 50.0).is_err());
    }

    #[test]
    fn prune_module_scores_arrays_jointly() {
        let p = toy(&[&[0.1, 0.9], &[0.05, 0.8]], &[0, 0]);
        let mut m = MaskSet::full(&p);
        prune_module(&p, &mut m, 0, 50.0).unwrap();
        assert_eq!(m.masks()[0].bits(), &[false, true]);
        assert_eq!(m.masks()[1].bits(), &[false, true]);
    }

    #[test]
    fn apply_mask_examples() {
        let mut p = toy(&[&[1.0, -2.0, 3.0]], &[0]);
        let orig = p.clone();
        apply_mask(&mut p, &MaskSet::full(&orig)).unwrap();
        assert_eq!(p, orig);
        apply_mask(&mut p, &MaskSet::empty(&orig)).unwrap();
        assert_eq!(p.get("w0").unwrap().tensor.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(p.get("b0").unwrap().tensor.data(), &[9.0]);
        // idempotent
        let mut m = MaskSet::full(&orig);
        m.masks_mut()[0].bits_mut()[1] = false;
        let mut once = orig.clone();
        apply_mask(&mut once, &m).unwrap();
        let mut twice = once.clone();
        apply_mask(&mut twice, &m).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn rewind_restores_snapshot_under_mask() {
        let snap_params = toy(&[&[1.0, -2.0, 3.0]], &[0]);
        let snapshot = RewindSnapshot { params: snap_params.clone(), round: 1, step: 0 };
        let mut trained = toy(&[&[5.0, 6.0, 7.0]], &[0]);
        trained.get_mut("b0").unwrap().tensor.data_mut()[0] = -1.0;

        rewind(&mut trained, &snapshot, &MaskSet::full(&snap_params), None).unwrap();
        assert_eq!(trained, snap_params);

        let mut m = MaskSet::full(&snap_params);
        m.masks_mut()[0].bits_mut()[0] = false;
        rewind(&mut trained, &snapshot, &m, None).unwrap();
        let w = trained.get("w0").unwrap().tensor.data();
        assert_eq!(w[0].to_bits(), 0.0f32.to_bits());
        assert_eq!(w[1].to_bits(), (-2.0f32).to_bits());
        assert_eq!(trained.get("b0").unwrap().tensor.data(), &[9.0]);
    }

    #[test]
    fn misaligned_mask_is_rejected() {
        let a = toy(&[&[1.0, 2.0]], &[0]);
        let b = toy(&[&[1.0, 2.0, 3.0]], &[0]);
        let m = MaskSet::full(&b);
        assert!(sparsity(&m, &a).is_err());
        let mut pa = a.clone();
        assert!(apply_mask(&mut pa, &m).is_err());
    }
}

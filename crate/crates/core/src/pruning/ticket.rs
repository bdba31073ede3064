//! The train → prune → rewind loop.

use crate::error::{Error, Result};
use crate::params::ParameterSet;

use super::{module_sparsities, prune_module, rewind, sparsity, MaskSet, PruneSchedule, RewindSnapshot, SnapshotPolicy};

/// Result of one training segment.
#[derive(Debug, Clone)]
pub struct RoundTraining {
    /// Mean loss over the segment's last iterations (implementation-defined window).
    pub loss: f64,
    /// Parameters after `capture_at` updates, when requested.
    pub snapshot: Option<ParameterSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Evaluation {
    pub mmd2: f64,
    pub frechet: f64,
    pub flops_saving: f64,
}

/// Supplies the training and scoring steps of the search.
pub trait TicketTrainer {
    /// Trains `params` in place for one round under `mask`, starting from a
    /// freshly reset optimizer. Masked positions must stay exactly zero.
    /// With `capture_at = Some(τ)`, returns a copy of the parameters after τ
    /// updates (τ = 0 means before the first update).
    fn train(
        &mut self,
        round: usize,
        params: &mut ParameterSet,
        mask: &MaskSet,
        capture_at: Option<usize>,
    ) -> Result<RoundTraining>;

    fn evaluate(&mut self, round: usize, params: &ParameterSet, mask: &MaskSet) -> Result<Evaluation>;
}

/// One row of the sparsity/quality curve. Sparsities describe the mask the
/// round trained under (before that round's pruning).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub global_sparsity: f64,
    pub module_sparsity: Vec<f64>,
    pub loss: f64,
    pub evaluation: Evaluation,
    /// False for the closing retrain of the final ticket.
    pub pruned_after: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminationReason {
    /// Global sparsity reached `δ`; `overshoot = sparsity - δ`.
    TargetReached { overshoot: f64 },
    RoundBudget,
    /// A round removed no weights (every module's floor count was zero).
    Stalled,
}

#[derive(Debug, Clone)]
pub struct TicketOutcome {
    pub mask: MaskSet,
    pub snapshot: RewindSnapshot,
    /// Final ticket parameters: `θ_τ ⊙ m`, retrained when requested.
    pub params: ParameterSet,
    pub reports: Vec<RoundReport>,
    pub rounds: usize,
    pub termination: TerminationReason,
}

/// Iterative magnitude pruning with graded per-module ratios.
///
/// While global sparsity is below `δ` and the round budget lasts: train one
/// round, score it, prune module `j` at `(p + j q)%` of its remaining
/// weights, and rewind the survivors to `θ_τ`. With `retrain_final`, the
/// final ticket is trained once more from `θ_τ ⊙ m` and scored as an
/// extra report row. `on_round` runs after every completed round, so a
/// caller can persist the last good state before a later round fails.
pub fn find_winning_ticket<T, F>(
    trainer: &mut T,
    initial: ParameterSet,
    schedule: &PruneSchedule,
    retrain_final: bool,
    mut on_round: F,
) -> Result<TicketOutcome>
where
    T: TicketTrainer + ?Sized,
    F: FnMut(&RoundReport, &MaskSet, &RewindSnapshot) -> Result<()>,
{
    let modules = initial.module_count();
    schedule.validate(modules)?;
    let tau = schedule.rewind_step();
    let mut params = initial;
    let mut mask = MaskSet::full(&params);
    let mut snapshot: Option<RewindSnapshot> = None;
    let mut reports = Vec::new();
    let mut round = 0;

    let termination = loop {
        let global = sparsity(&mask, &params)?;
        if global >= schedule.target_sparsity {
            break TerminationReason::TargetReached {
                overshoot: global - schedule.target_sparsity,
            };
        }
        if round == schedule.max_rounds {
            break TerminationReason::RoundBudget;
        }
        round += 1;

        let capture = schedule.snapshot_policy == SnapshotPolicy::EveryRound || snapshot.is_none();
        let trained = trainer.train(round, &mut params, &mask, capture.then_some(tau))?;
        if !trained.loss.is_finite() {
            return Err(Error::NonFiniteLoss { round, iteration: schedule.iterations_per_round });
        }
        if let Some(p) = trained.snapshot {
            snapshot = Some(RewindSnapshot { params: p, round, step: tau });
        }
        let snap = snapshot
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("trainer did not return the requested rewind snapshot".into()))?;
        let evaluation = trainer.evaluate(round, &params, &mask)?;
        let report = RoundReport {
            round,
            global_sparsity: global,
            module_sparsity: module_sparsities(&mask, modules),
            loss: trained.loss,
            evaluation,
            pruned_after: true,
        };

        let mut removed = 0;
        for j in 0..modules {
            removed += prune_module(&params, &mut mask, j, schedule.ratio_pct(j))?;
        }
        rewind(&mut params, snap, &mask, None)?;
        on_round(&report, &mask, snap)?;
        reports.push(report);
        if removed == 0 {
            break TerminationReason::Stalled;
        }
    };

    let snapshot = snapshot.expect("at least one round ran because δ > 0");
    if retrain_final {
        let global = sparsity(&mask, &params)?;
        let trained = trainer.train(round + 1, &mut params, &mask, None)?;
        if !trained.loss.is_finite() {
            return Err(Error::NonFiniteLoss { round: round + 1, iteration: schedule.iterations_per_round });
        }
        let evaluation = trainer.evaluate(round + 1, &params, &mask)?;
        reports.push(RoundReport {
            round: round + 1,
            global_sparsity: global,
            module_sparsity: module_sparsities(&mask, modules),
            loss: trained.loss,
            evaluation,
            pruned_after: false,
        });
    }

    Ok(TicketOutcome {
        mask,
        snapshot,
        params,
        reports,
        rounds: round,
        termination,
    })
}

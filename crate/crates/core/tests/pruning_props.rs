use proptest::prelude::*;

use ddpm_ticket::params::{Param, ParameterSet, Role};
use ddpm_ticket::pruning::{
    apply_mask, find_winning_ticket, module_sparsities, prune_lowest, prune_module, rewind, sparsity, Evaluation,
    MaskSet, PruneSchedule, RewindSnapshot, RoundTraining, SnapshotPolicy, TerminationReason, TicketTrainer,
};
use ddpm_ticket::unet::{UNet, UNetConfig};
use ddpm_ticket::{Result, Tensor};

/// One prunable array per module plus an unmasked bias.
fn layered(values: &[Vec<f32>]) -> ParameterSet {
    let mut params = Vec::new();
    for (j, v) in values.iter().enumerate() {
        params.push(Param {
            module: j,
            name: format!("m{j}.weight"),
            role: Role::PrunableWeight,
            tensor: Tensor::new([v.len()], v.clone()).unwrap(),
        });
        params.push(Param {
            module: j,
            name: format!("m{j}.bias"),
            role: Role::Bias,
            tensor: Tensor::full([2], 0.5),
        });
    }
    ParameterSet::new(params).unwrap()
}

/// Values drawn from a small grid so that magnitude ties are common.
fn tied_values(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec((-4i8..=4).prop_map(|k| k as f32 * 0.25), n)
}

proptest! {
    #[test]
    fn prune_lowest_removes_the_floor_count_of_smallest(
        values in tied_values(1..200),
        keep_seed in prop::collection::vec(any::<bool>(), 200),
        ratio in 1.0f64..99.0,
    ) {
        let before: Vec<bool> = values.iter().enumerate().map(|(i, _)| keep_seed[i] || i % 3 == 0).collect();
        let mut keep = before.clone();
        let removed = prune_lowest(&values, &mut keep, ratio).unwrap();
        let live = before.iter().filter(|&&b| b).count();
        prop_assert_eq!(removed, (live as f64 * ratio / 100.0).floor() as usize);
        prop_assert_eq!(keep.iter().filter(|&&b| b).count(), live - removed);
        // monotone: nothing revived
        prop_assert!(keep.iter().zip(&before).all(|(&k, &b)| b || !k));
        // every removed entry precedes every survivor in (|v|, index) order
        let dropped: Vec<usize> = (0..values.len()).filter(|&i| before[i] && !keep[i]).collect();
        let kept: Vec<usize> = (0..values.len()).filter(|&i| keep[i]).collect();
        for &d in &dropped {
            for &k in &kept {
                let (vd, vk) = (values[d].abs(), values[k].abs());
                prop_assert!(vd < vk || (vd == vk && d < k), "dropped {} ({}) kept {} ({})", d, vd, k, vk);
            }
        }
    }

    #[test]
    fn repeated_pruning_only_shrinks_masks(values in tied_values(10..120), rounds in 1usize..8, ratio in 5.0f64..60.0) {
        let params = layered(&[values.clone(), values.iter().rev().cloned().collect()]);
        let mut mask = MaskSet::full(&params);
        for _ in 0..rounds {
            let prev = mask.clone();
            for j in 0..2 {
                prune_module(&params, &mut mask, j, ratio).unwrap();
            }
            prop_assert!(prev.is_superset_of(&mask));
        }
    }

    #[test]
    fn apply_mask_is_idempotent_and_zeroes_only_masked(values in prop::collection::vec(-1.0f32..1.0, 1..100), ratio in 1.0f64..99.0) {
        let mut params = layered(&[values]);
        let mut mask = MaskSet::full(&params);
        prune_module(&params, &mut mask, 0, ratio).unwrap();
        let original = params.clone();
        apply_mask(&mut params, &mask).unwrap();
        let once = params.clone();
        apply_mask(&mut params, &mask).unwrap();
        prop_assert_eq!(&once, &params);
        let bits = mask.masks()[0].bits();
        let (w0, w1) = (&original.as_slice()[0].tensor, &params.as_slice()[0].tensor);
        for (i, &keep) in bits.iter().enumerate() {
            let expect = if keep { w0.data()[i] } else { 0.0 };
            prop_assert_eq!(w1.data()[i].to_bits(), expect.to_bits());
        }
        prop_assert_eq!(&original.as_slice()[1], &params.as_slice()[1]);
    }

    #[test]
    fn graded_ratios_order_module_sparsity(
        n in 20usize..300,
        p in 5.0f64..40.0,
        q in 0.1f64..5.0,
        rounds in 1usize..12,
    ) {
        let modules = 5;
        let vals: Vec<Vec<f32>> = (0..modules).map(|j| (0..n).map(|i| ((i * 37 + j * 11) % 101) as f32 + 1.0).collect()).collect();
        let params = layered(&vals);
        let mut mask = MaskSet::full(&params);
        for _ in 0..rounds {
            for j in 0..modules {
                prune_module(&params, &mut mask, j, p + j as f64 * q).unwrap();
            }
        }
        let s = module_sparsities(&mask, modules);
        prop_assert!(s.windows(2).all(|w| w[0] <= w[1]), "{:?}", s);
    }

    #[test]
    fn rewind_restores_snapshot_bits_exactly(
        a in prop::collection::vec(-2.0f32..2.0, 64),
        b in prop::collection::vec(-2.0f32..2.0, 64),
        ratio in 1.0f64..99.0,
    ) {
        let mut params = layered(&[a]);
        let snap = RewindSnapshot { params: layered(std::slice::from_ref(&b)), round: 1, step: 3 };
        let mut mask = MaskSet::full(&params);
        prune_module(&params, &mut mask, 0, ratio).unwrap();
        rewind(&mut params, &snap, &mask, None).unwrap();
        let w = params.as_slice()[0].tensor.data();
        for (i, &keep) in mask.masks()[0].bits().iter().enumerate() {
            let expect = if keep { b[i] } else { 0.0 };
            prop_assert_eq!(w[i].to_bits(), expect.to_bits());
        }
        prop_assert_eq!(&params.as_slice()[1], &snap.params.as_slice()[1]);
    }
}

/// Remaining counts after `rounds` of `rem -= ⌊rem (p + j q) / 100⌋` in
/// integer arithmetic.
fn integer_oracle(sizes: &[usize], p: usize, q: usize, rounds: usize) -> Vec<usize> {
    sizes
        .iter()
        .enumerate()
        .map(|(j, &n)| (0..rounds).fold(n, |rem, _| rem - rem * (p + j * q) / 100))
        .collect()
}

#[test]
fn real_network_masks_follow_the_count_recurrence() {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = net.init(0);
    let sizes = [2192, 2816, 2816, 5632, 10240, 7424, 2816, 144];
    let mut mask = MaskSet::full(&params);
    for round in 1..=25 {
        for j in 0..8 {
            prune_module(&params, &mut mask, j, 20.0 + j as f64).unwrap();
        }
        let expect = integer_oracle(&sizes, 20, 1, round);
        let got: Vec<usize> = (0..8)
            .map(|j| mask.masks().iter().filter(|m| m.module == j).map(|m| m.ones()).sum())
            .collect();
        assert_eq!(got, expect, "round {round}");
    }
    assert_eq!(integer_oracle(&sizes, 20, 1, 25), [11, 10, 8, 11, 13, 7, 3, 3]);
    let s = sparsity(&mask, &params).unwrap();
    assert!((s - (1.0 - 66.0 / 34080.0)).abs() < 1e-15);
}

/// Stand-in trainer that nudges every weight and checks on entry that it
/// was handed exactly `θ_τ ⊙ m`.
struct Nudger {
    tau_snapshot: Option<ParameterSet>,
    rounds_seen: Vec<usize>,
    captures: Vec<Option<usize>>,
}

impl TicketTrainer for Nudger {
    fn train(&mut self, round: usize, params: &mut ParameterSet, mask: &MaskSet, capture_at: Option<usize>) -> Result<RoundTraining> {
        if let Some(snap) = &self.tau_snapshot {
            let mut expect = snap.clone();
            apply_mask(&mut expect, mask).unwrap();
            assert_eq!(*params, expect, "round {round} did not start from the rewound snapshot");
        }
        self.rounds_seen.push(round);
        self.captures.push(capture_at);
        let mut snapshot = None;
        for it in 0..10 {
            if capture_at == Some(it) {
                snapshot = Some(params.clone());
            }
            let mut masks = mask.masks().iter();
            for p in params.iter_mut() {
                let bits = (p.role == Role::PrunableWeight).then(|| masks.next().unwrap().bits());
                for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                    if bits.is_none_or(|b| b[i]) {
                        *w += 0.01 * ((i * 7 + it + round) % 5) as f32 - 0.02;
                    }
                }
            }
        }
        if snapshot.is_some() {
            self.tau_snapshot = snapshot.clone();
        }
        Ok(RoundTraining { loss: 1.0 / round as f64, snapshot })
    }

    fn evaluate(&mut self, round: usize, _params: &ParameterSet, _mask: &MaskSet) -> Result<Evaluation> {
        Ok(Evaluation { mmd2: round as f64, frechet: 0.0, flops_saving: 0.0 })
    }
}

fn nudger() -> Nudger {
    Nudger { tau_snapshot: None, rounds_seen: Vec::new(), captures: Vec::new() }
}

fn toy_schedule(delta: f64, rounds: usize) -> PruneSchedule {
    PruneSchedule {
        base_ratio_pct: 20.0,
        increment_pct: 1.0,
        target_sparsity: delta,
        rewind_fraction: 0.3,
        iterations_per_round: 10,
        max_rounds: rounds,
        snapshot_policy: SnapshotPolicy::FirstRound,
    }
}

fn toy_params() -> ParameterSet {
    layered(&(0..3).map(|j| (0..50).map(|i| ((i * 13 + j * 5) % 17) as f32 - 8.0).collect()).collect::<Vec<_>>())
}

#[test]
fn loop_rewinds_every_round_and_captures_once() {
    let mut t = nudger();
    let out = find_winning_ticket(&mut t, toy_params(), &toy_schedule(0.99, 6), true, |_, _, _| Ok(())).unwrap();
    assert_eq!(out.rounds, 6);
    assert_eq!(out.termination, TerminationReason::RoundBudget);
    assert_eq!(t.rounds_seen, [1, 2, 3, 4, 5, 6, 7]);
    assert_eq!(t.captures, [Some(3), None, None, None, None, None, None]);
    assert_eq!(out.snapshot.step, 3);
    assert_eq!(out.reports.len(), 7);
    assert!(out.reports[..6].iter().all(|r| r.pruned_after));
    assert!(!out.reports[6].pruned_after);
    assert_eq!(out.reports[0].global_sparsity, 0.0);
    assert!(out.reports[6].global_sparsity > out.reports[5].global_sparsity);
    let g: Vec<f64> = out.reports[..6].iter().map(|r| r.global_sparsity).collect();
    assert!(g.windows(2).all(|w| w[0] < w[1]), "{g:?}");
}

#[test]
fn loop_stops_at_the_target_and_reports_overshoot() {
    let mut t = nudger();
    let out = find_winning_ticket(&mut t, toy_params(), &toy_schedule(0.5, 50), false, |_, _, _| Ok(())).unwrap();
    let TerminationReason::TargetReached { overshoot } = out.termination else {
        panic!("{:?}", out.termination);
    };
    let s = sparsity(&out.mask, &out.params).unwrap();
    assert!(overshoot >= 0.0 && (s - 0.5 - overshoot).abs() < 1e-15);
    assert!(out.reports.last().unwrap().global_sparsity < 0.5);
    assert_eq!(out.reports.len(), out.rounds);
}

#[test]
fn every_round_snapshot_policy_recaptures() {
    let mut t = nudger();
    let mut s = toy_schedule(0.99, 3);
    s.snapshot_policy = SnapshotPolicy::EveryRound;
    find_winning_ticket(&mut t, toy_params(), &s, false, |_, _, _| Ok(())).unwrap();
    assert_eq!(t.captures, [Some(3), Some(3), Some(3)]);
}

#[test]
fn callback_failure_aborts_the_search() {
    let mut t = nudger();
    let mut calls = 0;
    let r = find_winning_ticket(&mut t, toy_params(), &toy_schedule(0.99, 5), false, |rep, _, _| {
        calls += 1;
        if rep.round == 2 {
            Err(ddpm_ticket::Error::InvalidConfig("disk full".into()))
        } else {
            Ok(())
        }
    });
    assert!(r.is_err());
    assert_eq!(calls, 2);
}

#[test]
fn tiny_modules_stall_instead_of_looping() {
    let params = layered(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    let mut t = nudger();
    let out = find_winning_ticket(&mut t, params, &toy_schedule(0.9, 10), false, |_, _, _| Ok(())).unwrap();
    assert_eq!(out.termination, TerminationReason::Stalled);
    assert_eq!(out.rounds, 1);
}

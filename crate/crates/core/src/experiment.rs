//! Run orchestration: training rounds, ticket search, sampling, similarity,
//! FLOPs and summary reports. Every artifact lands under one run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamState};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{pixel_to_byte, BatchStream, Dataset};
use crate::diffusion::{sample, training_loss, NoiseSchedule, SampleOptions, Samples};
use crate::error::{Error, Result};
use crate::metrics::{count_flops, count_flops_masked, quality, FlopsReport};
use crate::params::ParameterSet;
use crate::pruning::{
    find_winning_ticket, Evaluation, MaskSet, RoundReport, RoundTraining, TerminationReason, TicketOutcome,
    TicketTrainer,
};
use crate::rng::{self, RngState, Stream};
use crate::similarity::{profile, Bandwidth, SimilarityProfile};
use crate::tensor::Tensor;
use crate::unet::UNet;

pub const CURVE_CSV: &str = "curve.csv";
pub const TICKET_CKPT: &str = "ticket.ckpt";
pub const LAST_GOOD_CKPT: &str = "last_good.ckpt";
pub const DENSE_CKPT: &str = "dense.ckpt";
pub const TRAIN_LOSS_CSV: &str = "train_loss.csv";
pub const CONFIG_JSON: &str = "config.json";
pub const REPORT_TXT: &str = "report.txt";

/// Trains and scores the diffusion model for the ticket search.
pub struct DdpmTrainer<'a> {
    pub model: UNet,
    pub schedule: NoiseSchedule,
    config: ExperimentConfig,
    data: &'a Dataset,
    reference: Tensor<f32>,
    batches: BatchStream,
    noise: ChaCha8Rng,
    /// Per-iteration losses of the most recent `train` call.
    pub losses: Vec<f32>,
    /// Optimizer state at the end of the most recent `train` call.
    pub last_optimizer: Option<AdamState>,
    log: Box<dyn FnMut(&str) + 'a>,
}

impl<'a> DdpmTrainer<'a> {
    pub fn new(config: &ExperimentConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let model = UNet::new(config.model)?;
        let (c, h, w) = data.image_shape();
        let m = &config.model;
        if (c, h, w) != (m.image_channels, m.image_size, m.image_size) {
            return Err(Error::InvalidConfig(format!(
                "dataset images are {c}x{h}x{w}, model expects {}x{}x{}",
                m.image_channels, m.image_size, m.image_size
            )));
        }
        let n_ref = config.metrics.reference.min(data.len());
        if n_ref < 2 {
            return Err(Error::InvalidConfig("dataset too small for a reference set".into()));
        }
        let reference = data.batch(&(0..n_ref).collect::<Vec<_>>())?;
        Ok(Self {
            schedule: config.diffusion.schedule()?,
            model,
            config: config.clone(),
            data,
            reference,
            batches: BatchStream::new(data.len(), config.training.batch_size, config.seed)?,
            noise: rng::stream(config.seed, Stream::DiffusionNoise),
            losses: Vec::new(),
            last_optimizer: None,
            log: Box::new(|_| {}),
        })
    }

    pub fn with_log(mut self, log: impl FnMut(&str) + 'a) -> Self {
        self.log = Box::new(log);
        self
    }

    pub fn rng_states(&self) -> Vec<RngState> {
        vec![
            RngState::capture("diffusion-noise", &self.noise),
            RngState::capture("data-shuffle", self.batches.rng()),
        ]
    }
}

impl TicketTrainer for DdpmTrainer<'_> {
    fn train(
        &mut self,
        round: usize,
        params: &mut ParameterSet,
        mask: &MaskSet,
        capture_at: Option<usize>,
    ) -> Result<RoundTraining> {
        let iters = self.config.prune.iterations_per_round;
        if capture_at.is_some_and(|t| t > iters) {
            return Err(Error::InvalidConfig(format!("rewind step beyond {iters} iterations")));
        }
        let window = self.config.training.loss_window.min(iters);
        let mut adam = AdamState::new(params, self.config.training.adam);
        let mut snapshot = None;
        let mut tail = 0.0f64;
        let decay = self.config.training.ema_decay as f32;
        let mut ema = (decay > 0.0).then(|| params.clone());
        self.losses.clear();
        for it in 0..iters {
            if capture_at == Some(it) {
                snapshot = Some(params.clone());
            }
            let x0 = self.data.batch(&self.batches.next_indices())?;
            let out = training_loss(&self.model, params, mask, &x0, &self.schedule, &mut self.noise)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { round, iteration: it + 1 });
            }
            adam_step(params, &out.grads, &mut adam)?;
            if let Some(ema) = ema.as_mut() {
                let d = decay.min((1 + it) as f32 / (10 + it) as f32);
                for (e, p) in ema.iter_mut().zip(params.iter()) {
                    for (a, &b) in e.tensor.data_mut().iter_mut().zip(p.tensor.data()) {
                        *a = d * *a + (1.0 - d) * b;
                    }
                }
            }
            self.losses.push(out.loss);
            if it >= iters - window {
                tail += out.loss as f64;
            }
            if (it + 1) % 500 == 0 {
                (self.log)(&format!("round {round}: iteration {}/{iters} loss {:.4}", it + 1, out.loss));
            }
        }
        if capture_at == Some(iters) {
            snapshot = Some(params.clone());
        }
        // masked entries are zero in both, so the average keeps them zero
        if let Some(ema) = ema {
            *params = ema;
        }
        self.last_optimizer = Some(adam);
        Ok(RoundTraining {
            loss: tail / window as f64,
            snapshot,
        })
    }

    fn evaluate(&mut self, round: usize, params: &ParameterSet, mask: &MaskSet) -> Result<Evaluation> {
        let m = &self.config.metrics;
        let samples = sample(
            &self.model,
            params,
            mask,
            &self.schedule,
            m.samples,
            self.config.seed,
            SampleOptions {
                batch_size: m.sample_batch,
                trajectory_every: 0,
            },
        )?;
        let q = quality(&samples.images, &self.reference, self.config.seed)?;
        let flops = count_flops_masked(&self.model, mask)?;
        (self.log)(&format!(
            "round {round}: mmd2 {:.5} frechet {:.4} flops saving {:.4}",
            q.mmd2, q.frechet, flops.saving
        ));
        Ok(Evaluation {
            mmd2: q.mmd2,
            frechet: q.frechet,
            flops_saving: flops.saving,
        })
    }
}

/// Per-round curve: `round,global_sparsity,sparsity_m0..,loss,mmd2,frechet,flops_saving`.
pub fn curve_csv(reports: &[RoundReport], modules: usize) -> String {
    let mut out = String::from("round,global_sparsity");
    for j in 0..modules {
        let _ = write!(out, ",sparsity_m{j}");
    }
    out.push_str(",loss,mmd2,frechet,flops_saving\n");
    for r in reports {
        let _ = write!(out, "{},{}", r.round, r.global_sparsity);
        for s in &r.module_sparsity {
            let _ = write!(out, ",{s}");
        }
        let e = &r.evaluation;
        let _ = writeln!(out, ",{},{},{},{}", r.loss, e.mmd2, e.frechet, e.flops_saving);
    }
    out
}

fn seeds(config: &ExperimentConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([("master".to_string(), config.seed)])
}

fn prepare_dir(out: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_JSON), config.to_json())?;
    Ok(())
}

/// Dense training for one round's worth of iterations.
pub fn run_train(config: &ExperimentConfig, out: &Path, log: impl FnMut(&str)) -> Result<Checkpoint> {
    prepare_dir(out, config)?;
    let data = config.dataset.load(config.seed)?;
    let mut trainer = DdpmTrainer::new(config, &data)?.with_log(log);
    let mut params = trainer.model.init(config.seed);
    let mask = MaskSet::full(&params);
    trainer.train(1, &mut params, &mask, None)?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in trainer.losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", i + 1, l);
    }
    fs::write(out.join(TRAIN_LOSS_CSV), csv)?;
    let ckpt = Checkpoint {
        config_hash: config.hash(),
        round: 1,
        step: config.prune.iterations_per_round,
        seeds: seeds(config),
        model: config.model,
        diffusion: config.diffusion,
        params,
        mask: None,
        snapshot: None,
        adam: trainer.last_optimizer.take(),
        rng: trainer.rng_states(),
    };
    ckpt.save(&out.join(DENSE_CKPT))?;
    Ok(ckpt)
}

#[derive(Debug, Clone)]
pub struct TicketRun {
    pub outcome: TicketOutcome,
    pub curve: String,
    pub modules: usize,
}

/// The full ticket search. Writes the curve after every round together
/// with `last_good.ckpt`, and `ticket.ckpt` at the end.
pub fn run_ticket(config: &ExperimentConfig, out: &Path, mut log: impl FnMut(&str)) -> Result<TicketRun> {
    prepare_dir(out, config)?;
    let data = config.dataset.load(config.seed)?;
    let mut trainer = DdpmTrainer::new(config, &data)?.with_log(&mut log);
    let modules = trainer.model.module_count();
    let initial = trainer.model.init(config.seed);
    let base = Checkpoint {
        config_hash: config.hash(),
        round: 0,
        step: 0,
        seeds: seeds(config),
        model: config.model,
        diffusion: config.diffusion,
        params: initial.clone(),
        mask: None,
        snapshot: None,
        adam: None,
        rng: Vec::new(),
    };
    let mut rows: Vec<RoundReport> = Vec::new();
    let outcome = find_winning_ticket(
        &mut trainer,
        initial,
        &config.prune,
        config.training.retrain_final,
        |report, mask, snap| {
            rows.push(report.clone());
            fs::write(out.join(CURVE_CSV), curve_csv(&rows, modules))?;
            let mut params = snap.params.clone();
            crate::pruning::apply_mask(&mut params, mask)?;
            Checkpoint {
                round: report.round,
                step: snap.step,
                params,
                mask: Some(mask.clone()),
                snapshot: Some(snap.clone()),
                ..base.clone()
            }
            .save(&out.join(LAST_GOOD_CKPT))
        },
    )?;
    let curve = curve_csv(&outcome.reports, modules);
    fs::write(out.join(CURVE_CSV), &curve)?;
    let rng_states = trainer.rng_states();
    drop(trainer);
    Checkpoint {
        round: outcome.rounds,
        step: config.prune.iterations_per_round,
        params: outcome.params.clone(),
        mask: Some(outcome.mask.clone()),
        snapshot: Some(outcome.snapshot.clone()),
        rng: rng_states,
        ..base
    }
    .save(&out.join(TICKET_CKPT))?;
    let reason = match outcome.termination {
        TerminationReason::TargetReached { overshoot } => format!("target sparsity reached (overshoot {overshoot:.4})"),
        TerminationReason::RoundBudget => "round budget exhausted".to_string(),
        TerminationReason::Stalled => "stalled: a round removed no weights".to_string(),
    };
    log(&format!("ticket search finished after {} rounds: {reason}", outcome.rounds));
    Ok(TicketRun { outcome, curve, modules })
}

/// Writes images `[N, C, H, W]` in `[-1, 1]` as a binary PGM (C = 1) or
/// PPM (C = 3) grid with a one-pixel mid-gray gutter.
pub fn image_grid(images: &Tensor<f32>, columns: usize) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || !(s[1] == 1 || s[1] == 3) {
        return Err(Error::shape("image_grid", format!("need [N, 1|3, H, W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = columns.clamp(1, n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut pix = vec![128u8; gw * gh * c];
    for i in 0..n {
        let img = images.item(i);
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pix[((oy + y) * gw + ox + x) * c + ch] = pixel_to_byte(img[ch * h * w + y * w + x]);
                }
            }
        }
    }
    let mut out = format!("{}\n{gw} {gh}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    out.extend_from_slice(&pix);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    pub samples: Samples,
    pub grid: PathBuf,
    pub trajectory: Option<PathBuf>,
}

/// Samples `n` images from a checkpoint (under its mask, if any).
pub fn run_sample(
    checkpoint: &Path,
    n: usize,
    seed: u64,
    trajectory_every: usize,
    out: &Path,
) -> Result<SampleRun> {
    fs::create_dir_all(out)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = UNet::new(ckpt.model)?;
    let schedule = ckpt.diffusion.schedule()?;
    let samples = sample(
        &model,
        &ckpt.params,
        &ckpt.mask_or_full(),
        &schedule,
        n,
        seed,
        SampleOptions {
            batch_size: 64,
            trajectory_every,
        },
    )?;
    let ext = if ckpt.model.image_channels == 1 { "pgm" } else { "ppm" };
    let grid = out.join(format!("samples.{ext}"));
    let cols = (n as f64).sqrt().ceil() as usize;
    fs::write(&grid, image_grid(&samples.images, cols)?)?;
    let trajectory = if samples.trajectory.is_empty() {
        None
    } else {
        let frames: Vec<f32> = samples.trajectory.iter().flat_map(|(_, x)| x.data().iter().map(|v| v.clamp(-1.0, 1.0))).collect();
        let mut shape = samples.trajectory[0].1.shape().to_vec();
        shape[0] = samples.trajectory.len();
        let strip = Tensor::new(shape, frames)?;
        let path = out.join(format!("trajectory.{ext}"));
        fs::write(&path, image_grid(&strip, samples.trajectory.len())?)?;
        Some(path)
    };
    Ok(SampleRun {
        samples,
        grid,
        trajectory,
    })
}

/// Per-module CKA between two checkpoints; writes `cka.csv` into `out`.
pub fn run_cka(a: &Path, b: &Path, out: &Path) -> Result<SimilarityProfile> {
    let ca = Checkpoint::load(a)?;
    let cb = Checkpoint::load(b)?;
    if ca.model != cb.model {
        return Err(Error::Misaligned(format!(
            "checkpoints use different models: {:?} vs {:?}",
            ca.model, cb.model
        )));
    }
    let model = UNet::new(ca.model)?;
    let p = profile(
        &model,
        (&ca.params, &ca.mask_or_full()),
        (&cb.params, &cb.mask_or_full()),
        Bandwidth::Median,
    )?;
    fs::create_dir_all(out)?;
    fs::write(out.join("cka.csv"), p.to_csv())?;
    Ok(p)
}

/// FLOPs of the configured model, dense or under a checkpoint's mask.
pub fn run_flops(config: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<FlopsReport> {
    let report = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            count_flops_masked(&UNet::new(ckpt.model)?, &ckpt.mask_or_full())?
        }
        None => {
            let model = UNet::new(config.model)?;
            count_flops(&model, &vec![1.0; model.module_count()])?
        }
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("flops.csv"), report.to_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub round: usize,
    pub global_sparsity: f64,
    pub module_sparsity: Vec<f64>,
    pub loss: f64,
    pub mmd2: f64,
    pub frechet: f64,
    pub flops_saving: f64,
}

pub fn parse_curve(text: &str) -> Result<Vec<CurveRow>> {
    let bad = |m: String| Error::InvalidConfig(format!("{CURVE_CSV}: {m}"));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
    if header.len() < 6 || header[0] != "round" || header[header.len() - 1] != "flops_saving" {
        return Err(bad("unexpected header".into()));
    }
    let modules = header.len() - 6;
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(bad(format!("line {} has {} fields", i + 2, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("line {}: bad number `{s}`", i + 2)));
            Ok(CurveRow {
                round: f[0].parse().map_err(|_| bad(format!("line {}: bad round", i + 2)))?,
                global_sparsity: num(f[1])?,
                module_sparsity: f[2..2 + modules].iter().map(|s| num(s)).collect::<Result<_>>()?,
                loss: num(f[2 + modules])?,
                mmd2: num(f[3 + modules])?,
                frechet: num(f[4 + modules])?,
                flops_saving: num(f[5 + modules])?,
            })
        })
        .collect()
}

/// Summary table of a finished run; written to `report.txt`.
pub fn run_report(run_dir: &Path) -> Result<String> {
    let rows = parse_curve(&fs::read_to_string(run_dir.join(CURVE_CSV))?)?;
    let first = rows.first().ok_or_else(|| Error::InvalidConfig(format!("{CURVE_CSV} has no rows")))?;
    let mut out = String::new();
    let _ = writeln!(out, "run: {}", run_dir.display());
    let _ = writeln!(out, "{:>5}  {:>8}  {:>10}  {:>10}  {:>10}  {:>8}", "round", "sparsity", "loss", "mmd2", "frechet", "flops");
    for r in &rows {
        let _ = writeln!(
            out,
            "{:>5}  {:>8.4}  {:>10.5}  {:>10.6}  {:>10.4}  {:>8.4}",
            r.round, r.global_sparsity, r.loss, r.mmd2, r.frechet, r.flops_saving
        );
    }
    let last = rows.last().expect("non-empty");
    let _ = writeln!(out, "dense baseline (round {}): mmd2 {:.6}", first.round, first.mmd2);
    let _ = writeln!(
        out,
        "final (round {}): sparsity {:.4}, mmd2 {:.6} ({:.3}x baseline), flops saving {:.4}",
        last.round,
        last.global_sparsity,
        last.mmd2,
        last.mmd2 / first.mmd2,
        last.flops_saving
    );
    let modules: Vec<String> = last.module_sparsity.iter().map(|s| format!("{s:.4}")).collect();
    let _ = writeln!(out, "final module sparsity: {}", modules.join(" "));
    fs::write(run_dir.join(REPORT_TXT), &out)?;
    Ok(out)
}

#![allow(dead_code)]

use std::path::Path;

use ddpm_ticket::config::{ExperimentConfig, MetricsConfig, TrainingConfig};
use ddpm_ticket::adam::AdamConfig;
use ddpm_ticket::data::{DatasetSpec, SyntheticKind};
use ddpm_ticket::diffusion::DiffusionConfig;
use ddpm_ticket::pruning::{PruneSchedule, SnapshotPolicy};
use ddpm_ticket::rng::{self, Stream};
use ddpm_ticket::unet::UNetConfig;
use ddpm_ticket::Tensor;

/// 8x8 U-Net with 4 base channels; same topology (J = 8) as the default.
pub fn small_net() -> UNetConfig {
    UNetConfig {
        image_channels: 1,
        image_size: 8,
        base_channels: 4,
        levels: 2,
        time_embed_dim: 8,
    }
}

/// A ticket search that finishes in about a second.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        seed: 3,
        model: small_net(),
        diffusion: DiffusionConfig {
            timesteps: 10,
            beta_start: 0.01,
            beta_end: 0.2,
        },
        training: TrainingConfig {
            batch_size: 8,
            adam: AdamConfig::default(),
            loss_window: 5,
            retrain_final: true,
            ema_decay: 0.9,
        },
        prune: PruneSchedule {
            base_ratio_pct: 20.0,
            increment_pct: 1.0,
            target_sparsity: 0.9,
            rewind_fraction: 0.05,
            iterations_per_round: 20,
            max_rounds: 3,
            snapshot_policy: SnapshotPolicy::FirstRound,
        },
        dataset: DatasetSpec::Synthetic {
            kind: SyntheticKind::Bars,
            size: 8,
            count: 64,
        },
        metrics: MetricsConfig {
            samples: 16,
            reference: 16,
            sample_batch: 16,
            trajectory_every: 2,
        },
        output_dir: out.to_path_buf(),
    }
}

/// Standard-normal tensor from the sampling stream of `seed`.
pub fn normal_f64(shape: &[usize], seed: u64) -> Tensor<f64> {
    normal_f32(shape, seed).cast()
}

pub fn normal_f32(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut t = Tensor::zeros(shape.to_vec());
    rng::fill_normal(&mut rng::stream(seed, Stream::Sampling), t.data_mut());
    t
}

/// Hand-tabulated FLOPs of the default network, one image:
/// conv 2·HW·Cout·Cin·9 + HW·Cout bias; time projection 2·32·Cout + Cout;
/// module 0 also carries the two 32x32 time-MLP layers (2·(2·32·32 + 32)).
pub const SPREADSHEET: [(&str, u64); 8] = [
    ("conv_in", 77_824 + 4_160),
    ("down.0.0", 1_183_744 + 1_040),
    ("down.0.1", 1_183_744 + 1_040),
    ("down.1.0", 591_872 + 2_080),
    ("down.1.1", 1_181_696 + 2_080),
    ("up.0.0", 3_543_040 + 1_040),
    ("up.0.1", 1_183_744 + 1_040),
    ("conv_out", 73_984),
];
/// Time-MLP SiLU (64), pooled 16x8x8 (1024), upsampled 32x16x16 (8192), and
/// per inner conv a time-bias add plus a SiLU over its output.
pub const SPREADSHEET_OTHER: u64 = 64 + 1_024 + 8_192 + 2 * (4 * 4_096 + 2 * 2_048);

use ddpm_ticket::tape::{Tape, Var};

/// A differentiable graph over leaf inputs.
pub type GraphFn = dyn Fn(&mut Tape<f64>, &[Var]) -> ddpm_ticket::Result<Var>;
pub type Graph<'a> = &'a GraphFn;

/// `(primitive name, leaf inputs, graph)`.
pub type Instance = (&'static str, Vec<Tensor<f64>>, Box<GraphFn>);

/// Scalar objective: the graph output itself when it is a scalar, else its
/// MSE against a fixed random target.
fn objective(tape: &mut Tape<f64>, out: Var, target_seed: u64) -> ddpm_ticket::Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let target = tape.leaf(normal_f64(&shape, target_seed));
    tape.mse_loss(out, target)
}

fn loss_value(inputs: &[Tensor<f64>], graph: Graph, target_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = graph(&mut tape, &vars).unwrap();
    let loss = objective(&mut tape, out, target_seed).unwrap();
    tape.value(loss).data()[0]
}

/// `‖g - g_fd‖ / max(‖g‖, ‖g_fd‖)` over all inputs, with central
/// differences of step `1e-5` in f64.
pub fn fd_relative_error(inputs: &[Tensor<f64>], graph: Graph, target_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = graph(&mut tape, &vars).unwrap();
    let loss = objective(&mut tape, out, target_seed).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.get(v).into_data()).collect();

    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].len() {
            let x = inputs[i].data()[k];
            probe[i].data_mut()[k] = x + h;
            let up = loss_value(&probe, graph, target_seed);
            probe[i].data_mut()[k] = x - h;
            let down = loss_value(&probe, graph, target_seed);
            probe[i].data_mut()[k] = x;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Random small instances of every differentiable primitive:
/// `(name, inputs, graph)` for instance `k`.
pub fn primitive_instances(k: u64) -> Vec<Instance> {
    use rand::Rng;
    let mut r = rng::stream(1000 + k, Stream::Data);
    let mut dim = |lo: usize, hi: usize| r.random_range(lo..=hi);
    let (b, c, c2, h, w) = (dim(1, 2), dim(1, 3), dim(1, 3), dim(1, 5), dim(1, 5));
    let (h2, w2) = (2 * dim(1, 3), 2 * dim(1, 3));
    let (din, dout) = (dim(1, 6), dim(1, 6));
    let cout = dim(1, 3);
    let s = 100 * k;
    vec![
        (
            "conv2d",
            vec![normal_f64(&[b, c, h, w], s), normal_f64(&[cout, c, 3, 3], s + 1), normal_f64(&[cout], s + 2)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], v[2])),
        ),
        (
            "linear",
            vec![normal_f64(&[b, din], s + 3), normal_f64(&[dout, din], s + 4), normal_f64(&[dout], s + 5)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.linear(v[0], v[1], v[2])),
        ),
        (
            "silu",
            vec![normal_f64(&[b, c, h, w], s + 6)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.silu(v[0]))),
        ),
        (
            "add",
            vec![normal_f64(&[b, c, h, w], s + 7), normal_f64(&[b, c, h, w], s + 8)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add(v[0], v[1])),
        ),
        (
            "add_channel_bias",
            vec![normal_f64(&[b, c, h, w], s + 9), normal_f64(&[b, c], s + 10)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add_channel_bias(v[0], v[1])),
        ),
        (
            "concat_channels",
            vec![normal_f64(&[b, c, h, w], s + 11), normal_f64(&[b, c2, h, w], s + 12)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.concat_channels(v[0], v[1])),
        ),
        (
            "downsample2",
            vec![normal_f64(&[b, c, h2, w2], s + 13)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.downsample2(v[0])),
        ),
        (
            "upsample2",
            vec![normal_f64(&[b, c, h, w], s + 14)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.upsample2(v[0])),
        ),
        (
            "mse_loss",
            vec![normal_f64(&[b, c, h, w], s + 15), normal_f64(&[b, c, h, w], s + 16)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mse_loss(v[0], v[1])),
        ),
    ]
}

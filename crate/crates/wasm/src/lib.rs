//! Browser bindings. Each export has a plain Rust twin returning
//! `Result<_, String>` so the logic runs and is tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ddpm_ticket::data::{synthetic, SyntheticKind};
use ddpm_ticket::diffusion::{q_sample, DiffusionConfig};
use ddpm_ticket::metrics::count_flops;
use ddpm_ticket::params::Role;
use ddpm_ticket::pruning::{prune_count, MaskSet, PruneSchedule};
use ddpm_ticket::rng::{self, Stream};
use ddpm_ticket::similarity::{cka, rbf_gram, Bandwidth, CkaMode};
use ddpm_ticket::unet::{UNet, UNetConfig};
use ddpm_ticket::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct ModuleInfo {
    pub name: String,
    pub prunable: usize,
    pub ratio_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundRow {
    pub round: usize,
    pub global_sparsity: f64,
    pub module_sparsity: Vec<f64>,
    pub flops_saving: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleTrace {
    pub modules: Vec<ModuleInfo>,
    pub rounds: Vec<RoundRow>,
}

/// Mask-count trace of the graded schedule on the default U-Net: after
/// each round, module `j` has lost `⌊(p + j q)% · remaining⌋` more weights.
pub fn schedule_trace(p: f64, q: f64, rounds: usize) -> Result<ScheduleTrace, String> {
    let model = UNet::new(UNetConfig::default()).map_err(|e| e.to_string())?;
    let j_count = model.module_count();
    let schedule = PruneSchedule {
        base_ratio_pct: p,
        increment_pct: q,
        max_rounds: rounds.max(1),
        ..PruneSchedule::default()
    };
    schedule.validate(j_count).map_err(|e| e.to_string())?;
    let params = model.init(0);
    let mut sizes = vec![0usize; j_count];
    for prm in params.iter().filter(|p| p.role == Role::PrunableWeight) {
        sizes[prm.module] += prm.tensor.len();
    }
    let total: usize = sizes.iter().sum();
    let modules = model
        .convs()
        .iter()
        .map(|c| ModuleInfo {
            name: c.name.clone(),
            prunable: sizes[c.module],
            ratio_pct: schedule.ratio_pct(c.module),
        })
        .collect();
    let mut remaining = sizes.clone();
    let mut rows = Vec::with_capacity(rounds + 1);
    for round in 0..=rounds {
        if round > 0 {
            for (j, r) in remaining.iter_mut().enumerate() {
                *r -= prune_count(*r, schedule.ratio_pct(j));
            }
        }
        let density: Vec<f64> = remaining.iter().zip(&sizes).map(|(&r, &s)| r as f64 / s as f64).collect();
        let flops = count_flops(&model, &density).map_err(|e| e.to_string())?;
        rows.push(RoundRow {
            round,
            global_sparsity: 1.0 - remaining.iter().sum::<usize>() as f64 / total as f64,
            module_sparsity: density.iter().map(|d| 1.0 - d).collect(),
            flops_saving: flops.saving,
        });
    }
    Ok(ScheduleTrace { modules, rounds: rows })
}

/// `x_t` of one synthetic 16x16 image at each requested timestep (T = 100),
/// sharing a single noise draw; frames are concatenated row-major.
pub fn diffusion_frames(kind: &str, seed: u64, timesteps: &[u32]) -> Result<Vec<f32>, String> {
    let kind: SyntheticKind = kind.parse().map_err(|e: ddpm_ticket::Error| e.to_string())?;
    let schedule = DiffusionConfig::rescaled(100).schedule().map_err(|e| e.to_string())?;
    let x0 = synthetic(kind, 16, 1, seed).map_err(|e| e.to_string())?;
    let mut noise = Tensor::zeros([1, 1, 16, 16]);
    rng::fill_normal(&mut rng::stream(seed, Stream::DiffusionNoise), noise.data_mut());
    let mut out = Vec::with_capacity(timesteps.len() * 256);
    for &t in timesteps {
        if t == 0 {
            out.extend_from_slice(x0.images().data());
            continue;
        }
        let x = q_sample(x0.images(), &[t as usize], &noise, &schedule).map_err(|e| e.to_string())?;
        out.extend_from_slice(x.data());
    }
    Ok(out)
}

/// Root-mode CKA between module `j`'s initial weight matrix and copies
/// perturbed by Gaussian noise of `σ · std(W)` for each `σ`.
pub fn cka_sweep(module: usize, seed: u64, sigmas: &[f64]) -> Result<Vec<f64>, String> {
    let model = UNet::new(UNetConfig::default()).map_err(|e| e.to_string())?;
    let params = model.init(seed);
    let mask = MaskSet::full(&params);
    let w = model.module_weight_matrix(&params, &mask, module).map_err(|e| e.to_string())?;
    if w.shape()[0] < 2 {
        return Err(format!("module {module} has a single output channel"));
    }
    let n = w.len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let k = rbf_gram(&w, Bandwidth::Median).map_err(|e| e.to_string())?;
    let mut rng = rng::stream(seed, Stream::Sampling);
    let mut noise = vec![0.0f32; w.len()];
    sigmas
        .iter()
        .map(|&s| {
            rng::fill_normal(&mut rng, &mut noise);
            let data = w.data().iter().zip(&noise).map(|(v, z)| v + s * std * *z as f64).collect();
            let wn = Tensor::new(w.shape().to_vec(), data).map_err(|e| e.to_string())?;
            let l = rbf_gram(&wn, Bandwidth::Median).map_err(|e| e.to_string())?;
            Ok(cka(&k, &l, CkaMode::Root).unwrap_or(f64::NAN))
        })
        .collect()
}

/// JSON trace of the pruning schedule (see [`schedule_trace`]).
#[wasm_bindgen(js_name = scheduleExplorer)]
pub fn schedule_explorer(p: f64, q: f64, rounds: usize) -> Result<String, JsError> {
    let trace = schedule_trace(p, q, rounds).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&trace).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = forwardDiffusion)]
pub fn forward_diffusion(kind: &str, seed: u32, timesteps: &[u32]) -> Result<Vec<f32>, JsError> {
    diffusion_frames(kind, seed as u64, timesteps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = ckaUnderNoise)]
pub fn cka_under_noise(module: usize, seed: u32, sigmas: &[f64]) -> Result<Vec<f64>, JsError> {
    cka_sweep(module, seed as u64, sigmas).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = moduleCount)]
pub fn module_count() -> usize {
    UNet::new(UNetConfig::default()).map(|m| m.module_count()).unwrap_or(0)
}

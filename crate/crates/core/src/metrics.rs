//! FLOPs accounting and pixel-space sample-quality proxies.
//!
//! FLOPs convention: one multiply-accumulate counts as 2 FLOPs. Counts are
//! for one forward pass of a single image.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::{module_sparsities, MaskSet};
use crate::similarity::{median_nonzero, Bandwidth};
use crate::tensor::Tensor;
use crate::unet::UNet;

pub const FLOPS_CONVENTION: &str = "1 multiply-accumulate = 2 FLOPs; bias add, activation, pooling, upsampling and time-bias add = 1 FLOP per output element; concat and sinusoidal features not counted; single image, one forward pass";

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleFlops {
    pub module: usize,
    pub name: String,
    /// Weight-bearing FLOPs (conv, its time projection, and for module 0 the time MLP).
    pub dense: u64,
    /// Fraction of the module's prunable weights that survive.
    pub density: f64,
    pub effective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub modules: Vec<ModuleFlops>,
    /// Activations, pooling, upsampling and broadcast adds (never scaled).
    pub other: u64,
    pub weight_dense: u64,
    pub weight_effective: f64,
    /// `1 - Σ effective / Σ dense` over weight-bearing operations.
    pub saving: f64,
    /// Saving over all counted operations.
    pub overall_saving: f64,
}

fn conv_flops(size: usize, cin: usize, cout: usize) -> u64 {
    let hw = (size * size) as u64;
    2 * hw * cout as u64 * cin as u64 * 9 + hw * cout as u64
}

fn linear_flops(din: usize, dout: usize) -> u64 {
    2 * (dout * din) as u64 + dout as u64
}

/// Weighted mean of `values` with weights `w`, taken relative to the first
/// value so that equal values reproduce themselves exactly.
fn shifted_weighted_mean(values: &[f64], weights: &[u64]) -> f64 {
    let total: u64 = weights.iter().sum();
    if values.is_empty() || total == 0 {
        return 0.0;
    }
    let base = values[0];
    let dev: f64 = values
        .iter()
        .zip(weights)
        .map(|(&v, &w)| (v - base) * w as f64)
        .sum();
    base + dev / total as f64
}

/// FLOPs of one forward pass with module `j` running at `densities[j]`.
pub fn count_flops(model: &UNet, densities: &[f64]) -> Result<FlopsReport> {
    let j_count = model.module_count();
    if densities.len() != j_count {
        return Err(Error::Misaligned(format!(
            "{} densities for {j_count} modules",
            densities.len()
        )));
    }
    if let Some(d) = densities.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::InvalidConfig(format!("density {d} outside [0, 1]")));
    }
    let cfg = model.config();
    let tdim = cfg.time_embed_dim;
    let mut modules = Vec::with_capacity(j_count);
    let mut other: u64 = 2 * tdim as u64; // SiLU after each time-MLP layer
    for (spec, &density) in model.convs().iter().zip(densities) {
        let mut dense = conv_flops(spec.size, spec.in_channels, spec.out_channels);
        let plane = (spec.size * spec.size * spec.out_channels) as u64;
        if spec.module == 0 {
            dense += 2 * linear_flops(tdim, tdim);
        }
        if spec.time_projection {
            dense += linear_flops(tdim, spec.out_channels);
            other += plane;
        }
        if spec.activation {
            other += plane;
        }
        modules.push(ModuleFlops {
            module: spec.module,
            name: spec.name.clone(),
            dense,
            density,
            effective: dense as f64 * density,
        });
    }
    // resampling between levels: one FLOP per output element
    let mut size = cfg.image_size;
    for l in 0..cfg.levels.saturating_sub(1) {
        let ch = (cfg.base_channels << l) as u64;
        size /= 2;
        other += ch * (size * size) as u64;
    }
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        let ch = (cfg.base_channels << (l + 1)) as u64;
        other += ch * (size * size * 4) as u64;
        size *= 2;
    }

    let weight_dense: u64 = modules.iter().map(|m| m.dense).sum();
    let weight_effective: f64 = modules.iter().map(|m| m.effective).sum();
    let weights: Vec<u64> = modules.iter().map(|m| m.dense).collect();
    let mean_density = shifted_weighted_mean(densities, &weights);
    let saving = 1.0 - mean_density;
    let total = weight_dense + other;
    let overall_saving = saving * weight_dense as f64 / total as f64;
    Ok(FlopsReport {
        modules,
        other,
        weight_dense,
        weight_effective,
        saving,
        overall_saving,
    })
}

/// FLOPs under the densities implied by `mask`.
pub fn count_flops_masked(model: &UNet, mask: &MaskSet) -> Result<FlopsReport> {
    let densities: Vec<f64> = module_sparsities(mask, model.module_count())
        .into_iter()
        .map(|s| 1.0 - s)
        .collect();
    count_flops(model, &densities)
}

impl FlopsReport {
    pub fn total_dense(&self) -> u64 {
        self.weight_dense + self.other
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {FLOPS_CONVENTION}\nmodule,name,dense_flops,density,effective_flops\n");
        for m in &self.modules {
            out.push_str(&format!("{},{},{},{},{}\n", m.module, m.name, m.dense, m.density, m.effective));
        }
        out.push_str(&format!("other,non-weight,{},1,{}\n", self.other, self.other));
        out.push_str(&format!(
            "total,weight-bearing,{},{},{}\n",
            self.weight_dense,
            1.0 - self.saving,
            self.weight_effective
        ));
        out
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "FLOPs per image ({FLOPS_CONVENTION})")?;
        writeln!(f, "{:>3}  {:<10} {:>12} {:>8} {:>14}", "j", "module", "dense", "density", "effective")?;
        for m in &self.modules {
            writeln!(
                f,
                "{:>3}  {:<10} {:>12} {:>8.4} {:>14.1}",
                m.module, m.name, m.dense, m.density, m.effective
            )?;
        }
        writeln!(f, "     {:<10} {:>12}", "non-weight", self.other)?;
        writeln!(
            f,
            "weight-bearing: dense {} effective {:.1} saving {:.4}",
            self.weight_dense, self.weight_effective, self.saving
        )?;
        write!(
            f,
            "all ops:        dense {} saving {:.4}",
            self.total_dense(),
            self.overall_saving
        )
    }
}

fn rows_f64(x: &Tensor<f32>) -> (usize, usize, Vec<f64>) {
    let n = x.shape()[0];
    let d = x.len() / n;
    (n, d, x.data().iter().map(|&v| v as f64).collect())
}

/// Sum after sorting, so that the result does not depend on visiting order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mmd {
    pub value: f64,
    pub bandwidth: f64,
    /// All pooled samples identical: no bandwidth, value reported as 0.
    pub degenerate: bool,
}

/// Biased squared MMD with an RBF kernel over flattened samples.
pub fn mmd2(x: &Tensor<f32>, y: &Tensor<f32>, bandwidth: Bandwidth) -> Result<Mmd> {
    let (n, d, xs) = rows_f64(x);
    let (m, dy, ys) = rows_f64(y);
    if n < 2 || m < 2 {
        return Err(Error::shape("mmd2", format!("need >= 2 samples per set, got {n} and {m}")));
    }
    if d != dy {
        return Err(Error::shape("mmd2", format!("sample widths {d} and {dy} differ")));
    }
    let pooled: Vec<&[f64]> = xs.chunks(d).chain(ys.chunks(d)).collect();
    let total = n + m;
    let mut sq = vec![0.0f64; total * total];
    for i in 0..total {
        for j in (i + 1)..total {
            let s: f64 = pooled[i].iter().zip(pooled[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            sq[i * total + j] = s;
            sq[j * total + i] = s;
        }
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => {
            let dists = (0..total).flat_map(|i| ((i + 1)..total).map(move |j| (i, j)));
            match median_nonzero(dists.map(|(i, j)| sq[i * total + j].sqrt())) {
                Some(s) => s,
                None => {
                    return Ok(Mmd {
                        value: 0.0,
                        bandwidth: f64::NAN,
                        degenerate: true,
                    })
                }
            }
        }
    };
    let denom = 2.0 * sigma * sigma;
    let k = |i: usize, j: usize| (-sq[i * total + j] / denom).exp();
    let block = |r: std::ops::Range<usize>, c: std::ops::Range<usize>| {
        let vals: Vec<f64> = r.flat_map(|i| c.clone().map(move |j| (i, j))).map(|(i, j)| k(i, j)).collect();
        ordered_sum(vals)
    };
    let kxx = block(0..n, 0..n) / (n * n) as f64;
    let kyy = block(n..total, n..total) / (m * m) as f64;
    let kxy = block(0..n, n..total) / (n * m) as f64;
    Ok(Mmd {
        value: kxx + kyy - 2.0 * kxy,
        bandwidth: sigma,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    #[default]
    Diagonal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frechet {
    pub value: f64,
    pub mode: CovarianceMode,
    /// Negative eigenvalues were floored at zero, or full mode fell back to
    /// diagonal for lack of samples.
    pub flagged: bool,
}

fn moments(rows: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for r in rows.chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in rows.chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    (mean, var)
}

/// `‖μx-μy‖² + Σ (√σx² - √σy²)²`: the Fréchet distance between Gaussians with
/// diagonal covariances.
pub fn frechet_diagonal(mu_x: &[f64], var_x: &[f64], mu_y: &[f64], var_y: &[f64]) -> f64 {
    let mean_term: f64 = mu_x.iter().zip(mu_y).map(|(a, b)| (a - b) * (a - b)).sum();
    let cov_term: f64 = var_x
        .iter()
        .zip(var_y)
        .map(|(a, b)| (a.max(0.0).sqrt() - b.max(0.0).sqrt()).powi(2))
        .sum();
    mean_term + cov_term
}

fn covariance(rows: &[f64], n: usize, d: usize, mean: &[f64]) -> DMatrix<f64> {
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i * d + j] - mean[j]);
    (centered.transpose() * &centered) / (n - 1) as f64
}

fn psd_sqrt(m: DMatrix<f64>, flagged: &mut bool) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let vals = eig.eigenvalues.map(|v| {
        if v < -1e-10 * scale {
            *flagged = true;
        }
        v.max(0.0).sqrt()
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of the two sample sets.
pub fn frechet_gaussian(x: &Tensor<f32>, y: &Tensor<f32>, mode: CovarianceMode) -> Result<Frechet> {
    let (n, d, xs) = rows_f64(x);
    let (m, dy, ys) = rows_f64(y);
    if n < 2 || m < 2 {
        return Err(Error::shape("frechet", format!("need >= 2 samples per set, got {n} and {m}")));
    }
    if d != dy {
        return Err(Error::shape("frechet", format!("sample widths {d} and {dy} differ")));
    }
    let (mu_x, var_x) = moments(&xs, n, d);
    let (mu_y, var_y) = moments(&ys, m, d);
    if mode == CovarianceMode::Diagonal || n < d + 1 || m < d + 1 {
        return Ok(Frechet {
            value: frechet_diagonal(&mu_x, &var_x, &mu_y, &var_y),
            mode: CovarianceMode::Diagonal,
            flagged: mode == CovarianceMode::Full,
        });
    }
    let mut flagged = false;
    let cx = covariance(&xs, n, d, &mu_x);
    let cy = covariance(&ys, m, d, &mu_y);
    let sx = psd_sqrt(cx.clone(), &mut flagged);
    let inner = &sx * &cy * &sx;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt(inner, &mut flagged).trace();
    let mean_term: f64 = mu_x.iter().zip(&mu_y).map(|(a, b)| (a - b) * (a - b)).sum();
    let value = (mean_term + cx.trace() + cy.trace() - 2.0 * cross).max(0.0);
    Ok(Frechet {
        value,
        mode: CovarianceMode::Full,
        flagged,
    })
}

/// Sample-quality proxy: lower is better for both numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScore {
    pub mmd2: f64,
    pub frechet: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub seed: u64,
    pub degenerate: bool,
}

pub fn quality(generated: &Tensor<f32>, reference: &Tensor<f32>, seed: u64) -> Result<QualityScore> {
    let m = mmd2(generated, reference, Bandwidth::Median)?;
    let f = frechet_gaussian(generated, reference, CovarianceMode::Diagonal)?;
    Ok(QualityScore {
        mmd2: m.value,
        frechet: f.value,
        n_generated: generated.shape()[0],
        n_reference: reference.shape()[0],
        seed,
        degenerate: m.degenerate,
    })
}

//! HSIC and CKA between sparsified weight matrices of two tickets.
//!
//! Rows of a module's reshaped conv weight (one row per output channel)
//! are the kernel inputs; Gram matrices use an RBF kernel whose bandwidth
//! defaults to the median pairwise row distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::pruning::MaskSet;
use crate::tensor::Tensor;
use crate::unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    /// Median of the nonzero pairwise Euclidean distances.
    #[default]
    Median,
    Fixed(f64),
}

/// Symmetric `n x n` kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    data: Vec<f64>,
    bandwidth: f64,
    /// Set when every input row was identical and no bandwidth exists.
    degenerate: bool,
}

impl GramMatrix {
    /// Wraps an explicit symmetric matrix (row-major, `n * n` entries).
    pub fn from_values(n: usize, data: Vec<f64>) -> Result<Self> {
        if n < 2 || data.len() != n * n {
            return Err(Error::shape(
                "gram",
                format!("need n >= 2 and n*n entries, got n = {n} with {}", data.len()),
            ));
        }
        Ok(Self {
            n,
            data,
            bandwidth: f64::NAN,
            degenerate: false,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// `H K H` with `H = I - 11ᵀ/n`.
    ///
    /// Means are taken relative to the first entry of each row so that a
    /// constant matrix centers to exact zeros.
    pub fn centered(&self) -> Vec<f64> {
        let n = self.n;
        let nf = n as f64;
        let row_mean = |i: usize| {
            let base = self.data[i * n];
            base + self.data[i * n..(i + 1) * n].iter().map(|&v| v - base).sum::<f64>() / nf
        };
        let col_mean = |j: usize| {
            let base = self.data[j];
            base + (0..n).map(|i| self.data[i * n + j] - base).sum::<f64>() / nf
        };
        let rows: Vec<f64> = (0..n).map(row_mean).collect();
        let cols: Vec<f64> = (0..n).map(col_mean).collect();
        let grand = {
            let base = rows[0];
            base + rows.iter().map(|&r| r - base).sum::<f64>() / nf
        };
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (self.data[i * n + j] - rows[i]) - (cols[j] - grand);
            }
        }
        out
    }
}

fn pairwise_sq_dists(rows: &Tensor<f64>) -> Result<(usize, Vec<f64>)> {
    if rows.ndim() != 2 {
        return Err(Error::shape("rbf_gram", format!("rows must be 2-D, got {:?}", rows.shape())));
    }
    let (n, d) = (rows.shape()[0], rows.shape()[1]);
    if n < 2 {
        return Err(Error::shape("rbf_gram", format!("need at least 2 rows, got {n}")));
    }
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &rows.data()[i * d..(i + 1) * d];
            let b = &rows.data()[j * d..(j + 1) * d];
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            sq[i * n + j] = s;
            sq[j * n + i] = s;
        }
    }
    Ok((n, sq))
}

/// Median of the strictly positive entries (each unordered pair once).
pub fn median_nonzero(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|&x| x > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    Some(if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) })
}

fn upper_triangle(n: usize, sq: &[f64]) -> impl Iterator<Item = f64> + '_ {
    (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| sq[i * n + j].sqrt()))
}

/// `K_jk = exp(-‖row_j - row_k‖² / (2σ²))`.
///
/// When all rows coincide there is no median distance: the all-ones Gram
/// is returned with [`GramMatrix::is_degenerate`] set.
pub fn rbf_gram(rows: &Tensor<f64>, bandwidth: Bandwidth) -> Result<GramMatrix> {
    let (n, sq) = pairwise_sq_dists(rows)?;
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Some(s),
        Bandwidth::Fixed(s) => return Err(Error::InvalidConfig(format!("RBF bandwidth {s} must be positive"))),
        Bandwidth::Median => median_nonzero(upper_triangle(n, &sq)),
    };
    let Some(sigma) = sigma else {
        return Ok(GramMatrix {
            n,
            data: vec![1.0; n * n],
            bandwidth: f64::NAN,
            degenerate: true,
        });
    };
    let denom = 2.0 * sigma * sigma;
    let data = sq.iter().map(|&d| (-d / denom).exp()).collect();
    Ok(GramMatrix {
        n,
        data,
        bandwidth: sigma,
        degenerate: false,
    })
}

/// `HSIC(K, L) = tr(K H L H) / (n - 1)²`, evaluated as the elementwise
/// inner product of the two centered matrices.
pub fn hsic(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    if k.n != l.n {
        return Err(Error::shape("hsic", format!("Gram sizes {} and {} differ", k.n, l.n)));
    }
    let kc = k.centered();
    let lc = l.centered();
    let s: f64 = kc.iter().zip(&lc).map(|(a, b)| a * b).sum();
    let m = (k.n - 1) as f64;
    Ok(s / (m * m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CkaMode {
    /// `HSIC(K,L) / √(HSIC(K,K) HSIC(L,L))`.
    #[default]
    Root,
    /// `HSIC(K,L) / (HSIC(K,K) HSIC(L,L))`, the un-rooted denominator.
    Paper,
}

impl std::str::FromStr for CkaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "root" => Ok(CkaMode::Root),
            "paper" | "paper-literal" => Ok(CkaMode::Paper),
            other => Err(Error::InvalidConfig(format!("unknown CKA mode `{other}` (root | paper)"))),
        }
    }
}

pub fn cka(k: &GramMatrix, l: &GramMatrix, mode: CkaMode) -> Result<f64> {
    let kl = hsic(k, l)?;
    let kk = hsic(k, k)?;
    let ll = hsic(l, l)?;
    if !(kk > 0.0 && ll > 0.0) {
        return Err(Error::UndefinedSimilarity(format!(
            "self-HSIC is not positive (HSIC(K,K) = {kk:e}, HSIC(L,L) = {ll:e})"
        )));
    }
    Ok(match mode {
        CkaMode::Root => kl / (kk * ll).sqrt(),
        CkaMode::Paper => kl / (kk * ll),
    })
}

/// CKA of one module pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub module: usize,
    /// `None` when a self-HSIC vanished (e.g. a fully pruned module).
    pub cka_root: Option<f64>,
    pub cka_paper: Option<f64>,
    pub bandwidth_a: f64,
    pub bandwidth_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile {
    pub entries: Vec<ProfileEntry>,
}

impl SimilarityProfile {
    pub fn values(&self, mode: CkaMode) -> Vec<Option<f64>> {
        self.entries
            .iter()
            .map(|e| match mode {
                CkaMode::Root => e.cka_root,
                CkaMode::Paper => e.cka_paper,
            })
            .collect()
    }

    /// `module_index,cka_root,cka_paper_literal,bandwidth_a,bandwidth_b` rows.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |x| x.to_string());
        let mut out = String::from("module_index,cka_root,cka_paper_literal,bandwidth_a,bandwidth_b\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.module,
                fmt(e.cka_root),
                fmt(e.cka_paper),
                e.bandwidth_a,
                e.bandwidth_b
            ));
        }
        out
    }
}

/// Per-module CKA between two tickets of the same architecture. Modules
/// with a single output channel (or a vanished self-HSIC) are reported as
/// undefined.
pub fn profile(
    model: &UNet,
    a: (&ParameterSet, &MaskSet),
    b: (&ParameterSet, &MaskSet),
    bandwidth: Bandwidth,
) -> Result<SimilarityProfile> {
    model.check_params(a.0)?;
    model.check_params(b.0).map_err(|_| Error::Misaligned("tickets have different architectures".into()))?;
    let mut entries = Vec::with_capacity(model.module_count());
    for j in 0..model.module_count() {
        let wa = model.module_weight_matrix(a.0, a.1, j)?;
        let wb = model.module_weight_matrix(b.0, b.1, j)?;
        if wa.shape()[0] < 2 {
            // a single output row has no pairwise structure
            entries.push(ProfileEntry {
                module: j,
                cka_root: None,
                cka_paper: None,
                bandwidth_a: f64::NAN,
                bandwidth_b: f64::NAN,
            });
            continue;
        }
        let ka = rbf_gram(&wa, bandwidth)?;
        let kb = rbf_gram(&wb, bandwidth)?;
        entries.push(ProfileEntry {
            module: j,
            cka_root: cka(&ka, &kb, CkaMode::Root).ok(),
            cka_paper: cka(&ka, &kb, CkaMode::Paper).ok(),
            bandwidth_a: ka.bandwidth(),
            bandwidth_b: kb.bandwidth(),
        });
    }
    Ok(SimilarityProfile { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, d: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new([n, d], data).unwrap()
    }

    #[test]
    fn diagonal_is_one_and_plugin_value() {
        let r = rows(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        // distance √2 = σ√2 with σ = 1
        let g = rbf_gram(&r, Bandwidth::Fixed(1.0)).unwrap();
        assert_eq!(g.get(0, 0), 1.0);
        assert_eq!(g.get(1, 1), 1.0);
        assert!((g.get(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((g.get(0, 1) - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn gram_matches_double_loop() {
        let r = rows(3, 4, vec![0.3, -1.2, 0.8, 2.0, 1.1, 0.0, -0.5, 0.7, -0.9, 0.4, 0.25, -1.5]);
        let g = rbf_gram(&r, Bandwidth::Median).unwrap();
        let mut d = vec![];
        for i in 0..3 {
            for j in (i + 1)..3 {
                let s: f64 = (0..4).map(|k| (r.data()[i * 4 + k] - r.data()[j * 4 + k]).powi(2)).sum();
                d.push(s.sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let sigma = d[1];
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..4).map(|k| (r.data()[i * 4 + k] - r.data()[j * 4 + k]).powi(2)).sum();
                let e = (-s / (2.0 * sigma * sigma)).exp();
                assert!((g.get(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_rows_flag_degenerate() {
        let g = rbf_gram(&rows(3, 2, vec![1.0; 6]), Bandwidth::Median).unwrap();
        assert!(g.is_degenerate());
        assert!(g.data().iter().all(|&v| v == 1.0));
        assert!(rbf_gram(&rows(1, 2, vec![1.0, 2.0]), Bandwidth::Median).is_err());
    }

    #[test]
    fn constant_gram_has_zero_hsic() {
        let k = GramMatrix::from_values(3, vec![0.1; 9]).unwrap();
        let l = GramMatrix::from_values(3, vec![1.0, 0.2, 0.3, 0.2, 1.0, 0.5, 0.3, 0.5, 1.0]).unwrap();
        assert_eq!(hsic(&k, &l).unwrap(), 0.0);
        assert!(matches!(cka(&k, &l, CkaMode::Root), Err(Error::UndefinedSimilarity(_))));
    }

    #[test]
    fn two_by_two_hsic_closed_form() {
        // HKH = (1-a)/2 [[1,-1],[-1,1]], so tr(KHLH) = tr(HKH HLH)
        // = (1-a)(1-b)/4 * tr([[2,-2],[-2,2]]) = (1-a)(1-b); (n-1)^2 = 1
        let (a, b) = (0.3, 0.8);
        let k = GramMatrix::from_values(2, vec![1.0, a, a, 1.0]).unwrap();
        let l = GramMatrix::from_values(2, vec![1.0, b, b, 1.0]).unwrap();
        let expected = (1.0 - a) * (1.0 - b);
        assert!((hsic(&k, &l).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("root".parse::<CkaMode>().unwrap(), CkaMode::Root);
        assert_eq!("paper".parse::<CkaMode>().unwrap(), CkaMode::Paper);
        assert!("linear".parse::<CkaMode>().is_err());
    }
}

use crate::error::{Error, Result};
use crate::params::{ParameterSet, Role};
use crate::tensor::Tensor;

/// Binary keep-mask for one prunable array. `true` keeps the weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub name: String,
    pub module: usize,
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(name: impl Into<String>, module: usize, shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::Misaligned(format!(
                "mask `{name}` shape {shape:?} does not hold {} entries",
                bits.len()
            )));
        }
        Ok(Self {
            name,
            module,
            shape,
            bits,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `values ⊙ mask` with masked entries written as `+0.0`.
    pub fn apply(&self, values: &Tensor<f32>) -> Tensor<f32> {
        let data = values
            .data()
            .iter()
            .zip(&self.bits)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect();
        Tensor::new(values.shape().to_vec(), data).expect("mask is shape-aligned")
    }
}

/// One mask per prunable array, in [`ParameterSet`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    masks: Vec<Mask>,
}

impl MaskSet {
    pub fn from_masks(masks: Vec<Mask>) -> Self {
        Self { masks }
    }

    fn filled(params: &ParameterSet, keep: bool) -> Self {
        let masks = params
            .prunable()
            .map(|p| Mask {
                name: p.name.clone(),
                module: p.module,
                shape: p.tensor.shape().to_vec(),
                bits: vec![keep; p.tensor.len()],
            })
            .collect();
        Self { masks }
    }

    /// All-ones mask (the dense network).
    pub fn full(params: &ParameterSet) -> Self {
        Self::filled(params, true)
    }

    pub fn empty(params: &ParameterSet) -> Self {
        Self::filled(params, false)
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn masks_mut(&mut self) -> &mut [Mask] {
        &mut self.masks
    }

    pub fn get(&self, name: &str) -> Option<&Mask> {
        self.masks.iter().find(|m| m.name == name)
    }

    pub fn ones(&self) -> usize {
        self.masks.iter().map(Mask::ones).sum()
    }

    pub fn total(&self) -> usize {
        self.masks.iter().map(Mask::len).sum()
    }

    pub fn check_aligned(&self, params: &ParameterSet) -> Result<()> {
        let mut prunable = params.prunable();
        for m in &self.masks {
            let Some(p) = prunable.next() else {
                return Err(Error::Misaligned(format!("extra mask `{}`", m.name)));
            };
            if p.name != m.name || p.module != m.module || p.tensor.shape() != m.shape() {
                return Err(Error::Misaligned(format!(
                    "mask `{}` {:?} (module {}) vs parameter `{}` {:?} (module {})",
                    m.name,
                    m.shape(),
                    m.module,
                    p.name,
                    p.tensor.shape(),
                    p.module
                )));
            }
        }
        if let Some(p) = prunable.next() {
            return Err(Error::Misaligned(format!("no mask for `{}`", p.name)));
        }
        Ok(())
    }

    /// Pairs every parameter with its mask (`None` for non-prunable arrays).
    pub(crate) fn pair<'a>(
        &'a self,
        params: &'a ParameterSet,
    ) -> Result<Vec<(&'a crate::params::Param, Option<&'a Mask>)>> {
        self.check_aligned(params)?;
        let mut masks = self.masks.iter();
        Ok(params
            .iter()
            .map(|p| {
                let m = if p.role == Role::PrunableWeight { masks.next() } else { None };
                (p, m)
            })
            .collect())
    }

    /// True when no position that is 0 here is 1 in `next`.
    pub fn is_superset_of(&self, next: &MaskSet) -> bool {
        self.masks.len() == next.masks.len()
            && self
                .masks
                .iter()
                .zip(&next.masks)
                .all(|(a, b)| a.bits.len() == b.bits.len() && a.bits.iter().zip(&b.bits).all(|(&x, &y)| x || !y))
    }
}

//! Patch autoencoder and multi-scale residual quantizer.
//!
//! An image is encoded to a feature map `f`, then tokenised into `K` token
//! maps of increasing resolution. Scale `k` quantises the residual
//! `f - sum_{i<k} up(lookup(r_i))`, downsampled to the scale's extent.

mod autoencoder;
mod quantize;
mod train;

pub use autoencoder::{AutoencoderConfig, AutoencoderWeights};
pub(crate) use quantize::lift;
pub use quantize::{
    dequantize, dequantize_prefix, nearest_entry, quantize_multiscale, quantize_traced,
    QuantizeTrace,
};
pub use train::{train_autoencoder, AutoencoderTrainConfig, AutoencoderTrainRow};

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{Extent, ResamplePlan, Tensor};

/// Spatial extents of the `K` token maps, coarse to fine.
///
/// Extents are non-decreasing along both axes and the last one equals the
/// feature grid. Resampling plans to and from the final grid are cached.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<Extent>", into = "Vec<Extent>")]
pub struct ScaleSchedule {
    scales: Vec<Extent>,
    up: Vec<Arc<ResamplePlan>>,
    down: Vec<Arc<ResamplePlan>>,
}

impl PartialEq for ScaleSchedule {
    fn eq(&self, other: &Self) -> bool {
        self.scales == other.scales
    }
}

impl TryFrom<Vec<Extent>> for ScaleSchedule {
    type Error = Error;

    fn try_from(scales: Vec<Extent>) -> Result<Self> {
        Self::new(scales)
    }
}

impl From<ScaleSchedule> for Vec<Extent> {
    fn from(s: ScaleSchedule) -> Self {
        s.scales
    }
}

impl ScaleSchedule {
    pub fn new(scales: Vec<Extent>) -> Result<Self> {
        let last = *scales
            .last()
            .ok_or_else(|| contract("empty scale schedule"))?;
        if scales.iter().any(|e| e.area() == 0) {
            return Err(contract("scale extents must be positive"));
        }
        for pair in scales.windows(2) {
            if pair[1].h < pair[0].h || pair[1].w < pair[0].w {
                return Err(contract(format!(
                    "scale schedule must be non-decreasing: {:?} then {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        let mut up = Vec::with_capacity(scales.len());
        let mut down = Vec::with_capacity(scales.len());
        for &e in &scales {
            up.push(Arc::new(ResamplePlan::new(e, last)?));
            down.push(Arc::new(ResamplePlan::new(last, e)?));
        }
        Ok(Self { scales, up, down })
    }

    /// Square schedule from side lengths, e.g. `[1, 2, 4, 6, 8]`.
    pub fn square(sides: &[usize]) -> Result<Self> {
        Self::new(sides.iter().map(|&s| Extent::new(s, s)).collect())
    }

    /// Five scales ending on an 8x8 grid.
    pub fn desk_default() -> Self {
        Self::square(&[1, 2, 4, 6, 8]).expect("static schedule")
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn extents(&self) -> &[Extent] {
        &self.scales
    }

    pub fn extent(&self, k: usize) -> Extent {
        self.scales[k]
    }

    pub fn final_extent(&self) -> Extent {
        *self.scales.last().expect("non-empty")
    }

    /// `sum_k h_k * w_k`.
    pub fn total_positions(&self) -> usize {
        self.scales.iter().map(|e| e.area()).sum()
    }

    /// Start offset of each scale in the concatenated sequence.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.scales
            .iter()
            .map(|e| {
                let o = acc;
                acc += e.area();
                o
            })
            .collect()
    }

    /// Plan from scale `k` up to the final grid.
    pub fn up(&self, k: usize) -> &Arc<ResamplePlan> {
        &self.up[k]
    }

    /// Plan from the final grid down to scale `k`.
    pub fn down(&self, k: usize) -> &Arc<ResamplePlan> {
        &self.down[k]
    }
}

/// `V x C` table of code vectors.
///
/// Entry 0 is conventionally the all-zero "null" code: with it present, a
/// scale can always decline to move the reconstruction, which makes prefix
/// reconstruction error non-increasing in the number of scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    table: Tensor,
}

impl Codebook {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(contract("codebook must be a V x C matrix"));
        }
        let cb = Self { table };
        for i in 0..cb.len() {
            for j in i + 1..cb.len() {
                if cb.entry(i) == cb.entry(j) {
                    return Err(contract(format!("duplicate codebook entries {i} and {j}")));
                }
            }
        }
        Ok(cb)
    }

    /// Accepts a table without the duplicate scan (trained tables).
    pub(crate) fn from_trained(table: Tensor) -> Self {
        Self { table }
    }

    /// Null entry at index 0 followed by `size - 1` Gaussian entries.
    pub fn random<R: Rng + ?Sized>(size: usize, channels: usize, std: f64, rng: &mut R) -> Self {
        let mut data = vec![0.0; size * channels];
        for v in data.iter_mut().skip(channels) {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
        Self::from_trained(Tensor::from_parts(vec![size, channels], data))
    }

    pub fn len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        self.table.row(i)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn has_null_entry(&self) -> bool {
        self.entry(0).iter().all(|&v| v == 0.0)
    }
}

/// `h x w x C` feature grid stored cell-major (`[cell][channel]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    extent: Extent,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(extent: Extent, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != extent.area() * channels {
            return Err(contract(format!(
                "feature map {extent:?}x{channels} needs {} values, got {}",
                extent.area() * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self {
            extent,
            channels,
            data,
        })
    }

    pub fn zeros(extent: Extent, channels: usize) -> Self {
        Self {
            extent,
            channels,
            data: vec![0.0; extent.area() * channels],
        }
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.extent.area(), self.channels], self.data.clone())
    }

    pub(crate) fn from_tensor(extent: Extent, t: Tensor) -> Self {
        let channels = t.cols();
        Self {
            extent,
            channels,
            data: t.into_data(),
        }
    }

    pub fn resample(&self, plan: &ResamplePlan) -> Result<Self> {
        if plan.from() != self.extent {
            return Err(contract(
                "resample: plan source differs from feature extent",
            ));
        }
        Ok(Self {
            extent: plan.to(),
            channels: self.channels,
            data: plan.apply(&self.data, self.channels),
        })
    }

    pub fn sq_error(&self, other: &FeatureMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn mse(&self, other: &FeatureMap) -> f64 {
        self.sq_error(other) / self.data.len() as f64
    }
}

/// One scale's grid of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenMap {
    extent: Extent,
    tokens: Vec<usize>,
}

impl TokenMap {
    pub fn new(extent: Extent, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != extent.area() {
            return Err(contract(format!(
                "token map {extent:?} needs {} tokens, got {}",
                extent.area(),
                tokens.len()
            )));
        }
        Ok(Self { extent, tokens })
    }

    pub fn filled(extent: Extent, token: usize) -> Self {
        Self {
            extent,
            tokens: vec![token; extent.area()],
        }
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [usize] {
        &mut self.tokens
    }
}

/// The `K` token maps `r_1 .. r_K` of one image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MultiScaleTokens {
    maps: Vec<TokenMap>,
}

impl MultiScaleTokens {
    pub fn new(maps: Vec<TokenMap>) -> Self {
        Self { maps }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn scale(&self, k: usize) -> &TokenMap {
        &self.maps[k]
    }

    pub fn scale_mut(&mut self, k: usize) -> &mut TokenMap {
        &mut self.maps[k]
    }

    pub fn maps(&self) -> &[TokenMap] {
        &self.maps
    }

    /// Checks extents against `schedule` and indices against `vocab`.
    pub fn validate(&self, schedule: &ScaleSchedule, vocab: usize) -> Result<()> {
        if self.maps.len() != schedule.len() {
            return Err(contract(format!(
                "{} token maps for a {}-scale schedule",
                self.maps.len(),
                schedule.len()
            )));
        }
        for (k, (m, e)) in self.maps.iter().zip(schedule.extents()).enumerate() {
            if m.extent != *e {
                return Err(contract(format!(
                    "scale {k}: token extent {:?} differs from schedule {e:?}",
                    m.extent
                )));
            }
            if let Some(&bad) = m.tokens.iter().find(|&&t| t >= vocab) {
                return Err(Error::Index {
                    index: bad,
                    bound: vocab,
                });
            }
        }
        Ok(())
    }

    /// Takes scales `< k` from `self` and the rest from `other`.
    pub fn splice(&self, other: &MultiScaleTokens, k: usize) -> Result<Self> {
        if self.maps.len() != other.maps.len() {
            return Err(contract("splice: scale counts differ"));
        }
        Ok(Self {
            maps: self
                .maps
                .iter()
                .zip(&other.maps)
                .enumerate()
                .map(|(i, (a, b))| if i < k { a.clone() } else { b.clone() })
                .collect(),
        })
    }

    /// All tokens, coarse to fine, cell-major within a scale.
    pub fn flat(&self) -> Vec<usize> {
        self.maps
            .iter()
            .flat_map(|m| m.tokens.iter().copied())
            .collect()
    }

    /// CSV dump with header `scale,row,col,token`; `scale` counts from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale,row,col,token\n");
        for (k, m) in self.maps.iter().enumerate() {
            for (i, t) in m.tokens.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", k + 1, i / m.extent.w, i % m.extent.w, t);
            }
        }
        out
    }
}

//! Training objectives over rendered feature maps and their mask means.
//!
//! `L_h` pulls rendered features toward the mean of every mask containing
//! them. `L_ins` places mask means at distances set by their level gap, and
//! `L_part` contrasts parent-relative directions of sibling masks against
//! same-level outsiders. All gradients are analytic; [`total`] chains them
//! back to the per-point features.

mod clustering;
mod instance;
mod part;
mod total;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use clustering::loss_h;
pub use instance::{loss_ins, InstanceLoss};
pub use part::{loss_part, part_similarity, PartLoss};
pub use total::{evaluate_term, prepare_view, total_loss, LossTerm, PreparedView, TotalLoss};

use crate::error::{Error, Result};
use crate::hierarchy::MaskEntry;
use crate::metrics::HcOrientation;
use crate::raster::FeatureMap;
use crate::scene::Level;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Coverage threshold for building mask trees.
    pub theta: f64,
    /// Base of the level-gap target distance `Ω^{-|Δl|}`.
    pub omega: f64,
    /// Temperature of the part-wise contrast.
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Part-wise denominator sums negatives only (true) or also the positive.
    pub literal_denominator: bool,
    pub hc_orientation: HcOrientation,
    /// Drop contrastive pairs whose mean features are nearly parallel.
    pub prune_pairs: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            theta: 0.9,
            omega: 10.0,
            tau: 0.1,
            lambda1: 1e-6,
            lambda2: 1e-5,
            literal_denominator: true,
            hc_orientation: HcOrientation::ChildInParent,
            prune_pairs: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("omega {} must be positive", self.omega)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if !(self.theta > 0.5 && self.theta <= 1.0) {
            return Err(Error::Config(format!("theta {} outside (0.5, 1]", self.theta)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cosine above which a pair counts as redundant when pruning is enabled.
pub const PRUNE_COSINE: f64 = 0.999;
/// Shifted or pairwise distances at or below this are singular.
pub const SINGULAR_DISTANCE: f64 = 1e-8;

/// Counters for terms skipped during evaluation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub ins_coincident_pairs: u64,
    pub ins_pruned_pairs: u64,
    pub part_skipped_anchors: u64,
    pub part_degenerate_pairs: u64,
    pub part_pruned_pairs: u64,
}

impl LossDiagnostics {
    pub fn absorb(&mut self, other: &LossDiagnostics) {
        self.ins_coincident_pairs += other.ins_coincident_pairs;
        self.ins_pruned_pairs += other.ins_pruned_pairs;
        self.part_skipped_anchors += other.part_skipped_anchors;
        self.part_degenerate_pairs += other.part_degenerate_pairs;
        self.part_pruned_pairs += other.part_pruned_pairs;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanEntry {
    pub id: u32,
    pub level: Level,
    pub view_id: u32,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Mean rendered feature of every mask, in mask order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeanFeatureTable {
    pub entries: Vec<MeanEntry>,
    index: BTreeMap<u32, usize>,
}

impl MeanFeatureTable {
    pub fn new(entries: Vec<MeanEntry>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.count == 0 {
                return Err(Error::Loss(format!("mask {} has no pixels", e.id)));
            }
            if e.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Loss(format!("mask {} has a non-finite mean", e.id)));
            }
            if index.insert(e.id, i).is_some() {
                return Err(Error::Loss(format!("duplicate mask id {}", e.id)));
            }
        }
        Ok(MeanFeatureTable { entries, index })
    }

    /// Means of `masks` over `map`.
    pub fn compute(map: &FeatureMap, masks: &[MaskEntry]) -> Result<Self> {
        let entries = masks
            .iter()
            .map(|m| {
                Ok(MeanEntry {
                    id: m.id,
                    level: m.level,
                    view_id: m.view_id,
                    mean: mean_mask_feature(map, m)?,
                    count: m.area(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MeanFeatureTable::new(entries)
    }

    pub fn get(&self, id: u32) -> Option<&MeanEntry> {
        self.index.get(&id).map(|&i| &self.entries[i])
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_mask(map: &FeatureMap, mask: &MaskEntry) -> Result<()> {
    if mask.mask.width != map.width || mask.mask.height != map.height {
        return Err(Error::Loss(format!(
            "mask {} is {}x{}, map is {}x{}",
            mask.id, mask.mask.width, mask.mask.height, map.width, map.height
        )));
    }
    Ok(())
}

/// Arithmetic mean of the map over the mask's set pixels.
pub fn mean_mask_feature(map: &FeatureMap, mask: &MaskEntry) -> Result<Vec<f64>> {
    check_mask(map, mask)?;
    let n = map.pixel_count();
    let mut sum = vec![0.0; map.d];
    let mut count = 0usize;
    for (p, _) in mask.mask.bits.iter().enumerate().filter(|(_, &b)| b) {
        for (c, s) in sum.iter_mut().enumerate() {
            *s += map.values[c * n + p];
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Loss(format!("mask {} is empty", mask.id)));
    }
    Ok(sum.into_iter().map(|s| s / count as f64).collect())
}

/// Adds `grad(M̄)/count` to every pixel of each mask.
pub(crate) fn spread_mean_gradients(
    target: &mut FeatureMap,
    masks: &[MaskEntry],
    table: &MeanFeatureTable,
    grads: &[Vec<f64>],
    weight: f64,
) {
    let n = target.pixel_count();
    for m in masks {
        let Some(i) = table.position(m.id) else { continue };
        let g = &grads[i];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let scale = weight / table.entries[i].count as f64;
        for (p, _) in m.mask.bits.iter().enumerate().filter(|(_, &b)| b) {
            for (c, gc) in g.iter().enumerate() {
                target.values[c * n + p] += scale * gc;
            }
        }
    }
}

pub(crate) fn cosine_of(a: &[f64], b: &[f64]) -> f64 {
    crate::embed::cosine(a, b)
}

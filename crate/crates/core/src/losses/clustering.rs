use std::collections::BTreeSet;

use super::{check_mask, MeanFeatureTable};
use crate::error::{Error, Result};
use crate::hierarchy::MaskEntry;
use crate::raster::FeatureMap;

/// Hierarchical clustering loss `(1/L) Σ_l Σ_i ‖B_i ⊙ (M − M̄_i)‖²` and its
/// gradient with respect to the map, holding the means fixed.
///
/// Because every mask's residuals sum to zero, moving the mean does not change
/// the value to first order, so this gradient is also the exact derivative
/// when `means` are recomputed from `map`.
pub fn loss_h(map: &FeatureMap, masks: &[MaskEntry], means: &MeanFeatureTable) -> Result<(f64, FeatureMap)> {
    let levels: BTreeSet<_> = masks.iter().map(|m| m.level).collect();
    let mut grad = FeatureMap::zeros(map.d, map.height, map.width);
    if levels.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / levels.len() as f64;
    let n = map.pixel_count();
    let mut value = 0.0;
    for m in masks {
        check_mask(map, m)?;
        let entry = means
            .get(m.id)
            .ok_or_else(|| Error::Loss(format!("no mean for mask {}", m.id)))?;
        if entry.mean.len() != map.d {
            return Err(Error::Loss(format!("mean of mask {} has wrong dimension", m.id)));
        }
        for (p, _) in m.mask.bits.iter().enumerate().filter(|(_, &b)| b) {
            for (c, mean) in entry.mean.iter().enumerate() {
                let r = map.values[c * n + p] - mean;
                value += r * r;
                grad.values[c * n + p] += 2.0 * scale * r;
            }
        }
    }
    Ok((scale * value, grad))
}

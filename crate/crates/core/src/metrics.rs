//! Segmentation and hierarchy metrics: IoU, boundary IoU, localization
//! accuracy and the hierarchical consistency (HC) score.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Bitmask, MaskEntry, MaskTree};

fn check_shapes(a: &Bitmask, b: &Bitmask) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Metrics(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`; two empty masks score 1.
pub fn iou(pred: &Bitmask, gt: &Bitmask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let union = pred.union_count(gt);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(pred.intersection_count(gt) as f64 / union as f64)
}

/// Default band radius: 2% of the image diagonal, at least one pixel.
pub fn default_band_radius(width: usize, height: usize) -> usize {
    let diagonal = ((width * width + height * height) as f64).sqrt();
    ((0.02 * diagonal).round() as usize).max(1)
}

/// Erosion by a disc of radius `r`; pixels outside the image count as unset.
pub fn erode(mask: &Bitmask, r: usize) -> Bitmask {
    let ri = r as isize;
    let offsets: Vec<(isize, isize)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= ri * ri)
        .collect();
    let (w, h) = (mask.width as isize, mask.height as isize);
    Bitmask::from_fn(mask.width, mask.height, |row, col| {
        mask.get(row, col)
            && offsets.iter().all(|(dy, dx)| {
                let (y, x) = (row as isize + dy, col as isize + dx);
                y >= 0 && y < h && x >= 0 && x < w && mask.get(y as usize, x as usize)
            })
    })
}

/// Mask pixels within `r` of its boundary: the mask minus its erosion.
pub fn boundary_band(mask: &Bitmask, r: usize) -> Bitmask {
    let eroded = erode(mask, r);
    let bits = mask.bits.iter().zip(&eroded.bits).map(|(&m, &e)| m && !e).collect();
    Bitmask {
        width: mask.width,
        height: mask.height,
        bits,
    }
}

/// IoU of the two boundary bands; empty bands on both sides score 1.
pub fn boundary_iou(pred: &Bitmask, gt: &Bitmask, r: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    iou(&boundary_band(pred, r), &boundary_band(gt, r))
}

/// Fraction of predicted `(row, col)` points that fall inside their mask.
pub fn localization_accuracy(points: &[(usize, usize)], gts: &[Bitmask]) -> Result<f64> {
    if points.len() != gts.len() {
        return Err(Error::Metrics(format!("{} points for {} masks", points.len(), gts.len())));
    }
    if points.is_empty() {
        return Ok(0.0);
    }
    let hits = points
        .iter()
        .zip(gts)
        .filter(|(&(row, col), gt)| row < gt.height && col < gt.width && gt.get(row, col))
        .count();
    Ok(hits as f64 / points.len() as f64)
}

/// Which area normalizes each parent/child term of the HC score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HcOrientation {
    /// `Area(child ∩ parent) / Area(child)`: 1 on perfect nesting.
    #[default]
    ChildInParent,
    /// `Area(parent ∩ child) / Area(parent)`.
    ParentArea,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HcScore {
    pub value: f64,
    /// Number of parent/child terms that contributed.
    pub pairs: usize,
    pub no_pairs: bool,
}

/// Hierarchical consistency over the tree's level-`l` → level-`l+1` links:
/// per level pair, average over parents with children of the mean child term,
/// then average over the `L − 1` level pairs. `L` counts the distinct levels
/// among `masks`.
pub fn hc_score(masks: &[MaskEntry], tree: &MaskTree, orientation: HcOrientation) -> Result<HcScore> {
    let by_id: BTreeMap<u32, &MaskEntry> = masks.iter().map(|m| (m.id, m)).collect();
    for node in tree.nodes() {
        let mask = by_id
            .get(&node.id)
            .ok_or_else(|| Error::Metrics(format!("tree node {} has no mask", node.id)))?;
        if mask.level != node.level {
            return Err(Error::Metrics(format!("node {} level disagrees with its mask", node.id)));
        }
    }
    let levels: BTreeSet<u32> = masks.iter().map(|m| m.level.index()).collect();
    let level_count = levels.len();
    let empty = HcScore { value: 0.0, pairs: 0, no_pairs: true };
    if level_count < 2 {
        return Ok(empty);
    }
    let mut per_level: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut pairs = 0;
    for node in tree.nodes() {
        let parent = by_id[&node.id];
        let children: Vec<&MaskEntry> = node
            .children
            .iter()
            .map(|c| by_id[c])
            .filter(|c| c.level.index() == node.level.index() + 1)
            .collect();
        if children.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for child in &children {
            check_shapes(&parent.mask, &child.mask)?;
            let inter = parent.mask.intersection_count(&child.mask) as f64;
            let denominator = match orientation {
                HcOrientation::ChildInParent => child.area(),
                HcOrientation::ParentArea => parent.area(),
            };
            sum += if denominator == 0 { 0.0 } else { inter / denominator as f64 };
        }
        pairs += children.len();
        let slot = per_level.entry(node.level.index()).or_insert((0.0, 0));
        slot.0 += sum / children.len() as f64;
        slot.1 += 1;
    }
    if pairs == 0 {
        return Ok(empty);
    }
    let total: f64 = per_level.values().map(|(s, n)| s / (*n).max(1) as f64).sum();
    Ok(HcScore {
        value: total / (level_count - 1) as f64,
        pairs,
        no_pairs: false,
    })
}

/// Scores of one query against its ground-truth mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub view: u32,
    pub level: u32,
    pub label: u32,
    pub iou: f64,
    pub boundary_iou: f64,
    pub localized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: u32,
    pub queries: usize,
    pub miou: f64,
    pub mbiou: f64,
    pub localization_accuracy: f64,
}

/// Aggregate report; field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub miou: f64,
    pub mbiou: f64,
    pub localization_accuracy: f64,
    pub hc: f64,
    pub hc_pairs: usize,
    pub hc_no_pairs: bool,
    pub levels: Vec<LevelSummary>,
    pub per_query: Vec<QueryScore>,
}

impl MetricsReport {
    /// Means over queries (not over classes), overall and per level.
    pub fn from_scores(per_query: Vec<QueryScore>, hc: &HcScore) -> Self {
        fn summarize<'a>(scores: impl Iterator<Item = &'a QueryScore> + Clone) -> (usize, f64, f64, f64) {
            let n = scores.clone().count();
            if n == 0 {
                return (0, 0.0, 0.0, 0.0);
            }
            let nf = n as f64;
            (
                n,
                scores.clone().map(|s| s.iou).sum::<f64>() / nf,
                scores.clone().map(|s| s.boundary_iou).sum::<f64>() / nf,
                scores.filter(|s| s.localized).count() as f64 / nf,
            )
        }
        let levels: BTreeSet<u32> = per_query.iter().map(|s| s.level).collect();
        let levels = levels
            .into_iter()
            .map(|level| {
                let (queries, miou, mbiou, loc) = summarize(per_query.iter().filter(|s| s.level == level));
                LevelSummary {
                    level,
                    queries,
                    miou,
                    mbiou,
                    localization_accuracy: loc,
                }
            })
            .collect();
        let (queries, miou, mbiou, loc) = summarize(per_query.iter());
        MetricsReport {
            queries,
            miou,
            mbiou,
            localization_accuracy: loc,
            hc: hc.value,
            hc_pairs: hc.pairs,
            hc_no_pairs: hc.no_pairs,
            levels,
            per_query,
        }
    }

    pub fn level(&self, level: u32) -> Option<&LevelSummary> {
        self.levels.iter().find(|l| l.level == level)
    }
}

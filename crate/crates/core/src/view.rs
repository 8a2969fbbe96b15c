//! Training views: a camera plus its leveled masks, and the ground-truth
//! masks rendered from a synthetic scene's labels.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hierarchy::{Bitmask, MaskEntry};
use crate::raster::{compute_weights, render_label_map, LabelMap, WeightField};
use crate::scene::{Camera, Level, Scene, SemanticLabel};

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPacket {
    pub view_id: u32,
    pub camera: Camera,
    pub masks: Vec<MaskEntry>,
}

impl ViewPacket {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width as usize, self.camera.height as usize);
        let mut ids = BTreeMap::new();
        for m in &self.masks {
            if m.view_id != self.view_id {
                return Err(Error::Hierarchy(format!(
                    "mask {} tagged with view {}, packet is view {}",
                    m.id, m.view_id, self.view_id
                )));
            }
            if m.mask.width != w || m.mask.height != h {
                return Err(Error::Hierarchy(format!(
                    "mask {} is {}x{}, camera image is {w}x{h}",
                    m.id, m.mask.width, m.mask.height
                )));
            }
            if m.mask.is_empty() {
                return Err(Error::Hierarchy(format!("mask {} is empty", m.id)));
            }
            if ids.insert(m.id, ()).is_some() {
                return Err(Error::Hierarchy(format!("duplicate mask id {}", m.id)));
            }
        }
        Ok(())
    }

    pub fn masks_at(&self, level: Level) -> impl Iterator<Item = &MaskEntry> {
        self.masks.iter().filter(move |m| m.level == level)
    }
}

/// Ground truth of one synthetic view.
#[derive(Clone, Debug)]
pub struct GroundTruthView {
    pub packet: ViewPacket,
    pub weights: WeightField,
    pub label_map: LabelMap,
    /// Semantic label behind each mask id.
    pub mask_labels: BTreeMap<u32, SemanticLabel>,
}

impl GroundTruthView {
    pub fn mask_for(&self, label: SemanticLabel) -> Option<&MaskEntry> {
        self.mask_labels
            .iter()
            .find(|(_, l)| **l == label)
            .and_then(|(id, _)| self.packet.masks.iter().find(|m| m.id == *id))
    }
}

/// Per-label masks of a label map, for every label with at least one pixel.
pub fn label_masks(label_map: &LabelMap) -> BTreeMap<SemanticLabel, Bitmask> {
    let mut masks: BTreeMap<SemanticLabel, Bitmask> = BTreeMap::new();
    for (p, labels) in label_map.labels.iter().enumerate() {
        if let Some(labels) = labels {
            for level in Level::ALL {
                masks
                    .entry(labels.at(level))
                    .or_insert_with(|| Bitmask::empty(label_map.width, label_map.height))
                    .bits[p] = true;
            }
        }
    }
    masks
}

/// Renders the label map of `camera` and turns every visible label into a
/// mask. Mask ids count up from `first_id` in (level, label) order.
pub fn ground_truth_view(scene: &Scene, camera: &Camera, view_id: u32, first_id: u32) -> Result<GroundTruthView> {
    let weights = compute_weights(scene, camera)?;
    let label_map = render_label_map(&weights, scene)?;
    let mut masks = Vec::new();
    let mut mask_labels = BTreeMap::new();
    for (offset, (label, bits)) in label_masks(&label_map).into_iter().enumerate() {
        let id = first_id + offset as u32;
        masks.push(MaskEntry::new(id, label.level, view_id, bits)?);
        mask_labels.insert(id, label);
    }
    Ok(GroundTruthView {
        packet: ViewPacket {
            view_id,
            camera: camera.clone(),
            masks,
        },
        weights,
        label_map,
        mask_labels,
    })
}

/// Ground truth for a list of cameras with globally unique mask ids.
pub fn ground_truth_views(scene: &Scene, cameras: &[Camera]) -> Result<Vec<GroundTruthView>> {
    let mut next_id = 0;
    cameras
        .iter()
        .enumerate()
        .map(|(v, camera)| {
            let view = ground_truth_view(scene, camera, v as u32, next_id)?;
            next_id += view.packet.masks.len() as u32;
            Ok(view)
        })
        .collect()
}

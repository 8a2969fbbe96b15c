//! Alpha-blending weights and the linear feature renderer built on them.
//!
//! Geometry is frozen, so a [`WeightField`] is computed once per view and the
//! rendered feature map is the linear image `M(p) = Σ_i w_i(p) f_i` of the
//! point features. [`backprop_map_gradient`] is its exact adjoint.

use crate::error::{Error, Result};
use crate::scene::{project_point, Camera, Labels, Scene};

/// Alpha values are clamped to this before compositing.
pub const ALPHA_CLAMP: f64 = 0.999;
/// Contributions with effective alpha below this are skipped.
pub const ALPHA_CUTOFF: f64 = 1e-4;
/// Pixels whose accumulated weight falls below this are background.
pub const BACKGROUND_COVERAGE: f64 = 0.05;

/// Per-pixel front-to-back blending weights, stored row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightField {
    width: usize,
    height: usize,
    n_points: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl WeightField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Blending entries of pixel `(row, col)`, nearest first.
    pub fn pixel(&self, row: usize, col: usize) -> &[(u32, f64)] {
        self.pixel_at(row * self.width + col)
    }

    pub fn pixel_at(&self, index: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[index]..self.offsets[index + 1]]
    }

    /// Accumulated weight `Σ_i w_i(p)` for every pixel.
    pub fn coverage(&self) -> Vec<f64> {
        (0..self.pixel_count())
            .map(|p| self.pixel_at(p).iter().map(|&(_, w)| w).sum())
            .collect()
    }

    /// Builds a field from explicit per-pixel lists. Lists must already be in
    /// front-to-back order.
    pub fn from_pixels(width: usize, height: usize, n_points: usize, pixels: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Raster(format!(
                "{} pixel lists for a {width}x{height} field",
                pixels.len()
            )));
        }
        let mut offsets = Vec::with_capacity(pixels.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for list in pixels {
            let mut total = 0.0;
            for &(index, w) in &list {
                if index as usize >= n_points {
                    return Err(Error::Raster(format!("point index {index} out of range")));
                }
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Raster(format!("weight {w} outside [0,1]")));
                }
                total += w;
            }
            if total > 1.0 + 1e-9 {
                return Err(Error::Raster(format!("pixel weights sum to {total}")));
            }
            entries.extend(list);
            offsets.push(entries.len());
        }
        Ok(WeightField {
            width,
            height,
            n_points,
            offsets,
            entries,
        })
    }
}

/// Effective alpha of a screen-space isotropic footprint at squared pixel
/// distance `dist2`.
fn footprint_alpha(opacity: f64, sigma_pix: f64, dist2: f64) -> f64 {
    (opacity * (-dist2 / (2.0 * sigma_pix * sigma_pix)).exp()).min(ALPHA_CLAMP)
}

pub fn compute_weights(scene: &Scene, camera: &Camera) -> Result<WeightField> {
    camera.validate()?;
    let (width, height) = (camera.width as usize, camera.height as usize);
    // (depth, point index, alpha) candidates per pixel
    let mut candidates: Vec<Vec<(f64, u32, f64)>> = vec![Vec::new(); width * height];
    for (index, point) in scene.points.iter().enumerate() {
        let Some((center, depth)) = project_point(camera, point.position).visible() else {
            continue;
        };
        let sigma = camera.focal * point.scale / depth;
        if !(sigma > 0.0 && sigma.is_finite()) {
            continue;
        }
        // beyond this radius opacity * exp(-r²/2σ²) < cutoff
        let reach = sigma * (2.0 * (point.opacity / ALPHA_CUTOFF).ln().max(0.0)).sqrt();
        let col_lo = (center[0] - reach).ceil().max(0.0);
        let col_hi = (center[0] + reach).floor().min(width as f64 - 1.0);
        let row_lo = (center[1] - reach).ceil().max(0.0);
        let row_hi = (center[1] + reach).floor().min(height as f64 - 1.0);
        if col_lo > col_hi || row_lo > row_hi {
            continue;
        }
        for row in row_lo as usize..=row_hi as usize {
            for col in col_lo as usize..=col_hi as usize {
                let dx = col as f64 - center[0];
                let dy = row as f64 - center[1];
                let alpha = footprint_alpha(point.opacity, sigma, dx * dx + dy * dy);
                if alpha >= ALPHA_CUTOFF {
                    candidates[row * width + col].push((depth, index as u32, alpha));
                }
            }
        }
    }

    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut entries = Vec::new();
    offsets.push(0);
    for mut list in candidates {
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut transmittance = 1.0;
        for (_, index, alpha) in list {
            entries.push((index, alpha * transmittance));
            transmittance *= 1.0 - alpha;
        }
        offsets.push(entries.len());
    }
    Ok(WeightField {
        width,
        height,
        n_points: scene.len(),
        offsets,
        entries,
    })
}

/// `d × H × W` map, channel-major and row-major within a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub d: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(d: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            d,
            height,
            width,
            values: vec![0.0; d * height * width],
        }
    }

    pub fn new(d: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != d * height * width {
            return Err(Error::Raster(format!(
                "{} values for a {d}x{height}x{width} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Raster("feature map holds non-finite values".into()));
        }
        Ok(FeatureMap {
            d,
            height,
            width,
            values,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, channel: usize, pixel: usize) -> f64 {
        self.values[channel * self.pixel_count() + pixel]
    }

    pub fn add(&mut self, channel: usize, pixel: usize, value: f64) {
        let n = self.pixel_count();
        self.values[channel * n + pixel] += value;
    }

    /// Feature vector of one pixel (row-major index).
    pub fn pixel(&self, pixel: usize) -> Vec<f64> {
        (0..self.d).map(|c| self.get(c, pixel)).collect()
    }

    pub fn dot(&self, other: &FeatureMap) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Renders from a flat row-major `n × d` feature buffer.
pub fn render_features(weights: &WeightField, features: &[f64], d: usize) -> Result<FeatureMap> {
    if d == 0 || features.len() != weights.n_points * d {
        return Err(Error::Raster(format!(
            "feature buffer of {} values does not match {} points x d={d}",
            features.len(),
            weights.n_points
        )));
    }
    let n = weights.pixel_count();
    let mut map = FeatureMap::zeros(d, weights.height, weights.width);
    for p in 0..n {
        for &(index, w) in weights.pixel_at(p) {
            let f = &features[index as usize * d..(index as usize + 1) * d];
            for (c, value) in f.iter().enumerate() {
                map.values[c * n + p] += w * value;
            }
        }
    }
    Ok(map)
}

pub fn render_feature_map(weights: &WeightField, scene: &Scene) -> Result<FeatureMap> {
    if weights.n_points != scene.len() {
        return Err(Error::Raster(format!(
            "weights built for {} points, scene has {}",
            weights.n_points,
            scene.len()
        )));
    }
    render_features(weights, &scene.features(), scene.d)
}

/// Adjoint of [`render_features`]: `grad(f_i) = Σ_p w_i(p) · map_grad(p)`.
/// Pixels are visited in a fixed order so the accumulation is reproducible.
pub fn backprop_map_gradient(weights: &WeightField, map_grad: &FeatureMap) -> Result<Vec<f64>> {
    if map_grad.height != weights.height || map_grad.width != weights.width {
        return Err(Error::Raster(format!(
            "gradient map is {}x{}, weights are {}x{}",
            map_grad.height, map_grad.width, weights.height, weights.width
        )));
    }
    let (d, n) = (map_grad.d, weights.pixel_count());
    let mut grad = vec![0.0; weights.n_points * d];
    for p in 0..n {
        for &(index, w) in weights.pixel_at(p) {
            let base = index as usize * d;
            for c in 0..d {
                grad[base + c] += w * map_grad.values[c * n + p];
            }
        }
    }
    Ok(grad)
}

/// Per-pixel ground-truth labels; `None` is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Option<Labels>>,
}

/// Label of the max-weight point per pixel (first in depth order on ties).
pub fn render_label_map(weights: &WeightField, scene: &Scene) -> Result<LabelMap> {
    if weights.n_points != scene.len() {
        return Err(Error::Raster(format!(
            "weights built for {} points, scene has {}",
            weights.n_points,
            scene.len()
        )));
    }
    let labels = (0..weights.pixel_count())
        .map(|p| {
            let list = weights.pixel_at(p);
            let total: f64 = list.iter().map(|&(_, w)| w).sum();
            if list.is_empty() || total < BACKGROUND_COVERAGE {
                return None;
            }
            let mut best = list[0];
            for &entry in &list[1..] {
                if entry.1 > best.1 {
                    best = entry;
                }
            }
            Some(scene.points[best.0 as usize].labels)
        })
        .collect();
    Ok(LabelMap {
        width: weights.width,
        height: weights.height,
        labels,
    })
}

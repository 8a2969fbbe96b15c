//! Relevancy scoring, smoothing, thresholding and localization for label
//! queries against a rendered feature map.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, Decode, LabelDictionary};
use crate::error::{Error, Result};
use crate::hierarchy::Bitmask;
use crate::raster::{FeatureMap, BACKGROUND_COVERAGE};
use crate::scene::SemanticLabel;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub view_id: u32,
    pub label: SemanticLabel,
    pub width: usize,
    pub height: usize,
    /// Row-major scores in `[0, 1]`.
    pub values: Vec<f64>,
    /// Pixels that take part in normalization.
    pub support: Vec<bool>,
}

impl ScoreMap {
    pub fn new(view_id: u32, label: SemanticLabel, width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Query(format!("{} scores for a {width}x{height} map", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Query(format!("score {v} outside [0, 1]")));
        }
        Ok(ScoreMap {
            view_id,
            label,
            width,
            height,
            support: vec![true; values.len()],
            values,
        })
    }

    /// Restricts the support to pixels with at least `min_coverage` blended
    /// opacity; scores outside it drop to 0.
    pub fn restrict_support(mut self, coverage: &[f64], min_coverage: f64) -> Result<Self> {
        if coverage.len() != self.values.len() {
            return Err(Error::Query("coverage does not match the score map".into()));
        }
        for ((s, v), &c) in self.support.iter_mut().zip(&mut self.values).zip(coverage) {
            if c < min_coverage {
                *s = false;
                *v = 0.0;
            }
        }
        Ok(self)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Decodes every pixel feature and scores it by `(cos + 1) / 2` against the
/// label's ambient embedding. All-zero pixels score 0.
pub fn relevancy_map(
    map: &FeatureMap,
    decoder: &dyn Decode,
    dict: &LabelDictionary,
    label: SemanticLabel,
    view_id: u32,
) -> Result<ScoreMap> {
    if map.d != decoder.latent_dim() {
        return Err(Error::Query(format!("feature map d={} but decoder d={}", map.d, decoder.latent_dim())));
    }
    let query = dict
        .get(label)
        .map_err(|_| Error::Query(format!("unknown label {:?} {}", label.level, label.id)))?;
    if query.len() != decoder.ambient_dim() {
        return Err(Error::Query("dictionary and codec dimensions differ".into()));
    }
    let values = (0..map.pixel_count())
        .map(|p| {
            let feature = map.pixel(p);
            if feature.iter().all(|&v| v == 0.0) {
                return 0.0;
            }
            let decoded = decoder.decode_feature(&feature);
            if decoded.iter().all(|&v| v == 0.0) {
                return 0.0;
            }
            ((cosine(&decoded, query) + 1.0) / 2.0).clamp(0.0, 1.0)
        })
        .collect();
    ScoreMap::new(view_id, label, map.width, map.height, values)
}

/// Filter size for images of `height` rows: 20 at 1080 rows, at least 3.
pub fn desk_filter_size(height: usize) -> usize {
    ((20.0 * height as f64 / 1080.0).round() as usize).max(3)
}

/// Box mean over a `k × k` window with edge-clamped indices. Windows span
/// offsets `-k/2 ..= k-1-k/2`. When `k` exceeds both dimensions every pixel
/// gets the global mean.
pub fn smooth(map: &ScoreMap, k: usize) -> Result<ScoreMap> {
    if k == 0 {
        return Err(Error::Query("filter size must be at least 1".into()));
    }
    let (w, h) = (map.width, map.height);
    let values = if k > w && k > h {
        let mean = map.values.iter().sum::<f64>() / map.values.len().max(1) as f64;
        vec![mean; map.values.len()]
    } else {
        let lo = -((k / 2) as isize);
        let hi = (k - 1 - k / 2) as isize;
        let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
        let area = (k * k) as f64;
        let mut out = vec![0.0; w * h];
        for row in 0..h {
            for col in 0..w {
                let mut sum = 0.0;
                for dy in lo..=hi {
                    let r = clamp(row as isize + dy, h);
                    for dx in lo..=hi {
                        sum += map.values[r * w + clamp(col as isize + dx, w)];
                    }
                }
                out[row * w + col] = sum / area;
            }
        }
        out
    };
    Ok(ScoreMap {
        values: values.into_iter().map(|v: f64| v.clamp(0.0, 1.0)).collect(),
        ..map.clone()
    })
}

/// Scores closer than this count as equal during normalization.
pub const FLAT_RANGE: f64 = 1e-9;

fn range(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Min-max normalizes over the support, then keeps supported pixels scoring
/// at least `threshold`. A support with flat scores is normalized against
/// the whole map instead; a constant map yields an empty mask.
pub fn segment(map: &ScoreMap, threshold: f64) -> Bitmask {
    let supported = map.values.iter().zip(&map.support).filter(|(_, &s)| s).map(|(v, _)| *v);
    let (mut lo, mut hi) = range(supported);
    if !(hi - lo > FLAT_RANGE) {
        (lo, hi) = range(map.values.iter().copied());
    }
    if !(hi - lo > FLAT_RANGE) {
        return Bitmask::empty(map.width, map.height);
    }
    let bits = map
        .values
        .iter()
        .zip(&map.support)
        .map(|(&v, &s)| s && (v - lo) / (hi - lo) >= threshold)
        .collect();
    Bitmask {
        width: map.width,
        height: map.height,
        bits,
    }
}

/// Row-major first argmax.
pub fn localize(map: &ScoreMap) -> (usize, usize) {
    let mut best = 0;
    for (i, v) in map.values.iter().enumerate() {
        if *v > map.values[best] {
            best = i;
        }
    }
    (best / map.width, best % map.width)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    pub threshold: f64,
    /// Smoothing window; `None` scales with image height.
    pub filter_size: Option<usize>,
    /// Threshold the smoothed map instead of the raw one.
    pub smooth_before_segment: bool,
    pub min_coverage: f64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            threshold: 0.4,
            filter_size: None,
            smooth_before_segment: false,
            min_coverage: BACKGROUND_COVERAGE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub view_id: u32,
    pub label: SemanticLabel,
    pub mask: Bitmask,
    pub argmax: (usize, usize),
    pub peak: f64,
    pub scores: ScoreMap,
}

/// Full query on one view: score, restrict to covered pixels, smooth,
/// segment and localize.
pub fn run_query(
    map: &FeatureMap,
    coverage: &[f64],
    decoder: &dyn Decode,
    dict: &LabelDictionary,
    label: SemanticLabel,
    view_id: u32,
    cfg: &QueryConfig,
) -> Result<QueryResult> {
    let scores = relevancy_map(map, decoder, dict, label, view_id)?.restrict_support(coverage, cfg.min_coverage)?;
    let k = cfg.filter_size.unwrap_or_else(|| desk_filter_size(map.height));
    let smoothed = smooth(&scores, k)?;
    let mask = segment(if cfg.smooth_before_segment { &smoothed } else { &scores }, cfg.threshold);
    let argmax = localize(&smoothed);
    Ok(QueryResult {
        view_id,
        label,
        mask,
        argmax,
        peak: smoothed.get(argmax.0, argmax.1),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::embed::SemanticCodec;
    use crate::scene::Level;

    const LABEL: SemanticLabel = SemanticLabel { level: Level::Whole, id: 0 };

    fn row(values: &[f64]) -> ScoreMap {
        ScoreMap::new(0, LABEL, values.len(), 1, values.to_vec()).unwrap()
    }

    fn identity_codec(dim: usize) -> SemanticCodec {
        let eye: Vec<f64> = (0..dim * dim).map(|k| if k % (dim + 1) == 0 { 1.0 } else { 0.0 }).collect();
        SemanticCodec::from_matrices(dim, dim, eye.clone(), eye).unwrap()
    }

    fn two_label_dict() -> LabelDictionary {
        let mut v = BTreeMap::new();
        v.insert(LABEL, vec![1.0, 0.0, 0.0]);
        v.insert(SemanticLabel { level: Level::Whole, id: 1 }, vec![0.0, 1.0, 0.0]);
        LabelDictionary::new(3, v).unwrap()
    }

    #[test]
    fn relevancy_conventions() {
        let map = FeatureMap::new(3, 1, 3, vec![2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = relevancy_map(&map, &identity_codec(3), &two_label_dict(), LABEL, 0).unwrap();
        assert_eq!(s.values, vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn unknown_label_rejected() {
        let map = FeatureMap::zeros(3, 1, 1);
        let missing = SemanticLabel { level: Level::Part, id: 9 };
        assert!(relevancy_map(&map, &identity_codec(3), &two_label_dict(), missing, 0).is_err());
    }

    #[test]
    fn smoothing_examples() {
        let s = smooth(&row(&[0.0, 1.0, 0.0]), 3).unwrap();
        for v in s.values {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = row(&[0.2, 0.9, 0.4]);
        assert_eq!(smooth(&m, 1).unwrap().values, m.values);
        assert_eq!(smooth(&row(&[0.3; 5]), 3).unwrap().values, vec![0.3; 5]);
        let big = smooth(&row(&[0.0, 0.3, 0.9]), 7).unwrap();
        assert!(big.values.iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert!(smooth(&m, 0).is_err());
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(segment(&row(&[0.3, 0.5]), 0.4).bits, vec![false, true]);
        assert!(segment(&row(&[0.6, 0.6, 0.6]), 0.4).is_empty());
        assert_eq!(segment(&row(&[0.0, 0.2, 1.0]), 0.4).bits, vec![false, false, true]);
    }

    #[test]
    fn support_limits_normalization() {
        let s = row(&[0.5, 0.6, 1.0]).restrict_support(&[0.0, 1.0, 1.0], 0.05).unwrap();
        assert_eq!(s.values[0], 0.0);
        // normalized over {0.6, 1.0} only
        assert_eq!(segment(&s, 0.4).bits, vec![false, false, true]);
    }

    #[test]
    fn flat_support_keeps_whole_support() {
        let s = row(&[0.2, 0.8, 0.8 + 1e-15]).restrict_support(&[0.0, 1.0, 1.0], 0.05).unwrap();
        assert_eq!(segment(&s, 0.4).bits, vec![false, true, true]);
    }

    #[test]
    fn localization_examples() {
        assert_eq!(localize(&row(&[0.1, 0.7, 0.3])), (0, 1));
        let tie = ScoreMap::new(0, LABEL, 2, 2, vec![0.1, 0.9, 0.9, 0.0]).unwrap();
        assert_eq!(localize(&tie), (0, 1));
    }

    #[test]
    fn desk_filter_sizes() {
        assert_eq!(desk_filter_size(1080), 20);
        assert_eq!(desk_filter_size(64), 3);
        assert_eq!(desk_filter_size(540), 10);
    }

    fn score_map() -> impl Strategy<Value = ScoreMap> {
        (1usize..8, 1usize..8).prop_flat_map(|(w, h)| {
            prop::collection::vec(0.0f64..=1.0, w * h).prop_map(move |v| ScoreMap::new(0, LABEL, w, h, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn argmax_survives_increasing_transforms(m in score_map()) {
            let scaled = ScoreMap { values: m.values.iter().map(|v| v * 3.0).collect(), ..m.clone() };
            let squared = ScoreMap { values: m.values.iter().map(|v| v * v).collect(), ..m.clone() };
            prop_assert_eq!(localize(&m), localize(&scaled));
            prop_assert_eq!(localize(&m), localize(&squared));
        }

        #[test]
        fn raising_threshold_never_adds_pixels(m in score_map(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let loose = segment(&m, lo);
            let strict = segment(&m, hi);
            prop_assert!(strict.bits.iter().zip(&loose.bits).all(|(s, l)| !s || *l));
        }

        #[test]
        fn smoothing_stays_in_range(m in score_map(), k in 1usize..10) {
            let lo = m.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = m.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s = smooth(&m, k).unwrap();
            prop_assert!(s.values.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        }
    }
}

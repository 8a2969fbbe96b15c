//! Feature optimization over cached views, plus a finite-difference
//! gradient checker.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{evaluate_term, HyperParams, LossDiagnostics, LossTerm, PreparedView};
use crate::scene::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Decay the rate log-linearly to this value by the last iteration.
    pub final_learning_rate: Option<f64>,
    pub optimizer: Optimizer,
    pub views_per_step: usize,
    /// Visit views in a seeded random order each epoch instead of in order.
    pub shuffle_views: bool,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            learning_rate: 2.5e-2,
            final_learning_rate: None,
            optimizer: Optimizer::default(),
            views_per_step: 1,
            shuffle_views: false,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Step size used at `iteration`.
    pub fn rate_at(&self, iteration: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.iterations > 1 => {
                let t = iteration as f64 / (self.iterations - 1) as f64;
                (self.learning_rate.ln() * (1.0 - t) + end.ln() * t).exp()
            }
            _ => self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("final learning rate {lr} must be positive")));
            }
        }
        if self.views_per_step == 0 {
            return Err(Error::Config("views_per_step must be at least 1".into()));
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
                return Err(Error::Config("adam parameters out of range".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub total: Vec<f64>,
    pub l_h: Vec<f64>,
    pub l_ins: Vec<f64>,
    pub l_part: Vec<f64>,
    pub diagnostics: LossDiagnostics,
    /// Not serialized, so reports of identical runs compare equal byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
    /// SHA-256 over the little-endian bytes of the final features.
    pub checksum: String,
}

pub fn feature_checksum(features: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in features {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

/// Views used at each step: consecutive windows of a (possibly shuffled)
/// epoch order.
struct ViewSchedule {
    order: Vec<usize>,
    cursor: usize,
    shuffle: bool,
    rng: ChaCha8Rng,
}

impl ViewSchedule {
    fn new(count: usize, shuffle: bool, seed: u64) -> Self {
        let mut schedule = ViewSchedule {
            order: (0..count).collect(),
            cursor: 0,
            shuffle,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        if shuffle {
            schedule.order.shuffle(&mut schedule.rng);
        }
        schedule
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        (0..k.min(self.order.len()))
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.cursor = 0;
                    if self.shuffle {
                        self.order.shuffle(&mut self.rng);
                    }
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

pub fn train(scene: &Scene, views: &[PreparedView], hp: &HyperParams, cfg: &TrainConfig) -> Result<(Vec<f64>, TrainReport)> {
    train_with_checkpoints(scene, views, hp, cfg, |_, _| Ok(()))
}

/// Optimizes the point features only; `on_checkpoint(iteration, features)`
/// runs every `checkpoint_every` iterations.
pub fn train_with_checkpoints(
    scene: &Scene,
    views: &[PreparedView],
    hp: &HyperParams,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<(Vec<f64>, TrainReport)> {
    cfg.validate()?;
    hp.validate()?;
    if views.is_empty() {
        return Err(Error::Train("no training views".into()));
    }
    let start = Instant::now();
    let d = scene.d;
    let mut features = scene.features();
    let mut adam = AdamState {
        m: vec![0.0; features.len()],
        v: vec![0.0; features.len()],
        step: 0,
    };
    let mut schedule = ViewSchedule::new(views.len(), cfg.shuffle_views, cfg.seed);
    let mut report = TrainReport::default();
    let mut batch = Vec::with_capacity(cfg.views_per_step);

    for iteration in 0..cfg.iterations {
        batch.clear();
        batch.extend(schedule.next(cfg.views_per_step).into_iter().map(|i| views[i].clone()));
        let loss = evaluate_term(&batch, &features, d, hp, LossTerm::Total)?;
        for (term, value) in [("l_h", loss.l_h), ("l_ins", loss.l_ins), ("l_part", loss.l_part), ("total", loss.value)] {
            if !value.is_finite() {
                return Err(Error::NonFinite { iteration, term });
            }
        }
        if loss.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { iteration, term: "gradient" });
        }
        report.total.push(loss.value);
        report.l_h.push(loss.l_h);
        report.l_ins.push(loss.l_ins);
        report.l_part.push(loss.l_part);
        report.diagnostics.absorb(&loss.diagnostics);

        let lr = cfg.rate_at(iteration);
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (f, g) in features.iter_mut().zip(&loss.gradient) {
                    *f -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                adam.step += 1;
                let c1 = 1.0 - beta1.powi(adam.step);
                let c2 = 1.0 - beta2.powi(adam.step);
                for (k, g) in loss.gradient.iter().enumerate() {
                    adam.m[k] = beta1 * adam.m[k] + (1.0 - beta1) * g;
                    adam.v[k] = beta2 * adam.v[k] + (1.0 - beta2) * g * g;
                    let m_hat = adam.m[k] / c1;
                    let v_hat = adam.v[k] / c2;
                    features[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        if cfg.checkpoint_every > 0 && (iteration + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(iteration + 1, &features)?;
        }
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    report.checksum = feature_checksum(&features);
    Ok((features, report))
}

#[derive(Clone, Debug, PartialEq)]
pub enum GradientCheck {
    /// Largest relative error over the probed coordinates.
    MaxRelativeError { error: f64, probes: usize },
    /// The loss has no contributing term and its gradient vanishes.
    NoDifferentiableTerms,
}

impl GradientCheck {
    pub fn error(&self) -> Option<f64> {
        match self {
            GradientCheck::MaxRelativeError { error, .. } => Some(*error),
            GradientCheck::NoDifferentiableTerms => None,
        }
    }
}

pub const FD_STEP: f64 = 1e-4;

/// Compares the analytic gradient of `term` with central differences at
/// `n_probes` seeded random coordinates. Errors are
/// `|a − n| / max(|a|, |n|, 1e-3·‖g‖∞, 1e-10)` so that coordinates with a
/// negligible gradient are judged against the gradient's overall scale.
pub fn gradient_check(
    features: &[f64],
    d: usize,
    view: &PreparedView,
    hp: &HyperParams,
    term: LossTerm,
    n_probes: usize,
    seed: u64,
) -> Result<GradientCheck> {
    let views = std::slice::from_ref(view);
    let analytic = evaluate_term(views, features, d, hp, term)?;
    let scale = analytic.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if scale == 0.0 && analytic.value == 0.0 {
        return Ok(GradientCheck::NoDifferentiableTerms);
    }
    let floor = (1e-3 * scale).max(1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = features.to_vec();
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let k = rng.random_range(0..features.len());
        probe[k] = features[k] + FD_STEP;
        let plus = evaluate_term(views, &probe, d, hp, term)?.value;
        probe[k] = features[k] - FD_STEP;
        let minus = evaluate_term(views, &probe, d, hp, term)?.value;
        probe[k] = features[k];
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic.gradient[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(GradientCheck::MaxRelativeError {
        error: worst,
        probes: n_probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{Bitmask, MaskEntry};
    use crate::losses::prepare_view;
    use crate::raster::{compute_weights, render_features};
    use crate::scene::{generate_scene, orbit_cameras, Level, SceneSpec};
    use crate::view::{ground_truth_views, ViewPacket};

    fn quadratic_only() -> HyperParams {
        HyperParams {
            lambda1: 0.0,
            lambda2: 0.0,
            ..HyperParams::default()
        }
    }

    /// One 16×16 view with a single mask over every covered pixel.
    fn single_mask_view(scene: &Scene) -> PreparedView {
        let camera = orbit_cameras(1, 16, 16, 1.0, 60.0, 0.0).unwrap().remove(0);
        let weights = compute_weights(scene, &camera).unwrap();
        let coverage = weights.coverage();
        let mask = Bitmask::from_bits(16, 16, coverage.iter().map(|&c| c >= 0.05).collect()).unwrap();
        let packet = ViewPacket {
            view_id: 0,
            camera,
            masks: vec![MaskEntry::new(0, Level::Whole, 0, mask).unwrap()],
        };
        prepare_view(scene, packet, 0.9).unwrap()
    }

    /// Gradient descent on `‖P W f‖²` (P centers over the mask) converges to
    /// the solution nearest the start: `f* = f0 − A⁺ A f0` with `A = P W`.
    fn least_squares_fixed_point(view: &PreparedView, f0: &[f64], d: usize) -> Vec<f64> {
        let pixels = view.packet.masks[0].mask.indices();
        let n = view.weights.n_points();
        let mut a = nalgebra::DMatrix::<f64>::zeros(pixels.len(), n);
        for (r, &p) in pixels.iter().enumerate() {
            for &(i, w) in view.weights.pixel_at(p) {
                a[(r, i as usize)] += w;
            }
        }
        let col_means = a.row_mean();
        for mut row in a.row_iter_mut() {
            row -= &col_means;
        }
        let pinv = a.clone().pseudo_inverse(1e-12).unwrap();
        let proj = pinv * a;
        let mut out = f0.to_vec();
        for c in 0..d {
            let x = nalgebra::DVector::from_iterator(n, (0..n).map(|i| f0[i * d + c]));
            let y = &x - &proj * &x;
            for i in 0..n {
                out[i * d + c] = y[i];
            }
        }
        out
    }

    /// Wide Gaussians so a 16×16 view is mostly covered.
    fn blurry_scene() -> Scene {
        let mut scene = generate_scene(&SceneSpec::new(1, 2, 2, 3, 5)).unwrap();
        for p in &mut scene.points {
            p.scale *= 3.0;
        }
        scene
    }

    #[test]
    fn sgd_converges_to_least_squares_fixed_point() {
        let scene = blurry_scene();
        let view = single_mask_view(&scene);
        // below 2/λmax of this view's Hessian (about 0.28)
        let cfg = TrainConfig {
            iterations: 5000,
            learning_rate: 0.2,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let (features, report) = train(&scene, std::slice::from_ref(&view), &quadratic_only(), &cfg).unwrap();
        assert_eq!(report.total.len(), 5000);
        let oracle = least_squares_fixed_point(&view, &scene.features(), scene.d);
        let map = render_features(&view.weights, &features, scene.d).unwrap();
        let expected = render_features(&view.weights, &oracle, scene.d).unwrap();
        let worst = map.values.iter().zip(&expected.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst < 1e-3, "map differs from the fixed point by {worst}");
    }

    #[test]
    fn small_step_sgd_is_monotone() {
        let scene = blurry_scene();
        let view = single_mask_view(&scene);
        let cfg = TrainConfig {
            iterations: 1000,
            learning_rate: 1e-2,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let (_, report) = train(&scene, std::slice::from_ref(&view), &quadratic_only(), &cfg).unwrap();
        for w in report.total.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} > {}", w[1], w[0]);
        }
        assert!(report.total[999] < report.total[0]);
    }

    #[test]
    fn zero_gradient_leaves_features_unchanged() {
        let mut scene = generate_scene(&SceneSpec::new(1, 2, 2, 3, 5)).unwrap();
        let constant = vec![0.0; scene.len() * scene.d];
        scene.set_features(&constant).unwrap();
        let view = single_mask_view(&scene);
        let cfg = TrainConfig {
            iterations: 10,
            ..TrainConfig::default()
        };
        let (features, _) = train(&scene, std::slice::from_ref(&view), &quadratic_only(), &cfg).unwrap();
        for (a, b) in features.iter().zip(&constant) {
            assert!(a == b);
        }
    }

    fn desk_views(scene: &Scene) -> Vec<PreparedView> {
        let cameras = orbit_cameras(3, 24, 24, 1.0, 60.0, 0.1).unwrap();
        ground_truth_views(scene, &cameras)
            .unwrap()
            .into_iter()
            .map(|v| prepare_view(scene, v.packet, 0.9).unwrap())
            .collect()
    }

    #[test]
    fn same_seed_same_checksum() {
        let scene = generate_scene(&SceneSpec::new(2, 2, 2, 3, 9)).unwrap();
        let views = desk_views(&scene);
        let cfg = TrainConfig {
            iterations: 20,
            shuffle_views: true,
            seed: 4,
            ..TrainConfig::default()
        };
        let (_, a) = train(&scene, &views, &HyperParams::default(), &cfg).unwrap();
        let (_, b) = train(&scene, &views, &HyperParams::default(), &cfg).unwrap();
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn checkpoints_fire_on_schedule() {
        let scene = generate_scene(&SceneSpec::new(1, 2, 2, 3, 9)).unwrap();
        let views = desk_views(&scene);
        let cfg = TrainConfig {
            iterations: 10,
            checkpoint_every: 4,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        train_with_checkpoints(&scene, &views, &HyperParams::default(), &cfg, |i, _| {
            seen.push(i);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![4, 8]);
    }

    #[test]
    fn round_robin_order() {
        let mut s = ViewSchedule::new(3, false, 0);
        let picks: Vec<Vec<usize>> = (0..4).map(|_| s.next(2)).collect();
        assert_eq!(picks, vec![vec![0, 1], vec![2, 0], vec![1, 2], vec![0, 1]]);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(TrainConfig { iterations: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_iteration() {
        let mut scene = generate_scene(&SceneSpec::new(1, 2, 2, 3, 5)).unwrap();
        let view = single_mask_view(&scene);
        scene.points[0].feature[0] = 1e300;
        let err = train(&scene, std::slice::from_ref(&view), &quadratic_only(), &TrainConfig { iterations: 3, ..TrainConfig::default() });
        match err {
            Err(Error::NonFinite { iteration: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quadratic_gradient_check_is_tight() {
        let scene = generate_scene(&SceneSpec::new(2, 2, 2, 3, 11)).unwrap();
        let views = desk_views(&scene);
        let check = gradient_check(&scene.features(), scene.d, &views[0], &quadratic_only(), LossTerm::Total, 30, 1).unwrap();
        assert!(check.error().unwrap() < 1e-6, "{check:?}");
    }

    #[test]
    fn full_gradient_check() {
        let scene = generate_scene(&SceneSpec::new(2, 2, 2, 3, 12)).unwrap();
        let views = desk_views(&scene);
        let hp = HyperParams {
            lambda1: 0.5,
            lambda2: 0.5,
            ..HyperParams::default()
        };
        let check = gradient_check(&scene.features(), scene.d, &views[1], &hp, LossTerm::Total, 30, 2).unwrap();
        assert!(check.error().unwrap() < 1e-4, "{check:?}");
    }

    #[test]
    fn zero_features_have_no_differentiable_terms() {
        let scene = generate_scene(&SceneSpec::new(2, 2, 2, 3, 12)).unwrap();
        let views = desk_views(&scene);
        let zeros = vec![0.0; scene.len() * scene.d];
        let check = gradient_check(&zeros, scene.d, &views[0], &HyperParams::default(), LossTerm::Total, 5, 0).unwrap();
        assert_eq!(check, GradientCheck::NoDifferentiableTerms);
    }
}

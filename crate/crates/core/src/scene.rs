//! Scene and camera records plus the synthetic multi-view scene generator.
//!
//! Scenes are flat arrangements of concentric clusters on the `y = 0` ground
//! plane: every whole object holds its parts on a ring inside its radius, every
//! part holds its subparts the same way, and every subpart owns a handful of
//! isotropic Gaussians. Because sibling discs never overlap, the per-pixel
//! label masks rendered from elevated cameras are strictly nested.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(a: Vec3) -> Option<Vec3> {
    let n = dot(a, a).sqrt();
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

/// Semantic granularity of a label or mask. The numeric values are the tree
/// levels used throughout: whole = 1, part = 2, subpart = 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Level {
    Whole = 1,
    Part = 2,
    Subpart = 3,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Whole, Level::Part, Level::Subpart];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn from_index(level: u32) -> Option<Level> {
        match level {
            1 => Some(Level::Whole),
            2 => Some(Level::Part),
            3 => Some(Level::Subpart),
            _ => None,
        }
    }
}

impl TryFrom<u32> for Level {
    type Error = String;

    fn try_from(value: u32) -> std::result::Result<Self, Self::Error> {
        Level::from_index(value).ok_or_else(|| format!("level {value} outside {{1,2,3}}"))
    }
}

impl From<Level> for u32 {
    fn from(level: Level) -> u32 {
        level.index()
    }
}

/// Ground-truth label triple of a Gaussian. Identifiers are unique within
/// their level across the whole scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Labels {
    pub whole: u32,
    pub part: u32,
    pub subpart: u32,
}

impl Labels {
    pub fn at(&self, level: Level) -> SemanticLabel {
        let id = match level {
            Level::Whole => self.whole,
            Level::Part => self.part,
            Level::Subpart => self.subpart,
        };
        SemanticLabel { level, id }
    }
}

/// A label identifier qualified by its level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemanticLabel {
    pub level: Level,
    pub id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPoint {
    pub position: Vec3,
    pub opacity: f64,
    /// Isotropic standard deviation in world units.
    pub scale: f64,
    pub feature: Vec<f64>,
    pub labels: Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub points: Vec<GaussianPoint>,
    pub d: usize,
}

impl Scene {
    pub fn new(points: Vec<GaussianPoint>, d: usize) -> Result<Self> {
        let scene = Scene { points, d };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks per-point ranges, feature dimension and label nesting.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Scene("scene has no points".into()));
        }
        if self.d == 0 {
            return Err(Error::Scene("feature dimension must be positive".into()));
        }
        let mut part_owner: BTreeMap<u32, u32> = BTreeMap::new();
        let mut subpart_owner: BTreeMap<u32, u32> = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            if !(p.opacity > 0.0 && p.opacity <= 1.0) {
                return Err(Error::Scene(format!("point {i}: opacity {} outside (0,1]", p.opacity)));
            }
            if !(p.scale > 0.0 && p.scale.is_finite()) {
                return Err(Error::Scene(format!("point {i}: scale {} not positive", p.scale)));
            }
            if p.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::Scene(format!("point {i}: non-finite position")));
            }
            if p.feature.len() != self.d {
                return Err(Error::Scene(format!(
                    "point {i}: feature has {} entries, scene d = {}",
                    p.feature.len(),
                    self.d
                )));
            }
            if p.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::Scene(format!("point {i}: non-finite feature")));
            }
            if *part_owner.entry(p.labels.part).or_insert(p.labels.whole) != p.labels.whole {
                return Err(Error::Scene(format!(
                    "part {} appears under more than one whole",
                    p.labels.part
                )));
            }
            if *subpart_owner.entry(p.labels.subpart).or_insert(p.labels.part) != p.labels.part {
                return Err(Error::Scene(format!(
                    "subpart {} appears under more than one part",
                    p.labels.subpart
                )));
            }
        }
        Ok(())
    }

    /// Row-major `n × d` copy of all point features.
    pub fn features(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.feature.iter().copied()).collect()
    }

    pub fn set_features(&mut self, features: &[f64]) -> Result<()> {
        if features.len() != self.points.len() * self.d {
            return Err(Error::Scene(format!(
                "feature buffer has {} values, expected {}",
                features.len(),
                self.points.len() * self.d
            )));
        }
        for (p, f) in self.points.iter_mut().zip(features.chunks_exact(self.d)) {
            p.feature.copy_from_slice(f);
        }
        Ok(())
    }

    /// Distinct labels present at `level`, ascending.
    pub fn labels_at(&self, level: Level) -> Vec<u32> {
        let mut ids: Vec<u32> = self.points.iter().map(|p| p.labels.at(level).id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Parent label of a part or subpart label.
    pub fn parent_of(&self, label: SemanticLabel) -> Option<SemanticLabel> {
        let point = self.points.iter().find(|p| p.labels.at(label.level) == label)?;
        match label.level {
            Level::Whole => None,
            Level::Part => Some(point.labels.at(Level::Whole)),
            Level::Subpart => Some(point.labels.at(Level::Part)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_whole: u32,
    pub parts_per_whole: u32,
    pub subparts_per_part: u32,
    pub gaussians_per_subpart: u32,
    /// Radius of the region holding all objects, in world units.
    #[serde(default = "SceneSpec::default_extent")]
    pub extent: f64,
    #[serde(default = "SceneSpec::default_d")]
    pub d: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(n_whole: u32, parts_per_whole: u32, subparts_per_part: u32, gaussians_per_subpart: u32, seed: u64) -> Self {
        SceneSpec {
            n_whole,
            parts_per_whole,
            subparts_per_part,
            gaussians_per_subpart,
            extent: Self::default_extent(),
            d: Self::default_d(),
            seed,
        }
    }

    fn default_extent() -> f64 {
        1.0
    }

    fn default_d() -> usize {
        3
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_whole", self.n_whole),
            ("parts_per_whole", self.parts_per_whole),
            ("subparts_per_part", self.subparts_per_part),
            ("gaussians_per_subpart", self.gaussians_per_subpart),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Scene(format!("{name} must be at least 1")));
            }
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::Scene(format!("extent {} must be positive", self.extent)));
        }
        if self.d == 0 {
            return Err(Error::Scene("d must be at least 1".into()));
        }
        Ok(())
    }
}

/// Placement of `n` non-overlapping child discs inside a parent disc of
/// radius `radius`: returns (ring radius, child radius).
fn child_layout(n: u32, radius: f64) -> (f64, f64) {
    if n == 1 {
        (0.0, 0.6 * radius)
    } else {
        (0.5 * radius, 0.45 * radius * (PI / n as f64).sin())
    }
}

fn ring_centers(rng: &mut ChaCha8Rng, center: Vec3, n: u32, ring: f64) -> Vec<Vec3> {
    let phase = rng.random::<f64>() * 2.0 * PI;
    (0..n)
        .map(|k| {
            let angle = phase + 2.0 * PI * k as f64 / n as f64;
            [center[0] + ring * angle.cos(), center[1], center[2] + ring * angle.sin()]
        })
        .collect()
}

/// Generates a nested synthetic scene. Pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (whole_ring, whole_radius) = child_layout(spec.n_whole, spec.extent);
    let (part_ring, part_radius) = child_layout(spec.parts_per_whole, whole_radius);
    let (sub_ring, sub_radius) = child_layout(spec.subparts_per_part, part_radius);

    let mut points = Vec::new();
    let (mut part_id, mut subpart_id) = (0u32, 0u32);
    let whole_centers = ring_centers(&mut rng, [0.0; 3], spec.n_whole, whole_ring);
    for (whole_id, whole_center) in whole_centers.into_iter().enumerate() {
        for part_center in ring_centers(&mut rng, whole_center, spec.parts_per_whole, part_ring) {
            for sub_center in ring_centers(&mut rng, part_center, spec.subparts_per_part, sub_ring) {
                for _ in 0..spec.gaussians_per_subpart {
                    // uniform in a disc of 0.55 * radius, thin in y
                    let r = 0.55 * sub_radius * rng.random::<f64>().sqrt();
                    let angle = rng.random::<f64>() * 2.0 * PI;
                    let lift = (rng.random::<f64>() - 0.5) * 0.1 * sub_radius;
                    let position = [
                        sub_center[0] + r * angle.cos(),
                        sub_center[1] + lift,
                        sub_center[2] + r * angle.sin(),
                    ];
                    let opacity = 0.8 + 0.15 * rng.random::<f64>();
                    let scale = sub_radius * (0.3 + 0.1 * rng.random::<f64>());
                    let feature = (0..spec.d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    points.push(GaussianPoint {
                        position,
                        opacity,
                        scale,
                        feature,
                        labels: Labels {
                            whole: whole_id as u32,
                            part: part_id,
                            subpart: subpart_id,
                        },
                    });
                }
                subpart_id += 1;
            }
            part_id += 1;
        }
    }
    Scene::new(points, spec.d)
}

/// Pinhole camera. Camera space is right-handed with x along `right`, y along
/// `-up` (image rows grow downward) and z along `forward`, so
/// `right = forward × up`. Pixel `(u, v)` is sampled at integer coordinates:
/// column `u`, row `v`, with the principal point at `(width/2, height/2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub forward: Vec3,
    pub up: Vec3,
    pub right: Vec3,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(position: Vec3, forward: Vec3, up: Vec3, focal: f64, width: u32, height: u32) -> Result<Self> {
        let camera = Camera {
            position,
            forward,
            up,
            right: cross(forward, up),
            focal,
            width,
            height,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Camera at `position` looking at `target`; `world_up` fixes the roll.
    pub fn look_at(position: Vec3, target: Vec3, world_up: Vec3, focal: f64, width: u32, height: u32) -> Result<Self> {
        let forward =
            normalized(sub(target, position)).ok_or_else(|| Error::Scene("camera target equals position".into()))?;
        let right = normalized(cross(forward, world_up))
            .ok_or_else(|| Error::Scene("world up is parallel to the viewing direction".into()))?;
        let up = cross(right, forward);
        Camera::new(position, forward, up, focal, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Scene("camera image must have positive size".into()));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::Scene(format!("focal {} must be positive", self.focal)));
        }
        let basis = [self.right, self.up, self.forward];
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot(*a, *b) - expected).abs() > 1e-6 {
                    return Err(Error::Scene("camera basis is not orthonormal".into()));
                }
            }
        }
        let handed = cross(self.forward, self.up);
        if sub(handed, self.right).iter().any(|v| v.abs() > 1e-6) {
            return Err(Error::Scene("camera basis must satisfy right = forward × up".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { pixel: [f64; 2], depth: f64 },
    Behind,
}

impl Projection {
    pub fn visible(self) -> Option<([f64; 2], f64)> {
        match self {
            Projection::Visible { pixel, depth } => Some((pixel, depth)),
            Projection::Behind => None,
        }
    }
}

pub fn project_point(camera: &Camera, position: Vec3) -> Projection {
    let rel = sub(position, camera.position);
    let z = dot(rel, camera.forward);
    if z <= 0.0 {
        return Projection::Behind;
    }
    let x = dot(rel, camera.right);
    let y = -dot(rel, camera.up);
    let (cx, cy) = camera.center();
    Projection::Visible {
        pixel: [camera.focal * x / z + cx, camera.focal * y / z + cy],
        depth: z,
    }
}

/// `count` cameras on a ring around the origin at the given elevation
/// (degrees), framed so a ground disc of radius `extent` fits in the image.
pub fn orbit_cameras(count: u32, width: u32, height: u32, extent: f64, elevation_deg: f64, phase: f64) -> Result<Vec<Camera>> {
    if count == 0 {
        return Err(Error::Scene("view count must be at least 1".into()));
    }
    if !(5.0..=85.0).contains(&elevation_deg) {
        return Err(Error::Scene(format!("elevation {elevation_deg} outside [5, 85] degrees")));
    }
    let distance = 3.0 * extent;
    let focal = 0.5 * width.min(height) as f64 * distance / (1.05 * extent);
    let elevation = elevation_deg.to_radians();
    (0..count)
        .map(|k| {
            let azimuth = phase + 2.0 * PI * k as f64 / count as f64;
            let position = [
                distance * elevation.cos() * azimuth.cos(),
                distance * elevation.sin(),
                distance * elevation.cos() * azimuth.sin(),
            ];
            Camera::look_at(position, [0.0; 3], [0.0, 1.0, 0.0], focal, width, height)
        })
        .collect()
}

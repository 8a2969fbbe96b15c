//! End-to-end runs: scene, views, training, grounding, queries and metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embed::{build_dictionary, fit_codec, LabelDictionary, PrototypeDecoder, PROTOTYPE_TEMPERATURE};
use crate::error::{Error, Result};
use crate::hierarchy::{MaskEntry, MaskTree, TreeNode};
use crate::io::{self, ManifestView, MaskManifest};
use crate::losses::{mean_mask_feature, prepare_view, HyperParams, LossTerm, PreparedView};
use crate::metrics::{boundary_iou, default_band_radius, hc_score, iou, HcScore, MetricsReport, QueryScore};
use crate::query::{run_query, QueryConfig, QueryResult};
use crate::plot::{level_miou_svg, loss_curve_svg};
use crate::raster::{render_features, FeatureMap};
use crate::scene::{generate_scene, orbit_cameras, Camera, Level, Scene, SceneSpec, SemanticLabel};
use crate::train::{gradient_check, train, Optimizer, TrainConfig, TrainReport};
use crate::view::{ground_truth_views, GroundTruthView, ViewPacket};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_whole: u32,
    pub parts_per_whole: u32,
    pub subparts_per_part: u32,
    pub gaussians_per_subpart: u32,
    pub extent: f64,
    pub d: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_whole: 2,
            parts_per_whole: 2,
            subparts_per_part: 2,
            gaussians_per_subpart: 6,
            extent: 1.0,
            d: 3,
        }
    }
}

impl SceneConfig {
    pub fn spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            n_whole: self.n_whole,
            parts_per_whole: self.parts_per_whole,
            subparts_per_part: self.subparts_per_part,
            gaussians_per_subpart: self.gaussians_per_subpart,
            extent: self.extent,
            d: self.d,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub count: u32,
    pub width: u32,
    pub height: u32,
    pub elevation_deg: f64,
    pub phase: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            count: 6,
            width: 64,
            height: 64,
            elevation_deg: 60.0,
            phase: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub ambient_dim: usize,
    /// Load label embeddings from this dictionary file instead of drawing them.
    pub dictionary_file: Option<PathBuf>,
    /// Softmax temperature of the prototype assignment.
    pub prototype_temperature: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            ambient_dim: 16,
            dictionary_file: None,
            prototype_temperature: PROTOTYPE_TEMPERATURE,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Boundary band radius; `None` uses 2% of the image diagonal.
    pub band_radius: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub level: Level,
    pub id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Source of all randomness in the run.
    pub seed: u64,
    pub scene: SceneConfig,
    /// Load the scene from this file instead of generating it.
    pub scene_file: Option<PathBuf>,
    pub views: ViewConfig,
    /// Explicit cameras; replaces the orbit from `views`.
    pub cameras: Option<Vec<Camera>>,
    /// Train on externally produced masks listed in this manifest.
    pub masks_manifest: Option<PathBuf>,
    pub hyper: HyperParams,
    pub train: TrainConfig,
    pub embedding: EmbeddingConfig,
    pub query: QueryConfig,
    /// Labels to query; empty queries every label visible in a view.
    pub queries: Vec<QuerySpec>,
    pub metrics: MetricOptions,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            scene: SceneConfig::default(),
            scene_file: None,
            views: ViewConfig::default(),
            cameras: None,
            masks_manifest: None,
            hyper: HyperParams::default(),
            train: TrainConfig {
                iterations: 2000,
                learning_rate: 1.5e-2,
                optimizer: Optimizer::Sgd,
                views_per_step: 6,
                ..TrainConfig::default()
            },
            embedding: EmbeddingConfig::default(),
            query: QueryConfig::default(),
            queries: Vec::new(),
            metrics: MetricOptions::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.query.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.query.threshold)));
        }
        if self.embedding.ambient_dim < 2 {
            return Err(Error::Config("ambient_dim must be at least 2".into()));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    fn dictionary_seed(&self) -> u64 {
        self.seed ^ 0x5EED_D1C7
    }
}

/// Everything a run produces, before it is written to disk.
#[derive(Clone, Debug)]
pub struct Outcome {
    /// Scene carrying the trained features.
    pub scene: Scene,
    pub views: Vec<GroundTruthView>,
    pub trees: Vec<MaskTree>,
    pub report: TrainReport,
    pub dictionary: LabelDictionary,
    pub decoder: PrototypeDecoder,
    pub results: Vec<QueryResult>,
    pub metrics: MetricsReport,
}

pub fn cameras_for(config: &ExperimentConfig) -> Result<Vec<Camera>> {
    match &config.cameras {
        Some(cameras) => {
            for c in cameras {
                c.validate()?;
            }
            Ok(cameras.clone())
        }
        None => {
            let v = &config.views;
            orbit_cameras(v.count, v.width, v.height, config.scene.extent, v.elevation_deg, v.phase)
        }
    }
}

/// Result of the training stage.
#[derive(Clone, Debug)]
pub struct Trained {
    pub scene: Scene,
    pub views: Vec<GroundTruthView>,
    pub trees: Vec<MaskTree>,
    pub report: TrainReport,
}

/// Trains the features of `scene` on masks from `packets` (ground-truth
/// label masks when `None`).
pub fn train_stage(config: &ExperimentConfig, scene: Scene, packets: Option<Vec<ViewPacket>>) -> Result<Trained> {
    config.validate()?;
    let cameras = match &packets {
        Some(p) => p.iter().map(|v| v.camera.clone()).collect(),
        None => cameras_for(config)?,
    };
    let gt = ground_truth_views(&scene, &cameras)?;
    let training: Vec<ViewPacket> = match packets {
        Some(p) => p,
        None => gt.iter().map(|v| v.packet.clone()).collect(),
    };
    let prepared: Vec<PreparedView> = training
        .into_iter()
        .map(|p| prepare_view(&scene, p, config.hyper.theta))
        .collect::<Result<_>>()?;
    let (features, report) = train(&scene, &prepared, &config.hyper, &config.train_config())?;
    let mut trained = scene;
    trained.set_features(&features)?;
    Ok(Trained {
        scene: trained,
        views: gt,
        trees: prepared.into_iter().map(|p| p.tree).collect(),
        report,
    })
}

/// Label embeddings and the decoder fitted to a trained field.
#[derive(Clone, Debug)]
pub struct Grounding {
    pub dictionary: LabelDictionary,
    pub decoder: PrototypeDecoder,
}

/// Fits the decoder from the mean trained feature of every ground-truth
/// mask to that mask's label embedding.
pub fn ground(config: &ExperimentConfig, trained: &Scene, views: &[GroundTruthView]) -> Result<Grounding> {
    let dictionary = match &config.embedding.dictionary_file {
        Some(path) => io::read_dictionary(path)?,
        None => build_dictionary(trained, config.embedding.ambient_dim, config.dictionary_seed())?,
    };
    let features = trained.features();
    let mut samples = Vec::new();
    for view in views {
        let map = render_features(&view.weights, &features, trained.d)?;
        for m in &view.packet.masks {
            samples.push((view.mask_labels[&m.id], mean_mask_feature(&map, m)?));
        }
    }
    let decoder = PrototypeDecoder::fit(&dictionary, &samples, config.embedding.prototype_temperature)?;
    Ok(Grounding { dictionary, decoder })
}

/// Runs training, grounding and evaluation on `scene`.
pub fn run_pipeline(config: &ExperimentConfig, scene: Scene, packets: Option<Vec<ViewPacket>>) -> Result<Outcome> {
    let trained = train_stage(config, scene, packets)?;
    let grounding = ground(config, &trained.scene, &trained.views)?;
    let (results, metrics) = evaluate(config, &trained.scene, &trained.views, &grounding.decoder, &grounding.dictionary)?;
    Ok(Outcome {
        scene: trained.scene,
        views: trained.views,
        trees: trained.trees,
        report: trained.report,
        dictionary: grounding.dictionary,
        decoder: grounding.decoder,
        results,
        metrics,
    })
}

/// Queries every requested label in every view where it is visible and
/// scores the predictions against the ground-truth masks.
pub fn evaluate(
    config: &ExperimentConfig,
    scene: &Scene,
    views: &[GroundTruthView],
    decoder: &PrototypeDecoder,
    dictionary: &LabelDictionary,
) -> Result<(Vec<QueryResult>, MetricsReport)> {
    let features = scene.features();
    let mut results = Vec::new();
    let mut scores = Vec::new();
    let mut hc_sum = 0.0;
    let mut hc_views = 0usize;
    let mut hc_pairs = 0usize;
    for view in views {
        let map = render_features(&view.weights, &features, scene.d)?;
        let coverage = view.weights.coverage();
        let radius = config
            .metrics
            .band_radius
            .unwrap_or_else(|| default_band_radius(map.width, map.height));
        let labels: Vec<SemanticLabel> = if config.queries.is_empty() {
            view.mask_labels.values().copied().collect()
        } else {
            config.queries.iter().map(|q| SemanticLabel { level: q.level, id: q.id }).collect()
        };
        let mut predicted: BTreeMap<SemanticLabel, MaskEntry> = BTreeMap::new();
        for label in labels {
            let Some(gt_mask) = view.mask_for(label) else { continue };
            let result = run_query(&map, &coverage, decoder, dictionary, label, view.packet.view_id, &config.query)?;
            let (row, col) = result.argmax;
            scores.push(QueryScore {
                view: view.packet.view_id,
                level: label.level.index(),
                label: label.id,
                iou: iou(&result.mask, &gt_mask.mask)?,
                boundary_iou: boundary_iou(&result.mask, &gt_mask.mask, radius)?,
                localized: gt_mask.mask.get(row, col),
            });
            predicted.insert(
                label,
                MaskEntry {
                    id: predicted.len() as u32,
                    level: label.level,
                    view_id: view.packet.view_id,
                    mask: result.mask.clone(),
                },
            );
            results.push(result);
        }
        let hc = predicted_hc(scene, &predicted, config.hyper.hc_orientation)?;
        if !hc.no_pairs {
            hc_sum += hc.value;
            hc_views += 1;
            hc_pairs += hc.pairs;
        }
    }
    let hc = HcScore {
        value: if hc_views == 0 { 0.0 } else { hc_sum / hc_views as f64 },
        pairs: hc_pairs,
        no_pairs: hc_views == 0,
    };
    Ok((results, MetricsReport::from_scores(scores, &hc)))
}

/// HC of one view's predicted masks linked by the scene's label hierarchy.
fn predicted_hc(
    scene: &Scene,
    predicted: &BTreeMap<SemanticLabel, MaskEntry>,
    orientation: crate::metrics::HcOrientation,
) -> Result<HcScore> {
    let mut nodes: BTreeMap<u32, TreeNode> = predicted
        .iter()
        .map(|(label, m)| {
            let parent = scene.parent_of(*label).and_then(|p| predicted.get(&p)).map(|p| p.id);
            (
                m.id,
                TreeNode {
                    id: m.id,
                    level: m.level,
                    parent,
                    children: Vec::new(),
                },
            )
        })
        .collect();
    let links: Vec<(u32, u32)> = nodes.values().filter_map(|n| n.parent.map(|p| (p, n.id))).collect();
    for (parent, child) in links {
        if let Some(node) = nodes.get_mut(&parent) {
            node.children.push(child);
        }
    }
    let tree = MaskTree::from_nodes(nodes.into_values().collect())?;
    let masks: Vec<MaskEntry> = predicted.values().cloned().collect();
    hc_score(&masks, &tree, orientation)
}

/// Seeded random problem for gradient checks: two wholes with two or three
/// parts each (at most 144 points, d = 3), seen by one camera of 16 to 32
/// pixels per side.
pub fn gradient_instance(seed: u64) -> Result<(Scene, PreparedView)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = SceneSpec {
        n_whole: 2,
        parts_per_whole: rng.random_range(2..=3),
        subparts_per_part: rng.random_range(1..=3),
        gaussians_per_subpart: rng.random_range(2..=8),
        extent: 1.0,
        d: 3,
        seed: rng.random(),
    };
    let scene = generate_scene(&spec)?;
    let size = rng.random_range(16..=32);
    let camera = orbit_cameras(1, size, size, spec.extent, rng.random_range(30.0..75.0), rng.random_range(0.0..std::f64::consts::TAU))?
        .remove(0);
    let view = ground_truth_views(&scene, &[camera])?.remove(0);
    let prepared = prepare_view(&scene, view.packet, HyperParams::default().theta)?;
    Ok((scene, prepared))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientRow {
    pub seed: u64,
    pub term: &'static str,
    /// `None` when the term has nothing to differentiate on the instance.
    pub max_relative_error: Option<f64>,
}

/// Runs the central-difference check for every loss term on each seed.
pub fn check_gradients(seeds: std::ops::Range<u64>, probes: usize, hp: &HyperParams) -> Result<Vec<GradientRow>> {
    let mut rows = Vec::new();
    for seed in seeds {
        let (scene, view) = gradient_instance(seed)?;
        let features = scene.features();
        for (term, name) in [
            (LossTerm::Hierarchical, "l_h"),
            (LossTerm::Instance, "l_ins"),
            (LossTerm::Part, "l_part"),
            (LossTerm::Total, "total"),
        ] {
            let check = gradient_check(&features, scene.d, &view, hp, term, probes, seed)?;
            rows.push(GradientRow {
                seed,
                term: name,
                max_relative_error: check.error(),
            });
        }
    }
    Ok(rows)
}

/// Generates the scene described by a config, ignoring `scene_file`.
pub fn generate_for(config: &ExperimentConfig) -> Result<Scene> {
    generate_scene(&config.scene.spec(config.seed))
}

/// The scene file when one is configured, otherwise a generated scene.
pub fn load_scene(config: &ExperimentConfig) -> Result<Scene> {
    match &config.scene_file {
        Some(path) => io::read_scene(path),
        None => generate_for(config),
    }
}

/// Training masks from the configured manifest, if any.
pub fn load_packets(config: &ExperimentConfig) -> Result<Option<Vec<ViewPacket>>> {
    config.masks_manifest.as_deref().map(io::read_mask_manifest).transpose()
}

/// Reads a config file; `.toml` files are parsed as TOML, anything else as JSON.
pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    let config: ExperimentConfig = parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Loads inputs, runs the pipeline and writes every artifact under
/// `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Outcome> {
    config.validate()?;
    let scene = load_scene(config)?;
    let packets = load_packets(config)?;
    let start = Instant::now();
    let outcome = run_pipeline(config, scene.clone(), packets)?;
    write_artifacts(&config.output_dir, config, &scene, &outcome, start.elapsed().as_secs_f64())?;
    Ok(outcome)
}

fn view_dir(view_id: u32) -> String {
    format!("view_{view_id:03}")
}

fn query_stem(view_id: u32, label: SemanticLabel) -> String {
    format!("{}_l{}_{:04}", view_dir(view_id), label.level.index(), label.id)
}

#[derive(Serialize)]
struct PredictionRecord {
    view: u32,
    level: u32,
    label: u32,
    argmax: [usize; 2],
    peak: f64,
    area: usize,
    mask: String,
    scores: String,
}

#[derive(Serialize)]
struct Timing {
    total_secs: f64,
    train_secs: f64,
}

/// Writes the run's artifacts. Everything except `timing.json` depends only
/// on the config and inputs.
pub fn write_artifacts(dir: &Path, config: &ExperimentConfig, scene: &Scene, outcome: &Outcome, total_secs: f64) -> Result<()> {
    io::write_json(&dir.join("config.json"), config)?;
    io::write_scene(&dir.join("scene.json"), scene)?;
    io::write_scene(&dir.join("checkpoint.json"), &outcome.scene)?;

    let mut manifest = MaskManifest::default();
    for view in &outcome.views {
        let sub = view_dir(view.packet.view_id);
        let mut files = Vec::new();
        for m in &view.packet.masks {
            let file = PathBuf::from(&sub).join(format!("mask_{:04}.hlsm", m.id));
            io::write_mask(&dir.join("masks").join(&file), m)?;
            files.push(file);
        }
        manifest.views.push(ManifestView {
            view_id: view.packet.view_id,
            camera: view.packet.camera.clone(),
            masks: files,
        });
    }
    io::write_json(&dir.join("masks").join("manifest.json"), &manifest)?;
    for (view, tree) in outcome.views.iter().zip(&outcome.trees) {
        let id = view.packet.view_id;
        io::write_tree(&dir.join("trees").join(format!("{}.json", view_dir(id))), id, tree)?;
    }

    io::write_dictionary(&dir.join("dictionary.json"), &outcome.dictionary)?;
    io::write_codec(&dir.join("codec.hlsc"), &fit_codec(&outcome.dictionary, outcome.scene.d)?)?;

    let mut records = Vec::with_capacity(outcome.results.len());
    for r in &outcome.results {
        let stem = query_stem(r.view_id, r.label);
        let mask_file = format!("predictions/{stem}.hlsm");
        let score_file = format!("scores/{stem}.hlsf");
        let entry = MaskEntry {
            id: r.label.id,
            level: r.label.level,
            view_id: r.view_id,
            mask: r.mask.clone(),
        };
        io::write_mask(&dir.join(&mask_file), &entry)?;
        let scores = FeatureMap::new(1, r.scores.height, r.scores.width, r.scores.values.clone())?;
        io::write_feature_map(&dir.join(&score_file), &scores)?;
        records.push(PredictionRecord {
            view: r.view_id,
            level: r.label.level.index(),
            label: r.label.id,
            argmax: [r.argmax.0, r.argmax.1],
            peak: r.peak,
            area: r.mask.count(),
            mask: mask_file,
            scores: score_file,
        });
    }
    io::write_json(&dir.join("predictions.json"), &records)?;
    io::write_json(&dir.join("train_report.json"), &outcome.report)?;
    io::write_json(&dir.join("metrics.json"), &outcome.metrics)?;
    io::write_bytes(&dir.join("loss.svg"), loss_curve_svg(&outcome.report).as_bytes())?;
    io::write_bytes(&dir.join("miou.svg"), level_miou_svg(&outcome.metrics).as_bytes())?;
    io::write_json(
        &dir.join("timing.json"),
        &Timing {
            total_secs,
            train_secs: outcome.report.wall_time_secs,
        },
    )
}

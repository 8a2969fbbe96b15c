//! End-to-end acceptance checks. Prints one line per check and exits with a
//! failure status if any check fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use hisplat::experiment::{gradient_instance, run_experiment, run_pipeline, generate_for, ExperimentConfig};
use hisplat::hierarchy::{build_mask_tree, Bitmask, MaskEntry, MaskTree, TreeNode};
use hisplat::io::to_json;
use hisplat::losses::{evaluate_term, HyperParams, LossTerm};
use hisplat::metrics::{boundary_iou, hc_score, iou, localization_accuracy, HcOrientation};
use hisplat::raster::{backprop_map_gradient, compute_weights, render_features};
use hisplat::scene::{generate_scene, orbit_cameras, Level, SceneSpec};
use hisplat::view::ground_truth_views;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Central differences with step 1e-4 on 30 random coordinates per term.
fn gradient_fidelity() -> Outcome {
    const STEP: f64 = 1e-4;
    let start = Instant::now();
    let boosted = HyperParams {
        lambda1: 0.5,
        lambda2: 0.5,
        ..HyperParams::default()
    };
    let terms = [
        (LossTerm::Hierarchical, HyperParams::default()),
        (LossTerm::Instance, HyperParams::default()),
        (LossTerm::Part, HyperParams::default()),
        (LossTerm::Total, HyperParams::default()),
        (LossTerm::Total, boosted),
    ];
    let mut worst = [0.0f64; 5];
    let mut points = 0;
    for seed in 0..20 {
        let (scene, view) = gradient_instance(seed).unwrap();
        points = points.max(scene.len());
        let views = std::slice::from_ref(&view);
        let f0 = scene.features();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for (t, (term, hp)) in terms.iter().enumerate() {
            let analytic = evaluate_term(views, &f0, scene.d, hp, *term).unwrap().gradient;
            let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            assert!(scale > 0.0, "seed {seed}: term {term:?} has no gradient");
            for _ in 0..30 {
                let k = rng.random_range(0..f0.len());
                let mut f = f0.clone();
                f[k] = f0[k] + STEP;
                let plus = evaluate_term(views, &f, scene.d, hp, *term).unwrap().value;
                f[k] = f0[k] - STEP;
                let minus = evaluate_term(views, &f, scene.d, hp, *term).unwrap().value;
                let numeric = (plus - minus) / (2.0 * STEP);
                let denom = analytic[k].abs().max(numeric.abs()).max(1e-3 * scale);
                worst[t] = worst[t].max((analytic[k] - numeric).abs() / denom);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().copied().fold(0.0, f64::max);
    outcome(
        max < 1e-4 && secs < 60.0 && points <= 200,
        format!(
            "max relative error l_h {:.1e}, l_ins {:.1e}, l_part {:.1e}, total {:.1e} / {:.1e} (boosted weights) over 20 instances, {secs:.1}s",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn rendering_contracts() -> Outcome {
    let start = Instant::now();
    let mut worst_linear = 0.0f64;
    let mut worst_adjoint = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=4);
        let spec = SceneSpec {
            d,
            ..SceneSpec::new(rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=6), seed)
        };
        let scene = generate_scene(&spec).unwrap();
        let size = rng.random_range(8..=32);
        let camera = orbit_cameras(1, size, size, 1.0, rng.random_range(20.0..80.0), rng.random_range(0.0..6.0))
            .unwrap()
            .remove(0);
        let weights = compute_weights(&scene, &camera).unwrap();
        let n = scene.len() * d;
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (f1, f2) = (draw(n), draw(n));
        let (a, b) = (1.7, -0.6);
        let mixed: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| a * x + b * y).collect();
        let m1 = render_features(&weights, &f1, d).unwrap();
        let m2 = render_features(&weights, &f2, d).unwrap();
        let mm = render_features(&weights, &mixed, d).unwrap();
        for i in 0..mm.values.len() {
            worst_linear = worst_linear.max((mm.values[i] - (a * m1.values[i] + b * m2.values[i])).abs());
        }
        let mut g = m1.clone();
        g.values = draw(g.values.len());
        let back = backprop_map_gradient(&weights, &g).unwrap();
        let lhs: f64 = m1.values.iter().zip(&g.values).map(|(x, y)| x * y).sum();
        let rhs: f64 = f1.iter().zip(&back).map(|(x, y)| x * y).sum();
        worst_adjoint = worst_adjoint.max((lhs - rhs).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_linear <= 1e-9 && worst_adjoint <= 1e-9 && secs < 10.0,
        format!("linearity {worst_linear:.1e}, adjoint {worst_adjoint:.1e} over 50 scenes, {secs:.2}s"),
    )
}

fn hierarchy_oracle() -> Outcome {
    let start = Instant::now();
    let mut views = 0;
    let mut edges = 0;
    let mut mismatches = Vec::new();
    for seed in 0..30u64 {
        let scene = generate_scene(&SceneSpec::new(2, 2, 2, 6, seed)).unwrap();
        let cameras = orbit_cameras(6, 64, 64, 1.0, 60.0, 0.25 * seed as f64).unwrap();
        for view in ground_truth_views(&scene, &cameras).unwrap() {
            let tree = build_mask_tree(&view.packet.masks, 0.9).unwrap();
            let found: BTreeSet<(u32, u32)> = tree.edges().into_iter().collect();
            let id_of: BTreeMap<_, _> = view.mask_labels.iter().map(|(id, label)| (*label, *id)).collect();
            let expected: BTreeSet<(u32, u32)> = view
                .mask_labels
                .iter()
                .filter_map(|(id, label)| {
                    let parent = scene.parent_of(*label)?;
                    id_of.get(&parent).map(|p| (*p, *id))
                })
                .collect();
            views += 1;
            edges += expected.len();
            if found != expected {
                mismatches.push((seed, view.packet.view_id));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches.is_empty() && secs < 30.0,
        format!("{views} views, {edges} label edges, mismatching views {mismatches:?}, {secs:.2}s"),
    )
}

fn rect(w: usize, h: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> Bitmask {
    Bitmask::from_fn(w, h, |r, c| r >= r0 && r < r1 && c >= c0 && c < c1)
}

fn disc(w: usize, h: usize, cy: f64, cx: f64, radius: f64) -> Bitmask {
    Bitmask::from_fn(w, h, |r, c| (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) <= radius * radius)
}

fn entry(id: u32, level: Level, mask: Bitmask) -> MaskEntry {
    MaskEntry::new(id, level, 0, mask).unwrap()
}

fn tree_of(links: &[(u32, Level, Option<u32>)]) -> MaskTree {
    let nodes = links
        .iter()
        .map(|&(id, level, parent)| TreeNode {
            id,
            level,
            parent,
            children: links.iter().filter(|l| l.2 == Some(id)).map(|l| l.0).collect(),
        })
        .collect();
    MaskTree::from_nodes(nodes).unwrap()
}

fn hc_calibration() -> Outcome {
    let (w, h) = (96, 96);
    let nested = [
        entry(0, Level::Whole, rect(w, h, 4, 4, 92, 48)),
        entry(1, Level::Whole, rect(w, h, 4, 50, 92, 92)),
        entry(2, Level::Part, rect(w, h, 10, 10, 50, 40)),
        entry(3, Level::Part, rect(w, h, 55, 10, 85, 40)),
        entry(4, Level::Part, disc(w, h, 48.0, 71.0, 12.0)),
        entry(5, Level::Subpart, disc(w, h, 30.0, 25.0, 8.0)),
        entry(6, Level::Subpart, rect(w, h, 60, 15, 80, 35)),
        entry(7, Level::Subpart, disc(w, h, 48.0, 71.0, 5.0)),
    ];
    let links = [
        (0, Level::Whole, None),
        (1, Level::Whole, None),
        (2, Level::Part, Some(0)),
        (3, Level::Part, Some(0)),
        (4, Level::Part, Some(1)),
        (5, Level::Subpart, Some(2)),
        (6, Level::Subpart, Some(3)),
        (7, Level::Subpart, Some(4)),
    ];
    let tree = tree_of(&links);
    let perfect = hc_score(&nested, &tree, HcOrientation::ChildInParent).unwrap().value;

    // a disc centred on the parent's right edge lies half outside
    let parent = rect(w, h, 10, 10, 80, 48);
    let mut worst_shift = 0.0f64;
    for radius in [6.0, 9.0, 13.0, 17.5] {
        let child = disc(w, h, 45.0, 47.5, radius);
        let pair = [entry(0, Level::Whole, parent.clone()), entry(1, Level::Part, child)];
        let score = hc_score(&pair, &tree_of(&[(0, Level::Whole, None), (1, Level::Part, Some(0))]), HcOrientation::ChildInParent)
            .unwrap()
            .value;
        worst_shift = worst_shift.max((score - 0.5).abs());
    }
    outcome(
        (perfect - 1.0).abs() <= 1e-9 && worst_shift <= 0.02,
        format!("nested hierarchy {perfect:.12}, half-outside child deviates from 0.5 by at most {worst_shift:.4}"),
    )
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Bitmask {
    let density = rng.random_range(0.0..1.0);
    let bits: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
    Bitmask::from_fn(w, h, |r, c| bits[r * w + c])
}

fn brute_iou(a: &Bitmask, b: &Bitmask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..a.height {
        for c in 0..a.width {
            inter += usize::from(a.get(r, c) && b.get(r, c));
            union += usize::from(a.get(r, c) || b.get(r, c));
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// A set pixel is on the band when some pixel within Euclidean distance `r`
/// is unset or off the image.
fn brute_band(m: &Bitmask, r: usize) -> Bitmask {
    let ri = r as i64;
    Bitmask::from_fn(m.width, m.height, |row, col| {
        if !m.get(row, col) {
            return false;
        }
        for y in row as i64 - ri..=row as i64 + ri {
            for x in col as i64 - ri..=col as i64 + ri {
                let dist2 = (y - row as i64).pow(2) + (x - col as i64).pow(2);
                if dist2 > ri * ri {
                    continue;
                }
                let inside = y >= 0 && x >= 0 && (y as usize) < m.height && (x as usize) < m.width;
                if !inside || !m.get(y as usize, x as usize) {
                    return true;
                }
            }
        }
        false
    })
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut failures = 0;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (a, b) = (random_mask(&mut rng, w, h), random_mask(&mut rng, w, h));
        let r = rng.random_range(1..=3);
        let point = (rng.random_range(0..h), rng.random_range(0..w));
        let mut ok = iou(&a, &b).unwrap() == brute_iou(&a, &b);
        ok &= boundary_iou(&a, &b, r).unwrap() == brute_iou(&brute_band(&a, r), &brute_band(&b, r));
        let hit = if b.get(point.0, point.1) { 1.0 } else { 0.0 };
        ok &= localization_accuracy(&[point], std::slice::from_ref(&b)).unwrap() == hit;
        let (mut inter, mut child_area) = (0usize, 0usize);
        for row in 0..h {
            for col in 0..w {
                child_area += usize::from(b.get(row, col));
                inter += usize::from(a.get(row, col) && b.get(row, col));
            }
        }
        let expected = if child_area == 0 { 0.0 } else { inter as f64 / child_area as f64 };
        let masks = [
            MaskEntry { id: 0, level: Level::Whole, view_id: 0, mask: a.clone() },
            MaskEntry { id: 1, level: Level::Part, view_id: 0, mask: b.clone() },
        ];
        let tree = tree_of(&[(0, Level::Whole, None), (1, Level::Part, Some(0))]);
        ok &= hc_score(&masks, &tree, HcOrientation::ChildInParent).unwrap().value == expected;
        failures += usize::from(!ok);
    }
    outcome(failures == 0, format!("{failures} of 100 random pairs disagree with enumeration"))
}

fn desk_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    }
}

fn desk_experiment() -> Outcome {
    let config = desk_config(0);
    let start = Instant::now();
    let out = run_pipeline(&config, generate_for(&config).unwrap(), None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let level1 = out.metrics.level(1).unwrap();
    outcome(
        level1.miou >= 0.85 && level1.localization_accuracy >= 0.9 && secs < 300.0,
        format!(
            "level-1 mIoU {:.4}, localization {:.4} over {} queries, {secs:.1}s",
            level1.miou, level1.localization_accuracy, level1.queries
        ),
    )
}

fn directional_ablation() -> Outcome {
    let (mut miou_full, mut miou_ablated, mut hc_full, mut hc_ablated) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..5 {
        for ablate in [false, true] {
            let mut config = desk_config(seed);
            if ablate {
                config.hyper.lambda1 = 0.0;
                config.hyper.lambda2 = 0.0;
            }
            let m = run_pipeline(&config, generate_for(&config).unwrap(), None).unwrap().metrics;
            let deep = (m.level(2).unwrap().miou + m.level(3).unwrap().miou) / 2.0;
            if ablate {
                miou_ablated += deep / 5.0;
                hc_ablated += m.hc / 5.0;
            } else {
                miou_full += deep / 5.0;
                hc_full += m.hc / 5.0;
            }
        }
    }
    outcome(
        miou_full - miou_ablated >= 0.02 && hc_full - hc_ablated >= 0.02,
        format!(
            "level-2/3 mIoU {miou_full:.4} vs {miou_ablated:.4} ({:+.4}), HC {hc_full:.4} vs {hc_ablated:.4} ({:+.4})",
            miou_full - miou_ablated,
            hc_full - hc_ablated
        ),
    )
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let reports: Vec<Vec<u8>> = dirs
        .iter()
        .map(|dir| {
            let config = ExperimentConfig {
                output_dir: dir.path().to_path_buf(),
                ..desk_config(0)
            };
            let out = run_experiment(&config).unwrap();
            let written = std::fs::read(dir.path().join("metrics.json")).unwrap();
            assert_eq!(written, to_json(&out.metrics).unwrap().into_bytes());
            written
        })
        .collect();
    outcome(
        reports[0] == reports[1],
        format!("metrics.json {} bytes, identical: {}", reports[0].len(), reports[0] == reports[1]),
    )
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Outcome); 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("rendering contracts", rendering_contracts),
        ("hierarchy oracle", hierarchy_oracle),
        ("HC calibration", hc_calibration),
        ("metric oracles", metric_oracles),
        ("desk experiment", desk_experiment),
        ("directional ablation", directional_ablation),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let result = check();
        failed += usize::from(!result.pass);
        println!("[{}] {name}: {} ({})", i + 1, if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    println!("acceptance: {} of {} passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance criteria, run one after another so the timed ones are not
//! sharing the CPU. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail. Pass criterion ids (e.g. `ac3 ac7`) to filter.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array4;
use rand::Rng;

use s2sd_core::annotations::{parse_label_file, ClassScheme, Point2D, PolygonGeom};
use s2sd_core::datapipe::SampleRecord;
use s2sd_core::evaluation::{class_counts, dice_for_class, iou_for_class, pixel_accuracy, validate};
use s2sd_core::fixtures::{generate_scene, write_dataset, FixtureSpec};
use s2sd_core::inference::{base_image, colorize, overlay, Palette, Predictor, DEFAULT_ALPHA};
use s2sd_core::network::{Checkpoint, NetworkConfig, NetworkError, SeBlock, TrainingMeta, UNet};
use s2sd_core::rasterizer::{fill_polygon, render_mask, DamageMask};
use s2sd_core::seed::rng_for;
use s2sd_core::training::{fit, weighted_cross_entropy, TrainConfig, WeightMode};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Check); 11] = [
        ("ac1", "rasterizer matches point-in-polygon oracle", ac1_rasterizer),
        ("ac2", "fixture label closure", ac2_fixture_closure),
        ("ac3", "metrics match counting oracle", ac3_metrics),
        ("ac4", "dice averaged over seen classes only", ac4_seen_classes),
        ("ac5", "loss gradient and weighting", ac5_loss),
        ("ac6", "network shape law", ac6_shapes),
        ("ac7", "squeeze-excitation closed forms", ac7_se),
        ("ac8", "overfit learnability", ac8_overfit),
        ("ac9", "determinism", ac9_determinism),
        ("ac10", "end-to-end command line", ac10_cli_smoke),
        ("ac11", "checkpoint round trip", ac11_checkpoint),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{} {name}: PASS ({detail}; {secs:.1}s)", id.to_uppercase()),
            Err(detail) => {
                failed += 1;
                println!("{} {name}: FAIL ({detail}; {secs:.1}s)", id.to_uppercase());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---- AC1 ----

/// Star-shaped about its center, hence simple.
fn random_star<R: Rng>(rng: &mut R) -> PolygonGeom {
    let n = rng.random_range(3..=12);
    let (cx, cy) = (rng.random_range(4.0..60.0), rng.random_range(4.0..60.0));
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup();
    let exterior = angles
        .iter()
        .map(|&a| {
            let r = rng.random_range(1.5..34.0);
            Point2D {
                x: cx + r * a.cos(),
                y: cy + r * a.sin(),
            }
        })
        .collect();
    PolygonGeom {
        exterior,
        interiors: vec![],
    }
}

/// Axis-aligned rectangle on integer coordinates; centers never touch edges.
fn random_rect<R: Rng>(rng: &mut R) -> PolygonGeom {
    let (x0, y0) = (rng.random_range(-4..60) as f64, rng.random_range(-4..60) as f64);
    let (x1, y1) = (x0 + rng.random_range(1..30) as f64, y0 + rng.random_range(1..30) as f64);
    let p = |x, y| Point2D { x, y };
    PolygonGeom {
        exterior: vec![p(x0, y0), p(x1, y0), p(x1, y1), p(x0, y1)],
        interiors: vec![],
    }
}

/// Winding number at `(px, py)`; nonzero means inside.
fn winding(ring: &[Point2D], px: f64, py: f64) -> i32 {
    let mut wn = 0;
    for i in 0..ring.len() {
        let (a, b) = (ring[i], ring[(i + 1) % ring.len()]);
        let side = (b.x - a.x) * (py - a.y) - (px - a.x) * (b.y - a.y);
        if a.y <= py {
            if b.y > py && side > 0.0 {
                wn += 1;
            }
        } else if b.y <= py && side < 0.0 {
            wn -= 1;
        }
    }
    wn
}

fn ac1_rasterizer() -> Check {
    let start = Instant::now();
    let mut rng = rng_for(1, "acceptance-polygons");
    let mut pixels = 0usize;
    for i in 0..200 {
        let poly = if i % 5 == 4 { random_rect(&mut rng) } else { random_star(&mut rng) };
        let cov = fill_polygon(&poly, 64, 64);
        for row in 0..64 {
            for col in 0..64 {
                let inside = winding(&poly.exterior, col as f64 + 0.5, row as f64 + 0.5) != 0;
                ensure!(cov.get(row, col) == inside, "polygon {i} differs at row {row} col {col}");
                pixels += 1;
            }
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(30), "took {t:?}");
    Ok(format!("200 polygons, {pixels} pixels agree"))
}

// ---- AC2 ----

fn ac2_fixture_closure() -> Check {
    let spec = FixtureSpec {
        seed: 2024,
        scene_count: 20,
        ..FixtureSpec::default()
    };
    let mut buildings = 0;
    for i in 0..20 {
        let scene = generate_scene(&spec, i).map_err(|e| e.to_string())?;
        let set = parse_label_file(&scene.label_json).map_err(|e| format!("scene {i}: {e}"))?;
        buildings += set.buildings.len();
        for scheme in [ClassScheme::Bg5, ClassScheme::Paper4] {
            let mask = render_mask(&set, spec.image_size, spec.image_size, scheme);
            ensure!(mask == scene.oracle_mask(scheme), "scene {i} differs under {}", scheme.name());
        }
    }
    Ok(format!("20 scenes, {buildings} buildings, both schemes"))
}

// ---- AC3 ----

/// Smoothing term in the Dice and IoU definitions.
const EPS: f64 = 1e-6;

fn ac3_metrics() -> Check {
    const IGNORE: u8 = 255;
    let mut rng = rng_for(3, "acceptance-metrics");
    let mut present = 0;
    for case in 0..500 {
        let mut draw = || (0..64).map(|_| rng.random_range(0..4u8)).collect::<Vec<_>>();
        let (p, t) = (draw(), draw());
        let pred = DamageMask::from_vec(8, 8, p.clone()).unwrap();
        let target = DamageMask::from_vec(8, 8, t.clone()).unwrap();

        let correct = p.iter().zip(&t).filter(|(a, b)| a == b).count();
        let acc = pixel_accuracy(&pred, &target, IGNORE).unwrap().unwrap();
        ensure!((acc - correct as f64 / 64.0).abs() <= 1e-9, "case {case}: accuracy {acc}");

        for k in 0..4u8 {
            let inter = p.iter().zip(&t).filter(|&(&a, &b)| a == k && b == k).count() as f64;
            let np = p.iter().filter(|&&a| a == k).count() as f64;
            let nt = t.iter().filter(|&&b| b == k).count() as f64;
            let dice = dice_for_class(&pred, &target, k, IGNORE).unwrap();
            let iou = iou_for_class(&pred, &target, k, IGNORE).unwrap();
            let counts = class_counts(&pred, &target, k, IGNORE).unwrap();
            ensure!(counts.gt as f64 == nt && counts.pred as f64 == np, "case {case} class {k}: counts");
            if nt == 0.0 {
                ensure!(dice.is_none() && iou.is_none(), "case {case} class {k}: absent class scored");
                continue;
            }
            present += 1;
            let (dice, iou) = (dice.unwrap(), iou.unwrap());
            let want_dice = (2.0 * inter + EPS) / (np + nt + EPS);
            let want_iou = (inter + EPS) / (np + nt - inter + EPS);
            ensure!((dice - want_dice).abs() <= 1e-9, "case {case} class {k}: dice {dice} vs {want_dice}");
            ensure!((iou - want_iou).abs() <= 1e-9, "case {case} class {k}: iou {iou} vs {want_iou}");
            let related = 2.0 * iou / (1.0 + iou);
            ensure!((dice - related).abs() <= 1e-6, "case {case} class {k}: dice/iou relation");
        }
    }
    Ok(format!("500 pairs, {present} present-class comparisons"))
}

// ---- AC4 ----

fn ac4_seen_classes() -> Check {
    let scheme = ClassScheme::Bg5;
    // No destroyed buildings anywhere in this split.
    let spec = FixtureSpec {
        seed: 4,
        scene_count: 3,
        image_size: 64,
        min_buildings: 3,
        max_buildings: 5,
        damage_probs: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0],
    };
    let samples: Vec<SampleRecord> = (0..3)
        .map(|i| generate_scene(&spec, i).map(|s| s.to_sample(scheme)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let destroyed = 4u8;
    ensure!(
        samples.iter().all(|s| !s.target.data().contains(&destroyed)),
        "fixture unexpectedly contains destroyed pixels"
    );
    let model = UNet::new(NetworkConfig::with_features(5, vec![4, 8, 16, 32]), 4).map_err(|e| e.to_string())?;
    let report = validate(&model, &samples, scheme, 2).map_err(|e| e.to_string())?;

    // Oracle: per-image Dice for each class present in that image, averaged
    // per class, then over the classes that appeared at all.
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); 5];
    for s in &samples {
        let x = s.input.clone().insert_axis(ndarray::Axis(0));
        let logits = model.forward(&x).map_err(|e| e.to_string())?;
        let (h, w) = (s.target.height(), s.target.width());
        let mut pred = vec![0u8; h * w];
        for (i, p) in pred.iter_mut().enumerate() {
            let (r, c) = (i / w, i % w);
            let mut best = 0;
            for k in 1..5 {
                if logits[[0, k, r, c]] > logits[[0, best, r, c]] {
                    best = k;
                }
            }
            *p = best as u8;
        }
        for k in 0..5u8 {
            let t = s.target.data();
            let nt = t.iter().filter(|&&v| v == k).count();
            if nt == 0 {
                continue;
            }
            let np = pred.iter().filter(|&&v| v == k).count();
            let inter = pred.iter().zip(t).filter(|&(&a, &b)| a == k && b == k).count();
            per_class[k as usize].push((2.0 * inter as f64 + EPS) / ((np + nt) as f64 + EPS));
        }
    }
    let seen: Vec<(u8, f64)> = per_class
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, v)| (k as u8, v.iter().sum::<f64>() / v.len() as f64))
        .collect();

    ensure!(report.row(destroyed).is_none(), "report has a row for the absent class");
    let rows: Vec<u8> = report.classes.iter().map(|r| r.class).collect();
    let want: Vec<u8> = seen.iter().map(|&(k, _)| k).collect();
    ensure!(rows == want, "rows {rows:?}, expected {want:?}");
    for (&(k, d), row) in seen.iter().zip(&report.classes) {
        ensure!((row.dice - d).abs() <= 1e-12, "class {k}: dice {} vs oracle {d}", row.dice);
    }
    let mean = report.mean_dice.ok_or("no mean dice")?;
    let exact = report.classes.iter().map(|r| r.dice).sum::<f64>() / report.classes.len() as f64;
    ensure!(mean == exact, "mean {mean} is not the mean of its rows {exact}");
    let oracle = seen.iter().map(|&(_, d)| d).sum::<f64>() / seen.len() as f64;
    ensure!((mean - oracle).abs() <= 1e-12, "mean {mean} vs oracle {oracle}");
    Ok(format!("rows {rows:?}, mean dice {mean:.4} over {} classes", rows.len()))
}

// ---- AC5 ----

fn ac5_loss() -> Check {
    const IGNORE: u8 = 255;
    let shape = (1, 2, 1, 3);
    let logits = [0.3_f64, -1.2, 0.8, -0.4, 0.9, -0.1];
    let targets = [0u8, 1, 1];
    let weights = [0.7_f64, 2.3];

    let out = weighted_cross_entropy(&logits, shape, &targets, &weights, IGNORE);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..logits.len() {
        let (mut up, mut down) = (logits, logits);
        up[j] += h;
        down[j] -= h;
        let lu = weighted_cross_entropy(&up, shape, &targets, &weights, IGNORE).loss;
        let ld = weighted_cross_entropy(&down, shape, &targets, &weights, IGNORE).loss;
        let numeric = (lu - ld) / (2.0 * h);
        let analytic = out.grad[j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-300);
        worst = worst.max(rel);
    }
    ensure!(worst < 1e-6, "max relative gradient error {worst:e}");

    // Plain cross-entropy, written out per pixel.
    let hw = 3;
    let plain: f64 = (0..hw)
        .map(|p| {
            let z = [logits[p], logits[hw + p]];
            let lse = (z[0].exp() + z[1].exp()).ln();
            lse - z[targets[p] as usize]
        })
        .sum::<f64>()
        / hw as f64;
    let uniform = weighted_cross_entropy(&logits, shape, &targets, &[1.0, 1.0], IGNORE).loss;
    ensure!((uniform - plain).abs() <= 1e-7, "uniform {uniform} vs plain {plain}");

    // Power-of-two factors keep every product exact.
    for k in [0.25, 8.0, 1024.0] {
        let scaled = [weights[0] * k, weights[1] * k];
        let s = weighted_cross_entropy(&logits, shape, &targets, &scaled, IGNORE);
        ensure!(s.loss == out.loss && s.grad == out.grad, "rescaling by {k} changed the result");
    }
    Ok(format!("max relative gradient error {worst:.2e}, uniform matches plain"))
}

// ---- AC6 ----

fn ac6_shapes() -> Check {
    let start = Instant::now();
    let mut rng = rng_for(6, "acceptance-shapes");
    let mut runs = 0;
    for classes in [4, 5] {
        let model = UNet::new(
            NetworkConfig {
                num_classes: classes,
                ..NetworkConfig::default()
            },
            6,
        )
        .map_err(|e| e.to_string())?;
        for s in [64, 128, 256] {
            for b in [1, 2] {
                let x = Array4::from_shape_simple_fn((b, 6, s, s), || rng.random_range(0.0..1.0f32));
                let y = model.forward(&x).map_err(|e| e.to_string())?;
                ensure!(y.dim() == (b, classes, s, s), "({b},6,{s},{s}) gave {:?}", y.dim());
                ensure!(y.iter().all(|v| v.is_finite()), "non-finite logits at S={s}");
                runs += 1;
            }
        }
        let bad = model.forward(&Array4::zeros((1, 6, 100, 100)));
        ensure!(
            matches!(bad, Err(NetworkError::BadSpatialSize { .. })),
            "S=100 gave {:?}",
            bad.map(|y| y.dim())
        );
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "took {t:?}");
    Ok(format!("{runs} forwards, S=100 rejected"))
}

// ---- AC7 ----

fn ac7_se() -> Check {
    let mut rng = rng_for(7, "acceptance-se");
    let mut se = SeBlock::new("se", 8, 2, &mut rng);
    let x = Array4::from_shape_simple_fn((2, 8, 5, 5), || rng.random_range(-3.0..3.0f32));

    let mut random = se.clone();
    for p in [&mut random.fc1_bias, &mut random.fc2_bias] {
        p.value.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let zero_in = Array4::<f32>::zeros((2, 8, 5, 5));
    ensure!(random.forward(&zero_in).iter().all(|&v| v == 0.0), "zero input gave nonzero output");
    ensure!(random.forward_train(&zero_in).iter().all(|&v| v == 0.0), "zero input (train) gave nonzero output");

    for p in [&mut se.fc1_weight, &mut se.fc1_bias, &mut se.fc2_weight, &mut se.fc2_bias] {
        p.value.iter_mut().for_each(|v| *v = 0.0);
    }
    let half = x.mapv(|v| 0.5 * v);
    ensure!(se.forward(&x) == half, "zeroed excitation did not halve the input");
    ensure!(se.forward_train(&x) == half, "zeroed excitation (train) did not halve the input");
    Ok("gate 0.5 exactly, zero maps to zero".into())
}

// ---- AC8 ----

fn ac8_overfit() -> Check {
    let start = Instant::now();
    let scheme = ClassScheme::Bg5;
    let spec = FixtureSpec {
        seed: 42,
        scene_count: 4,
        ..FixtureSpec::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenes = write_dataset(&spec, dir.path()).map_err(|e| e.to_string())?;
    let samples: Vec<SampleRecord> = scenes.iter().map(|s| s.to_sample(scheme)).collect();

    // Narrow widths keep 200 epochs inside the budget on a single core.
    let mut model = UNet::new(NetworkConfig::with_features(5, vec![8, 16, 32, 64]), 42).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 200,
        batch_size: 4,
        seed: 42,
        weight_mode: WeightMode::InverseFrequency,
        scheme,
        image_size: spec.image_size,
    };
    let outcome = fit(&mut model, &samples, &samples, &cfg).map_err(|e| e.to_string())?;
    let ckpt_path = dir.path().join("overfit.ckpt");
    outcome.best.save(&ckpt_path).map_err(|e| e.to_string())?;
    let predictor = Predictor::load(&ckpt_path).map_err(|e| e.to_string())?;
    let report = validate(&predictor.model, &samples, scheme, 4).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let dice: Vec<String> = report.classes.iter().map(|r| format!("{} {:.3}", r.name, r.dice)).collect();
    let present: Vec<u8> = (0..5u8)
        .filter(|&k| samples.iter().any(|s| s.target.data().contains(&k)))
        .collect();
    for k in &present {
        let row = report.row(*k).ok_or(format!("no row for present class {k}"))?;
        ensure!(row.dice >= 0.95, "class {} dice {:.4} < 0.95 [{}]", row.name, row.dice, dice.join(", "));
    }

    // The saved checkpoint through the file-based predictor, against the
    // analytic masks.
    for scene in &scenes {
        let mask = predictor
            .predict_mask(&scene.pre_path(dir.path()), &scene.post_path(dir.path()))
            .map_err(|e| e.to_string())?;
        let oracle = scene.oracle_mask(scheme);
        for &k in &present {
            if let Some(d) = dice_for_class(&mask, &oracle, k, scheme.ignore_label()).map_err(|e| e.to_string())? {
                ensure!(d >= 0.95, "{} class {k}: predicted dice {d:.4} vs oracle", scene.scene_id);
            }
        }
    }
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!(
        "best epoch {}, [{}], {:.0}s on {} core(s)",
        outcome.best.meta.epoch,
        dice.join(", "),
        elapsed.as_secs_f64(),
        std::thread::available_parallelism().map_or(1, |n| n.get())
    ))
}

// ---- command-line helpers ----

fn s2sd(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_s2sd"))
        .args(args)
        .env_remove("S2SD_DATA_ROOT")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`s2sd {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

struct PipelineRun {
    data: PathBuf,
    ckpt: PathBuf,
    history: PathBuf,
    report: PathBuf,
    pred: PathBuf,
    post: PathBuf,
}

/// synth → preprocess → train (2 epochs) → evaluate → predict under `root`.
fn pipeline(root: &Path, features: Option<&str>) -> Result<PipelineRun, String> {
    let data = root.join("data");
    let ckpt = root.join("run").join("model.ckpt");
    let report = root.join("eval").join("report.json");
    let pred = root.join("pred");
    s2sd(&["synth", "--out", p(&data), "--scenes", "6", "--seed", "9", "--size", "64"])?;
    s2sd(&["preprocess", "--data", p(&data), "--size", "64"])?;
    let mut train = vec![
        "train", "--data", p(&data), "--out", p(&ckpt), "--epochs", "2", "--batch-size", "2", "--image-size", "64",
        "--seed", "11",
    ];
    if let Some(f) = features {
        train.extend(["--features", f]);
    }
    s2sd(&train)?;
    s2sd(&["evaluate", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&report)])?;
    let pre = data.join("images").join("synthetic-9_00000000_pre_disaster.png");
    let post = data.join("images").join("synthetic-9_00000000_post_disaster.png");
    s2sd(&["predict", "--ckpt", p(&ckpt), "--pre", p(&pre), "--post", p(&post), "--out", p(&pred)])?;
    Ok(PipelineRun {
        history: root.join("run").join("history.jsonl"),
        data,
        ckpt,
        report,
        pred,
        post,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn pred_files(dir: &Path) -> [PathBuf; 4] {
    ["mask", "color", "overlay"]
        .map(|k| dir.join(format!("synthetic-9_00000000.{k}.png")))
        .into_iter()
        .chain([dir.join("synthetic-9_00000000.stats.json")])
        .collect::<Vec<_>>()
        .try_into()
        .unwrap()
}

// ---- AC9 ----

fn ac9_determinism() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let ra = pipeline(a.path(), Some("4,8,16,32"))?;
    let rb = pipeline(b.path(), Some("4,8,16,32"))?;

    ensure!(read(&ra.history)? == read(&rb.history)?, "training histories differ");
    ensure!(read(&ra.ckpt)? == read(&rb.ckpt)?, "checkpoint bytes differ");
    let (ma, mb) = (
        Checkpoint::load(&ra.ckpt).and_then(|c| c.build_model()).map_err(|e| e.to_string())?,
        Checkpoint::load(&rb.ckpt).and_then(|c| c.build_model()).map_err(|e| e.to_string())?,
    );
    let mut rng = rng_for(9, "acceptance-determinism");
    let x = Array4::from_shape_simple_fn((2, 6, 64, 64), || rng.random_range(0.0..1.0f32));
    let (ya, yb) = (ma.forward(&x).map_err(|e| e.to_string())?, mb.forward(&x).map_err(|e| e.to_string())?);
    ensure!(
        ya.iter().zip(yb.iter()).all(|(u, v)| u.to_bits() == v.to_bits()),
        "checkpoint forward outputs differ"
    );
    for (fa, fb) in pred_files(&ra.pred).iter().zip(pred_files(&rb.pred).iter()) {
        ensure!(read(fa)? == read(fb)?, "{} differs between runs", fa.display());
    }
    ensure!(read(&ra.report)? == read(&rb.report)?, "evaluation reports differ");
    Ok("history, checkpoint, forward outputs, report and prediction files identical".into())
}

// ---- AC10 ----

fn ac10_cli_smoke() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = pipeline(dir.path(), None)?;

    let mut expected: Vec<PathBuf> = vec![
        run.data.join("run_config.json"),
        run.data.join("masks").join("manifest.json"),
        run.data.join("masks").join("skip_list.json"),
        run.data.join("masks").join("run_config.json"),
        run.ckpt.clone(),
        run.history.clone(),
        run.ckpt.with_file_name("run_config.json"),
        run.report.clone(),
        run.report.with_extension("txt"),
        run.report.with_file_name("run_config.json"),
        run.pred.join("run_config.json"),
    ];
    for i in 0..6 {
        let id = format!("synthetic-9_{i:08}");
        expected.push(run.data.join("images").join(format!("{id}_pre_disaster.png")));
        expected.push(run.data.join("images").join(format!("{id}_post_disaster.png")));
        expected.push(run.data.join("labels").join(format!("{id}_post_disaster.json")));
        expected.push(run.data.join("masks").join(format!("{id}_post_disaster.png")));
    }
    expected.extend(pred_files(&run.pred));
    let missing: Vec<String> = expected.iter().filter(|f| !f.is_file()).map(|f| f.display().to_string()).collect();
    ensure!(missing.is_empty(), "missing artifacts: {}", missing.join(", "));

    let history = String::from_utf8(read(&run.history)?).map_err(|e| e.to_string())?;
    ensure!(history.lines().count() == 2, "history has {} lines", history.lines().count());
    let report: serde_json::Value = serde_json::from_slice(&read(&run.report)?).map_err(|e| e.to_string())?;
    ensure!(report["images_evaluated"] == 6, "report covers {} images", report["images_evaluated"]);

    // Overlay with a fully transparent mask is the base image.
    let base = base_image(&run.post, 64).map_err(|e| e.to_string())?;
    let clear = colorize(&DamageMask::new(64, 64, 0), &Palette::for_scheme(ClassScheme::Bg5)).map_err(|e| e.to_string())?;
    let blended = overlay(&base, &clear, DEFAULT_ALPHA).map_err(|e| e.to_string())?;
    ensure!(blended == base, "transparent overlay changed the base image");

    // And the written overlay keeps base pixels wherever the mask is clear.
    let mask = image::open(run.pred.join("synthetic-9_00000000.mask.png")).map_err(|e| e.to_string())?.to_luma8();
    let written = image::open(run.pred.join("synthetic-9_00000000.overlay.png")).map_err(|e| e.to_string())?.to_rgb8();
    let clear_px = mask.pixels().filter(|v| v.0[0] == 0).count();
    for ((m, o), b) in mask.pixels().zip(written.pixels()).zip(base.pixels()) {
        if m.0[0] == 0 {
            ensure!(o == b, "overlay altered a background pixel");
        }
    }
    Ok(format!("{} artifacts present, overlay exact on {clear_px} background pixels", expected.len()))
}

// ---- AC11 ----

fn ac11_checkpoint() -> Check {
    let scheme = ClassScheme::Bg5;
    let spec = FixtureSpec {
        seed: 11,
        scene_count: 2,
        image_size: 64,
        ..FixtureSpec::default()
    };
    let samples: Vec<SampleRecord> = (0..2)
        .map(|i| generate_scene(&spec, i).map(|s| s.to_sample(scheme)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut model = UNet::new(
        NetworkConfig {
            use_se: true,
            se_reduction: 2,
            ..NetworkConfig::with_features(5, vec![4, 8, 16, 32])
        },
        11,
    )
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        seed: 11,
        image_size: 64,
        ..TrainConfig::default()
    };
    fit(&mut model, &samples, &samples, &cfg).map_err(|e| e.to_string())?;

    let mut rng = rng_for(11, "acceptance-checkpoint");
    let x = Array4::from_shape_simple_fn((2, 6, 64, 64), || rng.random_range(0.0..1.0f32));
    let before = model.forward(&x).map_err(|e| e.to_string())?;
    let meta = TrainingMeta {
        epoch: 1,
        best_mean_dice: None,
        seed: 11,
        image_size: 64,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.ckpt");
    Checkpoint::capture(&model, scheme, meta).save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).and_then(|c| c.build_model()).map_err(|e| e.to_string())?;
    let after = loaded.forward(&x).map_err(|e| e.to_string())?;
    ensure!(
        before.iter().zip(after.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "forward after reload differs"
    );

    let bytes = read(&path)?;
    let cuts = [0, 3, bytes.len() / 3, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1];
    for cut in cuts {
        let short = dir.path().join(format!("cut{cut}.ckpt"));
        fs::write(&short, &bytes[..cut]).map_err(|e| e.to_string())?;
        match Checkpoint::load(&short) {
            Err(NetworkError::CorruptCheckpoint(_)) => {}
            other => return Err(format!("truncated at {cut} of {}: {:?}", bytes.len(), other.map(|_| ()))),
        }
    }
    Ok(format!("{} bytes round trip bit-identical, {} truncations rejected", bytes.len(), cuts.len()))
}

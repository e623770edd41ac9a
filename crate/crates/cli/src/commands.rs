use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use des_core::ablate::{ablate as run_ablation, default_arms};
use des_core::checkpoint;
use des_core::config::NetConfig;
use des_core::data::manifest::parse_json_annotation;
use des_core::data::pnm::{channel_to_gray, draw_rect, encode_pgm, encode_ppm, resize_bilinear};
use des_core::data::{load_manifest, parse_voc_xml, read_ppm, write_dataset, write_ppm, Dataset, DatasetManifest};
use des_core::eval::{dump_detections, evaluate};
use des_core::grad_suite::{run_gradient_suite, SUITE_TOLERANCE};
use des_core::raster::{grid_extent, rasterize};
use des_core::ssd::decode::DecodeParams;
use des_core::train::train as run_training;
use des_core::Tensor;
use serde_json::json;

pub fn train(config: &Path, data: &Path, out: &Path, log_every: usize) -> Result<()> {
    let cfg = NetConfig::load(config).with_context(|| format!("loading config {}", config.display()))?;
    let dataset = load_manifest(data, cfg.input_size, cfg.seg_grid_extent())
        .with_context(|| format!("loading dataset {}", data.display()))?;
    eprintln!(
        "training {} on {} images for {} iterations",
        cfg.variant.label(),
        dataset.len(),
        cfg.optimizer.total_iterations()
    );
    run_training(&cfg, &dataset, Some(out), |r| {
        if log_every > 0 && r.iteration % log_every == 0 {
            eprintln!("iter {:>6}  l_det {:.4}  l_seg {:.4}  l {:.4}", r.iteration, r.det, r.seg, r.total);
        }
    })?;
    eprintln!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn decode_params(score_thresh: f64) -> DecodeParams {
    DecodeParams {
        score_thresh,
        ..DecodeParams::default()
    }
}

pub fn eval(ckpt: &Path, data: &Path, report: &Path, score_thresh: f64) -> Result<()> {
    let net = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let dataset = load_manifest(data, net.config.input_size, net.config.seg_grid_extent())
        .with_context(|| format!("loading dataset {}", data.display()))?;
    let r = evaluate(&net, &dataset, &decode_params(score_thresh))?;
    fs::write(report, serde_json::to_string_pretty(&r)?)?;
    for c in &r.classes {
        match c.ap {
            Some(ap) => println!("{:<16} AP {:.4}  ({} gt)", c.name, ap, c.num_gt),
            None => println!("{:<16} AP -       (no gt)", c.name),
        }
    }
    println!("mAP@{} {:.4}  ({:.1} ms/img, {})", r.iou_threshold, r.map, r.mean_ms_per_image, r.ap_rule);
    Ok(())
}

/// Distinct outline colors cycled by class id.
const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.4, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
];

pub fn infer(ckpt: &Path, image: &Path, score_thresh: f64, overlay: Option<&Path>) -> Result<()> {
    let net = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let original = read_ppm(image).with_context(|| format!("reading {}", image.display()))?;
    let size = net.config.input_size;
    let input = resize_bilinear(&original, size, size)?;
    let dets = net.detect(&input, &decode_params(score_thresh))?;
    let names = net_class_names(&net.config);
    println!("{}", serde_json::to_string_pretty(&dump_detections(&dets, &names))?);
    if let Some(path) = overlay {
        // Boxes are normalized, so they map straight onto the original resolution.
        let mut canvas = original;
        let thickness = (canvas.shape()[1].min(canvas.shape()[2]) / 100).max(1);
        for d in &dets {
            let b = d.bbox;
            draw_rect(&mut canvas, [b.xmin, b.ymin, b.xmax, b.ymax], PALETTE[(d.class_id - 1) % PALETTE.len()], thickness)?;
        }
        write_ppm(&canvas, path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

/// Checkpoints carry no class names, so detections are labeled by id.
fn net_class_names(cfg: &NetConfig) -> Vec<String> {
    std::iter::once("background".to_string())
        .chain((1..=cfg.num_classes).map(|i| format!("class{i}")))
        .collect()
}

pub struct AblateArgs {
    pub config: PathBuf,
    pub seeds: usize,
    pub data: Option<(PathBuf, PathBuf)>,
    pub train_count: usize,
    pub test_count: usize,
    pub data_seed: u64,
    pub report: Option<PathBuf>,
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = NetConfig::load(&args.config).with_context(|| format!("loading config {}", args.config.display()))?;
    let grid = cfg.seg_grid_extent();
    let (train_set, test_set) = match &args.data {
        Some((train, test)) => (
            load_manifest(train, cfg.input_size, grid)?,
            load_manifest(test, cfg.input_size, grid)?,
        ),
        None => (
            Dataset::synthetic(args.data_seed, args.train_count, cfg.num_classes, cfg.input_size, grid)?,
            Dataset::synthetic(args.data_seed + 1, args.test_count, cfg.num_classes, cfg.input_size, grid)?,
        ),
    };
    let table = run_ablation(&cfg, &train_set, &test_set, &default_arms(), args.seeds, |arm, run| {
        match (&run.map, &run.error) {
            (Some(m), _) => eprintln!("{:<28} seed {:>3}  mAP {:.4}", arm.label(), run.seed, m),
            (None, Some(e)) => eprintln!("{:<28} seed {:>3}  failed: {e}", arm.label(), run.seed),
            (None, None) => {}
        }
    })?;
    print!("{}", table.render());
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<()> {
    let results = run_gradient_suite(seed)?;
    println!(
        "{:<22} {:>6} {:>7} {:>6} {:>12}  worst",
        "entry", "points", "redraws", "coords", "max rel err"
    );
    for r in &results {
        println!(
            "{:<22} {:>6} {:>7} {:>6} {:>12.3e}  {}  {}",
            r.name,
            r.points,
            r.redraws,
            r.coordinates,
            r.max_rel_error,
            r.worst,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!("{failed} gradient check(s) exceeded {SUITE_TOLERANCE:e}");
    }
    Ok(())
}

pub fn rasterize_gt(annotation: &Path, classes: &[String], input_size: usize, stride: usize, out: &Path) -> Result<()> {
    if stride == 0 {
        bail!("stride must be positive");
    }
    let table = DatasetManifest {
        classes: classes.to_vec(),
        samples: Vec::new(),
    }
    .class_table();
    let boxes = if annotation.extension().and_then(|e| e.to_str()) == Some("xml") {
        parse_voc_xml(&fs::read(annotation)?, &table)?.boxes
    } else {
        parse_json_annotation(&fs::read_to_string(annotation)?, &table)?
    };
    let n = grid_extent(input_size, stride);
    let grid = rasterize(&boxes, n, n)?;
    let gray_step = (255 / (table.len() - 1).max(1)).min(255) as u8;
    fs::write(out, grid.to_pgm(gray_step))?;
    let labels: BTreeMap<String, &str> = table
        .iter()
        .enumerate()
        .map(|(i, name)| ((i * gray_step as usize).to_string(), name.as_str()))
        .collect();
    let sidecar = json!({
        "grid": [n, n],
        "gray_step": gray_step,
        "gray_to_class": labels,
    });
    let side = sidecar_path(out);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)?)?;
    eprintln!("wrote {} ({n}x{n}) and {}", out.display(), side.display());
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_channels(dir: &Path, prefix: &str, map: &Tensor, channels: usize) -> Result<usize> {
    let count = channels.min(map.shape()[0]);
    for c in 0..count {
        let (h, w, px) = channel_to_gray(map, c)?;
        fs::write(dir.join(format!("{prefix}_c{c:02}.pgm")), encode_pgm(h, w, &px)?)?;
    }
    Ok(count)
}

pub fn dump_activation(ckpt: &Path, image: &Path, out: &Path, channels: usize) -> Result<()> {
    let net = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let size = net.config.input_size;
    let input = resize_bilinear(&read_ppm(image)?, size, size)?;
    let maps = net.activation_maps(&input)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("input.ppm"), encode_ppm(&input)?)?;
    let n = write_channels(out, "x", &maps.x, channels)?;
    let Some(seg) = maps.seg else {
        eprintln!("{}: no segmentation branch, wrote {n} channel(s) of x only", net.config.variant.label());
        return Ok(());
    };
    write_channels(out, "z", &seg.z, channels)?;
    write_channels(out, "x_act", &seg.x_act, channels)?;
    let (k, h, w) = seg.y.chw()?;
    let y = seg.y.data();
    let step = 255 / (k - 1).max(1);
    let argmax: Vec<u8> = (0..h * w)
        .map(|p| {
            let best = (0..k).max_by(|&a, &b| y[a * h * w + p].total_cmp(&y[b * h * w + p]).then(b.cmp(&a)));
            (best.unwrap_or(0) * step) as u8
        })
        .collect();
    fs::write(out.join("y_argmax.pgm"), encode_pgm(h, w, &argmax)?)?;
    eprintln!("wrote {n} channel(s) each of x, z and x_act plus y_argmax.pgm to {}", out.display());
    Ok(())
}

pub fn gen_synthetic(out: &Path, count: usize, seed: u64, classes: usize, size: usize) -> Result<()> {
    let data = Dataset::synthetic(seed, count, classes, size, grid_extent(size, 8))?;
    let manifest = write_dataset(&data, out)?;
    println!("{}", manifest.display());
    Ok(())
}

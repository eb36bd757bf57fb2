use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::Value;

use vole_core::alignment::{AlignmentOptions, SimilarityTransform};
use vole_core::frame_selection::{dhash, frame_skip_indices, select_frames as greedy_select};
use vole_core::ingestion::{
    load_gray, load_manifest, load_mesh, load_point_cloud, manifest_from_document, regauge, save_mesh,
    save_point_cloud, synthesize_scene, write_scene, ManifestDocument, MANIFEST_FILE,
};
use vole_core::metrics::{aggregate_report, chamfer_distance, mesh_volume, ItemInput, Shape};
use vole_core::pipeline::{align_scene, run_scene, PipelineConfig, RunReport};
use vole_core::reconstruction::reconstruct as carve_and_extract;
use vole_core::{mask_point_cloud, MaskingConfig, Mat3, RefinementConfig, SyntheticSolid, Vec3};

use crate::{Common, RefineArgs};

fn refinement(args: &RefineArgs) -> RefinementConfig {
    RefinementConfig {
        smooth_iters: args.smooth_iters,
        smooth_lambda: args.smooth_lambda,
        taubin_mu: args.taubin_mu,
        simplify_cell: args.simplify_cell,
    }
}

fn masking(c: &Common) -> Result<MaskingConfig> {
    let cfg = MaskingConfig::with_quota(c.quota);
    cfg.validate()?;
    Ok(cfg)
}

fn timed<T>(stage: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    log::info!("{stage}: {:.3} s", t.elapsed().as_secs_f64());
    out
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Files written so far by a command; removed again if a later write
/// fails.
#[derive(Default)]
struct Artifacts(Vec<PathBuf>);

impl Artifacts {
    fn write(&mut self, path: PathBuf, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        match f(&path) {
            Ok(()) => {
                self.0.push(path);
                Ok(())
            }
            Err(e) => {
                let _ = fs::remove_file(&path);
                for p in &self.0 {
                    let _ = fs::remove_file(p);
                }
                Err(e)
            }
        }
    }
}

pub fn run(c: &Common, manifest: &Path, out: &Path, refine: &RefineArgs, trimmed: bool) -> Result<()> {
    let cfg = PipelineConfig {
        resolution: c.resolution,
        masking: masking(c)?,
        refinement: refinement(refine),
        alignment: AlignmentOptions { trimmed },
        seed: c.seed,
        ..Default::default()
    };
    cfg.refinement.validate()?;
    let scene = timed("load", || load_manifest(manifest))?;
    let result = timed("pipeline", || run_scene(&scene, &cfg))?;
    let report = RunReport::new(&scene, &result)?;
    // nothing is written until every stage has succeeded
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (_, _, aligned) = align_scene(&scene, cfg.alignment)?;
    let mut files = Artifacts::default();
    if let Some(cloud) = &aligned {
        files.write(out.join("aligned_cloud.ply"), |p| Ok(save_point_cloud(cloud, p)?))?;
    }
    files.write(out.join("masked_cloud.ply"), |p| {
        Ok(save_point_cloud(&result.masked_cloud, p)?)
    })?;
    files.write(out.join("mesh.ply"), |p| Ok(save_mesh(&result.raw_mesh, p)?))?;
    files.write(out.join("mesh_refined.ply"), |p| Ok(save_mesh(&result.mesh, p)?))?;
    files.write(out.join("report.json"), |p| write_json(p, &report))?;
    let table = report.to_table();
    files.write(out.join("report.txt"), |p| Ok(fs::write(p, &table)?))?;
    print!("{table}");
    Ok(())
}

pub fn synth(
    c: &Common,
    solid: &SyntheticSolid,
    views: usize,
    size: (u32, u32),
    gauge_scale: Option<f64>,
    out: &Path,
) -> Result<()> {
    let scene = timed("synthesize", || synthesize_scene(solid, views, size, c.seed))?;
    let manifest = match gauge_scale {
        Some(s) => {
            let rot =
                nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vec3::new(1.0, 1.0, 1.0)), 0.7);
            let xf = SimilarityTransform::new(s, Mat3::from(rot), Vec3::new(0.3, -0.2, 0.5))?;
            regauge(&scene.manifest, &xf)
        }
        None => scene.manifest.clone(),
    };
    let path = timed("write", || write_scene(&manifest, out))?;
    println!("manifest: {}", path.display());
    println!("analytic volume (ml): {:.6}", scene.analytic_volume_ml);
    Ok(())
}

pub fn mask(c: &Common, manifest: &Path, out: &Path) -> Result<()> {
    let scene = load_manifest(manifest)?;
    let (_, views, cloud) = align_scene(&scene, AlignmentOptions::default())?;
    let cloud = cloud.context("manifest has no point_cloud")?;
    let cfg = masking(c)?;
    let masked = timed("mask", || mask_point_cloud(&cloud, &views, &cfg))?;
    save_point_cloud(&masked, out)?;
    println!("kept {} of {} points", masked.len(), cloud.len());
    Ok(())
}

pub fn reconstruct(c: &Common, manifest: &Path, cloud: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = masking(c)?;
    let scene = load_manifest(manifest)?;
    let (_, views, scene_cloud) = align_scene(&scene, AlignmentOptions::default())?;
    let extent_cloud = match cloud {
        Some(p) => load_point_cloud(p)?,
        None => {
            let cloud = scene_cloud.context("manifest has no point_cloud and --cloud was not given")?;
            mask_point_cloud(&cloud, &views, &cfg)?
        }
    };
    let rec = timed("reconstruct", || {
        carve_and_extract(&views, Some(&extent_cloud), None, c.resolution, &cfg)
    })?;
    save_mesh(&rec.mesh, out)?;
    println!(
        "mesh: {} vertices, {} triangles, watertight {}",
        rec.mesh.vertices.len(),
        rec.mesh.triangles.len(),
        rec.mesh.is_watertight()
    );
    Ok(())
}

pub fn refine(mesh: &Path, out: &Path, args: &RefineArgs) -> Result<()> {
    let m = load_mesh(mesh)?;
    let refined = timed("refine", || vole_core::refine(&m, &refinement(args)))?;
    save_mesh(&refined, out)?;
    println!(
        "mesh: {} -> {} vertices, watertight {}",
        m.vertices.len(),
        refined.vertices.len(),
        refined.is_watertight()
    );
    Ok(())
}

pub fn volume(mesh: &Path, out: Option<&Path>) -> Result<()> {
    let m = load_mesh(mesh)?;
    let v = mesh_volume(&m)?;
    if let Some(p) = out {
        write_json(p, &v)?;
    }
    println!("volume (ml): {:.3}", v.volume_ml);
    println!("watertight: {}", m.is_watertight());
    Ok(())
}

#[derive(serde::Deserialize)]
struct GtDocument {
    items: Vec<GtItem>,
}

#[derive(serde::Deserialize)]
struct GtItem {
    name: String,
    volume_ml: f64,
    #[serde(default)]
    mesh: Option<String>,
}

pub fn evaluate(c: &Common, predictions: &Path, gt: &Path, samples: usize, out: Option<&Path>) -> Result<()> {
    let gt_text = fs::read_to_string(gt).map_err(|e| io_error(gt, e))?;
    let doc: GtDocument = serde_json::from_str(&gt_text).map_err(|e| parse_error(gt, &gt_text, &e))?;
    if doc.items.is_empty() {
        bail!(vole_core::Error::EmptyList);
    }
    let gt_base = gt.parent().unwrap_or(Path::new("."));
    let mut items = Vec::with_capacity(doc.items.len());
    for it in &doc.items {
        let path = predictions.join(format!("{}.json", it.name));
        let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        let pred: Value = serde_json::from_str(&text).map_err(|e| parse_error(&path, &text, &e))?;
        let predicted_ml = pred
            .get("volume_ml")
            .and_then(Value::as_f64)
            .ok_or_else(|| vole_core::Error::validation(format!("{}.volume_ml", path.display()), "missing number"))?;
        let chamfer = match (
            pred.get("chamfer").and_then(Value::as_f64),
            pred.get("mesh").and_then(Value::as_str),
            &it.mesh,
        ) {
            (Some(cd), _, _) => Some(cd),
            (None, Some(pm), Some(gm)) => {
                let a = load_mesh(&predictions.join(pm))?;
                let b = load_mesh(&gt_base.join(gm))?;
                Some(chamfer_distance(Shape::Mesh(&a), Shape::Mesh(&b), samples, c.seed)?)
            }
            _ => None,
        };
        items.push(ItemInput {
            name: it.name.clone(),
            predicted_ml,
            gt_ml: it.volume_ml,
            chamfer,
        });
    }
    let report = aggregate_report(&items)?;
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> vole_core::Error {
    match e.kind() {
        std::io::ErrorKind::NotFound => vole_core::Error::MissingFile(path.to_path_buf()),
        _ => vole_core::Error::Io(e),
    }
}

fn parse_error(path: &Path, text: &str, e: &serde_json::Error) -> vole_core::Error {
    let offset: usize = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + e.column().saturating_sub(1);
    vole_core::Error::Parse {
        path: path.display().to_string(),
        offset: offset.min(text.len()),
        message: e.to_string(),
    }
}

pub fn select_frames(manifest: &Path, skip: Option<usize>, hamming: Option<u32>, out: &Path) -> Result<()> {
    let doc = ManifestDocument::read(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let scene = manifest_from_document(&doc, base)?;
    let kept = match (skip, hamming) {
        (Some(k), _) => frame_skip_indices(doc.images.len(), k)?,
        (None, Some(t)) => {
            let hashes = timed("hash", || {
                scene
                    .views
                    .iter()
                    .map(|v| dhash(&load_gray(Path::new(&v.image_path))?))
                    .collect::<vole_core::Result<Vec<_>>>()
            })?;
            greedy_select(&hashes, t)
        }
        (None, None) => bail!(vole_core::Error::InvalidConfig("give --skip or --hamming".into())),
    };
    let base = fs::canonicalize(base).map_err(|e| io_error(base, e))?;
    let mut filtered = doc.rebased(&base);
    filtered.images = kept.iter().map(|&i| filtered.images[i].clone()).collect();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    filtered.write(&out.join(MANIFEST_FILE))?;
    println!("kept {} of {} frames", kept.len(), doc.images.len());
    println!("{}", kept.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
    Ok(())
}

//! Scene directories: either scene JSON files with their images, or a VMRD
//! style tree with an `Annotations` folder.

use std::fs;
use std::path::{Path, PathBuf};

use stackgrasp_core::scene_file::{load_scene, save_scene, scene_image, write_png};
use stackgrasp_core::synth::{synth_generate, SynthConfig};
use stackgrasp_core::vmrd::import_vmrd;
use stackgrasp_core::{DataError, ImageRef, RgbImage, SceneAnnotation};

pub const MANIFEST: &str = "manifest.txt";

/// Every scene under `dir` with its pixels, in file-name order.
pub fn load_dir(dir: &Path) -> Result<Vec<(SceneAnnotation, RgbImage)>, DataError> {
    let scenes: Vec<SceneAnnotation> = if dir.join("Annotations").is_dir() {
        let (scenes, report) = import_vmrd(dir);
        if scenes.is_empty() {
            return Err(DataError::Config(format!("{}: no usable VMRD scenes\n{report}", dir.display())));
        }
        scenes
    } else {
        scene_files(dir)?.iter().map(|p| load_scene(p)).collect::<Result<_, _>>()?
    };
    if scenes.is_empty() {
        return Err(DataError::Config(format!("{}: no scene files found", dir.display())));
    }
    scenes
        .into_iter()
        .map(|s| {
            let img = scene_image(&s, dir)?;
            Ok((s, img))
        })
        .collect()
}

fn scene_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Writes `count` synthetic scenes with consecutive seeds from `cfg.seed`,
/// plus a manifest line per scene. Returns the manifest text.
pub fn write_synth(dir: &Path, count: usize, cfg: &SynthConfig) -> Result<String, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut manifest = String::new();
    for i in 0..count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let (img, mut scene) = synth_generate(&SynthConfig { seed, ..cfg.clone() })?;
        let stem = format!("scene_{i:04}");
        let png = format!("{stem}.png");
        scene.image = ImageRef::Path(png.clone());
        write_png(&dir.join(&png), &img)?;
        save_scene(&dir.join(format!("{stem}.json")), &scene)?;
        manifest.push_str(&format!("{stem}.json {png} {seed}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, &manifest).map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

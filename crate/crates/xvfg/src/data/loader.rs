//! Directory loader for paired-view datasets.
//!
//! Side-by-side layout: `<dir>/*.ppm` files of width 2W (left half aerial,
//! right half ground) with semantic maps of width W in `<dir>/semantic/`
//! under identical basenames. Split-folders layout: `<dir>/aerial/`,
//! `<dir>/ground/` and `<dir>/semantic/` matched by basename. Files load in
//! lexicographic order; photos resize bilinearly, semantic maps by nearest
//! neighbour so every pixel stays on the palette.

use std::path::{Path, PathBuf};

use super::image::{resize_bilinear, resize_nearest, tensor_from_raw};
use super::{
    class_of_color, dominant_class, one_hot_from_classes, semantic_color_from_classes,
    PairedSample,
};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    SideBySide,
    SplitFolders,
}

impl Layout {
    pub fn parse(s: &str) -> Result<Layout> {
        match s {
            "side-by-side" => Ok(Layout::SideBySide),
            "split-folders" => Ok(Layout::SplitFolders),
            _ => Err(Error::Config(format!(
                "unknown layout {s:?}; expected side-by-side or split-folders"
            ))),
        }
    }
}

fn sorted_ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().map(|e| e == "ppm").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Per-pixel class map of a palette-colored semantic image, with pixel
/// coordinates in the rejection diagnostic.
fn classes_of_semantic(path: &Path, w: usize, h: usize, raw: &[u8]) -> Result<Vec<usize>> {
    let mut classes = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 3;
            let rgb = (raw[i], raw[i + 1], raw[i + 2]);
            match class_of_color(rgb) {
                Some(c) => classes.push(c),
                None => {
                    return Err(Error::Data(format!(
                        "{}: color {rgb:?} at pixel ({x},{y}) is not in the palette",
                        path.display()
                    )))
                }
            }
        }
    }
    Ok(classes)
}

fn load_semantic(path: &Path, size: usize) -> Result<(Tensor, Tensor, usize)> {
    let (w, h, raw) = super::image::decode_ppm_raw(path)?;
    let classes = classes_of_semantic(path, w, h, &raw)?;
    // nearest-resize the class map itself so colors cannot blend
    let class_tensor = Tensor::new(
        Shape::new(1, 1, h, w),
        classes.iter().map(|&c| c as f64).collect(),
    );
    let resized = resize_nearest(&class_tensor, size, size);
    let classes: Vec<usize> = resized.data().iter().map(|&v| v as usize).collect();
    let onehot = one_hot_from_classes(&classes, size, size);
    let color = semantic_color_from_classes(&classes, size, size);
    let label = dominant_class(&classes);
    Ok((onehot, color, label))
}

fn load_photo(path: &Path, size: usize) -> Result<Tensor> {
    let img = super::image::decode_image(path)?;
    Ok(resize_bilinear(&img, size, size))
}

fn split_side_by_side(path: &Path) -> Result<(Tensor, Tensor)> {
    let (w, h, raw) = super::image::decode_ppm_raw(path)?;
    if w % 2 != 0 {
        return Err(Error::Data(format!(
            "{}: side-by-side file width {w} is odd",
            path.display()
        )));
    }
    let half = w / 2;
    let mut left = vec![0u8; half * h * 3];
    let mut right = vec![0u8; half * h * 3];
    for y in 0..h {
        for x in 0..half {
            for c in 0..3 {
                left[(y * half + x) * 3 + c] = raw[(y * w + x) * 3 + c];
                right[(y * half + x) * 3 + c] = raw[(y * w + half + x) * 3 + c];
            }
        }
    }
    Ok((
        tensor_from_raw(half, h, &left),
        tensor_from_raw(half, h, &right),
    ))
}

fn basename(path: &Path) -> String {
    path.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

/// Load every pair under `dir`. An empty or missing directory yields an
/// empty stream, not an error; a missing semantic twin is an error.
pub fn load_pairs(dir: &Path, layout: Layout, size: usize) -> Result<Vec<PairedSample>> {
    let mut samples = Vec::new();
    match layout {
        Layout::SideBySide => {
            let sem_dir = dir.join("semantic");
            for file in sorted_ppm_files(dir)? {
                let name = basename(&file);
                let sem_path = sem_dir.join(&name);
                if !sem_path.is_file() {
                    return Err(Error::Data(format!(
                        "missing semantic twin {} for {}",
                        sem_path.display(),
                        file.display()
                    )));
                }
                let (aerial_raw, ground_raw) = split_side_by_side(&file)?;
                let aerial = resize_bilinear(&aerial_raw, size, size);
                let ground = resize_bilinear(&ground_raw, size, size);
                let (onehot, color, label) = load_semantic(&sem_path, size)?;
                samples.push(PairedSample {
                    aerial,
                    ground,
                    ground_semantic: onehot,
                    ground_semantic_color: color,
                    scene_label: label,
                    id: name,
                });
            }
        }
        Layout::SplitFolders => {
            let (a_dir, g_dir, s_dir) =
                (dir.join("aerial"), dir.join("ground"), dir.join("semantic"));
            for file in sorted_ppm_files(&a_dir)? {
                let name = basename(&file);
                let ground_path = g_dir.join(&name);
                let sem_path = s_dir.join(&name);
                for (twin, role) in [(&ground_path, "ground"), (&sem_path, "semantic")] {
                    if !twin.is_file() {
                        return Err(Error::Data(format!(
                            "missing {role} twin {} for {}",
                            twin.display(),
                            file.display()
                        )));
                    }
                }
                let aerial = load_photo(&file, size)?;
                let ground = load_photo(&ground_path, size)?;
                let (onehot, color, label) = load_semantic(&sem_path, size)?;
                samples.push(PairedSample {
                    aerial,
                    ground,
                    ground_semantic: onehot,
                    ground_semantic_color: color,
                    scene_label: label,
                    id: name,
                });
            }
        }
    }
    Ok(samples)
}

/// Write a dataset to disk in either layout; the inverse of [`load_pairs`]
/// and the generator of loader fixtures.
pub fn export_pairs(dir: &Path, layout: Layout, samples: &[PairedSample]) -> Result<()> {
    use super::image::encode_image;
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p.display().to_string(), e))
    };
    match layout {
        Layout::SideBySide => {
            mkdir(dir)?;
            mkdir(&dir.join("semantic"))?;
            for sample in samples {
                let name = format!("{}.ppm", sample.id);
                let pair = super::image::image_grid(&[vec![&sample.aerial, &sample.ground]])?;
                encode_image(&pair, &dir.join(&name))?;
                encode_image(&sample.ground_semantic_color, &dir.join("semantic").join(&name))?;
            }
        }
        Layout::SplitFolders => {
            for sub in ["aerial", "ground", "semantic"] {
                mkdir(&dir.join(sub))?;
            }
            for sample in samples {
                let name = format!("{}.ppm", sample.id);
                encode_image(&sample.aerial, &dir.join("aerial").join(&name))?;
                encode_image(&sample.ground, &dir.join("ground").join(&name))?;
                encode_image(
                    &sample.ground_semantic_color,
                    &dir.join("semantic").join(&name),
                )?;
            }
        }
    }
    Ok(())
}

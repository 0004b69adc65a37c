//! Datasets and serialization: the procedural paired-view dataset, the
//! on-disk directory loader, the lossless image codec, and the checkpoint
//! format.

pub mod checkpoint;
pub mod image;
pub mod loader;
pub mod toy;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use image::{decode_image, encode_image, resize_bilinear, resize_nearest};
pub use loader::{load_pairs, Layout};
pub use toy::{gen_toy_pair, toy_dataset};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Number of semantic classes.
pub const NUM_CLASSES: usize = 4;

/// Semantic classes of the paired-view scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemClass {
    Sky = 0,
    Building = 1,
    Road = 2,
    Vegetation = 3,
}

/// The fixed color palette, one RGB triple per class, bijective by
/// construction. Published in the guide; loaders reject any other color.
pub const PALETTE: [(u8, u8, u8); NUM_CLASSES] = [
    (70, 130, 180),  // sky
    (128, 64, 128),  // building
    (128, 128, 128), // road
    (107, 142, 35),  // vegetation
];

pub fn class_of_color(rgb: (u8, u8, u8)) -> Option<usize> {
    PALETTE.iter().position(|&p| p == rgb)
}

/// Map an 8-bit channel value into [-1, 1].
pub fn pixel_to_signed(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// One aligned cross-view sample.
#[derive(Clone, Debug)]
pub struct PairedSample {
    /// Top-down view, [1,3,H,W] in [-1,1].
    pub aerial: Tensor,
    /// Street-level view, [1,3,H,W] in [-1,1].
    pub ground: Tensor,
    /// One-hot labeling of the ground view, [1,4,H,W].
    pub ground_semantic: Tensor,
    /// The same labeling as a palette-colored image in [-1,1].
    pub ground_semantic_color: Tensor,
    /// Dominant ground class (ties go to the lower class index).
    pub scene_label: usize,
    pub id: String,
}

impl PairedSample {
    /// All spatial sizes equal and the one-hot sums to exactly 1 per pixel.
    pub fn validate(&self) -> Result<()> {
        let s = self.aerial.shape();
        for (name, t) in [
            ("ground", &self.ground),
            ("ground_semantic_color", &self.ground_semantic_color),
        ] {
            let o = t.shape();
            if o.h != s.h || o.w != s.w {
                return Err(Error::Data(format!(
                    "sample {}: {name} is {o}, aerial is {s}",
                    self.id
                )));
            }
        }
        let sem = self.ground_semantic.shape();
        if sem.c != NUM_CLASSES || sem.h != s.h || sem.w != s.w {
            return Err(Error::Data(format!(
                "sample {}: semantic shape {sem} invalid",
                self.id
            )));
        }
        for h in 0..sem.h {
            for w in 0..sem.w {
                let total: f64 = (0..NUM_CLASSES)
                    .map(|c| self.ground_semantic.at(0, c, h, w))
                    .sum();
                if total != 1.0 {
                    return Err(Error::Data(format!(
                        "sample {}: one-hot sums to {total} at ({h},{w})",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Build the one-hot tensor [1,S,H,W] from a per-pixel class map.
pub fn one_hot_from_classes(classes: &[usize], h: usize, w: usize) -> Tensor {
    let shape = Shape::new(1, NUM_CLASSES, h, w);
    let mut data = vec![0.0; shape.numel()];
    for (i, &c) in classes.iter().enumerate() {
        let (y, x) = (i / w, i % w);
        data[shape.index(0, c, y, x)] = 1.0;
    }
    Tensor::new(shape, data)
}

/// Palette-colored [-1,1] image of a class map.
pub fn semantic_color_from_classes(classes: &[usize], h: usize, w: usize) -> Tensor {
    let shape = Shape::new(1, 3, h, w);
    let mut data = vec![0.0; shape.numel()];
    for (i, &c) in classes.iter().enumerate() {
        let (y, x) = (i / w, i % w);
        let (r, g, b) = PALETTE[c];
        data[shape.index(0, 0, y, x)] = pixel_to_signed(r);
        data[shape.index(0, 1, y, x)] = pixel_to_signed(g);
        data[shape.index(0, 2, y, x)] = pixel_to_signed(b);
    }
    Tensor::new(shape, data)
}

/// Dominant class of a class map; ties resolve to the lower index.
pub fn dominant_class(classes: &[usize]) -> usize {
    let mut counts = [0usize; NUM_CLASSES];
    for &c in classes {
        counts[c] += 1;
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

/// A dataset argument: either `toy[:count[:start]]` for the procedural
/// dataset or a directory path for on-disk pairs.
pub fn load_dataset(spec: &str, size: usize) -> Result<Vec<PairedSample>> {
    if spec == "toy" || spec.starts_with("toy:") {
        let mut parts = spec.split(':').skip(1);
        let count: usize = match parts.next() {
            None | Some("") => 64,
            Some(c) => c
                .parse()
                .map_err(|_| Error::Config(format!("bad toy count in {spec:?}")))?,
        };
        let start: u64 = match parts.next() {
            None => 0,
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("bad toy start in {spec:?}")))?,
        };
        if parts.next().is_some() {
            return Err(Error::Config(format!(
                "data spec {spec:?} has too many fields; expected toy[:count[:start]]"
            )));
        }
        return toy_dataset(start, count, size);
    }
    let dir = std::path::Path::new(spec);
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "data directory {spec:?} does not exist"
        )));
    }
    let layout = if dir.join("aerial").is_dir() && dir.join("ground").is_dir() {
        Layout::SplitFolders
    } else {
        Layout::SideBySide
    };
    load_pairs(dir, layout, size)
}

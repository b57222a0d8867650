//! Labelled image sets: IDX loading and a synthetic shapes generator.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    IdxFile,
    SyntheticShapes,
}

pub const SHAPE_CLASSES: [&str; 8] = [
    "filled_square",
    "hollow_square",
    "disk",
    "cross",
    "horizontal_bars",
    "vertical_bars",
    "diagonal",
    "ring",
];

/// `count` square images of side `side`, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledImageSet {
    pub side: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub source: ImageSource,
}

impl LabelledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Subset of the given indices, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(idx.len() * self.pixel_count());
        for &i in idx {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            side: self.side,
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            source: self.source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.side.is_power_of_two() {
            return Err(Error::invalid(format!(
                "image side {} is not a power of two",
                self.side
            )));
        }
        if self.pixels.len() != self.len() * self.pixel_count() {
            return Err(Error::CountMismatch("pixel buffer does not match image count".into()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::invalid(format!("label {l} outside 0..{}", self.classes)));
        }
        if self.class_counts().contains(&0) {
            return Err(Error::invalid("every class needs at least one image"));
        }
        Ok(())
    }
}

/// Reads an IDX image/label file pair and resizes to `side × side`.
pub fn read_idx(images: &Path, labels: &Path, side: usize) -> Result<LabelledImageSet> {
    read_idx_from(File::open(images)?, File::open(labels)?, side)
}

pub fn read_idx_from<R1: Read, R2: Read>(images: R1, labels: R2, side: usize) -> Result<LabelledImageSet> {
    let mut ri = Reader::new(BufReader::new(images), "IDX images");
    let magic = ri.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: format!("{IDX_IMAGES_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let count = ri.u32_be()? as usize;
    let rows = ri.u32_be()? as usize;
    let cols = ri.u32_be()? as usize;
    let raw = ri.bytes(count * rows * cols)?;

    let mut rl = Reader::new(BufReader::new(labels), "IDX labels");
    let magic = rl.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: format!("{IDX_LABELS_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let nlabels = rl.u32_be()? as usize;
    if nlabels != count {
        return Err(Error::CountMismatch(format!("{count} images but {nlabels} labels")));
    }
    let labels: Vec<usize> = rl.bytes(nlabels)?.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);

    let mut pixels = Vec::with_capacity(count * side * side);
    for img in raw.chunks_exact(rows * cols) {
        let scaled: Vec<f64> = img.iter().map(|&p| f64::from(p) / 255.0).collect();
        pixels.extend(resize_nearest_pad(&scaled, rows, cols, side));
    }
    Ok(LabelledImageSet {
        side,
        pixels,
        labels,
        classes,
        source: ImageSource::IdxFile,
    })
}

/// Integer nearest-neighbour upsampling followed by zero border padding.
/// Targets smaller than the source are resampled by nearest neighbour.
pub fn resize_nearest_pad(img: &[f64], rows: usize, cols: usize, side: usize) -> Vec<f64> {
    let factor = (side / rows.max(1)).min(side / cols.max(1));
    let mut out = vec![0.0; side * side];
    if factor == 0 {
        for y in 0..side {
            for x in 0..side {
                let sy = (y * rows) / side;
                let sx = (x * cols) / side;
                out[y * side + x] = img[sy * cols + sx];
            }
        }
        return out;
    }
    let (h, w) = (rows * factor, cols * factor);
    let (oy, ox) = ((side - h) / 2, (side - w) / 2);
    for y in 0..h {
        for x in 0..w {
            out[(oy + y) * side + ox + x] = img[(y / factor) * cols + x / factor];
        }
    }
    out
}

/// Synthetic geometric classes with random position and scale jitter.
///
/// Labels cycle `0, 1, …, k−1`, so class counts differ by at most one.
pub fn gen_shapes(count: usize, classes: usize, side: usize, seed: u64) -> Result<LabelledImageSet> {
    if classes == 0 || classes > SHAPE_CLASSES.len() {
        return Err(Error::invalid(format!("shape classes must be in 1..=8, got {classes}")));
    }
    if side < 8 {
        return Err(Error::invalid(format!("image side must be >= 8, got {side}")));
    }
    let mut rng = Rng::new(seed);
    let mut pixels = Vec::with_capacity(count * side * side);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        pixels.extend(draw_shape(class, side, &mut rng));
        labels.push(class);
    }
    Ok(LabelledImageSet {
        side,
        pixels,
        labels,
        classes,
        source: ImageSource::SyntheticShapes,
    })
}

fn draw_shape(class: usize, side: usize, rng: &mut Rng) -> Vec<f64> {
    let s = side as f64;
    let mut img = vec![0.0; side * side];
    // Shape half-size between 30% and 42% of the side, center jittered so
    // the shape stays inside the frame.
    let half = s * rng.uniform_range(0.30, 0.42);
    let slack = (s / 2.0 - half).max(0.0);
    let cx = s / 2.0 + rng.uniform_range(-slack, slack);
    let cy = s / 2.0 + rng.uniform_range(-slack, slack);
    let thick = (half * 0.35).max(1.0);
    for y in 0..side {
        for x in 0..side {
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            let inside_box = px.abs() <= half && py.abs() <= half;
            let r = (px * px + py * py).sqrt();
            let on = match class {
                0 => inside_box,
                1 => inside_box && (px.abs() > half - thick || py.abs() > half - thick),
                2 => r <= half,
                3 => inside_box && (px.abs() <= thick / 2.0 + 0.5 || py.abs() <= thick / 2.0 + 0.5),
                4 => inside_box && (((py + half) / thick).floor() as i64).rem_euclid(2) == 0,
                5 => inside_box && (((px + half) / thick).floor() as i64).rem_euclid(2) == 0,
                6 => inside_box && (px - py).abs() <= thick * 0.75,
                _ => r <= half && r >= half - thick,
            };
            if on {
                img[y * side + x] = 1.0;
            }
        }
    }
    img
}

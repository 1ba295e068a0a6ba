//! Labeled image sets: synthetic generators, IDX files, and PNG directories
//! with a `filename,label` CSV.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::raster::{Image8, ImageError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelRange { index: usize, label: usize, classes: usize },
    #[error("image {index} is {got:?}, expected {expected:?}")]
    Shape { index: usize, got: (usize, usize, usize), expected: (usize, usize, usize) },
    #[error("idx: {0}")]
    Idx(String),
    #[error("labels csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Image8>,
    labels: Vec<usize>,
    names: Vec<String>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image8>, labels: Vec<usize>, classes: usize) -> Result<Self, DatasetError> {
        let names = (0..images.len()).map(|i| format!("{i:05}.png")).collect();
        Self::with_names(images, labels, names, classes)
    }

    pub fn with_names(
        images: Vec<Image8>,
        labels: Vec<usize>,
        names: Vec<String>,
        classes: usize,
    ) -> Result<Self, DatasetError> {
        if images.len() != labels.len() || names.len() != labels.len() {
            return Err(DatasetError::CountMismatch { images: images.len(), labels: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DatasetError::LabelRange { index, label, classes });
        }
        if let Some(first) = images.first() {
            if let Some((index, im)) = images.iter().enumerate().find(|(_, im)| im.dims() != first.dims()) {
                return Err(DatasetError::Shape { index, got: im.dims(), expected: first.dims() });
            }
        }
        Ok(Self { images, labels, names, classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image8] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| im.dims())
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            classes: self.classes,
        }
    }

    /// Writes `<dir>/<name>` PNGs and `<dir>/labels.csv`.
    pub fn save_png_dir(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut csv = String::from("filename,label\n");
        for ((im, &l), name) in self.images.iter().zip(&self.labels).zip(&self.names) {
            im.save_png(dir.join(name))?;
            csv.push_str(&format!("{name},{l}\n"));
        }
        fs::write(dir.join("labels.csv"), csv)?;
        Ok(())
    }

    /// Reads a directory of PNGs listed in `labels.csv`. `classes` defaults to
    /// one more than the largest label.
    pub fn load_png_dir(dir: impl AsRef<Path>, classes: Option<usize>) -> Result<Self, DatasetError> {
        let dir = dir.as_ref();
        let (names, labels) = read_labels_csv(&dir.join("labels.csv"))?;
        let images = names.iter().map(|n| Image8::load_png(dir.join(n))).collect::<Result<Vec<_>, _>>()?;
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| m + 1).max(2));
        Self::with_names(images, labels, names, classes)
    }
}

pub fn read_labels_csv(path: &Path) -> Result<(Vec<String>, Vec<usize>), DatasetError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DatasetError::Csv(e.to_string()))?;
    let mut names = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| DatasetError::Csv(e.to_string()))?;
        if rec.len() != 2 {
            return Err(DatasetError::Csv(format!("row {}: expected filename,label", line + 2)));
        }
        names.push(rec[0].to_string());
        labels.push(
            rec[1].trim().parse().map_err(|_| DatasetError::Csv(format!("row {}: bad label '{}'", line + 2, &rec[1])))?,
        );
    }
    Ok((names, labels))
}

fn idx_header(bytes: &[u8], kind: u8, rank: usize) -> Result<(Vec<usize>, &[u8]), DatasetError> {
    if bytes.len() < 4 + 4 * rank || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != kind || bytes[3] as usize != rank {
        return Err(DatasetError::Idx(format!("expected u8 idx of rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let body = &bytes[4 + 4 * rank..];
    let need: usize = dims.iter().product();
    if body.len() < need {
        return Err(DatasetError::Idx(format!("body holds {} bytes, header promises {need}", body.len())));
    }
    Ok((dims, &body[..need]))
}

/// MNIST-style IDX pair: `[N, H, W]` u8 images and `[N]` u8 labels.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, classes: usize) -> Result<LabeledDataset, DatasetError> {
    let ib = fs::read(images)?;
    let lb = fs::read(labels)?;
    let (dims, pix) = idx_header(&ib, 0x08, 3)?;
    let (ldims, lab) = idx_header(&lb, 0x08, 1)?;
    if dims[0] != ldims[0] {
        return Err(DatasetError::CountMismatch { images: dims[0], labels: ldims[0] });
    }
    let (h, w) = (dims[1], dims[2]);
    let imgs = pix.chunks_exact(h * w).map(|c| Image8::new(h, w, 1, c.to_vec())).collect::<Result<Vec<_>, _>>()?;
    LabeledDataset::new(imgs, lab.iter().map(|&l| l as usize).collect(), classes)
}

/// Desk-scale image size.
pub const DESK_SIDE: usize = 32;
pub const DESK_CLASSES: usize = 10;

/// Class glyphs on a 4×4 grid of cells, row-major bits from the top-left.
const GLYPHS: [u16; DESK_CLASSES] = [
    0b1111_1001_1001_1111,
    0b0110_0110_0110_0110,
    0b0000_1111_1111_0000,
    0b1000_0100_0010_0001,
    0b0001_0010_0100_1000,
    0b1100_1100_0011_0011,
    0b0011_0011_1100_1100,
    0b1111_0000_0000_1111,
    0b1001_1001_1001_1001,
    0b0110_1111_1111_0110,
];
const CELL: usize = 6;

/// Synthetic 32×32 RGB ten-class set: a low-contrast glyph at a jittered
/// position on a flat background of random colour. Images are piecewise
/// constant and keep every channel inside `[24, 231]`.
pub fn desk_dataset(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = DESK_SIDE;
    let glyph = 4 * CELL;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..DESK_CLASSES);
        let bg: [i32; 3] = std::array::from_fn(|_| rng.gen_range(96..=160));
        let sign = if rng.gen_bool(0.5) { 1 } else { -1 };
        let fg: [i32; 3] = std::array::from_fn(|c| bg[c] + sign * rng.gen_range(14..=26));
        let oy = rng.gen_range(0..=side - glyph);
        let ox = rng.gen_range(0..=side - glyph);
        let mut data = Vec::with_capacity(side * side * 3);
        for r in 0..side {
            for c in 0..side {
                let on = r >= oy && r < oy + glyph && c >= ox && c < ox + glyph && {
                    let (gr, gc) = ((r - oy) / CELL, (c - ox) / CELL);
                    GLYPHS[label] >> (15 - (gr * 4 + gc)) & 1 == 1
                };
                let px = if on { &fg } else { &bg };
                data.extend(px.iter().map(|&v| v.clamp(24, 231) as u8));
            }
        }
        images.push(Image8::new(side, side, 3, data).expect("fixed dims"));
        labels.push(label);
    }
    LabeledDataset::new(images, labels, DESK_CLASSES).expect("generated labels in range")
}

/// Two linearly separable classes: dark versus bright noisy fields.
pub fn synthetic_blobs(height: usize, width: usize, channels: usize, n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let centre = if label == 0 { 70 } else { 185 };
        let data = (0..height * width * channels).map(|_| (centre + rng.gen_range(-40..=40)) as u8).collect();
        images.push(Image8::new(height, width, channels, data).expect("fixed dims"));
        labels.push(label);
    }
    LabeledDataset::new(images, labels, 2).expect("labels 0/1")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_images_are_in_range_and_deterministic() {
        let a = desk_dataset(20, 4);
        let b = desk_dataset(20, 4);
        assert_eq!(a, b);
        assert_eq!(a.dims(), Some((32, 32, 3)));
        for im in a.images() {
            assert!(im.data().iter().all(|&v| (24..=231).contains(&v)));
        }
    }

    #[test]
    fn label_checks() {
        let im = Image8::filled(2, 2, 1, 0);
        assert!(matches!(
            LabeledDataset::new(vec![im.clone()], vec![3], 3),
            Err(DatasetError::LabelRange { .. })
        ));
        assert!(matches!(
            LabeledDataset::new(vec![im.clone(), im], vec![0], 3),
            Err(DatasetError::CountMismatch { .. })
        ));
    }

    #[test]
    fn png_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = desk_dataset(5, 1);
        d.save_png_dir(dir.path()).unwrap();
        let back = LabeledDataset::load_png_dir(dir.path(), Some(DESK_CLASSES)).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn idx_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let mut ib = vec![0, 0, 8, 3];
        for d in [2u32, 3, 2] {
            ib.extend_from_slice(&d.to_be_bytes());
        }
        ib.extend(0..12u8);
        let mut lb = vec![0, 0, 8, 1];
        lb.extend_from_slice(&2u32.to_be_bytes());
        lb.extend([1, 0]);
        fs::write(dir.path().join("i"), &ib).unwrap();
        fs::write(dir.path().join("l"), &lb).unwrap();
        let d = load_idx(dir.path().join("i"), dir.path().join("l"), 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.images()[1].data(), &[6, 7, 8, 9, 10, 11]);
        assert_eq!(d.labels(), &[1, 0]);
        fs::write(dir.path().join("bad"), &ib[..20]).unwrap();
        assert!(load_idx(dir.path().join("bad"), dir.path().join("l"), 2).is_err());
    }
}

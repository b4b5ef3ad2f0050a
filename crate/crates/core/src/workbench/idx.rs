use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Square grayscale images with class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub side: usize,
    /// Flattened row-major, intensities in `[0, 1]`.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub split: String,
}

impl Dataset {
    pub fn new(side: usize, images: Vec<Vec<f64>>, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::format(
                "dataset",
                format!("{} images but {} labels", images.len(), labels.len()),
            ));
        }
        if let Some(i) = images.iter().position(|im| im.len() != side * side) {
            return Err(Error::format("dataset", format!("image {i} is not {side}×{side}")));
        }
        if images.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::format("dataset", "pixel outside [0, 1]"));
        }
        Ok(Dataset {
            side,
            images,
            labels,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Items `start..start + n` as a new dataset.
    pub fn slice(&self, start: usize, n: usize, split: impl Into<String>) -> Dataset {
        let end = (start + n).min(self.len());
        let start = start.min(end);
        Dataset {
            side: self.side,
            images: self.images[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            split: split.into(),
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fsio::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, "truncated header"))
}

struct Header {
    count: usize,
    rows: usize,
    cols: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: u32, what: &'static str) -> Result<Header> {
    let m = be_u32(bytes, 0, what)?;
    if m != magic {
        return Err(Error::format(what, format!("bad magic 0x{m:08x}, expected 0x{magic:08x}")));
    }
    let count = be_u32(bytes, 4, what)? as usize;
    if magic == IMAGES_MAGIC {
        Ok(Header {
            count,
            rows: be_u32(bytes, 8, what)? as usize,
            cols: be_u32(bytes, 12, what)? as usize,
            offset: 16,
        })
    } else {
        Ok(Header {
            count,
            rows: 1,
            cols: 1,
            offset: 8,
        })
    }
}

/// Reads an IDX image file and its label file (optionally gzipped).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_prefix(images_path, labels_path, usize::MAX)
}

/// As [`load_idx`] but keeps at most the first `limit` items. The files are
/// still validated in full.
pub fn load_idx_prefix(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, limit: usize) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images_path.as_ref())?;
    let lbl_bytes = read_maybe_gz(labels_path.as_ref())?;
    let ih = parse_header(&img_bytes, IMAGES_MAGIC, "idx images")?;
    let lh = parse_header(&lbl_bytes, LABELS_MAGIC, "idx labels")?;
    if ih.rows != ih.cols || ih.rows == 0 {
        return Err(Error::format("idx images", format!("non-square {}×{} images", ih.rows, ih.cols)));
    }
    let px = ih.rows * ih.cols;
    if img_bytes.len() != ih.offset + ih.count * px {
        return Err(Error::format(
            "idx images",
            format!("header declares {} images but the file holds {} bytes", ih.count, img_bytes.len()),
        ));
    }
    if lbl_bytes.len() != lh.offset + lh.count {
        return Err(Error::format(
            "idx labels",
            format!("header declares {} labels but the file holds {} bytes", lh.count, lbl_bytes.len()),
        ));
    }
    if ih.count != lh.count {
        return Err(Error::format(
            "idx",
            format!("{} images but {} labels", ih.count, lh.count),
        ));
    }
    let n = ih.count.min(limit);
    let images = img_bytes[ih.offset..ih.offset + n * px]
        .chunks_exact(px)
        .map(|c| c.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    let labels = lbl_bytes[lh.offset..lh.offset + n].iter().map(|&b| usize::from(b)).collect();
    let split = images_path
        .as_ref()
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(ih.rows, images, labels, split)
}

/// Writes `ds` as an IDX image/label pair. Pixels are rounded to the
/// nearest multiple of 1/255.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    if let Some(l) = ds.labels.iter().find(|&&l| l > 255) {
        return Err(Error::InvalidArgument(format!("label {l} does not fit in a byte")));
    }
    let side = ds.side as u32;
    let mut img = Vec::with_capacity(16 + ds.len() * ds.side * ds.side);
    for v in [IMAGES_MAGIC, ds.len() as u32, side, side] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for im in &ds.images {
        img.extend(im.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    for v in [LABELS_MAGIC, ds.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend(ds.labels.iter().map(|&l| l as u8));
    fsio::write_atomic(images_path, &img)?;
    fsio::write_atomic(labels_path, &lbl)
}

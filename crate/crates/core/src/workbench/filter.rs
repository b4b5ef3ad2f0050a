use serde::{Deserialize, Serialize};

use crate::raster::pixel_variance;

/// Images with intensity variance below this carry almost no structure.
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub retention: f64,
    /// Mean and standard deviation of the kept count over batches of
    /// `batch` consecutive images (a single batch when `batch` is 0).
    pub batch: usize,
    pub mean_kept_per_batch: f64,
    pub std_kept_per_batch: f64,
}

/// Keeps the images whose pixel variance is at least `threshold`. Returns
/// the indices of the kept images and summary statistics.
pub fn variance_filter(images: &[Vec<f64>], threshold: f64, batch: usize) -> (Vec<usize>, FilterStats) {
    let kept: Vec<usize> = (0..images.len())
        .filter(|&i| pixel_variance(&images[i]) >= threshold)
        .collect();
    let size = if batch == 0 { images.len().max(1) } else { batch };
    let batches = images.len().div_ceil(size);
    let mut per_batch = vec![0.0; batches];
    for &i in &kept {
        per_batch[i / size] += 1.0;
    }
    let (mean, std) = if batches == 0 {
        (0.0, 0.0)
    } else {
        let m = per_batch.iter().sum::<f64>() / batches as f64;
        let v = per_batch.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / batches as f64;
        (m, v.sqrt())
    };
    let stats = FilterStats {
        total: images.len(),
        kept: kept.len(),
        retention: if images.is_empty() { 0.0 } else { kept.len() as f64 / images.len() as f64 },
        batch: size,
        mean_kept_per_batch: mean,
        std_kept_per_batch: std,
    };
    (kept, stats)
}

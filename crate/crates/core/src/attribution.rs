//! Segment importance from the pullback metric, heatmaps, and scoring
//! against human annotations.
//!
//! The score of a segment is the largest eigenvalue of the metric's
//! diagonal block over that segment's coordinates, i.e. the squared
//! spectral norm of the Jacobian restricted to the segment.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{check_len, Error, Result};
use crate::fsio;
use crate::geometry::metric::pullback_of;
use crate::linalg::symmetric_eigen;
use crate::netcore::Network;
use crate::raster::GrayImage;

#[derive(Clone, Debug, PartialEq)]
pub enum MapLayout {
    /// Patches on a `rows × cols` grid, row-major.
    Grid { rows: usize, cols: usize },
    /// A sequence of named tokens.
    Sequence { tokens: Vec<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    pub scores: Vec<f64>,
    pub layout: MapLayout,
    /// Largest eigenvalue of the full metric the scores came from (0 when
    /// unknown, e.g. for maps read from disk).
    pub lambda_max: f64,
}

impl ImportanceMap {
    pub fn new(scores: Vec<f64>, layout: MapLayout) -> Result<Self> {
        let n = match &layout {
            MapLayout::Grid { rows, cols } => rows * cols,
            MapLayout::Sequence { tokens } => tokens.len(),
        };
        check_len("importance scores", n, scores.len())?;
        if let Some(s) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::InvalidArgument(format!("importance score {s} is not a finite non-negative number")));
        }
        Ok(ImportanceMap {
            scores,
            layout,
            lambda_max: 0.0,
        })
    }

    /// `segment,row,col,score` for grids, `segment,token,score` for
    /// sequences.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.layout {
            MapLayout::Grid { cols, .. } => {
                out.push_str("segment,row,col,score\n");
                for (i, s) in self.scores.iter().enumerate() {
                    let _ = writeln!(out, "{i},{},{},{s}", i / cols, i % cols);
                }
            }
            MapLayout::Sequence { tokens } => {
                out.push_str("segment,token,score\n");
                for (i, (t, s)) in tokens.iter().zip(&self.scores).enumerate() {
                    let _ = writeln!(out, "{i},{},{s}", t.replace(',', " "));
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::format("importance csv", reason);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        let score = |f: &str| f.trim().parse::<f64>().map_err(|_| bad(format!("bad score {f:?}")));
        let index = |f: &str| f.trim().parse::<usize>().map_err(|_| bad(format!("bad index {f:?}")));
        match header.trim() {
            "segment,row,col,score" => {
                let mut scores = Vec::with_capacity(rows.len());
                let (mut max_r, mut max_c) = (0, 0);
                for (i, r) in rows.iter().enumerate() {
                    if r.len() != 4 || index(r[0])? != i {
                        return Err(bad(format!("row {i} malformed")));
                    }
                    max_r = max_r.max(index(r[1])?);
                    max_c = max_c.max(index(r[2])?);
                    scores.push(score(r[3])?);
                }
                let layout = MapLayout::Grid {
                    rows: max_r + 1,
                    cols: max_c + 1,
                };
                ImportanceMap::new(scores, layout)
            }
            "segment,token,score" => {
                let mut scores = Vec::with_capacity(rows.len());
                let mut tokens = Vec::with_capacity(rows.len());
                for (i, r) in rows.iter().enumerate() {
                    if r.len() != 3 || index(r[0])? != i {
                        return Err(bad(format!("row {i} malformed")));
                    }
                    tokens.push(r[1].to_string());
                    scores.push(score(r[2])?);
                }
                ImportanceMap::new(scores, MapLayout::Sequence { tokens })
            }
            other => Err(bad(format!("unknown header {other:?}"))),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fsio::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        ImportanceMap::from_csv(&fsio::read_to_string(path)?)
    }
}

/// Scores every segment of the embedding of `raw` by the top eigenvalue of
/// its diagonal metric block.
pub fn feature_importance(net: &Network, raw: &[f64]) -> Result<ImportanceMap> {
    let e = net.embed(raw)?;
    feature_importance_at(net, &e)
}

/// As [`feature_importance`], starting from a point already in the
/// embedding space.
pub fn feature_importance_at(net: &Network, embedding: &[f64]) -> Result<ImportanceMap> {
    let jac = net.jacobian(embedding, net.embed_boundary())?;
    let g = pullback_of(&jac, None)?;
    let layout = net.layout();
    let mut scores = Vec::with_capacity(layout.segments);
    for s in 0..layout.segments {
        let idx: Vec<usize> = layout.coords(s).collect();
        let (vals, _) = symmetric_eigen(&g.principal_submatrix(&idx));
        scores.push(vals.first().copied().unwrap_or(0.0).max(0.0));
    }
    let (full, _) = symmetric_eigen(&g);
    let lambda_max = full.first().copied().unwrap_or(0.0).max(0.0);
    let layout2d = match net.patch_embed() {
        Some(p) if p.num_patches() == layout.segments => MapLayout::Grid {
            rows: p.grid_side(),
            cols: p.grid_side(),
        },
        _ => MapLayout::Sequence {
            tokens: (0..layout.segments).map(|i| format!("s{i}")).collect(),
        },
    };
    let mut map = ImportanceMap::new(scores, layout2d)?;
    map.lambda_max = lambda_max;
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Linear,
    /// Min-max of `ln(s + 1e-12·max)`.
    Log,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Normalization::Linear),
            "log" => Ok(Normalization::Log),
            _ => Err(Error::InvalidArgument(format!("unknown normalization {s:?}"))),
        }
    }
}

/// Min-max normalization to `[0, 1]`. `None` when all values are equal.
pub fn min_max(values: &[f64]) -> Option<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    Some(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Per-segment intensities in `[0, 1]`; all-equal scores give 0.5
/// everywhere.
pub fn normalized_scores(map: &ImportanceMap, normalization: Normalization) -> Vec<f64> {
    let values = match normalization {
        Normalization::Linear => map.scores.clone(),
        Normalization::Log => {
            let top = map.scores.iter().copied().fold(0.0, f64::max);
            let floor = if top > 0.0 { 1e-12 * top } else { f64::MIN_POSITIVE };
            map.scores.iter().map(|s| (s + floor).ln()).collect()
        }
    };
    min_max(&values).unwrap_or_else(|| vec![0.5; values.len()])
}

/// Renders a grid map as an image with each segment drawn as a
/// `patch × patch` block.
pub fn importance_heatmap(map: &ImportanceMap, normalization: Normalization, patch: usize) -> Result<GrayImage> {
    let MapLayout::Grid { rows, cols } = map.layout else {
        return Err(Error::InvalidArgument("heatmaps need a grid layout".into()));
    };
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let levels = normalized_scores(map, normalization);
    let (w, h) = (cols * patch, rows * patch);
    let pixels = (0..h * w)
        .map(|i| levels[(i / w / patch) * cols + (i % w) / patch])
        .collect();
    GrayImage::new(w, h, pixels)
}

/// Per-token human annotation averages, grouped into sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub sentences: Vec<Vec<(String, f64)>>,
}

impl GroundTruth {
    /// One `token score` pair per line (whitespace separated, the score is
    /// the last field); a blank line ends a sentence. Lines starting with
    /// `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sentences = Vec::new();
        let mut current = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            if line.is_empty() {
                if !current.is_empty() {
                    sentences.push(std::mem::take(&mut current));
                }
                continue;
            }
            let (token, score) = line
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| Error::format("ground truth", format!("line {}: expected `token score`", n + 1)))?;
            let score: f64 = score
                .parse()
                .map_err(|_| Error::format("ground truth", format!("line {}: bad score {score:?}", n + 1)))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::format("ground truth", format!("line {}: score {score} outside [0, 1]", n + 1)));
            }
            current.push((token.trim().to_string(), score));
        }
        if !current.is_empty() {
            sentences.push(current);
        }
        Ok(GroundTruth { sentences })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        GroundTruth::parse(&fsio::read_to_string(path)?)
    }

    pub fn scores(&self, sentence: usize) -> Vec<f64> {
        self.sentences[sentence].iter().map(|(_, s)| *s).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineScore {
    pub value: f64,
    /// One of the vectors was zero after normalization; `value` is then 0.
    pub degenerate: bool,
}

/// Cosine similarity after min-max normalizing both vectors to `[0, 1]`. A
/// constant vector normalizes to zero.
pub fn cosine_similarity_eval(pred: &[f64], truth: &[f64]) -> Result<CosineScore> {
    check_len("ground truth", pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("cannot score empty vectors".into()));
    }
    let a = min_max(pred).unwrap_or_else(|| vec![0.0; pred.len()]);
    let b = min_max(truth).unwrap_or_else(|| vec![0.0; truth.len()]);
    let na = crate::linalg::norm(&a);
    let nb = crate::linalg::norm(&b);
    if na == 0.0 || nb == 0.0 {
        return Ok(CosineScore {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(CosineScore {
        value: (crate::linalg::dot(&a, &b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Mean sentence-level cosine similarity between two annotation files with
/// the same sentence structure.
pub fn corpus_similarity(pred: &GroundTruth, truth: &GroundTruth) -> Result<(f64, Vec<CosineScore>)> {
    check_len("sentence count", truth.sentences.len(), pred.sentences.len())?;
    if truth.sentences.is_empty() {
        return Err(Error::InvalidArgument("no sentences to score".into()));
    }
    let scores = (0..truth.sentences.len())
        .map(|i| cosine_similarity_eval(&pred.scores(i), &truth.scores(i)))
        .collect::<Result<Vec<_>>>()?;
    let mean = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(scores: Vec<f64>, rows: usize, cols: usize) -> ImportanceMap {
        ImportanceMap::new(scores, MapLayout::Grid { rows, cols }).unwrap()
    }

    #[test]
    fn heatmap_examples() {
        let img = importance_heatmap(&grid(vec![0.0, 1.0], 1, 2), Normalization::Linear, 1).unwrap();
        assert_eq!(img.pixels, vec![0.0, 1.0]);
        let img = importance_heatmap(&grid(vec![3.0; 4], 2, 2), Normalization::Linear, 2).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.5));
        assert_eq!((img.width, img.height), (4, 4));
    }

    #[test]
    fn heatmap_blocks_are_constant() {
        let scores: Vec<f64> = (0..196).map(f64::from).collect();
        let img = importance_heatmap(&grid(scores, 14, 14), Normalization::Linear, 2).unwrap();
        assert_eq!((img.width, img.height), (28, 28));
        for r in 0..28 {
            for c in 0..28 {
                let seg = (r / 2) * 14 + c / 2;
                assert_eq!(img.get(r, c), seg as f64 / 195.0);
            }
        }
    }

    #[test]
    fn log_normalization_is_monotone() {
        let m = grid(vec![1e-6, 1e-3, 1.0, 0.0], 2, 2);
        let l = normalized_scores(&m, Normalization::Log);
        assert_eq!(l[2], 1.0);
        assert_eq!(l[3], 0.0);
        assert!(l[0] < l[1] && l[1] < l[2]);
    }

    #[test]
    fn cosine_examples() {
        let s = cosine_similarity_eval(&[0.2, 0.9, 0.4], &[0.2, 0.9, 0.4]).unwrap();
        assert!((s.value - 1.0).abs() < 1e-12);
        let s = cosine_similarity_eval(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(s.value, 0.0);
        let s = cosine_similarity_eval(&[1.0, 2.0, 3.0], &[0.0, 0.5, 1.0]).unwrap();
        assert!((s.value - 1.0).abs() < 1e-12);
        let s = cosine_similarity_eval(&[1.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!(s.degenerate && s.value == 0.0);
        assert!(cosine_similarity_eval(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let m = grid(vec![0.5, 1.25, 0.0, 3.0, 2.0, 1.0], 2, 3);
        assert_eq!(ImportanceMap::from_csv(&m.to_csv()).unwrap(), m);
        let s = ImportanceMap::new(
            vec![0.1, 0.7],
            MapLayout::Sequence {
                tokens: vec!["[CLS]".into(), "hello".into()],
            },
        )
        .unwrap();
        assert_eq!(ImportanceMap::from_csv(&s.to_csv()).unwrap(), s);
    }

    #[test]
    fn ground_truth_parsing() {
        let gt = GroundTruth::parse("the 0\nworst 1\n\n# comment\nok 0.5\nfine 0.25\n").unwrap();
        assert_eq!(gt.sentences.len(), 2);
        assert_eq!(gt.scores(1), vec![0.5, 0.25]);
        assert!(GroundTruth::parse("word 1.5\n").is_err());
        assert!(GroundTruth::parse("word\n").is_err());
        let (mean, _) = corpus_similarity(&gt, &gt).unwrap();
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_negative_scores() {
        assert!(ImportanceMap::new(vec![-1.0], MapLayout::Grid { rows: 1, cols: 1 }).is_err());
    }
}

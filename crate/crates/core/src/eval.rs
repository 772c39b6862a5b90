//! Cross-modal retrieval metrics.
//!
//! Image-to-text (I2T): each image queries the caption gallery and scores a
//! hit at `K` if any of its own captions ranks in the top `K`. Text-to-image
//! (T2I): each caption queries the image gallery and scores a hit if its image
//! ranks in the top `K`. Galleries are ranked by descending similarity with
//! ties going to the lower gallery index. R@sum adds the six recalls.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{DataError, PairedDataset, RetrievalSet, Split};
use crate::losses::LossError;
use crate::model::{EmbeddingNetwork, ModelError};
use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("caption column {caption} maps to image {image}, but there are {images} images")]
    UnmappedCaption {
        caption: usize,
        image: usize,
        images: usize,
    },
    #[error("similarity matrix has {cols} caption columns but {mapped} mapped captions")]
    CaptionCount { cols: usize, mapped: usize },
    #[error("recall needs K >= 1")]
    ZeroK,
    #[error("cannot average an empty list of reports")]
    NoReports,
    #[error("run aggregation needs at least 2 reports, got {0}")]
    TooFewRuns(usize),
    #[error("fold size {fold} exceeds the {available} images of the split")]
    FoldTooLarge { fold: usize, available: usize },
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn check_mapping(s: &Matrix, cap_to_img: &[usize]) -> Result<(), EvalError> {
    if s.cols() != cap_to_img.len() {
        return Err(EvalError::CaptionCount {
            cols: s.cols(),
            mapped: cap_to_img.len(),
        });
    }
    if let Some((caption, &image)) = cap_to_img.iter().enumerate().find(|(_, &i)| i >= s.rows()) {
        return Err(EvalError::UnmappedCaption {
            caption,
            image,
            images: s.rows(),
        });
    }
    Ok(())
}

/// Zero-based rank of `target` among `scores` (descending, lower index wins
/// ties). Stops counting at `cap`.
fn rank_of(scores: impl Iterator<Item = f64>, target: usize, target_score: f64, cap: usize) -> usize {
    let mut ahead = 0;
    for (j, v) in scores.enumerate() {
        if v > target_score || (v == target_score && j < target) {
            ahead += 1;
            if ahead >= cap {
                break;
            }
        }
    }
    ahead
}

/// Best (smallest) rank of any own caption, per image query, capped at `cap`.
fn i2t_ranks(s: &Matrix, cap_to_img: &[usize], cap: usize) -> Vec<usize> {
    let mut own = vec![Vec::new(); s.rows()];
    for (c, &i) in cap_to_img.iter().enumerate() {
        own[i].push(c);
    }
    (0..s.rows())
        .map(|i| {
            let row = s.row(i);
            own[i]
                .iter()
                .map(|&p| rank_of(row.iter().copied(), p, row[p], cap))
                .min()
                .unwrap_or(cap)
        })
        .collect()
}

fn t2i_ranks(s: &Matrix, cap_to_img: &[usize], cap: usize) -> Vec<usize> {
    (0..s.cols())
        .map(|c| {
            let g = cap_to_img[c];
            rank_of((0..s.rows()).map(|i| s.get(i, c)), g, s.get(g, c), cap)
        })
        .collect()
}

fn percent_within(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Image-to-text R@K on an `n_img x n_cap` similarity matrix, in percent.
pub fn recall_i2t(s: &Matrix, cap_to_img: &[usize], k: usize) -> Result<f64, EvalError> {
    check_mapping(s, cap_to_img)?;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(percent_within(&i2t_ranks(s, cap_to_img, k), k))
}

/// Text-to-image R@K on an `n_img x n_cap` similarity matrix, in percent.
pub fn recall_t2i(s: &Matrix, cap_to_img: &[usize], k: usize) -> Result<f64, EvalError> {
    check_mapping(s, cap_to_img)?;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(percent_within(&t2i_ranks(s, cap_to_img, k), k))
}

/// R@1/5/10 in both directions and their sum, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub rsum: f64,
}

pub const METRIC_NAMES: [&str; 7] = ["i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10", "rsum"];

impl RetrievalReport {
    /// Builds a report from the six recalls; `rsum` is their sum.
    pub fn new(recalls: [f64; 6]) -> Self {
        let [i2t_r1, i2t_r5, i2t_r10, t2i_r1, t2i_r5, t2i_r10] = recalls;
        Self {
            i2t_r1,
            i2t_r5,
            i2t_r10,
            t2i_r1,
            t2i_r5,
            t2i_r10,
            rsum: recalls.iter().sum(),
        }
    }

    pub fn recalls(&self) -> [f64; 6] {
        [
            self.i2t_r1,
            self.i2t_r5,
            self.i2t_r10,
            self.t2i_r1,
            self.t2i_r5,
            self.t2i_r10,
        ]
    }

    pub fn metrics(&self) -> [f64; 7] {
        let r = self.recalls();
        [r[0], r[1], r[2], r[3], r[4], r[5], self.rsum]
    }

    pub fn from_similarities(s: &Matrix, cap_to_img: &[usize]) -> Result<Self, EvalError> {
        check_mapping(s, cap_to_img)?;
        let i2t = i2t_ranks(s, cap_to_img, 10);
        let t2i = t2i_ranks(s, cap_to_img, 10);
        Ok(Self::new([
            percent_within(&i2t, 1),
            percent_within(&i2t, 5),
            percent_within(&i2t, 10),
            percent_within(&t2i, 1),
            percent_within(&t2i, 5),
            percent_within(&t2i, 10),
        ]))
    }

    /// `name=value` lines at one decimal, each followed by `name.raw=` at
    /// full precision.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (name, v) in METRIC_NAMES.iter().zip(self.metrics()) {
            let _ = writeln!(out, "{name}={v:.1}");
            let _ = writeln!(out, "{name}.raw={v:?}");
        }
        out
    }

    /// Reads back the `.raw` lines written by [`to_key_values`](Self::to_key_values).
    pub fn from_key_values(text: &str) -> Option<Self> {
        let mut values = [None; 7];
        for line in text.lines() {
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let Some(name) = key.strip_suffix(".raw") else {
                continue;
            };
            if let Some(i) = METRIC_NAMES.iter().position(|n| *n == name) {
                values[i] = value.trim().parse::<f64>().ok();
            }
        }
        let mut recalls = [0.0; 6];
        for (r, v) in recalls.iter_mut().zip(values) {
            *r = v?;
        }
        let mut report = Self::new(recalls);
        report.rsum = values[6]?;
        Some(report)
    }
}

const TABLE_HEADER: &str = "R@1    R@5    R@10 |  R@1    R@5    R@10 |  R@sum";

/// Aligned table in I2T, T2I, R@sum column order, one row per labelled
/// report.
pub fn render_table(rows: &[(String, RetrievalReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:width$}   {:^20} | {:^20} |",
        "", "Image-to-Text", "Text-to-Image"
    );
    let _ = writeln!(out, "{:width$}  {TABLE_HEADER}", "");
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{label:width$}  {:5.1}  {:5.1}  {:5.1} | {:5.1}  {:5.1}  {:5.1} | {:6.1}",
            r.i2t_r1, r.i2t_r5, r.i2t_r10, r.t2i_r1, r.t2i_r5, r.t2i_r10, r.rsum
        );
    }
    out
}

/// Similarities between embedded images and captions of a retrieval set.
pub fn retrieval_similarities(net: &EmbeddingNetwork, set: &RetrievalSet) -> Result<Matrix, EvalError> {
    let zi = net.embed_images(&set.images)?;
    let zc = net.embed_texts(&set.captions)?;
    let (ui, _) = crate::numerics::row_l2_normalize(&zi).map_err(LossError::from)?;
    let (uc, _) = crate::numerics::row_l2_normalize(&zc).map_err(LossError::from)?;
    Ok(ui.matmul_nt(&uc).map_err(LossError::from)?)
}

pub fn evaluate_set(net: &EmbeddingNetwork, set: &RetrievalSet) -> Result<RetrievalReport, EvalError> {
    let s = retrieval_similarities(net, set)?;
    RetrievalReport::from_similarities(&s, &set.caption_to_image)
}

/// Embeds every image and caption of `split` and scores full-gallery
/// retrieval.
pub fn evaluate(net: &EmbeddingNetwork, ds: &PairedDataset, split: Split) -> Result<RetrievalReport, EvalError> {
    let images = ds.split_images(split);
    if images.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    evaluate_set(net, &ds.subset(&images)?)
}

/// Image rows of `split` in id order, cut into consecutive folds of
/// `fold_size`. A remainder smaller than a fold is left out.
pub fn fold_image_rows(ds: &PairedDataset, split: Split, fold_size: usize) -> Result<Vec<Vec<usize>>, EvalError> {
    let mut rows = ds.split_images(split);
    if rows.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    if fold_size == 0 || fold_size > rows.len() {
        return Err(EvalError::FoldTooLarge {
            fold: fold_size,
            available: rows.len(),
        });
    }
    let ids = ds.images().ids();
    rows.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    Ok(rows.chunks_exact(fold_size).map(<[usize]>::to_vec).collect())
}

/// One report per fold.
pub fn evaluate_folds(
    net: &EmbeddingNetwork,
    ds: &PairedDataset,
    split: Split,
    fold_size: usize,
) -> Result<Vec<RetrievalReport>, EvalError> {
    fold_image_rows(ds, split, fold_size)?
        .iter()
        .map(|rows| evaluate_set(net, &ds.subset(rows)?))
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Elementwise mean of the six recalls; `rsum` is recomputed from the means.
pub fn fold_average(reports: &[RetrievalReport]) -> Result<RetrievalReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let mut recalls = [0.0; 6];
    for (k, r) in recalls.iter_mut().enumerate() {
        *r = mean(reports.iter().map(|rep| rep.recalls()[k]));
    }
    Ok(RetrievalReport::new(recalls))
}

/// Per-metric mean and population standard deviation over runs, plus the
/// run whose R@sum is the middle order statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct RunAggregate {
    pub runs: Vec<RetrievalReport>,
    pub mean: RetrievalReport,
    pub std: RetrievalReport,
    pub median_run: usize,
}

pub fn aggregate_runs(reports: &[RetrievalReport]) -> Result<RunAggregate, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewRuns(reports.len()));
    }
    let mut mean_m = [0.0; 7];
    let mut std_m = [0.0; 7];
    for k in 0..7 {
        let mu = mean(reports.iter().map(|r| r.metrics()[k]));
        let var = mean(reports.iter().map(|r| (r.metrics()[k] - mu).powi(2)));
        mean_m[k] = mu;
        std_m[k] = var.sqrt();
    }
    let as_report = |m: [f64; 7]| RetrievalReport {
        i2t_r1: m[0],
        i2t_r5: m[1],
        i2t_r10: m[2],
        t2i_r1: m[3],
        t2i_r5: m[4],
        t2i_r10: m[5],
        rsum: m[6],
    };
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| reports[a].rsum.total_cmp(&reports[b].rsum).then(a.cmp(&b)));
    Ok(RunAggregate {
        runs: reports.to_vec(),
        mean: as_report(mean_m),
        std: as_report(std_m),
        median_run: order[(reports.len() - 1) / 2],
    })
}

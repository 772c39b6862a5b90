//! Paired image/caption feature datasets, split handling and mini-batching.
//!
//! A dataset on disk is four files: image and caption feature tables (see
//! [`features`]), a pairing file with one `caption_id<TAB>image_id` line per
//! caption, and a split file with one `image_id<TAB>{train|val|test}` line per
//! image. Captions inherit the split of their image.

pub mod features;
mod synth;

pub use features::{
    decode_feature_table, encode_feature_table, load_feature_file, write_feature_file, FeatureTable, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use synth::{synth_generate, synth_generate_with_maps, SynthConfig};

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::numerics::{Matrix, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a feature file: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("feature file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("feature file truncated while reading {0}")]
    Truncated(String),
    #[error("feature file has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("feature file checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("invalid id: {0}")]
    InvalidId(String),
    #[error("non-finite feature value for id {0:?}")]
    NonFinite(String),
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("caption {caption:?} refers to unknown image {image:?}")]
    UnknownImage { caption: String, image: String },
    #[error("{0} {1:?} is not present in the feature table")]
    UnknownId(&'static str, String),
    #[error("caption {0:?} has no pairing entry")]
    UnpairedCaption(String),
    #[error("image {0:?} has no captions")]
    ImageWithoutCaption(String),
    #[error("image {0:?} has no split assignment")]
    MissingSplit(String),
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("batch size must be >= 2, got {0}")]
    BatchTooSmall(usize),
    #[error("{split} split has {pairs} pairs, fewer than one batch of {batch}")]
    SplitSmallerThanBatch { split: Split, pairs: usize, batch: usize },
    #[error("invalid synthetic config: {0}")]
    InvalidSynth(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Locations of the four dataset files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub images: PathBuf,
    pub captions: PathBuf,
    pub pairs: PathBuf,
    pub splits: PathBuf,
}

impl DatasetPaths {
    /// Standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            images: dir.join("images.fvt"),
            captions: dir.join("captions.fvt"),
            pairs: dir.join("pairs.tsv"),
            splits: dir.join("splits.tsv"),
        }
    }
}

/// Aligned image and caption features with the caption-to-image mapping and
/// per-image split labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    images: FeatureTable,
    captions: FeatureTable,
    caption_image: Vec<usize>,
    image_split: Vec<Split>,
}

impl PairedDataset {
    /// `caption_image[c]` is the image row of caption row `c`.
    pub fn new(
        images: FeatureTable,
        captions: FeatureTable,
        caption_image: Vec<usize>,
        image_split: Vec<Split>,
    ) -> Result<Self, DataError> {
        if caption_image.len() != captions.len() {
            return Err(DataError::DimMismatch {
                what: "caption pairing entries".into(),
                expected: captions.len(),
                found: caption_image.len(),
            });
        }
        if image_split.len() != images.len() {
            return Err(DataError::DimMismatch {
                what: "image split entries".into(),
                expected: images.len(),
                found: image_split.len(),
            });
        }
        let mut counts = vec![0usize; images.len()];
        for (c, &img) in caption_image.iter().enumerate() {
            match counts.get_mut(img) {
                Some(n) => *n += 1,
                None => {
                    return Err(DataError::UnknownImage {
                        caption: captions.ids()[c].clone(),
                        image: format!("#{img}"),
                    })
                }
            }
        }
        if let Some(i) = counts.iter().position(|&n| n == 0) {
            return Err(DataError::ImageWithoutCaption(images.ids()[i].clone()));
        }
        Ok(Self {
            images,
            captions,
            caption_image,
            image_split,
        })
    }

    pub fn images(&self) -> &FeatureTable {
        &self.images
    }

    pub fn captions(&self) -> &FeatureTable {
        &self.captions
    }

    pub fn caption_image(&self) -> &[usize] {
        &self.caption_image
    }

    pub fn image_split(&self) -> &[Split] {
        &self.image_split
    }

    pub fn split_of_caption(&self, caption_row: usize) -> Split {
        self.image_split[self.caption_image[caption_row]]
    }

    /// Image id of a caption id.
    pub fn image_of(&self, caption_id: &str) -> Option<&str> {
        self.captions
            .row_of(caption_id)
            .map(|c| self.images.ids()[self.caption_image[c]].as_str())
    }

    /// Image rows in `split`, in row order.
    pub fn split_images(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.image_split[i] == split)
            .collect()
    }

    /// `(image row, caption row)` for every caption in `split`, in caption
    /// row order.
    pub fn split_pairs(&self, split: Split) -> Vec<(usize, usize)> {
        self.caption_image
            .iter()
            .enumerate()
            .filter(|&(_, &img)| self.image_split[img] == split)
            .map(|(c, &img)| (img, c))
            .collect()
    }

    /// Restricts the dataset to the given image rows (and their captions),
    /// keeping the given order of images.
    pub fn subset(&self, image_rows: &[usize]) -> Result<RetrievalSet, DataError> {
        if image_rows.is_empty() {
            return Err(DataError::InvalidId("empty image subset".into()));
        }
        let mut new_index = HashMap::with_capacity(image_rows.len());
        for (k, &r) in image_rows.iter().enumerate() {
            new_index.insert(r, k);
        }
        let mut caption_rows = Vec::new();
        let mut caption_to_image = Vec::new();
        for (c, img) in self.caption_image.iter().enumerate() {
            if let Some(&k) = new_index.get(img) {
                caption_rows.push(c);
                caption_to_image.push(k);
            }
        }
        Ok(RetrievalSet {
            images: self.images.feats().select_rows(image_rows),
            captions: self.captions.feats().select_rows(&caption_rows),
            caption_to_image,
        })
    }

    pub fn write(&self, paths: &DatasetPaths) -> Result<(), DataError> {
        write_feature_file(&self.images, &paths.images)?;
        write_feature_file(&self.captions, &paths.captions)?;
        let mut pairs = String::new();
        for (c, &img) in self.caption_image.iter().enumerate() {
            pairs.push_str(&format!("{}\t{}\n", self.captions.ids()[c], self.images.ids()[img]));
        }
        fs::write(&paths.pairs, pairs).map_err(|e| DataError::io(&paths.pairs, e))?;
        let mut splits = String::new();
        for (i, s) in self.image_split.iter().enumerate() {
            splits.push_str(&format!("{}\t{}\n", self.images.ids()[i], s));
        }
        fs::write(&paths.splits, splits).map_err(|e| DataError::io(&paths.splits, e))
    }

    pub fn load(paths: &DatasetPaths) -> Result<Self, DataError> {
        let images = load_feature_file(&paths.images)?;
        let captions = load_feature_file(&paths.captions)?;
        let pairs_text = fs::read_to_string(&paths.pairs).map_err(|e| DataError::io(&paths.pairs, e))?;
        let splits_text = fs::read_to_string(&paths.splits).map_err(|e| DataError::io(&paths.splits, e))?;

        let mut caption_image: Vec<Option<usize>> = vec![None; captions.len()];
        for (line_no, caption, image) in tab_lines(&pairs_text, &paths.pairs)? {
            let c = captions
                .row_of(caption)
                .ok_or_else(|| DataError::UnknownId("caption", caption.to_string()))?;
            let i = images.row_of(image).ok_or_else(|| DataError::UnknownImage {
                caption: caption.to_string(),
                image: image.to_string(),
            })?;
            if caption_image[c].replace(i).is_some() {
                return Err(DataError::Parse {
                    file: paths.pairs.display().to_string(),
                    line: line_no,
                    message: format!("caption {caption:?} paired twice"),
                });
            }
        }
        let caption_image = caption_image
            .into_iter()
            .enumerate()
            .map(|(c, i)| i.ok_or_else(|| DataError::UnpairedCaption(captions.ids()[c].clone())))
            .collect::<Result<Vec<_>, _>>()?;

        let mut image_split: Vec<Option<Split>> = vec![None; images.len()];
        for (line_no, image, split) in tab_lines(&splits_text, &paths.splits)? {
            let i = images
                .row_of(image)
                .ok_or_else(|| DataError::UnknownId("image", image.to_string()))?;
            let parse_err = |message: String| DataError::Parse {
                file: paths.splits.display().to_string(),
                line: line_no,
                message,
            };
            let s = split.parse::<Split>().map_err(parse_err)?;
            if image_split[i].replace(s).is_some() {
                return Err(DataError::Parse {
                    file: paths.splits.display().to_string(),
                    line: line_no,
                    message: format!("image {image:?} assigned twice"),
                });
            }
        }
        let image_split = image_split
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| DataError::MissingSplit(images.ids()[i].clone())))
            .collect::<Result<Vec<_>, _>>()?;

        Self::new(images, captions, caption_image, image_split)
    }
}

fn tab_lines<'a>(text: &'a str, path: &Path) -> Result<Vec<(usize, &'a str, &'a str)>, DataError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (a, b) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            file: path.display().to_string(),
            line: n + 1,
            message: "expected two tab-separated fields".into(),
        })?;
        out.push((n + 1, a, b));
    }
    Ok(out)
}

/// Features of one retrieval gallery: images, captions and the caption to
/// image mapping, indexed from zero within the set.
#[derive(Debug, Clone)]
pub struct RetrievalSet {
    pub images: Matrix,
    pub captions: Matrix,
    pub caption_to_image: Vec<usize>,
}

/// `N` aligned pairs: row `i` of `images` and row `i` of `captions` form the
/// positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    /// `(image row, caption row)` in the source dataset.
    pub pairs: Vec<(usize, usize)>,
    pub images: Matrix,
    pub captions: Matrix,
    /// Image row of each pair; pairs sharing an image share a label.
    pub groups: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn from_pairs(ds: &PairedDataset, pairs: Vec<(usize, usize)>) -> Self {
        let image_rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let caption_rows: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        Self {
            images: ds.images.feats().select_rows(&image_rows),
            captions: ds.captions.feats().select_rows(&caption_rows),
            groups: image_rows,
            pairs,
        }
    }
}

/// One shuffled epoch over every `(image, caption)` pair of `split`, cut into
/// batches of exactly `batch_size`. The short remainder is dropped.
pub fn make_batches(
    ds: &PairedDataset,
    split: Split,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<MiniBatch>, DataError> {
    if batch_size < 2 {
        return Err(DataError::BatchTooSmall(batch_size));
    }
    let mut pairs = ds.split_pairs(split);
    if pairs.is_empty() {
        return Err(DataError::EmptySplit(split));
    }
    if pairs.len() < batch_size {
        return Err(DataError::SplitSmallerThanBatch {
            split,
            pairs: pairs.len(),
            batch: batch_size,
        });
    }
    rng.shuffle(&mut pairs);
    Ok(pairs
        .chunks_exact(batch_size)
        .map(|chunk| MiniBatch::from_pairs(ds, chunk.to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    pub(crate) fn toy(images: usize, per_image: usize) -> PairedDataset {
        let img_ids = (0..images).map(|i| format!("i{i}")).collect();
        let img = FeatureTable::new(img_ids, Matrix::from_fn(images, 2, |i, j| (i * 2 + j) as f64)).unwrap();
        let n_cap = images * per_image;
        let cap_ids = (0..n_cap).map(|c| format!("c{c}")).collect();
        let cap = FeatureTable::new(cap_ids, Matrix::from_fn(n_cap, 3, |c, j| (c * 3 + j) as f64)).unwrap();
        let caption_image = (0..n_cap).map(|c| c / per_image).collect();
        PairedDataset::new(img, cap, caption_image, vec![Split::Train; images]).unwrap()
    }

    #[test]
    fn ten_pairs_in_batches_of_four_drop_two() {
        let ds = toy(10, 1);
        let batches = make_batches(&ds, Split::Train, 4, &mut Rng::new(1)).unwrap();
        assert_eq!(batches.iter().map(MiniBatch::len).collect::<Vec<_>>(), vec![4, 4]);
    }

    #[test]
    fn batching_is_deterministic_and_covers_the_epoch() {
        let ds = toy(7, 5);
        let a = make_batches(&ds, Split::Train, 8, &mut Rng::new(3)).unwrap();
        let b = make_batches(&ds, Split::Train, 8, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&ds, Split::Train, 8, &mut Rng::new(4)).unwrap();
        assert_ne!(a, c);

        // brute-force enumeration of all pairs
        let all: BTreeSet<(usize, usize)> = (0..7).flat_map(|i| (0..5).map(move |k| (i, i * 5 + k))).collect();
        let emitted: Vec<(usize, usize)> = a.iter().flat_map(|b| b.pairs.clone()).collect();
        let emitted_set: BTreeSet<_> = emitted.iter().copied().collect();
        assert_eq!(emitted.len(), emitted_set.len());
        assert_eq!(emitted.len(), 32);
        assert!(emitted_set.is_subset(&all));
        assert_eq!(all.difference(&emitted_set).count(), 35 - 32);

        for batch in &a {
            for (k, &(img, cap)) in batch.pairs.iter().enumerate() {
                assert_eq!(ds.caption_image()[cap], img);
                assert_eq!(batch.images.row(k), ds.images().feats().row(img));
                assert_eq!(batch.captions.row(k), ds.captions().feats().row(cap));
                assert_eq!(batch.groups[k], img);
            }
        }
    }

    #[test]
    fn batching_errors() {
        let ds = toy(3, 1);
        assert!(matches!(
            make_batches(&ds, Split::Test, 2, &mut Rng::new(0)),
            Err(DataError::EmptySplit(Split::Test))
        ));
        assert!(matches!(
            make_batches(&ds, Split::Train, 1, &mut Rng::new(0)),
            Err(DataError::BatchTooSmall(1))
        ));
        assert!(matches!(
            make_batches(&ds, Split::Train, 4, &mut Rng::new(0)),
            Err(DataError::SplitSmallerThanBatch { .. })
        ));
    }

    #[test]
    fn dataset_invariants_are_enforced() {
        let ds = toy(2, 2);
        let err = PairedDataset::new(
            ds.images().clone(),
            ds.captions().clone(),
            vec![0, 0, 0, 0],
            vec![Split::Train; 2],
        )
        .unwrap_err();
        assert!(matches!(err, DataError::ImageWithoutCaption(id) if id == "i1"));
        assert!(PairedDataset::new(
            ds.images().clone(),
            ds.captions().clone(),
            vec![0, 0, 1, 5],
            vec![Split::Train; 2],
        )
        .is_err());
    }

    #[test]
    fn files_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        let ds = toy(3, 2);
        ds.write(&paths).unwrap();
        let back = PairedDataset::load(&paths).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.image_of("c3"), Some("i1"));
        assert_eq!(back.split_of_caption(5), Split::Train);

        fs::write(&paths.splits, "i0\ttrain\ni1\ttest\n").unwrap();
        assert!(matches!(
            PairedDataset::load(&paths),
            Err(DataError::MissingSplit(id)) if id == "i2"
        ));
        fs::write(&paths.splits, "i0\ttrain\ni1\ttest\ni2\tholdout\n").unwrap();
        assert!(matches!(
            PairedDataset::load(&paths),
            Err(DataError::Parse { line: 3, .. })
        ));
        ds.write(&paths).unwrap();
        fs::write(&paths.pairs, "c0\ti0\nc1\ti9\n").unwrap();
        assert!(matches!(
            PairedDataset::load(&paths),
            Err(DataError::UnknownImage { .. })
        ));
    }

    #[test]
    fn subset_reindexes_captions() {
        let ds = toy(4, 2);
        let set = ds.subset(&[2, 0]).unwrap();
        assert_eq!(set.images.rows(), 2);
        assert_eq!(set.caption_to_image, vec![1, 1, 0, 0]);
        assert_eq!(set.captions.row(0), ds.captions().feats().row(0));
    }
}

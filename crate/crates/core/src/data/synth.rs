//! Synthetic paired-modality data from a shared linear latent model.
//!
//! Each image `m` gets a latent `u_m ~ N(0, I)`. Its feature is `A u_m + σ ε`
//! and each of its captions is `B u_m + σ ε'` with fresh noise per caption.
//! `A` and `B` are fixed random maps with `N(0, 1/latent_dim)` entries, so
//! feature coordinates have unit variance before noise.

use super::{DataError, FeatureTable, PairedDataset, Split};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub images: usize,
    pub captions_per_image: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            image_dim: 64,
            text_dim: 48,
            images: 1000,
            captions_per_image: 5,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
            ("captions_per_image", self.captions_per_image),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(DataError::InvalidSynth(format!("{name} must be >= 1")));
        }
        if self.images < 2 {
            return Err(DataError::InvalidSynth(format!(
                "need at least 2 images, got {}",
                self.images
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::InvalidSynth(format!(
                "noise must be >= 0, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    /// Image counts of the train/val/test blocks (80/10/10, remainder to test).
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let train = self.images * 8 / 10;
        let val = self.images / 10;
        (train, val, self.images - train - val)
    }
}

/// Generates a dataset, drawing the maps `A` and `B` from the seed.
pub fn synth_generate(cfg: &SynthConfig) -> Result<PairedDataset, DataError> {
    cfg.validate()?;
    let mut rng = Rng::stream(cfg.seed, 1);
    let std = 1.0 / (cfg.latent_dim as f64).sqrt();
    let a = rng.normal_matrix(cfg.image_dim, cfg.latent_dim, std);
    let b = rng.normal_matrix(cfg.text_dim, cfg.latent_dim, std);
    synth_generate_with_maps(cfg, &a, &b)
}

/// Generates a dataset with caller-supplied maps `a` (`image_dim x latent`)
/// and `b` (`text_dim x latent`).
pub fn synth_generate_with_maps(cfg: &SynthConfig, a: &Matrix, b: &Matrix) -> Result<PairedDataset, DataError> {
    cfg.validate()?;
    if a.shape() != (cfg.image_dim, cfg.latent_dim) || b.shape() != (cfg.text_dim, cfg.latent_dim) {
        return Err(DataError::InvalidSynth(format!(
            "maps are {:?} and {:?}, expected ({}, {}) and ({}, {})",
            a.shape(),
            b.shape(),
            cfg.image_dim,
            cfg.latent_dim,
            cfg.text_dim,
            cfg.latent_dim
        )));
    }
    let mut rng = Rng::stream(cfg.seed, 2);
    let m = cfg.images;
    let k = cfg.captions_per_image;
    let latents = rng.normal_matrix(m, cfg.latent_dim, 1.0);
    let mut image_feats = latents.matmul_nt(a).expect("shapes checked");
    let clean_captions = latents.matmul_nt(b).expect("shapes checked");
    let mut caption_feats = Matrix::zeros(m * k, cfg.text_dim);
    for i in 0..m {
        for v in image_feats.row_mut(i) {
            *v += cfg.noise * rng.normal();
        }
        for c in 0..k {
            let row = caption_feats.row_mut(i * k + c);
            for (dst, &clean) in row.iter_mut().zip(clean_captions.row(i)) {
                *dst = clean + cfg.noise * rng.normal();
            }
        }
    }

    let image_ids = (0..m).map(|i| format!("img{i:06}")).collect();
    let caption_ids = (0..m * k).map(|c| format!("img{:06}_cap{}", c / k, c % k)).collect();
    let (train, val, _) = cfg.split_sizes();
    let split = (0..m)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    PairedDataset::new(
        FeatureTable::new(image_ids, image_feats)?,
        FeatureTable::new(caption_ids, caption_feats)?,
        (0..m * k).map(|c| c / k).collect(),
        split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_identity_maps_copy_image_features_to_captions() {
        let cfg = SynthConfig {
            latent_dim: 4,
            image_dim: 4,
            text_dim: 4,
            images: 10,
            captions_per_image: 5,
            noise: 0.0,
            seed: 3,
        };
        let id = Matrix::identity(4);
        let ds = synth_generate_with_maps(&cfg, &id, &id).unwrap();
        for c in 0..50 {
            let img = ds.caption_image()[c];
            assert_eq!(img, c / 5);
            assert_eq!(ds.captions().feats().row(c), ds.images().feats().row(img));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SynthConfig {
            images: 20,
            seed: 9,
            ..SynthConfig::default()
        };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = SynthConfig { seed: 10, ..cfg };
        assert_ne!(synth_generate(&cfg).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn splits_are_eighty_ten_ten_by_image() {
        let cfg = SynthConfig {
            images: 1000,
            latent_dim: 2,
            image_dim: 3,
            text_dim: 2,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        assert_eq!(ds.split_images(Split::Train).len(), 800);
        assert_eq!(ds.split_images(Split::Val).len(), 100);
        assert_eq!(ds.split_images(Split::Test).len(), 100);
        for c in 0..ds.captions().len() {
            assert_eq!(ds.split_of_caption(c), ds.image_split()[ds.caption_image()[c]]);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            SynthConfig {
                images: 1,
                ..SynthConfig::default()
            },
            SynthConfig {
                latent_dim: 0,
                ..SynthConfig::default()
            },
            SynthConfig {
                noise: -0.1,
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(synth_generate(&bad), Err(DataError::InvalidSynth(_))));
        }
    }
}

//! Cross-modal similarity, hardest-negative mining and the six batch losses.
//!
//! Every loss is computed on the cosine similarity matrix `S` of a batch of
//! `N` aligned pairs, `S[i][j] = cos(z_I[i], z_C[j])`, with negatives drawn
//! from the same batch. Values are the mean over the `N` pairs of the
//! per-pair loss, which sums an image-anchored and a caption-anchored term:
//!
//! | kind        | per-pair loss (image-anchored term; caption term is symmetric) |
//! |-------------|------------------------------------------------------------------|
//! | `SH`        | `Σ_{k≠i} [α + S[i][k] − S[i][i]]₊`                               |
//! | `MH`        | `[α + S[i][c*] − S[i][i]]₊`                                      |
//! | `CSN`       | `−log softmax_k(S[i][k]/τ)[i]`, `k` over the whole batch         |
//! | `CMN_TILDE` | `(S[i][c*] − S[i][i]) / τ` (unclamped, may be negative)          |
//! | `CMN`       | `[(S[i][c*] + α − S[i][i]) / τ]₊`                                |
//! | `MVN`       | softmax over the positive plus `2(N−1)` negatives from both modalities |
//!
//! Gradients are analytic: each loss produces `∂L/∂S` (and, for `MVN`, the
//! within-modality similarity gradients), which is then pushed back through
//! the row normalization to `∂L/∂Z_I` and `∂L/∂Z_C`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::MiniBatch;
use crate::model::{EmbeddingNetwork, ModelError, ParameterGradients};
use crate::numerics::{argmax_where, row_l2_normalize, Matrix, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{kind} needs at least two pairs in the batch, got {n}")]
    TooFewPairs { kind: LossKind, n: usize },
    #[error("{modality} embedding row {row} has zero norm")]
    ZeroRow { modality: Modality, row: usize },
    #[error("embedding shapes differ: images {images:?}, captions {captions:?}")]
    ShapeMismatch {
        images: (usize, usize),
        captions: (usize, usize),
    },
    #[error("group labels cover {labels} pairs, batch has {n}")]
    GroupMismatch { labels: usize, n: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("{called} called with a {configured} config")]
    WrongKind { called: LossKind, configured: LossKind },
    #[error("loss evaluated to non-finite value {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Caption,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Caption => "caption",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Sum of hinges (VSE).
    Sh,
    /// Max of hinges over the hardest negatives (VSE++).
    Mh,
    /// Contrastive sum of negatives (ConVSE).
    Csn,
    /// Contrastive hardest negative without margin or clamp.
    CmnTilde,
    /// Contrastive hardest negative with margin, clamped (ConVSE++).
    Cmn,
    /// Multi-modal NCE with negatives from both modalities.
    Mvn,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Sh,
        LossKind::Mh,
        LossKind::Csn,
        LossKind::CmnTilde,
        LossKind::Cmn,
        LossKind::Mvn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Sh => "SH",
            LossKind::Mh => "MH",
            LossKind::Csn => "CSN",
            LossKind::CmnTilde => "CMN_TILDE",
            LossKind::Cmn => "CMN",
            LossKind::Mvn => "MVN",
        }
    }

    pub fn uses_margin(self) -> bool {
        matches!(self, LossKind::Sh | LossKind::Mh | LossKind::Cmn)
    }

    pub fn uses_temperature(self) -> bool {
        !matches!(self, LossKind::Sh | LossKind::Mh)
    }

    /// Smallest batch on which the loss is defined.
    pub fn min_batch(self) -> usize {
        match self {
            LossKind::Csn | LossKind::Mvn => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "SH" | "VSE" => Ok(LossKind::Sh),
            "MH" | "VSE++" => Ok(LossKind::Mh),
            "CSN" | "CONVSE" => Ok(LossKind::Csn),
            "CMN_TILDE" | "CMNTILDE" => Ok(LossKind::CmnTilde),
            "CMN" | "CONVSE++" => Ok(LossKind::Cmn),
            "MVN" => Ok(LossKind::Mvn),
            _ => Err(format!(
                "unknown loss {s:?} (expected SH, MH, CSN, CMN_TILDE, CMN or MVN)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub temperature: f64,
    /// Exclude pairs that share an underlying image from each other's
    /// negative sets. Requires group labels on the batch.
    pub mask_same_image: bool,
}

impl LossConfig {
    pub fn new(kind: LossKind, margin: f64, temperature: f64) -> Result<Self, LossError> {
        let cfg = Self {
            kind,
            margin,
            temperature,
            mask_same_image: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Which in-batch items count as negatives for an anchor.
#[derive(Debug, Clone, Copy)]
pub struct Negatives<'a> {
    groups: Option<&'a [usize]>,
}

impl<'a> Negatives<'a> {
    /// Every other pair in the batch is a negative.
    pub fn all() -> Self {
        Self { groups: None }
    }

    /// Pairs with equal group labels are not negatives for each other.
    pub fn masked(groups: &'a [usize]) -> Self {
        Self { groups: Some(groups) }
    }

    #[inline]
    pub fn allows(&self, anchor: usize, k: usize) -> bool {
        anchor != k && self.groups.is_none_or(|g| g[anchor] != g[k])
    }

    fn check(&self, n: usize) -> Result<(), LossError> {
        match self.groups {
            Some(g) if g.len() != n => Err(LossError::GroupMismatch { labels: g.len(), n }),
            _ => Ok(()),
        }
    }
}

/// Cosine similarities between a batch of image and caption embeddings,
/// with what is needed to differentiate through the normalization.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    s: Matrix,
    image_unit: Matrix,
    caption_unit: Matrix,
    image_norms: Vec<f64>,
    caption_norms: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(z_images: &Matrix, z_captions: &Matrix) -> Result<Self, LossError> {
        if z_images.shape() != z_captions.shape() {
            return Err(LossError::ShapeMismatch {
                images: z_images.shape(),
                captions: z_captions.shape(),
            });
        }
        let normalize = |z: &Matrix, modality| {
            row_l2_normalize(z).map_err(|e| match e {
                NumericsError::ZeroRow { row, .. } => LossError::ZeroRow { modality, row },
                other => other.into(),
            })
        };
        let (image_unit, image_norms) = normalize(z_images, Modality::Image)?;
        let (caption_unit, caption_norms) = normalize(z_captions, Modality::Caption)?;
        let s = image_unit.matmul_nt(&caption_unit)?;
        Ok(Self {
            s,
            image_unit,
            caption_unit,
            image_norms,
            caption_norms,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.s
    }

    pub fn n(&self) -> usize {
        self.s.rows()
    }

    #[inline]
    pub fn get(&self, image: usize, caption: usize) -> f64 {
        self.s.get(image, caption)
    }

    /// Within-modality cosine similarities `(S_II, S_CC)`.
    pub fn within_modality(&self) -> (Matrix, Matrix) {
        (
            self.image_unit.matmul_nt(&self.image_unit).expect("square"),
            self.caption_unit.matmul_nt(&self.caption_unit).expect("square"),
        )
    }

    /// Maps similarity-level gradients to embedding gradients. `within` holds
    /// optional gradients w.r.t. `S_II` and `S_CC`.
    pub fn backward(&self, grad_s: &Matrix, within: Option<(&Matrix, &Matrix)>) -> (Matrix, Matrix) {
        let mut g_img_unit = grad_s.matmul(&self.caption_unit).expect("shapes checked");
        let mut g_cap_unit = grad_s.matmul_tn(&self.image_unit).expect("shapes checked");
        if let Some((g_ii, g_cc)) = within {
            for (g_unit, g_within, unit) in [
                (&mut g_img_unit, g_ii, &self.image_unit),
                (&mut g_cap_unit, g_cc, &self.caption_unit),
            ] {
                let mut sym = g_within.clone();
                sym.add_scaled(&g_within.transpose(), 1.0);
                g_unit.add_scaled(&sym.matmul(unit).expect("square"), 1.0);
            }
        }
        (
            normalize_backward(&self.image_unit, &self.image_norms, &g_img_unit),
            normalize_backward(&self.caption_unit, &self.caption_norms, &g_cap_unit),
        )
    }
}

/// Given `u = z / ‖z‖` and `g = ∂L/∂u`, returns `∂L/∂z = (g − u(u·g)) / ‖z‖`.
fn normalize_backward(unit: &Matrix, norms: &[f64], grad_unit: &Matrix) -> Matrix {
    let mut out = grad_unit.clone();
    for (i, &norm) in norms.iter().enumerate() {
        let u = unit.row(i);
        let dot: f64 = u.iter().zip(grad_unit.row(i)).map(|(a, b)| a * b).sum();
        out.row_mut(i)
            .iter_mut()
            .zip(u)
            .for_each(|(g, &ui)| *g = (*g - ui * dot) / norm);
    }
    out
}

/// Free-function form of [`SimilarityMatrix::new`].
pub fn similarity_matrix(z_images: &Matrix, z_captions: &Matrix) -> Result<SimilarityMatrix, LossError> {
    SimilarityMatrix::new(z_images, z_captions)
}

/// Hardest in-batch negatives: `c_star[i]` is the most similar non-matching
/// caption for image `i`, `i_star[j]` the most similar non-matching image for
/// caption `j`. Ties go to the lowest index. `None` only arises under masking
/// when an anchor has no admissible negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegatives {
    pub c_star: Vec<Option<usize>>,
    pub i_star: Vec<Option<usize>>,
}

pub fn hardest_negatives(s: &Matrix) -> Result<HardNegatives, LossError> {
    hardest_negatives_with(s, Negatives::all())
}

pub fn hardest_negatives_with(s: &Matrix, neg: Negatives<'_>) -> Result<HardNegatives, LossError> {
    let n = s.rows();
    if n < 2 {
        return Err(LossError::TooFewPairs { kind: LossKind::Mh, n });
    }
    neg.check(n)?;
    let mut column = vec![0.0; n];
    let mut c_star = Vec::with_capacity(n);
    let mut i_star = Vec::with_capacity(n);
    for i in 0..n {
        c_star.push(argmax_where(s.row(i), |k| neg.allows(i, k)));
        column.iter_mut().enumerate().for_each(|(k, c)| *c = s.get(k, i));
        i_star.push(argmax_where(&column, |k| neg.allows(i, k)));
    }
    Ok(HardNegatives { c_star, i_star })
}

/// Scalar loss and its gradients w.r.t. both embedding batches.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_images: Matrix,
    pub grad_captions: Matrix,
}

/// Loss value and `∂L/∂S` for every kind that depends on `S` alone.
///
/// Panics if called with `MVN`, which also needs within-modality terms.
pub fn loss_on_similarities(s: &Matrix, cfg: &LossConfig, neg: Negatives<'_>) -> Result<(f64, Matrix), LossError> {
    cfg.validate()?;
    let n = s.rows();
    if n < cfg.kind.min_batch() {
        return Err(LossError::TooFewPairs { kind: cfg.kind, n });
    }
    neg.check(n)?;
    let mut grad = Matrix::zeros(n, n);
    let (alpha, tau) = (cfg.margin, cfg.temperature);
    let mut total = 0.0;
    match cfg.kind {
        LossKind::Sh => {
            for i in 0..n {
                let pos = s.get(i, i);
                for k in (0..n).filter(|&k| neg.allows(i, k)) {
                    let h = alpha + s.get(i, k) - pos;
                    if h > 0.0 {
                        total += h;
                        bump(&mut grad, i, k, 1.0);
                        bump(&mut grad, i, i, -1.0);
                    }
                    let h = alpha + s.get(k, i) - pos;
                    if h > 0.0 {
                        total += h;
                        bump(&mut grad, k, i, 1.0);
                        bump(&mut grad, i, i, -1.0);
                    }
                }
            }
        }
        LossKind::Mh | LossKind::Cmn | LossKind::CmnTilde => {
            let hard = hardest_negatives_with(s, neg)?;
            for i in 0..n {
                let pos = s.get(i, i);
                let terms = [hard.c_star[i].map(|c| (i, c)), hard.i_star[i].map(|j| (j, i))];
                for (r, c) in terms.into_iter().flatten() {
                    let (value, slope) = match cfg.kind {
                        LossKind::Mh => hinge(alpha + s.get(r, c) - pos, 1.0),
                        LossKind::Cmn => hinge((s.get(r, c) + alpha - pos) / tau, 1.0 / tau),
                        _ => ((s.get(r, c) - pos) / tau, 1.0 / tau),
                    };
                    total += value;
                    if slope != 0.0 {
                        bump(&mut grad, r, c, slope);
                        bump(&mut grad, i, i, -slope);
                    }
                }
            }
        }
        LossKind::Csn => {
            let mut logits = Vec::with_capacity(n);
            let mut idx = Vec::with_capacity(n);
            for i in 0..n {
                for image_anchor in [true, false] {
                    logits.clear();
                    idx.clear();
                    for k in (0..n).filter(|&k| k == i || neg.allows(i, k)) {
                        let (r, c) = if image_anchor { (i, k) } else { (k, i) };
                        logits.push(s.get(r, c) / tau);
                        idx.push((r, c));
                    }
                    let pos = idx.iter().position(|&(r, c)| r == i && c == i).unwrap();
                    let (value, probs) = softmax_nll(&logits, pos);
                    total += value;
                    for (&(r, c), p) in idx.iter().zip(&probs) {
                        bump(&mut grad, r, c, p / tau);
                    }
                    bump(&mut grad, i, i, -1.0 / tau);
                }
            }
        }
        LossKind::Mvn => panic!("MVN needs within-modality similarities; use loss_mvn"),
    }
    let inv_n = 1.0 / n as f64;
    grad.scale(inv_n);
    let value = total * inv_n;
    if !value.is_finite() {
        return Err(LossError::NonFinite(value));
    }
    Ok((value, grad))
}

#[inline]
fn bump(m: &mut Matrix, r: usize, c: usize, delta: f64) {
    m.set(r, c, m.get(r, c) + delta);
}

/// `[x]₊` with its slope; the kink at zero takes the inactive branch.
#[inline]
fn hinge(x: f64, slope: f64) -> (f64, f64) {
    if x > 0.0 {
        (x, slope)
    } else {
        (0.0, 0.0)
    }
}

/// `−log softmax(logits)[pos]` and the softmax probabilities, stabilized by
/// the running maximum. The result is never negative.
fn softmax_nll(logits: &[f64], pos: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let value = (max - logits[pos]) + sum.ln();
    (value, exps.into_iter().map(|e| e / sum).collect())
}

fn check_kind(called: LossKind, cfg: &LossConfig) -> Result<(), LossError> {
    if cfg.kind != called {
        return Err(LossError::WrongKind {
            called,
            configured: cfg.kind,
        });
    }
    Ok(())
}

fn through_similarity(sim: &SimilarityMatrix, cfg: &LossConfig, neg: Negatives<'_>) -> Result<LossOutput, LossError> {
    let (value, grad_s) = loss_on_similarities(sim.matrix(), cfg, neg)?;
    let (grad_images, grad_captions) = sim.backward(&grad_s, None);
    Ok(LossOutput {
        value,
        grad_images,
        grad_captions,
    })
}

/// Sum of hinges over every in-batch negative.
pub fn loss_sh(sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    check_kind(LossKind::Sh, cfg)?;
    through_similarity(sim, cfg, Negatives::all())
}

/// Hinge on the hardest negative only.
pub fn loss_mh(sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    check_kind(LossKind::Mh, cfg)?;
    through_similarity(sim, cfg, Negatives::all())
}

/// Temperature-scaled softmax over the positive and all cross-modal negatives.
pub fn loss_csn(sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    check_kind(LossKind::Csn, cfg)?;
    through_similarity(sim, cfg, Negatives::all())
}

/// Hardest-negative contrastive term without margin or clamp. Can be
/// negative whenever the positive beats the hardest negative.
pub fn loss_cmn_tilde(sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    check_kind(LossKind::CmnTilde, cfg)?;
    through_similarity(sim, cfg, Negatives::all())
}

/// Hardest-negative contrastive loss with margin, clamped at zero.
pub fn loss_cmn(sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    check_kind(LossKind::Cmn, cfg)?;
    through_similarity(sim, cfg, Negatives::all())
}

/// Multi-modal NCE: each anchor's softmax runs over its positive, the `N−1`
/// cross-modal negatives and the `N−1` same-modality negatives.
pub fn loss_mvn(z_images: &Matrix, z_captions: &Matrix, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    check_kind(LossKind::Mvn, cfg)?;
    let sim = SimilarityMatrix::new(z_images, z_captions)?;
    mvn_with(&sim, cfg, Negatives::all())
}

fn mvn_with(sim: &SimilarityMatrix, cfg: &LossConfig, neg: Negatives<'_>) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    let n = sim.n();
    neg.check(n)?;
    let tau = cfg.temperature;
    let s = sim.matrix();
    let (s_ii, s_cc) = sim.within_modality();
    let mut g_s = Matrix::zeros(n, n);
    let mut g_ii = Matrix::zeros(n, n);
    let mut g_cc = Matrix::zeros(n, n);
    let mut total = 0.0;

    // (which matrix, row, col): 0 = S, 1 = S_II, 2 = S_CC
    let mut logits = Vec::with_capacity(2 * n);
    let mut idx: Vec<(u8, usize, usize)> = Vec::with_capacity(2 * n);
    for i in 0..n {
        for image_anchor in [true, false] {
            logits.clear();
            idx.clear();
            logits.push(s.get(i, i) / tau);
            idx.push((0, i, i));
            for k in (0..n).filter(|&k| neg.allows(i, k)) {
                let (r, c) = if image_anchor { (i, k) } else { (k, i) };
                logits.push(s.get(r, c) / tau);
                idx.push((0, r, c));
                if image_anchor {
                    logits.push(s_ii.get(i, k) / tau);
                    idx.push((1, i, k));
                } else {
                    logits.push(s_cc.get(i, k) / tau);
                    idx.push((2, i, k));
                }
            }
            let (value, probs) = softmax_nll(&logits, 0);
            total += value;
            for (&(which, r, c), p) in idx.iter().zip(&probs) {
                let target = match which {
                    0 => &mut g_s,
                    1 => &mut g_ii,
                    _ => &mut g_cc,
                };
                bump(target, r, c, p / tau);
            }
            bump(&mut g_s, i, i, -1.0 / tau);
        }
    }
    let inv_n = 1.0 / n as f64;
    for g in [&mut g_s, &mut g_ii, &mut g_cc] {
        g.scale(inv_n);
    }
    let value = total * inv_n;
    if !value.is_finite() {
        return Err(LossError::NonFinite(value));
    }
    let (grad_images, grad_captions) = sim.backward(&g_s, Some((&g_ii, &g_cc)));
    Ok(LossOutput {
        value,
        grad_images,
        grad_captions,
    })
}

/// Dispatches on `cfg.kind`. `groups`, when given and masking is enabled,
/// labels each pair with its underlying image.
pub fn compute_loss(
    z_images: &Matrix,
    z_captions: &Matrix,
    cfg: &LossConfig,
    groups: Option<&[usize]>,
) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    let sim = SimilarityMatrix::new(z_images, z_captions)?;
    let neg = match (cfg.mask_same_image, groups) {
        (true, Some(g)) => Negatives::masked(g),
        _ => Negatives::all(),
    };
    match cfg.kind {
        LossKind::Mvn => mvn_with(&sim, cfg, neg),
        _ => through_similarity(&sim, cfg, neg),
    }
}

/// Forward, loss and backward for one mini-batch: returns the mean per-pair
/// loss and the gradient of every network parameter.
pub fn batch_loss(
    net: &EmbeddingNetwork,
    batch: &MiniBatch,
    cfg: &LossConfig,
) -> Result<(f64, ParameterGradients), LossError> {
    let (z_images, z_captions, cache) = net.forward(&batch.images, &batch.captions)?;
    let out = compute_loss(&z_images, &z_captions, cfg, Some(&batch.groups))?;
    let grads = net.backward(&cache, &out.grad_images, &out.grad_captions)?;
    Ok((out.value, grads))
}

//! Embedding networks mapping precomputed image and caption features into a
//! shared joint space.
//!
//! Each modality has a linear base layer (`D -> base_dim`). Contrastive
//! configurations add a two-layer projection head per modality
//! (`base_dim -> hidden_dim -> joint_dim`, rectifier in between). Heads are
//! either present on both branches or absent on both.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, TrainingMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::numerics::{Matrix, NumericsError, Rng};

pub const DEFAULT_BASE_DIM: usize = 1024;
pub const DEFAULT_HIDDEN_DIM: usize = 2048;
pub const DEFAULT_JOINT_DIM: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected {expected} columns, got {actual}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("batch size mismatch: {images} image rows vs {captions} caption rows")]
    BatchMismatch { images: usize, captions: usize },
    #[error("forward cache does not belong to the current network parameters")]
    StaleCache,
    #[error("network already has projection heads")]
    HeadsPresent,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_dim: DEFAULT_HIDDEN_DIM,
            out_dim: DEFAULT_JOINT_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub image_dim: usize,
    pub text_dim: usize,
    pub base_dim: usize,
    pub head: Option<HeadConfig>,
}

impl NetworkConfig {
    /// Headless configuration with the default 1024-d base layers.
    pub fn base(image_dim: usize, text_dim: usize) -> Self {
        Self {
            image_dim,
            text_dim,
            base_dim: DEFAULT_BASE_DIM,
            head: None,
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.head.map_or(self.base_dim, |h| h.out_dim)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut dims = vec![
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
            ("base_dim", self.base_dim),
        ];
        if let Some(h) = self.head {
            dims.push(("hidden_dim", h.hidden_dim));
            dims.push(("joint_dim", h.out_dim));
        }
        match dims.iter().find(|(_, d)| *d == 0) {
            Some((name, _)) => Err(ModelError::InvalidConfig(format!("{name} must be >= 1"))),
            None => Ok(()),
        }
    }
}

/// `y = x Wᵀ + b`, with `W` stored `out x in` and `b` as `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = glorot_bound(in_dim, out_dim);
        Self {
            weight: rng.uniform_matrix(out_dim, in_dim, -bound, bound),
            bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        let mut y = x.matmul_nt(&self.weight)?;
        let b = self.bias.row(0);
        for i in 0..y.rows() {
            y.row_mut(i).iter_mut().zip(b).for_each(|(v, bj)| *v += bj);
        }
        Ok(y)
    }

    /// Returns `(dW, db, dx)` for upstream gradient `dy`.
    fn backward(&self, x: &Matrix, dy: &Matrix, need_dx: bool) -> (Matrix, Matrix, Option<Matrix>) {
        let dw = dy.matmul_tn(x).expect("cached shapes are consistent");
        let db = dy.column_sums();
        let dx = need_dx.then(|| dy.matmul(&self.weight).expect("cached shapes are consistent"));
        (dw, db, dx)
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub hidden: LinearLayer,
    pub out: LinearLayer,
}

impl ProjectionHead {
    pub fn glorot(in_dim: usize, cfg: HeadConfig, rng: &mut Rng) -> Self {
        Self {
            hidden: LinearLayer::glorot(in_dim, cfg.hidden_dim, rng),
            out: LinearLayer::glorot(cfg.hidden_dim, cfg.out_dim, rng),
        }
    }

    /// Exact identity map through the rectifier: `relu(x) - relu(-x) = x`,
    /// using a hidden layer of width `2 * dim`.
    pub fn identity(dim: usize) -> Self {
        let hidden_w = Matrix::from_fn(2 * dim, dim, |i, j| {
            if i == j {
                1.0
            } else if i == j + dim {
                -1.0
            } else {
                0.0
            }
        });
        let out_w = Matrix::from_fn(dim, 2 * dim, |i, j| {
            if j == i {
                1.0
            } else if j == i + dim {
                -1.0
            } else {
                0.0
            }
        });
        Self {
            hidden: LinearLayer {
                weight: hidden_w,
                bias: Matrix::zeros(1, 2 * dim),
            },
            out: LinearLayer {
                weight: out_w,
                bias: Matrix::zeros(1, dim),
            },
        }
    }

    pub fn config(&self) -> HeadConfig {
        HeadConfig {
            hidden_dim: self.hidden.out_dim(),
            out_dim: self.out.out_dim(),
        }
    }

    fn forward(&self, h: &Matrix) -> Result<(Matrix, HeadCache), ModelError> {
        let pre = self.hidden.forward(h)?;
        let mut act = pre.clone();
        act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let z = self.out.forward(&act)?;
        Ok((z, HeadCache { pre, act }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub image: ProjectionHead,
    pub text: ProjectionHead,
}

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

/// Image and text branches of the joint embedding.
#[derive(Debug)]
pub struct EmbeddingNetwork {
    image_base: LinearLayer,
    text_base: LinearLayer,
    heads: Option<Heads>,
    // identity of this parameter set, used to reject stale forward caches
    id: u64,
    version: u64,
}

impl Clone for EmbeddingNetwork {
    fn clone(&self) -> Self {
        Self {
            image_base: self.image_base.clone(),
            text_base: self.text_base.clone(),
            heads: self.heads.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for EmbeddingNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.image_base == other.image_base && self.text_base == other.text_base && self.heads == other.heads
    }
}

/// Intermediates kept by [`EmbeddingNetwork::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    id: u64,
    version: u64,
    images: Matrix,
    texts: Matrix,
    image_base_out: Matrix,
    text_base_out: Matrix,
    heads: Option<(HeadCache, HeadCache)>,
}

impl ForwardCache {
    /// Output of the image base layer (the 1024-d intermediate).
    pub fn image_base_out(&self) -> &Matrix {
        &self.image_base_out
    }

    pub fn text_base_out(&self) -> &Matrix {
        &self.text_base_out
    }

    pub fn image_hidden_pre(&self) -> Option<&Matrix> {
        self.heads.as_ref().map(|(i, _)| &i.pre)
    }

    pub fn image_hidden_act(&self) -> Option<&Matrix> {
        self.heads.as_ref().map(|(i, _)| &i.act)
    }

    pub fn text_hidden_pre(&self) -> Option<&Matrix> {
        self.heads.as_ref().map(|(_, t)| &t.pre)
    }

    pub fn text_hidden_act(&self) -> Option<&Matrix> {
        self.heads.as_ref().map(|(_, t)| &t.act)
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    pre: Matrix,
    act: Matrix,
}

/// Gradients aligned with [`EmbeddingNetwork::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub tensors: Vec<Matrix>,
}

impl ParameterGradients {
    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.as_slice().iter().all(|&v| v == 0.0))
    }

    pub fn zeros_like(net: &EmbeddingNetwork) -> Self {
        Self {
            tensors: net
                .tensors()
                .iter()
                .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }
}

impl EmbeddingNetwork {
    pub fn from_parts(
        image_base: LinearLayer,
        text_base: LinearLayer,
        heads: Option<Heads>,
    ) -> Result<Self, ModelError> {
        if image_base.out_dim() != text_base.out_dim() {
            return Err(ModelError::InvalidConfig(format!(
                "base layers disagree on output width: {} vs {}",
                image_base.out_dim(),
                text_base.out_dim()
            )));
        }
        if let Some(h) = &heads {
            let base = image_base.out_dim();
            for (name, head) in [("image", &h.image), ("text", &h.text)] {
                if head.hidden.in_dim() != base || head.out.in_dim() != head.hidden.out_dim() {
                    return Err(ModelError::InvalidConfig(format!(
                        "{name} head does not chain onto the {base}-d base layer"
                    )));
                }
            }
            if h.image.out.out_dim() != h.text.out.out_dim() {
                return Err(ModelError::InvalidConfig(format!(
                    "heads disagree on joint dimension: {} vs {}",
                    h.image.out.out_dim(),
                    h.text.out.out_dim()
                )));
            }
        }
        Ok(Self {
            image_base,
            text_base,
            heads,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn config(&self) -> NetworkConfig {
        NetworkConfig {
            image_dim: self.image_base.in_dim(),
            text_dim: self.text_base.in_dim(),
            base_dim: self.image_base.out_dim(),
            head: self.heads.as_ref().map(|h| h.image.config()),
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.config().joint_dim()
    }

    pub fn has_heads(&self) -> bool {
        self.heads.is_some()
    }

    pub fn image_base(&self) -> &LinearLayer {
        &self.image_base
    }

    pub fn text_base(&self) -> &LinearLayer {
        &self.text_base
    }

    pub fn heads(&self) -> Option<&Heads> {
        self.heads.as_ref()
    }

    /// Replaces the projection heads (or removes them with `None`).
    pub fn set_heads(&mut self, heads: Option<Heads>) -> Result<(), ModelError> {
        let rebuilt = Self::from_parts(self.image_base.clone(), self.text_base.clone(), heads)?;
        self.heads = rebuilt.heads;
        self.version += 1;
        Ok(())
    }

    /// Named parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![
            ("image_base.weight", &self.image_base.weight),
            ("image_base.bias", &self.image_base.bias),
            ("text_base.weight", &self.text_base.weight),
            ("text_base.bias", &self.text_base.bias),
        ];
        if let Some(h) = &self.heads {
            out.extend([
                ("image_head.hidden.weight", &h.image.hidden.weight),
                ("image_head.hidden.bias", &h.image.hidden.bias),
                ("image_head.out.weight", &h.image.out.weight),
                ("image_head.out.bias", &h.image.out.bias),
                ("text_head.hidden.weight", &h.text.hidden.weight),
                ("text_head.hidden.bias", &h.text.hidden.bias),
                ("text_head.out.weight", &h.text.out.weight),
                ("text_head.out.bias", &h.text.out.bias),
            ]);
        }
        out
    }

    /// Mutable parameter tensors in canonical order. Invalidates outstanding
    /// forward caches.
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.version += 1;
        let mut out = vec![
            &mut self.image_base.weight,
            &mut self.image_base.bias,
            &mut self.text_base.weight,
            &mut self.text_base.bias,
        ];
        if let Some(h) = &mut self.heads {
            out.extend([
                &mut h.image.hidden.weight,
                &mut h.image.hidden.bias,
                &mut h.image.out.weight,
                &mut h.image.out.bias,
                &mut h.text.hidden.weight,
                &mut h.text.hidden.bias,
                &mut h.text.out.weight,
                &mut h.text.out.bias,
            ]);
        }
        out
    }

    /// Number of leading tensors that belong to the base layers.
    pub const BASE_TENSOR_COUNT: usize = 4;

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.rows() * t.cols()).sum()
    }

    fn check_input(&self, what: &'static str, x: &Matrix, expected: usize) -> Result<(), ModelError> {
        if x.cols() != expected {
            return Err(ModelError::DimMismatch {
                what,
                expected,
                actual: x.cols(),
            });
        }
        Ok(())
    }

    /// Joint-space embeddings of image features, before normalization.
    pub fn embed_images(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        self.check_input("image features", x, self.image_base.in_dim())?;
        let h = self.image_base.forward(x)?;
        match &self.heads {
            Some(heads) => Ok(heads.image.forward(&h)?.0),
            None => Ok(h),
        }
    }

    pub fn embed_texts(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        self.check_input("caption features", x, self.text_base.in_dim())?;
        let h = self.text_base.forward(x)?;
        match &self.heads {
            Some(heads) => Ok(heads.text.forward(&h)?.0),
            None => Ok(h),
        }
    }

    /// Embeds a batch of aligned pairs, keeping what backward needs.
    pub fn forward(&self, images: &Matrix, texts: &Matrix) -> Result<(Matrix, Matrix, ForwardCache), ModelError> {
        self.check_input("image features", images, self.image_base.in_dim())?;
        self.check_input("caption features", texts, self.text_base.in_dim())?;
        if images.rows() != texts.rows() {
            return Err(ModelError::BatchMismatch {
                images: images.rows(),
                captions: texts.rows(),
            });
        }
        let h_img = self.image_base.forward(images)?;
        let h_txt = self.text_base.forward(texts)?;
        let (z_img, z_txt, head_caches) = match &self.heads {
            Some(heads) => {
                let (zi, ci) = heads.image.forward(&h_img)?;
                let (zt, ct) = heads.text.forward(&h_txt)?;
                (zi, zt, Some((ci, ct)))
            }
            None => (h_img.clone(), h_txt.clone(), None),
        };
        let cache = ForwardCache {
            id: self.id,
            version: self.version,
            images: images.clone(),
            texts: texts.clone(),
            image_base_out: h_img,
            text_base_out: h_txt,
            heads: head_caches,
        };
        Ok((z_img, z_txt, cache))
    }

    /// Parameter gradients of a scalar loss given its gradients w.r.t. the
    /// joint embeddings returned by the matching [`forward`](Self::forward).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_images: &Matrix,
        grad_texts: &Matrix,
    ) -> Result<ParameterGradients, ModelError> {
        if cache.id != self.id || cache.version != self.version {
            return Err(ModelError::StaleCache);
        }
        let n = cache.images.rows();
        let d = self.joint_dim();
        for g in [grad_images, grad_texts] {
            if g.shape() != (n, d) {
                return Err(ModelError::Numerics(NumericsError::ShapeMismatch {
                    op: "backward",
                    left: (n, d),
                    right: g.shape(),
                }));
            }
        }

        let (dh_img, dh_txt, head_grads) = match (&self.heads, &cache.heads) {
            (Some(heads), Some((ci, ct))) => {
                let (gi, dh_i) = head_backward(&heads.image, &cache.image_base_out, ci, grad_images);
                let (gt, dh_t) = head_backward(&heads.text, &cache.text_base_out, ct, grad_texts);
                (dh_i, dh_t, Some((gi, gt)))
            }
            (None, None) => (grad_images.clone(), grad_texts.clone(), None),
            _ => return Err(ModelError::StaleCache),
        };

        let (dw_i, db_i, _) = self.image_base.backward(&cache.images, &dh_img, false);
        let (dw_t, db_t, _) = self.text_base.backward(&cache.texts, &dh_txt, false);
        let mut tensors = vec![dw_i, db_i, dw_t, db_t];
        if let Some((gi, gt)) = head_grads {
            tensors.extend(gi);
            tensors.extend(gt);
        }
        Ok(ParameterGradients { tensors })
    }
}

/// Returns the four head gradients and the gradient w.r.t. the head input.
fn head_backward(head: &ProjectionHead, input: &Matrix, cache: &HeadCache, dz: &Matrix) -> ([Matrix; 4], Matrix) {
    let (dw2, db2, d_act) = head.out.backward(&cache.act, dz, true);
    let mut d_pre = d_act.expect("requested");
    d_pre
        .as_mut_slice()
        .iter_mut()
        .zip(cache.pre.as_slice())
        .for_each(|(g, &p)| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
    let (dw1, db1, dh) = head.hidden.backward(input, &d_pre, true);
    ([dw1, db1, dw2, db2], dh.expect("requested"))
}

/// Fresh network with Glorot-uniform weights and zero biases. Base layers are
/// drawn before heads, image branch before text branch.
pub fn init_network(config: NetworkConfig, rng: &mut Rng) -> Result<EmbeddingNetwork, ModelError> {
    config.validate()?;
    let image_base = LinearLayer::glorot(config.image_dim, config.base_dim, rng);
    let text_base = LinearLayer::glorot(config.text_dim, config.base_dim, rng);
    let heads = config.head.map(|h| Heads {
        image: ProjectionHead::glorot(config.base_dim, h, rng),
        text: ProjectionHead::glorot(config.base_dim, h, rng),
    });
    EmbeddingNetwork::from_parts(image_base, text_base, heads)
}

/// Copies the base layers of a headless network and attaches fresh heads.
pub fn init_from_base(
    base: &EmbeddingNetwork,
    head: HeadConfig,
    rng: &mut Rng,
) -> Result<EmbeddingNetwork, ModelError> {
    if base.has_heads() {
        return Err(ModelError::HeadsPresent);
    }
    let cfg = NetworkConfig {
        head: Some(head),
        ..base.config()
    };
    cfg.validate()?;
    let heads = Heads {
        image: ProjectionHead::glorot(cfg.base_dim, head, rng),
        text: ProjectionHead::glorot(cfg.base_dim, head, rng),
    };
    EmbeddingNetwork::from_parts(base.image_base.clone(), base.text_base.clone(), Some(heads))
}

/// Copies the base layers and attaches identity heads (hidden width
/// `2 * base_dim`, joint dim `base_dim`).
pub fn init_identity_heads(base: &EmbeddingNetwork) -> Result<EmbeddingNetwork, ModelError> {
    if base.has_heads() {
        return Err(ModelError::HeadsPresent);
    }
    let dim = base.config().base_dim;
    EmbeddingNetwork::from_parts(
        base.image_base.clone(),
        base.text_base.clone(),
        Some(Heads {
            image: ProjectionHead::identity(dim),
            text: ProjectionHead::identity(dim),
        }),
    )
}

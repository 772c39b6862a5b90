//! Reference implementations written independently of the library: scalar
//! loops for the losses and recall, a finite-difference gradient checker and
//! a least-squares retrieval baseline.
#![allow(dead_code, clippy::needless_range_loop)]

use convse::losses::{compute_loss, LossConfig, LossKind};
use convse::model::{init_network, EmbeddingNetwork, HeadConfig, NetworkConfig};
use convse::numerics::{Matrix, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const GRAD_ABS_TOL: f64 = 1e-7;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| (0..b.rows()).map(|j| cosine(a.row(i), b.row(j))).collect())
        .collect()
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn neg_log_softmax(logits: &[f64], pos: usize) -> f64 {
    // direct evaluation; inputs here are bounded by 1/tau <= 20
    let denom: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[pos].exp() / denom).ln()
}

/// Lowest-index maximum over `k != skip`.
fn hardest(values: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best = None;
    for (k, v) in values.enumerate() {
        if k == skip {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((k, v)),
        }
    }
    best.unwrap().0
}

/// Per-pair scalar loop over the similarity matrix `s` (and, for MVN, the
/// within-modality matrices), averaged over pairs.
pub fn naive_loss(kind: LossKind, s: &[Vec<f64>], s_ii: &[Vec<f64>], s_cc: &[Vec<f64>], alpha: f64, tau: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = s[i][i];
        let c_star = hardest((0..n).map(|k| s[i][k]), i);
        let i_star = hardest((0..n).map(|k| s[k][i]), i);
        total += match kind {
            LossKind::Sh => (0..n)
                .filter(|&k| k != i)
                .map(|k| relu(alpha + s[i][k] - pos) + relu(alpha + s[k][i] - pos))
                .sum(),
            LossKind::Mh => relu(alpha + s[i][c_star] - pos) + relu(alpha + s[i_star][i] - pos),
            LossKind::Cmn => relu((s[i][c_star] + alpha - pos) / tau) + relu((s[i_star][i] + alpha - pos) / tau),
            LossKind::CmnTilde => {
                // -log(exp(pos/tau) / exp(neg/tau)) per direction
                let a = -((pos / tau).exp() / (s[i][c_star] / tau).exp()).ln();
                let b = -((pos / tau).exp() / (s[i_star][i] / tau).exp()).ln();
                a + b
            }
            LossKind::Csn => {
                let row: Vec<f64> = (0..n).map(|k| s[i][k] / tau).collect();
                let col: Vec<f64> = (0..n).map(|k| s[k][i] / tau).collect();
                neg_log_softmax(&row, i) + neg_log_softmax(&col, i)
            }
            LossKind::Mvn => {
                let mut img = vec![pos / tau];
                let mut cap = vec![pos / tau];
                for k in (0..n).filter(|&k| k != i) {
                    img.push(s[i][k] / tau);
                    img.push(s_ii[i][k] / tau);
                    cap.push(s[k][i] / tau);
                    cap.push(s_cc[i][k] / tau);
                }
                neg_log_softmax(&img, 0) + neg_log_softmax(&cap, 0)
            }
        };
    }
    total / n as f64
}

pub fn naive_loss_on_embeddings(kind: LossKind, zi: &Matrix, zc: &Matrix, alpha: f64, tau: f64) -> f64 {
    naive_loss(
        kind,
        &cosine_matrix(zi, zc),
        &cosine_matrix(zi, zi),
        &cosine_matrix(zc, zc),
        alpha,
        tau,
    )
}

/// Smallest distance of any hinge bracket or hardest-negative runner-up from
/// its switching point. Finite differences are meaningless when this is
/// comparable to the perturbation.
pub fn kink_distance(kind: LossKind, s: &[Vec<f64>], alpha: f64) -> f64 {
    let n = s.len();
    let mut d = f64::INFINITY;
    for i in 0..n {
        let pos = s[i][i];
        let mut row: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| s[i][k]).collect();
        let mut col: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| s[k][i]).collect();
        match kind {
            LossKind::Sh => {
                for v in row.iter().chain(&col) {
                    d = d.min((alpha + v - pos).abs());
                }
            }
            LossKind::Mh | LossKind::Cmn | LossKind::CmnTilde => {
                for v in [&mut row, &mut col] {
                    v.sort_by(|a, b| b.total_cmp(a));
                    if v.len() >= 2 {
                        d = d.min(v[0] - v[1]);
                    }
                    if kind != LossKind::CmnTilde {
                        d = d.min((alpha + v[0] - pos).abs());
                    }
                }
            }
            LossKind::Csn | LossKind::Mvn => {}
        }
    }
    d
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= GRAD_ABS_TOL || diff <= GRAD_REL_TOL * analytic.abs().max(numeric.abs())
}

/// Central differences of `f` at every entry of `x`.
pub fn central_diff(x: &Matrix, mut f: impl FnMut(&Matrix) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for k in 0..x.rows() * x.cols() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + FD_STEP;
        let plus = f(&probe);
        probe.as_mut_slice()[k] = orig - FD_STEP;
        let minus = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    out
}

/// Largest violation found while comparing `analytic` with `numeric`, as
/// `(index, analytic, numeric)`.
pub fn first_mismatch(analytic: &[f64], numeric: &[f64]) -> Option<(usize, f64, f64)> {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .find(|(_, (a, n))| !close(**a, **n))
        .map(|(k, (a, n))| (k, *a, *n))
}

#[derive(Debug, Clone, Copy)]
pub struct GradInstance {
    pub n: usize,
    pub d: usize,
    pub tau: f64,
    pub alpha: f64,
}

pub const TAU_GRID: [f64; 4] = [0.05, 0.1, 0.5, 1.0];

pub fn random_instance(rng: &mut Rng) -> GradInstance {
    GradInstance {
        n: 2 + rng.below(15),
        d: 4 + rng.below(29),
        tau: TAU_GRID[rng.below(4)],
        alpha: if rng.below(2) == 0 { 0.0 } else { 0.2 },
    }
}

/// Minimum clearance from the switching points of a hinge/argmax and from a
/// ReLU kink that an instance must have before it is used.
pub const KINK_CLEARANCE: f64 = 1e-4;

/// Checks analytic embedding gradients against central differences of the
/// library's own loss value. Returns `Ok(false)` when the instance sits too
/// close to a kink to be checked.
pub fn check_embedding_gradients(kind: LossKind, inst: GradInstance, rng: &mut Rng) -> Result<bool, String> {
    let zi = rng.normal_matrix(inst.n, inst.d, 1.0);
    let zc = rng.normal_matrix(inst.n, inst.d, 1.0);
    if kink_distance(kind, &cosine_matrix(&zi, &zc), inst.alpha) < KINK_CLEARANCE {
        return Ok(false);
    }
    let cfg = LossConfig::new(kind, inst.alpha, inst.tau).unwrap();
    let out = compute_loss(&zi, &zc, &cfg, None).map_err(|e| e.to_string())?;
    let value = |a: &Matrix, b: &Matrix| compute_loss(a, b, &cfg, None).unwrap().value;
    let num_i = central_diff(&zi, |p| value(p, &zc));
    let num_c = central_diff(&zc, |p| value(&zi, p));
    for (name, a, n) in [
        ("Z_I", out.grad_images.as_slice(), &num_i),
        ("Z_C", out.grad_captions.as_slice(), &num_c),
    ] {
        if let Some((k, a, n)) = first_mismatch(a, n) {
            return Err(format!("{kind} {inst:?} d{name}[{k}]: analytic {a} vs numeric {n}"));
        }
    }
    Ok(true)
}

pub fn random_network(rng: &mut Rng, joint_dim: usize) -> EmbeddingNetwork {
    let cfg = NetworkConfig {
        image_dim: 2 + rng.below(6),
        text_dim: 2 + rng.below(6),
        base_dim: 4 + rng.below(8),
        head: Some(HeadConfig {
            hidden_dim: 4 + rng.below(8),
            out_dim: joint_dim,
        }),
    };
    let mut net = init_network(cfg, rng).unwrap();
    // non-zero biases so every parameter is exercised
    for t in net.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += 0.1 * rng.normal();
        }
    }
    net
}

fn min_abs(m: Option<&Matrix>) -> f64 {
    m.map_or(f64::INFINITY, |m| {
        m.as_slice().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()))
    })
}

/// Checks every parameter gradient of a random two-stage network under
/// `kind` against central differences.
pub fn check_parameter_gradients(kind: LossKind, inst: GradInstance, rng: &mut Rng) -> Result<bool, String> {
    let net = random_network(rng, inst.d);
    let c = net.config();
    let x_img = rng.normal_matrix(inst.n, c.image_dim, 1.0);
    let x_txt = rng.normal_matrix(inst.n, c.text_dim, 1.0);
    let (zi, zc, cache) = net.forward(&x_img, &x_txt).unwrap();
    let relu_gap = min_abs(cache.image_hidden_pre()).min(min_abs(cache.text_hidden_pre()));
    if relu_gap < KINK_CLEARANCE || kink_distance(kind, &cosine_matrix(&zi, &zc), inst.alpha) < KINK_CLEARANCE {
        return Ok(false);
    }
    let cfg = LossConfig::new(kind, inst.alpha, inst.tau).unwrap();
    let out = compute_loss(&zi, &zc, &cfg, None).map_err(|e| e.to_string())?;
    let grads = net.backward(&cache, &out.grad_images, &out.grad_captions).unwrap();

    let names: Vec<&str> = net.tensors().iter().map(|(n, _)| *n).collect();
    for (t, name) in names.iter().enumerate() {
        let base = net.tensors()[t].1.clone();
        let numeric = central_diff(&base, |p| {
            let mut probe = net.clone();
            probe.tensors_mut()[t].as_mut_slice().copy_from_slice(p.as_slice());
            let (a, b, _) = probe.forward(&x_img, &x_txt).unwrap();
            compute_loss(&a, &b, &cfg, None).unwrap().value
        });
        if let Some((k, a, n)) = first_mismatch(grads.tensors[t].as_slice(), &numeric) {
            return Err(format!("{kind} {inst:?} {name}[{k}]: analytic {a} vs numeric {n}"));
        }
    }
    Ok(true)
}

/// Zero-based rank of `target` in a gallery sorted by descending score,
/// earlier index first among equal scores.
fn sorted_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().position(|&g| g == target).unwrap()
}

/// Sort-and-scan R@K for image queries.
pub fn naive_recall_i2t(s: &Matrix, cap_to_img: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for i in 0..s.rows() {
        let row = s.row(i);
        let best = (0..s.cols())
            .filter(|&c| cap_to_img[c] == i)
            .map(|c| sorted_rank(row, c))
            .min();
        if best.is_some_and(|r| r < k) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / s.rows() as f64
}

/// Sort-and-scan R@K for caption queries.
pub fn naive_recall_t2i(s: &Matrix, cap_to_img: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for c in 0..s.cols() {
        let col: Vec<f64> = (0..s.rows()).map(|i| s.get(i, c)).collect();
        if sorted_rank(&col, cap_to_img[c]) < k {
            hits += 1;
        }
    }
    100.0 * hits as f64 / s.cols() as f64
}

/// Least-squares map from caption features to image features fitted on
/// `train` pairs; returns `captions_test · W`.
pub fn least_squares_projection(train_captions: &Matrix, train_images: &Matrix, test_captions: &Matrix) -> Matrix {
    let c = nalgebra::DMatrix::from_row_slice(train_captions.rows(), train_captions.cols(), train_captions.as_slice());
    let x = nalgebra::DMatrix::from_row_slice(train_images.rows(), train_images.cols(), train_images.as_slice());
    let w = c.svd(true, true).solve(&x, 1e-12).expect("svd solve");
    let t = nalgebra::DMatrix::from_row_slice(test_captions.rows(), test_captions.cols(), test_captions.as_slice());
    let p = t * w;
    Matrix::from_fn(p.nrows(), p.ncols(), |i, j| p[(i, j)])
}

//! Contrastive pre-training: pairing strategies over waveforms, the
//! projection head, bilinear similarity, and the in-batch cross-entropy loss.
//!
//! A batch holds B (anchor, positive) pairs. Anchor i's candidate set is the
//! column of positives: row i is its positive, every other positive is a
//! negative. The loss is the mean over anchors of
//! −log softmax(s(xᵢ, ·))ᵢ with s(x, x′) = g(x)ᵀ W g(x′).

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::augment::{random_segment, random_view, AugmentSpec};
use crate::error::{Error, Result};
use crate::nn::dense::Dense;
use crate::nn::{real, relu, relu_grad, Real};
use crate::rng::sub_seed;

/// How (anchor, positive) pairs are built from raw clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMode {
    /// Two independent crops of the same recording.
    Segments,
    /// One crop seen through two independently sampled augmented views.
    Augmentations,
}

/// Pairing by co-location: two independent seed-determined crops per clip.
pub fn make_pairs_method1(
    clips: &[Waveform],
    seg_len: usize,
    seed: u64,
) -> Vec<(Waveform, Waveform)> {
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let anchor = random_segment(clip, seg_len, sub_seed(seed, "segment-anchor", i as u64));
            let positive =
                random_segment(clip, seg_len, sub_seed(seed, "segment-positive", i as u64));
            (anchor, positive)
        })
        .collect()
}

/// The two per-view augmentation specs used for pair `index`: identical
/// ranges, independent sub-seeds.
pub fn pair_view_specs(spec: &AugmentSpec, seed: u64, index: u64) -> (AugmentSpec, AugmentSpec) {
    (
        AugmentSpec { seed: sub_seed(seed, "view-anchor", index), ..*spec },
        AugmentSpec { seed: sub_seed(seed, "view-positive", index), ..*spec },
    )
}

/// Pairing by augmentation: one crop per clip, two independently sampled
/// views of it.
pub fn make_pairs_method2(
    clips: &[Waveform],
    seg_len: usize,
    spec: &AugmentSpec,
    seed: u64,
) -> Vec<(Waveform, Waveform)> {
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let seg = random_segment(clip, seg_len, sub_seed(seed, "segment", i as u64));
            let (spec_a, spec_p) = pair_view_specs(spec, seed, i as u64);
            (random_view(&seg, &spec_a), random_view(&seg, &spec_p))
        })
        .collect()
}

/// Projection head g (two affine layers with a ReLU between) plus the
/// bilinear similarity matrix W.
#[derive(Debug, Clone)]
pub struct ProjectionParams<T> {
    pub l1: Dense<T>,
    pub l2: Dense<T>,
    /// (proj_dim, proj_dim); s(z, z′) = zᵀ W z′.
    pub w: Array2<T>,
}

impl<T: Real> ProjectionParams<T> {
    /// Kaiming-initialized head; W starts at a scaled identity so initial
    /// similarities are O(1) inner products. A plain identity would put the
    /// logits at O(‖z‖²): cross-entropy then descends fastest by shrinking
    /// the overall scale, and once W is small the encoder gradient
    /// dL/dz = dS·(W z′) dies with it — training stalls at the uniform-
    /// softmax plateau ln B instead of learning to align pairs.
    pub fn init(latent_dim: usize, proj_dim: usize, rng: &mut impl Rng) -> Self {
        ProjectionParams {
            l1: Dense::kaiming(latent_dim, latent_dim, rng),
            l2: Dense::kaiming(latent_dim, proj_dim, rng),
            w: Array2::eye(proj_dim) / real::<T>(proj_dim as f64),
        }
    }

    pub fn zeros(latent_dim: usize, proj_dim: usize) -> Self {
        ProjectionParams {
            l1: Dense::zeros(latent_dim, latent_dim),
            l2: Dense::zeros(latent_dim, proj_dim),
            w: Array2::zeros((proj_dim, proj_dim)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.latent_dim(), self.proj_dim())
    }

    pub fn latent_dim(&self) -> usize {
        self.l1.w.ncols()
    }

    pub fn proj_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, ArrayViewD<'a, T>)) {
        f("l1.weight".into(), self.l1.w.view().into_dyn());
        f("l1.bias".into(), self.l1.b.view().into_dyn());
        f("l2.weight".into(), self.l2.w.view().into_dyn());
        f("l2.bias".into(), self.l2.b.view().into_dyn());
        f("bilinear_w".into(), self.w.view().into_dyn());
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        f("l1.weight".into(), self.l1.w.view_mut().into_dyn());
        f("l1.bias".into(), self.l1.b.view_mut().into_dyn());
        f("l2.weight".into(), self.l2.w.view_mut().into_dyn());
        f("l2.bias".into(), self.l2.b.view_mut().into_dyn());
        f("bilinear_w".into(), self.w.view_mut().into_dyn());
    }

    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, view| out.push((name, view.len())));
        out
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit(&mut |_, view| out.extend(view.iter().copied()));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[T]) -> Result<()> {
        let expected: usize = self.layout().iter().map(|(_, n)| n).sum();
        if flat.len() != expected {
            return Err(Error::Shape {
                stage: "assign_from_flat".into(),
                detail: format!("expected {expected} values, got {}", flat.len()),
            });
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, mut view| {
            for v in view.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        });
        Ok(())
    }
}

pub struct ProjectCache<T> {
    /// Pre-ReLU hidden activations.
    h1: Array2<T>,
    /// Post-ReLU hidden activations.
    a1: Array2<T>,
}

/// g: latents (B, latent) → projected (B, proj).
pub fn project<T: Real>(y: &Array2<T>, p: &ProjectionParams<T>) -> (Array2<T>, ProjectCache<T>) {
    let h1 = p.l1.forward(y);
    let a1 = h1.mapv(relu);
    let z = p.l2.forward(&a1);
    (z, ProjectCache { h1, a1 })
}

fn project_backward<T: Real>(
    y: &Array2<T>,
    dz: &Array2<T>,
    p: &ProjectionParams<T>,
    cache: &ProjectCache<T>,
    grad: &mut ProjectionParams<T>,
) -> Array2<T> {
    let mut da1 = p.l2.backward(&cache.a1, dz, &mut grad.l2);
    ndarray::Zip::from(&mut da1)
        .and(&cache.h1)
        .for_each(|d, &h| *d *= relu_grad(h));
    p.l1.backward(y, &da1, &mut grad.l1)
}

/// zᵀ W z′ for a single pair of projected vectors.
pub fn bilinear_similarity<T: Real>(z: &Array1<T>, zp: &Array1<T>, w: &Array2<T>) -> T {
    z.dot(&w.dot(zp))
}

/// B latent pairs; row i of `positives` is anchor i's positive, all other
/// rows are its negatives.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<T> {
    pub anchors: Array2<T>,
    pub positives: Array2<T>,
    pub mode: PairingMode,
}

pub struct ContrastiveCache<T> {
    anchor_proj: ProjectCache<T>,
    positive_proj: ProjectCache<T>,
    za: Array2<T>,
    zp: Array2<T>,
    /// Row-stochastic softmax of the similarity matrix.
    probs: Array2<T>,
}

/// Mean in-batch cross-entropy: Lᵢ = −log softmax(S[i,·])ᵢ over
/// S = Zₐ W Zₚᵀ, stabilized by per-row max subtraction.
pub fn contrastive_loss<T: Real>(
    batch: &ContrastiveBatch<T>,
    p: &ProjectionParams<T>,
) -> Result<(T, ContrastiveCache<T>)> {
    let b = batch.anchors.nrows();
    if batch.positives.nrows() != b {
        return Err(Error::Shape {
            stage: "contrastive".into(),
            detail: format!(
                "{b} anchors but {} positives",
                batch.positives.nrows()
            ),
        });
    }
    if b < 2 {
        return Err(Error::EmptySet(format!(
            "contrastive batch of {b} pair(s) has no negatives; need at least 2"
        )));
    }
    let (za, anchor_proj) = project(&batch.anchors, p);
    let (zp, positive_proj) = project(&batch.positives, p);
    let s = za.dot(&p.w).dot(&zp.t());

    let mut probs = Array2::zeros((b, b));
    let mut loss = T::zero();
    for i in 0..b {
        let row = s.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps = row.mapv(|v| (v - m).exp());
        let denom = exps.sum();
        probs.row_mut(i).assign(&(exps / denom));
        loss += m + denom.ln() - s[(i, i)];
    }
    loss /= real::<T>(b as f64);
    Ok((
        loss,
        ContrastiveCache {
            anchor_proj,
            positive_proj,
            za,
            zp,
            probs,
        },
    ))
}

/// Backward for unit upstream gradient: accumulates head/W gradients into
/// `grad` and returns (d_anchors, d_positives) for the embedder.
pub fn contrastive_backward<T: Real>(
    batch: &ContrastiveBatch<T>,
    p: &ProjectionParams<T>,
    cache: &ContrastiveCache<T>,
    grad: &mut ProjectionParams<T>,
) -> (Array2<T>, Array2<T>) {
    let b = batch.anchors.nrows();
    let scale = real::<T>(1.0 / b as f64);
    // ∂L/∂S = (P − I)/B for softmax cross-entropy with target i per row i.
    let mut ds = cache.probs.mapv(|v| v * scale);
    for i in 0..b {
        ds[(i, i)] -= scale;
    }
    // S = Zₐ W Zₚᵀ.
    grad.w += &cache.za.t().dot(&ds).dot(&cache.zp);
    let dza = ds.dot(&cache.zp).dot(&p.w.t());
    let dzp = ds.t().dot(&cache.za).dot(&p.w);
    let dya = project_backward(&batch.anchors, &dza, p, &cache.anchor_proj, grad);
    let dyp = project_backward(&batch.positives, &dzp, p, &cache.positive_proj, grad);
    (dya, dyp)
}

//! The full feature extractor: a residual CNN that collapses the frequency
//! axis (time is never convolved), followed by a stack of shape-preserving
//! SSM layers over time, then a time-mean pooled latent vector.
//!
//! Stage widths follow the doubling scheme (base, base, 2·base, 4·base,
//! 8·base); the default base of 64 gives the (64, 64, 128, 256, 512) ladder
//! and a 512-wide latent. Frequency shrinks as
//! stem /2 → pool /2 → stage3 /2 → stage4 /2 → stage5 /2 → avgpool → 1.

use ndarray::{Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{
    avgpool_freq_backward, avgpool_freq_forward, conv_backward, conv_forward,
    maxpool3_backward, maxpool3_forward, Conv, MaxPoolCache,
};
use super::norm::{
    channel_norm_backward, channel_norm_forward, ChannelNormCache, NormParams,
};
use super::ssm::{SsmCache, SsmLayer};
use super::{real, relu, relu_grad, Real};
use crate::error::{Error, Result};
use crate::features::StackedSpectrogram;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderConfig {
    /// Stem width; stages run (base, base, 2b, 4b, 8b).
    pub base_channels: usize,
    pub n_ssm_layers: usize,
    /// Full state size N; N/2 conjugate-pair states are stored.
    pub state_size: usize,
    /// false = "CNN only" ablation: the SSM stack is skipped entirely.
    pub ssm_enabled: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            base_channels: 64,
            n_ssm_layers: 6,
            state_size: 64,
            ssm_enabled: true,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("model.base_channels must be positive".into()));
        }
        if self.state_size < 2 || self.state_size % 2 != 0 {
            return Err(Error::Config(format!(
                "model.state_size must be even and ≥ 2, got {}",
                self.state_size
            )));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.base_channels * 8
    }

    fn stage_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv<T>,
    pub norm1: NormParams<T>,
    pub conv2: Conv<T>,
    pub norm2: NormParams<T>,
    /// 1×1 stride-2 projection on downsampling blocks.
    pub proj: Option<(Conv<T>, NormParams<T>)>,
}

impl<T: Real> ResidualBlock<T> {
    // Convolutions carry no bias: every one feeds a channel norm, whose mean
    // subtraction would cancel the bias exactly.
    fn init(c_in: usize, c_out: usize, downsample: bool, rng: &mut impl Rng) -> Self {
        let stride = if downsample { 2 } else { 1 };
        ResidualBlock {
            conv1: Conv::kaiming(c_in, c_out, 3, stride, 1, false, rng),
            norm1: NormParams::identity(c_out),
            conv2: Conv::kaiming(c_out, c_out, 3, 1, 1, false, rng),
            norm2: NormParams::identity(c_out),
            proj: (downsample || c_in != c_out).then(|| {
                (
                    Conv::kaiming(c_in, c_out, 1, stride, 0, false, rng),
                    NormParams::identity(c_out),
                )
            }),
        }
    }

    fn zeros_like(&self) -> Self {
        ResidualBlock {
            conv1: self.conv1.zeros_like(),
            norm1: NormParams::zeros(self.norm1.gamma.len()),
            conv2: self.conv2.zeros_like(),
            norm2: NormParams::zeros(self.norm2.gamma.len()),
            proj: self
                .proj
                .as_ref()
                .map(|(c, n)| (c.zeros_like(), NormParams::zeros(n.gamma.len()))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbedderParams<T> {
    pub cfg: EmbedderConfig,
    pub stem: Conv<T>,
    pub stem_norm: NormParams<T>,
    /// Four stages of two blocks each.
    pub stages: Vec<Vec<ResidualBlock<T>>>,
    pub ssm: Vec<SsmLayer<T>>,
}

impl<T: Real> EmbedderParams<T> {
    pub fn init(cfg: &EmbedderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let chans = cfg.stage_channels();
        let mut stages = Vec::new();
        let mut c_in = b;
        for (i, &c_out) in chans.iter().enumerate() {
            let downsample = i > 0; // stage2 keeps frequency, stages 3–5 halve it
            stages.push(vec![
                ResidualBlock::init(c_in, c_out, downsample, rng),
                ResidualBlock::init(c_out, c_out, false, rng),
            ]);
            c_in = c_out;
        }
        let latent = cfg.latent_dim();
        let ssm = (0..cfg.n_ssm_layers)
            .map(|_| SsmLayer::init(latent, cfg.state_size, rng))
            .collect();
        Ok(EmbedderParams {
            cfg: cfg.clone(),
            stem: Conv::kaiming(3, b, 7, 2, 3, false, rng),
            stem_norm: NormParams::identity(b),
            stages,
            ssm,
        })
    }

    pub fn zeros_like(&self) -> Self {
        EmbedderParams {
            cfg: self.cfg.clone(),
            stem: self.stem.zeros_like(),
            stem_norm: NormParams::zeros(self.stem_norm.gamma.len()),
            stages: self
                .stages
                .iter()
                .map(|blocks| blocks.iter().map(|b| b.zeros_like()).collect())
                .collect(),
            ssm: self
                .ssm
                .iter()
                .map(|l| SsmLayer::zeros(l.channels(), 2 * l.state_pairs()))
                .collect(),
        }
    }
}

struct BlockCache<T> {
    x: Array4<T>,
    n1_cache: ChannelNormCache<T>,
    /// Pre-ReLU output of norm1 (for the ReLU gradient mask).
    n1: Array4<T>,
    a1: Array4<T>,
    n2_cache: ChannelNormCache<T>,
    pre_relu: Array4<T>,
    proj_cache: Option<ChannelNormCache<T>>,
}

pub struct EmbedCache<T> {
    x: Array4<T>,
    stem_norm_cache: ChannelNormCache<T>,
    stem_n: Array4<T>,
    stem_a_dims: (usize, usize, usize, usize),
    pool_cache: MaxPoolCache,
    blocks: Vec<BlockCache<T>>,
    pre_pool_dims: (usize, usize, usize, usize),
    ssm_caches: Vec<SsmCache<T>>,
    t_len: usize,
}

impl<T> EmbedCache<T> {
    /// Shape of the sequence handed to the SSM stack after the frequency
    /// average-pool: (batch, channels, time).
    pub fn sequence_dims(&self) -> (usize, usize, usize) {
        let (b, c, _, t) = self.pre_pool_dims;
        (b, c, t)
    }
}

fn block_forward<T: Real>(
    block: &ResidualBlock<T>,
    x: &Array4<T>,
    stage: &str,
) -> Result<(Array4<T>, BlockCache<T>)> {
    let h1 = conv_forward(x, &block.conv1, stage)?;
    let (n1, n1_cache) = channel_norm_forward(&h1, &block.norm1);
    let a1 = n1.mapv(relu);
    let h2 = conv_forward(&a1, &block.conv2, stage)?;
    let (n2, n2_cache) = channel_norm_forward(&h2, &block.norm2);
    let (shortcut, proj_cache) = match &block.proj {
        Some((conv, norm)) => {
            let s = conv_forward(x, conv, stage)?;
            let (sn, sc) = channel_norm_forward(&s, norm);
            (sn, Some(sc))
        }
        None => (x.clone(), None),
    };
    let pre_relu = n2 + shortcut;
    let y = pre_relu.mapv(relu);
    Ok((
        y,
        BlockCache {
            x: x.clone(),
            n1_cache,
            n1,
            a1,
            n2_cache,
            pre_relu,
            proj_cache,
        },
    ))
}

fn block_backward<T: Real>(
    block: &ResidualBlock<T>,
    cache: &BlockCache<T>,
    dy: &Array4<T>,
    grad: &mut ResidualBlock<T>,
) -> Array4<T> {
    let mut d_pre = dy.clone();
    ndarray::Zip::from(&mut d_pre)
        .and(&cache.pre_relu)
        .for_each(|d, &v| *d *= relu_grad(v));
    // Shortcut path.
    let mut dx = match (&block.proj, &cache.proj_cache) {
        (Some((conv, norm)), Some(proj_cache)) => {
            let gproj = grad.proj.as_mut().expect("grad mirrors params");
            let ds = channel_norm_backward(&d_pre, proj_cache, norm, &mut gproj.1);
            conv_backward(&cache.x, &ds, conv, &mut gproj.0)
        }
        _ => d_pre.clone(),
    };
    // Main path.
    let dh2 = channel_norm_backward(&d_pre, &cache.n2_cache, &block.norm2, &mut grad.norm2);
    let mut da1 = conv_backward(&cache.a1, &dh2, &block.conv2, &mut grad.conv2);
    ndarray::Zip::from(&mut da1)
        .and(&cache.n1)
        .for_each(|d, &v| *d *= relu_grad(v));
    let dh1 = channel_norm_backward(&da1, &cache.n1_cache, &block.norm1, &mut grad.norm1);
    dx += &conv_backward(&cache.x, &dh1, &block.conv1, &mut grad.conv1);
    dx
}

/// Forward pass: (B, 3, F, T) → latent (B, 8·base). Time length is exactly
/// preserved until the final mean pool.
pub fn embed_forward<T: Real>(
    p: &EmbedderParams<T>,
    x: &Array4<T>,
) -> Result<(Array2<T>, EmbedCache<T>)> {
    let stem_out = conv_forward(x, &p.stem, "stem")?;
    let (stem_n, stem_norm_cache) = channel_norm_forward(&stem_out, &p.stem_norm);
    let stem_a = stem_n.mapv(relu);
    let (mut h, pool_cache) = maxpool3_forward(&stem_a, "stem-pool")?;
    let stem_a_dims = stem_a.dim();

    let stage_names = ["stage2", "stage3", "stage4", "stage5"];
    let mut blocks = Vec::new();
    for (blocks_in_stage, name) in p.stages.iter().zip(stage_names) {
        for block in blocks_in_stage {
            let (out, cache) = block_forward(block, &h, name)?;
            blocks.push(cache);
            h = out;
        }
    }

    let pre_pool_dims = h.dim();
    let mut seq = avgpool_freq_forward(&h);
    let mut ssm_caches = Vec::new();
    if p.cfg.ssm_enabled {
        for layer in &p.ssm {
            let (out, cache) = layer.forward(&seq);
            ssm_caches.push(cache);
            seq = out;
        }
    }
    let t_len = seq.dim().2;
    let latent = seq.mean_axis(Axis(2)).expect("t ≥ 1");
    Ok((
        latent,
        EmbedCache {
            x: x.clone(),
            stem_norm_cache,
            stem_n,
            stem_a_dims,
            pool_cache,
            blocks,
            pre_pool_dims,
            ssm_caches,
            t_len,
        },
    ))
}

/// Backward from latent gradients; accumulates parameter gradients into
/// `grad`. The gradient w.r.t. the input spectrogram is not materialized
/// (inputs are data, not parameters).
pub fn embed_backward<T: Real>(
    p: &EmbedderParams<T>,
    cache: &EmbedCache<T>,
    dlatent: &Array2<T>,
    grad: &mut EmbedderParams<T>,
) {
    let (b, c) = dlatent.dim();
    let scale = real::<T>(1.0 / cache.t_len as f64);
    let mut dseq = Array3::zeros((b, c, cache.t_len));
    for ti in 0..cache.t_len {
        dseq.index_axis_mut(Axis(2), ti)
            .assign(&dlatent.mapv(|v| v * scale));
    }

    if p.cfg.ssm_enabled {
        for ((layer, layer_cache), layer_grad) in p
            .ssm
            .iter()
            .zip(&cache.ssm_caches)
            .zip(&mut grad.ssm)
            .rev()
        {
            dseq = layer.backward(&dseq, layer_cache, layer_grad);
        }
    }

    let mut dh = avgpool_freq_backward(&dseq, cache.pre_pool_dims);
    let blocks: Vec<&ResidualBlock<T>> = p.stages.iter().flatten().collect();
    let block_grads: Vec<&mut ResidualBlock<T>> = grad.stages.iter_mut().flatten().collect();
    for ((block, block_cache), block_grad) in blocks
        .into_iter()
        .zip(&cache.blocks)
        .zip(block_grads)
        .rev()
    {
        dh = block_backward(block, block_cache, &dh, block_grad);
    }

    let mut da = maxpool3_backward(&dh, &cache.pool_cache, cache.stem_a_dims);
    ndarray::Zip::from(&mut da)
        .and(&cache.stem_n)
        .for_each(|d, &v| *d *= relu_grad(v));
    let dstem = channel_norm_backward(&da, &cache.stem_norm_cache, &p.stem_norm, &mut grad.stem_norm);
    let _ = conv_backward(&cache.x, &dstem, &p.stem, &mut grad.stem);
}

/// Stack f32 spectrograms into a (B, 3, F, T) batch in working precision.
pub fn batch_from_specs<T: Real>(specs: &[&StackedSpectrogram]) -> Result<Array4<T>> {
    if specs.is_empty() {
        return Err(Error::EmptySet("empty spectrogram batch".into()));
    }
    let dims = specs[0].data.dim();
    let mut out = Array4::zeros((specs.len(), dims.0, dims.1, dims.2));
    for (i, s) in specs.iter().enumerate() {
        if s.data.dim() != dims {
            return Err(Error::Shape {
                stage: "batch".into(),
                detail: format!("spectrogram {i} has shape {:?}, expected {dims:?}", s.data.dim()),
            });
        }
        out.index_axis_mut(Axis(0), i)
            .assign(&s.data.mapv(|v| real::<T>(f64::from(v))));
    }
    Ok(out)
}

// ---- parameter traversal --------------------------------------------------

impl<T: Real> EmbedderParams<T> {
    /// Visit every parameter array in a fixed, documented order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, ArrayViewD<'a, T>)) {
        f("stem.weight".into(), self.stem.weight.view().into_dyn());
        if let Some(bias) = &self.stem.bias {
            f("stem.bias".into(), bias.view().into_dyn());
        }
        f("stem_norm.gamma".into(), self.stem_norm.gamma.view().into_dyn());
        f("stem_norm.beta".into(), self.stem_norm.beta.view().into_dyn());
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let tag = format!("stage{}.block{}", si + 2, bi);
                f(format!("{tag}.conv1.weight"), block.conv1.weight.view().into_dyn());
                f(format!("{tag}.norm1.gamma"), block.norm1.gamma.view().into_dyn());
                f(format!("{tag}.norm1.beta"), block.norm1.beta.view().into_dyn());
                f(format!("{tag}.conv2.weight"), block.conv2.weight.view().into_dyn());
                f(format!("{tag}.norm2.gamma"), block.norm2.gamma.view().into_dyn());
                f(format!("{tag}.norm2.beta"), block.norm2.beta.view().into_dyn());
                if let Some((conv, norm)) = &block.proj {
                    f(format!("{tag}.proj.weight"), conv.weight.view().into_dyn());
                    f(format!("{tag}.proj_norm.gamma"), norm.gamma.view().into_dyn());
                    f(format!("{tag}.proj_norm.beta"), norm.beta.view().into_dyn());
                }
            }
        }
        for (li, layer) in self.ssm.iter().enumerate() {
            let tag = format!("ssm{li}");
            f(format!("{tag}.rho"), layer.rho.view().into_dyn());
            f(format!("{tag}.theta"), layer.theta.view().into_dyn());
            f(format!("{tag}.b_re"), layer.b_re.view().into_dyn());
            f(format!("{tag}.b_im"), layer.b_im.view().into_dyn());
            f(format!("{tag}.c_re"), layer.c_re.view().into_dyn());
            f(format!("{tag}.c_im"), layer.c_im.view().into_dyn());
            f(format!("{tag}.log_dt"), layer.log_dt.view().into_dyn());
            f(format!("{tag}.d_skip"), layer.d_skip.view().into_dyn());
            f(format!("{tag}.ln.gamma"), layer.ln.gamma.view().into_dyn());
            f(format!("{tag}.ln.beta"), layer.ln.beta.view().into_dyn());
            f(format!("{tag}.mix_w"), layer.mix_w.view().into_dyn());
            f(format!("{tag}.mix_b"), layer.mix_b.view().into_dyn());
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        f("stem.weight".into(), self.stem.weight.view_mut().into_dyn());
        if let Some(bias) = &mut self.stem.bias {
            f("stem.bias".into(), bias.view_mut().into_dyn());
        }
        f("stem_norm.gamma".into(), self.stem_norm.gamma.view_mut().into_dyn());
        f("stem_norm.beta".into(), self.stem_norm.beta.view_mut().into_dyn());
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let tag = format!("stage{}.block{}", si + 2, bi);
                f(format!("{tag}.conv1.weight"), block.conv1.weight.view_mut().into_dyn());
                f(format!("{tag}.norm1.gamma"), block.norm1.gamma.view_mut().into_dyn());
                f(format!("{tag}.norm1.beta"), block.norm1.beta.view_mut().into_dyn());
                f(format!("{tag}.conv2.weight"), block.conv2.weight.view_mut().into_dyn());
                f(format!("{tag}.norm2.gamma"), block.norm2.gamma.view_mut().into_dyn());
                f(format!("{tag}.norm2.beta"), block.norm2.beta.view_mut().into_dyn());
                if let Some((conv, norm)) = &mut block.proj {
                    f(format!("{tag}.proj.weight"), conv.weight.view_mut().into_dyn());
                    f(format!("{tag}.proj_norm.gamma"), norm.gamma.view_mut().into_dyn());
                    f(format!("{tag}.proj_norm.beta"), norm.beta.view_mut().into_dyn());
                }
            }
        }
        for (li, layer) in self.ssm.iter_mut().enumerate() {
            let tag = format!("ssm{li}");
            f(format!("{tag}.rho"), layer.rho.view_mut().into_dyn());
            f(format!("{tag}.theta"), layer.theta.view_mut().into_dyn());
            f(format!("{tag}.b_re"), layer.b_re.view_mut().into_dyn());
            f(format!("{tag}.b_im"), layer.b_im.view_mut().into_dyn());
            f(format!("{tag}.c_re"), layer.c_re.view_mut().into_dyn());
            f(format!("{tag}.c_im"), layer.c_im.view_mut().into_dyn());
            f(format!("{tag}.log_dt"), layer.log_dt.view_mut().into_dyn());
            f(format!("{tag}.d_skip"), layer.d_skip.view_mut().into_dyn());
            f(format!("{tag}.ln.gamma"), layer.ln.gamma.view_mut().into_dyn());
            f(format!("{tag}.ln.beta"), layer.ln.beta.view_mut().into_dyn());
            f(format!("{tag}.mix_w"), layer.mix_w.view_mut().into_dyn());
            f(format!("{tag}.mix_b"), layer.mix_b.view_mut().into_dyn());
        }
    }

    /// (name, length) spans in `visit` order.
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::gradcheck::grad_check;
    use rand::Rng;

    fn tiny_cfg() -> EmbedderConfig {
        EmbedderConfig {
            base_channels: 2,
            n_ssm_layers: 2,
            state_size: 4,
            ssm_enabled: true,
        }
    }

    fn rand_input(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = crate::rng::rng_for(seed, "embed-test", 0);
        Array4::from_shape_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn frequency_chain_collapses_to_one() {
        let mut rng = crate::rng::rng_for(0, "embed-test", 1);
        let p = EmbedderParams::<f32>::init(&tiny_cfg(), &mut rng).unwrap();
        for t_len in [1, 7, 23] {
            let x = rand_input((2, 3, 32, t_len), 3).mapv(|v| v as f32);
            let (latent, cache) = embed_forward(&p, &x).unwrap();
            assert_eq!(latent.dim(), (2, 16));
            assert_eq!(cache.pre_pool_dims, (2, 16, 1, t_len));
            assert!(latent.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn too_narrow_input_names_failing_stage() {
        let mut rng = crate::rng::rng_for(0, "embed-test", 2);
        let p = EmbedderParams::<f32>::init(&tiny_cfg(), &mut rng).unwrap();
        let x = Array4::<f32>::zeros((1, 3, 2, 4));
        match embed_forward(&p, &x) {
            Err(Error::Shape { stage, .. }) => {
                assert!(stage.starts_with("stage") || stage.starts_with("stem"), "{stage}");
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_latent() {
        let mut rng = crate::rng::rng_for(0, "embed-test", 3);
        let p = EmbedderParams::<f64>::init(&tiny_cfg(), &mut rng).unwrap();
        let x = Array4::zeros((1, 3, 32, 5));
        let (latent, _) = embed_forward(&p, &x).unwrap();
        assert!(latent.iter().all(|&v| v.abs() < 1e-12), "{latent:?}");
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut rng = crate::rng::rng_for(0, "embed-test", 4);
        let p = EmbedderParams::<f64>::init(&tiny_cfg(), &mut rng).unwrap();
        let x = rand_input((3, 3, 32, 6), 5);
        let (latent, _) = embed_forward(&p, &x).unwrap();
        let solo = x.index_axis(Axis(0), 1).to_owned().insert_axis(Axis(0));
        let (latent_solo, _) = embed_forward(&p, &solo).unwrap();
        let diff = (&latent.row(1) - &latent_solo.row(0))
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn ssm_disabled_skips_the_stack() {
        let mut rng = crate::rng::rng_for(0, "embed-test", 5);
        let mut p = EmbedderParams::<f64>::init(&tiny_cfg(), &mut rng).unwrap();
        let x = rand_input((1, 3, 32, 4), 6);
        let (with_ssm, _) = embed_forward(&p, &x).unwrap();
        p.cfg.ssm_enabled = false;
        let (without, _) = embed_forward(&p, &x).unwrap();
        // Corrupting SSM parameters changes nothing when disabled.
        for layer in &mut p.ssm {
            layer.mix_w.fill(1e6);
        }
        let (without2, _) = embed_forward(&p, &x).unwrap();
        assert_eq!(without, without2);
        assert_ne!(with_ssm, without);
    }

    #[test]
    fn flat_roundtrip_preserves_everything() {
        let mut rng = crate::rng::rng_for(0, "embed-test", 6);
        let p = EmbedderParams::<f32>::init(&tiny_cfg(), &mut rng).unwrap();
        let flat = p.to_flat();
        let layout = p.layout();
        assert_eq!(flat.len(), layout.iter().map(|(_, n)| n).sum::<usize>());
        let mut q = p.zeros_like();
        q.assign_from_flat(&flat).unwrap();
        assert_eq!(q.to_flat(), flat);
        // Wrong length is rejected.
        assert!(q.assign_from_flat(&flat[1..]).is_err());
    }

    #[test]
    fn embedder_gradients_match_finite_differences() {
        let mut rng = crate::rng::rng_for(0, "embed-test", 7);
        let p = EmbedderParams::<f64>::init(&tiny_cfg(), &mut rng).unwrap();
        let x = rand_input((2, 3, 32, 3), 8);
        let layout = p.layout();
        let flat = p.to_flat();

        // Positionally weighted quadratic loss (plain ½Σy² is near-invariant
        // through the normalization layers).
        let weights: Vec<f64> = (0..2 * 16).map(|i| 1.0 + 0.2 * (i % 5) as f64).collect();
        let loss = |th: &[f64]| {
            let mut q = p.zeros_like();
            q.assign_from_flat(th).unwrap();
            let (latent, _) = embed_forward(&q, &x).unwrap();
            0.5 * latent
                .iter()
                .zip(&weights)
                .map(|(v, w)| w * v * v)
                .sum::<f64>()
        };

        let (latent, cache) = embed_forward(&p, &x).unwrap();
        let mut dlatent = latent.clone();
        for (i, v) in dlatent.iter_mut().enumerate() {
            *v *= weights[i];
        }
        let mut grad = p.zeros_like();
        embed_backward(&p, &cache, &dlatent, &mut grad);
        let analytic = grad.to_flat();

        let report = grad_check(&flat, &layout, &analytic, 4, 11, loss);
        assert!(report.max_rel_err < 1e-5, "{report}");
    }
}

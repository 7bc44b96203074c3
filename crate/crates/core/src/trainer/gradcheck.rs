//! Finite-difference verification of analytic gradients.
//!
//! Five-point central differences starting at h = 1e-5 in f64; the checker
//! probes a seeded random subset of coordinates per named array so full-model
//! checks stay affordable while every parameter array gets coverage. Two
//! numerical hazards shape the implementation:
//!
//! * Deep norm chains produce third derivatives large enough (~1e7 observed)
//!   that a plain two-point difference at this step size carries h²·f‴/6 ≈
//!   1e-3 of truncation error — far above the tolerances asserted here — so
//!   the fourth-order five-point stencil is used throughout.
//! * The loss is only piecewise smooth (ReLU, max-pool). A coordinate that
//!   sits within 2h of a kink yields an O(h) one-sided error no stencil can
//!   remove, so coordinates that fail at the design step are retried at
//!   h/10 and h/100 and the best agreement wins. A genuinely wrong analytic
//!   gradient fails at every step size; a kink crossing vanishes once h
//!   shrinks past the distance to the kink.

use ndarray::{concatenate, s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::contrastive::{
    contrastive_backward, contrastive_loss, ContrastiveBatch, PairingMode, ProjectionParams,
};
use crate::error::Result;
use crate::nn::embedder::{embed_backward, embed_forward, EmbedderConfig, EmbedderParams};
use crate::nn::Real;
use crate::rng::rng_for;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max rel err {:.3e} at `{}` ({} coords probed)",
            self.max_rel_err, self.worst_param, self.checked
        )
    }
}

/// Check `analytic` against central differences of `loss` at `params`.
///
/// `layout` names consecutive spans of the flat parameter vector; up to
/// `probes_per_array` coordinates are probed per span. Relative error is
/// |a − n| / max(|a|, |n|, floor). The floor is the smallest gradient a
/// finite difference can resolve to the 1e-5 design tolerance: the stencil's
/// loss evaluations cancel to within a few ε·|loss|, so the difference
/// quotient carries ~6ε·|loss|/h of absolute noise regardless of the true
/// gradient. Coordinates whose gradient sits below noise/1e-5 are therefore
/// compared at the noise level itself — any analytic error large enough to
/// matter still fails, while correct near-zero gradients are not punished
/// for noise they cannot avoid.
pub fn grad_check(
    params: &[f64],
    layout: &[(String, usize)],
    analytic: &[f64],
    probes_per_array: usize,
    seed: u64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> GradReport {
    let total: usize = layout.iter().map(|(_, len)| len).sum();
    assert_eq!(total, params.len(), "layout does not cover the parameter vector");
    assert_eq!(params.len(), analytic.len());

    let design_rel = 1e-5;
    let f0 = loss(params);
    let mut theta = params.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let mut offset = 0;
    for (array_idx, (name, len)) in layout.iter().enumerate() {
        let mut coords: Vec<usize> = (0..*len).collect();
        coords.shuffle(&mut rng_for(seed, "grad-probe", array_idx as u64));
        for &c in coords.iter().take(probes_per_array) {
            let i = offset + c;
            let saved = theta[i];
            let mut rel = f64::INFINITY;
            for h in [1e-5, 1e-6, 1e-7] {
                let mut eval = |delta: f64| {
                    theta[i] = saved + delta;
                    loss(&theta)
                };
                // f' ≈ (−f(+2h) + 8f(+h) − 8f(−h) + f(−2h)) / 12h.
                let numeric = (-eval(2.0 * h) + 8.0 * eval(h) - 8.0 * eval(-h)
                    + eval(-2.0 * h))
                    / (12.0 * h);
                theta[i] = saved;
                let floor = 6.0 * f64::EPSILON * f0.abs().max(1.0) / (h * design_rel);
                let scale = analytic[i].abs().max(numeric.abs()).max(floor);
                rel = rel.min((analytic[i] - numeric).abs() / scale);
                if rel < 1e-7 {
                    break; // clearly consistent; no kink in range
                }
            }
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{c}]");
            }
        }
        offset += len;
    }
    report
}

/// Convenience for layers under test: flatten `T`-typed arrays to f64.
pub fn to_f64<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.to_f64().unwrap()).collect()
}

/// Shape of the whole-model check: embedder + projection + bilinear W under
/// the contrastive loss, all in f64.
#[derive(Debug, Clone, Copy)]
pub struct FullCheckSpec {
    pub base_channels: usize,
    pub n_ssm_layers: usize,
    pub state_size: usize,
    pub f_bins: usize,
    pub t_frames: usize,
    /// Input batch rows; the first half are anchors, the second positives.
    pub batch: usize,
    pub proj_dim: usize,
    pub probes_per_array: usize,
    pub seed: u64,
}

impl Default for FullCheckSpec {
    fn default() -> Self {
        // The tiny-model reference shape: f=32, t=16, 8 channels, N=4, B=4.
        FullCheckSpec {
            base_channels: 8,
            n_ssm_layers: 6,
            state_size: 4,
            f_bins: 32,
            t_frames: 16,
            batch: 4,
            proj_dim: 8,
            probes_per_array: 3,
            seed: 0,
        }
    }
}

/// Verify every parameter array of the full model against finite
/// differences of the contrastive loss on one random batch.
pub fn full_model_check(spec: &FullCheckSpec) -> Result<GradReport> {
    assert!(spec.batch >= 4 && spec.batch % 2 == 0, "need ≥ 2 anchor/positive pairs");
    let cfg = EmbedderConfig {
        base_channels: spec.base_channels,
        n_ssm_layers: spec.n_ssm_layers,
        state_size: spec.state_size,
        ssm_enabled: true,
    };
    let embedder: EmbedderParams<f64> =
        EmbedderParams::init(&cfg, &mut rng_for(spec.seed, "gradcheck-embedder", 0))?;
    let projection: ProjectionParams<f64> = ProjectionParams::init(
        cfg.latent_dim(),
        spec.proj_dim,
        &mut rng_for(spec.seed, "gradcheck-projection", 0),
    );
    let mut input_rng = rng_for(spec.seed, "gradcheck-input", 0);
    let x = Array4::from_shape_fn((spec.batch, 3, spec.f_bins, spec.t_frames), |_| {
        input_rng.gen_range(-1.0..1.0)
    });
    let e_len = embedder.to_flat().len();
    let pairs = spec.batch / 2;

    let run = |theta: &[f64],
               e_tmpl: &EmbedderParams<f64>,
               p_tmpl: &ProjectionParams<f64>|
     -> (f64, EmbedderParams<f64>, ProjectionParams<f64>) {
        let mut e = e_tmpl.clone();
        let mut p = p_tmpl.clone();
        e.assign_from_flat(&theta[..e_len]).expect("layout fixed");
        p.assign_from_flat(&theta[e_len..]).expect("layout fixed");
        let (latents, cache) = embed_forward(&e, &x).expect("shapes fixed");
        let batch = ContrastiveBatch {
            anchors: latents.slice(s![..pairs, ..]).to_owned(),
            positives: latents.slice(s![pairs.., ..]).to_owned(),
            mode: PairingMode::Segments,
        };
        let (loss, c_cache) = contrastive_loss(&batch, &p).expect("batch ≥ 2 pairs");
        let mut e_grad = e.zeros_like();
        let mut p_grad = p.zeros_like();
        let (dya, dyp) = contrastive_backward(&batch, &p, &c_cache, &mut p_grad);
        let dlatent =
            concatenate(Axis(0), &[dya.view(), dyp.view()]).expect("equal latent widths");
        embed_backward(&e, &cache, &dlatent, &mut e_grad);
        (loss, e_grad, p_grad)
    };

    let mut theta = embedder.to_flat();
    theta.extend(projection.to_flat());
    let (_, e_grad, p_grad) = run(&theta, &embedder, &projection);
    let mut analytic = e_grad.to_flat();
    analytic.extend(p_grad.to_flat());
    let mut layout = embedder.layout();
    layout.extend(
        projection
            .layout()
            .into_iter()
            .map(|(name, len)| (format!("proj.{name}"), len)),
    );
    Ok(grad_check(
        &theta,
        &layout,
        &analytic,
        spec.probes_per_array,
        spec.seed,
        |t| run(t, &embedder, &projection).0,
    ))
}

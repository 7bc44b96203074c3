//! The contrastive pre-training loop: pairs → features → embedder →
//! projection → in-batch cross-entropy, optimized with Adam over one flat
//! parameter vector.
//!
//! Everything random is counter-based off `(seed, tag, index)`, so a run is a
//! pure function of the config: the epoch shuffle uses `(seed,
//! "epoch-shuffle", epoch)` and pair construction `(seed, "pairs", global
//! batch index)`. That is also why resuming is bit-exact — a checkpoint only
//! needs parameters, Adam moments, the seed, and the epoch counter.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, s, Axis};

use crate::audio::{load_wav, resample, Waveform};
use crate::config::RunConfig;
use crate::contrastive::{
    contrastive_backward, contrastive_loss, make_pairs_method1, make_pairs_method2,
    ContrastiveBatch, PairingMode, ProjectionParams,
};
use crate::error::{Error, Result};
use crate::features::stack_channels;
use crate::manifest::Entry;
use crate::nn::embedder::{batch_from_specs, embed_backward, embed_forward, EmbedderParams};
use crate::rng::{rng_for, sub_seed};
use crate::trainer::checkpoint::{save_checkpoint, Checkpoint};
use crate::trainer::optim::{adam_step, AdamState};

/// One row of the training trace, mirrored into the metrics CSV.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Default)]
pub struct PretrainOptions {
    /// Directory for periodic and final checkpoints (none = keep in memory).
    pub ckpt_dir: Option<PathBuf>,
    /// CSV appended one row per epoch: `epoch,loss,lr,wall_ms`.
    pub metrics_path: Option<PathBuf>,
    /// Continue from a saved state instead of initializing.
    pub resume: Option<Checkpoint>,
    /// Print one line per epoch.
    pub log: bool,
}

pub struct TrainedState {
    pub embedder: EmbedderParams<f32>,
    pub projection: ProjectionParams<f32>,
    pub trace: Vec<EpochStats>,
}

/// Load manifest entries as waveforms at the configured rate. Relative paths
/// are resolved against `base`.
pub fn load_entry_clips(entries: &[Entry], base: &Path, sample_rate: u32) -> Result<Vec<Waveform>> {
    entries
        .iter()
        .map(|e| {
            let p = Path::new(&e.path);
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            resample(&load_wav(full)?, sample_rate)
        })
        .collect()
}

fn append_metrics_row(path: &Path, stats: &EpochStats) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    if empty {
        writeln!(file, "epoch,loss,lr,wall_ms").map_err(|e| Error::io(path, e))?;
    }
    writeln!(
        file,
        "{},{},{},{}",
        stats.epoch, stats.loss, stats.lr, stats.wall_ms
    )
    .map_err(|e| Error::io(path, e))
}

/// Snapshot the full training state after `epoch` completed epochs.
pub fn state_to_checkpoint(
    cfg: &RunConfig,
    seed: u64,
    epoch: usize,
    embedder: &EmbedderParams<f32>,
    projection: &ProjectionParams<f32>,
    adam: &AdamState<f32>,
) -> Checkpoint {
    let config = serde_json::to_value(cfg).expect("RunConfig serializes");
    let mut ckpt = Checkpoint::new(epoch as u64, seed, config);
    embedder.visit(&mut |name, view| {
        ckpt.push_f32(
            format!("embedder.{name}"),
            view.shape().to_vec(),
            view.iter().copied().collect(),
        );
    });
    projection.visit(&mut |name, view| {
        ckpt.push_f32(
            format!("proj.{name}"),
            view.shape().to_vec(),
            view.iter().copied().collect(),
        );
    });
    ckpt.push_f32("adam.m", vec![adam.m.len()], adam.m.clone());
    ckpt.push_f32("adam.v", vec![adam.v.len()], adam.v.clone());
    ckpt.push_f64("adam.step", vec![1], vec![adam.step as f64]);
    ckpt
}

/// Restore parameters under `prefix` ("embedder"/"proj") by visiting in
/// layout order.
fn restore_component(
    ckpt: &Checkpoint,
    prefix: &str,
    visit_mut: &mut dyn FnMut(&mut dyn FnMut(String, ndarray::ArrayViewMutD<'_, f32>)),
) -> Result<()> {
    let mut failure: Option<Error> = None;
    visit_mut(&mut |name, mut view| {
        if failure.is_some() {
            return;
        }
        let full = format!("{prefix}.{name}");
        match ckpt.f32_values(&full) {
            Ok(values) if values.len() == view.len() => {
                for (dst, src) in view.iter_mut().zip(values) {
                    *dst = *src;
                }
            }
            Ok(values) => {
                failure = Some(Error::CheckpointFormat(format!(
                    "array `{full}` has {} values, model expects {}",
                    values.len(),
                    view.len()
                )));
            }
            Err(e) => failure = Some(e),
        }
    });
    failure.map_or(Ok(()), Err)
}

/// Rebuild embedder + projection from a checkpoint, sized by `cfg`.
pub fn state_from_checkpoint(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
) -> Result<(EmbedderParams<f32>, ProjectionParams<f32>)> {
    let mut embedder = EmbedderParams::init(
        &cfg.embedder_config(),
        &mut rng_for(ckpt.seed, "init-embedder", 0),
    )?;
    let mut projection = ProjectionParams::init(
        cfg.embedder_config().latent_dim(),
        cfg.contrastive.proj_dim,
        &mut rng_for(ckpt.seed, "init-projection", 0),
    );
    restore_component(ckpt, "embedder", &mut |f| embedder.visit_mut(f))?;
    restore_component(ckpt, "proj", &mut |f| projection.visit_mut(f))?;
    Ok((embedder, projection))
}

/// Run contrastive pre-training over `clips` (full recordings; segments are
/// cropped per batch). Returns the trained state and per-epoch trace.
pub fn pretrain(cfg: &RunConfig, clips: &[Waveform], opts: PretrainOptions) -> Result<TrainedState> {
    if clips.len() < 2 {
        return Err(Error::EmptySet(format!(
            "pre-training needs at least 2 clips, got {}",
            clips.len()
        )));
    }
    let fcfg = cfg.feature_config();
    let ecfg = cfg.embedder_config();
    let seg_len = cfg.data.clip_len;
    let batch_size = cfg.contrastive.batch;
    let lr = cfg.contrastive.lr;

    // Resume keeps the original run's seed so the remaining epochs replay the
    // exact shuffles and pairings of the uninterrupted run.
    let seed = opts.resume.as_ref().map_or(cfg.seed, |c| c.seed);
    let mut embedder: EmbedderParams<f32> =
        EmbedderParams::init(&ecfg, &mut rng_for(seed, "init-embedder", 0))?;
    let mut projection: ProjectionParams<f32> = ProjectionParams::init(
        ecfg.latent_dim(),
        cfg.contrastive.proj_dim,
        &mut rng_for(seed, "init-projection", 0),
    );
    let n_params = embedder.layout().iter().map(|(_, n)| n).sum::<usize>()
        + projection.layout().iter().map(|(_, n)| n).sum::<usize>();
    let e_len = embedder.to_flat().len();
    let mut adam = AdamState::<f32>::new(n_params);

    let mut start_epoch = 0usize;
    if let Some(ckpt) = &opts.resume {
        restore_component(ckpt, "embedder", &mut |f| embedder.visit_mut(f))?;
        restore_component(ckpt, "proj", &mut |f| projection.visit_mut(f))?;
        let m = ckpt.f32_values("adam.m")?;
        let v = ckpt.f32_values("adam.v")?;
        if m.len() != n_params || v.len() != n_params {
            return Err(Error::CheckpointFormat(format!(
                "optimizer state has {} values, model has {n_params} parameters",
                m.len()
            )));
        }
        adam.m.copy_from_slice(m);
        adam.v.copy_from_slice(v);
        adam.step = ckpt.f64_scalar("adam.step")? as u64;
        start_epoch = ckpt.epoch as usize;
    }

    let n_batches = clips.len().div_ceil(batch_size);
    let mut trace = Vec::new();
    for epoch in start_epoch..cfg.contrastive.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut shuffle_rng = rng_for(seed, "epoch-shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // a trailing single clip has no in-batch negatives
            }
            let pair_seed = sub_seed(seed, "pairs", (epoch * n_batches + batch_idx) as u64);
            let batch_clips: Vec<Waveform> = chunk.iter().map(|&i| clips[i].clone()).collect();
            let pairs = match cfg.contrastive.method {
                PairingMode::Segments => make_pairs_method1(&batch_clips, seg_len, pair_seed),
                PairingMode::Augmentations => make_pairs_method2(
                    &batch_clips,
                    seg_len,
                    &cfg.augment_spec(pair_seed),
                    pair_seed,
                ),
            };

            let mut specs = Vec::with_capacity(2 * pairs.len());
            for (a, _) in &pairs {
                specs.push(stack_channels(a, &fcfg)?);
            }
            for (_, p) in &pairs {
                specs.push(stack_channels(p, &fcfg)?);
            }
            let spec_refs: Vec<&_> = specs.iter().collect();
            let x = batch_from_specs::<f32>(&spec_refs)?;

            let (latents, cache) = embed_forward(&embedder, &x)?;
            let b = pairs.len();
            let cbatch = ContrastiveBatch {
                anchors: latents.slice(s![..b, ..]).to_owned(),
                positives: latents.slice(s![b.., ..]).to_owned(),
                mode: cfg.contrastive.method,
            };
            let (loss, c_cache) = contrastive_loss(&cbatch, &projection)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {batch_idx}"
                )));
            }

            let mut e_grad = embedder.zeros_like();
            let mut p_grad = projection.zeros_like();
            let (dya, dyp) = contrastive_backward(&cbatch, &projection, &c_cache, &mut p_grad);
            let dlatent = concatenate(Axis(0), &[dya.view(), dyp.view()])
                .expect("anchor and positive gradients have equal width");
            embed_backward(&embedder, &cache, &dlatent, &mut e_grad);

            let mut theta = embedder.to_flat();
            theta.extend(projection.to_flat());
            let mut grad = e_grad.to_flat();
            grad.extend(p_grad.to_flat());
            adam_step(&mut theta, &grad, &mut adam, lr as f32)?;
            embedder.assign_from_flat(&theta[..e_len])?;
            projection.assign_from_flat(&theta[e_len..])?;

            loss_sum += f64::from(loss);
            loss_count += 1;
        }

        let stats = EpochStats {
            epoch,
            loss: loss_sum / loss_count.max(1) as f64,
            lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        if opts.log {
            println!(
                "pretrain epoch {:>4}/{}: loss {:.6} ({} ms)",
                epoch + 1,
                cfg.contrastive.epochs,
                stats.loss,
                stats.wall_ms
            );
        }
        if let Some(path) = &opts.metrics_path {
            append_metrics_row(path, &stats)?;
        }
        trace.push(stats);

        if let Some(dir) = &opts.ckpt_dir {
            let every = cfg.contrastive.ckpt_every;
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.contrastive.epochs {
                let ckpt = state_to_checkpoint(cfg, seed, epoch + 1, &embedder, &projection, &adam);
                save_checkpoint(&dir.join(format!("epoch{:04}.ckpt", epoch + 1)), &ckpt)?;
            }
        }
    }

    if let Some(dir) = &opts.ckpt_dir {
        let ckpt = state_to_checkpoint(
            cfg,
            seed,
            cfg.contrastive.epochs,
            &embedder,
            &projection,
            &adam,
        );
        save_checkpoint(&dir.join("final.ckpt"), &ckpt)?;
    }

    Ok(TrainedState { embedder, projection, trace })
}

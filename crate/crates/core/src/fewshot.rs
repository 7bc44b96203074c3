//! Few-shot episodes: deterministic support/query features, the two-layer
//! classification head, SGD fine-tuning (full network by default, head-only
//! when the embedder is frozen), argmax evaluation with confusion counts, and
//! the per-group protocol report.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::audio::{crop_or_pad, Waveform};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::stack_channels;
use crate::manifest::{Entry, GroupSplit};
use crate::nn::dense::Dense;
use crate::nn::embedder::{batch_from_specs, embed_backward, embed_forward, EmbedderParams};
use crate::nn::{relu, relu_grad, Real};
use crate::rng::rng_for;
use crate::trainer::loops::{pretrain, PretrainOptions};
use crate::trainer::optim::sgd_step;

/// One group's task: `shots` labelled clips per class plus the labelled
/// queries. Labels are indices into `classes`.
pub struct Episode {
    pub group: String,
    pub classes: Vec<String>,
    pub support: Vec<(Waveform, usize)>,
    pub query: Vec<(Waveform, usize)>,
}

/// Materialize a split as loaded waveforms. The first `n_way` classes (sorted
/// order) are used; each must contribute exactly `shots` support clips.
pub fn build_episode(
    split: &GroupSplit,
    n_way: usize,
    shots: usize,
    load: &mut dyn FnMut(&Entry) -> Result<Waveform>,
) -> Result<Episode> {
    if split.classes.len() < n_way {
        return Err(Error::Manifest(format!(
            "group `{}` has {} classes, episode needs {n_way}",
            split.group,
            split.classes.len()
        )));
    }
    let classes: Vec<String> = split.classes[..n_way].to_vec();
    let class_index = |label: &str| classes.iter().position(|c| c == label);

    let mut support = Vec::new();
    let mut counts = vec![0usize; n_way];
    for e in &split.support {
        if let Some(idx) = class_index(&e.label) {
            counts[idx] += 1;
            support.push((load(e)?, idx));
        }
    }
    for (idx, &count) in counts.iter().enumerate() {
        if count != shots {
            return Err(Error::InsufficientData {
                class: classes[idx].clone(),
                have: count,
                need: shots,
            });
        }
    }

    let mut query = Vec::new();
    for e in &split.query {
        if let Some(idx) = class_index(&e.label) {
            query.push((load(e)?, idx));
        }
    }
    Ok(Episode {
        group: split.group.clone(),
        classes,
        support,
        query,
    })
}

/// Episode waveforms turned into fixed-size feature batches: deterministic
/// center crop/pad to `clip_len`, then the stacked spectrogram.
pub struct EpisodeFeatures {
    pub group: String,
    pub classes: Vec<String>,
    pub support_x: Array4<f32>,
    pub support_y: Vec<usize>,
    pub query_x: Array4<f32>,
    pub query_y: Vec<usize>,
}

pub fn episode_features(ep: &Episode, cfg: &RunConfig) -> Result<EpisodeFeatures> {
    let fcfg = cfg.feature_config();
    let clip_len = cfg.data.clip_len;
    let featurize = |set: &[(Waveform, usize)]| -> Result<(Array4<f32>, Vec<usize>)> {
        let specs = set
            .iter()
            .map(|(w, _)| stack_channels(&crop_or_pad(w, clip_len), &fcfg))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&_> = specs.iter().collect();
        Ok((batch_from_specs(&refs)?, set.iter().map(|(_, y)| *y).collect()))
    };
    let (support_x, support_y) = featurize(&ep.support)?;
    let (query_x, query_y) = if ep.query.is_empty() {
        (Array4::zeros((0, 0, 0, 0)), Vec::new())
    } else {
        featurize(&ep.query)?
    };
    Ok(EpisodeFeatures {
        group: ep.group.clone(),
        classes: ep.classes.clone(),
        support_x,
        support_y,
        query_x,
        query_y,
    })
}

/// Classification head: latent → hidden (ReLU) → n_way logits.
#[derive(Debug, Clone)]
pub struct HeadParams<T> {
    pub l1: Dense<T>,
    pub l2: Dense<T>,
}

pub struct HeadCache<T> {
    h1: Array2<T>,
    a1: Array2<T>,
}

impl<T: Real> HeadParams<T> {
    pub fn init(latent_dim: usize, hidden: usize, n_way: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            l1: Dense::kaiming(latent_dim, hidden, rng),
            l2: Dense::kaiming(hidden, n_way, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        HeadParams {
            l1: Dense::zeros(self.l1.w.ncols(), self.l1.w.nrows()),
            l2: Dense::zeros(self.l2.w.ncols(), self.l2.w.nrows()),
        }
    }

    pub fn n_way(&self) -> usize {
        self.l2.w.nrows()
    }

    pub fn forward(&self, y: &Array2<T>) -> (Array2<T>, HeadCache<T>) {
        let h1 = self.l1.forward(y);
        let a1 = h1.mapv(relu);
        let logits = self.l2.forward(&a1);
        (logits, HeadCache { h1, a1 })
    }

    /// Returns dY and accumulates head gradients.
    pub fn backward(
        &self,
        y: &Array2<T>,
        dlogits: &Array2<T>,
        cache: &HeadCache<T>,
        grad: &mut HeadParams<T>,
    ) -> Array2<T> {
        let mut da1 = self.l2.backward(&cache.a1, dlogits, &mut grad.l2);
        ndarray::Zip::from(&mut da1)
            .and(&cache.h1)
            .for_each(|d, &h| *d *= relu_grad(h));
        self.l1.backward(y, &da1, &mut grad.l1)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, ArrayViewD<'a, T>)) {
        f("l1.weight".into(), self.l1.w.view().into_dyn());
        f("l1.bias".into(), self.l1.b.view().into_dyn());
        f("l2.weight".into(), self.l2.w.view().into_dyn());
        f("l2.bias".into(), self.l2.b.view().into_dyn());
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        f("l1.weight".into(), self.l1.w.view_mut().into_dyn());
        f("l1.bias".into(), self.l1.b.view_mut().into_dyn());
        f("l2.weight".into(), self.l2.w.view_mut().into_dyn());
        f("l2.bias".into(), self.l2.b.view_mut().into_dyn());
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit(&mut |_, view| out.extend(view.iter().copied()));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[T]) -> Result<()> {
        let mut expected = 0;
        self.visit(&mut |_, view| expected += view.len());
        if flat.len() != expected {
            return Err(Error::Shape {
                stage: "head assign_from_flat".into(),
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

/// Mean softmax cross-entropy. Returns the loss and dlogits (already divided
/// by the batch size).
pub fn softmax_ce(logits: &Array2<f32>, labels: &[usize]) -> Result<(f64, Array2<f32>)> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape {
            stage: "cross-entropy".into(),
            detail: format!("{b} logit rows but {} labels", labels.len()),
        });
    }
    if b == 0 {
        return Err(Error::EmptySet("cross-entropy over an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Shape {
            stage: "cross-entropy".into(),
            detail: format!("label {bad} out of range for {k} classes"),
        });
    }
    let mut loss = 0.0f64;
    let mut dlogits = Array2::zeros((b, k));
    let scale = 1.0 / b as f32;
    for (i, (row, &y)) in logits.outer_iter().zip(labels).enumerate() {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
        let denom: f32 = exps.iter().sum();
        loss += f64::from(m + denom.ln() - row[y]);
        for (j, &e) in exps.iter().enumerate() {
            dlogits[(i, j)] = (e / denom - if j == y { 1.0 } else { 0.0 }) * scale;
        }
    }
    Ok((loss / b as f64, dlogits))
}

pub struct FinetuneResult {
    pub embedder: EmbedderParams<f32>,
    pub head: HeadParams<f32>,
    pub loss_trace: Vec<f64>,
}

/// Full-batch SGD on the support set. With `freeze_embedder` the latents are
/// computed once and only the head trains; otherwise every parameter updates.
pub fn finetune(
    embedder: &EmbedderParams<f32>,
    head: &HeadParams<f32>,
    feats: &EpisodeFeatures,
    cfg: &RunConfig,
) -> Result<FinetuneResult> {
    if feats.support_y.is_empty() {
        return Err(Error::EmptySet("fine-tuning needs a non-empty support set".into()));
    }
    let lr = cfg.fewshot.ft_lr as f32;
    let epochs = cfg.fewshot.ft_epochs;
    let mut embedder = embedder.clone();
    let mut head = head.clone();
    let mut trace = Vec::with_capacity(epochs);

    if cfg.fewshot.freeze_embedder {
        let (latents, _) = embed_forward(&embedder, &feats.support_x)?;
        for _ in 0..epochs {
            let (logits, cache) = head.forward(&latents);
            let (loss, dlogits) = softmax_ce(&logits, &feats.support_y)?;
            let mut h_grad = head.zeros_like();
            head.backward(&latents, &dlogits, &cache, &mut h_grad);
            let mut theta = head.to_flat();
            sgd_step(&mut theta, &h_grad.to_flat(), lr)?;
            head.assign_from_flat(&theta)?;
            trace.push(loss);
        }
    } else {
        let e_len = embedder.to_flat().len();
        for _ in 0..epochs {
            let (latents, e_cache) = embed_forward(&embedder, &feats.support_x)?;
            let (logits, h_cache) = head.forward(&latents);
            let (loss, dlogits) = softmax_ce(&logits, &feats.support_y)?;
            let mut e_grad = embedder.zeros_like();
            let mut h_grad = head.zeros_like();
            let dlatent = head.backward(&latents, &dlogits, &h_cache, &mut h_grad);
            embed_backward(&embedder, &e_cache, &dlatent, &mut e_grad);
            let mut theta = embedder.to_flat();
            theta.extend(head.to_flat());
            let mut grad = e_grad.to_flat();
            grad.extend(h_grad.to_flat());
            sgd_step(&mut theta, &grad, lr)?;
            embedder.assign_from_flat(&theta[..e_len])?;
            head.assign_from_flat(&theta[e_len..])?;
            trace.push(loss);
        }
    }
    Ok(FinetuneResult { embedder, head, loss_trace: trace })
}

pub struct EvalReport {
    pub accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Array2<usize>,
}

pub fn evaluate(
    embedder: &EmbedderParams<f32>,
    head: &HeadParams<f32>,
    feats: &EpisodeFeatures,
) -> Result<EvalReport> {
    if feats.query_y.is_empty() {
        return Err(Error::EmptySet(format!(
            "group `{}` has no query clips to evaluate",
            feats.group
        )));
    }
    let n_way = head.n_way();
    let (latents, _) = embed_forward(embedder, &feats.query_x)?;
    let (logits, _) = head.forward(&latents);
    let mut confusion = Array2::zeros((n_way, n_way));
    let mut correct = 0usize;
    for (row, &y) in logits.outer_iter().zip(&feats.query_y) {
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(j, _)| j)
            .expect("n_way ≥ 1");
        confusion[(y, pred)] += 1;
        if pred == y {
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / feats.query_y.len() as f64,
        confusion,
    })
}

/// Where each group's embedder comes from.
pub enum EmbedderSource<'a> {
    /// One shared pre-trained embedder, cloned per group.
    Pretrained(&'a EmbedderParams<f32>),
    /// Run contrastive pre-training on each group's own unlabelled clips.
    PretrainPerGroup,
    /// Fresh random weights — the no-pretraining baseline.
    RandomInit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRow {
    pub group: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolReport {
    pub rows: Vec<ProtocolRow>,
    pub average: f64,
}

impl ProtocolReport {
    pub fn from_rows(rows: Vec<ProtocolRow>) -> Self {
        let average = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len().max(1) as f64;
        ProtocolReport { rows, average }
    }

    /// CSV schema: `group,accuracy` rows, then an `AA` row with the average.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("group,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.group, r.accuracy));
        }
        out.push_str(&format!("AA,{}\n", self.average));
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<ProtocolReport> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        let mut average = None;
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "group,accuracy" {
                    return Err(Error::Manifest(format!(
                        "{}: unexpected report header `{line}`",
                        path.display()
                    )));
                }
                continue;
            }
            let (group, acc) = line.split_once(',').ok_or_else(|| {
                Error::Manifest(format!("{}: malformed report row `{line}`", path.display()))
            })?;
            let acc: f64 = acc.parse().map_err(|_| {
                Error::Manifest(format!("{}: bad accuracy `{acc}`", path.display()))
            })?;
            if group == "AA" {
                average = Some(acc);
            } else {
                rows.push(ProtocolRow { group: group.to_string(), accuracy: acc });
            }
        }
        let average = average
            .ok_or_else(|| Error::Manifest(format!("{}: missing AA row", path.display())))?;
        Ok(ProtocolReport { rows, average })
    }

    /// Human-readable table for standard output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self
            .rows
            .iter()
            .map(|r| r.group.len())
            .chain([5])
            .max()
            .unwrap_or(5);
        for r in &self.rows {
            out.push_str(&format!("{:width$}  {:.4}\n", r.group, r.accuracy));
        }
        out.push_str(&format!("{:width$}  {:.4}\n", "AA", self.average));
        out
    }
}

/// The full evaluation protocol: per group, obtain an embedder (per
/// `source`), fine-tune a fresh head on the support set, and score the
/// queries. The report mirrors the per-group + average-accuracy table layout.
pub fn run_protocol(
    splits: &[GroupSplit],
    source: EmbedderSource<'_>,
    cfg: &RunConfig,
    load: &mut dyn FnMut(&Entry) -> Result<Waveform>,
) -> Result<ProtocolReport> {
    if splits.is_empty() {
        return Err(Error::EmptySet("protocol needs at least one group".into()));
    }
    let ecfg = cfg.embedder_config();
    let mut rows = Vec::with_capacity(splits.len());
    for (gi, split) in splits.iter().enumerate() {
        let episode = build_episode(split, cfg.fewshot.n_way, cfg.fewshot.shots, load)?;
        let feats = episode_features(&episode, cfg)?;
        let embedder = match &source {
            EmbedderSource::Pretrained(p) => (*p).clone(),
            EmbedderSource::RandomInit => {
                EmbedderParams::init(&ecfg, &mut rng_for(cfg.seed, "init-embedder", 0))?
            }
            EmbedderSource::PretrainPerGroup => {
                let clips = split
                    .pretrain
                    .iter()
                    .map(&mut *load)
                    .collect::<Result<Vec<_>>>()?;
                pretrain(cfg, &clips, PretrainOptions::default())?.embedder
            }
        };
        let head = HeadParams::init(
            ecfg.latent_dim(),
            cfg.fewshot.head_hidden,
            cfg.fewshot.n_way,
            &mut rng_for(cfg.seed, "init-head", gi as u64),
        );
        let tuned = finetune(&embedder, &head, &feats, cfg)?;
        let eval = evaluate(&tuned.embedder, &tuned.head, &feats)?;
        rows.push(ProtocolRow {
            group: split.group.clone(),
            accuracy: eval.accuracy,
        });
    }
    Ok(ProtocolReport::from_rows(rows))
}

/// Append one report row to a CSV (`group,accuracy`), creating it with a
/// header when missing. Used by single-group runs.
pub fn append_report_row(path: &Path, row: &ProtocolRow) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    if empty {
        writeln!(file, "group,accuracy").map_err(|e| Error::io(path, e))?;
    }
    writeln!(file, "{},{}", row.group, row.accuracy).map_err(|e| Error::io(path, e))
}

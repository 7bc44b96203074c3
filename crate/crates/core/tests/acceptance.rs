//! End-to-end acceptance gate. Each test prints one `CRITERION n: PASS/FAIL`
//! line (visible with `--nocapture`) and asserts the same condition, so the
//! per-test ok/FAILED report doubles as the criterion checklist.
//!
//! Criteria 6, 7 and 9 share one desk-scale experiment (synthetic corpus,
//! five seeded pre-train → fine-tune → evaluate rounds per arm) built lazily
//! by whichever of them runs first.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array2, Array4};
use num_complex::Complex;
use rand::Rng;
use tempfile::TempDir;

use cricket::config::RunConfig;
use cricket::contrastive::{contrastive_loss, ContrastiveBatch, PairingMode, ProjectionParams};
use cricket::fewshot::{
    build_episode, episode_features, evaluate, EmbedderSource, HeadParams, run_protocol,
};
use cricket::manifest::{build_groups, Entry, Manifest, Role};
use cricket::nn::dense::Dense;
use cricket::nn::embedder::{embed_forward, EmbedderParams};
use cricket::nn::ssm::{ssm_kernel_single, SsmLayer};
use cricket::rng::rng_for;
use cricket::synth::make_synth;
use cricket::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use cricket::trainer::gradcheck::{full_model_check, FullCheckSpec};
use cricket::trainer::loops::{load_entry_clips, pretrain, PretrainOptions};

fn verdict(n: usize, ok: bool, detail: &str) {
    println!("CRITERION {n}: {} — {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n}: {detail}");
}

fn workspace_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn criterion_1_kernel_oracle() {
    let k = ssm_kernel_single(
        Complex::new(-1.0, 0.0),
        std::f64::consts::LN_2,
        Complex::new(1.0, 0.0),
        Complex::new(1.0, 0.0),
        4,
        1.0,
    );
    let expect = [0.5, 0.25, 0.125, 0.0625];
    let max_err = k
        .iter()
        .zip(expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    verdict(
        1,
        max_err <= 1e-12,
        &format!("ZOH kernel vs [0.5, 0.25, 0.125, 0.0625]: max abs err {max_err:.2e} (tol 1e-12)"),
    );
}

#[test]
fn criterion_2_duality() {
    let t_len = 64;
    let start = Instant::now();
    let mut worst = 0.0f32;
    for i in 0..100 {
        let layer = SsmLayer::<f32>::init(2, 64, &mut rng_for(2, "duality-layer", i));
        let mut rng = rng_for(2, "duality-input", i);
        let u = Array4::from_shape_fn((1, 2, t_len, 1), |_| rng.gen_range(-1.0f32..1.0))
            .into_shape_with_order((1, 2, t_len))
            .unwrap();

        let by_scan = layer.recurrent_apply(&u);
        let kernels = layer.kernels(t_len);
        for c in 0..2 {
            for t in 0..t_len {
                let mut acc = layer.d_skip[c] * u[(0, c, t)];
                for l in 0..=t {
                    acc += kernels[(c, l)] * u[(0, c, t - l)];
                }
                worst = worst.max((acc - by_scan[(0, c, t)]).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        worst < 1e-4 && secs < 10.0,
        &format!(
            "convolutional vs recurrent over 100 configs (t=64, N=64): max abs diff {worst:.3e} (tol 1e-4) in {secs:.2} s (budget 10 s)"
        ),
    );
}

#[test]
fn criterion_3_gradient_suite() {
    let start = Instant::now();
    let spec = FullCheckSpec {
        base_channels: 8,
        n_ssm_layers: 6,
        state_size: 4,
        f_bins: 32,
        t_frames: 16,
        batch: 4,
        proj_dim: 8,
        probes_per_array: 3,
        seed: 0,
    };
    let report = full_model_check(&spec).expect("gradient check runs");
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        report.max_rel_err < 1e-5 && secs < 60.0,
        &format!(
            "analytic vs numeric on the full tiny model: {report} (tol 1e-5) in {secs:.1} s (budget 60 s)"
        ),
    );
}

/// Projection head that maps a latent to itself (identity layers, ReLU is a
/// no-op on the one-hot inputs used below), so W alone dictates S.
fn passthrough_head(dim: usize, w: Array2<f64>) -> ProjectionParams<f64> {
    ProjectionParams {
        l1: Dense { w: Array2::eye(dim), b: Array1::zeros(dim) },
        l2: Dense { w: Array2::eye(dim), b: Array1::zeros(dim) },
        w,
    }
}

#[test]
fn criterion_4_loss_closed_forms() {
    // W = 0 makes every similarity equal; the softmax is uniform over B=8.
    let batch = ContrastiveBatch {
        anchors: Array2::<f64>::eye(8),
        positives: Array2::<f64>::eye(8),
        mode: PairingMode::Segments,
    };
    let (uniform, _) =
        contrastive_loss(&batch, &passthrough_head(8, Array2::zeros((8, 8)))).unwrap();
    let err_uniform = (uniform - 8.0f64.ln()).abs();

    // One-hot pairs with W = I give S = I: per-row loss −ln(e/(e+1)) = ln(1+e⁻¹).
    let batch2 = ContrastiveBatch {
        anchors: Array2::<f64>::eye(2),
        positives: Array2::<f64>::eye(2),
        mode: PairingMode::Segments,
    };
    let (hand, _) = contrastive_loss(&batch2, &passthrough_head(2, Array2::eye(2))).unwrap();
    let err_hand = (hand - (1.0 + (-1.0f64).exp()).ln()).abs();

    verdict(
        4,
        err_uniform <= 1e-10 && err_hand <= 1e-10,
        &format!(
            "uniform B=8 loss vs ln 8: err {err_uniform:.2e}; B=2 identity vs ln(1+e⁻¹): err {err_hand:.2e} (tol 1e-10)"
        ),
    );
}

#[test]
fn criterion_5_shape_law() {
    let cfg = RunConfig::default(); // full-scale widths: 256 bins in, 512 channels out
    let ecfg = cfg.embedder_config();
    let params =
        EmbedderParams::<f32>::init(&ecfg, &mut rng_for(5, "shape-law-params", 0)).unwrap();

    let mut ok = true;
    let mut lines = Vec::new();
    for t in [1usize, 7, 237] {
        let mut rng = rng_for(5, "shape-law-input", t as u64);
        let x = Array4::from_shape_fn((1, 3, 256, t), |_| rng.gen_range(-1.0f32..1.0));
        let (latent, cache) = embed_forward(&params, &x).unwrap();
        let seq = cache.sequence_dims();
        ok &= seq == (1, 512, t) && latent.dim() == (1, 512);
        lines.push(format!("t={t}: (3,256,{t})→({},{})→pooled {}", seq.1, seq.2, latent.dim().1));
    }

    // The SSM layers themselves never change their input shape.
    let mut seq = Array4::from_shape_fn((1, 512, 237, 1), |_| 0.01f32)
        .into_shape_with_order((1, 512, 237))
        .unwrap();
    for i in 0..6 {
        let layer = SsmLayer::<f32>::init(512, 64, &mut rng_for(5, "shape-law-ssm", i));
        let (out, _) = layer.forward(&seq);
        ok &= out.dim() == (1, 512, 237);
        seq = out;
    }

    verdict(5, ok, &format!("{}; 6 SSM layers preserve (1,512,237)", lines.join("; ")));
}

/// Shared desk-scale experiment: one synthetic corpus, then per seed 0..4 a
/// full pre-train → fine-tune → evaluate round for each arm.
struct DeskLab {
    _corpus: TempDir,
    cfg: RunConfig,
    base: PathBuf,
    manifest: Manifest,
    acc_pretrained: Vec<f64>,
    acc_random: Vec<f64>,
    acc_ssm_off: Vec<f64>,
    experiment_secs: f64,
}

const DESK_SEEDS: u64 = 5;

fn desk_protocol(lab_cfg: &RunConfig, manifest: &Manifest, base: &Path, seed: u64, source_is_pretrain: bool, ssm_enabled: bool) -> f64 {
    let mut cfg = lab_cfg.clone();
    cfg.seed = seed;
    cfg.model.ssm_enabled = ssm_enabled;
    let splits = build_groups(manifest, cfg.fewshot.n_way, cfg.fewshot.shots, cfg.seed)
        .expect("groups resolve");
    let mut load = |e: &Entry| {
        load_entry_clips(std::slice::from_ref(e), base, cfg.data.sample_rate)
            .map(|mut v| v.remove(0))
    };
    let source = if source_is_pretrain {
        EmbedderSource::PretrainPerGroup
    } else {
        EmbedderSource::RandomInit
    };
    run_protocol(&splits, source, &cfg, &mut load)
        .expect("protocol runs")
        .average
}

fn desk_lab() -> &'static DeskLab {
    static LAB: OnceLock<DeskLab> = OnceLock::new();
    LAB.get_or_init(|| {
        let corpus = TempDir::new().expect("tempdir");
        let cfg = RunConfig::load(
            Some(&workspace_config("desk.toml")),
            &[format!(
                "data.manifest={}",
                corpus.path().join("manifest.csv").display()
            )],
        )
        .expect("desk config loads");

        let start = Instant::now();
        let manifest = make_synth(
            corpus.path(),
            5,
            40,
            cfg.data.sample_rate,
            2 * cfg.data.clip_len,
            cfg.seed,
        )
        .expect("synthesis");
        let base = corpus.path().to_path_buf();

        let mut acc_pretrained = Vec::new();
        let mut acc_random = Vec::new();
        for seed in 0..DESK_SEEDS {
            acc_pretrained.push(desk_protocol(&cfg, &manifest, &base, seed, true, true));
            acc_random.push(desk_protocol(&cfg, &manifest, &base, seed, false, true));
        }
        let experiment_secs = start.elapsed().as_secs_f64();

        let acc_ssm_off: Vec<f64> = (0..DESK_SEEDS)
            .map(|seed| desk_protocol(&cfg, &manifest, &base, seed, true, false))
            .collect();

        DeskLab {
            _corpus: corpus,
            cfg,
            base,
            manifest,
            acc_pretrained,
            acc_random,
            acc_ssm_off,
            experiment_secs,
        }
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_6_desk_scale_experiment() {
    let lab = desk_lab();
    let pretrained = mean(&lab.acc_pretrained);
    let random = mean(&lab.acc_random);
    let gap = pretrained - random;
    let minutes = lab.experiment_secs / 60.0;
    verdict(
        6,
        pretrained >= 0.80 && gap >= 0.15 && minutes < 20.0,
        &format!(
            "5-seed mean accuracy {pretrained:.3} (need ≥ 0.80), random-init baseline {random:.3}, gap {gap:.3} (need ≥ 0.15), {minutes:.1} min (budget 20)"
        ),
    );
}

#[test]
fn criterion_7_ablation_ordering() {
    let lab = desk_lab();
    let with_ssm = mean(&lab.acc_pretrained);
    let without = mean(&lab.acc_ssm_off);

    // The shipped full-scale recipe must encode the published protocol.
    let recipe = RunConfig::load(Some(&workspace_config("esc50_full.toml")), &[])
        .expect("full-scale recipe loads");
    let recipe_ok = recipe.data.sample_rate == 20_000
        && recipe.data.clip_len == 30_225
        && recipe.contrastive.lr == 1e-4
        && recipe.contrastive.epochs == 500
        && recipe.fewshot.ft_lr == 0.006
        && recipe.fewshot.ft_epochs == 50
        && recipe.model.base_channels == 64
        && recipe.model.state_size == 64;

    // 50 classes at 5-way resolve into ten groups under that recipe.
    let entries: Vec<Entry> = (0..50)
        .flat_map(|c| {
            (0..6).map(move |k| Entry {
                path: format!("clips/c{c:02}_{k}.wav"),
                label: format!("class{c:02}"),
                group: String::new(),
                role: Role::Auto,
            })
        })
        .collect();
    let fifty = Manifest::from_entries(entries).unwrap();
    let groups = build_groups(&fifty, recipe.fewshot.n_way, recipe.fewshot.shots, recipe.seed)
        .unwrap()
        .len();

    verdict(
        7,
        with_ssm >= without && recipe_ok && groups == 10,
        &format!(
            "5-seed mean accuracy with SSM {with_ssm:.3} vs without {without:.3}; full-scale recipe shipped (50 classes → {groups} groups)"
        ),
    );
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let dir = TempDir::new().expect("tempdir");
    let corpus = make_synth(&dir.path().join("clips"), 2, 3, 4000, 1024, 7).expect("synthesis");
    let overrides = [
        "data.sample_rate=4000",
        "data.clip_len=512",
        "features.n_fft=62",
        "features.hop=64",
        "features.n_mels=32",
        "model.N=4",
        "model.ssm_layers=1",
        "model.base_channels=2",
        "contrastive.batch=4",
        "contrastive.epochs=3",
        "contrastive.ckpt_every=1",
        "contrastive.proj_dim=8",
        "seed=5",
    ]
    .map(String::from);
    let cfg = RunConfig::load(None, &overrides).unwrap();
    let clips = load_entry_clips(&corpus.entries, &dir.path().join("clips"), 4000).unwrap();

    let run = |out: &Path, resume_from: Option<&Path>| {
        let opts = PretrainOptions {
            ckpt_dir: Some(out.to_path_buf()),
            resume: resume_from.map(|p| load_checkpoint(p).unwrap()),
            ..PretrainOptions::default()
        };
        std::fs::create_dir_all(out).unwrap();
        pretrain(&cfg, &clips, opts).unwrap();
        std::fs::read(out.join("final.ckpt")).unwrap()
    };

    let first = run(&dir.path().join("a"), None);
    let second = run(&dir.path().join("b"), None);
    let rerun_identical = first == second;

    let reloaded = load_checkpoint(&dir.path().join("a/final.ckpt")).unwrap();
    save_checkpoint(&dir.path().join("roundtrip.ckpt"), &reloaded).unwrap();
    let roundtrip_identical = std::fs::read(dir.path().join("roundtrip.ckpt")).unwrap() == first;

    // Resume from the end-of-epoch-2 checkpoint and finish the third epoch.
    let resumed = run(
        &dir.path().join("c"),
        Some(&dir.path().join("a/epoch0002.ckpt")),
    );
    let resume_identical = resumed == first;

    verdict(
        8,
        rerun_identical && roundtrip_identical && resume_identical,
        &format!(
            "fixed-seed rerun bit-identical: {rerun_identical}; save→load round-trip bit-exact: {roundtrip_identical}; resumed run equals uninterrupted: {resume_identical}"
        ),
    );
}

#[test]
fn criterion_9_chance_level_sanity() {
    let lab = desk_lab();
    let cfg = &lab.cfg;
    let splits = build_groups(&lab.manifest, cfg.fewshot.n_way, cfg.fewshot.shots, cfg.seed)
        .expect("groups resolve");
    let mut load = |e: &Entry| {
        load_entry_clips(std::slice::from_ref(e), &lab.base, cfg.data.sample_rate)
            .map(|mut v| v.remove(0))
    };
    let episode =
        build_episode(&splits[0], cfg.fewshot.n_way, cfg.fewshot.shots, &mut load).unwrap();
    let feats = episode_features(&episode, cfg).unwrap();

    let ecfg = cfg.embedder_config();
    let embedder =
        EmbedderParams::<f32>::init(&ecfg, &mut rng_for(cfg.seed, "init-embedder", 0)).unwrap();
    let head = HeadParams::init(
        ecfg.latent_dim(),
        cfg.fewshot.head_hidden,
        cfg.fewshot.n_way,
        &mut rng_for(cfg.seed, "init-head", 0),
    );
    let eval = evaluate(&embedder, &head, &feats).unwrap();

    let n = feats.query_y.len();
    let band = 1.96 * (0.2 * 0.8 / n as f64).sqrt();
    let (lo, hi) = (0.2 - band, 0.2 + band);
    verdict(
        9,
        n >= 175 && eval.accuracy >= lo && eval.accuracy <= hi,
        &format!(
            "untrained head scores {:.4} over {n} queries; 95% binomial band around 0.20 is [{lo:.4}, {hi:.4}]",
            eval.accuracy
        ),
    );
}

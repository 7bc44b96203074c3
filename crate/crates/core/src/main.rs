//! Command-line front end. Any configuration key can be set from the command
//! line as `--section.key=value` (e.g. `--contrastive.method=segments`);
//! those dotted flags are collected before clap parsing and applied on top of
//! the `--config` file, so flags always win.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use cricket::audio::{crop_or_pad, Waveform};
use cricket::config::RunConfig;
use cricket::error::{Error, Result};
use cricket::features::{stack_channels, write_features};
use cricket::fewshot::{
    append_report_row, build_episode, episode_features, evaluate, finetune, run_protocol,
    EmbedderSource, HeadParams, ProtocolRow,
};
use cricket::manifest::{build_groups, GroupSplit, Manifest};
use cricket::nn::embedder::EmbedderParams;
use cricket::rng::rng_for;
use cricket::synth::make_synth;
use cricket::trainer::checkpoint::load_checkpoint;
use cricket::trainer::gradcheck::{full_model_check, FullCheckSpec};
use cricket::trainer::loops::{
    load_entry_clips, pretrain, state_from_checkpoint, PretrainOptions,
};

const OVERRIDE_HELP: &str = "Any config key is also a flag: --data.sample_rate=8000, \
--contrastive.method=augmentations, --model.ssm_enabled=false, ... \
Flags override the --config file; --seed overrides everything.";

#[derive(Parser)]
#[command(
    name = "cricket",
    version,
    about = "Self-supervised few-shot acoustic classification",
    after_help = OVERRIDE_HELP
)]
struct Cli {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the run seed (wins over the config file and dotted flags).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitKind {
    /// Freshly initialized weights — the no-pretraining baseline.
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pre-training on the manifest's unlabelled clips.
    Pretrain {
        /// Output directory for checkpoints and the default metrics CSV.
        #[arg(long, default_value = "runs/pretrain", value_name = "DIR")]
        out: PathBuf,
        /// Per-epoch metrics CSV (default: <out>/metrics.csv).
        #[arg(long, value_name = "FILE")]
        metrics: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Fine-tune on one group's support set and score its queries.
    FinetuneEval {
        /// Pre-trained checkpoint to start from.
        #[arg(long, value_name = "CKPT", conflicts_with = "init")]
        ckpt: Option<PathBuf>,
        /// Start from untrained weights instead of a checkpoint.
        #[arg(long, value_enum, value_name = "KIND")]
        init: Option<InitKind>,
        /// Group id to evaluate (default: the first group).
        #[arg(long, value_name = "NAME")]
        group: Option<String>,
        /// Keep embedder weights fixed; train only the head.
        #[arg(long)]
        freeze_embedder: bool,
        /// Append the result row to this CSV.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// The full protocol: every group, fine-tune + evaluate, averaged.
    Protocol {
        /// Shared pre-trained checkpoint. Without it (and without --init)
        /// each group pre-trains on its own unlabelled clips.
        #[arg(long, value_name = "CKPT", conflicts_with = "init")]
        ckpt: Option<PathBuf>,
        /// Start from untrained weights instead of pre-training.
        #[arg(long, value_enum, value_name = "KIND")]
        init: Option<InitKind>,
        /// Write the per-group report CSV here.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Dump stacked spectrograms for every manifest clip.
    Extract {
        /// Output directory for the feature dumps.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Generate a deterministic synthetic dataset plus manifest.
    MakeSynth {
        /// Output directory for WAVs and manifest.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        clips_per_class: usize,
        /// Samples per generated clip (default: 2 × data.clip_len).
        #[arg(long, value_name = "SAMPLES")]
        len: Option<usize>,
    },
    /// Verify analytic gradients of the full model against finite differences.
    GradCheck {
        /// Coordinates probed per parameter array.
        #[arg(long, default_value_t = 3)]
        probes: usize,
    },
}

fn main() -> ExitCode {
    let (cli_args, mut overrides) = split_override_flags(std::env::args().collect());
    let cli = match Cli::try_parse_from(cli_args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Command::FinetuneEval { freeze_embedder: true, .. } = &cli.command {
        overrides.push("fewshot.freeze_embedder=true".into());
    }

    match run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Pull `--section.key=value` flags out of argv so clap never sees them. A
/// dotted flag without `=` is malformed — leave it for clap to reject.
fn split_override_flags(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut cli_args = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for arg in args {
        match arg.strip_prefix("--") {
            Some(rest) if rest.contains('.') && rest.contains('=') => {
                overrides.push(rest.to_string());
            }
            _ => cli_args.push(arg),
        }
    }
    (cli_args, overrides)
}

fn run(cli: &Cli, overrides: &[String]) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), overrides)?;
    println!("# resolved configuration");
    for line in cfg.to_toml_string().lines() {
        println!("# {line}");
    }

    match &cli.command {
        Command::Pretrain { out, metrics, resume } => cmd_pretrain(&cfg, out, metrics.as_deref(), resume.as_deref()),
        Command::FinetuneEval { ckpt, init, group, report, .. } => {
            cmd_finetune_eval(&cfg, ckpt.as_deref(), *init, group.as_deref(), report.as_deref())
        }
        Command::Protocol { ckpt, init, report } => {
            cmd_protocol(&cfg, ckpt.as_deref(), *init, report.as_deref())
        }
        Command::Extract { out } => cmd_extract(&cfg, out),
        Command::MakeSynth { out, classes, clips_per_class, len } => {
            cmd_make_synth(&cfg, out, *classes, *clips_per_class, *len)
        }
        Command::GradCheck { probes } => cmd_grad_check(*probes),
    }
}

/// Read the manifest named by the config; paths resolve against its parent.
fn load_manifest(cfg: &RunConfig) -> Result<(Manifest, PathBuf)> {
    if cfg.data.manifest.is_empty() {
        return Err(Error::Config(
            "data.manifest must point to a dataset manifest CSV".into(),
        ));
    }
    let path = PathBuf::from(&cfg.data.manifest);
    let manifest = Manifest::read(&path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((manifest, base))
}

fn resolve_groups(cfg: &RunConfig, manifest: &Manifest) -> Result<Vec<GroupSplit>> {
    build_groups(manifest, cfg.fewshot.n_way, cfg.fewshot.shots, cfg.seed)
}

fn cmd_pretrain(
    cfg: &RunConfig,
    out: &Path,
    metrics: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let (manifest, base) = load_manifest(cfg)?;
    let splits = resolve_groups(cfg, &manifest)?;
    let pretrain_entries: Vec<_> = splits.iter().flat_map(|s| s.pretrain.clone()).collect();
    if pretrain_entries.is_empty() {
        return Err(Error::EmptySet("manifest has no pre-training clips".into()));
    }
    let clips = load_entry_clips(&pretrain_entries, &base, cfg.data.sample_rate)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let opts = PretrainOptions {
        ckpt_dir: Some(out.to_path_buf()),
        metrics_path: Some(metrics.map_or_else(|| out.join("metrics.csv"), Path::to_path_buf)),
        resume: resume.map(load_checkpoint).transpose()?,
        log: true,
    };
    let trained = pretrain(cfg, &clips, opts)?;
    let last = trained.trace.last();
    println!(
        "pre-trained {} epochs on {} clips; final loss {:.6}; checkpoint {}",
        cfg.contrastive.epochs,
        clips.len(),
        last.map_or(f64::NAN, |s| s.loss),
        out.join("final.ckpt").display()
    );
    Ok(())
}

/// Build the group's embedder according to `--ckpt`/`--init`.
fn single_group_embedder(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    init: Option<InitKind>,
) -> Result<EmbedderParams<f32>> {
    match (ckpt, init) {
        (Some(path), None) => {
            let ckpt = load_checkpoint(path)?;
            let (embedder, _) = state_from_checkpoint(cfg, &ckpt)?;
            Ok(embedder)
        }
        (None, Some(InitKind::Random)) => Ok(EmbedderParams::init(
            &cfg.embedder_config(),
            &mut rng_for(cfg.seed, "init-embedder", 0),
        )?),
        _ => Err(Error::Config(
            "pass exactly one of --ckpt <file> or --init random".into(),
        )),
    }
}

fn cmd_finetune_eval(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    init: Option<InitKind>,
    group: Option<&str>,
    report: Option<&Path>,
) -> Result<()> {
    let embedder = single_group_embedder(cfg, ckpt, init)?;
    let (manifest, base) = load_manifest(cfg)?;
    let splits = resolve_groups(cfg, &manifest)?;
    let split = match group {
        Some(name) => splits.iter().find(|s| s.group == name).ok_or_else(|| {
            Error::Manifest(format!(
                "group `{name}` not found; available: {:?}",
                splits.iter().map(|s| s.group.as_str()).collect::<Vec<_>>()
            ))
        })?,
        None => &splits[0],
    };

    let mut load = |e: &cricket::manifest::Entry| -> Result<Waveform> {
        load_entry_clips(std::slice::from_ref(e), &base, cfg.data.sample_rate)
            .map(|mut v| v.remove(0))
    };
    let episode = build_episode(split, cfg.fewshot.n_way, cfg.fewshot.shots, &mut load)?;
    let feats = episode_features(&episode, cfg)?;
    let head = HeadParams::init(
        cfg.embedder_config().latent_dim(),
        cfg.fewshot.head_hidden,
        cfg.fewshot.n_way,
        &mut rng_for(cfg.seed, "init-head", 0),
    );
    let tuned = finetune(&embedder, &head, &feats, cfg)?;
    let eval = evaluate(&tuned.embedder, &tuned.head, &feats)?;

    if let (Some(first), Some(last)) = (tuned.loss_trace.first(), tuned.loss_trace.last()) {
        println!(
            "fine-tuned {} epochs: support loss {:.4} -> {:.4}",
            tuned.loss_trace.len(),
            first,
            last
        );
    }
    println!(
        "group {}: accuracy {:.4} over {} queries",
        split.group,
        eval.accuracy,
        feats.query_y.len()
    );
    println!("confusion (rows = true class, columns = predicted):");
    for (i, row) in eval.confusion.outer_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
        println!("  {:12} {}", feats.classes[i], cells.join(" "));
    }
    if let Some(path) = report {
        append_report_row(
            path,
            &ProtocolRow { group: split.group.clone(), accuracy: eval.accuracy },
        )?;
    }
    Ok(())
}

fn cmd_protocol(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    init: Option<InitKind>,
    report: Option<&Path>,
) -> Result<()> {
    let (manifest, base) = load_manifest(cfg)?;
    let splits = resolve_groups(cfg, &manifest)?;
    let pretrained;
    let source = match (ckpt, init) {
        (Some(path), None) => {
            let ckpt = load_checkpoint(path)?;
            pretrained = state_from_checkpoint(cfg, &ckpt)?.0;
            EmbedderSource::Pretrained(&pretrained)
        }
        (None, Some(InitKind::Random)) => EmbedderSource::RandomInit,
        (None, None) => EmbedderSource::PretrainPerGroup,
        _ => unreachable!("clap rejects --ckpt with --init"),
    };
    let mut load = |e: &cricket::manifest::Entry| -> Result<Waveform> {
        load_entry_clips(std::slice::from_ref(e), &base, cfg.data.sample_rate)
            .map(|mut v| v.remove(0))
    };
    let result = run_protocol(&splits, source, cfg, &mut load)?;
    print!("{}", result.render());
    if let Some(path) = report {
        result.write_csv(path)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_extract(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (manifest, base) = load_manifest(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let fcfg = cfg.feature_config();
    let mut written = 0usize;
    for entry in &manifest.entries {
        let clip = load_entry_clips(std::slice::from_ref(entry), &base, cfg.data.sample_rate)?
            .remove(0);
        let spec = stack_channels(&crop_or_pad(&clip, cfg.data.clip_len), &fcfg)?;
        let stem = Path::new(&entry.path)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Manifest(format!("unusable clip path `{}`", entry.path)))?;
        write_features(out.join(format!("{stem}.spec")), &spec, &fcfg)?;
        written += 1;
    }
    println!("wrote {written} feature dumps to {}", out.display());
    Ok(())
}

fn cmd_make_synth(
    cfg: &RunConfig,
    out: &Path,
    classes: usize,
    clips_per_class: usize,
    len: Option<usize>,
) -> Result<()> {
    let clip_len = len.unwrap_or(2 * cfg.data.clip_len);
    let manifest = make_synth(
        out,
        classes,
        clips_per_class,
        cfg.data.sample_rate,
        clip_len,
        cfg.seed,
    )?;
    println!(
        "wrote {} clips ({} classes × {}, {} samples at {} Hz) and {}",
        manifest.entries.len(),
        classes,
        clips_per_class,
        clip_len,
        cfg.data.sample_rate,
        out.join("manifest.csv").display()
    );
    Ok(())
}

fn cmd_grad_check(probes: usize) -> Result<()> {
    let spec = FullCheckSpec { probes_per_array: probes, ..FullCheckSpec::default() };
    println!(
        "checking analytic gradients: {} channels, {} SSM layers, N={}, input ({}, 3, {}, {})",
        spec.base_channels, spec.n_ssm_layers, spec.state_size, spec.batch, spec.f_bins,
        spec.t_frames
    );
    let report = full_model_check(&spec)?;
    let tolerance = 1e-5;
    println!("{report}");
    if report.max_rel_err < tolerance {
        println!("PASS (threshold {tolerance:.0e})");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: {report} exceeds {tolerance:.0e}"
        )))
    }
}

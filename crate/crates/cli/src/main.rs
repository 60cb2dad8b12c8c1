//! `effcrn`: complexity analysis, streaming enhancement, training and
//! self-test for the FCRN15 / EffCRN23 model family.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use effcrn_core::dsp::enhance_file;
use effcrn_core::selftest::{self, Check};
use effcrn_core::topology::accounting::{ablation_pairs, delta, ordering_violations, AccountingRow};
use effcrn_core::topology::{build_model, checkpoint, Model, Overrides, Variant};
use effcrn_core::train::{self, read_manifest, synth, Dataset, ScheduleConfig, Split, TrainConfig};
use effcrn_core::Error;
use serde_json::json;

const THREADS_ENV: &str = "EFFCRN_THREADS";

#[derive(Parser)]
#[command(name = "effcrn", version, about = "Convolutional-recurrent speech enhancement toolkit")]
struct Cli {
    #[arg(long, value_enum, default_value_t = Format::Table, global = true)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    JsonLines,
}

#[derive(Subcommand)]
enum Command {
    /// Parameters and FLOPs per frame against the published figures.
    Analyze {
        /// Variant names such as FCRN15, FCRN15-C+G or EffCRN23lite; all
        /// published variants when empty.
        variants: Vec<String>,
        #[arg(long = "variant")]
        extra: Vec<String>,
    },
    /// Layer-by-layer shapes and costs of one variant.
    Describe {
        #[arg(long, default_value = "EffCRN23")]
        variant: String,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Enhance a 16 kHz mono WAV file frame by frame.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Train a variant on a manifest of clean/noise pairs.
    Train(TrainArgs),
    /// Gradient, adjointness, STFT, padding, streaming and accounting checks.
    Selftest {
        /// Skip the whole-model gradient checks.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic tone-plus-noise corpus with a manifest.
    Synth {
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        /// Trailing utterances assigned to the validation split.
        #[arg(long, default_value_t = 2)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct OverrideArgs {
    #[arg(long)]
    clstm_width: Option<usize>,
    #[arg(long)]
    gru_width: Option<usize>,
}

impl OverrideArgs {
    fn get(&self) -> Overrides {
        Overrides { clstm_width: self.clstm_width, gru_width: self.gru_width, ..Default::default() }
    }
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "EffCRN23")]
    variant: String,
    /// Directory for `best.ckpt` and `train.log`.
    #[arg(long = "out")]
    output: PathBuf,
    /// Continue from this checkpoint; its spec must match the variant.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    overrides: OverrideArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match configure_threads().and_then(|()| run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Usage(_) | Error::Config(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let fmt = cli.format;
    match cli.command {
        Command::Analyze { mut variants, extra } => {
            variants.extend(extra);
            analyze(&variants, fmt)
        }
        Command::Describe { variant, overrides } => describe(&variant, &overrides.get(), fmt),
        Command::Enhance { model, input, output } => enhance(&model, &input, &output, fmt),
        Command::Train(args) => train_cmd(&args, fmt),
        Command::Selftest { quick, seed } => selftest_cmd(quick, seed, fmt),
        Command::Synth { output, count, seconds, val, seed } => {
            if count == 0 || val > count || !(seconds > 0.0) {
                bail!(Error::Usage("need count > 0, val <= count and seconds > 0".into()));
            }
            synth::write_corpus(&output, &synth::generate(count, seconds, seed), val)?;
            emit(fmt, &json!({"manifest": output.join("manifest.txt"), "utterances": count, "val": val}), || {
                format!("wrote {count} utterances to {}", output.join("manifest.txt").display())
            });
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_variant(name: &str) -> anyhow::Result<Variant> {
    Ok(name.parse::<Variant>()?)
}

fn emit(fmt: Format, value: &serde_json::Value, table: impl FnOnce() -> String) {
    match fmt {
        Format::JsonLines => println!("{value}"),
        Format::Table => println!("{}", table()),
    }
}

fn percent(d: Option<f64>) -> String {
    d.map_or_else(|| "-".into(), |d| format!("{:+.1}%", 100.0 * d))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

fn analyze(names: &[String], fmt: Format) -> anyhow::Result<ExitCode> {
    let variants: Vec<Variant> =
        if names.is_empty() { Variant::published() } else { names.iter().map(|n| parse_variant(n)).collect::<anyhow::Result<_>>()? };
    let rows: Vec<AccountingRow> = variants.iter().map(AccountingRow::for_variant).collect::<Result<_, _>>()?;
    let mut out = io::stdout().lock();
    if fmt == Format::Table {
        writeln!(
            out,
            "{:<16} {:>5} {:>10} {:>10} {:>7} {:>12} {:>12} {:>7}",
            "variant", "depth", "params", "published", "dev", "FLOPs/frame", "published", "dev"
        )?;
    }
    for r in &rows {
        match fmt {
            Format::JsonLines => writeln!(
                out,
                "{}",
                json!({
                    "kind": "variant",
                    "variant": r.variant,
                    "depth": r.depth,
                    "params": r.params,
                    "published_params": r.published_params,
                    "params_deviation": r.params_deviation(),
                    "flops": r.flops,
                    "published_flops": r.published_flops,
                    "flops_deviation": r.flops_deviation(),
                })
            )?,
            Format::Table => writeln!(
                out,
                "{:<16} {:>5} {:>10} {:>10} {:>7} {:>12} {:>12} {:>7}",
                r.variant,
                r.depth,
                r.params,
                opt(r.published_params),
                percent(r.params_deviation()),
                r.flops,
                opt(r.published_flops),
                percent(r.flops_deviation())
            )?,
        }
    }
    let pairs: Vec<_> = ablation_pairs()
        .into_iter()
        .filter_map(|(a, b)| {
            let find = |v: &Variant| rows.iter().zip(&variants).find(|(_, w)| *w == v).map(|(r, _)| r);
            Some(delta(find(&a)?, find(&b)?))
        })
        .collect();
    if !pairs.is_empty() && fmt == Format::Table {
        writeln!(out, "\n{:<30} {:>10} {:>10} {:>7} {:>12} {:>12} {:>7}", "change", "Δparams", "published", "dev", "ΔFLOPs", "published", "dev")?;
    }
    let dev = |ours: i64, theirs: Option<i64>| theirs.filter(|&t| t != 0).map(|t| (ours - t) as f64 / t.abs() as f64);
    for d in &pairs {
        match fmt {
            Format::JsonLines => writeln!(
                out,
                "{}",
                json!({
                    "kind": "delta",
                    "from": d.from,
                    "to": d.to,
                    "params": d.params,
                    "published_params": d.published_params,
                    "params_deviation": dev(d.params, d.published_params),
                    "flops": d.flops,
                    "published_flops": d.published_flops,
                    "flops_deviation": dev(d.flops, d.published_flops),
                })
            )?,
            Format::Table => writeln!(
                out,
                "{:<30} {:>10} {:>10} {:>7} {:>12} {:>12} {:>7}",
                format!("{} → {}", d.from, d.to),
                d.params,
                opt(d.published_params),
                percent(dev(d.params, d.published_params)),
                d.flops,
                opt(d.published_flops),
                percent(dev(d.flops, d.published_flops))
            )?,
        }
    }
    let violations = ordering_violations(&rows);
    if fmt == Format::Table && !violations.is_empty() {
        writeln!(out, "\nordering differs from the published figures:")?;
        for v in &violations {
            writeln!(out, "  {v}")?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn describe(name: &str, overrides: &Overrides, fmt: Format) -> anyhow::Result<ExitCode> {
    let (graph, spec) = build_model(&parse_variant(name)?, overrides)?;
    let mut out = io::stdout().lock();
    if fmt == Format::Table {
        writeln!(out, "{} (spec {})", spec.name, &spec.hash()[..12])?;
        writeln!(out, "{:<14} {:<14} {:>10} {:>10} {:>10} {:>12}", "layer", "kind", "in", "out", "params", "FLOPs/frame")?;
    }
    for l in &graph.layers {
        let kind = format!("{:?}", l.kind);
        let kind = kind.split([' ', '{', '(']).next().unwrap_or_default().to_string();
        match fmt {
            Format::JsonLines => writeln!(
                out,
                "{}",
                json!({
                    "layer": l.name, "kind": kind,
                    "in_freq": l.in_freq, "in_chan": l.in_chan,
                    "out_freq": l.out_freq, "out_chan": l.out_chan,
                    "params": l.params(), "flops": l.flops(),
                })
            )?,
            Format::Table => writeln!(
                out,
                "{:<14} {:<14} {:>10} {:>10} {:>10} {:>12}",
                l.name,
                kind,
                format!("{}x{}", l.in_freq, l.in_chan),
                format!("{}x{}", l.out_freq, l.out_chan),
                l.params(),
                l.flops()
            )?,
        }
    }
    if fmt == Format::Table {
        writeln!(
            out,
            "depth {}, {} params, {} FLOPs/frame, padding {:?}",
            graph.depth(),
            graph.num_params(),
            graph.flops_per_frame(),
            graph.plan.pads
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!(Error::Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            bail!(Error::Usage(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn enhance(model_path: &Path, input: &Path, output: &Path, fmt: Format) -> anyhow::Result<ExitCode> {
    require_file(model_path, "model")?;
    require_file(input, "input")?;
    require_parent(output)?;
    let (model, _) = checkpoint::load(model_path)?;
    let stats = enhance_file(&model, input, output)?;
    emit(fmt, &json!({"output": output, "stats": stats}), || {
        format!(
            "{} frames, {:.3} ms/frame, real-time factor {:.4}",
            stats.frames, stats.ms_per_frame, stats.real_time_factor
        )
    });
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(args: &TrainArgs, fmt: Format) -> anyhow::Result<ExitCode> {
    require_file(&args.manifest, "manifest")?;
    if let Some(r) = &args.resume {
        require_file(r, "checkpoint")?;
    }
    let variant = parse_variant(&args.variant)?;
    let mut model = Model::<f32>::from_variant(&variant, &args.overrides.get(), args.seed)?;
    let mut schedule = ScheduleConfig::default();
    if let Some(e) = args.epochs {
        schedule.max_epochs = e;
    }
    if let Some(lr) = args.lr {
        schedule.initial_lr = lr;
    }
    if let Some(r) = &args.resume {
        let (restored, meta) = checkpoint::load(r)?;
        let want = model.spec().hash();
        let have = restored.spec().hash();
        if have != want || meta.get("spec_hash").and_then(|h| h.as_str()).is_some_and(|h| h != want) {
            bail!(Error::Config(format!(
                "{} holds spec {} but {} resolves to {}",
                r.display(),
                &have[..12],
                args.variant,
                &want[..12]
            )));
        }
        if args.lr.is_none() {
            if let Some(lr) = meta.get("lr").and_then(|v| v.as_f64()) {
                schedule.initial_lr = lr.max(schedule.min_lr);
            }
        }
        model = restored;
    }
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        seq_len: args.seq_len.unwrap_or(defaults.seq_len),
        batch: args.batch.unwrap_or(defaults.batch),
        schedule,
        seed: args.seed,
        max_steps: args.steps,
        ..defaults
    };
    cfg.validate()?;
    let entries = read_manifest(&args.manifest)?;
    let train_set = Dataset::from_manifest(&entries, Split::Train, cfg.seq_len, args.seed)?;
    let val_set = Dataset::from_manifest(&entries, Split::Val, cfg.seq_len, args.seed)?;
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let best = args.output.join("best.ckpt");
    let log_path = args.output.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let report = train::train(&mut model, &train_set, &val_set, &cfg, &mut log, Some(&best))?;
    log.flush()?;
    emit(fmt, &json!({"checkpoint": best, "log": log_path, "report": report}), || {
        format!(
            "{} steps over {} epochs, best validation loss {:.6} at epoch {} ({:?})\ncheckpoint {}\nlog {}",
            report.steps,
            report.epochs.len(),
            report.best_val_loss,
            report.best_epoch,
            report.finish,
            best.display(),
            log_path.display()
        )
    });
    Ok(ExitCode::SUCCESS)
}

fn selftest_cmd(quick: bool, seed: u64, fmt: Format) -> anyhow::Result<ExitCode> {
    let checks = selftest::run_all(quick, seed)?;
    for c in &checks {
        emit(fmt, &serde_json::to_value(c)?, || line(c));
    }
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed).collect();
    if fmt == Format::Table {
        println!("{} of {} checks passed", checks.len() - failed.len(), checks.len());
        for c in &failed {
            println!("failed: {}", c.name);
        }
    }
    Ok(if failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn line(c: &Check) -> String {
    format!(
        "[{}] {:<40} {:.3e} (tol {:.1e}) {}",
        if c.passed { "PASS" } else { "FAIL" },
        c.name,
        c.value,
        c.tolerance,
        c.detail
    )
}

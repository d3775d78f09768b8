//! The `rmfnet` command line.
//!
//! Every subcommand reads the flat [`RunConfig`] (`--config FILE`, then
//! repeated `--set key=value`), then applies its own flags. Failures print a
//! single `error[<category>]: <message>` line on stderr and exit with the
//! code of [`Error::exit_code`].

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::{augment, AugmentMethod};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::event::{partition_windows, stack_count_image, EventCountImage, PolarityTag, SequenceWindow, WindowPolicy};
use crate::io::{dump_count_image, read_events, write_events, EventFormat};
use crate::model::{Model, Variant};
use crate::rng;
use crate::synth::synth_toy_stream;
use crate::train::{evaluate, infer_window, train, Dataset, LossRecord};
use crate::verify::{run_suite, VerifyOptions, SUITES};

#[derive(Debug, Parser)]
#[command(name = "rmfnet", version, about = "Event-stream super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration; keys left out keep their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref(), &self.set)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct WindowArgs {
    /// Fixed-duration windows of this many microseconds.
    #[arg(long, conflicts_with = "window_events")]
    window_us: Option<u64>,
    /// Fixed-count windows of this many events.
    #[arg(long)]
    window_events: Option<usize>,
}

impl WindowArgs {
    fn policy(&self, cfg: &RunConfig) -> WindowPolicy {
        match (self.window_us, self.window_events) {
            (Some(us), _) => WindowPolicy::FixedDuration(us),
            (None, Some(k)) => WindowPolicy::FixedCount(k),
            (None, None) => cfg.window_policy(),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize one toy HR event stream.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
        /// text or binary; defaults to `event_format`.
        #[arg(long)]
        format: Option<EventFormat>,
        /// Dataset split whose scene seeds to use.
        #[arg(long, default_value = "train")]
        split: String,
        /// Scene index within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Cut a stream into windows and dump pos/neg/frame count images.
    Stack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
        /// Relocate coordinates down by this factor before stacking.
        #[arg(long, default_value_t = 1)]
        factor: usize,
    },
    /// Apply one augmentation to a stream.
    Augment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Augmentation name; defaults to the config's `augment`.
        #[arg(long)]
        method: Option<AugmentMethod>,
        #[arg(long)]
        format: Option<EventFormat>,
    },
    /// Train on toy scenes; writes a checkpoint and a JSON-lines loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Ablation point (model#A..model#E); sets the three structural modes.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint and bicubic upscaling on held-out toy scenes.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the report (JSON lines) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Super-resolve an LR stream window by window.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Run the built-in self checks.
    Verify {
        /// Suites to run (repeatable); all by default.
        #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        suites: Vec<String>,
        /// Randomized cases per representation and augmentation law.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn json_line(value: &impl serde::Serialize) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn window_stem(i: usize) -> String {
    format!("w{i:04}")
}

/// SR planes are real-valued; dumps round them to the nearest
/// non-negative count.
fn to_counts(plane: &[f32], w: usize, h: usize, tag: PolarityTag) -> Result<EventCountImage> {
    let counts = plane.iter().map(|&v| v.max(0.0).round().min(u32::MAX as f32) as u32).collect();
    EventCountImage::from_counts(w, h, tag, counts)
}

fn cmd_synth(cfg: &RunConfig, out: &Path, format: EventFormat, split: &str, index: usize, stdout: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let mut spec = cfg.scene();
    spec.seed = rng::child_seed(cfg.seed, &format!("scene/{split}/{index}"));
    let stream = synth_toy_stream(&spec)?;
    write_events(out, &stream, format)?;
    let duration = match (stream.t_first(), stream.t_last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    };
    writeln!(
        stdout,
        "events {} duration_us {duration} width {} height {}",
        stream.len(),
        stream.width(),
        stream.height()
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn cmd_stack(input: &Path, out_dir: &Path, policy: WindowPolicy, factor: usize, stdout: &mut dyn Write) -> Result<()> {
    let mut stream = read_events(input)?;
    if factor != 1 {
        stream = crate::event::downsample_stream(&stream, factor)?;
    }
    let windows = partition_windows(&stream, policy)?;
    create_dir(out_dir)?;
    for (i, w) in windows.iter().enumerate() {
        let part = stream.slice(w.events.clone());
        let stem = window_stem(i);
        dump_count_image(out_dir, &format!("{stem}_pos"), &stack_count_image(&part, PolarityTag::Positive))?;
        dump_count_image(out_dir, &format!("{stem}_neg"), &stack_count_image(&part, PolarityTag::Negative))?;
        dump_count_image(out_dir, &format!("{stem}_frame"), &stack_count_image(&part, PolarityTag::All))?;
    }
    writeln!(stdout, "windows {} events {} width {} height {}", windows.len(), stream.len(), stream.width(), stream.height())
        .map_err(|e| Error::io("<stdout>", e))
}

fn cmd_augment(cfg: &RunConfig, input: &Path, out: &Path, format: EventFormat, stdout: &mut dyn Write) -> Result<()> {
    let stream = read_events(input)?;
    let spec = cfg.augment_spec();
    let result = augment(&stream, &spec)?;
    write_events(out, &result, format)?;
    writeln!(stdout, "method {} events_in {} events_out {}", spec.method.name(), stream.len(), result.len())
        .map_err(|e| Error::io("<stdout>", e))
}

fn loss_line(rec: &LossRecord, with_wall: bool) -> String {
    if with_wall {
        return json_line(rec);
    }
    let mut v = serde_json::to_value(rec).expect("plain data serializes");
    v.as_object_mut().expect("record is an object").remove("wall_ms");
    v.to_string()
}

fn cmd_train(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let data = Dataset::toy(&cfg.scene(), cfg.train_sequences, cfg.seed, "train", cfg.scale, cfg.window_policy(), cfg.seq_len)?;
    let mut train_cfg = cfg.train_config();
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| PathBuf::from("rmfnet.ckpt"));
    train_cfg.checkpoint = Some(checkpoint.clone());
    let mut model = Model::<f32>::new(model_cfg, cfg.seed)?;
    let mut log = match &cfg.loss_log {
        Some(p) => Some((p.clone(), BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?))),
        None => None,
    };
    let records = train(&mut model, &data, &train_cfg, |rec| {
        if let Some((path, w)) = log.as_mut() {
            writeln!(w, "{}", loss_line(rec, cfg.log_wall_ms)).map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    })?;
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let last = records.last().map_or(f64::NAN, |r| r.loss);
    let first = records.first().map_or(f64::NAN, |r| r.loss);
    writeln!(
        stdout,
        "steps {} initial_loss {first:.6} final_loss {last:.6} params {} checkpoint {}",
        records.len(),
        model.param_count(),
        checkpoint.display()
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn cmd_eval(cfg: &RunConfig, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let path = cfg.checkpoint.clone().ok_or_else(|| Error::Usage("eval needs --checkpoint".into()))?;
    let model = Model::<f32>::load(&path, &cfg.model_config())?;
    let r = model.config().scale;
    if !cfg.width.is_multiple_of(r) || !cfg.height.is_multiple_of(r) {
        return Err(Error::Config(format!("checkpoint scale {r} does not divide the {}x{} scene", cfg.width, cfg.height)));
    }
    let data = Dataset::toy(&cfg.scene(), cfg.eval_sequences, cfg.seed, "eval", r, cfg.window_policy(), cfg.seq_len)?;
    let report = evaluate(&model, &data)?;
    let line = json_line(&report);
    if let Some(p) = out {
        fs::write(p, format!("{line}\n")).map_err(|e| Error::io(p, e))?;
    }
    writeln!(stdout, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, input: &Path, out_dir: &Path, policy: WindowPolicy, stdout: &mut dyn Write) -> Result<()> {
    let model = Model::<f32>::load(checkpoint, &cfg.model_config())?;
    let r = model.config().scale;
    let lr = read_events(input)?;
    let windows = partition_windows(&lr, policy)?;
    create_dir(out_dir)?;
    let mut state = None;
    let (w, h) = (lr.width() * r, lr.height() * r);
    for (i, win) in windows.iter().enumerate() {
        let sw = SequenceWindow::from_lr(&lr, r, win);
        let out = infer_window(&model, &sw, &mut state)?;
        let (pos, neg) = out.data().split_at(w * h);
        let stem = window_stem(i);
        dump_count_image(out_dir, &format!("{stem}_sr_pos"), &to_counts(pos, w, h, PolarityTag::Positive)?)?;
        dump_count_image(out_dir, &format!("{stem}_sr_neg"), &to_counts(neg, w, h, PolarityTag::Negative)?)?;
    }
    writeln!(stdout, "windows {} scale {r} width {w} height {h}", windows.len()).map_err(|e| Error::io("<stdout>", e))
}

fn cmd_verify(suites: &[String], opts: VerifyOptions, stdout: &mut dyn Write) -> Result<()> {
    let names: Vec<&str> = if suites.is_empty() { SUITES.to_vec() } else { suites.iter().map(String::as_str).collect() };
    let mut failed = Vec::new();
    let io = |e| Error::io("<stdout>", e);
    for name in names {
        let report = run_suite(name, opts)?;
        for c in &report.checks {
            writeln!(stdout, "{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, report.suite, c.name, c.detail).map_err(io)?;
        }
        let ok = report.passed();
        writeln!(
            stdout,
            "suite {} {} ({} checks, {:.1} s)",
            report.suite,
            if ok { "pass" } else { "fail" },
            report.checks.len(),
            report.wall_ms / 1e3
        )
        .map_err(io)?;
        if !ok {
            failed.push(report.suite);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verify(format!("suites {}", failed.join(", "))))
    }
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out, format, split, index } => {
            let cfg = cfg.resolve()?;
            cmd_synth(&cfg, &out, format.unwrap_or(cfg.event_format), &split, index, stdout)
        }
        Command::Stack { cfg, input, out_dir, window, factor } => {
            let cfg = cfg.resolve()?;
            cmd_stack(&input, &out_dir, window.policy(&cfg), factor, stdout)
        }
        Command::Augment { cfg, input, out, method, format } => {
            let mut cfg = cfg.resolve()?;
            if let Some(m) = method {
                cfg.augment = m;
            }
            cmd_augment(&cfg, &input, &out, format.unwrap_or(cfg.event_format), stdout)
        }
        Command::Train { cfg, variant, checkpoint, loss_log, steps } => {
            let mut cfg = cfg.resolve()?;
            if let Some(v) = variant {
                cfg.set_model_config(&cfg.model_config().with_variant(v));
            }
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.loss_log = loss_log.or(cfg.loss_log);
            cfg.steps = steps.unwrap_or(cfg.steps);
            cmd_train(&cfg, stdout)
        }
        Command::Eval { cfg, checkpoint, out } => {
            let mut cfg = cfg.resolve()?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cmd_eval(&cfg, out.as_deref(), stdout)
        }
        Command::Infer { cfg, checkpoint, input, out_dir, window } => {
            let cfg = cfg.resolve()?;
            cmd_infer(&cfg, &checkpoint, &input, &out_dir, window.policy(&cfg), stdout)
        }
        Command::Verify { suites, cases, seed } => cmd_verify(&suites, VerifyOptions { cases, seed }, stdout),
    }
}

/// Caps rayon's pool at `RMF_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("RMF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("RMF_THREADS must be a positive integer, got `{raw}`")))?;
    // A second call in the same process (tests) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parse `args` (program name first) and run; the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion, DisplayHelpOnMissingArgumentOrSubcommand};
            return match e.kind() {
                DisplayHelp | DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    0
                }
                DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(stderr, "{}", e.render());
                    1
                }
                _ => {
                    let msg = e.render().to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                    let _ = writeln!(stderr, "error[usage]: {first}");
                    1
                }
            };
        }
    };
    match configure_threads().and_then(|()| dispatch(cli, stdout)) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error[{}]: {msg}", e.category());
            e.exit_code()
        }
    }
}

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use nighttrack_autograd::Tensor;
use nighttrack_core::checkpoint;
use nighttrack_core::config::parse_kv;
use nighttrack_core::gradcheck::{check_model_gradients, GradCheckOptions};
use nighttrack_core::head::encode_target;
use nighttrack_core::model::ModelInputs;
use nighttrack_core::synth::{generate, SceneSpec};
use nighttrack_core::tracker::TrackerOptions;
use nighttrack_core::train::{train, TrainConfig, TrainSequence};
use nighttrack_core::{BoundingBox, CoreError, Model, ModelConfig};
use nighttrack_eval::dataset::{discover, write_boxes, write_sequence, FrameFormat, SequenceOnDisk};
use nighttrack_eval::metrics::compute_metrics;
use nighttrack_eval::ope::{decision_log, evaluate_results, report_text, run_ope, write_report, ModelTracker, OpeReport};
use nighttrack_eval::{bench, plot, EvalError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "nighttrack", version, about = "Nighttime single-object tracker: track, train, evaluate")]
struct Cli {
    /// Plain-text `key = value` file. Model keys are bare (`dim = 64`);
    /// trainer, generator and tracker keys use `train.`, `synth.` and `track.`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sequence-parallel evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Append per-frame calibration decisions (and training losses) here.
    #[arg(long, global = true)]
    diagnostics: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Ppm,
}

#[derive(Subcommand)]
enum Command {
    /// Track one sequence from its first groundtruth box.
    Run {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// Results file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score existing results files against a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        results: PathBuf,
        /// Directory for summary.csv and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// One-pass evaluation of a checkpoint over every sequence of a dataset.
    Ope {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Evaluate sequences one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Train on every sequence of a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Loss curve CSV (iteration, loss, ce, siou).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Render synthetic sequences in the dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        sequences: usize,
        #[arg(long, value_enum, default_value_t = Format::Png)]
        format: Format,
    },
    /// Gradient check of the tiny configuration against central differences.
    Selftest {
        /// Check every parameter entry instead of a strided sample.
        #[arg(long)]
        full: bool,
    },
    /// Tokens/sec and frames/sec of the tracker at the tiny and default configs.
    Bench {
        #[arg(long, default_value_t = 10)]
        frames: usize,
    },
}

#[derive(Default)]
struct Settings {
    model: ModelConfig,
    /// Model keys in file order, replayed onto a checkpoint's config.
    model_keys: Vec<(String, String)>,
    train: TrainConfig,
    synth: SceneSpec,
    track: TrackerOptions,
}

fn load_settings(path: Option<&Path>) -> anyhow::Result<Settings> {
    let mut s = Settings::default();
    let Some(path) = path else {
        return Ok(s);
    };
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    for (k, v) in parse_kv(&text)? {
        if let Some(t) = k.strip_prefix("track.") {
            let bad = || CoreError::Config(format!("{k}: cannot parse {v:?}"));
            match t {
                "ntc" => s.track.ntc_enabled = v.parse().map_err(|_| bad())?,
                "window_influence" => s.track.window_influence = v.parse().map_err(|_| bad())?,
                _ => return Err(CoreError::Config(format!("unknown key {k}")).into()),
            }
        } else if !(s.train.apply(&k, &v)? || s.synth.apply(&k, &v)?) {
            if !s.model.apply(&k, &v)? {
                return Err(CoreError::Config(format!("unknown key {k}")).into());
            }
            s.model_keys.push((k, v));
        }
    }
    Ok(s)
}

/// Load a checkpoint and apply the config's model keys to it. Only the
/// calibration band and context factors may differ from the stored config.
fn load_model(path: &Path, settings: &Settings) -> anyhow::Result<Model> {
    let mut model = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = model.cfg.clone();
    for (k, v) in &settings.model_keys {
        cfg.apply(k, v)?;
    }
    let structural = ModelConfig {
        theta_low: model.cfg.theta_low,
        theta_high: model.cfg.theta_high,
        search_context: model.cfg.search_context,
        template_context: model.cfg.template_context,
        ..cfg.clone()
    };
    if structural != model.cfg {
        return Err(CoreError::Config(format!(
            "the config changes the architecture stored in {}; only theta_low, theta_high, \
             search_context and template_context may be overridden",
            path.display()
        ))
        .into());
    }
    cfg.validate()?;
    model.cfg = cfg;
    Ok(model)
}

fn append(path: &Path, text: &str) -> anyhow::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn finish_report(report: &OpeReport, out: Option<&Path>, plot_path: Option<&Path>) -> anyhow::Result<()> {
    for (name, why) in &report.skipped {
        eprintln!("warning: skipped {name}: {why}");
    }
    if let Some(out) = out {
        write_report(out, report)?;
    }
    if let Some(p) = plot_path {
        plot::save(&report.aggregate.curves, p)?;
    }
    print!("{}", report_text(report));
    Ok(())
}

fn dataset(root: &Path) -> anyhow::Result<Vec<SequenceOnDisk>> {
    let (seqs, bad) = discover(root)?;
    for (dir, e) in &bad {
        eprintln!("warning: skipped {}: {e}", dir.display());
    }
    if seqs.is_empty() {
        return Err(EvalError::Data {
            path: root.to_path_buf(),
            msg: "no readable sequences".into(),
        }
        .into());
    }
    Ok(seqs)
}

/// Uniform random pixels: crops of real frames have flat padded regions
/// that can leave a ReLU input within one difference step of zero.
fn random_inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> ModelInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = |side| Tensor::from_fn(&[batch, 3, side, side], |_| rng.random_range(0.0..1.0));
    ModelInputs {
        search: img(cfg.search_size),
        static_template: img(cfg.template_size),
        dynamic_template: img(cfg.template_size),
    }
}

fn selftest(seed: u64, full: bool) -> anyhow::Result<()> {
    let cfg = ModelConfig::tiny();
    let model = Model::new(cfg.clone(), seed)?;
    let target = encode_target(&BoundingBox::new(20.0, 25.0, 14.0, 18.0), cfg.search_size, cfg.search_grid())?;
    let opts = GradCheckOptions {
        max_per_param: if full { None } else { Some(8) },
        ..GradCheckOptions::default()
    };
    let report = check_model_gradients(&model, &random_inputs(&cfg, 1, seed), &[target], &opts, |_| true)?;
    for p in &report.params {
        println!("{:<44} {:>6} checked  max rel err {:.3e}", p.name, p.checked, p.max_rel_err);
    }
    let worst = report.max_rel_err();
    println!(
        "{} entries checked, {} above {:e}, worst relative error {worst:.3e}",
        report.checked(),
        report.failed(),
        opts.tolerance
    );
    if report.failed() > 0 {
        return Err(CoreError::Numerical(format!("gradient check failed: relative error {worst:e}")).into());
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let settings = load_settings(cli.config.as_deref())?;
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(CoreError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let diag = cli.diagnostics.as_deref();
    match cli.command {
        Command::Run { checkpoint, sequence, out } => {
            let model = load_model(&checkpoint, &settings)?;
            let seq = SequenceOnDisk::open(&sequence)?;
            let tracker = ModelTracker {
                model,
                options: settings.track,
            };
            let report = run_ope(&tracker, std::slice::from_ref(&seq), false)?;
            if let Some((_, why)) = report.skipped.first() {
                return Err(EvalError::Data {
                    path: sequence,
                    msg: why.clone(),
                }
                .into());
            }
            let result = &report.sequences[0];
            match out {
                Some(p) => write_boxes(&p, &result.boxes)?,
                None => print!("{}", nighttrack_eval::dataset::format_boxes(&result.boxes)),
            }
            let m = compute_metrics(&result.boxes, &seq.groundtruth)?;
            eprintln!(
                "{}: P {:.4} P_Norm {:.4} AUC {:.4}, {} template updates",
                seq.name,
                m.p,
                m.p_norm,
                m.auc,
                result.update_count()
            );
            if let Some(d) = diag {
                append(d, &decision_log(&report))?;
            }
        }
        Command::Eval { dataset: root, results, out, plot } => {
            let seqs = dataset(&root)?;
            let report = evaluate_results(&results, &seqs)?;
            finish_report(&report, out.as_deref(), plot.as_deref())?;
        }
        Command::Ope {
            checkpoint,
            dataset: root,
            out,
            plot,
            sequential,
        } => {
            let tracker = ModelTracker {
                model: load_model(&checkpoint, &settings)?,
                options: settings.track,
            };
            let seqs = dataset(&root)?;
            let report = run_ope(&tracker, &seqs, !sequential)?;
            finish_report(&report, Some(&out), plot.as_deref())?;
            if let Some(d) = diag {
                append(d, &decision_log(&report))?;
            }
        }
        Command::Train {
            dataset: root,
            out,
            init,
            loss_csv,
        } => {
            let mut cfg = settings.train.clone();
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if cfg.dump_path.is_none() {
                cfg.dump_path = Some(out.with_extension("nan-dump.txt"));
            }
            let mut model = match &init {
                Some(p) => load_model(p, &settings)?,
                None => Model::new(settings.model.clone(), cfg.seed)?,
            };
            let data = dataset(&root)?
                .iter()
                .map(|s| {
                    let l = s.load()?;
                    Ok(TrainSequence::new(l.frames, l.groundtruth)?)
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            let mut log = String::new();
            let report = train(&mut model, &data, &cfg, |r| {
                if r.iteration % 50 == 0 || r.iteration + 1 == cfg.iterations {
                    eprintln!("iter {:>6}  loss {:.5}  ce {:.5}  siou {:.5}", r.iteration, r.loss, r.ce, r.siou);
                }
                if diag.is_some() {
                    log.push_str(&format!("train {} {} {} {}\n", r.iteration, r.loss, r.ce, r.siou));
                }
            })?;
            checkpoint::save(&model, &out)?;
            let csv_path = loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
            std::fs::write(&csv_path, report.loss_csv())?;
            if let Some(d) = diag {
                append(d, &log)?;
            }
            eprintln!("wrote {} and {}", out.display(), csv_path.display());
        }
        Command::Synth { out, sequences, format } => {
            let format = match format {
                Format::Png => FrameFormat::Png,
                Format::Ppm => FrameFormat::Ppm,
            };
            let base = cli.seed.unwrap_or(settings.synth.seed);
            for i in 0..sequences {
                let scene = SceneSpec {
                    seed: base.wrapping_add(i as u64),
                    ..settings.synth.clone()
                };
                let seq = generate(&scene)?;
                let dir = out.join(format!("synth_{i:03}"));
                write_sequence(&dir, &seq.frames, &seq.boxes, Some(&seq.occluded), format)?;
                eprintln!("wrote {} ({} frames)", dir.display(), seq.frames.len());
            }
        }
        Command::Selftest { full } => selftest(cli.seed.unwrap_or(0), full)?,
        Command::Bench { frames } => {
            let seed = cli.seed.unwrap_or(0);
            for (label, cfg) in [("tiny", ModelConfig::tiny()), ("default", ModelConfig::desk())] {
                println!("{}", bench::bench(label, cfg, frames, seed)?);
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return e.exit_code() as u8;
        }
        match cause.downcast_ref::<CoreError>() {
            Some(CoreError::Config(_)) => return 1,
            Some(CoreError::Numerical(_)) => return 3,
            _ => {}
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}


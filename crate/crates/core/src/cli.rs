//! Command-line pipeline: data generation, training, evaluation and replay.
//!
//! Exit status 0 on success, 1 on a domain error (the message names the
//! module whose contract failed), 2 on a usage error. Every artifact is
//! written atomically inside `--out`, next to a `manifest.json` that
//! `replay` can re-run and verify.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{split_base_seed, Config};
use crate::datagen::{
    generate_dataset, pixel_frequencies, Dataset, DatasetManifest, Split, SplitInfo,
};
use crate::error::{Error, Result};
use crate::eval::{self, ErasureSets};
use crate::io::write_atomic;
use crate::manifest::{Manifest, MANIFEST_NAME};
use crate::model::{load_checkpoint_for, save_checkpoint};
use crate::trainer::{self, Mode};

#[derive(Debug, Parser)]
#[command(
    name = "dropclass",
    version,
    about = "Class-dropping segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalOpts,
}

#[derive(Debug, Args)]
struct GlobalOpts {
    /// Flat TOML config (see config/schema.toml).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; wins over the config and DROPCLASS_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train, val and test splits of the synthetic benchmark.
    GenData,
    /// Train a model on the train split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config's mode.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Per-class IoU, mIoU and rare-class mIoU.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// IoU of every class with its three most influential companions erased.
    EraseBench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Rank the erased classes on this model instead.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Cosine similarity between classifier weight rows.
    Correlate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Grad-CAM heat map for one sample and class.
    Gradcam {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Class index or name.
        #[arg(long)]
        class: String,
    },
    /// Finite-difference check of every differentiable op and the objective.
    GradCheck,
    /// Re-run the command recorded in a manifest and verify its outputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// A subcommand with its options resolved; what a manifest records.
#[derive(Clone, Debug, PartialEq)]
enum Task {
    GenData,
    Train {
        data: PathBuf,
    },
    Eval {
        model: PathBuf,
        data: PathBuf,
        split: Split,
    },
    EraseBench {
        model: PathBuf,
        data: PathBuf,
        split: Split,
        reference: Option<PathBuf>,
    },
    Correlate {
        model: PathBuf,
    },
    Gradcam {
        model: PathBuf,
        data: PathBuf,
        split: Split,
        index: usize,
        class: String,
    },
    GradCheck,
}

impl Task {
    fn name(&self) -> &'static str {
        match self {
            Task::GenData => "gen-data",
            Task::Train { .. } => "train",
            Task::Eval { .. } => "eval",
            Task::EraseBench { .. } => "erase-bench",
            Task::Correlate { .. } => "correlate",
            Task::Gradcam { .. } => "gradcam",
            Task::GradCheck => "grad-check",
        }
    }

    fn args(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let p = |p: &Path| p.to_string_lossy().into_owned();
        match self {
            Task::GenData | Task::GradCheck => {}
            Task::Train { data } => put("data", p(data)),
            Task::Eval { model, data, split } => {
                put("model", p(model));
                put("data", p(data));
                put("split", split.as_str().into());
            }
            Task::EraseBench {
                model,
                data,
                split,
                reference,
            } => {
                put("model", p(model));
                put("data", p(data));
                put("split", split.as_str().into());
                if let Some(r) = reference {
                    put("reference", p(r));
                }
            }
            Task::Correlate { model } => put("model", p(model)),
            Task::Gradcam {
                model,
                data,
                split,
                index,
                class,
            } => {
                put("model", p(model));
                put("data", p(data));
                put("split", split.as_str().into());
                put("index", index.to_string());
                put("class", class.clone());
            }
        }
        m
    }

    fn from_args(name: &str, args: &BTreeMap<String, String>) -> Result<Task> {
        let get = |k: &str| {
            args.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("manifest for {name} lacks argument {k:?}")))
        };
        let path = |k: &str| get(k).map(PathBuf::from);
        let split = || get("split").and_then(|s| parse_split(&s));
        Ok(match name {
            "gen-data" => Task::GenData,
            "grad-check" => Task::GradCheck,
            "train" => Task::Train {
                data: path("data")?,
            },
            "eval" => Task::Eval {
                model: path("model")?,
                data: path("data")?,
                split: split()?,
            },
            "erase-bench" => Task::EraseBench {
                model: path("model")?,
                data: path("data")?,
                split: split()?,
                reference: args.get("reference").map(PathBuf::from),
            },
            "correlate" => Task::Correlate {
                model: path("model")?,
            },
            "gradcam" => Task::Gradcam {
                model: path("model")?,
                data: path("data")?,
                split: split()?,
                index: get("index")?
                    .parse()
                    .map_err(|_| Error::Config("manifest index is not an integer".into()))?,
                class: get("class")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "manifest names unknown command {other:?}"
                )))
            }
        })
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Task::GenData | Task::GradCheck => vec![],
            Task::Train { data } => vec![data],
            Task::Eval { model, data, .. } | Task::Gradcam { model, data, .. } => vec![model, data],
            Task::EraseBench {
                model,
                data,
                reference,
                ..
            } => {
                let mut v: Vec<&Path> = vec![model, data];
                v.extend(reference.as_deref());
                v
            }
            Task::Correlate { model } => vec![model],
        }
    }
}

struct Run {
    task: Task,
    config: Config,
    seed: u64,
    threads: usize,
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.global.verbose);
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            2
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error [{}]: {e}", e.module());
            1
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    log::set_max_level(level);
}

fn dispatch(cli: Cli) -> std::result::Result<(), Failure> {
    let g = cli.global;
    if g.threads == 0 {
        return Err(Failure::Usage("--threads must be >= 1".into()));
    }
    if g.threads > 1 {
        log::warn!("--threads {} > 1: data generation and evaluation run in parallel; results stay deterministic but timing-dependent logging may reorder", g.threads);
    }

    if let Command::Replay { manifest } = &cli.command {
        if g.config.is_some() || g.seed.is_some() {
            return Err(Failure::Usage(
                "replay takes its config and seed from the manifest".into(),
            ));
        }
        let out = g
            .out
            .ok_or_else(|| Failure::Usage("replay needs --out".into()))?;
        return in_pool(g.threads, || replay(manifest, &out)).map_err(Failure::from);
    }

    if g.out.is_none() && !matches!(cli.command, Command::GradCheck) {
        return Err(Failure::Usage("this command needs --out".into()));
    }
    let mut config = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let seed = config.resolve_seed(g.seed)?;
    config.seed = Some(seed);

    let task = match cli.command {
        Command::GenData => Task::GenData,
        Command::Train { data, mode } => {
            if let Some(m) = mode {
                config.mode = Mode::parse(&m).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            Task::Train {
                data: absolute(&data)?,
            }
        }
        Command::Eval { model, data, split } => Task::Eval {
            model: absolute(&model)?,
            data: absolute(&data)?,
            split: parse_split(&split).map_err(|e| Failure::Usage(e.to_string()))?,
        },
        Command::EraseBench {
            model,
            data,
            split,
            reference,
        } => Task::EraseBench {
            model: absolute(&model)?,
            data: absolute(&data)?,
            split: parse_split(&split).map_err(|e| Failure::Usage(e.to_string()))?,
            reference: reference.as_deref().map(absolute).transpose()?,
        },
        Command::Correlate { model } => Task::Correlate {
            model: absolute(&model)?,
        },
        Command::Gradcam {
            model,
            data,
            split,
            index,
            class,
        } => Task::Gradcam {
            model: absolute(&model)?,
            data: absolute(&data)?,
            split: parse_split(&split).map_err(|e| Failure::Usage(e.to_string()))?,
            index,
            class,
        },
        Command::GradCheck => Task::GradCheck,
        Command::Replay { .. } => unreachable!("handled above"),
    };
    let run = Run {
        task,
        config,
        seed,
        threads: g.threads,
        out: g.out,
    };
    in_pool(run.threads, || execute(&run).map(|_| ())).map_err(Failure::from)
}

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(f)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "unknown split {other:?} (train | val | test)"
        ))),
    }
}

/// Runs the task, writes its outputs and manifest, and returns the manifest.
fn execute(run: &Run) -> Result<Option<Manifest>> {
    let mut manifest = Manifest::new(
        run.task.name(),
        run.task.args(),
        run.config.to_text(),
        run.seed,
        run.threads,
    );
    for p in run.task.inputs() {
        manifest.add_input(p)?;
    }
    let outputs = match &run.task {
        Task::GenData => gen_data(run)?,
        Task::Train { data } => train(run, data)?,
        Task::Eval { model, data, split } => eval_cmd(run, model, data, *split)?,
        Task::EraseBench {
            model,
            data,
            split,
            reference,
        } => erase_bench(run, model, data, *split, reference.as_deref())?,
        Task::Correlate { model } => correlate(run, model)?,
        Task::Gradcam {
            model,
            data,
            split,
            index,
            class,
        } => gradcam(run, model, data, *split, *index, class)?,
        Task::GradCheck => grad_check(run)?,
    };
    let Some(out) = &run.out else {
        return Ok(None);
    };
    for rel in outputs {
        manifest.add_output(out, Path::new(rel))?;
    }
    let path = manifest.save(out)?;
    log::info!("wrote {}", path.display());
    Ok(Some(manifest))
}

fn out_dir(run: &Run) -> &Path {
    run.out.as_deref().expect("--out checked before execution")
}

fn gen_data(run: &Run) -> Result<Vec<&'static str>> {
    let out = out_dir(run);
    let spec = run.config.scene()?;
    let mut ds_manifest = DatasetManifest::new(spec.clone());
    for split in [Split::Train, Split::Val, Split::Test] {
        let n = run.config.sample_count(split);
        let base_seed = split_base_seed(run.seed, split);
        let ds = generate_dataset(&spec, n, base_seed, split)?;
        let split_dir = out.join(split.as_str());
        if split_dir.exists() {
            std::fs::remove_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        }
        ds.save(out)?;
        ds_manifest.splits.insert(
            split.as_str().into(),
            SplitInfo {
                count: n,
                base_seed,
            },
        );
        log::info!("{}: {n} samples", split.as_str());
    }
    ds_manifest.save(out)?;
    println!(
        "generated {} / {} / {} samples in {}",
        run.config.train_samples,
        run.config.val_samples,
        run.config.test_samples,
        out.display()
    );
    Ok(vec![crate::datagen::MANIFEST_FILE, "train", "val", "test"])
}

fn train(run: &Run, data: &Path) -> Result<Vec<&'static str>> {
    let out = out_dir(run);
    let dataset = Dataset::load(data, Split::Train)?;
    let mut cfg = run.config.train_config(run.config.mode, run.seed)?;
    cfg.model.num_classes = dataset.num_classes();
    cfg.dump_dir = Some(out.join("nonfinite"));
    let model = crate::model::init_model(&cfg.model, cfg.seed)?;
    let every = (cfg.iterations / 20).max(1);
    let report = trainer::train_from(&dataset, &cfg, model, |row| {
        if row.iteration % every == 0 {
            log::info!(
                "step {} l_total {:.5} lambda {:.3}",
                row.iteration,
                row.breakdown.l_total,
                row.lambda
            );
        }
    })?;
    save_checkpoint(&report.model, &out.join("model.dcm1"))?;
    write_atomic(
        &out.join("trace.csv"),
        trainer::trace_csv(&report.trace).as_bytes(),
    )?;
    let last = report.trace.last().expect("at least one step");
    println!(
        "trained {} for {} steps in {:.1}s; final l_total {}",
        cfg.mode.as_str(),
        cfg.iterations,
        report.wall_clock.as_secs_f64(),
        last.breakdown.l_total
    );
    Ok(vec!["model.dcm1", "trace.csv"])
}

/// Training-split frequencies and mean colour, or those of `fallback` when
/// the dataset has no train split.
fn train_stats(data: &Path, fallback: &Dataset) -> Result<(Vec<f64>, [f32; 3])> {
    let manifest = DatasetManifest::load(data)?;
    if manifest.splits.contains_key(Split::Train.as_str()) {
        let train = Dataset::load(data, Split::Train)?;
        Ok((pixel_frequencies(&train), train.mean_color()))
    } else {
        log::warn!(
            "{} has no train split; using the evaluated split's statistics",
            data.display()
        );
        Ok((pixel_frequencies(fallback), fallback.mean_color()))
    }
}

fn class_names(ds: &Dataset) -> Vec<String> {
    ds.spec.classes.iter().map(|c| c.name.clone()).collect()
}

fn eval_cmd(run: &Run, model: &Path, data: &Path, split: Split) -> Result<Vec<&'static str>> {
    let ds = Dataset::load(data, split)?;
    let model = load_checkpoint_for(model, ds.num_classes())?;
    let (freqs, _) = train_stats(data, &ds)?;
    let report = eval::evaluate(&model, &ds)?.with_frequencies(&freqs)?;
    write_atomic(
        &out_dir(run).join("iou.csv"),
        eval::iou_csv(&report, &class_names(&ds)).as_bytes(),
    )?;
    println!(
        "mIoU {:.4}  mIoU_dagger {}",
        report.miou,
        report
            .miou_dagger
            .map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(vec!["iou.csv"])
}

fn erase_bench(
    run: &Run,
    model: &Path,
    data: &Path,
    split: Split,
    reference: Option<&Path>,
) -> Result<Vec<&'static str>> {
    let ds = Dataset::load(data, split)?;
    let model = load_checkpoint_for(model, ds.num_classes())?;
    let (_, fill) = train_stats(data, &ds)?;
    let sets: Option<ErasureSets> = match reference {
        Some(r) => {
            let reference = load_checkpoint_for(r, ds.num_classes())?;
            Some(eval::erasure_benchmark(&reference, &ds, fill, None)?.sets)
        }
        None => None,
    };
    let report = eval::erasure_benchmark(&model, &ds, fill, sets.as_ref())?;
    write_atomic(
        &out_dir(run).join("erasure.csv"),
        eval::erasure_csv(&report, &class_names(&ds)).as_bytes(),
    )?;
    println!(
        "mIoU intact {:.4}  erased {:.4}",
        report.miou_intact, report.miou_erased
    );
    Ok(vec!["erasure.csv"])
}

fn correlate(run: &Run, model: &Path) -> Result<Vec<&'static str>> {
    let model = crate::model::load_checkpoint(model)?;
    let report = eval::weight_correlation(&model)?;
    let names: Vec<String> = crate::datagen::SceneSpec::default_benchmark()
        .classes
        .iter()
        .map(|c| c.name.clone())
        .collect();
    let names = if names.len() == model.num_classes() {
        names
    } else {
        Vec::new()
    };
    write_atomic(
        &out_dir(run).join("correlation.csv"),
        eval::correlation_csv(&report, &names).as_bytes(),
    )?;
    println!(
        "mean row-wise off-diagonal cosine sum {:.4}",
        report.mean_row_sum()
    );
    Ok(vec!["correlation.csv"])
}

fn gradcam(
    run: &Run,
    model: &Path,
    data: &Path,
    split: Split,
    index: usize,
    class: &str,
) -> Result<Vec<&'static str>> {
    let ds = Dataset::load(data, split)?;
    let model = load_checkpoint_for(model, ds.num_classes())?;
    let sample = ds.samples.get(index).ok_or_else(|| {
        Error::Config(format!(
            "sample index {index} out of range for {} samples",
            ds.len()
        ))
    })?;
    let c = match class.parse::<usize>() {
        Ok(c) => c,
        Err(_) => ds
            .spec
            .classes
            .iter()
            .position(|s| s.name == class)
            .ok_or_else(|| Error::Config(format!("unknown class {class:?}")))?,
    };
    let (pgm, _) =
        eval::export_gradcam(&model, &sample.image, c, &out_dir(run).join("gradcam.pgm"))?;
    println!("wrote {}", pgm.display());
    Ok(vec!["gradcam.pgm", "gradcam.csv"])
}

fn grad_check(run: &Run) -> Result<Vec<&'static str>> {
    let report = crate::gradcheck::run_suite(run.seed, run.config.gradcheck_coords)?;
    let mut csv = String::from("check,coordinates,within_tolerance,max_relative_error,passed\n");
    for c in &report.checks {
        println!(
            "{} {:<32} {:>3}/{:<3} within tolerance, max rel err {:.3e}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.within_tolerance,
            c.coordinates,
            c.max_relative_error
        );
        writeln!(
            csv,
            "{},{},{},{:e},{}",
            c.name,
            c.coordinates,
            c.within_tolerance,
            c.max_relative_error,
            c.passed()
        )
        .expect("string write");
    }
    let mut outputs = Vec::new();
    if let Some(out) = &run.out {
        write_atomic(&out.join("gradcheck.csv"), csv.as_bytes())?;
        outputs.push("gradcheck.csv");
    }
    let failed = report.checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(Error::contract(
            "grad_check",
            format!("{failed} of {} checks failed", report.checks.len()),
        ));
    }
    Ok(outputs)
}

fn replay(manifest_path: &Path, out: &Path) -> Result<()> {
    let recorded = Manifest::load(manifest_path)?;
    recorded.verify_inputs()?;
    let task = Task::from_args(&recorded.command, &recorded.args)?;
    let config = Config::parse(&recorded.config)?;
    if let Ok(existing) = std::fs::canonicalize(out) {
        let source = std::fs::canonicalize(manifest_path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| Error::io(manifest_path, e))?;
        if existing == source {
            return Err(Error::Config(
                "replay --out must differ from the recorded run's directory".into(),
            ));
        }
    }
    let run = Run {
        task,
        config,
        seed: recorded.seed,
        threads: recorded.threads,
        out: Some(out.to_path_buf()),
    };
    execute(&run)?;
    recorded.verify_outputs(out)?;
    println!(
        "replay of {} reproduced {} output(s) bit for bit ({})",
        recorded.command,
        recorded.outputs.len(),
        out.join(MANIFEST_NAME).display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_args_round_trip() {
        let tasks = [
            Task::GenData,
            Task::GradCheck,
            Task::Train { data: "/d".into() },
            Task::Eval {
                model: "/m".into(),
                data: "/d".into(),
                split: Split::Test,
            },
            Task::EraseBench {
                model: "/m".into(),
                data: "/d".into(),
                split: Split::Val,
                reference: Some("/r".into()),
            },
            Task::EraseBench {
                model: "/m".into(),
                data: "/d".into(),
                split: Split::Val,
                reference: None,
            },
            Task::Correlate { model: "/m".into() },
            Task::Gradcam {
                model: "/m".into(),
                data: "/d".into(),
                split: Split::Train,
                index: 3,
                class: "rider".into(),
            },
        ];
        for t in tasks {
            assert_eq!(Task::from_args(t.name(), &t.args()).unwrap(), t);
        }
        assert!(Task::from_args("dance", &BTreeMap::new()).is_err());
        assert!(Task::from_args("eval", &BTreeMap::new()).is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["dropclass"]), 2);
        assert_eq!(run(["dropclass", "frobnicate"]), 2);
        assert_eq!(run(["dropclass", "gen-data"]), 2);
        assert_eq!(
            run(["dropclass", "gen-data", "--out", "x", "--seed", "abc"]),
            2
        );
        assert_eq!(
            run(["dropclass", "gen-data", "--out", "x", "--threads", "0"]),
            2
        );
        assert_eq!(run(["dropclass", "--help"]), 0);
    }

    #[test]
    fn missing_input_is_a_domain_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run([
            "dropclass",
            "correlate",
            "--model",
            dir.path().join("nope.dcm1").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
        assert!(!out.exists());
    }

    #[test]
    fn split_names() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(parse_split(s.as_str()).unwrap(), s);
        }
        assert!(parse_split("holdout").is_err());
    }
}

//! The `nommer` command-line tool.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::cka_heatmap;
use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::fsutil::write_atomic;
use crate::image::{encode_pgm, read_ppm, write_nomination_map};
use crate::model::checkpoint;
use crate::model::{predict, Model, RunConfig, Task};
use crate::nominator::NominationMode;
use crate::suite::gradient_suite;
use crate::train::{log_csv, sample, train, Dataset};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "NOMMER_THREADS";

/// Side length in pixels of one heatmap cell in `cka.pgm`.
const HEATMAP_CELL: usize = 16;

#[derive(Parser, Debug)]
#[command(name = "nommer", version, about = "NomMer vision transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Seeds parameter initialisation, synthetic inputs and noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for written artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    /// Hard argmax nomination, no noise.
    Eval,
    /// Hard Gumbel sample forward, soft gradient.
    Train,
    /// Soft Gumbel relaxation.
    Soft,
}

impl From<ModeArg> for NominationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Eval => NominationMode::Hard,
            ModeArg::Train => NominationMode::StraightThrough,
            ModeArg::Soft => NominationMode::Soft,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Forward one image and print its logits.
    Forward {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Binary PPM input; a synthetic image is used when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Writes one nomination map per S-NomMer layer into this directory.
        #[arg(long)]
        emit_nommaps: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Eval)]
        mode: ModeArg,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a synthetic task and save a checkpoint plus log.
    TrainToy {
        #[command(flatten)]
        common: Common,
        /// `stripes` or `quadrants`; overrides the config.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value_t = ModeArg::Train)]
        mode: ModeArg,
    },
    /// Print the parameter table.
    Params {
        #[command(flatten)]
        common: Common,
        /// Expected total, e.g. `22e6` or `22M`.
        #[arg(long)]
        expect: Option<String>,
        /// Tolerance in percent around `--expect`.
        #[arg(long, default_value_t = 15.0)]
        tol: f64,
    },
    /// Pairwise CKA between block outputs over a probe batch.
    Cka {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        probes: Option<usize>,
    },
}

fn out(w: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    w.write_all(text.as_ref().as_bytes())
        .map_err(|e| NomError::io("<stdout>", e))
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn load_model(run: &RunConfig, ckpt: Option<&Path>, seed: u64) -> Result<Model> {
    match ckpt {
        Some(p) => checkpoint::load(p, run.model.clone()),
        None => Model::build(run.model.clone(), seed),
    }
}

/// Parses `22e6`, `22000000` or `22M`.
pub fn parse_count(s: &str) -> Result<f64> {
    let t = s.trim();
    let (num, mult) = match t.strip_suffix(['M', 'm']) {
        Some(n) => (n, 1e6),
        None => (t, 1.0),
    };
    num.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite() && *v > 0.0)
        .map(|v| v * mult)
        .ok_or_else(|| NomError::config("--expect", format!("not a positive count: `{s}`")))
}

pub fn cmd_forward(
    run: &RunConfig,
    common: &Common,
    ckpt: Option<&Path>,
    image: Option<&Path>,
    nommaps: Option<&Path>,
    mode: NominationMode,
    w: &mut dyn Write,
) -> Result<()> {
    let model = load_model(run, ckpt, common.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let input = match image {
        Some(p) => read_ppm(p)?,
        None => sample(run.train.task, run.model.image_size, &mut rng).0,
    };
    let noise = (mode != NominationMode::Hard).then_some(&mut rng as &mut dyn rand::RngCore);
    let res = model.forward(&Var::constant(input), mode, noise)?;
    let logits = res.logits.value();
    let csv: Vec<String> = logits.data().iter().map(|v| format!("{v:.17e}")).collect();
    out(w, format!("class {}\nlogits {}\n", predict(logits), csv.join(",")))?;
    if let Some(dir) = &common.out {
        let mut text = String::from("class,logit\n");
        for (i, v) in csv.iter().enumerate() {
            text.push_str(&format!("{i},{v}\n"));
        }
        write_atomic(&dir.join("logits.csv"), text.as_bytes())?;
    }
    if let Some(dir) = nommaps {
        for n in &res.nominations {
            let path = dir.join(format!("{}.ppm", n.file_stem()));
            write_nomination_map(&n.map, &path)?;
            let [l, c, g] = n.map.counts();
            out(w, format!("{} local={l} cnn={c} global={g}\n", path.display()))?;
        }
    }
    Ok(())
}

pub fn cmd_gradcheck(run: &RunConfig, common: &Common, w: &mut dyn Write) -> Result<()> {
    let results = gradient_suite(common.seed, &run.model)?;
    let mut csv = String::from("unit,max_rel_error,max_abs_error,checked,passed\n");
    for r in &results {
        let verdict = if r.report.passed { "PASS" } else { "FAIL" };
        out(
            w,
            format!(
                "{:<18} max_rel={:.3e} checked={:<4} {verdict}\n",
                r.name, r.report.max_rel_error, r.report.checked
            ),
        )?;
        csv.push_str(&format!(
            "{},{:e},{:e},{},{}\n",
            r.name, r.report.max_rel_error, r.report.max_abs_error, r.report.checked, r.report.passed
        ));
    }
    if let Some(dir) = &common.out {
        write_atomic(&dir.join("gradcheck.csv"), csv.as_bytes())?;
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.report.passed)
        .map(|r| r.name.as_str())
        .collect();
    out(w, format!("{} of {} units passed\n", results.len() - failed.len(), results.len()))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(NomError::CheckFailed(format!("failing units: {}", failed.join(", "))))
    }
}

pub fn cmd_train_toy(
    run: &RunConfig,
    common: &Common,
    task: Option<&str>,
    steps: Option<usize>,
    mode: NominationMode,
    w: &mut dyn Write,
) -> Result<()> {
    let mut cfg = run.train.clone();
    if let Some(t) = task {
        cfg.task = Task::parse(t)?;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let model = Model::build(run.model.clone(), common.seed)?;
    let outcome = train(model, &cfg, mode, common.seed)?;
    for r in outcome.log.iter().filter(|r| r.step % 50 == 0 || r.step == 1) {
        out(
            w,
            format!(
                "step {:>5} loss {:.6} smoothed {:.6} batch_acc {:.3}\n",
                r.step, r.loss, r.smoothed_loss, r.accuracy
            ),
        )?;
    }
    out(w, format!("final train accuracy {:.4}\n", outcome.final_accuracy))?;
    let dir = out_dir(common);
    write_atomic(&dir.join("train_log.csv"), log_csv(&outcome.log).as_bytes())?;
    checkpoint::save(&outcome.model, &dir.join("checkpoint.bin"))?;
    Ok(())
}

pub fn cmd_params(run: &RunConfig, expect: Option<&str>, tol: f64, w: &mut dyn Write) -> Result<()> {
    let model = Model::build(run.model.clone(), 0)?;
    let mut text = format!("{:<20} {:>12}\n", "module", "params");
    for (name, n) in model.param_table() {
        text.push_str(&format!("{name:<20} {n:>12}\n"));
    }
    let total = model.count_params();
    text.push_str(&format!("{:<20} {total:>12}\n", "total"));
    out(w, text)?;
    if let Some(e) = expect {
        let target = parse_count(e)?;
        if !(tol >= 0.0 && tol.is_finite()) {
            return Err(NomError::config("--tol", "must be a nonnegative percentage"));
        }
        let dev = 100.0 * (total as f64 - target) / target;
        let ok = dev.abs() <= tol;
        out(
            w,
            format!(
                "expected {target:.0} ±{tol}%: deviation {dev:+.2}% {}\n",
                if ok { "PASS" } else { "FAIL" }
            ),
        )?;
        if !ok {
            return Err(NomError::CheckFailed(format!(
                "{total} parameters is {dev:+.2}% from {target:.0}"
            )));
        }
    }
    Ok(())
}

pub fn cmd_cka(
    run: &RunConfig,
    common: &Common,
    ckpt: Option<&Path>,
    probes: Option<usize>,
    w: &mut dyn Write,
) -> Result<()> {
    let n = probes.unwrap_or(run.train.probes);
    if n < 2 {
        return Err(NomError::config("--probes", "CKA needs at least 2 probe images"));
    }
    let model = load_model(run, ckpt, common.seed)?;
    let data = Dataset::generate(run.train.task, run.model.image_size, n, common.seed);
    let heat = cka_heatmap(&model, &data.images)?;
    let csv = heat.to_csv();
    out(w, &csv)?;
    let dir = out_dir(common);
    write_atomic(&dir.join("cka.csv"), csv.as_bytes())?;
    let l = heat.len();
    let gray = heat.to_gray();
    let side = l * HEATMAP_CELL;
    let px: Vec<u8> = (0..side * side)
        .map(|k| gray[(k / side / HEATMAP_CELL) * l + (k % side) / HEATMAP_CELL])
        .collect();
    write_atomic(&dir.join("cka.pgm"), &encode_pgm(side, side, &px)?)?;
    Ok(())
}

/// Applies `NOMMER_THREADS` to the global worker pool.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| NomError::config(THREADS_ENV, format!("expected a positive integer, got `{v}`")))?;
    // a pool that already exists keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli, w: &mut dyn Write) -> Result<()> {
    let (common, load) = match &cli.command {
        Command::Forward { common, .. }
        | Command::Gradcheck { common }
        | Command::TrainToy { common, .. }
        | Command::Params { common, .. }
        | Command::Cka { common, .. } => (common, RunConfig::load(&common.config)),
    };
    let run = load?;
    match &cli.command {
        Command::Forward {
            checkpoint,
            image,
            emit_nommaps,
            mode,
            ..
        } => cmd_forward(
            &run,
            common,
            checkpoint.as_deref(),
            image.as_deref(),
            emit_nommaps.as_deref(),
            (*mode).into(),
            w,
        ),
        Command::Gradcheck { .. } => cmd_gradcheck(&run, common, w),
        Command::TrainToy {
            task, steps, mode, ..
        } => cmd_train_toy(&run, common, task.as_deref(), *steps, (*mode).into(), w),
        Command::Params { expect, tol, .. } => cmd_params(&run, expect.as_deref(), *tol, w),
        Command::Cka {
            checkpoint, probes, ..
        } => cmd_cka(&run, common, checkpoint.as_deref(), *probes, w),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(stdout, "{e}")
            } else {
                write!(stderr, "{e}")
            };
            return code;
        }
    };
    let result = init_threads().and_then(|_| execute(&cli, stdout));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

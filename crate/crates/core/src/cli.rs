//! Command-line front end. `run` does all the work so it can be driven from
//! tests; the binary only maps errors to exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::alignment::{token_ot_distance, AlignConfig, CostMode, PromptSet, Side};
use crate::classifier::{classify, ClassBank};
use crate::error::{Error, Result};
use crate::io::{
    format_f64, read_labels_csv, read_matrix_csv, read_vector_csv, write_matrix_csv, write_params_csv,
    write_table_csv, EmbeddingFile, RunConfig, DEFAULT_RUN_CONFIG,
};
use crate::ot::{sinkhorn, CostMatrix, DiscreteMeasure, SinkhornSettings};
use crate::trainer::{ablate_beta, generate_task, train, ToyBackbone};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "TOKALIGN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tokalign", version, about = "Hierarchical entropic OT for prompt alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct SolverArgs {
    /// Entropic regularization weight.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Sinkhorn iteration cap.
    #[arg(long = "max-iter", default_value_t = 100)]
    pub max_iter: usize,
    /// L1 marginal violation accepted as converged.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Plain Sinkhorn iterations (no warm start, no Newton steps).
    #[arg(long)]
    pub plain: bool,
}

impl SolverArgs {
    fn settings(&self) -> Result<SinkhornSettings> {
        let mut s = SinkhornSettings::new(self.lambda, self.max_iter, self.tol)?;
        s.accelerated = !self.plain;
        Ok(s)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one entropic OT problem from CSV files.
    Sinkhorn {
        /// Cost matrix (headerless CSV).
        cost: PathBuf,
        /// Source weights (one row or one column).
        a: PathBuf,
        /// Target weights.
        b: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        /// Where to write the transport plan.
        #[arg(long, default_value = "plan.csv")]
        plan: PathBuf,
    },
    /// Classify every image prompt set against a class bank.
    Classify {
        /// Image-side embedding file.
        images: PathBuf,
        /// Class-side embedding file.
        classes: PathBuf,
        /// Softmax temperature.
        #[arg(long, default_value_t = 0.01)]
        tau: f64,
        /// Weight of the token-level distance.
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// `additive` or `convex`.
        #[arg(long = "cost-mode", default_value = "additive")]
        cost_mode: CostMode,
        #[command(flatten)]
        solver: SolverArgs,
        /// True class index per image, one per line.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train prompts on a synthetic task described by a TOML config.
    TrainToy {
        /// Run configuration (see `tokalign config`).
        config: PathBuf,
        /// Output directory for history.csv, initial_params.csv and params.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Export the token-level plan of one (image prompt, class prompt) pair.
    PlanExport {
        images: PathBuf,
        classes: PathBuf,
        /// Image index in the image file.
        #[arg(long)]
        image: usize,
        /// Class index in the class file.
        #[arg(long = "class")]
        class: usize,
        /// Image prompt index and class prompt index, as `m,n`.
        #[arg(long = "prompt-pair", value_parser = parse_pair)]
        prompt_pair: (usize, usize),
        #[command(flatten)]
        solver: SolverArgs,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per β in convex cost mode and report final accuracies.
    Ablate {
        config: PathBuf,
        /// Comma-separated β values in [0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<f64>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default run configuration.
    Config,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (m, n) = s.split_once(',').ok_or_else(|| format!("expected m,n, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((p(m)?, p(n)?))
}

/// Reads the thread count from the environment. `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{THREADS_ENV}: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn write_output(out: Option<&Path>, stdout: &mut dyn Write, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| Error::io(path, e)),
        None => stdout.write_all(bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn read_sets(path: &Path, side: Side) -> Result<Vec<PromptSet>> {
    let file = EmbeddingFile::read(path)?;
    if file.side != side {
        return Err(Error::io(
            path,
            format!("expected {side:?} embeddings, found {:?}", file.side).to_lowercase(),
        ));
    }
    file.to_prompt_sets().map_err(|e| Error::io(path, e))
}

fn load_pair(images: &Path, classes: &Path) -> Result<(Vec<PromptSet>, ClassBank)> {
    let images_sets = read_sets(images, Side::Image)?;
    let bank = ClassBank::unnamed(read_sets(classes, Side::Class)?).map_err(|e| Error::io(classes, e))?;
    if images_sets[0].dim() != bank.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} has dimension {}, {} has {}",
            images.display(),
            images_sets[0].dim(),
            classes.display(),
            bank.dim()
        )));
    }
    Ok((images_sets, bank))
}

fn run_sinkhorn(cost: &Path, a: &Path, b: &Path, solver: &SolverArgs, plan: &Path, stdout: &mut dyn Write) -> Result<()> {
    let c = CostMatrix::new(read_matrix_csv(cost)?).map_err(|e| Error::io(cost, e))?;
    let a = DiscreteMeasure::new(read_vector_csv(a)?.into_vec()).map_err(|e| Error::io(a, e))?;
    let b = DiscreteMeasure::new(read_vector_csv(b)?.into_vec()).map_err(|e| Error::io(b, e))?;
    let sol = sinkhorn(&a, &b, &c, &solver.settings()?)?;
    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, sol.plan.matrix())?;
    fs::write(plan, buf).map_err(|e| Error::io(plan, e))?;
    writeln!(
        stdout,
        "cost={}\niterations={}\nviolation={}\nconverged={}",
        format_f64(sol.transport_cost),
        sol.plan.iterations_used(),
        format_f64(sol.plan.marginal_violation()),
        sol.plan.is_converged()
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn run_classify(
    images: &Path,
    classes: &Path,
    align: &AlignConfig,
    labels: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let (sets, bank) = load_pair(images, classes)?;
    let labels = labels
        .map(|path| {
            let l = read_labels_csv(path)?;
            if l.len() != sets.len() {
                return Err(Error::io(path, format!("{} labels for {} images", l.len(), sets.len())));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= bank.len()) {
                return Err(Error::io(path, format!("label {bad} out of range for {} classes", bank.len())));
            }
            Ok(l)
        })
        .transpose()?;
    let predictions = sets
        .par_iter()
        .map(|s| classify(s, &bank, align))
        .collect::<Result<Vec<_>>>()?;

    let header: Vec<String> = ["image_index", "predicted_class"]
        .into_iter()
        .map(String::from)
        .chain((1..=bank.len()).map(|k| format!("p_{k}")))
        .collect();
    let rows: Vec<Vec<String>> = predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            [i.to_string(), p.argmax.to_string()]
                .into_iter()
                .chain(p.probabilities.iter().map(|&x| format_f64(x)))
                .collect()
        })
        .collect();
    let mut buf = Vec::new();
    write_table_csv(&mut buf, &header, &rows)?;
    if let Some(labels) = labels {
        let hits = predictions.iter().zip(&labels).filter(|(p, &y)| p.argmax == y).count();
        writeln!(buf, "accuracy={}", format_f64(hits as f64 / labels.len() as f64)).expect("write to Vec");
    }
    write_output(None, stdout, &buf)
}

fn run_train(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::read(config)?;
    let task = generate_task(&cfg.task)?;
    let backbone = ToyBackbone::new(cfg.task.input_dim, &cfg.backbone)?;
    let params = cfg.initial_params()?;
    let outcome = train(&backbone, &task, &params, &cfg.train_config()?)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows: Vec<Vec<String>> = outcome
        .history
        .iter()
        .map(|r| vec![r.epoch.to_string(), format_f64(r.loss), format_f64(r.test_accuracy)])
        .collect();
    let header = ["epoch", "loss", "test_accuracy"].map(String::from);
    let mut files = Vec::new();
    let mut history = Vec::new();
    write_table_csv(&mut history, &header, &rows)?;
    files.push(("history.csv", history));
    for (name, p) in [("initial_params.csv", &params), ("params.csv", &outcome.params)] {
        let mut buf = Vec::new();
        write_params_csv(&mut buf, p)?;
        files.push((name, buf));
    }
    for (name, bytes) in files {
        let path = out.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_plan_export(
    images: &Path,
    classes: &Path,
    image: usize,
    class: usize,
    (m, n): (usize, usize),
    solver: &SolverArgs,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let (sets, bank) = load_pair(images, classes)?;
    let range = |what: &str, i: usize, len: usize| {
        if i < len {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("{what} index {i} out of range (0..{len})")))
        }
    };
    range("image", image, sets.len())?;
    range("class", class, bank.len())?;
    let (img, cls) = (&sets[image], &bank.classes()[class]);
    range("image prompt", m, img.len())?;
    range("class prompt", n, cls.len())?;
    let align = AlignConfig {
        sinkhorn: solver.settings()?,
        ..AlignConfig::default()
    };
    let ot = token_ot_distance(&img.prompts()[m], &cls.prompts()[n], &align)?;
    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, ot.plan().matrix())?;
    write_output(out, stdout, &buf)
}

fn run_ablate(config: &Path, betas: &[f64], out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::read(config)?;
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(Error::InvalidInput(format!("convex cost mode needs beta in [0, 1], got {b}")));
    }
    let task = generate_task(&cfg.task)?;
    let backbone = ToyBackbone::new(cfg.task.input_dim, &cfg.backbone)?;
    let params = cfg.initial_params()?;
    let rows = ablate_beta(&backbone, &task, &params, betas, &cfg.train_config()?)?;
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![format_f64(r.beta), format_f64(r.accuracy)])
        .collect();
    let mut buf = Vec::new();
    write_table_csv(&mut buf, &["beta", "accuracy"].map(String::from), &rows)?;
    write_output(out, stdout, &buf)
}

/// Executes one parsed command, writing results to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Sinkhorn { cost, a, b, solver, plan } => run_sinkhorn(cost, a, b, solver, plan, stdout),
        Command::Classify {
            images,
            classes,
            tau,
            beta,
            cost_mode,
            solver,
            labels,
        } => {
            let align = AlignConfig {
                beta: *beta,
                tau: *tau,
                sinkhorn: solver.settings()?,
                cost_mode: *cost_mode,
            };
            align.validate()?;
            run_classify(images, classes, &align, labels.as_deref(), stdout)
        }
        Command::TrainToy { config, out } => run_train(config, out),
        Command::PlanExport {
            images,
            classes,
            image,
            class,
            prompt_pair,
            solver,
            out,
        } => run_plan_export(images, classes, *image, *class, *prompt_pair, solver, out.as_deref(), stdout),
        Command::Ablate { config, betas, out } => run_ablate(config, betas, out.as_deref(), stdout),
        Command::Config => write_output(None, stdout, DEFAULT_RUN_CONFIG.as_bytes()),
    }
}

/// Runs `cli` on a pool sized from [`THREADS_ENV`] (rayon's default when
/// unset).
pub fn run_with_env_threads(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads_from_env()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let mut buf = Vec::new();
    let result = pool.install(|| run(cli, &mut buf));
    stdout.write_all(&buf).map_err(|e| Error::io("<stdout>", e))?;
    result
}

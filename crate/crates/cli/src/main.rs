use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demolearn::analysis::{
    ablate_random_labels, attention_probe, evaluate, probe_table, Direction,
};
use demolearn::backbone::{load_checkpoint, save_checkpoint, Backbone};
use demolearn::corpus::save_dataset;
use demolearn::corpus::synthetic::{generate, SyntheticConfig};
use demolearn::io::{append_line, write_atomic};
use demolearn::kv::KeyValues;
use demolearn::pipeline::Experiment;
use demolearn::training::{
    grid_search, multi_seed_run_with, split_for_seed, GridSpace, TrainConfig,
};
use demolearn::Error;
use serde::Serialize;

mod settings;

use settings::{load_manifest, Settings, TaskFile};

#[derive(Parser)]
#[command(
    name = "demolearn",
    version,
    about = "Few-shot demonstration learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-seed few-shot train/dev splits.
    Prepare(Common),
    /// Train one model per seed and report mean (variance).
    Train(Common),
    /// Evaluate a checkpoint on the test set.
    Eval(Common),
    /// Compare gold-label and random-label demonstrations.
    Ablate(Common),
    /// Attention mass between demonstrations and prompt, relative to initialization.
    Probe(Common),
    /// Search alpha x beta x temperature on the dev split.
    Grid(Common),
    /// Write a planted-keyword task (data, template, verbalizer, manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` file; flags below take precedence over it.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    verbalizer: Option<PathBuf>,
    /// Run a single seed instead of the manifest's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, value_parser = ["gold", "random"])]
    label_mode: Option<String>,
    #[arg(long, value_parser = ["retrieved", "random"])]
    selector: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn settings(&self) -> Result<Settings, Error> {
        let mut kv = load_manifest(self.manifest.as_deref())?;
        let mut put = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                kv.set(key, v);
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
        put("task", path(&self.task));
        put("template", path(&self.template));
        put("verbalizer", path(&self.verbalizer));
        put("out", path(&self.out));
        put("checkpoint", path(&self.checkpoint));
        put("seeds", self.seed.map(|s| s.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("beta", self.beta.map(|v| v.to_string()));
        put("temperature", self.temperature.map(|v| v.to_string()));
        put("shots", self.shots.map(|v| v.to_string()));
        put("label_mode", self.label_mode.clone());
        put("selector", self.selector.clone());
        put("steps", self.steps.map(|v| v.to_string()));
        Settings::from_kv(&kv)
    }
}

/// Input and configuration problems exit 2; failures during a run exit 3.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. }
        | Error::UnknownLabel { .. }
        | Error::Io { .. }
        | Error::Capacity(_)
        | Error::Task(_)
        | Error::Template(_)
        | Error::Verbalizer(_)
        | Error::Config(_)
        | Error::Checkpoint(_) => 2,
        _ => 3,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    write_atomic(path, text.as_bytes())
}

fn prepare(s: &Settings, exp: &Experiment) -> Result<(), Error> {
    let dir = s.out.join("splits");
    for &seed in &s.seeds {
        let split = split_for_seed(exp, s.train.shots_per_class, seed)?;
        for (part, data) in [("train", &split.train), ("dev", &split.dev)] {
            let path = dir.join(format!("{}-seed{seed}-{part}.tsv", exp.task.name));
            save_dataset(&path, data, &exp.task)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    task: &'a str,
    variant: String,
    config: &'a TrainConfig,
    seeds: &'a [u64],
    report: demolearn::training::MultiSeedReport,
}

fn train(s: &Settings, exp: &Experiment) -> Result<(), Error> {
    let ckpt_dir = s.out.join("checkpoints");
    let report = multi_seed_run_with(exp, &s.train, &s.seeds, |seed, outcome| {
        let path = ckpt_dir.join(format!("{}-seed{seed}.json", exp.task.name));
        save_checkpoint(&path, &outcome.best, &exp.tokenizer)?;
        Ok(Some(path.to_string_lossy().into_owned()))
    })?;
    for run in &report.runs {
        let line = serde_json::json!({
            "task": exp.task.name,
            "variant": report.variant,
            "seed": run.seed,
            "best_step": run.best_step,
            "dev": run.best_dev_metric,
            "test": run.test_metric,
        });
        append_line(&s.out.join("metrics.jsonl"), &line.to_string())?;
    }
    let mut table = format!("task: {}\nvariant: {}\n", exp.task.name, report.variant);
    for r in &report.runs {
        table.push_str(&format!(
            "seed {:>4}  dev {:.4}  test {}\n",
            r.seed,
            r.best_dev_metric,
            r.test_metric.map_or("n/a".into(), |t| format!("{t:.4}"))
        ));
    }
    if let Some(d) = report.dev {
        table.push_str(&format!("dev  {d}\n"));
    }
    if let Some(t) = report.test {
        table.push_str(&format!("test {t}\n"));
    }
    if report.partial {
        table.push_str(&format!(
            "partial: {} seed(s) failed\n",
            report.failures.len()
        ));
    }
    write_json(
        &s.out.join("train-report.json"),
        &TrainReport {
            task: &exp.task.name,
            variant: report.variant.clone(),
            config: &s.train,
            seeds: &s.seeds,
            report,
        },
    )?;
    write_text(&s.out.join("train-report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn checkpoint_for(s: &Settings, exp: &Experiment) -> Result<Backbone, Error> {
    let path = s
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let (bb, tok) = load_checkpoint(path)?;
    if tok.words() != exp.tokenizer.words() {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different vocabulary",
            path.display()
        )));
    }
    Ok(bb)
}

fn eval(s: &Settings, exp: &Experiment) -> Result<(), Error> {
    let bb = checkpoint_for(s, exp)?;
    let seed = s.seeds[0];
    let split = split_for_seed(exp, s.train.shots_per_class, seed)?;
    let prepared = exp.prepare(
        &split,
        s.train.selector,
        s.train.label_mode,
        seed,
        bb.config().max_len,
    )?;
    let value = evaluate(
        &bb,
        &prepared.test,
        &exp.verbalizer,
        exp.task.metric,
        exp.task.positive_class_index,
    )?;
    let report = serde_json::json!({
        "task": exp.task.name,
        "seed": seed,
        "metric": exp.task.metric,
        "value": value,
        "examples": prepared.test.len(),
    });
    write_json(&s.out.join("eval-report.json"), &report)?;
    println!("{} {:?}: {:.4}", exp.task.name, exp.task.metric, value);
    Ok(())
}

fn ablate(s: &Settings, exp: &Experiment) -> Result<(), Error> {
    let report = ablate_random_labels(exp, &s.train, &s.seeds)?;
    let table = report.table(&exp.task.name);
    write_json(&s.out.join("ablation-report.json"), &report)?;
    write_text(&s.out.join("ablation-report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn probe(s: &Settings, exp: &Experiment) -> Result<(), Error> {
    let seed = s.seeds[0];
    let split = split_for_seed(exp, s.train.shots_per_class, seed)?;
    let prepared = exp.prepare(
        &split,
        s.train.selector,
        s.train.label_mode,
        seed,
        s.train.max_length,
    )?;
    let inputs = if prepared.test.is_empty() {
        &prepared.dev
    } else {
        &prepared.test
    };
    let model = match &s.checkpoint {
        Some(_) => checkpoint_for(s, exp)?,
        None => {
            let cfg = TrainConfig {
                seed,
                ..s.train.clone()
            };
            let max_len = cfg.max_length.max(prepared.max_len());
            Backbone::new(cfg.backbone_config(exp.tokenizer.vocab_size(), max_len))?
        }
    };
    // the same config and seed reproduce the parameters training started from
    let baseline = Backbone::new(model.config().clone())?;
    let rows = Direction::BOTH
        .iter()
        .map(|&d| {
            Ok((
                exp.task.name.clone(),
                attention_probe(&model, &baseline, inputs, d)?,
            ))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let table = probe_table(&rows);
    let json: Vec<_> = rows.iter().map(|(_, r)| r).collect();
    write_json(&s.out.join("probe-report.json"), &json)?;
    write_text(&s.out.join("probe-report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn grid(s: &Settings, exp: &Experiment) -> Result<(), Error> {
    let space = GridSpace::default();
    let mut reports = Vec::new();
    let mut table = format!(
        "{:>6} {:>6} {:>6} {:>8} {:>8}\n",
        "seed", "alpha", "beta", "T", "dev"
    );
    for &seed in &s.seeds {
        let cfg = TrainConfig {
            seed,
            ..s.train.clone()
        };
        let report = grid_search(exp, &cfg, &space)?;
        for (i, p) in report.points.iter().enumerate() {
            table.push_str(&format!(
                "{seed:>6} {:>6} {:>6} {:>8} {:>8.4}{}\n",
                p.alpha,
                p.beta,
                p.temperature,
                p.dev_metric,
                if i == report.best { "  *" } else { "" }
            ));
        }
        reports.push(report);
    }
    write_json(&s.out.join("grid-report.json"), &reports)?;
    write_text(&s.out.join("grid-report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn synth(out: &Path, seed: u64) -> Result<(), Error> {
    let task = generate(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })?;
    save_dataset(&out.join("pool.tsv"), &task.pool, &task.spec)?;
    save_dataset(&out.join("test.tsv"), &task.test, &task.spec)?;
    write_text(
        &out.join("task.kv"),
        &TaskFile::render(&task.spec, "pool.tsv", "test.tsv"),
    )?;
    write_text(&out.join("template.txt"), "{a} it was {mask} .\n")?;
    let words = ["terrible", "great"];
    let verbalizer: String = task
        .spec
        .class_names
        .iter()
        .zip(words)
        .map(|(c, w)| format!("{c}\t{w}\n"))
        .collect();
    write_text(&out.join("verbalizer.tsv"), &verbalizer)?;
    let mut manifest = KeyValues::default();
    manifest.set("task", "task.kv");
    manifest.set("template", "template.txt");
    manifest.set("verbalizer", "verbalizer.tsv");
    manifest.set("selector", "random");
    manifest.set("out", "runs");
    write_text(&out.join("manifest.kv"), &manifest.render())?;
    println!("{}", out.join("manifest.kv").display());
    Ok(())
}

type Handler = fn(&Settings, &Experiment) -> Result<(), Error>;

fn run(cli: Cli) -> Result<(), Error> {
    let (common, f): (Common, Handler) = match cli.command {
        Command::Synth { out, seed } => return synth(&out, seed),
        Command::Prepare(c) => (c, prepare),
        Command::Train(c) => (c, train),
        Command::Eval(c) => (c, eval),
        Command::Ablate(c) => (c, ablate),
        Command::Probe(c) => (c, probe),
        Command::Grid(c) => (c, grid),
    };
    let settings = common.settings()?;
    let experiment = settings.experiment()?;
    f(&settings, &experiment)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Resolves a manifest plus flag overrides into experiment inputs.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use demolearn::corpus::{load_dataset, Metric, TaskSpec};
use demolearn::kv::KeyValues;
use demolearn::losses::TemperatureMode;
use demolearn::pipeline::{Experiment, LabelMode};
use demolearn::retrieval::Selector;
use demolearn::templating::{Template, Verbalizer};
use demolearn::training::{TrainConfig, DEFAULT_SEEDS};
use demolearn::{Error, Result};

/// Manifest keys holding paths, resolved against the manifest's directory.
const PATH_KEYS: [&str; 4] = ["task", "template", "verbalizer", "out"];

const KNOWN_KEYS: [&str; 26] = [
    "task",
    "template",
    "verbalizer",
    "out",
    "seeds",
    "alpha",
    "beta",
    "temperature",
    "temperature_mode",
    "terms",
    "shots",
    "label_mode",
    "selector",
    "steps",
    "lr",
    "weight_decay",
    "batch_size",
    "eval_interval",
    "max_length",
    "hidden",
    "layers",
    "heads",
    "ff",
    "dropout",
    "init_std",
    "checkpoint",
];

pub fn load_manifest(path: Option<&Path>) -> Result<KeyValues> {
    let Some(path) = path else {
        return Ok(KeyValues::default());
    };
    let mut kv = KeyValues::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for key in PATH_KEYS {
        if let Some(v) = kv.get(key) {
            let joined = base.join(v).to_string_lossy().into_owned();
            kv.set(key, joined);
        }
    }
    Ok(kv)
}

fn enum_value<T: serde::de::DeserializeOwned>(kv: &KeyValues, key: &str) -> Result<Option<T>> {
    kv.get(key)
        .map(|v| {
            serde_json::from_value(serde_json::Value::String(v.to_string()))
                .map_err(|_| Error::Config(format!("invalid value for `{key}`: `{v}`")))
        })
        .transpose()
}

fn set<T: FromStr>(kv: &KeyValues, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = kv.parsed(key)? {
        *slot = v;
    }
    Ok(())
}

pub struct Settings {
    pub task_path: PathBuf,
    pub template_path: PathBuf,
    pub verbalizer_path: PathBuf,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub checkpoint: Option<PathBuf>,
}

impl Settings {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        if let Some(key) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown setting `{key}`")));
        }
        let path = |key: &str| -> Result<PathBuf> {
            kv.get(key).map(PathBuf::from).ok_or_else(|| {
                Error::Config(format!("missing `{key}` (flag --{key} or manifest key)"))
            })
        };
        let seeds = match kv.get("seeds") {
            None => DEFAULT_SEEDS.to_vec(),
            Some(list) => list
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("invalid seed list `{list}`")))?,
        };
        if seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }

        let mut t = TrainConfig::default();
        set(kv, "alpha", &mut t.weights.alpha)?;
        set(kv, "beta", &mut t.weights.beta)?;
        set(kv, "temperature", &mut t.weights.temperature)?;
        if let Some(m) = enum_value::<TemperatureMode>(kv, "temperature_mode")? {
            t.weights.temperature_mode = m;
        }
        match kv.get("terms") {
            None | Some("full") => {}
            Some("mask_only") => t.terms = demolearn::losses::ObjectiveTerms::MASK_ONLY,
            Some(other) => {
                return Err(Error::Config(format!(
                    "invalid value for `terms`: `{other}`"
                )))
            }
        }
        set(kv, "shots", &mut t.shots_per_class)?;
        if let Some(m) = enum_value::<LabelMode>(kv, "label_mode")? {
            t.label_mode = m;
        }
        if let Some(s) = enum_value::<Selector>(kv, "selector")? {
            t.selector = s;
        }
        set(kv, "steps", &mut t.max_steps)?;
        set(kv, "lr", &mut t.optimizer.lr)?;
        set(kv, "weight_decay", &mut t.optimizer.weight_decay)?;
        set(kv, "batch_size", &mut t.batch_size)?;
        set(kv, "eval_interval", &mut t.eval_interval)?;
        set(kv, "max_length", &mut t.max_length)?;
        set(kv, "hidden", &mut t.backbone.hidden)?;
        set(kv, "layers", &mut t.backbone.layers)?;
        set(kv, "heads", &mut t.backbone.heads)?;
        set(kv, "ff", &mut t.backbone.ff)?;
        set(kv, "dropout", &mut t.backbone.dropout)?;
        set(kv, "init_std", &mut t.backbone.init_std)?;
        t.seed = seeds[0];
        t.validate()?;

        Ok(Self {
            task_path: path("task")?,
            template_path: path("template")?,
            verbalizer_path: path("verbalizer")?,
            out: kv
                .get("out")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs")),
            seeds,
            train: t,
            checkpoint: kv.get("checkpoint").map(PathBuf::from),
        })
    }

    pub fn experiment(&self) -> Result<Experiment> {
        let task = TaskFile::load(&self.task_path)?;
        let template = Template::load(&self.template_path)?;
        let words = Verbalizer::load_words(&self.verbalizer_path, &task.spec)?;
        let pool = load_dataset(&task.pool, &task.spec)?;
        let test = match &task.test {
            Some(p) => load_dataset(p, &task.spec)?,
            None => Vec::new(),
        };
        Experiment::new(task.spec, template, words, pool, test)
    }
}

/// Task description file: `name`, `classes`, `arity`, `metric`,
/// `positive_class`, `pool` and `test`.
pub struct TaskFile {
    pub spec: TaskSpec,
    pub pool: PathBuf,
    pub test: Option<PathBuf>,
}

impl TaskFile {
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let need = |key: &str| {
            kv.get(key)
                .ok_or_else(|| Error::Task(format!("{}: missing `{key}`", path.display())))
        };
        let classes: Vec<String> = need("classes")?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let metric = match kv.get("metric").unwrap_or("accuracy") {
            "accuracy" => Metric::Accuracy,
            "binary_f1" | "f1" => Metric::BinaryF1,
            other => return Err(Error::Task(format!("unknown metric `{other}`"))),
        };
        let positive = kv
            .get("positive_class")
            .map(|c| {
                classes
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| Error::Task(format!("positive class `{c}` is not a class")))
            })
            .transpose()?;
        let spec = TaskSpec::new(
            need("name")?,
            classes,
            kv.parsed("arity")?.unwrap_or(1),
            metric,
            positive,
        )?;
        Ok(Self {
            spec,
            pool: base.join(need("pool")?),
            test: kv.get("test").map(|p| base.join(p)),
        })
    }

    pub fn render(spec: &TaskSpec, pool: &str, test: &str) -> String {
        let mut kv = KeyValues::default();
        kv.set("name", spec.name.clone());
        kv.set("classes", spec.class_names.join(","));
        kv.set("arity", spec.input_arity.to_string());
        kv.set(
            "metric",
            match spec.metric {
                Metric::Accuracy => "accuracy",
                Metric::BinaryF1 => "binary_f1",
            },
        );
        if let Some(p) = spec.positive_class_index {
            kv.set("positive_class", spec.class_names[p].clone());
        }
        kv.set("pool", pool);
        kv.set("test", test);
        kv.render()
    }
}

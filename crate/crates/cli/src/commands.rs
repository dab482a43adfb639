//! Command implementations. Each returns the paths it wrote so callers
//! (and tests) can inspect them without re-deriving the layout.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use revgrpo_core::policy::{Checkpoint, PolicyError, PolicyShape};
use revgrpo_core::scenes::{self, Difficulty, EnvConfig, SceneError, SceneSpec};
use revgrpo_core::trainer::{self, EvalReport, StepMetrics, TrainError, METRIC_FIELDS};
use serde::Serialize;

use crate::args::{AblateArgs, EvalArgs, GenDataArgs, PlotDataArgs, TrainArgs};
use crate::config::RunConfig;
use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SHAPING_FILE: &str = "shaping.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_SUMMARY: &str = "summary.csv";

/// Steps averaged when reporting the reward at the end of a run.
pub const FINAL_WINDOW: usize = 50;

fn scene_error(e: SceneError) -> CliError {
    match e {
        SceneError::Io { path, source } => CliError::Io { path, source },
        other => CliError::Usage(other.to_string()),
    }
}

fn policy_error(e: PolicyError) -> CliError {
    match e {
        PolicyError::Io { path, source } => CliError::Io { path, source },
        other => CliError::Usage(other.to_string()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn env_from(config: Option<&Path>) -> Result<EnvConfig, CliError> {
    let env = match config {
        Some(p) => RunConfig::load(p)?.env,
        None => EnvConfig::default(),
    };
    let problems = env.validate();
    if !problems.is_empty() {
        return Err(CliError::Usage(format!(
            "invalid [env] section:\n  - {}",
            problems.join("\n  - ")
        )));
    }
    Ok(env)
}

/// Per-tier scene counts, in tier order.
pub fn tier_counts(scenes: &[SceneSpec]) -> BTreeMap<Difficulty, usize> {
    let mut counts = BTreeMap::from([(Difficulty::Easy, 0), (Difficulty::Hard, 0)]);
    for s in scenes {
        *counts.entry(s.difficulty).or_default() += 1;
    }
    counts
}

/// Writes the dataset and returns the one-line summary.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<String, CliError> {
    let env = env_from(args.config.as_deref())?;
    let scenes = scenes::generate_dataset(args.seed, args.num_scenes, args.difficulty.into(), &env)
        .map_err(scene_error)?;
    scenes::save_dataset(&scenes, &env, &args.out).map_err(|e| match e {
        SceneError::Io { path, source } => CliError::Io {
            path: format!("--out {path}"),
            source,
        },
        other => scene_error(other),
    })?;
    let tiers: Vec<String> = tier_counts(&scenes)
        .iter()
        .map(|(t, n)| format!("{} {n}", t.as_str()))
        .collect();
    Ok(format!(
        "wrote {} scenes to {} ({})",
        scenes.len(),
        args.out.display(),
        tiers.join(", ")
    ))
}

/// Files of a finished training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub eval: Option<EvalReport>,
}

impl RunOutput {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join(FINAL_CHECKPOINT)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }

    pub fn shaping_path(&self) -> PathBuf {
        self.dir.join(SHAPING_FILE)
    }
}

/// Applies the command-line overrides to a loaded config.
pub fn resolve_train_config(mut cfg: RunConfig, args: &TrainArgs) -> RunConfig {
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if args.no_revision {
        cfg.train.revision_enabled = false;
    }
    if args.no_consolidation {
        cfg.train.consolidation_enabled = false;
    }
    if args.no_postscale {
        cfg.train.postscale_enabled = false;
    }
    if let Some(w) = args.omega {
        cfg.train.omega = w;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunOutput, CliError> {
    let cfg = resolve_train_config(RunConfig::load(&args.config)?, args);
    run_training(&cfg)
}

fn load_matching_dataset(
    path: &Path,
    env: &EnvConfig,
    what: &str,
) -> Result<Vec<SceneSpec>, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "{what}: dataset {} does not exist",
            path.display()
        )));
    }
    let (info, scenes) = scenes::load_dataset(path).map_err(scene_error)?;
    if let Some(info) = info {
        if info.env_hash != env.hash() {
            return Err(CliError::Incompatible(format!(
                "dataset {} was generated for env hash {}, config env hash is {}",
                path.display(),
                info.env_hash,
                env.hash()
            )));
        }
    }
    Ok(scenes)
}

#[derive(Serialize)]
struct ShapingLine<'a> {
    step: u64,
    group_mean: &'a [f64],
    group_max: &'a [f64],
}

/// Trains from a fully resolved config. Nothing is written until the config
/// validates and every dataset it names has loaded.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(CliError::Usage(format!(
            "invalid config:\n  - {}",
            problems.join("\n  - ")
        )));
    }
    let train_set = load_matching_dataset(&cfg.data.train, &cfg.env, "data.train")?;
    let eval_set = match &cfg.data.eval {
        Some(p) => Some(load_matching_dataset(p, &cfg.env, "data.eval")?),
        None => None,
    };
    if train_set.is_empty() {
        return Err(CliError::Usage(format!(
            "data.train: dataset {} is empty",
            cfg.data.train.display()
        )));
    }
    let grid = cfg.env.grid().map_err(scene_error)?;

    let dir = cfg.output.dir.clone();
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    let resolved = dir.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.to_toml()).map_err(|e| CliError::io(&resolved, e))?;

    let metrics_path = dir.join(METRICS_FILE);
    let shaping_path = dir.join(SHAPING_FILE);
    let mut metrics_out = create(&metrics_path)?;
    let mut shaping_out = create(&shaping_path)?;
    let env_hash = cfg.env.hash();
    let interval = cfg.train.checkpoint_interval;
    let mut ckpt_failure: Option<CliError> = None;

    let result = trainer::train(&cfg.train, &grid, cfg.env.max_slots, &train_set, |report| {
        let m = report.metrics;
        writeln!(
            metrics_out,
            "{}",
            serde_json::to_string(m).expect("metrics serialize")
        )?;
        let means: Vec<f64> = report.groups.iter().map(|g| g.mean).collect();
        let maxes: Vec<f64> = report.groups.iter().map(|g| g.max).collect();
        let line = ShapingLine {
            step: m.step,
            group_mean: &means,
            group_max: &maxes,
        };
        writeln!(
            shaping_out,
            "{}",
            serde_json::to_string(&line).expect("shaping serializes")
        )?;
        if interval > 0 && m.step % interval == 0 {
            let path = ckpt_dir.join(format!("step-{:06}.json", m.step));
            if let Err(e) =
                Checkpoint::new(report.params, env_hash.as_str(), m.step, cfg.train.seed)
                    .save(&path)
            {
                let err = policy_error(e);
                let msg = err.to_string();
                ckpt_failure = Some(err);
                return Err(std::io::Error::other(msg));
            }
        }
        Ok(())
    });
    let outcome = match result {
        Ok(o) => o,
        Err(_) if ckpt_failure.is_some() => return Err(ckpt_failure.take().expect("checked")),
        Err(TrainError::Sink(e)) => return Err(CliError::io(&metrics_path, e)),
        Err(e @ TrainError::NonFinite { .. }) => {
            let detail = match &e {
                TrainError::NonFinite {
                    diagnostic: Some(d),
                    ..
                } => format!(
                    "\nlast metrics: {}",
                    serde_json::to_string(d).expect("metrics serialize")
                ),
                _ => String::new(),
            };
            return Err(CliError::Failed(format!("{e}{detail}")));
        }
        Err(TrainError::Policy(e)) => return Err(CliError::Incompatible(e.to_string())),
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    metrics_out
        .flush()
        .map_err(|e| CliError::io(&metrics_path, e))?;
    shaping_out
        .flush()
        .map_err(|e| CliError::io(&shaping_path, e))?;

    Checkpoint::new(
        &outcome.params,
        env_hash.as_str(),
        cfg.train.steps,
        cfg.train.seed,
    )
    .save(&dir.join(FINAL_CHECKPOINT))
    .map_err(policy_error)?;

    let eval = eval_set.map(|set| trainer::evaluate(&outcome.params, &grid, &set, cfg.train.seed));
    if let Some(report) = &eval {
        let path = dir.join(EVAL_FILE);
        fs::write(&path, report_json(report)).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(RunOutput {
        dir,
        metrics: outcome.metrics,
        eval,
    })
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let env = env_from(args.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(policy_error)?;
    if ckpt.config_hash != env.hash() {
        return Err(CliError::Incompatible(format!(
            "checkpoint {} has config hash {}, but the config hash is {}",
            args.checkpoint.display(),
            ckpt.config_hash,
            env.hash()
        )));
    }
    let grid = env.grid().map_err(scene_error)?;
    let expected = PolicyShape::new(grid.len(), env.max_slots);
    if ckpt.shape != expected {
        return Err(CliError::Incompatible(format!(
            "checkpoint shape {:?} does not match the config shape {:?}",
            ckpt.shape, expected
        )));
    }
    let (info, scenes) = scenes::load_dataset(&args.dataset).map_err(scene_error)?;
    if let Some(info) = info {
        if info.env_hash != env.hash() {
            return Err(CliError::Incompatible(format!(
                "dataset {} has env hash {}, but the config hash is {}",
                args.dataset.display(),
                info.env_hash,
                env.hash()
            )));
        }
    }
    let params = ckpt.params().map_err(policy_error)?;
    let report = trainer::evaluate(&params, &grid, &scenes, args.seed);
    if let Some(out) = &args.out {
        fs::write(out, report_json(&report)).map_err(|e| CliError::io(out, e))?;
    }
    Ok(report)
}

/// Rows of a metrics stream as field name to verbatim JSON number text.
fn read_metrics(path: &Path) -> Result<Vec<BTreeMap<String, String>>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&line).map_err(|e| {
                CliError::Usage(format!(
                    "{}:{}: not a metrics record: {e}",
                    path.display(),
                    i + 1
                ))
            })?;
        rows.push(obj.into_iter().map(|(k, v)| (k, v.to_string())).collect());
    }
    Ok(rows)
}

/// Renders the CSV text for `plot-data`.
pub fn plot_data_csv(args: &PlotDataArgs) -> Result<String, CliError> {
    let unknown: Vec<&str> = args
        .fields
        .iter()
        .map(String::as_str)
        .filter(|f| !METRIC_FIELDS.contains(f))
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::Usage(format!(
            "--fields: unknown field(s): {} (known: {})",
            unknown.join(", "),
            METRIC_FIELDS.join(", ")
        )));
    }
    if args.fields.is_empty() {
        return Err(CliError::Usage("--fields: no fields selected".into()));
    }
    if !args.label.is_empty() && args.label.len() != args.input.len() {
        return Err(CliError::Usage(format!(
            "--label: got {} labels for {} inputs",
            args.label.len(),
            args.input.len()
        )));
    }
    let runs = args
        .input
        .iter()
        .map(|p| read_metrics(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Usage(format!("csv: {e}"));

    if runs.len() == 1 {
        w.write_record(&args.fields).map_err(csv_err)?;
        for row in &runs[0] {
            w.write_record(
                args.fields
                    .iter()
                    .map(|f| row.get(f).map(String::as_str).unwrap_or("")),
            )
            .map_err(csv_err)?;
        }
    } else {
        let labels: Vec<String> = if args.label.is_empty() {
            (1..=runs.len()).map(|i| format!("run{i}")).collect()
        } else {
            args.label.clone()
        };
        let value_fields: Vec<&String> = args.fields.iter().filter(|f| *f != "step").collect();
        let mut header = vec!["step".to_string()];
        for l in &labels {
            header.extend(value_fields.iter().map(|f| format!("{l}.{f}")));
        }
        w.write_record(&header).map_err(csv_err)?;
        let mut joined: BTreeMap<u64, Vec<String>> = BTreeMap::new();
        let width = value_fields.len();
        for (r, rows) in runs.iter().enumerate() {
            for row in rows {
                let step: u64 = row
                    .get("step")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| {
                        CliError::Usage(format!(
                            "{}: record without a step",
                            args.input[r].display()
                        ))
                    })?;
                let cells = joined
                    .entry(step)
                    .or_insert_with(|| vec![String::new(); width * runs.len()]);
                for (j, f) in value_fields.iter().enumerate() {
                    cells[r * width + j] = row.get(*f).cloned().unwrap_or_default();
                }
            }
        }
        for (step, cells) in joined {
            let mut rec = vec![step.to_string()];
            rec.extend(cells);
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn cmd_plot_data(args: &PlotDataArgs) -> Result<String, CliError> {
    let text = plot_data_csv(args)?;
    if let Some(out) = &args.out {
        fs::write(out, &text).map_err(|e| CliError::io(out, e))?;
    }
    Ok(text)
}

/// Mean of `r_format + r_acc` over the last [`FINAL_WINDOW`] steps.
pub fn final_comparable_reward(metrics: &[StepMetrics]) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(FINAL_WINDOW)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter()
        .map(|m| m.mean_r_format + m.mean_r_acc)
        .sum::<f64>()
        / tail.len() as f64
}

/// An ablation variant: a name plus the config edits it applies.
#[derive(Debug, Clone, Copy)]
pub struct Variant {
    pub name: &'static str,
    pub revision: bool,
    pub consolidation: bool,
    pub postscale: bool,
    /// Overrides the configured shaping weight.
    pub omega: Option<f64>,
}

pub const VARIANTS: [Variant; 6] = [
    Variant {
        name: "plain",
        revision: false,
        consolidation: false,
        postscale: false,
        omega: None,
    },
    Variant {
        name: "revision",
        revision: true,
        consolidation: false,
        postscale: false,
        omega: None,
    },
    Variant {
        name: "full",
        revision: true,
        consolidation: true,
        postscale: true,
        omega: None,
    },
    Variant {
        name: "no-postscale",
        revision: true,
        consolidation: true,
        postscale: false,
        omega: None,
    },
    Variant {
        name: "omega-3",
        revision: true,
        consolidation: true,
        postscale: true,
        omega: Some(3.0),
    },
    Variant {
        name: "omega-7",
        revision: true,
        consolidation: true,
        postscale: true,
        omega: Some(7.0),
    },
];

impl Variant {
    pub fn apply(&self, base: &RunConfig, seed: u64, dir: PathBuf) -> RunConfig {
        let mut cfg = base.clone();
        cfg.train.revision_enabled = self.revision;
        cfg.train.consolidation_enabled = self.consolidation;
        cfg.train.postscale_enabled = self.postscale;
        if let Some(w) = self.omega {
            cfg.train.omega = w;
        }
        cfg.train.seed = seed;
        cfg.output.dir = dir;
        cfg
    }
}

/// Trains every variant for each seed and writes a summary table.
pub fn cmd_ablate(args: &AblateArgs) -> Result<PathBuf, CliError> {
    let mut base = RunConfig::load(&args.config)?;
    if let Some(s) = args.steps {
        base.train.steps = s;
    }
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let problems = base.validate();
    if !problems.is_empty() {
        return Err(CliError::Usage(format!(
            "invalid config:\n  - {}",
            problems.join("\n  - ")
        )));
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let mut rows = Vec::new();
    for v in &VARIANTS {
        for k in 0..args.seeds {
            let seed = base.train.seed + k;
            let cfg = v.apply(
                &base,
                seed,
                args.out.join(v.name).join(format!("seed-{seed}")),
            );
            let run = run_training(&cfg)?;
            let acc = run
                .eval
                .as_ref()
                .map(|e| e.overall.acc_at_0_5.to_string())
                .unwrap_or_default();
            rows.push(vec![
                v.name.to_string(),
                seed.to_string(),
                cfg.train.omega.to_string(),
                final_comparable_reward(&run.metrics).to_string(),
                acc,
            ]);
        }
    }
    let path = args.out.join(ABLATION_SUMMARY);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Usage(e.to_string()))?;
    let csv_io = |e: csv::Error| CliError::io(&path, std::io::Error::other(e.to_string()));
    w.write_record([
        "variant",
        "seed",
        "omega",
        "final_format_plus_acc",
        "eval_acc_at_0.5",
    ])
    .map_err(csv_io)?;
    for r in rows {
        w.write_record(&r).map_err(csv_io)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

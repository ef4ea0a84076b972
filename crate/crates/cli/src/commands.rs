use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use unimatch::encoder::embed;
use unimatch::episodes::{load_registry, sample_episode, Protocol, Registry, Split, TaskRecord};
use unimatch::meta::{derive_seed, finetune_and_predict, meta_train, TrainConfig};
use unimatch::metrics::{aggregate, auprc, auroc, delta_auprc, EvalResult, Summary};
use unimatch::pca::pca_project;
use unimatch::taskrel::{relation_matrix, task_vector, Kernel, VectorMode};
use unimatch::{mol_from_smiles, Error, MolGraph, Tensor};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_NUMERIC,
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.0)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_data(dir: &Path) -> CliResult<Registry> {
    let (registry, report) = load_registry(dir)?;
    if report.malformed_lines > 0 {
        log::warn!("{} malformed lines skipped", report.malformed_lines);
        for m in &report.messages {
            log::debug!("{m}");
        }
    }
    for id in &report.skipped_tasks {
        log::warn!("task {id} has fewer than 2 usable examples; skipped");
    }
    Ok(registry)
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub log: Option<PathBuf>,
    pub workers: Option<usize>,
}

pub fn default_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let registry = load_data(&args.data)?;
    let train = TrainConfig {
        workers: args.workers.or(cfg.train.workers),
        ..cfg.train.clone()
    };
    let outcome = meta_train(&registry, &cfg.model, &train)?;

    let mut log = String::from("epoch,mean_outer_loss,wall_seconds,val_metric\n");
    for e in &outcome.log {
        let val = e.val_metric.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(log, "{},{},{:.3},{}", e.epoch, e.mean_outer_loss, e.wall_seconds, val);
    }
    write_file(&args.log.clone().unwrap_or_else(|| default_log_path(&args.out)), &log)?;
    let ckpt = Checkpoint {
        config: cfg,
        epoch: outcome.best_epoch,
        params: outcome.params,
    };
    ckpt.save(&args.out)
        .map_err(|e| CliError::data(format!("{}: {e}", args.out.display())))?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub support_size: Option<usize>,
    pub query_size: Option<usize>,
    pub repeats: Option<usize>,
    pub protocol: Option<Protocol>,
    pub seed: Option<u64>,
    pub zero_shot: bool,
}

fn fmt_summary(s: &Summary, with_spread: bool) -> String {
    if with_spread {
        format!(
            "{},{},{}",
            s.mean,
            s.se.map(|v| v.to_string()).unwrap_or_default(),
            s.std.map(|v| v.to_string()).unwrap_or_default()
        )
    } else {
        s.mean.to_string()
    }
}

/// Scores of one evaluation run: per-task results, in task order.
pub fn evaluate(
    ckpt: &Checkpoint,
    tasks: &[&TaskRecord],
    train: &TrainConfig,
    repeats: usize,
    seed: u64,
) -> CliResult<Vec<Result<EvalResult, String>>> {
    let mut out = Vec::with_capacity(tasks.len());
    for (ti, task) in tasks.iter().enumerate() {
        let mut res = EvalResult {
            task_id: task.id.clone(),
            support_size: train.episode.support_size,
            auroc: Vec::new(),
            auprc: Vec::new(),
            delta_auprc: Vec::new(),
        };
        let mut skipped = None;
        for r in 0..repeats {
            let s = derive_seed(seed, &[ti as u64, r as u64]);
            let ep = match sample_episode(
                task,
                train.episode.protocol,
                train.episode.support_size,
                train.episode.query_size,
                s,
            ) {
                Ok(ep) => ep,
                Err(e @ Error::Sampling { .. }) => {
                    skipped = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e.into()),
            };
            let labels = ep.query_labels();
            if !labels.contains(&1) || !labels.contains(&0) {
                skipped = Some(format!("task {}: query set lacks one class", task.id));
                break;
            }
            let probs = finetune_and_predict(
                &ckpt.params.encoder,
                &ckpt.params.matcher,
                (&ep.support_graphs(), &ep.support_labels()),
                &ep.query_graphs(),
                &ckpt.config.model,
                train,
                s,
            )?;
            let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.get(i, 0)).collect();
            res.auroc.push(auroc(&scores, &labels)?);
            res.auprc.push(auprc(&scores, &labels)?);
            res.delta_auprc.push(delta_auprc(&scores, &labels)?);
        }
        out.push(match skipped {
            Some(reason) => Err(reason),
            None => Ok(res),
        });
    }
    Ok(out)
}

pub fn eval(args: &EvalArgs) -> CliResult<String> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let registry = load_data(&args.data)?;
    let mut train = ckpt.config.train.clone();
    if let Some(p) = args.protocol {
        train.episode.protocol = p;
    }
    if let Some(n) = args.support_size {
        train.episode.support_size = n;
    }
    if let Some(n) = args.query_size {
        train.episode.query_size = n;
    }
    if args.zero_shot {
        train.inner_steps = 0;
    }
    let repeats = args.repeats.unwrap_or(ckpt.config.eval_repeats);
    if repeats == 0 {
        return Err(CliError::config("--repeats must be at least 1"));
    }
    let seed = args.seed.unwrap_or(ckpt.config.train.seed);
    let tasks = registry.split(Split::Test);
    if tasks.is_empty() {
        return Err(CliError::data("test split is empty"));
    }
    let results = evaluate(&ckpt, &tasks, &train, repeats, seed)?;

    let spread = repeats >= 2;
    let metric_cols = |name: &str| {
        if spread {
            format!("{name}_mean,{name}_se,{name}_std")
        } else {
            format!("{name}_mean")
        }
    };
    let mut csv = format!(
        "task_id,status,support_size,repeats,{},{},{}\n",
        metric_cols("auroc"),
        metric_cols("auprc"),
        metric_cols("delta_auprc")
    );
    let empty = if spread { ",,,,,,,," } else { ",," };
    // Per-repeat means over evaluated tasks.
    let mut per_repeat = [vec![0.0; repeats], vec![0.0; repeats], vec![0.0; repeats]];
    let mut evaluated = 0usize;
    for (task, res) in tasks.iter().zip(&results) {
        match res {
            Ok(r) => {
                evaluated += 1;
                let s = r.summaries()?;
                let _ = writeln!(
                    csv,
                    "{},ok,{},{},{},{},{}",
                    task.id,
                    r.support_size,
                    repeats,
                    fmt_summary(&s[0], spread),
                    fmt_summary(&s[1], spread),
                    fmt_summary(&s[2], spread)
                );
                for (acc, vals) in per_repeat.iter_mut().zip([&r.auroc, &r.auprc, &r.delta_auprc]) {
                    for (a, v) in acc.iter_mut().zip(vals.iter()) {
                        *a += v;
                    }
                }
            }
            Err(reason) => {
                log::warn!("skipped: {reason}");
                let _ = writeln!(csv, "{},skipped,{},{},{empty}", task.id, train.episode.support_size, repeats);
            }
        }
    }
    if evaluated == 0 {
        return Err(CliError::data("no test task could be evaluated"));
    }
    for acc in &mut per_repeat {
        acc.iter_mut().for_each(|v| *v /= evaluated as f64);
    }
    let _ = writeln!(
        csv,
        "OVERALL,ok,{},{},{},{},{}",
        train.episode.support_size,
        repeats,
        fmt_summary(&aggregate(&per_repeat[0])?, spread),
        fmt_summary(&aggregate(&per_repeat[1])?, spread),
        fmt_summary(&aggregate(&per_repeat[2])?, spread)
    );
    Ok(csv)
}

fn parse_support_jsonl(text: &str) -> CliResult<(Vec<MolGraph>, Vec<u8>)> {
    let mut graphs = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| CliError::data(format!("support line {}: {e}", i + 1)))?;
        let smiles = v["smiles"]
            .as_str()
            .ok_or_else(|| CliError::data(format!("support line {}: missing smiles", i + 1)))?;
        let label = match v["label"].as_u64() {
            Some(l @ (0 | 1)) => l as u8,
            _ => return Err(CliError::data(format!("support line {}: label must be 0 or 1", i + 1))),
        };
        let g = mol_from_smiles(smiles)
            .map_err(|e| CliError::data(format!("support line {}: {e}", i + 1)))?;
        graphs.push(g);
        labels.push(label);
    }
    if graphs.is_empty() {
        return Err(CliError::data("support file has no examples"));
    }
    Ok((graphs, labels))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub struct PredictArgs {
    pub ckpt: PathBuf,
    pub support: PathBuf,
    pub query: PathBuf,
    pub seed: Option<u64>,
}

pub fn predict(args: &PredictArgs) -> CliResult<String> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (sg, sy) = parse_support_jsonl(&read_file(&args.support)?)?;
    if !sy.contains(&1) || !sy.contains(&0) {
        log::warn!("support set has a single class; every layer prediction will be constant");
    }
    let queries: Vec<String> = read_file(&args.query)?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let parsed: Vec<Result<MolGraph, String>> = queries
        .iter()
        .map(|s| mol_from_smiles(s).map_err(|e| e.to_string()))
        .collect();
    let ok: Vec<&MolGraph> = parsed.iter().filter_map(|p| p.as_ref().ok()).collect();
    let failures = parsed.len() - ok.len();
    if ok.is_empty() {
        return Err(CliError::data(format!("none of the {} query molecules parsed", parsed.len())));
    }
    let seed = args.seed.unwrap_or(ckpt.config.train.seed);
    let probs = finetune_and_predict(
        &ckpt.params.encoder,
        &ckpt.params.matcher,
        (&sg.iter().collect::<Vec<_>>(), &sy),
        &ok,
        &ckpt.config.model,
        &ckpt.config.train,
        seed,
    )?;
    let mut csv = String::from("smiles,p_positive,error\n");
    let mut row = 0;
    for (s, p) in queries.iter().zip(&parsed) {
        match p {
            Ok(_) => {
                let _ = writeln!(csv, "{},{},", csv_field(s), probs.get(row, 0));
                row += 1;
            }
            Err(e) => {
                let _ = writeln!(csv, "{},,{}", csv_field(s), csv_field(e));
            }
        }
    }
    if failures > 0 {
        log::warn!("{failures} of {} query molecules failed to parse", queries.len());
    }
    Ok(csv)
}

pub struct TaskRelArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub metric: Option<Kernel>,
    pub mode: Option<VectorMode>,
    pub normalize: Option<bool>,
    pub split: Split,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

pub fn taskrel(args: &TaskRelArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let registry = load_data(&args.data)?;
    let metric = args.metric.unwrap_or(ckpt.config.taskrel.metric);
    let mode = args.mode.unwrap_or(ckpt.config.taskrel.mode);
    let normalize = args.normalize.unwrap_or(ckpt.config.taskrel.normalize);
    let seed = args.seed.unwrap_or(ckpt.config.train.seed);
    let tasks = registry.split(args.split);
    if tasks.len() < 2 {
        return Err(CliError::data(format!(
            "{} split has {} tasks; at least 2 are needed",
            args.split,
            tasks.len()
        )));
    }
    let vectors = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            task_vector(
                t,
                &ckpt.params,
                &ckpt.config.model,
                &ckpt.config.train,
                mode,
                derive_seed(seed, &[i as u64]),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rel = relation_matrix(&vectors, metric)?;
    if normalize {
        rel = rel.row_normalized();
    }
    let mut csv = String::from("task_id");
    for id in &rel.task_ids {
        let _ = write!(csv, ",{}", csv_field(id));
    }
    csv.push('\n');
    for (i, id) in rel.task_ids.iter().enumerate() {
        csv.push_str(&csv_field(id));
        for j in 0..rel.task_ids.len() {
            let _ = write!(csv, ",{}", rel.m.get(i, j));
        }
        csv.push('\n');
    }
    write_file(&args.out, &csv)?;
    let meta = serde_json::json!({
        "metric": metric.to_string(),
        "mode": mode.to_string(),
        "normalization": if normalize { "row-softmax" } else { "none" },
        "split": args.split.to_string(),
        "tasks": rel.task_ids,
    });
    let mut meta_path = args.out.as_os_str().to_owned();
    meta_path.push(".meta.jsonl");
    write_file(Path::new(&meta_path), &format!("{meta}\n"))
}

pub struct ExportArgs {
    pub ckpt: PathBuf,
    pub smiles: PathBuf,
    pub out: PathBuf,
    pub pca: Option<usize>,
}

pub fn pca_path(out: &Path, layer: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.pca.layer{layer}.csv"))
}

pub fn export_embeddings(args: &ExportArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let smiles: Vec<String> = read_file(&args.smiles)?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let graphs = smiles
        .iter()
        .enumerate()
        .map(|(i, s)| mol_from_smiles(s).map_err(|e| CliError::data(format!("molecule {i}: {e}"))))
        .collect::<CliResult<Vec<_>>>()?;
    if graphs.is_empty() {
        return Err(CliError::data("no molecules to embed"));
    }
    let z = embed(&graphs.iter().collect::<Vec<_>>(), &ckpt.params.encoder)?;
    let d = ckpt.config.model.hidden;
    let mut csv = String::from("molecule_index,smiles,layer");
    for j in 0..d {
        let _ = write!(csv, ",dim_{j}");
    }
    csv.push('\n');
    for (i, s) in smiles.iter().enumerate() {
        for (l, zl) in z.layers.iter().enumerate() {
            let _ = write!(csv, "{i},{},{}", csv_field(s), l + 1);
            for v in zl.row(i) {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
    }
    write_file(&args.out, &csv)?;
    if let Some(k) = args.pca {
        for (l, zl) in z.layers.iter().enumerate() {
            let p = pca_project(zl, k)?;
            write_file(&pca_path(&args.out, l + 1), &pca_csv(&p.projected, &p.explained_variance_ratio))?;
        }
    }
    Ok(())
}

fn pca_csv(projected: &Tensor, ratios: &[f64]) -> String {
    let k = projected.cols();
    let mut csv = String::from("molecule_index");
    for c in 1..=k {
        let _ = write!(csv, ",pc_{c}");
    }
    csv.push('\n');
    for i in 0..projected.rows() {
        let _ = write!(csv, "{i}");
        for v in projected.row(i) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let _ = write!(csv, "explained_variance_ratio");
    for r in ratios {
        let _ = write!(csv, ",{r}");
    }
    csv.push('\n');
    csv
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub train: usize,
    pub test: usize,
    pub molecules: usize,
    pub seed: u64,
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    if args.train == 0 && args.test == 0 || args.molecules < 2 {
        return Err(CliError::config("need at least one task and two molecules per task"));
    }
    let registry = unimatch::synth::synth_generate(args.train, args.test, args.molecules, args.seed)?;
    registry.write(&args.out)?;
    Ok(())
}

/// Writes `text` to stdout, or to `path` when given.
pub fn emit(text: &str, path: Option<&Path>) -> CliResult<()> {
    match path {
        Some(p) => write_file(p, text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::data(format!("stdout: {e}"))),
    }
}

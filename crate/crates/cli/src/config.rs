//! Run configuration: flat `key = value` lines grouped under `[section]`
//! headers. `#` starts a comment. Unknown sections and keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use unimatch::episodes::Protocol;
use unimatch::meta::{EpisodeConfig, TrainConfig};
use unimatch::optim::OptimizerKind;
use unimatch::taskrel::{Kernel, VectorMode};
use unimatch::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRelConfig {
    pub metric: Kernel,
    pub mode: VectorMode,
    /// Row-softmax the relation matrix.
    pub normalize: bool,
}

impl Default for TaskRelConfig {
    fn default() -> Self {
        TaskRelConfig {
            metric: Kernel::Cosine,
            mode: VectorMode::AdaptedDelta,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_repeats: usize,
    pub taskrel: TaskRelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_repeats: 10,
            taskrel: TaskRelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError(format!("line {line}: bad value {value:?} for {key}: {e}")))
}

fn optional<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(line, key, value).map(Some)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["train", "encoder", "matcher", "protocol", "taskrel"].contains(&name) {
                    return Err(ConfigError(format!("line {n}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError(format!("line {n}: expected key = value")))?;
            cfg.set(n, &section, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, n: usize, section: &str, key: &str, v: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let m = &mut self.model;
        match (section, key) {
            ("train", "inner_lr") => t.inner_lr = parse(n, key, v)?,
            ("train", "inner_steps") => t.inner_steps = parse(n, key, v)?,
            ("train", "meta_lr") => t.meta_lr = parse(n, key, v)?,
            ("train", "optimizer") => t.optimizer = parse::<OptimizerKind>(n, key, v)?,
            ("train", "weight_decay") => t.weight_decay = parse(n, key, v)?,
            ("train", "batch_tasks") => t.batch_tasks = parse(n, key, v)?,
            ("train", "max_epochs") => t.max_epochs = parse(n, key, v)?,
            ("train", "seed") => t.seed = parse(n, key, v)?,
            ("train", "support_split_fraction") => t.support_split_fraction = parse(n, key, v)?,
            ("train", "patience") => t.patience = optional(n, key, v)?,
            ("train", "workers") => t.workers = optional(n, key, v)?,
            ("encoder", "layers") => m.layers = parse(n, key, v)?,
            ("encoder", "hidden") => m.hidden = parse(n, key, v)?,
            ("encoder", "dropout") => m.encoder_dropout = parse(n, key, v)?,
            ("matcher", "heads") => {
                let heads: usize = parse(n, key, v)?;
                if heads != 1 {
                    return Err(ConfigError(format!(
                        "line {n}: only single-head matching is supported, got heads = {heads}"
                    )));
                }
            }
            ("matcher", "dropout") => m.matcher_dropout = parse(n, key, v)?,
            ("matcher", "share_qk") => m.share_qk = parse(n, key, v)?,
            ("matcher", "fusion_bias") => m.fusion_bias = parse(n, key, v)?,
            ("protocol", "name") => t.episode.protocol = parse::<Protocol>(n, key, v)?,
            ("protocol", "support_size") => t.episode.support_size = parse(n, key, v)?,
            ("protocol", "query_size") => t.episode.query_size = parse(n, key, v)?,
            ("protocol", "eval_repeats") => self.eval_repeats = parse(n, key, v)?,
            ("taskrel", "metric") => self.taskrel.metric = parse::<Kernel>(n, key, v)?,
            ("taskrel", "mode") => self.taskrel.mode = parse::<VectorMode>(n, key, v)?,
            ("taskrel", "normalize") => self.taskrel.normalize = parse(n, key, v)?,
            ("", _) => {
                return Err(ConfigError(format!("line {n}: key {key:?} outside a section")))
            }
            _ => return Err(ConfigError(format!("line {n}: unknown key {key:?} in [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        let m = &self.model;
        if m.layers == 0 || m.hidden == 0 {
            return Err(ConfigError("encoder layers and hidden must be positive".into()));
        }
        for (name, p) in [("encoder", m.encoder_dropout), ("matcher", m.matcher_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(ConfigError(format!("{name} dropout must lie in [0, 1), got {p}")));
            }
        }
        if self.eval_repeats == 0 {
            return Err(ConfigError("eval_repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let opt = |o: Option<usize>| o.map_or("none".to_string(), |v| v.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "inner_lr = {}", t.inner_lr);
        let _ = writeln!(s, "inner_steps = {}", t.inner_steps);
        let _ = writeln!(s, "meta_lr = {}", t.meta_lr);
        let _ = writeln!(s, "optimizer = {}", t.optimizer);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "batch_tasks = {}", t.batch_tasks);
        let _ = writeln!(s, "max_epochs = {}", t.max_epochs);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "support_split_fraction = {}", t.support_split_fraction);
        let _ = writeln!(s, "patience = {}", opt(t.patience));
        let _ = writeln!(s, "\n[encoder]");
        let _ = writeln!(s, "layers = {}", m.layers);
        let _ = writeln!(s, "hidden = {}", m.hidden);
        let _ = writeln!(s, "dropout = {}", m.encoder_dropout);
        let _ = writeln!(s, "\n[matcher]");
        let _ = writeln!(s, "heads = 1");
        let _ = writeln!(s, "dropout = {}", m.matcher_dropout);
        let _ = writeln!(s, "share_qk = {}", m.share_qk);
        let _ = writeln!(s, "fusion_bias = {}", m.fusion_bias);
        let _ = writeln!(s, "\n[protocol]");
        let _ = writeln!(s, "name = {}", t.episode.protocol);
        let _ = writeln!(s, "support_size = {}", t.episode.support_size);
        let _ = writeln!(s, "query_size = {}", t.episode.query_size);
        let _ = writeln!(s, "eval_repeats = {}", self.eval_repeats);
        let _ = writeln!(s, "\n[taskrel]");
        let _ = writeln!(s, "metric = {}", self.taskrel.metric);
        let _ = writeln!(s, "mode = {}", self.taskrel.mode);
        let _ = writeln!(s, "normalize = {}", self.taskrel.normalize);
        s
    }

    pub fn episode(&self) -> &EpisodeConfig {
        &self.train.episode
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.model.hidden, 300);
        assert_eq!(cfg.train.inner_lr, 0.05);
        assert_eq!(cfg.train.batch_tasks, 21);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# small run\n[encoder]\nhidden = 64 # narrow\n[train]\noptimizer = adamw\npatience = 10\n[protocol]\nname = unbalanced\nsupport_size = 16\n",
        )
        .unwrap();
        assert_eq!(cfg.model.hidden, 64);
        assert_eq!(cfg.train.optimizer, OptimizerKind::AdamW);
        assert_eq!(cfg.train.patience, Some(10));
        assert_eq!(cfg.train.episode.protocol, Protocol::Unbalanced);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_typos_and_bad_values() {
        for bad in [
            "[train]\ninner_lrr = 0.1\n",
            "[trian]\n",
            "seed = 3\n",
            "[train]\ninner_steps = five\n",
            "[train]\ninner_lr = 0\n",
            "[matcher]\nheads = 4\n",
            "[encoder]\nhidden\n",
            "[matcher]\ndropout = 1.5\n",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
    }
}

//! Task registry, episodic samplers and JSON-lines dataset layout.
//!
//! On disk a registry is `root/{train,valid,test}/<task_id>.jsonl`, one
//! `{"smiles": "...", "label": 0|1}` object per line.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smiles::{mol_from_smiles, MolGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub smiles: String,
    pub label: u8,
    pub graph: Arc<MolGraph>,
}

#[derive(Debug, Clone)]
pub struct TaskRecord {
    pub id: String,
    pub split: Split,
    pub examples: Vec<Example>,
}

impl TaskRecord {
    /// Builds a task from labelled SMILES, rejecting unparseable entries.
    pub fn from_pairs(id: &str, split: Split, pairs: &[(&str, u8)]) -> Result<TaskRecord> {
        let examples = pairs
            .iter()
            .map(|&(s, label)| {
                Ok(Example {
                    smiles: s.to_string(),
                    label,
                    graph: Arc::new(mol_from_smiles(s)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskRecord {
            id: id.to_string(),
            split,
            examples,
        })
    }

    pub fn class_indices(&self, label: u8) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.class_indices(1).len() as f64 / self.examples.len() as f64
    }
}

/// Tasks sorted by id.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    pub tasks: Vec<TaskRecord>,
}

impl Registry {
    pub fn new(mut tasks: Vec<TaskRecord>) -> Result<Registry> {
        tasks.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in tasks.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::DuplicateTask(pair[0].id.clone()));
            }
        }
        Ok(Registry { tasks })
    }

    pub fn split(&self, split: Split) -> Vec<&TaskRecord> {
        self.tasks.iter().filter(|t| t.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&TaskRecord> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Writes the JSON-lines layout under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for split in Split::ALL {
            let dir = root.join(split.dir_name());
            fs::create_dir_all(&dir).map_err(|source| Error::Io {
                path: dir.clone(),
                source,
            })?;
        }
        for task in &self.tasks {
            let path = root
                .join(task.split.dir_name())
                .join(format!("{}.jsonl", task.id));
            let mut out = String::new();
            for e in &task.examples {
                let line = serde_json::to_string(&Line {
                    smiles: e.smiles.clone(),
                    label: e.label,
                })
                .expect("serialising a plain struct");
                out.push_str(&line);
                out.push('\n');
            }
            fs::File::create(&path)
                .and_then(|mut f| f.write_all(out.as_bytes()))
                .map_err(|source| Error::Io { path, source })?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    smiles: String,
    label: u8,
}

/// Counts of what `load_registry` dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub malformed_lines: usize,
    pub skipped_tasks: Vec<String>,
    pub messages: Vec<String>,
}

pub fn load_registry(root: &Path) -> Result<(Registry, LoadReport)> {
    if !root.is_dir() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let mut report = LoadReport::default();
    let mut tasks = Vec::new();
    let mut seen = BTreeSet::new();
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let io = |source| Error::Io {
            path: dir.clone(),
            source,
        };
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(io)?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for path in files {
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateTask(id));
            }
            let text = fs::read_to_string(&path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            let mut examples = Vec::new();
            for (n, raw) in text.lines().enumerate() {
                if raw.trim().is_empty() {
                    continue;
                }
                match parse_line(raw) {
                    Ok(e) => examples.push(e),
                    Err(msg) => {
                        report.malformed_lines += 1;
                        report
                            .messages
                            .push(format!("{}:{}: {msg}", path.display(), n + 1));
                    }
                }
            }
            if examples.len() < 2 {
                report.skipped_tasks.push(id);
                continue;
            }
            tasks.push(TaskRecord {
                id,
                split,
                examples,
            });
        }
    }
    if tasks.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    Ok((Registry::new(tasks)?, report))
}

fn parse_line(raw: &str) -> std::result::Result<Example, String> {
    let line: Line = serde_json::from_str(raw).map_err(|e| e.to_string())?;
    if line.label > 1 {
        return Err(format!("label {} is not 0 or 1", line.label));
    }
    let graph = mol_from_smiles(&line.smiles).map_err(|e| e.to_string())?;
    Ok(Example {
        smiles: line.smiles,
        label: line.label,
        graph: Arc::new(graph),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Balanced,
    Unbalanced,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "balanced" => Ok(Protocol::Balanced),
            "unbalanced" => Ok(Protocol::Unbalanced),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Balanced => "balanced",
            Protocol::Unbalanced => "unbalanced",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Labeled {
    /// Position of the example inside its task.
    pub index: usize,
    pub graph: Arc<MolGraph>,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub task_id: String,
    pub support: Vec<Labeled>,
    pub query: Vec<Labeled>,
    pub protocol: Protocol,
}

impl Episode {
    pub fn support_graphs(&self) -> Vec<&MolGraph> {
        self.support.iter().map(|e| e.graph.as_ref()).collect()
    }

    pub fn query_graphs(&self) -> Vec<&MolGraph> {
        self.query.iter().map(|e| e.graph.as_ref()).collect()
    }

    pub fn support_labels(&self) -> Vec<u8> {
        self.support.iter().map(|e| e.label).collect()
    }

    pub fn query_labels(&self) -> Vec<u8> {
        self.query.iter().map(|e| e.label).collect()
    }
}

fn labeled(task: &TaskRecord, idx: &[usize]) -> Vec<Labeled> {
    idx.iter()
        .map(|&i| Labeled {
            index: i,
            graph: Arc::clone(&task.examples[i].graph),
            label: task.examples[i].label,
        })
        .collect()
}

fn sampling_error(task: &TaskRecord, message: String) -> Error {
    Error::Sampling {
        task: task.id.clone(),
        message,
    }
}

/// Exactly `support_size / 2` examples per class in the support set; the
/// shuffled remainder, capped at `query_size`, forms the query.
pub fn sample_episode_balanced(
    task: &TaskRecord,
    support_size: usize,
    query_size: usize,
    seed: u64,
) -> Result<Episode> {
    if support_size == 0 || support_size % 2 != 0 {
        return Err(sampling_error(
            task,
            format!("balanced support size must be even and positive, got {support_size}"),
        ));
    }
    let per_class = support_size / 2;
    let mut pos = task.class_indices(1);
    let mut neg = task.class_indices(0);
    if pos.len() < per_class || neg.len() < per_class || task.examples.len() <= support_size {
        return Err(sampling_error(
            task,
            format!(
                "need {per_class} positives and {per_class} negatives plus one query, have {} and {}",
                pos.len(),
                neg.len()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut support: Vec<usize> = pos[..per_class].iter().chain(&neg[..per_class]).copied().collect();
    support.shuffle(&mut rng);
    let mut rest: Vec<usize> = pos[per_class..].iter().chain(&neg[per_class..]).copied().collect();
    rest.shuffle(&mut rng);
    rest.truncate(query_size);
    Ok(Episode {
        task_id: task.id.clone(),
        support: labeled(task, &support),
        query: labeled(task, &rest),
        protocol: Protocol::Balanced,
    })
}

/// Uniform draw without class stratification. Every class present in the
/// task is guaranteed at least one support member.
pub fn sample_episode_unbalanced(
    task: &TaskRecord,
    support_size: usize,
    query_size: usize,
    seed: u64,
) -> Result<Episode> {
    let n = task.examples.len();
    if support_size == 0 || support_size >= n {
        return Err(sampling_error(
            task,
            format!("support size {support_size} needs more than {n} examples"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (support, rest) = order.split_at_mut(support_size);
    for class in [0u8, 1] {
        let has = |i: &usize| task.examples[*i].label == class;
        if support.iter().any(has) || !rest.iter().any(has) {
            continue;
        }
        // Swap a random member of the other class for a random member of this one.
        let out_pos: Vec<usize> = (0..support.len()).collect();
        let candidates: Vec<usize> = (0..rest.len()).filter(|&j| has(&rest[j])).collect();
        if support.len() < 2 {
            break;
        }
        let i = out_pos[rng.gen_range(0..out_pos.len())];
        let j = candidates[rng.gen_range(0..candidates.len())];
        std::mem::swap(&mut support[i], &mut rest[j]);
    }
    let support = support.to_vec();
    let mut rest = rest.to_vec();
    rest.truncate(query_size);
    Ok(Episode {
        task_id: task.id.clone(),
        support: labeled(task, &support),
        query: labeled(task, &rest),
        protocol: Protocol::Unbalanced,
    })
}

pub fn sample_episode(
    task: &TaskRecord,
    protocol: Protocol,
    support_size: usize,
    query_size: usize,
    seed: u64,
) -> Result<Episode> {
    match protocol {
        Protocol::Balanced => sample_episode_balanced(task, support_size, query_size, seed),
        Protocol::Unbalanced => sample_episode_unbalanced(task, support_size, query_size, seed),
    }
}

//! Synthetic few-shot tasks: each task labels a pool of generated molecules
//! with a hidden structural rule.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episodes::{Example, Registry, Split, TaskRecord};
use crate::error::Result;
use crate::smiles::{featurize, parse_smiles, AtomFeatureSchema, BondOrder, ParsedMolecule};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    ContainsElement(String),
    HasRing,
    HasDoubleBond,
    AtomCountAtLeast(usize),
}

impl Rule {
    pub fn label(&self, mol: &ParsedMolecule) -> u8 {
        let hit = match self {
            Rule::ContainsElement(e) => mol.atoms.iter().any(|a| &a.element == e),
            Rule::HasRing => mol.has_ring(),
            Rule::HasDoubleBond => mol.bonds.iter().any(|b| b.order == BondOrder::Double),
            Rule::AtomCountAtLeast(k) => mol.atoms.len() >= *k,
        };
        u8::from(hit)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::ContainsElement(e) => write!(f, "contains {e}"),
            Rule::HasRing => f.write_str("contains a ring"),
            Rule::HasDoubleBond => f.write_str("contains a double bond"),
            Rule::AtomCountAtLeast(k) => write!(f, "at least {k} heavy atoms"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Template {
    Alkane,
    Alcohol,
    Amine,
    Aromatic,
}

/// One random molecule: an alkane, alcohol, amine or aromatic template with
/// at most one decoration (halogen, double bond or thioether). More
/// decorations per molecule bury single-atom rules under irrelevant
/// substructure.
pub fn random_smiles<R: Rng + ?Sized>(rng: &mut R) -> String {
    let template = [Template::Alkane, Template::Alcohol, Template::Amine, Template::Aromatic]
        .choose(rng)
        .copied()
        .unwrap();
    let min_len = if template == Template::Aromatic { 1 } else { 2 };
    let n = rng.gen_range(min_len..=6);
    let mut atoms: Vec<String> = vec!["C".to_string(); n];
    if n >= 3 && rng.gen_bool(0.3) {
        atoms[rng.gen_range(1..n - 1)] = "C(C)".to_string();
    }
    let mut decorations = vec!["halogen", "double", "thio"];
    decorations.shuffle(rng);
    let k = rng.gen_range(0..=1);
    let mut bonds = vec![""; n.saturating_sub(1)];
    let mut prefix = String::new();
    for &d in &decorations[..k] {
        match d {
            "halogen" => prefix = ["F", "Cl", "Br"].choose(rng).unwrap().to_string(),
            "double" if n >= 2 => bonds[rng.gen_range(0..n - 1)] = "=",
            "thio" if n >= 2 => {
                let at = rng.gen_range(1..n);
                atoms[at] = format!("S{}", atoms[at]);
            }
            _ => {}
        }
    }
    let mut chain = String::new();
    for (i, a) in atoms.iter().enumerate() {
        if i > 0 {
            chain.push_str(bonds[i - 1]);
        }
        chain.push_str(a);
    }
    match template {
        Template::Alkane => format!("{prefix}{chain}"),
        Template::Alcohol => format!("{prefix}{chain}O"),
        Template::Amine => format!("{prefix}{chain}N"),
        Template::Aromatic => format!("{prefix}{chain}c1ccccc1"),
    }
}

struct PoolEntry {
    smiles: String,
    mol: ParsedMolecule,
}

fn build_pool(rng: &mut ChaCha8Rng, size: usize) -> Vec<PoolEntry> {
    let mut seen = std::collections::BTreeSet::new();
    let mut pool = Vec::with_capacity(size);
    let mut attempts = 0;
    while pool.len() < size && attempts < size * 50 {
        attempts += 1;
        let smiles = random_smiles(rng);
        if !seen.insert(smiles.clone()) {
            continue;
        }
        let mol = parse_smiles(&smiles).expect("generated SMILES always parse");
        pool.push(PoolEntry { smiles, mol });
    }
    pool
}

fn candidate_rules(pool: &[PoolEntry]) -> Vec<Rule> {
    let mut sizes: Vec<usize> = pool.iter().map(|p| p.mol.atoms.len()).collect();
    sizes.sort_unstable();
    let median = sizes[sizes.len() / 2];
    let mut rules: Vec<Rule> = ["O", "N", "S", "F", "Cl", "Br"]
        .iter()
        .map(|e| Rule::ContainsElement(e.to_string()))
        .collect();
    rules.extend([
        Rule::HasRing,
        Rule::HasDoubleBond,
        Rule::AtomCountAtLeast(median),
    ]);
    rules
}

/// Generates `n_train` training and `n_test` test tasks of
/// `molecules_per_task` molecules each, with 35–65% positives per task.
pub fn synth_generate(
    n_train: usize,
    n_test: usize,
    molecules_per_task: usize,
    seed: u64,
) -> Result<Registry> {
    synth_generate_with_rules(n_train, n_test, molecules_per_task, seed).map(|(r, _)| r)
}

/// Like [`synth_generate`], also returning each task's rule in registry order.
pub fn synth_generate_with_rules(
    n_train: usize,
    n_test: usize,
    molecules_per_task: usize,
    seed: u64,
) -> Result<(Registry, Vec<Rule>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = build_pool(&mut rng, (molecules_per_task * 40).max(2000));
    let rules = candidate_rules(&pool);
    let labelled: Vec<(Vec<usize>, Vec<usize>)> = rules
        .iter()
        .map(|r| {
            let (pos, neg): (Vec<usize>, Vec<usize>) =
                (0..pool.len()).partition(|&i| r.label(&pool[i].mol) == 1);
            (pos, neg)
        })
        .collect();

    let mut tasks = Vec::with_capacity(n_train + n_test);
    let mut chosen = Vec::with_capacity(n_train + n_test);
    let plan = (0..n_train)
        .map(|i| (Split::Train, format!("synth-train-{i:04}")))
        .chain((0..n_test).map(|i| (Split::Test, format!("synth-test-{i:04}"))));
    for (split, id) in plan {
        let n_pos = (molecules_per_task as f64 * rng.gen_range(0.4..=0.6)).round() as usize;
        let n_pos = n_pos.clamp(1, molecules_per_task.saturating_sub(1).max(1));
        let n_neg = molecules_per_task - n_pos;
        let usable: Vec<usize> = (0..rules.len())
            .filter(|&r| labelled[r].0.len() >= n_pos && labelled[r].1.len() >= n_neg)
            .collect();
        let r = *usable
            .choose(&mut rng)
            .expect("pool supports at least one rule at this task size");
        let (pos, neg) = &labelled[r];
        let mut picks: Vec<(usize, u8)> = pos
            .choose_multiple(&mut rng, n_pos)
            .map(|&i| (i, 1))
            .chain(neg.choose_multiple(&mut rng, n_neg).map(|&i| (i, 0)))
            .collect();
        picks.shuffle(&mut rng);
        let examples = picks
            .into_iter()
            .map(|(i, label)| Example {
                smiles: pool[i].smiles.clone(),
                label,
                graph: Arc::new(featurize(&pool[i].mol, AtomFeatureSchema)),
            })
            .collect();
        chosen.push((id.clone(), rules[r].clone()));
        tasks.push(TaskRecord {
            id,
            split,
            examples,
        });
    }
    chosen.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((Registry::new(tasks)?, chosen.into_iter().map(|(_, r)| r).collect()))
}

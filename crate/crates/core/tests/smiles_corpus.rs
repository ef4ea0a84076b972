use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimatch::smiles::{parse_smiles, SmilesError};
use unimatch::mol_from_smiles;

fn corpus() -> Vec<(String, usize, usize)> {
    include_str!("fixtures/smiles_corpus.tsv")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn corpus_counts_match() {
    let c = corpus();
    assert_eq!(c.len(), 50);
    for (smiles, atoms, bonds) in &c {
        let g = mol_from_smiles(smiles).unwrap_or_else(|e| panic!("{smiles}: {e}"));
        assert_eq!(g.n_atoms(), *atoms, "{smiles} atoms");
        assert_eq!(g.n_bonds(), *bonds, "{smiles} bonds");
    }
}

#[test]
fn malformed_strings_report_locations() {
    // (input, expected byte offset; None for whole-string errors)
    let cases: &[(&str, Option<usize>)] = &[
        ("", None),
        ("C1CC", Some(1)),
        ("CC(C", Some(2)),
        ("CC)C", Some(2)),
        ("C()C", Some(2)),
        ("(C)C", Some(0)),
        ("=CC", Some(0)),
        ("CC=", Some(2)),
        ("C[NH4", Some(1)),
        ("C[]", Some(1)),
        ("CC.O", Some(2)),
        ("C1C1", Some(3)),
        ("C11", Some(2)),
        ("CXC", Some(1)),
        ("C=1CC-1", Some(6)),
        ("1CC", Some(0)),
        ("C$", Some(1)),
        ("C%1C", Some(1)),
    ];
    for (s, want) in cases {
        let err = parse_smiles(s).expect_err(s);
        assert_eq!(err.offset(), *want, "{s:?}: {err}");
        if let Some(o) = want {
            assert!(err.to_string().contains(&format!("byte {o}")), "{s:?}: {err}");
        }
    }
    assert_eq!(parse_smiles(""), Err(SmilesError::Empty));
}

const ALPHABET: &[&str] = &[
    "C", "c", "N", "n", "O", "o", "S", "Cl", "Br", "[", "]", "(", ")", "=", "#", "1", "2", "%", "%12", "@", "/",
    "\\", "+", "-", ".", "H", "x", "0", "9", "*", "[nH]", "[O-]",
];

fn mutate(rng: &mut ChaCha8Rng, s: &str) -> String {
    let mut chars: Vec<String> = s.chars().map(String::from).collect();
    for _ in 0..rng.gen_range(1..=3) {
        let at = rng.gen_range(0..=chars.len());
        match rng.gen_range(0..4) {
            0 if at < chars.len() => {
                chars.remove(at);
            }
            1 if at < chars.len() => chars[at] = ALPHABET.choose(rng).unwrap().to_string(),
            2 => chars.insert(at, ALPHABET.choose(rng).unwrap().to_string()),
            _ => {
                let cut = rng.gen_range(0..=chars.len());
                chars.truncate(cut);
            }
        }
    }
    chars.concat()
}

#[test]
fn mutation_fuzz_never_panics() {
    let seeds: Vec<String> = corpus().into_iter().map(|(s, _, _)| s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut ok, mut rejected) = (0, 0);
    for _ in 0..10_000 {
        let base = seeds.choose(&mut rng).unwrap();
        let s = mutate(&mut rng, base);
        let out = std::panic::catch_unwind(|| mol_from_smiles(&s));
        match out {
            Ok(Ok(g)) => {
                ok += 1;
                assert!(g.bonds.iter().all(|&(u, v)| u < v && v < g.n_atoms()), "{s}");
            }
            Ok(Err(e)) => {
                rejected += 1;
                if let Some(o) = e.offset() {
                    assert!(o <= s.len(), "{s:?}: {e}");
                }
            }
            Err(_) => panic!("parser panicked on {s:?}"),
        }
    }
    assert!(ok > 0 && rejected > 0);
}

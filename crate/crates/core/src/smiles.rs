//! SMILES ingestion: tokenizer, graph parser and fixed-schema featurizer.
//!
//! Supported grammar: organic-subset atoms, bracket atoms (isotope, element,
//! chirality, hydrogen count, charge, atom class), bond symbols, ring
//! closures including `%nn`, and branches. Stereo marks and isotopes are
//! accepted and dropped. Dot-separated fragments are rejected.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty SMILES string")]
    Empty,
    #[error("unexpected character {ch:?} at byte {offset}")]
    UnexpectedChar { ch: char, offset: usize },
    #[error("unterminated bracket atom starting at byte {offset}")]
    UnterminatedBracket { offset: usize },
    #[error("malformed bracket atom at byte {offset}: {reason}")]
    BadBracket { offset: usize, reason: &'static str },
    #[error("bond symbol at byte {offset} has no preceding atom")]
    LeadingBond { offset: usize },
    #[error("bond symbol at byte {offset} is not followed by an atom or ring label")]
    DanglingBond { offset: usize },
    #[error("ring closure at byte {offset} has no preceding atom")]
    RingWithoutAtom { offset: usize },
    #[error("ring label {label} opened at byte {offset} is never closed")]
    UnclosedRing { label: u16, offset: usize },
    #[error("ring closure {label} at byte {offset} bonds an atom to itself")]
    RingSelfLoop { label: u16, offset: usize },
    #[error("conflicting bond orders for ring label {label} at byte {offset}")]
    RingBondConflict { label: u16, offset: usize },
    #[error("duplicate bond between atoms {u} and {v} at byte {offset}")]
    DuplicateBond { u: usize, v: usize, offset: usize },
    #[error("branch opened at byte {offset} has no preceding atom")]
    BranchWithoutAtom { offset: usize },
    #[error("unmatched ')' at byte {offset}")]
    UnmatchedClose { offset: usize },
    #[error("empty branch at byte {offset}")]
    EmptyBranch { offset: usize },
    #[error("unclosed '(' at byte {offset}")]
    UnclosedBranch { offset: usize },
    #[error("multi-fragment SMILES ('.' at byte {offset}) is not supported")]
    MultiFragment { offset: usize },
    #[error("no atoms in SMILES")]
    NoAtoms,
}

impl SmilesError {
    /// Byte offset the error points at; `None` for whole-string failures.
    pub fn offset(&self) -> Option<usize> {
        use SmilesError::*;
        match *self {
            Empty | NoAtoms => None,
            UnexpectedChar { offset, .. }
            | UnterminatedBracket { offset }
            | BadBracket { offset, .. }
            | LeadingBond { offset }
            | DanglingBond { offset }
            | RingWithoutAtom { offset }
            | UnclosedRing { offset, .. }
            | RingSelfLoop { offset, .. }
            | RingBondConflict { offset, .. }
            | DuplicateBond { offset, .. }
            | BranchWithoutAtom { offset }
            | UnmatchedClose { offset }
            | EmptyBranch { offset }
            | UnclosedBranch { offset }
            | MultiFragment { offset } => Some(offset),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn index(self) -> usize {
        match self {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomSpec {
    pub element: String,
    pub aromatic: bool,
    pub charge: i8,
    /// Hydrogen count written inside brackets; 0 for organic-subset atoms.
    pub explicit_h: u8,
    pub bracket: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Atom(AtomSpec),
    Bond(BondOrder),
    Ring(u16),
    BranchOpen,
    BranchClose,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    /// Byte offset of the token's first character.
    pub offset: usize,
}

const ELEMENTS: &[&str] = &[
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

const AROMATIC_BRACKET: &[&str] = &["se", "as", "te", "b", "c", "n", "o", "p", "s"];

fn organic(element: &str, aromatic: bool) -> TokenKind {
    TokenKind::Atom(AtomSpec {
        element: element.to_string(),
        aromatic,
        charge: 0,
        explicit_h: 0,
        bracket: false,
    })
}

pub fn tokenize(smiles: &str) -> Result<Vec<Token>, SmilesError> {
    if smiles.is_empty() {
        return Err(SmilesError::Empty);
    }
    if let Some((offset, ch)) = smiles.char_indices().find(|(_, c)| !c.is_ascii()) {
        return Err(SmilesError::UnexpectedChar { ch, offset });
    }
    let bytes = smiles.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let offset = i;
        let c = bytes[i];
        let next = bytes.get(i + 1).copied();
        let (kind, width) = match c {
            b'C' if next == Some(b'l') => (organic("Cl", false), 2),
            b'B' if next == Some(b'r') => (organic("Br", false), 2),
            b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' => {
                (organic(&(c as char).to_string(), false), 1)
            }
            b'b' | b'c' | b'n' | b'o' | b'p' | b's' => {
                (organic(&(c.to_ascii_uppercase() as char).to_string(), true), 1)
            }
            b'[' => {
                let end = bytes[i..]
                    .iter()
                    .position(|&b| b == b']')
                    .ok_or(SmilesError::UnterminatedBracket { offset })?;
                let inner = &smiles[i + 1..i + end];
                (TokenKind::Atom(parse_bracket(inner, offset)?), end + 1)
            }
            b'-' | b'/' | b'\\' => (TokenKind::Bond(BondOrder::Single), 1),
            b'=' => (TokenKind::Bond(BondOrder::Double), 1),
            b'#' => (TokenKind::Bond(BondOrder::Triple), 1),
            b':' => (TokenKind::Bond(BondOrder::Aromatic), 1),
            b'0'..=b'9' => (TokenKind::Ring((c - b'0') as u16), 1),
            b'%' => match (next, bytes.get(i + 2)) {
                (Some(a @ b'0'..=b'9'), Some(&b @ b'0'..=b'9')) => (
                    TokenKind::Ring(((a - b'0') * 10 + (b - b'0')) as u16),
                    3,
                ),
                _ => return Err(SmilesError::UnexpectedChar { ch: '%', offset }),
            },
            b'(' => (TokenKind::BranchOpen, 1),
            b')' => (TokenKind::BranchClose, 1),
            b'.' => (TokenKind::Dot, 1),
            _ => {
                let ch = smiles[i..].chars().next().unwrap_or('\u{FFFD}');
                return Err(SmilesError::UnexpectedChar { ch, offset });
            }
        };
        tokens.push(Token { kind, offset });
        i += width;
    }
    Ok(tokens)
}

/// Parses the text between `[` and `]`.
fn parse_bracket(inner: &str, offset: usize) -> Result<AtomSpec, SmilesError> {
    let b = inner.as_bytes();
    let bad = |reason| SmilesError::BadBracket { offset, reason };
    let mut i = 0;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1; // isotope
    }
    if i >= b.len() {
        return Err(bad("missing element symbol"));
    }
    let (element, aromatic) = if b[i].is_ascii_uppercase() {
        let two = inner.get(i..i + 2);
        match two {
            Some(s) if b[i + 1].is_ascii_lowercase() && ELEMENTS.contains(&s) => {
                i += 2;
                (s.to_string(), false)
            }
            _ => {
                let s = &inner[i..i + 1];
                if !ELEMENTS.contains(&s) {
                    return Err(bad("unknown element"));
                }
                i += 1;
                (s.to_string(), false)
            }
        }
    } else if b[i] == b'*' {
        i += 1;
        ("*".to_string(), false)
    } else {
        let sym = AROMATIC_BRACKET
            .iter()
            .find(|s| inner[i..].starts_with(**s))
            .ok_or(bad("unknown element"))?;
        i += sym.len();
        let mut chars = sym.chars();
        let first = chars.next().unwrap().to_ascii_uppercase();
        (format!("{first}{}", chars.as_str()), true)
    };
    // chirality: @, @@, @TH1, @SP2, @OH12 ...
    if i < b.len() && b[i] == b'@' {
        i += 1;
        if i < b.len() && b[i] == b'@' {
            i += 1;
        } else if ["TH", "AL", "SP", "TB", "OH"]
            .iter()
            .any(|c| inner[i..].starts_with(c))
        {
            i += 2;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
        }
    }
    let mut explicit_h = 0u8;
    if i < b.len() && b[i] == b'H' {
        i += 1;
        explicit_h = 1;
        if i < b.len() && b[i].is_ascii_digit() {
            explicit_h = b[i] - b'0';
            i += 1;
        }
    }
    let mut charge: i32 = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        let sign = if b[i] == b'+' { 1 } else { -1 };
        let sym = b[i];
        i += 1;
        if i < b.len() && b[i].is_ascii_digit() {
            let start = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            let mag: i32 = inner[start..i].parse().map_err(|_| bad("bad charge"))?;
            charge = sign * mag;
        } else {
            charge = sign;
            while i < b.len() && b[i] == sym {
                charge += sign;
                i += 1;
            }
        }
    }
    if i < b.len() && b[i] == b':' {
        i += 1;
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return Err(bad("atom class without digits"));
        }
    }
    if i != b.len() {
        return Err(bad("trailing characters"));
    }
    Ok(AtomSpec {
        element,
        aromatic,
        charge: charge.clamp(i8::MIN as i32, i8::MAX as i32) as i8,
        explicit_h,
        bracket: true,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAtom {
    pub element: String,
    pub aromatic: bool,
    pub charge: i8,
    pub explicit_h: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedBond {
    pub u: usize,
    pub v: usize,
    pub order: BondOrder,
}

/// Annotated graph before featurization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedMolecule {
    pub atoms: Vec<ParsedAtom>,
    pub bonds: Vec<ParsedBond>,
    pub smiles: String,
}

impl ParsedMolecule {
    pub fn degree(&self, atom: usize) -> usize {
        self.bonds
            .iter()
            .filter(|b| b.u == atom || b.v == atom)
            .count()
    }

    pub fn has_ring(&self) -> bool {
        // Connected by construction, so any extra edge closes a cycle.
        self.bonds.len() >= self.atoms.len()
    }
}

struct OpenRing {
    atom: usize,
    order: Option<BondOrder>,
    offset: usize,
}

pub fn parse(tokens: &[Token], source: &str) -> Result<ParsedMolecule, SmilesError> {
    let mut atoms: Vec<ParsedAtom> = Vec::new();
    let mut bonds: Vec<ParsedBond> = Vec::new();
    let mut prev: Option<usize> = None;
    let mut pending: Option<(BondOrder, usize)> = None;
    let mut branches: Vec<(usize, usize)> = Vec::new();
    let mut rings: BTreeMap<u16, OpenRing> = BTreeMap::new();
    let mut last_was_open = false;

    let add_bond = |bonds: &mut Vec<ParsedBond>,
                        atoms: &[ParsedAtom],
                        a: usize,
                        b: usize,
                        order: Option<BondOrder>,
                        offset: usize|
     -> Result<(), SmilesError> {
        let order = order.unwrap_or(if atoms[a].aromatic && atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        });
        let (u, v) = (a.min(b), a.max(b));
        if bonds.iter().any(|x| x.u == u && x.v == v) {
            return Err(SmilesError::DuplicateBond { u, v, offset });
        }
        bonds.push(ParsedBond { u, v, order });
        Ok(())
    };

    for tok in tokens {
        let offset = tok.offset;
        let opened = matches!(tok.kind, TokenKind::BranchOpen);
        match &tok.kind {
            TokenKind::Atom(spec) => {
                let idx = atoms.len();
                atoms.push(ParsedAtom {
                    element: spec.element.clone(),
                    aromatic: spec.aromatic,
                    charge: spec.charge,
                    explicit_h: spec.explicit_h,
                });
                if let Some(p) = prev {
                    add_bond(&mut bonds, &atoms, p, idx, pending.take().map(|b| b.0), offset)?;
                }
                prev = Some(idx);
            }
            TokenKind::Bond(order) => {
                if prev.is_none() {
                    return Err(SmilesError::LeadingBond { offset });
                }
                if let Some((_, at)) = pending {
                    return Err(SmilesError::DanglingBond { offset: at });
                }
                pending = Some((*order, offset));
            }
            TokenKind::Ring(label) => {
                let Some(p) = prev else {
                    return Err(SmilesError::RingWithoutAtom { offset });
                };
                let order = pending.take().map(|b| b.0);
                match rings.remove(label) {
                    Some(open) => {
                        if open.atom == p {
                            return Err(SmilesError::RingSelfLoop {
                                label: *label,
                                offset,
                            });
                        }
                        let order = match (open.order, order) {
                            (Some(a), Some(b)) if a != b => {
                                return Err(SmilesError::RingBondConflict {
                                    label: *label,
                                    offset,
                                })
                            }
                            (a, b) => a.or(b),
                        };
                        add_bond(&mut bonds, &atoms, open.atom, p, order, offset)?;
                    }
                    None => {
                        rings.insert(
                            *label,
                            OpenRing {
                                atom: p,
                                order,
                                offset,
                            },
                        );
                    }
                }
            }
            TokenKind::BranchOpen => {
                let Some(p) = prev else {
                    return Err(SmilesError::BranchWithoutAtom { offset });
                };
                if let Some((_, at)) = pending {
                    return Err(SmilesError::DanglingBond { offset: at });
                }
                branches.push((p, offset));
            }
            TokenKind::BranchClose => {
                if last_was_open {
                    return Err(SmilesError::EmptyBranch { offset });
                }
                if let Some((_, at)) = pending {
                    return Err(SmilesError::DanglingBond { offset: at });
                }
                let (p, _) = branches
                    .pop()
                    .ok_or(SmilesError::UnmatchedClose { offset })?;
                prev = Some(p);
            }
            TokenKind::Dot => return Err(SmilesError::MultiFragment { offset }),
        }
        last_was_open = opened;
    }
    if let Some((_, at)) = pending {
        return Err(SmilesError::DanglingBond { offset: at });
    }
    if let Some(&(_, offset)) = branches.last() {
        return Err(SmilesError::UnclosedBranch { offset });
    }
    if let Some((label, open)) = rings.iter().next() {
        return Err(SmilesError::UnclosedRing {
            label: *label,
            offset: open.offset,
        });
    }
    if atoms.is_empty() {
        return Err(SmilesError::NoAtoms);
    }
    Ok(ParsedMolecule {
        atoms,
        bonds,
        smiles: source.to_string(),
    })
}

/// Widths of the one-hot blocks making up an atom feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtomFeatureSchema;

impl AtomFeatureSchema {
    pub const ELEMENTS: [&'static str; 11] =
        ["C", "N", "O", "S", "F", "Cl", "Br", "I", "P", "B", "Si"];
    pub const ELEMENT_WIDTH: usize = 12;
    pub const DEGREE_WIDTH: usize = 7;
    pub const CHARGE_WIDTH: usize = 5;
    pub const AROMATIC_WIDTH: usize = 1;
    pub const H_WIDTH: usize = 5;

    pub const fn width(self) -> usize {
        Self::ELEMENT_WIDTH
            + Self::DEGREE_WIDTH
            + Self::CHARGE_WIDTH
            + Self::AROMATIC_WIDTH
            + Self::H_WIDTH
    }

    pub fn row(self, atom: &ParsedAtom, degree: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.width()];
        let el = Self::ELEMENTS
            .iter()
            .position(|e| *e == atom.element)
            .unwrap_or(Self::ELEMENT_WIDTH - 1);
        row[el] = 1.0;
        let mut base = Self::ELEMENT_WIDTH;
        row[base + degree.min(Self::DEGREE_WIDTH - 1)] = 1.0;
        base += Self::DEGREE_WIDTH;
        row[base + (atom.charge.clamp(-2, 2) + 2) as usize] = 1.0;
        base += Self::CHARGE_WIDTH;
        if atom.aromatic {
            row[base] = 1.0;
        }
        base += Self::AROMATIC_WIDTH;
        row[base + (atom.explicit_h as usize).min(Self::H_WIDTH - 1)] = 1.0;
        row
    }
}

pub const ATOM_DIM: usize = AtomFeatureSchema.width();
pub const BOND_DIM: usize = 4;

/// Featurized molecular graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    pub atom_feats: Tensor,
    /// Undirected bonds with `u < v`.
    pub bonds: Vec<(usize, usize)>,
    /// One-hot over single, double, triple, aromatic; one row per bond.
    pub bond_feats: Vec<[f64; BOND_DIM]>,
    pub source_smiles: String,
}

impl MolGraph {
    pub fn n_atoms(&self) -> usize {
        self.atom_feats.rows()
    }

    pub fn n_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// Relabels atoms so that new atom `i` is old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let bonds = self
            .bonds
            .iter()
            .map(|&(u, v)| {
                let (a, b) = (inverse[u], inverse[v]);
                (a.min(b), a.max(b))
            })
            .collect();
        MolGraph {
            atom_feats: self.atom_feats.select_rows(perm),
            bonds,
            bond_feats: self.bond_feats.clone(),
            source_smiles: self.source_smiles.clone(),
        }
    }
}

pub fn featurize(mol: &ParsedMolecule, schema: AtomFeatureSchema) -> MolGraph {
    let rows: Vec<Vec<f64>> = mol
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| schema.row(a, mol.degree(i)))
        .collect();
    let bond_feats = mol
        .bonds
        .iter()
        .map(|b| {
            let mut f = [0.0; BOND_DIM];
            f[b.order.index()] = 1.0;
            f
        })
        .collect();
    MolGraph {
        atom_feats: Tensor::from_rows(&rows),
        bonds: mol.bonds.iter().map(|b| (b.u, b.v)).collect(),
        bond_feats,
        source_smiles: mol.smiles.clone(),
    }
}

pub fn parse_smiles(smiles: &str) -> Result<ParsedMolecule, SmilesError> {
    parse(&tokenize(smiles)?, smiles)
}

/// Tokenize, parse and featurize in one step.
pub fn mol_from_smiles(smiles: &str) -> Result<MolGraph, SmilesError> {
    Ok(featurize(&parse_smiles(smiles)?, AtomFeatureSchema))
}

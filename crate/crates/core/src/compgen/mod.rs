//! Synthetic compositional-generalization benchmark: a small English-like
//! source language, a target language with its own alphabet, novel compounds
//! held out of training, and the compound error metrics.

mod generate;
mod io;
mod metrics;

pub use generate::{generate_corpus, Corpus};
pub use io::{read_corpus_dir, read_jsonl, write_corpus_dir, write_jsonl, CorpusFiles, Manifest, SPLITS};
pub use metrics::{check_compound, cter, exact_match, CterReport, GroupStats, CONTEXT_BUCKETS};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::training::Pair;
use crate::vocab::Vocab;

/// Target token inserted between a modifier and its head.
pub const MOD_MARKER: &str = "DE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompoundKind {
    /// `the n` (training only, keeps noun atoms in plain contexts).
    Np,
    /// `the n that m`
    NpMod,
    /// `v the n`
    VpNp,
    /// `v the n that m`
    VpNpMod,
    /// `p the n`
    PpNp,
    /// `p the n that m`
    PpNpMod,
}

impl CompoundKind {
    pub const ALL: [CompoundKind; 6] = [
        CompoundKind::Np,
        CompoundKind::NpMod,
        CompoundKind::VpNp,
        CompoundKind::VpNpMod,
        CompoundKind::PpNp,
        CompoundKind::PpNpMod,
    ];

    /// Roles of the atoms, in source order.
    pub fn roles(self) -> &'static [Role] {
        use Role::*;
        match self {
            CompoundKind::Np => &[Np],
            CompoundKind::NpMod => &[Np, Mod],
            CompoundKind::VpNp => &[Vp, Np],
            CompoundKind::VpNpMod => &[Vp, Np, Mod],
            CompoundKind::PpNp => &[Pp, Np],
            CompoundKind::PpNpMod => &[Pp, Np, Mod],
        }
    }

    pub fn has_mod(self) -> bool {
        self.roles().contains(&Role::Mod)
    }

    /// Syntactic category of the slot the compound fills.
    pub fn category(self) -> Category {
        match self.roles()[0] {
            Role::Vp => Category::Vp,
            Role::Pp => Category::Pp,
            _ => Category::Np,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Np,
    Vp,
    Pp,
    Mod,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Np, Role::Vp, Role::Pp, Role::Mod];

    fn prefix(self) -> &'static str {
        match self {
            Role::Np => "n",
            Role::Vp => "v",
            Role::Pp => "p",
            Role::Mod => "m",
        }
    }

    /// Source word of atom `index`.
    pub fn atom(self, index: usize) -> String {
        format!("{}{index}", self.prefix())
    }

    /// Function word preceding the atom in the source, if any.
    pub fn determiner(self) -> Option<&'static str> {
        match self {
            Role::Np => Some("the"),
            Role::Mod => Some("that"),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Np,
    Vp,
    Pp,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Np, Category::Vp, Category::Pp];
}

/// Which atom combinations are withheld from training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldoutPolicy {
    /// Number of novel compounds, drawn round-robin over `kinds`.
    pub compounds: usize,
    pub kinds: Vec<CompoundKind>,
}

impl Default for HoldoutPolicy {
    fn default() -> Self {
        Self {
            compounds: 120,
            kinds: CompoundKind::ALL[1..].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub nouns: usize,
    pub verbs: usize,
    pub preps: usize,
    pub mods: usize,
    /// Size of the context-word inventory.
    pub context_words: usize,
    pub templates_per_category: usize,
    /// Context words per template, inclusive bounds.
    pub min_context: usize,
    pub max_context: usize,
    /// Target realizations per atom; 1 gives a one-to-one dictionary.
    pub realizations_per_atom: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Contexts per held-out compound (k).
    pub contexts_per_compound: usize,
    pub holdout: HoldoutPolicy,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            nouns: 40,
            verbs: 40,
            preps: 40,
            mods: 40,
            context_words: 60,
            templates_per_category: 40,
            min_context: 2,
            max_context: 7,
            realizations_per_atom: 1,
            train: 8000,
            dev: 400,
            test: 600,
            contexts_per_compound: 5,
            holdout: HoldoutPolicy::default(),
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn atoms(&self, role: Role) -> usize {
        match role {
            Role::Np => self.nouns,
            Role::Vp => self.verbs,
            Role::Pp => self.preps,
            Role::Mod => self.mods,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Atom → valid target realizations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomDictionary {
    pub atoms: BTreeMap<String, Vec<Vec<String>>>,
    /// Inserted after a modifier's realization, which precedes its head.
    pub mod_marker: String,
}

impl AtomDictionary {
    pub fn get(&self, atom: &str) -> Result<&[Vec<String>]> {
        match self.atoms.get(atom) {
            Some(r) if !r.is_empty() => Ok(r),
            _ => Err(Error::contract(format!("atom `{atom}` missing from dictionary"))),
        }
    }

    /// All target renderings of a compound: the cartesian product of atom
    /// realizations, laid out as `[head] MOD DE NOUN` (head being the verb or
    /// preposition when present).
    pub fn compound_realizations(&self, kind: CompoundKind, atoms: &[String]) -> Result<Vec<Vec<String>>> {
        let roles = kind.roles();
        if atoms.len() != roles.len() {
            return Err(Error::contract(format!(
                "{kind:?} takes {} atoms, got {}",
                roles.len(),
                atoms.len()
            )));
        }
        let mut slots: Vec<(usize, &[Vec<String>])> = Vec::new();
        let find = |role: Role| roles.iter().position(|&r| r == role);
        for role in [Role::Vp, Role::Pp, Role::Mod, Role::Np] {
            if let Some(i) = find(role) {
                slots.push((i, self.get(&atoms[i])?));
            }
        }
        let mut out: Vec<Vec<String>> = vec![Vec::new()];
        for (i, options) in slots {
            let mut next = Vec::with_capacity(out.len() * options.len());
            for prefix in &out {
                for r in options {
                    let mut v = prefix.clone();
                    v.extend(r.iter().cloned());
                    if roles[i] == Role::Mod {
                        v.push(self.mod_marker.clone());
                    }
                    next.push(v);
                }
            }
            out = next;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompoundAnnotation {
    pub kind: CompoundKind,
    /// Atom source words in source order.
    pub atoms: Vec<String>,
    /// Half-open token range of the compound in the source.
    pub span: [usize; 2],
    /// Valid target renderings of the compound.
    pub realizations: Vec<Vec<String>>,
}

impl CompoundAnnotation {
    /// Identity of the compound independent of its context.
    pub fn key(&self) -> String {
        format!("{:?}:{}", self.kind, self.atoms.join(" "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lengths {
    /// Source tokens in the compound span.
    pub compound: usize,
    /// Source tokens in the whole sentence.
    pub context: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub compound: CompoundAnnotation,
    pub context_id: usize,
    pub lengths: Lengths,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        let [s, e] = self.compound.span;
        if s >= e || e > self.src.len() || self.lengths.compound != e - s || self.lengths.context != self.src.len() {
            return Err(Error::contract(format!(
                "bad compound span {:?} for {} tokens",
                self.compound.span,
                self.src.len()
            )));
        }
        Ok(())
    }
}

/// Source tokens of a compound.
pub fn render_source(kind: CompoundKind, atoms: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for (role, atom) in kind.roles().iter().zip(atoms) {
        if let Some(d) = role.determiner() {
            out.push(d.to_owned());
        }
        out.push(atom.clone());
    }
    out
}

/// Token-id pairs for training and decoding.
pub fn to_pairs(examples: &[Example], src: &Vocab, tgt: &Vocab) -> Vec<Pair> {
    examples
        .iter()
        .map(|e| Pair::new(src.encode(&e.src), tgt.encode(&e.tgt)))
        .collect()
}

/// Target token for a context word.
pub fn translate_context_word(word: &str) -> String {
    word.to_uppercase()
}

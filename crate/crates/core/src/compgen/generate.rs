use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    render_source, translate_context_word, AtomDictionary, Category, CompoundAnnotation, CompoundKind, CorpusSpec,
    Example, Lengths, Role, MOD_MARKER,
};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Attempts allowed when sampling a fresh item before giving up.
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub cg_test: Vec<Example>,
    pub dictionary: AtomDictionary,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

#[derive(Clone, Debug)]
struct Template {
    id: usize,
    prefix: Vec<String>,
    suffix: Vec<String>,
}

struct Generator<'s> {
    spec: &'s CorpusSpec,
    rng: ChaCha8Rng,
    dictionary: AtomDictionary,
    templates: Vec<(Category, Vec<Template>)>,
    /// Source renderings of held-out compounds.
    held: HashSet<Vec<String>>,
}

fn check_spec(spec: &CorpusSpec) -> Result<()> {
    let fail = |m: &str| Err(Error::Generation(m.to_owned()));
    if Role::ALL.iter().any(|&r| spec.atoms(r) == 0) {
        return fail("every role needs at least one atom");
    }
    if spec.context_words == 0 || spec.min_context > spec.max_context {
        return fail("context words must be non-empty and min_context <= max_context");
    }
    if spec.realizations_per_atom == 0 {
        return fail("realizations_per_atom must be >= 1");
    }
    if spec.holdout.compounds == 0 || spec.holdout.kinds.is_empty() {
        return fail("holdout policy must withhold at least one compound; without it the cg-test set is empty");
    }
    if spec.holdout.kinds.contains(&CompoundKind::Np) {
        return fail("single-atom noun phrases cannot be held out");
    }
    if spec.contexts_per_compound == 0 || spec.templates_per_category < spec.contexts_per_compound {
        return fail("templates_per_category must be >= contexts_per_compound >= 1");
    }
    if spec.train == 0 {
        return fail("training set must be non-empty");
    }
    Ok(())
}

impl<'s> Generator<'s> {
    fn new(spec: &'s CorpusSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut dictionary = AtomDictionary {
            atoms: Default::default(),
            mod_marker: MOD_MARKER.to_owned(),
        };
        for role in Role::ALL {
            for i in 0..spec.atoms(role) {
                let atom = role.atom(i);
                let upper = atom.to_uppercase();
                let realizations = (0..spec.realizations_per_atom)
                    .map(|r| vec![if r == 0 { upper.clone() } else { format!("{upper}_{r}") }])
                    .collect();
                dictionary.atoms.insert(atom, realizations);
            }
        }

        let words: Vec<String> = (0..spec.context_words).map(|i| format!("w{i}")).collect();
        let mut templates = Vec::new();
        let mut next_id = 0;
        for category in Category::ALL {
            let mut seen = HashSet::new();
            let mut list = Vec::new();
            for _ in 0..MAX_ATTEMPTS {
                if list.len() == spec.templates_per_category {
                    break;
                }
                let n = rng.random_range(spec.min_context..=spec.max_context);
                let split = rng.random_range(0..=n);
                let ctx: Vec<String> = (0..n).map(|_| words.choose(&mut rng).unwrap().clone()).collect();
                if seen.insert((ctx.clone(), split)) {
                    let (prefix, suffix) = ctx.split_at(split);
                    list.push(Template {
                        id: next_id,
                        prefix: prefix.to_vec(),
                        suffix: suffix.to_vec(),
                    });
                    next_id += 1;
                }
            }
            if list.len() < spec.templates_per_category {
                return Err(Error::Generation(format!(
                    "only {} distinct {category:?} templates possible",
                    list.len()
                )));
            }
            templates.push((category, list));
        }
        Ok(Self {
            spec,
            rng,
            dictionary,
            templates,
            held: HashSet::new(),
        })
    }

    fn sample_atoms(&mut self, kind: CompoundKind) -> Vec<String> {
        kind.roles()
            .iter()
            .map(|&r| r.atom(self.rng.random_range(0..self.spec.atoms(r))))
            .collect()
    }

    /// True if any contiguous piece of `src` is a held-out compound.
    fn touches_holdout(&self, src: &[String]) -> bool {
        (0..src.len()).any(|i| (i + 1..=src.len()).any(|j| self.held.contains(&src[i..j])))
    }

    fn templates(&self, category: Category) -> &[Template] {
        &self.templates.iter().find(|(c, _)| *c == category).unwrap().1
    }

    fn example(&mut self, kind: CompoundKind, atoms: Vec<String>, template: &Template) -> Result<Example> {
        let compound_src = render_source(kind, &atoms);
        let realizations = self.dictionary.compound_realizations(kind, &atoms)?;
        let chosen = realizations[self.rng.random_range(0..realizations.len())].clone();
        let start = template.prefix.len();
        let span = [start, start + compound_src.len()];
        let src: Vec<String> = template
            .prefix
            .iter()
            .cloned()
            .chain(compound_src)
            .chain(template.suffix.iter().cloned())
            .collect();
        let tgt: Vec<String> = template
            .prefix
            .iter()
            .map(|w| translate_context_word(w))
            .chain(chosen)
            .chain(template.suffix.iter().map(|w| translate_context_word(w)))
            .collect();
        Ok(Example {
            lengths: Lengths {
                compound: span[1] - span[0],
                context: src.len(),
            },
            src,
            tgt,
            compound: CompoundAnnotation {
                kind,
                atoms,
                span,
                realizations,
            },
            context_id: template.id,
        })
    }

    fn random_template(&mut self, category: Category) -> Template {
        let n = self.templates(category).len();
        let i = self.rng.random_range(0..n);
        self.templates(category)[i].clone()
    }

    /// An in-distribution example whose compound avoids every held-out one.
    fn seen_example(&mut self, kinds: &[CompoundKind]) -> Result<Example> {
        for _ in 0..MAX_ATTEMPTS {
            let kind = *kinds.choose(&mut self.rng).unwrap();
            let atoms = self.sample_atoms(kind);
            if !self.touches_holdout(&render_source(kind, &atoms)) {
                let t = self.random_template(kind.category());
                return self.example(kind, atoms, &t);
            }
        }
        Err(Error::Generation(
            "held-out compounds leave no admissible training compounds".into(),
        ))
    }

    /// A training example that contains `atom` in role `role`.
    fn covering_example(&mut self, role: Role, atom: &str) -> Result<Example> {
        let kinds: Vec<CompoundKind> = CompoundKind::ALL
            .into_iter()
            .filter(|k| k.roles().contains(&role))
            .collect();
        for _ in 0..MAX_ATTEMPTS.min(50 * kinds.len()) {
            let kind = *kinds.choose(&mut self.rng).unwrap();
            let mut atoms = self.sample_atoms(kind);
            let slot = kind.roles().iter().position(|&r| r == role).unwrap();
            atoms[slot] = atom.to_owned();
            if !self.touches_holdout(&render_source(kind, &atoms)) {
                let t = self.random_template(kind.category());
                return self.example(kind, atoms, &t);
            }
        }
        Err(Error::Generation(format!(
            "atom `{atom}` only occurs inside held-out compounds; add atoms or shrink the holdout"
        )))
    }
}

/// Builds the corpus deterministically from `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    check_spec(spec)?;
    let mut g = Generator::new(spec)?;

    let kinds = &spec.holdout.kinds;
    let mut held: Vec<(CompoundKind, Vec<String>)> = Vec::new();
    for i in 0..spec.holdout.compounds {
        let kind = kinds[i % kinds.len()];
        let mut found = false;
        for _ in 0..MAX_ATTEMPTS {
            let atoms = g.sample_atoms(kind);
            let src = render_source(kind, &atoms);
            if g.held.insert(src) {
                held.push((kind, atoms));
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Generation(format!(
                "cannot draw {} distinct held-out compounds from the atom inventory",
                spec.holdout.compounds
            )));
        }
    }

    let atom_count: usize = Role::ALL.iter().map(|&r| spec.atoms(r)).sum();
    if spec.train < atom_count {
        return Err(Error::Generation(format!(
            "{} training examples cannot cover {atom_count} atoms",
            spec.train
        )));
    }
    let mut train = Vec::with_capacity(spec.train);
    for role in Role::ALL {
        for i in 0..spec.atoms(role) {
            train.push(g.covering_example(role, &role.atom(i))?);
        }
    }
    while train.len() < spec.train {
        train.push(g.seen_example(&CompoundKind::ALL)?);
    }
    train.shuffle(&mut g.rng);

    let dev = (0..spec.dev)
        .map(|_| g.seen_example(&CompoundKind::ALL))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..spec.test)
        .map(|_| g.seen_example(&CompoundKind::ALL))
        .collect::<Result<Vec<_>>>()?;

    let mut cg_test = Vec::with_capacity(held.len() * spec.contexts_per_compound);
    for (kind, atoms) in held {
        let mut pool = g.templates(kind.category()).to_vec();
        pool.shuffle(&mut g.rng);
        for t in &pool[..spec.contexts_per_compound] {
            cg_test.push(g.example(kind, atoms.clone(), t)?);
        }
    }

    let mut src_tokens: Vec<String> = (0..spec.context_words).map(|i| format!("w{i}")).collect();
    let mut tgt_tokens: Vec<String> = src_tokens.iter().map(|w| translate_context_word(w)).collect();
    src_tokens.extend(["the".to_owned(), "that".to_owned()]);
    tgt_tokens.push(MOD_MARKER.to_owned());
    for (atom, realizations) in &g.dictionary.atoms {
        src_tokens.push(atom.clone());
        tgt_tokens.extend(realizations.iter().flatten().cloned());
    }

    Ok(Corpus {
        spec: spec.clone(),
        train,
        dev,
        test,
        cg_test,
        dictionary: g.dictionary,
        src_vocab: Vocab::from_tokens(src_tokens),
        tgt_vocab: Vocab::from_tokens(tgt_tokens),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compgen::HoldoutPolicy;

    fn small() -> CorpusSpec {
        CorpusSpec {
            nouns: 6,
            verbs: 5,
            preps: 4,
            mods: 4,
            context_words: 10,
            templates_per_category: 8,
            train: 300,
            dev: 20,
            test: 20,
            holdout: HoldoutPolicy {
                compounds: 10,
                ..HoldoutPolicy::default()
            },
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn sizes_and_spans() {
        let c = generate_corpus(&small()).unwrap();
        assert_eq!(c.train.len(), 300);
        assert_eq!(c.cg_test.len(), 50);
        for e in c.train.iter().chain(&c.cg_test) {
            e.validate().unwrap();
            let [s, t] = e.compound.span;
            assert_eq!(e.src[s..t], render_source(e.compound.kind, &e.compound.atoms)[..]);
        }
    }

    #[test]
    fn degenerate_holdout_is_rejected() {
        let spec = CorpusSpec {
            nouns: 1,
            verbs: 1,
            holdout: HoldoutPolicy {
                compounds: 0,
                ..HoldoutPolicy::default()
            },
            ..small()
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn unsatisfiable_coverage_is_rejected() {
        let spec = CorpusSpec {
            nouns: 1,
            verbs: 1,
            holdout: HoldoutPolicy {
                compounds: 1,
                kinds: vec![CompoundKind::VpNp],
            },
            ..small()
        };
        let err = generate_corpus(&spec).unwrap_err().to_string();
        assert!(err.contains("v0"), "{err}");
    }

    #[test]
    fn too_many_holdouts() {
        let spec = CorpusSpec {
            nouns: 2,
            verbs: 2,
            holdout: HoldoutPolicy {
                compounds: 5,
                kinds: vec![CompoundKind::VpNp],
            },
            ..small()
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::Generation(_))));
    }
}

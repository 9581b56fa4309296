use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AtomDictionary, Corpus, CorpusSpec, Example};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

pub const SPLITS: [&str; 4] = ["train", "dev", "test", "cg_test"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_hash: String,
    /// File name → hex SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    src: Vocab,
    tgt: Vocab,
}

/// Names of the files written by [`write_corpus_dir`].
pub struct CorpusFiles;

impl CorpusFiles {
    pub const SPEC: &'static str = "spec.json";
    pub const DICTIONARY: &'static str = "dictionary.json";
    pub const VOCAB: &'static str = "vocab.json";
    pub const MANIFEST: &'static str = "manifest.json";

    pub fn split(name: &str) -> String {
        format!("{name}.jsonl")
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn split<'c>(c: &'c Corpus, name: &str) -> &'c [Example] {
    match name {
        "train" => &c.train,
        "dev" => &c.dev,
        "test" => &c.test,
        _ => &c.cg_test,
    }
}

/// Writes every split as JSON lines plus the spec, dictionary, vocabularies,
/// and a manifest of file hashes.
pub fn write_corpus_dir(dir: &Path, corpus: &Corpus) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for name in SPLITS {
        let file = CorpusFiles::split(name);
        write_jsonl(&dir.join(&file), split(corpus, name))?;
        files.insert(file, String::new());
    }
    write_json(&dir.join(CorpusFiles::SPEC), &corpus.spec)?;
    write_json(&dir.join(CorpusFiles::DICTIONARY), &corpus.dictionary)?;
    write_json(
        &dir.join(CorpusFiles::VOCAB),
        &VocabFile {
            src: corpus.src_vocab.clone(),
            tgt: corpus.tgt_vocab.clone(),
        },
    )?;
    for f in [CorpusFiles::SPEC, CorpusFiles::DICTIONARY, CorpusFiles::VOCAB] {
        files.insert(f.to_owned(), String::new());
    }
    for (name, hash) in files.iter_mut() {
        *hash = sha256_file(&dir.join(name))?;
    }
    let manifest = Manifest {
        spec_hash: corpus.spec.hash(),
        files,
    };
    write_json(&dir.join(CorpusFiles::MANIFEST), &manifest)?;
    Ok(manifest)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Loads a corpus directory, verifying the manifest hashes.
pub fn read_corpus_dir(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = read_json(&dir.join(CorpusFiles::MANIFEST))?;
    for (name, hash) in &manifest.files {
        if &sha256_file(&dir.join(name))? != hash {
            return Err(Error::Config(format!(
                "{} does not match its manifest hash",
                dir.join(name).display()
            )));
        }
    }
    let spec: CorpusSpec = read_json(&dir.join(CorpusFiles::SPEC))?;
    let dictionary: AtomDictionary = read_json(&dir.join(CorpusFiles::DICTIONARY))?;
    let vocab: VocabFile = read_json(&dir.join(CorpusFiles::VOCAB))?;
    let load = |name: &str| -> Result<Vec<Example>> {
        let v: Vec<Example> = read_jsonl(&dir.join(CorpusFiles::split(name)))?;
        v.iter().try_for_each(Example::validate)?;
        Ok(v)
    };
    Ok(Corpus {
        train: load("train")?,
        dev: load("dev")?,
        test: load("test")?,
        cg_test: load("cg_test")?,
        spec,
        dictionary,
        src_vocab: vocab.src,
        tgt_vocab: vocab.tgt,
    })
}

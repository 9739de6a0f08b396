//! Vocabulary files: `{"tokenizer": .., "vocab": {token: id}}` with sorted keys.

use std::collections::BTreeMap;
use std::path::Path;

use mumo_core::tokenizer::{TokenizerKind, Vocab};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokenizer: TokenizerKind,
    vocab: BTreeMap<String, usize>,
}

pub fn to_json(vocab: &Vocab, kind: TokenizerKind) -> String {
    let file = VocabFile {
        tokenizer: kind,
        vocab: vocab.to_map(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("map of strings serializes");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<(Vocab, TokenizerKind)> {
    let file: VocabFile = serde_json::from_str(text).map_err(|e| Error::json("vocab", e))?;
    Ok((Vocab::from_map(&file.vocab)?, file.tokenizer))
}

pub fn save(path: &Path, vocab: &Vocab, kind: TokenizerKind) -> Result<()> {
    std::fs::write(path, to_json(vocab, kind)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Vocab, TokenizerKind)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

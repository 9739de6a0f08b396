//! Substructure-level SMILES tokenization and vocabulary.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const GTK: &str = "[GTK]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";

/// Special tokens in id order; they always occupy ids `0..SPECIALS.len()`.
pub const SPECIALS: [&str; 7] = [GTK, SEP, MASK, UNK, PAD, BOS, EOS];

pub const GTK_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const PAD_ID: usize = 4;
pub const BOS_ID: usize = 5;
pub const EOS_ID: usize = 6;
pub const N_SPECIAL: usize = SPECIALS.len();

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TokenizerError {
    #[error("bracket opened at byte {offset} is never closed")]
    UnterminatedBracket { offset: usize },
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("{needed} positions needed but max_len is {max_len}")]
    SequenceTooLong { needed: usize, max_len: usize },
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(usize),
    #[error("vocabulary is malformed: {0}")]
    InvalidVocab(String),
}

/// Which splitting scheme turns a SMILES string into tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    #[default]
    Substructure,
    /// One token per character; ablation baseline.
    Char,
}

impl TokenizerKind {
    pub fn tokenize(self, s: &str) -> Result<Vec<String>, TokenizerError> {
        match self {
            TokenizerKind::Substructure => tokenize(s),
            TokenizerKind::Char => Ok(tokenize_chars(s)),
        }
    }
}

/// Greedy scan with priority bracket > `%NN` > `Cl`/`Br` > single character.
pub fn tokenize(s: &str) -> Result<Vec<String>, TokenizerError> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let len = if bytes[i] == b'[' {
            match bytes[i..].iter().position(|&b| b == b']') {
                Some(close) => close + 1,
                None => return Err(TokenizerError::UnterminatedBracket { offset: i }),
            }
        } else if bytes[i] == b'%'
            && bytes.len() >= i + 3
            && bytes[i + 1].is_ascii_digit()
            && bytes[i + 2].is_ascii_digit()
        {
            3
        } else if bytes[i..].starts_with(b"Cl") || bytes[i..].starts_with(b"Br") {
            2
        } else {
            s[i..].chars().next().map_or(1, char::len_utf8)
        };
        out.push(s[i..i + len].to_string());
        i += len;
    }
    Ok(out)
}

pub fn tokenize_chars(s: &str) -> Vec<String> {
    s.chars().map(|c| c.to_string()).collect()
}

/// Bijective token/id table with the specials pinned to ids 0-6.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    to_id: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Specials plus every distinct corpus token, the latter sorted.
    pub fn build<I, S>(corpus: I, kind: TokenizerKind) -> Result<Vocab, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = BTreeSet::new();
        let mut any = false;
        for s in corpus {
            any = true;
            for t in kind.tokenize(s.as_ref())? {
                if !SPECIALS.contains(&t.as_str()) {
                    seen.insert(t);
                }
            }
        }
        if !any {
            return Err(TokenizerError::EmptyCorpus);
        }
        Ok(Self::from_tokens(seen))
    }

    fn from_tokens(non_special: impl IntoIterator<Item = String>) -> Vocab {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(non_special)
            .collect();
        let to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { to_id, tokens }
    }

    /// Rebuilds from an explicit token→id map, checking it is a bijection
    /// onto `0..n` with the specials in place.
    pub fn from_map(map: &BTreeMap<String, usize>) -> Result<Vocab, TokenizerError> {
        let mut tokens: Vec<Option<String>> = alloc::vec![None; map.len()];
        for (t, &id) in map {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| TokenizerError::InvalidVocab(alloc::format!("id {id} out of range")))?;
            if slot.is_some() {
                return Err(TokenizerError::InvalidVocab(alloc::format!("duplicate id {id}")));
            }
            *slot = Some(t.clone());
        }
        let tokens: Vec<String> = tokens.into_iter().map(Option::unwrap).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizerError::InvalidVocab(alloc::format!("{s} must have id {i}")));
            }
        }
        Ok(Vocab {
            to_id: map.clone(),
            tokens,
        })
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.to_id.clone()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn is_special(id: usize) -> bool {
    id < N_SPECIAL
}

/// An encoded, padded sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    /// True at real (non-padding) positions.
    pub mask: Vec<bool>,
    pub gtk_pos: usize,
    pub sep_pos: usize,
}

impl TokenSequence {
    pub fn real_len(&self) -> usize {
        self.sep_pos + 1
    }
}

/// `[GTK] tokens.. [SEP]` right-padded with `[PAD]` to `max_len`.
pub fn encode(s: &str, vocab: &Vocab, max_len: usize, kind: TokenizerKind) -> Result<TokenSequence, TokenizerError> {
    let body = kind.tokenize(s)?;
    let needed = body.len() + 2;
    if needed > max_len {
        return Err(TokenizerError::SequenceTooLong { needed, max_len });
    }
    let mut tokens = Vec::with_capacity(max_len);
    tokens.push(GTK.to_string());
    tokens.extend(body);
    tokens.push(SEP.to_string());
    let sep_pos = tokens.len() - 1;
    let mut ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let mut mask = alloc::vec![true; tokens.len()];
    while tokens.len() < max_len {
        tokens.push(PAD.to_string());
        ids.push(PAD_ID);
        mask.push(false);
    }
    Ok(TokenSequence {
        tokens,
        ids,
        mask,
        gtk_pos: 0,
        sep_pos,
    })
}

/// Concatenates every non-special token; `[UNK]` is emitted literally.
pub fn decode(ids: &[usize], vocab: &Vocab) -> Result<String, TokenizerError> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(TokenizerError::UnknownId(id))?;
        if id == UNK_ID || !is_special(id) {
            out.push_str(tok);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s).unwrap()
    }

    #[test]
    fn single_character_prefix() {
        assert_eq!(toks("O=C1N(CCO)C")[..6], ["O", "=", "C", "1", "N", "("]);
    }

    #[test]
    fn bracket_is_one_token() {
        assert_eq!(toks("C[C@H](N)C(=O)O")[1], "[C@H]");
    }

    #[test]
    fn halogens() {
        assert_eq!(toks("ClCCBr"), ["Cl", "C", "C", "Br"]);
    }

    #[test]
    fn percent_ring_closures() {
        assert_eq!(toks("C%10CC%10"), ["C", "%10", "C", "C", "%10"]);
    }

    #[test]
    fn unterminated_bracket() {
        assert_eq!(tokenize("CC[N+"), Err(TokenizerError::UnterminatedBracket { offset: 2 }));
    }

    #[test]
    fn vocab_size_and_order() {
        let v = Vocab::build(["CC", "CO"], TokenizerKind::Substructure).unwrap();
        assert_eq!(v.len(), 9);
        assert_eq!(v.id("C"), 7);
        assert_eq!(v.id("O"), 8);
        assert_eq!(v.token(0), Some(GTK));
    }

    #[test]
    fn vocab_keeps_isotopes() {
        let v = Vocab::build(["[13C]"], TokenizerKind::Substructure).unwrap();
        assert_ne!(v.id("[13C]"), UNK_ID);
    }

    #[test]
    fn vocab_is_deterministic() {
        let a = Vocab::build(["CCO", "c1ccccc1"], TokenizerKind::Substructure).unwrap();
        let b = Vocab::build(["c1ccccc1", "CCO"], TokenizerKind::Substructure).unwrap();
        assert_eq!(a, b);
        assert_eq!(Vocab::from_map(&a.to_map()).unwrap(), a);
    }

    #[test]
    fn empty_corpus() {
        assert_eq!(
            Vocab::build(Vec::<&str>::new(), TokenizerKind::Substructure),
            Err(TokenizerError::EmptyCorpus)
        );
    }

    #[test]
    fn from_map_rejects_moved_special() {
        let mut m = Vocab::build(["C"], TokenizerKind::Substructure).unwrap().to_map();
        m.insert(GTK.to_string(), 7);
        m.insert("C".to_string(), 0);
        assert!(matches!(Vocab::from_map(&m), Err(TokenizerError::InvalidVocab(_))));
    }

    #[test]
    fn encode_pads_and_masks() {
        let v = Vocab::build(["CC"], TokenizerKind::Substructure).unwrap();
        let e = encode("CC", &v, 6, TokenizerKind::Substructure).unwrap();
        assert_eq!(e.ids, vec![GTK_ID, 7, 7, SEP_ID, PAD_ID, PAD_ID]);
        assert_eq!(e.mask, vec![true, true, true, true, false, false]);
        assert_eq!(e.sep_pos, 3);
        assert_eq!(
            encode("CCCCC", &v, 6, TokenizerKind::Substructure),
            Err(TokenizerError::SequenceTooLong { needed: 7, max_len: 6 })
        );
    }

    #[test]
    fn unseen_token_is_unk() {
        let v = Vocab::build(["CC"], TokenizerKind::Substructure).unwrap();
        let e = encode("C[Xx]", &v, 8, TokenizerKind::Substructure).unwrap();
        assert_eq!(e.ids[2], UNK_ID);
        assert_eq!(decode(&e.ids, &v).unwrap(), "C[UNK]");
    }

    #[test]
    fn decode_edge_cases() {
        let v = Vocab::build(["CC"], TokenizerKind::Substructure).unwrap();
        assert_eq!(decode(&[GTK_ID, SEP_ID, PAD_ID], &v).unwrap(), "");
        assert_eq!(decode(&[99], &v), Err(TokenizerError::UnknownId(99)));
    }

    #[test]
    fn char_tokenizer_splits_everything() {
        assert_eq!(tokenize_chars("[NH4+]").len(), 6);
        assert_eq!(TokenizerKind::Char.tokenize("Cl").unwrap(), ["C", "l"]);
    }

    fn smiles_like() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            Just("C".to_string()),
            Just("c".to_string()),
            Just("Cl".to_string()),
            Just("Br".to_string()),
            Just("B".to_string()),
            Just("r".to_string()),
            Just("l".to_string()),
            Just("%".to_string()),
            "[0-9]".prop_map(|s| s),
            "%[0-9]{2}".prop_map(|s| s),
            "\\[[A-Za-z0-9@+\\-]{1,5}\\]".prop_map(|s| s),
            "[=#()/\\\\.]".prop_map(|s| s),
        ];
        proptest::collection::vec(piece, 0..20).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn lossless(s in smiles_like()) {
            prop_assert_eq!(tokenize(&s).unwrap().concat(), s);
        }

        #[test]
        fn brackets_are_atomic(s in smiles_like()) {
            for t in tokenize(&s).unwrap() {
                let has = t.contains('[') || t.contains(']');
                prop_assert_eq!(has, t.starts_with('[') && t.ends_with(']'));
            }
        }

        #[test]
        fn greedy_maximal(s in smiles_like()) {
            let t = tokenize(&s).unwrap();
            for w in t.windows(2) {
                let joined = [w[0].as_str(), w[1].as_str()].concat();
                prop_assert!(joined != "Cl" && joined != "Br");
            }
            let digit = |x: &str| x.len() == 1 && x.as_bytes()[0].is_ascii_digit();
            for w in t.windows(3) {
                prop_assert!(!(w[0] == "%" && digit(&w[1]) && digit(&w[2])));
            }
        }

        #[test]
        fn roundtrip_under_own_vocab(s in smiles_like()) {
            let v = Vocab::build([s.as_str()], TokenizerKind::Substructure).unwrap();
            let n = tokenize(&s).unwrap().len();
            let e = encode(&s, &v, n + 4, TokenizerKind::Substructure).unwrap();
            prop_assert_eq!(decode(&e.ids, &v).unwrap(), s.clone());
            prop_assert_eq!(e, encode(&s, &v, n + 4, TokenizerKind::Substructure).unwrap());
        }
    }
}

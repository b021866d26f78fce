//! Dataset ingestion, word-level tokenization and the synthetic corpus
//! generator used for desk-scale experiments.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::{SplitMix64, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Domain,
    Noise,
    Trivial,
    Unlabeled,
}

impl Stratum {
    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Domain => "domain",
            Stratum::Noise => "noise",
            Stratum::Trivial => "trivial",
            Stratum::Unlabeled => "unlabeled",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "domain" => Some(Stratum::Domain),
            "noise" => Some(Stratum::Noise),
            "trivial" => Some(Stratum::Trivial),
            "unlabeled" => Some(Stratum::Unlabeled),
            _ => None,
        }
    }
}

/// One prompt/response training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum: Option<Stratum>,
}

fn field_str<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, line: usize) -> Result<Option<&'a str>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(Error::Parse {
            line,
            msg: format!("field {key} must be a string"),
        }),
    }
}

/// Reads the instruction-tuning JSONL format: `instruction`, optional `input`,
/// `output`, optional `id` and `stratum`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: format!("invalid json: {e}"),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line,
            msg: "expected a json object".into(),
        })?;
        let instruction = field_str(obj, "instruction", line)?.ok_or_else(|| Error::Parse {
            line,
            msg: "missing field instruction".into(),
        })?;
        let output = field_str(obj, "output", line)?.ok_or_else(|| Error::Parse {
            line,
            msg: "missing field output".into(),
        })?;
        if output.trim().is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty output".into(),
            });
        }
        let prompt = match field_str(obj, "input", line)? {
            Some(input) if !input.is_empty() => format!("{instruction}\n{input}"),
            _ => instruction.to_string(),
        };
        let stratum = match field_str(obj, "stratum", line)? {
            None => None,
            Some(s) => Some(Stratum::parse(s).ok_or_else(|| Error::Parse {
                line,
                msg: format!("unknown stratum {s:?}"),
            })?),
        };
        let id = match field_str(obj, "id", line)? {
            Some(id) => id.to_string(),
            None => format!("{line:06}"),
        };
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        out.push(Instance {
            id,
            prompt,
            response: output.to_string(),
            stratum,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct DatasetLine<'a> {
    id: &'a str,
    instruction: &'a str,
    output: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    stratum: Option<Stratum>,
}

pub fn dataset_to_jsonl(instances: &[Instance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let line = DatasetLine {
            id: &inst.id,
            instruction: &inst.prompt,
            output: &inst.response,
            stratum: inst.stratum,
        };
        out.push_str(&serde_json::to_string(&line).expect("dataset line serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(dataset_to_jsonl(instances).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Splits text into words on whitespace; every ASCII/Unicode punctuation
/// character becomes its own word.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];
/// Smallest vocabulary that still holds one word type next to the specials.
pub const MIN_VOCAB: usize = SPECIALS.len() + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config("tokenizer must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            tokens: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        Self::from_tokens(raw.tokens)
    }
}

/// Frequency-capped word vocabulary: the specials followed by the most
/// frequent `max_vocab - 5` word types (ties broken lexicographically).
pub fn build_vocab(dataset: &[Instance], max_vocab: usize) -> Result<Tokenizer> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot build a vocabulary from an empty dataset".into()));
    }
    if max_vocab < MIN_VOCAB {
        return Err(Error::Config(format!(
            "max_vocab must be at least {MIN_VOCAB}, got {max_vocab}"
        )));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for inst in dataset {
        for w in split_words(&inst.prompt).into_iter().chain(split_words(&inst.response)) {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(words.into_iter().take(max_vocab - SPECIALS.len()).map(|(w, _)| w));
    Tokenizer::from_tokens(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Special,
    Prompt,
    Response,
}

/// `BOS prompt.. SEP response.. EOS`, with one role per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub instance_id: String,
    pub tokens: Vec<usize>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sep_index(&self) -> Option<usize> {
        self.tokens.iter().position(|&t| t == SEP)
    }

    /// Prompt-side context fed to the model before generation: `BOS .. SEP`.
    pub fn context(&self) -> &[usize] {
        let end = self.sep_index().map(|i| i + 1).unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }

    pub fn response_tokens(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == Role::Response)
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn prompt_tokens(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == Role::Prompt)
            .map(|(t, _)| *t)
            .collect()
    }

    /// Non-special tokens (prompt and response words).
    pub fn content_tokens(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r != Role::Special)
            .map(|(t, _)| *t)
            .collect()
    }

    /// Index of the last token that is not padding.
    pub fn last_content_index(&self) -> usize {
        self.tokens.iter().rposition(|&t| t != PAD).unwrap_or(0)
    }

    /// Per-position loss mask: `mask[t]` is true when position `t` predicts a
    /// response token (or, with `include_eos`, the EOS closing the response).
    pub fn loss_mask(&self, include_eos: bool) -> Vec<bool> {
        let n = self.tokens.len();
        let mut mask = vec![false; n];
        for t in 0..n.saturating_sub(1) {
            let next_is_response = self.roles[t + 1] == Role::Response;
            let closes_response =
                include_eos && self.tokens[t + 1] == EOS && self.roles[t] == Role::Response;
            mask[t] = next_is_response || closes_response;
        }
        mask
    }

    pub fn padded(&self, extra: usize) -> Self {
        let mut out = self.clone();
        out.tokens.extend(std::iter::repeat(PAD).take(extra));
        out.roles.extend(std::iter::repeat(Role::Special).take(extra));
        out
    }
}

pub fn encode_instance(tok: &Tokenizer, inst: &Instance, max_seq_len: usize) -> Result<TokenSequence> {
    let prompt = tok.encode_text(&inst.prompt);
    let mut response = tok.encode_text(&inst.response);
    let fixed = prompt.len() + 3;
    if fixed + response.len() > max_seq_len {
        let keep = max_seq_len.saturating_sub(fixed);
        if keep == 0 {
            return Err(Error::TooLong(inst.id.clone()));
        }
        response.truncate(keep);
    }
    if response.is_empty() {
        return Err(Error::Instance {
            id: inst.id.clone(),
            msg: "empty response".into(),
        });
    }
    let mut tokens = Vec::with_capacity(fixed + response.len());
    let mut roles = Vec::with_capacity(fixed + response.len());
    tokens.push(BOS);
    roles.push(Role::Special);
    for t in prompt {
        tokens.push(t);
        roles.push(Role::Prompt);
    }
    tokens.push(SEP);
    roles.push(Role::Special);
    for t in response {
        tokens.push(t);
        roles.push(Role::Response);
    }
    tokens.push(EOS);
    roles.push(Role::Special);
    Ok(TokenSequence {
        instance_id: inst.id.clone(),
        tokens,
        roles,
    })
}

pub fn encode_all(tok: &Tokenizer, dataset: &[Instance], max_seq_len: usize) -> Result<Vec<TokenSequence>> {
    dataset.iter().map(|i| encode_instance(tok, i, max_seq_len)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_domain: usize,
    pub n_noise: usize,
    pub n_trivial: usize,
    pub seed: u64,
}

const SOURCE_WORDS: [&str; 16] = [
    "ant", "bee", "cat", "dog", "eel", "fox", "gnu", "hen", "ibis", "jay", "koi", "lynx", "mole",
    "newt", "owl", "pig",
];
const TARGET_WORDS: [&str; 16] = [
    "red", "orange", "yellow", "green", "blue", "indigo", "violet", "white", "black", "grey",
    "pink", "brown", "gold", "silver", "teal", "navy",
];
const VERB: &str = "convert";
const TRIVIAL_VERB: &str = "repeat";
/// The trivial stratum echoes one of these fixed fillings.
const TRIVIAL_FILLINGS: [[usize; 4]; 3] = [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]];
const MIN_WORDS: usize = 4;
const MAX_WORDS: usize = 4;

/// The fixed word-level mapping the domain stratum teaches.
pub fn domain_map(source: usize) -> usize {
    (source * 7 + 3) % TARGET_WORDS.len()
}

fn random_words(rng: &mut SplitMix64) -> Vec<usize> {
    let len = MIN_WORDS + rng.below(MAX_WORDS - MIN_WORDS + 1);
    (0..len).map(|_| rng.below(SOURCE_WORDS.len())).collect()
}

fn prompt_text(verb: &str, words: &[usize]) -> String {
    let mut s = String::from(verb);
    for &w in words {
        s.push(' ');
        s.push_str(SOURCE_WORDS[w]);
    }
    s
}

/// Labelled synthetic corpus: a learnable word-mapping task (domain), the same
/// prompts with uniformly random responses (noise), and near-duplicate echoes
/// of a few fixed fillings (trivial). Strata are interleaved by a seeded
/// shuffle.
pub fn synth_corpus(spec: &SynthSpec) -> Vec<Instance> {
    let mut rng = SplitMix64::substream(spec.seed, Stream::Synth);
    let mut out = Vec::with_capacity(spec.n_domain + spec.n_noise + spec.n_trivial);
    for _ in 0..spec.n_domain {
        let words = random_words(&mut rng);
        let response: Vec<&str> = words.iter().map(|&w| TARGET_WORDS[domain_map(w)]).collect();
        out.push((prompt_text(VERB, &words), response.join(" "), Stratum::Domain));
    }
    let pool: Vec<&str> = TARGET_WORDS.iter().chain(SOURCE_WORDS.iter()).copied().collect();
    for _ in 0..spec.n_noise {
        let words = random_words(&mut rng);
        let response: Vec<&str> = (0..words.len()).map(|_| pool[rng.below(pool.len())]).collect();
        out.push((prompt_text(VERB, &words), response.join(" "), Stratum::Noise));
    }
    for _ in 0..spec.n_trivial {
        let filling = &TRIVIAL_FILLINGS[rng.below(TRIVIAL_FILLINGS.len())];
        let echo: Vec<&str> = filling.iter().map(|&w| SOURCE_WORDS[w]).collect();
        out.push((prompt_text(TRIVIAL_VERB, filling), echo.join(" "), Stratum::Trivial));
    }
    rng.shuffle(&mut out);
    out.into_iter()
        .enumerate()
        .map(|(i, (prompt, response, stratum))| Instance {
            id: format!("syn-{i:05}"),
            prompt,
            response,
            stratum: Some(stratum),
        })
        .collect()
}

//! JSON-lines Q&A datasets and the synthetic two-hop generator.

use std::collections::BTreeSet;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub question: String,
    pub chunks: Vec<String>,
    pub answers: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: missing field \"{field}\"")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("synthetic spec: {0}")]
    Spec(String),
}

const FIELDS: [&str; 4] = ["id", "question", "chunks", "answers"];

/// Parses JSON lines; blank lines are skipped, line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<DatasetItem>, DatasetError> {
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| DatasetError::Json { line, message: e.to_string() })?;
        let obj = value.as_object().ok_or(DatasetError::Invalid { line, message: "expected a JSON object".into() })?;
        if let Some(field) = FIELDS.into_iter().find(|f| !obj.contains_key(*f)) {
            return Err(DatasetError::MissingField { line, field });
        }
        let item: DatasetItem = serde_json::from_value(value).map_err(|e| DatasetError::Invalid { line, message: e.to_string() })?;
        let problem = if item.question.trim().is_empty() {
            Some("empty question")
        } else if item.chunks.is_empty() {
            Some("no chunks")
        } else if item.answers.is_empty() {
            Some("no answers")
        } else {
            None
        };
        if let Some(p) = problem {
            return Err(DatasetError::Invalid { line, message: p.into() });
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(items)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetItem>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    parse_dataset(&text)
}

pub fn to_jsonl(items: &[DatasetItem]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("plain strings serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_chunks: usize,
    /// Target chunk length in bytes. Each chunk holds whole facts and at
    /// least one.
    pub chunk_len: usize,
    pub seed: u64,
}

const SYLLABLES: [&str; 16] = ["ka", "lo", "mi", "ren", "so", "ta", "vu", "zel", "bri", "do", "fe", "gor", "ni", "pa", "qui", "ul"];

struct Names {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl Names {
    fn pick(&mut self, make: impl Fn(&mut ChaCha8Rng) -> String) -> String {
        loop {
            let s = make(&mut self.rng);
            if self.used.insert(s.clone()) {
                return s;
            }
        }
    }

    fn agent(&mut self) -> String {
        self.pick(|r| {
            let n = 2 + (r.next_u32() % 2) as usize;
            let mut s: String = (0..n).map(|_| SYLLABLES[(r.next_u32() % 16) as usize]).collect();
            s[..1].make_ascii_uppercase();
            s
        })
    }

    fn key(&mut self) -> String {
        self.pick(|r| {
            let a = (b'A' + (r.next_u32() % 26) as u8) as char;
            let b = (b'A' + (r.next_u32() % 26) as u8) as char;
            format!("{a}{b}{:02}", r.next_u32() % 100)
        })
    }

    fn vault(&mut self) -> String {
        self.pick(|r| format!("{}", 1000 + r.next_u32() % 9000))
    }

    fn below(&mut self, n: usize) -> usize {
        (self.rng.next_u32() as usize) % n
    }
}

fn holds(agent: &str, key: &str) -> String {
    format!("Agent {agent} holds key {key}. ")
}

fn opens(key: &str, vault: &str) -> String {
    format!("Key {key} opens vault {vault}. ")
}

/// Two-hop key/vault retrieval items. One chunk says which key an agent
/// holds, another (when `n_chunks > 1`) which vault that key opens; the
/// question names the agent and the answer is the vault number. Remaining
/// space is filled with distractor facts over fresh names.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<DatasetItem>, DatasetError> {
    if spec.n_items == 0 || spec.n_chunks == 0 || spec.chunk_len == 0 {
        return Err(DatasetError::Spec("n_items, n_chunks and chunk_len must be positive".into()));
    }
    let mut items = Vec::with_capacity(spec.n_items);
    for idx in 0..spec.n_items {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&spec.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&(idx as u64).to_le_bytes());
        let mut names = Names { rng: ChaCha8Rng::from_seed(seed), used: BTreeSet::new() };
        let (agent, key, vault) = (names.agent(), names.key(), names.vault());
        let first = names.below(spec.n_chunks);
        let second = if spec.n_chunks == 1 { 0 } else { (first + 1 + names.below(spec.n_chunks - 1)) % spec.n_chunks };
        let mut chunks: Vec<Vec<String>> = vec![Vec::new(); spec.n_chunks];
        chunks[first].push(holds(&agent, &key));
        chunks[second].push(opens(&key, &vault));
        for facts in chunks.iter_mut() {
            loop {
                let fact = if names.below(2) == 0 {
                    let (a, k) = (names.agent(), names.key());
                    holds(&a, &k)
                } else {
                    let (k, v) = (names.key(), names.vault());
                    opens(&k, &v)
                };
                let len: usize = facts.iter().map(String::len).sum();
                if !facts.is_empty() && len + fact.len() > spec.chunk_len {
                    break;
                }
                let at = names.below(facts.len() + 1);
                facts.insert(at, fact);
            }
        }
        let chunks: Vec<String> = chunks.into_iter().map(|f| f.concat()).collect();
        let holders = chunks.iter().filter(|c| c.contains(&vault)).count();
        assert_eq!(holders, 1, "generator self-check: answer {vault} must sit in exactly one chunk");
        items.push(DatasetItem {
            id: format!("syn-{:05}", idx),
            question: format!("Which vault does agent {agent} open?"),
            chunks,
            answers: vec![vault],
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_line_one_item() {
        let items = parse_dataset(r#"{"id":"q1","question":"Who?","chunks":["a"],"answers":["b"]}"#).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].id, "q1");
    }

    #[test]
    fn errors_name_line_and_field() {
        let text = "{\"id\":\"a\",\"question\":\"q\",\"chunks\":[\"c\"],\"answers\":[\"x\"]}\n{\"id\":\"b\",\"question\":\"q\",\"chunks\":[\"c\"]}\n";
        let err = parse_dataset(text).unwrap_err();
        assert!(matches!(err, DatasetError::MissingField { line: 2, field: "answers" }));
        assert_eq!(err.to_string(), "line 2: missing field \"answers\"");
        assert!(matches!(parse_dataset("{oops"), Err(DatasetError::Json { line: 1, .. })));
        assert!(matches!(parse_dataset("\n  \n"), Err(DatasetError::Empty)));
        assert!(matches!(
            parse_dataset(r#"{"id":"a","question":"q","chunks":[],"answers":["x"]}"#),
            Err(DatasetError::Invalid { line: 1, .. })
        ));
        assert!(matches!(
            parse_dataset(r#"{"id":"a","question":"q","chunks":"c","answers":["x"]}"#),
            Err(DatasetError::Invalid { line: 1, .. })
        ));
    }

    #[test]
    fn synthetic_shape_and_determinism() {
        let spec = SyntheticSpec { n_items: 5, n_chunks: 3, chunk_len: 120, seed: 9 };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|i| i.chunks.len() == 3 && i.answers.len() == 1));
        assert_ne!(a, generate_synthetic(&SyntheticSpec { seed: 10, ..spec.clone() }).unwrap());
        assert_eq!(parse_dataset(&to_jsonl(&a)).unwrap(), a);
        assert!(generate_synthetic(&SyntheticSpec { n_items: 0, ..spec }).is_err());
    }

    #[test]
    fn synthetic_question_needs_two_chunks() {
        let items = generate_synthetic(&SyntheticSpec { n_items: 20, n_chunks: 4, chunk_len: 100, seed: 1 }).unwrap();
        for item in items {
            let agent = item.question.split_whitespace().nth(4).unwrap();
            let hop1 = item.chunks.iter().position(|c| c.contains(&format!("Agent {agent} holds"))).unwrap();
            let hop2 = item.chunks.iter().position(|c| c.contains(&format!("opens vault {}", item.answers[0]))).unwrap();
            assert_ne!(hop1, hop2);
        }
    }
}

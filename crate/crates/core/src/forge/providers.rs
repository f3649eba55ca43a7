//! File-backed lookups consumed by the forge. Missing entries are errors.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::types::{normalize_text, EmbeddingVector};

/// Sentence embeddings keyed by normalized text.
///
/// On disk: an embedding binary whose sidecar holds the text of each row.
#[derive(Debug, Clone, Default)]
pub struct TextEmbeddings {
    dim: usize,
    map: HashMap<String, EmbeddingVector>,
}

impl TextEmbeddings {
    pub fn new(dim: usize) -> Self {
        TextEmbeddings { dim, map: HashMap::new() }
    }

    pub fn insert(&mut self, text: &str, v: EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.dim() });
        }
        self.map.insert(normalize_text(text), v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, text: &str) -> Result<&EmbeddingVector> {
        self.map
            .get(&normalize_text(text))
            .ok_or_else(|| Error::MissingEntry { kind: "sentence embedding", key: text.to_string() })
    }

    pub fn load(bin: &Path) -> Result<Self> {
        let records = io::load_records(bin, &io::sidecar_path(bin))?;
        let dim = records.first().map_or(0, |r| r.vector.dim());
        let mut e = TextEmbeddings::new(dim);
        for r in records {
            e.insert(&r.id, r.vector)?;
        }
        Ok(e)
    }
}

/// Plausibility of `(question, answer)` pairs, keyed by normalized text.
///
/// On disk: `question<TAB>answer<TAB>score` lines.
#[derive(Debug, Clone, Default)]
pub struct PlausibilityScores {
    map: HashMap<(String, String), f64>,
}

impl PlausibilityScores {
    pub fn insert(&mut self, question: &str, answer: &str, score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Format { what: "plausibility score", detail: format!("{score} outside [0, 1]") });
        }
        self.map.insert((normalize_text(question), normalize_text(answer)), score);
        Ok(())
    }

    pub fn get(&self, question: &str, answer: &str) -> Result<f64> {
        self.map
            .get(&(normalize_text(question), normalize_text(answer)))
            .copied()
            .ok_or_else(|| Error::MissingEntry { kind: "plausibility", key: format!("{question} | {answer}") })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut p = PlausibilityScores::default();
        for row in io::parse_tsv(text) {
            let bad = || Error::Format { what: "plausibility line", detail: row.join("\t") };
            if row.len() != 3 {
                return Err(bad());
            }
            let score: f64 = row[2].trim().parse().map_err(|_| bad())?;
            p.insert(&row[0], &row[1], score)?;
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Image captions keyed by image id. On disk: `image_id<TAB>caption` lines.
#[derive(Debug, Clone, Default)]
pub struct Captions {
    map: HashMap<String, String>,
}

impl Captions {
    pub fn insert(&mut self, image_id: impl Into<String>, caption: impl Into<String>) {
        self.map.insert(image_id.into(), caption.into());
    }

    pub fn get(&self, image_id: &str) -> Result<&str> {
        self.map
            .get(image_id)
            .map(String::as_str)
            .ok_or_else(|| Error::MissingEntry { kind: "caption", key: image_id.to_string() })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Captions::default();
        for row in io::parse_tsv(text) {
            match row.as_slice() {
                [id] => c.insert(id.clone(), ""),
                [id, cap] => c.insert(id.clone(), cap.clone()),
                _ => return Err(Error::Format { what: "caption line", detail: row.join("\t") }),
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups_are_normalized_and_strict() {
        let p = PlausibilityScores::parse("# q a s\nWhy  is he wet?\tIt rains\t0.5\n").unwrap();
        assert_eq!(p.get("why is he wet?", "it rains").unwrap(), 0.5);
        assert!(p.get("why?", "x").is_err());
        assert!(PlausibilityScores::parse("a\tb\t1.5").is_err());
        assert!(PlausibilityScores::parse("a\tb").is_err());
        let c = Captions::parse("img1\tTwo men on a boat\nimg2\n").unwrap();
        assert_eq!(c.get("img1").unwrap(), "Two men on a boat");
        assert_eq!(c.get("img2").unwrap(), "");
        assert!(c.get("img3").unwrap_err().to_string().contains("img3"));
    }
}

//! Textual data synthesis: prompt templates crossed with a word set.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::embedding::write_text_atomic;
use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{}";

/// The template used for the out-distribution corpus unless overridden.
pub const DEFAULT_CORPUS_TEMPLATE: &str = "This is a photo of a {}.";

/// A prompt with exactly one `{}` slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptTemplate {
    prefix: String,
    suffix: String,
}

impl PromptTemplate {
    pub fn new(pattern: &str) -> Result<Self> {
        let n = pattern.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::validation(format!(
                "template {pattern:?} has {n} placeholders, expected exactly one \"{{}}\""
            )));
        }
        let (prefix, suffix) = pattern.split_once(PLACEHOLDER).unwrap();
        Ok(PromptTemplate {
            prefix: prefix.to_owned(),
            suffix: suffix.to_owned(),
        })
    }

    /// The identity template `{}`: phrases pass through verbatim.
    pub fn identity() -> Self {
        PromptTemplate {
            prefix: String::new(),
            suffix: String::new(),
        }
    }

    pub fn pattern(&self) -> String {
        format!("{}{PLACEHOLDER}{}", self.prefix, self.suffix)
    }

    /// Single-pass substitution; braces inside `word` are not expanded.
    pub fn fill(&self, word: &str) -> String {
        let mut s = String::with_capacity(self.prefix.len() + word.len() + self.suffix.len());
        s.push_str(&self.prefix);
        s.push_str(word);
        s.push_str(&self.suffix);
        s
    }
}

/// An ordered, deduplicated list of non-empty words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordCorpus {
    words: Vec<String>,
}

impl WordCorpus {
    /// Drops blank entries and later duplicates, preserving first-seen order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for w in words {
            let w: String = w.into();
            if w.trim().is_empty() {
                continue;
            }
            if seen.insert(w.clone()) {
                out.push(w);
            }
        }
        if out.is_empty() {
            return Err(Error::validation("word set is empty"));
        }
        Ok(WordCorpus { words: out })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Texts that define the in-distribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InDistributionTexts {
    pub texts: Vec<String>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_owned())
        .collect())
}

pub fn load_word_set(path: &Path) -> Result<WordCorpus> {
    WordCorpus::new(read_lines(path)?)
        .map_err(|_| Error::validation(format!("{}: no words", path.display())))
}

/// Reads one template per non-blank line. Errors name the 0-based line index.
pub fn load_templates(path: &Path) -> Result<Vec<PromptTemplate>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t = PromptTemplate::new(line)
            .map_err(|e| Error::validation(format!("template {i}: {e}")))?;
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::validation(format!(
            "{}: no templates",
            path.display()
        )));
    }
    Ok(out)
}

/// Every (word, template) pair, words-major and templates-minor.
pub fn word2data<S: AsRef<str>>(words: &[S], templates: &[PromptTemplate]) -> Result<Vec<String>> {
    if templates.is_empty() {
        return Err(Error::validation("at least one template is required"));
    }
    let mut out = Vec::with_capacity(words.len() * templates.len());
    for w in words {
        for t in templates {
            out.push(t.fill(w.as_ref()));
        }
    }
    Ok(out)
}

pub fn synthesize_in_distribution<S: AsRef<str>>(
    names: &[S],
    templates: &[PromptTemplate],
) -> Result<InDistributionTexts> {
    if names.is_empty() {
        return Err(Error::validation("no in-distribution names"));
    }
    Ok(InDistributionTexts {
        texts: word2data(names, templates)?,
    })
}

/// Writes one line per entry, each terminated by `\n`.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(i) = lines.iter().position(|l| l.contains(['\n', '\r'])) {
        return Err(Error::validation(format!("line {i} contains a line break")));
    }
    let mut text = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    write_text_atomic(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_preserves_first_occurrence() {
        let c = WordCorpus::new(["dog", "cat", "dog"]).unwrap();
        assert_eq!(c.words(), &["dog".to_owned(), "cat".to_owned()]);
    }

    #[test]
    fn dedup_is_case_sensitive() {
        assert_eq!(WordCorpus::new(["Dog", "dog"]).unwrap().len(), 2);
    }

    #[test]
    fn blank_lines_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.txt");
        fs::write(&p, "dog\n\n  \ncat\r\n").unwrap();
        let c = load_word_set(&p).unwrap();
        assert_eq!(c.words(), &["dog".to_owned(), "cat".to_owned()]);
    }

    #[test]
    fn empty_word_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.txt");
        fs::write(&p, "\n\n").unwrap();
        assert!(load_word_set(&p).is_err());
    }

    #[test]
    fn photo_prompt() {
        let t = PromptTemplate::new(DEFAULT_CORPUS_TEMPLATE).unwrap();
        assert_eq!(
            word2data(&["dog"], &[t]).unwrap(),
            vec!["This is a photo of a dog.".to_owned()]
        );
    }

    #[test]
    fn cardinality_and_order() {
        let ts = ["a {}", "b {}", "{} c"]
            .iter()
            .map(|p| PromptTemplate::new(p).unwrap())
            .collect::<Vec<_>>();
        let out = word2data(&["x", "y"], &ts).unwrap();
        assert_eq!(out, ["a x", "b x", "x c", "a y", "b y", "y c"]);
    }

    #[test]
    fn braces_in_word_not_expanded() {
        let t = PromptTemplate::new("<{}>").unwrap();
        assert_eq!(word2data(&["{}"], &[t]).unwrap(), ["<{}>"]);
    }

    #[test]
    fn template_placeholder_count_enforced() {
        assert!(PromptTemplate::new("no slot").is_err());
        assert!(PromptTemplate::new("{} and {}").is_err());
        assert_eq!(
            PromptTemplate::new("{}").unwrap(),
            PromptTemplate::identity()
        );
    }

    #[test]
    fn identity_template_passes_phrases_through() {
        let out =
            synthesize_in_distribution(&["some phrase"], &[PromptTemplate::identity()]).unwrap();
        assert_eq!(out.texts, ["some phrase"]);
    }

    #[test]
    fn thousand_names_by_eighty_templates() {
        let names: Vec<String> = (0..1000).map(|i| format!("class{i}")).collect();
        let templates: Vec<_> = (0..80)
            .map(|i| PromptTemplate::new(&format!("t{i} {{}}")).unwrap())
            .collect();
        let out = synthesize_in_distribution(&names, &templates).unwrap();
        assert_eq!(out.texts.len(), 80_000);
    }

    #[test]
    fn empty_names_rejected() {
        let empty: [&str; 0] = [];
        assert!(synthesize_in_distribution(&empty, &[PromptTemplate::identity()]).is_err());
        assert!(word2data(&["x"], &[]).is_err());
    }

    #[test]
    fn template_file_reports_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        fs::write(&p, "a {}\nbroken\n").unwrap();
        let err = load_templates(&p).unwrap_err();
        assert!(err.to_string().contains("template 1"), "{err}");
    }
}

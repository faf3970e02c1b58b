//! Ordered word lists backing the question and answer dictionaries.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Words in index order with a reverse lookup. Duplicates are rejected.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordList {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordList {
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = WordList::default();
        for w in words {
            let w = w.into();
            if list.index.contains_key(&w) {
                return Err(Error::Input(format!("duplicate word '{w}'")));
            }
            list.push(w);
        }
        Ok(list)
    }

    /// Appends `word` if unseen; returns its index either way.
    pub fn insert(&mut self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&i) => i,
            None => self.push(word.to_string()),
        }
    }

    fn push(&mut self, word: String) -> usize {
        let i = self.words.len();
        self.index.insert(word.clone(), i);
        self.words.push(word);
        i
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
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

    /// File body: one word per line, line number = index.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_words(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// Hex SHA-256 of the file body.
    pub fn digest(&self) -> String {
        let d = Sha256::digest(self.to_file_string().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::reports::{template_words, tokenize, NUM_TASKS};

pub const END_TOKEN: &str = "<end>";

pub fn start_token(task: usize) -> String {
    format!("<start_{}>", task + 1)
}

/// Dense token ↔ id bijection. Id 0 is the end token, ids `1..=K` are the task start
/// tokens, words follow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    tasks: usize,
}

impl Vocab {
    pub fn from_words(words: &[String], tasks: usize) -> Result<Self> {
        let mut tokens = vec![END_TOKEN.to_string()];
        tokens.extend((0..tasks).map(start_token));
        tokens.extend(words.iter().cloned());
        Self::from_tokens(tokens, tasks)
    }

    /// Vocabulary over every template word with `K = 6` tasks.
    pub fn templates() -> Self {
        Self::from_words(&template_words(), NUM_TASKS).expect("template vocabulary is valid")
    }

    fn from_tokens(tokens: Vec<String>, tasks: usize) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid token {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate token {t:?}")));
            }
        }
        if tokens.first().map(String::as_str) != Some(END_TOKEN) {
            return Err(Error::Format("vocabulary must start with the end token".into()));
        }
        for e in 0..tasks {
            if ids.get(&start_token(e)) != Some(&(e + 1)) {
                return Err(Error::Format(format!("missing start token for task {}", e + 1)));
            }
        }
        Ok(Vocab { tokens, ids, tasks })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn end(&self) -> usize {
        0
    }

    pub fn start(&self, task: usize) -> usize {
        task + 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Sentence tokens without the end token.
    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        tokenize(sentence)
            .iter()
            .map(|t| {
                self.id(t)
                    .filter(|&i| i > self.tasks)
                    .ok_or_else(|| Error::invalid(format!("token {t:?} not in vocabulary")))
            })
            .collect()
    }

    /// Space-joined words, stopping at the end token.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != self.end())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let tasks = tokens.iter().skip(1).take_while(|t| t.starts_with("<start_")).count();
        Self::from_tokens(tokens, tasks)
    }
}

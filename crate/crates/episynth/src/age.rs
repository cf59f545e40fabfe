use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Ordered age bands shared by all streams and model graphs in a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeStructure {
    labels: Vec<String>,
}

impl AgeStructure {
    pub fn new<S: Into<String>>(labels: Vec<S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::Config("age structure needs at least one band".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate age band label '{l}'")));
            }
        }
        Ok(Self { labels })
    }

    /// The seven bands used by the severity case study.
    pub fn standard7() -> Self {
        Self::new(vec!["<1", "1-4", "5-14", "15-24", "25-44", "45-64", "65+"]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

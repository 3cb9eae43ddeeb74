use std::fmt;

use thiserror::Error;

use crate::topic::{parse_prefix, Topic, TopicError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatternError {
    #[error("'#' is only allowed as the final label")]
    MisplacedWildcard,
    #[error(transparent)]
    Topic(#[from] TopicError),
}

/// A topic prefix with an optional trailing `#` wildcard.
///
/// `/deepest/cm/#` matches every topic under `/deepest/cm`; without the
/// wildcard the pattern must equal the topic exactly.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubscriptionPattern {
    prefix: Vec<String>,
    wildcard: bool,
}

impl SubscriptionPattern {
    pub fn parse(text: &str) -> Result<Self, PatternError> {
        let (body, wildcard) = match text.strip_suffix('#') {
            Some(rest) => {
                if !rest.ends_with('/') {
                    return Err(PatternError::MisplacedWildcard);
                }
                (rest.trim_end_matches('/'), true)
            }
            None => (text, false),
        };
        if body.contains('#') {
            return Err(PatternError::MisplacedWildcard);
        }
        if body.is_empty() && wildcard {
            return Ok(SubscriptionPattern {
                prefix: Vec::new(),
                wildcard,
            });
        }
        if !wildcard {
            // exact patterns must be full topics
            Topic::parse(body)?;
        }
        Ok(SubscriptionPattern {
            prefix: parse_prefix(body)?,
            wildcard,
        })
    }

    pub fn exact(topic: &Topic) -> Self {
        SubscriptionPattern {
            prefix: topic.labels().map(str::to_string).collect(),
            wildcard: false,
        }
    }

    pub fn all() -> Self {
        SubscriptionPattern {
            prefix: Vec::new(),
            wildcard: true,
        }
    }

    pub fn is_wildcard(&self) -> bool {
        self.wildcard
    }

    pub fn matches(&self, topic: &Topic) -> bool {
        let mut labels = topic.labels();
        for p in &self.prefix {
            match labels.next() {
                Some(l) if l == p => {}
                _ => return false,
            }
        }
        self.wildcard || labels.next().is_none()
    }
}

impl fmt::Display for SubscriptionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.prefix {
            write!(f, "/{l}")?;
        }
        if self.wildcard {
            f.write_str("/#")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for SubscriptionPattern {
    type Err = PatternError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

//! Hierarchical sensor topics.
//!
//! A topic is a `/`-separated path such as `/deepest/cm/s01/socket0/temp`.
//! Labels are ordered from the most general (system) to the most specific
//! (sensor name). The canonical text form is stored once and shared, so
//! cloning a [`Topic`] is a reference-count bump.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MIN_DEPTH: usize = 2;
pub const MAX_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic must begin with '/'")]
    MissingLeadingSlash,
    #[error("empty label at offset {0}")]
    EmptyLabel(usize),
    #[error("illegal character {ch:?} at offset {offset}")]
    IllegalChar { ch: char, offset: usize },
    #[error("depth {0} out of range [{MIN_DEPTH}, {MAX_DEPTH}]")]
    Depth(usize),
}

fn is_illegal(c: char) -> bool {
    c.is_whitespace() || c.is_control() || c == '#' || c == '+'
}

/// A validated, canonical topic.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Topic(Arc<str>);

impl Topic {
    pub fn parse(text: &str) -> Result<Topic, TopicError> {
        if !text.starts_with('/') {
            return Err(TopicError::MissingLeadingSlash);
        }
        let mut depth = 0;
        let mut label_start = 1;
        let bytes = text.as_bytes();
        // Walk each label; `slash` is the offset of the '/' that opens it.
        let mut slash = 0;
        loop {
            let end = text[label_start..]
                .find('/')
                .map(|i| i + label_start)
                .unwrap_or(bytes.len());
            if end == label_start {
                return Err(TopicError::EmptyLabel(slash));
            }
            for (i, ch) in text[label_start..end].char_indices() {
                if is_illegal(ch) {
                    return Err(TopicError::IllegalChar {
                        ch,
                        offset: label_start + i,
                    });
                }
            }
            depth += 1;
            if end == bytes.len() {
                break;
            }
            slash = end;
            label_start = end + 1;
        }
        if !(MIN_DEPTH..=MAX_DEPTH).contains(&depth) {
            return Err(TopicError::Depth(depth));
        }
        Ok(Topic(Arc::from(text)))
    }

    /// Builds a topic from labels, validating each one.
    pub fn from_labels<I, S>(labels: I) -> Result<Topic, TopicError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut text = String::new();
        for l in labels {
            text.push('/');
            text.push_str(l.as_ref());
        }
        Topic::parse(&text)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> + '_ {
        self.0[1..].split('/')
    }

    pub fn depth(&self) -> usize {
        self.labels().count()
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.labels().nth(i)
    }

    /// Last label, i.e. the sensor name.
    pub fn name(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or("")
    }

    /// Topic with the last label removed, if the result is still a valid topic.
    pub fn parent(&self) -> Option<Topic> {
        let idx = self.0.rfind('/')?;
        Topic::parse(&self.0[..idx]).ok()
    }

    /// Appends one label.
    pub fn child(&self, label: &str) -> Result<Topic, TopicError> {
        Topic::parse(&format!("{}/{}", self.0, label))
    }

    /// True when `prefix` (a `/`-led label path, possibly shallower than a
    /// topic) is a label-wise prefix of this topic.
    pub fn starts_with_path(&self, prefix: &str) -> bool {
        let prefix = prefix.trim_end_matches('/');
        if prefix.is_empty() {
            return true;
        }
        self.0.starts_with(prefix)
            && (self.0.len() == prefix.len() || self.0.as_bytes()[prefix.len()] == b'/')
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Topic({})", self.0)
    }
}

impl FromStr for Topic {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topic::parse(s)
    }
}

impl AsRef<str> for Topic {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for Topic {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Topic {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Topic::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses a label path like `/deepest/cm` that may be shallower than a full
/// topic (depth >= 1). Used for tree roots and subscription prefixes.
pub fn parse_prefix(text: &str) -> Result<Vec<String>, TopicError> {
    if !text.starts_with('/') {
        return Err(TopicError::MissingLeadingSlash);
    }
    if text == "/" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for label in text[1..].split('/') {
        if label.is_empty() {
            return Err(TopicError::EmptyLabel(offset));
        }
        if let Some((i, ch)) = label.char_indices().find(|(_, c)| is_illegal(*c)) {
            return Err(TopicError::IllegalChar {
                ch,
                offset: offset + 1 + i,
            });
        }
        offset += label.len() + 1;
        out.push(label.to_string());
    }
    if out.len() > MAX_DEPTH {
        return Err(TopicError::Depth(out.len()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_deepest_topic() {
        let t = Topic::parse("/deepest/cm/n03/cpu0/temp-p").unwrap();
        assert_eq!(t.depth(), 5);
        assert_eq!(t.name(), "temp-p");
        assert_eq!(t.label(1), Some("cm"));
    }

    #[test]
    fn parses_sng_topic() {
        let t = Topic::parse("/sng/i01/n0042/cpu03/instructions").unwrap();
        assert_eq!(t.depth(), 5);
        assert_eq!(t.to_string(), "/sng/i01/n0042/cpu03/instructions");
    }

    #[test]
    fn empty_label_reports_offset() {
        let err = Topic::parse("/a//b").unwrap_err();
        assert_eq!(err.to_string(), "empty label at offset 2");
        assert_eq!(
            Topic::parse("/a/b/").unwrap_err(),
            TopicError::EmptyLabel(4)
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            Topic::parse("a/b").unwrap_err(),
            TopicError::MissingLeadingSlash
        );
        assert_eq!(Topic::parse("/a").unwrap_err(), TopicError::Depth(1));
        assert_eq!(
            Topic::parse("/1/2/3/4/5/6/7/8/9").unwrap_err(),
            TopicError::Depth(9)
        );
        assert!(matches!(
            Topic::parse("/a/b c").unwrap_err(),
            TopicError::IllegalChar { ch: ' ', offset: 4 }
        ));
        assert!(Topic::parse("/a/#").is_err());
    }

    #[test]
    fn parent_and_prefix() {
        let t = Topic::parse("/x/y/z").unwrap();
        assert_eq!(t.parent().unwrap().as_str(), "/x/y");
        assert!(t.starts_with_path("/x"));
        assert!(t.starts_with_path("/x/y/"));
        assert!(!t.starts_with_path("/x/yy"));
        assert!(t.parent().unwrap().parent().is_none());
    }

    #[test]
    fn prefix_paths() {
        assert_eq!(parse_prefix("/deepest").unwrap(), vec!["deepest"]);
        assert!(parse_prefix("/").unwrap().is_empty());
        assert_eq!(
            parse_prefix("/a//b").unwrap_err(),
            TopicError::EmptyLabel(2)
        );
    }

    proptest! {
        #[test]
        fn canonical_round_trip(labels in prop::collection::vec("[a-z0-9._-]{1,8}", 2..=8)) {
            let text = format!("/{}", labels.join("/"));
            let t = Topic::parse(&text).unwrap();
            prop_assert_eq!(t.to_string(), text);
            prop_assert_eq!(t.depth(), labels.len());
        }
    }
}

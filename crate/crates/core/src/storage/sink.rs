//! Long-term sinks for aggregates and per-job records. Sinks are
//! append-only files and are never touched by expiry.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::topic::Topic;
use crate::transport::pattern::SubscriptionPattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for SinkFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(SinkFormat::Csv),
            "jsonl" => Ok(SinkFormat::Jsonl),
            other => Err(format!("unknown sink format {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinkDescriptor {
    pub name: String,
    pub pattern: SubscriptionPattern,
    pub format: SinkFormat,
    pub path: PathBuf,
}

/// One record for a sink: the reading triple plus optional extra fields
/// (JSONL only).
#[derive(Debug, Clone, PartialEq)]
pub struct SinkRecord {
    pub topic: Topic,
    pub timestamp_ns: u64,
    pub value: i64,
    pub fields: Map<String, Value>,
}

impl SinkRecord {
    pub fn new(topic: Topic, timestamp_ns: u64, value: i64) -> Self {
        SinkRecord {
            topic,
            timestamp_ns,
            value,
            fields: Map::new(),
        }
    }

    /// Merges the fields of any serialisable struct into the record.
    pub fn with_fields<T: Serialize>(mut self, extra: &T) -> Self {
        if let Ok(Value::Object(m)) = serde_json::to_value(extra) {
            self.fields.extend(m);
        }
        self
    }
}

pub(crate) struct SinkWriter {
    pub desc: SinkDescriptor,
    out: BufWriter<File>,
}

impl SinkWriter {
    pub fn open(desc: SinkDescriptor) -> io::Result<Self> {
        if let Some(parent) = desc.path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&desc.path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut out = BufWriter::new(file);
        if fresh && desc.format == SinkFormat::Csv {
            out.write_all(b"topic,timestamp_ns,value\n")?;
        }
        Ok(SinkWriter { desc, out })
    }

    pub fn append(&mut self, rec: &SinkRecord) -> io::Result<()> {
        match self.desc.format {
            SinkFormat::Csv => {
                writeln!(self.out, "{},{},{}", rec.topic, rec.timestamp_ns, rec.value)
            }
            SinkFormat::Jsonl => {
                let mut obj = Map::new();
                obj.insert("topic".into(), Value::from(rec.topic.as_str()));
                obj.insert("timestamp_ns".into(), Value::from(rec.timestamp_ns));
                obj.insert("value".into(), Value::from(rec.value));
                for (k, v) in &rec.fields {
                    obj.insert(k.clone(), v.clone());
                }
                serde_json::to_writer(&mut self.out, &Value::Object(obj))?;
                self.out.write_all(b"\n")
            }
        }
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

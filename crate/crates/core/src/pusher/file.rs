//! Samplers for `/proc`-style text files.
//!
//! `meminfo` files hold `Key: value [kB]` lines; `kB` values are converted
//! to bytes. `stat` files hold `name c1 c2 ...` lines of counters, read
//! positionally and passed through raw.

use std::path::PathBuf;
use std::str::FromStr;

use crate::pusher::{SamplerPlugin, SensorDecl};
use crate::reading::Reading;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParserKind {
    Meminfo,
    /// Positional counters of one line, selected by its first word.
    Stat,
}

impl FromStr for ParserKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "meminfo" => Ok(ParserKind::Meminfo),
            "stat" => Ok(ParserKind::Stat),
            _ => Err(format!(
                "unknown file kind {s:?} (expected meminfo or stat)"
            )),
        }
    }
}

/// Field names of a `/proc/stat` cpu line, in order.
pub const STAT_FIELDS: [&str; 10] = [
    "user",
    "nice",
    "system",
    "idle",
    "iowait",
    "irq",
    "softirq",
    "steal",
    "guest",
    "guest_nice",
];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Parsed {
    pub values: Vec<(String, i64)>,
    /// Lines that did not fit the grammar.
    pub skipped: usize,
}

pub fn parse_meminfo(text: &str) -> Parsed {
    let mut out = Parsed::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed = line.split_once(':').and_then(|(k, rest)| {
            let mut it = rest.split_whitespace();
            let v: i64 = it.next()?.parse().ok()?;
            let v = match it.next() {
                None => v,
                Some("kB") => v.checked_mul(1024)?,
                Some(_) => return None,
            };
            it.next().is_none().then(|| (k.trim().to_string(), v))
        });
        match parsed {
            Some(kv) => out.values.push(kv),
            None => out.skipped += 1,
        }
    }
    out
}

/// Counters of the line whose first word is `line`, named by position.
pub fn parse_stat(text: &str, line: &str) -> Parsed {
    let mut out = Parsed::default();
    for l in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut words = l.split_whitespace();
        if words.next() != Some(line) {
            continue;
        }
        let nums: Result<Vec<i64>, _> = words.map(str::parse).collect();
        match nums {
            Ok(nums) => {
                out.values = STAT_FIELDS
                    .iter()
                    .zip(nums)
                    .map(|(f, v)| (f.to_string(), v))
                    .collect();
                return out;
            }
            Err(_) => out.skipped += 1,
        }
    }
    out
}

pub struct FileSource {
    name: String,
    path: PathBuf,
    kind: ParserKind,
    line: String,
    /// (key in the file, declared sensor)
    keys: Vec<(String, SensorDecl)>,
    interval_ms: u64,
    pub skipped_lines: u64,
}

impl FileSource {
    pub fn new(
        name: &str,
        path: PathBuf,
        kind: ParserKind,
        line: &str,
        keys: Vec<(String, SensorDecl)>,
        interval_ms: u64,
    ) -> Self {
        FileSource {
            name: name.into(),
            path,
            kind,
            line: line.into(),
            keys,
            interval_ms,
            skipped_lines: 0,
        }
    }
}

/// Reads `path` and returns one reading per configured key found.
pub fn read_file_source(
    path: &std::path::Path,
    kind: ParserKind,
    line: &str,
    keys: &[(String, SensorDecl)],
    ts: u64,
) -> Result<(Vec<Reading>, usize), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let parsed = match kind {
        ParserKind::Meminfo => parse_meminfo(&text),
        ParserKind::Stat => parse_stat(&text, line),
    };
    let out = keys
        .iter()
        .filter_map(|(k, decl)| {
            parsed
                .values
                .iter()
                .find(|(pk, _)| pk == k)
                .map(|(_, v)| Reading::new(decl.topic.clone(), ts, *v))
        })
        .collect();
    Ok((out, parsed.skipped))
}

impl SamplerPlugin for FileSource {
    fn name(&self) -> &str {
        &self.name
    }

    fn sensors(&self) -> Vec<SensorDecl> {
        self.keys.iter().map(|(_, d)| d.clone()).collect()
    }

    fn interval_ms(&self) -> u64 {
        self.interval_ms
    }

    fn sample(&mut self, ts: u64) -> Result<Vec<Reading>, String> {
        let (rs, skipped) = read_file_source(&self.path, self.kind, &self.line, &self.keys, ts)?;
        self.skipped_lines += skipped as u64;
        Ok(rs)
    }
}

use std::io::Write;
use std::sync::Arc;

use odapipe::storage::store::{QueryRange, Store, StoreConfig};
use odapipe::transport::client::{query_agent, LinkError};
use odapipe::transport::{QuerySource, SubscriptionPattern};
use odapipe::{Reading, WallClock};

use crate::fail::{data, env, Classify, Res};
use crate::{Format, QueryArgs, Source};

pub fn run(a: &QueryArgs) -> Res<()> {
    let pattern = SubscriptionPattern::parse(&a.pattern).data_ctx("pattern")?;
    if a.from > a.to {
        return Err(data("--from is after --to"));
    }
    let rows = match &a.store {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(env(format!(
                    "store directory {} does not exist",
                    dir.display()
                )));
            }
            let store = Store::open_read_only(StoreConfig::new(dir), Arc::new(WallClock))
                .env_ctx("opening store")?;
            store
                .query(&QueryRange::new(pattern, a.from, a.to))
                .env_ctx("store query")?
        }
        None => {
            let source = match a.source.unwrap_or(Source::Any) {
                Source::Any => QuerySource::Any,
                Source::Cache => QuerySource::Cache,
                Source::Store => QuerySource::Store,
            };
            match query_agent(&a.agent, &pattern, a.from, a.to, source) {
                Ok(r) => r,
                Err(e @ LinkError::Remote(_)) => return Err(data(e)),
                Err(e) => return Err(env(format!("agent {}: {e}", a.agent))),
            }
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    write_rows(&mut out, &rows, a.format).env_ctx("writing output")?;
    Ok(())
}

pub fn write_rows<W: Write>(out: &mut W, rows: &[Reading], format: Format) -> std::io::Result<()> {
    match format {
        Format::Csv => {
            writeln!(out, "topic,timestamp_ns,value")?;
            for r in rows {
                writeln!(out, "{},{},{}", r.topic, r.timestamp, r.value)?;
            }
        }
        Format::Table => {
            let head = ["topic", "timestamp_ns", "value"];
            let cells: Vec<[String; 3]> = rows
                .iter()
                .map(|r| {
                    [
                        r.topic.to_string(),
                        r.timestamp.to_string(),
                        r.value.to_string(),
                    ]
                })
                .collect();
            let mut w = head.map(str::len);
            for c in &cells {
                for i in 0..3 {
                    w[i] = w[i].max(c[i].len());
                }
            }
            writeln!(
                out,
                "{:<w0$}  {:>w1$}  {:>w2$}",
                head[0],
                head[1],
                head[2],
                w0 = w[0],
                w1 = w[1],
                w2 = w[2]
            )?;
            for c in &cells {
                writeln!(
                    out,
                    "{:<w0$}  {:>w1$}  {:>w2$}",
                    c[0],
                    c[1],
                    c[2],
                    w0 = w[0],
                    w1 = w[1],
                    w2 = w[2]
                )?;
            }
        }
    }
    out.flush()
}

//! Per-job aggregation of node metrics.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, Node};
use crate::odav::stats::{deciles, mean, severity, Direction, SeveritySpec};
use crate::operator::loader::{BuildCtx, Built, Common, COMMON_KEYS};
use crate::operator::{DataView, OpContext, OpError, Operator, Placement};
use crate::reading::{Reading, NS_PER_MS};
use crate::topic::Topic;

/// Share of job nodes that must report for an aggregate to count as
/// complete.
pub const COMPLETE_SHARE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub jobid: String,
    pub nodes: Vec<Topic>,
    pub start_ts: u64,
    /// 0 while running.
    pub end_ts: u64,
    pub user: String,
}

impl JobRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err(format!("job {} has no nodes", self.jobid));
        }
        if self.end_ts != 0 && self.end_ts < self.start_ts {
            return Err(format!("job {} ends before it starts", self.jobid));
        }
        Ok(())
    }

    pub fn is_running(&self) -> bool {
        self.end_ts == 0
    }

    /// Overlap with `[t0, t1)`.
    pub fn overlaps(&self, t0: u64, t1: u64) -> bool {
        self.start_ts < t1 && (self.end_ts == 0 || self.end_ts > t0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobAggregate {
    pub jobid: String,
    pub metric: String,
    pub t0: u64,
    pub t1: u64,
    pub d0: i64,
    pub d1: i64,
    pub d2: i64,
    pub d3: i64,
    pub d4: i64,
    pub d5: i64,
    pub d6: i64,
    pub d7: i64,
    pub d8: i64,
    pub d9: i64,
    pub d10: i64,
    pub avg: f64,
    pub severity: f64,
    /// Fraction of job nodes that reported in the window.
    pub completeness: f64,
}

impl JobAggregate {
    pub fn deciles(&self) -> [i64; 11] {
        [
            self.d0, self.d1, self.d2, self.d3, self.d4, self.d5, self.d6, self.d7, self.d8,
            self.d9, self.d10,
        ]
    }

    pub fn is_complete(&self) -> bool {
        self.completeness >= COMPLETE_SHARE
    }
}

/// Island of a node topic: its second label.
pub fn island_of(node: &Topic) -> &str {
    node.label(1).unwrap_or("")
}

/// Island holding the most job nodes; ties go to the lowest island id.
pub fn assign_job_owner(job: &JobRecord) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for n in &job.nodes {
        *counts.entry(island_of(n)).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (island, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((island, c));
        }
    }
    best.map(|b| b.0.to_string()).unwrap_or_default()
}

/// Topics carrying `metric` for a node: the node-level sensor and any
/// per-component sensor of the same name beneath it.
fn metric_topics(node: &Topic, metric: &str, known: &[Topic]) -> Vec<Topic> {
    let prefix = format!("{}/", node.as_str());
    known
        .iter()
        .filter(|t| t.name() == metric && t.as_str().starts_with(&prefix))
        .cloned()
        .collect()
}

/// Aggregates `metric` over the job's nodes in `[t0, t1)`. Every reading
/// counts once regardless of which node produced it. `None` when no node
/// reported.
pub fn aggregate_job(
    job: &JobRecord,
    metric: &str,
    t0: u64,
    t1: u64,
    view: &DataView,
    sev: &SeveritySpec,
) -> Option<JobAggregate> {
    if t1 <= t0 || !job.overlaps(t0, t1) {
        return None;
    }
    let known = view.topics();
    let mut values = Vec::new();
    let mut reporting = 0usize;
    for n in &job.nodes {
        let before = values.len();
        for t in metric_topics(n, metric, &known) {
            values.extend(view.window(&t, t0, t1 - 1).into_iter().map(|r| r.1));
        }
        if values.len() > before {
            reporting += 1;
        }
    }
    let d = deciles(&values)?;
    Some(JobAggregate {
        jobid: job.jobid.clone(),
        metric: metric.to_string(),
        t0,
        t1,
        d0: d[0],
        d1: d[1],
        d2: d[2],
        d3: d[3],
        d4: d[4],
        d5: d[5],
        d6: d[6],
        d7: d[7],
        d8: d[8],
        d9: d[9],
        d10: d[10],
        avg: mean(&values).unwrap_or(0.0),
        severity: severity(&values, sev).unwrap_or(0.0),
        completeness: reporting as f64 / job.nodes.len() as f64,
    })
}

/// Tails a JSONL job stream; later records for a job id replace earlier
/// ones (a completion record follows the start record).
pub struct JobTable {
    path: PathBuf,
    offset: u64,
    partial: String,
    jobs: BTreeMap<String, JobRecord>,
    pub bad_lines: u64,
}

impl JobTable {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        JobTable {
            path: path.into(),
            offset: 0,
            partial: String::new(),
            jobs: BTreeMap::new(),
            bad_lines: 0,
        }
    }

    /// Reads whatever was appended since the last poll.
    pub fn poll(&mut self) -> std::io::Result<usize> {
        let mut f = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(e),
        };
        let len = f.metadata()?.len();
        if len < self.offset {
            // truncated and rewritten
            self.offset = 0;
            self.partial.clear();
            self.jobs.clear();
        }
        f.seek(SeekFrom::Start(self.offset))?;
        let mut buf = String::new();
        f.read_to_string(&mut buf)?;
        self.offset += buf.len() as u64;
        self.partial.push_str(&buf);
        let mut n = 0;
        while let Some(nl) = self.partial.find('\n') {
            let line: String = self.partial.drain(..=nl).collect();
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match serde_json::from_str::<JobRecord>(line) {
                Ok(j) if j.validate().is_ok() => {
                    self.jobs.insert(j.jobid.clone(), j);
                    n += 1;
                }
                _ => self.bad_lines += 1,
            }
        }
        Ok(n)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }

    pub fn insert(&mut self, job: JobRecord) {
        self.jobs.insert(job.jobid.clone(), job);
    }
}

/// Single-writer JSONL sink for aggregates.
pub struct AggregateSink {
    out: Mutex<BufWriter<File>>,
}

impl AggregateSink {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AggregateSink {
            out: Mutex::new(BufWriter::new(f)),
        })
    }

    pub fn write(&self, agg: &JobAggregate) -> std::io::Result<()> {
        let mut w = self.out.lock();
        serde_json::to_writer(&mut *w, agg)?;
        w.write_all(b"\n")?;
        w.flush()
    }
}

pub struct MetricSeverity {
    pub metric: String,
    pub spec: SeveritySpec,
}

pub struct JobAggregator {
    jobs: JobTable,
    metrics: Vec<MetricSeverity>,
    island: Option<String>,
    interval_ns: u64,
    sink: Arc<AggregateSink>,
    pub written: u64,
}

impl JobAggregator {
    pub fn new(
        jobs: JobTable,
        metrics: Vec<MetricSeverity>,
        island: Option<String>,
        interval_ms: u64,
        sink: Arc<AggregateSink>,
    ) -> Self {
        JobAggregator {
            jobs,
            metrics,
            island,
            interval_ns: interval_ms * NS_PER_MS,
            sink,
            written: 0,
        }
    }
}

impl Operator for JobAggregator {
    fn compute(&mut self, ctx: &OpContext<'_>) -> Result<Vec<Reading>, OpError> {
        self.jobs.poll()?;
        let t1 = ctx.now;
        let t0 = t1.saturating_sub(self.interval_ns);
        for job in self.jobs.jobs() {
            if !job.overlaps(t0, t1) {
                continue;
            }
            if let Some(isl) = &self.island {
                if &assign_job_owner(job) != isl {
                    continue;
                }
            }
            for m in &self.metrics {
                if let Some(agg) = aggregate_job(job, &m.metric, t0, t1, ctx.view, &m.spec) {
                    self.sink.write(&agg)?;
                    self.written += 1;
                }
            }
        }
        Ok(Vec::new())
    }
}

/// ```text
/// jobaggregator ja1 {
///     jobs "jobs.jsonl"
///     sink "aggregates.jsonl"
///     island i01
///     metric cpi { threshold 1500 saturation 3000 }
/// }
/// ```
pub fn build(node: &Node, _ctx: &BuildCtx) -> Result<Vec<Built>, ConfigError> {
    let mut keys = COMMON_KEYS.to_vec();
    keys.extend(["jobs", "sink", "island", "metric"]);
    node.check_keys(&keys)?;
    let c = Common::from_node(node, 120_000, Placement::OutOfBand)?;
    let mut metrics = Vec::new();
    for m in node.all("metric") {
        m.check_keys(&["threshold", "saturation"])?;
        let name = m
            .name()
            .ok_or_else(|| ConfigError::at(m, "metric needs a name"))?;
        let th = m.req_float("threshold")?;
        let sat = m.req_float("saturation")?;
        let dir = if sat > th {
            Direction::AboveIsBad
        } else {
            Direction::BelowIsBad
        };
        let spec = SeveritySpec::new(th, sat, dir).map_err(|e| ConfigError::at(m, e.0))?;
        metrics.push(MetricSeverity { metric: name, spec });
    }
    let sink_path = node.req_text("sink")?;
    let sink = AggregateSink::open(Path::new(&sink_path))
        .map_err(|e| ConfigError::at(node, format!("sink {sink_path}: {e}")))?;
    let op = JobAggregator::new(
        JobTable::new(node.req_text("jobs")?),
        metrics,
        node.text("island")?,
        c.interval_ms,
        Arc::new(sink),
    );
    Ok(vec![Built {
        spec: c.spec(Vec::new(), Vec::new()),
        op: Box::new(op),
        allow_empty: true,
    }])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::SensorCache;

    fn t(s: &str) -> Topic {
        Topic::parse(s).unwrap()
    }

    fn job(nodes: &[&str]) -> JobRecord {
        JobRecord {
            jobid: "j1".into(),
            nodes: nodes.iter().map(|s| t(s)).collect(),
            start_ts: 1,
            end_ts: 0,
            user: "u".into(),
        }
    }

    fn sev() -> SeveritySpec {
        SeveritySpec::new(2.0, 4.0, Direction::AboveIsBad).unwrap()
    }

    #[test]
    fn owner_by_plurality_with_tie_break() {
        assert_eq!(
            assign_job_owner(&job(&["/s/i01/n1", "/s/i01/n2", "/s/i01/n3", "/s/i02/n4"])),
            "i01"
        );
        assert_eq!(
            assign_job_owner(&job(&["/s/i02/n1", "/s/i02/n2", "/s/i01/n3", "/s/i01/n4"])),
            "i01"
        );
        assert_eq!(assign_job_owner(&job(&["/s/i07/n1"])), "i07");
    }

    #[test]
    fn four_node_job() {
        let cache = Arc::new(SensorCache::new());
        for (i, v) in [1, 2, 3, 4].iter().enumerate() {
            cache.insert_raw(&t(&format!("/s/i01/n{i}/cpi")), 10, *v);
        }
        let j = job(&["/s/i01/n0", "/s/i01/n1", "/s/i01/n2", "/s/i01/n3"]);
        let view = DataView::new(cache, None);
        let a = aggregate_job(&j, "cpi", 0, 100, &view, &sev()).unwrap();
        assert_eq!(a.avg, 2.5);
        assert_eq!((a.d0, a.d10), (1, 4));
        assert_eq!(a.completeness, 1.0);
        // per-value severity 0, 0, 0.5, 1
        assert_eq!(a.severity, 0.375);
    }

    #[test]
    fn per_core_sensors_and_partial_jobs() {
        let cache = Arc::new(SensorCache::new());
        cache.insert_raw(&t("/s/i01/n0/c0/cpi"), 10, 1);
        cache.insert_raw(&t("/s/i01/n0/c1/cpi"), 10, 3);
        let j = job(&["/s/i01/n0", "/s/i01/n1", "/s/i01/n2"]);
        let a = aggregate_job(&j, "cpi", 0, 100, &DataView::new(cache, None), &sev()).unwrap();
        assert_eq!(a.avg, 2.0);
        assert!(!a.is_complete());
        assert!((a.completeness - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_node_and_no_data() {
        let cache = Arc::new(SensorCache::new());
        let topic = t("/s/i01/n0/cpi");
        for (ts, v) in [(10, 5), (20, 9), (30, 7)] {
            cache.insert_raw(&topic, ts, v);
        }
        let view = DataView::new(cache, None);
        let j = job(&["/s/i01/n0"]);
        let a = aggregate_job(&j, "cpi", 0, 100, &view, &sev()).unwrap();
        assert_eq!(a.deciles(), deciles(&[5, 9, 7]).unwrap());
        assert_eq!(a.avg, 7.0);
        // window excludes t1
        assert_eq!(aggregate_job(&j, "cpi", 0, 10, &view, &sev()), None);
        assert_eq!(aggregate_job(&j, "ipc", 0, 100, &view, &sev()), None);
    }

    #[test]
    fn table_tails_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jobs.jsonl");
        let mut table = JobTable::new(&path);
        assert_eq!(table.poll().unwrap(), 0);
        let mut j = job(&["/s/i01/n0"]);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .unwrap();
        writeln!(f, "{}", serde_json::to_string(&j).unwrap()).unwrap();
        writeln!(f, "not json").unwrap();
        write!(f, "{{\"jobid\":").unwrap();
        assert_eq!(table.poll().unwrap(), 1);
        assert!(table.jobs().next().unwrap().is_running());
        assert_eq!(table.bad_lines, 1);
        j.end_ts = 50;
        let rest = serde_json::to_string(&j).unwrap();
        writeln!(f, "{}", &rest["{\"jobid\":".len()..]).unwrap();
        assert_eq!(table.poll().unwrap(), 1);
        assert_eq!(table.jobs().count(), 1);
        assert_eq!(table.jobs().next().unwrap().end_ts, 50);
    }

    #[test]
    fn sink_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agg.jsonl");
        let sink = AggregateSink::open(&path).unwrap();
        let cache = Arc::new(SensorCache::new());
        cache.insert_raw(&t("/s/i01/n0/cpi"), 10, 3);
        let a = aggregate_job(
            &job(&["/s/i01/n0"]),
            "cpi",
            0,
            100,
            &DataView::new(cache, None),
            &sev(),
        )
        .unwrap();
        sink.write(&a).unwrap();
        let line = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        let mut want = vec![
            "jobid",
            "metric",
            "t0",
            "t1",
            "avg",
            "severity",
            "completeness",
        ];
        let ds: Vec<String> = (0..=10).map(|k| format!("d{k}")).collect();
        want.extend(ds.iter().map(String::as_str));
        want.sort();
        assert_eq!(keys, want);
    }
}

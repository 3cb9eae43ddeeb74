use std::collections::BTreeSet;
use std::net::TcpListener;
use std::sync::Arc;

use odapipe::agentd::RunningAgent;
use odapipe::storage::store::{QueryRange, Store, StoreConfig};
use odapipe::transport::{query_agent, Publisher, QuerySource, SubscriptionPattern, TcpLink};
use odapipe::{Clock, Reading, SharedClock, Topic, VirtualClock, WallClock};

fn agent_conf(addr: &str, dir: &std::path::Path) -> String {
    format!(
        "agent {{\n  listen \"{addr}\"\n  dataDir \"{}\"\n  ttl 0\n  flush 1000\n}}\n",
        dir.display()
    )
}

fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

fn readings(node: &str, ts0: u64, n: usize) -> Vec<Reading> {
    (0..n)
        .map(|i| {
            let t = Topic::parse(&format!("/r/{node}/s{}", i % 4)).unwrap();
            Reading::new(t, ts0 + i as u64, i as i64 * 10 - 70)
        })
        .collect()
}

fn keyed(v: &[Reading]) -> BTreeSet<(String, u64, i64)> {
    v.iter()
        .map(|r| (r.topic.as_str().to_string(), r.timestamp, r.value))
        .collect()
}

#[test]
fn published_readings_reach_cache_and_store() {
    let dir = tempfile::tempdir().unwrap();
    let clock: SharedClock = Arc::new(WallClock);
    let agent = RunningAgent::start(&agent_conf("127.0.0.1:0", dir.path()), clock.clone()).unwrap();
    let addr = agent.local_addr().to_string();

    let mut publisher = Publisher::new(TcpLink::new(addr.clone(), "n0"), clock.clone(), 1 << 20);
    let ts0 = clock.now_ns();
    let sent = [readings("n0", ts0, 40), readings("n1", ts0, 40)].concat();
    assert_eq!(publisher.publish(&sent), sent.len());
    assert_eq!(publisher.stats().buffered, 0);

    let all = SubscriptionPattern::parse("/r/#").unwrap();
    let cached = query_agent(&addr, &all, 0, u64::MAX, QuerySource::Cache).unwrap();
    assert_eq!(keyed(&cached), keyed(&sent));

    let n1 = SubscriptionPattern::parse("/r/n1/#").unwrap();
    let got = query_agent(&addr, &n1, ts0 + 10, ts0 + 19, QuerySource::Any).unwrap();
    let want: Vec<Reading> = sent
        .iter()
        .filter(|r| {
            r.topic.as_str().starts_with("/r/n1/") && (10..20).contains(&(r.timestamp - ts0))
        })
        .cloned()
        .collect();
    assert_eq!(keyed(&got), keyed(&want));

    drop(publisher);
    agent.shutdown().unwrap();
    let store = Store::open(StoreConfig::new(dir.path()), clock).unwrap();
    let stored = store.query(&QueryRange::new(all, 0, u64::MAX)).unwrap();
    assert_eq!(keyed(&stored), keyed(&sent));
}

#[test]
fn publisher_buffers_until_the_agent_comes_up() {
    let dir = tempfile::tempdir().unwrap();
    let addr = free_addr();
    let vclock = VirtualClock::new(1_000);
    let pclock: SharedClock = Arc::new(vclock.clone());
    let mut publisher = Publisher::new(TcpLink::new(addr.clone(), "n0"), pclock, 1 << 20);

    let ts0 = WallClock.now_ns();
    let early = readings("n0", ts0, 12);
    assert_eq!(publisher.publish(&early), 0);
    let s = publisher.stats();
    assert_eq!((s.buffered, s.dropped), (early.len(), 0));
    assert!(s.failures >= 1);

    let wall: SharedClock = Arc::new(WallClock);
    let agent = RunningAgent::start(&agent_conf(&addr, dir.path()), wall).unwrap();
    // still inside the backoff window: nothing is attempted
    assert_eq!(publisher.try_flush(), 0);
    vclock.advance(60_000_000_000);
    let late = readings("n0", ts0 + 100, 5);
    assert_eq!(publisher.publish(&late), early.len() + late.len());
    assert_eq!(publisher.stats().buffered, 0);

    let all = SubscriptionPattern::parse("/r/#").unwrap();
    let got = query_agent(&addr, &all, 0, u64::MAX, QuerySource::Cache).unwrap();
    assert_eq!(keyed(&got), keyed(&[early, late].concat()));
    drop(publisher);
    agent.shutdown().unwrap();
}

#[test]
fn publisher_drops_oldest_beyond_its_budget() {
    let addr = free_addr();
    let clock: SharedClock = Arc::new(VirtualClock::new(0));
    let one = 16 + "/r/n0/s0".len();
    let mut publisher = Publisher::new(TcpLink::new(addr, "n0"), clock, 10 * one);
    let batch = readings("n0", 0, 25);
    assert_eq!(publisher.publish(&batch), 0);
    let s = publisher.stats();
    assert_eq!((s.buffered, s.dropped), (10, 15));
    let kept: Vec<u64> = publisher.buffered().map(|r| r.timestamp).collect();
    assert_eq!(kept, (15..25).collect::<Vec<u64>>());
}

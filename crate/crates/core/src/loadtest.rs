//! Open-loop load generator for the rewrite endpoint.
//!
//! Request `i` is scheduled at `start + i / qps` regardless of how earlier
//! requests fare, and its latency is measured from that scheduled instant,
//! so a stalled server shows up as latency instead of silently lowering the
//! offered rate.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tokio::time::Instant;

use crate::error::{Error, Result};
use crate::service::RewriteRequest;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub qps: f64,
    pub duration_s: f64,
    pub timeout_ms: u64,
    pub seed: u64,
}

impl LoadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.qps.is_finite() && self.qps > 0.0) {
            return Err(Error::Config(format!("qps must be positive, got {}", self.qps)));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(Error::Config(format!("duration_s must be >= 0, got {}", self.duration_s)));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("timeout_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn n_requests(&self) -> usize {
        (self.qps * self.duration_s).floor() as usize
    }
}

/// One request's outcome. `status` is 0 when no HTTP response arrived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Sample {
    pub i: usize,
    pub scheduled_us: u64,
    pub sent_us: u64,
    pub latency_us: u64,
    pub status: u16,
}

impl Sample {
    pub fn is_error(&self) -> bool {
        self.status != 200
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadReport {
    pub target_qps: f64,
    pub duration_s: f64,
    pub n_requests: usize,
    pub n_errors: usize,
    /// `None` when no request was sent.
    pub error_rate: Option<f64>,
    pub achieved_qps: Option<f64>,
    pub p50_ms: Option<f64>,
    pub p90_ms: Option<f64>,
    pub p99_ms: Option<f64>,
}

/// Nearest-rank percentile of an ascending slice: the value at 1-based rank
/// ⌈p/100 · n⌉.
pub fn nearest_rank(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Report over a raw sample log; recomputing it from a reloaded log gives
/// the same numbers.
pub fn summarize(samples: &[Sample], target_qps: f64, duration_s: f64) -> LoadReport {
    let mut lat: Vec<u64> = samples.iter().map(|s| s.latency_us).collect();
    lat.sort_unstable();
    let ms = |p| nearest_rank(&lat, p).map(|us| us as f64 / 1000.0);
    let n = samples.len();
    let n_errors = samples.iter().filter(|s| s.is_error()).count();
    let achieved_qps = match (
        samples.iter().map(|s| s.sent_us).min(),
        samples.iter().map(|s| s.sent_us).max(),
    ) {
        (Some(a), Some(b)) if b > a => Some((n - 1) as f64 / ((b - a) as f64 / 1e6)),
        _ => None,
    };
    LoadReport {
        target_qps,
        duration_s,
        n_requests: n,
        n_errors,
        error_rate: (n > 0).then(|| n_errors as f64 / n as f64),
        achieved_qps,
        p50_ms: ms(50.0),
        p90_ms: ms(90.0),
        p99_ms: ms(99.0),
    }
}

pub const RAW_CSV_HEADER: &str = "i,scheduled_us,sent_us,latency_us,status";

pub fn raw_csv(samples: &[Sample]) -> String {
    let mut out = String::from(RAW_CSV_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(out, "{},{},{},{},{}", s.i, s.scheduled_us, s.sent_us, s.latency_us, s.status);
    }
    out
}

pub fn parse_raw_csv(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Config(format!("raw latency log line {}: {line:?}", n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |k: usize| f[k].trim().parse::<u64>().map_err(|_| bad());
        out.push(Sample {
            i: num(0)? as usize,
            scheduled_us: num(1)?,
            sent_us: num(2)?,
            latency_us: num(3)?,
            status: u16::try_from(num(4)?).map_err(|_| bad())?,
        });
    }
    Ok(out)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| format!("{v:.3}"))
}

impl LoadReport {
    pub const CSV_HEADER: &'static str =
        "target_qps,duration_s,n_requests,n_errors,error_rate,achieved_qps,p50_ms,p90_ms,p99_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.target_qps,
            self.duration_s,
            self.n_requests,
            self.n_errors,
            opt(self.error_rate),
            opt(self.achieved_qps),
            opt(self.p50_ms),
            opt(self.p90_ms),
            opt(self.p99_ms)
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "requests={} errors={} error_rate={} achieved_qps={} p50_ms={} p90_ms={} p99_ms={}",
            self.n_requests,
            self.n_errors,
            opt(self.error_rate),
            opt(self.achieved_qps),
            opt(self.p50_ms),
            opt(self.p90_ms),
            opt(self.p99_ms)
        )
    }

    /// Writes `<stem>.csv` (summary) and `<stem>.raw.csv` (per request).
    pub fn write(&self, samples: &[Sample], stem: &Path) -> Result<()> {
        let summary = stem.with_extension("csv");
        let raw = stem.with_extension("raw.csv");
        std::fs::write(&summary, format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row()))
            .map_err(|e| Error::io(&summary, e))?;
        std::fs::write(&raw, raw_csv(samples)).map_err(|e| Error::io(&raw, e))
    }
}

/// Checks `/healthz` answers before any load is offered.
pub async fn probe(client: &reqwest::Client, endpoint: &str) -> Result<()> {
    let url = format!("{}/healthz", endpoint.trim_end_matches('/'));
    match client.get(&url).send().await {
        Ok(r) if r.status().is_success() => Ok(()),
        Ok(r) => Err(Error::EndpointUnreachable(format!("{url}: status {}", r.status()))),
        Err(e) => Err(Error::EndpointUnreachable(format!("{url}: {e}"))),
    }
}

/// Runs the open-loop load and returns the report with its raw log.
pub async fn run(cfg: &LoadConfig, corpus: &[RewriteRequest]) -> Result<(LoadReport, Vec<Sample>)> {
    cfg.validate()?;
    let n = cfg.n_requests();
    let client = reqwest::Client::builder()
        .timeout(Duration::from_millis(cfg.timeout_ms))
        .pool_max_idle_per_host(256)
        .tcp_nodelay(true)
        .build()
        .map_err(|e| Error::EndpointUnreachable(e.to_string()))?;
    probe(&client, &cfg.endpoint).await?;
    if n > 0 && corpus.is_empty() {
        return Err(Error::Config("request corpus is empty".into()));
    }
    if n == 0 {
        return Ok((summarize(&[], cfg.qps, cfg.duration_s), Vec::new()));
    }

    let url = Arc::new(format!("{}/v1/rewrite", cfg.endpoint.trim_end_matches('/')));
    let bodies: Vec<Vec<u8>> = corpus
        .iter()
        .map(|r| serde_json::to_vec(r).map_err(|e| Error::Config(format!("request encoding: {e}"))))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..bodies.len())).collect();

    let period = Duration::from_secs_f64(1.0 / cfg.qps);
    let start = Instant::now() + Duration::from_millis(10);
    let mut tasks = Vec::with_capacity(n);
    for (i, &pick) in picks.iter().enumerate() {
        let offset = period.mul_f64(i as f64);
        let scheduled = start + offset;
        tokio::time::sleep_until(scheduled).await;
        let client = client.clone();
        let url = Arc::clone(&url);
        let body = bodies[pick].clone();
        tasks.push(tokio::spawn(async move {
            let sent = Instant::now();
            let status = match client
                .post(url.as_str())
                .header("content-type", "application/json")
                .body(body)
                .send()
                .await
            {
                Ok(r) => {
                    let status = r.status().as_u16();
                    // drain the body so the latency covers the full response
                    match r.bytes().await {
                        Ok(_) => status,
                        Err(_) => 0,
                    }
                }
                Err(_) => 0,
            };
            let done = Instant::now();
            Sample {
                i,
                scheduled_us: offset.as_micros() as u64,
                sent_us: (sent - start).as_micros() as u64,
                latency_us: (done - scheduled).as_micros() as u64,
                status,
            }
        }));
    }
    let mut samples = Vec::with_capacity(n);
    for t in tasks {
        samples.push(t.await.map_err(|e| Error::Config(format!("load task failed: {e}")))?);
    }
    Ok((summarize(&samples, cfg.qps, cfg.duration_s), samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize, sent_us: u64, latency_us: u64, status: u16) -> Sample {
        Sample { i, scheduled_us: sent_us, sent_us, latency_us, status }
    }

    #[test]
    fn nearest_rank_by_hand() {
        let v: Vec<u64> = (1..=10).collect();
        assert_eq!(nearest_rank(&v, 50.0), Some(5));
        assert_eq!(nearest_rank(&v, 90.0), Some(9));
        assert_eq!(nearest_rank(&v, 99.0), Some(10));
        assert_eq!(nearest_rank(&v, 0.0), Some(1));
        assert_eq!(nearest_rank(&[7], 90.0), Some(7));
        assert_eq!(nearest_rank(&[], 50.0), None);
    }

    #[test]
    fn empty_report_flags_undefined() {
        let r = summarize(&[], 120.0, 0.0);
        assert_eq!(r.n_requests, 0);
        assert_eq!(r.error_rate, None);
        assert_eq!(r.p90_ms, None);
        assert!(r.summary().contains("error_rate=undefined"));
    }

    #[test]
    fn summary_counts_and_rate() {
        let s: Vec<Sample> = (0..11).map(|i| sample(i, i as u64 * 100_000, 1000 * (i as u64 + 1), if i == 3 { 500 } else { 200 })).collect();
        let r = summarize(&s, 10.0, 1.1);
        assert_eq!(r.n_errors, 1);
        assert!((r.error_rate.unwrap() - 1.0 / 11.0).abs() < 1e-12);
        assert!((r.achieved_qps.unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(r.p50_ms, Some(6.0));
        assert_eq!(r.p99_ms, Some(11.0));
    }

    #[test]
    fn raw_log_reproduces_report() {
        let s: Vec<Sample> = (0..50).map(|i| sample(i, i as u64 * 8333, (i as u64 * 7919) % 20_000, 200)).collect();
        let back = parse_raw_csv(&raw_csv(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(summarize(&back, 120.0, 0.5), summarize(&s, 120.0, 0.5));
    }

    #[test]
    fn config_validation() {
        let ok = LoadConfig {
            endpoint: "http://127.0.0.1:1".into(),
            qps: 120.0,
            duration_s: 0.5,
            timeout_ms: 100,
            seed: 1,
        };
        assert!(ok.validate().is_ok());
        assert_eq!(ok.n_requests(), 60);
        assert!(LoadConfig { qps: 0.0, ..ok.clone() }.validate().is_err());
        assert!(LoadConfig { duration_s: -1.0, ..ok.clone() }.validate().is_err());
        assert!(LoadConfig { timeout_ms: 0, ..ok }.validate().is_err());
    }

    #[tokio::test]
    async fn unreachable_endpoint() {
        // bind then drop to get a port nobody listens on
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = LoadConfig {
            endpoint: format!("http://127.0.0.1:{port}"),
            qps: 10.0,
            duration_s: 1.0,
            timeout_ms: 200,
            seed: 1,
        };
        assert!(matches!(run(&cfg, &[]).await, Err(Error::EndpointUnreachable(_))));
    }
}

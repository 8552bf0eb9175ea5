//! CSV, JSON Lines and JSON writers for run results.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::metrics::{empirical_cdf, MetricsReport};
use super::{HarnessError, RunOutput};
use crate::net::TraceRecord;

#[derive(Serialize)]
struct TraceLine<'a> {
    time_us: f64,
    node: u32,
    kind: &'a str,
    detail: &'a Value,
}

/// One JSON object per trace event, nodes named by their scenario id.
pub fn write_trace_jsonl<W: Write>(mut w: W, trace: &[TraceRecord], node_ids: &[u32]) -> Result<(), HarnessError> {
    for r in trace {
        let line = TraceLine {
            time_us: r.time_ns as f64 / 1e3,
            node: node_ids[r.node],
            kind: r.kind,
            detail: &r.detail,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trace_jsonl(run: &RunOutput) -> String {
    let mut buf = Vec::new();
    write_trace_jsonl(&mut buf, &run.trace, &run.node_ids()).expect("writing to memory");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn write_metrics_csv<W: Write>(w: W, report: &MetricsReport) -> Result<(), HarnessError> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["flow", "src", "dst", "interval_start_s", "interval_end_s", "throughput_kbps"])?;
    for f in &report.flows {
        for (k, kbps) in f.interval_kbps.iter().enumerate() {
            let start = k as f64 * report.interval_s;
            csv.write_record([
                f.flow.to_string(),
                f.src.to_string(),
                f.dst.to_string(),
                format!("{start}"),
                format!("{}", start + report.interval_s),
                format!("{kbps:.4}"),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn write_rtt_csv<W: Write>(w: W, report: &MetricsReport) -> Result<(), HarnessError> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["flow", "seq", "sent_us", "rtt_ms", "status"])?;
    for r in &report.rtt_records {
        let (rtt, status) = match r.rtt_ns {
            Some(ns) => (format!("{:.3}", ns as f64 / 1e6), "ok"),
            None => (String::new(), "lost"),
        };
        csv.write_record([
            r.flow.to_string(),
            r.seq.to_string(),
            format!("{:.3}", r.sent_ns as f64 / 1e3),
            rtt,
            status.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn summary_json(run: &RunOutput) -> Value {
    let r = &run.report;
    let rtts = r.rtts_ms();
    let ping = (!r.rtt_records.is_empty()).then(|| {
        json!({
            "sent": r.rtt_records.len(),
            "answered": rtts.len(),
            "lost": r.pings_lost(),
            "fraction_below_200ms": r.rtt_fraction_below(200.0),
            "median_ms": super::metrics::median(&rtts),
            "cdf": empirical_cdf(&rtts),
        })
    });
    json!({
        "name": run.spec.name,
        "seed": run.spec.seed,
        "t_end_s": run.spec.t_end_s,
        "events": run.events,
        "jain_index": r.jain_index,
        "flows": r.flows.iter().map(|f| json!({
            "flow": f.flow,
            "kind": f.kind,
            "src": f.src,
            "dst": f.dst,
            "mean_kbps": f.mean_kbps,
            "median_kbps": f.median_kbps,
            "max_kbps": f.max_kbps,
            "delivered_bytes": f.delivered_bytes,
            "duplicates": f.duplicates,
        })).collect::<Vec<_>>(),
        "ping": ping,
        "counters": r.counters,
    })
}

/// Writes `metrics.csv`, `rtt.csv`, `trace.jsonl` and `summary.json`.
pub fn write_outputs(dir: &Path, run: &RunOutput) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, &run.report)?;
    write_rtt_csv(fs::File::create(dir.join("rtt.csv"))?, &run.report)?;
    let mut trace = std::io::BufWriter::new(fs::File::create(dir.join("trace.jsonl"))?);
    write_trace_jsonl(&mut trace, &run.trace, &run.node_ids())?;
    trace.flush()?;
    let summary = serde_json::to_string_pretty(&summary_json(run))?;
    fs::write(dir.join("summary.json"), summary + "\n")?;
    Ok(())
}

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use openvlc_core::frame::{self, MacFrame, DEFAULT_MAX_PAYLOAD};
use openvlc_core::harness::output::{summary_json, write_outputs};
use openvlc_core::harness::scenario::{load_scenario, ScenarioSpec};
use openvlc_core::harness::{
    analytic_throughput_kbps, calibrate, parse_payload_range, run_saturation, run_scenario, CalibrationTarget,
};
use openvlc_core::phy::{self, Symbol, SYNC_HEADER_LEN};
use openvlc_core::sim::SimDuration;

#[derive(Parser)]
#[command(name = "openvlc-sim", version, about = "Discrete-event simulator for LED-to-LED visible light networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics, RTTs, trace and summary.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated duration in seconds.
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Saturation throughput against payload size.
    Sweep {
        scenario: PathBuf,
        /// `start..end:step` or a comma-separated list.
        #[arg(long, default_value = "50..1000:50")]
        payloads: String,
        #[arg(long)]
        t_end: Option<f64>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the affine processing overhead to two (payload, kb/s) points.
    Calibrate {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "50:6,1000:18")]
        target_points: Vec<CalibrationTarget>,
        /// Write the calibrated scenario here.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Frame encoder and decoder for debugging.
    Codec {
        #[command(subcommand)]
        op: CodecOp,
    },
}

#[derive(Subcommand)]
enum CodecOp {
    /// Build a frame and print it coded.
    Encode {
        #[arg(long, default_value = "0x0002", value_parser = parse_u16)]
        dst: u16,
        #[arg(long, default_value = "0x0001", value_parser = parse_u16)]
        src: u16,
        #[arg(long, default_value = "0x0011", value_parser = parse_u16)]
        protocol: u16,
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum, default_value_t = Format::Hex)]
        format: Format,
    },
    /// Recover a frame from coded hex or a symbol string and print it as JSON.
    Decode {
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum, default_value_t = Format::Hex)]
        format: Format,
    },
}

#[derive(Args)]
struct Input {
    /// Inline data (hex bytes or H/L symbols). Read from --input or stdin when absent.
    #[arg(long)]
    data: Option<String>,
    #[arg(long, conflicts_with = "data")]
    input: Option<PathBuf>,
}

impl Input {
    fn read(&self) -> Result<String> {
        let text = match (&self.data, &self.input) {
            (Some(d), _) => d.clone(),
            (None, Some(p)) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            (None, None) => {
                let mut s = String::new();
                io::stdin().read_to_string(&mut s)?;
                s
            }
        };
        Ok(text.split_whitespace().collect())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    /// RS-coded bytes, without the sync header.
    Hex,
    /// Full line signal: sync header then Manchester body, as H and L.
    Symbols,
}

fn parse_u16(s: &str) -> Result<u16, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u16::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|e| e.to_string())
}

fn switch_latency(spec: &ScenarioSpec) -> SimDuration {
    SimDuration::from_micros_f64(spec.channel.switch_latency_us)
}

fn cmd_run(path: &Path, seed: Option<u64>, t_end: Option<f64>, out: &Path) -> Result<()> {
    let mut spec = load_scenario(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(t) = t_end {
        spec.t_end_s = t;
    }
    let run = run_scenario(&spec)?;
    write_outputs(out, &run)?;
    let summary = summary_json(&run);
    println!("{}", serde_json::to_string_pretty(&summary)?);
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(path: &Path, payloads: &str, t_end: Option<f64>, out: Option<&Path>) -> Result<()> {
    let mut spec = load_scenario(path)?;
    if let Some(t) = t_end {
        spec.t_end_s = t;
    }
    let payloads = parse_payload_range(payloads).map_err(anyhow::Error::msg)?;
    let points = run_saturation(&spec, &payloads)?;
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["payload_bytes", "throughput_kbps", "analytic_kbps"])?;
    for p in points {
        w.write_record([
            p.payload.to_string(),
            format!("{:.4}", p.throughput_kbps),
            format!("{:.4}", p.oracle_kbps),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_calibrate(path: &Path, targets: &[CalibrationTarget], write: Option<&Path>) -> Result<()> {
    let [t1, t2] = targets else {
        bail!("need exactly two target points");
    };
    let mut spec = load_scenario(path)?;
    let delta = switch_latency(&spec);
    let cal = calibrate(&spec.mac.to_params(), delta, [*t1, *t2])?;
    cal.apply(&mut spec);
    println!("proc_overhead_a_us = {:.3}", cal.proc_overhead_a_us);
    println!("proc_overhead_b_us_per_byte = {:.5}", cal.proc_overhead_b_us_per_byte);
    let mac = spec.mac.to_params();
    for t in [t1, t2] {
        println!(
            "  {} B: analytic {:.3} kb/s (target {})",
            t.payload,
            analytic_throughput_kbps(&mac, delta, t.payload),
            t.kbps
        );
    }
    if let Some(p) = write {
        fs::write(p, serde_json::to_string_pretty(&spec)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn parse_symbols(text: &str) -> Result<Vec<Symbol>> {
    text.chars()
        .map(|c| Symbol::from_char(c).with_context(|| format!("not a symbol: {c:?}")))
        .collect()
}

fn cmd_codec(op: &CodecOp) -> Result<()> {
    match op {
        CodecOp::Encode {
            dst,
            src,
            protocol,
            input,
            format,
        } => {
            let payload = hex::decode(input.read()?).context("payload is not hex")?;
            let f = MacFrame::data(*dst, *src, *protocol, payload);
            let coded = frame::frame_to_symbols(&f, DEFAULT_MAX_PAYLOAD)?;
            match format {
                Format::Hex => {
                    let bytes = frame::rs_encode_frame(&frame::frame_serialize(&f, DEFAULT_MAX_PAYLOAD)?);
                    println!("{}", hex::encode(bytes));
                }
                Format::Symbols => {
                    println!("{}", coded.to_symbols().iter().map(|s| s.as_char()).collect::<String>());
                }
            }
        }
        CodecOp::Decode { input, format } => {
            let text = input.read()?;
            let body = match format {
                Format::Hex => phy::manchester_encode_bytes(&hex::decode(&text).context("input is not hex")?),
                Format::Symbols => {
                    let all = parse_symbols(&text)?;
                    if all.len() < SYNC_HEADER_LEN || all[..SYNC_HEADER_LEN] != phy::build_sync_header()[..] {
                        bail!("symbol stream does not start with the sync header");
                    }
                    all[SYNC_HEADER_LEN..].to_vec()
                }
            };
            let d = frame::symbols_to_frame(&body)?;
            let json = serde_json::json!({
                "dst": d.frame.dst,
                "src": d.frame.src,
                "protocol": d.frame.protocol,
                "ack": d.frame.is_ack(),
                "payload": hex::encode(&d.frame.payload),
                "coded_bytes": d.coded_bytes,
                "corrected": d.corrected,
            });
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run {
            scenario,
            seed,
            t_end,
            out,
        } => cmd_run(scenario, *seed, *t_end, out),
        Command::Sweep {
            scenario,
            payloads,
            t_end,
            out,
        } => cmd_sweep(scenario, payloads, *t_end, out.as_deref()),
        Command::Calibrate {
            scenario,
            target_points,
            write,
        } => cmd_calibrate(scenario, target_points, write.as_deref()),
        Command::Codec { op } => cmd_codec(op),
    }
}

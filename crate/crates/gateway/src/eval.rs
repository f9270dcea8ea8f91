//! Accuracy and latency harness over a generated arithmetic corpus.
//!
//! Baseline mode sends each prompt straight to the backend. Pipeline mode
//! sends it through the full gateway. `process_count` worker threads share
//! one queue of prompts, so raising it raises contention on the backend.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use llm_gateway_core::corpus::ArithPrompt;
use llm_gateway_core::llm::{direct_prompt, LlmBackend};
use llm_gateway_core::users::{AccessCertificate, WorkerClass};
use num_bigint::BigInt;
use serde::Serialize;

use crate::gateway::{ChatRequest, Gateway, GatewayError, ResponseKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Pipeline,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "pipeline" => Ok(Mode::Pipeline),
            other => Err(format!("unknown mode {other:?}, expected baseline or pipeline")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModeResult {
    pub correct: usize,
    pub mean_latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub arity: usize,
    pub n: usize,
    pub baseline: Option<ModeResult>,
    pub pipeline: Option<ModeResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Ordered by arity.
    pub rows: Vec<EvalRow>,
    pub process_count: usize,
}

/// The last integer literal in `text`, sign included.
pub fn final_integer(text: &str) -> Option<BigInt> {
    let b = text.as_bytes();
    let mut end = b.len();
    while end > 0 {
        if b[end - 1].is_ascii_digit() {
            let mut start = end;
            while start > 0 && (b[start - 1].is_ascii_digit() || (b[start - 1] == b',' && start >= 2 && b[start - 2].is_ascii_digit())) {
                start -= 1;
            }
            if start > 0 && b[start - 1] == b'-' {
                start -= 1;
            }
            let digits: String = text[start..end].chars().filter(|c| *c != ',').collect();
            return digits.parse().ok();
        }
        end -= 1;
    }
    None
}

struct Outcome {
    arity: usize,
    correct: bool,
    latency: Duration,
}

/// Runs every prompt once per mode.
pub fn evaluate(gw: &Gateway, corpus: &[ArithPrompt], modes: &[Mode], process_count: usize) -> Result<EvalReport, GatewayError> {
    let process_count = process_count.max(1);
    let mut results: BTreeMap<(usize, Mode), (usize, usize, Duration)> = BTreeMap::new();
    let mut arity_n: BTreeMap<usize, usize> = BTreeMap::new();
    for p in corpus {
        *arity_n.entry(p.arity).or_default() += 1;
    }
    for &mode in modes {
        let keys = match mode {
            Mode::Pipeline => register_eval_users(gw, process_count)?,
            Mode::Baseline => Vec::new(),
        };
        for o in run_mode(gw, corpus, mode, &keys, process_count) {
            let e = results.entry((o.arity, mode)).or_default();
            e.0 += usize::from(o.correct);
            e.1 += 1;
            e.2 += o.latency;
        }
    }
    let summary = |arity, mode| {
        results.get(&(arity, mode)).map(|&(correct, n, total)| ModeResult {
            correct,
            mean_latency_ms: total.as_secs_f64() * 1000.0 / n.max(1) as f64,
        })
    };
    let rows = arity_n
        .iter()
        .map(|(&arity, &n)| EvalRow {
            arity,
            n,
            baseline: summary(arity, Mode::Baseline),
            pipeline: summary(arity, Mode::Pipeline),
        })
        .collect();
    Ok(EvalReport { rows, process_count })
}

/// One user per process, each allowed the calculator and every worker class.
fn register_eval_users(gw: &Gateway, count: usize) -> Result<Vec<String>, GatewayError> {
    let run: u64 = rand::random();
    (0..count)
        .map(|i| {
            let cert = AccessCertificate::new(["calculator"], [WorkerClass::Cpu, WorkerClass::Gpu]);
            gw.register_user(&format!("eval-{run:016x}-{i}"), cert).map(|u| u.auth_key)
        })
        .collect()
}

fn run_mode(gw: &Gateway, corpus: &[ArithPrompt], mode: Mode, keys: &[String], processes: usize) -> Vec<Outcome> {
    let next = AtomicUsize::new(0);
    let out = Mutex::new(Vec::with_capacity(corpus.len()));
    std::thread::scope(|s| {
        for proc_idx in 0..processes {
            let (next, out) = (&next, &out);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(p) = corpus.get(i) else { break };
                let start = Instant::now();
                let answer = match mode {
                    Mode::Baseline => gw.backend().complete(&direct_prompt(&[], &p.text)).ok(),
                    Mode::Pipeline => {
                        let r = gw.handle_chat(&ChatRequest {
                            session_id: format!("eval-{i}"),
                            auth_key: keys[proc_idx].clone(),
                            prompt: p.text.clone(),
                        });
                        (r.kind == ResponseKind::Answer).then_some(r.text)
                    }
                };
                let latency = start.elapsed();
                let correct = answer.and_then(|a| final_integer(&a)) == Some(p.expected());
                out.lock().unwrap().push(Outcome {
                    arity: p.arity,
                    correct,
                    latency,
                });
            });
        }
    });
    out.into_inner().unwrap()
}

fn cell(r: Option<ModeResult>, n: usize) -> (String, String) {
    match r {
        Some(r) => (format!("{}/{n}", r.correct), format!("{:.1}", r.mean_latency_ms)),
        None => ("-".into(), "-".into()),
    }
}

impl EvalReport {
    /// Accuracy per arity for the bare model and the model with the calculator.
    pub fn render_table(&self) -> String {
        let header = ["Arguments", "LLM", "LLM + Calculator Application", "LLM ms", "LLM + Calc ms"];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                let (b, bl) = cell(r.baseline, r.n);
                let (p, pl) = cell(r.pipeline, r.n);
                [r.arity.to_string(), b, p, bl, pl]
            })
            .collect();
        let widths: Vec<usize> = (0..5)
            .map(|i| body.iter().map(|row| row[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, cells: [&str; 5]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            let _ = writeln!(out, "| {} |", parts.join(" | "));
        };
        line(&mut out, header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        for row in &body {
            line(&mut out, [&row[0], &row[1], &row[2], &row[3], &row[4]]);
        }
        let _ = writeln!(out, "processes: {}", self.process_count);
        out
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "arity",
            "n",
            "baseline_correct",
            "pipeline_correct",
            "baseline_mean_ms",
            "pipeline_mean_ms",
            "processes",
        ])?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.arity.to_string(),
                r.n.to_string(),
                opt(r.baseline.map(|m| m.correct.to_string())),
                opt(r.pipeline.map(|m| m.correct.to_string())),
                opt(r.baseline.map(|m| format!("{:.3}", m.mean_latency_ms))),
                opt(r.pipeline.map(|m| format!("{:.3}", m.mean_latency_ms))),
                self.process_count.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn mean_latency_ms(&self, mode: Mode) -> Option<f64> {
        let (total, n) = self.rows.iter().fold((0.0, 0usize), |(t, n), r| {
            let m = match mode {
                Mode::Baseline => r.baseline,
                Mode::Pipeline => r.pipeline,
            };
            match m {
                Some(m) => (t + m.mean_latency_ms * r.n as f64, n + r.n),
                None => (t, n),
            }
        });
        (n > 0).then(|| total / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GatewayConfig;
    use llm_gateway_core::calc;
    use llm_gateway_core::corpus::generate_corpus;

    #[test]
    fn final_integer_cases() {
        assert_eq!(final_integer("The answer is 8."), Some(BigInt::from(8)));
        assert_eq!(final_integer("-12"), Some(BigInt::from(-12)));
        assert_eq!(final_integer("from 3 to 1,234 units"), Some(BigInt::from(1234)));
        assert_eq!(final_integer("none"), None);
    }

    #[test]
    fn pipeline_is_exact_on_a_small_corpus() {
        let gw = Gateway::new(GatewayConfig::default()).unwrap();
        gw.register_service(calc::descriptor("builtin://calculator")).unwrap();
        let corpus = generate_corpus(&[2, 5], 10, 7);
        let r = evaluate(&gw, &corpus, &[Mode::Baseline, Mode::Pipeline], 2).unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert_eq!(row.pipeline.unwrap().correct, 10);
            assert!(row.baseline.unwrap().correct <= 10);
        }
        let table = r.render_table();
        assert!(table.contains("LLM + Calculator Application"));
        assert!(table.contains("10/10"));
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}

//! External evaluators: one process per request, one JSON line each way.
//!
//! The request written to the child's stdin is
//! `{"checkpoint_path", "dataset_path", "split", "metric"}`; the child answers
//! with a single line `{"score", "status", "message"}` on stdout and exits 0.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{EvalError, MetricKind, Split};

const STDERR_EXCERPT: usize = 2000;
const STDERR_GRACE: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub checkpoint_path: PathBuf,
    pub dataset_path: PathBuf,
    pub split: Split,
    pub metric: MetricKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    #[serde(default)]
    pub score: Option<f64>,
    pub status: EvalStatus,
    #[serde(default)]
    pub message: String,
}

impl EvalResponse {
    pub fn ok(score: f64) -> Self {
        Self {
            score: Some(score),
            status: EvalStatus::Ok,
            message: String::new(),
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self {
            score: None,
            status: EvalStatus::Error,
            message: message.into(),
        }
    }
}

/// Command line of an evaluator process plus its per-request time limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEvaluator {
    pub command: Vec<String>,
    #[serde(with = "secs")]
    pub timeout: Duration,
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl ExternalEvaluator {
    pub fn new(command: Vec<String>, timeout: Duration) -> Self {
        Self { command, timeout }
    }

    /// Runs one request and insists on an `ok` answer.
    pub fn score(&self, req: &EvalRequest) -> Result<f64, EvalError> {
        let resp = evaluate_external(&self.command, req, self.timeout)?;
        match (resp.status, resp.score) {
            (EvalStatus::Ok, Some(s)) => Ok(s),
            (status, _) => Err(EvalError::EvaluatorStatus {
                status,
                message: resp.message,
            }),
        }
    }
}

/// Spawns `command`, sends `req`, and waits at most `timeout` for the answer
/// and the process exit. A timeout kills the child and yields a response
/// with status `timeout`.
pub fn evaluate_external(
    command: &[String],
    req: &EvalRequest,
    timeout: Duration,
) -> Result<EvalResponse, EvalError> {
    let (program, args) = command.split_first().ok_or_else(|| EvalError::Protocol {
        message: "empty evaluator command".into(),
        line: String::new(),
    })?;
    let deadline = Instant::now() + timeout;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| EvalError::Spawn {
            command: command.join(" "),
            source,
        })?;

    let mut line = serde_json::to_string(req).expect("request serializes");
    line.push('\n');
    if let Some(mut stdin) = child.stdin.take() {
        // A child that never reads its input is not a protocol violation by
        // itself; its answer decides.
        let _ = stdin.write_all(line.as_bytes());
    }

    let stdout = child.stdout.take().expect("piped");
    let (line_tx, line_rx) = mpsc::channel();
    thread::spawn(move || {
        let mut first = String::new();
        let r = BufReader::new(stdout).read_line(&mut first).map(|_| first);
        let _ = line_tx.send(r);
    });
    let stderr = child.stderr.take().expect("piped");
    let (err_tx, err_rx) = mpsc::channel();
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.take(1 << 20).read_to_end(&mut buf);
        let _ = err_tx.send(buf);
    });

    let remaining = deadline.saturating_duration_since(Instant::now());
    let first_line = match line_rx.recv_timeout(remaining) {
        Ok(Ok(l)) => l,
        Ok(Err(e)) => {
            kill(&mut child);
            return Err(EvalError::Protocol {
                message: format!("could not read evaluator output: {e}"),
                line: String::new(),
            });
        }
        Err(_) => return Ok(timed_out(&mut child, timeout)),
    };

    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if Instant::now() >= deadline => return Ok(timed_out(&mut child, timeout)),
            Ok(None) => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                kill(&mut child);
                return Err(EvalError::EvaluatorFailed {
                    status: format!("unknown ({e})"),
                    stderr: String::new(),
                });
            }
        }
    };

    if !status.success() {
        let stderr = err_rx.recv_timeout(STDERR_GRACE).unwrap_or_default();
        return Err(EvalError::EvaluatorFailed {
            status: status.to_string(),
            stderr: excerpt(&stderr),
        });
    }

    let trimmed = first_line.trim_end_matches(['\n', '\r']);
    if trimmed.is_empty() {
        return Err(EvalError::Protocol {
            message: "evaluator produced no response line".into(),
            line: String::new(),
        });
    }
    let resp: EvalResponse = serde_json::from_str(trimmed).map_err(|e| EvalError::Protocol {
        message: format!("malformed response ({e})"),
        line: trimmed.to_string(),
    })?;
    if resp.status == EvalStatus::Ok && !resp.score.is_some_and(f64::is_finite) {
        return Err(EvalError::Protocol {
            message: "status ok requires a finite score".into(),
            line: trimmed.to_string(),
        });
    }
    Ok(resp)
}

fn kill(child: &mut Child) {
    let _ = child.kill();
    let _ = child.wait();
}

fn timed_out(child: &mut Child, timeout: Duration) -> EvalResponse {
    kill(child);
    EvalResponse {
        score: None,
        status: EvalStatus::Timeout,
        message: format!(
            "no complete answer within {:.3}s; process killed",
            timeout.as_secs_f64()
        ),
    }
}

fn excerpt(bytes: &[u8]) -> String {
    let start = bytes.len().saturating_sub(STDERR_EXCERPT);
    String::from_utf8_lossy(&bytes[start..]).trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> EvalRequest {
        EvalRequest {
            checkpoint_path: "/tmp/a.ckpt".into(),
            dataset_path: "/tmp/dev.ds".into(),
            split: Split::Dev,
            metric: MetricKind::Accuracy,
        }
    }

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    #[test]
    fn request_wire_format() {
        let v: serde_json::Value = serde_json::to_value(req()).unwrap();
        assert_eq!(v["split"], "dev");
        assert_eq!(v["metric"], "accuracy");
        assert_eq!(v["checkpoint_path"], "/tmp/a.ckpt");
    }

    #[test]
    fn echo_evaluator() {
        let cmd = sh(r#"read line; echo '{"score":0.5,"status":"ok"}'"#);
        let r = evaluate_external(&cmd, &req(), Duration::from_secs(10)).unwrap();
        assert_eq!(r, EvalResponse::ok(0.5));
    }

    #[test]
    fn evaluator_sees_request() {
        let cmd = sh(
            r#"read line; case "$line" in *dev.ds*) echo '{"score":1,"status":"ok"}';; *) echo '{"score":0,"status":"ok"}';; esac"#,
        );
        let ev = ExternalEvaluator::new(cmd, Duration::from_secs(10));
        assert_eq!(ev.score(&req()).unwrap(), 1.0);
    }

    #[test]
    fn timeout_kills_process() {
        let cmd = vec!["sleep".to_string(), "30".to_string()];
        let t0 = Instant::now();
        let r = evaluate_external(&cmd, &req(), Duration::from_millis(200)).unwrap();
        assert_eq!(r.status, EvalStatus::Timeout);
        assert!(t0.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn invalid_json_is_protocol_error_with_line() {
        let cmd = sh("echo 'this is not json'");
        match evaluate_external(&cmd, &req(), Duration::from_secs(10)) {
            Err(EvalError::Protocol { line, .. }) => assert_eq!(line, "this is not json"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nonzero_exit_reports_stderr() {
        let cmd = sh("echo 'model exploded' >&2; exit 3");
        match evaluate_external(&cmd, &req(), Duration::from_secs(10)) {
            Err(EvalError::EvaluatorFailed { stderr, .. }) => {
                assert!(stderr.contains("model exploded"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ok_without_score_is_protocol_error() {
        let cmd = sh(r#"echo '{"status":"ok"}'"#);
        assert!(matches!(
            evaluate_external(&cmd, &req(), Duration::from_secs(10)),
            Err(EvalError::Protocol { .. })
        ));
    }

    #[test]
    fn error_status_surfaces_through_score() {
        let cmd = sh(r#"echo '{"status":"error","message":"no gpu"}'"#);
        let ev = ExternalEvaluator::new(cmd, Duration::from_secs(10));
        match ev.score(&req()) {
            Err(EvalError::EvaluatorStatus { status, message }) => {
                assert_eq!(status, EvalStatus::Error);
                assert_eq!(message, "no gpu");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_program() {
        let cmd = vec!["/definitely/not/here".to_string()];
        assert!(matches!(
            evaluate_external(&cmd, &req(), Duration::from_secs(1)),
            Err(EvalError::Spawn { .. })
        ));
    }
}

//! Request transcript every protocol server must answer correctly.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use crate::protocol::{Envelope, Example, Request};

pub const TRANSCRIPT_DIM: u64 = 8;

/// Prompts that stress the one-message-per-line framing.
pub fn awkward_prompts() -> Vec<String> {
    vec![
        "Sentence: line one\nline two\r\nline three\nRelation:".to_string(),
        "Sentence: Zoë flew from Zürich to 東京 ✈ — naïve café\nRelation:".to_string(),
        "tab\there, \"quotes\", back\\slash and \u{1F680} \u{0007}".to_string(),
    ]
}

pub fn transcript() -> Vec<Envelope> {
    let prompts = awkward_prompts();
    let examples: Vec<Example> = prompts
        .iter()
        .zip(["per:city_of_birth", "org:founded_by", "per:title"])
        .map(|(p, c)| Example {
            prompt: p.clone(),
            completion: c.to_string(),
        })
        .collect();
    let requests = vec![
        Request::Init {
            config: json!({ "embedding_dim": TRANSCRIPT_DIM }),
        },
        Request::Predict {
            prompts: vec!["Sentence: plain\nRelation:".into()],
        },
        Request::Predict {
            prompts: prompts.clone(),
        },
        Request::Embed {
            prompts: prompts.clone(),
        },
        Request::Train {
            examples: examples.clone(),
            epochs: 1,
            lr: 0.1,
        },
        Request::EvalLoss { examples },
        Request::Predict {
            prompts: prompts.clone(),
        },
        Request::Embed { prompts: vec![] },
        Request::Shutdown,
    ];
    requests
        .into_iter()
        .enumerate()
        .map(|(i, request)| Envelope {
            request_id: i as u64,
            request,
        })
        .collect()
}

fn finite_number(v: &Value) -> bool {
    v.as_f64().is_some_and(f64::is_finite)
}

/// Schema check of one reply against its request.
pub fn check_reply(request: &Envelope, reply: &Value, dim: u64) -> Result<(), String> {
    let fail = |why: String| {
        Err(format!(
            "request {} ({}): {why}; reply {reply}",
            request.request_id,
            request.request.op()
        ))
    };
    if reply.get("request_id").and_then(Value::as_u64) != Some(request.request_id) {
        return fail("request_id mismatch".into());
    }
    if reply.get("ok") != Some(&Value::Bool(true)) {
        return fail("not ok".into());
    }
    match &request.request {
        Request::Init { .. } => {
            if reply.get("embedding_dim").and_then(Value::as_u64) != Some(dim) {
                return fail(format!("embedding_dim is not {dim}"));
            }
            if !reply.get("embedding_source").is_some_and(Value::is_string) {
                return fail("embedding_source missing".into());
            }
        }
        Request::Train { .. } => {
            if !reply.get("final_loss").is_some_and(finite_number) {
                return fail("final_loss missing".into());
            }
        }
        Request::EvalLoss { .. } => {
            if !reply.get("loss").is_some_and(finite_number) {
                return fail("loss missing".into());
            }
        }
        Request::Predict { prompts } => {
            let ok = reply
                .get("completions")
                .and_then(Value::as_array)
                .is_some_and(|c| c.len() == prompts.len() && c.iter().all(Value::is_string));
            if !ok {
                return fail(format!("expected {} string completions", prompts.len()));
            }
        }
        Request::Embed { prompts } => {
            let ok = reply.get("vectors").and_then(Value::as_array).is_some_and(|vs| {
                vs.len() == prompts.len()
                    && vs.iter().all(|v| {
                        v.as_array()
                            .is_some_and(|xs| xs.len() as u64 == dim && xs.iter().all(finite_number))
                    })
            });
            if !ok {
                return fail(format!("expected {} vectors of length {dim}", prompts.len()));
            }
        }
        Request::Shutdown => {}
    }
    Ok(())
}

/// Play the transcript against a server process and return its raw replies.
pub fn play(argv: &[String], timeout: Duration) -> Result<Vec<Value>, String> {
    let (program, args) = argv.split_first().ok_or("empty command")?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| format!("{program}: {e}"))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let mut replies = Vec::new();
    let mut result = Ok(());
    for env in transcript() {
        if let Err(e) = writeln!(stdin, "{}", env.to_line()).and_then(|_| stdin.flush()) {
            result = Err(format!("write: {e}"));
            break;
        }
        match rx.recv_timeout(timeout) {
            Ok(Ok(line)) => match serde_json::from_str(&line) {
                Ok(v) => replies.push(v),
                Err(_) => {
                    result = Err(format!("reply is not JSON: {line}"));
                    break;
                }
            },
            Ok(Err(e)) => {
                result = Err(format!("read: {e}"));
                break;
            }
            Err(_) => {
                result = Err(format!("no reply to request {}", env.request_id));
                break;
            }
        }
    }
    drop(stdin);
    let status = child.wait().map_err(|e| e.to_string())?;
    result?;
    if !status.success() {
        return Err(format!("server exited with {status}"));
    }
    Ok(replies)
}

/// Play the transcript and check every reply.
pub fn conform(argv: &[String], timeout: Duration) -> Result<Vec<Value>, String> {
    let replies = play(argv, timeout)?;
    let requests = transcript();
    if replies.len() != requests.len() {
        return Err(format!("{} replies to {} requests", replies.len(), requests.len()));
    }
    for (req, reply) in requests.iter().zip(&replies) {
        check_reply(req, reply, TRANSCRIPT_DIM)?;
    }
    Ok(replies)
}

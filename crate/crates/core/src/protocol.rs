//! Line-delimited JSON protocol for out-of-process model backends.
//!
//! The harness writes one request object per line to the child's stdin and
//! reads exactly one response line per request from its stdout:
//!
//! ```text
//! -> {"request_id":0,"op":"init","config":{...}}
//! <- {"request_id":0,"ok":true,"embedding_dim":16,"embedding_source":"..."}
//! -> {"request_id":1,"op":"predict","prompts":["..."]}
//! <- {"request_id":1,"ok":true,"completions":["..."]}
//! ```
//!
//! Failures come back as `{"request_id":n,"ok":false,"error":"..."}`.
//! [`serve`] implements the server side with a trivial memorizing model and
//! backs the `mock-backend` subcommand.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::modeling::{Backend, BackendError, EmbeddingVector, Result};
use crate::prompting::{self, PredictionOutcome, Prompt};
use crate::rng;

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Init {
        config: Value,
    },
    Train {
        examples: Vec<Example>,
        epochs: usize,
        lr: f64,
    },
    EvalLoss {
        examples: Vec<Example>,
    },
    Predict {
        prompts: Vec<String>,
    },
    Embed {
        prompts: Vec<String>,
    },
    Shutdown,
}

impl Request {
    pub fn op(&self) -> &'static str {
        match self {
            Request::Init { .. } => "init",
            Request::Train { .. } => "train",
            Request::EvalLoss { .. } => "eval_loss",
            Request::Predict { .. } => "predict",
            Request::Embed { .. } => "embed",
            Request::Shutdown => "shutdown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub request_id: u64,
    #[serde(flatten)]
    pub request: Request,
}

impl Envelope {
    /// The single wire line (without the trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("requests always serialize")
    }
}

fn examples_of(prompts: &[Prompt]) -> Vec<Example> {
    prompts
        .iter()
        .map(|p| Example {
            prompt: p.text.clone(),
            completion: p.gold.clone(),
        })
        .collect()
}

fn texts_of(prompts: &[Prompt]) -> Vec<String> {
    prompts.iter().map(|p| p.text.clone()).collect()
}

/// A child process speaking the protocol.
pub struct ProtocolBackend {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    lines: Receiver<io::Result<String>>,
    next_id: u64,
    backend_id: String,
    embedding_dim: usize,
    embedding_source: String,
    closed: bool,
}

impl ProtocolBackend {
    /// Launch `argv` and complete the init handshake within `handshake_timeout`.
    pub fn spawn(argv: &[String], init_config: Value, handshake_timeout: Duration) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| BackendError::Spawn("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Spawn(format!("{program}: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut session = ProtocolBackend {
            child,
            stdin,
            lines: rx,
            next_id: 0,
            backend_id: format!("external:{program}"),
            embedding_dim: 0,
            embedding_source: String::new(),
            closed: false,
        };
        let reply = match session.exchange(Request::Init { config: init_config }, Some(handshake_timeout)) {
            Ok(reply) => reply,
            Err(e) => {
                session.kill();
                return Err(match e {
                    BackendError::Lost(msg) => BackendError::Spawn(msg),
                    other => other,
                });
            }
        };
        let dim = reply.get("embedding_dim").and_then(Value::as_u64).filter(|&d| d > 0);
        let Some(dim) = dim else {
            session.kill();
            return Err(BackendError::Protocol(format!(
                "init reply lacks a positive embedding_dim: {}",
                Value::Object(reply)
            )));
        };
        session.embedding_dim = dim as usize;
        session.embedding_source = reply
            .get("embedding_source")
            .and_then(Value::as_str)
            .unwrap_or("unspecified")
            .to_string();
        if let Some(id) = reply.get("backend_id").and_then(Value::as_str) {
            session.backend_id = id.to_string();
        }
        Ok(session)
    }

    /// Send one request and return the payload of its successful response.
    pub fn forward(&mut self, request: Request) -> Result<Map<String, Value>> {
        self.exchange(request, None)
    }

    fn exchange(&mut self, request: Request, timeout: Option<Duration>) -> Result<Map<String, Value>> {
        if self.closed {
            return Err(BackendError::Lost("session already shut down".into()));
        }
        let id = self.next_id;
        self.next_id += 1;
        let op = request.op();
        let line = Envelope {
            request_id: id,
            request,
        }
        .to_line();
        let sent = writeln!(self.stdin, "{line}").and_then(|_| self.stdin.flush());
        if let Err(e) = sent {
            return Err(BackendError::Lost(format!("writing {op} request: {e}")));
        }
        let received = match timeout {
            Some(t) => self.lines.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => BackendError::Spawn(format!("no {op} reply within {t:?}")),
                RecvTimeoutError::Disconnected => BackendError::Lost(format!("backend exited before answering {op}")),
            })?,
            None => self
                .lines
                .recv()
                .map_err(|_| BackendError::Lost(format!("backend exited before answering {op}")))?,
        };
        let text = received.map_err(|e| BackendError::Lost(format!("reading {op} reply: {e}")))?;
        let malformed = |why: &str| BackendError::Protocol(format!("{why} in {op} reply: {text}"));
        let mut reply = match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(map)) => map,
            _ => return Err(malformed("not a JSON object")),
        };
        match reply.get("request_id").and_then(Value::as_u64) {
            Some(got) if got == id => {}
            Some(got) => {
                return Err(BackendError::Protocol(format!(
                    "expected request_id {id}, got {got}: {text}"
                )))
            }
            None => return Err(malformed("missing request_id")),
        }
        match reply.get("ok").and_then(Value::as_bool) {
            Some(true) => {}
            Some(false) => {
                let err = reply.remove("error").and_then(|v| v.as_str().map(String::from));
                return Err(BackendError::Remote(err.unwrap_or_else(|| "unspecified error".into())));
            }
            None => return Err(malformed("missing ok flag")),
        }
        Ok(reply)
    }

    /// Ask the child to exit and reap it.
    pub fn shutdown(mut self) -> Result<()> {
        let result = self.forward(Request::Shutdown).map(|_| ());
        self.closed = true;
        self.reap();
        result
    }

    fn reap(&mut self) {
        for _ in 0..50 {
            if matches!(self.child.try_wait(), Ok(Some(_))) {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        self.kill();
    }

    fn kill(&mut self) {
        self.closed = true;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn number(reply: &Map<String, Value>, key: &str) -> Result<f64> {
        reply.get(key).and_then(Value::as_f64).ok_or_else(|| {
            BackendError::Protocol(format!("reply lacks numeric {key}: {}", Value::Object(reply.clone())))
        })
    }

    fn list<'a>(reply: &'a Map<String, Value>, key: &str, expected: usize) -> Result<&'a Vec<Value>> {
        let items = reply
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol(format!("reply lacks {key} array")))?;
        if items.len() != expected {
            return Err(BackendError::Protocol(format!(
                "{key}: expected {expected} entries, got {}",
                items.len()
            )));
        }
        Ok(items)
    }
}

impl Drop for ProtocolBackend {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.forward(Request::Shutdown);
            self.closed = true;
            self.reap();
        }
    }
}

impl Backend for ProtocolBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    fn embedding_source(&self) -> &str {
        &self.embedding_source
    }

    fn train(&mut self, prompts: &[Prompt], epochs: usize, lr: f64) -> Result<f64> {
        let reply = self.forward(Request::Train {
            examples: examples_of(prompts),
            epochs,
            lr,
        })?;
        let loss = Self::number(&reply, "final_loss")?;
        if !loss.is_finite() {
            return Err(BackendError::NonFiniteLoss { loss, lr });
        }
        Ok(loss)
    }

    fn eval_loss(&mut self, prompts: &[Prompt]) -> Result<f64> {
        let reply = self.forward(Request::EvalLoss {
            examples: examples_of(prompts),
        })?;
        Self::number(&reply, "loss")
    }

    fn predict(&mut self, prompts: &[Prompt]) -> Result<Vec<PredictionOutcome>> {
        let reply = self.forward(Request::Predict {
            prompts: texts_of(prompts),
        })?;
        Self::list(&reply, "completions", prompts.len())?
            .iter()
            .zip(prompts)
            .map(|(raw, prompt)| {
                raw.as_str()
                    .map(|raw| prompting::parse_completion(raw, &prompt.candidates))
                    .ok_or_else(|| BackendError::Protocol(format!("completion is not a string: {raw}")))
            })
            .collect()
    }

    fn embed(&mut self, prompts: &[Prompt]) -> Result<Vec<EmbeddingVector>> {
        let reply = self.forward(Request::Embed {
            prompts: texts_of(prompts),
        })?;
        let dim = self.embedding_dim;
        Self::list(&reply, "vectors", prompts.len())?
            .iter()
            .map(|v| {
                let values: Option<Vec<f64>> = v.as_array().and_then(|xs| xs.iter().map(Value::as_f64).collect());
                match values {
                    Some(values) if values.len() == dim => Ok(values),
                    _ => Err(BackendError::Protocol(format!("embedding is not {dim} numbers"))),
                }
            })
            .collect()
    }
}

/// Misbehaviours the mock server can be told to exhibit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockFault {
    /// Leave `embedding_dim` out of the init reply.
    NoEmbeddingDim,
    /// Answer every request after init with the wrong request_id.
    WrongRequestId,
    /// Exit without answering the first request after init.
    ExitAfterInit,
    /// Never answer anything.
    Silent,
}

impl std::str::FromStr for MockFault {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "no-embedding-dim" => Ok(MockFault::NoEmbeddingDim),
            "wrong-request-id" => Ok(MockFault::WrongRequestId),
            "exit-after-init" => Ok(MockFault::ExitAfterInit),
            "silent" => Ok(MockFault::Silent),
            other => Err(format!("unknown mock fault {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockOptions {
    pub fault: Option<MockFault>,
}

pub const MOCK_DEFAULT_DIM: usize = 16;

/// The mock model: completions seen in training are recalled exactly,
/// anything else is echoed back verbatim. Embeddings hash the prompt text.
#[derive(Debug, Default)]
struct MockModel {
    dim: usize,
    memorized: HashMap<String, String>,
}

impl MockModel {
    fn miss_rate(&self, examples: &[Example]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let misses = examples
            .iter()
            .filter(|e| self.memorized.get(&e.prompt) != Some(&e.completion))
            .count();
        misses as f64 / examples.len() as f64
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let base = rng::fnv1a64(text.as_bytes());
        let mut g = rng::seeded(base);
        (0..self.dim).map(|_| 2.0 * rng::unit_f64(&mut g) - 1.0).collect()
    }
}

/// Serve the protocol on `input`/`output` until shutdown or end of input.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W, options: &MockOptions) -> io::Result<()> {
    let mut model: Option<MockModel> = None;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if options.fault == Some(MockFault::Silent) {
            continue;
        }
        let (id, reply, stop) = match serde_json::from_str::<Envelope>(&line) {
            Ok(env) => {
                if model.is_some() && options.fault == Some(MockFault::ExitAfterInit) {
                    return Ok(());
                }
                let stop = env.request == Request::Shutdown;
                let id = match options.fault {
                    Some(MockFault::WrongRequestId) if model.is_some() => env.request_id + 1,
                    _ => env.request_id,
                };
                (Value::from(id), handle(&mut model, env.request, options), stop)
            }
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("request_id").cloned())
                    .unwrap_or(Value::Null);
                (id, Err(format!("bad request: {e}")), false)
            }
        };
        let mut body = match reply {
            Ok(Value::Object(map)) => map,
            Ok(_) => Map::new(),
            Err(error) => {
                let mut m = Map::new();
                m.insert("ok".into(), Value::Bool(false));
                m.insert("error".into(), Value::String(error));
                m
            }
        };
        body.insert("request_id".into(), id);
        body.entry("ok").or_insert(Value::Bool(true));
        writeln!(output, "{}", Value::Object(body))?;
        output.flush()?;
        if stop {
            break;
        }
    }
    Ok(())
}

fn handle(
    model: &mut Option<MockModel>,
    request: Request,
    options: &MockOptions,
) -> std::result::Result<Value, String> {
    if let Request::Init { config } = &request {
        let dim = match config.get("embedding_dim") {
            None => MOCK_DEFAULT_DIM,
            Some(v) => v
                .as_u64()
                .filter(|&d| d > 0)
                .ok_or("embedding_dim must be a positive integer")? as usize,
        };
        *model = Some(MockModel {
            dim,
            memorized: HashMap::new(),
        });
        let mut reply = json!({ "backend_id": "mock-echo", "embedding_source": "prompt-hash" });
        if options.fault != Some(MockFault::NoEmbeddingDim) {
            reply["embedding_dim"] = json!(dim);
        }
        return Ok(reply);
    }
    if request == Request::Shutdown {
        return Ok(json!({}));
    }
    let model = model.as_mut().ok_or("init must come first")?;
    Ok(match request {
        Request::Train { examples, .. } => {
            for e in examples.iter() {
                model.memorized.insert(e.prompt.clone(), e.completion.clone());
            }
            json!({ "final_loss": model.miss_rate(&examples) })
        }
        Request::EvalLoss { examples } => json!({ "loss": model.miss_rate(&examples) }),
        Request::Predict { prompts } => {
            let completions: Vec<&String> = prompts.iter().map(|p| model.memorized.get(p).unwrap_or(p)).collect();
            json!({ "completions": completions })
        }
        Request::Embed { prompts } => {
            let vectors: Vec<Vec<f64>> = prompts.iter().map(|p| model.embed(p)).collect();
            json!({ "vectors": vectors })
        }
        Request::Init { .. } | Request::Shutdown => unreachable!(),
    })
}

//! The HTTP classify protocol: a retrying client oracle and a small server.
//!
//! `POST /classify` with `{"image": "<base64 PNG>", "top_k": n}` answers
//! `{"labels": [{"name": "...", "prob": p}, ...]}` in descending order.
//! `top_k` may be omitted, in which case the server's own limit applies.
//! Label names are class names when the server has them, and decimal class
//! indices otherwise.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::Engine;
use base64::engine::general_purpose::STANDARD as B64;
use serde::{Deserialize, Serialize};

use crate::blackbox::{rank, LabelProb, OracleError, QueryOracle};
use crate::raster::Image8;
use crate::zoo::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireLabel {
    pub name: String,
    pub prob: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub labels: Vec<WireLabel>,
}

#[derive(Debug, Clone)]
pub struct HttpOracleConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub url: String,
    pub top_k: Option<usize>,
    /// Extra attempts after a transport failure.
    pub retries: u32,
    /// Delay before the first retry; doubles after each.
    pub backoff: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
    /// Maps returned names to class indices; names must be indices without it.
    pub class_names: Option<Vec<String>>,
}

impl HttpOracleConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            top_k: None,
            retries: 3,
            backoff: Duration::from_millis(50),
            timeout: Duration::from_secs(30),
            max_in_flight: 4,
            class_names: None,
        }
    }
}

/// Counting semaphore.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpOracle {
    agent: ureq::Agent,
    endpoint: String,
    cfg: HttpOracleConfig,
    gate: Gate,
}

impl std::fmt::Debug for HttpOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpOracle").field("endpoint", &self.endpoint).finish()
    }
}

impl HttpOracle {
    pub fn new(cfg: HttpOracleConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        let endpoint = format!("{}/classify", cfg.url.trim_end_matches('/'));
        let gate = Gate::new(cfg.max_in_flight);
        Self { agent, endpoint, cfg, gate }
    }

    fn attempt(&self, body: &str) -> Result<String, OracleError> {
        let _slot = self.gate.enter();
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(|e| OracleError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(OracleError::Transport(format!("HTTP {status}: {}", text.trim())));
        }
        Ok(text)
    }

    fn label_index(&self, name: &str) -> Result<usize, OracleError> {
        match &self.cfg.class_names {
            Some(names) => names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| OracleError::Protocol(format!("unknown label name '{name}'"))),
            None => name.parse().map_err(|_| OracleError::Protocol(format!("label '{name}' is not a class index"))),
        }
    }
}

impl QueryOracle for HttpOracle {
    fn classify(&self, image: &Image8) -> Result<Vec<LabelProb>, OracleError> {
        let png = image.encode_png().map_err(|e| OracleError::Protocol(e.to_string()))?;
        let body = serde_json::to_string(&ClassifyRequest { image: B64.encode(png), top_k: self.cfg.top_k })
            .expect("request serializes");
        let mut delay = self.cfg.backoff;
        let mut attempt = 0;
        let text = loop {
            match self.attempt(&body) {
                Ok(t) => break t,
                Err(OracleError::Transport(msg)) if attempt < self.cfg.retries => {
                    log::warn!("classify attempt {} failed: {msg}; retrying in {delay:?}", attempt + 1);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let resp: ClassifyResponse =
            serde_json::from_str(&text).map_err(|e| OracleError::Protocol(format!("bad response JSON: {e}")))?;
        if resp.labels.is_empty() {
            return Err(OracleError::Protocol("empty label list".into()));
        }
        resp.labels
            .iter()
            .map(|l| {
                if !(0.0..=1.0).contains(&l.prob) {
                    return Err(OracleError::Protocol(format!("probability {} out of range", l.prob)));
                }
                Ok(LabelProb { label: self.label_index(&l.name)?, prob: l.prob })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    /// `host:port`; port 0 picks a free one.
    pub addr: String,
    /// Upper bound on labels returned, whatever the request asks for.
    pub top_k: Option<usize>,
    pub workers: usize,
    pub class_names: Option<Vec<String>>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into(), top_k: None, workers: 4, class_names: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {msg}")]
    Bind { addr: String, msg: String },
}

/// Running classify server; stops when [`OracleServer::shutdown`] is called
/// or the value is dropped.
pub struct OracleServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl OracleServer {
    pub fn start(model: Model, cfg: ServeConfig) -> Result<Self, ServeError> {
        let server = tiny_http::Server::http(&cfg.addr)
            .map_err(|e| ServeError::Bind { addr: cfg.addr.clone(), msg: e.to_string() })?;
        let addr = server.server_addr().to_ip().expect("TCP listener");
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let shared = Arc::new((model, cfg.clone()));
        let workers = (0..cfg.workers.max(1))
            .map(|_| {
                let (server, stop, shared) = (server.clone(), stop.clone(), shared.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        match server.recv_timeout(Duration::from_millis(50)) {
                            Ok(Some(req)) => handle(req, &shared.0, &shared.1),
                            Ok(None) => {}
                            Err(e) => log::warn!("accept failed: {e}"),
                        }
                    }
                })
            })
            .collect();
        Ok(Self { addr, stop, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the workers exit, which only happens after a shutdown.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::Relaxed);
        self.join();
    }
}

impl Drop for OracleServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn handle(mut req: tiny_http::Request, model: &Model, cfg: &ServeConfig) {
    let (status, body) = if req.url() != "/classify" {
        (404, r#"{"error":"not found"}"#.to_string())
    } else if *req.method() != tiny_http::Method::Post {
        (405, r#"{"error":"use POST"}"#.to_string())
    } else {
        let mut text = String::new();
        match req.as_reader().read_to_string(&mut text) {
            Ok(_) => match answer(&text, model, cfg) {
                Ok(r) => (200, serde_json::to_string(&r).expect("response serializes")),
                Err(msg) => (400, serde_json::json!({ "error": msg }).to_string()),
            },
            Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
        }
    };
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
    let resp = tiny_http::Response::from_string(body).with_status_code(status).with_header(header);
    if let Err(e) = req.respond(resp) {
        log::warn!("failed to send response: {e}");
    }
}

fn answer(text: &str, model: &Model, cfg: &ServeConfig) -> Result<ClassifyResponse, String> {
    let req: ClassifyRequest = serde_json::from_str(text).map_err(|e| format!("bad request JSON: {e}"))?;
    let png = B64.decode(req.image.as_bytes()).map_err(|e| format!("bad base64: {e}"))?;
    let image = Image8::decode_png(&png).map_err(|e| e.to_string())?;
    let probs = model.predict(&image.to_tensor()).map_err(|e| e.to_string())?;
    let k = match (req.top_k, cfg.top_k) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let labels = rank(&probs, k)
        .into_iter()
        .map(|lp| WireLabel {
            name: cfg
                .class_names
                .as_ref()
                .and_then(|n| n.get(lp.label).cloned())
                .unwrap_or_else(|| lp.label.to_string()),
            prob: lp.prob,
        })
        .collect();
    Ok(ClassifyResponse { labels })
}

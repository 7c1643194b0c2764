//! Bundled mock judge server.
//!
//! Serves the judge wire protocol on a local port by delegating to the
//! programmatic judge, so the remote client can be exercised end to end
//! without any external service.

use super::programmatic::{judge_programmatic, JudgeConfig};
use super::remote::{JudgeRequest, JudgeResponse};
use super::RewardError;
use crate::backbone::Instruction;
use crate::rasters::png_from_bytes;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

/// Judge endpoint served from a background thread; drops cleanly.
pub struct MockJudgeServer {
    url: String,
    shutdown: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl MockJudgeServer {
    /// Bind `addr` (e.g. `127.0.0.1:0` for an ephemeral port) and serve
    /// until dropped.
    pub fn start(addr: &str, config: JudgeConfig) -> Result<Self, RewardError> {
        let server = tiny_http::Server::http(addr)
            .map_err(|e| RewardError::Io(std::io::Error::other(e.to_string())))?;
        let url = format!("http://{}", server.server_addr());
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let handle = std::thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(request)) => handle_request(request, &config),
                    Ok(None) => continue,
                    Err(_) => break,
                }
            }
        });
        Ok(Self {
            url,
            shutdown,
            handle: Some(handle),
        })
    }

    /// Base URL (`http://host:port`) to point a [`super::RemoteJudge`] at.
    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Drop for MockJudgeServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_request(mut request: tiny_http::Request, config: &JudgeConfig) {
    let respond = |request: tiny_http::Request, status: u16, body: String| {
        let response = tiny_http::Response::from_string(body)
            .with_status_code(status)
            .with_header(
                tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                    .expect("static header"),
            );
        let _ = request.respond(response);
    };

    if request.method() != &tiny_http::Method::Post || request.url() != "/v1/judge" {
        respond(request, 404, r#"{"error": "POST /v1/judge only"}"#.to_string());
        return;
    }
    let mut body = String::new();
    if std::io::Read::read_to_string(request.as_reader(), &mut body).is_err() {
        respond(request, 400, r#"{"error": "unreadable body"}"#.to_string());
        return;
    }
    match score(&body, config) {
        Ok(response) => {
            let body = serde_json::to_string(&response).expect("response serializes");
            respond(request, 200, body);
        }
        Err(err) => respond(request, 400, format!(r#"{{"error": {:?}}}"#, err.to_string())),
    }
}

fn score(body: &str, config: &JudgeConfig) -> Result<JudgeResponse, RewardError> {
    let request: JudgeRequest = serde_json::from_str(body)?;
    let instruction = Instruction::parse(&request.instruction)?;
    let references = request
        .references
        .iter()
        .map(|b64| {
            let bytes = BASE64
                .decode(b64)
                .map_err(|e| RewardError::MalformedResponse {
                    reason: format!("reference base64: {e}"),
                    body: String::new(),
                })?;
            Ok(png_from_bytes(&bytes)?)
        })
        .collect::<Result<Vec<_>, RewardError>>()?;
    let candidate_bytes = BASE64
        .decode(&request.candidate)
        .map_err(|e| RewardError::MalformedResponse {
            reason: format!("candidate base64: {e}"),
            body: String::new(),
        })?;
    let candidate = png_from_bytes(&candidate_bytes)?;
    let breakdown = judge_programmatic(&references, &instruction, &candidate, config)?;
    Ok(JudgeResponse {
        integration: breakdown.integration,
        consistency: breakdown.consistency,
        quality: breakdown.quality,
        rationale: Some(format!(
            "programmatic rubric {} via mock endpoint",
            request.rubric_version
        )),
    })
}

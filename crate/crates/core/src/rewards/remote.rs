//! Wire client for a remote judge endpoint.
//!
//! Protocol: `POST {endpoint}/v1/judge` with a JSON body carrying the
//! instruction text, base64-PNG references and candidate, and the rubric
//! version; the response carries the three scores plus a rationale.
//! Transport failures and 5xx responses are retried with exponential
//! backoff; malformed responses are rejected, never coerced.

use super::{Judge, JudgeKind, RewardBreakdown, RewardError, RewardWeights};
use crate::backbone::Instruction;
use crate::rasters::{png_bytes, RasterImage};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

/// Exponential backoff policy: waits `base * factor^(attempt-1)` between
/// attempts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(with = "duration_millis")]
    pub base: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

mod duration_millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Request body of `POST /v1/judge`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub instruction: String,
    /// Base64-encoded PNG per reference.
    pub references: Vec<String>,
    /// Base64-encoded PNG of the candidate.
    pub candidate: String,
    pub rubric_version: String,
}

impl JudgeRequest {
    pub fn build(
        references: &[RasterImage],
        instruction: &Instruction,
        candidate: &RasterImage,
        rubric_version: &str,
    ) -> Result<Self, RewardError> {
        Ok(Self {
            instruction: instruction.text(),
            references: references
                .iter()
                .map(|r| Ok(BASE64.encode(png_bytes(r)?)))
                .collect::<Result<_, RewardError>>()?,
            candidate: BASE64.encode(png_bytes(candidate)?),
            rubric_version: rubric_version.to_string(),
        })
    }
}

/// Response body of `POST /v1/judge`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub integration: f64,
    pub consistency: f64,
    pub quality: f64,
    #[serde(default)]
    pub rationale: Option<String>,
}

/// Outcome of one judged request, including how many attempts it took.
#[derive(Debug, Clone)]
pub struct JudgeVerdict {
    pub breakdown: RewardBreakdown,
    pub attempts: u32,
}

/// Bounded in-flight counter so concurrent rollouts cannot flood the
/// endpoint.
struct InFlightGate {
    state: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl InFlightGate {
    fn new(cap: usize) -> Self {
        Self {
            state: Mutex::new(0),
            freed: Condvar::new(),
            cap: cap.max(1),
        }
    }

    fn acquire(&self) {
        let mut active = self.state.lock().expect("gate poisoned");
        while *active >= self.cap {
            active = self.freed.wait(active).expect("gate poisoned");
        }
        *active += 1;
    }

    fn release(&self) {
        let mut active = self.state.lock().expect("gate poisoned");
        *active -= 1;
        self.freed.notify_one();
    }
}

/// Client for the judge wire protocol.
pub struct RemoteJudge {
    endpoint: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    weights: RewardWeights,
    rubric_version: String,
    agent: ureq::Agent,
    gate: InFlightGate,
}

impl RemoteJudge {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        policy: RetryPolicy,
        weights: RewardWeights,
        rubric_version: impl Into<String>,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build();
        Self {
            endpoint: endpoint.into(),
            api_key,
            policy,
            weights,
            rubric_version: rubric_version.into(),
            agent: ureq::Agent::new_with_config(config),
            gate: InFlightGate::new(4),
        }
    }

    /// Endpoint from `JUDGE_URL`, bearer token from `JUDGE_API_KEY`.
    pub fn from_env(weights: RewardWeights, rubric_version: &str) -> Result<Self, RewardError> {
        let endpoint = std::env::var("JUDGE_URL").map_err(|_| RewardError::JudgeUnavailable {
            attempts: 0,
            last_error: "JUDGE_URL is not set".to_string(),
        })?;
        let api_key = std::env::var("JUDGE_API_KEY").ok();
        Ok(Self::new(
            endpoint,
            api_key,
            RetryPolicy::default(),
            weights,
            rubric_version,
        ))
    }

    /// Cap on concurrently in-flight requests (default 4).
    pub fn with_in_flight_cap(mut self, cap: usize) -> Self {
        self.gate = InFlightGate::new(cap);
        self
    }

    fn url(&self) -> String {
        format!("{}/v1/judge", self.endpoint.trim_end_matches('/'))
    }

    /// POST one request, retrying transport failures and 5xx responses with
    /// exponential backoff. Returns the validated breakdown and the number
    /// of attempts used.
    pub fn judge_request(&self, request: &JudgeRequest) -> Result<JudgeVerdict, RewardError> {
        self.gate.acquire();
        let result = self.judge_request_inner(request);
        self.gate.release();
        result
    }

    fn judge_request_inner(&self, request: &JudgeRequest) -> Result<JudgeVerdict, RewardError> {
        let mut last_error = String::new();
        for attempt in 1..=self.policy.max_attempts {
            if attempt > 1 {
                let backoff = self
                    .policy
                    .base
                    .mul_f64(self.policy.factor.powi(attempt as i32 - 2));
                std::thread::sleep(backoff);
            }
            let mut builder = self.agent.post(self.url());
            if let Some(key) = &self.api_key {
                builder = builder.header("authorization", format!("Bearer {key}"));
            }
            match builder.send_json(request) {
                Err(transport) => {
                    last_error = transport.to_string();
                    continue;
                }
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if (500..600).contains(&status) {
                        last_error = format!("status {status}");
                        continue;
                    }
                    let body = response
                        .body_mut()
                        .read_to_string()
                        .unwrap_or_else(|e| format!("<unreadable body: {e}>"));
                    if status != 200 {
                        return Err(RewardError::Protocol { status, body });
                    }
                    let parsed: JudgeResponse = serde_json::from_str(&body).map_err(|e| {
                        RewardError::MalformedResponse {
                            reason: e.to_string(),
                            body: body.clone(),
                        }
                    })?;
                    let breakdown = RewardBreakdown::new(
                        parsed.integration,
                        parsed.consistency,
                        parsed.quality,
                        parsed.rationale,
                        &self.weights,
                    )
                    .map_err(|e| RewardError::MalformedResponse {
                        reason: e.to_string(),
                        body,
                    })?;
                    return Ok(JudgeVerdict {
                        breakdown,
                        attempts: attempt,
                    });
                }
            }
        }
        Err(RewardError::JudgeUnavailable {
            attempts: self.policy.max_attempts,
            last_error,
        })
    }
}

impl Judge for RemoteJudge {
    fn judge(
        &self,
        references: &[RasterImage],
        instruction: &Instruction,
        candidate: &RasterImage,
    ) -> Result<RewardBreakdown, RewardError> {
        let request =
            JudgeRequest::build(references, instruction, candidate, &self.rubric_version)?;
        Ok(self.judge_request(&request)?.breakdown)
    }

    fn kind(&self) -> JudgeKind {
        JudgeKind::Remote
    }
}

//! The host-side bridge: wire framing, transports, and the servers that put
//! the guest agent and the attestation services behind them.
//!
//! Frames are a 4-byte big-endian length prefix followed by a UTF-8 JSON
//! body, capped at 1 MiB. Any byte stream sent at an endpoint yields either
//! a well-formed response or a framing-error response; the guest never
//! crashes on input. There is deliberately no transport security here: the
//! design's guarantees must hold with the host owning the wire.

pub mod fuzz;
pub mod gen;
pub mod scenario;

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agent::{safety_oracle, UvmState};
use crate::attestation::{
    AttestationReport, AttestationService, AttestationToken, Certificate, CertificateChain,
    KeyManagementService, KeyReleasePolicy, Measurement, ReportData, VerifyExpectations,
};
use crate::engine::EnforcementRequest;

/// Maximum frame body length.
pub const MAX_FRAME_LEN: usize = 1 << 20;

/// Harness-only diagnostic action: returns the safety oracle's verdict over
/// the current guest state. Served by the bridge layer, never an
/// enforcement point, and it leaves the guest untouched.
pub const PROBE_SAFETY_ACTION: &str = "probe_safety";

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    Oversize(usize),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>, FrameError> {
    let mut len_buf = [0u8; 4];
    if let Err(e) = r.read_exact(&mut len_buf) {
        return Err(if e.kind() == io::ErrorKind::UnexpectedEof {
            FrameError::Closed
        } else {
            FrameError::Io(e)
        });
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > MAX_FRAME_LEN {
        return Err(FrameError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Request,
    Response,
}

/// One framed message. Responses echo the request's `seq`; request `seq`s
/// must strictly increase per connection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeMessage {
    pub seq: u64,
    pub kind: MessageKind,
    pub action: String,
    #[serde(default)]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deny_reason: Option<String>,
}

impl BridgeMessage {
    pub fn request(seq: u64, action: impl Into<String>, payload: Value) -> Self {
        Self {
            seq,
            kind: MessageKind::Request,
            action: action.into(),
            payload,
            allowed: None,
            deny_reason: None,
        }
    }

    fn response(seq: u64, action: impl Into<String>, reply: ServiceResponse) -> Self {
        Self {
            seq,
            kind: MessageKind::Response,
            action: action.into(),
            payload: reply.payload,
            allowed: Some(reply.allowed),
            deny_reason: reply.deny_reason,
        }
    }

    fn framing_error(seq: u64, code: &str) -> Self {
        Self {
            seq,
            kind: MessageKind::Response,
            action: "error".into(),
            payload: json!({ "error": code }),
            allowed: Some(false),
            deny_reason: Some("framing_error".into()),
        }
    }
}

/// What a service says about one dispatched action.
#[derive(Clone, Debug)]
pub struct ServiceResponse {
    pub allowed: bool,
    pub deny_reason: Option<String>,
    pub payload: Value,
}

impl ServiceResponse {
    pub fn allow(payload: Value) -> Self {
        Self {
            allowed: true,
            deny_reason: None,
            payload,
        }
    }

    pub fn deny(reason: impl Into<String>, payload: Value) -> Self {
        Self {
            allowed: false,
            deny_reason: Some(reason.into()),
            payload,
        }
    }
}

/// Anything servable behind the framing layer.
pub trait BridgeService: Send + Sync {
    fn dispatch(&self, action: &str, payload: &Value) -> ServiceResponse;
}

/// Per-connection protocol state.
#[derive(Debug, Default)]
pub struct ConnSeq {
    last: Option<u64>,
}

/// Framing plus sequencing around a service.
pub struct FramedEndpoint<S> {
    service: S,
}

impl<S: BridgeService> FramedEndpoint<S> {
    pub fn new(service: S) -> Self {
        Self { service }
    }

    pub fn service(&self) -> &S {
        &self.service
    }

    /// Turn one raw frame body into one response body. Total: malformed
    /// input maps to a framing-error response.
    pub fn process_frame(&self, conn: &mut ConnSeq, raw: &[u8]) -> Vec<u8> {
        let response = self.process_message(conn, raw);
        serde_json::to_vec(&response).expect("response serialization")
    }

    fn process_message(&self, conn: &mut ConnSeq, raw: &[u8]) -> BridgeMessage {
        let Ok(value) = serde_json::from_slice::<Value>(raw) else {
            return BridgeMessage::framing_error(0, "invalid_json");
        };
        let seq_hint = value.get("seq").and_then(Value::as_u64).unwrap_or(0);
        let Ok(message) = serde_json::from_value::<BridgeMessage>(value) else {
            return BridgeMessage::framing_error(seq_hint, "invalid_message");
        };
        if message.kind != MessageKind::Request {
            return BridgeMessage::framing_error(message.seq, "not_a_request");
        }
        if let Some(last) = conn.last {
            if message.seq <= last {
                return BridgeMessage::framing_error(message.seq, "non_monotonic_seq");
            }
        }
        conn.last = Some(message.seq);
        let reply = self.service.dispatch(&message.action, &message.payload);
        BridgeMessage::response(message.seq, message.action, reply)
    }
}

/// The guest agent behind the bridge. All requests serialize on one lock,
/// giving the documented global arrival order.
pub struct GuestService {
    state: Mutex<UvmState>,
}

impl GuestService {
    pub fn new(state: UvmState) -> Self {
        Self {
            state: Mutex::new(state),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, UvmState> {
        self.state
            .lock()
            .unwrap_or_else(std::sync::PoisonError::into_inner)
    }

    /// Inspect the guest (harness and test use).
    pub fn with_state<R>(&self, f: impl FnOnce(&UvmState) -> R) -> R {
        f(&self.lock())
    }

    /// Mutate the guest out of band (harness use: attaching bus devices).
    pub fn with_state_mut<R>(&self, f: impl FnOnce(&mut UvmState) -> R) -> R {
        f(&mut self.lock())
    }
}

impl BridgeService for GuestService {
    fn dispatch(&self, action: &str, payload: &Value) -> ServiceResponse {
        if action == PROBE_SAFETY_ACTION {
            let safe = self.with_state(safety_oracle);
            return ServiceResponse::allow(json!({ "safe": safe }));
        }
        let request = match EnforcementRequest::from_wire(action, payload) {
            Ok(request) => request,
            Err(_) => return ServiceResponse::deny("malformed", json!({})),
        };
        let mut state = self.lock();
        match state.handle_request(&request) {
            Ok(response) => ServiceResponse {
                allowed: response.allowed,
                deny_reason: response.deny_reason,
                payload: response.payload,
            },
            Err(fault) => {
                ServiceResponse::deny("internal_fault", json!({ "fault": fault.to_string() }))
            }
        }
    }
}

#[derive(Deserialize)]
struct VerifyPayload {
    report: String,
    chain: ChainPayload,
    expected: ExpectedPayload,
}

#[derive(Deserialize)]
struct ChainPayload {
    root: String,
    vcek: String,
}

#[derive(Deserialize)]
struct ExpectedPayload {
    measurements: Vec<Measurement>,
    policy_digest: String,
    report_data: ReportData,
}

#[derive(Deserialize)]
struct RegisterKeyPayload {
    key_id: String,
    secret: String,
    policy: KeyReleasePolicy,
}

#[derive(Deserialize)]
struct ReleaseKeyPayload {
    key_id: String,
    token: AttestationToken,
    wrapping_public_key: String,
}

/// Attestation verifier and key-release service behind the same framing as
/// the guest: actions `verify`, `register_key`, `release_key`.
pub struct AttestationBridge {
    verifier: AttestationService,
    vendor_root_public_key: [u8; 32],
    kms: Mutex<KeyManagementService>,
    rng: Mutex<ChaCha8Rng>,
}

impl AttestationBridge {
    pub fn new(
        verifier: AttestationService,
        vendor_root_public_key: [u8; 32],
        kms: KeyManagementService,
        seed: u64,
    ) -> Self {
        Self {
            verifier,
            vendor_root_public_key,
            kms: Mutex::new(kms),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn handle_verify(&self, payload: &Value) -> ServiceResponse {
        let Ok(request) = serde_json::from_value::<VerifyPayload>(payload.clone()) else {
            return ServiceResponse::deny("malformed", json!({}));
        };
        let parsed = (|| -> Result<_, String> {
            let report_bytes = hex::decode(&request.report).map_err(|e| e.to_string())?;
            let report = AttestationReport::from_bytes(&report_bytes)?;
            let root_bytes = hex::decode(&request.chain.root).map_err(|e| e.to_string())?;
            let vcek_bytes = hex::decode(&request.chain.vcek).map_err(|e| e.to_string())?;
            let chain = CertificateChain {
                root: Certificate::from_bytes(&root_bytes)?,
                vcek: Certificate::from_bytes(&vcek_bytes)?,
            };
            let digest_bytes =
                hex::decode(&request.expected.policy_digest).map_err(|e| e.to_string())?;
            let policy_digest: [u8; 64] = digest_bytes
                .try_into()
                .map_err(|_| "policy digest must be 64 bytes".to_string())?;
            Ok((report, chain, policy_digest))
        })();
        let Ok((report, chain, policy_digest)) = parsed else {
            return ServiceResponse::deny("malformed", json!({}));
        };
        let expected = VerifyExpectations {
            allowed_measurements: request.expected.measurements.into_iter().collect(),
            policy_digest,
            report_data: request.expected.report_data,
        };
        match self
            .verifier
            .verify_report(&report, &chain, &self.vendor_root_public_key, &expected)
        {
            Ok(token) => ServiceResponse::allow(json!({ "token": token })),
            Err(rejection) => ServiceResponse::deny(rejection.as_str(), json!({})),
        }
    }

    fn handle_register(&self, payload: &Value) -> ServiceResponse {
        let Ok(request) = serde_json::from_value::<RegisterKeyPayload>(payload.clone()) else {
            return ServiceResponse::deny("malformed", json!({}));
        };
        let Ok(secret) = hex::decode(&request.secret) else {
            return ServiceResponse::deny("malformed", json!({}));
        };
        let mut kms = self
            .kms
            .lock()
            .unwrap_or_else(std::sync::PoisonError::into_inner);
        match kms.register_key(request.key_id.clone(), secret, request.policy) {
            Ok(()) => ServiceResponse::allow(json!({ "key_id": request.key_id })),
            Err(e) => ServiceResponse::deny(
                match e {
                    crate::attestation::RegisterError::DuplicateKeyId => "duplicate_key_id",
                    crate::attestation::RegisterError::EmptyMeasurements => "empty_measurements",
                },
                json!({}),
            ),
        }
    }

    fn handle_release(&self, payload: &Value) -> ServiceResponse {
        let Ok(request) = serde_json::from_value::<ReleaseKeyPayload>(payload.clone()) else {
            return ServiceResponse::deny("malformed", json!({}));
        };
        let Ok(wrap_pk_bytes) = hex::decode(&request.wrapping_public_key) else {
            return ServiceResponse::deny("malformed", json!({}));
        };
        let Ok(wrapping_public_key) = <[u8; 32]>::try_from(wrap_pk_bytes.as_slice()) else {
            return ServiceResponse::deny("malformed", json!({}));
        };
        let kms = self
            .kms
            .lock()
            .unwrap_or_else(std::sync::PoisonError::into_inner);
        let mut rng = self
            .rng
            .lock()
            .unwrap_or_else(std::sync::PoisonError::into_inner);
        match kms.release_key(
            &request.key_id,
            &request.token,
            &wrapping_public_key,
            &mut *rng,
        ) {
            Ok(wrapped) => ServiceResponse::allow(json!({ "wrapped_key": wrapped })),
            Err(denial) => ServiceResponse::deny(
                match denial {
                    crate::attestation::ReleaseDenial::UnknownKeyId => "unknown_key_id",
                    crate::attestation::ReleaseDenial::InvalidToken => "invalid_token",
                    crate::attestation::ReleaseDenial::PolicyMismatch => "policy_mismatch",
                    crate::attestation::ReleaseDenial::WrappingKeyMismatch => {
                        "wrapping_key_mismatch"
                    }
                },
                json!({}),
            ),
        }
    }
}

impl BridgeService for AttestationBridge {
    fn dispatch(&self, action: &str, payload: &Value) -> ServiceResponse {
        match action {
            "verify" => self.handle_verify(payload),
            "register_key" => self.handle_register(payload),
            "release_key" => self.handle_release(payload),
            _ => ServiceResponse::deny("unknown_action", json!({})),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("unintelligible response: {0}")]
    BadResponse(String),
}

/// A way to exchange one frame body for another.
pub trait Transport {
    fn roundtrip_raw(&mut self, frame_body: &[u8]) -> Result<Vec<u8>, TransportError>;
}

/// Loopback transport driving an endpoint directly.
pub struct InProcessTransport<S> {
    endpoint: Arc<FramedEndpoint<S>>,
    conn: ConnSeq,
}

impl<S: BridgeService> InProcessTransport<S> {
    pub fn new(endpoint: Arc<FramedEndpoint<S>>) -> Self {
        Self {
            endpoint,
            conn: ConnSeq::default(),
        }
    }

    pub fn endpoint(&self) -> &Arc<FramedEndpoint<S>> {
        &self.endpoint
    }
}

impl<S: BridgeService> Transport for InProcessTransport<S> {
    fn roundtrip_raw(&mut self, frame_body: &[u8]) -> Result<Vec<u8>, TransportError> {
        if frame_body.len() > MAX_FRAME_LEN {
            let err = BridgeMessage::framing_error(0, "oversize_frame");
            return Ok(serde_json::to_vec(&err).expect("response serialization"));
        }
        Ok(self.endpoint.process_frame(&mut self.conn, frame_body))
    }
}

/// TCP transport for a remote endpoint.
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: &str) -> Result<Self, TransportError> {
        Ok(Self {
            stream: TcpStream::connect(addr)?,
        })
    }
}

impl Transport for TcpTransport {
    fn roundtrip_raw(&mut self, frame_body: &[u8]) -> Result<Vec<u8>, TransportError> {
        write_frame(&mut self.stream, frame_body)?;
        Ok(read_frame(&mut self.stream)?)
    }
}

/// Request/response client with sequence numbering.
pub struct Client<T> {
    transport: T,
    seq: u64,
}

impl<T: Transport> Client<T> {
    pub fn new(transport: T) -> Self {
        Self { transport, seq: 0 }
    }

    pub fn transport(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn send(&mut self, action: &str, payload: Value) -> Result<BridgeMessage, TransportError> {
        self.seq += 1;
        let message = BridgeMessage::request(self.seq, action, payload);
        let body = serde_json::to_vec(&message).expect("request serialization");
        self.exchange(body)
    }

    /// Send a request whose encoded body has one byte XOR-flipped: the
    /// network-tampering adversary.
    pub fn send_tampered(
        &mut self,
        action: &str,
        payload: Value,
        byte_offset: usize,
    ) -> Result<BridgeMessage, TransportError> {
        self.seq += 1;
        let message = BridgeMessage::request(self.seq, action, payload);
        let mut body = serde_json::to_vec(&message).expect("request serialization");
        let index = byte_offset % body.len();
        body[index] ^= 0xFF;
        self.exchange(body)
    }

    fn exchange(&mut self, body: Vec<u8>) -> Result<BridgeMessage, TransportError> {
        let response_body = self.transport.roundtrip_raw(&body)?;
        serde_json::from_slice(&response_body)
            .map_err(|e| TransportError::BadResponse(e.to_string()))
    }
}

/// Serve an endpoint over TCP: one thread per connection, frames answered
/// in arrival order.
pub fn serve<S: BridgeService + 'static>(
    listener: TcpListener,
    endpoint: Arc<FramedEndpoint<S>>,
) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let endpoint = Arc::clone(&endpoint);
            std::thread::spawn(move || handle_connection(stream, endpoint));
        }
    })
}

fn handle_connection<S: BridgeService>(mut stream: TcpStream, endpoint: Arc<FramedEndpoint<S>>) {
    let mut conn = ConnSeq::default();
    loop {
        match read_frame(&mut stream) {
            Ok(body) => {
                let response = endpoint.process_frame(&mut conn, &body);
                if write_frame(&mut stream, &response).is_err() {
                    return;
                }
            }
            Err(FrameError::Oversize(_)) => {
                // the stream is desynchronized past this point: answer once,
                // then close
                let err = BridgeMessage::framing_error(0, "oversize_frame");
                let body = serde_json::to_vec(&err).expect("response serialization");
                let _ = write_frame(&mut stream, &body);
                return;
            }
            Err(_) => return,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ExecutionPolicy;

    fn guest_endpoint() -> Arc<FramedEndpoint<GuestService>> {
        let state = UvmState::from_policy(ExecutionPolicy::empty(), 0);
        Arc::new(FramedEndpoint::new(GuestService::new(state)))
    }

    fn decode(body: &[u8]) -> BridgeMessage {
        serde_json::from_slice(body).expect("well-formed response")
    }

    #[test]
    fn request_gets_response_with_echoed_seq() {
        let endpoint = guest_endpoint();
        let mut conn = ConnSeq::default();
        let request = BridgeMessage::request(41, "get_properties", json!({}));
        let body = serde_json::to_vec(&request).unwrap();
        let response = decode(&endpoint.process_frame(&mut conn, &body));
        assert_eq!(response.seq, 41);
        assert_eq!(response.kind, MessageKind::Response);
        assert_eq!(response.allowed, Some(false));
        assert_eq!(response.deny_reason.as_deref(), Some("flag_disabled"));
    }

    #[test]
    fn garbage_yields_framing_error() {
        let endpoint = guest_endpoint();
        let mut conn = ConnSeq::default();
        let response = decode(&endpoint.process_frame(&mut conn, b"\xff\xfenot json"));
        assert_eq!(response.action, "error");
        assert_eq!(response.deny_reason.as_deref(), Some("framing_error"));
        assert_eq!(response.payload["error"], "invalid_json");
    }

    #[test]
    fn non_monotonic_seq_is_rejected() {
        let endpoint = guest_endpoint();
        let mut conn = ConnSeq::default();
        let first = BridgeMessage::request(5, "get_properties", json!({}));
        endpoint.process_frame(&mut conn, &serde_json::to_vec(&first).unwrap());
        let replayed = BridgeMessage::request(5, "get_properties", json!({}));
        let response =
            decode(&endpoint.process_frame(&mut conn, &serde_json::to_vec(&replayed).unwrap()));
        assert_eq!(response.payload["error"], "non_monotonic_seq");
    }

    #[test]
    fn response_kind_is_not_a_request() {
        let endpoint = guest_endpoint();
        let mut conn = ConnSeq::default();
        let mut message = BridgeMessage::request(1, "get_properties", json!({}));
        message.kind = MessageKind::Response;
        let response =
            decode(&endpoint.process_frame(&mut conn, &serde_json::to_vec(&message).unwrap()));
        assert_eq!(response.payload["error"], "not_a_request");
    }

    #[test]
    fn unknown_action_is_malformed_not_fatal() {
        let endpoint = guest_endpoint();
        let mut conn = ConnSeq::default();
        let request = BridgeMessage::request(1, "install_rootkit", json!({}));
        let response =
            decode(&endpoint.process_frame(&mut conn, &serde_json::to_vec(&request).unwrap()));
        assert_eq!(response.allowed, Some(false));
        assert_eq!(response.deny_reason.as_deref(), Some("malformed"));
    }

    #[test]
    fn probe_safety_reports_oracle_verdict() {
        let endpoint = guest_endpoint();
        let mut client = Client::new(InProcessTransport::new(endpoint));
        let response = client.send(PROBE_SAFETY_ACTION, json!({})).unwrap();
        assert_eq!(response.allowed, Some(true));
        assert_eq!(response.payload["safe"], true);
    }
}

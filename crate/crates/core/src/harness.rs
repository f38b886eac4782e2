//! Deterministic simulated network joining device, broker and server, with
//! a scriptable adversary; the anonymity probe; and a loopback TCP
//! transport with identical protocol semantics.
//!
//! The broker holds no secrets and adds no fields, so it is modeled as the
//! transport itself. Timestamps are a logical counter; with a fixed seed
//! and script the full transcript is bit-identical across runs.

use crate::crypto::{CipherSuite, CryptoError, PkeKeyPair, PkePublicKey};
use crate::protocol::{
    self, build_response_parts, device_build_request, device_process_response,
    server_build_response, server_process_request, DeviceDecision, DeviceState, ProtocolError,
    ResponseError, ServerDecision,
};
use crate::registry::Registry;
use crate::wire::{self, ErrorNotice, HelloMessage, Message, WireError};
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::fmt;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

const TCP_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("crypto: {0}")]
    Crypto(#[from] CryptoError),
    #[error("response build: {0}")]
    Response(#[from] ResponseError),
    #[error("registry: {0}")]
    Registry(#[from] crate::registry::RegistryError),
    #[error("server refused with code {code}: {text}")]
    ServerRefused { code: u8, text: String },
    #[error("invalid adversary script: {0}")]
    InvalidScript(String),
    #[error("unexpected message: expected {0}")]
    UnexpectedMessage(&'static str),
}

/// Who sent a frame to whom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    BrokerToDevice,
    DeviceToServer,
    ServerToDevice,
}

impl Direction {
    fn tag(&self) -> &'static str {
        match self {
            Direction::BrokerToDevice => "B>D",
            Direction::DeviceToServer => "D>S",
            Direction::ServerToDevice => "S>D",
        }
    }
}

/// What happened to a frame in flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Ok,
    Tampered,
    Dropped,
    Replayed,
}

impl Delivery {
    fn tag(&self) -> &'static str {
        match self {
            Delivery::Ok => "ok",
            Delivery::Tampered => "tampered",
            Delivery::Dropped => "dropped",
            Delivery::Replayed => "replayed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptRecord {
    pub counter: u64,
    pub direction: Direction,
    pub delivery: Delivery,
    /// Raw octets exactly as sent on the wire.
    pub frame: Vec<u8>,
}

/// Append-only record of every frame the network carried.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    records: Vec<TranscriptRecord>,
}

impl Transcript {
    pub fn records(&self) -> &[TranscriptRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stable newline-delimited export: counter, direction tag, delivery
    /// tag, hex frame.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&format!(
                "{:04} {} {} {}\n",
                rec.counter,
                rec.direction.tag(),
                rec.delivery.tag(),
                hex::encode(&rec.frame)
            ));
        }
        out
    }
}

/// Selects one message of the current session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageSelector {
    Hello,
    AuthRequest,
    AuthResponse,
}

/// Selects one field of an AuthRequest or AuthResponse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSelector {
    A,
    HX,
    CCt,
    HRd,
    B,
    HY,
    HRnew,
    G,
}

impl FieldSelector {
    pub fn message(&self) -> MessageSelector {
        match self {
            FieldSelector::A | FieldSelector::HX | FieldSelector::CCt | FieldSelector::HRd => {
                MessageSelector::AuthRequest
            }
            FieldSelector::B | FieldSelector::HY | FieldSelector::HRnew | FieldSelector::G => {
                MessageSelector::AuthResponse
            }
        }
    }

    fn index(&self) -> usize {
        match self {
            FieldSelector::A | FieldSelector::B => 0,
            FieldSelector::HX | FieldSelector::HY => 1,
            FieldSelector::CCt | FieldSelector::HRnew => 2,
            FieldSelector::HRd | FieldSelector::G => 3,
        }
    }

    pub const REQUEST_FIELDS: [FieldSelector; 4] = [
        FieldSelector::A,
        FieldSelector::HX,
        FieldSelector::CCt,
        FieldSelector::HRd,
    ];

    pub const RESPONSE_FIELDS: [FieldSelector; 4] = [
        FieldSelector::B,
        FieldSelector::HY,
        FieldSelector::HRnew,
        FieldSelector::G,
    ];
}

impl fmt::Display for FieldSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FieldSelector::A => "a",
            FieldSelector::HX => "H(x)",
            FieldSelector::CCt => "C",
            FieldSelector::HRd => "H(r_D)",
            FieldSelector::B => "b",
            FieldSelector::HY => "H(y)",
            FieldSelector::HRnew => "H(r_new)",
            FieldSelector::G => "g",
        };
        f.write_str(name)
    }
}

/// One scripted step. Every action other than `Replay` runs a full session
/// attempt with the device; `Replay` injects a captured frame toward the
/// server with no device involvement.
///
/// The adversary owns the channel, so the capture log sees every
/// AuthRequest and AuthResponse as its originator sent it, including
/// frames the script then drops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdversaryAction {
    /// Honest pass-through session.
    PassThrough,
    /// Honest session run for the sake of its captures; identical to
    /// `PassThrough` on the wire, kept for script readability.
    Eavesdrop,
    /// Re-send capture log entry `capture` to the server, byte-identical.
    Replay { capture: usize },
    /// Run a session but replace one field of one message with `mutation`.
    Tamper {
        field: FieldSelector,
        mutation: Vec<u8>,
    },
    /// Run a session but discard the selected message in flight.
    Drop { message: MessageSelector },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdversaryScript {
    pub actions: Vec<AdversaryAction>,
}

impl AdversaryScript {
    pub fn new(actions: Vec<AdversaryAction>) -> Self {
        AdversaryScript { actions }
    }
}

/// Outcome of one scripted action: which decisions fired, if any, and any
/// wire-level refusal codes.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub server_decision: Option<ServerDecision>,
    pub device_decision: Option<DeviceDecision>,
    /// Error-frame code the server sent for an undecodable request.
    pub server_refusal: Option<u8>,
    /// Wire error the device hit decoding the response.
    pub device_refusal: Option<u8>,
}

impl SessionOutcome {
    fn empty() -> Self {
        SessionOutcome {
            server_decision: None,
            device_decision: None,
            server_refusal: None,
            device_refusal: None,
        }
    }

    pub fn completed(&self) -> bool {
        matches!(
            self.device_decision,
            Some(DeviceDecision::ServerAuthenticated { .. })
        ) && matches!(self.server_decision, Some(ServerDecision::Identified { .. }))
    }

    /// The rejection that ended the session, server side first.
    pub fn error(&self) -> Option<ProtocolError> {
        self.server_decision
            .as_ref()
            .and_then(|d| d.error())
            .or_else(|| self.device_decision.as_ref().and_then(|d| d.error()))
    }

    /// Sub-step label of the rejecting check, when one fired.
    pub fn sub_step(&self) -> Option<&'static str> {
        self.error().map(|e| e.sub_step())
    }
}

/// Simulated broker network: seeded generators for each endpoint, the
/// capture log, and the growing transcript.
pub struct SimNetwork {
    device_rng: ChaCha20Rng,
    server_rng: ChaCha20Rng,
    transcript: Transcript,
    captures: Vec<Vec<u8>>,
    counter: u64,
}

/// Derives the per-endpoint generators for a session seed; the TCP
/// transport uses the same derivation so both transports see identical
/// random streams.
pub fn session_rngs(seed: u64) -> (ChaCha20Rng, ChaCha20Rng) {
    let mut device_rng = ChaCha20Rng::seed_from_u64(seed);
    device_rng.set_stream(1);
    let mut server_rng = ChaCha20Rng::seed_from_u64(seed);
    server_rng.set_stream(2);
    (device_rng, server_rng)
}

impl SimNetwork {
    pub fn new(seed: u64) -> Self {
        let (device_rng, server_rng) = session_rngs(seed);
        SimNetwork {
            device_rng,
            server_rng,
            transcript: Transcript::default(),
            captures: Vec::new(),
            counter: 0,
        }
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn captures(&self) -> &[Vec<u8>] {
        &self.captures
    }

    /// Index of the nth (0-based) captured AuthRequest frame.
    pub fn request_capture_index(&self, nth: usize) -> Option<usize> {
        self.captures
            .iter()
            .enumerate()
            .filter(|(_, frame)| frame.get(6) == Some(&wire::MSG_AUTH_REQUEST))
            .map(|(i, _)| i)
            .nth(nth)
    }

    fn record(&mut self, direction: Direction, delivery: Delivery, frame: Vec<u8>) {
        self.counter += 1;
        self.transcript.records.push(TranscriptRecord {
            counter: self.counter,
            direction,
            delivery,
            frame,
        });
    }
}

enum Filter<'a> {
    None,
    Tamper {
        field: FieldSelector,
        mutation: &'a [u8],
    },
    Drop(MessageSelector),
}

impl Filter<'_> {
    /// Applies the filter to a frame about to be delivered as `selector`.
    /// Returns the (possibly mutated) frame, or None when dropped.
    fn apply(&self, frame: Vec<u8>, selector: MessageSelector) -> (Option<Vec<u8>>, Delivery) {
        match self {
            Filter::None => (Some(frame), Delivery::Ok),
            Filter::Drop(target) if *target == selector => (None, Delivery::Dropped),
            Filter::Drop(_) => (Some(frame), Delivery::Ok),
            Filter::Tamper { field, mutation } => {
                if field.message() == selector {
                    (
                        Some(splice_field(&frame, field.index(), mutation)),
                        Delivery::Tampered,
                    )
                } else {
                    (Some(frame), Delivery::Ok)
                }
            }
        }
    }
}

/// Replaces the `index`-th length-prefixed payload field of a frame,
/// operating on raw bytes so mutations may violate type invariants; the
/// receiving decoder is the one that must reject them.
fn splice_field(frame: &[u8], index: usize, mutation: &[u8]) -> Vec<u8> {
    let mut out = frame[..7].to_vec();
    let mut pos = 7;
    let mut current = 0;
    while pos + 2 <= frame.len() {
        let len = u16::from_be_bytes([frame[pos], frame[pos + 1]]) as usize;
        let body = &frame[pos + 2..(pos + 2 + len).min(frame.len())];
        if current == index {
            out.extend_from_slice(&(mutation.len() as u16).to_be_bytes());
            out.extend_from_slice(mutation);
        } else {
            out.extend_from_slice(&(len as u16).to_be_bytes());
            out.extend_from_slice(body);
        }
        pos += 2 + len;
        current += 1;
    }
    out
}

/// Runs one full honest session over the simulated network: Hello in,
/// request out, response back, decisions on both ends.
pub fn run_honest_session(
    net: &mut SimNetwork,
    dev: &mut DeviceState,
    registry: &mut Registry,
    server_keys: &PkeKeyPair,
) -> Result<SessionOutcome, HarnessError> {
    run_session(net, dev, registry, server_keys, &Filter::None)
}

fn run_session(
    net: &mut SimNetwork,
    dev: &mut DeviceState,
    registry: &mut Registry,
    server_keys: &PkeKeyPair,
    filter: &Filter<'_>,
) -> Result<SessionOutcome, HarnessError> {
    let suite = *registry.suite();
    let mut outcome = SessionOutcome::empty();

    // Step 1: broker opens the run.
    let hello = wire::encode(&Message::Hello(HelloMessage), &suite)?;
    let (delivered, delivery) = filter.apply(hello, MessageSelector::Hello);
    let Some(hello_frame) = delivered else {
        net.record(Direction::BrokerToDevice, Delivery::Dropped, vec![]);
        return Ok(outcome);
    };
    net.record(Direction::BrokerToDevice, delivery, hello_frame);

    // Step 2: device answers with the masked challenge.
    let req = device_build_request(dev, &server_keys.public_key, &suite, &mut net.device_rng)?;
    let req_frame = wire::encode(&Message::AuthRequest(req), &suite)?;
    net.captures.push(req_frame.clone());
    let (delivered, delivery) = filter.apply(req_frame, MessageSelector::AuthRequest);
    let Some(req_frame) = delivered else {
        net.record(Direction::DeviceToServer, Delivery::Dropped, vec![]);
        return Ok(outcome);
    };
    net.record(Direction::DeviceToServer, delivery, req_frame.clone());

    // Steps 3-4: server side.
    let resp_frame = match server_receive(&req_frame, registry, server_keys, &mut net.server_rng)? {
        ServerReply::Response { decision, frame } => {
            outcome.server_decision = Some(decision);
            frame
        }
        ServerReply::Refusal { decision, frame, code } => {
            outcome.server_decision = decision;
            outcome.server_refusal = code;
            net.record(Direction::ServerToDevice, Delivery::Ok, frame);
            return Ok(outcome);
        }
    };

    net.captures.push(resp_frame.clone());
    let (delivered, delivery) = filter.apply(resp_frame, MessageSelector::AuthResponse);
    let Some(resp_frame) = delivered else {
        net.record(Direction::ServerToDevice, Delivery::Dropped, vec![]);
        return Ok(outcome);
    };
    net.record(Direction::ServerToDevice, delivery, resp_frame.clone());

    // Step 5: device side.
    match wire::decode(&resp_frame, &suite) {
        Ok(Message::AuthResponse(resp)) => {
            outcome.device_decision = Some(device_process_response(dev, &resp, &suite));
        }
        Ok(_) => outcome.device_refusal = Some(WireError::UnknownMessageType(0).code()),
        Err(e) => outcome.device_refusal = Some(e.code()),
    }
    Ok(outcome)
}

enum ServerReply {
    Response {
        decision: ServerDecision,
        frame: Vec<u8>,
    },
    Refusal {
        decision: Option<ServerDecision>,
        frame: Vec<u8>,
        code: Option<u8>,
    },
}

/// The server's whole turn: decode, identify, respond or refuse. Shared by
/// the simulated network and the TCP handler so semantics cannot drift.
fn server_receive<R: RngCore + CryptoRng>(
    frame: &[u8],
    registry: &mut Registry,
    server_keys: &PkeKeyPair,
    rng: &mut R,
) -> Result<ServerReply, HarnessError> {
    let suite = *registry.suite();
    let req = match wire::decode(frame, &suite) {
        Ok(Message::AuthRequest(req)) => req,
        Ok(other) => {
            let code = WireError::UnknownMessageType(other.msg_type()).code();
            return Ok(ServerReply::Refusal {
                decision: None,
                frame: error_frame(code, "expected an authentication request", &suite)?,
                code: Some(code),
            });
        }
        Err(e) => {
            return Ok(ServerReply::Refusal {
                decision: None,
                frame: error_frame(e.code(), &e.to_string(), &suite)?,
                code: Some(e.code()),
            });
        }
    };

    let decision = server_process_request(&req, &server_keys.private_key, registry);
    match &decision {
        ServerDecision::Identified { .. } => {
            let resp = server_build_response(&decision, registry, &suite, rng)?;
            let frame = wire::encode(&Message::AuthResponse(resp), &suite)?;
            Ok(ServerReply::Response { decision, frame })
        }
        ServerDecision::Rejected(e) => {
            let frame = error_frame(e.code(), &e.to_string(), &suite)?;
            Ok(ServerReply::Refusal {
                decision: Some(decision),
                frame,
                code: None,
            })
        }
    }
}

fn error_frame(code: u8, text: &str, suite: &CipherSuite) -> Result<Vec<u8>, HarnessError> {
    Ok(wire::encode(
        &Message::Error(ErrorNotice {
            code,
            text: text.into(),
        }),
        suite,
    )?)
}

/// Executes a script action by action. Adversary-induced failures are
/// data in the outcomes, not errors.
pub fn run_with_adversary(
    net: &mut SimNetwork,
    dev: &mut DeviceState,
    registry: &mut Registry,
    server_keys: &PkeKeyPair,
    script: &AdversaryScript,
) -> Result<Vec<SessionOutcome>, HarnessError> {
    let mut outcomes = Vec::with_capacity(script.actions.len());
    for (index, action) in script.actions.iter().enumerate() {
        let outcome = match action {
            AdversaryAction::PassThrough | AdversaryAction::Eavesdrop => {
                run_session(net, dev, registry, server_keys, &Filter::None)?
            }
            AdversaryAction::Tamper { field, mutation } => run_session(
                net,
                dev,
                registry,
                server_keys,
                &Filter::Tamper {
                    field: *field,
                    mutation,
                },
            )?,
            AdversaryAction::Drop { message } => {
                run_session(net, dev, registry, server_keys, &Filter::Drop(*message))?
            }
            AdversaryAction::Replay { capture } => {
                let frame = net
                    .captures
                    .get(*capture)
                    .ok_or_else(|| {
                        HarnessError::InvalidScript(format!(
                            "action {index} replays capture {capture} but only {} exist",
                            net.captures.len()
                        ))
                    })?
                    .clone();
                net.record(Direction::DeviceToServer, Delivery::Replayed, frame.clone());
                let mut outcome = SessionOutcome::empty();
                match server_receive(&frame, registry, server_keys, &mut net.server_rng)? {
                    ServerReply::Response { decision, frame } => {
                        outcome.server_decision = Some(decision);
                        net.record(Direction::ServerToDevice, Delivery::Ok, frame);
                    }
                    ServerReply::Refusal { decision, frame, code } => {
                        outcome.server_decision = decision;
                        outcome.server_refusal = code;
                        net.record(Direction::ServerToDevice, Delivery::Ok, frame);
                    }
                }
                outcome
            }
        };
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Anonymity probe parameters.
#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub devices: usize,
    pub sessions_per_device: usize,
    pub seed: u64,
    /// Negative-control hook: the server re-issues each device's current
    /// random number instead of rotating, reproducing the fixed-identifier
    /// weakness the protocol exists to avoid. Probe assertion (ii) must
    /// then fail.
    pub freeze_rotation: bool,
}

impl ProbeOptions {
    pub fn new(devices: usize, sessions_per_device: usize, seed: u64) -> Self {
        ProbeOptions {
            devices,
            sessions_per_device: sessions_per_device.max(2),
            seed,
            freeze_rotation: false,
        }
    }
}

/// A pair of sessions of one device that agree on one request field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistinctnessViolation {
    pub device: usize,
    pub field: &'static str,
    pub sessions: (usize, usize),
}

/// What the passive observer could and could not do with the captures.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub captures: usize,
    /// Frames containing some device's ID_D or H(ID_D) as a substring.
    pub substring_violations: Vec<String>,
    /// Same-device request pairs equal in any field.
    pub distinctness_violations: Vec<DistinctnessViolation>,
    /// Fraction of captures the field-equality linker paired correctly.
    pub linker_accuracy: f64,
    /// Expected accuracy of uniform guessing over the capture set.
    pub baseline_accuracy: f64,
}

impl ProbeReport {
    pub fn substring_clean(&self) -> bool {
        self.substring_violations.is_empty()
    }

    pub fn distinctness_clean(&self) -> bool {
        self.distinctness_violations.is_empty()
    }
}

/// Registers `devices` fresh devices, runs `sessions_per_device` sessions
/// each, and evaluates the three anonymity assertions over the captured
/// AuthRequests.
pub fn anonymity_probe(
    opts: &ProbeOptions,
    suite: &CipherSuite,
) -> Result<ProbeReport, HarnessError> {
    assert!(opts.devices >= 2, "probe needs at least two devices");
    let n = opts.devices;
    let m = opts.sessions_per_device;

    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let server_keys = suite.pke_keygen(&mut rng)?;
    let mut registry = Registry::new(*suite);
    let mut devices: Vec<DeviceState> = (0..n)
        .map(|_| registry.register_device(&mut rng))
        .collect::<Result<_, _>>()?;

    // Captured request fields, labeled by (device, session) for scoring.
    struct CapturedRequest {
        device: usize,
        session: usize,
        frame: Vec<u8>,
        fields: [Vec<u8>; 4],
    }
    let mut captured: Vec<CapturedRequest> = Vec::with_capacity(n * m);

    for session in 0..m {
        for (device_index, dev) in devices.iter_mut().enumerate() {
            let req = device_build_request(dev, &server_keys.public_key, suite, &mut rng)?;
            let frame = wire::encode(&Message::AuthRequest(req.clone()), suite)?;
            captured.push(CapturedRequest {
                device: device_index,
                session,
                frame,
                fields: [
                    req.a.as_bytes().to_vec(),
                    req.h_x.as_bytes().to_vec(),
                    req.c_ct.as_bytes().to_vec(),
                    req.h_rd.as_bytes().to_vec(),
                ],
            });

            let decision = server_process_request(&req, &server_keys.private_key, &mut registry);
            let ServerDecision::Identified { ref h_id, .. } = decision else {
                panic!("probe session unexpectedly rejected: {decision:?}");
            };
            let resp = if opts.freeze_rotation {
                let entry = registry.lookup(h_id).expect("identified entry");
                let sig = entry.sig().clone();
                let frozen_r = entry.r_current().clone();
                build_response_parts(&sig, &frozen_r, suite, &mut rng)?
            } else {
                server_build_response(&decision, &mut registry, suite, &mut rng)?
            };
            let outcome = device_process_response(dev, &resp, suite);
            assert!(outcome.is_authenticated(), "probe session failed: {outcome:?}");
        }
    }

    // (i) no frame contains any device's ID_D or H(ID_D) as a substring.
    let mut substring_violations = Vec::new();
    for (device_index, dev) in devices.iter().enumerate() {
        let needles = [dev.id_d().to_vec(), suite.hash(dev.id_d()).into_vec()];
        for cap in &captured {
            for (which, needle) in needles.iter().enumerate() {
                if cap
                    .frame
                    .windows(needle.len())
                    .any(|w| w == needle.as_slice())
                {
                    substring_violations.push(format!(
                        "frame (device {}, session {}) contains {} of device {}",
                        cap.device,
                        cap.session,
                        if which == 0 { "ID_D" } else { "H(ID_D)" },
                        device_index,
                    ));
                }
            }
        }
    }

    // (ii) per device, all sessions pairwise distinct in every field.
    const FIELD_NAMES: [&str; 4] = ["a", "H(x)", "C", "H(r_D)"];
    let mut distinctness_violations = Vec::new();
    for device_index in 0..n {
        let of_device: Vec<&CapturedRequest> = captured
            .iter()
            .filter(|c| c.device == device_index)
            .collect();
        for i in 0..of_device.len() {
            for j in (i + 1)..of_device.len() {
                for (f, name) in FIELD_NAMES.iter().enumerate() {
                    if of_device[i].fields[f] == of_device[j].fields[f] {
                        distinctness_violations.push(DistinctnessViolation {
                            device: device_index,
                            field: name,
                            sessions: (of_device[i].session, of_device[j].session),
                        });
                    }
                }
            }
        }
    }

    // (iii) the field-equality linker: for each capture, pair it with the
    // first other capture sharing any field, else guess uniformly.
    let total = captured.len();
    let mut correct = 0usize;
    for i in 0..total {
        let mut guess = None;
        for j in 0..total {
            if i == j {
                continue;
            }
            if (0..4).any(|f| captured[i].fields[f] == captured[j].fields[f]) {
                guess = Some(j);
                break;
            }
        }
        let guess = guess.unwrap_or_else(|| {
            let mut pick = rng.next_u64() as usize % (total - 1);
            if pick >= i {
                pick += 1;
            }
            pick
        });
        if captured[guess].device == captured[i].device {
            correct += 1;
        }
    }
    let linker_accuracy = correct as f64 / total as f64;
    let baseline_accuracy = (m - 1) as f64 / (n * m - 1) as f64;

    Ok(ProbeReport {
        captures: total,
        substring_violations,
        distinctness_violations,
        linker_accuracy,
        baseline_accuracy,
    })
}

/// Concrete generator for the TCP server: OS entropy in production, a
/// seeded stream in test mode.
pub enum ServerRng {
    Os(OsRng),
    Seeded(ChaCha20Rng),
}

impl RngCore for ServerRng {
    fn next_u32(&mut self) -> u32 {
        match self {
            ServerRng::Os(r) => r.next_u32(),
            ServerRng::Seeded(r) => r.next_u32(),
        }
    }

    fn next_u64(&mut self) -> u64 {
        match self {
            ServerRng::Os(r) => r.next_u64(),
            ServerRng::Seeded(r) => r.next_u64(),
        }
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        match self {
            ServerRng::Os(r) => r.fill_bytes(dest),
            ServerRng::Seeded(r) => r.fill_bytes(dest),
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        match self {
            ServerRng::Os(r) => r.try_fill_bytes(dest),
            ServerRng::Seeded(r) => r.try_fill_bytes(dest),
        }
    }
}

impl CryptoRng for ServerRng {}

/// One-exchange-per-connection TCP server. Connections are handled
/// sequentially; registry mutations and snapshot persistence happen under
/// one lock, so at most one authentication is in flight per registry.
pub struct TcpServer {
    pub registry: Arc<Mutex<Registry>>,
    pub keys: PkeKeyPair,
    pub rng: Mutex<ServerRng>,
    /// Snapshot path rewritten after every accepted session.
    pub persist_path: Option<PathBuf>,
}

impl TcpServer {
    pub fn new(registry: Registry, keys: PkeKeyPair, rng: ServerRng) -> Self {
        TcpServer {
            registry: Arc::new(Mutex::new(registry)),
            keys,
            rng: Mutex::new(rng),
            persist_path: None,
        }
    }

    pub fn with_persistence(mut self, path: PathBuf) -> Self {
        self.persist_path = Some(path);
        self
    }

    /// Accept loop; returns when `shutdown` is set (checked between
    /// connections). Per-connection failures are contained; the server
    /// keeps serving.
    pub fn run(&self, listener: TcpListener, shutdown: Option<Arc<AtomicBool>>) {
        for stream in listener.incoming() {
            if shutdown
                .as_ref()
                .is_some_and(|flag| flag.load(Ordering::SeqCst))
            {
                break;
            }
            let Ok(stream) = stream else { continue };
            let _ = self.handle_connection(stream);
        }
    }

    fn handle_connection(&self, mut stream: TcpStream) -> Result<(), HarnessError> {
        stream.set_read_timeout(Some(TCP_TIMEOUT))?;
        stream.set_write_timeout(Some(TCP_TIMEOUT))?;
        let suite = *self.registry.lock().unwrap().suite();

        let hello = wire::encode(&Message::Hello(HelloMessage), &suite)?;
        stream.write_all(&hello)?;

        let frame = match wire::read_frame(&mut stream) {
            Ok(frame) => frame,
            Err(e) => {
                let refusal = error_frame(e.code(), &e.to_string(), &suite)?;
                let _ = stream.write_all(&refusal);
                return Ok(());
            }
        };

        let mut registry = self.registry.lock().unwrap();
        let mut rng = self.rng.lock().unwrap();
        let reply = server_receive(&frame, &mut registry, &self.keys, &mut *rng)?;
        let (frame_out, accepted) = match reply {
            ServerReply::Response { frame, .. } => (frame, true),
            ServerReply::Refusal { frame, .. } => (frame, false),
        };
        if accepted {
            if let Some(path) = &self.persist_path {
                registry
                    .save_snapshot(path)
                    .map_err(|e| HarnessError::Io(std::io::Error::other(e.to_string())))?;
            }
        }
        drop(registry);
        stream.write_all(&frame_out)?;
        Ok(())
    }
}

/// A running server thread plus the handle to stop it.
pub struct TcpServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    thread: std::thread::JoinHandle<()>,
}

impl TcpServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        let _ = self.thread.join();
    }
}

/// Binds and serves on a background thread; protocol semantics are the
/// simulated network's, frame for frame.
pub fn serve_tcp(server: TcpServer, bind: &str) -> Result<TcpServerHandle, HarnessError> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    let thread = std::thread::spawn(move || server.run(listener, Some(flag)));
    Ok(TcpServerHandle {
        addr,
        shutdown,
        thread,
    })
}

/// What one TCP session produced, with the frames as sent/received.
#[derive(Debug)]
pub struct TcpSessionOutcome {
    pub decision: Option<DeviceDecision>,
    pub refusal: Option<ErrorNotice>,
    pub frames: Vec<(Direction, Vec<u8>)>,
}

impl TcpSessionOutcome {
    pub fn authenticated(&self) -> bool {
        matches!(
            self.decision,
            Some(DeviceDecision::ServerAuthenticated { .. })
        )
    }
}

/// Runs one authentication against a serving address. Transport failures
/// surface as errors; protocol rejections come back as data.
pub fn connect_tcp<R: RngCore + CryptoRng>(
    dev: &mut DeviceState,
    server_pub: &PkePublicKey,
    suite: &CipherSuite,
    addr: &SocketAddr,
    rng: &mut R,
) -> Result<TcpSessionOutcome, HarnessError> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(TCP_TIMEOUT))?;
    stream.set_write_timeout(Some(TCP_TIMEOUT))?;
    let mut frames = Vec::new();

    let hello_frame = wire::read_frame(&mut stream)?;
    frames.push((Direction::BrokerToDevice, hello_frame.clone()));
    match wire::decode(&hello_frame, suite)? {
        Message::Hello(_) => {}
        _ => return Err(HarnessError::UnexpectedMessage("Hello")),
    }

    let req = device_build_request(dev, server_pub, suite, rng)?;
    let req_frame = wire::encode(&Message::AuthRequest(req), suite)?;
    stream.write_all(&req_frame)?;
    frames.push((Direction::DeviceToServer, req_frame));

    let resp_frame = wire::read_frame(&mut stream)?;
    frames.push((Direction::ServerToDevice, resp_frame.clone()));
    match wire::decode(&resp_frame, suite)? {
        Message::AuthResponse(resp) => Ok(TcpSessionOutcome {
            decision: Some(device_process_response(dev, &resp, suite)),
            refusal: None,
            frames,
        }),
        Message::Error(notice) => Ok(TcpSessionOutcome {
            decision: None,
            refusal: Some(notice),
            frames,
        }),
        _ => Err(HarnessError::UnexpectedMessage("AuthResponse or Error")),
    }
}

/// Convenience for vault operations after an authentication: seals or
/// opens with the delivered Sig.key.
pub use protocol::{vault_open, vault_seal};

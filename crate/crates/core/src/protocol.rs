//! Device and server state machines for the five-step identification run,
//! plus the device vault sealed with the delivered Sig.key.
//!
//! Step 2 (device): mask the identity, `x = H(ID_D) ⊕ r_D`, encrypt x for
//! the server and r_D under x, send `(a, H(x), C, H(r_D))`.
//!
//! Step 3 (server): recover x and r_D, verify both hashes, unmask the
//! search key `H(ID_D) = x ⊕ r_D`, look the device up, and check r_D
//! against the rotation state and the replay ledger.
//!
//! Step 4 (server): draw a fresh r_new, prove knowledge of H(ID_D) via
//! `H(y)`, wrap r_new under ID_D and the signature record under
//! `k = PBKDF2(ID_D, r_new)`, send `(b, H(y), H(r_new), g)`.
//!
//! Step 5 (device): recover r_new, verify it, verify the server's proof,
//! derive the same k, unwrap the signature record, and only then commit
//! r_new as the device's current random number.

use crate::crypto::{
    xor_digest, CipherSuite, CryptoError, Digest, KeyMaterial, PkePrivateKey, PkePublicKey,
    RandomNumber, SkeCiphertext,
};
use crate::registry::{Freshness, Registry, RotationMode};
use crate::store::{atomic_write, put_block, ByteReader, StoreError};
use crate::wire::{AuthRequest, AuthResponse};
use rand::{CryptoRng, RngCore};
use std::fmt;
use std::path::Path;

/// Device-state file magic.
pub const DEVICE_MAGIC: [u8; 4] = *b"SKD1";
pub const DEVICE_FILE_VERSION: u8 = 1;

/// Attempts before giving up on drawing a non-colliding random number.
const UNIQUENESS_ATTEMPTS: u32 = 64;

/// Rejection reasons, one per failed verification. The numbering mirrors
/// the protocol sub-step that performs the check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("public-key decryption of a failed")]
    PkeDecryptFailed,
    #[error("x failed its accuracy check against H(x)")]
    XAccuracyMismatch,
    #[error("r_D could not be recovered or failed its accuracy check")]
    RdAccuracyMismatch,
    #[error("no registry entry under the recovered search key")]
    UnknownDevice,
    #[error("presented random number is retired or the request was already accepted")]
    ReplayDetected,
    #[error("r_new failed its accuracy check against H(r_new)")]
    RnewAccuracyMismatch,
    #[error("server proof H(H(ID_D) xor r_new) does not match H(y)")]
    ServerProofMismatch,
    #[error("signature record could not be decrypted")]
    SigDecryptFailed,
    #[error("signature record carries a different device id")]
    SigIdMismatch,
}

impl ProtocolError {
    /// Stable 1-octet code used in Error frames and process exit codes.
    pub fn code(&self) -> u8 {
        match self {
            ProtocolError::PkeDecryptFailed => 10,
            ProtocolError::XAccuracyMismatch => 11,
            ProtocolError::RdAccuracyMismatch => 12,
            ProtocolError::UnknownDevice => 13,
            ProtocolError::ReplayDetected => 14,
            ProtocolError::RnewAccuracyMismatch => 15,
            ProtocolError::ServerProofMismatch => 16,
            ProtocolError::SigDecryptFailed => 17,
            ProtocolError::SigIdMismatch => 18,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            10 => ProtocolError::PkeDecryptFailed,
            11 => ProtocolError::XAccuracyMismatch,
            12 => ProtocolError::RdAccuracyMismatch,
            13 => ProtocolError::UnknownDevice,
            14 => ProtocolError::ReplayDetected,
            15 => ProtocolError::RnewAccuracyMismatch,
            16 => ProtocolError::ServerProofMismatch,
            17 => ProtocolError::SigDecryptFailed,
            18 => ProtocolError::SigIdMismatch,
            _ => return None,
        })
    }

    /// The sub-step whose verification rejected the run.
    pub fn sub_step(&self) -> &'static str {
        match self {
            ProtocolError::PkeDecryptFailed => "3-1",
            ProtocolError::XAccuracyMismatch => "3-3",
            ProtocolError::RdAccuracyMismatch => "3-2/3-3",
            ProtocolError::UnknownDevice => "3-5",
            ProtocolError::ReplayDetected => "3-5/ledger",
            ProtocolError::RnewAccuracyMismatch => "5-2",
            ProtocolError::ServerProofMismatch => "5-3",
            ProtocolError::SigDecryptFailed => "5-1/5-5",
            ProtocolError::SigIdMismatch => "5-6",
        }
    }
}

/// The server-held pair (ID_D, key). `key` is the device's data
/// encrypt/decrypt key; it leaves the server only inside ciphertext g.
#[derive(Clone, PartialEq, Eq)]
pub struct SignatureRecord {
    id_d: Vec<u8>,
    key: Vec<u8>,
}

impl SignatureRecord {
    pub fn new(id_d: Vec<u8>, key: Vec<u8>) -> Self {
        SignatureRecord { id_d, key }
    }

    pub fn id_d(&self) -> &[u8] {
        &self.id_d
    }

    pub fn key(&self) -> &[u8] {
        &self.key
    }

    /// Serialization used inside ciphertext g and the registry snapshot:
    /// id_d then key, each with a 2-octet big-endian length prefix (the
    /// wire module's field encoding).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.id_d.len() + self.key.len());
        out.extend_from_slice(&(self.id_d.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.id_d);
        out.extend_from_slice(&(self.key.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.key);
        out
    }

    pub fn from_bytes(bytes: &[u8], suite: &CipherSuite) -> Option<Self> {
        let take = |cur: &mut usize, n: usize| -> Option<&[u8]> {
            let slice = bytes.get(*cur..*cur + n)?;
            *cur += n;
            Some(slice)
        };
        let mut cur = 0;
        let id_len = u16::from_be_bytes(take(&mut cur, 2)?.try_into().ok()?) as usize;
        let id_d = take(&mut cur, id_len)?.to_vec();
        let key_len = u16::from_be_bytes(take(&mut cur, 2)?.try_into().ok()?) as usize;
        let key = take(&mut cur, key_len)?.to_vec();
        if cur != bytes.len() || id_d.len() != suite.id_len() || key.len() != suite.dk_len() {
            return None;
        }
        Some(SignatureRecord { id_d, key })
    }
}

impl fmt::Debug for SignatureRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SignatureRecord {{ id_d: {}, key: [redacted] }}",
            hex::encode(&self.id_d)
        )
    }
}

/// A device's persistent secrets: its id, the current session random
/// number, and the sealed data vault.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceState {
    id_d: Vec<u8>,
    r_current: RandomNumber,
    vault: Option<SkeCiphertext>,
    suite_id: u8,
}

#[derive(Debug, thiserror::Error)]
pub enum DeviceFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad device-file magic")]
    BadMagic,
    #[error("unsupported device-file version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown suite id {0}")]
    UnknownSuite(u8),
    #[error("corrupt device file")]
    Corrupt,
}

impl From<StoreError> for DeviceFileError {
    fn from(_: StoreError) -> Self {
        DeviceFileError::Corrupt
    }
}

impl DeviceState {
    pub(crate) fn new(id_d: Vec<u8>, r_current: RandomNumber, suite_id: u8) -> Self {
        DeviceState {
            id_d,
            r_current,
            vault: None,
            suite_id,
        }
    }

    pub fn id_d(&self) -> &[u8] {
        &self.id_d
    }

    pub fn r_current(&self) -> &RandomNumber {
        &self.r_current
    }

    pub fn vault(&self) -> Option<&SkeCiphertext> {
        self.vault.as_ref()
    }

    pub fn suite_id(&self) -> u8 {
        self.suite_id
    }

    /// Device-file body: magic, version, suite id, then id_d, r_current and
    /// the vault ciphertext (empty = no vault), each 4-octet length-prefixed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&DEVICE_MAGIC);
        out.push(DEVICE_FILE_VERSION);
        out.push(self.suite_id);
        put_block(&mut out, &self.id_d);
        put_block(&mut out, self.r_current.as_bytes());
        match &self.vault {
            Some(ct) => put_block(&mut out, ct.as_bytes()),
            None => put_block(&mut out, &[]),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DeviceFileError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != DEVICE_MAGIC {
            return Err(DeviceFileError::BadMagic);
        }
        let version = r.take_u8()?;
        if version != DEVICE_FILE_VERSION {
            return Err(DeviceFileError::UnsupportedVersion(version));
        }
        let suite_id = r.take_u8()?;
        let suite = CipherSuite::from_id(suite_id).ok_or(DeviceFileError::UnknownSuite(suite_id))?;
        let id_d = r.take_block()?.to_vec();
        let r_current = suite
            .random_number_from_bytes(r.take_block()?)
            .map_err(|_| DeviceFileError::Corrupt)?;
        let vault_raw = r.take_block()?;
        let vault = if vault_raw.is_empty() {
            None
        } else {
            Some(SkeCiphertext(vault_raw.to_vec()))
        };
        r.finish()?;
        if id_d.len() != suite.id_len() {
            return Err(DeviceFileError::Corrupt);
        }
        Ok(DeviceState {
            id_d,
            r_current,
            vault,
            suite_id,
        })
    }

    /// Atomic write via temp-file-and-rename.
    pub fn save(&self, path: &Path) -> Result<(), DeviceFileError> {
        atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DeviceFileError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Step-3 outcome. `Identified` carries the registry search key and the
/// random number recovered from the request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerDecision {
    Identified {
        h_id: Digest,
        recovered_r: RandomNumber,
    },
    Rejected(ProtocolError),
}

impl ServerDecision {
    pub fn is_identified(&self) -> bool {
        matches!(self, ServerDecision::Identified { .. })
    }

    pub fn error(&self) -> Option<ProtocolError> {
        match self {
            ServerDecision::Rejected(e) => Some(*e),
            ServerDecision::Identified { .. } => None,
        }
    }
}

/// Step-5 outcome. Success carries the session key k and the signature
/// record it unwrapped.
#[derive(Debug, Clone, PartialEq)]
pub enum DeviceDecision {
    ServerAuthenticated {
        k: KeyMaterial,
        sig: SignatureRecord,
    },
    Rejected(ProtocolError),
}

impl DeviceDecision {
    pub fn is_authenticated(&self) -> bool {
        matches!(self, DeviceDecision::ServerAuthenticated { .. })
    }

    pub fn error(&self) -> Option<ProtocolError> {
        match self {
            DeviceDecision::Rejected(e) => Some(*e),
            DeviceDecision::ServerAuthenticated { .. } => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ResponseError {
    #[error("decision was not Identified")]
    NotIdentified,
    #[error("failed to draw a distinct r_new after {0} attempts")]
    UniquenessExhausted(u32),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, thiserror::Error)]
pub enum VaultError {
    #[error("sig key has {got} bytes, suite requires {want}")]
    WrongKeyLength { got: usize, want: usize },
    #[error("vault is empty")]
    EmptyVault,
    #[error("authentication tag mismatch")]
    AuthTagMismatch,
    #[error(transparent)]
    Crypto(CryptoError),
}

/// Step 2: builds (a, H(x), C, H(r_D)) from the device's stored secrets.
/// The device state itself is unchanged.
pub fn device_build_request<R: RngCore + CryptoRng>(
    dev: &DeviceState,
    server_pub: &PkePublicKey,
    suite: &CipherSuite,
    rng: &mut R,
) -> Result<AuthRequest, CryptoError> {
    let h_id = suite.hash(&dev.id_d);
    // (2-1) x <- H(ID_D) xor r_D
    let x = xor_digest(h_id.as_bytes(), dev.r_current.as_bytes())?;
    // (2-2) a <- E^P(e^P, x)
    let a = suite.pke_encrypt(rng, server_pub, &x)?;
    // (2-3) C <- E^S(x, r_D)
    let x_material = KeyMaterial::new(x.clone())?;
    let c_ct = suite.ske_encrypt(rng, &x_material, dev.r_current.as_bytes())?;
    // (2-4) send (a, H(x), C, H(r_D))
    Ok(AuthRequest {
        a,
        h_x: suite.hash(&x),
        c_ct,
        h_rd: suite.hash(dev.r_current.as_bytes()),
    })
}

/// Canonical digest of a request's four fields; the replay ledger stores
/// these, so a byte-identical re-presentation is recognized even while its
/// random number is still within the freshness window.
pub fn request_fingerprint(req: &AuthRequest, suite: &CipherSuite) -> Digest {
    let mut buf = Vec::new();
    for field in [
        req.a.as_bytes(),
        req.h_x.as_bytes(),
        req.c_ct.as_bytes(),
        req.h_rd.as_bytes(),
    ] {
        buf.extend_from_slice(&(field.len() as u32).to_be_bytes());
        buf.extend_from_slice(field);
    }
    suite.hash(&buf)
}

/// Step 3: recovers (x, r_D), verifies both against their transmitted
/// hashes, unmasks the search key, and applies the freshness and replay
/// rules. Checks run in sub-step order; the first failure wins. On
/// identification the request's fingerprint is recorded in the ledger.
pub fn server_process_request(
    req: &AuthRequest,
    private: &PkePrivateKey,
    registry: &mut Registry,
) -> ServerDecision {
    let suite = *registry.suite();

    // (3-1) x <- D^P(d^P, a)
    let x = match suite.pke_decrypt(private, &req.a) {
        Ok(x) => x,
        Err(_) => return ServerDecision::Rejected(ProtocolError::PkeDecryptFailed),
    };

    // (3-2) r_D <- D^S(x, C); an unkeyable x or a failed tag is an r_D
    // accuracy failure (the tag is the first of the two r_D checks).
    let x_material = match KeyMaterial::new(x.clone()) {
        Ok(m) => m,
        Err(_) => return ServerDecision::Rejected(ProtocolError::RdAccuracyMismatch),
    };
    let r_raw = match suite.ske_decrypt(&x_material, &req.c_ct) {
        Ok(r) => r,
        Err(_) => return ServerDecision::Rejected(ProtocolError::RdAccuracyMismatch),
    };

    // (3-3) verify the accuracy of x and r_D; x reports first on ties.
    if x.len() != suite.digest_len() || suite.hash(&x) != req.h_x {
        return ServerDecision::Rejected(ProtocolError::XAccuracyMismatch);
    }
    let recovered_r = match suite.random_number_from_bytes(&r_raw) {
        Ok(r) if suite.hash(r.as_bytes()) == req.h_rd => r,
        _ => return ServerDecision::Rejected(ProtocolError::RdAccuracyMismatch),
    };

    // (3-4) H(ID_D) <- x xor r_D
    let h_id = match xor_digest(&x, recovered_r.as_bytes()) {
        Ok(bytes) => Digest::from_raw(bytes),
        Err(_) => return ServerDecision::Rejected(ProtocolError::RdAccuracyMismatch),
    };

    // (3-5) retrieve Sig_D under the search key H(ID_D)
    let entry = match registry.lookup(&h_id) {
        Some(e) => e,
        None => return ServerDecision::Rejected(ProtocolError::UnknownDevice),
    };

    if entry.freshness(&recovered_r) == Freshness::Stale {
        return ServerDecision::Rejected(ProtocolError::ReplayDetected);
    }
    let fingerprint = request_fingerprint(req, &suite);
    if entry.was_accepted(&fingerprint) {
        return ServerDecision::Rejected(ProtocolError::ReplayDetected);
    }

    registry.record_accepted(&h_id, fingerprint);
    ServerDecision::Identified { h_id, recovered_r }
}

/// Step 4: issues a fresh r_new distinct from everything retained for the
/// device, proves knowledge of H(ID_D), wraps r_new and the signature
/// record, and rotates the registry entry. Rotation happens exactly once
/// per identified request.
pub fn server_build_response<R: RngCore + CryptoRng>(
    decision: &ServerDecision,
    registry: &mut Registry,
    suite: &CipherSuite,
    rng: &mut R,
) -> Result<AuthResponse, ResponseError> {
    let (h_id, recovered_r) = match decision {
        ServerDecision::Identified { h_id, recovered_r } => (h_id, recovered_r),
        ServerDecision::Rejected(_) => return Err(ResponseError::NotIdentified),
    };
    let entry = registry.lookup(h_id).ok_or(ResponseError::NotIdentified)?;
    let mode = match entry.freshness(recovered_r) {
        Freshness::Current => RotationMode::FromCurrent,
        Freshness::Previous => RotationMode::FromPrevious,
        Freshness::Stale => return Err(ResponseError::NotIdentified),
    };
    let sig = entry.sig().clone();

    // (4-1) generate r_new distinct from every random number retained for
    // this device; redraw on collision.
    let mut r_new = None;
    for _ in 0..UNIQUENESS_ATTEMPTS {
        let candidate = suite.random_number(rng).map_err(ResponseError::Crypto)?;
        if !entry.retains(&candidate) {
            r_new = Some(candidate);
            break;
        }
    }
    let r_new = r_new.ok_or(ResponseError::UniquenessExhausted(UNIQUENESS_ATTEMPTS))?;

    build_response_parts(&sig, &r_new, suite, rng).map(|resp| {
        registry.rotate(h_id, r_new, mode);
        resp
    })
}

/// Sub-steps (4-2)..(4-5) for a chosen r_new; shared with the harness's
/// frozen-rotation probe hook.
pub(crate) fn build_response_parts<R: RngCore + CryptoRng>(
    sig: &SignatureRecord,
    r_new: &RandomNumber,
    suite: &CipherSuite,
    rng: &mut R,
) -> Result<AuthResponse, ResponseError> {
    let id_material = KeyMaterial::new(sig.id_d().to_vec()).map_err(ResponseError::Crypto)?;
    let h_id = suite.hash(sig.id_d());
    // (4-2) y <- H(ID_D) xor r_new
    let y = xor_digest(h_id.as_bytes(), r_new.as_bytes()).map_err(ResponseError::Crypto)?;
    // (4-3) b <- E^S(ID_D, r_new)
    let b = suite
        .ske_encrypt(rng, &id_material, r_new.as_bytes())
        .map_err(ResponseError::Crypto)?;
    // (4-4) k <- PBKDF2(ID_D, r_new, c, dkLen)
    let k = suite.derive_key(
        &id_material,
        r_new.as_bytes(),
        suite.kdf_iterations(),
        suite.dk_len(),
    );
    // (4-5) g <- E^S(k, Sig_D)
    let g = suite
        .ske_encrypt(rng, &k, &sig.to_bytes())
        .map_err(ResponseError::Crypto)?;
    // (4-6) send (b, H(y), H(r_new), g)
    Ok(AuthResponse {
        b,
        h_y: suite.hash(&y),
        h_rnew: suite.hash(r_new.as_bytes()),
        g,
    })
}

/// Step 5: verifies the response and, only if every check passes, commits
/// r_new as the device's current random number. Any rejection leaves the
/// device state untouched.
pub fn device_process_response(
    dev: &mut DeviceState,
    resp: &AuthResponse,
    suite: &CipherSuite,
) -> DeviceDecision {
    let id_material = match KeyMaterial::new(dev.id_d.clone()) {
        Ok(m) => m,
        Err(_) => return DeviceDecision::Rejected(ProtocolError::SigDecryptFailed),
    };

    // (5-1) r_new <- D^S(ID_D, b)
    let r_new_raw = match suite.ske_decrypt(&id_material, &resp.b) {
        Ok(r) => r,
        Err(_) => return DeviceDecision::Rejected(ProtocolError::SigDecryptFailed),
    };

    // (5-2) confirm r_new against H(r_new)
    let r_new = match suite.random_number_from_bytes(&r_new_raw) {
        Ok(r) if suite.hash(r.as_bytes()) == resp.h_rnew => r,
        _ => return DeviceDecision::Rejected(ProtocolError::RnewAccuracyMismatch),
    };

    // (5-3) compare H(H(ID_D) xor r_new) with the received H(y)
    let h_id = suite.hash(&dev.id_d);
    let y = match xor_digest(h_id.as_bytes(), r_new.as_bytes()) {
        Ok(y) => y,
        Err(_) => return DeviceDecision::Rejected(ProtocolError::ServerProofMismatch),
    };
    if suite.hash(&y) != resp.h_y {
        return DeviceDecision::Rejected(ProtocolError::ServerProofMismatch);
    }

    // (5-4) k <- PBKDF2(ID_D, r_new, c, dkLen)
    let k = suite.derive_key(
        &id_material,
        r_new.as_bytes(),
        suite.kdf_iterations(),
        suite.dk_len(),
    );

    // (5-5) Sig <- D^S(k, g)
    let sig_bytes = match suite.ske_decrypt(&k, &resp.g) {
        Ok(bytes) => bytes,
        Err(_) => return DeviceDecision::Rejected(ProtocolError::SigDecryptFailed),
    };
    let sig = match SignatureRecord::from_bytes(&sig_bytes, suite) {
        Some(sig) => sig,
        None => return DeviceDecision::Rejected(ProtocolError::SigDecryptFailed),
    };

    // (5-6) compare the record's ID_D with the device's own
    if sig.id_d() != dev.id_d {
        return DeviceDecision::Rejected(ProtocolError::SigIdMismatch);
    }

    // Keep r_new; decision and state update commit together.
    dev.r_current = r_new;
    DeviceDecision::ServerAuthenticated { k, sig }
}

/// Encrypts a data blob under Sig.key into the device vault.
pub fn vault_seal<R: RngCore + CryptoRng>(
    dev: &mut DeviceState,
    sig_key: &[u8],
    plaintext: &[u8],
    suite: &CipherSuite,
    rng: &mut R,
) -> Result<(), VaultError> {
    let material = vault_material(sig_key, suite)?;
    let sealed = suite
        .ske_encrypt(rng, &material, plaintext)
        .map_err(VaultError::Crypto)?;
    dev.vault = Some(sealed);
    Ok(())
}

/// Decrypts the vault with Sig.key. A wrong key fails the tag check;
/// holding the device alone never yields the data.
pub fn vault_open(
    dev: &DeviceState,
    sig_key: &[u8],
    suite: &CipherSuite,
) -> Result<Vec<u8>, VaultError> {
    let material = vault_material(sig_key, suite)?;
    let vault = dev.vault.as_ref().ok_or(VaultError::EmptyVault)?;
    suite.ske_decrypt(&material, vault).map_err(|e| match e {
        CryptoError::AuthTagMismatch => VaultError::AuthTagMismatch,
        other => VaultError::Crypto(other),
    })
}

fn vault_material(sig_key: &[u8], suite: &CipherSuite) -> Result<KeyMaterial, VaultError> {
    if sig_key.len() != suite.dk_len() {
        return Err(VaultError::WrongKeyLength {
            got: sig_key.len(),
            want: suite.dk_len(),
        });
    }
    KeyMaterial::new(sig_key.to_vec()).map_err(VaultError::Crypto)
}

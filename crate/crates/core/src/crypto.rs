//! Primitive suite: hash, PRNG access, public-key and symmetric encryption,
//! and PBKDF2 key derivation.
//!
//! A [`CipherSuite`] bundles the parameters both protocol endpoints must
//! agree on. Every wire frame carries the suite id, so a mismatch is caught
//! at decode time rather than as a garbled decryption.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rsa::oaep::Oaep;
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use rsa::{RsaPrivateKey, RsaPublicKey};
use sha2::{Digest as _, Sha256};
use std::fmt;

/// Label prepended when turning protocol values (x, ID_D, Sig.key) into
/// cipher keys; keeps those keys out of any other hash domain.
const SKE_KEY_LABEL: &[u8] = b"SKE-KEY-v1";

const GCM_NONCE_LEN: usize = 12;
const GCM_TAG_LEN: usize = 16;
const GCM_KEY_LEN: usize = 32;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("requested zero random bytes")]
    EmptyRandomRequest,
    #[error("entropy source failure: {0}")]
    EntropyFailure(String),
    #[error("key generation failed: {0}")]
    KeygenFailure(String),
    #[error("plaintext exceeds public-key capacity ({len} > {max} bytes)")]
    OversizePlaintext { len: usize, max: usize },
    #[error("public-key decryption failed")]
    PkeDecryptFailed,
    #[error("public-key encryption failed: {0}")]
    PkeEncryptFailed(String),
    #[error("malformed key encoding")]
    MalformedKey,
    #[error("malformed ciphertext")]
    MalformedCiphertext,
    #[error("authentication tag mismatch")]
    AuthTagMismatch,
    #[error("length mismatch: {left} vs {right} bytes")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty key material")]
    EmptyKeyMaterial,
    #[error("digest has {got} bytes, suite requires {want}")]
    BadDigestLength { got: usize, want: usize },
}

/// Identifier tag for the asymmetric scheme of a suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkeScheme {
    /// 2048-bit RSA with OAEP/SHA-256 padding (randomized).
    Rsa2048Oaep,
}

/// Identifier tag for the symmetric scheme of a suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkeScheme {
    /// AES-256-GCM; ciphertexts carry nonce and tag inline.
    Aes256Gcm,
}

/// Parameter set shared by one deployment's devices and server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CipherSuite {
    suite_id: u8,
    hash_bits: u16,
    id_len: usize,
    dk_len: usize,
    kdf_iterations: u32,
    pke: PkeScheme,
    ske: SkeScheme,
}

/// The single suite defined so far. Wire frames tagged with any other id
/// are rejected.
pub const DEFAULT_SUITE_ID: u8 = 1;

impl CipherSuite {
    /// SHA-256 / RSA-2048-OAEP / AES-256-GCM, c = 10 000, dkLen = 32,
    /// 16-byte device ids.
    pub fn default_suite() -> Self {
        CipherSuite {
            suite_id: DEFAULT_SUITE_ID,
            hash_bits: 256,
            id_len: 16,
            dk_len: 32,
            kdf_iterations: 10_000,
            pke: PkeScheme::Rsa2048Oaep,
            ske: SkeScheme::Aes256Gcm,
        }
    }

    /// Resolves a wire suite id. Unknown ids yield `None`.
    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            DEFAULT_SUITE_ID => Some(Self::default_suite()),
            _ => None,
        }
    }

    pub fn suite_id(&self) -> u8 {
        self.suite_id
    }

    pub fn hash_bits(&self) -> u16 {
        self.hash_bits
    }

    /// Digest length in bytes (h / 8).
    pub fn digest_len(&self) -> usize {
        usize::from(self.hash_bits) / 8
    }

    pub fn id_len(&self) -> usize {
        self.id_len
    }

    pub fn dk_len(&self) -> usize {
        self.dk_len
    }

    pub fn kdf_iterations(&self) -> u32 {
        self.kdf_iterations
    }

    /// H: deterministic hash of arbitrary input to `digest_len` bytes.
    pub fn hash(&self, message: &[u8]) -> Digest {
        Digest(Sha256::digest(message).to_vec())
    }

    /// Validates that `bytes` has the digest length of this suite.
    pub fn digest_from_bytes(&self, bytes: &[u8]) -> Result<Digest, CryptoError> {
        if bytes.len() != self.digest_len() {
            return Err(CryptoError::BadDigestLength {
                got: bytes.len(),
                want: self.digest_len(),
            });
        }
        Ok(Digest(bytes.to_vec()))
    }

    /// Draws a fresh random number of exactly h bits.
    pub fn random_number<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
    ) -> Result<RandomNumber, CryptoError> {
        Ok(RandomNumber(random_bytes(rng, self.digest_len())?))
    }

    pub fn random_number_from_bytes(&self, bytes: &[u8]) -> Result<RandomNumber, CryptoError> {
        if bytes.len() != self.digest_len() {
            return Err(CryptoError::BadDigestLength {
                got: bytes.len(),
                want: self.digest_len(),
            });
        }
        Ok(RandomNumber(bytes.to_vec()))
    }

    /// KeyGen^P.
    pub fn pke_keygen<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
    ) -> Result<PkeKeyPair, CryptoError> {
        match self.pke {
            PkeScheme::Rsa2048Oaep => {
                let private = RsaPrivateKey::new(rng, 2048)
                    .map_err(|e| CryptoError::KeygenFailure(e.to_string()))?;
                let public = RsaPublicKey::from(&private);
                let private_der = private
                    .to_pkcs8_der()
                    .map_err(|e| CryptoError::KeygenFailure(e.to_string()))?;
                let public_der = public
                    .to_public_key_der()
                    .map_err(|e| CryptoError::KeygenFailure(e.to_string()))?;
                Ok(PkeKeyPair {
                    public_key: PkePublicKey(public_der.as_bytes().to_vec()),
                    private_key: PkePrivateKey(private_der.as_bytes().to_vec()),
                })
            }
        }
    }

    /// E^P: randomized public-key encryption. Two calls on equal plaintext
    /// yield unequal ciphertexts.
    pub fn pke_encrypt<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
        public: &PkePublicKey,
        plaintext: &[u8],
    ) -> Result<PkeCiphertext, CryptoError> {
        match self.pke {
            PkeScheme::Rsa2048Oaep => {
                let key = RsaPublicKey::from_public_key_der(&public.0)
                    .map_err(|_| CryptoError::MalformedKey)?;
                // OAEP/SHA-256 capacity for a 2048-bit modulus.
                let max = 256 - 2 * 32 - 2;
                if plaintext.len() > max {
                    return Err(CryptoError::OversizePlaintext {
                        len: plaintext.len(),
                        max,
                    });
                }
                let ct = key
                    .encrypt(rng, Oaep::new::<Sha256>(), plaintext)
                    .map_err(|e| CryptoError::PkeEncryptFailed(e.to_string()))?;
                Ok(PkeCiphertext(ct))
            }
        }
    }

    /// D^P. Any tampering or key mismatch surfaces as `PkeDecryptFailed`.
    pub fn pke_decrypt(
        &self,
        private: &PkePrivateKey,
        ciphertext: &PkeCiphertext,
    ) -> Result<Vec<u8>, CryptoError> {
        match self.pke {
            PkeScheme::Rsa2048Oaep => {
                let key = RsaPrivateKey::from_pkcs8_der(&private.0)
                    .map_err(|_| CryptoError::MalformedKey)?;
                key.decrypt(Oaep::new::<Sha256>(), &ciphertext.0)
                    .map_err(|_| CryptoError::PkeDecryptFailed)
            }
        }
    }

    /// Maps arbitrary key material (x, ID_D, Sig.key) to a cipher key:
    /// H(label || material) truncated to the cipher key length.
    pub fn ske_key_from_material(&self, material: &KeyMaterial) -> Vec<u8> {
        match self.ske {
            SkeScheme::Aes256Gcm => {
                let mut hasher = Sha256::new();
                hasher.update(SKE_KEY_LABEL);
                hasher.update(material.expose());
                hasher.finalize()[..GCM_KEY_LEN].to_vec()
            }
        }
    }

    /// E^S: authenticated encryption under a key derived from `material`.
    /// The fresh nonce is carried at the front of the ciphertext.
    pub fn ske_encrypt<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
        material: &KeyMaterial,
        plaintext: &[u8],
    ) -> Result<SkeCiphertext, CryptoError> {
        match self.ske {
            SkeScheme::Aes256Gcm => {
                let key = self.ske_key_from_material(material);
                let cipher =
                    Aes256Gcm::new_from_slice(&key).map_err(|_| CryptoError::MalformedKey)?;
                let nonce_bytes = random_bytes(rng, GCM_NONCE_LEN)?;
                let sealed = cipher
                    .encrypt(Nonce::from_slice(&nonce_bytes), Payload::from(plaintext))
                    .map_err(|_| CryptoError::AuthTagMismatch)?;
                let mut out = nonce_bytes;
                out.extend_from_slice(&sealed);
                Ok(SkeCiphertext(out))
            }
        }
    }

    /// D^S. Wrong material or any ciphertext mutation fails the tag check.
    pub fn ske_decrypt(
        &self,
        material: &KeyMaterial,
        ciphertext: &SkeCiphertext,
    ) -> Result<Vec<u8>, CryptoError> {
        match self.ske {
            SkeScheme::Aes256Gcm => {
                if ciphertext.0.len() < GCM_NONCE_LEN + GCM_TAG_LEN {
                    return Err(CryptoError::MalformedCiphertext);
                }
                let key = self.ske_key_from_material(material);
                let cipher =
                    Aes256Gcm::new_from_slice(&key).map_err(|_| CryptoError::MalformedKey)?;
                let (nonce_bytes, sealed) = ciphertext.0.split_at(GCM_NONCE_LEN);
                cipher
                    .decrypt(Nonce::from_slice(nonce_bytes), Payload::from(sealed))
                    .map_err(|_| CryptoError::AuthTagMismatch)
            }
        }
    }

    /// PBKDF2 with the suite hash as PRF core.
    pub fn derive_key(
        &self,
        password: &KeyMaterial,
        salt: &[u8],
        iterations: u32,
        dk_len: usize,
    ) -> KeyMaterial {
        let mut out = vec![0u8; dk_len];
        pbkdf2::pbkdf2_hmac::<Sha256>(password.expose(), salt, iterations, &mut out);
        KeyMaterial(out)
    }
}

/// Fills `n >= 1` octets from the given generator.
pub fn random_bytes<R: RngCore + CryptoRng>(
    rng: &mut R,
    n: usize,
) -> Result<Vec<u8>, CryptoError> {
    if n == 0 {
        return Err(CryptoError::EmptyRandomRequest);
    }
    let mut buf = vec![0u8; n];
    rng.try_fill_bytes(&mut buf)
        .map_err(|e| CryptoError::EntropyFailure(e.to_string()))?;
    Ok(buf)
}

/// Bytewise exclusive-or of two equal-length strings.
///
/// The involution `xor(xor(h, r), r) = h` is what lets the server unmask
/// H(ID_D) from x and r_D.
pub fn xor_digest(a: &[u8], b: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if a.len() != b.len() {
        return Err(CryptoError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x ^ y).collect())
}

/// Deterministic generator for the test suite. Production paths use
/// [`rand::rngs::OsRng`] instead.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Output of H: always `digest_len` bytes for the suite that produced it.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(Vec<u8>);

impl Digest {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }

    /// For values already known to be digest-shaped (e.g. the XOR of a
    /// digest and a same-length random number).
    pub(crate) fn from_raw(bytes: Vec<u8>) -> Self {
        Digest(bytes)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", hex::encode(&self.0))
    }
}

/// Per-device session random number r_D / r_new; fixed at h bits.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RandomNumber(Vec<u8>);

impl RandomNumber {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }
}

impl fmt::Debug for RandomNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RandomNumber({})", hex::encode(&self.0))
    }
}

/// Secret bytes used as encryption-key input. Debug output is redacted and
/// nothing here is serialized by the wire or transcript code.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial(Vec<u8>);

impl KeyMaterial {
    pub fn new(bytes: Vec<u8>) -> Result<Self, CryptoError> {
        if bytes.is_empty() {
            return Err(CryptoError::EmptyKeyMaterial);
        }
        Ok(KeyMaterial(bytes))
    }

    pub fn expose(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyMaterial([{} bytes redacted])", self.0.len())
    }
}

/// DER-encoded public half of the server keypair (e^P).
#[derive(Clone, PartialEq, Eq)]
pub struct PkePublicKey(pub Vec<u8>);

impl fmt::Debug for PkePublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PkePublicKey({} bytes)", self.0.len())
    }
}

/// DER-encoded private half (d^P); known only to the server.
#[derive(Clone, PartialEq, Eq)]
pub struct PkePrivateKey(pub Vec<u8>);

impl fmt::Debug for PkePrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PkePrivateKey([redacted])")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkeKeyPair {
    pub public_key: PkePublicKey,
    pub private_key: PkePrivateKey,
}

/// Opaque public-key ciphertext (a).
#[derive(Clone, PartialEq, Eq)]
pub struct PkeCiphertext(pub Vec<u8>);

impl PkeCiphertext {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for PkeCiphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PkeCiphertext({} bytes)", self.0.len())
    }
}

/// Opaque symmetric ciphertext (C, b, g, vault); nonce and tag inline.
#[derive(Clone, PartialEq, Eq)]
pub struct SkeCiphertext(pub Vec<u8>);

impl SkeCiphertext {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for SkeCiphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SkeCiphertext({} bytes)", self.0.len())
    }
}

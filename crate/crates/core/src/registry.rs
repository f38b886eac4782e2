//! The authentication server's persistent store: signature records keyed
//! by H(ID_D), per-device random-number rotation, and the replay ledger.
//!
//! Freshness is two-slot: the current random number plus the previous one,
//! so a device that never saw a response can retry once re-encrypted.
//! Everything older sits in a bounded retired set and is stale. The ledger
//! additionally remembers fingerprints of accepted requests: a
//! byte-identical replay is rejected even while its random number is still
//! inside the freshness window, which is exactly the gap between "the
//! response was lost" and "an eavesdropper resent the capture".

use crate::crypto::{CipherSuite, CryptoError, Digest, RandomNumber};
use crate::protocol::{DeviceState, SignatureRecord};
use crate::store::{atomic_write, put_block, put_u32, ByteReader, StoreError};
use rand::{CryptoRng, RngCore};
use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"SKR1";
pub const SNAPSHOT_VERSION: u8 = 1;

/// Default bound on each entry's retired set and accepted-request ledger.
pub const DEFAULT_RETAIN: usize = 1024;

const REGISTER_ATTEMPTS: u32 = 64;

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("could not draw a unique value after {0} attempts")]
    UniquenessExhausted(u32),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad snapshot magic")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown suite id {0}")]
    UnknownSuite(u8),
    #[error("corrupt snapshot: {0}")]
    Corrupt(&'static str),
}

impl From<StoreError> for SnapshotError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Truncated => SnapshotError::Corrupt("truncated"),
            StoreError::TrailingBytes => SnapshotError::Corrupt("trailing bytes"),
        }
    }
}

/// How a presented random number relates to the entry's rotation state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freshness {
    Current,
    Previous,
    Stale,
}

/// Which slot a successful identification consumed, and therefore how the
/// entry rotates when the response is issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationMode {
    FromCurrent,
    FromPrevious,
}

/// One device's server-side record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    h_id: Digest,
    sig: SignatureRecord,
    r_current: RandomNumber,
    r_previous: Option<RandomNumber>,
    retired: VecDeque<RandomNumber>,
    accepted: VecDeque<Digest>,
}

impl RegistryEntry {
    pub fn h_id(&self) -> &Digest {
        &self.h_id
    }

    pub fn sig(&self) -> &SignatureRecord {
        &self.sig
    }

    pub fn r_current(&self) -> &RandomNumber {
        &self.r_current
    }

    pub fn r_previous(&self) -> Option<&RandomNumber> {
        self.r_previous.as_ref()
    }

    pub fn retired(&self) -> impl Iterator<Item = &RandomNumber> {
        self.retired.iter()
    }

    /// Current iff the presented value is r_current, Previous iff it is the
    /// one-older slot, Stale otherwise (retired values included).
    pub fn freshness(&self, presented: &RandomNumber) -> Freshness {
        if *presented == self.r_current {
            Freshness::Current
        } else if self.r_previous.as_ref() == Some(presented) {
            Freshness::Previous
        } else {
            Freshness::Stale
        }
    }

    /// True if the value appears anywhere in the entry's retained set
    /// (current, previous, or retired); this is the (4-1) collision test.
    pub fn retains(&self, r: &RandomNumber) -> bool {
        *r == self.r_current
            || self.r_previous.as_ref() == Some(r)
            || self.retired.contains(r)
    }

    pub fn was_accepted(&self, fingerprint: &Digest) -> bool {
        self.accepted.contains(fingerprint)
    }
}

/// Signature store plus rotation and ledger state; one logical writer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    suite: CipherSuite,
    retain: usize,
    entries: BTreeMap<Digest, RegistryEntry>,
}

impl Registry {
    pub fn new(suite: CipherSuite) -> Self {
        Self::with_retention(suite, DEFAULT_RETAIN)
    }

    pub fn with_retention(suite: CipherSuite, retain: usize) -> Self {
        Registry {
            suite,
            retain,
            entries: BTreeMap::new(),
        }
    }

    pub fn suite(&self) -> &CipherSuite {
        &self.suite
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    /// Preparation step: mints a device id, data key and first random
    /// number (all unique), stores the signature record under H(ID_D), and
    /// hands back the device's half, which never includes sig.key.
    pub fn register_device<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
    ) -> Result<DeviceState, RegistryError> {
        let (id_d, h_id) = self.draw_unique_id(rng)?;
        let key = crate::crypto::random_bytes(rng, self.suite.dk_len())?;
        let r = self.draw_unique_r(rng)?;
        let entry = RegistryEntry {
            h_id: h_id.clone(),
            sig: SignatureRecord::new(id_d.clone(), key),
            r_current: r.clone(),
            r_previous: None,
            retired: VecDeque::new(),
            accepted: VecDeque::new(),
        };
        self.entries.insert(h_id, entry);
        Ok(DeviceState::new(id_d, r, self.suite.suite_id()))
    }

    fn draw_unique_id<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
    ) -> Result<(Vec<u8>, Digest), RegistryError> {
        for _ in 0..REGISTER_ATTEMPTS {
            let id = crate::crypto::random_bytes(rng, self.suite.id_len())?;
            let h_id = self.suite.hash(&id);
            if !self.entries.contains_key(&h_id) {
                return Ok((id, h_id));
            }
        }
        Err(RegistryError::UniquenessExhausted(REGISTER_ATTEMPTS))
    }

    fn draw_unique_r<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
    ) -> Result<RandomNumber, RegistryError> {
        for _ in 0..REGISTER_ATTEMPTS {
            let r = self.suite.random_number(rng)?;
            if !self.entries.values().any(|e| e.retains(&r)) {
                return Ok(r);
            }
        }
        Err(RegistryError::UniquenessExhausted(REGISTER_ATTEMPTS))
    }

    /// Exact-match lookup by the search primary key H(ID_D).
    pub fn lookup(&self, h_id: &Digest) -> Option<&RegistryEntry> {
        self.entries.get(h_id)
    }

    /// Moves the entry's random-number window forward. FromCurrent shifts
    /// current into previous (retiring the old previous); FromPrevious
    /// replaces only the never-confirmed current, keeping previous so the
    /// desynced device can still re-encrypt its retry.
    pub fn rotate(&mut self, h_id: &Digest, r_new: RandomNumber, mode: RotationMode) {
        let retain = self.retain;
        let Some(entry) = self.entries.get_mut(h_id) else {
            return;
        };
        match mode {
            RotationMode::FromCurrent => {
                if let Some(prev) = entry.r_previous.take() {
                    push_bounded(&mut entry.retired, prev, retain);
                }
                entry.r_previous = Some(std::mem::replace(&mut entry.r_current, r_new));
            }
            RotationMode::FromPrevious => {
                let old_current = std::mem::replace(&mut entry.r_current, r_new);
                push_bounded(&mut entry.retired, old_current, retain);
            }
        }
    }

    /// Appends an accepted request fingerprint to the replay ledger.
    pub fn record_accepted(&mut self, h_id: &Digest, fingerprint: Digest) {
        let retain = self.retain;
        if let Some(entry) = self.entries.get_mut(h_id) {
            push_bounded(&mut entry.accepted, fingerprint, retain);
        }
    }

    /// Snapshot body; entries serialize in key order, so equal registries
    /// produce identical bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        out.push(SNAPSHOT_VERSION);
        out.push(self.suite.suite_id());
        put_u32(&mut out, self.entries.len() as u32);
        for entry in self.entries.values() {
            put_block(&mut out, entry.h_id.as_bytes());
            put_block(&mut out, entry.sig.id_d());
            put_block(&mut out, entry.sig.key());
            put_block(&mut out, entry.r_current.as_bytes());
            match &entry.r_previous {
                Some(prev) => {
                    out.push(1);
                    put_block(&mut out, prev.as_bytes());
                }
                None => out.push(0),
            }
            put_u32(&mut out, entry.retired.len() as u32);
            for r in &entry.retired {
                put_block(&mut out, r.as_bytes());
            }
            put_u32(&mut out, entry.accepted.len() as u32);
            for fp in &entry.accepted {
                put_block(&mut out, fp.as_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let version = r.take_u8()?;
        if version != SNAPSHOT_VERSION {
            return Err(SnapshotError::UnsupportedVersion(version));
        }
        let suite_id = r.take_u8()?;
        let suite =
            CipherSuite::from_id(suite_id).ok_or(SnapshotError::UnknownSuite(suite_id))?;
        let count = r.take_u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let h_id = suite
                .digest_from_bytes(r.take_block()?)
                .map_err(|_| SnapshotError::Corrupt("h_id length"))?;
            let id_d = r.take_block()?.to_vec();
            let key = r.take_block()?.to_vec();
            if suite.hash(&id_d) != h_id {
                return Err(SnapshotError::Corrupt("h_id does not match id_d"));
            }
            let r_current = suite
                .random_number_from_bytes(r.take_block()?)
                .map_err(|_| SnapshotError::Corrupt("r_current length"))?;
            let r_previous = match r.take_u8()? {
                0 => None,
                1 => Some(
                    suite
                        .random_number_from_bytes(r.take_block()?)
                        .map_err(|_| SnapshotError::Corrupt("r_previous length"))?,
                ),
                _ => return Err(SnapshotError::Corrupt("r_previous flag")),
            };
            let retired_count = r.take_u32()?;
            let mut retired = VecDeque::new();
            for _ in 0..retired_count {
                retired.push_back(
                    suite
                        .random_number_from_bytes(r.take_block()?)
                        .map_err(|_| SnapshotError::Corrupt("retired length"))?,
                );
            }
            let accepted_count = r.take_u32()?;
            let mut accepted = VecDeque::new();
            for _ in 0..accepted_count {
                accepted.push_back(
                    suite
                        .digest_from_bytes(r.take_block()?)
                        .map_err(|_| SnapshotError::Corrupt("fingerprint length"))?,
                );
            }
            entries.insert(
                h_id.clone(),
                RegistryEntry {
                    h_id,
                    sig: SignatureRecord::new(id_d, key),
                    r_current,
                    r_previous,
                    retired,
                    accepted,
                },
            );
        }
        r.finish()?;
        Ok(Registry {
            suite,
            retain: DEFAULT_RETAIN,
            entries,
        })
    }

    /// Atomic write via temp-file-and-rename.
    pub fn save_snapshot(&self, path: &Path) -> Result<(), SnapshotError> {
        atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self, SnapshotError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn push_bounded<T: PartialEq>(queue: &mut VecDeque<T>, value: T, cap: usize) {
    queue.push_back(value);
    while queue.len() > cap {
        queue.pop_front();
    }
}

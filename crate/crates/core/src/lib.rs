//! Mutual identification and data-encrypt-key management for secure mobile
//! devices (secure USB tokens, smart cards, RFID tags).
//!
//! A device and an authentication server run a three-message exchange over
//! an untrusted broker: the broker says `Hello`, the device answers with a
//! masked identity challenge, and the server, after locating the device by
//! the unmasked search key, returns a fresh session random number together
//! with the device's signature record (its id and data-encrypt key) wrapped
//! under a PBKDF2-derived key both ends compute independently. Replays are
//! rejected by per-device random-number rotation plus a ledger of accepted
//! requests; captured traffic never contains a device identifier in the
//! clear, so sessions of one device cannot be linked by field equality.
//!
//! Module map:
//! - [`crypto`]: hash, PKE, SKE, PBKDF2 and the [`crypto::CipherSuite`]
//!   parameter bundle.
//! - [`wire`]: bit-exact frame encoding for the three protocol messages.
//! - [`protocol`]: device and server state machines plus the device vault.
//! - [`registry`]: the server's persistent signature store, rotation and
//!   replay ledger.
//! - [`harness`]: deterministic simulated network with a scriptable
//!   adversary, the anonymity probe, and a loopback TCP transport.

pub mod crypto;
pub mod harness;
pub mod protocol;
pub mod registry;
mod store;
pub mod wire;

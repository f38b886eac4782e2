//! Cross-module protocol invariants: identification soundness over every
//! valid/invalid credential combination, state-change discipline, and
//! failure atomicity.

use skp_core::crypto::{seeded_rng, CipherSuite, PkeKeyPair, RandomNumber};
use skp_core::harness::{run_honest_session, SimNetwork};
use skp_core::protocol::{
    device_build_request, device_process_response, server_build_response, server_process_request,
    vault_seal, DeviceState, ProtocolError, ServerDecision,
};
use skp_core::registry::{Registry, RotationMode};
use std::sync::OnceLock;

fn suite() -> CipherSuite {
    CipherSuite::default_suite()
}

fn server_keys() -> &'static PkeKeyPair {
    static KEYS: OnceLock<PkeKeyPair> = OnceLock::new();
    KEYS.get_or_init(|| suite().pke_keygen(&mut seeded_rng(0x1DEA)).unwrap())
}

/// A device state forged from arbitrary (id, r); the registry only accepts
/// requests whose pair is currently live, no matter how honest the
/// encryption around it is.
fn forged_device(id_source: &DeviceState, r: &RandomNumber) -> DeviceState {
    let mut forged = id_source.clone();
    force_r(&mut forged, r);
    forged
}

fn force_r(dev: &mut DeviceState, r: &RandomNumber) {
    // Round-trip through the device file to set r without new accessors.
    let s = suite();
    let mut bytes = dev.to_bytes();
    // Layout: magic(4) version(1) suite(1) len(4) id len(4) r ...
    let id_len = s.id_len();
    let r_start = 4 + 1 + 1 + 4 + id_len + 4;
    bytes[r_start..r_start + s.digest_len()].copy_from_slice(r.as_bytes());
    *dev = DeviceState::from_bytes(&bytes).unwrap();
}

/// Server returns Identified iff the request was built from an (ID_D, r)
/// pair currently valid in the registry: exhaustive over five devices and
/// every credential class.
#[test]
fn identification_soundness_over_all_credential_classes() {
    let s = suite();
    let keys = server_keys();
    let mut rng = seeded_rng(900);
    let mut registry = Registry::new(s);
    let devices: Vec<DeviceState> = (0..5)
        .map(|_| registry.register_device(&mut rng).unwrap())
        .collect();

    // Rotate device 0 twice so it has a previous slot and a retired value.
    let h0 = s.hash(devices[0].id_d());
    let r0_initial = devices[0].r_current().clone();
    let r0_second = s.random_number(&mut rng).unwrap();
    let r0_third = s.random_number(&mut rng).unwrap();
    registry.rotate(&h0, r0_second.clone(), RotationMode::FromCurrent);
    registry.rotate(&h0, r0_third.clone(), RotationMode::FromCurrent);

    // Valid: every device with its current r.
    for (i, dev) in devices.iter().enumerate() {
        let dev = if i == 0 {
            forged_device(dev, &r0_third)
        } else {
            dev.clone()
        };
        let req = device_build_request(&dev, &keys.public_key, &s, &mut rng).unwrap();
        let decision = server_process_request(&req, &keys.private_key, &mut registry);
        assert!(decision.is_identified(), "device {i} with current r");
    }

    // Valid: device 0 with its previous r.
    let with_previous = forged_device(&devices[0], &r0_second);
    let req = device_build_request(&with_previous, &keys.public_key, &s, &mut rng).unwrap();
    assert!(
        server_process_request(&req, &keys.private_key, &mut registry).is_identified(),
        "previous r must identify (desync recovery)"
    );

    // Invalid: device 0 with its retired first r.
    let with_retired = forged_device(&devices[0], &r0_initial);
    let req = device_build_request(&with_retired, &keys.public_key, &s, &mut rng).unwrap();
    assert_eq!(
        server_process_request(&req, &keys.private_key, &mut registry).error(),
        Some(ProtocolError::ReplayDetected),
        "retired r must be stale"
    );

    // Invalid: right id, random never-issued r.
    for dev in &devices {
        let random_r = s.random_number(&mut rng).unwrap();
        let forged = forged_device(dev, &random_r);
        let req = device_build_request(&forged, &keys.public_key, &s, &mut rng).unwrap();
        assert_eq!(
            server_process_request(&req, &keys.private_key, &mut registry).error(),
            Some(ProtocolError::ReplayDetected)
        );
    }

    // Invalid: device A's id with device B's live r. The unmasked search
    // key is still A's, so the pair fails A's freshness window.
    for a in 0..5usize {
        for b in 0..5usize {
            if a == b {
                continue;
            }
            let r_b = registry
                .lookup(&s.hash(devices[b].id_d()))
                .unwrap()
                .r_current()
                .clone();
            let forged = forged_device(&devices[a], &r_b);
            let req = device_build_request(&forged, &keys.public_key, &s, &mut rng).unwrap();
            assert_eq!(
                server_process_request(&req, &keys.private_key, &mut registry).error(),
                Some(ProtocolError::ReplayDetected),
                "id of device {a} with r of device {b}"
            );
        }
    }

    // Invalid: unregistered id with a live r of a registered device.
    let mut foreign_registry = Registry::new(s);
    let stranger = foreign_registry.register_device(&mut rng).unwrap();
    let req = device_build_request(&stranger, &keys.public_key, &s, &mut rng).unwrap();
    assert_eq!(
        server_process_request(&req, &keys.private_key, &mut registry).error(),
        Some(ProtocolError::UnknownDevice)
    );
}

/// Device r changes iff the decision is ServerAuthenticated, and the
/// registry rotates exactly once per identified request.
#[test]
fn state_change_discipline() {
    let s = suite();
    let keys = server_keys();
    let mut rng = seeded_rng(901);
    let mut registry = Registry::new(s);
    let mut dev = registry.register_device(&mut rng).unwrap();
    let h_id = s.hash(dev.id_d());

    // Honest run: device r changes, registry rotates exactly once.
    let r_before = dev.r_current().clone();
    let entry_before = registry.lookup(&h_id).unwrap().clone();
    let req = device_build_request(&dev, &keys.public_key, &s, &mut rng).unwrap();
    let decision = server_process_request(&req, &keys.private_key, &mut registry);
    let resp = server_build_response(&decision, &mut registry, &s, &mut rng).unwrap();
    let entry_after = registry.lookup(&h_id).unwrap();
    assert_eq!(entry_after.r_previous(), Some(&r_before));
    assert_ne!(entry_after.r_current(), entry_before.r_current());
    let outcome = device_process_response(&mut dev, &resp, &s);
    assert!(outcome.is_authenticated());
    assert_eq!(dev.r_current(), entry_after.r_current());

    // Rejected run: nothing moves on the device.
    let mut resp2 = {
        let req = device_build_request(&dev, &keys.public_key, &s, &mut rng).unwrap();
        let decision = server_process_request(&req, &keys.private_key, &mut registry);
        server_build_response(&decision, &mut registry, &s, &mut rng).unwrap()
    };
    resp2.h_y = s.hash(b"forged");
    let r_now = dev.r_current().clone();
    let outcome = device_process_response(&mut dev, &resp2, &s);
    assert!(!outcome.is_authenticated());
    assert_eq!(dev.r_current(), &r_now);
}

/// Any rejected outcome leaves device state and vault byte-identical.
#[test]
fn failure_atomicity_covers_the_vault() {
    let s = suite();
    let keys = server_keys();
    let mut rng = seeded_rng(902);
    let mut registry = Registry::new(s);
    let mut dev = registry.register_device(&mut rng).unwrap();
    vault_seal(&mut dev, &vec![7u8; s.dk_len()], b"precious", &s, &mut rng).unwrap();

    let before = dev.to_bytes();
    for corrupt in 0..4 {
        let req = device_build_request(&dev, &keys.public_key, &s, &mut rng).unwrap();
        let decision = server_process_request(&req, &keys.private_key, &mut registry);
        let mut resp = server_build_response(&decision, &mut registry, &s, &mut rng).unwrap();
        match corrupt {
            0 => resp.b = skp_core::crypto::SkeCiphertext(vec![1; 40]),
            1 => resp.h_y = s.hash(b"x"),
            2 => resp.h_rnew = s.hash(b"y"),
            _ => resp.g = skp_core::crypto::SkeCiphertext(vec![2; 40]),
        }
        let outcome = device_process_response(&mut dev, &resp, &s);
        assert!(!outcome.is_authenticated());
        assert_eq!(dev.to_bytes(), before, "corruption {corrupt} moved device state");
    }

    // And the honest run afterwards still works (previous-slot recovery).
    let mut net = SimNetwork::new(903);
    let outcome = run_honest_session(&mut net, &mut dev, &mut registry, keys).unwrap();
    assert!(outcome.completed());
    match outcome.server_decision {
        Some(ServerDecision::Identified { .. }) => {}
        other => panic!("expected identification, got {other:?}"),
    }
}

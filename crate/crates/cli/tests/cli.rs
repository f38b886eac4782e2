//! End-to-end tests of the `skp` binary: every command exercised through
//! real processes, with the serve/auth pair on loopback TCP.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

fn skp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skp"))
}

fn run(args: &[&str]) -> Output {
    skp().args(args).output().expect("spawn skp")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

struct Keypair {
    prefix: PathBuf,
}

impl Keypair {
    fn generate(dir: &Path, seed: u64) -> Self {
        let prefix = dir.join("server");
        let out = run(&[
            "keygen",
            "--out",
            prefix.to_str().unwrap(),
            "--insecure-seed",
            &seed.to_string(),
        ]);
        assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
        Keypair { prefix }
    }

    fn public(&self) -> PathBuf {
        self.prefix.with_extension("pub")
    }

    fn prefix_str(&self) -> &str {
        self.prefix.to_str().unwrap()
    }
}

struct ServeGuard {
    child: Child,
    addr: String,
}

impl ServeGuard {
    fn start(registry: &Path, keys: &Keypair, seed: u64) -> Self {
        let mut child = skp()
            .args([
                "serve",
                "--registry",
                registry.to_str().unwrap(),
                "--keys",
                keys.prefix_str(),
                "--bind",
                "127.0.0.1:0",
                "--insecure-seed",
                &seed.to_string(),
            ])
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .expect("spawn serve");
        let stdout = child.stdout.take().expect("serve stdout");
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line).expect("readiness line");
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected readiness line: {line:?}"))
            .to_string();
        ServeGuard { child, addr }
    }
}

impl Drop for ServeGuard {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn keygen_writes_pair_with_private_permissions() {
    let dir = tempfile::tempdir().unwrap();
    let keys = Keypair::generate(dir.path(), 1);
    assert!(keys.public().exists());
    let key_path = keys.prefix.with_extension("key");
    assert!(key_path.exists());
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = std::fs::metadata(&key_path).unwrap().permissions().mode();
        assert_eq!(mode & 0o777, 0o600, "private key must be 0600");
    }

    // A second keygen yields a different public key.
    let other = dir.path().join("other");
    let out = run(&[
        "keygen",
        "--out",
        other.to_str().unwrap(),
        "--insecure-seed",
        "2",
    ]);
    assert_eq!(exit_code(&out), 0);
    assert_ne!(
        std::fs::read(keys.public()).unwrap(),
        std::fs::read(other.with_extension("pub")).unwrap()
    );
}

#[test]
fn keygen_to_unwritable_path_leaves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-dir").join("server");
    let out = run(&["keygen", "--out", missing.to_str().unwrap(), "--insecure-seed", "3"]);
    assert_ne!(exit_code(&out), 0);
    assert!(!missing.with_extension("pub").exists());
    assert!(!missing.with_extension("key").exists());
}

#[test]
fn provision_writes_device_without_sig_key_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry.skr");
    let device = dir.path().join("device.skd");
    let out = run(&[
        "provision",
        "--registry",
        registry.to_str().unwrap(),
        "--device",
        device.to_str().unwrap(),
        "--insecure-seed",
        "4",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    assert!(registry.exists());
    assert!(device.exists());

    // The registry snapshot holds the data key; the device file must not.
    let snapshot = skp_core::registry::Registry::load_snapshot(&registry).unwrap();
    let entry = snapshot.entries().next().unwrap();
    let sig_key = entry.sig().key();
    let device_bytes = std::fs::read(&device).unwrap();
    assert!(!device_bytes
        .windows(sig_key.len())
        .any(|w| w == sig_key));
}

#[test]
fn serve_auth_vault_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry.skr");
    let device = dir.path().join("device.skd");
    let keys = Keypair::generate(dir.path(), 5);

    let out = run(&[
        "provision",
        "--registry",
        registry.to_str().unwrap(),
        "--device",
        device.to_str().unwrap(),
        "--insecure-seed",
        "6",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));

    // A second provisioned device, registered before the server starts.
    let second = dir.path().join("second.skd");
    let out = run(&[
        "provision",
        "--registry",
        registry.to_str().unwrap(),
        "--device",
        second.to_str().unwrap(),
        "--insecure-seed",
        "90",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    assert_ne!(
        std::fs::read(&device).unwrap(),
        std::fs::read(&second).unwrap()
    );

    let server = ServeGuard::start(&registry, &keys, 7);

    // Vault open before any seal: the key is unknown yet, so first auth.
    let key_file = dir.path().join("sig.keyfile");
    let auth = run(&[
        "auth",
        "--device",
        device.to_str().unwrap(),
        "--server-pub",
        keys.public().to_str().unwrap(),
        "--connect",
        &server.addr,
        "--key-out",
        key_file.to_str().unwrap(),
        "--insecure-seed",
        "8",
    ]);
    assert_eq!(exit_code(&auth), 0, "{}", stderr_of(&auth));
    assert!(key_file.exists());
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = std::fs::metadata(&key_file).unwrap().permissions().mode();
        assert_eq!(mode & 0o777, 0o600);
    }

    // Open before seal reports the empty vault.
    let plain_out = dir.path().join("opened.bin");
    let open_early = run(&[
        "vault",
        "open",
        "--device",
        device.to_str().unwrap(),
        "--key-file",
        key_file.to_str().unwrap(),
        "--out",
        plain_out.to_str().unwrap(),
        "--keep-key",
    ]);
    assert_eq!(exit_code(&open_early), 23, "{}", stderr_of(&open_early));

    // Seal, keeping the key file for the open that follows.
    let data = dir.path().join("secret.txt");
    std::fs::write(&data, b"hello vault").unwrap();
    let seal = run(&[
        "vault",
        "seal",
        "--device",
        device.to_str().unwrap(),
        "--key-file",
        key_file.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--keep-key",
    ]);
    assert_eq!(exit_code(&seal), 0, "{}", stderr_of(&seal));

    // A second auth still works after the vault write (rotation continues).
    let auth2 = run(&[
        "auth",
        "--device",
        device.to_str().unwrap(),
        "--server-pub",
        keys.public().to_str().unwrap(),
        "--connect",
        &server.addr,
        "--insecure-seed",
        "9",
    ]);
    assert_eq!(exit_code(&auth2), 0, "{}", stderr_of(&auth2));

    // Open consumes (deletes) the key file by default.
    let open = run(&[
        "vault",
        "open",
        "--device",
        device.to_str().unwrap(),
        "--key-file",
        key_file.to_str().unwrap(),
        "--out",
        plain_out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&open), 0, "{}", stderr_of(&open));
    assert_eq!(std::fs::read(&plain_out).unwrap(), b"hello vault");
    assert!(!key_file.exists(), "key file must be scrubbed on completion");

    // The second device authenticates too.
    let auth3 = run(&[
        "auth",
        "--device",
        second.to_str().unwrap(),
        "--server-pub",
        keys.public().to_str().unwrap(),
        "--connect",
        &server.addr,
        "--insecure-seed",
        "91",
    ]);
    assert_eq!(exit_code(&auth3), 0, "{}", stderr_of(&auth3));
}

#[test]
fn auth_against_stopped_server_leaves_device_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry.skr");
    let device = dir.path().join("device.skd");
    let keys = Keypair::generate(dir.path(), 10);
    let out = run(&[
        "provision",
        "--registry",
        registry.to_str().unwrap(),
        "--device",
        device.to_str().unwrap(),
        "--insecure-seed",
        "11",
    ]);
    assert_eq!(exit_code(&out), 0);

    let before = std::fs::read(&device).unwrap();
    // Nothing listens on this port: bind-then-drop to get a dead address.
    let dead_addr = {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().to_string()
    };
    let auth = run(&[
        "auth",
        "--device",
        device.to_str().unwrap(),
        "--server-pub",
        keys.public().to_str().unwrap(),
        "--connect",
        &dead_addr,
        "--insecure-seed",
        "12",
    ]);
    assert_eq!(exit_code(&auth), 20, "{}", stderr_of(&auth));
    assert_eq!(std::fs::read(&device).unwrap(), before);
}

#[test]
fn auth_with_stale_device_is_unknown_device() {
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry.skr");
    let device = dir.path().join("device.skd");
    let keys = Keypair::generate(dir.path(), 13);

    // Provision against one registry, then reset it: the serving registry
    // has never seen this device.
    let out = run(&[
        "provision",
        "--registry",
        registry.to_str().unwrap(),
        "--device",
        device.to_str().unwrap(),
        "--insecure-seed",
        "14",
    ]);
    assert_eq!(exit_code(&out), 0);
    std::fs::remove_file(&registry).unwrap();
    let other_device = dir.path().join("other.skd");
    let out = run(&[
        "provision",
        "--registry",
        registry.to_str().unwrap(),
        "--device",
        other_device.to_str().unwrap(),
        "--insecure-seed",
        "15",
    ]);
    assert_eq!(exit_code(&out), 0);

    let server = ServeGuard::start(&registry, &keys, 16);
    let before = std::fs::read(&device).unwrap();
    let auth = run(&[
        "auth",
        "--device",
        device.to_str().unwrap(),
        "--server-pub",
        keys.public().to_str().unwrap(),
        "--connect",
        &server.addr,
        "--insecure-seed",
        "17",
    ]);
    assert_eq!(exit_code(&auth), 13, "{}", stderr_of(&auth));
    assert_eq!(std::fs::read(&device).unwrap(), before);
}

#[test]
fn open_with_tampered_vault_reports_tag_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry.skr");
    let device = dir.path().join("device.skd");
    let keys = Keypair::generate(dir.path(), 18);
    run(&[
        "provision",
        "--registry",
        registry.to_str().unwrap(),
        "--device",
        device.to_str().unwrap(),
        "--insecure-seed",
        "19",
    ]);
    let server = ServeGuard::start(&registry, &keys, 20);

    let key_file = dir.path().join("sig.keyfile");
    let auth = run(&[
        "auth",
        "--device",
        device.to_str().unwrap(),
        "--server-pub",
        keys.public().to_str().unwrap(),
        "--connect",
        &server.addr,
        "--key-out",
        key_file.to_str().unwrap(),
        "--insecure-seed",
        "21",
    ]);
    assert_eq!(exit_code(&auth), 0, "{}", stderr_of(&auth));

    let data = dir.path().join("data.bin");
    std::fs::write(&data, vec![0xAB; 256]).unwrap();
    let seal = run(&[
        "vault",
        "seal",
        "--device",
        device.to_str().unwrap(),
        "--key-file",
        key_file.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--keep-key",
    ]);
    assert_eq!(exit_code(&seal), 0);

    // Flip one byte near the end of the device file (inside the vault).
    let mut bytes = std::fs::read(&device).unwrap();
    let idx = bytes.len() - 4;
    bytes[idx] ^= 0x01;
    std::fs::write(&device, &bytes).unwrap();

    let open = run(&[
        "vault",
        "open",
        "--device",
        device.to_str().unwrap(),
        "--key-file",
        key_file.to_str().unwrap(),
        "--out",
        dir.path().join("out.bin").to_str().unwrap(),
        "--keep-key",
    ]);
    assert_eq!(exit_code(&open), 22, "{}", stderr_of(&open));
}

#[test]
fn attack_scenarios_pass_and_unknown_scenario_is_usage_error() {
    let replay = run(&["attack", "replay", "--seed", "7"]);
    let stdout = String::from_utf8_lossy(&replay.stdout);
    assert_eq!(exit_code(&replay), 0, "{stdout}");
    assert!(stdout.contains("ReplayDetected"), "{stdout}");

    let drop = run(&["attack", "drop-recovery", "--seed", "8"]);
    assert_eq!(exit_code(&drop), 0);

    let tamper = run(&["attack", "tamper-matrix", "--seed", "9"]);
    let stdout = String::from_utf8_lossy(&tamper.stdout);
    assert_eq!(exit_code(&tamper), 0, "{stdout}");
    assert_eq!(stdout.matches("PASS").count(), 8, "{stdout}");

    let unknown = run(&["attack", "quantum-brute-force"]);
    assert_eq!(exit_code(&unknown), 2);
}

#[test]
fn attack_anonymity_probe_small_run_passes() {
    // Trimmed probe (2 devices x 2 sessions x 3 reps) to keep process
    // tests quick; the acceptance suite runs the full 5x10x20.
    let probe = run(&[
        "attack",
        "anonymity-probe",
        "--seed",
        "40",
        "--devices",
        "2",
        "--sessions",
        "2",
        "--reps",
        "3",
    ]);
    let stdout = String::from_utf8_lossy(&probe.stdout);
    assert_eq!(exit_code(&probe), 0, "{stdout}");
    assert_eq!(stdout.matches("PASS").count(), 4, "{stdout}");
}

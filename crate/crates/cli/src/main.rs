//! `skp`: operator CLI for the device identification and key-management
//! protocol: server keygen, device provisioning, serving, authentication
//! runs, vault operations, and scripted attack scenarios.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use skp_core::crypto::{seeded_rng, CipherSuite, PkeKeyPair, PkePrivateKey, PkePublicKey};
use skp_core::harness::{
    anonymity_probe, connect_tcp, run_with_adversary, AdversaryAction, AdversaryScript,
    HarnessError, MessageSelector, ProbeOptions, ServerRng, SimNetwork, TcpServer,
};
use skp_core::protocol::{
    device_build_request, device_process_response, server_build_response, server_process_request,
    vault_open, vault_seal, DeviceDecision, DeviceState, ProtocolError, VaultError,
};
use skp_core::registry::Registry;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod exit_codes {
    //! Stable exit-code table; `protocol::ProtocolError::code` values
    //! (10 through 18) pass through unchanged.
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    // 2 is clap's usage-error exit.
    pub const CONNECTION: u8 = 20;
    pub const SERVER_REFUSED: u8 = 21;
    pub const VAULT_TAG_MISMATCH: u8 = 22;
    pub const VAULT_EMPTY: u8 = 23;
    pub const ATTACK_ASSERTION: u8 = 25;
}

#[derive(Parser)]
#[command(name = "skp", version, about = "secure-device identification and key management")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the server keypair.
    Keygen {
        /// Output prefix; writes <prefix>.pub and <prefix>.key (0600).
        #[arg(long)]
        out: PathBuf,
        /// Deterministic generation for tests; never use in production.
        #[arg(long)]
        insecure_seed: Option<u64>,
    },
    /// Register a new device in the registry and write its state file.
    Provision {
        #[command(flatten)]
        registry: RegistryArgs,
        /// Where to write the new device state file.
        #[arg(long)]
        device: PathBuf,
        #[arg(long)]
        insecure_seed: Option<u64>,
    },
    /// Serve authentication requests over TCP until killed.
    Serve {
        #[command(flatten)]
        registry: RegistryArgs,
        /// Key prefix from `keygen` (reads <prefix>.pub and <prefix>.key).
        #[arg(long)]
        keys: PathBuf,
        /// Bind address, e.g. 127.0.0.1:7700 (port 0 picks one).
        #[arg(long, default_value = "127.0.0.1:7700")]
        bind: String,
        #[arg(long)]
        insecure_seed: Option<u64>,
    },
    /// Run one authentication against a serving address.
    Auth {
        /// Device state file; rewritten atomically on success.
        #[arg(long)]
        device: PathBuf,
        /// Server public key file (<prefix>.pub).
        #[arg(long)]
        server_pub: PathBuf,
        /// Server address to connect to.
        #[arg(long)]
        connect: String,
        /// Write the delivered Sig.key here (0600) for vault commands.
        #[arg(long)]
        key_out: Option<PathBuf>,
        #[arg(long)]
        insecure_seed: Option<u64>,
    },
    /// Seal or open the device vault with a delivered Sig.key.
    Vault {
        #[command(subcommand)]
        op: VaultOp,
    },
    /// Replay a named attack scenario and report its assertions.
    Attack {
        scenario: Scenario,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Device count for the anonymity probe.
        #[arg(long, default_value_t = 5)]
        devices: usize,
        /// Sessions per device for the anonymity probe.
        #[arg(long, default_value_t = 10)]
        sessions: usize,
        /// Probe repetitions for the linker average.
        #[arg(long, default_value_t = 20)]
        reps: u64,
    },
}

#[derive(Args)]
struct RegistryArgs {
    /// Registry snapshot path.
    #[arg(long, env = "SKP_REGISTRY")]
    registry: PathBuf,
    /// Cipher-suite id.
    #[arg(long, env = "SKP_SUITE", default_value_t = 1)]
    suite: u8,
}

#[derive(Subcommand)]
enum VaultOp {
    Seal {
        #[arg(long)]
        device: PathBuf,
        /// Sig.key file written by `auth --key-out`.
        #[arg(long)]
        key_file: PathBuf,
        /// Plaintext to seal.
        #[arg(long)]
        data: PathBuf,
        /// Keep the key file instead of deleting it on completion.
        #[arg(long)]
        keep_key: bool,
    },
    Open {
        #[arg(long)]
        device: PathBuf,
        #[arg(long)]
        key_file: PathBuf,
        /// Where to write the decrypted plaintext.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        keep_key: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Replay,
    TamperMatrix,
    AnonymityProbe,
    DropRecovery,
}

/// Either OS entropy or an explicitly insecure seeded stream.
enum CliRng {
    Os(rand::rngs::OsRng),
    Seeded(rand_chacha::ChaCha20Rng),
}

impl rand::RngCore for CliRng {
    fn next_u32(&mut self) -> u32 {
        match self {
            CliRng::Os(r) => r.next_u32(),
            CliRng::Seeded(r) => r.next_u32(),
        }
    }
    fn next_u64(&mut self) -> u64 {
        match self {
            CliRng::Os(r) => r.next_u64(),
            CliRng::Seeded(r) => r.next_u64(),
        }
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        match self {
            CliRng::Os(r) => r.fill_bytes(dest),
            CliRng::Seeded(r) => r.fill_bytes(dest),
        }
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        match self {
            CliRng::Os(r) => r.try_fill_bytes(dest),
            CliRng::Seeded(r) => r.try_fill_bytes(dest),
        }
    }
}

impl rand::CryptoRng for CliRng {}

fn rng_from(insecure_seed: Option<u64>) -> CliRng {
    match insecure_seed {
        Some(seed) => CliRng::Seeded(seeded_rng(seed)),
        None => CliRng::Os(rand::rngs::OsRng),
    }
}

fn suite_from_id(id: u8) -> Result<CipherSuite> {
    CipherSuite::from_id(id).ok_or_else(|| anyhow!("unknown suite id {id}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_codes::FAILURE)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Keygen { out, insecure_seed } => cmd_keygen(&out, insecure_seed),
        Command::Provision {
            registry,
            device,
            insecure_seed,
        } => cmd_provision(&registry, &device, insecure_seed),
        Command::Serve {
            registry,
            keys,
            bind,
            insecure_seed,
        } => cmd_serve(&registry, &keys, &bind, insecure_seed),
        Command::Auth {
            device,
            server_pub,
            connect,
            key_out,
            insecure_seed,
        } => cmd_auth(&device, &server_pub, &connect, key_out.as_deref(), insecure_seed),
        Command::Vault { op } => cmd_vault(op),
        Command::Attack {
            scenario,
            seed,
            devices,
            sessions,
            reps,
        } => cmd_attack(scenario, seed, devices, sessions, reps),
    }
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
fn write_atomic(path: &Path, bytes: &[u8], mode: Option<u32>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "skp".into())
    ));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    if let Some(mode) = mode {
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&tmp, std::fs::Permissions::from_mode(mode))?;
        }
        #[cfg(not(unix))]
        let _ = mode;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))?;
    Ok(())
}

fn cmd_keygen(out: &Path, insecure_seed: Option<u64>) -> Result<u8> {
    let suite = CipherSuite::default_suite();
    let mut rng = rng_from(insecure_seed);
    let pair = suite.pke_keygen(&mut rng)?;

    let pub_path = out.with_extension("pub");
    let key_path = out.with_extension("key");
    write_atomic(&pub_path, &pair.public_key.0, None)?;
    if let Err(e) = write_atomic(&key_path, &pair.private_key.0, Some(0o600)) {
        // Don't leave half a keypair behind.
        let _ = std::fs::remove_file(&pub_path);
        return Err(e);
    }
    println!("wrote {} and {}", pub_path.display(), key_path.display());
    Ok(exit_codes::OK)
}

fn load_registry(args: &RegistryArgs) -> Result<Registry> {
    let suite = suite_from_id(args.suite)?;
    if args.registry.exists() {
        let registry = Registry::load_snapshot(&args.registry)
            .with_context(|| format!("loading registry {}", args.registry.display()))?;
        if registry.suite().suite_id() != suite.suite_id() {
            bail!(
                "registry {} uses suite {}, requested {}",
                args.registry.display(),
                registry.suite().suite_id(),
                suite.suite_id()
            );
        }
        Ok(registry)
    } else {
        Ok(Registry::new(suite))
    }
}

fn cmd_provision(args: &RegistryArgs, device_path: &Path, insecure_seed: Option<u64>) -> Result<u8> {
    let mut registry = load_registry(args)?;
    let mut rng = rng_from(insecure_seed);
    let dev = registry.register_device(&mut rng)?;

    dev.save(device_path)
        .with_context(|| format!("writing device file {}", device_path.display()))?;
    if let Err(e) = registry.save_snapshot(&args.registry) {
        // Roll the device file back so failure leaves no trace.
        let _ = std::fs::remove_file(device_path);
        return Err(e).with_context(|| format!("writing registry {}", args.registry.display()));
    }
    println!(
        "provisioned device {} into {}",
        device_path.display(),
        args.registry.display()
    );
    Ok(exit_codes::OK)
}

fn load_keys(prefix: &Path) -> Result<PkeKeyPair> {
    let pub_path = prefix.with_extension("pub");
    let key_path = prefix.with_extension("key");
    Ok(PkeKeyPair {
        public_key: PkePublicKey(
            std::fs::read(&pub_path)
                .with_context(|| format!("reading {}", pub_path.display()))?,
        ),
        private_key: PkePrivateKey(
            std::fs::read(&key_path)
                .with_context(|| format!("reading {}", key_path.display()))?,
        ),
    })
}

fn cmd_serve(
    args: &RegistryArgs,
    keys_prefix: &Path,
    bind: &str,
    insecure_seed: Option<u64>,
) -> Result<u8> {
    if !args.registry.exists() {
        bail!(
            "registry {} does not exist; provision first",
            args.registry.display()
        );
    }
    let registry = load_registry(args)?;
    let keys = load_keys(keys_prefix)?;
    let rng = match insecure_seed {
        Some(seed) => ServerRng::Seeded(seeded_rng(seed)),
        None => ServerRng::Os(rand::rngs::OsRng),
    };
    let server = TcpServer::new(registry, keys, rng).with_persistence(args.registry.clone());

    let listener = std::net::TcpListener::bind(bind).with_context(|| format!("binding {bind}"))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush().ok();
    server.run(listener, None);
    Ok(exit_codes::OK)
}

fn cmd_auth(
    device_path: &Path,
    server_pub: &Path,
    connect: &str,
    key_out: Option<&Path>,
    insecure_seed: Option<u64>,
) -> Result<u8> {
    let mut dev = DeviceState::load(device_path)
        .with_context(|| format!("loading device {}", device_path.display()))?;
    let suite = suite_from_id(dev.suite_id())?;
    let public_key = PkePublicKey(
        std::fs::read(server_pub).with_context(|| format!("reading {}", server_pub.display()))?,
    );
    let addr: SocketAddr = connect
        .parse()
        .with_context(|| format!("parsing address {connect}"))?;
    let mut rng = rng_from(insecure_seed);

    let outcome = match connect_tcp(&mut dev, &public_key, &suite, &addr, &mut rng) {
        Ok(outcome) => outcome,
        Err(HarnessError::Io(e)) => {
            eprintln!("connection failed: {e}");
            return Ok(exit_codes::CONNECTION);
        }
        Err(HarnessError::ServerRefused { code, text }) => {
            eprintln!("server refused ({code}): {text}");
            return Ok(refusal_exit(code));
        }
        Err(e) => return Err(e.into()),
    };

    if let Some(notice) = outcome.refusal {
        eprintln!("server refused ({}): {}", notice.code, notice.text);
        return Ok(refusal_exit(notice.code));
    }
    match outcome.decision {
        Some(DeviceDecision::ServerAuthenticated { sig, .. }) => {
            if let Some(key_path) = key_out {
                write_atomic(key_path, sig.key(), Some(0o600))?;
            }
            dev.save(device_path)
                .with_context(|| format!("persisting device {}", device_path.display()))?;
            println!("authenticated: server verified, Sig delivered for this device");
            Ok(exit_codes::OK)
        }
        Some(DeviceDecision::Rejected(e)) => {
            eprintln!("server response rejected: {e} (step {})", e.sub_step());
            Ok(e.code())
        }
        None => Ok(exit_codes::SERVER_REFUSED),
    }
}

fn refusal_exit(code: u8) -> u8 {
    match ProtocolError::from_code(code) {
        Some(e) => e.code(),
        None => exit_codes::SERVER_REFUSED,
    }
}

fn read_key_file(path: &Path, suite: &CipherSuite) -> Result<Vec<u8>> {
    let key =
        std::fs::read(path).with_context(|| format!("reading key file {}", path.display()))?;
    if key.len() != suite.dk_len() {
        bail!(
            "key file {} has {} bytes, suite requires {}",
            path.display(),
            key.len(),
            suite.dk_len()
        );
    }
    Ok(key)
}

fn scrub_key_file(path: &Path, keep: bool) {
    if keep {
        return;
    }
    // Best-effort overwrite before unlinking.
    if let Ok(meta) = std::fs::metadata(path) {
        let _ = std::fs::write(path, vec![0u8; meta.len() as usize]);
    }
    let _ = std::fs::remove_file(path);
}

fn cmd_vault(op: VaultOp) -> Result<u8> {
    match op {
        VaultOp::Seal {
            device,
            key_file,
            data,
            keep_key,
        } => {
            let mut dev = DeviceState::load(&device)?;
            let suite = suite_from_id(dev.suite_id())?;
            let key = read_key_file(&key_file, &suite)?;
            let plaintext =
                std::fs::read(&data).with_context(|| format!("reading {}", data.display()))?;
            let mut rng = CliRng::Os(rand::rngs::OsRng);
            vault_seal(&mut dev, &key, &plaintext, &suite, &mut rng)
                .map_err(|e| anyhow!("sealing vault: {e}"))?;
            dev.save(&device)?;
            scrub_key_file(&key_file, keep_key);
            println!("sealed {} bytes into {}", plaintext.len(), device.display());
            Ok(exit_codes::OK)
        }
        VaultOp::Open {
            device,
            key_file,
            out,
            keep_key,
        } => {
            let dev = DeviceState::load(&device)?;
            let suite = suite_from_id(dev.suite_id())?;
            let key = read_key_file(&key_file, &suite)?;
            match vault_open(&dev, &key, &suite) {
                Ok(plaintext) => {
                    write_atomic(&out, &plaintext, None)?;
                    scrub_key_file(&key_file, keep_key);
                    println!("opened {} bytes into {}", plaintext.len(), out.display());
                    Ok(exit_codes::OK)
                }
                Err(VaultError::AuthTagMismatch) => {
                    eprintln!(
                        "vault did not open: authentication tag mismatch (wrong key or tampered vault)"
                    );
                    Ok(exit_codes::VAULT_TAG_MISMATCH)
                }
                Err(VaultError::EmptyVault) => {
                    eprintln!("vault is empty: nothing was ever sealed");
                    Ok(exit_codes::VAULT_EMPTY)
                }
                Err(e) => Err(anyhow!("opening vault: {e}")),
            }
        }
    }
}

struct Assertions {
    failed: usize,
}

impl Assertions {
    fn new() -> Self {
        Assertions { failed: 0 }
    }

    fn check(&mut self, label: &str, ok: bool) {
        if ok {
            println!("PASS {label}");
        } else {
            println!("FAIL {label}");
            self.failed += 1;
        }
    }

    fn exit(self) -> u8 {
        if self.failed == 0 {
            exit_codes::OK
        } else {
            exit_codes::ATTACK_ASSERTION
        }
    }
}

fn scenario_world(seed: u64) -> Result<(CipherSuite, Registry, DeviceState, PkeKeyPair)> {
    let suite = CipherSuite::default_suite();
    let mut rng = seeded_rng(seed);
    let keys = suite.pke_keygen(&mut rng)?;
    let mut registry = Registry::new(suite);
    let dev = registry.register_device(&mut rng)?;
    Ok((suite, registry, dev, keys))
}

fn cmd_attack(
    scenario: Scenario,
    seed: u64,
    devices: usize,
    sessions: usize,
    reps: u64,
) -> Result<u8> {
    match scenario {
        Scenario::Replay => attack_replay(seed),
        Scenario::TamperMatrix => attack_tamper_matrix(seed),
        Scenario::AnonymityProbe => attack_anonymity(seed, devices, sessions, reps),
        Scenario::DropRecovery => attack_drop_recovery(seed),
    }
}

fn attack_replay(seed: u64) -> Result<u8> {
    let (_, mut registry, mut dev, keys) = scenario_world(seed)?;
    let mut net = SimNetwork::new(seed);
    let script = AdversaryScript::new(vec![
        AdversaryAction::Eavesdrop,
        AdversaryAction::Replay { capture: 0 },
    ]);
    let outcomes = run_with_adversary(&mut net, &mut dev, &mut registry, &keys, &script)?;

    let mut a = Assertions::new();
    a.check("honest session completed", outcomes[0].completed());
    a.check(
        "byte-identical replay rejected with ReplayDetected",
        outcomes[1].error() == Some(ProtocolError::ReplayDetected),
    );
    if let Some(e) = outcomes[1].error() {
        println!("observed: {e} at step {}", e.sub_step());
    }
    Ok(a.exit())
}

fn attack_tamper_matrix(seed: u64) -> Result<u8> {
    use skp_core::crypto::{random_bytes, PkeCiphertext, SkeCiphertext};

    let suite = CipherSuite::default_suite();
    let mut rng = seeded_rng(seed);
    let keys = suite.pke_keygen(&mut rng)?;
    let mut a = Assertions::new();

    let request_cells: [(&str, ProtocolError); 4] = [
        ("a", ProtocolError::PkeDecryptFailed),
        ("H(x)", ProtocolError::XAccuracyMismatch),
        ("C", ProtocolError::RdAccuracyMismatch),
        ("H(r_D)", ProtocolError::RdAccuracyMismatch),
    ];
    for (field, expected) in request_cells {
        let mut registry = Registry::new(suite);
        let dev = registry.register_device(&mut rng)?;
        let mut req = device_build_request(&dev, &keys.public_key, &suite, &mut rng)?;
        match field {
            "a" => req.a = PkeCiphertext(random_bytes(&mut rng, 64)?),
            "H(x)" => req.h_x = suite.digest_from_bytes(&random_bytes(&mut rng, 32)?)?,
            "C" => req.c_ct = SkeCiphertext(random_bytes(&mut rng, 64)?),
            _ => req.h_rd = suite.digest_from_bytes(&random_bytes(&mut rng, 32)?)?,
        }
        let before = registry.to_bytes();
        let decision = server_process_request(&req, &keys.private_key, &mut registry);
        a.check(
            &format!("tampered {field} -> {expected}"),
            decision.error() == Some(expected) && registry.to_bytes() == before,
        );
    }

    let response_cells: [(&str, ProtocolError); 4] = [
        ("b", ProtocolError::SigDecryptFailed),
        ("H(y)", ProtocolError::ServerProofMismatch),
        ("H(r_new)", ProtocolError::RnewAccuracyMismatch),
        ("g", ProtocolError::SigDecryptFailed),
    ];
    for (field, expected) in response_cells {
        let mut registry = Registry::new(suite);
        let mut dev = registry.register_device(&mut rng)?;
        let req = device_build_request(&dev, &keys.public_key, &suite, &mut rng)?;
        let decision = server_process_request(&req, &keys.private_key, &mut registry);
        let mut resp = server_build_response(&decision, &mut registry, &suite, &mut rng)?;
        match field {
            "b" => resp.b = SkeCiphertext(random_bytes(&mut rng, 64)?),
            "H(y)" => resp.h_y = suite.digest_from_bytes(&random_bytes(&mut rng, 32)?)?,
            "H(r_new)" => resp.h_rnew = suite.digest_from_bytes(&random_bytes(&mut rng, 32)?)?,
            _ => resp.g = SkeCiphertext(random_bytes(&mut rng, 64)?),
        }
        let dev_before = dev.to_bytes();
        let outcome = device_process_response(&mut dev, &resp, &suite);
        a.check(
            &format!("tampered {field} -> {expected}"),
            outcome.error() == Some(expected) && dev.to_bytes() == dev_before,
        );
    }
    Ok(a.exit())
}

fn attack_anonymity(seed: u64, devices: usize, sessions: usize, reps: u64) -> Result<u8> {
    let suite = CipherSuite::default_suite();
    let mut a = Assertions::new();

    let mut accuracies = Vec::new();
    let mut baseline = 0.0;
    let mut clean = true;
    for rep in 0..reps {
        let report = anonymity_probe(&ProbeOptions::new(devices, sessions, seed + rep), &suite)?;
        clean &= report.substring_clean() && report.distinctness_clean();
        accuracies.push(report.linker_accuracy);
        baseline = report.baseline_accuracy;
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;

    a.check("no frame contains any ID_D or H(ID_D) substring", clean);
    a.check("per-device requests pairwise distinct in all four fields", clean);
    a.check(
        &format!(
            "linker accuracy {mean:.4} within 5pp of uniform baseline {baseline:.4} over {reps} reps"
        ),
        mean <= baseline + 0.05,
    );

    let mut control = ProbeOptions::new(devices, sessions, seed + reps);
    control.freeze_rotation = true;
    let control_report = anonymity_probe(&control, &suite)?;
    a.check(
        "negative control (frozen rotation) trips the distinctness assertion",
        control_report
            .distinctness_violations
            .iter()
            .any(|v| v.field == "H(r_D)"),
    );
    Ok(a.exit())
}

fn attack_drop_recovery(seed: u64) -> Result<u8> {
    let (_, mut registry, mut dev, keys) = scenario_world(seed)?;
    let mut net = SimNetwork::new(seed);
    let r0 = dev.r_current().clone();
    let mut a = Assertions::new();

    let drop_script = AdversaryScript::new(vec![AdversaryAction::Drop {
        message: MessageSelector::AuthResponse,
    }]);
    let outcomes = run_with_adversary(&mut net, &mut dev, &mut registry, &keys, &drop_script)?;
    a.check(
        "server identified and rotated while the response was dropped",
        outcomes[0]
            .server_decision
            .as_ref()
            .is_some_and(|d| d.is_identified()),
    );
    a.check(
        "device did not advance without a response",
        dev.r_current() == &r0,
    );

    let retry_script = AdversaryScript::new(vec![
        AdversaryAction::PassThrough,
        AdversaryAction::Replay { capture: 0 },
    ]);
    let outcomes = run_with_adversary(&mut net, &mut dev, &mut registry, &keys, &retry_script)?;
    a.check(
        "retry recovered via the previous-freshness slot",
        outcomes[0].completed(),
    );
    a.check(
        "replay from the dropped era rejected with ReplayDetected",
        outcomes[1].error() == Some(ProtocolError::ReplayDetected),
    );
    Ok(a.exit())
}

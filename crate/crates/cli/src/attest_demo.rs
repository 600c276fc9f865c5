//! The in-process attestation walkthrough: launch, report, verify, key
//! release, unwrap — with optional single-input tampering whose labeled
//! check must be the one that fails.

use std::collections::BTreeSet;
use std::path::Path;

use clap::ValueEnum;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use parma_core::attestation::{
    AttestationService, GuestChannel, HostData, KeyManagementService, KeyReleasePolicy,
    Measurement, MockPsp, ReportData, VendorRoot, VerifyExpectations,
};
use parma_core::bridge::gen::mutate_policy;
use parma_core::policy::ExecutionPolicy;

use crate::CliError;

/// Built-in sample policy for the demo.
const DEMO_POLICY: &str = r#"{
  "version": 1,
  "containers": [{
    "id": "demo",
    "layers": ["aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa"],
    "command": ["/bin/demo"],
    "env_rules": [{ "pattern": "PATH=/usr/bin" }],
    "working_dir": "/",
    "signals": [15]
  }],
  "external_processes": [],
  "flags": {}
}"#;

/// The simulated guest image: three fixed pages at fixed addresses.
const UVM_PAGES: [(u8, u64); 3] = [(0x55, 0x1000), (0x66, 0x2000), (0x77, 0x3000)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TamperMode {
    /// No tampering: every check passes and the key unwraps.
    None,
    /// The host inserts a modified guest page at launch.
    Page,
    /// The host encodes the measurement of a different policy.
    HostData,
    /// The report carries a runtime claim for a different key.
    ReportData,
    /// One byte of the report signature is flipped.
    Signature,
    /// The certificate chain roots in a different vendor.
    Chain,
}

impl TamperMode {
    fn label(self) -> &'static str {
        match self {
            TamperMode::None => "none",
            TamperMode::Page => "page",
            TamperMode::HostData => "host-data",
            TamperMode::ReportData => "report-data",
            TamperMode::Signature => "signature",
            TamperMode::Chain => "chain",
        }
    }
}

fn launch_psp(chip_secret: [u8; 32], host_data: HostData, tampered_page: bool) -> MockPsp {
    let mut psp = MockPsp::new(chip_secret, 7);
    for (i, (fill, gpa)) in UVM_PAGES.iter().enumerate() {
        let mut page = vec![*fill; 4096];
        if tampered_page && i == 1 {
            page[0] ^= 0x01;
        }
        psp.launch_update(&page, *gpa).expect("launch update");
    }
    psp.launch_finalize(host_data).expect("launch finalize");
    psp
}

/// The measurement a relying party expects: derived from the known image
/// recipe, independent of what the host actually launched.
fn expected_measurement(chip_secret: [u8; 32], host_data: HostData) -> Measurement {
    launch_psp(chip_secret, host_data, false)
        .measurement()
        .expect("finalized")
}

pub fn cmd_attest_demo(
    policy_path: Option<&Path>,
    tamper: TamperMode,
    seed: u64,
    json: bool,
) -> Result<(), CliError> {
    let policy_text = match policy_path {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
        None => DEMO_POLICY.to_string(),
    };
    let policy = ExecutionPolicy::parse(&policy_text).map_err(CliError::input)?;
    let measurement = policy.measure();
    let clean_host_data = HostData(measurement.host_data_bytes());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chip_secret = [0u8; 32];
    rng.fill_bytes(&mut chip_secret);
    let mut vendor_seed = [0u8; 32];
    rng.fill_bytes(&mut vendor_seed);
    let mut service_seed = [0u8; 32];
    rng.fill_bytes(&mut service_seed);

    let vendor = VendorRoot::from_seed(vendor_seed);
    let service = AttestationService::from_seed(service_seed, "parma-demo-verifier");

    // launch, possibly with a tampered input
    let launched_host_data = if tamper == TamperMode::HostData {
        HostData(mutate_policy(&policy, &mut rng).measure().host_data_bytes())
    } else {
        clean_host_data
    };
    let psp = launch_psp(chip_secret, launched_host_data, tamper == TamperMode::Page);

    // guest runtime claim: a wrapping keypair
    let wrapping = parma_core::attestation::WrappingKeypair::generate(&mut rng);
    let claimed_report_data = if tamper == TamperMode::ReportData {
        ReportData::digest_of(b"some other key entirely")
    } else {
        wrapping.report_data()
    };
    let mut channel = GuestChannel::new(psp.guest_channel_key());
    let mut report = psp
        .issue_report(&channel.request_report(&claimed_report_data))
        .expect("report issuance");
    if tamper == TamperMode::Signature {
        report.signature[5] ^= 0x01;
    }

    let chain = if tamper == TamperMode::Chain {
        VendorRoot::from_seed([0xC4; 32]).endorse(&psp)
    } else {
        vendor.endorse(&psp)
    };

    // verifier side
    let expected = VerifyExpectations {
        allowed_measurements: BTreeSet::from([expected_measurement(chip_secret, clean_host_data)]),
        policy_digest: *measurement.digest_bytes(),
        report_data: wrapping.report_data(),
    };
    let checks = service.check_report(&report, &chain, &vendor.public_key(), &expected);
    let verdict = service.verify_report(&report, &chain, &vendor.public_key(), &expected);

    // key release, when a token exists
    let secret = b"demo-filesystem-encryption-key!!".to_vec();
    let mut kms = KeyManagementService::new(service.public_key());
    kms.register_key(
        "demo-data-key",
        secret.clone(),
        KeyReleasePolicy {
            expected_host_data: clean_host_data,
            allowed_measurements: BTreeSet::from([expected_measurement(
                chip_secret,
                clean_host_data,
            )]),
        },
    )
    .expect("register demo key");

    let mut released = false;
    let mut unwrapped = false;
    let rejection = verdict.as_ref().err().map(|r| r.as_str().to_string());
    if let Ok(token) = &verdict {
        if let Ok(wrapped) = kms.release_key("demo-data-key", token, &wrapping.public_bytes(), &mut rng)
        {
            released = true;
            unwrapped = wrapping.unwrap_key(&wrapped).ok().as_deref() == Some(&secret[..]);
        }
    }

    // what this tamper mode must produce
    let expected_failed_check = match tamper {
        TamperMode::None => None,
        TamperMode::Page => Some("measurement"),
        TamperMode::HostData => Some("host_data"),
        TamperMode::ReportData => Some("report_data"),
        TamperMode::Signature => Some("signature"),
        TamperMode::Chain => Some("chain"),
    };
    let observed = [
        ("chain", checks.chain),
        ("signature", checks.signature),
        ("measurement", checks.measurement),
        ("host_data", checks.host_data),
        ("report_data", checks.report_data),
    ];
    let failed: Vec<&str> = observed
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(name, _)| *name)
        .collect();
    let as_expected = match expected_failed_check {
        None => failed.is_empty() && released && unwrapped,
        Some(label) => failed == [label] && !released,
    };

    if json {
        println!(
            "{}",
            json!({
                "tamper": tamper.label(),
                "policy_sha512": measurement.digest_hex(),
                "host_data": measurement.host_data_hex(),
                "checks": {
                    "chain": checks.chain,
                    "signature": checks.signature,
                    "measurement": checks.measurement,
                    "host_data": checks.host_data,
                    "report_data": checks.report_data,
                },
                "token_issued": verdict.is_ok(),
                "rejection": rejection,
                "key_released": released,
                "key_unwrapped": unwrapped,
                "as_expected": as_expected,
            })
        );
    } else {
        println!("policy sha512      {}", measurement.digest_hex());
        println!("host data          {}", measurement.host_data_hex());
        println!("tamper mode        {}", tamper.label());
        for (name, ok) in observed {
            println!("check {name:<12} {}", if ok { "PASS" } else { "FAIL" });
        }
        println!("token issued       {}", if verdict.is_ok() { "yes" } else { "no" });
        if let Some(rejection) = &rejection {
            println!("rejection          {rejection}");
        }
        println!("key released       {}", if released { "yes" } else { "no" });
        println!("key unwrapped      {}", if unwrapped { "yes" } else { "no" });
    }

    if as_expected {
        Ok(())
    } else {
        Err(CliError::Violation(format!(
            "tamper mode {} expected failed check {:?}, observed {:?} (released={released}, unwrapped={unwrapped})",
            tamper.label(),
            expected_failed_check,
            failed,
        )))
    }
}

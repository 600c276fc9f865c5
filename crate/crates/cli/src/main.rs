//! `parma`: operator CLI for the execution-policy container simulator.
//!
//! Exit codes are a stable contract: 0 success, 1 assertion or policy
//! violation, 2 usage or input error. Every randomized command accepts
//! `--seed` (falling back to `$PARMA_SIM_SEED`, then 0) and is
//! bit-reproducible given it.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{ArgAction, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use parma_core::agent::UvmState;
use parma_core::bridge::fuzz::{fuzz_traces, FuzzReport};
use parma_core::bridge::gen::gen_policy;
use parma_core::bridge::scenario::{run_scenario, run_scenario_in_process, Scenario};
use parma_core::bridge::{serve, Client, FramedEndpoint, GuestService, TcpTransport};
use parma_core::policy::ExecutionPolicy;
use parma_core::storage::VerityImage;

mod attest_demo;
mod container_spec;

use attest_demo::TamperMode;

#[derive(Parser)]
#[command(
    name = "parma",
    version,
    about = "Attested execution-policy container-control-plane simulator"
)]
struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Seed for randomized behavior; falls back to $PARMA_SIM_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Increase stderr diagnostics.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the verity hash tree over a layer image, write the `.vrt`
    /// sidecar, and print the root hash.
    HashLayer {
        /// Raw image file.
        data: PathBuf,
        /// 32-byte salt as 64 hex characters (default: all zeros).
        #[arg(long)]
        salt: Option<String>,
        /// Sidecar path (default: image path + ".vrt").
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Print the SHA-512 measurement of a policy document and the 32-byte
    /// host-data value derived from it.
    Measure {
        /// Policy document (`.polj`).
        policy: PathBuf,
    },
    /// Convert a simple container spec into a policy document.
    GenPolicy {
        /// Container spec (JSON).
        spec: PathBuf,
        /// Output path (default: stdout).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Serve a guest-agent endpoint over TCP.
    ServeGuest {
        /// Policy document the guest boots with.
        #[arg(long)]
        policy: PathBuf,
        /// Listen address.
        #[arg(long, default_value = "127.0.0.1:7280")]
        listen: String,
        /// Launch-time host data (64 hex chars); the guest re-measures the
        /// policy and refuses to start on mismatch.
        #[arg(long)]
        expected_host_data: Option<String>,
    },
    /// Run scenario files (`.scn`) and report per-step outcomes.
    RunScenario {
        /// Scenario files.
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Run against a served guest instead of in process. The remote
        /// guest must already hold each scenario's policy.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Fuzz randomized policies with randomized request traces, checking
    /// the safety oracle and deny-atomicity after every step.
    Fuzz {
        #[arg(long, default_value_t = 1000)]
        traces: u32,
        #[arg(long, default_value_t = 50)]
        steps: u32,
        /// Number of distinct generated policies to spread traces across.
        #[arg(long, default_value_t = 20)]
        policies: u32,
    },
    /// Run the full attestation and key-release workflow in process,
    /// printing each labeled check.
    AttestDemo {
        /// Policy document (default: a built-in sample).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Tamper with one input and expect exactly its labeled check to
        /// fail.
        #[arg(long, value_enum, default_value_t = TamperMode::None)]
        tamper: TamperMode,
    },
}

enum CliError {
    /// Usage or input problem: exit 2.
    Input(String),
    /// Assertion or policy violation: exit 1.
    Violation(String),
}

impl CliError {
    fn input(e: impl std::fmt::Display) -> Self {
        CliError::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli
        .seed
        .or_else(|| {
            std::env::var("PARMA_SIM_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(0);
    match run(cli, seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Violation(message)) => {
            eprintln!("violation: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Input(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn parse_hex32(s: &str) -> Result<[u8; 32], CliError> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out)
        .map_err(|e| CliError::Input(format!("expected 64 hex characters: {e}")))?;
    Ok(out)
}

fn run(cli: Cli, seed: u64) -> Result<(), CliError> {
    match cli.command {
        Command::HashLayer {
            data,
            salt,
            sidecar,
        } => cmd_hash_layer(&data, salt.as_deref(), sidecar, cli.json),
        Command::Measure { policy } => cmd_measure(&policy, cli.json),
        Command::GenPolicy { spec, output } => cmd_gen_policy(&spec, output, cli.json),
        Command::ServeGuest {
            policy,
            listen,
            expected_host_data,
        } => cmd_serve_guest(&policy, &listen, expected_host_data.as_deref(), seed),
        Command::RunScenario {
            scenarios,
            endpoint,
        } => cmd_run_scenario(&scenarios, endpoint.as_deref(), seed, cli.json, cli.verbose),
        Command::Fuzz {
            traces,
            steps,
            policies,
        } => cmd_fuzz(traces, steps, policies, seed, cli.json, cli.verbose),
        Command::AttestDemo { policy, tamper } => {
            attest_demo::cmd_attest_demo(policy.as_deref(), tamper, seed, cli.json)
        }
    }
}

fn cmd_hash_layer(
    data_path: &Path,
    salt: Option<&str>,
    sidecar: Option<PathBuf>,
    json: bool,
) -> Result<(), CliError> {
    let data = std::fs::read(data_path)
        .map_err(|e| CliError::Input(format!("{}: {e}", data_path.display())))?;
    let salt = match salt {
        Some(s) => parse_hex32(s)?,
        None => [0u8; 32],
    };
    let image = VerityImage::build(&data, salt).map_err(CliError::input)?;
    let sidecar_path = sidecar.unwrap_or_else(|| {
        let mut os = data_path.as_os_str().to_os_string();
        os.push(".vrt");
        PathBuf::from(os)
    });
    let mut sidecar_file = std::fs::File::create(&sidecar_path)
        .map_err(|e| CliError::Input(format!("{}: {e}", sidecar_path.display())))?;
    image.write_sidecar(&mut sidecar_file).map_err(CliError::input)?;
    let root = hex::encode(image.root_hash());
    if json {
        println!(
            "{}",
            json!({
                "root_hash": root,
                "blocks": image.block_count(),
                "sidecar": sidecar_path.display().to_string(),
            })
        );
    } else {
        println!("{root}");
    }
    Ok(())
}

fn cmd_measure(policy_path: &Path, json: bool) -> Result<(), CliError> {
    let text = read_to_string(policy_path)?;
    let policy = ExecutionPolicy::parse(&text).map_err(CliError::input)?;
    let measurement = policy.measure();
    if json {
        println!(
            "{}",
            json!({
                "sha512": measurement.digest_hex(),
                "host_data": measurement.host_data_hex(),
            })
        );
    } else {
        println!("sha512    {}", measurement.digest_hex());
        println!("host_data {}", measurement.host_data_hex());
    }
    Ok(())
}

fn cmd_gen_policy(
    spec_path: &Path,
    output: Option<PathBuf>,
    json: bool,
) -> Result<(), CliError> {
    let text = read_to_string(spec_path)?;
    let document = container_spec::to_policy_document(&text).map_err(CliError::Input)?;
    match output {
        Some(path) => {
            std::fs::write(&path, &document)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            if json {
                println!("{}", json!({ "output": path.display().to_string() }));
            } else {
                eprintln!("wrote {}", path.display());
            }
        }
        None => println!("{document}"),
    }
    Ok(())
}

fn cmd_serve_guest(
    policy_path: &Path,
    listen: &str,
    expected_host_data: Option<&str>,
    seed: u64,
) -> Result<(), CliError> {
    let text = read_to_string(policy_path)?;
    let expected = expected_host_data.map(parse_hex32).transpose()?;
    let state = UvmState::new(&text, expected, seed).map_err(CliError::input)?;
    let listener = TcpListener::bind(listen)
        .map_err(|e| CliError::Input(format!("bind {listen}: {e}")))?;
    let addr = listener.local_addr().map_err(CliError::input)?;
    println!("listening on {addr}");
    let endpoint = Arc::new(FramedEndpoint::new(GuestService::new(state)));
    serve(listener, endpoint)
        .join()
        .map_err(|_| CliError::Violation("server thread panicked".into()))
}

fn cmd_run_scenario(
    paths: &[PathBuf],
    endpoint: Option<&str>,
    seed: u64,
    json: bool,
    verbose: u8,
) -> Result<(), CliError> {
    let mut reports = Vec::new();
    for path in paths {
        let scenario = Scenario::from_path(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let report = match endpoint {
            Some(addr) => {
                let transport = TcpTransport::connect(addr).map_err(CliError::input)?;
                let mut client = Client::new(transport);
                run_scenario(&scenario, &mut client).map_err(CliError::input)?
            }
            None => run_scenario_in_process(&scenario, seed).map_err(CliError::input)?,
        };
        if !json {
            println!(
                "{} {} ({} steps, final safety {})",
                if report.passed { "PASS" } else { "FAIL" },
                report.name,
                report.steps.len(),
                report.final_safety,
            );
            if verbose > 0 || !report.passed {
                for step in &report.steps {
                    println!(
                        "  step {:>2} {:<22} expected {:?} got {:?}{}",
                        step.index,
                        step.action,
                        step.expected,
                        step.actual,
                        step.deny_reason
                            .as_deref()
                            .map(|r| format!(" ({r})"))
                            .unwrap_or_default(),
                    );
                }
            }
        }
        reports.push(report);
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&reports).expect("report json"));
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Violation(format!(
            "{} of {} scenarios failed: {}",
            failed.len(),
            reports.len(),
            failed.join(", ")
        )))
    }
}

fn cmd_fuzz(
    traces: u32,
    steps: u32,
    policies: u32,
    seed: u64,
    json: bool,
    verbose: u8,
) -> Result<(), CliError> {
    if policies == 0 {
        return Err(CliError::Input("--policies must be at least 1".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = FuzzReport {
        seed,
        steps_per_trace: steps,
        ..FuzzReport::default()
    };
    for index in 0..policies {
        let policy = gen_policy(&mut rng);
        // spread traces evenly; the first policies absorb the remainder
        let share = traces / policies + u32::from(index < traces % policies);
        if share == 0 {
            continue;
        }
        let report = fuzz_traces(&policy, steps, share, rng.gen());
        if verbose > 0 {
            eprintln!(
                "policy {index}: {} steps, {} allows, {} denies, {} violations",
                report.total_steps,
                report.allows,
                report.denies,
                report.violations(),
            );
        }
        total.merge(&report);
    }
    let elapsed = start.elapsed();
    if json {
        println!(
            "{}",
            json!({
                "seed": seed,
                "policies": policies,
                "traces": total.traces,
                "steps_per_trace": steps,
                "total_steps": total.total_steps,
                "allows": total.allows,
                "denies": total.denies,
                "operational_failures": total.operational_failures,
                "internal_faults": total.internal_faults,
                "safety_violations": total.safety_violations,
                "atomicity_violations": total.atomicity_violations,
                "elapsed_ms": elapsed.as_millis() as u64,
            })
        );
    } else {
        println!(
            "fuzz: {} policies, {} traces x {} steps = {} steps in {:.2?}",
            policies, total.traces, steps, total.total_steps, elapsed
        );
        println!(
            "      {} allows, {} denies, {} operational failures",
            total.allows, total.denies, total.operational_failures
        );
        println!(
            "      safety violations: {}, atomicity violations: {}, faults: {}",
            total.safety_violations, total.atomicity_violations, total.internal_faults
        );
    }
    if total.violations() > 0 {
        return Err(CliError::Violation(format!(
            "{} safety, {} atomicity, {} faults",
            total.safety_violations, total.atomicity_violations, total.internal_faults
        )));
    }
    Ok(())
}

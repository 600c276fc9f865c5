//! Seeded generators for the adversary harness: randomized policies, mixed
//! valid/hostile request streams, and single-field policy mutations.
//!
//! Everything here is deterministic in the supplied RNG, so fuzz runs and
//! property tests replay bit-for-bit from a seed.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::agent::UvmState;
use crate::engine::{EnforcementRequest, MountSpec};
use crate::policy::{ExecutionPolicy, LayerDigest};

const ENV_POOL: [&str; 5] = [
    "PATH=/usr/bin",
    "HOME=/root",
    "RUST_LOG=info",
    "LANG=C.UTF-8",
    "TMPDIR=/tmp",
];

/// A digest that no generated policy ever lists.
pub const ROGUE_DIGEST: &str = "baadf00dbaadf00dbaadf00dbaadf00dbaadf00dbaadf00dbaadf00dbaadf00d";

fn random_digest_hex(rng: &mut ChaCha8Rng) -> String {
    let mut bytes = [0u8; 32];
    rng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}

/// Generate a policy with a random template count (1 to 4).
pub fn gen_policy(rng: &mut ChaCha8Rng) -> ExecutionPolicy {
    let count = rng.gen_range(1..=4);
    gen_policy_sized(rng, count)
}

/// Convenience for property tests: a policy derived entirely from one seed.
pub fn gen_policy_from_seed(seed: u64) -> ExecutionPolicy {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_policy(&mut rng)
}

/// Generate a policy with exactly `template_count` templates. Env rules mix
/// literals with one regex; mount and host-device patterns stay literal so
/// the request generator can produce matching values.
pub fn gen_policy_sized(rng: &mut ChaCha8Rng, template_count: usize) -> ExecutionPolicy {
    loop {
        let mut containers = Vec::with_capacity(template_count);
        for t in 0..template_count {
            let layer_count = rng.gen_range(1..=3);
            let layers: Vec<String> = (0..layer_count).map(|_| random_digest_hex(rng)).collect();
            let mut env_rules: Vec<Value> = ENV_POOL
                .iter()
                .filter(|_| rng.gen_bool(0.5))
                .map(|p| json!({ "pattern": p }))
                .collect();
            if rng.gen_bool(0.4) {
                env_rules.push(json!({
                    "pattern": format!("TERM=xterm-[0-9]+"),
                    "strategy": "regex",
                }));
            }
            let mounts: Vec<Value> = (0..rng.gen_range(0..=2))
                .map(|k| {
                    json!({
                        "source_pattern": format!("/host/data{k}"),
                        "destination": format!("/data{k}"),
                        "mount_type": "bind",
                        "options": if rng.gen_bool(0.5) { vec!["ro"] } else { vec!["rw"] },
                    })
                })
                .collect();
            let exec_processes: Vec<Value> = (0..rng.gen_range(0..=2))
                .map(|k| {
                    json!({
                        "command": [format!("/bin/tool{k}"), "status"],
                        "env_rules": [{ "pattern": ENV_POOL[0] }],
                        "working_dir": "/",
                    })
                })
                .collect();
            let mut signals = Vec::new();
            for s in [2i64, 9, 15] {
                if rng.gen_bool(0.5) {
                    signals.push(s);
                }
            }
            containers.push(json!({
                "id": format!("tmpl-{t}"),
                "layers": layers,
                "command": [format!("/bin/app{t}"), "serve"],
                "env_rules": env_rules,
                "working_dir": if rng.gen_bool(0.8) { "/" } else { "/srv" },
                "mounts": mounts,
                "exec_processes": exec_processes,
                "signals": signals,
                "allow_stdio_access": rng.gen_bool(0.5),
            }));
        }
        let external_processes: Vec<Value> = (0..rng.gen_range(0..=2))
            .map(|k| {
                json!({
                    "command": [format!("/bin/ext{k}")],
                    "env_rules": [{ "pattern": ENV_POOL[0] }],
                    "working_dir": "/",
                })
            })
            .collect();
        let host_devices: Vec<String> = (0..rng.gen_range(0..=2))
            .map(|k| format!("/dev/hd{k}"))
            .collect();
        let doc = json!({
            "version": 1,
            "containers": containers,
            "external_processes": external_processes,
            "flags": {
                "allow_properties_access": rng.gen_bool(0.3),
                "allow_dump_stacks": rng.gen_bool(0.2),
                "allow_runtime_logging": rng.gen_bool(0.3),
                "allow_container_logging": rng.gen_bool(0.3),
                "allow_unencrypted_scratch": rng.gen_bool(0.2),
                "allow_host_device_mounts": host_devices,
            },
        });
        // random layer digests make duplicate identities vanishingly rare,
        // but reroll rather than assume
        if let Ok(policy) = ExecutionPolicy::parse(&doc.to_string()) {
            return policy;
        }
    }
}

/// Fresh-name counters for one trace.
#[derive(Debug, Default)]
pub struct TraceNamer {
    device: u32,
    overlay: u32,
    container: u32,
    scratch: u32,
}

impl TraceNamer {
    fn device_target(&mut self) -> String {
        let n = self.device;
        self.device += 1;
        format!("/run/layers/l{n}")
    }

    fn overlay_id(&mut self) -> String {
        let n = self.overlay;
        self.overlay += 1;
        format!("ov{n}")
    }

    fn container_id(&mut self) -> String {
        let n = self.container;
        self.container += 1;
        format!("c{n}")
    }

    fn scratch_target(&mut self) -> String {
        let n = self.scratch;
        self.scratch += 1;
        format!("/mnt/scratch/s{n}")
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> Option<&'a T> {
    if items.is_empty() {
        None
    } else {
        Some(&items[rng.gen_range(0..items.len())])
    }
}

fn pick_key(rng: &mut ChaCha8Rng, keys: Vec<&String>) -> Option<String> {
    if keys.is_empty() {
        None
    } else {
        Some(keys[rng.gen_range(0..keys.len())].clone())
    }
}

fn rogue_digest() -> LayerDigest {
    LayerDigest::from_hex(ROGUE_DIGEST).expect("static digest")
}

/// Environment entries matching a template's literal rules (each kept with
/// probability 0.8).
fn env_for_template(
    rng: &mut ChaCha8Rng,
    policy: &ExecutionPolicy,
    template_id: &str,
) -> Vec<String> {
    let Some(template) = policy.container(template_id) else {
        return Vec::new();
    };
    template
        .env_rules()
        .iter()
        .filter(|r| matches!(r.strategy(), crate::policy::EnvStrategy::Literal))
        .filter(|_| rng.gen_bool(0.8))
        .map(|r| r.pattern().to_string())
        .collect()
}

fn looks_literal(pattern: &str) -> bool {
    !pattern
        .chars()
        .any(|c| matches!(c, '\\' | '.' | '+' | '*' | '?' | '(' | ')' | '|' | '[' | ']' | '{' | '}' | '^' | '$'))
}

fn mounts_for_template(policy: &ExecutionPolicy, template_id: &str) -> Vec<MountSpec> {
    let Some(template) = policy.container(template_id) else {
        return Vec::new();
    };
    template
        .mounts()
        .iter()
        .filter(|rule| looks_literal(rule.source_pattern()))
        .map(|rule| MountSpec {
            source: rule.source_pattern().to_string(),
            destination: rule.destination().to_string(),
            mount_type: rule.mount_type().to_string(),
            options: rule.options().to_vec(),
        })
        .collect()
}

/// One random step against the current state: mostly policy-conformant
/// continuations of the lifecycle, with a deliberate share of hostile or
/// nonsensical variants. Deterministic in the RNG.
pub fn random_request(
    rng: &mut ChaCha8Rng,
    policy: &ExecutionPolicy,
    state: &UvmState,
    namer: &mut TraceNamer,
) -> EnforcementRequest {
    let store = state.store();
    let templates = policy.containers();
    let roll = rng.gen_range(0u32..100);
    match roll {
        // mount a layer device
        0..=17 => {
            let hostile = rng.gen_bool(0.25);
            let target = if hostile && rng.gen_bool(0.4) {
                // reuse an occupied target when one exists
                pick_key(rng, store.devices.keys().collect())
                    .unwrap_or_else(|| namer.device_target())
            } else {
                namer.device_target()
            };
            let device_hash = if hostile && rng.gen_bool(0.6) {
                rogue_digest()
            } else {
                match pick(rng, templates) {
                    Some(t) => *pick(rng, t.layers()).expect("layers are non-empty"),
                    None => rogue_digest(),
                }
            };
            EnforcementRequest::MountDevice {
                device_hash,
                target,
            }
        }
        // mount an overlay from currently mounted devices
        18..=27 => {
            let overlay_id = namer.overlay_id();
            let target = format!("/run/overlay/{overlay_id}");
            let template = pick(rng, templates);
            let mut layer_paths = Vec::new();
            if let Some(template) = template {
                for digest in template.layers() {
                    let path = store
                        .devices
                        .iter()
                        .find(|(_, d)| *d == digest)
                        .map(|(p, _)| p.clone());
                    match path {
                        Some(p) => layer_paths.push(p),
                        None => {
                            layer_paths.push(format!("/run/layers/missing-{}", rng.gen::<u16>()))
                        }
                    }
                }
            } else {
                layer_paths.push("/run/layers/none".into());
            }
            if rng.gen_bool(0.25) && layer_paths.len() >= 2 {
                layer_paths.reverse();
            }
            EnforcementRequest::MountOverlay {
                overlay_id,
                layer_paths,
                target,
            }
        }
        // create a container from an existing overlay
        28..=39 => {
            let container_id = namer.container_id();
            let Some(overlay_id) = pick_key(rng, store.overlays.keys().collect()) else {
                return EnforcementRequest::CreateContainer {
                    container_id,
                    overlay_id: "ghost".into(),
                    command: vec!["/bin/sh".into()],
                    env: vec![],
                    working_dir: "/".into(),
                    mounts: vec![],
                };
            };
            let candidates: Vec<String> = store.overlays[&overlay_id]
                .candidates
                .iter()
                .cloned()
                .collect();
            let template_id = pick(rng, &candidates).cloned().unwrap_or_default();
            let template = policy.container(&template_id);
            let mut command = template
                .map(|t| t.command().to_vec())
                .unwrap_or_else(|| vec!["/bin/sh".into()]);
            let mut env = env_for_template(rng, policy, &template_id);
            let working_dir = template
                .map(|t| t.working_dir().to_string())
                .unwrap_or_else(|| "/".into());
            let mounts = mounts_for_template(policy, &template_id);
            if rng.gen_bool(0.3) {
                // hostile variants the policy must catch
                match rng.gen_range(0..3) {
                    0 => env.push("INJECTED=1".into()),
                    1 => command.push("--evil".into()),
                    _ => {
                        return EnforcementRequest::CreateContainer {
                            container_id,
                            overlay_id,
                            command,
                            env,
                            working_dir: "/evil".into(),
                            mounts,
                        }
                    }
                }
            }
            EnforcementRequest::CreateContainer {
                container_id,
                overlay_id,
                command,
                env,
                working_dir,
                mounts,
            }
        }
        // exec inside a container
        40..=46 => {
            let Some(container_id) = pick_key(rng, store.containers.keys().collect()) else {
                return EnforcementRequest::ExecInContainer {
                    container_id: "ghost".into(),
                    command: vec!["/bin/sh".into()],
                    env: vec![],
                    working_dir: "/".into(),
                };
            };
            let candidates: Vec<String> = store.containers[&container_id]
                .candidates
                .iter()
                .cloned()
                .collect();
            let rule = pick(rng, &candidates)
                .and_then(|id| policy.container(id))
                .and_then(|t| pick(rng, t.exec_processes()));
            match rule {
                Some(rule) if rng.gen_bool(0.8) => EnforcementRequest::ExecInContainer {
                    container_id,
                    command: rule.command().to_vec(),
                    env: rule
                        .env_rules()
                        .iter()
                        .filter(|r| matches!(r.strategy(), crate::policy::EnvStrategy::Literal))
                        .map(|r| r.pattern().to_string())
                        .collect(),
                    working_dir: rule.working_dir().to_string(),
                },
                _ => EnforcementRequest::ExecInContainer {
                    container_id,
                    command: vec!["/bin/backdoor".into()],
                    env: vec![],
                    working_dir: "/".into(),
                },
            }
        }
        // exec directly in the VM
        47..=51 => {
            let rule = pick(rng, policy.external_processes());
            match rule {
                Some(rule) if rng.gen_bool(0.7) => EnforcementRequest::ExecExternal {
                    command: rule.command().to_vec(),
                    env: rule
                        .env_rules()
                        .iter()
                        .filter(|r| matches!(r.strategy(), crate::policy::EnvStrategy::Literal))
                        .map(|r| r.pattern().to_string())
                        .collect(),
                    working_dir: rule.working_dir().to_string(),
                },
                _ => EnforcementRequest::ExecExternal {
                    command: vec!["/bin/nc".into(), "-l".into()],
                    env: vec![],
                    working_dir: "/".into(),
                },
            }
        }
        // signal a process
        52..=56 => {
            let Some(container_id) = pick_key(rng, store.containers.keys().collect()) else {
                return EnforcementRequest::SignalProcess {
                    container_id: "ghost".into(),
                    signal: 15,
                    command: vec!["/bin/sh".into()],
                };
            };
            let entry = &store.containers[&container_id];
            let command = if rng.gen_bool(0.8) || entry.exec_commands.is_empty() {
                entry.command.clone()
            } else {
                let commands: Vec<Vec<String>> = entry.exec_commands.iter().cloned().collect();
                pick(rng, &commands).cloned().unwrap_or_default()
            };
            let candidates: Vec<String> = entry.candidates.iter().cloned().collect();
            let signal = pick(rng, &candidates)
                .and_then(|id| policy.container(id))
                .and_then(|t| pick(rng, t.signals()).copied())
                .unwrap_or(15);
            let signal = if rng.gen_bool(0.2) { 64 } else { signal };
            EnforcementRequest::SignalProcess {
                container_id,
                signal,
                command,
            }
        }
        // shutdown
        57..=62 => EnforcementRequest::ShutdownContainer {
            container_id: pick_key(rng, store.containers.keys().collect())
                .unwrap_or_else(|| "ghost".into()),
        },
        // unmount a device
        63..=68 => EnforcementRequest::UnmountDevice {
            target: pick_key(rng, store.devices.keys().collect())
                .unwrap_or_else(|| "/run/layers/ghost".into()),
        },
        // unmount an overlay
        69..=72 => EnforcementRequest::UnmountOverlay {
            overlay_id: pick_key(rng, store.overlays.keys().collect())
                .unwrap_or_else(|| "ghost".into()),
        },
        // scratch space
        73..=78 => EnforcementRequest::MountScratch {
            target: namer.scratch_target(),
            encrypted: rng.gen_bool(0.8),
        },
        79..=81 => EnforcementRequest::UnmountScratch {
            target: pick_key(rng, store.scratch.keys().collect())
                .unwrap_or_else(|| "/mnt/scratch/ghost".into()),
        },
        // host devices
        82..=86 => {
            let patterns = policy.flags().allow_host_device_mounts();
            let target = pick(rng, patterns)
                .filter(|p| looks_literal(p) && rng.gen_bool(0.8))
                .cloned()
                .unwrap_or_else(|| "/dev/evil".into());
            EnforcementRequest::MountHostDevice { target }
        }
        87..=88 => EnforcementRequest::UnmountHostDevice {
            target: pick_key(rng, store.host_mounts.iter().collect())
                .unwrap_or_else(|| "/dev/ghost".into()),
        },
        // informational actions
        89..=91 => EnforcementRequest::GetProperties {},
        92..=94 => EnforcementRequest::DumpStacks {},
        95..=97 => EnforcementRequest::RuntimeLogging {},
        _ => EnforcementRequest::ContainerLogging {},
    }
}

/// Mutate exactly one field of a policy, returning a policy whose canonical
/// encoding (and therefore measurement) must differ.
pub fn mutate_policy(policy: &ExecutionPolicy, rng: &mut ChaCha8Rng) -> ExecutionPolicy {
    let canonical = policy.to_canonical_string();
    loop {
        let mut doc: Value = serde_json::from_str(&canonical).expect("canonical policy json");
        let applied = apply_mutation(&mut doc, rng);
        if !applied {
            continue;
        }
        let Ok(mutated) = ExecutionPolicy::parse(&doc.to_string()) else {
            continue;
        };
        if mutated != *policy {
            return mutated;
        }
    }
}

fn apply_mutation(doc: &mut Value, rng: &mut ChaCha8Rng) -> bool {
    let container_count = doc["containers"].as_array().map_or(0, Vec::len);
    match rng.gen_range(0u32..10) {
        0 => {
            let flags = [
                "allow_properties_access",
                "allow_dump_stacks",
                "allow_runtime_logging",
                "allow_container_logging",
                "allow_unencrypted_scratch",
            ];
            let flag = flags[rng.gen_range(0..flags.len())];
            let current = doc["flags"][flag].as_bool().unwrap_or(false);
            doc["flags"][flag] = json!(!current);
            true
        }
        1 => {
            if container_count == 0 {
                return false;
            }
            let t = rng.gen_range(0..container_count);
            let layers = doc["containers"][t]["layers"].as_array().unwrap().clone();
            let l = rng.gen_range(0..layers.len());
            let digest = layers[l].as_str().unwrap().to_string();
            let pos = rng.gen_range(0..digest.len());
            let mut bytes = digest.into_bytes();
            let old = bytes[pos];
            // replace one hex character with a different one
            bytes[pos] = (b'0'..=b'9')
                .chain(b'a'..=b'f')
                .find(|&c| c != old)
                .unwrap();
            doc["containers"][t]["layers"][l] =
                json!(String::from_utf8(bytes).expect("hex stays ascii"));
            true
        }
        2 => {
            if container_count == 0 {
                return false;
            }
            let t = rng.gen_range(0..container_count);
            let command = doc["containers"][t]["command"].as_array_mut().unwrap();
            command.push(json!("--mutated"));
            true
        }
        3 => {
            if container_count == 0 {
                return false;
            }
            let t = rng.gen_range(0..container_count);
            let rules = doc["containers"][t]["env_rules"].as_array_mut().unwrap();
            if rules.is_empty() {
                return false;
            }
            let r = rng.gen_range(0..rules.len());
            let pattern = rules[r]["pattern"].as_str().unwrap().to_string();
            rules[r]["pattern"] = json!(format!("{pattern}x"));
            true
        }
        4 => {
            if container_count == 0 {
                return false;
            }
            let t = rng.gen_range(0..container_count);
            let dir = doc["containers"][t]["working_dir"].as_str().unwrap();
            doc["containers"][t]["working_dir"] = json!(format!("{}/mut", dir.trim_end_matches('/')));
            true
        }
        5 => {
            if container_count == 0 {
                return false;
            }
            let t = rng.gen_range(0..container_count);
            let signals = doc["containers"][t]["signals"].as_array_mut().unwrap();
            let next = signals
                .iter()
                .filter_map(Value::as_i64)
                .max()
                .unwrap_or(0)
                + 1;
            signals.push(json!(next));
            true
        }
        6 => {
            let digest = random_digest_hex(rng);
            doc["containers"].as_array_mut().unwrap().push(json!({
                "id": format!("mut-{}", rng.gen::<u32>()),
                "layers": [digest],
                "command": ["/bin/mutant"],
                "working_dir": "/",
            }));
            true
        }
        7 => {
            if container_count == 0 {
                return false;
            }
            doc["containers"].as_array_mut().unwrap().pop();
            true
        }
        8 => {
            doc["flags"]["allow_host_device_mounts"]
                .as_array_mut()
                .unwrap()
                .push(json!(format!("/dev/mut{}", rng.gen::<u16>())));
            true
        }
        _ => {
            if container_count == 0 {
                return false;
            }
            let t = rng.gen_range(0..container_count);
            let current = doc["containers"][t]["allow_stdio_access"]
                .as_bool()
                .unwrap_or(false);
            doc["containers"][t]["allow_stdio_access"] = json!(!current);
            true
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generated_policies_parse_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let policy = gen_policy(&mut rng);
            let reparsed = ExecutionPolicy::parse(&policy.to_canonical_string()).unwrap();
            assert_eq!(reparsed, policy);
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = gen_policy_from_seed(42);
        let b = gen_policy_from_seed(42);
        assert_eq!(a, b);
        let c = gen_policy_from_seed(43);
        assert_ne!(a.measure().digest_bytes(), c.measure().digest_bytes());
    }

    #[test]
    fn mutations_always_change_the_measurement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let policy = gen_policy_from_seed(seed);
            let original = policy.measure();
            for _ in 0..10 {
                let mutated = mutate_policy(&policy, &mut rng);
                assert_ne!(
                    mutated.measure().digest_bytes(),
                    original.digest_bytes(),
                    "mutation of seed-{seed} policy must change the measurement"
                );
            }
        }
    }
}

//! The simulated in-VM guest agent.
//!
//! The agent owns the authoritative [`UvmState`]: it runs every host request
//! through the enforcement engine, applies the resulting metadata atomically,
//! and performs the simulated side effect (verity-checked device attach,
//! container lifecycle, scratch provisioning). A denied request changes
//! nothing but the decision log; an engine-allow whose side effect fails
//! (a device that does not verify) is rolled back the same way.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::engine::{enforce, EnforcementRequest, MetadataStore};
use crate::policy::{EnvStrategy, ExecutionPolicy, PolicyError};
use crate::storage::{ScratchDevice, VerityImage, SECTOR_SIZE};

/// Sectors provisioned per scratch mount in this simulation.
pub const SCRATCH_SECTORS: usize = 8;

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    /// The policy delivered by the host does not measure to the value
    /// recorded at launch; the guest refuses to start.
    #[error("policy measurement does not match the launch-time host data")]
    PolicyMeasurementMismatch,
}

/// Internal inconsistencies that should be unreachable; they abort the run
/// rather than guessing at recovery.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum Fault {
    #[error("internal state inconsistency: {0}")]
    Internal(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerStatus {
    Created,
    Running,
    Exited,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessStatus {
    Running,
    Signaled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProcessRecord {
    pub pid: u64,
    pub command: Vec<String>,
    pub status: ProcessStatus,
}

/// Runtime view of one container; the store's `containers` section holds
/// the policy-side record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ContainerInstance {
    pub id: String,
    pub status: ContainerStatus,
    pub start_command: Vec<String>,
    pub processes: Vec<ProcessRecord>,
}

impl ContainerInstance {
    fn new(id: String, start_command: Vec<String>) -> Self {
        Self {
            id,
            status: ContainerStatus::Created,
            start_command,
            processes: Vec::new(),
        }
    }

    fn start(&mut self, pid: u64) {
        self.status = ContainerStatus::Running;
        let command = self.start_command.clone();
        self.processes.push(ProcessRecord {
            pid,
            command,
            status: ProcessStatus::Running,
        });
    }
}

/// Scratch key lifecycle marker: the key exists only while the mount is in
/// flight and is erased before the request completes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySlot {
    Provisioned(#[serde(serialize_with = "ser_key")] [u8; 32]),
    Erased,
}

fn ser_key<S: serde::Serializer>(key: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(key))
}

/// A mounted layer device: the image as attached by the host, plus the
/// policy-approved root it must verify against.
#[derive(Clone, Debug)]
pub struct MountedLayer {
    pub image: Option<VerityImage>,
    pub trusted_root: [u8; 32],
}

/// A mounted scratch device.
#[derive(Debug)]
pub enum ScratchAttachment {
    Encrypted(ScratchDevice),
    /// Plaintext scratch, only reachable when the policy allows it.
    Plain(Vec<Vec<u8>>),
}

#[derive(Clone, Debug, Serialize)]
pub struct LogEntry {
    pub seq: u64,
    pub action: String,
    pub payload: Value,
    pub allowed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deny_reason: Option<String>,
}

/// The response returned to the host for one request.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgentResponse {
    pub allowed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deny_reason: Option<String>,
    pub payload: Value,
}

impl AgentResponse {
    fn allow(payload: Value) -> Self {
        Self {
            allowed: true,
            deny_reason: None,
            payload,
        }
    }

    fn deny(reason: impl Into<String>, payload: Value) -> Self {
        Self {
            allowed: false,
            deny_reason: Some(reason.into()),
            payload,
        }
    }
}

/// Deny label for engine-allows whose simulated side effect failed.
pub const OPERATIONAL_FAILURE: &str = "operational_failure";

/// The guest's authoritative state. One logical owner; requests are applied
/// strictly in arrival order.
#[derive(Debug)]
pub struct UvmState {
    policy: ExecutionPolicy,
    policy_digest_hex: String,
    store: MetadataStore,
    containers: BTreeMap<String, ContainerInstance>,
    scratch_keys: BTreeMap<String, KeySlot>,
    log: Vec<LogEntry>,
    // Simulation plumbing below: the host-controlled device bus and the
    // attachments the agent has verified or provisioned.
    device_bus: BTreeMap<String, VerityImage>,
    mounted_layers: BTreeMap<String, MountedLayer>,
    scratch_devices: BTreeMap<String, ScratchAttachment>,
    rng: ChaCha8Rng,
    next_seq: u64,
    next_pid: u64,
}

impl UvmState {
    /// Boot a guest from the policy text the host shim delivered. When the
    /// launch-time host data is supplied, the policy is measured again and a
    /// mismatch refuses to start.
    pub fn new(
        policy_text: &str,
        expected_host_data: Option<[u8; 32]>,
        seed: u64,
    ) -> Result<Self, StartupError> {
        let policy = ExecutionPolicy::parse(policy_text)?;
        if let Some(expected) = expected_host_data {
            if policy.measure().host_data_bytes() != expected {
                return Err(StartupError::PolicyMeasurementMismatch);
            }
        }
        Ok(Self::from_policy(policy, seed))
    }

    /// Boot directly from a parsed policy (library and harness path).
    pub fn from_policy(policy: ExecutionPolicy, seed: u64) -> Self {
        let policy_digest_hex = policy.measure().digest_hex();
        Self {
            policy,
            policy_digest_hex,
            store: MetadataStore::default(),
            containers: BTreeMap::new(),
            scratch_keys: BTreeMap::new(),
            log: Vec::new(),
            device_bus: BTreeMap::new(),
            mounted_layers: BTreeMap::new(),
            scratch_devices: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_seq: 0,
            next_pid: 1000,
        }
    }

    pub fn policy(&self) -> &ExecutionPolicy {
        &self.policy
    }

    pub fn store(&self) -> &MetadataStore {
        &self.store
    }

    pub fn containers(&self) -> &BTreeMap<String, ContainerInstance> {
        &self.containers
    }

    pub fn scratch_keys(&self) -> &BTreeMap<String, KeySlot> {
        &self.scratch_keys
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn mounted_layers(&self) -> &BTreeMap<String, MountedLayer> {
        &self.mounted_layers
    }

    pub fn scratch_device(&self, target: &str) -> Option<&ScratchAttachment> {
        self.scratch_devices.get(target)
    }

    pub fn scratch_device_mut(&mut self, target: &str) -> Option<&mut ScratchAttachment> {
        self.scratch_devices.get_mut(target)
    }

    /// Host-side action: attach a block image to the bus at a target path.
    /// Invisible to the policy until the shim asks to mount it.
    pub fn attach_block_device(&mut self, target: impl Into<String>, image: VerityImage) {
        self.device_bus.insert(target.into(), image);
    }

    /// Process one request end to end: enforce, apply metadata, perform the
    /// simulated side effect, log. Errors are internal inconsistencies only.
    pub fn handle_request(
        &mut self,
        request: &EnforcementRequest,
    ) -> Result<AgentResponse, Fault> {
        let (decision, next_store) = enforce(&self.policy, &self.store, request);
        let response = if decision.allowed {
            match self.perform_side_effect(request) {
                Ok(payload) => {
                    self.store = next_store;
                    AgentResponse::allow(payload)
                }
                Err(SideEffectError::Operational(detail)) => {
                    // engine-allow, operational failure: state stays as it was
                    AgentResponse::deny(OPERATIONAL_FAILURE, json!({ "detail": detail }))
                }
                Err(SideEffectError::Fault(fault)) => return Err(fault),
            }
        } else {
            let reason = decision
                .deny_reason
                .map(|r| r.as_str().to_string())
                .unwrap_or_else(|| "denied".to_string());
            AgentResponse::deny(reason, json!({}))
        };

        let (action, payload) = request.to_wire();
        self.log.push(LogEntry {
            seq: self.next_seq,
            action,
            payload,
            allowed: response.allowed,
            deny_reason: response.deny_reason.clone(),
        });
        self.next_seq += 1;
        Ok(response)
    }

    fn perform_side_effect(
        &mut self,
        request: &EnforcementRequest,
    ) -> Result<Value, SideEffectError> {
        use EnforcementRequest as R;
        match request {
            R::MountDevice {
                device_hash,
                target,
            } => {
                let image = self.device_bus.get(target).cloned();
                if let Some(image) = &image {
                    // Attach-time smoke check against the policy-approved
                    // root; per-block verification stays lazy, as reads are.
                    image
                        .verified_read(0, device_hash.as_bytes())
                        .map_err(|e| SideEffectError::Operational(e.to_string()))?;
                }
                let attached = image.is_some();
                self.mounted_layers.insert(
                    target.clone(),
                    MountedLayer {
                        image,
                        trusted_root: *device_hash.as_bytes(),
                    },
                );
                Ok(json!({ "target": target, "attached_image": attached }))
            }
            R::UnmountDevice { target } => {
                self.mounted_layers.remove(target);
                Ok(json!({ "target": target }))
            }
            R::MountOverlay {
                overlay_id, target, ..
            } => Ok(json!({ "overlay_id": overlay_id, "target": target })),
            R::UnmountOverlay { overlay_id } => Ok(json!({ "overlay_id": overlay_id })),
            R::CreateContainer {
                container_id,
                command,
                ..
            } => {
                if self.containers.contains_key(container_id) {
                    return Err(SideEffectError::internal(format!(
                        "container {container_id:?} exists without a store entry"
                    )));
                }
                let mut instance =
                    ContainerInstance::new(container_id.clone(), command.clone());
                let pid = self.next_pid;
                self.next_pid += 1;
                instance.start(pid);
                self.containers.insert(container_id.clone(), instance);
                Ok(json!({ "container_id": container_id, "status": "running", "pid": pid }))
            }
            R::ExecInContainer {
                container_id,
                command,
                ..
            } => {
                let Some(instance) = self.containers.get_mut(container_id) else {
                    return Err(SideEffectError::internal(format!(
                        "exec allowed for unknown container {container_id:?}"
                    )));
                };
                let pid = self.next_pid;
                self.next_pid += 1;
                instance.processes.push(ProcessRecord {
                    pid,
                    command: command.clone(),
                    status: ProcessStatus::Running,
                });
                Ok(json!({ "container_id": container_id, "pid": pid }))
            }
            R::ExecExternal { command, .. } => {
                let pid = self.next_pid;
                self.next_pid += 1;
                Ok(json!({ "command": command, "pid": pid }))
            }
            R::ShutdownContainer { container_id } => {
                let Some(mut instance) = self.containers.remove(container_id) else {
                    return Err(SideEffectError::internal(format!(
                        "shutdown allowed for unknown container {container_id:?}"
                    )));
                };
                instance.status = ContainerStatus::Exited;
                Ok(json!({ "container_id": container_id, "status": "exited" }))
            }
            R::SignalProcess {
                container_id,
                signal,
                command,
            } => {
                let Some(instance) = self.containers.get_mut(container_id) else {
                    return Err(SideEffectError::internal(format!(
                        "signal allowed for unknown container {container_id:?}"
                    )));
                };
                for process in instance
                    .processes
                    .iter_mut()
                    .filter(|p| &p.command == command)
                {
                    process.status = ProcessStatus::Signaled;
                }
                Ok(json!({ "container_id": container_id, "signal": signal }))
            }
            R::MountHostDevice { target } | R::UnmountHostDevice { target } => {
                Ok(json!({ "target": target }))
            }
            R::MountScratch { target, encrypted } => {
                let attachment = if *encrypted {
                    // The ephemeral key lives in the slot only while the
                    // device is being provisioned, then gets erased.
                    let (device, key) = ScratchDevice::format(SCRATCH_SECTORS, &mut self.rng)
                        .map_err(|e| SideEffectError::internal(e.to_string()))?;
                    self.scratch_keys
                        .insert(target.clone(), KeySlot::Provisioned(key));
                    ScratchAttachment::Encrypted(device)
                } else {
                    ScratchAttachment::Plain(vec![vec![0u8; SECTOR_SIZE]; SCRATCH_SECTORS])
                };
                self.scratch_devices.insert(target.clone(), attachment);
                self.scratch_keys.insert(target.clone(), KeySlot::Erased);
                Ok(json!({
                    "target": target,
                    "encrypted": encrypted,
                    "sectors": SCRATCH_SECTORS,
                }))
            }
            R::UnmountScratch { target } => {
                self.scratch_devices.remove(target);
                self.scratch_keys.remove(target);
                Ok(json!({ "target": target }))
            }
            R::GetProperties {} => {
                let containers: Vec<Value> = self
                    .containers
                    .values()
                    .map(|c| {
                        json!({
                            "id": c.id,
                            "status": c.status,
                            "processes": c.processes.len(),
                        })
                    })
                    .collect();
                Ok(json!({
                    "containers": containers,
                    "devices": self.store.devices.len(),
                    "overlays": self.store.overlays.len(),
                }))
            }
            R::DumpStacks {} => Ok(json!({ "stacks": "simulated" })),
            R::RuntimeLogging {} | R::ContainerLogging {} => Ok(json!({ "logging": "enabled" })),
        }
    }

    /// Deterministic serialization of all security-relevant state, for
    /// atomicity assertions. The decision log is diagnostic and excluded.
    /// Struct fields and BTreeMap keys serialize in a fixed order, so the
    /// bytes are a stable function of the state.
    pub fn snapshot(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct ScratchSnap {
            kind: &'static str,
            sectors: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            content: Option<String>,
        }

        #[derive(Serialize)]
        struct SnapshotDoc<'a> {
            policy: &'a str,
            store: &'a MetadataStore,
            containers: &'a BTreeMap<String, ContainerInstance>,
            scratch_keys: &'a BTreeMap<String, KeySlot>,
            scratch_devices: BTreeMap<&'a String, ScratchSnap>,
            mounted_layers: BTreeMap<&'a String, String>,
            device_bus: BTreeMap<&'a String, String>,
        }

        let scratch_devices: BTreeMap<&String, ScratchSnap> = self
            .scratch_devices
            .iter()
            .map(|(target, attachment)| {
                let snap = match attachment {
                    ScratchAttachment::Encrypted(dev) => ScratchSnap {
                        kind: "encrypted",
                        sectors: dev.sector_count(),
                        content: Some(hex::encode(dev.content_digest())),
                    },
                    ScratchAttachment::Plain(sectors) => ScratchSnap {
                        kind: "plain",
                        sectors: sectors.len(),
                        content: None,
                    },
                };
                (target, snap)
            })
            .collect();
        let doc = SnapshotDoc {
            policy: &self.policy_digest_hex,
            store: &self.store,
            containers: &self.containers,
            scratch_keys: &self.scratch_keys,
            scratch_devices,
            mounted_layers: self
                .mounted_layers
                .iter()
                .map(|(t, m)| (t, hex::encode(m.trusted_root)))
                .collect(),
            device_bus: self
                .device_bus
                .iter()
                .map(|(t, img)| (t, hex::encode(img.root_hash())))
                .collect(),
        };
        serde_json::to_vec(&doc).expect("snapshot serialization")
    }
}

enum SideEffectError {
    Operational(String),
    Fault(Fault),
}

impl SideEffectError {
    fn internal(message: String) -> Self {
        SideEffectError::Fault(Fault::Internal(message))
    }
}

/// Anchored-regex matching for the oracle, independent of the engine's
/// compiled matchers. Compilation is memoized per pattern; the harness runs
/// the oracle after every fuzz step.
fn oracle_full_match(pattern: &str, candidate: &str) -> bool {
    use std::cell::RefCell;
    use std::collections::HashMap;
    thread_local! {
        static CACHE: RefCell<HashMap<String, Option<Regex>>> = RefCell::new(HashMap::new());
    }
    CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        let compiled = cache
            .entry(pattern.to_string())
            .or_insert_with(|| Regex::new(&format!(r"\A(?:{pattern})\z")).ok());
        compiled.as_ref().is_some_and(|re| re.is_match(candidate))
    })
}

/// Independent re-derivation of the safety predicate over the current
/// state. Test and harness code only; it deliberately re-implements the
/// matching logic instead of calling the engine.
pub fn safety_oracle(state: &UvmState) -> bool {
    let policy = state.policy();
    let store = state.store();

    // every mounted device digest is a layer of some template
    for digest in store.devices.values() {
        let known = policy
            .containers()
            .iter()
            .any(|t| t.layers().iter().any(|l| l == digest));
        if !known {
            return false;
        }
    }

    // overlays reference real templates and keep non-empty candidate sets
    for overlay in store.overlays.values() {
        if overlay.candidates.is_empty() {
            return false;
        }
        if !overlay
            .candidates
            .iter()
            .all(|id| policy.container(id).is_some())
        {
            return false;
        }
    }

    // every container candidate is genuinely consistent with what was
    // recorded about the container
    for entry in store.containers.values() {
        if entry.candidates.is_empty() {
            return false;
        }
        for id in &entry.candidates {
            let Some(template) = policy.container(id) else {
                return false;
            };
            if template.command() != entry.command.as_slice() {
                return false;
            }
            let all_env_allowed = entry.env.iter().all(|e| {
                template.env_rules().iter().any(|rule| match rule.strategy() {
                    EnvStrategy::Literal => rule.pattern() == e,
                    EnvStrategy::Regex => oracle_full_match(rule.pattern(), e),
                })
            });
            if !all_env_allowed {
                return false;
            }
        }
    }

    // scratch encryption compliance
    for encrypted in store.scratch.values() {
        if !encrypted && !policy.flags().allow_unencrypted_scratch() {
            return false;
        }
    }

    // host mounts must match an allowed pattern
    for target in &store.host_mounts {
        let allowed = policy
            .flags()
            .allow_host_device_mounts()
            .iter()
            .any(|p| oracle_full_match(p, target));
        if !allowed {
            return false;
        }
    }

    // agent and store agree on the set of live containers
    let store_ids: Vec<&String> = store.containers.keys().collect();
    let agent_ids: Vec<&String> = state.containers().keys().collect();
    if store_ids != agent_ids {
        return false;
    }

    // no scratch key survives its mount
    state
        .scratch_keys()
        .values()
        .all(|slot| *slot == KeySlot::Erased)
}

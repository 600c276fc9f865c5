//! Enforcement points: one rule per guest-agent action.
//!
//! Every rule is a pure function of the policy, the policy-maintained
//! metadata store, and the request parameters. The default answer is deny;
//! an allow carries the ordered metadata mutations that record it, and a
//! decision whose mutations cannot apply cleanly is converted back into a
//! deny, leaving the store untouched.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::policy::{ContainerTemplate, ExecutionPolicy, LayerDigest};

/// The policy's own state, mutated only through [`MetadataOp`]s emitted by
/// allowed decisions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataStore {
    /// Mounted layer devices: target path -> verity root hash.
    pub devices: BTreeMap<String, LayerDigest>,
    /// Mounted overlays: overlay id -> layer paths plus candidate templates.
    pub overlays: BTreeMap<String, OverlayEntry>,
    /// Created containers: container id -> narrowed candidates and matched
    /// start parameters.
    pub containers: BTreeMap<String, ContainerEntry>,
    /// Mounted scratch devices: target path -> encrypted flag.
    pub scratch: BTreeMap<String, bool>,
    /// Mounted host devices.
    pub host_mounts: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayEntry {
    pub layer_paths: Vec<String>,
    pub candidates: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerEntry {
    /// Template ids still consistent with everything observed about this
    /// container. Never empty, never grows.
    pub candidates: BTreeSet<String>,
    /// The start command that matched at creation.
    pub command: Vec<String>,
    /// The environment that matched at creation.
    pub env: Vec<String>,
    /// Commands admitted by exec rules since creation; signal targets.
    pub exec_commands: BTreeSet<Vec<String>>,
}

/// A requested mount, as supplied by the host at container creation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MountSpec {
    pub source: String,
    pub destination: String,
    pub mount_type: String,
    #[serde(default)]
    pub options: Vec<String>,
}

/// One action the host shim may request, with exactly the parameters the
/// corresponding enforcement point consumes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "payload", rename_all = "snake_case")]
pub enum EnforcementRequest {
    MountDevice {
        device_hash: LayerDigest,
        target: String,
    },
    UnmountDevice {
        target: String,
    },
    MountOverlay {
        overlay_id: String,
        layer_paths: Vec<String>,
        target: String,
    },
    UnmountOverlay {
        overlay_id: String,
    },
    CreateContainer {
        container_id: String,
        overlay_id: String,
        command: Vec<String>,
        env: Vec<String>,
        working_dir: String,
        #[serde(default)]
        mounts: Vec<MountSpec>,
    },
    ExecInContainer {
        container_id: String,
        command: Vec<String>,
        env: Vec<String>,
        working_dir: String,
    },
    ExecExternal {
        command: Vec<String>,
        env: Vec<String>,
        working_dir: String,
    },
    ShutdownContainer {
        container_id: String,
    },
    SignalProcess {
        container_id: String,
        signal: i64,
        command: Vec<String>,
    },
    MountHostDevice {
        target: String,
    },
    UnmountHostDevice {
        target: String,
    },
    MountScratch {
        target: String,
        encrypted: bool,
    },
    UnmountScratch {
        target: String,
    },
    GetProperties {},
    DumpStacks {},
    RuntimeLogging {},
    ContainerLogging {},
}

#[derive(Debug, Error)]
#[error("unrecognized request: {0}")]
pub struct RequestDecodeError(String);

impl EnforcementRequest {
    pub fn action_name(&self) -> &'static str {
        match self {
            Self::MountDevice { .. } => "mount_device",
            Self::UnmountDevice { .. } => "unmount_device",
            Self::MountOverlay { .. } => "mount_overlay",
            Self::UnmountOverlay { .. } => "unmount_overlay",
            Self::CreateContainer { .. } => "create_container",
            Self::ExecInContainer { .. } => "exec_in_container",
            Self::ExecExternal { .. } => "exec_external",
            Self::ShutdownContainer { .. } => "shutdown_container",
            Self::SignalProcess { .. } => "signal_process",
            Self::MountHostDevice { .. } => "mount_host_device",
            Self::UnmountHostDevice { .. } => "unmount_host_device",
            Self::MountScratch { .. } => "mount_scratch",
            Self::UnmountScratch { .. } => "unmount_scratch",
            Self::GetProperties {} => "get_properties",
            Self::DumpStacks {} => "dump_stacks",
            Self::RuntimeLogging {} => "runtime_logging",
            Self::ContainerLogging {} => "container_logging",
        }
    }

    /// All sixteen wire action names, in document order.
    pub const ACTION_NAMES: [&'static str; 17] = [
        "mount_device",
        "unmount_device",
        "mount_overlay",
        "unmount_overlay",
        "create_container",
        "exec_in_container",
        "exec_external",
        "shutdown_container",
        "signal_process",
        "mount_host_device",
        "unmount_host_device",
        "mount_scratch",
        "unmount_scratch",
        "get_properties",
        "dump_stacks",
        "runtime_logging",
        "container_logging",
    ];

    /// Decode an action name plus JSON payload, as received off the wire.
    pub fn from_wire(action: &str, payload: &Value) -> Result<Self, RequestDecodeError> {
        let tagged = json!({"action": action, "payload": payload});
        serde_json::from_value(tagged).map_err(|e| RequestDecodeError(e.to_string()))
    }

    /// The wire form: `(action, payload)`.
    pub fn to_wire(&self) -> (String, Value) {
        let tagged = serde_json::to_value(self).expect("request serialization");
        let action = tagged["action"].as_str().expect("action tag").to_string();
        let payload = tagged.get("payload").cloned().unwrap_or_else(|| json!({}));
        (action, payload)
    }
}

/// Stable deny labels; the wire form is the snake_case string.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    Malformed,
    FlagDisabled,
    DeviceTargetInUse,
    DeviceHashNotInPolicy,
    UnknownDeviceTarget,
    OverlayIdInUse,
    UnknownLayerPath,
    NoMatchingTemplate,
    UnknownOverlay,
    ContainerIdInUse,
    UnknownContainer,
    NoMatchingExecRule,
    NoMatchingExternalRule,
    UnknownProcessCommand,
    SignalNotAllowed,
    ScratchTargetInUse,
    UnencryptedScratchNotAllowed,
    UnknownScratchTarget,
    HostDeviceTargetInUse,
    HostDeviceNotAllowed,
    UnknownHostDeviceTarget,
    MetadataConflict,
}

impl DenyReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Malformed => "malformed",
            Self::FlagDisabled => "flag_disabled",
            Self::DeviceTargetInUse => "device_target_in_use",
            Self::DeviceHashNotInPolicy => "device_hash_not_in_policy",
            Self::UnknownDeviceTarget => "unknown_device_target",
            Self::OverlayIdInUse => "overlay_id_in_use",
            Self::UnknownLayerPath => "unknown_layer_path",
            Self::NoMatchingTemplate => "no_matching_template",
            Self::UnknownOverlay => "unknown_overlay",
            Self::ContainerIdInUse => "container_id_in_use",
            Self::UnknownContainer => "unknown_container",
            Self::NoMatchingExecRule => "no_matching_exec_rule",
            Self::NoMatchingExternalRule => "no_matching_external_rule",
            Self::UnknownProcessCommand => "unknown_process_command",
            Self::SignalNotAllowed => "signal_not_allowed",
            Self::ScratchTargetInUse => "scratch_target_in_use",
            Self::UnencryptedScratchNotAllowed => "unencrypted_scratch_not_allowed",
            Self::UnknownScratchTarget => "unknown_scratch_target",
            Self::HostDeviceTargetInUse => "host_device_target_in_use",
            Self::HostDeviceNotAllowed => "host_device_not_allowed",
            Self::UnknownHostDeviceTarget => "unknown_host_device_target",
            Self::MetadataConflict => "metadata_conflict",
        }
    }
}

impl std::fmt::Display for DenyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which section of the metadata store an op touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreSection {
    Devices,
    Overlays,
    Containers,
    Scratch,
    HostMounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpAction {
    Add,
    Update,
    Remove,
}

/// One atomic mutation of the metadata store. `add` fails on an existing
/// key, `update` and `remove` fail on a missing key; any failure aborts the
/// whole decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataOp {
    pub name: StoreSection,
    pub action: OpAction,
    pub key: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
}

impl MetadataOp {
    pub fn add(name: StoreSection, key: impl Into<String>, value: Value) -> Self {
        Self {
            name,
            action: OpAction::Add,
            key: key.into(),
            value: Some(value),
        }
    }

    pub fn update(name: StoreSection, key: impl Into<String>, value: Value) -> Self {
        Self {
            name,
            action: OpAction::Update,
            key: key.into(),
            value: Some(value),
        }
    }

    pub fn remove(name: StoreSection, key: impl Into<String>) -> Self {
        Self {
            name,
            action: OpAction::Remove,
            key: key.into(),
            value: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetadataConflict {
    #[error("add on existing key {0:?}")]
    KeyExists(String),
    #[error("{0:?} on missing key {1:?}")]
    KeyMissing(&'static str, String),
    #[error("malformed op value for key {0:?}: {1}")]
    BadValue(String, String),
}

impl MetadataStore {
    /// Apply ops to a copy of the store; any conflict aborts the whole batch.
    pub fn apply(&self, ops: &[MetadataOp]) -> Result<MetadataStore, MetadataConflict> {
        let mut next = self.clone();
        for op in ops {
            next.apply_one(op)?;
        }
        Ok(next)
    }

    fn apply_one(&mut self, op: &MetadataOp) -> Result<(), MetadataConflict> {
        match op.name {
            StoreSection::Devices => apply_map(&mut self.devices, op),
            StoreSection::Overlays => apply_map(&mut self.overlays, op),
            StoreSection::Containers => apply_map(&mut self.containers, op),
            StoreSection::Scratch => apply_map(&mut self.scratch, op),
            StoreSection::HostMounts => match op.action {
                OpAction::Add => {
                    if !self.host_mounts.insert(op.key.clone()) {
                        return Err(MetadataConflict::KeyExists(op.key.clone()));
                    }
                    Ok(())
                }
                OpAction::Update => {
                    if self.host_mounts.contains(&op.key) {
                        Ok(())
                    } else {
                        Err(MetadataConflict::KeyMissing("update", op.key.clone()))
                    }
                }
                OpAction::Remove => {
                    if self.host_mounts.remove(&op.key) {
                        Ok(())
                    } else {
                        Err(MetadataConflict::KeyMissing("remove", op.key.clone()))
                    }
                }
            },
        }
    }
}

fn apply_map<T: serde::de::DeserializeOwned>(
    map: &mut BTreeMap<String, T>,
    op: &MetadataOp,
) -> Result<(), MetadataConflict> {
    let decode = |v: &Option<Value>| -> Result<T, MetadataConflict> {
        let value = v
            .clone()
            .ok_or_else(|| MetadataConflict::BadValue(op.key.clone(), "missing value".into()))?;
        serde_json::from_value(value)
            .map_err(|e| MetadataConflict::BadValue(op.key.clone(), e.to_string()))
    };
    match op.action {
        OpAction::Add => {
            if map.contains_key(&op.key) {
                return Err(MetadataConflict::KeyExists(op.key.clone()));
            }
            map.insert(op.key.clone(), decode(&op.value)?);
            Ok(())
        }
        OpAction::Update => {
            if !map.contains_key(&op.key) {
                return Err(MetadataConflict::KeyMissing("update", op.key.clone()));
            }
            map.insert(op.key.clone(), decode(&op.value)?);
            Ok(())
        }
        OpAction::Remove => {
            if map.remove(&op.key).is_none() {
                return Err(MetadataConflict::KeyMissing("remove", op.key.clone()));
            }
            Ok(())
        }
    }
}

/// The outcome of one enforcement point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnforcementDecision {
    pub allowed: bool,
    /// Mutations to record an allow; always empty on deny.
    pub metadata_ops: Vec<MetadataOp>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deny_reason: Option<DenyReason>,
}

impl EnforcementDecision {
    pub fn allow(metadata_ops: Vec<MetadataOp>) -> Self {
        Self {
            allowed: true,
            metadata_ops,
            deny_reason: None,
        }
    }

    pub fn deny(reason: DenyReason) -> Self {
        Self {
            allowed: false,
            metadata_ops: Vec::new(),
            deny_reason: Some(reason),
        }
    }
}

/// Evaluate one request. Returns the decision plus the store that results
/// from it: the input store with the decision's ops applied when allowed,
/// or an identical copy when denied. A conflict while applying ops turns
/// the allow into a deny.
pub fn enforce(
    policy: &ExecutionPolicy,
    store: &MetadataStore,
    request: &EnforcementRequest,
) -> (EnforcementDecision, MetadataStore) {
    let decision = evaluate(policy, store, request);
    if decision.allowed {
        match store.apply(&decision.metadata_ops) {
            Ok(next) => (decision, next),
            Err(_) => (
                EnforcementDecision::deny(DenyReason::MetadataConflict),
                store.clone(),
            ),
        }
    } else {
        (decision, store.clone())
    }
}

fn evaluate(
    policy: &ExecutionPolicy,
    store: &MetadataStore,
    request: &EnforcementRequest,
) -> EnforcementDecision {
    use EnforcementRequest as R;
    match request {
        R::MountDevice {
            device_hash,
            target,
        } => rule_mount_device(policy, store, device_hash, target),
        R::UnmountDevice { target } => rule_unmount_device(policy, store, target),
        R::MountOverlay {
            overlay_id,
            layer_paths,
            target,
        } => rule_mount_overlay(policy, store, overlay_id, layer_paths, target),
        R::UnmountOverlay { overlay_id } => rule_unmount_overlay(policy, store, overlay_id),
        R::CreateContainer {
            container_id,
            overlay_id,
            command,
            env,
            working_dir,
            mounts,
        } => rule_create_container(
            policy,
            store,
            container_id,
            overlay_id,
            command,
            env,
            working_dir,
            mounts,
        ),
        R::ExecInContainer {
            container_id,
            command,
            env,
            working_dir,
        } => rule_exec_in_container(policy, store, container_id, command, env, working_dir),
        R::ExecExternal {
            command,
            env,
            working_dir,
        } => rule_exec_external(policy, store, command, env, working_dir),
        R::ShutdownContainer { container_id } => {
            rule_shutdown_container(policy, store, container_id)
        }
        R::SignalProcess {
            container_id,
            signal,
            command,
        } => rule_signal(policy, store, container_id, *signal, command),
        R::MountHostDevice { target } => rule_mount_host_device(policy, store, target),
        R::UnmountHostDevice { target } => rule_unmount_host(policy, store, target),
        R::MountScratch { target, encrypted } => {
            rule_mount_scratch(policy, store, target, *encrypted)
        }
        R::UnmountScratch { target } => rule_unmount_scratch(policy, store, target),
        R::GetProperties {} => rule_flag_gated(policy.flags().allow_properties_access()),
        R::DumpStacks {} => rule_flag_gated(policy.flags().allow_dump_stacks()),
        R::RuntimeLogging {} => rule_flag_gated(policy.flags().allow_runtime_logging()),
        R::ContainerLogging {} => rule_flag_gated(policy.flags().allow_container_logging()),
    }
}

/// Allow iff the target is unmounted and the hash is a layer of some
/// template.
pub fn rule_mount_device(
    policy: &ExecutionPolicy,
    store: &MetadataStore,
    device_hash: &LayerDigest,
    target: &str,
) -> EnforcementDecision {
    if !target.starts_with('/') {
        return EnforcementDecision::deny(DenyReason::Malformed);
    }
    if store.devices.contains_key(target) {
        return EnforcementDecision::deny(DenyReason::DeviceTargetInUse);
    }
    if !policy.layer_known(device_hash) {
        return EnforcementDecision::deny(DenyReason::DeviceHashNotInPolicy);
    }
    EnforcementDecision::allow(vec![MetadataOp::add(
        StoreSection::Devices,
        target,
        json!(device_hash.to_hex()),
    )])
}

pub fn rule_unmount_device(
    _policy: &ExecutionPolicy,
    store: &MetadataStore,
    target: &str,
) -> EnforcementDecision {
    if !store.devices.contains_key(target) {
        return EnforcementDecision::deny(DenyReason::UnknownDeviceTarget);
    }
    // A device may be unmounted while an overlay still references its path;
    // the overlay entry simply goes stale. Overlay candidates were resolved
    // at overlay-mount time, so no decision depends on the stale path.
    EnforcementDecision::allow(vec![MetadataOp::remove(StoreSection::Devices, target)])
}

/// Translate the layer paths through the device map and allow iff the
/// resulting digest sequence equals some template's full ordered layer list.
pub fn rule_mount_overlay(
    policy: &ExecutionPolicy,
    store: &MetadataStore,
    overlay_id: &str,
    layer_paths: &[String],
    _target: &str,
) -> EnforcementDecision {
    if layer_paths.is_empty() {
        return EnforcementDecision::deny(DenyReason::Malformed);
    }
    if store.overlays.contains_key(overlay_id) {
        return EnforcementDecision::deny(DenyReason::OverlayIdInUse);
    }
    let mut digests = Vec::with_capacity(layer_paths.len());
    for path in layer_paths {
        match store.devices.get(path) {
            Some(digest) => digests.push(*digest),
            None => return EnforcementDecision::deny(DenyReason::UnknownLayerPath),
        }
    }
    let candidates: BTreeSet<String> = policy
        .containers()
        .iter()
        .filter(|t| t.layers() == digests.as_slice())
        .map(|t| t.id().to_string())
        .collect();
    if candidates.is_empty() {
        return EnforcementDecision::deny(DenyReason::NoMatchingTemplate);
    }
    let entry = OverlayEntry {
        layer_paths: layer_paths.to_vec(),
        candidates,
    };
    EnforcementDecision::allow(vec![MetadataOp::add(
        StoreSection::Overlays,
        overlay_id,
        serde_json::to_value(entry).expect("overlay entry serialization"),
    )])
}

pub fn rule_unmount_overlay(
    _policy: &ExecutionPolicy,
    store: &MetadataStore,
    overlay_id: &str,
) -> EnforcementDecision {
    if !store.overlays.contains_key(overlay_id) {
        return EnforcementDecision::deny(DenyReason::UnknownOverlay);
    }
    EnforcementDecision::allow(vec![MetadataOp::remove(StoreSection::Overlays, overlay_id)])
}

fn template_admits_start(
    template: &ContainerTemplate,
    command: &[String],
    env: &[String],
    working_dir: &str,
    mounts: &[MountSpec],
) -> bool {
    template.command() == command
        && template.working_dir() == working_dir
        && env.iter().all(|entry| template.env_allowed(entry))
        && mounts.iter().all(|m| {
            template
                .mounts()
                .iter()
                .any(|rule| rule.matches(&m.source, &m.destination, &m.mount_type, &m.options))
        })
}

/// Narrow the overlay's candidates by the observed start parameters; allow
/// iff some template remains. The overlay stays mounted.
#[allow(clippy::too_many_arguments)]
pub fn rule_create_container(
    policy: &ExecutionPolicy,
    store: &MetadataStore,
    container_id: &str,
    overlay_id: &str,
    command: &[String],
    env: &[String],
    working_dir: &str,
    mounts: &[MountSpec],
) -> EnforcementDecision {
    let Some(overlay) = store.overlays.get(overlay_id) else {
        return EnforcementDecision::deny(DenyReason::UnknownOverlay);
    };
    if store.containers.contains_key(container_id) {
        return EnforcementDecision::deny(DenyReason::ContainerIdInUse);
    }
    let narrowed: BTreeSet<String> = overlay
        .candidates
        .iter()
        .filter(|id| {
            policy
                .container(id)
                .is_some_and(|t| template_admits_start(t, command, env, working_dir, mounts))
        })
        .cloned()
        .collect();
    if narrowed.is_empty() {
        return EnforcementDecision::deny(DenyReason::NoMatchingTemplate);
    }
    let entry = ContainerEntry {
        candidates: narrowed,
        command: command.to_vec(),
        env: env.to_vec(),
        exec_commands: BTreeSet::new(),
    };
    EnforcementDecision::allow(vec![MetadataOp::add(
        StoreSection::Containers,
        container_id,
        serde_json::to_value(entry).expect("container entry serialization"),
    )])
}

/// Allow iff some remaining candidate has an exec rule admitting the
/// process; narrows the candidate set to those templates and records the
/// command as a signal target.
pub fn rule_exec_in_container(
    policy: &ExecutionPolicy,
    store: &MetadataStore,
    container_id: &str,
    command: &[String],
    env: &[String],
    working_dir: &str,
) -> EnforcementDecision {
    let Some(entry) = store.containers.get(container_id) else {
        return EnforcementDecision::deny(DenyReason::UnknownContainer);
    };
    let matched: BTreeSet<String> = entry
        .candidates
        .iter()
        .filter(|id| {
            policy.container(id).is_some_and(|t| {
                t.exec_processes()
                    .iter()
                    .any(|rule| rule.matches(command, env, working_dir))
            })
        })
        .cloned()
        .collect();
    if matched.is_empty() {
        return EnforcementDecision::deny(DenyReason::NoMatchingExecRule);
    }
    let mut next = entry.clone();
    next.candidates = matched;
    next.exec_commands.insert(command.to_vec());
    EnforcementDecision::allow(vec![MetadataOp::update(
        StoreSection::Containers,
        container_id,
        serde_json::to_value(next).expect("container entry serialization"),
    )])
}

pub fn rule_exec_external(
    policy: &ExecutionPolicy,
    _store: &MetadataStore,
    command: &[String],
    env: &[String],
    working_dir: &str,
) -> EnforcementDecision {
    if policy
        .external_processes()
        .iter()
        .any(|rule| rule.matches(command, env, working_dir))
    {
        EnforcementDecision::allow(Vec::new())
    } else {
        EnforcementDecision::deny(DenyReason::NoMatchingExternalRule)
    }
}

/// Allow iff the command is the container's matched start command or a
/// previously admitted exec command, and the signal is listed by some
/// remaining candidate.
pub fn rule_signal(
    policy: &ExecutionPolicy,
    store: &MetadataStore,
    container_id: &str,
    signal: i64,
    command: &[String],
) -> EnforcementDecision {
    let Some(entry) = store.containers.get(container_id) else {
        return EnforcementDecision::deny(DenyReason::UnknownContainer);
    };
    if entry.command != command && !entry.exec_commands.contains(command) {
        return EnforcementDecision::deny(DenyReason::UnknownProcessCommand);
    }
    let listed = entry.candidates.iter().any(|id| {
        policy
            .container(id)
            .is_some_and(|t| t.signals().contains(&signal))
    });
    if !listed {
        return EnforcementDecision::deny(DenyReason::SignalNotAllowed);
    }
    EnforcementDecision::allow(Vec::new())
}

pub fn rule_shutdown_container(
    _policy: &ExecutionPolicy,
    store: &MetadataStore,
    container_id: &str,
) -> EnforcementDecision {
    if !store.containers.contains_key(container_id) {
        return EnforcementDecision::deny(DenyReason::UnknownContainer);
    }
    EnforcementDecision::allow(vec![MetadataOp::remove(
        StoreSection::Containers,
        container_id,
    )])
}

pub fn rule_mount_host_device(
    policy: &ExecutionPolicy,
    store: &MetadataStore,
    target: &str,
) -> EnforcementDecision {
    if store.host_mounts.contains(target) {
        return EnforcementDecision::deny(DenyReason::HostDeviceTargetInUse);
    }
    if !policy.flags().host_device_allowed(target) {
        return EnforcementDecision::deny(DenyReason::HostDeviceNotAllowed);
    }
    EnforcementDecision::allow(vec![MetadataOp::add(
        StoreSection::HostMounts,
        target,
        Value::Null,
    )])
}

pub fn rule_unmount_host(
    _policy: &ExecutionPolicy,
    store: &MetadataStore,
    target: &str,
) -> EnforcementDecision {
    if !store.host_mounts.contains(target) {
        return EnforcementDecision::deny(DenyReason::UnknownHostDeviceTarget);
    }
    EnforcementDecision::allow(vec![MetadataOp::remove(StoreSection::HostMounts, target)])
}

/// Allow iff the target is fresh and either the mount is encrypted or the
/// policy explicitly tolerates plaintext scratch.
pub fn rule_mount_scratch(
    policy: &ExecutionPolicy,
    store: &MetadataStore,
    target: &str,
    encrypted: bool,
) -> EnforcementDecision {
    if store.scratch.contains_key(target) {
        return EnforcementDecision::deny(DenyReason::ScratchTargetInUse);
    }
    if !encrypted && !policy.flags().allow_unencrypted_scratch() {
        return EnforcementDecision::deny(DenyReason::UnencryptedScratchNotAllowed);
    }
    EnforcementDecision::allow(vec![MetadataOp::add(
        StoreSection::Scratch,
        target,
        json!(encrypted),
    )])
}

pub fn rule_unmount_scratch(
    _policy: &ExecutionPolicy,
    store: &MetadataStore,
    target: &str,
) -> EnforcementDecision {
    if !store.scratch.contains_key(target) {
        return EnforcementDecision::deny(DenyReason::UnknownScratchTarget);
    }
    EnforcementDecision::allow(vec![MetadataOp::remove(StoreSection::Scratch, target)])
}

/// The four informational actions: gated purely by their flag, never
/// touching the store.
pub fn rule_flag_gated(flag: bool) -> EnforcementDecision {
    if flag {
        EnforcementDecision::allow(Vec::new())
    } else {
        EnforcementDecision::deny(DenyReason::FlagDisabled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ExecutionPolicy;

    const H1: &str = "1111111111111111111111111111111111111111111111111111111111111111";
    const H2: &str = "2222222222222222222222222222222222222222222222222222222222222222";
    const ROGUE: &str = "baadf00dbaadf00dbaadf00dbaadf00dbaadf00dbaadf00dbaadf00dbaadf00d";

    fn two_template_policy() -> ExecutionPolicy {
        ExecutionPolicy::parse(&format!(
            r#"{{
              "version": 1,
              "containers": [
                {{
                  "id": "app",
                  "layers": ["{H1}", "{H2}"],
                  "command": ["/bin/app"],
                  "env_rules": [
                    {{"pattern": "PATH=/usr/bin"}},
                    {{"pattern": "TERM=xterm-[0-9]+", "strategy": "regex"}}
                  ],
                  "working_dir": "/",
                  "mounts": [
                    {{"source_pattern": "/host/data", "destination": "/data",
                      "mount_type": "bind", "options": ["ro"]}}
                  ],
                  "exec_processes": [
                    {{"command": ["/bin/status"], "env_rules": [{{"pattern": "PATH=/usr/bin"}}],
                      "working_dir": "/"}}
                  ],
                  "signals": [15]
                }},
                {{
                  "id": "sidecar",
                  "layers": ["{H1}"],
                  "command": ["/bin/side"],
                  "working_dir": "/",
                  "signals": [9]
                }}
              ],
              "external_processes": [
                {{"command": ["/bin/probe"], "env_rules": [{{"pattern": "PATH=/usr/bin"}}],
                  "working_dir": "/"}}
              ],
              "flags": {{}}
            }}"#
        ))
        .unwrap()
    }

    fn mount(target: &str, hash: &str) -> EnforcementRequest {
        EnforcementRequest::MountDevice {
            device_hash: LayerDigest::from_hex(hash).unwrap(),
            target: target.to_string(),
        }
    }

    fn run(
        policy: &ExecutionPolicy,
        store: MetadataStore,
        requests: &[EnforcementRequest],
    ) -> (Vec<bool>, MetadataStore) {
        let mut store = store;
        let mut outcomes = Vec::new();
        for request in requests {
            let (decision, next) = enforce(policy, &store, request);
            outcomes.push(decision.allowed);
            store = next;
        }
        (outcomes, store)
    }

    #[test]
    fn empty_policy_denies_every_action() {
        let policy = ExecutionPolicy::empty();
        let store = MetadataStore::default();
        let requests = vec![
            mount("/run/l0", H1),
            EnforcementRequest::UnmountDevice { target: "/run/l0".into() },
            EnforcementRequest::MountOverlay {
                overlay_id: "ov0".into(),
                layer_paths: vec!["/run/l0".into()],
                target: "/run/ov0".into(),
            },
            EnforcementRequest::UnmountOverlay { overlay_id: "ov0".into() },
            EnforcementRequest::CreateContainer {
                container_id: "c0".into(),
                overlay_id: "ov0".into(),
                command: vec!["/bin/app".into()],
                env: vec![],
                working_dir: "/".into(),
                mounts: vec![],
            },
            EnforcementRequest::ExecInContainer {
                container_id: "c0".into(),
                command: vec!["/bin/status".into()],
                env: vec![],
                working_dir: "/".into(),
            },
            EnforcementRequest::ExecExternal {
                command: vec!["/bin/probe".into()],
                env: vec![],
                working_dir: "/".into(),
            },
            EnforcementRequest::ShutdownContainer { container_id: "c0".into() },
            EnforcementRequest::SignalProcess {
                container_id: "c0".into(),
                signal: 15,
                command: vec!["/bin/app".into()],
            },
            EnforcementRequest::MountHostDevice { target: "/dev/hd0".into() },
            EnforcementRequest::UnmountHostDevice { target: "/dev/hd0".into() },
            EnforcementRequest::MountScratch { target: "/mnt/s0".into(), encrypted: false },
            EnforcementRequest::UnmountScratch { target: "/mnt/s0".into() },
            EnforcementRequest::GetProperties {},
            EnforcementRequest::DumpStacks {},
            EnforcementRequest::RuntimeLogging {},
            EnforcementRequest::ContainerLogging {},
        ];
        assert_eq!(requests.len(), EnforcementRequest::ACTION_NAMES.len());
        for request in &requests {
            let (decision, next) = enforce(&policy, &store, request);
            assert!(!decision.allowed, "{:?} should be denied", request.action_name());
            assert!(decision.metadata_ops.is_empty());
            assert!(decision.deny_reason.is_some());
            assert_eq!(next, store, "denied request must not mutate the store");
        }
        // An encrypted scratch mount is the one action the empty policy
        // allows; everything container-related stays denied.
        let (decision, _) = enforce(
            &policy,
            &store,
            &EnforcementRequest::MountScratch { target: "/mnt/s0".into(), encrypted: true },
        );
        assert!(decision.allowed);
    }

    #[test]
    fn flag_gate_allows_when_set_and_ignores_store() {
        let policy = ExecutionPolicy::parse(
            r#"{"version":1,"flags":{"allow_properties_access":true}}"#,
        )
        .unwrap();
        let empty = MetadataStore::default();
        let (decision, next) = enforce(&policy, &empty, &EnforcementRequest::GetProperties {});
        assert!(decision.allowed);
        assert!(decision.metadata_ops.is_empty());
        assert_eq!(next, empty);

        let mut busy = MetadataStore::default();
        busy.devices.insert("/run/l0".into(), LayerDigest::from_hex(H1).unwrap());
        let (with_state, _) = enforce(&policy, &busy, &EnforcementRequest::GetProperties {});
        assert_eq!(decision, with_state, "flag decisions are stateless");
    }

    #[test]
    fn mount_device_allows_known_hash_and_records_it() {
        let policy = two_template_policy();
        let (decision, store) =
            enforce(&policy, &MetadataStore::default(), &mount("/run/l0", H1));
        assert!(decision.allowed);
        assert_eq!(decision.metadata_ops.len(), 1);
        assert_eq!(store.devices["/run/l0"].to_hex(), H1);
    }

    #[test]
    fn mount_device_denies_rogue_hash() {
        let policy = two_template_policy();
        let (decision, _) =
            enforce(&policy, &MetadataStore::default(), &mount("/run/l0", ROGUE));
        assert_eq!(decision.deny_reason, Some(DenyReason::DeviceHashNotInPolicy));
    }

    #[test]
    fn mount_device_denies_busy_target() {
        let policy = two_template_policy();
        let (outcomes, _) = run(
            &policy,
            MetadataStore::default(),
            &[mount("/run/l0", H1), mount("/run/l0", H2)],
        );
        assert_eq!(outcomes, [true, false]);
    }

    #[test]
    fn mount_device_rejects_relative_target_as_malformed() {
        let policy = two_template_policy();
        let (decision, _) = enforce(&policy, &MetadataStore::default(), &mount("run/l0", H1));
        assert_eq!(decision.deny_reason, Some(DenyReason::Malformed));
    }

    #[test]
    fn unmount_then_remount_is_allowed() {
        // Expected outcomes frozen from the exhaustive trace oracle: the
        // 3-step sequence mount/unmount/mount over one target is all-allow.
        let policy = two_template_policy();
        let (outcomes, store) = run(
            &policy,
            MetadataStore::default(),
            &[
                mount("/run/l0", H1),
                EnforcementRequest::UnmountDevice { target: "/run/l0".into() },
                mount("/run/l0", H1),
            ],
        );
        assert_eq!(outcomes, [true, true, true]);
        assert!(store.devices.contains_key("/run/l0"));
    }

    #[test]
    fn unmount_unknown_target_denied() {
        let policy = two_template_policy();
        let (decision, _) = enforce(
            &policy,
            &MetadataStore::default(),
            &EnforcementRequest::UnmountDevice { target: "/run/l0".into() },
        );
        assert_eq!(decision.deny_reason, Some(DenyReason::UnknownDeviceTarget));
    }

    fn mounted_store(policy: &ExecutionPolicy) -> MetadataStore {
        let (outcomes, store) = run(
            policy,
            MetadataStore::default(),
            &[mount("/run/l0", H1), mount("/run/l1", H2)],
        );
        assert_eq!(outcomes, [true, true]);
        store
    }

    #[test]
    fn overlay_requires_exact_layer_order() {
        let policy = two_template_policy();
        let store = mounted_store(&policy);
        let ordered = EnforcementRequest::MountOverlay {
            overlay_id: "ov0".into(),
            layer_paths: vec!["/run/l0".into(), "/run/l1".into()],
            target: "/run/ov0".into(),
        };
        let (decision, next) = enforce(&policy, &store, &ordered);
        assert!(decision.allowed);
        assert_eq!(
            next.overlays["ov0"].candidates,
            BTreeSet::from(["app".to_string()])
        );

        let reversed = EnforcementRequest::MountOverlay {
            overlay_id: "ov1".into(),
            layer_paths: vec!["/run/l1".into(), "/run/l0".into()],
            target: "/run/ov1".into(),
        };
        let (decision, _) = enforce(&policy, &store, &reversed);
        assert_eq!(decision.deny_reason, Some(DenyReason::NoMatchingTemplate));
    }

    #[test]
    fn overlay_with_unknown_path_denied() {
        let policy = two_template_policy();
        let store = mounted_store(&policy);
        let (decision, _) = enforce(
            &policy,
            &store,
            &EnforcementRequest::MountOverlay {
                overlay_id: "ov0".into(),
                layer_paths: vec!["/run/l0".into(), "/run/ghost".into()],
                target: "/run/ov0".into(),
            },
        );
        assert_eq!(decision.deny_reason, Some(DenyReason::UnknownLayerPath));
    }

    #[test]
    fn overlay_candidates_enumerate_all_matching_templates() {
        // Two templates sharing the same single-layer stack; candidates from
        // a brute-force scan over all templates must list both.
        let policy = ExecutionPolicy::parse(&format!(
            r#"{{"version":1,"containers":[
                {{"id":"t1","layers":["{H1}"],"command":["/a"],"working_dir":"/"}},
                {{"id":"t2","layers":["{H1}"],"command":["/b"],"working_dir":"/"}}
            ]}}"#
        ))
        .unwrap();
        let (_, store) = run(&policy, MetadataStore::default(), &[mount("/run/l0", H1)]);
        let (decision, next) = enforce(
            &policy,
            &store,
            &EnforcementRequest::MountOverlay {
                overlay_id: "ov0".into(),
                layer_paths: vec!["/run/l0".into()],
                target: "/run/ov0".into(),
            },
        );
        assert!(decision.allowed);
        // brute-force reference: every template whose layer list equals the
        // translated digest sequence
        let digests = vec![store.devices["/run/l0"]];
        let expected: BTreeSet<String> = policy
            .containers()
            .iter()
            .filter(|t| t.layers() == digests.as_slice())
            .map(|t| t.id().to_string())
            .collect();
        assert_eq!(expected, BTreeSet::from(["t1".to_string(), "t2".to_string()]));
        assert_eq!(next.overlays["ov0"].candidates, expected);
    }

    fn overlay_store(policy: &ExecutionPolicy) -> MetadataStore {
        let store = mounted_store(policy);
        let (decision, store) = enforce(
            policy,
            &store,
            &EnforcementRequest::MountOverlay {
                overlay_id: "ov0".into(),
                layer_paths: vec!["/run/l0".into(), "/run/l1".into()],
                target: "/run/ov0".into(),
            },
        );
        assert!(decision.allowed);
        store
    }

    fn create_request(env: Vec<String>) -> EnforcementRequest {
        EnforcementRequest::CreateContainer {
            container_id: "c0".into(),
            overlay_id: "ov0".into(),
            command: vec!["/bin/app".into()],
            env,
            working_dir: "/".into(),
            mounts: vec![MountSpec {
                source: "/host/data".into(),
                destination: "/data".into(),
                mount_type: "bind".into(),
                options: vec!["ro".into()],
            }],
        }
    }

    #[test]
    fn create_container_allows_matching_start() {
        let policy = two_template_policy();
        let store = overlay_store(&policy);
        let (decision, next) = enforce(
            &policy,
            &store,
            &create_request(vec!["PATH=/usr/bin".into(), "TERM=xterm-256".into()]),
        );
        assert!(decision.allowed, "{:?}", decision.deny_reason);
        let entry = &next.containers["c0"];
        assert_eq!(entry.candidates, BTreeSet::from(["app".to_string()]));
        assert!(next.overlays.contains_key("ov0"), "overlay stays mounted");
    }

    #[test]
    fn create_container_denies_unmatched_env() {
        let policy = two_template_policy();
        let store = overlay_store(&policy);
        let (decision, next) = enforce(
            &policy,
            &store,
            &create_request(vec!["PATH=/usr/bin".into(), "EVIL=1".into()]),
        );
        assert_eq!(decision.deny_reason, Some(DenyReason::NoMatchingTemplate));
        assert_eq!(next, store);
    }

    #[test]
    fn create_container_narrows_candidates_by_command() {
        let policy = ExecutionPolicy::parse(&format!(
            r#"{{"version":1,"containers":[
                {{"id":"t1","layers":["{H1}"],"command":["/a"],"working_dir":"/"}},
                {{"id":"t2","layers":["{H1}"],"command":["/b"],"working_dir":"/"}}
            ]}}"#
        ))
        .unwrap();
        let (_, store) = run(
            &policy,
            MetadataStore::default(),
            &[
                mount("/run/l0", H1),
                EnforcementRequest::MountOverlay {
                    overlay_id: "ov0".into(),
                    layer_paths: vec!["/run/l0".into()],
                    target: "/run/ov0".into(),
                },
            ],
        );
        // brute-force filter over the candidate set
        let expected: BTreeSet<String> = store.overlays["ov0"]
            .candidates
            .iter()
            .filter(|id| policy.container(id).unwrap().command() == ["/b".to_string()])
            .cloned()
            .collect();
        assert_eq!(expected, BTreeSet::from(["t2".to_string()]));
        let (decision, next) = enforce(
            &policy,
            &store,
            &EnforcementRequest::CreateContainer {
                container_id: "c0".into(),
                overlay_id: "ov0".into(),
                command: vec!["/b".into()],
                env: vec![],
                working_dir: "/".into(),
                mounts: vec![],
            },
        );
        assert!(decision.allowed);
        assert_eq!(next.containers["c0"].candidates, expected);
    }

    fn container_store(policy: &ExecutionPolicy) -> MetadataStore {
        let store = overlay_store(policy);
        let (decision, store) = enforce(
            policy,
            &store,
            &create_request(vec!["PATH=/usr/bin".into()]),
        );
        assert!(decision.allowed);
        store
    }

    #[test]
    fn exec_in_container_requires_matching_rule() {
        let policy = two_template_policy();
        let store = container_store(&policy);
        let ok = EnforcementRequest::ExecInContainer {
            container_id: "c0".into(),
            command: vec!["/bin/status".into()],
            env: vec!["PATH=/usr/bin".into()],
            working_dir: "/".into(),
        };
        let (decision, next) = enforce(&policy, &store, &ok);
        assert!(decision.allowed);
        assert!(next.containers["c0"]
            .exec_commands
            .contains(&vec!["/bin/status".to_string()]));

        // The start command itself is not exec-able unless a rule lists it.
        let start = EnforcementRequest::ExecInContainer {
            container_id: "c0".into(),
            command: vec!["/bin/app".into()],
            env: vec![],
            working_dir: "/".into(),
        };
        let (decision, _) = enforce(&policy, &store, &start);
        assert_eq!(decision.deny_reason, Some(DenyReason::NoMatchingExecRule));

        let unknown = EnforcementRequest::ExecInContainer {
            container_id: "ghost".into(),
            command: vec!["/bin/status".into()],
            env: vec![],
            working_dir: "/".into(),
        };
        let (decision, _) = enforce(&policy, &store, &unknown);
        assert_eq!(decision.deny_reason, Some(DenyReason::UnknownContainer));
    }

    #[test]
    fn exec_external_scans_rules() {
        let policy = two_template_policy();
        let store = MetadataStore::default();
        let ok = EnforcementRequest::ExecExternal {
            command: vec!["/bin/probe".into()],
            env: vec!["PATH=/usr/bin".into()],
            working_dir: "/".into(),
        };
        assert!(enforce(&policy, &store, &ok).0.allowed);

        // env superset violating the rules, checked against a brute-force
        // filter over external rules
        let env = vec!["PATH=/usr/bin".to_string(), "EVIL=1".to_string()];
        let reference = policy.external_processes().iter().any(|r| {
            r.command() == ["/bin/probe".to_string()]
                && r.working_dir() == "/"
                && env.iter().all(|e| r.env_rules().iter().any(|rule| rule.matches(e)))
        });
        assert!(!reference);
        let superset = EnforcementRequest::ExecExternal {
            command: vec!["/bin/probe".into()],
            env,
            working_dir: "/".into(),
        };
        let (decision, _) = enforce(&policy, &store, &superset);
        assert_eq!(decision.allowed, reference);

        let empty = ExecutionPolicy::empty();
        assert!(!enforce(&empty, &store, &ok).0.allowed);
    }

    #[test]
    fn signal_requires_listed_signal_and_known_command() {
        let policy = two_template_policy();
        let store = container_store(&policy);
        let sigterm = EnforcementRequest::SignalProcess {
            container_id: "c0".into(),
            signal: 15,
            command: vec!["/bin/app".into()],
        };
        assert!(enforce(&policy, &store, &sigterm).0.allowed);

        let sigkill = EnforcementRequest::SignalProcess {
            container_id: "c0".into(),
            signal: 9,
            command: vec!["/bin/app".into()],
        };
        assert_eq!(
            enforce(&policy, &store, &sigkill).0.deny_reason,
            Some(DenyReason::SignalNotAllowed)
        );

        let wrong_command = EnforcementRequest::SignalProcess {
            container_id: "c0".into(),
            signal: 15,
            command: vec!["/bin/other".into()],
        };
        assert_eq!(
            enforce(&policy, &store, &wrong_command).0.deny_reason,
            Some(DenyReason::UnknownProcessCommand)
        );

        let unknown = EnforcementRequest::SignalProcess {
            container_id: "ghost".into(),
            signal: 15,
            command: vec!["/bin/app".into()],
        };
        assert_eq!(
            enforce(&policy, &store, &unknown).0.deny_reason,
            Some(DenyReason::UnknownContainer)
        );
    }

    #[test]
    fn signal_allows_admitted_exec_command() {
        let policy = two_template_policy();
        let mut store = container_store(&policy);
        let (decision, next) = enforce(
            &policy,
            &store,
            &EnforcementRequest::ExecInContainer {
                container_id: "c0".into(),
                command: vec!["/bin/status".into()],
                env: vec![],
                working_dir: "/".into(),
            },
        );
        assert!(decision.allowed);
        store = next;
        let signal_exec = EnforcementRequest::SignalProcess {
            container_id: "c0".into(),
            signal: 15,
            command: vec!["/bin/status".into()],
        };
        assert!(enforce(&policy, &store, &signal_exec).0.allowed);
    }

    #[test]
    fn shutdown_twice_denies_second() {
        // Frozen from the trace oracle: shutdown / shutdown over one
        // container yields allow then deny.
        let policy = two_template_policy();
        let store = container_store(&policy);
        let shutdown = EnforcementRequest::ShutdownContainer { container_id: "c0".into() };
        let (first, store) = enforce(&policy, &store, &shutdown);
        assert!(first.allowed);
        assert!(!store.containers.contains_key("c0"));
        let (second, _) = enforce(&policy, &store, &shutdown);
        assert_eq!(second.deny_reason, Some(DenyReason::UnknownContainer));
    }

    #[test]
    fn host_device_mounts_are_pattern_gated() {
        let policy = ExecutionPolicy::parse(
            r#"{"version":1,"flags":{"allow_host_device_mounts":["/dev/fuse[0-9]"]}}"#,
        )
        .unwrap();
        let store = MetadataStore::default();
        let ok = EnforcementRequest::MountHostDevice { target: "/dev/fuse3".into() };
        let (decision, next) = enforce(&policy, &store, &ok);
        assert!(decision.allowed);
        assert!(next.host_mounts.contains("/dev/fuse3"));

        let (dup, _) = enforce(&policy, &next, &ok);
        assert_eq!(dup.deny_reason, Some(DenyReason::HostDeviceTargetInUse));

        let bad = EnforcementRequest::MountHostDevice { target: "/dev/sda".into() };
        assert_eq!(
            enforce(&policy, &store, &bad).0.deny_reason,
            Some(DenyReason::HostDeviceNotAllowed)
        );

        let none = ExecutionPolicy::empty();
        assert_eq!(
            enforce(&none, &store, &ok).0.deny_reason,
            Some(DenyReason::HostDeviceNotAllowed)
        );
    }

    #[test]
    fn scratch_encryption_is_policy_gated() {
        let strict = ExecutionPolicy::empty();
        let lax = ExecutionPolicy::parse(
            r#"{"version":1,"flags":{"allow_unencrypted_scratch":true}}"#,
        )
        .unwrap();
        let store = MetadataStore::default();
        let encrypted = EnforcementRequest::MountScratch { target: "/mnt/s0".into(), encrypted: true };
        let plain = EnforcementRequest::MountScratch { target: "/mnt/s0".into(), encrypted: false };

        let (decision, next) = enforce(&strict, &store, &encrypted);
        assert!(decision.allowed);
        assert_eq!(next.scratch["/mnt/s0"], true);
        assert_eq!(
            enforce(&strict, &store, &plain).0.deny_reason,
            Some(DenyReason::UnencryptedScratchNotAllowed)
        );
        assert!(enforce(&lax, &store, &plain).0.allowed);
    }

    #[test]
    fn metadata_op_guards_abort_batches() {
        let mut store = MetadataStore::default();
        store.devices.insert("/run/l0".into(), LayerDigest::from_hex(H1).unwrap());
        let add_existing = MetadataOp::add(StoreSection::Devices, "/run/l0", json!(H2));
        assert_eq!(
            store.apply(&[add_existing]).unwrap_err(),
            MetadataConflict::KeyExists("/run/l0".into())
        );
        let update_missing = MetadataOp::update(StoreSection::Scratch, "/mnt/s0", json!(true));
        assert!(matches!(
            store.apply(&[update_missing]).unwrap_err(),
            MetadataConflict::KeyMissing("update", _)
        ));
        let remove_missing = MetadataOp::remove(StoreSection::HostMounts, "/dev/hd0");
        assert!(matches!(
            store.apply(&[remove_missing]).unwrap_err(),
            MetadataConflict::KeyMissing("remove", _)
        ));
        // a failing op in the middle leaves the original store usable and
        // unchanged
        let before = store.clone();
        let batch = [
            MetadataOp::add(StoreSection::Scratch, "/mnt/s0", json!(true)),
            MetadataOp::remove(StoreSection::Devices, "/run/ghost"),
        ];
        assert!(store.apply(&batch).is_err());
        assert_eq!(store, before);
    }

    #[test]
    fn wire_round_trip() {
        let request = EnforcementRequest::MountDevice {
            device_hash: LayerDigest::from_hex(H1).unwrap(),
            target: "/run/l0".into(),
        };
        let (action, payload) = request.to_wire();
        assert_eq!(action, "mount_device");
        assert_eq!(payload["device_hash"], H1);
        let decoded = EnforcementRequest::from_wire(&action, &payload).unwrap();
        assert_eq!(decoded, request);

        let unit = EnforcementRequest::GetProperties {};
        let (action, payload) = unit.to_wire();
        assert_eq!(action, "get_properties");
        let decoded = EnforcementRequest::from_wire(&action, &payload).unwrap();
        assert_eq!(decoded, unit);
    }

    #[test]
    fn wire_decode_rejects_malformed_payloads() {
        assert!(EnforcementRequest::from_wire("mount_device", &json!({"target": "/x"})).is_err());
        assert!(EnforcementRequest::from_wire("no_such_action", &json!({})).is_err());
        assert!(EnforcementRequest::from_wire(
            "mount_device",
            &json!({"device_hash": "zz", "target": "/x"})
        )
        .is_err());
    }
}

//! Execution-policy documents: parsing, validation, canonical encoding, and
//! measurement.
//!
//! A policy is the user-authored allow-list over every action the guest
//! agent will take on behalf of the untrusted host. The concrete syntax is
//! UTF-8 JSON (`.polj` files). The canonical encoding — bytewise-sorted keys,
//! no insignificant whitespace, lowercase hex, all defaults materialized —
//! is the input to the SHA-512 measurement whose first 32 bytes become the
//! host-data field of the attestation report.

use std::collections::BTreeSet;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha512};
use thiserror::Error;

use crate::canon;

/// Document format version understood by this implementation.
pub const POLICY_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("semantic error: {0}")]
    Semantic(String),
}

impl PolicyError {
    fn semantic(message: impl Into<String>) -> Self {
        PolicyError::Semantic(message.into())
    }

    fn from_json(err: serde_json::Error) -> Self {
        PolicyError::Syntax {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

/// 32-byte verity root hash identifying one read-only layer image.
///
/// The textual form is always 64 lowercase hex characters; anything else is
/// rejected at the boundary.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerDigest([u8; 32]);

impl LayerDigest {
    pub fn from_hex(s: &str) -> Result<Self, PolicyError> {
        if s.len() != 64 {
            return Err(PolicyError::semantic(format!(
                "layer digest must be 64 hex characters, got {}",
                s.len()
            )));
        }
        if !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(PolicyError::semantic(format!(
                "layer digest must be lowercase hex: {s:?}"
            )));
        }
        let mut bytes = [0u8; 32];
        hex::decode_to_slice(s, &mut bytes)
            .map_err(|e| PolicyError::semantic(format!("bad layer digest: {e}")))?;
        Ok(Self(bytes))
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for LayerDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LayerDigest({})", self.to_hex())
    }
}

impl fmt::Display for LayerDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for LayerDigest {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for LayerDigest {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        LayerDigest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// How an environment-variable pattern is interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvStrategy {
    /// Exact string equality with the full `NAME=value` entry.
    Literal,
    /// Anchored full-match regular expression over the full entry.
    /// Backreferences are not part of the dialect.
    Regex,
}

impl EnvStrategy {
    fn as_str(&self) -> &'static str {
        match self {
            EnvStrategy::Literal => "literal",
            EnvStrategy::Regex => "regex",
        }
    }
}

fn compile_full_match(pattern: &str) -> Result<Regex, PolicyError> {
    Regex::new(&format!(r"\A(?:{pattern})\z"))
        .map_err(|e| PolicyError::semantic(format!("invalid pattern {pattern:?}: {e}")))
}

/// One allowed environment-variable entry pattern.
#[derive(Clone, Debug)]
pub struct EnvRule {
    pattern: String,
    strategy: EnvStrategy,
    matcher: Option<Regex>,
}

impl EnvRule {
    pub fn new(pattern: impl Into<String>, strategy: EnvStrategy) -> Result<Self, PolicyError> {
        let pattern = pattern.into();
        let matcher = match strategy {
            EnvStrategy::Literal => {
                if pattern.bytes().filter(|&b| b == b'=').count() != 1 {
                    return Err(PolicyError::semantic(format!(
                        "literal env rule must contain exactly one '=': {pattern:?}"
                    )));
                }
                None
            }
            EnvStrategy::Regex => Some(compile_full_match(&pattern)?),
        };
        Ok(Self {
            pattern,
            strategy,
            matcher,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn strategy(&self) -> EnvStrategy {
        self.strategy
    }

    /// True iff the full `NAME=value` entry is allowed by this rule.
    pub fn matches(&self, entry: &str) -> bool {
        match self.strategy {
            EnvStrategy::Literal => self.pattern == entry,
            EnvStrategy::Regex => self
                .matcher
                .as_ref()
                .is_some_and(|m| m.is_match(entry)),
        }
    }

    fn canonical_value(&self) -> Value {
        json!({"pattern": self.pattern, "strategy": self.strategy.as_str()})
    }
}

impl PartialEq for EnvRule {
    fn eq(&self, other: &Self) -> bool {
        self.pattern == other.pattern && self.strategy == other.strategy
    }
}

impl Eq for EnvRule {}

/// One allowed container mount.
///
/// The source is an anchored full-match pattern (a plain path with no regex
/// metacharacters matches only itself); destination and type compare exactly
/// and option lists compare as multisets.
#[derive(Clone, Debug)]
pub struct MountRule {
    source_pattern: String,
    destination: String,
    mount_type: String,
    options: Vec<String>,
    source_matcher: Regex,
}

impl MountRule {
    pub fn new(
        source_pattern: impl Into<String>,
        destination: impl Into<String>,
        mount_type: impl Into<String>,
        mut options: Vec<String>,
    ) -> Result<Self, PolicyError> {
        let source_pattern = source_pattern.into();
        let destination = destination.into();
        let mount_type = mount_type.into();
        if !destination.starts_with('/') {
            return Err(PolicyError::semantic(format!(
                "mount destination must be an absolute path: {destination:?}"
            )));
        }
        let source_matcher = compile_full_match(&source_pattern)?;
        options.sort();
        Ok(Self {
            source_pattern,
            destination,
            mount_type,
            options,
            source_matcher,
        })
    }

    pub fn source_pattern(&self) -> &str {
        &self.source_pattern
    }

    pub fn destination(&self) -> &str {
        &self.destination
    }

    pub fn mount_type(&self) -> &str {
        &self.mount_type
    }

    pub fn options(&self) -> &[String] {
        &self.options
    }

    pub fn matches(
        &self,
        source: &str,
        destination: &str,
        mount_type: &str,
        options: &[String],
    ) -> bool {
        if !self.source_matcher.is_match(source) {
            return false;
        }
        if destination != self.destination || mount_type != self.mount_type {
            return false;
        }
        let mut requested = options.to_vec();
        requested.sort();
        requested == self.options
    }

    fn canonical_value(&self) -> Value {
        json!({
            "destination": self.destination,
            "mount_type": self.mount_type,
            "options": self.options,
            "source_pattern": self.source_pattern,
        })
    }
}

impl PartialEq for MountRule {
    fn eq(&self, other: &Self) -> bool {
        self.source_pattern == other.source_pattern
            && self.destination == other.destination
            && self.mount_type == other.mount_type
            && self.options == other.options
    }
}

impl Eq for MountRule {}

/// One allowed process invocation (in-container exec or directly in the VM).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProcessRule {
    command: Vec<String>,
    env_rules: Vec<EnvRule>,
    working_dir: String,
}

impl ProcessRule {
    pub fn new(
        command: Vec<String>,
        env_rules: Vec<EnvRule>,
        working_dir: impl Into<String>,
    ) -> Result<Self, PolicyError> {
        let working_dir = working_dir.into();
        if command.is_empty() {
            return Err(PolicyError::semantic("process rule command must be non-empty"));
        }
        if !working_dir.starts_with('/') {
            return Err(PolicyError::semantic(format!(
                "process working_dir must be an absolute path: {working_dir:?}"
            )));
        }
        Ok(Self {
            command,
            env_rules,
            working_dir,
        })
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }

    pub fn env_rules(&self) -> &[EnvRule] {
        &self.env_rules
    }

    pub fn working_dir(&self) -> &str {
        &self.working_dir
    }

    /// Exact command and working directory, every env entry allowed by some
    /// rule.
    pub fn matches(&self, command: &[String], env: &[String], working_dir: &str) -> bool {
        self.command == command
            && self.working_dir == working_dir
            && env
                .iter()
                .all(|entry| self.env_rules.iter().any(|rule| rule.matches(entry)))
    }

    fn canonical_value(&self) -> Value {
        json!({
            "command": self.command,
            "env_rules": self.env_rules.iter().map(EnvRule::canonical_value).collect::<Vec<_>>(),
            "working_dir": self.working_dir,
        })
    }
}

/// One container the policy allows, described by its full layer stack and
/// start-time properties.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerTemplate {
    id: String,
    layers: Vec<LayerDigest>,
    command: Vec<String>,
    env_rules: Vec<EnvRule>,
    working_dir: String,
    mounts: Vec<MountRule>,
    exec_processes: Vec<ProcessRule>,
    signals: Vec<i64>,
    allow_stdio_access: bool,
}

impl ContainerTemplate {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        layers: Vec<LayerDigest>,
        command: Vec<String>,
        env_rules: Vec<EnvRule>,
        working_dir: impl Into<String>,
        mounts: Vec<MountRule>,
        exec_processes: Vec<ProcessRule>,
        signals: Vec<i64>,
        allow_stdio_access: bool,
    ) -> Result<Self, PolicyError> {
        let id = id.into();
        let working_dir = working_dir.into();
        if layers.is_empty() {
            return Err(PolicyError::semantic(format!(
                "container template {id:?} must list at least one layer"
            )));
        }
        if !working_dir.starts_with('/') {
            return Err(PolicyError::semantic(format!(
                "container template {id:?} working_dir must be an absolute path"
            )));
        }
        Ok(Self {
            id,
            layers,
            command,
            env_rules,
            working_dir,
            mounts,
            exec_processes,
            signals,
            allow_stdio_access,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn layers(&self) -> &[LayerDigest] {
        &self.layers
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }

    pub fn env_rules(&self) -> &[EnvRule] {
        &self.env_rules
    }

    pub fn working_dir(&self) -> &str {
        &self.working_dir
    }

    pub fn mounts(&self) -> &[MountRule] {
        &self.mounts
    }

    pub fn exec_processes(&self) -> &[ProcessRule] {
        &self.exec_processes
    }

    pub fn signals(&self) -> &[i64] {
        &self.signals
    }

    pub fn allow_stdio_access(&self) -> bool {
        self.allow_stdio_access
    }

    pub fn env_allowed(&self, entry: &str) -> bool {
        self.env_rules.iter().any(|rule| rule.matches(entry))
    }

    fn canonical_value(&self) -> Value {
        json!({
            "allow_stdio_access": self.allow_stdio_access,
            "command": self.command,
            "env_rules": self.env_rules.iter().map(EnvRule::canonical_value).collect::<Vec<_>>(),
            "exec_processes": self.exec_processes.iter().map(ProcessRule::canonical_value).collect::<Vec<_>>(),
            "id": self.id,
            "layers": self.layers.iter().map(LayerDigest::to_hex).collect::<Vec<_>>(),
            "mounts": self.mounts.iter().map(MountRule::canonical_value).collect::<Vec<_>>(),
            "signals": self.signals,
            "working_dir": self.working_dir,
        })
    }

    /// Identity used for duplicate rejection: id, signals, exec rules and the
    /// stdio flag do not participate.
    fn identity_key(&self) -> String {
        canon::to_canonical_string(&json!({
            "command": self.command,
            "env_rules": self.env_rules.iter().map(EnvRule::canonical_value).collect::<Vec<_>>(),
            "layers": self.layers.iter().map(LayerDigest::to_hex).collect::<Vec<_>>(),
            "mounts": self.mounts.iter().map(MountRule::canonical_value).collect::<Vec<_>>(),
            "working_dir": self.working_dir,
        }))
    }
}

/// Global policy switches. Everything defaults to the deny side.
#[derive(Clone, Debug)]
pub struct PolicyFlags {
    allow_properties_access: bool,
    allow_dump_stacks: bool,
    allow_runtime_logging: bool,
    allow_container_logging: bool,
    allow_unencrypted_scratch: bool,
    allow_host_device_mounts: Vec<String>,
    host_device_matchers: Vec<Regex>,
}

impl PolicyFlags {
    pub fn new(
        allow_properties_access: bool,
        allow_dump_stacks: bool,
        allow_runtime_logging: bool,
        allow_container_logging: bool,
        allow_unencrypted_scratch: bool,
        allow_host_device_mounts: Vec<String>,
    ) -> Result<Self, PolicyError> {
        let host_device_matchers = allow_host_device_mounts
            .iter()
            .map(|p| compile_full_match(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            allow_properties_access,
            allow_dump_stacks,
            allow_runtime_logging,
            allow_container_logging,
            allow_unencrypted_scratch,
            allow_host_device_mounts,
            host_device_matchers,
        })
    }

    pub fn allow_properties_access(&self) -> bool {
        self.allow_properties_access
    }

    pub fn allow_dump_stacks(&self) -> bool {
        self.allow_dump_stacks
    }

    pub fn allow_runtime_logging(&self) -> bool {
        self.allow_runtime_logging
    }

    pub fn allow_container_logging(&self) -> bool {
        self.allow_container_logging
    }

    pub fn allow_unencrypted_scratch(&self) -> bool {
        self.allow_unencrypted_scratch
    }

    pub fn allow_host_device_mounts(&self) -> &[String] {
        &self.allow_host_device_mounts
    }

    pub fn host_device_allowed(&self, target: &str) -> bool {
        self.host_device_matchers.iter().any(|m| m.is_match(target))
    }

    fn canonical_value(&self) -> Value {
        json!({
            "allow_container_logging": self.allow_container_logging,
            "allow_dump_stacks": self.allow_dump_stacks,
            "allow_host_device_mounts": self.allow_host_device_mounts,
            "allow_properties_access": self.allow_properties_access,
            "allow_runtime_logging": self.allow_runtime_logging,
            "allow_unencrypted_scratch": self.allow_unencrypted_scratch,
        })
    }
}

impl Default for PolicyFlags {
    fn default() -> Self {
        Self::new(false, false, false, false, false, Vec::new())
            .expect("default flags are valid")
    }
}

impl PartialEq for PolicyFlags {
    fn eq(&self, other: &Self) -> bool {
        self.allow_properties_access == other.allow_properties_access
            && self.allow_dump_stacks == other.allow_dump_stacks
            && self.allow_runtime_logging == other.allow_runtime_logging
            && self.allow_container_logging == other.allow_container_logging
            && self.allow_unencrypted_scratch == other.allow_unencrypted_scratch
            && self.allow_host_device_mounts == other.allow_host_device_mounts
    }
}

impl Eq for PolicyFlags {}

/// SHA-512 over the canonical policy encoding.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PolicyMeasurement {
    digest: [u8; 64],
}

impl PolicyMeasurement {
    pub fn digest_bytes(&self) -> &[u8; 64] {
        &self.digest
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }

    /// The 32-byte value placed in the attestation report's host-data field:
    /// the first half of the SHA-512 digest (the report field is 256 bits).
    pub fn host_data_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out.copy_from_slice(&self.digest[..32]);
        out
    }

    pub fn host_data_hex(&self) -> String {
        hex::encode(self.host_data_bytes())
    }
}

impl fmt::Debug for PolicyMeasurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PolicyMeasurement({})", self.digest_hex())
    }
}

/// A parsed, validated execution policy. Immutable after construction and
/// safe to share across threads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionPolicy {
    version: u64,
    containers: Vec<ContainerTemplate>,
    external_processes: Vec<ProcessRule>,
    flags: PolicyFlags,
}

impl ExecutionPolicy {
    /// The empty policy: valid, and denies every container action.
    pub fn empty() -> Self {
        Self {
            version: POLICY_VERSION,
            containers: Vec::new(),
            external_processes: Vec::new(),
            flags: PolicyFlags::default(),
        }
    }

    pub fn new(
        containers: Vec<ContainerTemplate>,
        external_processes: Vec<ProcessRule>,
        flags: PolicyFlags,
    ) -> Result<Self, PolicyError> {
        let policy = Self {
            version: POLICY_VERSION,
            containers,
            external_processes,
            flags,
        };
        policy.check_duplicates()?;
        Ok(policy)
    }

    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let doc: PolicyDoc = serde_json::from_str(text).map_err(PolicyError::from_json)?;
        Self::from_doc(doc)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn containers(&self) -> &[ContainerTemplate] {
        &self.containers
    }

    pub fn container(&self, id: &str) -> Option<&ContainerTemplate> {
        self.containers.iter().find(|t| t.id == id)
    }

    pub fn external_processes(&self) -> &[ProcessRule] {
        &self.external_processes
    }

    pub fn flags(&self) -> &PolicyFlags {
        &self.flags
    }

    /// Canonical encoding: the measured byte sequence. Idempotent across
    /// parse/render cycles.
    pub fn canonicalize(&self) -> Vec<u8> {
        canon::to_canonical_bytes(&self.canonical_value())
    }

    /// Canonical text form; reparsing it yields an equal policy.
    pub fn to_canonical_string(&self) -> String {
        canon::to_canonical_string(&self.canonical_value())
    }

    /// SHA-512 of the canonical encoding.
    pub fn measure(&self) -> PolicyMeasurement {
        let digest: [u8; 64] = Sha512::digest(self.canonicalize()).into();
        PolicyMeasurement { digest }
    }

    /// True iff some template lists this digest among its layers.
    pub fn layer_known(&self, digest: &LayerDigest) -> bool {
        self.containers
            .iter()
            .any(|t| t.layers.contains(digest))
    }

    pub fn canonical_value(&self) -> Value {
        json!({
            "containers": self.containers.iter().map(ContainerTemplate::canonical_value).collect::<Vec<_>>(),
            "external_processes": self.external_processes.iter().map(ProcessRule::canonical_value).collect::<Vec<_>>(),
            "flags": self.flags.canonical_value(),
            "version": self.version,
        })
    }

    fn from_doc(doc: PolicyDoc) -> Result<Self, PolicyError> {
        if doc.version != POLICY_VERSION {
            return Err(PolicyError::semantic(format!(
                "unsupported policy version {} (expected {POLICY_VERSION})",
                doc.version
            )));
        }
        let containers = doc
            .containers
            .into_iter()
            .map(TemplateDoc::into_template)
            .collect::<Result<Vec<_>, _>>()?;
        let external_processes = doc
            .external_processes
            .into_iter()
            .map(ProcessDoc::into_rule)
            .collect::<Result<Vec<_>, _>>()?;
        let flags = doc.flags.into_flags()?;
        Self::new(containers, external_processes, flags)
    }

    fn check_duplicates(&self) -> Result<(), PolicyError> {
        let mut ids = BTreeSet::new();
        for template in &self.containers {
            if !ids.insert(template.id.clone()) {
                return Err(PolicyError::semantic(format!(
                    "duplicate container template id {:?}",
                    template.id
                )));
            }
        }
        let mut identities: BTreeSet<String> = BTreeSet::new();
        for template in &self.containers {
            if !identities.insert(template.identity_key()) {
                return Err(PolicyError::semantic(format!(
                    "container template {:?} duplicates another template \
                     (same layers, command, env rules, working_dir, and mounts)",
                    template.id
                )));
            }
        }
        Ok(())
    }
}

// Raw document shapes. serde handles the grammar; the conversion functions
// below own every semantic check, so syntax and semantic errors stay
// distinguishable.

fn default_version_marker() -> u64 {
    u64::MAX
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    #[serde(default = "default_version_marker")]
    version: u64,
    #[serde(default)]
    containers: Vec<TemplateDoc>,
    #[serde(default)]
    external_processes: Vec<ProcessDoc>,
    #[serde(default)]
    flags: FlagsDoc,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateDoc {
    id: String,
    layers: Vec<String>,
    command: Vec<String>,
    #[serde(default)]
    env_rules: Vec<EnvRuleDoc>,
    working_dir: String,
    #[serde(default)]
    mounts: Vec<MountRuleDoc>,
    #[serde(default)]
    exec_processes: Vec<ProcessDoc>,
    #[serde(default)]
    signals: Vec<i64>,
    #[serde(default)]
    allow_stdio_access: bool,
}

impl TemplateDoc {
    fn into_template(self) -> Result<ContainerTemplate, PolicyError> {
        let layers = self
            .layers
            .iter()
            .map(|s| LayerDigest::from_hex(s))
            .collect::<Result<Vec<_>, _>>()?;
        ContainerTemplate::new(
            self.id,
            layers,
            self.command,
            convert_env_rules(self.env_rules)?,
            self.working_dir,
            self.mounts
                .into_iter()
                .map(MountRuleDoc::into_rule)
                .collect::<Result<Vec<_>, _>>()?,
            self.exec_processes
                .into_iter()
                .map(ProcessDoc::into_rule)
                .collect::<Result<Vec<_>, _>>()?,
            self.signals,
            self.allow_stdio_access,
        )
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvRuleDoc {
    pattern: String,
    #[serde(default = "EnvRuleDoc::default_strategy")]
    strategy: EnvStrategy,
}

impl EnvRuleDoc {
    fn default_strategy() -> EnvStrategy {
        EnvStrategy::Literal
    }
}

fn convert_env_rules(docs: Vec<EnvRuleDoc>) -> Result<Vec<EnvRule>, PolicyError> {
    docs.into_iter()
        .map(|d| EnvRule::new(d.pattern, d.strategy))
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MountRuleDoc {
    source_pattern: String,
    destination: String,
    mount_type: String,
    #[serde(default)]
    options: Vec<String>,
}

impl MountRuleDoc {
    fn into_rule(self) -> Result<MountRule, PolicyError> {
        MountRule::new(
            self.source_pattern,
            self.destination,
            self.mount_type,
            self.options,
        )
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProcessDoc {
    command: Vec<String>,
    #[serde(default)]
    env_rules: Vec<EnvRuleDoc>,
    working_dir: String,
}

impl ProcessDoc {
    fn into_rule(self) -> Result<ProcessRule, PolicyError> {
        ProcessRule::new(
            self.command,
            convert_env_rules(self.env_rules)?,
            self.working_dir,
        )
    }
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlagsDoc {
    #[serde(default)]
    allow_properties_access: bool,
    #[serde(default)]
    allow_dump_stacks: bool,
    #[serde(default)]
    allow_runtime_logging: bool,
    #[serde(default)]
    allow_container_logging: bool,
    #[serde(default)]
    allow_unencrypted_scratch: bool,
    #[serde(default)]
    allow_host_device_mounts: Vec<String>,
}

impl FlagsDoc {
    fn into_flags(self) -> Result<PolicyFlags, PolicyError> {
        PolicyFlags::new(
            self.allow_properties_access,
            self.allow_dump_stacks,
            self.allow_runtime_logging,
            self.allow_container_logging,
            self.allow_unencrypted_scratch,
            self.allow_host_device_mounts,
        )
    }
}

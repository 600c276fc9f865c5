//! Container-spec authoring aid: a plain description of what should run
//! (layers, command, env values, mounts) expanded into a full policy
//! document with default-deny flags.

use serde::Deserialize;
use serde_json::{json, Value};

use parma_core::policy::ExecutionPolicy;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerSpec {
    #[serde(default)]
    containers: Vec<ContainerEntry>,
    #[serde(default)]
    external_processes: Vec<ProcessEntry>,
    #[serde(default)]
    flags: Option<Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerEntry {
    #[serde(default)]
    name: Option<String>,
    layers: Vec<String>,
    command: Vec<String>,
    /// Literal `NAME=value` entries the container may receive.
    #[serde(default)]
    env: Vec<String>,
    #[serde(default = "default_working_dir")]
    working_dir: String,
    #[serde(default)]
    mounts: Vec<MountEntry>,
    #[serde(default)]
    signals: Vec<i64>,
    #[serde(default)]
    exec_processes: Vec<ProcessEntry>,
    #[serde(default)]
    allow_stdio_access: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MountEntry {
    source: String,
    destination: String,
    #[serde(default = "default_mount_type")]
    mount_type: String,
    #[serde(default)]
    options: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProcessEntry {
    command: Vec<String>,
    #[serde(default)]
    env: Vec<String>,
    #[serde(default = "default_working_dir")]
    working_dir: String,
}

fn default_working_dir() -> String {
    "/".into()
}

fn default_mount_type() -> String {
    "bind".into()
}

fn env_rules(entries: &[String]) -> Vec<Value> {
    entries
        .iter()
        .map(|e| json!({ "pattern": e, "strategy": "literal" }))
        .collect()
}

/// Expand a container spec into a canonical policy document. The result
/// has been validated by the policy parser, so duplicate containers and
/// malformed fields surface here.
pub fn to_policy_document(spec_text: &str) -> Result<String, String> {
    let spec: ContainerSpec =
        serde_json::from_str(spec_text).map_err(|e| format!("container spec: {e}"))?;
    if spec.containers.is_empty() && spec.external_processes.is_empty() {
        return Err("container spec lists nothing to run".into());
    }
    let mut containers = Vec::with_capacity(spec.containers.len());
    for (index, entry) in spec.containers.iter().enumerate() {
        if entry.layers.is_empty() {
            return Err(format!(
                "container {} lists no layers",
                entry.name.clone().unwrap_or_else(|| index.to_string())
            ));
        }
        let mounts: Vec<Value> = entry
            .mounts
            .iter()
            .map(|m| {
                json!({
                    // exact-match pattern for the literal source path
                    "source_pattern": regex::escape(&m.source),
                    "destination": m.destination,
                    "mount_type": m.mount_type,
                    "options": m.options,
                })
            })
            .collect();
        let exec_processes: Vec<Value> = entry
            .exec_processes
            .iter()
            .map(|p| {
                json!({
                    "command": p.command,
                    "env_rules": env_rules(&p.env),
                    "working_dir": p.working_dir,
                })
            })
            .collect();
        containers.push(json!({
            "id": entry.name.clone().unwrap_or_else(|| format!("container-{index}")),
            "layers": entry.layers,
            "command": entry.command,
            "env_rules": env_rules(&entry.env),
            "working_dir": entry.working_dir,
            "mounts": mounts,
            "exec_processes": exec_processes,
            "signals": entry.signals,
            "allow_stdio_access": entry.allow_stdio_access,
        }));
    }
    let external: Vec<Value> = spec
        .external_processes
        .iter()
        .map(|p| {
            json!({
                "command": p.command,
                "env_rules": env_rules(&p.env),
                "working_dir": p.working_dir,
            })
        })
        .collect();
    let document = json!({
        "version": 1,
        "containers": containers,
        "external_processes": external,
        "flags": spec.flags.unwrap_or_else(|| json!({})),
    });
    let policy = ExecutionPolicy::parse(&document.to_string()).map_err(|e| e.to_string())?;
    Ok(policy.to_canonical_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const H1: &str = "1111111111111111111111111111111111111111111111111111111111111111";

    #[test]
    fn one_container_spec_expands_to_one_template() {
        let spec = json!({
            "containers": [{
                "name": "web",
                "layers": [H1],
                "command": ["/usr/bin/web"],
                "env": ["PATH=/usr/bin"],
                "mounts": [{ "source": "/host/a.b", "destination": "/data" }],
            }],
        })
        .to_string();
        let document = to_policy_document(&spec).unwrap();
        let policy = ExecutionPolicy::parse(&document).unwrap();
        assert_eq!(policy.containers().len(), 1);
        let template = &policy.containers()[0];
        assert_eq!(template.id(), "web");
        // escaped literal source must match itself and nothing similar
        assert!(template.mounts()[0].matches("/host/a.b", "/data", "bind", &[]));
        assert!(!template.mounts()[0].matches("/host/aXb", "/data", "bind", &[]));
    }

    #[test]
    fn missing_layers_is_an_error() {
        let spec = json!({
            "containers": [{ "layers": [], "command": ["/x"] }],
        })
        .to_string();
        assert!(to_policy_document(&spec).unwrap_err().contains("layers"));
    }

    #[test]
    fn duplicate_containers_surface_the_parse_error() {
        let spec = json!({
            "containers": [
                { "name": "a", "layers": [H1], "command": ["/x"] },
                { "name": "b", "layers": [H1], "command": ["/x"] },
            ],
        })
        .to_string();
        let err = to_policy_document(&spec).unwrap_err();
        assert!(err.contains("duplicates"), "{err}");
    }

    #[test]
    fn empty_spec_is_an_error() {
        assert!(to_policy_document("{}").is_err());
    }
}

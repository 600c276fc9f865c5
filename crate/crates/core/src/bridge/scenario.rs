//! Scenario corpus machinery: declarative attack scripts against a guest.
//!
//! A scenario (`.scn`, JSON) carries a policy, an ordered list of steps, and
//! a per-step expectation. A step is either a request literal or a mutation
//! applied to a base request; the mutation operators cover the adversary's
//! documented capabilities, from payload edits (layer-order swaps, rogue
//! hashes, env/command/mount tampering) to wire-level games (replay, drop,
//! reorder, byte tampering). A scenario passes when every step matched its
//! expectation and the guest's safety oracle holds afterwards.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::gen::ROGUE_DIGEST;
use super::{
    Client, FramedEndpoint, GuestService, InProcessTransport, Transport, PROBE_SAFETY_ACTION,
};
use crate::agent::{StartupError, UvmState};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Startup(#[from] StartupError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    Allow,
    Deny,
    /// The step sends nothing (a dropped request); trivially met.
    Skipped,
}

/// Adversary operators, each realizing one documented host capability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "operator", rename_all = "snake_case")]
pub enum MutationSpec {
    /// Permute the overlay's layer path list (defaults to reversal).
    SwapLayerOrder,
    /// Substitute a layer hash the policy never listed.
    InjectRogueLayerHash {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hash: Option<String>,
    },
    /// Add or remove environment entries.
    AlterEnv {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        add: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        remove_index: Option<usize>,
    },
    /// Replace the command line.
    AlterCommand { command: Vec<String> },
    /// Redirect one requested mount.
    AlterMountDestination {
        #[serde(default)]
        index: usize,
        destination: String,
    },
    /// Resend an earlier step's request.
    ReplayRequest {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        of_step: Option<usize>,
    },
    /// Suppress the base request entirely.
    DropRequest,
    /// Swap this step's request with a later step's.
    ReorderRequests { with: usize },
    /// XOR one byte of the encoded frame body.
    TamperPayloadByte { offset: usize },
}

impl MutationSpec {
    pub fn operator_name(&self) -> &'static str {
        match self {
            Self::SwapLayerOrder => "swap_layer_order",
            Self::InjectRogueLayerHash { .. } => "inject_rogue_layer_hash",
            Self::AlterEnv { .. } => "alter_env",
            Self::AlterCommand { .. } => "alter_command",
            Self::AlterMountDestination { .. } => "alter_mount_destination",
            Self::ReplayRequest { .. } => "replay_request",
            Self::DropRequest => "drop_request",
            Self::ReorderRequests { .. } => "reorder_requests",
            Self::TamperPayloadByte { .. } => "tamper_payload_byte",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseStep {
    pub action: String,
    #[serde(default)]
    pub payload: Value,
}

/// One scripted step: a request literal (`action`/`payload`) or a mutation
/// over a base request.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub expect: Expectation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation: Option<MutationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseStep>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Inline execution-policy document the guest boots with.
    pub policy: Value,
    pub steps: Vec<ScenarioStep>,
}

impl Scenario {
    pub fn from_str(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        for (i, step) in self.steps.iter().enumerate() {
            match (&step.action, &step.mutation) {
                (Some(_), None) => {}
                (None, Some(mutation)) => {
                    let needs_base = !matches!(
                        mutation,
                        MutationSpec::ReplayRequest { .. } | MutationSpec::DropRequest
                    );
                    if needs_base && step.base.is_none() {
                        return Err(ScenarioError::Invalid(format!(
                            "step {i}: mutation {} requires a base request",
                            mutation.operator_name()
                        )));
                    }
                    if matches!(mutation, MutationSpec::DropRequest)
                        && step.expect != Expectation::Skipped
                    {
                        return Err(ScenarioError::Invalid(format!(
                            "step {i}: drop_request steps must expect \"skipped\""
                        )));
                    }
                    if let MutationSpec::ReorderRequests { with } = mutation {
                        if *with <= i || *with >= self.steps.len() {
                            return Err(ScenarioError::Invalid(format!(
                                "step {i}: reorder target {with} must be a later step"
                            )));
                        }
                    }
                }
                _ => {
                    return Err(ScenarioError::Invalid(format!(
                        "step {i}: exactly one of a request literal or a mutation is required"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Names of the mutation operators this scenario exercises.
    pub fn operators(&self) -> Vec<&'static str> {
        self.steps
            .iter()
            .filter_map(|s| s.mutation.as_ref().map(MutationSpec::operator_name))
            .collect()
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Send {
        action: String,
        payload: Value,
        tamper: Option<usize>,
    },
    Skip,
    PendingReplay {
        of_step: Option<usize>,
    },
}

fn mutate_payload(mutation: &MutationSpec, base: &BaseStep) -> Result<Value, ScenarioError> {
    let mut payload = base.payload.clone();
    let invalid = |msg: String| ScenarioError::Invalid(msg);
    match mutation {
        MutationSpec::SwapLayerOrder => {
            let paths = payload
                .get_mut("layer_paths")
                .and_then(Value::as_array_mut)
                .ok_or_else(|| invalid("swap_layer_order needs layer_paths".into()))?;
            paths.reverse();
        }
        MutationSpec::InjectRogueLayerHash { hash } => {
            let rogue = hash.clone().unwrap_or_else(|| ROGUE_DIGEST.to_string());
            if payload.get("device_hash").is_some() {
                payload["device_hash"] = json!(rogue);
            } else {
                return Err(invalid(
                    "inject_rogue_layer_hash applies to mount_device requests".into(),
                ));
            }
        }
        MutationSpec::AlterEnv { add, remove_index } => {
            let env = payload
                .get_mut("env")
                .and_then(Value::as_array_mut)
                .ok_or_else(|| invalid("alter_env needs an env list".into()))?;
            if let Some(index) = remove_index {
                if *index < env.len() {
                    env.remove(*index);
                }
            }
            if add.is_empty() && remove_index.is_none() {
                env.push(json!("INJECTED=1"));
            }
            for entry in add {
                env.push(json!(entry));
            }
        }
        MutationSpec::AlterCommand { command } => {
            if payload.get("command").is_none() {
                return Err(invalid("alter_command needs a command".into()));
            }
            payload["command"] = json!(command);
        }
        MutationSpec::AlterMountDestination { index, destination } => {
            let mounts = payload
                .get_mut("mounts")
                .and_then(Value::as_array_mut)
                .ok_or_else(|| invalid("alter_mount_destination needs mounts".into()))?;
            let mount = mounts
                .get_mut(*index)
                .ok_or_else(|| invalid(format!("no mount at index {index}")))?;
            mount["destination"] = json!(destination);
        }
        MutationSpec::ReplayRequest { .. }
        | MutationSpec::DropRequest
        | MutationSpec::ReorderRequests { .. }
        | MutationSpec::TamperPayloadByte { .. } => unreachable!("handled by the materializer"),
    }
    Ok(payload)
}

/// Resolve every step to a concrete wire action: payload mutations apply to
/// their base, reorders swap step contents, replays copy resolved content.
fn materialize(scenario: &Scenario) -> Result<Vec<Slot>, ScenarioError> {
    let mut slots = Vec::with_capacity(scenario.steps.len());
    let mut swaps = Vec::new();
    for (i, step) in scenario.steps.iter().enumerate() {
        let slot = match (&step.action, &step.mutation) {
            (Some(action), None) => Slot::Send {
                action: action.clone(),
                payload: step.payload.clone().unwrap_or_else(|| json!({})),
                tamper: None,
            },
            (None, Some(mutation)) => match mutation {
                MutationSpec::DropRequest => Slot::Skip,
                MutationSpec::ReplayRequest { of_step } => {
                    Slot::PendingReplay { of_step: *of_step }
                }
                MutationSpec::ReorderRequests { with } => {
                    let base = step.base.as_ref().expect("validated");
                    swaps.push((i, *with));
                    Slot::Send {
                        action: base.action.clone(),
                        payload: base.payload.clone(),
                        tamper: None,
                    }
                }
                MutationSpec::TamperPayloadByte { offset } => {
                    let base = step.base.as_ref().expect("validated");
                    Slot::Send {
                        action: base.action.clone(),
                        payload: base.payload.clone(),
                        tamper: Some(*offset),
                    }
                }
                payload_mutation => {
                    let base = step.base.as_ref().expect("validated");
                    Slot::Send {
                        action: base.action.clone(),
                        payload: mutate_payload(payload_mutation, base)?,
                        tamper: None,
                    }
                }
            },
            _ => unreachable!("validated"),
        };
        slots.push(slot);
    }
    for (a, b) in swaps {
        if !matches!(slots[b], Slot::Send { .. }) {
            return Err(ScenarioError::Invalid(format!(
                "step {a}: reorder target {b} does not send a request"
            )));
        }
        slots.swap(a, b);
    }
    for i in 0..slots.len() {
        if let Slot::PendingReplay { of_step } = slots[i] {
            let source = match of_step {
                Some(s) => s,
                None => {
                    let Some(prev) = (0..i)
                        .rev()
                        .find(|&j| matches!(slots[j], Slot::Send { .. }))
                    else {
                        return Err(ScenarioError::Invalid(format!(
                            "step {i}: replay_request has no earlier request to copy"
                        )));
                    };
                    prev
                }
            };
            let Some(Slot::Send {
                action, payload, ..
            }) = slots.get(source).cloned()
            else {
                return Err(ScenarioError::Invalid(format!(
                    "step {i}: replay source {source} does not send a request"
                )));
            };
            slots[i] = Slot::Send {
                action,
                payload,
                tamper: None,
            };
        }
    }
    Ok(slots)
}

#[derive(Clone, Debug, Serialize)]
pub struct StepOutcome {
    pub index: usize,
    pub action: String,
    pub expected: Expectation,
    pub actual: Expectation,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deny_reason: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub steps: Vec<StepOutcome>,
    /// Step index at which the transport failed, if it did.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted_at: Option<usize>,
    pub final_safety: bool,
    pub passed: bool,
}

/// Execute a scenario over any transport. The guest behind the transport
/// must already run the scenario's policy.
pub fn run_scenario<T: Transport>(
    scenario: &Scenario,
    client: &mut Client<T>,
) -> Result<ScenarioReport, ScenarioError> {
    let slots = materialize(scenario)?;
    let mut outcomes = Vec::with_capacity(slots.len());
    let mut aborted_at = None;
    for (index, (slot, step)) in slots.iter().zip(&scenario.steps).enumerate() {
        match slot {
            Slot::Skip => outcomes.push(StepOutcome {
                index,
                action: "(dropped)".into(),
                expected: step.expect,
                actual: Expectation::Skipped,
                pass: step.expect == Expectation::Skipped,
                deny_reason: None,
            }),
            Slot::Send {
                action,
                payload,
                tamper,
            } => {
                let result = match tamper {
                    Some(offset) => client.send_tampered(action, payload.clone(), *offset),
                    None => client.send(action, payload.clone()),
                };
                match result {
                    Ok(response) => {
                        let actual = if response.allowed == Some(true) {
                            Expectation::Allow
                        } else {
                            Expectation::Deny
                        };
                        outcomes.push(StepOutcome {
                            index,
                            action: action.clone(),
                            expected: step.expect,
                            actual,
                            pass: actual == step.expect,
                            deny_reason: response.deny_reason,
                        });
                    }
                    Err(_) => {
                        aborted_at = Some(index);
                        break;
                    }
                }
            }
            Slot::PendingReplay { .. } => unreachable!("materializer resolved replays"),
        }
    }

    let final_safety = match client.send(PROBE_SAFETY_ACTION, json!({})) {
        Ok(response) => response.payload["safe"] == json!(true),
        Err(_) => false,
    };
    let passed = aborted_at.is_none() && final_safety && outcomes.iter().all(|o| o.pass);
    Ok(ScenarioReport {
        name: scenario.name.clone(),
        steps: outcomes,
        aborted_at,
        final_safety,
        passed,
    })
}

/// Run a scenario against a fresh in-process guest built from the
/// scenario's own policy.
pub fn run_scenario_in_process(
    scenario: &Scenario,
    seed: u64,
) -> Result<ScenarioReport, ScenarioError> {
    let policy_text = scenario.policy.to_string();
    let state = UvmState::new(&policy_text, None, seed)?;
    let endpoint = std::sync::Arc::new(FramedEndpoint::new(GuestService::new(state)));
    let mut client = Client::new(InProcessTransport::new(endpoint));
    run_scenario(scenario, &mut client)
}

#[cfg(test)]
mod tests {
    use super::*;

    const H1: &str = "1111111111111111111111111111111111111111111111111111111111111111";

    fn policy_doc() -> Value {
        json!({
            "version": 1,
            "containers": [{
                "id": "app",
                "layers": [H1],
                "command": ["/bin/app"],
                "working_dir": "/",
            }],
        })
    }

    fn mount_step(expect: Expectation) -> ScenarioStep {
        ScenarioStep {
            expect,
            action: Some("mount_device".into()),
            payload: Some(json!({ "device_hash": H1, "target": "/run/l0" })),
            mutation: None,
            base: None,
        }
    }

    #[test]
    fn literal_steps_run_and_report() {
        let scenario = Scenario {
            name: "mount-then-remount".into(),
            policy: policy_doc(),
            steps: vec![mount_step(Expectation::Allow), mount_step(Expectation::Deny)],
        };
        let report = run_scenario_in_process(&scenario, 0).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.steps[0].actual, Expectation::Allow);
        assert_eq!(report.steps[1].actual, Expectation::Deny);
        assert!(report.final_safety);
    }

    #[test]
    fn failed_expectation_fails_the_scenario() {
        let scenario = Scenario {
            name: "wrong-expectation".into(),
            policy: policy_doc(),
            steps: vec![mount_step(Expectation::Deny)],
        };
        let report = run_scenario_in_process(&scenario, 0).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn rogue_hash_mutation_turns_allow_into_deny() {
        let scenario = Scenario {
            name: "rogue".into(),
            policy: policy_doc(),
            steps: vec![ScenarioStep {
                expect: Expectation::Deny,
                action: None,
                payload: None,
                mutation: Some(MutationSpec::InjectRogueLayerHash { hash: None }),
                base: Some(BaseStep {
                    action: "mount_device".into(),
                    payload: json!({ "device_hash": H1, "target": "/run/l0" }),
                }),
            }],
        };
        let report = run_scenario_in_process(&scenario, 0).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(
            report.steps[0].deny_reason.as_deref(),
            Some("device_hash_not_in_policy")
        );
    }

    #[test]
    fn drop_and_replay_materialize() {
        let scenario = Scenario {
            name: "drop-then-replay".into(),
            policy: policy_doc(),
            steps: vec![
                mount_step(Expectation::Allow),
                ScenarioStep {
                    expect: Expectation::Skipped,
                    action: None,
                    payload: None,
                    mutation: Some(MutationSpec::DropRequest),
                    base: None,
                },
                ScenarioStep {
                    expect: Expectation::Deny, // replayed mount hits a busy target
                    action: None,
                    payload: None,
                    mutation: Some(MutationSpec::ReplayRequest { of_step: None }),
                    base: None,
                },
            ],
        };
        let report = run_scenario_in_process(&scenario, 0).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn reorder_swaps_step_contents() {
        // create-before-overlay ordering: the reordered create runs first
        // and is denied, the overlay then mounts fine
        let scenario = Scenario {
            name: "reorder".into(),
            policy: policy_doc(),
            steps: vec![
                mount_step(Expectation::Allow),
                ScenarioStep {
                    expect: Expectation::Deny,
                    action: None,
                    payload: None,
                    mutation: Some(MutationSpec::ReorderRequests { with: 2 }),
                    base: Some(BaseStep {
                        action: "mount_overlay".into(),
                        payload: json!({
                            "overlay_id": "ov0",
                            "layer_paths": ["/run/l0"],
                            "target": "/run/ov0",
                        }),
                    }),
                },
                ScenarioStep {
                    expect: Expectation::Allow,
                    action: Some("create_container".into()),
                    payload: Some(json!({
                        "container_id": "c0",
                        "overlay_id": "ov0",
                        "command": ["/bin/app"],
                        "env": [],
                        "working_dir": "/",
                        "mounts": [],
                    })),
                    mutation: None,
                    base: None,
                },
            ],
        };
        // after the swap: step 1 sends create_container (denied: no
        // overlay), step 2 sends mount_overlay (allowed)
        let report = run_scenario_in_process(&scenario, 0).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.steps[1].action, "create_container");
        assert_eq!(report.steps[2].action, "mount_overlay");
    }

    #[test]
    fn tampered_frame_is_denied() {
        let scenario = Scenario {
            name: "tamper".into(),
            policy: policy_doc(),
            steps: vec![ScenarioStep {
                expect: Expectation::Deny,
                action: None,
                payload: None,
                mutation: Some(MutationSpec::TamperPayloadByte { offset: 3 }),
                base: Some(BaseStep {
                    action: "mount_device".into(),
                    payload: json!({ "device_hash": H1, "target": "/run/l0" }),
                }),
            }],
        };
        let report = run_scenario_in_process(&scenario, 0).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn validation_rejects_shapeless_steps() {
        let text = json!({
            "name": "bad",
            "policy": policy_doc(),
            "steps": [{ "expect": "allow" }],
        })
        .to_string();
        assert!(matches!(
            Scenario::from_str(&text),
            Err(ScenarioError::Invalid(_))
        ));
    }

    #[test]
    fn scenario_serializes_to_wire_schema() {
        let scenario = Scenario {
            name: "round-trip".into(),
            policy: policy_doc(),
            steps: vec![mount_step(Expectation::Allow)],
        };
        let text = serde_json::to_string_pretty(&scenario).unwrap();
        let reparsed = Scenario::from_str(&text).unwrap();
        assert_eq!(reparsed.name, scenario.name);
        assert_eq!(reparsed.steps.len(), 1);
    }
}

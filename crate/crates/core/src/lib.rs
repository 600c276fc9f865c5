//! Desk-scale confidential-container control plane.
//!
//! The crate simulates the trust machinery of a confidential container host:
//! a user-authored execution policy is parsed, canonicalized, and measured
//! ([`policy`]); every action an untrusted host shim may request from the
//! in-VM guest agent passes through a default-deny enforcement point backed
//! by a policy-maintained metadata store ([`engine`]); the guest agent owns
//! the authoritative VM state and applies decisions atomically ([`agent`]);
//! a mock security processor signs attestation reports that bind the policy
//! measurement, and a verifier/key-release service consumes them
//! ([`attestation`]); layer images and scratch space get Merkle-tree
//! integrity and per-sector authenticated encryption ([`storage`]); and the
//! host side of the wire protocol doubles as an adversary harness
//! ([`bridge`]).

pub mod agent;
pub mod attestation;
pub mod bridge;
mod canon;
pub mod engine;
pub mod policy;
pub mod storage;

pub use agent::{AgentResponse, ContainerInstance, Fault, UvmState};
pub use engine::{
    enforce, DenyReason, EnforcementDecision, EnforcementRequest, MetadataOp, MetadataStore,
};
pub use policy::{
    ExecutionPolicy, LayerDigest, PolicyError, PolicyMeasurement, POLICY_VERSION,
};
pub use storage::{ScratchDevice, StorageError, VerityImage};

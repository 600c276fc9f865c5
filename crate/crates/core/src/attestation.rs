//! Mock platform security processor, attestation verifier, and key-release
//! service.
//!
//! The PSP accumulates a launch measurement over inserted guest pages,
//! freezes a 32-byte host-data value at finalization (the policy digest
//! truncation), and signs fixed-layout reports with a VCEK derived from the
//! chip secret and TCB version. A two-link certificate chain roots the VCEK
//! in a vendor CA. The verifier turns a report plus expectations into a
//! signed claims token, and the key-release service wraps registered
//! secrets for guests whose token satisfies the release policy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, KeyInit, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha384, Sha512};
use thiserror::Error;
use x25519_dalek::{PublicKey as X25519Public, StaticSecret as X25519Secret};

use crate::canon;
use crate::policy::PolicyMeasurement;

/// Report format version.
pub const REPORT_VERSION: u32 = 1;
/// Serialized report length: 4 + 8 + 32 + 48 + 32 + 64 + 512.
pub const REPORT_LEN: usize = 700;
/// Offset where the signature field begins; everything before it is signed.
pub const REPORT_SIGNED_LEN: usize = 188;
/// Fixed-width signature field; actual signatures are zero-padded into it.
pub const SIGNATURE_FIELD_LEN: usize = 512;
/// Serialized certificate length: 32 + 32 + 4 + 8 + 512.
pub const CERTIFICATE_LEN: usize = 588;

const PAGE_SIZE: usize = 4096;
const CHANNEL_AAD: &[u8] = b"psp-report-request";

macro_rules! fixed_bytes {
    ($name:ident, $len:expr, $doc:expr) => {
        #[doc = $doc]
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, String> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out)
                    .map_err(|e| format!("expected {} hex bytes: {e}", $len))?;
                Ok(Self(out))
            }
        }

        impl From<[u8; $len]> for $name {
            fn from(bytes: [u8; $len]) -> Self {
                Self(bytes)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

fixed_bytes!(Measurement, 48, "384-bit guest launch measurement.");
fixed_bytes!(HostData, 32, "256-bit immutable host-data report field.");
fixed_bytes!(ReportData, 64, "512-bit guest-supplied report-data field.");

impl From<&PolicyMeasurement> for HostData {
    fn from(m: &PolicyMeasurement) -> Self {
        HostData(m.host_data_bytes())
    }
}

impl ReportData {
    /// The runtime-claim digest convention: SHA-512 over the claim bytes.
    pub fn digest_of(claim: &[u8]) -> Self {
        ReportData(Sha512::digest(claim).into())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PspError {
    #[error("launch digest already finalized")]
    AlreadyFinalized,
    #[error("launch digest not finalized")]
    NotFinalized,
    #[error("guest pages must be exactly {PAGE_SIZE} bytes, got {0}")]
    BadPageSize(usize),
    #[error("report request failed channel authentication")]
    ChannelAuth,
}

/// Signed statement binding launch-time and runtime values. The serialized
/// layout is fixed-width little-endian:
/// `version u32 | tcb_version u64 | chip_id 32B | measurement 48B |
///  host_data 32B | report_data 64B | signature 512B`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttestationReport {
    pub version: u32,
    pub tcb_version: u64,
    pub chip_id: [u8; 32],
    pub measurement: Measurement,
    pub host_data: HostData,
    pub report_data: ReportData,
    pub signature: [u8; SIGNATURE_FIELD_LEN],
}

impl AttestationReport {
    pub fn to_bytes(&self) -> [u8; REPORT_LEN] {
        let mut out = [0u8; REPORT_LEN];
        out[..4].copy_from_slice(&self.version.to_le_bytes());
        out[4..12].copy_from_slice(&self.tcb_version.to_le_bytes());
        out[12..44].copy_from_slice(&self.chip_id);
        out[44..92].copy_from_slice(self.measurement.as_bytes());
        out[92..124].copy_from_slice(self.host_data.as_bytes());
        out[124..188].copy_from_slice(self.report_data.as_bytes());
        out[188..].copy_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() != REPORT_LEN {
            return Err(format!("report must be {REPORT_LEN} bytes, got {}", bytes.len()));
        }
        let mut chip_id = [0u8; 32];
        chip_id.copy_from_slice(&bytes[12..44]);
        let mut measurement = [0u8; 48];
        measurement.copy_from_slice(&bytes[44..92]);
        let mut host_data = [0u8; 32];
        host_data.copy_from_slice(&bytes[92..124]);
        let mut report_data = [0u8; 64];
        report_data.copy_from_slice(&bytes[124..188]);
        let mut signature = [0u8; SIGNATURE_FIELD_LEN];
        signature.copy_from_slice(&bytes[188..]);
        Ok(Self {
            version: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
            tcb_version: u64::from_le_bytes(bytes[4..12].try_into().unwrap()),
            chip_id,
            measurement: Measurement(measurement),
            host_data: HostData(host_data),
            report_data: ReportData(report_data),
            signature,
        })
    }

    /// The signed prefix: every field before the signature.
    pub fn signed_bytes(&self) -> [u8; REPORT_SIGNED_LEN] {
        let mut out = [0u8; REPORT_SIGNED_LEN];
        out.copy_from_slice(&self.to_bytes()[..REPORT_SIGNED_LEN]);
        out
    }
}

enum LaunchDigest {
    Updating([u8; 48]),
    Finalized {
        measurement: Measurement,
        host_data: HostData,
    },
}

/// An authenticated report request, as sent over the PSP-guest channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRequest {
    pub nonce: u64,
    #[serde(with = "hex_vec")]
    pub ciphertext: Vec<u8>,
}

mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map_err(serde::de::Error::custom)
    }
}

/// Guest-side handle to the PSP channel: builds authenticated report
/// requests and opens responses.
pub struct GuestChannel {
    key: [u8; 32],
    counter: u64,
}

impl GuestChannel {
    pub fn new(key: [u8; 32]) -> Self {
        Self { key, counter: 0 }
    }

    pub fn request_report(&mut self, report_data: &ReportData) -> ReportRequest {
        self.counter += 1;
        let nonce_value = self.counter;
        let mut nonce = [0u8; 12];
        nonce[..8].copy_from_slice(&nonce_value.to_le_bytes());
        let cipher = ChaCha20Poly1305::new(&self.key.into());
        let ciphertext = cipher
            .encrypt(
                &Nonce::from(nonce),
                Payload {
                    msg: report_data.as_bytes(),
                    aad: CHANNEL_AAD,
                },
            )
            .expect("channel encryption cannot fail");
        ReportRequest {
            nonce: nonce_value,
            ciphertext,
        }
    }
}

/// The mock platform security processor.
///
/// Identity is derived, not stored: the VCEK is the HKDF extract-and-expand
/// of the chip secret and the little-endian TCB version, and the chip id is
/// a public digest of the chip secret.
pub struct MockPsp {
    chip_secret: [u8; 32],
    tcb_version: u64,
    launch: LaunchDigest,
    guest_channel_key: [u8; 32],
}

impl MockPsp {
    pub fn new(chip_secret: [u8; 32], tcb_version: u64) -> Self {
        let mut guest_channel_key = [0u8; 32];
        Hkdf::<Sha512>::new(Some(b"guest-channel"), &chip_secret)
            .expand(&tcb_version.to_le_bytes(), &mut guest_channel_key)
            .expect("hkdf expand");
        Self {
            chip_secret,
            tcb_version,
            launch: LaunchDigest::Updating([0u8; 48]),
            guest_channel_key,
        }
    }

    pub fn tcb_version(&self) -> u64 {
        self.tcb_version
    }

    pub fn chip_id(&self) -> [u8; 32] {
        let mut h = Sha512::new();
        h.update(b"chip-id");
        h.update(self.chip_secret);
        let digest: [u8; 64] = h.finalize().into();
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest[..32]);
        out
    }

    fn vcek(&self) -> SigningKey {
        let mut seed = [0u8; 32];
        Hkdf::<Sha512>::new(Some(b"vcek"), &self.chip_secret)
            .expand(&self.tcb_version.to_le_bytes(), &mut seed)
            .expect("hkdf expand");
        SigningKey::from_bytes(&seed)
    }

    pub fn vcek_public_key(&self) -> VerifyingKey {
        self.vcek().verifying_key()
    }

    /// The key populated into the guest's special page at launch.
    pub fn guest_channel_key(&self) -> [u8; 32] {
        self.guest_channel_key
    }

    /// Fold one inserted page into the launch digest:
    /// `state <- SHA-384(state || page || LE64(gpa))`.
    pub fn launch_update(&mut self, page: &[u8], gpa: u64) -> Result<(), PspError> {
        let LaunchDigest::Updating(state) = &mut self.launch else {
            return Err(PspError::AlreadyFinalized);
        };
        if page.len() != PAGE_SIZE {
            return Err(PspError::BadPageSize(page.len()));
        }
        let mut h = Sha384::new();
        h.update(*state);
        h.update(page);
        h.update(gpa.to_le_bytes());
        *state = h.finalize().into();
        Ok(())
    }

    /// Freeze the measurement (`SHA-384(state)`) and pin host data for every
    /// future report.
    pub fn launch_finalize(&mut self, host_data: HostData) -> Result<Measurement, PspError> {
        let LaunchDigest::Updating(state) = &self.launch else {
            return Err(PspError::AlreadyFinalized);
        };
        let measurement = Measurement(Sha384::digest(state).into());
        self.launch = LaunchDigest::Finalized {
            measurement,
            host_data,
        };
        Ok(measurement)
    }

    pub fn measurement(&self) -> Result<Measurement, PspError> {
        match &self.launch {
            LaunchDigest::Finalized { measurement, .. } => Ok(*measurement),
            LaunchDigest::Updating(_) => Err(PspError::NotFinalized),
        }
    }

    /// Issue a signed report. The request must authenticate under the guest
    /// channel key; a host cannot forge one.
    pub fn issue_report(&self, request: &ReportRequest) -> Result<AttestationReport, PspError> {
        let LaunchDigest::Finalized {
            measurement,
            host_data,
        } = &self.launch
        else {
            return Err(PspError::NotFinalized);
        };
        let mut nonce = [0u8; 12];
        nonce[..8].copy_from_slice(&request.nonce.to_le_bytes());
        let cipher = ChaCha20Poly1305::new(&self.guest_channel_key.into());
        let plaintext = cipher
            .decrypt(
                &Nonce::from(nonce),
                Payload {
                    msg: request.ciphertext.as_slice(),
                    aad: CHANNEL_AAD,
                },
            )
            .map_err(|_| PspError::ChannelAuth)?;
        let report_data: [u8; 64] = plaintext
            .try_into()
            .map_err(|_| PspError::ChannelAuth)?;

        let mut report = AttestationReport {
            version: REPORT_VERSION,
            tcb_version: self.tcb_version,
            chip_id: self.chip_id(),
            measurement: *measurement,
            host_data: *host_data,
            report_data: ReportData(report_data),
            signature: [0u8; SIGNATURE_FIELD_LEN],
        };
        let signature = self.vcek().sign(&report.signed_bytes());
        report.signature[..64].copy_from_slice(&signature.to_bytes());
        Ok(report)
    }
}

/// Certificate roles in the two-link chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertRole {
    VendorRoot,
    Vcek,
}

/// Fixed-width certificate: `subject 32B | issuer 32B | role u32 |
/// tcb_version u64 | signature 512B`. The signature covers everything
/// before it and is made by the issuer key (the root self-signs).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub subject_public_key: [u8; 32],
    pub issuer_public_key: [u8; 32],
    pub role: CertRole,
    pub tcb_version: u64,
    pub signature: [u8; SIGNATURE_FIELD_LEN],
}

impl Certificate {
    fn role_code(role: CertRole) -> u32 {
        match role {
            CertRole::VendorRoot => 0,
            CertRole::Vcek => 1,
        }
    }

    fn signed_bytes(&self) -> [u8; 76] {
        let mut out = [0u8; 76];
        out[..32].copy_from_slice(&self.subject_public_key);
        out[32..64].copy_from_slice(&self.issuer_public_key);
        out[64..68].copy_from_slice(&Self::role_code(self.role).to_le_bytes());
        out[68..76].copy_from_slice(&self.tcb_version.to_le_bytes());
        out
    }

    pub fn to_bytes(&self) -> [u8; CERTIFICATE_LEN] {
        let mut out = [0u8; CERTIFICATE_LEN];
        out[..76].copy_from_slice(&self.signed_bytes());
        out[76..].copy_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() != CERTIFICATE_LEN {
            return Err(format!(
                "certificate must be {CERTIFICATE_LEN} bytes, got {}",
                bytes.len()
            ));
        }
        let mut subject = [0u8; 32];
        subject.copy_from_slice(&bytes[..32]);
        let mut issuer = [0u8; 32];
        issuer.copy_from_slice(&bytes[32..64]);
        let role = match u32::from_le_bytes(bytes[64..68].try_into().unwrap()) {
            0 => CertRole::VendorRoot,
            1 => CertRole::Vcek,
            other => return Err(format!("unknown certificate role {other}")),
        };
        let tcb_version = u64::from_le_bytes(bytes[68..76].try_into().unwrap());
        let mut signature = [0u8; SIGNATURE_FIELD_LEN];
        signature.copy_from_slice(&bytes[76..]);
        Ok(Self {
            subject_public_key: subject,
            issuer_public_key: issuer,
            role,
            tcb_version,
            signature,
        })
    }

    fn verify_signature(&self) -> bool {
        let Ok(issuer) = VerifyingKey::from_bytes(&self.issuer_public_key) else {
            return false;
        };
        if !self.signature[64..].iter().all(|&b| b == 0) {
            return false;
        }
        let sig = Signature::from_bytes(self.signature[..64].try_into().unwrap());
        issuer.verify_strict(&self.signed_bytes(), &sig).is_ok()
    }
}

/// Root certificate plus the VCEK endorsement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CertificateChain {
    pub root: Certificate,
    pub vcek: Certificate,
}

/// The mock chip vendor: owns the root CA key and endorses per-chip VCEKs.
pub struct VendorRoot {
    signing: SigningKey,
}

impl VendorRoot {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn root_certificate(&self) -> Certificate {
        let pk = self.public_key();
        let mut cert = Certificate {
            subject_public_key: pk,
            issuer_public_key: pk,
            role: CertRole::VendorRoot,
            tcb_version: 0,
            signature: [0u8; SIGNATURE_FIELD_LEN],
        };
        let sig = self.signing.sign(&cert.signed_bytes());
        cert.signature[..64].copy_from_slice(&sig.to_bytes());
        cert
    }

    pub fn endorse(&self, psp: &MockPsp) -> CertificateChain {
        let mut vcek = Certificate {
            subject_public_key: psp.vcek_public_key().to_bytes(),
            issuer_public_key: self.public_key(),
            role: CertRole::Vcek,
            tcb_version: psp.tcb_version(),
            signature: [0u8; SIGNATURE_FIELD_LEN],
        };
        let sig = self.signing.sign(&vcek.signed_bytes());
        vcek.signature[..64].copy_from_slice(&sig.to_bytes());
        CertificateChain {
            root: self.root_certificate(),
            vcek,
        }
    }
}

/// Verification failure labels, one per check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyRejection {
    BadChain,
    BadSignature,
    MeasurementMismatch,
    HostDataMismatch,
    ReportDataMismatch,
}

impl VerifyRejection {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::BadChain => "bad_chain",
            Self::BadSignature => "bad_signature",
            Self::MeasurementMismatch => "measurement_mismatch",
            Self::HostDataMismatch => "host_data_mismatch",
            Self::ReportDataMismatch => "report_data_mismatch",
        }
    }
}

impl fmt::Display for VerifyRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::error::Error for VerifyRejection {}

/// What a relying party expects of a report.
#[derive(Clone, Debug)]
pub struct VerifyExpectations {
    pub allowed_measurements: BTreeSet<Measurement>,
    /// Full 64-byte policy digest; host data must equal its first half.
    pub policy_digest: [u8; 64],
    pub report_data: ReportData,
}

/// Each verification check evaluated independently, for diagnostics.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ReportChecks {
    pub chain: bool,
    pub signature: bool,
    pub measurement: bool,
    pub host_data: bool,
    pub report_data: bool,
}

impl ReportChecks {
    pub fn all_pass(&self) -> bool {
        self.chain && self.signature && self.measurement && self.host_data && self.report_data
    }
}

/// Claims carried by a verification token; hex throughout, so tokens are
/// plain JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub measurement: String,
    pub host_data: String,
    /// Full 64-byte policy digest, carried alongside its 32-byte host-data
    /// truncation.
    pub policy_digest: String,
    pub report_data: String,
    pub tcb_version: u64,
}

/// Offline-verifiable statement by the attestation service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationToken {
    pub claims: TokenClaims,
    pub issuer: String,
    pub signature: String,
}

impl AttestationToken {
    fn signing_bytes(claims: &TokenClaims, issuer: &str) -> Vec<u8> {
        canon::to_canonical_bytes(&json!({
            "claims": claims,
            "issuer": issuer,
        }))
    }

    pub fn verify(&self, service_public_key: &VerifyingKey) -> bool {
        let Ok(sig_bytes) = hex::decode(&self.signature) else {
            return false;
        };
        let Ok(sig_array) = <[u8; 64]>::try_from(sig_bytes.as_slice()) else {
            return false;
        };
        let sig = Signature::from_bytes(&sig_array);
        service_public_key
            .verify_strict(&Self::signing_bytes(&self.claims, &self.issuer), &sig)
            .is_ok()
    }
}

/// The attestation verifier / token issuer.
pub struct AttestationService {
    signing: SigningKey,
    issuer: String,
}

impl AttestationService {
    pub fn from_seed(seed: [u8; 32], issuer: impl Into<String>) -> Self {
        Self {
            signing: SigningKey::from_bytes(&seed),
            issuer: issuer.into(),
        }
    }

    pub fn public_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    /// Evaluate every check independently.
    pub fn check_report(
        &self,
        report: &AttestationReport,
        chain: &CertificateChain,
        vendor_root_public_key: &[u8; 32],
        expected: &VerifyExpectations,
    ) -> ReportChecks {
        let chain_ok = chain.root.role == CertRole::VendorRoot
            && chain.root.subject_public_key == *vendor_root_public_key
            && chain.root.issuer_public_key == chain.root.subject_public_key
            && chain.root.verify_signature()
            && chain.vcek.role == CertRole::Vcek
            && chain.vcek.issuer_public_key == chain.root.subject_public_key
            && chain.vcek.tcb_version == report.tcb_version
            && chain.vcek.verify_signature();

        let signature_ok = (|| {
            let vcek = VerifyingKey::from_bytes(&chain.vcek.subject_public_key).ok()?;
            if !report.signature[64..].iter().all(|&b| b == 0) {
                return None;
            }
            let sig = Signature::from_bytes(report.signature[..64].try_into().unwrap());
            vcek.verify_strict(&report.signed_bytes(), &sig).ok()
        })()
        .is_some();

        ReportChecks {
            chain: chain_ok,
            signature: signature_ok,
            measurement: expected.allowed_measurements.contains(&report.measurement),
            host_data: report.host_data.as_bytes()[..] == expected.policy_digest[..32],
            report_data: report.report_data == expected.report_data,
        }
    }

    /// Run the checks in order (chain, signature, measurement, host data,
    /// report data) and mint a token when all pass.
    pub fn verify_report(
        &self,
        report: &AttestationReport,
        chain: &CertificateChain,
        vendor_root_public_key: &[u8; 32],
        expected: &VerifyExpectations,
    ) -> Result<AttestationToken, VerifyRejection> {
        let checks = self.check_report(report, chain, vendor_root_public_key, expected);
        if !checks.chain {
            return Err(VerifyRejection::BadChain);
        }
        if !checks.signature {
            return Err(VerifyRejection::BadSignature);
        }
        if !checks.measurement {
            return Err(VerifyRejection::MeasurementMismatch);
        }
        if !checks.host_data {
            return Err(VerifyRejection::HostDataMismatch);
        }
        if !checks.report_data {
            return Err(VerifyRejection::ReportDataMismatch);
        }
        let claims = TokenClaims {
            measurement: report.measurement.to_hex(),
            host_data: report.host_data.to_hex(),
            policy_digest: hex::encode(expected.policy_digest),
            report_data: report.report_data.to_hex(),
            tcb_version: report.tcb_version,
        };
        let signature = self
            .signing
            .sign(&AttestationToken::signing_bytes(&claims, &self.issuer));
        Ok(AttestationToken {
            claims,
            issuer: self.issuer.clone(),
            signature: hex::encode(signature.to_bytes()),
        })
    }
}

/// Predicate a token must satisfy before a key is released.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyReleasePolicy {
    pub expected_host_data: HostData,
    pub allowed_measurements: BTreeSet<Measurement>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReleaseDenial {
    #[error("unknown key id")]
    UnknownKeyId,
    #[error("invalid token")]
    InvalidToken,
    #[error("token claims do not satisfy the release policy")]
    PolicyMismatch,
    #[error("wrapping key does not match the attested runtime claim")]
    WrappingKeyMismatch,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegisterError {
    #[error("key id already registered")]
    DuplicateKeyId,
    #[error("release policy must allow at least one measurement")]
    EmptyMeasurements,
}

/// An x25519 keypair a guest uses to receive wrapped secrets. The public
/// half is the runtime claim whose SHA-512 goes into report data.
pub struct WrappingKeypair {
    secret: X25519Secret,
    public: X25519Public,
}

impl WrappingKeypair {
    pub fn generate(rng: &mut dyn RngCore) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let secret = X25519Secret::from(seed);
        let public = X25519Public::from(&secret);
        Self { secret, public }
    }

    pub fn public_bytes(&self) -> [u8; 32] {
        self.public.to_bytes()
    }

    pub fn report_data(&self) -> ReportData {
        ReportData::digest_of(&self.public_bytes())
    }

    pub fn unwrap_key(&self, wrapped: &WrappedKey) -> Result<Vec<u8>, ReleaseDenial> {
        let ephemeral = X25519Public::from(wrapped.ephemeral_public);
        let shared = self.secret.diffie_hellman(&ephemeral);
        let cipher = ChaCha20Poly1305::new(&wrap_kek(shared.as_bytes(), &wrapped.ephemeral_public, &self.public_bytes()).into());
        cipher
            .decrypt(
                &Nonce::from(wrapped.nonce),
                Payload {
                    msg: wrapped.ciphertext.as_slice(),
                    aad: b"key-release",
                },
            )
            .map_err(|_| ReleaseDenial::InvalidToken)
    }
}

fn wrap_kek(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> [u8; 32] {
    let mut info = Vec::with_capacity(64);
    info.extend_from_slice(ephemeral);
    info.extend_from_slice(recipient);
    let mut kek = [0u8; 32];
    Hkdf::<Sha512>::new(Some(b"wrap"), shared)
        .expand(&info, &mut kek)
        .expect("hkdf expand");
    kek
}

/// A secret encrypted to a wrapping public key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrappedKey {
    pub ephemeral_public: [u8; 32],
    pub nonce: [u8; 12],
    #[serde(with = "hex_vec")]
    pub ciphertext: Vec<u8>,
}

/// Key-release service: a registry of secrets, each gated by a release
/// policy over token claims.
pub struct KeyManagementService {
    attestation_service_key: VerifyingKey,
    registry: BTreeMap<String, (Vec<u8>, KeyReleasePolicy)>,
}

impl KeyManagementService {
    pub fn new(attestation_service_key: VerifyingKey) -> Self {
        Self {
            attestation_service_key,
            registry: BTreeMap::new(),
        }
    }

    pub fn register_key(
        &mut self,
        key_id: impl Into<String>,
        secret: Vec<u8>,
        policy: KeyReleasePolicy,
    ) -> Result<(), RegisterError> {
        let key_id = key_id.into();
        if policy.allowed_measurements.is_empty() {
            return Err(RegisterError::EmptyMeasurements);
        }
        if self.registry.contains_key(&key_id) {
            return Err(RegisterError::DuplicateKeyId);
        }
        self.registry.insert(key_id, (secret, policy));
        Ok(())
    }

    /// Release the secret wrapped to the presented key, iff the token is
    /// genuine, the wrapping key is the attested runtime claim, and the
    /// claims satisfy the release policy.
    pub fn release_key(
        &self,
        key_id: &str,
        token: &AttestationToken,
        wrapping_public_key: &[u8; 32],
        rng: &mut dyn RngCore,
    ) -> Result<WrappedKey, ReleaseDenial> {
        let (secret, policy) = self
            .registry
            .get(key_id)
            .ok_or(ReleaseDenial::UnknownKeyId)?;
        if !token.verify(&self.attestation_service_key) {
            return Err(ReleaseDenial::InvalidToken);
        }
        let claimed_report_data = ReportData::digest_of(wrapping_public_key);
        if token.claims.report_data != claimed_report_data.to_hex() {
            return Err(ReleaseDenial::WrappingKeyMismatch);
        }
        let host_data_ok = token.claims.host_data == policy.expected_host_data.to_hex();
        let measurement_ok = policy
            .allowed_measurements
            .iter()
            .any(|m| m.to_hex() == token.claims.measurement);
        if !host_data_ok || !measurement_ok {
            return Err(ReleaseDenial::PolicyMismatch);
        }

        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let ephemeral_secret = X25519Secret::from(seed);
        let ephemeral_public = X25519Public::from(&ephemeral_secret).to_bytes();
        let recipient = X25519Public::from(*wrapping_public_key);
        let shared = ephemeral_secret.diffie_hellman(&recipient);
        let mut nonce = [0u8; 12];
        rng.fill_bytes(&mut nonce);
        let cipher =
            ChaCha20Poly1305::new(&wrap_kek(shared.as_bytes(), &ephemeral_public, wrapping_public_key).into());
        let ciphertext = cipher
            .encrypt(
                &Nonce::from(nonce),
                Payload {
                    msg: secret.as_slice(),
                    aad: b"key-release",
                },
            )
            .expect("wrap encryption cannot fail");
        Ok(WrappedKey {
            ephemeral_public,
            nonce,
            ciphertext,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::Sha384;

    fn page(fill: u8) -> Vec<u8> {
        vec![fill; PAGE_SIZE]
    }

    fn launched_psp() -> MockPsp {
        let mut psp = MockPsp::new([3u8; 32], 7);
        psp.launch_update(&page(0xAA), 0x1000).unwrap();
        psp.launch_update(&page(0xBB), 0x2000).unwrap();
        psp.launch_finalize(HostData([0x44; 32])).unwrap();
        psp
    }

    #[test]
    fn launch_measurement_binds_page_order() {
        let mut a = MockPsp::new([1u8; 32], 1);
        a.launch_update(&page(0xAA), 0x1000).unwrap();
        a.launch_update(&page(0xBB), 0x2000).unwrap();
        let ma = a.launch_finalize(HostData([0; 32])).unwrap();

        let mut b = MockPsp::new([1u8; 32], 1);
        b.launch_update(&page(0xBB), 0x2000).unwrap();
        b.launch_update(&page(0xAA), 0x1000).unwrap();
        let mb = b.launch_finalize(HostData([0; 32])).unwrap();
        assert_ne!(ma, mb);
    }

    #[test]
    fn launch_measurement_is_reproducible() {
        let build = || {
            let mut psp = MockPsp::new([1u8; 32], 1);
            psp.launch_update(&page(0xAA), 0x1000).unwrap();
            psp.launch_finalize(HostData([0; 32])).unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn launch_measurement_binds_gpa() {
        // reference recomputation of the declared chain formula
        let mut psp = MockPsp::new([1u8; 32], 1);
        psp.launch_update(&page(0xAA), 0x1000).unwrap();
        let m = psp.launch_finalize(HostData([0; 32])).unwrap();

        let mut h = Sha384::new();
        h.update([0u8; 48]);
        h.update(page(0xAA));
        h.update(0x1000u64.to_le_bytes());
        let state: [u8; 48] = h.finalize().into();
        let expected: [u8; 48] = Sha384::digest(state).into();
        assert_eq!(m.as_bytes(), &expected);

        let mut other = MockPsp::new([1u8; 32], 1);
        other.launch_update(&page(0xAA), 0x1008).unwrap();
        assert_ne!(other.launch_finalize(HostData([0; 32])).unwrap(), m);
    }

    #[test]
    fn empty_guest_measurement_is_hash_of_empty_context() {
        let mut psp = MockPsp::new([1u8; 32], 1);
        let m = psp.launch_finalize(HostData([0; 32])).unwrap();
        let expected: [u8; 48] = Sha384::digest([0u8; 48]).into();
        assert_eq!(m.as_bytes(), &expected);
    }

    #[test]
    fn finalize_is_single_shot() {
        let mut psp = launched_psp();
        assert_eq!(
            psp.launch_update(&page(0xCC), 0x3000).unwrap_err(),
            PspError::AlreadyFinalized
        );
        assert_eq!(
            psp.launch_finalize(HostData([0; 32])).unwrap_err(),
            PspError::AlreadyFinalized
        );
    }

    #[test]
    fn wrong_page_size_rejected() {
        let mut psp = MockPsp::new([1u8; 32], 1);
        assert_eq!(
            psp.launch_update(&[0u8; 100], 0).unwrap_err(),
            PspError::BadPageSize(100)
        );
    }

    #[test]
    fn report_requires_authenticated_channel() {
        let psp = launched_psp();
        let mut channel = GuestChannel::new(psp.guest_channel_key());
        let request = channel.request_report(&ReportData([0x01; 64]));
        let report = psp.issue_report(&request).unwrap();
        assert_eq!(report.report_data, ReportData([0x01; 64]));

        // host forging a request under the wrong key
        let mut rogue = GuestChannel::new([0xFF; 32]);
        let forged = rogue.request_report(&ReportData([0x02; 64]));
        assert_eq!(psp.issue_report(&forged).unwrap_err(), PspError::ChannelAuth);

        // bit-flipped ciphertext
        let mut tampered = channel.request_report(&ReportData([0x03; 64]));
        tampered.ciphertext[0] ^= 1;
        assert_eq!(psp.issue_report(&tampered).unwrap_err(), PspError::ChannelAuth);
    }

    #[test]
    fn reports_differ_only_in_report_data_and_signature() {
        let psp = launched_psp();
        let mut channel = GuestChannel::new(psp.guest_channel_key());
        let r1 = psp
            .issue_report(&channel.request_report(&ReportData([0x01; 64])))
            .unwrap()
            .to_bytes();
        let r2 = psp
            .issue_report(&channel.request_report(&ReportData([0x02; 64])))
            .unwrap()
            .to_bytes();
        assert_eq!(r1[..124], r2[..124], "fields before report_data agree");
        assert_ne!(r1[124..188], r2[124..188]);
        assert_ne!(r1[188..], r2[188..]);
    }

    #[test]
    fn report_signature_verifies_under_vcek() {
        let psp = launched_psp();
        let mut channel = GuestChannel::new(psp.guest_channel_key());
        let report = psp
            .issue_report(&channel.request_report(&ReportData([0x01; 64])))
            .unwrap();
        let sig = Signature::from_bytes(report.signature[..64].try_into().unwrap());
        psp.vcek_public_key()
            .verify_strict(&report.signed_bytes(), &sig)
            .unwrap();
    }

    #[test]
    fn report_layout_is_bit_exact() {
        let report = AttestationReport {
            version: 0x01020304,
            tcb_version: 0x1112131415161718,
            chip_id: [0xC1; 32],
            measurement: Measurement([0xB1; 48]),
            host_data: HostData([0xD1; 32]),
            report_data: ReportData([0xE1; 64]),
            signature: [0xF1; SIGNATURE_FIELD_LEN],
        };
        let bytes = report.to_bytes();
        assert_eq!(bytes.len(), REPORT_LEN);
        assert_eq!(&bytes[..4], &[0x04, 0x03, 0x02, 0x01], "version LE");
        assert_eq!(
            &bytes[4..12],
            &[0x18, 0x17, 0x16, 0x15, 0x14, 0x13, 0x12, 0x11],
            "tcb LE"
        );
        assert!(bytes[12..44].iter().all(|&b| b == 0xC1));
        assert!(bytes[44..92].iter().all(|&b| b == 0xB1));
        assert!(bytes[92..124].iter().all(|&b| b == 0xD1));
        assert!(bytes[124..188].iter().all(|&b| b == 0xE1));
        assert!(bytes[188..].iter().all(|&b| b == 0xF1));
        assert_eq!(AttestationReport::from_bytes(&bytes).unwrap(), report);
    }
}

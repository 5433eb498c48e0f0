//! Shared domain model: module descriptors, transferable objects, ratings,
//! entitlements, and the canonical serialization every checksum and token is
//! computed over.

use std::collections::BTreeMap;
use std::fmt;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Timestamp in milliseconds, supplied by an injected clock.
pub type Millis = u64;

/// Named parameters binding a behavior to a concrete configuration.
pub type ParameterSet = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
}

/// Serializes `value` as compact UTF-8 JSON with lexicographically sorted keys.
///
/// Struct fields are routed through `serde_json::Value`, whose object map is
/// ordered, so the output does not depend on field declaration order.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    let value = serde_json::to_value(value)?;
    serde_json::to_string(&value)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EndToEndLatencyMs,
    LossRate,
    ThroughputMbps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceObjective {
    pub metric: Metric,
    pub bound: f64,
    pub direction: Direction,
}

impl PerformanceObjective {
    pub fn at_most(metric: Metric, bound: f64) -> Self {
        Self { metric, bound, direction: Direction::AtMost }
    }

    pub fn at_least(metric: Metric, bound: f64) -> Self {
        Self { metric, bound, direction: Direction::AtLeast }
    }

    pub fn is_met(&self, value: f64) -> bool {
        match self.direction {
            Direction::AtMost => value <= self.bound,
            Direction::AtLeast => value >= self.bound,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.bound.is_finite() && self.bound >= 0.0
    }
}

/// Device-side behavior shipped by value: a built-in behavior id plus its
/// parameters, sealed with a checksum over the canonical serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferableObject {
    pub module_key: String,
    pub version: u32,
    pub behavior_id: String,
    #[serde(default)]
    pub params: ParameterSet,
    #[serde(default)]
    pub checksum: String,
}

#[derive(Serialize)]
struct ToContent<'a> {
    module_key: &'a str,
    version: u32,
    behavior_id: &'a str,
    params: &'a ParameterSet,
}

impl TransferableObject {
    pub fn new(
        module_key: impl Into<String>,
        version: u32,
        behavior_id: impl Into<String>,
        params: ParameterSet,
    ) -> Self {
        let mut to = Self {
            module_key: module_key.into(),
            version,
            behavior_id: behavior_id.into(),
            params,
            checksum: String::new(),
        };
        to.seal();
        to
    }

    pub fn content_checksum(&self) -> String {
        let content = ToContent {
            module_key: &self.module_key,
            version: self.version,
            behavior_id: &self.behavior_id,
            params: &self.params,
        };
        // ParameterSet holds JSON values only; serialization cannot fail.
        let json = canonical_json(&content).expect("TO content serializes");
        sha256_hex(json.as_bytes())
    }

    /// Recomputes the checksum after the content changed.
    pub fn seal(&mut self) {
        self.checksum = self.content_checksum();
    }

    pub fn verify_checksum(&self) -> bool {
        self.checksum == self.content_checksum()
    }
}

/// Reference to the network-side behavior a module instantiates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsoBehaviorRef {
    pub behavior_id: String,
}

impl SsoBehaviorRef {
    pub fn new(behavior_id: impl Into<String>) -> Self {
        Self { behavior_id: behavior_id.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Submitted,
    UnderReview,
    RevisionRequested,
    Published,
    Deprecated,
    Disposed,
}

impl Lifecycle {
    pub const ALL: [Lifecycle; 6] = [
        Lifecycle::Submitted,
        Lifecycle::UnderReview,
        Lifecycle::RevisionRequested,
        Lifecycle::Published,
        Lifecycle::Deprecated,
        Lifecycle::Disposed,
    ];

    /// Edges of the lifecycle state machine. Disposal is terminal.
    pub fn successors(self) -> &'static [Lifecycle] {
        use Lifecycle::*;
        match self {
            Submitted => &[UnderReview],
            UnderReview => &[Published, RevisionRequested],
            RevisionRequested => &[UnderReview],
            Published => &[UnderReview, Deprecated],
            Deprecated => &[UnderReview, Disposed],
            Disposed => &[],
        }
    }

    pub fn can_transition_to(self, target: Lifecycle) -> bool {
        self.successors().contains(&target)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Lifecycle::Submitted => "submitted",
            Lifecycle::UnderReview => "under_review",
            Lifecycle::RevisionRequested => "revision_requested",
            Lifecycle::Published => "published",
            Lifecycle::Deprecated => "deprecated",
            Lifecycle::Disposed => "disposed",
        }
    }
}

impl fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub rater: String,
    pub stars: u8,
    #[serde(default)]
    pub comment: String,
    pub at: Millis,
}

impl Rating {
    pub fn is_valid(&self) -> bool {
        (1..=5).contains(&self.stars)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub module_key: String,
    pub name: String,
    pub version: u32,
    pub contributor: String,
    pub objective: PerformanceObjective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_behavior: Option<TransferableObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network_behavior: Option<SsoBehaviorRef>,
    #[serde(default)]
    pub parameterizations: BTreeMap<String, ParameterSet>,
    #[serde(default = "default_lifecycle")]
    pub lifecycle: Lifecycle,
    #[serde(default)]
    pub ratings: Vec<Rating>,
    #[serde(default)]
    pub purchase_count: u64,
    #[serde(default)]
    pub composed_of: Vec<String>,
}

fn default_lifecycle() -> Lifecycle {
    Lifecycle::Submitted
}

impl ModuleDescriptor {
    pub fn mean_stars(&self) -> Option<f64> {
        if self.ratings.is_empty() {
            return None;
        }
        let total: u64 = self.ratings.iter().map(|r| u64::from(r.stars)).sum();
        Some(total as f64 / self.ratings.len() as f64)
    }

    /// Module ids are registry-issued as `<module_key>:<label>`.
    pub fn module_id_prefix(&self) -> String {
        format!("{}:", self.module_key)
    }
}

/// Returns the module key a registry-issued module id belongs to.
pub fn module_key_of(module_id: &str) -> Option<&str> {
    match module_id.split_once(':') {
        Some((key, label)) if !key.is_empty() && !label.is_empty() => Some(key),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    VersionBelowOne,
    NoBehaviorComponent,
    EmptyModuleKey,
    EmptyContributor,
    ObjectiveBound,
    RatingOutOfRange,
    ModuleIdNotNamespaced(String),
    TransferableObjectKey,
    TransferableObjectVersion,
    TransferableObjectChecksum,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::VersionBelowOne => f.write_str("version ≥ 1"),
            Violation::NoBehaviorComponent => f.write_str("no behavior component"),
            Violation::EmptyModuleKey => f.write_str("module_key non-empty"),
            Violation::EmptyContributor => f.write_str("contributor non-empty"),
            Violation::ObjectiveBound => f.write_str("objective bound finite and non-negative"),
            Violation::RatingOutOfRange => f.write_str("1 ≤ stars ≤ 5"),
            Violation::ModuleIdNotNamespaced(id) => {
                write!(f, "module_id {id:?} not issued under the module key")
            }
            Violation::TransferableObjectKey => f.write_str("TO module_key matches descriptor"),
            Violation::TransferableObjectVersion => f.write_str("TO version matches descriptor"),
            Violation::TransferableObjectChecksum => f.write_str("TO checksum verifies"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationResult {
    Ok,
    Violations(Vec<Violation>),
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, ValidationResult::Ok)
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            ValidationResult::Ok => &[],
            ValidationResult::Violations(v) => v,
        }
    }
}

/// Checks every descriptor-local invariant. Registry-wide invariants (module id
/// uniqueness, version monotonicity, lifecycle edges) are enforced by the registry.
pub fn validate_descriptor(desc: &ModuleDescriptor) -> ValidationResult {
    let mut out = Vec::new();
    if desc.module_key.is_empty() || desc.module_key.contains(':') {
        out.push(Violation::EmptyModuleKey);
    }
    if desc.contributor.is_empty() {
        out.push(Violation::EmptyContributor);
    }
    if desc.version < 1 {
        out.push(Violation::VersionBelowOne);
    }
    if desc.device_behavior.is_none() && desc.network_behavior.is_none() {
        out.push(Violation::NoBehaviorComponent);
    }
    if !desc.objective.is_well_formed() {
        out.push(Violation::ObjectiveBound);
    }
    if desc.ratings.iter().any(|r| !r.is_valid()) {
        out.push(Violation::RatingOutOfRange);
    }
    let prefix = desc.module_id_prefix();
    for id in desc.parameterizations.keys() {
        if !id.starts_with(&prefix) || id.len() == prefix.len() {
            out.push(Violation::ModuleIdNotNamespaced(id.clone()));
        }
    }
    if let Some(to) = &desc.device_behavior {
        if to.module_key != desc.module_key {
            out.push(Violation::TransferableObjectKey);
        }
        if to.version != desc.version {
            out.push(Violation::TransferableObjectVersion);
        }
        if !to.verify_checksum() {
            out.push(Violation::TransferableObjectChecksum);
        }
    }
    if out.is_empty() {
        ValidationResult::Ok
    } else {
        ValidationResult::Violations(out)
    }
}

/// Running tally of how often a module met its declared objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub samples: u64,
    pub attained: u64,
    pub last_maintainer_update: Millis,
}

impl ObjectiveStats {
    /// attained / samples, 0 when nothing was sampled.
    pub fn ratio(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.attained as f64 / self.samples as f64
        }
    }

    pub fn record(&mut self, attained: bool) {
        self.samples += 1;
        if attained {
            self.attained += 1;
        }
    }
}

/// License grant for one app (and optionally one device) to use a module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entitlement {
    pub app_id: String,
    pub module_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_fingerprint: Option<String>,
    pub token: String,
    pub issued_at: Millis,
}

#[derive(Serialize)]
struct TokenSubject<'a> {
    app_id: &'a str,
    module_key: &'a str,
    device_fingerprint: Option<&'a str>,
}

type HmacSha256 = Hmac<Sha256>;

fn token_mac(
    app_id: &str,
    module_key: &str,
    device_fingerprint: Option<&str>,
    secret: &[u8],
) -> HmacSha256 {
    let subject = TokenSubject { app_id, module_key, device_fingerprint };
    let json = canonical_json(&subject).expect("token subject serializes");
    let mut mac = HmacSha256::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(json.as_bytes());
    mac
}

pub fn issue_entitlement(
    app_id: &str,
    module_key: &str,
    device_fingerprint: Option<&str>,
    secret: &[u8],
    issued_at: Millis,
) -> Result<Entitlement, DomainError> {
    if secret.is_empty() {
        return Err(DomainError::InvalidArgument("empty secret".into()));
    }
    if app_id.is_empty() {
        return Err(DomainError::InvalidArgument("empty app_id".into()));
    }
    if module_key.is_empty() {
        return Err(DomainError::InvalidArgument("empty module_key".into()));
    }
    let tag = token_mac(app_id, module_key, device_fingerprint, secret).finalize().into_bytes();
    Ok(Entitlement {
        app_id: app_id.to_string(),
        module_key: module_key.to_string(),
        device_fingerprint: device_fingerprint.map(str::to_string),
        token: hex::encode(tag),
        issued_at,
    })
}

pub fn verify_entitlement(ent: &Entitlement, secret: &[u8]) -> bool {
    if secret.is_empty() {
        return false;
    }
    // Only the exact lowercase encoding is accepted, so case flips are tampering too.
    if ent.token.len() != 64 || !ent.token.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return false;
    }
    let Ok(tag) = hex::decode(&ent.token) else {
        return false;
    };
    token_mac(&ent.app_id, &ent.module_key, ent.device_fingerprint.as_deref(), secret)
        .verify_slice(&tag)
        .is_ok()
}

impl Entitlement {
    /// The same grant as presented from a device with `fingerprint`.
    pub fn presented_by(&self, fingerprint: Option<&str>) -> Entitlement {
        Entitlement { device_fingerprint: fingerprint.map(str::to_string), ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_descriptor() -> ModuleDescriptor {
        let mut params = BTreeMap::new();
        params.insert("m1:gold".to_string(), ParameterSet::new());
        ModuleDescriptor {
            module_key: "m1".into(),
            name: "Module one".into(),
            version: 1,
            contributor: "alice".into(),
            objective: PerformanceObjective::at_most(Metric::EndToEndLatencyMs, 50.0),
            device_behavior: Some(TransferableObject::new("m1", 1, "default_redirect", ParameterSet::new())),
            network_behavior: None,
            parameterizations: params,
            lifecycle: Lifecycle::Submitted,
            ratings: vec![],
            purchase_count: 0,
            composed_of: vec![],
        }
    }

    #[test]
    fn device_only_descriptor_is_valid() {
        assert_eq!(validate_descriptor(&sample_descriptor()), ValidationResult::Ok);
    }

    #[test]
    fn missing_both_behaviors_is_reported() {
        let mut d = sample_descriptor();
        d.device_behavior = None;
        let r = validate_descriptor(&d);
        assert_eq!(r.violations(), &[Violation::NoBehaviorComponent]);
        assert_eq!(r.violations()[0].to_string(), "no behavior component");
    }

    #[test]
    fn version_zero_is_reported() {
        let mut d = sample_descriptor();
        d.version = 0;
        d.device_behavior = None;
        d.network_behavior = Some(SsoBehaviorRef::new("default_forward"));
        let r = validate_descriptor(&d);
        assert_eq!(r.violations(), &[Violation::VersionBelowOne]);
        assert_eq!(r.violations()[0].to_string(), "version ≥ 1");
    }

    #[test]
    fn objective_and_module_id_checks() {
        let mut d = sample_descriptor();
        d.objective.bound = f64::NAN;
        d.parameterizations.insert("other:x".into(), ParameterSet::new());
        let r = validate_descriptor(&d);
        assert!(r.violations().contains(&Violation::ObjectiveBound));
        assert!(r.violations().contains(&Violation::ModuleIdNotNamespaced("other:x".into())));
    }

    #[test]
    fn tampered_to_fails_checksum() {
        let mut d = sample_descriptor();
        d.device_behavior.as_mut().unwrap().behavior_id = "stream_chunker".into();
        assert!(validate_descriptor(&d).violations().contains(&Violation::TransferableObjectChecksum));
    }

    #[test]
    fn canonical_json_sorts_keys() {
        #[derive(Serialize)]
        struct S {
            zeta: u8,
            alpha: u8,
        }
        assert_eq!(canonical_json(&S { zeta: 1, alpha: 2 }).unwrap(), r#"{"alpha":2,"zeta":1}"#);
    }

    #[test]
    fn entitlement_round_trip_and_wrong_secret() {
        let e = issue_entitlement("A", "m1", None, b"s", 10).unwrap();
        assert!(verify_entitlement(&e, b"s"));
        assert!(!verify_entitlement(&e, b"s-prime"));
    }

    #[test]
    fn entitlement_is_bound_to_device() {
        let e = issue_entitlement("A", "m1", Some("fp1"), b"s", 10).unwrap();
        assert!(verify_entitlement(&e, b"s"));
        assert!(!verify_entitlement(&e.presented_by(Some("fp2")), b"s"));
        assert!(!verify_entitlement(&e.presented_by(None), b"s"));
    }

    #[test]
    fn entitlement_argument_errors() {
        assert!(issue_entitlement("", "m1", None, b"s", 0).is_err());
        assert!(issue_entitlement("A", "", None, b"s", 0).is_err());
        assert!(issue_entitlement("A", "m1", None, b"", 0).is_err());
    }

    #[test]
    fn entitlement_is_deterministic() {
        let a = issue_entitlement("A", "m1", Some("fp"), b"k", 5).unwrap();
        let b = issue_entitlement("A", "m1", Some("fp"), b"k", 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lifecycle_disposed_is_terminal() {
        assert!(Lifecycle::Disposed.successors().is_empty());
        assert!(Lifecycle::Deprecated.can_transition_to(Lifecycle::Disposed));
        assert!(!Lifecycle::Published.can_transition_to(Lifecycle::Disposed));
    }

    #[test]
    fn module_key_parsing() {
        assert_eq!(module_key_of("m1:gold"), Some("m1"));
        assert_eq!(module_key_of("nonexistent"), None);
        assert_eq!(module_key_of(":x"), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_descriptor() -> impl Strategy<Value = ModuleDescriptor> {
            (
                "[a-z]{0,3}",
                0u32..3,
                "[a-z]{0,2}",
                prop_oneof![Just(f64::NAN), Just(-1.0), 0.0f64..100.0],
                any::<bool>(),
                any::<bool>(),
                proptest::collection::vec(0u8..8, 0..3),
                proptest::collection::vec("[a-z:]{0,4}", 0..3),
                any::<bool>(),
            )
                .prop_map(|(key, version, contributor, bound, dev, net, stars, ids, tamper)| {
                    let mut to = TransferableObject::new(key.clone(), version, "default_redirect", ParameterSet::new());
                    if tamper {
                        to.version += 1;
                    }
                    ModuleDescriptor {
                        module_key: key,
                        name: "n".into(),
                        version,
                        contributor,
                        objective: PerformanceObjective::at_most(Metric::LossRate, bound),
                        device_behavior: dev.then_some(to),
                        network_behavior: net.then(|| SsoBehaviorRef::new("default_forward")),
                        parameterizations: ids.into_iter().map(|i| (i, ParameterSet::new())).collect(),
                        lifecycle: Lifecycle::Submitted,
                        ratings: stars
                            .into_iter()
                            .map(|s| Rating { rater: "r".into(), stars: s, comment: String::new(), at: 0 })
                            .collect(),
                        purchase_count: 0,
                        composed_of: vec![],
                    }
                })
        }

        // Independent restatement of the invariants, evaluated predicate by predicate.
        fn invariants_hold(d: &ModuleDescriptor) -> bool {
            let key_ok = !d.module_key.is_empty() && !d.module_key.contains(':');
            let behavior_ok = d.device_behavior.is_some() || d.network_behavior.is_some();
            let bound_ok = d.objective.bound.is_finite() && d.objective.bound >= 0.0;
            let stars_ok = d.ratings.iter().all(|r| r.stars >= 1 && r.stars <= 5);
            let ids_ok = d.parameterizations.keys().all(|id| {
                id.strip_prefix(&format!("{}:", d.module_key)).is_some_and(|label| !label.is_empty())
            });
            let to_ok = d.device_behavior.as_ref().map_or(true, |to| {
                to.module_key == d.module_key
                    && to.version == d.version
                    && to.checksum == TransferableObject::new(&to.module_key, to.version, &to.behavior_id, to.params.clone()).checksum
            });
            key_ok && !d.contributor.is_empty() && d.version >= 1 && behavior_ok && bound_ok && stars_ok && ids_ok && to_ok
        }

        proptest! {
            #[test]
            fn validation_agrees_with_predicates(d in arb_descriptor()) {
                prop_assert_eq!(validate_descriptor(&d).is_ok(), invariants_hold(&d));
            }

            #[test]
            fn any_token_bit_flip_is_rejected(idx in 0usize..64, bit in 0u8..8, fp in proptest::option::of("[a-z0-9]{1,8}")) {
                let e = issue_entitlement("app", "m1", fp.as_deref(), b"secret", 1).unwrap();
                let mut bytes = e.token.clone().into_bytes();
                bytes[idx] ^= 1 << bit;
                if let Ok(token) = String::from_utf8(bytes) {
                    let tampered = Entitlement { token, ..e.clone() };
                    prop_assert!(!verify_entitlement(&tampered, b"secret"));
                }
                // verification is pure
                prop_assert_eq!(verify_entitlement(&e, b"secret"), verify_entitlement(&e, b"secret"));
            }
        }
    }
}

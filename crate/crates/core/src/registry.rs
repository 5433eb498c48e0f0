//! The module registry: publication and review, ratings and ranking,
//! purchases, transferable-object distribution, lifecycle and composition.
//!
//! Every state-changing operation is expressed as a [`RegistryOp`]; applying
//! the same op sequence to an empty registry reproduces the same state, which
//! is what the append-only persistence log relies on.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behaviors::manifest::BehaviorManifest;
use crate::behaviors::COMPOSED;
use crate::domain::{
    canonical_json, issue_entitlement, validate_descriptor, verify_entitlement, Entitlement, Lifecycle, Metric,
    Millis, ModuleDescriptor, ObjectiveStats, ParameterSet, PerformanceObjective, Rating, SsoBehaviorRef, TransferableObject,
    ValidationResult, Violation,
};
use crate::wire::ToResponse;

pub const DAY_MS: Millis = 24 * 60 * 60 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankWeights {
    pub stars: f64,
    pub attainment: f64,
    pub popularity: f64,
}

impl Default for RankWeights {
    fn default() -> Self {
        Self { stars: 0.5, attainment: 0.3, popularity: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisposalPolicy {
    /// Disposal requires an attainment ratio strictly below this.
    pub max_attainment_ratio: f64,
    pub min_samples: u64,
    pub maintenance_grace_ms: Millis,
}

impl Default for DisposalPolicy {
    fn default() -> Self {
        Self { max_attainment_ratio: 0.5, min_samples: 20, maintenance_grace_ms: 90 * DAY_MS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryConfig {
    pub rank_weights: RankWeights,
    pub disposal: DisposalPolicy,
    pub secret: String,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self { rank_weights: RankWeights::default(), disposal: DisposalPolicy::default(), secret: "change-me".into() }
    }
}

/// A module's latest submission plus the last accepted version still being served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleEntry {
    pub head: ModuleDescriptor,
    #[serde(default)]
    pub served: Option<ModuleDescriptor>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryState {
    pub modules: BTreeMap<String, ModuleEntry>,
    pub entitlements: Vec<Entitlement>,
    pub attainment: BTreeMap<String, ObjectiveStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    RequestRevision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DisposalBlocker {
    /// Attainment ratio is at or above the disposal threshold.
    Efficient { ratio: f64 },
    InsufficientSamples { samples: u64 },
    /// The maintainer updated the module within the grace period.
    Maintained { idle_ms: Millis },
}

impl DisposalBlocker {
    pub fn reason(&self) -> &'static str {
        match self {
            DisposalBlocker::Efficient { .. } => "efficient",
            DisposalBlocker::InsufficientSamples { .. } => "insufficient_samples",
            DisposalBlocker::Maintained { .. } => "maintained",
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RegistryError {
    #[error("submitter {submitter:?} is not the named contributor {contributor:?}")]
    EponymityViolation { submitter: String, contributor: String },
    #[error("descriptor invalid: {}", .0.join("; "))]
    ValidationFailed(Vec<String>),
    #[error("module {0} is disposed")]
    Disposed(String),
    #[error("module {0} not found")]
    NotFound(String),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: Lifecycle, to: Lifecycle },
    #[error("rating stars must be in 1..=5")]
    InvalidRating,
    #[error("module is {0}, only published modules can be rated")]
    NotRateable(Lifecycle),
    #[error("module is {0}, only published modules can be purchased")]
    NotPurchasable(Lifecycle),
    #[error("entitlement does not verify for this module")]
    Unauthorized,
    #[error("disposal refused: {}", .0.reason())]
    DisposalRefused(DisposalBlocker),
    #[error("composition refused: {0}")]
    CompositionRefused(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("persistence: {0}")]
    Persistence(String),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::EponymityViolation { .. } => "EponymityViolation",
            RegistryError::ValidationFailed(_) => "ValidationFailed",
            RegistryError::Disposed(_) => "Disposed",
            RegistryError::NotFound(_) => "NotFound",
            RegistryError::IllegalTransition { .. } => "IllegalTransition",
            RegistryError::InvalidRating => "InvalidRating",
            RegistryError::NotRateable(_) => "NotRateable",
            RegistryError::NotPurchasable(_) => "NotPurchasable",
            RegistryError::Unauthorized => "Unauthorized",
            RegistryError::DisposalRefused(_) => "DisposalRefused",
            RegistryError::CompositionRefused(_) => "CompositionRefused",
            RegistryError::InvalidArgument(_) => "InvalidArgument",
            RegistryError::Persistence(_) => "Persistence",
        }
    }
}

/// Fields of a composed module supplied by its contributor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeRequest {
    pub module_key: String,
    pub name: String,
    pub contributor: String,
    pub objective: PerformanceObjective,
    /// Composed parameterizations. A parameter set may carry `parts`, a list of
    /// part module ids aligned with the part order.
    #[serde(default)]
    pub parameterizations: BTreeMap<String, ParameterSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RegistryOp {
    Publish { descriptor: ModuleDescriptor, submitter: String, now: Millis },
    Review { module_key: String, verdict: Verdict },
    Rate { module_key: String, rating: Rating },
    Purchase { app_id: String, module_key: String, device_fingerprint: Option<String>, now: Millis },
    Transition { module_key: String, target: Lifecycle, now: Millis },
    Compose { parts: Vec<String>, request: ComposeRequest, now: Millis },
    RecordSample { module_key: String, attained: bool },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankQuery {
    /// Case-insensitive substring over module key and name.
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub metric: Option<Metric>,
}

impl RankQuery {
    fn matches(&self, d: &ModuleDescriptor) -> bool {
        let text_ok = self.text.as_ref().map_or(true, |t| {
            let t = t.to_lowercase();
            d.module_key.to_lowercase().contains(&t) || d.name.to_lowercase().contains(&t)
        });
        text_ok && self.metric.map_or(true, |m| d.objective.metric == m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub module_key: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrowseEntry {
    pub module_key: String,
    pub name: String,
    pub version: u32,
    pub contributor: String,
    pub lifecycle: Lifecycle,
    pub objective: PerformanceObjective,
    pub module_ids: Vec<String>,
}

/// Inputs of the ranking score of one module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankInputs {
    pub mean_stars: f64,
    pub attainment_ratio: f64,
    pub purchase_count: u64,
}

pub fn rank_score(w: &RankWeights, inputs: RankInputs) -> f64 {
    let popularity = ((1.0 + inputs.purchase_count as f64).log10() / 3.0).min(1.0);
    w.stars * (inputs.mean_stars / 5.0) + w.attainment * inputs.attainment_ratio + w.popularity * popularity
}

#[derive(Debug)]
struct OpLog {
    path: PathBuf,
    file: File,
}

#[derive(Debug)]
pub struct Registry {
    state: RegistryState,
    config: RegistryConfig,
    manifest: BehaviorManifest,
    log: Option<OpLog>,
}

impl Registry {
    pub fn new(config: RegistryConfig, manifest: BehaviorManifest) -> Self {
        Self { state: RegistryState::default(), config, manifest, log: None }
    }

    /// Opens (or creates) a persistent registry, replaying the existing log.
    pub fn open(config: RegistryConfig, manifest: BehaviorManifest, path: &Path) -> Result<Self, RegistryError> {
        let mut reg = Self::new(config, manifest);
        if path.exists() {
            let f = File::open(path).map_err(|e| RegistryError::Persistence(e.to_string()))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| RegistryError::Persistence(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let op: RegistryOp = serde_json::from_str(&line)
                    .map_err(|e| RegistryError::Persistence(format!("log line {}: {e}", n + 1)))?;
                reg.apply(&op)
                    .map_err(|e| RegistryError::Persistence(format!("log line {} does not replay: {e}", n + 1)))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| RegistryError::Persistence(e.to_string()))?;
        reg.log = Some(OpLog { path: path.to_path_buf(), file });
        Ok(reg)
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(|l| l.path.as_path())
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn manifest(&self) -> &BehaviorManifest {
        &self.manifest
    }

    pub fn state(&self) -> &RegistryState {
        &self.state
    }

    /// Canonical serialization of the full registry state.
    pub fn state_json(&self) -> String {
        canonical_json(&self.state).expect("registry state serializes")
    }

    fn secret(&self) -> &[u8] {
        self.config.secret.as_bytes()
    }

    /// Applies and persists an operation.
    pub fn execute(&mut self, op: RegistryOp) -> Result<OpOutput, RegistryError> {
        let out = self.apply(&op)?;
        if let Some(log) = &mut self.log {
            let line = canonical_json(&op).map_err(|e| RegistryError::Persistence(e.to_string()))?;
            writeln!(log.file, "{line}").map_err(|e| RegistryError::Persistence(e.to_string()))?;
            log.file.flush().map_err(|e| RegistryError::Persistence(e.to_string()))?;
        }
        Ok(out)
    }

    fn apply(&mut self, op: &RegistryOp) -> Result<OpOutput, RegistryError> {
        match op {
            RegistryOp::Publish { descriptor, submitter, now } => {
                self.apply_publish(descriptor.clone(), submitter, *now).map(|_| OpOutput::None)
            }
            RegistryOp::Review { module_key, verdict } => self.apply_review(module_key, *verdict).map(|_| OpOutput::None),
            RegistryOp::Rate { module_key, rating } => self.apply_rate(module_key, rating).map(|_| OpOutput::None),
            RegistryOp::Purchase { app_id, module_key, device_fingerprint, now } => self
                .apply_purchase(app_id, module_key, device_fingerprint.as_deref(), *now)
                .map(OpOutput::Entitlement),
            RegistryOp::Transition { module_key, target, now } => {
                self.apply_transition(module_key, *target, *now).map(|_| OpOutput::None)
            }
            RegistryOp::Compose { parts, request, now } => {
                self.apply_compose(parts, request, *now).map(OpOutput::ModuleKey)
            }
            RegistryOp::RecordSample { module_key, attained } => {
                self.apply_sample(module_key, *attained).map(OpOutput::Stats)
            }
        }
    }

    // ---- public operations ----

    pub fn publish_module(
        &mut self,
        descriptor: ModuleDescriptor,
        submitter: &str,
        now: Millis,
    ) -> Result<(), RegistryError> {
        self.execute(RegistryOp::Publish { descriptor, submitter: submitter.to_string(), now }).map(|_| ())
    }

    pub fn review_module(&mut self, module_key: &str, verdict: Verdict) -> Result<(), RegistryError> {
        self.execute(RegistryOp::Review { module_key: module_key.to_string(), verdict }).map(|_| ())
    }

    pub fn rate_module(&mut self, module_key: &str, rating: Rating) -> Result<(), RegistryError> {
        self.execute(RegistryOp::Rate { module_key: module_key.to_string(), rating }).map(|_| ())
    }

    pub fn purchase(
        &mut self,
        app_id: &str,
        module_key: &str,
        device_fingerprint: Option<&str>,
        now: Millis,
    ) -> Result<Entitlement, RegistryError> {
        match self.execute(RegistryOp::Purchase {
            app_id: app_id.to_string(),
            module_key: module_key.to_string(),
            device_fingerprint: device_fingerprint.map(str::to_string),
            now,
        })? {
            OpOutput::Entitlement(e) => Ok(e),
            _ => unreachable!("purchase yields an entitlement"),
        }
    }

    pub fn transition_lifecycle(&mut self, module_key: &str, target: Lifecycle, now: Millis) -> Result<(), RegistryError> {
        self.execute(RegistryOp::Transition { module_key: module_key.to_string(), target, now }).map(|_| ())
    }

    pub fn compose_modules(
        &mut self,
        parts: &[String],
        request: ComposeRequest,
        now: Millis,
    ) -> Result<String, RegistryError> {
        match self.execute(RegistryOp::Compose { parts: parts.to_vec(), request, now })? {
            OpOutput::ModuleKey(k) => Ok(k),
            _ => unreachable!("compose yields a module key"),
        }
    }

    /// Records one monitored sample against the module's objective.
    pub fn record_sample(&mut self, module_key: &str, attained: bool) -> Result<ObjectiveStats, RegistryError> {
        match self.execute(RegistryOp::RecordSample { module_key: module_key.to_string(), attained })? {
            OpOutput::Stats(s) => Ok(s),
            _ => unreachable!("sample yields stats"),
        }
    }

    pub fn verify(&self, ent: &Entitlement) -> bool {
        verify_entitlement(ent, self.secret())
    }

    pub fn entry(&self, module_key: &str) -> Option<&ModuleEntry> {
        self.state.modules.get(module_key)
    }

    pub fn lifecycle(&self, module_key: &str) -> Option<Lifecycle> {
        self.entry(module_key).map(|e| e.head.lifecycle)
    }

    /// The accepted version sessions and TO downloads are served from, unless disposed.
    pub fn served_module(&self, module_key: &str) -> Option<&ModuleDescriptor> {
        let entry = self.entry(module_key)?;
        if entry.head.lifecycle == Lifecycle::Disposed {
            return None;
        }
        entry.served.as_ref()
    }

    pub fn stats(&self, module_key: &str) -> ObjectiveStats {
        self.state.attainment.get(module_key).copied().unwrap_or_default()
    }

    pub fn fetch_to(
        &self,
        ent: &Entitlement,
        module_key: &str,
        cached_version: Option<u32>,
    ) -> Result<ToResponse, RegistryError> {
        let entry = self.entry(module_key).ok_or_else(|| RegistryError::NotFound(module_key.to_string()))?;
        if !self.verify(ent) || ent.module_key != module_key {
            return Err(RegistryError::Unauthorized);
        }
        if entry.head.lifecycle == Lifecycle::Disposed {
            return Err(RegistryError::NotFound(module_key.to_string()));
        }
        let served = entry.served.as_ref().ok_or_else(|| RegistryError::NotFound(module_key.to_string()))?;
        if cached_version == Some(served.version) {
            return Ok(ToResponse::UpToDate { version: served.version });
        }
        Ok(match &served.device_behavior {
            Some(to) => ToResponse::NewTo { to: to.clone() },
            None => ToResponse::DefaultDevice { version: served.version },
        })
    }

    pub fn rank_modules(&self, query: &RankQuery) -> Vec<RankEntry> {
        let mut out: Vec<RankEntry> = self
            .state
            .modules
            .values()
            .map(|e| &e.head)
            .filter(|d| d.lifecycle == Lifecycle::Published && query.matches(d))
            .map(|d| RankEntry { module_key: d.module_key.clone(), score: self.score_of(d) })
            .collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.module_key.cmp(&b.module_key)));
        out
    }

    pub fn rank_inputs(&self, d: &ModuleDescriptor) -> RankInputs {
        RankInputs {
            mean_stars: d.mean_stars().unwrap_or(0.0),
            attainment_ratio: self.stats(&d.module_key).ratio(),
            purchase_count: d.purchase_count,
        }
    }

    fn score_of(&self, d: &ModuleDescriptor) -> f64 {
        rank_score(&self.config.rank_weights, self.rank_inputs(d))
    }

    /// Every module that is not disposed, in key order.
    pub fn browse(&self, query: &RankQuery) -> Vec<BrowseEntry> {
        self.state
            .modules
            .values()
            .map(|e| &e.head)
            .filter(|d| d.lifecycle != Lifecycle::Disposed && query.matches(d))
            .map(|d| BrowseEntry {
                module_key: d.module_key.clone(),
                name: d.name.clone(),
                version: d.version,
                contributor: d.contributor.clone(),
                lifecycle: d.lifecycle,
                objective: d.objective.clone(),
                module_ids: d.parameterizations.keys().cloned().collect(),
            })
            .collect()
    }

    // ---- op application ----

    fn check_descriptor(&self, desc: &ModuleDescriptor) -> Result<(), RegistryError> {
        let mut problems: Vec<String> = match validate_descriptor(desc) {
            ValidationResult::Ok => vec![],
            ValidationResult::Violations(v) => v.iter().map(Violation::to_string).collect(),
        };
        problems.extend(self.manifest.check_descriptor(desc));
        for id in desc.parameterizations.keys() {
            let clash = self
                .state
                .modules
                .iter()
                .any(|(k, e)| k != &desc.module_key && e.head.parameterizations.contains_key(id));
            if clash {
                problems.push(format!("module_id {id:?} already issued"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RegistryError::ValidationFailed(problems))
        }
    }

    fn apply_publish(&mut self, mut desc: ModuleDescriptor, submitter: &str, now: Millis) -> Result<(), RegistryError> {
        if submitter.is_empty() || submitter != desc.contributor {
            return Err(RegistryError::EponymityViolation {
                submitter: submitter.to_string(),
                contributor: desc.contributor.clone(),
            });
        }
        if let Some(entry) = self.state.modules.get(&desc.module_key) {
            let from = entry.head.lifecycle;
            if from == Lifecycle::Disposed {
                return Err(RegistryError::Disposed(desc.module_key));
            }
            if !from.can_transition_to(Lifecycle::UnderReview) {
                return Err(RegistryError::IllegalTransition { from, to: Lifecycle::UnderReview });
            }
            if entry.head.contributor != submitter {
                return Err(RegistryError::EponymityViolation {
                    submitter: submitter.to_string(),
                    contributor: entry.head.contributor.clone(),
                });
            }
            let version = desc.version.max(entry.head.version + 1);
            desc.version = version;
            if let Some(to) = &mut desc.device_behavior {
                to.module_key = desc.module_key.clone();
                to.version = version;
                to.seal();
            }
            desc.ratings = entry.head.ratings.clone();
            desc.purchase_count = entry.head.purchase_count;
        } else {
            desc.ratings.clear();
            desc.purchase_count = 0;
        }
        desc.lifecycle = Lifecycle::UnderReview;
        self.check_descriptor(&desc)?;
        let key = desc.module_key.clone();
        let served = self.state.modules.get(&key).and_then(|e| e.served.clone());
        self.state.modules.insert(key.clone(), ModuleEntry { head: desc, served });
        self.state.attainment.entry(key).or_default().last_maintainer_update = now;
        Ok(())
    }

    fn head_mut(&mut self, module_key: &str) -> Result<&mut ModuleEntry, RegistryError> {
        self.state.modules.get_mut(module_key).ok_or_else(|| RegistryError::NotFound(module_key.to_string()))
    }

    fn apply_review(&mut self, module_key: &str, verdict: Verdict) -> Result<(), RegistryError> {
        let entry = self.head_mut(module_key)?;
        let from = entry.head.lifecycle;
        let to = match verdict {
            Verdict::Accept => Lifecycle::Published,
            Verdict::RequestRevision => Lifecycle::RevisionRequested,
        };
        if from != Lifecycle::UnderReview {
            return Err(RegistryError::IllegalTransition { from, to });
        }
        entry.head.lifecycle = to;
        if to == Lifecycle::Published {
            entry.served = Some(entry.head.clone());
        }
        Ok(())
    }

    fn apply_rate(&mut self, module_key: &str, rating: &Rating) -> Result<(), RegistryError> {
        let entry = self.head_mut(module_key)?;
        if !rating.is_valid() {
            return Err(RegistryError::InvalidRating);
        }
        if entry.head.lifecycle != Lifecycle::Published {
            return Err(RegistryError::NotRateable(entry.head.lifecycle));
        }
        entry.head.ratings.push(rating.clone());
        if let Some(s) = &mut entry.served {
            s.ratings = entry.head.ratings.clone();
        }
        Ok(())
    }

    fn apply_purchase(
        &mut self,
        app_id: &str,
        module_key: &str,
        fingerprint: Option<&str>,
        now: Millis,
    ) -> Result<Entitlement, RegistryError> {
        let secret = self.config.secret.clone();
        let entry = self.head_mut(module_key)?;
        if entry.head.lifecycle != Lifecycle::Published {
            return Err(RegistryError::NotPurchasable(entry.head.lifecycle));
        }
        let ent = issue_entitlement(app_id, module_key, fingerprint, secret.as_bytes(), now)
            .map_err(|e| RegistryError::InvalidArgument(e.to_string()))?;
        entry.head.purchase_count += 1;
        if let Some(s) = &mut entry.served {
            s.purchase_count = entry.head.purchase_count;
        }
        self.state.entitlements.push(ent.clone());
        Ok(ent)
    }

    /// Checks the three disposal predicates in order: inefficiency, sample
    /// count, maintenance staleness.
    pub fn disposal_blocker(&self, module_key: &str, now: Millis) -> Option<DisposalBlocker> {
        let policy = &self.config.disposal;
        let stats = self.stats(module_key);
        let ratio = stats.ratio();
        if ratio >= policy.max_attainment_ratio {
            return Some(DisposalBlocker::Efficient { ratio });
        }
        if stats.samples < policy.min_samples {
            return Some(DisposalBlocker::InsufficientSamples { samples: stats.samples });
        }
        let idle = now.saturating_sub(stats.last_maintainer_update);
        if idle <= policy.maintenance_grace_ms {
            return Some(DisposalBlocker::Maintained { idle_ms: idle });
        }
        None
    }

    fn apply_transition(&mut self, module_key: &str, target: Lifecycle, now: Millis) -> Result<(), RegistryError> {
        let from = self.entry(module_key).ok_or_else(|| RegistryError::NotFound(module_key.to_string()))?.head.lifecycle;
        match target {
            Lifecycle::Deprecated if from == Lifecycle::Published => {}
            Lifecycle::Disposed if from == Lifecycle::Deprecated => {
                if let Some(blocker) = self.disposal_blocker(module_key, now) {
                    return Err(RegistryError::DisposalRefused(blocker));
                }
            }
            _ => return Err(RegistryError::IllegalTransition { from, to: target }),
        }
        let entry = self.head_mut(module_key)?;
        entry.head.lifecycle = target;
        if let Some(s) = &mut entry.served {
            s.lifecycle = target;
        }
        Ok(())
    }

    fn apply_compose(&mut self, parts: &[String], req: &ComposeRequest, now: Millis) -> Result<String, RegistryError> {
        if parts.is_empty() {
            return Err(RegistryError::CompositionRefused("no parts".into()));
        }
        for p in parts {
            match self.lifecycle(p) {
                Some(Lifecycle::Published) => {}
                Some(l) => return Err(RegistryError::CompositionRefused(format!("part {p} is {l}"))),
                None => return Err(RegistryError::CompositionRefused(format!("part {p} not found"))),
            }
        }
        // Data enters the first part, so the device side is the first part's.
        let device_behavior = parts
            .iter()
            .filter_map(|p| self.served_module(p).and_then(|d| d.device_behavior.as_ref()))
            .next()
            .map(|to| TransferableObject::new(req.module_key.as_str(), 1, to.behavior_id.as_str(), to.params.clone()));
        let mut parameterizations = req.parameterizations.clone();
        if parameterizations.is_empty() {
            parameterizations.insert(format!("{}:default", req.module_key), ParameterSet::new());
        }
        let desc = ModuleDescriptor {
            module_key: req.module_key.clone(),
            name: req.name.clone(),
            version: 1,
            contributor: req.contributor.clone(),
            objective: req.objective.clone(),
            device_behavior,
            network_behavior: Some(SsoBehaviorRef::new(COMPOSED)),
            parameterizations,
            lifecycle: Lifecycle::Submitted,
            ratings: vec![],
            purchase_count: 0,
            composed_of: parts.to_vec(),
        };
        let contributor = req.contributor.clone();
        self.apply_publish(desc, &contributor, now)?;
        Ok(req.module_key.clone())
    }

    fn apply_sample(&mut self, module_key: &str, attained: bool) -> Result<ObjectiveStats, RegistryError> {
        if !self.state.modules.contains_key(module_key) {
            return Err(RegistryError::NotFound(module_key.to_string()));
        }
        let stats = self.state.attainment.entry(module_key.to_string()).or_default();
        stats.record(attained);
        Ok(*stats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpOutput {
    None,
    Entitlement(Entitlement),
    ModuleKey(String),
    Stats(ObjectiveStats),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Metric;

    fn registry() -> Registry {
        Registry::new(RegistryConfig { secret: "s3cret".into(), ..Default::default() }, BehaviorManifest::builtin())
    }

    fn descriptor(key: &str) -> ModuleDescriptor {
        let mut p = BTreeMap::new();
        p.insert(format!("{key}:gold"), ParameterSet::new());
        ModuleDescriptor {
            module_key: key.into(),
            name: format!("{key} module"),
            version: 1,
            contributor: "alice".into(),
            objective: PerformanceObjective::at_most(Metric::EndToEndLatencyMs, 50.0),
            device_behavior: Some(TransferableObject::new(key, 1, "default_redirect", ParameterSet::new())),
            network_behavior: Some(SsoBehaviorRef::new("default_forward")),
            parameterizations: p,
            lifecycle: Lifecycle::Submitted,
            ratings: vec![],
            purchase_count: 0,
            composed_of: vec![],
        }
    }

    fn published(reg: &mut Registry, key: &str) {
        reg.publish_module(descriptor(key), "alice", 0).unwrap();
        reg.review_module(key, Verdict::Accept).unwrap();
    }

    fn rating(stars: u8) -> Rating {
        Rating { rater: "bob".into(), stars, comment: String::new(), at: 0 }
    }

    #[test]
    fn fresh_submission_is_under_review() {
        let mut reg = registry();
        reg.publish_module(descriptor("m1"), "alice", 0).unwrap();
        assert_eq!(reg.lifecycle("m1"), Some(Lifecycle::UnderReview));
    }

    #[test]
    fn anonymous_or_foreign_submitter_is_rejected() {
        let mut reg = registry();
        assert!(matches!(reg.publish_module(descriptor("m1"), "", 0), Err(RegistryError::EponymityViolation { .. })));
        assert!(matches!(
            reg.publish_module(descriptor("m1"), "mallory", 0),
            Err(RegistryError::EponymityViolation { .. })
        ));
    }

    #[test]
    fn invalid_descriptor_is_rejected() {
        let mut reg = registry();
        let mut d = descriptor("m1");
        d.device_behavior = None;
        d.network_behavior = None;
        match reg.publish_module(d, "alice", 0) {
            Err(RegistryError::ValidationFailed(v)) => assert!(v.contains(&"no behavior component".to_string())),
            other => panic!("unexpected {other:?}"),
        }
        let mut d = descriptor("m2");
        d.network_behavior = Some(SsoBehaviorRef::new("warp_drive"));
        assert!(matches!(reg.publish_module(d, "alice", 0), Err(RegistryError::ValidationFailed(_))));
    }

    #[test]
    fn resubmission_bumps_version_and_keeps_serving_previous() {
        let mut reg = registry();
        published(&mut reg, "m1");
        reg.publish_module(descriptor("m1"), "alice", 5).unwrap();
        let entry = reg.entry("m1").unwrap();
        assert_eq!(entry.head.version, 2);
        assert_eq!(entry.head.lifecycle, Lifecycle::UnderReview);
        assert_eq!(entry.head.device_behavior.as_ref().unwrap().version, 2);
        assert_eq!(reg.served_module("m1").unwrap().version, 1);
        reg.review_module("m1", Verdict::Accept).unwrap();
        assert_eq!(reg.served_module("m1").unwrap().version, 2);
    }

    #[test]
    fn resubmission_of_module_under_review_is_illegal() {
        let mut reg = registry();
        reg.publish_module(descriptor("m1"), "alice", 0).unwrap();
        assert!(matches!(
            reg.publish_module(descriptor("m1"), "alice", 0),
            Err(RegistryError::IllegalTransition { .. })
        ));
    }

    #[test]
    fn review_transitions() {
        let mut reg = registry();
        reg.publish_module(descriptor("m1"), "alice", 0).unwrap();
        reg.publish_module(descriptor("m2"), "alice", 0).unwrap();
        reg.review_module("m1", Verdict::Accept).unwrap();
        reg.review_module("m2", Verdict::RequestRevision).unwrap();
        assert_eq!(reg.lifecycle("m1"), Some(Lifecycle::Published));
        assert_eq!(reg.lifecycle("m2"), Some(Lifecycle::RevisionRequested));
        assert_eq!(
            reg.review_module("m1", Verdict::Accept),
            Err(RegistryError::IllegalTransition { from: Lifecycle::Published, to: Lifecycle::Published })
        );
    }

    #[test]
    fn rating_rules() {
        let mut reg = registry();
        reg.publish_module(descriptor("m1"), "alice", 0).unwrap();
        assert_eq!(reg.rate_module("m1", rating(4)), Err(RegistryError::NotRateable(Lifecycle::UnderReview)));
        reg.review_module("m1", Verdict::Accept).unwrap();
        assert_eq!(reg.rate_module("m1", rating(6)), Err(RegistryError::InvalidRating));
        reg.rate_module("m1", rating(4)).unwrap();
        reg.rate_module("m1", rating(5)).unwrap();
        assert_eq!(reg.entry("m1").unwrap().head.mean_stars(), Some(4.5));
        let expected = 0.5 * (4.5 / 5.0);
        assert_eq!(reg.rank_modules(&RankQuery::default())[0].score, expected);
    }

    #[test]
    fn rank_scores_by_hand() {
        let mut reg = registry();
        published(&mut reg, "m0");
        assert_eq!(reg.rank_modules(&RankQuery::default()), vec![RankEntry { module_key: "m0".into(), score: 0.0 }]);
        published(&mut reg, "m5");
        reg.rate_module("m5", rating(5)).unwrap();
        reg.record_sample("m5", true).unwrap();
        let r = reg.rank_modules(&RankQuery::default());
        assert_eq!(r[0].module_key, "m5");
        // 0.5·(5/5) + 0.3·1.0 + 0.2·0 = 0.8
        assert!((r[0].score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rank_ties_break_by_key_and_exclude_unpublished() {
        let mut reg = registry();
        published(&mut reg, "zz");
        published(&mut reg, "aa");
        reg.publish_module(descriptor("mm"), "alice", 0).unwrap();
        let keys: Vec<_> = reg.rank_modules(&RankQuery::default()).into_iter().map(|e| e.module_key).collect();
        assert_eq!(keys, vec!["aa", "zz"]);
        let q = RankQuery { text: Some("ZZ".into()), metric: None };
        assert_eq!(reg.rank_modules(&q).len(), 1);
    }

    #[test]
    fn purchase_rules() {
        let mut reg = registry();
        published(&mut reg, "m1");
        let e1 = reg.purchase("app", "m1", None, 1).unwrap();
        assert!(reg.verify(&e1));
        assert_eq!(reg.entry("m1").unwrap().head.purchase_count, 1);
        let e2 = reg.purchase("app", "m1", None, 2).unwrap();
        assert_ne!(e1, e2);
        assert_eq!(reg.entry("m1").unwrap().head.purchase_count, 2);
        reg.transition_lifecycle("m1", Lifecycle::Deprecated, 3).unwrap();
        assert_eq!(reg.purchase("app", "m1", None, 4), Err(RegistryError::NotPurchasable(Lifecycle::Deprecated)));
    }

    #[test]
    fn fetch_to_branches() {
        let mut reg = registry();
        published(&mut reg, "m1");
        let ent = reg.purchase("app", "m1", None, 1).unwrap();
        assert_eq!(reg.fetch_to(&ent, "m1", Some(1)).unwrap(), ToResponse::UpToDate { version: 1 });
        match reg.fetch_to(&ent, "m1", None).unwrap() {
            ToResponse::NewTo { to } => assert_eq!(to.version, 1),
            other => panic!("unexpected {other:?}"),
        }
        reg.publish_module(descriptor("m1"), "alice", 2).unwrap();
        reg.review_module("m1", Verdict::Accept).unwrap();
        assert!(matches!(reg.fetch_to(&ent, "m1", Some(1)).unwrap(), ToResponse::NewTo { to } if to.version == 2));
        let mut bad = ent.clone();
        bad.token.replace_range(0..1, if bad.token.starts_with('0') { "1" } else { "0" });
        assert_eq!(reg.fetch_to(&bad, "m1", None), Err(RegistryError::Unauthorized));
        assert!(matches!(reg.fetch_to(&ent, "nope", None), Err(RegistryError::NotFound(_))));
    }

    #[test]
    fn fetch_to_for_network_only_module_is_default_device() {
        let mut reg = registry();
        let mut d = descriptor("net");
        d.device_behavior = None;
        reg.publish_module(d, "alice", 0).unwrap();
        reg.review_module("net", Verdict::Accept).unwrap();
        let ent = reg.purchase("app", "net", None, 0).unwrap();
        assert_eq!(reg.fetch_to(&ent, "net", None).unwrap(), ToResponse::DefaultDevice { version: 1 });
    }

    fn record(reg: &mut Registry, key: &str, attained: u64, missed: u64) {
        for _ in 0..attained {
            reg.record_sample(key, true).unwrap();
        }
        for _ in 0..missed {
            reg.record_sample(key, false).unwrap();
        }
    }

    #[test]
    fn disposal_requires_all_three_predicates() {
        let mut reg = registry();
        published(&mut reg, "m1");
        reg.transition_lifecycle("m1", Lifecycle::Deprecated, 0).unwrap();
        // 0.3 over 25 samples, last maintained at 0, now 120 days later
        record(&mut reg, "m1", 75 / 10, 25 - 75 / 10);
        assert_eq!(reg.stats("m1").samples, 25);
        assert!((reg.stats("m1").ratio() - 0.28).abs() < 1e-12);
        reg.transition_lifecycle("m1", Lifecycle::Disposed, 120 * DAY_MS).unwrap();
        assert_eq!(reg.lifecycle("m1"), Some(Lifecycle::Disposed));
        assert!(reg.rank_modules(&RankQuery::default()).is_empty());
        assert!(reg.browse(&RankQuery::default()).is_empty());
        assert_eq!(reg.publish_module(descriptor("m1"), "alice", 0), Err(RegistryError::Disposed("m1".into())));
    }

    #[test]
    fn disposal_refusals_name_the_failed_predicate() {
        let mut reg = registry();
        published(&mut reg, "m1");
        reg.transition_lifecycle("m1", Lifecycle::Deprecated, 0).unwrap();
        record(&mut reg, "m1", 9, 1);
        match reg.transition_lifecycle("m1", Lifecycle::Disposed, 200 * DAY_MS) {
            Err(RegistryError::DisposalRefused(b)) => assert_eq!(b.reason(), "efficient"),
            other => panic!("unexpected {other:?}"),
        }
        published(&mut reg, "m2");
        reg.transition_lifecycle("m2", Lifecycle::Deprecated, 0).unwrap();
        record(&mut reg, "m2", 1, 9);
        let err = reg.transition_lifecycle("m2", Lifecycle::Disposed, 200 * DAY_MS).unwrap_err();
        assert!(matches!(err, RegistryError::DisposalRefused(DisposalBlocker::InsufficientSamples { samples: 10 })));
        record(&mut reg, "m2", 0, 20);
        let err = reg.transition_lifecycle("m2", Lifecycle::Disposed, 30 * DAY_MS).unwrap_err();
        assert!(matches!(err, RegistryError::DisposalRefused(DisposalBlocker::Maintained { .. })));
        published(&mut reg, "m3");
        assert!(matches!(
            reg.transition_lifecycle("m3", Lifecycle::Disposed, 0),
            Err(RegistryError::IllegalTransition { .. })
        ));
    }

    #[test]
    fn deprecated_module_can_be_resubmitted() {
        let mut reg = registry();
        published(&mut reg, "m1");
        reg.transition_lifecycle("m1", Lifecycle::Deprecated, 0).unwrap();
        reg.publish_module(descriptor("m1"), "alice", 10).unwrap();
        assert_eq!(reg.lifecycle("m1"), Some(Lifecycle::UnderReview));
        assert_eq!(reg.stats("m1").last_maintainer_update, 10);
    }

    fn compose_req(key: &str) -> ComposeRequest {
        ComposeRequest {
            module_key: key.into(),
            name: "combo".into(),
            contributor: "carol".into(),
            objective: PerformanceObjective::at_most(Metric::EndToEndLatencyMs, 40.0),
            parameterizations: BTreeMap::new(),
        }
    }

    #[test]
    fn composition_rules() {
        let mut reg = registry();
        published(&mut reg, "m1");
        published(&mut reg, "m2");
        reg.transition_lifecycle("m2", Lifecycle::Deprecated, 0).unwrap();
        assert!(matches!(reg.compose_modules(&[], compose_req("c0"), 0), Err(RegistryError::CompositionRefused(_))));
        assert!(matches!(
            reg.compose_modules(&["m1".into(), "m2".into()], compose_req("c1"), 0),
            Err(RegistryError::CompositionRefused(_))
        ));
        let key = reg.compose_modules(&["m1".into()], compose_req("c2"), 0).unwrap();
        let entry = reg.entry(&key).unwrap();
        assert_eq!(entry.head.composed_of, vec!["m1"]);
        assert_eq!(entry.head.lifecycle, Lifecycle::UnderReview);
        assert_eq!(entry.head.network_behavior.as_ref().unwrap().behavior_id, COMPOSED);
        assert!(entry.head.parameterizations.contains_key("c2:default"));
    }

    #[test]
    fn persistence_log_replays_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.log");
        let cfg = RegistryConfig { secret: "k".into(), ..Default::default() };
        let snapshot = {
            let mut reg = Registry::open(cfg.clone(), BehaviorManifest::builtin(), &path).unwrap();
            reg.publish_module(descriptor("m1"), "alice", 1).unwrap();
            reg.review_module("m1", Verdict::Accept).unwrap();
            reg.rate_module("m1", rating(3)).unwrap();
            reg.purchase("app", "m1", Some("fp"), 7).unwrap();
            reg.record_sample("m1", false).unwrap();
            // failed ops are not logged
            assert!(reg.rate_module("m1", rating(9)).is_err());
            reg.compose_modules(&["m1".into()], compose_req("c1"), 8).unwrap();
            reg.state_json()
        };
        let reopened = Registry::open(cfg, BehaviorManifest::builtin(), &path).unwrap();
        assert_eq!(reopened.state_json(), snapshot);
        let back: RegistryState = serde_json::from_str(&snapshot).unwrap();
        assert_eq!(canonical_json(&back).unwrap(), snapshot);
    }
}

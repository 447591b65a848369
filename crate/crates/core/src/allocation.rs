//! Routing of instances between the general model, artificial experts and the human.
//!
//! Stage one (the consultancy decision) lives in [`crate::ood`]. This module
//! covers stage two: independent claims by the included experts, or the
//! gating model as an alternative router.

use crate::datasets::LabeledInstance;
use crate::error::{Error, Result};
use crate::ids::{derive_seed, DomainId, ExpertId};
use crate::nn::{argmax, softmax_with_temperature, Activation, MlpClassifier, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Destination {
    GeneralModel,
    Expert(ExpertId),
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RouteReason {
    KnownByGeneral,
    UniqueClaim,
    NoClaim,
    MultiClaim,
    GateArgmax,
    GateLowConfidence,
    GateColdStart,
    /// Baselines only: the ground-truth domain decided the route.
    GroundTruth,
    /// Baselines only: full automation never consults anyone.
    NoReview,
}

impl RouteReason {
    pub const ALL: [RouteReason; 9] = [
        RouteReason::KnownByGeneral,
        RouteReason::UniqueClaim,
        RouteReason::NoClaim,
        RouteReason::MultiClaim,
        RouteReason::GateArgmax,
        RouteReason::GateLowConfidence,
        RouteReason::GateColdStart,
        RouteReason::GroundTruth,
        RouteReason::NoReview,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub destination: Destination,
    pub reason: RouteReason,
}

impl Route {
    pub fn human(reason: RouteReason) -> Self {
        Route {
            destination: Destination::Human,
            reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClaimResolution {
    UniqueClaim(ExpertId),
    NoClaim,
    MultiClaim(Vec<ExpertId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimResult {
    pub claims: Vec<(ExpertId, bool)>,
    pub resolution: ClaimResolution,
}

impl ClaimResult {
    /// Resolves a claim vector; the outcome depends on the claims only, never on their order.
    pub fn resolve(claims: Vec<(ExpertId, bool)>) -> Self {
        let claimed: Vec<ExpertId> = claims.iter().filter(|(_, c)| *c).map(|(id, _)| *id).collect();
        let resolution = match claimed.as_slice() {
            [] => ClaimResolution::NoClaim,
            [only] => ClaimResolution::UniqueClaim(*only),
            _ => ClaimResolution::MultiClaim(claimed),
        };
        ClaimResult { claims, resolution }
    }

    pub fn route(&self) -> Route {
        match &self.resolution {
            ClaimResolution::UniqueClaim(id) => Route {
                destination: Destination::Expert(*id),
                reason: RouteReason::UniqueClaim,
            },
            ClaimResolution::NoClaim => Route::human(RouteReason::NoClaim),
            ClaimResolution::MultiClaim(_) => Route::human(RouteReason::MultiClaim),
        }
    }
}

/// Anything that can independently claim an instance for classification.
pub trait Claimant {
    fn expert_id(&self) -> ExpertId;
    fn claims(&self, x: &[f64]) -> Result<bool>;
}

/// Stage two with OOD claims. An empty expert list yields `NoClaim`.
pub fn expert_selection<C: Claimant>(experts: &[&C], x: &[f64]) -> Result<(ClaimResult, Route)> {
    let claims = experts
        .iter()
        .map(|e| Ok((e.expert_id(), e.claims(x)?)))
        .collect::<Result<Vec<_>>>()?;
    let result = ClaimResult::resolve(claims);
    let route = result.route();
    Ok((result, route))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub hidden: Vec<usize>,
    pub tau: f64,
    pub min_per_domain: usize,
    pub train: TrainConfig,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            tau: 0.9,
            min_per_domain: 30,
            train: TrainConfig::default(),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Parameter(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.min_per_domain == 0 {
            return Err(Error::Parameter("min_per_domain must be >= 1".into()));
        }
        self.train.validate()
    }
}

/// Classifier over expert domains plus the expert owning each domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingModel {
    pub classifier: MlpClassifier,
    pub experts: BTreeMap<DomainId, ExpertId>,
}

/// Trains a fresh gate on human-reviewed instances of the expert domains.
///
/// Instances from domains that no expert owns are ignored. Every expert
/// domain needs `min_per_domain` instances, otherwise the gate is in cold start.
pub fn train_gating(
    pool: &[LabeledInstance],
    expert_domains: &BTreeMap<DomainId, ExpertId>,
    cfg: &GateConfig,
) -> Result<GatingModel> {
    cfg.validate()?;
    if expert_domains.is_empty() {
        return Err(Error::ColdStart("no expert domains to route to".into()));
    }
    let samples: Vec<&LabeledInstance> = pool
        .iter()
        .filter(|i| expert_domains.contains_key(&i.domain_id))
        .collect();
    for d in expert_domains.keys() {
        let n = samples.iter().filter(|i| i.domain_id == *d).count();
        if n < cfg.min_per_domain {
            return Err(Error::ColdStart(format!(
                "domain {d} has {n} reviewed instances, need {}",
                cfg.min_per_domain
            )));
        }
    }
    let input_dim = samples[0].features.len();
    let labels: Vec<u32> = expert_domains.keys().map(|d| d.0).collect();
    let mut dims = vec![input_dim];
    dims.extend(&cfg.hidden);
    dims.push(labels.len());
    let mut classifier = MlpClassifier::new(
        &dims,
        &labels,
        Activation::Relu,
        derive_seed(cfg.train.seed, &[samples.len() as u64]),
    )?;
    let inputs: Vec<&[f64]> = samples.iter().map(|i| i.features.as_slice()).collect();
    let targets: Vec<u32> = samples.iter().map(|i| i.domain_id.0).collect();
    classifier.fit(&inputs, &targets, &cfg.train)?;
    Ok(GatingModel {
        classifier,
        experts: expert_domains.clone(),
    })
}

/// Route from gate probabilities over `domains` (same order).
pub fn route_from_gate_probabilities(
    probabilities: &[f64],
    domains: &[DomainId],
    experts: &BTreeMap<DomainId, ExpertId>,
    tau: f64,
) -> Route {
    let best = argmax(probabilities);
    if probabilities[best] < tau {
        return Route::human(RouteReason::GateLowConfidence);
    }
    match experts.get(&domains[best]) {
        Some(id) => Route {
            destination: Destination::Expert(*id),
            reason: RouteReason::GateArgmax,
        },
        None => Route::human(RouteReason::GateColdStart),
    }
}

/// Stage two with the gating model. `None` means the gate is not trained yet.
pub fn gate_route(gate: Option<&GatingModel>, x: &[f64], tau: f64) -> Result<Route> {
    let Some(gate) = gate else {
        return Ok(Route::human(RouteReason::GateColdStart));
    };
    let probs = softmax_with_temperature(&gate.classifier.forward(x)?, 1.0)?;
    let domains: Vec<DomainId> = gate.classifier.class_labels().iter().map(|&d| DomainId(d)).collect();
    Ok(route_from_gate_probabilities(&probs, &domains, &gate.experts, tau))
}

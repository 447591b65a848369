//! The step-wise execution engine for the AIITL system and its baselines.
//!
//! Learning is batch-synchronous. Reviews gathered while routing step `s`
//! are learned from at the boundary before step `s + 1`; the outcome of that
//! boundary is reported in the record of step `s + 1`, and the boundary after
//! the last step is reported as the trace's final learning.

use crate::allocation::{expert_selection, gate_route, train_gating, Destination, GateConfig, GatingModel, Route, RouteReason};
use crate::config::{ExperimentConfig, Seeds};
use crate::datasets::{build_stream, Dataset, LabeledInstance, StepBatch, Stream};
use crate::error::{Error, Result};
use crate::experts::{
    stratified_split, ExpertPool, ExpertRecord, ExpertTraining, HumanOracle, InclusionPolicy, TrainOutcome,
};
use crate::ids::{derive_seed, ClassLabel, DomainId, ExpertId, InstanceId};
use crate::metrics::{MetricsSummary, UtilityWeights};
use crate::nn::{Activation, MlpClassifier};
use crate::ood::{consultancy_decision, Consultancy, Detector, DetectorConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// How detected-unknown instances are allocated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// Experts claim with ODIN detectors.
    Odin,
    /// Experts claim with Mahalanobis detectors.
    Maha,
    /// A gating model picks the expert.
    Gating,
    /// Experts claim with maximum-softmax detectors.
    Msp,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Odin, Mechanism::Maha, Mechanism::Gating, Mechanism::Msp];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Odin => "odin",
            Mechanism::Maha => "maha",
            Mechanism::Gating => "gating",
            Mechanism::Msp => "msp",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown mechanism '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// The general model classifies everything.
    FullAutomation,
    /// Detected-unknown instances go to the human; experts are never included.
    TraditionalHitl,
    /// Ground truth replaces the known/unknown detector.
    HitlPerfectAllocation,
    Aiitl(Mechanism),
}

impl BaselineKind {
    pub const BASELINES: [BaselineKind; 3] = [
        BaselineKind::FullAutomation,
        BaselineKind::TraditionalHitl,
        BaselineKind::HitlPerfectAllocation,
    ];

    /// Stable system identifier used in file names and tables.
    pub fn id(self) -> String {
        match self {
            BaselineKind::FullAutomation => "full-automation".into(),
            BaselineKind::TraditionalHitl => "traditional-hitl".into(),
            BaselineKind::HitlPerfectAllocation => "hitl-perfect".into(),
            BaselineKind::Aiitl(m) => format!("aiitl-{m}"),
        }
    }

    fn learns(self) -> bool {
        matches!(self, BaselineKind::TraditionalHitl | BaselineKind::Aiitl(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub mechanism: Mechanism,
    pub claim_detector: DetectorConfig,
    pub inclusion: InclusionPolicy,
    pub expert_training: ExpertTraining,
    pub gate: GateConfig,
    pub weights: UtilityWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub kind: BaselineKind,
    pub known_domain: DomainId,
    /// Trained once and never updated.
    pub general: MlpClassifier,
    pub general_detector: Detector,
    pub general_test_accuracy: f64,
    pub pool: ExpertPool,
    pub gate: Option<GatingModel>,
    /// Number of completed steps.
    pub step: usize,
    /// Every human-reviewed instance, in review order.
    pub reviewed: Vec<LabeledInstance>,
    pub oracle: HumanOracle,
    pub settings: Settings,
    gate_inputs: Option<(usize, BTreeMap<DomainId, ExpertId>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub instance: InstanceId,
    pub domain: DomainId,
    pub class_label: ClassLabel,
    pub route: Route,
    pub predicted: Option<ClassLabel>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteCount {
    pub destination: Destination,
    pub reason: RouteReason,
    pub count: usize,
    pub correct: usize,
}

/// Per-destination/reason totals, sorted by destination then reason.
pub fn tally_routes(outcomes: &[InstanceOutcome]) -> Vec<RouteCount> {
    let mut map: BTreeMap<(Destination, RouteReason), (usize, usize)> = BTreeMap::new();
    for o in outcomes {
        let e = map.entry((o.route.destination, o.route.reason)).or_default();
        e.0 += 1;
        e.1 += o.correct as usize;
    }
    map.into_iter()
        .map(|((destination, reason), (count, correct))| RouteCount {
            destination,
            reason,
            count,
            correct,
        })
        .collect()
}

fn summarize(outcomes: &[InstanceOutcome], weights: UtilityWeights) -> Result<MetricsSummary> {
    let correct = outcomes.iter().filter(|o| o.correct).count();
    let human = outcomes
        .iter()
        .filter(|o| o.route.destination == Destination::Human)
        .count();
    MetricsSummary::from_counts(outcomes.len(), correct, human, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub expert: ExpertId,
    /// `None` when the buffer was not ready for a split.
    pub test_accuracy: Option<f64>,
}

/// What happened at one batch boundary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningRecord {
    pub candidates: Vec<CandidateReport>,
    pub newly_included: Vec<ExpertId>,
    pub gate_retrained: bool,
    pub gate_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub batch_size: usize,
    /// Learning applied before this step's batch was routed.
    pub learning: LearningRecord,
    pub included_experts: Vec<ExpertId>,
    pub routes: Vec<RouteCount>,
    /// Metrics over this step's streamed batch.
    pub stream: MetricsSummary,
    /// Metrics of the same system state on the held-out final batch.
    pub held_out: MetricsSummary,
}

impl StepRecord {
    pub fn routed_to(&self, pred: impl Fn(Destination) -> bool) -> usize {
        self.routes.iter().filter(|r| pred(r.destination)).map(|r| r.count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub system: String,
    pub mechanism: Mechanism,
    pub config_hash: String,
    pub seeds: Seeds,
    pub general_test_accuracy: f64,
    pub steps: Vec<StepRecord>,
    pub final_learning: LearningRecord,
    pub final_routes: Vec<RouteCount>,
    pub final_metrics: MetricsSummary,
    /// Total reviews performed by the human oracle on the stream.
    pub human_reviews: usize,
    pub registry: Vec<ExpertRecord>,
}

impl RunTrace {
    /// Metrics pooled over every streamed instance.
    pub fn stream_metrics(&self) -> Result<MetricsSummary> {
        MetricsSummary::pooled(self.steps.iter().map(|s| &s.stream), self.final_metrics.weights)
    }

    /// Human effort pooled over the 1-based inclusive step range.
    pub fn human_effort_between(&self, first: usize, last: usize) -> Result<f64> {
        let parts = self.steps.iter().filter(|s| (first..=last).contains(&s.step));
        Ok(MetricsSummary::pooled(parts.map(|s| &s.stream), self.final_metrics.weights)?.rho)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Shared starting point for every system run on one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub stream: Stream,
    pub state: SystemState,
}

impl Prepared {
    /// The initial state of `kind`. AIITL systems use their own mechanism;
    /// baselines keep the configured one.
    pub fn state_for(&self, kind: BaselineKind) -> SystemState {
        let mut state = self.state.clone();
        state.kind = kind;
        state.settings.inclusion.enabled = !matches!(kind, BaselineKind::TraditionalHitl);
        if let BaselineKind::Aiitl(m) = kind {
            let mut cfg = self.config.clone();
            cfg.mechanism.kind = m;
            state.settings.mechanism = m;
            state.settings.claim_detector = cfg.claim_detector();
        }
        state
    }
}

/// Generates the data, builds the stream, and trains the general model and its detector.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let domains = config.build_domains()?;
    let stream = build_stream(&domains, &config.stream_schedule())?;
    let known = config.known_domain();
    let pool = stream
        .remainder
        .get(&known)
        .filter(|d| !d.is_empty())
        .ok_or_else(|| Error::Budget("no known-domain instances left to train the general model".into()))?;
    let v = config.training.general_validation_fraction;
    let t = config.training.general_test_fraction;
    let split = stratified_split(
        &pool.instances,
        v,
        (1.0 - v - t) / (1.0 - v),
        derive_seed(config.seeds.split, &[u64::MAX]),
    );
    if split.train.is_empty() || split.validation.is_empty() || split.test.is_empty() {
        return Err(Error::Budget("known-domain pool too small for a train/validation/test split".into()));
    }
    let labels: Vec<u32> = split.train.classes().iter().map(|c| c.0).collect();
    let mut dims = vec![split.train.feature_dim().expect("non-empty")];
    dims.extend(&config.training.general.hidden);
    dims.push(labels.len());
    let train_cfg = config.general_training();
    let mut general = MlpClassifier::new(&dims, &labels, Activation::Relu, train_cfg.seed)?;
    let inputs: Vec<&[f64]> = split.train.iter().map(|i| i.features.as_slice()).collect();
    let targets: Vec<u32> = split.train.iter().map(|i| i.class_label.0).collect();
    general.fit(&inputs, &targets, &train_cfg)?;
    let general_detector = Detector::fit(config.consultancy_detector(), &general, &split.train, &split.validation)?;
    let general_test_accuracy = general.accuracy(&split.test)?;
    let kind = BaselineKind::Aiitl(config.mechanism.kind);
    let state = SystemState {
        kind,
        known_domain: known,
        general,
        general_detector,
        general_test_accuracy,
        pool: ExpertPool::new(),
        gate: None,
        step: 0,
        reviewed: Vec::new(),
        oracle: HumanOracle::new(),
        settings: Settings {
            mechanism: config.mechanism.kind,
            claim_detector: config.claim_detector(),
            inclusion: config.inclusion_policy(),
            expert_training: config.expert_training(),
            gate: config.gate_config(),
            weights: config.weights(),
        },
        gate_inputs: None,
    };
    Ok(Prepared {
        config: config.clone(),
        config_hash: config.hash(),
        stream,
        state,
    })
}

/// The AIITL system for the configured mechanism, ready for step 1.
pub fn initialize(config: &ExperimentConfig) -> Result<SystemState> {
    Ok(prepare(config)?.state)
}

impl SystemState {
    /// Hex SHA-256 of the serialised state.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("state serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Decides where `instance` goes. The true domain is only consulted by
    /// the perfect-allocation baseline.
    pub fn allocate(&self, instance: &LabeledInstance) -> Result<Route> {
        let x = &instance.features;
        Ok(match self.kind {
            BaselineKind::FullAutomation => Route {
                destination: Destination::GeneralModel,
                reason: RouteReason::NoReview,
            },
            BaselineKind::HitlPerfectAllocation => {
                if instance.domain_id == self.known_domain {
                    Route {
                        destination: Destination::GeneralModel,
                        reason: RouteReason::GroundTruth,
                    }
                } else {
                    Route::human(RouteReason::GroundTruth)
                }
            }
            BaselineKind::TraditionalHitl | BaselineKind::Aiitl(_) => {
                match consultancy_decision(&self.general_detector, &self.general, x)? {
                    Consultancy::Known => Route {
                        destination: Destination::GeneralModel,
                        reason: RouteReason::KnownByGeneral,
                    },
                    Consultancy::Unknown => self.select_expert(x)?,
                }
            }
        })
    }

    /// With no included expert every mechanism sends the instance to the
    /// human for the same reason, so systems without experts route alike.
    fn select_expert(&self, x: &[f64]) -> Result<Route> {
        if self.pool.included().is_empty() {
            return Ok(Route::human(RouteReason::NoClaim));
        }
        if self.settings.mechanism == Mechanism::Gating {
            let route = gate_route(self.gate.as_ref(), x, self.settings.gate.tau)?;
            if let Destination::Expert(id) = route.destination {
                if !self.pool.get(id).is_some_and(|e| e.is_included()) {
                    return Ok(Route::human(RouteReason::GateColdStart));
                }
            }
            Ok(route)
        } else {
            let included = self.pool.included();
            Ok(expert_selection(&included, x)?.1)
        }
    }

    /// Routes and classifies one instance without changing the state.
    pub fn classify(&self, instance: &LabeledInstance) -> Result<InstanceOutcome> {
        let route = self.allocate(instance)?;
        let (predicted, correct) = match route.destination {
            Destination::GeneralModel => {
                let p = ClassLabel(self.general.predict(&instance.features)?.label);
                let ok = instance.domain_id == self.known_domain && p == instance.class_label;
                (Some(p), ok)
            }
            Destination::Expert(id) => {
                let expert = self
                    .pool
                    .get(id)
                    .ok_or_else(|| Error::State(format!("route to missing expert {id}")))?;
                let p = ClassLabel(expert.classifier()?.predict(&instance.features)?.label);
                let ok = expert.domains.contains(&instance.domain_id) && p == instance.class_label;
                (Some(p), ok)
            }
            Destination::Human => (None, true),
        };
        Ok(InstanceOutcome {
            instance: instance.id,
            domain: instance.domain_id,
            class_label: instance.class_label,
            route,
            predicted,
            correct,
        })
    }

    pub fn classify_all(&self, instances: &[LabeledInstance]) -> Result<Vec<InstanceOutcome>> {
        instances.iter().map(|i| self.classify(i)).collect()
    }

    /// Trains candidates, assesses inclusion, and retrains the gate, in that order.
    pub fn learn(&mut self) -> Result<LearningRecord> {
        if !self.kind.learns() {
            return Ok(LearningRecord::default());
        }
        let step = self.step;
        let s = &self.settings;
        let reports = self
            .pool
            .train_candidates(&s.inclusion, &s.expert_training, &s.claim_detector, step)?;
        let candidates = reports
            .into_iter()
            .filter_map(|(expert, outcome)| match outcome {
                TrainOutcome::Trained { test_accuracy } => Some(CandidateReport {
                    expert,
                    test_accuracy: Some(test_accuracy),
                }),
                TrainOutcome::NotReady(_) => Some(CandidateReport {
                    expert,
                    test_accuracy: None,
                }),
                TrainOutcome::Frozen => None,
            })
            .collect();
        let newly_included = self
            .pool
            .experts
            .iter()
            .filter(|e| e.included_at_step == Some(step))
            .map(|e| e.id)
            .collect();
        let mut gate_retrained = false;
        if self.settings.mechanism == Mechanism::Gating && !self.pool.included().is_empty() {
            let owners = self.pool.domain_owners();
            let inputs = (self.reviewed.len(), owners.clone());
            if self.gate_inputs.as_ref() != Some(&inputs) {
                self.gate = match train_gating(&self.reviewed, &owners, &self.settings.gate) {
                    Ok(gate) => Some(gate),
                    Err(Error::ColdStart(_)) => None,
                    Err(e) => return Err(e),
                };
                self.gate_inputs = Some(inputs);
                gate_retrained = true;
            }
        }
        Ok(LearningRecord {
            candidates,
            newly_included,
            gate_retrained,
            gate_active: self.gate.is_some(),
        })
    }

    fn included_ids(&self) -> Vec<ExpertId> {
        self.pool.included().iter().map(|e| e.id).collect()
    }
}

/// Processes one batch: boundary learning, routing, human review, ingestion.
///
/// `held_out` is classified with the same state that routes the batch and
/// is never learned from.
pub fn run_step(
    state: &mut SystemState,
    batch: &StepBatch,
    held_out: &Dataset,
) -> Result<(StepRecord, Vec<InstanceOutcome>)> {
    if batch.step != state.step + 1 {
        return Err(Error::Sequencing(format!(
            "expected step {}, got step {}",
            state.step + 1,
            batch.step
        )));
    }
    if batch.instances.is_empty() {
        return Err(Error::Data(format!("step {} has an empty batch", batch.step)));
    }
    let learning = if state.step > 0 {
        state.learn()?
    } else {
        LearningRecord::default()
    };
    let weights = state.settings.weights;
    let held_out_metrics = evaluate_final_batch(state, held_out)?;
    let outcomes = state.classify_all(&batch.instances)?;
    for (inst, outcome) in batch.instances.iter().zip(&outcomes) {
        if outcome.route.destination != Destination::Human {
            continue;
        }
        let (label, domain) = state.oracle.review(inst);
        state.reviewed.push(LabeledInstance {
            class_label: label,
            domain_id: domain,
            ..inst.clone()
        });
        if domain != state.known_domain && state.kind.learns() {
            state.pool.ingest_reviewed(inst, label, domain);
        }
    }
    state.step = batch.step;
    let record = StepRecord {
        step: batch.step,
        batch_size: batch.instances.len(),
        learning,
        included_experts: state.included_ids(),
        routes: tally_routes(&outcomes),
        stream: summarize(&outcomes, weights)?,
        held_out: held_out_metrics,
    };
    Ok((record, outcomes))
}

/// Routes and classifies the held-out batch with the frozen system.
pub fn evaluate_final_batch(state: &SystemState, batch: &Dataset) -> Result<MetricsSummary> {
    Ok(evaluate_with_routes(state, batch)?.0)
}

fn evaluate_with_routes(state: &SystemState, batch: &Dataset) -> Result<(MetricsSummary, Vec<RouteCount>)> {
    if batch.is_empty() {
        return Err(Error::Data("final test batch is empty".into()));
    }
    let outcomes = state.classify_all(&batch.instances)?;
    Ok((summarize(&outcomes, state.settings.weights)?, tally_routes(&outcomes)))
}

/// Runs one system over the prepared stream.
pub fn run_system(prepared: &Prepared, kind: BaselineKind) -> Result<RunTrace> {
    Ok(run_system_with_state(prepared, kind)?.0)
}

/// Like [`run_system`], also returning the end-of-run state.
pub fn run_system_with_state(prepared: &Prepared, kind: BaselineKind) -> Result<(RunTrace, SystemState)> {
    let mut state = prepared.state_for(kind);
    let held_out = &prepared.stream.final_batch;
    let mut steps = Vec::with_capacity(prepared.stream.batches.len());
    for batch in &prepared.stream.batches {
        steps.push(run_step(&mut state, batch, held_out)?.0);
    }
    let final_learning = state.learn()?;
    let (final_metrics, final_routes) = evaluate_with_routes(&state, held_out)?;
    let trace = RunTrace {
        system: kind.id(),
        mechanism: state.settings.mechanism,
        config_hash: prepared.config_hash.clone(),
        seeds: prepared.config.seeds,
        general_test_accuracy: state.general_test_accuracy,
        steps,
        final_learning,
        final_routes,
        final_metrics,
        human_reviews: state.oracle.review_count(),
        registry: state.pool.registry(&model_dir(&kind.id())),
    };
    Ok((trace, state))
}

/// Directory, relative to a run's output directory, holding a system's expert models.
pub fn model_dir(system: &str) -> String {
    format!("models/{system}")
}

/// The AIITL system with the configured mechanism.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunTrace> {
    run_system(&prepare(config)?, BaselineKind::Aiitl(config.mechanism.kind))
}

pub fn run_baseline(config: &ExperimentConfig, kind: BaselineKind) -> Result<RunTrace> {
    run_system(&prepare(config)?, kind)
}

/// The given systems on one shared stream, run on parallel threads. Results
/// come back in the order of `kinds`.
pub fn run_systems(prepared: &Prepared, kinds: &[BaselineKind]) -> Result<Vec<(RunTrace, SystemState)>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = kinds
            .iter()
            .map(|&k| s.spawn(move || run_system_with_state(prepared, k)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    })
}

/// AIITL for each of `mechanisms` followed by the three baselines.
pub fn system_kinds(mechanisms: &[Mechanism]) -> Vec<BaselineKind> {
    let mut kinds: Vec<BaselineKind> = mechanisms.iter().map(|&m| BaselineKind::Aiitl(m)).collect();
    kinds.extend(BaselineKind::BASELINES);
    kinds
}

/// AIITL with the configured mechanism and the three baselines on one stream.
pub fn run_all(config: &ExperimentConfig) -> Result<Vec<RunTrace>> {
    let prepared = prepare(config)?;
    let kinds = system_kinds(&[config.mechanism.kind]);
    Ok(run_systems(&prepared, &kinds)?.into_iter().map(|(t, _)| t).collect())
}

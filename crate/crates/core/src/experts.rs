//! The simulated human expert, the pool of artificial experts, and the
//! candidate training and inclusion protocol.

use crate::allocation::Claimant;
use crate::datasets::{Dataset, LabeledInstance};
use crate::error::{Error, Result};
use crate::ids::{derive_seed, ClassLabel, DomainId, ExpertId};
use crate::nn::{Activation, MlpClassifier, TrainConfig};
use crate::ood::{Detector, DetectorConfig, MIN_CALIBRATION_SCORES};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// A perfect human expert with access to the simulator's ground truth.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanOracle {
    review_count: usize,
}

impl HumanOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn review_count(&self) -> usize {
        self.review_count
    }

    pub fn review(&mut self, instance: &LabeledInstance) -> (ClassLabel, DomainId) {
        self.review_count += 1;
        (instance.class_label, instance.domain_id)
    }
}

pub fn human_review(oracle: &mut HumanOracle, instance: &LabeledInstance) -> (ClassLabel, DomainId) {
    oracle.review(instance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertStatus {
    Candidate,
    Included,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionPolicy {
    pub accuracy_threshold: f64,
    pub validation_fraction: f64,
    pub train_fraction: f64,
    pub min_buffer: usize,
    pub seed: u64,
    /// Set to false to train candidates without ever including them.
    #[serde(default = "default_enabled")]
    pub enabled: bool,
}

fn default_enabled() -> bool {
    true
}

impl Default for InclusionPolicy {
    fn default() -> Self {
        Self {
            accuracy_threshold: 0.95,
            validation_fraction: 0.10,
            train_fraction: 0.80,
            min_buffer: 50,
            seed: 0,
            enabled: true,
        }
    }
}

impl InclusionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.accuracy_threshold.is_finite() && self.accuracy_threshold > 0.0) {
            return Err(Error::Parameter(format!(
                "accuracy_threshold must be finite and > 0, got {}",
                self.accuracy_threshold
            )));
        }
        for (name, v) in [
            ("validation_fraction", self.validation_fraction),
            ("train_fraction", self.train_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Parameter(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.min_buffer < 4 {
            return Err(Error::Parameter("min_buffer must be >= 4".into()));
        }
        Ok(())
    }
}

/// Architecture and optimiser settings for expert classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertTraining {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ExpertTraining {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            train: TrainConfig::default(),
        }
    }
}

/// Stratified validation/train/test split of a buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferSplit {
    pub validation: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

/// Splits a buffer with the policy's fractions; see [`stratified_split`].
pub fn split_buffer(buffer: &[LabeledInstance], policy: &InclusionPolicy, seed: u64) -> BufferSplit {
    stratified_split(buffer, policy.validation_fraction, policy.train_fraction, seed)
}

/// Holds out `validation_fraction` of each class, then splits the rest
/// `train_fraction` / remainder into train and test.
pub fn stratified_split(
    buffer: &[LabeledInstance],
    validation_fraction: f64,
    train_fraction: f64,
    seed: u64,
) -> BufferSplit {
    let mut by_class: BTreeMap<ClassLabel, Vec<&LabeledInstance>> = BTreeMap::new();
    for inst in buffer {
        by_class.entry(inst.class_label).or_default().push(inst);
    }
    let (mut validation, mut train, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (class, mut members) in by_class {
        members.sort_by_key(|i| i.id);
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[class.0 as u64])));
        let n = members.len();
        let n_val = (validation_fraction * n as f64).round() as usize;
        let n_train = (train_fraction * (n - n_val) as f64).round() as usize;
        for (k, inst) in members.into_iter().enumerate() {
            let target = if k < n_val {
                &mut validation
            } else if k < n_val + n_train {
                &mut train
            } else {
                &mut test
            };
            target.push(inst.clone());
        }
    }
    BufferSplit {
        validation: Dataset::new(validation),
        train: Dataset::new(train),
        test: Dataset::new(test),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainOutcome {
    Trained { test_accuracy: f64 },
    /// The buffer cannot support a split yet; retried at the next step.
    NotReady(String),
    /// Included experts are frozen.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtificialExpert {
    pub id: ExpertId,
    pub domains: BTreeSet<DomainId>,
    pub classifier: Option<MlpClassifier>,
    pub detector: Option<Detector>,
    pub buffer: Vec<LabeledInstance>,
    pub status: ExpertStatus,
    pub last_test_accuracy: Option<f64>,
    pub times_trained: usize,
    pub included_at_step: Option<usize>,
}

impl ArtificialExpert {
    pub fn new(id: ExpertId, domain: DomainId) -> Self {
        Self {
            id,
            domains: BTreeSet::from([domain]),
            classifier: None,
            detector: None,
            buffer: Vec::new(),
            status: ExpertStatus::Candidate,
            last_test_accuracy: None,
            times_trained: 0,
            included_at_step: None,
        }
    }

    pub fn is_included(&self) -> bool {
        self.status == ExpertStatus::Included
    }

    /// Returns the trained classifier, or a state error for an untrained expert.
    pub fn classifier(&self) -> Result<&MlpClassifier> {
        self.classifier
            .as_ref()
            .ok_or_else(|| Error::State(format!("expert {} has not been trained", self.id)))
    }

    /// Retrains the classifier and refits the detector on a fresh split of the buffer.
    pub fn train_candidate(
        &mut self,
        policy: &InclusionPolicy,
        training: &ExpertTraining,
        detector: &DetectorConfig,
    ) -> Result<TrainOutcome> {
        if self.is_included() {
            return Ok(TrainOutcome::Frozen);
        }
        if self.buffer.len() < policy.min_buffer {
            return Ok(TrainOutcome::NotReady(format!(
                "buffer holds {} of {} instances",
                self.buffer.len(),
                policy.min_buffer
            )));
        }
        let seed = derive_seed(policy.seed, &[self.id.0 as u64, self.buffer.len() as u64]);
        let split = split_buffer(&self.buffer, policy, seed);
        if split.validation.len() < MIN_CALIBRATION_SCORES {
            return Ok(TrainOutcome::NotReady(format!(
                "validation split holds {} of {} scores",
                split.validation.len(),
                MIN_CALIBRATION_SCORES
            )));
        }
        if split.test.is_empty() {
            return Ok(TrainOutcome::NotReady("test split is empty".into()));
        }
        let counts = split.train.class_counts();
        if counts.values().any(|&c| c < 2) {
            return Ok(TrainOutcome::NotReady("a class has fewer than 2 training instances".into()));
        }
        let labels: Vec<u32> = counts.keys().map(|c| c.0).collect();
        if labels.len() < 2 {
            return Ok(TrainOutcome::NotReady("buffer holds a single class".into()));
        }
        let mut dims = vec![split.train.feature_dim().expect("non-empty")];
        dims.extend(&training.hidden);
        dims.push(labels.len());
        let mut cfg = training.train.clone();
        cfg.seed = derive_seed(cfg.seed, &[self.id.0 as u64, self.buffer.len() as u64]);
        let mut net = MlpClassifier::new(&dims, &labels, Activation::Relu, cfg.seed)?;
        let inputs: Vec<&[f64]> = split.train.iter().map(|i| i.features.as_slice()).collect();
        let targets: Vec<u32> = split.train.iter().map(|i| i.class_label.0).collect();
        net.fit(&inputs, &targets, &cfg)?;
        let fitted = Detector::fit(detector.clone(), &net, &split.train, &split.validation)?;
        let test_accuracy = net.accuracy(&split.test)?;
        self.classifier = Some(net);
        self.detector = Some(fitted);
        self.last_test_accuracy = Some(test_accuracy);
        self.times_trained += 1;
        Ok(TrainOutcome::Trained { test_accuracy })
    }

    /// Includes the expert iff its last test accuracy strictly exceeds the
    /// threshold. Inclusion is permanent.
    pub fn assess_inclusion(&mut self, policy: &InclusionPolicy, step: usize) -> Result<ExpertStatus> {
        let acc = self
            .last_test_accuracy
            .ok_or_else(|| Error::State(format!("expert {} has never been trained", self.id)))?;
        if !self.is_included() && policy.enabled && acc > policy.accuracy_threshold {
            self.status = ExpertStatus::Included;
            self.included_at_step = Some(step);
        }
        Ok(self.status)
    }
}

impl Claimant for ArtificialExpert {
    fn expert_id(&self) -> ExpertId {
        self.id
    }

    fn claims(&self, x: &[f64]) -> Result<bool> {
        let detector = self
            .detector
            .as_ref()
            .ok_or_else(|| Error::State(format!("expert {} has no detector", self.id)))?;
        detector.accepts(self.classifier()?, x)
    }
}

/// All artificial experts, in order of instantiation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertPool {
    pub experts: Vec<ArtificialExpert>,
}

impl ExpertPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn get(&self, id: ExpertId) -> Option<&ArtificialExpert> {
        self.experts.iter().find(|e| e.id == id)
    }

    pub fn owner_of(&self, domain: DomainId) -> Option<ExpertId> {
        self.experts
            .iter()
            .find(|e| e.domains.contains(&domain))
            .map(|e| e.id)
    }

    pub fn included(&self) -> Vec<&ArtificialExpert> {
        self.experts.iter().filter(|e| e.is_included()).collect()
    }

    /// Domain to owning expert, over every expert in the pool.
    pub fn domain_owners(&self) -> BTreeMap<DomainId, ExpertId> {
        self.experts
            .iter()
            .flat_map(|e| e.domains.iter().map(move |d| (*d, e.id)))
            .collect()
    }

    /// Appends a reviewed instance to the expert owning `domain`, instantiating
    /// a new candidate if none does. Returns the owning expert.
    pub fn ingest_reviewed(
        &mut self,
        instance: &LabeledInstance,
        label: ClassLabel,
        domain: DomainId,
    ) -> ExpertId {
        let id = match self.owner_of(domain) {
            Some(id) => id,
            None => {
                let id = ExpertId(self.experts.len() as u32);
                self.experts.push(ArtificialExpert::new(id, domain));
                id
            }
        };
        let expert = self
            .experts
            .iter_mut()
            .find(|e| e.id == id)
            .expect("owner exists");
        expert.buffer.push(LabeledInstance {
            class_label: label,
            domain_id: domain,
            ..instance.clone()
        });
        id
    }

    /// Trains every candidate, in parallel, then assesses inclusion.
    pub fn train_candidates(
        &mut self,
        policy: &InclusionPolicy,
        training: &ExpertTraining,
        detector: &DetectorConfig,
        step: usize,
    ) -> Result<Vec<(ExpertId, TrainOutcome)>> {
        let outcomes: Vec<Result<TrainOutcome>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .experts
                .iter_mut()
                .map(|e| s.spawn(move || e.train_candidate(policy, training, detector)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        let mut report = Vec::with_capacity(outcomes.len());
        for (expert, outcome) in self.experts.iter_mut().zip(outcomes) {
            let outcome = outcome?;
            if matches!(outcome, TrainOutcome::Trained { .. }) {
                expert.assess_inclusion(policy, step)?;
            }
            report.push((expert.id, outcome));
        }
        Ok(report)
    }

    /// Registry rows; model references are file names under `model_dir`.
    pub fn registry(&self, model_dir: &str) -> Vec<ExpertRecord> {
        self.experts
            .iter()
            .map(|e| ExpertRecord {
                id: e.id,
                domains: e.domains.iter().copied().collect(),
                status: e.status,
                buffer_size: e.buffer.len(),
                last_test_accuracy: e.last_test_accuracy,
                included_at_step: e.included_at_step,
                classifier_checkpoint: e.classifier.as_ref().map(|_| format!("{model_dir}/{}", classifier_file(e.id))),
                detector_dump: e.detector.as_ref().map(|_| format!("{model_dir}/{}", detector_file(e.id))),
            })
            .collect()
    }
}

pub fn classifier_file(id: ExpertId) -> String {
    format!("expert_{id}_classifier.json")
}

pub fn detector_file(id: ExpertId) -> String {
    format!("expert_{id}_detector.json")
}

/// One row of the expert registry dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub id: ExpertId,
    pub domains: Vec<DomainId>,
    pub status: ExpertStatus,
    pub buffer_size: usize,
    pub last_test_accuracy: Option<f64>,
    pub included_at_step: Option<usize>,
    pub classifier_checkpoint: Option<String>,
    pub detector_dump: Option<String>,
}

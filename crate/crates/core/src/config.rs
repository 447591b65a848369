//! Experiment configuration, read from TOML.

use crate::datasets::{
    build_topology, load_idx, random_means, Dataset, DomainGenerator, DomainSpec, StreamSchedule,
};
use crate::error::{Error, Result};
use crate::experts::{ExpertTraining, InclusionPolicy};
use crate::ids::{derive_seed, ClassLabel, DomainId};
use crate::metrics::UtilityWeights;
use crate::nn::TrainConfig;
use crate::ood::{DetectorConfig, DetectorKind};
use crate::allocation::GateConfig;
use crate::simulation::Mechanism;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domains: DomainsSection,
    pub schedule: ScheduleSection,
    pub mechanism: MechanismSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub inclusion: InclusionSection,
    #[serde(default)]
    pub utility: UtilitySection,
    pub seeds: Seeds,
    pub output: OutputSection,
    #[serde(default)]
    pub training: TrainingSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainsSection {
    pub known: u32,
    pub domain: Vec<DomainEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "lowercase", deny_unknown_fields)]
pub enum DomainEntry {
    /// Isotropic Gaussian classes. Means are given explicitly or drawn from
    /// the box `center ± spread` with the dataset seed.
    Gaussian {
        id: u32,
        feature_dim: usize,
        classes: usize,
        per_class: usize,
        sigma: f64,
        /// One value per dimension, or a single value used for every dimension.
        #[serde(default)]
        center: Vec<f64>,
        #[serde(default)]
        spread: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        means: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        standardize: bool,
    },
    /// Classes moved out of another domain into this one.
    Subset { id: u32, parent: u32, classes: Vec<u32> },
    /// IDX files; relative paths resolve against the config file's directory.
    Idx {
        id: u32,
        images: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<PathBuf>,
    },
}

impl DomainEntry {
    pub fn id(&self) -> u32 {
        match self {
            DomainEntry::Gaussian { id, .. } | DomainEntry::Subset { id, .. } | DomainEntry::Idx { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub domain: Vec<ScheduleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub id: u32,
    pub per_step: usize,
    #[serde(default = "one")]
    pub introduce_at: usize,
    pub final_test: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismSection {
    pub kind: Mechanism,
    #[serde(default = "default_gate_tau")]
    pub gate_tau: f64,
    #[serde(default = "default_gate_min")]
    pub gate_min_per_domain: usize,
}

fn default_gate_tau() -> f64 {
    0.9
}

fn default_gate_min() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    /// Detector for the known/unknown decision, shared by every mechanism.
    pub consultancy: DetectorKind,
    pub tpr_target: f64,
    pub odin_temperature: f64,
    pub odin_epsilon: f64,
    pub maha_epsilon: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            consultancy: DetectorKind::Mahalanobis,
            tpr_target: DetectorConfig::TPR_TARGET,
            odin_temperature: DetectorConfig::ODIN_TEMPERATURE,
            odin_epsilon: DetectorConfig::ODIN_EPSILON,
            maha_epsilon: DetectorConfig::MAHALANOBIS_EPSILON,
        }
    }
}

impl DetectorSection {
    pub fn config_for(&self, kind: DetectorKind) -> DetectorConfig {
        let mut cfg = DetectorConfig::new(kind);
        cfg.tpr_target = self.tpr_target;
        match kind {
            DetectorKind::Odin => {
                cfg.temperature = self.odin_temperature;
                cfg.epsilon = self.odin_epsilon;
            }
            DetectorKind::Mahalanobis => cfg.epsilon = self.maha_epsilon,
            DetectorKind::Msp => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InclusionSection {
    pub accuracy_threshold: f64,
    pub validation_fraction: f64,
    pub train_fraction: f64,
    pub min_buffer: usize,
}

impl Default for InclusionSection {
    fn default() -> Self {
        let p = InclusionPolicy::default();
        Self {
            accuracy_threshold: p.accuracy_threshold,
            validation_fraction: p.validation_fraction,
            train_fraction: p.train_fraction,
            min_buffer: p.min_buffer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilitySection {
    pub alpha: f64,
    pub beta: f64,
    pub sweep_betas: Vec<f64>,
}

pub const DEFAULT_SWEEP_BETAS: [f64; 4] = [0.5, 0.75, 1.0, 2.0];

impl Default for UtilitySection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            sweep_betas: DEFAULT_SWEEP_BETAS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub dataset: u64,
    pub training: u64,
    pub schedule: u64,
    pub split: u64,
}

impl Seeds {
    /// Replaces every named seed with one derived from `base`.
    pub fn overridden(base: u64) -> Self {
        Self {
            dataset: derive_seed(base, &[0]),
            training: derive_seed(base, &[1]),
            schedule: derive_seed(base, &[2]),
            split: derive_seed(base, &[3]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTraining {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

impl ModelTraining {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            shuffle: true,
            standardize: self.standardize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub general: ModelTraining,
    pub expert: ModelTraining,
    pub gate: ModelTraining,
    /// Fractions of the known domain's training pool held out for detector
    /// calibration and for reporting the general model's accuracy.
    pub general_validation_fraction: f64,
    pub general_test_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let model = |epochs| ModelTraining {
            hidden: vec![32],
            epochs,
            batch_size: 32,
            learning_rate: 0.05,
            standardize: true,
        };
        Self {
            general: model(40),
            expert: model(40),
            gate: model(20),
            general_validation_fraction: 0.2,
            general_test_fraction: 0.2,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; every error carries a line number where one can be found.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let msg = e.message().to_string();
            Error::Config(match line {
                Some(l) => format!("line {l}: {msg}"),
                None => msg,
            })
        })?;
        cfg.validate().map_err(|e| locate_error(text, e))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for d in &mut self.domains.domain {
            if let DomainEntry::Idx { images, labels, .. } = d {
                if images.is_relative() {
                    *images = base.join(&*images);
                }
                if let Some(l) = labels {
                    if l.is_relative() {
                        *l = base.join(&*l);
                    }
                }
            }
        }
    }

    pub fn with_seed_override(mut self, seed: u64) -> Self {
        self.seeds = Seeds::overridden(seed);
        self
    }

    /// Hex SHA-256 of the canonical JSON form.
    /// Hex SHA-256 of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.output.dir = PathBuf::new();
        let json = serde_json::to_string(&cfg).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn known_domain(&self) -> DomainId {
        DomainId(self.domains.known)
    }

    pub fn weights(&self) -> UtilityWeights {
        UtilityWeights {
            alpha: self.utility.alpha,
            beta: self.utility.beta,
        }
    }

    pub fn consultancy_detector(&self) -> DetectorConfig {
        self.detector.config_for(self.detector.consultancy)
    }

    /// Detector used by artificial experts to claim instances.
    pub fn claim_detector(&self) -> DetectorConfig {
        let kind = match self.mechanism.kind {
            Mechanism::Odin => DetectorKind::Odin,
            Mechanism::Maha => DetectorKind::Mahalanobis,
            Mechanism::Msp => DetectorKind::Msp,
            Mechanism::Gating => self.detector.consultancy,
        };
        self.detector.config_for(kind)
    }

    pub fn inclusion_policy(&self) -> InclusionPolicy {
        InclusionPolicy {
            accuracy_threshold: self.inclusion.accuracy_threshold,
            validation_fraction: self.inclusion.validation_fraction,
            train_fraction: self.inclusion.train_fraction,
            min_buffer: self.inclusion.min_buffer,
            seed: self.seeds.split,
            enabled: true,
        }
    }

    pub fn expert_training(&self) -> ExpertTraining {
        ExpertTraining {
            hidden: self.training.expert.hidden.clone(),
            train: self.training.expert.train_config(derive_seed(self.seeds.training, &[1])),
        }
    }

    pub fn general_training(&self) -> TrainConfig {
        self.training.general.train_config(derive_seed(self.seeds.training, &[0]))
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            hidden: self.training.gate.hidden.clone(),
            tau: self.mechanism.gate_tau,
            min_per_domain: self.mechanism.gate_min_per_domain,
            train: self.training.gate.train_config(derive_seed(self.seeds.training, &[2])),
        }
    }

    pub fn stream_schedule(&self) -> StreamSchedule {
        let mut per_step = BTreeMap::new();
        let mut introduction = BTreeMap::new();
        let mut final_test = BTreeMap::new();
        for e in &self.schedule.domain {
            per_step.insert(DomainId(e.id), e.per_step);
            introduction.insert(DomainId(e.id), e.introduce_at);
            final_test.insert(DomainId(e.id), e.final_test);
        }
        StreamSchedule {
            steps: self.schedule.steps,
            known_domain: self.known_domain(),
            per_step,
            introduction,
            final_test,
            seed: self.seeds.schedule,
        }
    }

    /// Specs for the generated domains, in declaration order. IDX domains are
    /// loaded separately by [`ExperimentConfig::build_domains`].
    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        self.domains
            .domain
            .iter()
            .filter_map(|d| match d {
                DomainEntry::Gaussian {
                    id,
                    feature_dim,
                    classes,
                    per_class,
                    sigma,
                    center,
                    spread,
                    means,
                    standardize,
                } => {
                    let means = means.clone().unwrap_or_else(|| {
                        let center: Vec<f64> = if center.len() == 1 {
                            vec![center[0]; *feature_dim]
                        } else if center.is_empty() {
                            vec![0.0; *feature_dim]
                        } else {
                            center.clone()
                        };
                        random_means(*classes, &center, *spread, derive_seed(self.seeds.dataset, &[*id as u64, 1]))
                    });
                    Some(DomainSpec {
                        domain_id: DomainId(*id),
                        generator: DomainGenerator::GaussianMixture {
                            feature_dim: *feature_dim,
                            means,
                            sigma: *sigma,
                            per_class: *per_class,
                            standardize: *standardize,
                        },
                    })
                }
                DomainEntry::Subset { id, parent, classes } => Some(DomainSpec {
                    domain_id: DomainId(*id),
                    generator: DomainGenerator::ClassSubset {
                        parent: DomainId(*parent),
                        classes: classes.iter().map(|&c| ClassLabel(c)).collect(),
                    },
                }),
                DomainEntry::Idx { .. } => None,
            })
            .collect()
    }

    /// Every domain's full instance pool, in declaration order.
    pub fn build_domains(&self) -> Result<Vec<Dataset>> {
        let specs = self.domain_specs();
        let mut generated: BTreeMap<u32, Dataset> = build_topology(&specs, self.seeds.dataset)?
            .into_iter()
            .zip(&specs)
            .map(|(d, s)| (s.domain_id.0, d))
            .collect();
        self.domains
            .domain
            .iter()
            .map(|d| match d {
                DomainEntry::Idx { id, images, labels } => load_idx(images, labels.as_deref(), DomainId(*id)),
                other => Ok(generated.remove(&other.id()).expect("generated above")),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: Vec<u32> = self.domains.domain.iter().map(|d| d.id()).collect();
        let unique: BTreeSet<u32> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(Error::Config("domain ids must be unique".into()));
        }
        if !unique.contains(&self.domains.known) {
            return Err(Error::Config(format!("known = {} names no declared domain", self.domains.known)));
        }
        if unique.len() < 2 {
            return Err(Error::Config("at least one unknown domain is required".into()));
        }
        for d in &self.domains.domain {
            match d {
                DomainEntry::Gaussian {
                    feature_dim,
                    classes,
                    center,
                    spread,
                    means,
                    ..
                } => {
                    if means.is_none() {
                        if !(center.is_empty() || center.len() == 1 || center.len() == *feature_dim) {
                            return Err(Error::Config(format!(
                                "center must have 1 or {feature_dim} values"
                            )));
                        }
                        if !(spread.is_finite() && *spread > 0.0) {
                            return Err(Error::Config("spread must be > 0 when means are drawn".into()));
                        }
                    } else if means.as_ref().map(|m| m.len()) != Some(*classes) {
                        return Err(Error::Config("means must list one vector per class".into()));
                    }
                }
                DomainEntry::Subset { parent, .. } => {
                    if !unique.contains(parent) {
                        return Err(Error::Config(format!("parent = {parent} names no declared domain")));
                    }
                }
                DomainEntry::Idx { .. } => {}
            }
        }
        for spec in self.domain_specs() {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let scheduled: BTreeSet<u32> = self.schedule.domain.iter().map(|e| e.id).collect();
        if scheduled.len() != self.schedule.domain.len() {
            return Err(Error::Config("each domain may be scheduled once".into()));
        }
        if let Some(bad) = scheduled.iter().find(|id| !unique.contains(id)) {
            return Err(Error::Config(format!("id = {bad} names no declared domain")));
        }
        self.stream_schedule()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.mechanism.gate_tau > 0.0 && self.mechanism.gate_tau <= 1.0) {
            return Err(Error::Config(format!(
                "gate_tau must lie in (0, 1], got {}",
                self.mechanism.gate_tau
            )));
        }
        if self.mechanism.gate_min_per_domain == 0 {
            return Err(Error::Config("gate_min_per_domain must be >= 1".into()));
        }
        for kind in [DetectorKind::Msp, DetectorKind::Odin, DetectorKind::Mahalanobis] {
            self.detector.config_for(kind).validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.inclusion_policy().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(b) = self.utility.sweep_betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::Config(format!("sweep_betas must be >= 0, got {b}")));
        }
        for (name, m) in [
            ("general", &self.training.general),
            ("expert", &self.training.expert),
            ("gate", &self.training.gate),
        ] {
            m.train_config(0)
                .validate()
                .map_err(|e| Error::Config(format!("training.{name}: {e}")))?;
            if m.hidden.is_empty() || m.hidden.contains(&0) {
                return Err(Error::Config(format!(
                    "training.{name}: hidden must list at least one non-zero layer width"
                )));
            }
        }
        let (v, t) = (
            self.training.general_validation_fraction,
            self.training.general_test_fraction,
        );
        if !(v > 0.0 && t > 0.0 && v + t < 1.0) {
            return Err(Error::Config(
                "general_validation_fraction and general_test_fraction must be > 0 and sum below 1".into(),
            ));
        }
        Ok(())
    }

    /// One known and three unknown ten-class Gaussian domains sharing one
    /// region of input space, streamed together over 30 steps.
    pub fn default_benchmark() -> Self {
        let gaussian = |id: u32| DomainEntry::Gaussian {
            id,
            feature_dim: 12,
            classes: 10,
            per_class: 300,
            sigma: 1.0,
            center: vec![0.0],
            spread: 4.0,
            means: None,
            standardize: false,
        };
        let entry = |id| ScheduleEntry {
            id,
            per_step: 50,
            introduce_at: 1,
            final_test: 100,
        };
        ExperimentConfig {
            domains: DomainsSection {
                known: 0,
                domain: (0..4).map(gaussian).collect(),
            },
            schedule: ScheduleSection {
                steps: 30,
                domain: (0..4).map(entry).collect(),
            },
            mechanism: MechanismSection {
                kind: Mechanism::Gating,
                gate_tau: default_gate_tau(),
                gate_min_per_domain: default_gate_min(),
            },
            detector: DetectorSection::default(),
            inclusion: InclusionSection::default(),
            utility: UtilitySection::default(),
            seeds: Seeds {
                dataset: 1,
                training: 2,
                schedule: 3,
                split: 4,
            },
            output: OutputSection {
                dir: PathBuf::from("runs/default"),
            },
            training: TrainingSection::default(),
        }
    }

    /// One ten-class domain; classes 6 to 9 are moved into an unknown domain
    /// and the known/unknown decision uses MSP.
    pub fn similar_classes() -> Self {
        let mut cfg = Self::default_benchmark();
        cfg.domains.domain = vec![
            DomainEntry::Gaussian {
                id: 0,
                feature_dim: 12,
                classes: 10,
                per_class: 500,
                sigma: 1.0,
                center: vec![0.0],
                spread: 4.0,
                means: None,
                standardize: false,
            },
            DomainEntry::Subset {
                id: 1,
                parent: 0,
                classes: vec![6, 7, 8, 9],
            },
        ];
        cfg.schedule.domain = vec![
            ScheduleEntry {
                id: 0,
                per_step: 40,
                introduce_at: 1,
                final_test: 100,
            },
            ScheduleEntry {
                id: 1,
                per_step: 40,
                introduce_at: 1,
                final_test: 100,
            },
        ];
        cfg.mechanism.kind = Mechanism::Msp;
        cfg.detector.consultancy = DetectorKind::Msp;
        cfg.output.dir = PathBuf::from("runs/similar_classes");
        cfg
    }
}

/// Prefixes a validation error with the line of the first key it names, if any.
fn locate_error(text: &str, err: Error) -> Error {
    let msg = match err {
        Error::Config(m) => m,
        other => other.to_string(),
    };
    let key = msg
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .find(|w| !w.is_empty() && find_key_line(text, w).is_some());
    match key.and_then(|k| find_key_line(text, k)) {
        Some(line) => Error::Config(format!("line {line}: {msg}")),
        None => Error::Config(msg),
    }
}

fn find_key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default_benchmark();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
        let sim = ExperimentConfig::similar_classes();
        assert_eq!(ExperimentConfig::from_toml(&sim.to_toml().unwrap()).unwrap(), sim);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let mut text = ExperimentConfig::default_benchmark().to_toml().unwrap();
        text = text.replacen("[seeds]\n", "[seeds]\nbogus = 3\n", 1);
        let line = text.lines().position(|l| l.starts_with("bogus")).unwrap() + 1;
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains(&format!("line {line}")), "{err}");
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn semantic_errors_carry_line() {
        let text = ExperimentConfig::default_benchmark()
            .to_toml()
            .unwrap()
            .replace("gate_tau = 0.9", "gate_tau = 1.5");
        let line = text.lines().position(|l| l.starts_with("gate_tau")).unwrap() + 1;
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains(&format!("line {line}")), "{err}");
    }

    #[test]
    fn bad_references_are_config_errors() {
        let mut cfg = ExperimentConfig::default_benchmark();
        cfg.domains.known = 9;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default_benchmark();
        cfg.utility.sweep_betas = vec![-1.0];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default_benchmark();
        cfg.schedule.domain[1].introduce_at = 31;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override_replaces_every_seed() {
        let a = ExperimentConfig::default_benchmark().with_seed_override(5);
        let b = ExperimentConfig::default_benchmark().with_seed_override(6);
        assert_ne!(a.seeds.dataset, b.seeds.dataset);
        assert_ne!(a.seeds.split, b.seeds.split);
        assert_ne!(a.hash(), b.hash());
        let mut c = ExperimentConfig::default_benchmark().with_seed_override(5);
        assert_eq!(a.hash(), c.hash());
        c.output.dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn domains_build_with_expected_sizes() {
        let cfg = ExperimentConfig::similar_classes();
        let domains = cfg.build_domains().unwrap();
        assert_eq!(domains[0].len(), 3000);
        assert_eq!(domains[1].len(), 2000);
        assert!(domains[1].iter().all(|i| i.domain_id == DomainId(1) && i.class_label.0 >= 6));
    }

    #[test]
    fn bundled_configs_match_builders() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        let default = ExperimentConfig::load(&dir.join("default.toml")).unwrap();
        assert_eq!(default, ExperimentConfig::default_benchmark());
        let similar = ExperimentConfig::load(&dir.join("similar_classes.toml")).unwrap();
        assert_eq!(similar, ExperimentConfig::similar_classes());
    }
}

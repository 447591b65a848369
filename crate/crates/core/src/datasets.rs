//! Synthetic multi-domain data, IDX loading, known/unknown splits and the
//! incremental stream that feeds the simulation.

use crate::error::{Error, Result};
use crate::ids::{derive_seed, ClassLabel, DomainId, InstanceId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

/// Generated features are clamped to this magnitude.
const FEATURE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: InstanceId,
    pub features: Vec<f64>,
    pub class_label: ClassLabel,
    pub domain_id: DomainId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<LabeledInstance>,
}

impl Dataset {
    pub fn new(instances: Vec<LabeledInstance>) -> Self {
        Self { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledInstance> {
        self.instances.iter()
    }

    pub fn classes(&self) -> BTreeSet<ClassLabel> {
        self.instances.iter().map(|i| i.class_label).collect()
    }

    pub fn domains(&self) -> BTreeSet<DomainId> {
        self.instances.iter().map(|i| i.domain_id).collect()
    }

    pub fn class_counts(&self) -> BTreeMap<ClassLabel, usize> {
        let mut counts = BTreeMap::new();
        for inst in &self.instances {
            *counts.entry(inst.class_label).or_insert(0) += 1;
        }
        counts
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.instances.first().map(|i| i.features.len())
    }

    pub fn filter(&self, keep: impl Fn(&LabeledInstance) -> bool) -> Dataset {
        Dataset::new(self.instances.iter().filter(|i| keep(i)).cloned().collect())
    }

    /// One line per instance: `domain_id,class_label,f_0,...,f_{d-1}`.
    ///
    /// Features use the shortest representation that parses back to the same
    /// `f64`, so a write/read cycle is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            write!(out, "{},{}", inst.domain_id.0, inst.class_label.0).unwrap();
            for v in &inst.features {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Self::to_text`] output. Instance ids are assigned in file order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut instances = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 1));
            let domain: u32 = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| bad("bad domain_id"))?;
            let class: u32 = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| bad("bad class_label"))?;
            let features = fields
                .map(|f| f.trim().parse::<f64>().map_err(|_| bad("bad feature value")))
                .collect::<Result<Vec<_>>>()?;
            if features.is_empty() || features.iter().any(|v| !v.is_finite()) {
                return Err(bad("features must be non-empty and finite"));
            }
            instances.push(LabeledInstance {
                id: InstanceId(instances.len() as u64),
                features,
                class_label: ClassLabel(class),
                domain_id: DomainId(domain),
            });
        }
        Ok(Dataset::new(instances))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DomainGenerator {
    /// Isotropic Gaussian per class; class `c` is labelled `c`.
    GaussianMixture {
        feature_dim: usize,
        means: Vec<Vec<f64>>,
        sigma: f64,
        per_class: usize,
        /// Standardise every dimension to zero mean and unit variance after sampling.
        standardize: bool,
    },
    /// The listed classes of another domain, relabelled with this domain's id.
    ClassSubset {
        parent: DomainId,
        classes: Vec<ClassLabel>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: DomainId,
    pub generator: DomainGenerator,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.generator {
            DomainGenerator::GaussianMixture {
                feature_dim,
                means,
                sigma,
                per_class,
                ..
            } => {
                if means.len() < 2 {
                    return Err(Error::Spec(format!(
                        "domain {} needs at least 2 classes",
                        self.domain_id
                    )));
                }
                if *feature_dim < 2 {
                    return Err(Error::Spec("feature_dim must be >= 2".into()));
                }
                if means.iter().any(|m| m.len() != *feature_dim) {
                    return Err(Error::Spec("mean vector has the wrong dimension".into()));
                }
                if means.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Spec("class means must be finite".into()));
                }
                for (i, a) in means.iter().enumerate() {
                    if means[i + 1..].iter().any(|b| a == b) {
                        return Err(Error::Spec("class means must be pairwise distinct".into()));
                    }
                }
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::Spec(format!("sigma must be > 0, got {sigma}")));
                }
                if *per_class == 0 {
                    return Err(Error::Spec("per-class budget must be >= 1".into()));
                }
                Ok(())
            }
            DomainGenerator::ClassSubset { parent, classes } => {
                if classes.is_empty() {
                    return Err(Error::Spec("class subset must list at least one class".into()));
                }
                if *parent == self.domain_id {
                    return Err(Error::Spec("a domain cannot be a subset of itself".into()));
                }
                Ok(())
            }
        }
    }
}

/// `k` class means drawn uniformly from the axis-aligned box `center ± spread`.
pub fn random_means(k: usize, center: &[f64], spread: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            center
                .iter()
                .map(|c| c + rng.random_range(-spread..=spread))
                .collect()
        })
        .collect()
}

pub fn generate_gaussian_domain(spec: &DomainSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let DomainGenerator::GaussianMixture {
        means,
        sigma,
        per_class,
        standardize,
        ..
    } = &spec.generator
    else {
        return Err(Error::Spec(format!(
            "domain {} is not a Gaussian mixture",
            spec.domain_id
        )));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[spec.domain_id.0 as u64]));
    let mut instances = Vec::with_capacity(means.len() * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..*per_class {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m + sigma * z).clamp(-FEATURE_LIMIT, FEATURE_LIMIT)
                })
                .collect();
            instances.push(LabeledInstance {
                id: InstanceId(((spec.domain_id.0 as u64) << 32) | instances.len() as u64),
                features,
                class_label: ClassLabel(c as u32),
                domain_id: spec.domain_id,
            });
        }
    }
    let mut data = Dataset::new(instances);
    if *standardize {
        standardize_in_place(&mut data);
    }
    Ok(data)
}

fn standardize_in_place(data: &mut Dataset) {
    let Some(d) = data.feature_dim() else { return };
    let n = data.len() as f64;
    for j in 0..d {
        let mean = data.instances.iter().map(|i| i.features[j]).sum::<f64>() / n;
        let var = data
            .instances
            .iter()
            .map(|i| (i.features[j] - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for inst in &mut data.instances {
            inst.features[j] = (inst.features[j] - mean) / std;
        }
    }
}

/// Partitions `data` by class; the unknown part is relabelled with `unknown_domain`.
pub fn split_known_unknown(
    data: &Dataset,
    known_classes: &[ClassLabel],
    unknown_domain: DomainId,
) -> Result<(Dataset, Dataset)> {
    let all = data.classes();
    let known: BTreeSet<ClassLabel> = known_classes.iter().copied().collect();
    if known.is_empty() {
        return Err(Error::Split("known class list is empty".into()));
    }
    if !known.is_subset(&all) || known.len() >= all.len() {
        return Err(Error::Split(
            "known classes must be a proper subset of the dataset's classes".into(),
        ));
    }
    if data.domains().contains(&unknown_domain) {
        return Err(Error::Split(format!(
            "domain {unknown_domain} already present in the dataset"
        )));
    }
    let (mut k, mut u) = (Vec::new(), Vec::new());
    for inst in &data.instances {
        if known.contains(&inst.class_label) {
            k.push(inst.clone());
        } else {
            let mut moved = inst.clone();
            moved.domain_id = unknown_domain;
            u.push(moved);
        }
    }
    Ok((Dataset::new(k), Dataset::new(u)))
}

/// Generates every domain of a topology, resolving class-subset domains
/// against their (already generated) parents. Output follows `specs` order.
pub fn build_topology(specs: &[DomainSpec], seed: u64) -> Result<Vec<Dataset>> {
    let mut ids = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !ids.insert(s.domain_id) {
            return Err(Error::Spec(format!("duplicate domain id {}", s.domain_id)));
        }
    }
    let mut generated: BTreeMap<DomainId, Dataset> = BTreeMap::new();
    for s in specs {
        if matches!(s.generator, DomainGenerator::GaussianMixture { .. }) {
            generated.insert(s.domain_id, generate_gaussian_domain(s, seed)?);
        }
    }
    for s in specs {
        if let DomainGenerator::ClassSubset { parent, classes } = &s.generator {
            let parent_data = generated
                .get(parent)
                .ok_or_else(|| Error::Spec(format!("parent domain {parent} is not a Gaussian domain")))?;
            let remaining: Vec<ClassLabel> = parent_data
                .classes()
                .into_iter()
                .filter(|c| !classes.contains(c))
                .collect();
            let (keep, moved) = split_known_unknown(parent_data, &remaining, s.domain_id)?;
            generated.insert(*parent, keep);
            generated.insert(s.domain_id, moved);
        }
    }
    Ok(specs
        .iter()
        .map(|s| generated.remove(&s.domain_id).expect("generated above"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSchedule {
    pub steps: usize,
    pub known_domain: DomainId,
    /// Instances drawn from each domain at every step from its introduction on.
    pub per_step: BTreeMap<DomainId, usize>,
    /// First step (1-based) at which a domain appears; absent means step 1.
    pub introduction: BTreeMap<DomainId, usize>,
    /// Instances per domain reserved for the held-out final test batch.
    pub final_test: BTreeMap<DomainId, usize>,
    pub seed: u64,
}

impl StreamSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Spec("schedule needs at least one step".into()));
        }
        for (d, &s) in &self.introduction {
            if !self.per_step.contains_key(d) {
                return Err(Error::Spec(format!("introduction given for unscheduled domain {d}")));
            }
            if s == 0 || s > self.steps {
                return Err(Error::Spec(format!(
                    "domain {d} introduced at step {s}, outside 1..={}",
                    self.steps
                )));
            }
        }
        match self.per_step.get(&self.known_domain) {
            Some(&n) if n > 0 => {}
            _ => {
                return Err(Error::Spec(
                    "the known domain must contribute instances to every step".into(),
                ))
            }
        }
        if self.introduction_step(self.known_domain) != 1 {
            return Err(Error::Spec("the known domain must be introduced at step 1".into()));
        }
        Ok(())
    }

    pub fn introduction_step(&self, domain: DomainId) -> usize {
        self.introduction.get(&domain).copied().unwrap_or(1)
    }

    /// Scheduled count of `domain` at 1-based `step`.
    pub fn count_at(&self, domain: DomainId, step: usize) -> usize {
        if step < self.introduction_step(domain) || step > self.steps {
            0
        } else {
            self.per_step.get(&domain).copied().unwrap_or(0)
        }
    }

    pub fn streamed_total(&self, domain: DomainId) -> usize {
        (1..=self.steps).map(|s| self.count_at(domain, s)).sum()
    }

    pub fn final_count(&self, domain: DomainId) -> usize {
        self.final_test.get(&domain).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBatch {
    /// 1-based.
    pub step: usize,
    pub instances: Vec<LabeledInstance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub batches: Vec<StepBatch>,
    pub final_batch: Dataset,
    /// Per-domain instances neither streamed nor reserved (e.g. initial training data).
    pub remainder: BTreeMap<DomainId, Dataset>,
}

pub fn build_stream(domains: &[Dataset], schedule: &StreamSchedule) -> Result<Stream> {
    schedule.validate()?;
    let mut pools: BTreeMap<DomainId, Vec<LabeledInstance>> = BTreeMap::new();
    for data in domains {
        for inst in &data.instances {
            pools.entry(inst.domain_id).or_default().push(inst.clone());
        }
    }
    let mut scheduled: BTreeSet<DomainId> = schedule.per_step.keys().copied().collect();
    scheduled.extend(schedule.final_test.keys().copied());
    for d in &scheduled {
        let available = pools.get(d).map_or(0, Vec::len);
        let needed = schedule.streamed_total(*d) + schedule.final_count(*d);
        if available < needed {
            return Err(Error::Budget(format!(
                "domain {d} has {available} instances but the schedule needs {needed}"
            )));
        }
    }

    let mut step_parts: Vec<Vec<LabeledInstance>> = vec![Vec::new(); schedule.steps];
    let mut final_part = Vec::new();
    let mut remainder = BTreeMap::new();
    for (domain, mut pool) in pools {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, &[0, domain.0 as u64]));
        pool.shuffle(&mut rng);
        let mut rest = pool.into_iter();
        final_part.extend(rest.by_ref().take(schedule.final_count(domain)));
        for (s, part) in step_parts.iter_mut().enumerate() {
            part.extend(rest.by_ref().take(schedule.count_at(domain, s + 1)));
        }
        remainder.insert(domain, Dataset::new(rest.collect()));
    }

    let batches = step_parts
        .into_iter()
        .enumerate()
        .map(|(s, mut instances)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, &[1, (s + 1) as u64]));
            instances.shuffle(&mut rng);
            StepBatch {
                step: s + 1,
                instances,
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, &[2]));
    final_part.shuffle(&mut rng);
    Ok(Stream {
        batches,
        final_batch: Dataset::new(final_part),
        remainder,
    })
}

/// Checks that no instance id occurs twice across the given collections.
pub fn pairwise_disjoint<'a>(sets: impl IntoIterator<Item = &'a [LabeledInstance]>) -> bool {
    let mut seen = HashSet::new();
    sets.into_iter().flatten().all(|i| seen.insert(i.id))
}

/// A parsed IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Format("IDX file shorter than its magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("bad IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!(
            "unsupported IDX element type 0x{:02x} (only unsigned bytes)",
            bytes[2]
        )));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::Format("IDX array with zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let body = &bytes[header..];
    if body.len() != total {
        return Err(Error::Format(format!(
            "IDX body has {} bytes, header declares {total}",
            body.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

/// Loads an IDX image file (first dimension = image count) with an optional
/// IDX label file; pixels are scaled to [0, 1] and images flattened.
pub fn load_idx(images: &Path, labels: Option<&Path>, domain: DomainId) -> Result<Dataset> {
    let bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let arr = parse_idx(&bytes)?;
    let n = arr.dims[0];
    let dim: usize = arr.dims[1..].iter().product();
    if dim == 0 {
        return Err(Error::Format("IDX images have zero size".into()));
    }
    let label_values = match labels {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let l = parse_idx(&bytes)?;
            if l.dims.len() != 1 || l.dims[0] != n {
                return Err(Error::Format(format!(
                    "label file declares {:?}, expected [{n}]",
                    l.dims
                )));
            }
            l.data
        }
        None => vec![0; n],
    };
    let instances = arr
        .data
        .chunks_exact(dim)
        .zip(label_values)
        .enumerate()
        .map(|(i, (px, label))| LabeledInstance {
            id: InstanceId(((domain.0 as u64) << 32) | i as u64),
            features: px.iter().map(|&p| p as f64 / 255.0).collect(),
            class_label: ClassLabel(label as u32),
            domain_id: domain,
        })
        .collect();
    Ok(Dataset::new(instances))
}

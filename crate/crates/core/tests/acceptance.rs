//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use aiitl::allocation::{expert_selection, Claimant, Destination, Route, RouteReason};
use aiitl::config::ExperimentConfig;
use aiitl::datasets::{Dataset, LabeledInstance};
use aiitl::ids::{ClassLabel, DomainId, ExpertId, InstanceId};
use aiitl::metrics::{beta_sweep, crossover_beta, round2, utility, UtilityWeights};
use aiitl::nn::{Activation, LogMaxSoftmax, LogitComponent, LogitObjective, MlpClassifier};
use aiitl::ood::{
    calibrate_threshold, fit_mahalanobis, mahalanobis_score, msp_score, odin_score, Detector, DetectorConfig,
    DetectorKind,
};
use aiitl::simulation::{
    prepare, run_system, run_systems, system_kinds, tally_routes, BaselineKind, InstanceOutcome, Mechanism, RunTrace,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const HITL: BaselineKind = BaselineKind::TraditionalHitl;
const PERFECT: BaselineKind = BaselineKind::HitlPerfectAllocation;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Final-batch utility at the configured weights.
fn final_u(t: &RunTrace) -> f64 {
    t.final_metrics.utility
}

struct BenchmarkRuns {
    /// Per seed, every AIITL mechanism plus the three baselines.
    runs: Vec<BTreeMap<String, RunTrace>>,
    sequential_time: Duration,
}

fn into_map(traces: Vec<RunTrace>) -> BTreeMap<String, RunTrace> {
    traces.into_iter().map(|t| (t.system.clone(), t)).collect()
}

/// The default benchmark over all seeds. The first seed runs single-threaded
/// and is timed; the rest run in parallel.
fn benchmark() -> &'static BenchmarkRuns {
    static RUNS: OnceLock<BenchmarkRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let kinds = system_kinds(&Mechanism::ALL);
        let base = ExperimentConfig::default_benchmark();
        let start = Instant::now();
        let prepared = prepare(&base.clone().with_seed_override(SEEDS[0])).unwrap();
        let first: Vec<RunTrace> = kinds.iter().map(|&k| run_system(&prepared, k).unwrap()).collect();
        let sequential_time = start.elapsed();
        let rest: Vec<Vec<RunTrace>> = std::thread::scope(|s| {
            let handles: Vec<_> = SEEDS[1..]
                .iter()
                .map(|&seed| {
                    let (base, kinds) = (&base, &kinds);
                    s.spawn(move || {
                        let prepared = prepare(&base.clone().with_seed_override(seed)).unwrap();
                        run_systems(&prepared, kinds)
                            .unwrap()
                            .into_iter()
                            .map(|(t, _)| t)
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut runs = vec![into_map(first)];
        runs.extend(rest.into_iter().map(into_map));
        BenchmarkRuns { runs, sequential_time }
    })
}

fn aiitl_id(m: Mechanism) -> String {
    BaselineKind::Aiitl(m).id()
}

fn criterion_1() -> Outcome {
    let w = UtilityWeights { alpha: 1.0, beta: 0.5 };
    let rows = [(0.75, 0.73, 0.39), (0.92, 0.00, 0.92), (0.92, 0.39, 0.73), (0.74, 0.27, 0.61)];
    let mut detail = Vec::new();
    let mut ok = true;
    for (phi, rho, reported) in rows {
        let u = utility(phi, rho, &w).unwrap();
        // the reported values are rounded to two decimals, so a raw value can sit exactly on the edge
        ok &= (u - reported).abs() <= 0.005 + 1e-12 && round2(u) == reported;
        detail.push(format!("U({phi},{rho})={u:.4}->{:.2}", round2(u)));
    }
    check(ok, detail.join(" "))
}

fn criterion_2() -> Outcome {
    let hitl = (0.75, 0.73);
    let variants = [("odin", (0.74, 0.27)), ("gating", (0.92, 0.00)), ("maha", (0.92, 0.39))];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, point) in variants {
        let b = crossover_beta(hitl, point).unwrap();
        ok &= b < 0.1;
        if name == "odin" {
            ok &= (b - 0.01 / 0.46).abs() < 1e-12 && (b - 0.022).abs() < 0.0005;
            let systems = vec![("hitl".to_string(), hitl.0, hitl.1), ("odin".to_string(), point.0, point.1)];
            let sweep = beta_sweep(&systems, &[b - 1e-6, b + 1e-6]).unwrap();
            ok &= sweep.ranking(b - 1e-6) == ["hitl", "odin"] && sweep.ranking(b + 1e-6) == ["odin", "hitl"];
        } else {
            ok &= b <= 0.0;
        }
        detail.push(format!("{name} beta*={b:.4}"));
    }
    check(ok, detail.join(" "))
}

fn criterion_3() -> Outcome {
    let bench = benchmark();
    let mut ok = bench.sequential_time <= Duration::from_secs(300);
    let mut detail = vec![format!(
        "single-threaded seed ({} systems) {:.1}s",
        bench.runs[0].len(),
        bench.sequential_time.as_secs_f64()
    )];
    for m in Mechanism::ALL {
        let id = aiitl_id(m);
        let beats_hitl = bench
            .runs
            .iter()
            .filter(|r| final_u(&r[&id]) > final_u(&r[&HITL.id()]))
            .count();
        ok &= beats_hitl >= 4;
        let mut line = format!("{m}>hitl {beats_hitl}/5");
        if matches!(m, Mechanism::Gating | Mechanism::Maha) {
            let beats_perfect = bench
                .runs
                .iter()
                .filter(|r| final_u(&r[&id]) > final_u(&r[&PERFECT.id()]))
                .count();
            ok &= beats_perfect >= 4;
            line.push_str(&format!(" {m}>perfect {beats_perfect}/5"));
        }
        detail.push(line);
    }
    let us: Vec<String> = bench
        .runs
        .iter()
        .map(|r| {
            r.values()
                .map(|t| format!("{}={:.3}", t.system, final_u(t)))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    detail.push(format!("[{}]", us.join("; ")));
    check(ok, detail.join(", "))
}

fn criterion_4() -> Outcome {
    let mut configs: Vec<(String, ExperimentConfig)> = Vec::new();
    for seed in [1, 17, 99] {
        configs.push((format!("similar/{seed}"), ExperimentConfig::similar_classes().with_seed_override(seed)));
    }
    let mut varied = ExperimentConfig::default_benchmark().with_seed_override(42);
    varied.schedule.steps = 3;
    varied.schedule.domain[2].introduce_at = 2;
    varied.schedule.domain[1].per_step = 20;
    varied.inclusion.accuracy_threshold = 0.5;
    configs.push(("varied/42".into(), varied));
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for run in &benchmark().runs {
        let hitl = &run[&HITL.id()].steps[0];
        for m in Mechanism::ALL {
            compared += 1;
            if &run[&aiitl_id(m)].steps[0] != hitl {
                mismatches.push(format!("default {m}"));
            }
        }
    }
    for (name, mut cfg) in configs {
        cfg.schedule.steps = cfg.schedule.steps.min(3);
        let prepared = prepare(&cfg).unwrap();
        let hitl = run_system(&prepared, HITL).unwrap();
        for m in Mechanism::ALL {
            compared += 1;
            let aiitl = run_system(&prepared, BaselineKind::Aiitl(m)).unwrap();
            if aiitl.steps[0] != hitl.steps[0] {
                mismatches.push(format!("{name} {m}"));
            }
        }
    }
    check(
        mismatches.is_empty(),
        format!("{compared} step-1 record pairs compared, mismatches: {mismatches:?}"),
    )
}

fn criterion_5() -> Outcome {
    let id = aiitl_id(Mechanism::Gating);
    let mut hits = 0;
    let mut drops = Vec::new();
    for run in &benchmark().runs {
        let t = &run[&id];
        let n = t.steps.len();
        let early = t.human_effort_between(1, 5).unwrap();
        let late = t.human_effort_between(n - 4, n).unwrap();
        if early - late >= 0.30 {
            hits += 1;
        }
        drops.push(format!("{early:.2}->{late:.2}"));
    }
    check(hits >= 4, format!("gating rho first5->last5 {} ({hits}/5)", drops.join(" ")))
}

/// Pre-activations of every hidden unit.
fn hidden_pre_activations(net: &MlpClassifier, x: &[f64]) -> Vec<f64> {
    let dims = net.layer_dims();
    let mut current = x.to_vec();
    let mut out = Vec::new();
    for l in 0..dims.len() - 2 {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let pre: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &net.weights()[l][o * n_in..(o + 1) * n_in];
                net.biases()[l][o] + row.iter().zip(&current).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        current = pre.iter().map(|v| v.max(0.0)).collect();
        out.extend(pre);
    }
    out
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-7;
    let mut worst: f64 = 0.0;
    let mut redraws = 0;
    for n in 0..100u64 {
        let input = rng.random_range(2..=6);
        let mut dims = vec![input];
        for _ in 0..rng.random_range(1..=3) {
            dims.push(rng.random_range(2..=8));
        }
        let classes = rng.random_range(2..=5);
        dims.push(classes);
        let labels: Vec<u32> = (0..classes as u32).collect();
        let mut net = MlpClassifier::new(&dims, &labels, Activation::Relu, n).unwrap();
        for b in net.biases_mut().iter_mut().flatten() {
            *b = rng.random_range(-0.5..0.5);
        }
        let x = loop {
            let x: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
            if hidden_pre_activations(&net, &x).iter().all(|p| p.abs() >= 1e-6) {
                break x;
            }
            redraws += 1;
        };
        let objective: Box<dyn LogitObjective> = if n % 2 == 0 {
            Box::new(LogitComponent(rng.random_range(0..classes)))
        } else {
            Box::new(LogMaxSoftmax {
                temperature: rng.random_range(0.5..10.0),
            })
        };
        let grad = net.input_gradient(&x, objective.as_ref()).unwrap();
        let fd: Vec<f64> = (0..input)
            .map(|i| {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                let vp = objective.value(&net.forward(&p).unwrap());
                let vm = objective.value(&net.forward(&m).unwrap());
                (vp - vm) / (2.0 * h)
            })
            .collect();
        let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if scale == 0.0 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    check(
        worst <= 1e-4,
        format!("100 networks, worst relative error {worst:.2e}, {redraws} inputs redrawn near a kink"),
    )
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: u32) -> Dataset {
    Dataset::new(
        (0..n)
            .map(|i| {
                let c = i as u32 % classes;
                LabeledInstance {
                    id: InstanceId(i as u64),
                    features: (0..dim).map(|_| c as f64 + rng.random_range(-1.5..1.5)).collect(),
                    class_label: ClassLabel(c),
                    domain_id: DomainId(0),
                }
            })
            .collect(),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = MlpClassifier::new(&[5, 16, 8, 4], &[0, 1, 2, 3], Activation::Relu, 70).unwrap();
    let mut equal = 0;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
        if odin_score(&net, &x, 1.0, 0.0).unwrap() == msp_score(&net, &x).unwrap() {
            equal += 1;
        }
    }

    let mut calibrations = 0;
    let mut tpr_ok = true;
    let mut lowest_tpr: f64 = 1.0;
    for trial in 0..30u64 {
        let n = rng.random_range(20..400);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0f64).round()).collect();
        let t = calibrate_threshold(&scores, 0.95).unwrap();
        let tpr = scores.iter().filter(|s| **s >= t).count() as f64 / n as f64;
        tpr_ok &= tpr >= 0.95;
        lowest_tpr = lowest_tpr.min(tpr);
        calibrations += 1;
        let net = MlpClassifier::new(&[3, 10, 6, 3], &[0, 1, 2], Activation::Relu, 700 + trial).unwrap();
        let fit = random_dataset(&mut rng, 90, 3, 3);
        let calib = random_dataset(&mut rng, n, 3, 3);
        for kind in [DetectorKind::Msp, DetectorKind::Odin, DetectorKind::Mahalanobis] {
            let det = Detector::fit(DetectorConfig::new(kind), &net, &fit, &calib).unwrap();
            let accepted = calib.iter().filter(|i| det.accepts(&net, &i.features).unwrap()).count();
            let tpr = accepted as f64 / n as f64;
            tpr_ok &= tpr >= 0.95;
            lowest_tpr = lowest_tpr.min(tpr);
            calibrations += 1;
        }
    }

    // identity hidden layer, so every point of feature space is reachable
    let identity = MlpClassifier::from_parts(
        vec![3, 3, 2],
        Activation::Identity,
        vec![0, 1],
        vec![vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.5; 6]],
        vec![vec![0.0; 3], vec![0.0; 2]],
    )
    .unwrap();
    let data = random_dataset(&mut rng, 60, 3, 2);
    let params = fit_mahalanobis(&identity, &data).unwrap();
    let mut worst: f64 = 0.0;
    for mean in &params.class_means {
        worst = worst.max(mahalanobis_score(&params, &identity, mean, 0.0).unwrap().abs());
    }

    check(
        equal == 1000 && tpr_ok && worst <= 1e-9,
        format!(
            "odin(T=1,eps=0)==msp on {equal}/1000, {calibrations} calibrations lowest TPR {lowest_tpr:.4}, \
             mahalanobis at class means max |score| {worst:.1e}"
        ),
    )
}

/// An expert whose claims are fixed per instance, indexed by the first feature.
struct Scripted {
    id: ExpertId,
    claims: Vec<bool>,
}

impl Claimant for Scripted {
    fn expert_id(&self) -> ExpertId {
        self.id
    }

    fn claims(&self, x: &[f64]) -> aiitl::Result<bool> {
        Ok(self.claims[x[0] as usize])
    }
}

fn expected_route(pattern: &[bool], ids: &[ExpertId]) -> Route {
    let claiming: Vec<ExpertId> = ids.iter().zip(pattern).filter(|(_, c)| **c).map(|(i, _)| *i).collect();
    match claiming.len() {
        0 => Route::human(RouteReason::NoClaim),
        1 => Route {
            destination: Destination::Expert(claiming[0]),
            reason: RouteReason::UniqueClaim,
        },
        _ => Route::human(RouteReason::MultiClaim),
    }
}

/// Routes one batch through scripted experts and checks every route and the tally.
fn check_batch(patterns: &[Vec<bool>], n_experts: usize) -> bool {
    let ids: Vec<ExpertId> = (0..n_experts as u32).map(|i| ExpertId(i * 3 + 1)).collect();
    let experts: Vec<Scripted> = ids
        .iter()
        .enumerate()
        .map(|(e, &id)| Scripted {
            id,
            claims: patterns.iter().map(|p| p[e]).collect(),
        })
        .collect();
    let refs: Vec<&Scripted> = experts.iter().collect();
    let mut outcomes = Vec::with_capacity(patterns.len());
    for (i, pattern) in patterns.iter().enumerate() {
        let (_, route) = expert_selection(&refs, &[i as f64]).unwrap();
        if route != expected_route(pattern, &ids) {
            return false;
        }
        outcomes.push(InstanceOutcome {
            instance: InstanceId(i as u64),
            domain: DomainId(1),
            class_label: ClassLabel(0),
            route,
            predicted: None,
            correct: false,
        });
    }
    let tally = tally_routes(&outcomes);
    let total: usize = tally.iter().map(|r| r.count).sum();
    let per_destination = |d: Destination| outcomes.iter().filter(|o| o.route.destination == d).count();
    let destinations_match = tally
        .iter()
        .all(|r| tally.iter().filter(|t| t.destination == r.destination).map(|t| t.count).sum::<usize>()
            == per_destination(r.destination));
    total == patterns.len() && destinations_match
}

fn criterion_8() -> Outcome {
    let mut exhaustive = 0;
    let mut ok = true;
    for n in 0..=5usize {
        let patterns: Vec<Vec<bool>> = (0..1u32 << n)
            .map(|bits| (0..n).map(|e| bits >> e & 1 == 1).collect())
            .collect();
        exhaustive += patterns.len();
        ok &= check_batch(&patterns, n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let n = rng.random_range(0..=5);
        let size = rng.random_range(1..=64);
        let p = rng.random_range(0.0..1.0);
        let patterns: Vec<Vec<bool>> = (0..size).map(|_| (0..n).map(|_| rng.random_bool(p)).collect()).collect();
        ok &= check_batch(&patterns, n);
    }
    check(ok, format!("{exhaustive} exhaustive patterns over 0-5 experts and 10000 random batches"))
}

fn criterion_9() -> Outcome {
    let base = ExperimentConfig::similar_classes();
    let aiitl = BaselineKind::Aiitl(Mechanism::Msp);
    let results: Vec<(RunTrace, RunTrace)> = std::thread::scope(|s| {
        let handles: Vec<_> = SEEDS
            .iter()
            .map(|&seed| {
                let base = &base;
                s.spawn(move || {
                    let prepared = prepare(&base.clone().with_seed_override(seed)).unwrap();
                    let mut r = run_systems(&prepared, &[aiitl, HITL]).unwrap().into_iter().map(|(t, _)| t);
                    (r.next().unwrap(), r.next().unwrap())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut wins = 0;
    let mut detail = Vec::new();
    for (a, h) in &results {
        let one_expert = a.registry.len() == 1 && a.registry[0].included_at_step.is_some();
        if one_expert && final_u(a) > final_u(h) {
            wins += 1;
        }
        detail.push(format!("{:.3}vs{:.3}(experts {})", final_u(a), final_u(h), a.registry.len()));
    }
    check(wins >= 4, format!("aiitl-msp vs hitl {} ({wins}/5)", detail.join(" ")))
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml");
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_aiitl"))
            .args(["--quiet", "run"])
            .arg(&config)
            .arg("--output")
            .arg(&out_dir)
            .status()
            .unwrap();
        if !status.success() {
            return Err(format!("run exited with {status}"));
        }
        snapshots.push(read_tree(&out_dir));
        std::fs::remove_dir_all(&out_dir).unwrap();
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    let differing: Vec<_> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let traces = a.keys().filter(|k| k.to_string_lossy().starts_with("trace_")).count();
    check(
        a.keys().eq(b.keys()) && differing.is_empty() && traces == 4,
        format!("{} files ({traces} traces) compared, differing: {differing:?}", a.len()),
    )
}

fn main() {
    let criteria: [(usize, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let mut failed = 0;
    for (n, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL  {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion outside `KNOWN_UNMET` fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use pointsmile::augment::CurriculumSchedule;
use pointsmile::config::RunConfig;
use pointsmile::eval::{self, EvalConfig, FeatureTable};
use pointsmile::geometry::{self, generate_shapes, LabeledCloud, PointCloud, ShapeConfig};
use pointsmile::gradsuite;
use pointsmile::loss::{self, Objective};
use pointsmile::model::{self, Checkpoint, ModelConfig, ModelParams};
use pointsmile::tensor::{Graph, Tensor};
use pointsmile::train::{self, PretrainOptions};
use rand::seq::SliceRandom;
use rand::Rng;

/// Criteria that do not hold for this implementation; the README records why.
const KNOWN_UNMET: &[usize] = &[6];

const ANALYTIC_TOL: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const BOUND_SLACK: f64 = 1e-6;
const SIM_TOL: f64 = 1e-6;
const PROBE_FLOOR: f64 = 0.80;
const PROBE_GAIN: f64 = 0.10;
const ABLATION_SLACK: f64 = 0.01;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn graph_value(f: impl FnOnce(&mut Graph<f64>) -> pointsmile::loss::Result<pointsmile::tensor::Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

fn rows(r: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(r).unwrap()
}

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    let orth = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    for b in [2usize, 4, 8] {
        let z = rows(&vec![vec![0.3, -1.2, 0.7]; b]);
        let l = graph_value(|g| {
            let (a, c) = (g.constant(z.clone()), g.constant(z.clone()));
            loss::feature_loss(g, a, c, 0.5)
        });
        worst = worst.max((l - (b as f64).ln()).abs());
        let m = b;
        let y = rows(&vec![vec![1.0 / m as f64; m]; 5]);
        let l = graph_value(|g| {
            let (a, c) = (g.constant(y.clone()), g.constant(y.clone()));
            loss::class_loss(g, a, c, 1.0)
        });
        worst = worst.max((l - (m as f64).ln()).abs());
    }
    let eye = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let lf = graph_value(|g| {
        let (a, c) = (g.constant(eye.clone()), g.constant(eye.clone()));
        loss::feature_loss(g, a, c, 1.0)
    });
    let lc = graph_value(|g| {
        let (a, c) = (g.constant(eye.clone()), g.constant(eye.clone()));
        loss::class_loss(g, a, c, 1.0)
    });
    worst = worst.max((lf - orth).abs()).max((lc - orth).abs());
    outcome(worst <= ANALYTIC_TOL, format!("max deviation {worst:.2e}, orthonormal case {lf:.6}"))
}

fn criterion_2() -> Outcome {
    let results = gradsuite::gradient_suite(20, 2024).unwrap();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed || r.max_rel_err > GRAD_TOL)
        .map(|r| r.name)
        .collect();
    outcome(
        failed.is_empty(),
        format!("{} cases, worst relative error {worst:.2e}, failing {failed:?}", results.len()),
    )
}

fn criterion_3() -> Outcome {
    let mut r = common::rng(3);
    let mut worst_fea = f64::NEG_INFINITY;
    let mut worst_cls = f64::NEG_INFINITY;
    for t in 0..1000 {
        let b = r.random_range(2..=16usize);
        let m = r.random_range(2..=16usize);
        let p = r.random_range(1..=8usize);
        let za = common::random_matrix(&mut r, b, p);
        // Every fourth batch pairs each view with itself, the sharpest case.
        let zb = if t % 4 == 0 { za.clone() } else { common::random_matrix(&mut r, b, p) };
        let logits = common::random_matrix(&mut r, b, m);
        let scale = if t % 4 == 0 { 20.0 } else { 1.0 };
        let softmax = |l: &[Vec<f64>]| -> Vec<Vec<f64>> {
            l.iter()
                .map(|row| {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| ((v - mx) * scale).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / s).collect()
                })
                .collect()
        };
        let ya = softmax(&logits);
        let yb = if t % 4 == 0 { ya.clone() } else { softmax(&common::random_matrix(&mut r, b, m)) };
        let tau1 = r.random_range(0.05..2.0);
        let cfg = loss::LossConfig { tau1, ..Default::default() };
        let mut g = Graph::<f64>::new();
        let vars = [&za, &zb, &ya, &yb].map(|m| g.constant(rows(m)));
        let (_, rep) = loss::total_loss(&mut g, vars[0], vars[1], vars[2], vars[3], &cfg).unwrap();
        worst_fea = worst_fea.max(rep.mi_fea_estimate - (b as f64).ln());
        worst_cls = worst_cls.max(rep.mi_cls_estimate - (m as f64).ln());
    }
    outcome(
        worst_fea <= BOUND_SLACK && worst_cls <= BOUND_SLACK,
        format!("max mi_fea - log B = {worst_fea:.3e}, max mi_cls - log M = {worst_cls:.3e}"),
    )
}

/// `floor(N · min(1, 2^j / 10))` in integer arithmetic.
fn hard_oracle(j: u64, n: usize) -> usize {
    if j >= 4 {
        return n;
    }
    (n * (1usize << j)) / 10
}

fn criterion_4() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for s in [1u64, 3, 7, 20, 100] {
        let d = 10 * s;
        let sched = CurriculumSchedule::new(0.1, 2.0, s, d).unwrap();
        let mut prev = 0.0;
        for k in 0..=d {
            let l = sched.lambda_k(k).unwrap();
            let j = k / s;
            let want = if j >= 4 { 1.0 } else { 0.1 * f64::from(1u32 << j) };
            if l < prev || l > 1.0 || (k < s && l != 0.1) || l != want.min(1.0) {
                bad.push(format!("lambda s={s} k={k} -> {l}"));
            }
            prev = l;
            for n in [1usize, 2, 5, 10, 16, 17, 30, 64, 100, 1000] {
                checked += 1;
                let h = sched.hard_count(k, n).unwrap();
                if h != hard_oracle(j, n) {
                    bad.push(format!("hard_count s={s} k={k} n={n} -> {h}"));
                }
            }
        }
    }
    outcome(bad.is_empty(), format!("{checked} (k, N) pairs, mismatches {:?}", &bad[..bad.len().min(3)]))
}

fn criterion_5() -> Outcome {
    let mut r = common::rng(5);
    let mut mismatches = 0;
    for t in 0..100u64 {
        let dims = ModelConfig {
            k: 32,
            p: 8,
            m: 4,
            edge_conv: t % 2 == 1,
            edge_k: 8,
        };
        let params = ModelParams::<f32>::init(dims, t).unwrap();
        let n = r.random_range(16..=96usize);
        let cloud = common::random_cloud(&mut r, n);
        let mut pts = cloud.points().to_vec();
        pts.shuffle(&mut r);
        let shuffled = PointCloud::new(pts).unwrap();
        let a = model::features(&params, &cloud).unwrap();
        let b = model::features(&params, &shuffled).unwrap();
        let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
        mismatches += usize::from(!same);
    }
    outcome(mismatches == 0, format!("100 clouds, {mismatches} not bit-identical"))
}

struct Desk {
    clouds: Vec<LabeledCloud>,
    data: Vec<PointCloud>,
}

fn desk_set() -> Desk {
    let set = generate_shapes(&ShapeConfig::with_classes(6, 100, 256, 0)).unwrap();
    let data = set.clouds.iter().map(|c| c.cloud.clone()).collect();
    Desk { clouds: set.clouds, data }
}

fn probe(table: &FeatureTable, seed: u64) -> f64 {
    eval::run_probe(table, &EvalConfig { seed, ..Default::default() }).unwrap().accuracy
}

/// Pre-trains at `seed` and returns the linear probe accuracy, or `None` if
/// training produced a non-finite value.
fn trained_accuracy(desk: &Desk, cfg: &RunConfig, seed: u64) -> Option<f64> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let out = train::pretrain(&desk.data, &cfg, PretrainOptions::default()).ok()?;
    if out.metrics.iter().any(|m| !m.report.l_overall.is_finite()) {
        return None;
    }
    Some(probe(&eval::extract(&out.checkpoint.params, &desk.clouds).unwrap(), seed))
}

fn accuracies(desk: &Desk, cfg: &RunConfig, label: &str) -> Option<Vec<f64>> {
    let mut out = Vec::new();
    for s in SEEDS {
        let t = Instant::now();
        let acc = trained_accuracy(desk, cfg, s);
        eprintln!("  {label} seed {s}: {acc:?} ({:.0?})", t.elapsed());
        out.push(acc?);
    }
    Some(out)
}

fn with_objective(o: Objective) -> RunConfig {
    let mut c = RunConfig::default();
    c.loss.objective = o;
    c
}

fn criterion_6(desk: &Desk, joint: &Option<Vec<f64>>) -> Outcome {
    let Some(trained) = joint else {
        return outcome(false, "non-finite training run");
    };
    let random: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let p = ModelParams::<f32>::init(ModelConfig::default(), s).unwrap();
            probe(&eval::extract(&p, &desk.clouds).unwrap(), s)
        })
        .collect();
    let (mt, mr) = (common::median(trained.clone()), common::median(random.clone()));
    outcome(
        mt >= PROBE_FLOOR && mt - mr >= PROBE_GAIN - 1e-12,
        format!("trained median {mt:.3} {trained:.3?}, random-init median {mr:.3} {random:.3?}"),
    )
}

fn criterion_7(desk: &Desk, joint: &Option<Vec<f64>>) -> Outcome {
    let fea = accuracies(desk, &with_objective(Objective::Feature), "feature-only");
    let cls = accuracies(desk, &with_objective(Objective::Class), "class-only");
    let (Some(j), Some(f), Some(c)) = (joint, fea, cls) else {
        return outcome(false, "non-finite training run");
    };
    let (mj, mf, mc) = (common::median(j.clone()), common::median(f), common::median(c));
    outcome(
        mj >= mf.max(mc) - ABLATION_SLACK - 1e-12,
        format!("joint {mj:.3}, feature-only {mf:.3}, class-only {mc:.3}"),
    )
}

fn criterion_8(desk: &Desk, joint: &Option<Vec<f64>>) -> Outcome {
    let mut sda = RunConfig::default();
    sda.augment.curriculum = false;
    let s = accuracies(desk, &sda, "sda-only");
    let (Some(j), Some(s)) = (joint, s) else {
        return outcome(false, "non-finite training run");
    };
    let (mj, ms) = (common::median(j.clone()), common::median(s));
    outcome(
        mj >= ms - ABLATION_SLACK - 1e-12,
        format!("curriculum {mj:.3}, easy-only {ms:.3}"),
    )
}

fn small_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model = ModelConfig {
        k: 32,
        p: 16,
        m: 4,
        ..Default::default()
    };
    c.train.epochs = 3;
    c.train.batch_size = 8;
    c.train.view_points = 64;
    c.train.checkpoint_every = 4;
    c.train.seed = 9;
    c
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![("metrics.csv".to_string(), fs::read(dir.join("metrics.csv")).unwrap())];
    out.push(("final.psml".into(), fs::read(dir.join("final.psml")).unwrap()));
    let mut cks: Vec<_> = fs::read_dir(dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    cks.sort();
    for p in cks {
        out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
    }
    out
}

fn criterion_9() -> Outcome {
    let set = generate_shapes(&ShapeConfig::with_classes(6, 8, 96, 4)).unwrap();
    let data: Vec<PointCloud> = set.clouds.into_iter().map(|c| c.cloud).collect();
    let cfg = small_run_config();
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, resume: Option<Checkpoint>, stop_after: Option<u64>| {
        let dir = tmp.path().join(name);
        let opts = PretrainOptions {
            out_dir: Some(dir.clone()),
            resume,
            stop_after,
        };
        train::pretrain(&data, &cfg, opts).unwrap();
        dir
    };
    let a = dir_bytes(&run("a", None, None));
    let b = dir_bytes(&run("b", None, None));
    let repeat = a == b;

    let part = run("c", None, Some(8));
    let ck = Checkpoint::load(part.join("checkpoints").join("step_000008.psml")).unwrap();
    let c = dir_bytes(&run("c", Some(ck), None));
    let resume = a == c;

    let bytes = fs::read(tmp.path().join("a").join("final.psml")).unwrap();
    let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap();
    let round = bytes == again;
    outcome(
        repeat && resume && round,
        format!("{} files compared; repeat {repeat}, resume {resume}, round-trip {round}", a.len()),
    )
}

fn criterion_10() -> Outcome {
    let mut r = common::rng(10);
    let mut fails = Vec::new();
    for t in 0..60 {
        let n = r.random_range(4..=40usize);
        let cloud = if t % 2 == 0 {
            common::random_cloud(&mut r, n)
        } else {
            common::lattice_cloud(&mut r, n)
        };
        let k = r.random_range(1..n);
        let nb = geometry::knn(&cloud, k).unwrap();
        if (0..n).map(|i| nb.row(i).to_vec()).collect::<Vec<_>>() != common::knn_oracle(&cloud, k) {
            fails.push("knn");
        }
        let m = r.random_range(1..=n);
        let start = r.random_range(0..n);
        if geometry::fps(&cloud, m, start).unwrap() != common::fps_oracle(&cloud, m, start) {
            fails.push("fps");
        }
        let (rows_n, width) = (r.random_range(9..=45), r.random_range(2..=6));
        let table = common::random_table(&mut r, rows_n, width, 3);
        let (train, test) = common::split_halves(&table);
        let kk = r.random_range(1..=train.len().min(7));
        if eval::knn_probe(&train, &test, kk).unwrap() != common::knn_probe_oracle(&train, &test, kk) {
            fails.push("knn_probe");
        }
        let (b, p) = (r.random_range(2..=10), r.random_range(1..=8));
        let (za, zb) = (common::random_matrix(&mut r, b, p), common::random_matrix(&mut r, b, p));
        let tau = r.random_range(0.1..1.5);
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.constant(rows(&za)), g.constant(rows(&zb)));
        let s = loss::feature_similarity(&mut g, va, vb, tau).unwrap();
        let want = common::similarity_oracle(&za, &zb, tau);
        let got = g.value(s);
        let worst = (0..b)
            .flat_map(|i| (0..b).map(move |j| (i, j)))
            .map(|(i, j)| (got.data()[i * b + j] - want[i][j]).abs())
            .fold(0.0, f64::max);
        if worst > SIM_TOL {
            fails.push("feature_similarity");
        }
    }
    outcome(fails.is_empty(), format!("60 instances per operation, failures {fails:?}"))
}

fn main() {
    let mut results: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut record = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {n:>2}: {} {} [{secs:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, o, secs));
    };
    record(1, &mut criterion_1);
    record(2, &mut criterion_2);
    record(3, &mut criterion_3);
    record(4, &mut criterion_4);
    record(5, &mut criterion_5);
    let desk = desk_set();
    let mut joint = None;
    record(6, &mut || {
        joint = Some(accuracies(&desk, &RunConfig::default(), "joint"));
        criterion_6(&desk, joint.as_ref().unwrap())
    });
    let joint = joint.unwrap();
    record(7, &mut || criterion_7(&desk, &joint));
    record(8, &mut || criterion_8(&desk, &joint));
    record(9, &mut criterion_9);
    record(10, &mut criterion_10);

    let unexpected: Vec<usize> = results
        .iter()
        .filter(|(n, o, _)| !o.pass && !KNOWN_UNMET.contains(n))
        .map(|(n, _, _)| *n)
        .collect();
    let passed = results.iter().filter(|(_, o, _)| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass; known unmet {KNOWN_UNMET:?}", results.len());
    if !unexpected.is_empty() {
        println!("acceptance: unexpected failures {unexpected:?}");
        std::process::exit(1);
    }
}

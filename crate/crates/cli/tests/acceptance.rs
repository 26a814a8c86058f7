//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line and then asserts. Run with `--nocapture` to see the lines.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdmtl_cli::{cmd_benchmark, cmd_synth, BenchmarkOutput, Context, RunConfig};
use tdmtl_core::dataset::kfold_split;
use tdmtl_core::distill::EmbeddingConfig;
use tdmtl_core::gbdt::{logistic_loss, train_gbdt, GbdtConfig};
use tdmtl_core::metrics::{
    auprc, auroc, calibration_curve, calibration_slope_intercept, ScoredSet,
};
use tdmtl_core::mtl::{train_mtl, MtlConfig, MtlModel, SingleTaskNet};
use tdmtl_core::nn::{self, sigmoid, Activation, Net, NetSpec};
use tdmtl_core::pipeline::{
    build_student, distill_teachers, train_task_gbdts, FoldSeeds, PipelineConfig,
};
use tdmtl_core::synth::{generate_cohort, SynthConfig};

const TASKS: [&str; 2] = ["rejection", "infection"];

// Criteria run one at a time so the benchmark wall-clock budget is not
// distorted by the other checks.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report_line(n: usize, ok: bool, detail: &str) {
    println!(
        "criterion {n}: {} {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

fn reference_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    RunConfig::from_toml_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

/// Synthesise and benchmark `config` in a scratch directory.
fn benchmark_in_tempdir(mut config: RunConfig) -> (BenchmarkOutput, f64) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_path_buf();
    config.out_dir = None;
    config.data.path = Some(out.join("cohort.csv"));
    config.data.schema = Some(out.join("schema.toml"));
    let ctx = Context {
        config,
        base_dir: PathBuf::new(),
        out_dir: out,
        seed: None,
        jobs: None,
    };
    let t = Instant::now();
    cmd_synth(&ctx).unwrap();
    let bench = cmd_benchmark(&ctx).unwrap();
    (bench, t.elapsed().as_secs_f64())
}

fn reference() -> &'static (BenchmarkOutput, f64) {
    static REF: OnceLock<(BenchmarkOutput, f64)> = OnceLock::new();
    REF.get_or_init(|| benchmark_in_tempdir(reference_config()))
}

#[test]
fn criterion_01_ordering() {
    let _serial = serial();
    let (bench, seconds) = reference();
    let r = &bench.report;
    let mut ok = *seconds < 600.0;
    let mut detail = format!("benchmark {seconds:.0}s;");
    for t in TASKS {
        let m = |model: &str| r.mean(model, t, "auroc").unwrap();
        let (cod, plain, single, gbdt) = (m("codmtl"), m("mtl_plain"), m("mlp_single"), m("gbdt"));
        ok &= cod >= plain && plain >= single && cod >= gbdt && cod - single >= 0.01;
        detail += &format!(
            " {t}: codmtl {cod:.4} mtl_plain {plain:.4} mlp_single {single:.4} gbdt {gbdt:.4} logreg {:.4};",
            m("logreg")
        );
    }
    report_line(1, ok, &detail);
    println!("{}", r.render_table());
    assert!(ok, "{detail}");
}

fn pair_count_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut doubled, mut pairs) = (0u64, 0u64);
    for (&si, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (&sj, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            pairs += 1;
            doubled += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    doubled as f64 / (2 * pairs) as f64
}

fn average_precision(scores: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let total: f64 = pos
        .iter()
        .map(|&t| {
            let above = scores.iter().filter(|&&s| s >= t).count() as f64;
            pos.iter().filter(|&&s| s >= t).count() as f64 / above
        })
        .sum();
    total / pos.len() as f64
}

#[test]
fn criterion_02_metric_oracles() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut roc_bad, mut worst_pr) = (0, 0.0f64);
    let mut done = 0;
    while done < 200 {
        let n = rng.random_range(2..=200);
        let grid = rng.random_range(2..50) as f64;
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random::<f64>() * grid).floor() / grid)
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let s = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        if auroc(&s).unwrap() != pair_count_auroc(&scores, &labels) {
            roc_bad += 1;
        }
        worst_pr = worst_pr.max((auprc(&s).unwrap() - average_precision(&scores, &labels)).abs());
        done += 1;
    }
    let ok = roc_bad == 0 && worst_pr <= 1e-9;
    report_line(
        2,
        ok,
        &format!("200 sets: auroc mismatches {roc_bad}, max auprc error {worst_pr:e}"),
    );
    assert!(ok);
}

#[derive(Clone, Copy, Debug)]
enum Loss {
    Ce,
    SoftCe,
    Mse,
}

fn loss_of(loss: Loss, out: &[f64], t: &[f64]) -> f64 {
    match loss {
        Loss::Ce | Loss::SoftCe => nn::bce_with_logits(out, t),
        Loss::Mse => nn::mse(out, t),
    }
}

fn gradient_error(loss: Loss, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(1..6)];
    sizes.extend((1..depth).map(|_| rng.random_range(2..7)));
    let out_dim = if matches!(loss, Loss::Mse) {
        rng.random_range(1..4)
    } else {
        1
    };
    sizes.push(out_dim);
    let mut acts = vec![Activation::Relu; depth - 1];
    acts.push(Activation::Identity);
    let mut net = Net::init(&NetSpec::new(sizes.clone(), acts, seed).unwrap());
    // nonzero biases keep pre-activations off the relu kink at exactly 0
    for layer in &mut net.layers {
        layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let batch = rng.random_range(1..6);
    let x = Array2::from_shape_simple_fn((batch, sizes[0]), || rng.random_range(-2.0..2.0));
    let t: Vec<f64> = (0..batch * out_dim)
        .map(|_| match loss {
            Loss::Ce => rng.random_range(0..2) as f64,
            Loss::SoftCe => rng.random::<f64>(),
            Loss::Mse => rng.random_range(-2.0..2.0),
        })
        .collect();
    let eval = |net: &Net| {
        loss_of(
            loss,
            net.forward_batch(x.view())
                .unwrap()
                .last()
                .unwrap()
                .as_slice()
                .unwrap(),
            &t,
        )
    };

    let outs = net.forward_batch(x.view()).unwrap();
    let o = outs.last().unwrap().as_slice().unwrap();
    let up = match loss {
        Loss::Ce | Loss::SoftCe => nn::bce_with_logits_grad(o, &t, 1.0),
        Loss::Mse => nn::mse_grad(o, &t, 1.0),
    };
    let up = Array2::from_shape_vec((batch, out_dim), up).unwrap();
    let (grads, _) = net.backward_batch(x.view(), &outs, up).unwrap();
    let analytic: Vec<f64> = grads.slices().concat();

    let h = 1e-6;
    let mut numeric = Vec::new();
    for s in 0..net.param_slices_mut().len() {
        for i in 0..net.param_slices_mut()[s].len() {
            let orig = net.param_slices_mut()[s][i];
            net.param_slices_mut()[s][i] = orig + h;
            let plus = eval(&net);
            net.param_slices_mut()[s][i] = orig - h;
            let minus = eval(&net);
            net.param_slices_mut()[s][i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let denom = norm(&analytic) + norm(&numeric);
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

#[test]
fn criterion_03_gradient_checks() {
    let _serial = serial();
    let mut ok = true;
    let mut detail = String::new();
    for loss in [Loss::Ce, Loss::SoftCe, Loss::Mse] {
        let worst = (0..100)
            .map(|s| gradient_error(loss, 500 + s))
            .fold(0.0, f64::max);
        ok &= worst <= 1e-4;
        detail += &format!(" {loss:?} worst {worst:.2e};");
    }
    report_line(3, ok, &detail);
    assert!(ok);
}

#[test]
fn criterion_04_gbdt() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_leaf, mut worst_rise) = (0.0f64, f64::NEG_INFINITY);
    for _ in 0..20 {
        let (n, l) = (rng.random_range(80..300), rng.random_range(1..6));
        let x = Array2::from_shape_simple_fn((n, l), || rng.random_range(-2.0..2.0));
        let y: Vec<u8> = (0..n)
            .map(|i| (x[[i, 0]] + rng.random_range(-1.0..1.0) > 0.0) as u8)
            .collect();
        let cfg = GbdtConfig {
            num_trees: 12,
            max_leaves: 8,
            min_samples_leaf: 4,
            ..Default::default()
        };
        let m = train_gbdt(&x, &y, &cfg).unwrap();
        let mut margins = vec![m.base_score; n];
        let mut prev = logistic_loss(&margins, &y);
        for tree in &m.trees {
            let mut g = vec![0.0; tree.num_leaves()];
            let mut h = vec![0.0; tree.num_leaves()];
            let routed: Vec<(usize, f64)> = (0..n)
                .map(|i| tree.route(x.row(i).as_slice().unwrap()))
                .collect();
            for i in 0..n {
                let p = sigmoid(margins[i]);
                g[routed[i].0] += p - y[i] as f64;
                h[routed[i].0] += p * (1.0 - p);
            }
            for (leaf, v) in tree.leaf_values().iter().enumerate() {
                worst_leaf = worst_leaf.max((v + g[leaf] / (h[leaf] + cfg.l2_lambda)).abs());
            }
            for i in 0..n {
                margins[i] += m.shrinkage * routed[i].1;
            }
            let loss = logistic_loss(&margins, &y);
            worst_rise = worst_rise.max(loss - prev);
            prev = loss;
        }
    }
    let x = Array2::from_shape_fn((100, 1), |(i, _)| i as f64);
    let y: Vec<u8> = (0..100).map(|i| (i >= 50) as u8).collect();
    let m = train_gbdt(
        &x,
        &y,
        &GbdtConfig {
            num_trees: 10,
            ..Default::default()
        },
    )
    .unwrap();
    let sep = auroc(&ScoredSet::new(m.predict_probas(&x).unwrap(), y).unwrap()).unwrap();
    let ok = worst_leaf <= 1e-10 && worst_rise <= 1e-9 && sep == 1.0;
    report_line(
        4,
        ok,
        &format!("max leaf error {worst_leaf:e}, max loss rise {worst_rise:e}, separable auroc {sep} after 10 trees"),
    );
    assert!(ok);
}

#[test]
fn criterion_05_fidelity() {
    let _serial = serial();
    let (bench, _) = reference();
    let mut worst = f64::INFINITY;
    for f in &bench.report.folds {
        for v in &f.fidelity {
            worst = worst.min(v.unwrap_or(f64::NEG_INFINITY));
        }
    }
    let ok = worst >= 0.8;
    report_line(
        5,
        ok,
        &format!("min held-out pearson(logit, margin) over folds and tasks {worst:.4}"),
    );
    assert!(ok);
}

fn small_cohort() -> tdmtl_core::dataset::Cohort {
    generate_cohort(&SynthConfig {
        n_task1_pos: 200,
        n_task2_pos: 160,
        n_negative: 100,
        n_features: 30,
        seed: 6,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn criterion_06_reductions() {
    let _serial = serial();
    let c = small_cohort();
    let fold = &kfold_split(&c.y, 4, 6).unwrap()[0];
    let cfg = PipelineConfig {
        gbdt: GbdtConfig {
            num_trees: 15,
            max_leaves: 8,
            ..Default::default()
        },
        embedding: EmbeddingConfig {
            epochs: 5,
            ..Default::default()
        },
        mtl: MtlConfig {
            epochs: 10,
            seed: 66,
            ..Default::default()
        },
        top_k: Some(10),
        ..Default::default()
    };
    let seeds = FoldSeeds::new(6, 0);
    let gbdts = train_task_gbdts(&c, &fold.train_rows, &cfg.gbdt, &seeds).unwrap();
    let teachers = distill_teachers(&c, &fold.train_rows, gbdts, &cfg.embedding, &seeds).unwrap();
    let mtl_cfg = cfg.mtl.clone().with_gamma(0.0, 2);
    let mut cod = build_student(&c, &teachers, &cfg, mtl_cfg.seed).unwrap();
    let h_cod = train_mtl(
        &mut cod,
        &c.x,
        &c.y,
        &fold.train_rows,
        &teachers.targets,
        &mtl_cfg,
    )
    .unwrap();
    let mut plain = MtlModel::plain(
        c.n_features(),
        cod.feature_union.clone(),
        2,
        mtl_cfg.hidden,
        mtl_cfg.seed,
    )
    .unwrap();
    let h_plain = train_mtl(&mut plain, &c.x, &c.y, &fold.train_rows, &[], &mtl_cfg).unwrap();
    let gap_a = h_cod
        .total
        .iter()
        .zip(&h_plain.total)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let y1 = c.y.select(Axis(1), &[0]);
    let l = c.n_features();
    let mut single_plain =
        MtlModel::plain(l, (0..l).collect(), 1, cfg.mtl.hidden, cfg.mtl.seed).unwrap();
    let h1 = train_mtl(
        &mut single_plain,
        &c.x,
        &y1,
        &fold.train_rows,
        &[],
        &cfg.mtl,
    )
    .unwrap();
    let mut mlp = SingleTaskNet::mlp(l, cfg.mtl.hidden, cfg.mtl.seed).unwrap();
    let h2 = mlp
        .train(&c.x, &c.labels(0), &fold.train_rows, &cfg.mtl)
        .unwrap();
    let gap_b = h1
        .total
        .iter()
        .zip(&h2)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let ok = h_cod.len() == cfg.mtl.epochs
        && h2.len() == cfg.mtl.epochs
        && gap_a <= 1e-10
        && gap_b <= 1e-10;
    report_line(
        6,
        ok,
        &format!("max per-epoch gap: gamma=0 vs plain on union {gap_a:e}; single-task plain vs mlp {gap_b:e}"),
    );
    assert!(ok);
}

#[test]
fn criterion_07_calibration() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
    let y: Vec<u8> = p
        .iter()
        .map(|&pi| (rng.random::<f64>() < pi) as u8)
        .collect();
    let curve = calibration_curve(&ScoredSet::new(p, y).unwrap(), 10).unwrap();
    let (slope, intercept) = calibration_slope_intercept(&curve).unwrap();
    let mut ok = (0.9..=1.1).contains(&slope) && (-0.05..=0.05).contains(&intercept);
    let mut detail = format!("simulated slope {slope:.4} intercept {intercept:.4}; codmtl slopes:");

    let (bench, _) = reference();
    for f in &bench.report.folds {
        for cell in f.cells.iter().filter(|c| c.model == "codmtl") {
            let bins = cell.curves.as_ref().map_or(0, |c| c.calibration.bins.len());
            let s = cell.calibration_slope.unwrap_or(f64::NAN);
            ok &= s.is_finite() && bins >= 5;
            detail += &format!(" f{} {} {s:.3} ({bins} bins);", f.fold_index, cell.task);
        }
    }
    report_line(7, ok, &detail);
    assert!(ok);
}

#[test]
fn criterion_08_fold_stability() {
    let _serial = serial();
    let (bench, _) = reference();
    let mut ok = true;
    let mut detail = String::new();
    for t in TASKS {
        let cell = bench.report.cell("codmtl", t, "auroc").unwrap();
        let sd = cell.std.unwrap();
        ok &= cell.per_fold.len() == 4 && sd <= 0.03;
        detail += &format!(" {t} auroc std {sd:.4};");
    }
    report_line(8, ok, &detail);
    assert!(ok);
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_tdmtl"))
        .args(args)
        .env_remove(tdmtl_cli::OUT_DIR_ENV)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
}

#[test]
fn criterion_09_determinism() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(
        &cfg_path,
        "seed = 9\nk = 3\n[data]\npath = \"data/cohort.csv\"\nschema = \"data/schema.toml\"\n\
         [synth]\nn_task1_pos = 240\nn_task2_pos = 200\nn_negative = 120\nn_features = 30\n\
         [pipeline.gbdt]\nnum_trees = 20\n[pipeline.embedding]\nepochs = 5\n[pipeline.mtl]\nepochs = 8\n",
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    run_cli(&["synth", "--config", cfg, "--out", &out("data")]);
    run_cli(&[
        "benchmark",
        "--config",
        cfg,
        "--out",
        &out("a"),
        "--jobs",
        "1",
    ]);
    run_cli(&[
        "benchmark",
        "--config",
        cfg,
        "--out",
        &out("b"),
        "--jobs",
        "3",
    ]);
    let mut ok = true;
    for file in ["report.json", "report.txt"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        ok &= !a.is_empty() && a == b;
    }
    report_line(9, ok, "two benchmark runs (1 and 3 worker threads) give byte-identical report.json and report.txt");
    assert!(ok);
}

#[test]
fn criterion_10_no_signal() {
    let _serial = serial();
    let mut config = reference_config();
    config.synth.signal_strength = 0.0;
    config.synth.n_task1_pos /= 2;
    config.synth.n_task2_pos /= 2;
    config.synth.n_negative /= 2;
    let (bench, _) = benchmark_in_tempdir(config);
    let mut ok = true;
    let mut detail = String::new();
    for t in TASKS {
        for model in tdmtl_core::pipeline::MODELS {
            let v = bench.report.mean(model, t, "auroc").unwrap();
            ok &= (0.45..=0.55).contains(&v);
            detail += &format!(" {model}/{t} {v:.4}");
        }
    }
    report_line(10, ok, &format!("rows {}:{detail}", bench.report.n_rows));
    assert!(ok);
}

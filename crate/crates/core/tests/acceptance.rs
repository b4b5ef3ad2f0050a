//! Acceptance checks. Each test writes one `PASS`/`FAIL` line to stderr
//! (unbuffered, so it shows even without `--nocapture`) and then asserts.
//!
//! The desk-scale criteria need MNIST in IDX form under `data/mnist` at the
//! workspace root, or wherever `FIBERWALK_MNIST` points.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use fiberwalk_core::attribution::{cosine_similarity_eval, feature_importance, feature_importance_at, importance_heatmap, Normalization};
use fiberwalk_core::explore::{
    perturbation_baseline, run_exploration, step_size, DeltaPolicy, ExplorationConfig, Mode, Trajectory,
    DEFAULT_REINIT_PROB,
};
use fiberwalk_core::geometry::{curve_pseudolength, pullback_metric, pushforward_length, Curve, DEFAULT_NULL_TOL};
use fiberwalk_core::interpret::{
    argmax, decode_trajectory, embedding_bounds, split_predictions, DecodedBatch, PatchDecoder,
};
use fiberwalk_core::linalg::{distance, Matrix};
use fiberwalk_core::netcore::{LayerSpec, Network, VitConfig};
use fiberwalk_core::raster::GrayImage;
use fiberwalk_core::workbench::{load_idx_prefix, train_tiny_vit, variance_filter, Dataset, TrainConfig, DEFAULT_VARIANCE_THRESHOLD};

fn report(name: &str, pass: bool, detail: String) {
    let _ = writeln!(std::io::stderr(), "\n[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------- oracles

/// Central differences of `net` from `from`, one column at a time.
fn central_jacobian(net: &Network, x: &[f64], from: usize, eps: f64) -> Matrix {
    let m = net.output(x, from).unwrap().len();
    let mut j = Matrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for c in 0..x.len() {
        xp[c] = x[c] + eps;
        let fp = net.output(&xp, from).unwrap();
        xp[c] = x[c] - eps;
        let fm = net.output(&xp, from).unwrap();
        xp[c] = x[c];
        for r in 0..m {
            j[(r, c)] = (fp[r] - fm[r]) / (2.0 * eps);
        }
    }
    j
}

/// `Aᵀ G A` by plain loops.
fn sandwich(a: &Matrix, g: &Matrix) -> Matrix {
    let ga = Matrix::from_fn(g.rows(), a.cols(), |i, j| (0..g.cols()).map(|k| g[(i, k)] * a[(k, j)]).sum());
    Matrix::from_fn(a.cols(), a.cols(), |i, j| (0..a.rows()).map(|k| a[(k, i)] * ga[(k, j)]).sum())
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn top_eigenvalue(m: &Matrix) -> f64 {
    let mut v = vec![1.0; m.rows()];
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let w = m.matvec(&v);
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / n).collect();
        lambda = n;
    }
    lambda
}

// --------------------------------------------------------------- fixtures

fn mnist_dir() -> PathBuf {
    std::env::var_os("FIBERWALK_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")))
}

fn load(prefix: &str, n: usize) -> Dataset {
    let dir = mnist_dir();
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    load_idx_prefix(&images, &labels, n)
        .unwrap_or_else(|e| panic!("MNIST not available under {} ({e}); set FIBERWALK_MNIST", dir.display()))
}

struct Desk {
    net: Network,
    accuracy: f64,
    elapsed: Duration,
    train: Dataset,
    test: Dataset,
}

/// The desk ViT trained once with the default settings on 10k/2k.
fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let train = load("train", 10_000);
        let test = load("t10k", 2_000);
        let start = Instant::now();
        let (net, rep) = train_tiny_vit(&VitConfig::desk().build().unwrap(), &train, Some(&test), &TrainConfig::default())
            .expect("training failed");
        Desk {
            net,
            accuracy: rep.test_accuracy.unwrap(),
            elapsed: start.elapsed(),
            train,
            test,
        }
    })
}

struct Walk {
    image: Vec<f64>,
    label: usize,
    traj: Trajectory,
}

const WALK_SEED: u64 = 7;

/// First correctly classified test image and a 1000-step SiMEC walk from
/// its embedding.
fn simec_walk() -> &'static Walk {
    static WALK: OnceLock<Walk> = OnceLock::new();
    WALK.get_or_init(|| {
        let d = desk();
        let k = (0..d.test.len())
            .find(|&k| argmax(&d.net.output(&d.test.images[k], 0).unwrap()) == d.test.labels[k])
            .unwrap();
        let image = d.test.images[k].clone();
        let e = d.net.embed(&image).unwrap();
        let traj = run_exploration(&d.net, &e, &ExplorationConfig::new(Mode::Simec, 1000, WALK_SEED)).unwrap();
        Walk {
            label: d.test.labels[k],
            image,
            traj,
        }
    })
}

fn simec_batch() -> &'static DecodedBatch {
    static BATCH: OnceLock<DecodedBatch> = OnceLock::new();
    BATCH.get_or_init(|| {
        let d = desk();
        let w = simec_walk();
        let bounds = embedding_bounds(&d.train.images[..1000], &d.net).unwrap();
        decode_trajectory(&d.net, &w.traj, &w.image, Some(&bounds)).unwrap()
    })
}

fn baseline_batch() -> &'static DecodedBatch {
    static BATCH: OnceLock<DecodedBatch> = OnceLock::new();
    BATCH.get_or_init(|| {
        let d = desk();
        let w = simec_walk();
        let t = perturbation_baseline(&d.net, &w.image, 10_000, 0.1, DEFAULT_REINIT_PROB, WALK_SEED).unwrap();
        decode_trajectory(&d.net, &t, &w.image, None).unwrap()
    })
}

// --------------------------------------------------------------- criteria

#[test]
fn jacobian_correctness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (k, kind) in ALL_KINDS.iter().enumerate() {
        let mut r = rng(500 + k as u64);
        let (net, scale) = single_layer_net(*kind, &mut r);
        for _ in 0..100 {
            let x = gaussian_vec(&mut r, net.input_dim(), scale);
            let j = net.jacobian(&x, 0).unwrap();
            let fd = central_jacobian(&net, &x, 0, 1e-5);
            worst = worst.max(j.sub(&fd).frobenius() / (1.0 + fd.frobenius()));
        }
    }
    let vit = VitConfig::desk().build().unwrap();
    let mut r = rng(599);
    for _ in 0..3 {
        let img: Vec<f64> = gaussian_vec(&mut r, 784, 0.3).into_iter().map(|v| v.abs().min(1.0)).collect();
        let e = vit.embed(&img).unwrap();
        let j = vit.jacobian(&e, vit.embed_boundary()).unwrap();
        let fd = central_jacobian(&vit, &e, vit.embed_boundary(), 1e-5);
        worst = worst.max(j.sub(&fd).frobenius() / (1.0 + fd.frobenius()));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "jacobian-correctness",
        worst <= 1e-4 && secs < 60.0,
        format!("13 layer kinds x 100 points + desk ViT, worst relative gap {worst:.2e} (tol 1e-4), {secs:.1}s (limit 60s)"),
    );
}

#[test]
fn pullback_identity() {
    let mut worst_id: f64 = 0.0;
    let mut worst_chain: f64 = 0.0;
    let mut r = rng(600);
    for _ in 0..20 {
        let w1 = gaussian_mat(&mut r, 5, 6, 0.5);
        let w2 = gaussian_mat(&mut r, 3, 5, 0.5);
        let net = Network::new(
            6,
            vec![LayerSpec::affine(w1, gaussian_vec(&mut r, 5, 0.3)), LayerSpec::Tanh, LayerSpec::affine(w2, gaussian_vec(&mut r, 3, 0.3))],
        )
        .unwrap();
        let a = gaussian_mat(&mut r, 3, 3, 1.0);
        let g_out = sandwich(&a, &Matrix::identity(3));
        for _ in 0..10 {
            let x = gaussian_vec(&mut r, 6, 1.0);
            let j = net.jacobian(&x, 0).unwrap();
            let g0 = pullback_metric(&net, &x, 0, None).unwrap().matrix;
            worst_id = worst_id.max(relative_gap(&g0, &sandwich(&j, &Matrix::identity(3))));
            let gg = pullback_metric(&net, &x, 0, Some(&g_out)).unwrap().matrix;
            worst_id = worst_id.max(relative_gap(&gg, &sandwich(&j, &g_out)));
            let x1 = net.forward_range(&x, 0, 1).unwrap();
            let j1 = net.jacobian_range(&x, 0, 1).unwrap();
            let g1 = pullback_metric(&net, &x1, 1, None).unwrap().matrix;
            worst_chain = worst_chain.max(relative_gap(&g0, &sandwich(&j1, &g1)));
        }
    }
    report(
        "pullback-identity",
        worst_id <= 1e-8 && worst_chain <= 1e-8,
        format!("200 points on 20 nets: |g0 - JtGJ| {worst_id:.2e}, chain {worst_chain:.2e} (tol 1e-8)"),
    );
}

#[test]
fn length_preservation() {
    let mut worst: f64 = 0.0;
    let mut r = rng(700);
    for k in 0..20 {
        let net = random_smooth_net(&mut r, &[4, 6, 5, 3]);
        let (a, b, c) = (gaussian_vec(&mut r, 4, 1.0), gaussian_vec(&mut r, 4, 1.0), gaussian_vec(&mut r, 4, 0.5));
        let curve = Curve::from_fn(2000, |t| {
            (0..4).map(|i| a[i] + b[i] * t + c[i] * (3.0 * t + i as f64).sin()).collect()
        })
        .unwrap();
        // measure from the input and from a hidden layer
        let mid = 2 * (k % 2) + 1;
        for from in [0, mid] {
            let samples: Vec<Vec<f64>> = curve.samples().iter().map(|p| net.forward_range(p, 0, from).unwrap()).collect();
            let pushed = Curve::new(samples).unwrap();
            let pl = curve_pseudolength(&net, &pushed, from).unwrap();
            let out = pushforward_length(&net, &pushed, from).unwrap();
            worst = worst.max((pl - out).abs() / out);
        }
    }
    report(
        "length-preservation",
        worst <= 1e-3,
        format!("20 nets, 2000-sample curves, worst relative gap {worst:.2e} (tol 1e-3)"),
    );
}

#[test]
fn equivalence_class_fidelity() {
    let mut r = rng(800);
    let mut linear_drift: f64 = 0.0;
    for k in 0..3 {
        let d_in = 5 + k;
        let net = Network::new(
            d_in,
            vec![LayerSpec::affine(gaussian_mat(&mut r, 2, d_in, 1.0), gaussian_vec(&mut r, 2, 1.0))],
        )
        .unwrap();
        let p0 = gaussian_vec(&mut r, d_in, 1.0);
        let t = run_exploration(&net, &p0, &ExplorationConfig::new(Mode::Simec, 1000, k as u64)).unwrap();
        assert!(t.is_complete());
        for y in &t.outputs {
            linear_drift = linear_drift.max(distance(y, &t.outputs[0]));
        }
    }

    let w = simec_walk();
    let t = &w.traj;
    let mut worst_ratio: f64 = 0.0;
    for (s, rec) in t.steps.iter().enumerate() {
        let drift = distance(&t.outputs[s + 1], &t.outputs[s]);
        worst_ratio = worst_ratio.max(drift / (10.0 * rec.delta * rec.delta * rec.lambda_max));
    }
    let kept = t.outputs.iter().filter(|y| argmax(y) == w.label).count();
    let retention = kept as f64 / t.outputs.len() as f64;
    report(
        "equivalence-class-fidelity",
        linear_drift <= 1e-6 && t.is_complete() && t.steps.len() == 1000 && worst_ratio <= 1.0 && retention >= 0.95,
        format!(
            "linear nets max drift {linear_drift:.2e} (tol 1e-6); desk ViT {} steps, worst drift / (10 d^2 lmax) {worst_ratio:.3} (<= 1), class {} kept on {kept}/{} points ({:.1}%, need 95%)",
            t.steps.len(),
            w.label,
            t.outputs.len(),
            100.0 * retention
        ),
    );
}

#[test]
fn simexp_separation() {
    let d = desk();
    let w = simec_walk();
    let e = d.net.embed(&w.image).unwrap();
    let total = |mode| {
        let t = run_exploration(&d.net, &e, &ExplorationConfig::new(mode, 100, WALK_SEED)).unwrap();
        let path: f64 = t.outputs.windows(2).map(|p| distance(&p[0], &p[1])).sum();
        (path, distance(t.outputs.last().unwrap(), &t.outputs[0]), t.steps.len())
    };
    let (c_path, c_end, c_steps) = total(Mode::Simec);
    let (x_path, x_end, x_steps) = total(Mode::Simexp);
    report(
        "simexp-separation",
        c_steps == 100 && x_steps == 100 && x_path >= 10.0 * c_path,
        format!(
            "100 steps seed {WALK_SEED}: output path length simexp {x_path:.3} vs simec {c_path:.3} (ratio {:.1}, need 10); end-to-end {x_end:.3} vs {c_end:.3}",
            x_path / c_path
        ),
    );
}

#[test]
fn step_size_rules() {
    // metric diag(4, 1, 0)
    let net = Network::new(
        3,
        vec![LayerSpec::affine(Matrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), vec![0.0, 0.0])],
    )
    .unwrap();
    let g = pullback_metric(&net, &[0.1, 0.2, 0.3], 0, None).unwrap();
    let lmax = top_eigenvalue(&g.matrix);
    let simec = run_exploration(&net, &[0.1, 0.2, 0.3], &ExplorationConfig::new(Mode::Simec, 1, 0)).unwrap();
    let simexp = run_exploration(&net, &[0.1, 0.2, 0.3], &ExplorationConfig::new(Mode::Simexp, 1, 0)).unwrap();
    let (dc, dx) = (simec.steps[0].delta, simexp.steps[0].delta);
    let pass = (lmax - 4.0).abs() < 1e-12
        && dc == 0.5
        && dx == 1.0
        && step_size(Mode::Simec, 4.0, DeltaPolicy::Auto).unwrap() == 0.5
        && step_size(Mode::Simexp, 4.0, DeltaPolicy::Auto).unwrap() == 1.0
        && step_size(Mode::Simec, 16.0, DeltaPolicy::Auto).unwrap() == 0.25;
    report(
        "step-size-rules",
        pass,
        format!("lambda_max 4: simec delta {dc}, simexp delta {dx} (expected 0.5 and 1.0 exactly)"),
    );
}

#[test]
fn feature_importance_soundness() {
    // 4 segments of width 2; segment 2 never reaches the output
    let mut r = rng(900);
    let mut w = gaussian_mat(&mut r, 3, 8, 0.7);
    for i in 0..3 {
        w[(i, 4)] = 0.0;
        w[(i, 5)] = 0.0;
    }
    let net = Network::new(8, vec![LayerSpec::affine(w, gaussian_vec(&mut r, 3, 0.2)), LayerSpec::Tanh])
        .unwrap()
        .with_layout(4, 2)
        .unwrap();
    let map = feature_importance_at(&net, &gaussian_vec(&mut r, 8, 1.0)).unwrap();
    let zero_ok = map.scores[2] <= DEFAULT_NULL_TOL * map.lambda_max && map.scores.iter().any(|&s| s > 0.0);

    // two identical tokens in the (permutation-equivariant) encoder score the same
    let d = desk();
    let h = 8;
    let mut e = d.net.embed(&d.test.images[1]).unwrap();
    let copy: Vec<f64> = e[3 * h..4 * h].to_vec();
    e[10 * h..11 * h].copy_from_slice(&copy);
    let tied = feature_importance_at(&d.net, &e).unwrap();
    let tie_gap = (tied.scores[3] - tied.scores[10]).abs() / tied.scores[3].max(f64::MIN_POSITIVE);

    let large = VitConfig::large().build().unwrap();
    let lmap = feature_importance(&large, &d.test.images[0]).unwrap();
    let small = importance_heatmap(&lmap, Normalization::Linear, 1).unwrap();
    let big = importance_heatmap(&lmap, Normalization::Linear, 2).unwrap();
    let blocky = (0..28).all(|r| (0..28).all(|c| big.get(r, c) == small.get(r / 2, c / 2)));
    let reread = GrayImage::from_pgm(&small.to_pgm()).unwrap();
    let geometry_ok = lmap.scores.len() == 196
        && (small.width, small.height) == (14, 14)
        && (reread.width, reread.height) == (14, 14)
        && (big.width, big.height) == (28, 28)
        && blocky;

    report(
        "feature-importance-soundness",
        zero_ok && tie_gap <= 1e-8 && geometry_ok,
        format!(
            "dead segment score {:.1e} vs null_tol*lambda_max {:.1e}; tied tokens relative gap {tie_gap:.1e} (tol 1e-8); patch-2 map {}x{} from {} segments, 2x2 upsampling exact: {blocky}",
            map.scores[2],
            DEFAULT_NULL_TOL * map.lambda_max,
            small.width,
            small.height,
            lmap.scores.len()
        ),
    );
}

#[test]
fn attribution_scorer() {
    let cases: [(&[f64], &[f64], f64); 3] = [
        // [0, .5, 1] against [1, .5, 0]: 0.25 / 1.25
        (&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], 0.2),
        // [0, 1, 0, 1] against [0, 1, 1, 1]: 2 / (sqrt 2 sqrt 3)
        (&[0.0, 1.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 1.0], 2.0 / 6f64.sqrt()),
        // [0, .25, 1] against [1, 0, .5]: .5 / (sqrt(1.0625) sqrt(1.25))
        (&[0.0, 0.25, 1.0], &[0.8, 0.0, 0.4], 0.5 / (1.0625f64 * 1.25).sqrt()),
    ];
    let mut worst: f64 = 0.0;
    for (p, t, expected) in cases {
        let c = cosine_similarity_eval(p, t).unwrap();
        worst = worst.max((c.value - expected).abs());
    }
    report(
        "attribution-scorer",
        worst <= 1e-12,
        format!("3 hand-computed cases, worst error {worst:.1e} (tol 1e-12); the published corpus-level score needs a language model and annotated corpus and is not checked"),
    );
}

#[test]
fn baseline_contrast() {
    let simec = simec_batch();
    let base = baseline_batch();
    let (_, s) = variance_filter(&simec.images, DEFAULT_VARIANCE_THRESHOLD, 0);
    let (_, b) = variance_filter(&base.images, DEFAULT_VARIANCE_THRESHOLD, 0);
    report(
        "baseline-contrast",
        s.retention >= 0.99 && b.retention < 0.10,
        format!(
            "variance >= 0.01 kept: simec {}/{} ({:.1}%, need 99%), pixel baseline {}/{} after 10000 steps ({:.1}%, need < 10%)",
            s.kept,
            s.total,
            100.0 * s.retention,
            b.kept,
            b.total,
            100.0 * b.retention
        ),
    );
}

#[test]
fn interpretation_round_trip() {
    let d = desk();
    let inv = VitConfig::invertible().build().unwrap();
    let dec = PatchDecoder::new(&inv).unwrap();
    let mut worst: f64 = 0.0;
    for img in &d.test.images[..100] {
        let raw = dec.decode_raw(&inv.embed(img).unwrap()).unwrap();
        let back = dec.splice(&raw, &vec![0.0; 784], None).unwrap();
        worst = worst.max(back.iter().zip(img).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    // zero-step trajectory
    let img = &d.test.images[0];
    let e = inv.embed(img).unwrap();
    let zero = Trajectory {
        mode: Mode::Simec,
        seed: 0,
        selection: None,
        from_layer: inv.embed_boundary(),
        outputs: vec![inv.output(&e, inv.embed_boundary()).unwrap()],
        points: vec![e],
        indices: vec![0],
        steps: Vec::new(),
        error: None,
    };
    let zb = decode_trajectory(&inv, &zero, img, None).unwrap();
    let zero_gap = zb.images[0].iter().zip(img).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut partition_ok = true;
    let mut sizes = Vec::new();
    for batch in [&zb, simec_batch(), baseline_batch()] {
        // split on the class of the starting point
        let split = split_predictions(batch, argmax(&batch.predictions[0])).unwrap();
        let mut all: Vec<usize> = split.changed.iter().chain(&split.stable).copied().collect();
        all.sort_unstable();
        partition_ok &= all == (0..batch.len()).collect::<Vec<_>>();
        sizes.push(format!("{}+{}", split.changed.len(), split.stable.len()));
    }
    report(
        "interpretation-round-trip",
        worst <= 1e-5 && zero_gap <= 1e-5 && partition_ok,
        format!(
            "100 test images recovered to {worst:.1e} (tol 1e-5); zero-step decode gap {zero_gap:.1e}; C/S partitions exact on 3 batches ({})",
            sizes.join(", ")
        ),
    );
}

#[test]
fn desk_scale_training() {
    let d = desk();
    let mins = d.elapsed.as_secs_f64() / 60.0;
    report(
        "desk-scale-training",
        d.accuracy >= 0.90 && mins < 15.0,
        format!(
            "desk ViT, 10k train / 2k test, momentum SGD: test accuracy {:.2}% (need 90%), {mins:.1} min (limit 15)",
            100.0 * d.accuracy
        ),
    );
}

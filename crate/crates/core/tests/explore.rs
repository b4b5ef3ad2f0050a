mod common;

use common::*;
use fiberwalk_core::explore::{
    exploration_rng, perturbation_baseline, project_feasible, run_exploration, simec_step, DeltaPolicy,
    ExplorationConfig, FeasibleBounds, Mode, DEFAULT_REINIT_PROB,
};
use fiberwalk_core::geometry::{decomposition_count, pullback_metric};
use fiberwalk_core::linalg::{distance, symmetric_eigen, Matrix};
use fiberwalk_core::netcore::{LayerSpec, Network, VitConfig};
use proptest::prelude::*;
use rand::Rng;

fn random_linear_net(r: &mut impl Rng, d_in: usize, d_out: usize) -> Network {
    Network::new(
        d_in,
        vec![LayerSpec::affine(gaussian_mat(r, d_out, d_in, 1.0), gaussian_vec(r, d_out, 1.0))],
    )
    .unwrap()
}

fn max_output_drift(t: &fiberwalk_core::explore::Trajectory) -> f64 {
    t.outputs.iter().map(|y| distance(y, &t.outputs[0])).fold(0.0, f64::max)
}

#[test]
fn simec_stays_on_exact_fibers_of_linear_maps() {
    let mut r = rng(30);
    let nets = [first_coordinate_net(), random_linear_net(&mut r, 5, 2), random_linear_net(&mut r, 6, 3)];
    for (k, net) in nets.iter().enumerate() {
        let p0 = gaussian_vec(&mut r, net.input_dim(), 1.0);
        let t = run_exploration(net, &p0, &ExplorationConfig::new(Mode::Simec, 1000, k as u64)).unwrap();
        assert!(t.is_complete());
        assert_eq!(t.points.len(), 1001);
        assert!(max_output_drift(&t) <= 1e-6, "net {k}: {:e}", max_output_drift(&t));
    }
}

#[test]
fn simec_on_projection_keeps_output_one() {
    let t = run_exploration(&first_coordinate_net(), &[1.0, 0.0], &ExplorationConfig::new(Mode::Simec, 100, 4)).unwrap();
    assert!(t.outputs.iter().all(|y| (y[0] - 1.0).abs() <= 1e-6));
    assert!(t.points.iter().any(|p| p[1] != 0.0));
}

#[test]
fn single_iteration_equals_manual_step() {
    let mut r = rng(31);
    let net = random_smooth_net(&mut r, &[5, 4, 2]);
    let p0 = gaussian_vec(&mut r, 5, 1.0);
    let cfg = ExplorationConfig::new(Mode::Simec, 1, 77);
    let t = run_exploration(&net, &p0, &cfg).unwrap();
    let (manual, rec) = simec_step(&net, &p0, &cfg, &mut exploration_rng(Mode::Simec, 77)).unwrap();
    assert_eq!(t.points, vec![p0, manual]);
    assert_eq!(t.steps, vec![rec]);
}

#[test]
fn identical_inputs_give_identical_trajectories() {
    let mut r = rng(32);
    let net = random_smooth_net(&mut r, &[6, 5, 2]);
    let p0 = gaussian_vec(&mut r, 6, 1.0);
    for mode in [Mode::Simec, Mode::Simexp] {
        let cfg = ExplorationConfig::new(mode, 50, 5);
        assert_eq!(run_exploration(&net, &p0, &cfg).unwrap(), run_exploration(&net, &p0, &cfg).unwrap());
    }
}

#[test]
fn per_step_drift_is_second_order_on_smooth_nets() {
    let mut r = rng(33);
    for k in 0..5 {
        let net = random_smooth_net(&mut r, &[6, 5, 2]);
        let p0 = gaussian_vec(&mut r, 6, 1.0);
        let t = run_exploration(&net, &p0, &ExplorationConfig::new(Mode::Simec, 200, k)).unwrap();
        assert!(t.is_complete());
        for (s, rec) in t.steps.iter().enumerate() {
            let drift = distance(&t.outputs[s + 1], &t.outputs[s]);
            let bound = 10.0 * rec.delta * rec.delta * rec.lambda_max;
            assert!(drift <= bound, "net {k} step {s}: {drift:e} > {bound:e}");
        }
    }
}

#[test]
fn simexp_moves_the_output_far_more_than_simec() {
    let mut r = rng(34);
    for k in 0..5 {
        let net = gelu_head_net(&mut r, &[6, 5, 2]);
        let p0 = gaussian_vec(&mut r, 6, 1.0);
        let total = |mode| {
            let t = run_exploration(&net, &p0, &ExplorationConfig::new(mode, 100, k)).unwrap();
            t.outputs.windows(2).map(|w| distance(&w[0], &w[1])).sum::<f64>()
        };
        let (c, x) = (total(Mode::Simec), total(Mode::Simexp));
        assert!(x >= 10.0 * c, "net {k}: simexp {x} vs simec {c}");
    }
}

#[test]
fn one_decomposition_per_step() {
    let mut r = rng(35);
    let net = gelu_head_net(&mut r, &[5, 4, 2]);
    let p0 = gaussian_vec(&mut r, 5, 1.0);
    let before = decomposition_count();
    let t = run_exploration(&net, &p0, &ExplorationConfig::new(Mode::Simexp, 40, 1)).unwrap();
    assert_eq!(decomposition_count() - before, 40);
    assert!(t.steps.iter().all(|s| s.decompositions == 1));
}

#[test]
fn selection_leaves_other_segments_untouched() {
    let net = VitConfig { depth: 1, ..VitConfig::desk() }.build().unwrap();
    let mut r = rng(36);
    let img: Vec<f64> = (0..784).map(|_| r.gen_range(0.0..1.0)).collect();
    let e = net.embed(&img).unwrap();
    let mut cfg = ExplorationConfig::new(Mode::Simec, 15, 2);
    cfg.selection = Some(vec![3, 10]);
    let t = run_exploration(&net, &e, &cfg).unwrap();
    assert!(t.is_complete());
    let moving: Vec<usize> = (24..32).chain(80..88).collect();
    for p in &t.points {
        for i in 0..e.len() {
            if !moving.contains(&i) {
                assert_eq!(p[i].to_bits(), e[i].to_bits(), "coordinate {i} moved");
            }
        }
    }
    assert!(t.last().iter().zip(&e).any(|(a, b)| a != b));
}

#[test]
fn selection_uses_the_diagonal_block_of_the_metric() {
    let net = VitConfig { depth: 1, ..VitConfig::desk() }.build().unwrap();
    let img: Vec<f64> = (0..784).map(|i| ((i * 13) % 29) as f64 / 28.0).collect();
    let e = net.embed(&img).unwrap();
    let mut cfg = ExplorationConfig::new(Mode::Simexp, 1, 0);
    cfg.selection = Some(vec![7]);
    let t = run_exploration(&net, &e, &cfg).unwrap();
    let full = pullback_metric(&net, &e, net.embed_boundary(), None).unwrap();
    let block = full.matrix.principal_submatrix(&(56..64).collect::<Vec<_>>());
    let (vals, _) = symmetric_eigen(&block);
    let lm = t.steps[0].lambda_max;
    assert!((lm - vals[0]).abs() <= 1e-9 * vals[0]);
    assert_eq!(t.steps[0].delta, 2.0 / lm.sqrt());
}

#[test]
fn step_rules_on_hand_built_metric() {
    // f(x, y) = 2x has metric diag(4, 0)
    let net = Network::new(2, vec![LayerSpec::affine(Matrix::from_rows(&[[2.0, 0.0]]), vec![0.0])]).unwrap();
    let t = run_exploration(&net, &[0.0, 0.0], &ExplorationConfig::new(Mode::Simec, 1, 0)).unwrap();
    assert_eq!(t.steps[0].delta, 0.5);
    let t = run_exploration(&net, &[0.0, 0.0], &ExplorationConfig::new(Mode::Simexp, 1, 0)).unwrap();
    assert_eq!(t.steps[0].delta, 1.0);
    let mut cfg = ExplorationConfig::new(Mode::Simec, 1, 0);
    cfg.delta = DeltaPolicy::Fixed(0.125);
    assert_eq!(run_exploration(&net, &[0.0, 0.0], &cfg).unwrap().steps[0].delta, 0.125);
}

#[test]
fn bounds_are_applied_at_the_end_or_every_step() {
    let net = first_coordinate_net();
    let bounds = FeasibleBounds::new(vec![-1.0, -0.5], vec![2.0, 0.5]).unwrap();
    let mut cfg = ExplorationConfig::new(Mode::Simec, 30, 8);
    cfg.bounds = Some(bounds.clone());
    let end = run_exploration(&net, &[1.0, 0.0], &cfg).unwrap();
    assert!(end.points.iter().all(|p| bounds.contains(p)));
    cfg.project_every_step = true;
    let each = run_exploration(&net, &[1.0, 0.0], &cfg).unwrap();
    assert!(each.points.iter().all(|p| bounds.contains(p)));
    // clamping once at the end does not change where the walk went
    cfg.bounds = None;
    cfg.project_every_step = false;
    let free = run_exploration(&net, &[1.0, 0.0], &cfg).unwrap();
    for (a, b) in end.points.iter().zip(&free.points) {
        assert_eq!(*a, project_feasible(b, &bounds).unwrap());
    }
}

#[test]
fn projection_examples() {
    let b = FeasibleBounds::new(vec![0.0], vec![1.0]).unwrap();
    assert_eq!(project_feasible(&[0.25], &b).unwrap(), vec![0.25]);
    assert_eq!(project_feasible(&[5.0], &b).unwrap(), vec![1.0]);
    assert!(project_feasible(&[0.0, 1.0], &b).is_err());
    assert!(FeasibleBounds::new(vec![1.0], vec![0.0]).is_err());
}

#[test]
fn baseline_contract() {
    let net = VitConfig { depth: 1, ..VitConfig::desk() }.build().unwrap();
    let img: Vec<f64> = (0..784).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
    let t = perturbation_baseline(&net, &img, 0, 0.1, DEFAULT_REINIT_PROB, 3).unwrap();
    assert_eq!(t.points, vec![img.clone()]);
    let a = perturbation_baseline(&net, &img, 25, 0.1, DEFAULT_REINIT_PROB, 3).unwrap();
    let b = perturbation_baseline(&net, &img, 25, 0.1, DEFAULT_REINIT_PROB, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.points.len(), 26);
    let reinits = a.steps.iter().filter(|s| s.reinitialized).count();
    assert!(reinits > 0 && reinits < 25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent(p in prop::collection::vec(-5.0f64..5.0, 4), lo in -1.0f64..0.0, hi in 0.0f64..1.0) {
        let b = FeasibleBounds::new(vec![lo; 4], vec![hi; 4]).unwrap();
        let once = project_feasible(&p, &b).unwrap();
        prop_assert_eq!(project_feasible(&once, &b).unwrap(), once.clone());
        prop_assert!(b.contains(&once));
    }
}

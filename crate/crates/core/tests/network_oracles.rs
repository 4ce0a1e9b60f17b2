mod common;

use common::{
    fd_gradient, gradient_check_case, max_relative_error, mean_ce, random_batch, randomize_biases, small_topology,
};
use patchseg::network::{PatchBatch, Topology, LAYER_NAMES};
use patchseg::patching::Normalization;
use patchseg::{seeded_rng, sgd_step, MiniBatch, Mode, PatchDnn, TriPlanarSample, VoxelIndex, Widths};

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..5 {
        let err = gradient_check_case(seed);
        assert!(err < 1e-4, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn gradient_check_holds_through_dropout_masks() {
    // A fixed train-mode tape: the masks are frozen, so the loss is a smooth
    // function of the parameters away from ReLU kinks.
    let topo = small_topology(11, 0.3);
    let mut net = PatchDnn::<f64>::init(topo.clone(), &mut seeded_rng(5)).unwrap();
    randomize_biases(&mut net, 55);
    let (batch, targets) = random_batch::<f64>(topo.patch, 3, topo.classes, 6);
    let tape = net.forward_batch(&batch, Mode::Train(&mut seeded_rng(7))).unwrap();
    let analytic = net.backward(&tape, &targets).unwrap().flatten();

    let loss_with = |params: &[f64]| {
        let mut probe = net.clone();
        probe.set_parameters(params).unwrap();
        probe
            .loss(&probe.forward_batch(&batch, Mode::Train(&mut seeded_rng(7))).unwrap(), &targets)
            .unwrap()
    };
    let theta = net.parameters();
    let mut numeric = Vec::with_capacity(theta.len());
    let mut shifted = theta.clone();
    for i in 0..theta.len() {
        shifted[i] = theta[i] + 1e-4;
        let up = loss_with(&shifted);
        shifted[i] = theta[i] - 1e-4;
        let down = loss_with(&shifted);
        shifted[i] = theta[i];
        numeric.push((up - down) / 2e-4);
    }
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-4, "max relative error {err:e}");
}

fn unit_topology() -> Topology {
    Topology {
        patch: 3,
        classes: 2,
        widths: Widths {
            pathway: [1, 1],
            trunk: [1, 1, 1],
        },
        dropout: 0.0,
        normalization: Normalization::None,
    }
}

#[test]
fn one_unit_network_matches_hand_evaluation() {
    let relu = |v: f64| v.max(0.0);
    // Parameters in layer order, weights then bias for each layer.
    let fe1 = |k: f64| (0..9).map(move |i| 0.01 * (i as f64 + k)).collect::<Vec<_>>();
    let mut params = Vec::new();
    let pathway = [(1.0, 0.1, 0.9, 0.05), (2.0, -0.2, 1.1, 0.0), (3.0, 0.3, -0.7, 0.2)];
    for &(k, b1, w2, b2) in &pathway {
        params.extend(fe1(k));
        params.push(b1);
        params.extend([w2, b2]);
    }
    params.extend([0.5, -0.25, 0.75, 0.1]); // fe3
    params.extend([1.5, -0.05]); // fe4
    params.extend([0.8, 0.02]); // fe6
    params.extend([1.2, -0.9, 0.3, 0.4]); // fe8: two outputs, then two biases

    let topo = unit_topology();
    let mut net = PatchDnn::<f64>::zeros(topo).unwrap();
    net.set_parameters(&params).unwrap();
    assert_eq!(net.param_count(), params.len());

    let planes: [Vec<f64>; 3] = [
        (0..9).map(|i| i as f64 / 9.0).collect(),
        (0..9).map(|i| 1.0 - i as f64 / 4.0).collect(),
        (0..9).map(|i| ((i * 7) % 5) as f64 - 2.0).collect(),
    ];
    let batch = PatchBatch {
        patch: 3,
        len: 1,
        planes: planes.clone(),
    };
    let tape = net.forward_batch(&batch, Mode::Test).unwrap();

    let mut merged = Vec::new();
    for (p, &(k, b1, w2, b2)) in pathway.iter().enumerate() {
        let f1: f64 = fe1(k).iter().zip(&planes[p]).map(|(w, x)| w * x).sum::<f64>() + b1;
        merged.push(relu(w2 * relu(f1) + b2));
    }
    let g3 = relu(0.5 * merged[0] - 0.25 * merged[1] + 0.75 * merged[2] + 0.1);
    let g4 = relu(1.5 * g3 - 0.05);
    let g6 = relu(0.8 * g4 + 0.02);
    let (z0, z1) = (1.2 * g6 + 0.3, -0.9 * g6 + 0.4);
    let p1 = 1.0 / (1.0 + (z0 - z1).exp());

    assert!((tape.probs[1] - p1).abs() < 1e-12, "{} vs {p1}", tape.probs[1]);
    assert!((tape.probs[0] - (1.0 - p1)).abs() < 1e-12);
}

#[test]
fn parameter_count_matches_stored_scalars() {
    for seed in 0..6 {
        let topo = small_topology(seed, 0.5);
        let net = PatchDnn::<f32>::init(topo.clone(), &mut seeded_rng(seed)).unwrap();
        let stored: usize = net.layers().iter().map(|l| l.weights.len() + l.bias.len()).sum();
        let w = topo.widths;
        let pp = topo.patch * topo.patch;
        let formula = 3 * (w.pathway[0] * pp + w.pathway[0] + w.pathway[1] * w.pathway[0] + w.pathway[1])
            + (w.trunk[0] * 3 * w.pathway[1] + w.trunk[0])
            + (w.trunk[1] * w.trunk[0] + w.trunk[1])
            + (w.trunk[2] * w.trunk[1] + w.trunk[2])
            + (topo.classes * w.trunk[2] + topo.classes);
        assert_eq!(stored, formula);
        assert_eq!(net.param_count(), formula);
        assert_eq!(net.parameters().len(), formula);
        assert_eq!(net.layers().len(), LAYER_NAMES.len());
    }
}

#[test]
fn default_network_parameter_count_is_in_the_expected_band() {
    let topo = Topology {
        patch: 13,
        classes: 2,
        widths: Widths::default(),
        dropout: 0.5,
        normalization: Normalization::RoiZScore,
    };
    let n = topo.param_count();
    assert_eq!(n, 3 * (169 * 96 + 96 + 96 * 48 + 48) + (144 * 128 + 128) + (128 * 64 + 64) + (64 * 32 + 32) + (32 * 2 + 2));
    assert!((50_000..=500_000).contains(&n));
}

#[test]
fn dropout_preserves_layer_expectations() {
    let topo = Topology {
        patch: 3,
        classes: 3,
        widths: Widths {
            pathway: [6, 4],
            trunk: [8, 8, 8],
        },
        dropout: 0.5,
        normalization: Normalization::None,
    };
    let mut net = PatchDnn::<f64>::init(topo, &mut seeded_rng(3)).unwrap();
    // Positive biases keep the probed units active.
    for l in net.layers_mut() {
        l.bias.iter_mut().for_each(|b| *b = 0.5);
    }
    let rows = 20_000;
    let mut batch = PatchBatch::<f64>::with_capacity(3, rows);
    let one = random_batch::<f64>(3, 1, 3, 9).0;
    batch.len = rows;
    for p in 0..3 {
        batch.planes[p] = one.planes[p].repeat(rows);
    }
    let test = net.forward_batch(&one, Mode::Test).unwrap();
    let train = net.forward_batch(&batch, Mode::Train(&mut seeded_rng(10))).unwrap();

    let width = 8;
    let mean_of = |v: &[f64]| -> Vec<f64> {
        let mut m = vec![0.0; width];
        for row in v.chunks_exact(width) {
            for (a, &b) in m.iter_mut().zip(row) {
                *a += b / rows as f64;
            }
        }
        m
    };
    // Relative error of the whole feature vector.
    let close = |got: &[f64], want: &[f64], what: &str| {
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let err = norm(&mut got.iter().zip(want).map(|(g, w)| g - w)) / norm(&mut want.iter().copied());
        assert!(err < 0.02, "{what}: relative error {err} ({got:?} vs {want:?})");
    };
    // First slot: fe6 is affine in the dropped fe4 activations.
    close(&mean_of(&train.pre[8]), &test.pre[8], "fe6 pre-activation");
    // Second slot: the dropped fe6 output averages to the undropped one.
    let relu6: Vec<f64> = train.pre[8].iter().map(|v| v.max(0.0)).collect();
    close(&mean_of(&train.inputs[9]), &mean_of(&relu6), "fe8 input");
}

#[test]
fn batch_gradient_is_the_mean_of_sample_gradients() {
    let topo = small_topology(21, 0.0);
    let net = PatchDnn::<f64>::init(topo.clone(), &mut seeded_rng(1)).unwrap();
    let (batch, targets) = random_batch::<f64>(topo.patch, 4, topo.classes, 2);
    let whole = net.backward(&net.forward_batch(&batch, Mode::Test).unwrap(), &targets).unwrap().flatten();
    let pp = topo.patch * topo.patch;
    let mut mean = vec![0.0; whole.len()];
    for i in 0..4 {
        let single = PatchBatch {
            patch: topo.patch,
            len: 1,
            planes: batch.planes.clone().map(|pl| pl[i * pp..(i + 1) * pp].to_vec()),
        };
        let g = net
            .backward(&net.forward_batch(&single, Mode::Test).unwrap(), &targets[i..i + 1])
            .unwrap()
            .flatten();
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / 4.0;
        }
    }
    assert!(max_relative_error(&whole, &mean, 1e-12) < 1e-10);
}

#[test]
fn tiny_learning_rate_does_not_increase_the_batch_loss() {
    for seed in 0..5 {
        let topo = small_topology(seed + 40, 0.0);
        let mut net = PatchDnn::<f64>::init(topo.clone(), &mut seeded_rng(seed)).unwrap();
        let (batch, targets) = random_batch::<f64>(topo.patch, 8, topo.classes, seed + 1);
        let before = mean_ce(&net, &batch, &targets);
        let grads = net.backward(&net.forward_batch(&batch, Mode::Test).unwrap(), &targets).unwrap();
        net.apply_gradients(&grads, 1e-8);
        let after = mean_ce(&net, &batch, &targets);
        assert!(after <= before, "seed {seed}: {after} > {before}");
    }
}

#[test]
fn single_sample_sgd_step_follows_the_finite_difference_gradient() {
    let topo = Topology {
        dropout: 0.0,
        ..small_topology(33, 0.0)
    };
    let mut net = PatchDnn::<f32>::init(topo.clone(), &mut seeded_rng(8)).unwrap();
    randomize_biases(&mut net, 88);
    let (b64, targets) = random_batch::<f64>(topo.patch, 1, topo.classes, 12);
    let to_f32 = |v: &Vec<f64>| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let sample = TriPlanarSample {
        axial: to_f32(&b64.planes[0]),
        coronal: to_f32(&b64.planes[1]),
        sagittal: to_f32(&b64.planes[2]),
        patch: topo.patch,
        center: VoxelIndex { x: 0, y: 0, z: 0 },
        label: Some(targets[0] as u16),
    };
    // The oracle sees exactly the f32 inputs and parameters.
    let exact = PatchBatch::<f64> {
        patch: topo.patch,
        len: 1,
        planes: [&sample.axial, &sample.coronal, &sample.sagittal]
            .map(|p| p.iter().map(|&x| f64::from(x)).collect()),
    };
    let numeric = fd_gradient(&net.cast::<f64>(), &exact, &targets, 1e-4);

    let eta = 0.1;
    let mut stepped = net.clone();
    let batch = MiniBatch {
        samples: vec![sample],
        entries: vec![0],
        rng_word_pos: 0,
    };
    let record = sgd_step(&mut stepped, &batch, eta, &mut seeded_rng(0)).unwrap();
    assert_eq!(record.step, 1);
    assert_eq!(stepped.step(), 1);
    for ((w0, w1), g) in net.parameters().iter().zip(stepped.parameters()).zip(&numeric) {
        let implied = f64::from(w0 - w1) / eta;
        assert!(
            (implied - g).abs() <= 1e-5 + 1e-3 * g.abs(),
            "implied gradient {implied} vs finite difference {g}"
        );
    }
}

#[test]
fn softmax_is_shift_invariant_in_class_choice() {
    let topo = small_topology(50, 0.0);
    let mut net = PatchDnn::<f64>::init(topo.clone(), &mut seeded_rng(2)).unwrap();
    let (batch, _) = random_batch::<f64>(topo.patch, 64, topo.classes, 3);
    let before = net.classify_batch(&batch).unwrap();
    for shift in [-1e3, -3.5, 0.25, 1e3] {
        let fe8 = net.layers_mut().last_mut().unwrap();
        let saved = fe8.bias.clone();
        fe8.bias.iter_mut().for_each(|b| *b += shift);
        assert_eq!(net.classify_batch(&batch).unwrap(), before, "shift {shift}");
        net.layers_mut().last_mut().unwrap().bias = saved;
    }
}

//! Oracles shared by the integration tests and the acceptance runner. Each is
//! written directly from the definition it checks, without calling the code
//! under test for the quantity being verified.

#![allow(dead_code)]

use patchseg::network::{PatchBatch, Topology};
use patchseg::patching::Normalization;
use patchseg::{seeded_rng, Mode, PatchDnn, RoiMask, Volume3D, Widths};
use rand::Rng;

/// Small topology with every width in `1..=8`, drawn from `seed`.
pub fn small_topology(seed: u64, dropout: f64) -> Topology {
    let mut rng = seeded_rng(seed);
    let mut w = || rng.random_range(1..=8usize);
    let widths = Widths {
        pathway: [w(), w()],
        trunk: [w(), w(), w()],
    };
    let mut rng = seeded_rng(seed ^ 0x9e37);
    Topology {
        patch: [3, 5][rng.random_range(0..2usize)],
        classes: rng.random_range(2..=4usize),
        widths,
        dropout,
        normalization: Normalization::RoiZScore,
    }
}

/// `n` random samples of patch side `p` with entries in `[-1, 1]` and
/// random targets below `classes`.
pub fn random_batch<T: patchseg::network::Real>(
    p: usize,
    n: usize,
    classes: usize,
    seed: u64,
) -> (PatchBatch<T>, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let mut plane = || (0..n * p * p).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect::<Vec<T>>();
    let planes = [plane(), plane(), plane()];
    let targets = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (
        PatchBatch {
            patch: p,
            len: n,
            planes,
        },
        targets,
    )
}

/// Replaces every bias with a draw from `[-0.2, 0.2]`. Zero biases put dead
/// rows exactly on a ReLU kink, where central differences are meaningless.
pub fn randomize_biases<T: patchseg::network::Real>(net: &mut PatchDnn<T>, seed: u64) {
    let mut rng = seeded_rng(seed);
    for l in net.layers_mut() {
        for b in l.bias.iter_mut() {
            *b = T::from_f64(rng.random_range(-0.2..0.2));
        }
    }
}

/// Mean cross-entropy recomputed from the test-mode probabilities.
pub fn mean_ce(net: &PatchDnn<f64>, batch: &PatchBatch<f64>, targets: &[usize]) -> f64 {
    let tape = net.forward_batch(batch, Mode::Test).unwrap();
    let c = net.classes();
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -tape.probs[i * c + t].ln())
        .sum::<f64>()
        / targets.len() as f64
}

/// Central finite-difference gradient of the mean cross-entropy with respect
/// to every parameter, in `parameters()` order.
pub fn fd_gradient(net: &PatchDnn<f64>, batch: &PatchBatch<f64>, targets: &[usize], h: f64) -> Vec<f64> {
    let theta = net.parameters();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(theta.len());
    let mut shifted = theta.clone();
    for i in 0..theta.len() {
        shifted[i] = theta[i] + h;
        probe.set_parameters(&shifted).unwrap();
        let up = mean_ce(&probe, batch, targets);
        shifted[i] = theta[i] - h;
        probe.set_parameters(&shifted).unwrap();
        let down = mean_ce(&probe, batch, targets);
        shifted[i] = theta[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Largest relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Worst relative error of the analytic gradient of a random small network
/// against central differences, in 64-bit arithmetic.
pub fn gradient_check_case(seed: u64) -> f64 {
    let topo = small_topology(seed, 0.0);
    let mut net = PatchDnn::<f64>::init(topo.clone(), &mut seeded_rng(seed + 1000)).unwrap();
    randomize_biases(&mut net, seed + 3000);
    let (batch, targets) = random_batch::<f64>(topo.patch, 4, topo.classes, seed + 2000);
    let tape = net.forward_batch(&batch, Mode::Test).unwrap();
    let analytic = net.backward(&tape, &targets).unwrap().flatten();
    let numeric = fd_gradient(&net, &batch, &targets, 1e-4);
    assert_eq!(analytic.len(), numeric.len());
    max_relative_error(&analytic, &numeric, 1e-6)
}

fn value(data: &[f32], dims: [usize; 3], x: isize, y: isize, z: isize) -> f32 {
    if x < 0 || y < 0 || z < 0 || x >= dims[0] as isize || y >= dims[1] as isize || z >= dims[2] as isize {
        0.0
    } else {
        data[x as usize + dims[0] * (y as usize + dims[1] * z as usize)]
    }
}

/// Exhaustive patch label fusion: every atlas, every in-bounds window offset,
/// squared differences summed in z, y, x order, candidates sorted by
/// `(ssd, label)`, weights `exp(−ssd / (min ssd + floor))`, lowest class wins
/// ties.
pub fn brute_force_fusion(
    target: &Volume3D,
    atlases: &[(&Volume3D, &Volume3D)],
    mask: &RoiMask,
    patch_side: usize,
    window_side: usize,
    floor: f64,
) -> Vec<u16> {
    let dims = target.dims();
    let t = target.intensities().unwrap();
    let classes = atlases
        .iter()
        .map(|(_, l)| l.classes() as usize)
        .max()
        .unwrap()
        .max(2);
    let (pr, wr) = ((patch_side / 2) as isize, (window_side / 2) as isize);
    let mut out = vec![0u16; target.len()];
    for z in 0..dims[2] as isize {
        for y in 0..dims[1] as isize {
            for x in 0..dims[0] as isize {
                let li = x as usize + dims[0] * (y as usize + dims[1] * z as usize);
                if !mask.voxels()[li] {
                    continue;
                }
                let mut cands: Vec<(f64, u16)> = Vec::new();
                for (img, lab) in atlases {
                    let a = img.intensities().unwrap();
                    let l = lab.labels().unwrap();
                    for wz in -wr..=wr {
                        for wy in -wr..=wr {
                            for wx in -wr..=wr {
                                let (ux, uy, uz) = (x + wx, y + wy, z + wz);
                                if ux < 0
                                    || uy < 0
                                    || uz < 0
                                    || ux >= dims[0] as isize
                                    || uy >= dims[1] as isize
                                    || uz >= dims[2] as isize
                                {
                                    continue;
                                }
                                let mut ssd = 0.0f64;
                                for pz in -pr..=pr {
                                    for py in -pr..=pr {
                                        for px in -pr..=pr {
                                            let d = f64::from(value(t, dims, x + px, y + py, z + pz))
                                                - f64::from(value(a, dims, ux + px, uy + py, uz + pz));
                                            ssd += d * d;
                                        }
                                    }
                                }
                                let ul = ux as usize + dims[0] * (uy as usize + dims[1] * uz as usize);
                                cands.push((ssd, l[ul]));
                            }
                        }
                    }
                }
                cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let h = cands[0].0 + floor;
                let mut votes = vec![0.0f64; classes];
                for &(d, label) in &cands {
                    votes[label as usize] += (-d / h).exp();
                }
                let mut best = 0;
                for c in 1..classes {
                    if votes[c] > votes[best] {
                        best = c;
                    }
                }
                out[li] = best as u16;
            }
        }
    }
    out
}

/// Random intensity volume and a label volume from thresholding it.
pub fn random_pair(dims: [usize; 3], seed: u64) -> (Volume3D, Volume3D) {
    let mut rng = seeded_rng(seed);
    let n = dims.iter().product();
    let img: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..10.0f32)).collect();
    let lab: Vec<u16> = img
        .iter()
        .map(|&v| if v > 7.0 { 2 } else if v > 5.0 { 1 } else { 0 })
        .collect();
    (
        Volume3D::intensity(dims, [1.0; 3], img).unwrap(),
        Volume3D::label(dims, [1.0; 3], lab, 3).unwrap(),
    )
}

//! The tri-pathway dense network.
//!
//! Topology, with layer names as stored in checkpoints:
//!
//! ```text
//! axial    p² ─ fe1 ─ fe2 ┐
//! coronal  p² ─ fe1 ─ fe2 ┼─ concat ─ fe3 ─ fe4 ─ drop5 ─ fe6 ─ drop7 ─ fe8 ─ softmax
//! sagittal p² ─ fe1 ─ fe2 ┘
//! ```
//!
//! Every feature layer is affine followed by ReLU except `fe8`, which emits
//! the class logits. Dropout is inverted: survivors are scaled by 1/(1−ε) in
//! training and test mode is a plain pass.
//!
//! All batch arithmetic runs as row-major matrix products, one row per sample.
//! Each output element of a product depends only on its own row, so results do
//! not change with the number of samples evaluated together.

use std::fmt::Debug;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{Normalization, TriPlanarSample};
use crate::SeededRng;

/// Floating-point element type of a network.
pub trait Real: num_traits::Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn widen(self) -> f64;

    /// `c = a · b` for strided row/column views, overwriting `c`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "matrix view exceeds buffer");
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            fn widen(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(c.len(), m, n, rsc, csc);
                if k == 0 {
                    for i in 0..m {
                        for j in 0..n {
                            c[i * rsc + j * csc] = 0.0;
                        }
                    }
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                // SAFETY: every view was bounds-checked against its buffer above,
                // and `c` is exclusively borrowed so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        0.0,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// Affine layer `out = W·in + b`, with `W` stored row-major `outputs × inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> DenseLayer<T> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
            activation,
        }
    }

    fn he_normal(inputs: usize, outputs: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        DenseLayer {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| T::from_f64(normal.sample(rng)))
                .collect(),
            bias: vec![T::zero(); outputs],
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.outputs * self.inputs + self.outputs
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// `pre = x·Wᵀ + b` for `rows` samples; `x` is read with row stride `rsx`.
    fn affine(&self, x: &[T], rsx: usize, rows: usize, pre: &mut [T]) {
        T::gemm(
            rows,
            self.inputs,
            self.outputs,
            x,
            rsx,
            1,
            &self.weights,
            1,
            self.inputs,
            pre,
            self.outputs,
            1,
        );
        for row in pre.chunks_exact_mut(self.outputs) {
            for (v, &b) in row.iter_mut().zip(&self.bias) {
                *v = *v + b;
            }
        }
    }
}

/// Hidden widths: two per pathway, three in the trunk before the logit layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub pathway: [usize; 2],
    pub trunk: [usize; 3],
}

impl Default for Widths {
    fn default() -> Self {
        Widths {
            pathway: [96, 48],
            trunk: [128, 64, 32],
        }
    }
}

impl Widths {
    fn validate(&self) -> Result<()> {
        if self.pathway.iter().chain(&self.trunk).any(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!("layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

pub const PLANES: [&str; 3] = ["axial", "coronal", "sagittal"];
pub const LAYER_NAMES: [&str; 10] = [
    "axial.fe1",
    "axial.fe2",
    "coronal.fe1",
    "coronal.fe2",
    "sagittal.fe1",
    "sagittal.fe2",
    "fe3",
    "fe4",
    "fe6",
    "fe8",
];
const TRUNK: usize = 6;

/// Static description of a network, as recorded in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub patch: usize,
    pub classes: usize,
    pub widths: Widths,
    pub dropout: f64,
    pub normalization: Normalization,
}

impl Topology {
    pub fn validate(&self) -> Result<()> {
        crate::patching::check_patch_size(self.patch)?;
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        self.widths.validate()
    }

    /// `(inputs, outputs, activation)` for every layer in canonical order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, Activation)> {
        let w = &self.widths;
        let mut shapes = Vec::with_capacity(10);
        for _ in PLANES {
            shapes.push((self.patch * self.patch, w.pathway[0], Activation::Relu));
            shapes.push((w.pathway[0], w.pathway[1], Activation::Relu));
        }
        shapes.push((3 * w.pathway[1], w.trunk[0], Activation::Relu));
        shapes.push((w.trunk[0], w.trunk[1], Activation::Relu));
        shapes.push((w.trunk[1], w.trunk[2], Activation::Relu));
        shapes.push((w.trunk[2], self.classes, Activation::Linear));
        shapes
    }

    /// Σ (out·in + out) over all layers, pathway layers counted once per plane.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o, _)| o * i + o).sum()
    }
}

/// Class probabilities for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution(pub Vec<f64>);

impl LabelDistribution {
    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub enum Mode<'a> {
    Train(&'a mut SeededRng),
    Test,
}

/// Patches for `len` samples, one row-major `len × p²` matrix per plane.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch<T> {
    pub patch: usize,
    pub len: usize,
    pub planes: [Vec<T>; 3],
}

impl<T: Real> PatchBatch<T> {
    pub fn with_capacity(patch: usize, capacity: usize) -> Self {
        let plane = || Vec::with_capacity(capacity * patch * patch);
        PatchBatch {
            patch,
            len: 0,
            planes: [plane(), plane(), plane()],
        }
    }

    pub fn push(&mut self, sample: &TriPlanarSample) -> Result<()> {
        if sample.patch != self.patch {
            return Err(Error::PatchSizeMismatch {
                expected: self.patch,
                found: sample.patch,
            });
        }
        for (dst, src) in self.planes.iter_mut().zip(sample.planes()) {
            dst.extend(src.iter().map(|&v| T::from_f32(v)));
        }
        self.len += 1;
        Ok(())
    }

    pub fn from_samples(patch: usize, samples: &[TriPlanarSample]) -> Result<Self> {
        let mut batch = PatchBatch::with_capacity(patch, samples.len());
        for s in samples {
            batch.push(s)?;
        }
        Ok(batch)
    }

    pub fn clear(&mut self) {
        self.len = 0;
        self.planes.iter_mut().for_each(Vec::clear);
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    pub rows: usize,
    /// Input matrix of each layer, canonical order. Pathway inputs and the
    /// trunk inputs after dropout are stored as they were consumed.
    pub inputs: Vec<Vec<T>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<T>>,
    /// Dropout scale factors (0 or 1/(1−ε)) for the slots after fe4 and fe6.
    pub dropout_masks: [Option<Vec<T>>; 2],
    /// Softmax output, `rows × classes`.
    pub probs: Vec<T>,
    signature: (usize, usize, Widths),
}

impl<T: Real> Tape<T> {
    pub fn distribution(&self, row: usize, classes: usize) -> LabelDistribution {
        LabelDistribution(
            self.probs[row * classes..(row + 1) * classes]
                .iter()
                .map(|v| v.widen())
                .collect(),
        )
    }
}

/// Gradients with the same layout as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.bias)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Tri-planar patch network. `T` is `f32` for training and inference; `f64`
/// instances serve numerical checks.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDnn<T = f32> {
    topology: Topology,
    layers: Vec<DenseLayer<T>>,
    step: u64,
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if *x <= T::zero() {
            *x = T::zero();
        }
    }
}

impl<T: Real> PatchDnn<T> {
    /// He-initialised network: weights ~ N(0, 2/fan_in), zero biases.
    pub fn init(topology: Topology, rng: &mut SeededRng) -> Result<Self> {
        topology.validate()?;
        let layers = topology
            .layer_shapes()
            .into_iter()
            .map(|(i, o, a)| DenseLayer::he_normal(i, o, a, rng))
            .collect();
        Ok(PatchDnn {
            topology,
            layers,
            step: 0,
        })
    }

    /// All parameters zero; every input maps to the uniform distribution.
    pub fn zeros(topology: Topology) -> Result<Self> {
        topology.validate()?;
        let layers = topology
            .layer_shapes()
            .into_iter()
            .map(|(i, o, a)| DenseLayer::zeros(i, o, a))
            .collect();
        Ok(PatchDnn {
            topology,
            layers,
            step: 0,
        })
    }

    /// Builds a network from explicit layers, checked against `topology`.
    pub fn from_layers(topology: Topology, layers: Vec<DenseLayer<T>>) -> Result<Self> {
        topology.validate()?;
        let shapes = topology.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for ((layer, &(i, o, a)), name) in layers.iter().zip(&shapes).zip(LAYER_NAMES) {
            if layer.inputs != i
                || layer.outputs != o
                || layer.activation != a
                || layer.weights.len() != i * o
                || layer.bias.len() != o
            {
                return Err(Error::InvalidConfig(format!(
                    "layer {name} does not match the topology ({i} -> {o}, {a:?})"
                )));
            }
        }
        Ok(PatchDnn {
            topology,
            layers,
            step: 0,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn patch(&self) -> usize {
        self.topology.patch
    }

    pub fn classes(&self) -> usize {
        self.topology.classes
    }

    pub fn dropout(&self) -> f64 {
        self.topology.dropout
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        let mut t = self.topology.clone();
        t.dropout = rate;
        t.validate()?;
        self.topology = t;
        Ok(())
    }

    pub fn normalization(&self) -> Normalization {
        self.topology.normalization
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut rest = values;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Real>(&self) -> PatchDnn<U> {
        PatchDnn {
            topology: self.topology.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: l.weights.iter().map(|v| U::from_f64(v.widen())).collect(),
                    bias: l.bias.iter().map(|v| U::from_f64(v.widen())).collect(),
                    activation: l.activation,
                })
                .collect(),
            step: self.step,
        }
    }

    fn signature(&self) -> (usize, usize, Widths) {
        (self.topology.patch, self.topology.classes, self.topology.widths)
    }

    /// Forward pass over a batch, keeping everything backward needs.
    pub fn forward_batch(&self, batch: &PatchBatch<T>, mode: Mode<'_>) -> Result<Tape<T>> {
        if batch.patch != self.topology.patch {
            return Err(Error::PatchSizeMismatch {
                expected: self.topology.patch,
                found: batch.patch,
            });
        }
        let n = batch.len;
        let w = self.topology.widths;
        let merged_width = 3 * w.pathway[1];
        let mut inputs: Vec<Vec<T>> = Vec::with_capacity(10);
        let mut pre: Vec<Vec<T>> = Vec::with_capacity(10);
        let mut merged = vec![T::zero(); n * merged_width];

        for (p, plane) in batch.planes.iter().enumerate() {
            let first = &self.layers[2 * p];
            let second = &self.layers[2 * p + 1];
            let mut pre1 = vec![T::zero(); n * first.outputs];
            first.affine(plane, first.inputs, n, &mut pre1);
            let mut act1 = pre1.clone();
            relu_in_place(&mut act1);

            let mut pre2 = vec![T::zero(); n * second.outputs];
            second.affine(&act1, second.inputs, n, &mut pre2);
            let offset = p * w.pathway[1];
            for (row, src) in pre2.chunks_exact(second.outputs).enumerate() {
                let dst = &mut merged[row * merged_width + offset..][..second.outputs];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = if s > T::zero() { s } else { T::zero() };
                }
            }
            inputs.push(plane.clone());
            pre.push(pre1);
            inputs.push(act1);
            pre.push(pre2);
        }

        let eps = self.topology.dropout;
        let mut rng = match mode {
            Mode::Train(rng) if eps > 0.0 => Some(rng),
            _ => None,
        };
        let mut dropout_masks: [Option<Vec<T>>; 2] = [None, None];

        let mut x = merged;
        for t in 0..4 {
            let layer = &self.layers[TRUNK + t];
            let mut z = vec![T::zero(); n * layer.outputs];
            layer.affine(&x, layer.inputs, n, &mut z);
            inputs.push(x);
            let mut a = z.clone();
            if layer.activation == Activation::Relu {
                relu_in_place(&mut a);
            }
            // Dropout slots follow fe4 (t = 1) and fe6 (t = 2).
            if let (Some(rng), 1 | 2) = (rng.as_deref_mut(), t) {
                let keep = T::from_f64(1.0 / (1.0 - eps));
                let mask: Vec<T> = (0..a.len())
                    .map(|_| {
                        if rng.random::<f64>() < eps {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                for (v, &m) in a.iter_mut().zip(&mask) {
                    *v = *v * m;
                }
                dropout_masks[t - 1] = Some(mask);
            }
            pre.push(z);
            x = a;
        }

        let classes = self.topology.classes;
        let mut probs = x;
        for row in probs.chunks_exact_mut(classes) {
            softmax_in_place(row);
        }
        Ok(Tape {
            rows: n,
            inputs,
            pre,
            dropout_masks,
            probs,
            signature: self.signature(),
        })
    }

    /// Single-sample forward pass.
    pub fn forward(&self, sample: &TriPlanarSample, mode: Mode<'_>) -> Result<(LabelDistribution, Tape<T>)> {
        let batch = PatchBatch::from_samples(sample.patch, std::slice::from_ref(sample))?;
        let tape = self.forward_batch(&batch, mode)?;
        Ok((tape.distribution(0, self.topology.classes), tape))
    }

    /// Test-mode class of every row of `batch`.
    pub fn classify_batch(&self, batch: &PatchBatch<T>) -> Result<Vec<usize>> {
        let tape = self.forward_batch(batch, Mode::Test)?;
        Ok(tape
            .probs
            .chunks_exact(self.topology.classes)
            .map(argmax)
            .collect())
    }

    pub fn classify(&self, sample: &TriPlanarSample) -> Result<usize> {
        Ok(self.forward(sample, Mode::Test)?.0.argmax())
    }

    /// Mean cross-entropy of the tape's rows against `targets`.
    pub fn loss(&self, tape: &Tape<T>, targets: &[usize]) -> Result<f64> {
        self.check_tape(tape, targets)?;
        let c = self.topology.classes;
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| cross_entropy_row(&tape.pre[9][i * c..(i + 1) * c], t))
            .sum();
        Ok(total / targets.len().max(1) as f64)
    }

    fn check_tape(&self, tape: &Tape<T>, targets: &[usize]) -> Result<()> {
        if tape.signature != self.signature() || tape.inputs.len() != 10 {
            return Err(Error::InvalidConfig("tape was recorded by a different network".into()));
        }
        if targets.len() != tape.rows {
            return Err(Error::InvalidConfig(format!(
                "{} targets for {} taped samples",
                targets.len(),
                tape.rows
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= self.topology.classes) {
            return Err(Error::InvalidLabel(format!(
                "target {t} outside [0, {})",
                self.topology.classes
            )));
        }
        Ok(())
    }

    /// Exact gradient of the mean cross-entropy −log L_target over the taped
    /// samples, with respect to every weight and bias.
    pub fn backward(&self, tape: &Tape<T>, targets: &[usize]) -> Result<Gradients<T>> {
        self.check_tape(tape, targets)?;
        let n = tape.rows;
        let c = self.topology.classes;
        let scale = T::from_f64(1.0 / n.max(1) as f64);

        let mut weights: Vec<Vec<T>> = vec![Vec::new(); 10];
        let mut bias: Vec<Vec<T>> = vec![Vec::new(); 10];

        // d(mean CE)/d(logits) = (softmax − onehot) / n
        let mut dz = tape.probs.clone();
        for (row, &t) in dz.chunks_exact_mut(c).zip(targets) {
            row[t] = row[t] - T::one();
            for v in row.iter_mut() {
                *v = *v * scale;
            }
        }

        for t in (0..4).rev() {
            let li = TRUNK + t;
            let layer = &self.layers[li];
            let (gw, gb) = layer_param_grads(layer, &tape.inputs[li], &dz, n);
            weights[li] = gw;
            bias[li] = gb;
            let mut dx = input_grad(layer, &dz, n);
            if t == 0 {
                dz = dx;
                break;
            }
            // The input of trunk layer t is the activation of layer t−1, after
            // the dropout slot when one follows layer t−1.
            if let Some(mask) = match t {
                2 => tape.dropout_masks[0].as_ref(),
                3 => tape.dropout_masks[1].as_ref(),
                _ => None,
            } {
                for (g, &m) in dx.iter_mut().zip(mask) {
                    *g = *g * m;
                }
            }
            relu_backward(&mut dx, &tape.pre[li - 1]);
            dz = dx;
        }

        // `dz` now holds the gradient w.r.t. the concatenated pathway outputs.
        let w = self.topology.widths;
        let merged_width = 3 * w.pathway[1];
        for p in 0..3 {
            let second = 2 * p + 1;
            let first = 2 * p;
            let mut d2 = vec![T::zero(); n * w.pathway[1]];
            for (row, dst) in d2.chunks_exact_mut(w.pathway[1]).enumerate() {
                dst.copy_from_slice(&dz[row * merged_width + p * w.pathway[1]..][..w.pathway[1]]);
            }
            relu_backward(&mut d2, &tape.pre[second]);
            let (gw, gb) = layer_param_grads(&self.layers[second], &tape.inputs[second], &d2, n);
            weights[second] = gw;
            bias[second] = gb;
            let mut d1 = input_grad(&self.layers[second], &d2, n);
            relu_backward(&mut d1, &tape.pre[first]);
            let (gw, gb) = layer_param_grads(&self.layers[first], &tape.inputs[first], &d1, n);
            weights[first] = gw;
            bias[first] = gb;
        }

        Ok(Gradients { weights, bias })
    }

    /// `θ ← θ − η·g`.
    pub fn apply_gradients(&mut self, grads: &Gradients<T>, learning_rate: T) {
        for (l, (gw, gb)) in self.layers.iter_mut().zip(grads.weights.iter().zip(&grads.bias)) {
            for (w, &g) in l.weights.iter_mut().zip(gw) {
                *w = *w - learning_rate * g;
            }
            for (b, &g) in l.bias.iter_mut().zip(gb) {
                *b = *b - learning_rate * g;
            }
        }
    }
}

fn relu_backward<T: Real>(grad: &mut [T], pre: &[T]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= T::zero() {
            *g = T::zero();
        }
    }
}

/// `(dW, db)` for `dz` (`n × out`) and the layer input `x` (`n × in`).
fn layer_param_grads<T: Real>(layer: &DenseLayer<T>, x: &[T], dz: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let (i, o) = (layer.inputs, layer.outputs);
    let mut gw = vec![T::zero(); o * i];
    // dW = dzᵀ · x
    T::gemm(o, n, i, dz, 1, o, x, i, 1, &mut gw, i, 1);
    let mut gb = vec![T::zero(); o];
    for row in dz.chunks_exact(o) {
        for (b, &d) in gb.iter_mut().zip(row) {
            *b = *b + d;
        }
    }
    (gw, gb)
}

/// `dx = dz · W`.
fn input_grad<T: Real>(layer: &DenseLayer<T>, dz: &[T], n: usize) -> Vec<T> {
    let (i, o) = (layer.inputs, layer.outputs);
    let mut dx = vec![T::zero(); n * i];
    T::gemm(n, o, i, dz, o, 1, &layer.weights, i, 1, &mut dx, i, 1);
    dx
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// −log softmax(logits)[target] via log-sum-exp, evaluated in f64.
pub(crate) fn cross_entropy_row<T: Real>(logits: &[T], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.widen()));
    let lse = max + logits.iter().map(|v| (v.widen() - max).exp()).sum::<f64>().ln();
    lse - logits[target].widen()
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDNN0001";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    topology: Topology,
    step: u64,
    layers: Vec<LayerMeta>,
    parameter_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerMeta {
    name: String,
    inputs: usize,
    outputs: usize,
    activation: Activation,
}

/// Serialises a network: magic, version (u32 LE), metadata JSON length
/// (u32 LE), metadata JSON, then every parameter as f32 LE in canonical layer
/// order, each layer's row-major weights followed by its biases.
pub fn encode_checkpoint(net: &PatchDnn<f32>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        topology: net.topology.clone(),
        step: net.step,
        layers: net
            .layers
            .iter()
            .zip(LAYER_NAMES)
            .map(|(l, name)| LayerMeta {
                name: name.to_string(),
                inputs: l.inputs,
                outputs: l.outputs,
                activation: l.activation,
            })
            .collect(),
        parameter_count: net.param_count(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * meta.parameter_count);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in net.parameters() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PatchDnn<f32>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let meta_bytes = bytes
        .get(16..16 + meta_len)
        .ok_or_else(|| Error::Checkpoint("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let payload = &bytes[16 + meta_len..];
    let mut net = PatchDnn::<f32>::zeros(meta.topology)
        .map_err(|e| Error::Checkpoint(format!("topology: {e}")))?;
    if meta.parameter_count != net.param_count() || meta.layers.len() != net.layers.len() {
        return Err(Error::Checkpoint("metadata disagrees with topology".into()));
    }
    if payload.len() != 4 * net.param_count() {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            4 * net.param_count()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    net.set_parameters(&values)?;
    net.step = meta.step;
    Ok(net)
}

pub fn save_checkpoint(net: &PatchDnn<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(net)?;
    File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(&bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PatchDnn<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! ROI masks, tri-planar patch extraction, the pruned training pool and
//! class-balanced mini-batch sampling.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume3D, VoxelIndex};
use crate::SeededRng;

/// Binary region of interest on a volume grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<bool>,
    radius: usize,
}

impl RoiMask {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<bool>, radius: usize) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::PayloadMismatch {
                expected: n,
                found: voxels.len(),
            });
        }
        Ok(RoiMask {
            dims,
            spacing,
            voxels,
            radius,
        })
    }

    /// Mask covering the whole grid of `vol`.
    pub fn full(vol: &Volume3D) -> Self {
        RoiMask {
            dims: vol.dims(),
            spacing: vol.spacing(),
            voxels: vec![true; vol.len()],
            radius: 0,
        }
    }

    pub fn empty(vol: &Volume3D) -> Self {
        RoiMask {
            dims: vol.dims(),
            spacing: vol.spacing(),
            voxels: vec![false; vol.len()],
            radius: 0,
        }
    }

    /// Any non-zero voxel of `vol` is inside the mask.
    pub fn from_volume(vol: &Volume3D) -> Self {
        let voxels = match vol.data() {
            crate::volume::VolumeData::Intensity(v) => v.iter().map(|&x| x != 0.0).collect(),
            crate::volume::VolumeData::Label { data, .. } => data.iter().map(|&x| x != 0).collect(),
        };
        RoiMask {
            dims: vol.dims(),
            spacing: vol.spacing(),
            voxels,
            radius: 0,
        }
    }

    /// Two-class label volume, 1 inside the mask.
    pub fn to_volume(&self) -> Volume3D {
        let data = self.voxels.iter().map(|&b| u16::from(b)).collect();
        Volume3D::label(self.dims, self.spacing, data, 2).expect("mask geometry is valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&b| b).count()
    }

    pub fn contains_linear(&self, i: usize) -> bool {
        self.voxels[i]
    }

    /// Linear indices of the masked voxels, ascending.
    pub fn linear_indices(&self) -> Vec<usize> {
        self.voxels
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn check_grid(&self, vol: &Volume3D, what: &str) -> Result<()> {
        if vol.dims() != self.dims {
            return Err(Error::DimsMismatch(format!(
                "{what} {:?} vs mask {:?}",
                vol.dims(),
                self.dims
            )));
        }
        Ok(())
    }
}

/// One-dimensional running max over a window of `radius` on each side, applied
/// along `axis` of a boolean grid.
fn dilate_axis(src: &[bool], dims: [usize; 3], axis: usize, radius: usize) -> Vec<bool> {
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let len = dims[axis];
    let mut out = vec![false; src.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = (i / stride) % len;
        let lo = pos.saturating_sub(radius);
        let hi = (pos + radius).min(len - 1);
        let base = i - pos * stride;
        *o = (lo..=hi).any(|q| src[base + q * stride]);
    }
    out
}

/// Union of every atlas's foreground (label > 0), dilated by a Chebyshev ball
/// of `radius` voxels and clipped at the grid border.
pub fn build_roi_mask(atlas_labels: &[&Volume3D], radius: usize) -> Result<RoiMask> {
    let first = atlas_labels.first().ok_or(Error::Empty("atlas list"))?;
    let dims = first.dims();
    let mut union = vec![false; first.len()];
    for atlas in atlas_labels {
        first.check_same_grid(atlas, "atlas labels")?;
        let labels = atlas.require_labels()?;
        for (u, &l) in union.iter_mut().zip(labels) {
            *u |= l > 0;
        }
    }
    // A Chebyshev ball is a cube, so the dilation separates by axis.
    let mut voxels = union;
    if radius > 0 {
        for axis in 0..3 {
            voxels = dilate_axis(&voxels, dims, axis, radius);
        }
    }
    Ok(RoiMask {
        dims,
        spacing: first.spacing(),
        voxels,
        radius,
    })
}

/// How patch intensities are standardised before they reach the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Per-image z-score using the mean and standard deviation of the masked ROI.
    #[default]
    RoiZScore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZScore {
    pub mean: f64,
    pub sd: f64,
}

/// Mean and population standard deviation of `image` over the mask. Falls back
/// to the identity transform for empty masks and a unit scale for flat ROIs.
pub fn roi_zscore(image: &Volume3D, mask: &RoiMask) -> Result<ZScore> {
    mask.check_grid(image, "image")?;
    let data = image.require_intensities()?;
    let (mut n, mut sum, mut sumsq) = (0usize, 0.0f64, 0.0f64);
    for (&v, &m) in data.iter().zip(mask.voxels()) {
        if m {
            let v = f64::from(v);
            n += 1;
            sum += v;
            sumsq += v * v;
        }
    }
    if n == 0 {
        return Ok(ZScore { mean: 0.0, sd: 1.0 });
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    Ok(ZScore { mean, sd })
}

/// Returns a copy of the intensities with `mode` applied.
pub fn normalize_image(image: &Volume3D, mask: &RoiMask, mode: Normalization) -> Result<Vec<f32>> {
    let data = image.require_intensities()?;
    match mode {
        Normalization::None => Ok(data.to_vec()),
        Normalization::RoiZScore => {
            let z = roi_zscore(image, mask)?;
            Ok(data
                .iter()
                .map(|&v| ((f64::from(v) - z.mean) / z.sd) as f32)
                .collect())
        }
    }
}

/// Three orthogonal square patches centred on one voxel.
///
/// Patches are row-major `patch × patch`. Axial spans (x, y) at fixed z with
/// rows along y; coronal spans (x, z) at fixed y with rows along z; sagittal
/// spans (y, z) at fixed x with rows along z.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlanarSample {
    pub axial: Vec<f32>,
    pub coronal: Vec<f32>,
    pub sagittal: Vec<f32>,
    pub patch: usize,
    pub center: VoxelIndex,
    pub label: Option<u16>,
}

impl TriPlanarSample {
    pub fn planes(&self) -> [&[f32]; 3] {
        [&self.axial, &self.coronal, &self.sagittal]
    }
}

pub(crate) fn check_patch_size(p: usize) -> Result<()> {
    if p < 3 || p % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "patch side must be odd and >= 3, got {p}"
        )));
    }
    Ok(())
}

/// Writes the three planes for `center` into `out`, zero-filling cells that
/// fall outside the grid. `out` slices must each hold `p * p` values.
pub(crate) fn extract_planes_into(
    data: &[f32],
    dims: [usize; 3],
    center: VoxelIndex,
    p: usize,
    out: [&mut [f32]; 3],
) {
    let h = (p / 2) as isize;
    let [nx, ny, nz] = dims.map(|d| d as isize);
    let (cx, cy, cz) = (center.x as isize, center.y as isize, center.z as isize);
    let at = |x: isize, y: isize, z: isize| -> f32 {
        if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
            0.0
        } else {
            data[(x + nx * (y + ny * z)) as usize]
        }
    };
    let [axial, coronal, sagittal] = out;
    for r in 0..p as isize {
        for c in 0..p as isize {
            let k = (r * p as isize + c) as usize;
            axial[k] = at(cx + c - h, cy + r - h, cz);
            coronal[k] = at(cx + c - h, cy, cz + r - h);
            sagittal[k] = at(cx, cy + c - h, cz + r - h);
        }
    }
}

pub(crate) fn extract_from_slice(
    data: &[f32],
    dims: [usize; 3],
    center: VoxelIndex,
    p: usize,
) -> TriPlanarSample {
    let mut axial = vec![0.0; p * p];
    let mut coronal = vec![0.0; p * p];
    let mut sagittal = vec![0.0; p * p];
    extract_planes_into(data, dims, center, p, [&mut axial, &mut coronal, &mut sagittal]);
    TriPlanarSample {
        axial,
        coronal,
        sagittal,
        patch: p,
        center,
        label: None,
    }
}

/// Extracts the tri-planar patches of side `p` around `v`; label unset.
pub fn extract_triplanar(vol: &Volume3D, v: VoxelIndex, p: usize) -> Result<TriPlanarSample> {
    check_patch_size(p)?;
    if !vol.contains(v) {
        return Err(Error::OutOfRange {
            x: v.x,
            y: v.y,
            z: v.z,
            dims: vol.dims(),
        });
    }
    let data = vol.require_intensities()?;
    Ok(extract_from_slice(data, vol.dims(), v, p))
}

/// One training entry: a masked voxel of one atlas and its supervisory label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub image_id: u32,
    pub x: u32,
    pub y: u32,
    pub z: u32,
    pub label: u16,
}

impl PoolEntry {
    pub fn voxel(&self) -> VoxelIndex {
        VoxelIndex::new(self.x as usize, self.y as usize, self.z as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolOptions {
    pub normalization: Normalization,
    /// Network class count. With 2 classes every label > 0 becomes class 1.
    pub classes: u32,
}

impl Default for PoolOptions {
    fn default() -> Self {
        PoolOptions {
            normalization: Normalization::RoiZScore,
            classes: 2,
        }
    }
}

/// Maps an atlas label to a network class for a network with `classes` outputs.
pub fn class_of_label(label: u16, classes: u32) -> Result<u16> {
    if classes == 2 {
        Ok(u16::from(label > 0))
    } else if u32::from(label) < classes {
        Ok(label)
    } else {
        Err(Error::InvalidLabel(format!(
            "label {label} does not fit a {classes}-class network"
        )))
    }
}

/// Every masked voxel of every atlas, split into foreground and background.
/// Patches are cut on demand from the normalised images.
#[derive(Clone, Debug)]
pub struct TrainingPool {
    dims: [usize; 3],
    patch: usize,
    images: Vec<Vec<f32>>,
    entries: Vec<PoolEntry>,
    foreground: Vec<u32>,
    background: Vec<u32>,
}

pub fn build_training_pool(
    images: &[&Volume3D],
    labels: &[&Volume3D],
    mask: &RoiMask,
    p: usize,
    options: &PoolOptions,
) -> Result<TrainingPool> {
    check_patch_size(p)?;
    if images.len() != labels.len() {
        return Err(Error::DimsMismatch(format!(
            "{} images but {} label maps",
            images.len(),
            labels.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Empty("atlas list"));
    }
    let masked = mask.linear_indices();
    let mut normalized = Vec::with_capacity(images.len());
    let mut entries = Vec::with_capacity(masked.len() * images.len());
    for (id, (image, label)) in images.iter().zip(labels).enumerate() {
        mask.check_grid(image, "image")?;
        mask.check_grid(label, "labels")?;
        let lab = label.require_labels()?;
        normalized.push(normalize_image(image, mask, options.normalization)?);
        for &i in &masked {
            let v = image.voxel_of(i);
            entries.push(PoolEntry {
                image_id: id as u32,
                x: v.x as u32,
                y: v.y as u32,
                z: v.z as u32,
                label: class_of_label(lab[i], options.classes)?,
            });
        }
    }
    Ok(TrainingPool::assemble(mask.dims(), p, normalized, entries))
}

impl TrainingPool {
    fn assemble(dims: [usize; 3], patch: usize, images: Vec<Vec<f32>>, entries: Vec<PoolEntry>) -> Self {
        let (foreground, background): (Vec<u32>, Vec<u32>) =
            (0..entries.len() as u32).partition(|&i| entries[i as usize].label > 0);
        TrainingPool {
            dims,
            patch,
            images,
            entries,
            foreground,
            background,
        }
    }

    /// A pool restricted to the given entry indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<TrainingPool> {
        let entries = indices
            .iter()
            .map(|&i| {
                self.entries
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::InvalidConfig(format!("pool entry {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingPool::assemble(
            self.dims,
            self.patch,
            self.images.clone(),
            entries,
        ))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn foreground_len(&self) -> usize {
        self.foreground.len()
    }

    pub fn background_len(&self) -> usize {
        self.background.len()
    }

    pub fn foreground(&self) -> &[u32] {
        &self.foreground
    }

    pub fn background(&self) -> &[u32] {
        &self.background
    }

    /// Materialises the labelled sample for entry `i`.
    pub fn sample(&self, i: usize) -> TriPlanarSample {
        let e = self.entries[i];
        let mut s = extract_from_slice(
            &self.images[e.image_id as usize],
            self.dims,
            e.voxel(),
            self.patch,
        );
        s.label = Some(e.label);
        s
    }

    /// Writes one JSON record per entry.
    pub fn write_manifest(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")
                .map_err(|err| Error::io("<pool manifest>", err))?;
        }
        Ok(())
    }
}

/// δ class-balanced samples plus the generator position they were drawn at.
#[derive(Clone, Debug)]
pub struct MiniBatch {
    pub samples: Vec<TriPlanarSample>,
    pub entries: Vec<u32>,
    pub rng_word_pos: u128,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| usize::from(s.label.unwrap_or(0)))
            .collect()
    }
}

/// Draws ⌈δ/2⌉ foreground and ⌊δ/2⌋ background entries uniformly with
/// replacement. Foreground draws come first.
pub fn next_batch(pool: &TrainingPool, batch: usize, rng: &mut SeededRng) -> Result<MiniBatch> {
    if batch < 2 {
        return Err(Error::InvalidConfig(format!("batch size must be >= 2, got {batch}")));
    }
    if pool.foreground.is_empty() {
        return Err(Error::Empty("foreground sub-pool"));
    }
    if pool.background.is_empty() {
        return Err(Error::Empty("background sub-pool"));
    }
    let rng_word_pos = rng.get_word_pos();
    let n_fg = batch.div_ceil(2);
    let mut entries = Vec::with_capacity(batch);
    for k in 0..batch {
        let sub = if k < n_fg { &pool.foreground } else { &pool.background };
        let j = rng.random_range(0..sub.len() as u64) as usize;
        entries.push(sub[j]);
    }
    let samples = entries.iter().map(|&i| pool.sample(i as usize)).collect();
    Ok(MiniBatch {
        samples,
        entries,
        rng_word_pos,
    })
}

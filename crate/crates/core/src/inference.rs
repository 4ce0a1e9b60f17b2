//! Voxel-wise segmentation of a target image with a trained network.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{PatchBatch, PatchDnn};
use crate::patching::{check_patch_size, extract_from_slice, extract_planes_into, normalize_image, RoiMask};
use crate::volume::Volume3D;

pub const DEFAULT_BLOCK: usize = 512;

#[derive(Clone, Debug)]
pub struct SegmentationResult {
    pub labels: Volume3D,
    pub voxels_classified: usize,
    /// Patch extraction plus classification, excluding any file I/O.
    pub seconds: f64,
}

/// Sidecar written next to a saved segmentation.
#[derive(Clone, Debug, Serialize)]
pub struct SegmentationSidecar {
    pub voxels_classified: usize,
    pub seconds: f64,
    pub io_seconds: f64,
    pub checkpoint: String,
    pub checkpoint_step: u64,
    pub method: String,
}

fn prepare(net: &PatchDnn<f32>, target: &Volume3D, mask: &RoiMask) -> Result<Vec<f32>> {
    mask.check_grid(target, "target")?;
    check_patch_size(net.patch())?;
    normalize_image(target, mask, net.normalization())
}

fn finish(target: &Volume3D, classes: usize, masked: &[usize], labels: &[usize]) -> Result<Volume3D> {
    let mut out = target.zeros_like_label(classes as u32);
    let data = out.labels_mut().expect("label volume");
    for (&i, &l) in masked.iter().zip(labels) {
        data[i] = l as u16;
    }
    Ok(out)
}

/// Classifies every masked voxel one at a time; voxels outside the mask are
/// background.
pub fn segment(net: &PatchDnn<f32>, target: &Volume3D, mask: &RoiMask) -> Result<SegmentationResult> {
    let started = Instant::now();
    let data = prepare(net, target, mask)?;
    let masked = mask.linear_indices();
    let p = net.patch();
    let labels = masked
        .iter()
        .map(|&i| {
            let sample = extract_from_slice(&data, target.dims(), target.voxel_of(i), p);
            net.classify(&sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentationResult {
        labels: finish(target, net.classes(), &masked, &labels)?,
        voxels_classified: masked.len(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Same labels as [`segment`], evaluated `block` voxels at a time so each layer
/// is one matrix product per block. Blocks run on the rayon pool.
pub fn segment_batched(
    net: &PatchDnn<f32>,
    target: &Volume3D,
    mask: &RoiMask,
    block: usize,
) -> Result<SegmentationResult> {
    if block == 0 {
        return Err(Error::InvalidConfig("batch width must be >= 1".into()));
    }
    let started = Instant::now();
    let data = prepare(net, target, mask)?;
    let masked = mask.linear_indices();
    let p = net.patch();
    let dims = target.dims();
    let pp = p * p;
    let labels: Vec<usize> = masked
        .par_chunks(block)
        .map(|chunk| {
            let mut batch = PatchBatch::<f32> {
                patch: p,
                len: chunk.len(),
                planes: [
                    vec![0.0; chunk.len() * pp],
                    vec![0.0; chunk.len() * pp],
                    vec![0.0; chunk.len() * pp],
                ],
            };
            let [a, c, s] = &mut batch.planes;
            for (k, &i) in chunk.iter().enumerate() {
                let range = k * pp..(k + 1) * pp;
                extract_planes_into(
                    &data,
                    dims,
                    target.voxel_of(i),
                    p,
                    [&mut a[range.clone()], &mut c[range.clone()], &mut s[range]],
                );
            }
            net.classify_batch(&batch)
        })
        .collect::<Result<Vec<Vec<usize>>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(SegmentationResult {
        labels: finish(target, net.classes(), &masked, &labels)?,
        voxels_classified: masked.len(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

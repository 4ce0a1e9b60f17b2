//! Patch-based label fusion baseline.
//!
//! Atlases are ranked by SSD against the target over the ROI. For each masked
//! target voxel, every atlas patch centred inside the search window is weighted
//! by `exp(−SSD / h)` and votes for its centre label.
//!
//! Candidates are sorted by `(SSD, label)` before any summation, so the result
//! does not depend on the order atlases are supplied in.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::SegmentationResult;
use crate::patching::RoiMask;
use crate::volume::Volume3D;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum Bandwidth {
    /// `h` = smallest candidate SSD at the voxel plus `floor`.
    Adaptive { floor: f64 },
    Fixed { h: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PbsConfig {
    /// Side of the cubic patch (odd).
    pub patch_side: usize,
    /// Side of the cubic search window (odd, larger than the patch).
    pub window_side: usize,
    /// Number of atlases kept after SSD ranking.
    pub atlases: usize,
    pub bandwidth: Bandwidth,
}

impl Default for PbsConfig {
    fn default() -> Self {
        PbsConfig {
            patch_side: 5,
            window_side: 11,
            atlases: 10,
            bandwidth: Bandwidth::Adaptive { floor: 1e-6 },
        }
    }
}

impl PbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side % 2 == 0 || self.window_side % 2 == 0 {
            return Err(Error::InvalidConfig("patch and window sides must be odd".into()));
        }
        if self.patch_side >= self.window_side {
            return Err(Error::InvalidConfig(format!(
                "patch side {} must be smaller than window side {}",
                self.patch_side, self.window_side
            )));
        }
        if self.atlases == 0 {
            return Err(Error::InvalidConfig("atlas count must be >= 1".into()));
        }
        match self.bandwidth {
            Bandwidth::Adaptive { floor } if !(floor > 0.0) => Err(Error::InvalidConfig(
                "bandwidth floor must be > 0".into(),
            )),
            Bandwidth::Fixed { h } if !(h > 0.0) => {
                Err(Error::InvalidConfig(format!("bandwidth h must be > 0, got {h}")))
            }
            _ => Ok(()),
        }
    }
}

/// Sum of squared differences of two equally shaped patches.
pub fn ssd(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimsMismatch(format!(
            "patch sizes {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum())
}

/// Ranks atlases by voxel-wise SSD against `target` over the mask, ascending,
/// ties broken by atlas index, and keeps the first `k` as `(index, ssd)`.
pub fn select_atlases(
    target: &Volume3D,
    atlases: &[&Volume3D],
    mask: &RoiMask,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > atlases.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot select {k} of {} atlases",
            atlases.len()
        )));
    }
    mask.check_grid(target, "target")?;
    let t = target.require_intensities()?;
    let masked = mask.linear_indices();
    let mut scored = atlases
        .iter()
        .enumerate()
        .map(|(id, a)| {
            mask.check_grid(a, "atlas")?;
            let a = a.require_intensities()?;
            let score: f64 = masked
                .iter()
                .map(|&i| {
                    let d = f64::from(t[i]) - f64::from(a[i]);
                    d * d
                })
                .sum();
            Ok((id, score))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Cubic patch of side `2r+1` around `(x, y, z)`, z-major then y then x, with
/// zeros outside the grid.
fn cube_into(data: &[f32], dims: [usize; 3], c: [isize; 3], r: isize, out: &mut Vec<f32>) {
    out.clear();
    let [nx, ny, nz] = dims.map(|d| d as isize);
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y, z) = (c[0] + dx, c[1] + dy, c[2] + dz);
                out.push(if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
                    0.0
                } else {
                    data[(x + nx * (y + ny * z)) as usize]
                });
            }
        }
    }
}

/// Weighted vote of the candidates `(ssd, label)`; sorts them canonically
/// first. Returns the normalised per-class vote.
pub fn fuse_votes(candidates: &mut [(f64, u16)], classes: usize, bandwidth: Bandwidth) -> Vec<f64> {
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let h = match bandwidth {
        Bandwidth::Adaptive { floor } => candidates.first().map_or(0.0, |c| c.0) + floor,
        Bandwidth::Fixed { h } => h,
    };
    let mut votes = vec![0.0f64; classes];
    for &(d, label) in candidates.iter() {
        votes[label as usize] += (-d / h).exp();
    }
    let total: f64 = votes.iter().sum();
    if total > 0.0 {
        votes.iter_mut().for_each(|v| *v /= total);
    }
    votes
}

/// Fuses the labels of `atlases` (image, labels) onto every masked voxel of
/// `target`. All supplied atlases are used; call [`select_atlases`] first to
/// keep the closest `K`.
pub fn pbs_segment(
    target: &Volume3D,
    atlases: &[(&Volume3D, &Volume3D)],
    mask: &RoiMask,
    config: &PbsConfig,
) -> Result<SegmentationResult> {
    config.validate()?;
    if atlases.is_empty() {
        return Err(Error::Empty("atlas list"));
    }
    mask.check_grid(target, "target")?;
    let started = Instant::now();
    let t = target.require_intensities()?;
    let mut classes = 2usize;
    let mut pairs = Vec::with_capacity(atlases.len());
    for (img, lab) in atlases {
        mask.check_grid(img, "atlas image")?;
        mask.check_grid(lab, "atlas labels")?;
        classes = classes.max(lab.classes() as usize);
        pairs.push((img.require_intensities()?, lab.require_labels()?));
    }
    let dims = target.dims();
    let pr = (config.patch_side / 2) as isize;
    let wr = (config.window_side / 2) as isize;
    let masked = mask.linear_indices();

    let labels: Vec<u16> = masked
        .par_iter()
        .map_init(
            || (Vec::new(), Vec::new(), Vec::new()),
            |(tp, ap, cands), &i| {
                let v = target.voxel_of(i);
                let c = [v.x as isize, v.y as isize, v.z as isize];
                cube_into(t, dims, c, pr, tp);
                cands.clear();
                for &(img, lab) in &pairs {
                    for dz in -wr..=wr {
                        for dy in -wr..=wr {
                            for dx in -wr..=wr {
                                let u = [c[0] + dx, c[1] + dy, c[2] + dz];
                                if u.iter().zip(dims).any(|(&q, d)| q < 0 || q >= d as isize) {
                                    continue;
                                }
                                cube_into(img, dims, u, pr, ap);
                                let d: f64 = tp
                                    .iter()
                                    .zip(ap.iter())
                                    .map(|(&x, &y)| {
                                        let e = f64::from(x) - f64::from(y);
                                        e * e
                                    })
                                    .sum();
                                let li = (u[0] + dims[0] as isize * (u[1] + dims[1] as isize * u[2])) as usize;
                                cands.push((d, lab[li]));
                            }
                        }
                    }
                }
                let votes = fuse_votes(cands, classes, config.bandwidth);
                crate::network::argmax(&votes) as u16
            },
        )
        .collect();

    let mut out = target.zeros_like_label(classes as u32);
    let data = out.labels_mut().expect("label volume");
    for (&i, &l) in masked.iter().zip(&labels) {
        data[i] = l;
    }
    Ok(SegmentationResult {
        labels: out,
        voxels_classified: masked.len(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

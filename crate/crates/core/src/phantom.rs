//! Synthetic corpora with exact ground truth.
//!
//! Each subject holds two ellipsoidal structures (labels 1 and 2) on a smooth
//! intensity ramp. Structure centres jitter per subject, and the image gets
//! additive Gaussian noise. Labels are the exact ellipsoid interiors.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_stream;
use crate::volume::{load_volume, save_volume, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Intensity added inside the structure.
    pub offset: f32,
}

impl Ellipsoid {
    pub fn contains(&self, center: [f64; 3], p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub structures: [Ellipsoid; 2],
    /// Centres move by up to ± this many voxels per axis, uniformly.
    pub jitter: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f32,
    pub background: f32,
    /// Intensity change across the full extent of each axis.
    pub ramp: [f32; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let noise = 10.0;
        PhantomSpec {
            dims: [64, 64, 64],
            spacing: [1.0; 3],
            structures: [
                Ellipsoid {
                    center: [22.0, 32.0, 32.0],
                    radii: [6.0, 4.0, 5.0],
                    offset: 3.0 * noise,
                },
                Ellipsoid {
                    center: [42.0, 32.0, 32.0],
                    radii: [6.0, 4.0, 5.0],
                    offset: 3.0 * noise,
                },
            ],
            jitter: 2.0,
            noise,
            background: 100.0,
            ramp: [20.0, 10.0, 5.0],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// A 32×24×24 variant for fast tests.
    pub fn small() -> Self {
        let base = PhantomSpec::default();
        PhantomSpec {
            dims: [32, 24, 24],
            structures: [
                Ellipsoid {
                    center: [10.0, 12.0, 12.0],
                    radii: [3.0, 2.5, 3.0],
                    offset: base.structures[0].offset,
                },
                Ellipsoid {
                    center: [22.0, 12.0, 12.0],
                    radii: [3.0, 2.5, 3.0],
                    offset: base.structures[1].offset,
                },
            ],
            jitter: 1.0,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("phantom dims and spacing must be positive".into()));
        }
        if !(self.jitter >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::InvalidConfig("jitter and noise must be >= 0".into()));
        }
        for (i, e) in self.structures.iter().enumerate() {
            for a in 0..3 {
                if !(e.radii[a] > 0.0) {
                    return Err(Error::InvalidConfig(format!("structure {i} has a non-positive radius")));
                }
                let lo = e.center[a] - e.radii[a] - self.jitter;
                let hi = e.center[a] + e.radii[a] + self.jitter;
                if lo < 0.0 || hi > (self.dims[a] - 1) as f64 {
                    return Err(Error::InvalidConfig(format!(
                        "structure {i} can leave the volume along axis {a} ([{lo}, {hi}] vs [0, {}])",
                        self.dims[a] - 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An image with its reference labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: usize,
    pub image: Volume3D,
    pub labels: Volume3D,
}

/// Generates `n` subjects. Subject `i` depends only on the spec and `i`.
pub fn generate_corpus(spec: &PhantomSpec, n: usize) -> Result<Vec<Subject>> {
    spec.validate()?;
    (0..n).map(|i| generate_subject(spec, i)).collect()
}

pub fn generate_subject(spec: &PhantomSpec, id: usize) -> Result<Subject> {
    let mut rng = seeded_stream(spec.seed, id as u64);
    let centers: Vec<[f64; 3]> = spec
        .structures
        .iter()
        .map(|e| {
            let mut c = e.center;
            if spec.jitter > 0.0 {
                for v in &mut c {
                    *v += rng.random_range(-spec.jitter..=spec.jitter);
                }
            }
            c
        })
        .collect();
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0f64, f64::from(spec.noise)).expect("valid sd"));

    let [nx, ny, nz] = spec.dims;
    let mut image = Vec::with_capacity(nx * ny * nz);
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let mut value = f64::from(spec.background)
                    + f64::from(spec.ramp[0]) * x as f64 / nx as f64
                    + f64::from(spec.ramp[1]) * y as f64 / ny as f64
                    + f64::from(spec.ramp[2]) * z as f64 / nz as f64;
                let mut label = 0u16;
                for (k, (e, c)) in spec.structures.iter().zip(&centers).enumerate() {
                    if e.contains(*c, p) {
                        label = k as u16 + 1;
                        value += f64::from(e.offset);
                        break;
                    }
                }
                if let Some(n) = &noise {
                    value += n.sample(&mut rng);
                }
                image.push(value as f32);
                labels.push(label);
            }
        }
    }
    Ok(Subject {
        id,
        image: Volume3D::intensity(spec.dims, spec.spacing, image)?,
        labels: Volume3D::label(spec.dims, spec.spacing, labels, 3)?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: usize,
    pub image: String,
    pub labels: String,
}

/// `corpus.json`: the generating spec (when known) and the file pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: Option<PhantomSpec>,
    pub subjects: Vec<CorpusEntry>,
}

pub fn image_file_name(id: usize) -> String {
    format!("sub{id:03}_img.pseg")
}

pub fn label_file_name(id: usize) -> String {
    format!("sub{id:03}_lbl.pseg")
}

/// Writes `subNNN_img.pseg` / `subNNN_lbl.pseg` pairs and `corpus.json`.
pub fn write_corpus(dir: impl AsRef<Path>, spec: Option<&PhantomSpec>, subjects: &[Subject]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(subjects.len());
    for s in subjects {
        let image = image_file_name(s.id);
        let labels = label_file_name(s.id);
        save_volume(&s.image, dir.join(&image))?;
        save_volume(&s.labels, dir.join(&labels))?;
        entries.push(CorpusEntry {
            id: s.id,
            image,
            labels,
        });
    }
    let manifest = CorpusManifest {
        spec: spec.cloned(),
        subjects: entries,
    };
    let path = dir.join("corpus.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Vec<Subject>> {
    let dir = dir.as_ref();
    let path = dir.join("corpus.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    manifest
        .subjects
        .iter()
        .map(|e| {
            let image = load_volume(dir.join(&e.image))?;
            let labels = load_volume(dir.join(&e.labels))?;
            image.check_same_grid(&labels, "subject image and labels")?;
            let labels = if labels.kind() == crate::VolumeKind::Label {
                labels
            } else {
                let max = labels.intensities().unwrap_or(&[]).iter().fold(0.0f32, |m, &v| m.max(v));
                labels.into_label(max as u32 + 1)?
            };
            Ok(Subject {
                id: e.id,
                image,
                labels,
            })
        })
        .collect()
}

//! Datasets: stimulus tensors plus per-subject, per-region voxel response
//! matrices, stored in a small self-describing binary tensor format, and a
//! synthetic generator that builds responses from a known teacher network so
//! search quality can be judged against ground truth.
//!
//! ## `.evot` tensor files
//!
//! Little-endian throughout: 4-byte magic `EVOT`, `u8` version (1), `u8`
//! dtype code (1 = float32), `u8` rank, 7 reserved zero bytes, then `rank`
//! u64 dimensions, then the row-major float payload.
//!
//! ## Directory layout
//!
//! `stimuli.evot` (stimuli x channels x height x width),
//! `subjects/<id>/<region>.evot` (stimuli x repeats x voxels), and
//! `meta.json` with the region list, subject ids, and provenance.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::genome::Genome;
use crate::randnet::{forward, init_weights, Activation};
use crate::rng::{mix64, SeedStream};

const MAGIC: &[u8; 4] = b"EVOT";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
/// Minimum stimulus count for a usable dataset.
const MIN_STIMULI: usize = 10;

// Domain labels for deriving independent generator streams from one master
// seed.
const DOMAIN_STIMULI: u64 = 0x5711;
const DOMAIN_FEATURES: u64 = 0xFEA7;
const DOMAIN_NOISE: u64 = 0x0153;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: format error: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: axis {axis} has {got} entries, expected {expected}")]
    DimensionMismatch { path: PathBuf, axis: usize, got: u64, expected: u64 },
    #[error("subject {subject} is missing region {region}")]
    MissingRegion { subject: String, region: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Randnet(#[from] crate::randnet::RandnetError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Writes one float32 tensor in the `.evot` format.
pub fn write_evot(path: &Path, dims: &[u64], data: &[f32]) -> Result<(), DataError> {
    let expected: u64 = dims.iter().product();
    assert_eq!(expected as usize, data.len(), "payload/dims mismatch");
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    let mut header = Vec::with_capacity(14 + dims.len() * 8);
    header.extend_from_slice(MAGIC);
    header.push(VERSION);
    header.push(DTYPE_F32);
    header.push(dims.len() as u8);
    header.extend_from_slice(&[0u8; 7]);
    for &d in dims {
        header.extend_from_slice(&d.to_le_bytes());
    }
    file.write_all(&header).map_err(io_err(path))?;
    let mut payload = Vec::with_capacity(data.len() * 4);
    for &v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&payload).map_err(io_err(path))?;
    Ok(())
}

/// Reads one `.evot` tensor, returning its dimensions and payload.
pub fn read_evot(path: &Path) -> Result<(Vec<u64>, Vec<f32>), DataError> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut header = [0u8; 14];
    file.read_exact(&mut header).map_err(io_err(path))?;
    if &header[0..4] != MAGIC {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            detail: format!("bad magic bytes {:?}", &header[0..4]),
        });
    }
    if header[4] != VERSION {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported version {}", header[4]),
        });
    }
    if header[5] != DTYPE_F32 {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported dtype code {}", header[5]),
        });
    }
    let rank = header[6] as usize;
    if header[7..14].iter().any(|&b| b != 0) {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            detail: "reserved header bytes must be zero".into(),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    let mut buf8 = [0u8; 8];
    for _ in 0..rank {
        file.read_exact(&mut buf8).map_err(io_err(path))?;
        dims.push(u64::from_le_bytes(buf8));
    }
    let count: u64 = dims.iter().product();
    let mut payload = vec![0u8; count as usize * 4];
    file.read_exact(&mut payload).map_err(io_err(path))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing).map_err(io_err(path))? != 0 {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            detail: "trailing bytes after payload".into(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

/// Voxel responses for one (subject, region): stimuli x repeats x voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    pub data: Array3<f32>,
}

impl ResponseMatrix {
    pub fn n_stimuli(&self) -> usize {
        self.data.dim().0
    }

    pub fn repeats(&self) -> usize {
        self.data.dim().1
    }

    pub fn voxels(&self) -> usize {
        self.data.dim().2
    }

    /// Repeat-averaged responses (stimuli x voxels), the encoding target.
    pub fn repeat_mean(&self) -> Array2<f64> {
        let (n, r, v) = self.data.dim();
        let mut out = Array2::<f64>::zeros((n, v));
        for s in 0..n {
            for vox in 0..v {
                let mut acc = 0.0f64;
                for rep in 0..r {
                    acc += self.data[[s, rep, vox]] as f64;
                }
                out[[s, vox]] = acc / r as f64;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub regions: BTreeMap<String, ResponseMatrix>,
}

/// One tap point: responses for `region` are synthesized from teacher
/// features at `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTap {
    pub region: String,
    pub layer: usize,
}

/// Recipe for a synthetic dataset built from a known teacher genome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub teacher: Genome,
    /// Tap layers must be strictly increasing in listed region order.
    pub region_taps: Vec<RegionTap>,
    pub voxels_per_region: usize,
    pub projection_seed: u64,
    pub noise_sigma: f64,
    pub repeats: usize,
    pub subjects: usize,
    /// Number of independent teacher weight draws averaged into the signal,
    /// so no single evaluation seed is privileged.
    #[serde(default = "default_feature_seeds")]
    pub feature_seeds: usize,
    /// Scale of the per-subject perturbation of the voxel projection.
    #[serde(default = "default_subject_jitter")]
    pub subject_jitter: f64,
    /// 3x3 box-blur passes applied to the white-noise stimuli.
    #[serde(default = "default_smoothing_passes")]
    pub stimulus_smoothing: u32,
}

fn default_feature_seeds() -> usize {
    4
}

fn default_subject_jitter() -> f64 {
    0.1
}

fn default_smoothing_passes() -> u32 {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// Generator settings recorded alongside synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInfo {
    pub spec: TeacherSpec,
    pub master_seed: u64,
    pub smoothing_passes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub provenance: Provenance,
    pub regions: Vec<String>,
    pub subjects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stimuli: Array4<f32>,
    pub subjects: Vec<SubjectData>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn n_stimuli(&self) -> usize {
        self.stimuli.dim().0
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.stimuli.dim();
        (c, h, w)
    }

    pub fn region_names(&self) -> &[String] {
        &self.meta.regions
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectData> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// Structural checks: consistent regions across subjects, responses row
    /// counts matching the stimulus count, and a workable stimulus count.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.n_stimuli();
        if n < MIN_STIMULI {
            return Err(DataError::Invalid(format!("{n} stimuli, need at least {MIN_STIMULI}")));
        }
        for subject in &self.subjects {
            for region in &self.meta.regions {
                let rm = subject.regions.get(region).ok_or_else(|| DataError::MissingRegion {
                    subject: subject.id.clone(),
                    region: region.clone(),
                })?;
                if rm.n_stimuli() != n {
                    return Err(DataError::Invalid(format!(
                        "subject {} region {region}: {} response rows for {n} stimuli",
                        subject.id,
                        rm.n_stimuli()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Writes a dataset directory. Numeric payloads round-trip bit-exactly.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    fs::create_dir_all(path).map_err(io_err(path))?;
    let (n, c, h, w) = dataset.stimuli.dim();
    write_evot(
        &path.join("stimuli.evot"),
        &[n as u64, c as u64, h as u64, w as u64],
        dataset.stimuli.as_slice().expect("stimuli contiguous"),
    )?;
    for subject in &dataset.subjects {
        let dir = path.join("subjects").join(&subject.id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (region, rm) in &subject.regions {
            let (s, r, v) = rm.data.dim();
            write_evot(
                &dir.join(format!("{region}.evot")),
                &[s as u64, r as u64, v as u64],
                rm.data.as_slice().expect("responses contiguous"),
            )?;
        }
    }
    let meta_path = path.join("meta.json");
    let text = serde_json::to_string_pretty(&dataset.meta).expect("meta serializes");
    fs::write(&meta_path, text).map_err(io_err(&meta_path))?;
    Ok(())
}

/// Loads and validates a dataset directory.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let meta_path = path.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| DataError::Format {
        path: meta_path.clone(),
        detail: e.to_string(),
    })?;

    let stim_path = path.join("stimuli.evot");
    let (dims, payload) = read_evot(&stim_path)?;
    if dims.len() != 4 {
        return Err(DataError::Format {
            path: stim_path.clone(),
            detail: format!("stimuli must be rank 4, got rank {}", dims.len()),
        });
    }
    let shape = (dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
    let stimuli = Array4::from_shape_vec(shape, payload).expect("dims describe payload");
    let n = shape.0 as u64;

    let mut subjects = Vec::with_capacity(meta.subjects.len());
    for id in &meta.subjects {
        let dir = path.join("subjects").join(id);
        let mut regions = BTreeMap::new();
        for region in &meta.regions {
            let file = dir.join(format!("{region}.evot"));
            if !file.exists() {
                return Err(DataError::MissingRegion { subject: id.clone(), region: region.clone() });
            }
            let (rdims, rdata) = read_evot(&file)?;
            if rdims.len() != 3 {
                return Err(DataError::Format {
                    path: file.clone(),
                    detail: format!("responses must be rank 3, got rank {}", rdims.len()),
                });
            }
            if rdims[0] != n {
                return Err(DataError::DimensionMismatch {
                    path: file.clone(),
                    axis: 0,
                    got: rdims[0],
                    expected: n,
                });
            }
            let data = Array3::from_shape_vec(
                (rdims[0] as usize, rdims[1] as usize, rdims[2] as usize),
                rdata,
            )
            .expect("dims describe payload");
            regions.insert(region.clone(), ResponseMatrix { data });
        }
        subjects.push(SubjectData { id: id.clone(), regions });
    }
    let dataset = Dataset { stimuli, subjects, meta };
    dataset.validate()?;
    Ok(dataset)
}

/// Low-pass-filtered Gaussian noise stimuli. White noise degenerates under
/// random-weight convolutions, so each channel gets `passes` 3x3 box blurs
/// (edge-clamped) and is rescaled to unit variance.
pub fn generate_stimuli(
    rng: &mut SeedStream,
    n: usize,
    shape: (usize, usize, usize),
    passes: u32,
) -> Array4<f32> {
    let (c, h, w) = shape;
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    let mut plane = vec![0.0f64; h * w];
    let mut blurred = vec![0.0f64; h * w];
    for img in 0..n {
        for ch in 0..c {
            for v in plane.iter_mut() {
                *v = rng.normal();
            }
            for _ in 0..passes {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                                acc += plane[yy * w + xx];
                            }
                        }
                        blurred[y * w + x] = acc / 9.0;
                    }
                }
                std::mem::swap(&mut plane, &mut blurred);
            }
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane.len() as f64;
            let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for y in 0..h {
                for x in 0..w {
                    out[[img, ch, y, x]] = ((plane[y * w + x] - mean) * scale) as f32;
                }
            }
        }
    }
    out
}

/// Z-scores each column in place (population statistics). Constant columns
/// are left centered at zero.
fn zscore_columns(m: &mut Array2<f64>) {
    let (rows, cols) = m.dim();
    for c in 0..cols {
        let mut col = m.column_mut(c);
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        col.mapv_inplace(|v| (v - mean) * scale);
    }
}

/// Builds a synthetic dataset: seeded smooth-noise stimuli, per-region signal
/// from teacher features at the tap layer through a fixed random projection
/// (averaged over several weight draws), per-subject projection jitter, and
/// per-repeat Gaussian noise.
pub fn generate_synthetic(
    spec: &TeacherSpec,
    n_stimuli: usize,
    input_shape: (usize, usize, usize),
    master_seed: u64,
) -> Result<Dataset, DataError> {
    if n_stimuli < MIN_STIMULI {
        return Err(DataError::Invalid(format!("{n_stimuli} stimuli, need at least {MIN_STIMULI}")));
    }
    if spec.repeats < 2 {
        return Err(DataError::Invalid("repeats must be at least 2".into()));
    }
    if spec.subjects == 0 {
        return Err(DataError::Invalid("need at least one subject".into()));
    }
    if spec.noise_sigma < 0.0 {
        return Err(DataError::Invalid("noise sigma must be non-negative".into()));
    }
    if spec.feature_seeds == 0 {
        return Err(DataError::Invalid("need at least one feature seed".into()));
    }
    if spec.region_taps.is_empty() {
        return Err(DataError::Invalid("need at least one region tap".into()));
    }
    let validation = spec.teacher.validate(input_shape);
    if !validation.is_ok() {
        return Err(DataError::Invalid(format!(
            "teacher genome invalid for input {input_shape:?}: {}",
            validation.violations[0]
        )));
    }
    let depth = spec.teacher.depth();
    let mut last_tap = None;
    for tap in &spec.region_taps {
        if tap.layer >= depth {
            return Err(DataError::Invalid(format!(
                "tap layer {} out of range for teacher depth {depth}",
                tap.layer
            )));
        }
        if let Some(prev) = last_tap {
            if tap.layer <= prev {
                return Err(DataError::Invalid(
                    "tap layers must be strictly increasing in region order".into(),
                ));
            }
        }
        last_tap = Some(tap.layer);
    }

    let mut stim_rng = SeedStream::new(mix64(master_seed ^ DOMAIN_STIMULI));
    let stimuli =
        generate_stimuli(&mut stim_rng, n_stimuli, input_shape, spec.stimulus_smoothing);

    // Teacher features per (ensemble draw, tap layer).
    let tap_layers: Vec<usize> = spec.region_taps.iter().map(|t| t.layer).collect();
    let mut features: Vec<BTreeMap<usize, ndarray::Array2<f32>>> =
        Vec::with_capacity(spec.feature_seeds);
    for e in 0..spec.feature_seeds {
        let seed = mix64(master_seed ^ mix64(DOMAIN_FEATURES.wrapping_add(e as u64)));
        let weights = init_weights(&spec.teacher, seed, input_shape.0);
        let layer_map =
            forward(&spec.teacher, &weights, &stimuli, &tap_layers, Activation::Relu)?;
        features.push(layer_map.into_iter().map(|(l, fm)| (l, fm.data)).collect());
    }

    let voxels = spec.voxels_per_region;
    let subject_ids: Vec<String> = (0..spec.subjects).map(|s| format!("s{:02}", s + 1)).collect();
    let mut subjects: Vec<SubjectData> = subject_ids
        .iter()
        .map(|id| SubjectData { id: id.clone(), regions: BTreeMap::new() })
        .collect();

    for (region_index, tap) in spec.region_taps.iter().enumerate() {
        let p = features[0][&tap.layer].dim().1;
        let proj_scale = 1.0 / (p as f64).sqrt();
        let mut base_rng =
            SeedStream::new(mix64(spec.projection_seed ^ mix64(region_index as u64)));
        let mut projection = Array2::<f64>::zeros((p, voxels));
        for v in projection.iter_mut() {
            *v = base_rng.normal() * proj_scale;
        }
        for (s_idx, subject) in subjects.iter_mut().enumerate() {
            let mut jitter_rng = SeedStream::new(mix64(
                spec.projection_seed ^ mix64(region_index as u64) ^ mix64(1000 + s_idx as u64),
            ));
            let mut subject_proj = projection.clone();
            for v in subject_proj.iter_mut() {
                *v += spec.subject_jitter * jitter_rng.normal() * proj_scale;
            }
            // Signal: mean over weight draws of the z-scored projection.
            let mut signal = Array2::<f64>::zeros((n_stimuli, voxels));
            for draw in &features {
                let feats = &draw[&tap.layer];
                let mut projected = Array2::<f64>::zeros((n_stimuli, voxels));
                for i in 0..n_stimuli {
                    for (c, &f) in feats.row(i).iter().enumerate() {
                        let f = f as f64;
                        if f != 0.0 {
                            for v in 0..voxels {
                                projected[[i, v]] += f * subject_proj[[c, v]];
                            }
                        }
                    }
                }
                zscore_columns(&mut projected);
                signal += &projected;
            }
            signal /= spec.feature_seeds as f64;
            zscore_columns(&mut signal);

            let mut noise_rng = SeedStream::new(mix64(
                master_seed
                    ^ mix64(DOMAIN_NOISE)
                    ^ mix64(region_index as u64)
                    ^ mix64(77 + s_idx as u64),
            ));
            let mut data = Array3::<f32>::zeros((n_stimuli, spec.repeats, voxels));
            for rep in 0..spec.repeats {
                for i in 0..n_stimuli {
                    for v in 0..voxels {
                        let noise = if spec.noise_sigma > 0.0 {
                            spec.noise_sigma * noise_rng.normal()
                        } else {
                            0.0
                        };
                        data[[i, rep, v]] = (signal[[i, v]] + noise) as f32;
                    }
                }
            }
            subject
                .regions
                .insert(tap.region.clone(), ResponseMatrix { data });
        }
    }

    let meta = DatasetMeta {
        provenance: Provenance::Synthetic,
        regions: spec.region_taps.iter().map(|t| t.region.clone()).collect(),
        subjects: subject_ids,
        synthetic: Some(SyntheticInfo {
            spec: spec.clone(),
            master_seed,
            smoothing_passes: spec.stimulus_smoothing,
        }),
    };
    let dataset = Dataset { stimuli, subjects, meta };
    dataset.validate()?;
    Ok(dataset)
}

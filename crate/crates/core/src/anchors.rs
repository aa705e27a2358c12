//! Anchor patch selection over the grey-matter mask.
//!
//! Anchors are cubic patches identified by their top-left (minimum) corner.
//! Random selection draws corners uniformly and keeps those whose patch
//! covers enough GM; the grid baseline tiles the valid corner span at a fixed
//! stride. Each GM voxel is then assigned to its nearest anchor center,
//! producing a label image used to extract anchor time series.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::volume::Mask3D;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("patch side {side} does not fit volume dims {dims:?}")]
    PatchTooLarge { side: usize, dims: (usize, usize, usize) },
    #[error(
        "could not find {requested} anchors after {attempts} attempts \
         ({accepted} accepted, acceptance rate {rate:.4}); relax tau or enlarge the mask"
    )]
    Infeasible {
        requested: usize,
        attempts: usize,
        accepted: usize,
        rate: f64,
    },
    #[error("anchor {index} was assigned no grey-matter voxels")]
    StarvedAnchor { index: usize },
    #[error("label image format error: {0}")]
    LabelFormat(String),
    #[error("anchor set json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A cubic patch: top-left corner and side length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchSpec {
    pub t: (usize, usize, usize),
    pub s: usize,
}

impl PatchSpec {
    /// Patch center, at the corner plus half the side on each axis.
    pub fn center(&self) -> (f64, f64, f64) {
        let h = self.s as f64 / 2.0;
        (
            self.t.0 as f64 + h,
            self.t.1 as f64 + h,
            self.t.2 as f64 + h,
        )
    }
}

/// Number of GM voxels inside the patch cube.
pub fn gm_support(mask: &Mask3D, patch: &PatchSpec) -> usize {
    let mut count = 0;
    for x in patch.t.0..patch.t.0 + patch.s {
        for y in patch.t.1..patch.t.1 + patch.s {
            for z in patch.t.2..patch.t.2 + patch.s {
                if x < mask.dims.0 && y < mask.dims.1 && z < mask.dims.2 && mask.get(x, y, z) {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Selected anchors plus the voxel-to-anchor assignment.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<PatchSpec>,
    pub s: usize,
    pub tau: usize,
    /// Per-voxel nearest-anchor index + 1; 0 for non-GM voxels. Row-major
    /// (x, y, z). Built on demand by `ensure_labels` (selection alone does
    /// not need it); skipped in JSON and persisted as a binary sidecar.
    #[serde(skip)]
    pub label_image: Vec<u16>,
    pub dims: (usize, usize, usize),
}

impl AnchorSet {
    /// Build the voxel-to-anchor assignment if it is not present yet.
    pub fn ensure_labels(&mut self, mask: &Mask3D) -> Result<(), AnchorError> {
        if self.label_image.is_empty() {
            self.label_image = build_label_image(mask, &self.anchors)?;
        }
        Ok(())
    }
}

fn check_fit(mask: &Mask3D, s: usize) -> Result<(), AnchorError> {
    if s == 0 || s > mask.dims.0 || s > mask.dims.1 || s > mask.dims.2 {
        return Err(AnchorError::PatchTooLarge {
            side: s,
            dims: mask.dims,
        });
    }
    Ok(())
}

/// Draw anchor corners uniformly over the valid span, keeping patches whose
/// GM support reaches `tau`, until `h` distinct anchors are found.
pub fn select_random_anchors(
    mask: &Mask3D,
    h: usize,
    s: usize,
    tau: usize,
    rng: &mut crate::rng::Rng,
    max_attempts: Option<usize>,
) -> Result<AnchorSet, AnchorError> {
    check_fit(mask, s)?;
    let limit = max_attempts.unwrap_or(1000 * h.max(1));
    let (nx, ny, nz) = mask.dims;
    let mut anchors: Vec<PatchSpec> = Vec::with_capacity(h);
    let mut attempts = 0usize;
    while anchors.len() < h {
        if attempts >= limit {
            return Err(AnchorError::Infeasible {
                requested: h,
                attempts,
                accepted: anchors.len(),
                rate: anchors.len() as f64 / attempts.max(1) as f64,
            });
        }
        attempts += 1;
        let t = (
            rng.next_below((nx - s + 1) as u64) as usize,
            rng.next_below((ny - s + 1) as u64) as usize,
            rng.next_below((nz - s + 1) as u64) as usize,
        );
        let patch = PatchSpec { t, s };
        if anchors.iter().any(|a| a.t == t) {
            continue;
        }
        if gm_support(mask, &patch) >= tau {
            anchors.push(patch);
        }
    }
    Ok(AnchorSet {
        anchors,
        s,
        tau,
        label_image: Vec::new(),
        dims: mask.dims,
    })
}

/// Inclusive voxel bounds of the GM mask, the natural ROI for the grid
/// baseline.
pub fn gm_bounding_box(mask: &Mask3D) -> Result<((usize, usize, usize), (usize, usize, usize)), AnchorError> {
    let (nx, ny, nz) = mask.dims;
    let mut lo = (usize::MAX, usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize, 0usize);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if mask.get(x, y, z) {
                    lo = (lo.0.min(x), lo.1.min(y), lo.2.min(z));
                    hi = (hi.0.max(x), hi.1.max(y), hi.2.max(z));
                }
            }
        }
    }
    if lo.0 == usize::MAX {
        return Err(AnchorError::Infeasible {
            requested: 1,
            attempts: 0,
            accepted: 0,
            rate: 0.0,
        });
    }
    Ok((lo, hi))
}

/// Grid baseline: a centered lattice of patch corners over an inclusive ROI,
/// keeping candidates whose patch reaches `tau` GM support.
///
/// Returns the set plus the number of candidates dropped for low support.
pub fn select_grid_anchors(
    mask: &Mask3D,
    roi: ((usize, usize, usize), (usize, usize, usize)),
    stride: (usize, usize, usize),
    s: usize,
    tau: usize,
) -> Result<(AnchorSet, usize), AnchorError> {
    check_fit(mask, s)?;
    assert!(stride.0 >= 1 && stride.1 >= 1 && stride.2 >= 1);
    let (lo, hi) = roi;
    let axis_positions = |min: usize, max: usize, delta: usize| -> Vec<usize> {
        // valid corners keep the patch inside the ROI: [min, max - s + 1]
        if max + 1 < min + s {
            return Vec::new();
        }
        let span = max + 1 - s - min;
        let steps = span / delta;
        let offset = (span - steps * delta) / 2;
        (0..=steps).map(|i| min + offset + i * delta).collect()
    };
    let xs = axis_positions(lo.0, hi.0, stride.0);
    let ys = axis_positions(lo.1, hi.1, stride.1);
    let zs = axis_positions(lo.2, hi.2, stride.2);
    if xs.is_empty() || ys.is_empty() || zs.is_empty() {
        return Err(AnchorError::Infeasible {
            requested: 1,
            attempts: 0,
            accepted: 0,
            rate: 0.0,
        });
    }
    let mut anchors = Vec::new();
    let mut dropped = 0usize;
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                let patch = PatchSpec { t: (x, y, z), s };
                if gm_support(mask, &patch) >= tau {
                    anchors.push(patch);
                } else {
                    dropped += 1;
                }
            }
        }
    }
    if anchors.is_empty() {
        return Err(AnchorError::Infeasible {
            requested: 1,
            attempts: dropped,
            accepted: 0,
            rate: 0.0,
        });
    }
    Ok((
        AnchorSet {
            anchors,
            s,
            tau,
            label_image: Vec::new(),
            dims: mask.dims,
        },
        dropped,
    ))
}

/// Claim every voxel for the lowest-index anchor whose cube contains it;
/// voxels inside no anchor get 0, anchor i writes i+1. Errors if any anchor
/// is fully shadowed (no GM voxel keeps its label).
pub fn build_label_image(mask: &Mask3D, anchors: &[PatchSpec]) -> Result<Vec<u16>, AnchorError> {
    let (nx, ny, nz) = mask.dims;
    let mut labels = vec![0u16; nx * ny * nz];
    let mut gm_counts = vec![0usize; anchors.len()];
    // iterate highest index first so lower indices overwrite on overlap
    for (i, a) in anchors.iter().enumerate().rev() {
        for x in a.t.0..(a.t.0 + a.s).min(nx) {
            for y in a.t.1..(a.t.1 + a.s).min(ny) {
                for z in a.t.2..(a.t.2 + a.s).min(nz) {
                    labels[(x * ny + y) * nz + z] = i as u16 + 1;
                }
            }
        }
    }
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let l = labels[(x * ny + y) * nz + z];
                if l > 0 && mask.get(x, y, z) {
                    gm_counts[(l - 1) as usize] += 1;
                }
            }
        }
    }
    if let Some(index) = gm_counts.iter().position(|&c| c == 0) {
        return Err(AnchorError::StarvedAnchor { index });
    }
    Ok(labels)
}

/// Mean distance from anchor centers to the GM boundary, plus a histogram
/// report written as CSV (`bin_left,bin_right,count` then per-anchor rows).
pub fn boundary_distance_report(
    mask: &Mask3D,
    set: &AnchorSet,
    n_bins: usize,
) -> Result<(f64, String), AnchorError> {
    assert!(n_bins >= 1);
    let mut distances = Vec::with_capacity(set.anchors.len());
    for a in &set.anchors {
        let d = crate::volume::gm_boundary_distance(mask, a.center())
            .map_err(|e| AnchorError::LabelFormat(format!("boundary distance: {e}")))?;
        distances.push(d);
    }
    let mean = distances.iter().sum::<f64>() / distances.len().max(1) as f64;
    let max = distances.iter().cloned().fold(0.0_f64, f64::max).max(1e-12);
    let width = max / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &d in &distances {
        let mut bin = (d / width) as usize;
        if bin >= n_bins {
            bin = n_bins - 1;
        }
        counts[bin] += 1;
    }
    let mut csv = String::from("bin_left,bin_right,count\n");
    for (i, c) in counts.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", i as f64 * width, (i + 1) as f64 * width, c));
    }
    csv.push_str("anchor_index,distance\n");
    for (i, d) in distances.iter().enumerate() {
        csv.push_str(&format!("{i},{d}\n"));
    }
    Ok((mean, csv))
}

// ---------------------------------------------------------------------------
// Persistence: anchor set as JSON, label image as an "ABFL" sidecar.

const ABFL_MAGIC: &[u8; 4] = b"ABFL";
const ABFL_VERSION: u32 = 1;

pub fn save_anchor_set(set: &AnchorSet, json_path: &Path, label_path: &Path) -> Result<(), AnchorError> {
    if set.label_image.len() != set.dims.0 * set.dims.1 * set.dims.2 {
        return Err(AnchorError::LabelFormat(
            "label image not built; call ensure_labels before saving".into(),
        ));
    }
    let json = serde_json::to_string_pretty(set)?;
    std::fs::write(json_path, json)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(label_path)?);
    f.write_all(ABFL_MAGIC)?;
    f.write_all(&ABFL_VERSION.to_le_bytes())?;
    for d in [set.dims.0, set.dims.1, set.dims.2] {
        f.write_all(&(d as u64).to_le_bytes())?;
    }
    for &l in &set.label_image {
        f.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_anchor_set(json_path: &Path, label_path: &Path) -> Result<AnchorSet, AnchorError> {
    let json = std::fs::read_to_string(json_path)?;
    let mut set: AnchorSet = serde_json::from_str(&json)?;
    let bytes = std::fs::read(label_path)?;
    if bytes.len() < 32 {
        return Err(AnchorError::LabelFormat("file too short for header".into()));
    }
    if &bytes[0..4] != ABFL_MAGIC {
        return Err(AnchorError::LabelFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ABFL_VERSION {
        return Err(AnchorError::LabelFormat(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u64::from_le_bytes(bytes[8 + i * 8..16 + i * 8].try_into().unwrap()) as usize;
    }
    if (dims[0], dims[1], dims[2]) != set.dims {
        return Err(AnchorError::LabelFormat(format!(
            "label dims {dims:?} do not match anchor set dims {:?}",
            set.dims
        )));
    }
    let n = dims[0] * dims[1] * dims[2];
    if bytes.len() != 32 + n * 2 {
        return Err(AnchorError::LabelFormat(format!(
            "payload length {} != expected {}",
            bytes.len(),
            32 + n * 2
        )));
    }
    set.label_image = bytes[32..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(set)
}

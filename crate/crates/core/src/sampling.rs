//! Iterative multi-scale patch sampling and patch-to-anchor functional
//! connectivity.
//!
//! Each iteration draws patch centers uniformly over the volume, keeps those
//! overlapping grey matter, and correlates every patch's mean time series
//! against every anchor's. Per-iteration FC matrices are averaged pairwise by
//! sampling index; patch center positions from all iterations are
//! concatenated into the positional feature.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::anchors::AnchorSet;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume::{Mask3D, Volume4D};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("representation format error: {0}")]
    Format(String),
    #[error("empty voxel set for patch centered at {0:?}")]
    EmptyPatch((f64, f64, f64)),
    #[error(
        "could not sample {requested} patches after {attempts} attempts \
         ({accepted} accepted)"
    )]
    Infeasible {
        requested: usize,
        attempts: usize,
        accepted: usize,
    },
    #[error("anchor {index} has no grey-matter voxels in the label image")]
    EmptyAnchor { index: usize },
    #[error("mask dims {mask:?} do not match volume dims {volume:?}")]
    DimsMismatch {
        mask: (usize, usize, usize),
        volume: (usize, usize, usize),
    },
}

/// Voxels within the open cube of half-side s/2 around `center`, clipped to
/// the volume. The comparison is strict, so even sides cover s-1 voxels per
/// axis around an integer center.
pub fn patch_voxels(
    center: (f64, f64, f64),
    s: usize,
    dims: (usize, usize, usize),
) -> Vec<(usize, usize, usize)> {
    let h = s as f64 / 2.0;
    let axis = |c: f64, n: usize| -> std::ops::RangeInclusive<usize> {
        let lo = (c - h).floor().max(0.0) as usize;
        let hi = (c + h).ceil().min(n as f64 - 1.0) as usize;
        lo..=hi
    };
    let mut out = Vec::new();
    for x in axis(center.0, dims.0) {
        if (x as f64 - center.0).abs() >= h {
            continue;
        }
        for y in axis(center.1, dims.1) {
            if (y as f64 - center.1).abs() >= h {
                continue;
            }
            for z in axis(center.2, dims.2) {
                if (z as f64 - center.2).abs() >= h {
                    continue;
                }
                out.push((x, y, z));
            }
        }
    }
    out
}

/// Mean BOLD time series over a voxel set.
pub fn mean_time_series(
    vol: &Volume4D,
    voxels: &[(usize, usize, usize)],
) -> Result<Vec<f64>, SamplingError> {
    if voxels.is_empty() {
        return Err(SamplingError::EmptyPatch((0.0, 0.0, 0.0)));
    }
    let t_len = vol.dims.0;
    let mut series = vec![0.0; t_len];
    for &(x, y, z) in voxels {
        for (t, s) in series.iter_mut().enumerate() {
            *s += vol.at(t, x, y, z);
        }
    }
    let n = voxels.len() as f64;
    for s in &mut series {
        *s /= n;
    }
    Ok(series)
}

/// Pearson correlation clamped to [-1, 1]. A zero-variance input yields
/// (0.0, true); the flag marks the degenerate case.
pub fn pearson(u: &[f64], v: &[f64]) -> (f64, bool) {
    assert_eq!(u.len(), v.len());
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut du = 0.0;
    let mut dv = 0.0;
    for (a, b) in u.iter().zip(v) {
        let da = a - mu;
        let db = b - mv;
        num += da * db;
        du += da * da;
        dv += db * db;
    }
    if du == 0.0 || dv == 0.0 {
        return (0.0, true);
    }
    ((num / (du.sqrt() * dv.sqrt())).clamp(-1.0, 1.0), false)
}

/// Per-anchor mean time series over the GM voxels assigned to each anchor
/// in the label image.
pub fn anchor_series(
    vol: &Volume4D,
    mask: &Mask3D,
    set: &AnchorSet,
) -> Result<Vec<Vec<f64>>, SamplingError> {
    if vol.spatial_dims() != set.dims || mask.dims != set.dims {
        return Err(SamplingError::DimsMismatch {
            mask: set.dims,
            volume: vol.spatial_dims(),
        });
    }
    let (nx, ny, nz) = set.dims;
    let mut voxel_lists: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); set.anchors.len()];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let l = set.label_image[(x * ny + y) * nz + z];
                if l > 0 && mask.get(x, y, z) {
                    voxel_lists[(l - 1) as usize].push((x, y, z));
                }
            }
        }
    }
    voxel_lists
        .iter()
        .enumerate()
        .map(|(index, vs)| {
            if vs.is_empty() {
                return Err(SamplingError::EmptyAnchor { index });
            }
            mean_time_series(vol, vs)
        })
        .collect()
}

/// A sampled patch: center coordinates and its GM voxels.
#[derive(Debug, Clone)]
pub struct SampledPatch {
    pub center: (f64, f64, f64),
    pub gm_voxels: Vec<(usize, usize, usize)>,
}

/// Draw `n` patch centers uniformly over the voxel grid, keeping centers
/// whose patch contains at least `tau_sample` GM voxels.
pub fn sample_patches(
    mask: &Mask3D,
    n: usize,
    s: usize,
    tau_sample: usize,
    rng: &mut Rng,
    max_attempts: Option<usize>,
) -> Result<Vec<SampledPatch>, SamplingError> {
    let limit = max_attempts.unwrap_or(1000 * n.max(1));
    let (nx, ny, nz) = mask.dims;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        if attempts >= limit {
            return Err(SamplingError::Infeasible {
                requested: n,
                attempts,
                accepted: out.len(),
            });
        }
        attempts += 1;
        let center = (
            rng.next_below(nx as u64) as f64,
            rng.next_below(ny as u64) as f64,
            rng.next_below(nz as u64) as f64,
        );
        let voxels = patch_voxels(center, s, mask.dims);
        let gm: Vec<(usize, usize, usize)> = voxels
            .into_iter()
            .filter(|&(x, y, z)| mask.get(x, y, z))
            .collect();
        if gm.len() >= tau_sample {
            out.push(SampledPatch {
                center,
                gm_voxels: gm,
            });
        }
    }
    Ok(out)
}

/// FC matrix [n_patches, n_anchors]; returns the count of degenerate
/// (zero-variance) correlations alongside.
pub fn fc_matrix(
    vol: &Volume4D,
    patches: &[SampledPatch],
    anchor_ts: &[Vec<f64>],
) -> Result<(Tensor, usize), SamplingError> {
    let n = patches.len();
    let h = anchor_ts.len();
    let mut data = Vec::with_capacity(n * h);
    let mut degenerate = 0usize;
    for p in patches {
        let series = mean_time_series(vol, &p.gm_voxels)
            .map_err(|_| SamplingError::EmptyPatch(p.center))?;
        for a in anchor_ts {
            let (r, flag) = pearson(&series, a);
            if flag {
                degenerate += 1;
            }
            data.push(r);
        }
    }
    Ok((Tensor::from_vec(&[n, h], data).unwrap(), degenerate))
}

/// The per-subject representation fed to the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    /// Mean FC across iterations, [n_patches, n_anchors].
    pub f_bar: Tensor,
    /// Normalized patch centers from every iteration, [n_patches, 3 * n_iters].
    pub positions: Tensor,
    pub label: Option<u8>,
}

/// Knobs for `iterative_representation`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SamplingConfig {
    pub n_patches: usize,
    pub sizes: Vec<usize>,
    pub tau_sample: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n_patches: 256,
            sizes: vec![8, 12, 16],
            tau_sample: 1,
        }
    }
}

/// Run all iterations off one RNG stream, average FC matrices pairwise by
/// sampling index, and concatenate normalized centers.
pub fn iterative_representation(
    vol: &Volume4D,
    mask: &Mask3D,
    set: &AnchorSet,
    cfg: &SamplingConfig,
    rng: &mut Rng,
    label: Option<u8>,
) -> Result<Representation, SamplingError> {
    let anchor_ts = anchor_series(vol, mask, set)?;
    let n = cfg.n_patches;
    let h = anchor_ts.len();
    let r_iters = cfg.sizes.len();
    let mut f_sum = vec![0.0; n * h];
    let mut positions = vec![0.0; n * 3 * r_iters];
    let (nx, ny, nz) = mask.dims;
    for (r, &s) in cfg.sizes.iter().enumerate() {
        let patches = sample_patches(mask, n, s, cfg.tau_sample, rng, None)?;
        let (fc, _) = fc_matrix(vol, &patches, &anchor_ts)?;
        for (acc, v) in f_sum.iter_mut().zip(fc.data()) {
            *acc += v;
        }
        for (i, p) in patches.iter().enumerate() {
            let row = i * 3 * r_iters + 3 * r;
            positions[row] = p.center.0 / nx as f64;
            positions[row + 1] = p.center.1 / ny as f64;
            positions[row + 2] = p.center.2 / nz as f64;
        }
    }
    for v in &mut f_sum {
        *v /= r_iters as f64;
    }
    Ok(Representation {
        f_bar: Tensor::from_vec(&[n, h], f_sum).unwrap(),
        positions: Tensor::from_vec(&[n, 3 * r_iters], positions).unwrap(),
        label,
    })
}

/// Fraction of GM voxels covered by at least one sampled patch, plus the
/// per-voxel hit map (row-major x, y, z).
pub fn gm_coverage(mask: &Mask3D, patch_sets: &[Vec<SampledPatch>]) -> (f64, Vec<bool>) {
    let (nx, ny, nz) = mask.dims;
    let mut hit = vec![false; nx * ny * nz];
    for set in patch_sets {
        for p in set {
            for &(x, y, z) in &p.gm_voxels {
                hit[(x * ny + y) * nz + z] = true;
            }
        }
    }
    let gm = mask.count();
    let covered = hit.iter().filter(|&&b| b).count();
    let frac = if gm == 0 { 0.0 } else { covered as f64 / gm as f64 };
    (frac, hit)
}

/// Mean per-cell variance of F-bar across repeated representation runs
/// (different RNG streams). Shrinks roughly like 1/R as iterations average
/// more samples.
pub fn fc_sampling_variance(reps: &[Representation]) -> f64 {
    assert!(reps.len() >= 2);
    let n = reps[0].f_bar.numel();
    let k = reps.len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        let vals: Vec<f64> = reps.iter().map(|r| r.f_bar.data()[i]).collect();
        let mean = vals.iter().sum::<f64>() / k;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
        total += var;
    }
    total / n as f64
}

// ---------------------------------------------------------------------------
// "ABFR" persistence

const MAGIC: &[u8; 4] = b"ABFR";
const VERSION: u32 = 1;

pub fn save_representation(rep: &Representation, path: &Path) -> Result<(), SamplingError> {
    let n = rep.f_bar.shape()[0];
    let h = rep.f_bar.shape()[1];
    let pos_cols = rep.positions.shape()[1];
    if pos_cols % 3 != 0 || rep.positions.shape()[0] != n {
        return Err(SamplingError::Format("inconsistent position shape".into()));
    }
    let r = pos_cols / 3;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    for v in [n as u32, h as u32, r as u32] {
        f.write_all(&v.to_le_bytes())?;
    }
    for v in rep.f_bar.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    for v in rep.positions.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    match rep.label {
        Some(l) => f.write_all(&[1, l])?,
        None => f.write_all(&[0, 0])?,
    }
    Ok(())
}

pub fn load_representation(path: &Path) -> Result<Representation, SamplingError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 {
        return Err(SamplingError::Format("file too short for header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(SamplingError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SamplingError::Format(format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let r = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let expect = 20 + (n * h + n * 3 * r) * 8 + 2;
    if bytes.len() != expect {
        return Err(SamplingError::Format(format!(
            "payload length {} != expected {expect}",
            bytes.len()
        )));
    }
    let mut pos = 20usize;
    let mut read_f64s = |count: usize| -> Vec<f64> {
        let out = bytes[pos..pos + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += count * 8;
        out
    };
    let f_bar = Tensor::from_vec(&[n, h], read_f64s(n * h)).unwrap();
    let positions = Tensor::from_vec(&[n, 3 * r], read_f64s(n * 3 * r)).unwrap();
    let label = match bytes[bytes.len() - 2] {
        0 => None,
        1 => Some(bytes[bytes.len() - 1]),
        other => {
            return Err(SamplingError::Format(format!(
                "invalid label presence byte {other}"
            )))
        }
    };
    Ok(Representation {
        f_bar,
        positions,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::select_random_anchors;
    use crate::volume::{make_phantom, PhantomSpec};

    #[test]
    fn patch_voxels_even_side_strict() {
        // s=8, h=4, integer center: strict |d|<4 keeps offsets -3..=3 -> side 7
        let vs = patch_voxels((10.0, 10.0, 10.0), 8, (24, 24, 24));
        assert_eq!(vs.len(), 7 * 7 * 7);
        for &(x, _, _) in &vs {
            assert!((7..=13).contains(&x));
        }
        // odd side s=3, h=1.5: offsets -1..=1 -> side 3
        let vs3 = patch_voxels((5.0, 5.0, 5.0), 3, (10, 10, 10));
        assert_eq!(vs3.len(), 27);
    }

    #[test]
    fn patch_voxels_clipped_at_edges() {
        let vs = patch_voxels((0.0, 0.0, 0.0), 8, (24, 24, 24));
        assert_eq!(vs.len(), 4 * 4 * 4); // only offsets 0..=3 survive
    }

    #[test]
    fn pearson_hand_oracles() {
        let (r, f) = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!(!f);
        assert!((r - 0.8).abs() < 1e-12);
        let (r1, _) = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]);
        assert!((r1 - 1.0).abs() < 1e-12);
        let (rn, _) = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]);
        assert!((rn + 1.0).abs() < 1e-12);
        let (rz, fz) = pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
        assert_eq!(rz, 0.0);
        assert!(fz);
    }

    #[test]
    fn mean_series_averages_voxels() {
        let mut vol = Volume4D::zeros((2, 2, 1, 1));
        *vol.at_mut(0, 0, 0, 0) = 1.0;
        *vol.at_mut(0, 1, 0, 0) = 3.0;
        *vol.at_mut(1, 0, 0, 0) = 2.0;
        *vol.at_mut(1, 1, 0, 0) = 4.0;
        let s = mean_time_series(&vol, &[(0, 0, 0), (1, 0, 0)]).unwrap();
        assert_eq!(s, vec![2.0, 3.0]);
    }

    fn setup() -> (Volume4D, Mask3D, AnchorSet) {
        let spec = PhantomSpec::desk(31);
        let (vol, mask, _) = make_phantom(&spec, 0).unwrap();
        let mut rng = Rng::stream(31, 1);
        let mut set = select_random_anchors(&mask, 8, 6, 30, &mut rng, None).unwrap();
        set.ensure_labels(&mask).unwrap();
        (vol, mask, set)
    }

    #[test]
    fn fc_matrix_shape_and_range() {
        let (vol, mask, set) = setup();
        let anchor_ts = anchor_series(&vol, &mask, &set).unwrap();
        let mut rng = Rng::stream(31, 2);
        let patches = sample_patches(&mask, 20, 8, 1, &mut rng, None).unwrap();
        let (fc, _) = fc_matrix(&vol, &patches, &anchor_ts).unwrap();
        assert_eq!(fc.shape(), &[20, 8]);
        for &v in fc.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn representation_shapes_and_determinism() {
        let (vol, mask, set) = setup();
        let cfg = SamplingConfig {
            n_patches: 16,
            sizes: vec![8, 12, 16],
            tau_sample: 1,
        };
        let mut rng = Rng::stream(7, 3);
        let rep = iterative_representation(&vol, &mask, &set, &cfg, &mut rng, Some(1)).unwrap();
        assert_eq!(rep.f_bar.shape(), &[16, 8]);
        assert_eq!(rep.positions.shape(), &[16, 9]);
        for &p in rep.positions.data() {
            assert!((0.0..1.0).contains(&p));
        }
        let mut rng2 = Rng::stream(7, 3);
        let rep2 = iterative_representation(&vol, &mask, &set, &cfg, &mut rng2, Some(1)).unwrap();
        assert_eq!(rep, rep2);
    }

    #[test]
    fn f_bar_is_exact_mean_of_iterations() {
        // replay the same stream manually and average the per-iteration FC
        let (vol, mask, set) = setup();
        let cfg = SamplingConfig {
            n_patches: 10,
            sizes: vec![8, 12],
            tau_sample: 1,
        };
        let mut rng = Rng::stream(99, 0);
        let rep = iterative_representation(&vol, &mask, &set, &cfg, &mut rng, None).unwrap();
        let anchor_ts = anchor_series(&vol, &mask, &set).unwrap();
        let mut rng2 = Rng::stream(99, 0);
        let p1 = sample_patches(&mask, 10, 8, 1, &mut rng2, None).unwrap();
        let (f1, _) = fc_matrix(&vol, &p1, &anchor_ts).unwrap();
        let p2 = sample_patches(&mask, 10, 12, 1, &mut rng2, None).unwrap();
        let (f2, _) = fc_matrix(&vol, &p2, &anchor_ts).unwrap();
        for i in 0..rep.f_bar.numel() {
            let expect = (f1.data()[i] + f2.data()[i]) / 2.0;
            assert!((rep.f_bar.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn coverage_grows_with_iterations() {
        let (_, mask, _) = setup();
        let mut rng = Rng::stream(5, 0);
        let one = vec![sample_patches(&mask, 24, 8, 1, &mut rng, None).unwrap()];
        let (c1, _) = gm_coverage(&mask, &one);
        let mut rng2 = Rng::stream(5, 0);
        let many: Vec<_> = [8usize, 12, 16]
            .iter()
            .map(|&s| sample_patches(&mask, 24, s, 1, &mut rng2, None).unwrap())
            .collect();
        let (c3, hit) = gm_coverage(&mask, &many);
        assert!(c3 >= c1);
        assert!(c1 > 0.0 && c3 <= 1.0);
        // hit map only marks GM voxels
        let (nx, ny, nz) = mask.dims;
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if hit[(x * ny + y) * nz + z] {
                        assert!(mask.get(x, y, z));
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_variance_positive_and_finite() {
        let (vol, mask, set) = setup();
        let cfg = SamplingConfig {
            n_patches: 12,
            sizes: vec![8],
            tau_sample: 1,
        };
        let reps: Vec<Representation> = (0..4)
            .map(|i| {
                let mut rng = Rng::stream(1000, i);
                iterative_representation(&vol, &mask, &set, &cfg, &mut rng, None).unwrap()
            })
            .collect();
        let v = fc_sampling_variance(&reps);
        assert!(v > 0.0 && v.is_finite());
    }

    #[test]
    fn representation_round_trip_bitwise() {
        let (vol, mask, set) = setup();
        let cfg = SamplingConfig {
            n_patches: 6,
            sizes: vec![8, 12],
            tau_sample: 1,
        };
        let mut rng = Rng::stream(2, 2);
        let rep = iterative_representation(&vol, &mask, &set, &cfg, &mut rng, Some(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rep.abfr");
        save_representation(&rep, &path).unwrap();
        let back = load_representation(&path).unwrap();
        assert_eq!(rep, back);
        // unlabeled round trip
        let mut unl = rep.clone();
        unl.label = None;
        save_representation(&unl, &path).unwrap();
        assert_eq!(load_representation(&path).unwrap().label, None);
        // corruption
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[2] = b'Q';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_representation(&path).is_err());
    }
}

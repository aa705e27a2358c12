//! 4D BOLD volumes, 3D grey-matter masks, a minimal NIfTI-1 reader, a raw
//! persistence format, and a synthetic phantom generator.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("nifti parse error in field {field}: {message}")]
    NiftiParse { field: &'static str, message: String },
    #[error("raw format error: {0}")]
    RawFormat(String),
    #[error("phantom spec error: {0}")]
    PhantomSpec(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("empty voxel set")]
    EmptyVoxelSet,
}

/// A subject's BOLD recording: T time points over an X*Y*Z grid,
/// row-major in (t, x, y, z) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    pub dims: (usize, usize, usize, usize),
    pub data: Vec<f64>,
}

impl Volume4D {
    pub fn new(dims: (usize, usize, usize, usize), data: Vec<f64>) -> Self {
        let (t, x, y, z) = dims;
        assert_eq!(data.len(), t * x * y * z);
        Volume4D { dims, data }
    }

    pub fn zeros(dims: (usize, usize, usize, usize)) -> Self {
        let (t, x, y, z) = dims;
        Volume4D {
            dims,
            data: vec![0.0; t * x * y * z],
        }
    }

    #[inline]
    pub fn at(&self, t: usize, x: usize, y: usize, z: usize) -> f64 {
        let (_, nx, ny, nz) = self.dims;
        self.data[((t * nx + x) * ny + y) * nz + z]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, x: usize, y: usize, z: usize) -> &mut f64 {
        let (_, nx, ny, nz) = self.dims;
        &mut self.data[((t * nx + x) * ny + y) * nz + z]
    }

    pub fn spatial_dims(&self) -> (usize, usize, usize) {
        (self.dims.1, self.dims.2, self.dims.3)
    }
}

/// Binary grey-matter mask over an X*Y*Z grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    pub dims: (usize, usize, usize),
    data: Vec<bool>,
}

impl Mask3D {
    pub fn new(dims: (usize, usize, usize)) -> Self {
        Mask3D {
            dims,
            data: vec![false; dims.0 * dims.1 * dims.2],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[(x * self.dims.1 + y) * self.dims.2 + z]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        self.data[(x * self.dims.1 + y) * self.dims.2 + z] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn total(&self) -> usize {
        self.data.len()
    }

    /// GM voxels with at least one non-GM 6-neighbor (faces only); voxels on
    /// the volume edge count as boundary.
    pub fn boundary_voxels(&self) -> Vec<(usize, usize, usize)> {
        let (nx, ny, nz) = self.dims;
        let mut out = Vec::new();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if !self.get(x, y, z) {
                        continue;
                    }
                    let neighbors = [
                        (x.wrapping_sub(1), y, z),
                        (x + 1, y, z),
                        (x, y.wrapping_sub(1), z),
                        (x, y + 1, z),
                        (x, y, z.wrapping_sub(1)),
                        (x, y, z + 1),
                    ];
                    let is_boundary = neighbors.iter().any(|&(a, b, c)| {
                        a >= nx || b >= ny || c >= nz || !self.get(a, b, c)
                    });
                    if is_boundary {
                        out.push((x, y, z));
                    }
                }
            }
        }
        out
    }
}

/// Euclidean distance (in voxels) from `point` to the nearest GM boundary voxel.
pub fn gm_boundary_distance(mask: &Mask3D, point: (f64, f64, f64)) -> Result<f64, VolumeError> {
    let boundary = mask.boundary_voxels();
    if boundary.is_empty() {
        return Err(VolumeError::EmptyMask);
    }
    let mut best = f64::INFINITY;
    for (x, y, z) in boundary {
        let dx = x as f64 - point.0;
        let dy = y as f64 - point.1;
        let dz = z as f64 - point.2;
        let d2 = dx * dx + dy * dy + dz * dz;
        if d2 < best {
            best = d2;
        }
    }
    Ok(best.sqrt())
}

// ---------------------------------------------------------------------------
// Raw "ABFV" persistence

const ABFV_MAGIC: &[u8; 4] = b"ABFV";
const ABFV_VERSION: u32 = 1;

pub fn save_raw(volume: &Volume4D, path: &Path) -> Result<(), VolumeError> {
    let (t, x, y, z) = volume.dims;
    if t == 0 || x == 0 || y == 0 || z == 0 {
        return Err(VolumeError::RawFormat("empty dims".into()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(ABFV_MAGIC)?;
    f.write_all(&ABFV_VERSION.to_le_bytes())?;
    for d in [t, x, y, z] {
        f.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in &volume.data {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Volume4D, VolumeError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 40 {
        return Err(VolumeError::RawFormat("file too short for header".into()));
    }
    if &bytes[0..4] != ABFV_MAGIC {
        return Err(VolumeError::RawFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ABFV_VERSION {
        return Err(VolumeError::RawFormat(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u64::from_le_bytes(bytes[8 + i * 8..16 + i * 8].try_into().unwrap()) as usize;
    }
    let n: usize = dims.iter().product();
    let expect = 40 + n * 8;
    if bytes.len() != expect {
        return Err(VolumeError::RawFormat(format!(
            "payload length {} != expected {}",
            bytes.len(),
            expect
        )));
    }
    let data = bytes[40..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Volume4D::new((dims[0], dims[1], dims[2], dims[3]), data))
}

/// A mask round-trips through ABFV as a single-timepoint 0/1 volume.
pub fn save_mask(mask: &Mask3D, path: &Path) -> Result<(), VolumeError> {
    let (x, y, z) = mask.dims;
    let mut vol = Volume4D::zeros((1, x, y, z));
    for xi in 0..x {
        for yi in 0..y {
            for zi in 0..z {
                *vol.at_mut(0, xi, yi, zi) = if mask.get(xi, yi, zi) { 1.0 } else { 0.0 };
            }
        }
    }
    save_raw(&vol, path)
}

pub fn load_mask(path: &Path) -> Result<Mask3D, VolumeError> {
    let vol = load_raw(path)?;
    if vol.dims.0 != 1 {
        return Err(VolumeError::RawFormat("mask file must have T=1".into()));
    }
    let (x, y, z) = vol.spatial_dims();
    let mut mask = Mask3D::new((x, y, z));
    for xi in 0..x {
        for yi in 0..y {
            for zi in 0..z {
                mask.set(xi, yi, zi, vol.at(0, xi, yi, zi) != 0.0);
            }
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// NIfTI-1 reader (single-file uncompressed .nii subset)

/// Parsed header fields of interest, after any byte swap.
#[derive(Debug, Clone)]
pub struct NiftiSummary {
    pub dims: Vec<usize>,
    pub datatype: i16,
    pub bitpix: i16,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: f32,
    pub swapped: bool,
}

pub enum NiftiData {
    Volume(Volume4D),
    Mask(Mask3D),
}

fn rd_i16(b: &[u8], off: usize, swap: bool) -> i16 {
    let raw: [u8; 2] = b[off..off + 2].try_into().unwrap();
    if swap {
        i16::from_be_bytes(raw)
    } else {
        i16::from_le_bytes(raw)
    }
}

fn rd_f32(b: &[u8], off: usize, swap: bool) -> f32 {
    let raw: [u8; 4] = b[off..off + 4].try_into().unwrap();
    if swap {
        f32::from_be_bytes(raw)
    } else {
        f32::from_be_bytes([raw[3], raw[2], raw[1], raw[0]])
    }
}

pub fn load_nifti(path: &Path) -> Result<(NiftiData, NiftiSummary), VolumeError> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 348 {
        return Err(VolumeError::NiftiParse {
            field: "sizeof_hdr",
            message: format!("file is {} bytes, header needs 348", bytes.len()),
        });
    }
    let sizeof_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let sizeof_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let swap = if sizeof_le == 348 {
        false
    } else if sizeof_be == 348 {
        true
    } else {
        return Err(VolumeError::NiftiParse {
            field: "sizeof_hdr",
            message: format!("{sizeof_le} (neither endianness reads 348)"),
        });
    };
    let magic = &bytes[344..348];
    if magic == b"ni1\0" {
        return Err(VolumeError::NiftiParse {
            field: "magic",
            message: "two-file (.hdr/.img) form is unsupported".into(),
        });
    }
    if magic != b"n+1\0" {
        return Err(VolumeError::NiftiParse {
            field: "magic",
            message: format!("{:?}", magic),
        });
    }
    let ndim = rd_i16(&bytes, 40, swap);
    if !(3..=4).contains(&ndim) {
        return Err(VolumeError::NiftiParse {
            field: "dim[0]",
            message: format!("{ndim} not in {{3, 4}}"),
        });
    }
    let mut dims = Vec::new();
    for i in 1..=ndim as usize {
        let d = rd_i16(&bytes, 40 + 2 * i, swap);
        if d <= 0 {
            return Err(VolumeError::NiftiParse {
                field: "dim",
                message: format!("dim[{i}] = {d}"),
            });
        }
        dims.push(d as usize);
    }
    let datatype = rd_i16(&bytes, 70, swap);
    let bitpix = rd_i16(&bytes, 72, swap);
    let bytes_per = match datatype {
        2 => 1,  // u8
        4 => 2,  // i16
        16 => 4, // f32
        64 => 8, // f64
        other => {
            return Err(VolumeError::NiftiParse {
                field: "datatype",
                message: format!("unsupported code {other}"),
            })
        }
    };
    let scl_slope = rd_f32(&bytes, 112, swap);
    let scl_inter = rd_f32(&bytes, 116, swap);
    let vox_offset = rd_f32(&bytes, 108, swap);
    let offset = if vox_offset < 348.0 {
        348
    } else {
        vox_offset as usize
    };
    let nvox: usize = dims.iter().product();
    // checked arithmetic: a fuzzed header can request absurd offsets/sizes
    let need = nvox
        .checked_mul(bytes_per)
        .and_then(|n| n.checked_add(offset))
        .ok_or(VolumeError::NiftiParse {
            field: "payload",
            message: "requested size overflows".into(),
        })?;
    if bytes.len() < need {
        return Err(VolumeError::NiftiParse {
            field: "payload",
            message: format!("file is {} bytes, need {need}", bytes.len()),
        });
    }
    let payload = &bytes[offset..need];
    let mut values = Vec::with_capacity(nvox);
    for i in 0..nvox {
        let raw = match datatype {
            2 => payload[i] as f64,
            4 => {
                let v: [u8; 2] = payload[i * 2..i * 2 + 2].try_into().unwrap();
                (if swap {
                    i16::from_be_bytes(v)
                } else {
                    i16::from_le_bytes(v)
                }) as f64
            }
            16 => {
                let v: [u8; 4] = payload[i * 4..i * 4 + 4].try_into().unwrap();
                (if swap {
                    f32::from_be_bytes(v)
                } else {
                    f32::from_le_bytes(v)
                }) as f64
            }
            64 => {
                let v: [u8; 8] = payload[i * 8..i * 8 + 8].try_into().unwrap();
                if swap {
                    f64::from_be_bytes(v)
                } else {
                    f64::from_le_bytes(v)
                }
            }
            _ => unreachable!(),
        };
        let scaled = if scl_slope != 0.0 {
            raw * scl_slope as f64 + scl_inter as f64
        } else {
            raw
        };
        values.push(scaled);
    }
    let summary = NiftiSummary {
        dims: dims.clone(),
        datatype,
        bitpix,
        scl_slope,
        scl_inter,
        vox_offset,
        swapped: swap,
    };
    // NIfTI stores spatial dims fastest-varying first (x, y, z[, t]); our
    // in-memory layout is (t, x, y, z) row-major with z fastest. Reorder.
    let data = if ndim == 4 {
        let (nx, ny, nz, nt) = (dims[0], dims[1], dims[2], dims[3]);
        let mut out = Volume4D::zeros((nt, nx, ny, nz));
        for t in 0..nt {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        *out.at_mut(t, x, y, z) = values[((t * nz + z) * ny + y) * nx + x];
                    }
                }
            }
        }
        NiftiData::Volume(out)
    } else {
        let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
        let mut mask = Mask3D::new((nx, ny, nz));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    mask.set(x, y, z, values[(z * ny + y) * nx + x] != 0.0);
                }
            }
        }
        NiftiData::Mask(mask)
    };
    Ok((data, summary))
}

// ---------------------------------------------------------------------------
// Synthetic phantom

/// Parameters of the synthetic rs-fMRI phantom used in place of clinical data.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub t: usize,
    /// Outer semi-axes of the grey-matter ellipsoidal shell.
    pub outer_radii: (f64, f64, f64),
    /// Inner radius as a fraction of the outer (shell hollowness).
    pub inner_fraction: f64,
    pub n_regions: usize,
    pub class_effect: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Desk-scale defaults; `class_label` selects the planted FC structure.
    pub fn desk(seed: u64) -> Self {
        PhantomSpec {
            dims: (24, 24, 24),
            t: 60,
            outer_radii: (10.5, 10.5, 10.5),
            inner_fraction: 0.55,
            n_regions: 6,
            class_effect: 0.8,
            noise_sigma: 0.5,
            seed,
        }
    }

    /// Larger shell used for the anchor-conformity diagnostics (fits
    /// H=100, s=8, tau=100 anchor selection).
    pub fn shell(seed: u64) -> Self {
        PhantomSpec {
            dims: (36, 36, 36),
            t: 60,
            outer_radii: (15.12, 15.12, 15.12),
            inner_fraction: 0.3,
            n_regions: 6,
            class_effect: 0.0,
            noise_sigma: 0.5,
            seed,
        }
    }

    fn validate(&self) -> Result<(), VolumeError> {
        if self.n_regions < 2 {
            return Err(VolumeError::PhantomSpec("n_regions must be >= 2".into()));
        }
        if self.noise_sigma <= 0.0 {
            return Err(VolumeError::PhantomSpec("noise_sigma must be > 0".into()));
        }
        if self.class_effect < 0.0 {
            return Err(VolumeError::PhantomSpec("class_effect must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.inner_fraction) {
            return Err(VolumeError::PhantomSpec("inner_fraction must be in [0,1)".into()));
        }
        if self.t < 2 {
            return Err(VolumeError::PhantomSpec("t must be >= 2".into()));
        }
        Ok(())
    }
}

/// Ellipsoidal-shell GM mask for a spec.
pub fn phantom_mask(spec: &PhantomSpec) -> Result<Mask3D, VolumeError> {
    spec.validate()?;
    let (nx, ny, nz) = spec.dims;
    let (cx, cy, cz) = (
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    );
    let (rx, ry, rz) = spec.outer_radii;
    let mut mask = Mask3D::new(spec.dims);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let q = ((x as f64 - cx) / rx).powi(2)
                    + ((y as f64 - cy) / ry).powi(2)
                    + ((z as f64 - cz) / rz).powi(2);
                let r = q.sqrt();
                if r <= 1.0 && r >= spec.inner_fraction {
                    mask.set(x, y, z, true);
                }
            }
        }
    }
    if mask.count() == 0 {
        return Err(VolumeError::PhantomSpec("shell geometry is empty".into()));
    }
    Ok(mask)
}

/// Region labels for GM voxels: nearest of `n_regions` deterministic seed
/// points on the shell (Voronoi partition, contiguous communities).
pub fn phantom_regions(spec: &PhantomSpec, mask: &Mask3D) -> Vec<u16> {
    let (nx, ny, nz) = mask.dims;
    let (cx, cy, cz) = (
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    );
    // Region seed directions spread over the sphere (golden-angle spiral).
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    let seeds: Vec<(f64, f64, f64)> = (0..spec.n_regions)
        .map(|i| {
            let yfrac = 1.0 - 2.0 * (i as f64 + 0.5) / spec.n_regions as f64;
            let r = (1.0 - yfrac * yfrac).sqrt();
            let th = golden * i as f64;
            let dir = (r * th.cos(), yfrac, r * th.sin());
            (
                cx + dir.0 * spec.outer_radii.0,
                cy + dir.1 * spec.outer_radii.1,
                cz + dir.2 * spec.outer_radii.2,
            )
        })
        .collect();
    let mut labels = vec![0u16; nx * ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !mask.get(x, y, z) {
                    continue;
                }
                let mut best = 0usize;
                let mut bestd = f64::INFINITY;
                for (j, s) in seeds.iter().enumerate() {
                    let d = (x as f64 - s.0).powi(2)
                        + (y as f64 - s.1).powi(2)
                        + (z as f64 - s.2).powi(2);
                    if d < bestd {
                        bestd = d;
                        best = j;
                    }
                }
                labels[(x * ny + y) * nz + z] = best as u16 + 1;
            }
        }
    }
    labels
}

/// Per-region latent time courses: two sinusoids with region-specific
/// frequencies plus white noise. For class 1, even/odd region pairs share
/// mixed latents weighted by `class_effect`.
pub fn phantom_latents(spec: &PhantomSpec, class_label: u8, rng: &mut Rng) -> Vec<Vec<f64>> {
    let t_len = spec.t;
    let mut latents: Vec<Vec<f64>> = (0..spec.n_regions)
        .map(|j| {
            let f1 = 0.04 + 0.013 * j as f64;
            let f2 = 0.09 + 0.017 * j as f64;
            let phase1 = rng.next_uniform(0.0, 2.0 * std::f64::consts::PI);
            let phase2 = rng.next_uniform(0.0, 2.0 * std::f64::consts::PI);
            (0..t_len)
                .map(|t| {
                    let tt = t as f64;
                    (2.0 * std::f64::consts::PI * f1 * tt + phase1).sin()
                        + 0.6 * (2.0 * std::f64::consts::PI * f2 * tt + phase2).sin()
                        + 0.2 * rng.next_normal()
                })
                .collect()
        })
        .collect();
    if class_label == 1 && spec.class_effect > 0.0 {
        let w = spec.class_effect.min(1.0);
        for pair in 0..spec.n_regions / 2 {
            let (a, b) = (2 * pair, 2 * pair + 1);
            let src = latents[a].clone();
            let dst = &mut latents[b];
            for (d, s) in dst.iter_mut().zip(&src) {
                *d = (1.0 - w) * *d + w * *s;
            }
        }
    }
    latents
}

/// Generate one phantom subject. Deterministic given the spec seed.
pub fn make_phantom(
    spec: &PhantomSpec,
    class_label: u8,
) -> Result<(Volume4D, Mask3D, u8), VolumeError> {
    spec.validate()?;
    let mask = phantom_mask(spec)?;
    let labels = phantom_regions(spec, &mask);
    let mut rng = Rng::new(spec.seed);
    let latents = phantom_latents(spec, class_label, &mut rng);
    let (nx, ny, nz) = spec.dims;
    let mut vol = Volume4D::zeros((spec.t, nx, ny, nz));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let lab = labels[(x * ny + y) * nz + z];
                if lab == 0 {
                    continue;
                }
                let latent = &latents[(lab - 1) as usize];
                for t in 0..spec.t {
                    *vol.at_mut(t, x, y, z) = latent[t] + spec.noise_sigma * rng.next_normal();
                }
            }
        }
    }
    Ok((vol, mask, class_label))
}

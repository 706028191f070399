//! Procedural paired-data generator: voxel scenes, camera trajectories,
//! rendered frame sequences, scene-descriptor tokens, and a bit-exact
//! dataset container.

mod dataset;
mod render;

pub use dataset::{read_dataset, read_grid, write_dataset, write_grid, DatasetManifest, OSD_MAGIC, OSD_VERSION};
pub use render::render;

use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Voxel class ids. Class 0 is reserved for free space.
pub const CLASS_FREE: u8 = 0;
pub const CLASS_GROUND: u8 = 1;
pub const CLASS_BUILDING: u8 = 2;
pub const CLASS_VEHICLE: u8 = 3;

/// Fixed class palette (RGB in [0,1]); part of the frozen render definition.
pub const PALETTE: [[f32; 3]; 4] = [
    [0.00, 0.00, 0.00], // free (never drawn)
    [0.35, 0.55, 0.30], // ground
    [0.45, 0.50, 0.62], // building
    [0.80, 0.25, 0.20], // vehicle
];

/// Background color for rays that exit the volume.
pub const BACKGROUND: [f32; 3] = [0.10, 0.12, 0.18];

/// Depth shading factor per meter; also frozen.
pub const SHADE_PER_METER: f32 = 0.12;

/// Dense voxel class labels, row-major over (d, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3], // (D, H, W)
    pub voxel_size: f64,
    pub labels: Vec<u8>,
    pub num_classes: u8,
}

impl OccupancyGrid {
    pub fn free(dims: [usize; 3], voxel_size: f64, num_classes: u8) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(OccError::InvalidSpec("grid dims must be positive".into()));
        }
        Ok(OccupancyGrid {
            dims,
            voxel_size,
            labels: vec![CLASS_FREE; dims[0] * dims[1] * dims[2]],
            num_classes,
        })
    }

    #[inline]
    pub fn idx(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn label(&self, d: usize, h: usize, w: usize) -> u8 {
        self.labels[self.idx(d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, c: u8) {
        let i = self.idx(d, h, w);
        self.labels[i] = c;
    }

    pub fn num_voxels(&self) -> usize {
        self.labels.len()
    }

    /// Voxel count per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn occupied_fraction(&self) -> f64 {
        let occ = self.labels.iter().filter(|&&l| l != CLASS_FREE).count();
        occ as f64 / self.num_voxels() as f64
    }

    /// World-space extent in meters per axis (x=w, y=h, z=d).
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[2] as f64 * self.voxel_size,
            self.dims[1] as f64 * self.voxel_size,
            self.dims[0] as f64 * self.voxel_size,
        ]
    }
}

/// Pinhole camera: 3x3 intrinsics plus a 4x4 world-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 4],
}

impl CameraParams {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsics: [[f64; 4]; 4]) -> Self {
        CameraParams {
            intrinsics: [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            extrinsics,
        }
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[1][2]
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let e = &self.extrinsics;
        [
            [e[0][0], e[0][1], e[0][2]],
            [e[1][0], e[1][1], e[1][2]],
            [e[2][0], e[2][1], e[2][2]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.extrinsics[0][3], self.extrinsics[1][3], self.extrinsics[2][3]]
    }

    /// Camera center in world coordinates: -R^T t.
    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
        }
        c
    }

    /// World-space view direction (camera +z axis): R^T e_z.
    pub fn view_dir(&self) -> [f64; 3] {
        let r = self.rotation();
        [r[2][0], r[2][1], r[2][2]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx() <= 0.0 || self.fy() <= 0.0 {
            return Err(OccError::DegenerateCamera(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx(),
                self.fy()
            )));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(OccError::DegenerateCamera(
                        "rotation block not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// 25-entry concatenation: 9 intrinsics + 16 extrinsics, row-major.
    pub fn flat(&self) -> [f32; 25] {
        let mut out = [0f32; 25];
        let mut k = 0;
        for row in &self.intrinsics {
            for &v in row {
                out[k] = v as f32;
                k += 1;
            }
        }
        for row in &self.extrinsics {
            for &v in row {
                out[k] = v as f32;
                k += 1;
            }
        }
        out
    }

    pub fn from_flat(flat: &[f32; 25]) -> Self {
        let mut intr = [[0f64; 3]; 3];
        let mut extr = [[0f64; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                intr[i][j] = flat[i * 3 + j] as f64;
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                extr[i][j] = flat[9 + i * 4 + j] as f64;
            }
        }
        CameraParams { intrinsics: intr, extrinsics: extr }
    }
}

/// Scene density presets; fixes the object-count ranges when sampling specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Sparse,
    Medium,
    Dense,
}

impl Density {
    fn tag(self) -> u16 {
        match self {
            Density::Sparse => 0,
            Density::Medium => 1,
            Density::Dense => 2,
        }
    }

    fn from_tag(t: u16) -> Result<Self> {
        match t {
            0 => Ok(Density::Sparse),
            1 => Ok(Density::Medium),
            2 => Ok(Density::Dense),
            t => Err(OccError::UnknownToken(t)),
        }
    }

    /// (building range, vehicle range) inclusive.
    pub fn count_ranges(self) -> ((u8, u8), (u8, u8)) {
        match self {
            Density::Sparse => ((1, 1), (1, 2)),
            Density::Medium => ((1, 2), (2, 3)),
            Density::Dense => ((2, 3), (3, 5)),
        }
    }
}

/// Requested object counts per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub buildings: u8,
    pub vehicles: u8,
}

/// Compact scene description; round-trips through its token encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSpec {
    pub seed: u32,
    pub object_counts: ObjectCounts,
    pub density: Density,
}

/// Fixed token-sequence length for every spec.
pub const TOKEN_COUNT: usize = 8;
/// Token vocabulary size (every token is one byte).
pub const TOKEN_VOCAB: usize = 256;
const TOKEN_VERSION: u16 = 1;

impl SceneSpec {
    pub fn encode_tokens(&self) -> [u16; TOKEN_COUNT] {
        let s = self.seed;
        [
            TOKEN_VERSION,
            self.density.tag(),
            self.object_counts.buildings as u16,
            self.object_counts.vehicles as u16,
            (s & 0xff) as u16,
            ((s >> 8) & 0xff) as u16,
            ((s >> 16) & 0xff) as u16,
            ((s >> 24) & 0xff) as u16,
        ]
    }

    pub fn decode_tokens(tokens: &[u16]) -> Result<Self> {
        if tokens.len() != TOKEN_COUNT {
            return Err(OccError::InvalidSpec(format!(
                "token sequence length {} != {TOKEN_COUNT}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= TOKEN_VOCAB) {
            return Err(OccError::UnknownToken(bad));
        }
        if tokens[0] != TOKEN_VERSION {
            return Err(OccError::InvalidSpec(format!("unknown token version {}", tokens[0])));
        }
        let density = Density::from_tag(tokens[1])?;
        let seed = tokens[4] as u32
            | (tokens[5] as u32) << 8
            | (tokens[6] as u32) << 16
            | (tokens[7] as u32) << 24;
        Ok(SceneSpec {
            seed,
            object_counts: ObjectCounts {
                buildings: tokens[2] as u8,
                vehicles: tokens[3] as u8,
            },
            density,
        })
    }

    /// Draw a spec under the density's count ranges.
    pub fn sample(rng: &mut RngStream, density: Density) -> Self {
        let ((b_lo, b_hi), (v_lo, v_hi)) = density.count_ranges();
        SceneSpec {
            seed: rng.next_u64() as u32,
            object_counts: ObjectCounts {
                buildings: b_lo + rng.below((b_hi - b_lo + 1) as u64) as u8,
                vehicles: v_lo + rng.below((v_hi - v_lo + 1) as u64) as u8,
            },
            density,
        }
    }
}

/// World geometry and rendering parameters; frozen inside dataset manifests.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub grid_dims: [usize; 3], // (D, H, W)
    pub voxel_size: f64,
    pub num_classes: u8,
    pub image_hw: [usize; 2],
    pub frames: usize,
    pub trajectory_step: f64,
    pub density: Density,
    pub focal: f64,
    /// Allowed occupied-voxel fraction per density (sparse, medium, dense).
    pub density_bounds: [[f64; 2]; 3],
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            grid_dims: [16, 8, 16],
            voxel_size: 0.5,
            num_classes: 4,
            image_hw: [32, 48],
            frames: 4,
            trajectory_step: 0.4,
            density: Density::Medium,
            focal: 40.0,
            density_bounds: [[0.125, 0.20], [0.125, 0.25], [0.125, 0.30]],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_dims.iter().any(|&d| d == 0)
            || self.image_hw.iter().any(|&d| d == 0)
            || self.frames == 0
        {
            return Err(OccError::InvalidConfig("world dims must be positive".into()));
        }
        if self.num_classes < 4 {
            return Err(OccError::InvalidConfig(
                "need at least 4 classes (free/ground/building/vehicle)".into(),
            ));
        }
        if self.voxel_size <= 0.0 || self.focal <= 0.0 || self.trajectory_step < 0.0 {
            return Err(OccError::InvalidConfig("world scalars must be positive".into()));
        }
        Ok(())
    }
}

/// One paired sample: frames, per-frame cameras, the shared world grid, and
/// the spec that produced it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub frames: Vec<Tensor<f32>>, // each 3 x H x W in [0,1]
    pub cameras: Vec<CameraParams>,
    pub grid: OccupancyGrid,
    pub spec: SceneSpec,
}

// ---------------------------------------------------------------------------
// scene generation
// ---------------------------------------------------------------------------

struct BoxRegion {
    d: (usize, usize), // inclusive start, exclusive end
    h: (usize, usize),
    w: (usize, usize),
}

/// True if `a` dilated by one cell overlaps `b` (keeps objects separated so
/// connected components equal object counts).
fn boxes_touch(a: &BoxRegion, b: &BoxRegion) -> bool {
    let overlap = |x: (usize, usize), y: (usize, usize)| -> bool {
        x.0 < y.1 + 1 && y.0 < x.1 + 1
    };
    overlap(a.d, b.d) && overlap(a.h, b.h) && overlap(a.w, b.w)
}

/// Deterministic scene synthesis: ground plane (class 1), separated building
/// boxes (class 2) and vehicle boxes (class 3) on the ground, remainder free.
pub fn generate_scene(spec: &SceneSpec, cfg: &WorldConfig) -> Result<OccupancyGrid> {
    cfg.validate()?;
    let [dd, hh, ww] = cfg.grid_dims;
    let mut grid = OccupancyGrid::free(cfg.grid_dims, cfg.voxel_size, cfg.num_classes)?;
    for d in 0..dd {
        for w in 0..ww {
            grid.set(d, 0, w, CLASS_GROUND);
        }
    }

    let mut rng = RngStream::new(spec.seed as u64).derive("scene");
    let mut placed: Vec<BoxRegion> = Vec::new();

    let place = |rng: &mut RngStream,
                     grid: &mut OccupancyGrid,
                     placed: &mut Vec<BoxRegion>,
                     class: u8,
                     count: u32|
     -> Result<u32> {
        let mut done = 0u32;
        'objects: for _ in 0..count {
            for _try in 0..64 {
                let (sd, sh, sw) = match class {
                    CLASS_BUILDING => (
                        2 + rng.below(3) as usize,
                        (3 + rng.below(3) as usize).min(hh - 1),
                        2 + rng.below(3) as usize,
                    ),
                    _ => {
                        // vehicles: 2 cells long, random orientation
                        if rng.below(2) == 0 {
                            (2, 1, 1)
                        } else {
                            (1, 1, 2)
                        }
                    }
                };
                if sd >= dd || sw >= ww {
                    continue;
                }
                let d0 = rng.below((dd - sd) as u64 + 1) as usize;
                let w0 = rng.below((ww - sw) as u64 + 1) as usize;
                let region = BoxRegion {
                    d: (d0, d0 + sd),
                    h: (1, 1 + sh),
                    w: (w0, w0 + sw),
                };
                if placed.iter().any(|p| boxes_touch(p, &region)) {
                    continue;
                }
                for d in region.d.0..region.d.1 {
                    for h in region.h.0..region.h.1 {
                        for w in region.w.0..region.w.1 {
                            grid.set(d, h, w, class);
                        }
                    }
                }
                placed.push(region);
                done += 1;
                continue 'objects;
            }
            return Err(OccError::PlacementOverflow { class, requested: count, placed: done });
        }
        Ok(done)
    };

    place(&mut rng, &mut grid, &mut placed, CLASS_BUILDING, spec.object_counts.buildings as u32)?;
    place(&mut rng, &mut grid, &mut placed, CLASS_VEHICLE, spec.object_counts.vehicles as u32)?;
    Ok(grid)
}

// ---------------------------------------------------------------------------
// cameras and trajectories
// ---------------------------------------------------------------------------

/// Base pose looking into the volume along +z (depth axis), eye level above
/// the ground, laterally jittered by the spec seed.
pub fn base_camera(spec: &SceneSpec, cfg: &WorldConfig) -> CameraParams {
    let [ext_x, ext_y, ext_z] = {
        let g = OccupancyGrid {
            dims: cfg.grid_dims,
            voxel_size: cfg.voxel_size,
            labels: vec![],
            num_classes: cfg.num_classes,
        };
        g.extent()
    };
    let mut rng = RngStream::new(spec.seed as u64).derive("camera");
    let jitter = rng.uniform_in(-0.1, 0.1) * ext_x;
    let center = [0.5 * ext_x + jitter, 0.60 * ext_y, -0.30 * ext_z];
    // 180-degree rotation about z: camera x = -world x, camera y = -world y
    // (y points down in the image), camera z = +world z. Proper rotation.
    let r = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
    // t = -R c
    let t = [
        r[0][0] * center[0] + r[0][1] * center[1] + r[0][2] * center[2],
        r[1][0] * center[0] + r[1][1] * center[1] + r[1][2] * center[2],
        r[2][0] * center[0] + r[2][1] * center[1] + r[2][2] * center[2],
    ];
    let extr = [
        [r[0][0], r[0][1], r[0][2], -t[0]],
        [r[1][0], r[1][1], r[1][2], -t[1]],
        [r[2][0], r[2][1], r[2][2], -t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let [h, w] = cfg.image_hw;
    CameraParams::new(cfg.focal, cfg.focal, w as f64 / 2.0, h as f64 / 2.0, extr)
}

/// n poses translated forward along the view axis by `step` meters each.
pub fn make_trajectory(start: &CameraParams, n: usize, step: f64) -> Vec<CameraParams> {
    let dir = start.view_dir();
    let c0 = start.center();
    let r = start.rotation();
    (0..n)
        .map(|k| {
            let c = [
                c0[0] + dir[0] * step * k as f64,
                c0[1] + dir[1] * step * k as f64,
                c0[2] + dir[2] * step * k as f64,
            ];
            let t = [
                -(r[0][0] * c[0] + r[0][1] * c[1] + r[0][2] * c[2]),
                -(r[1][0] * c[0] + r[1][1] * c[1] + r[1][2] * c[2]),
                -(r[2][0] * c[0] + r[2][1] * c[1] + r[2][2] * c[2]),
            ];
            let mut extr = start.extrinsics;
            extr[0][3] = t[0];
            extr[1][3] = t[1];
            extr[2][3] = t[2];
            CameraParams { intrinsics: start.intrinsics, extrinsics: extr }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// samples and datasets
// ---------------------------------------------------------------------------

/// Build one full paired sample from a spec.
pub fn make_sample(spec: &SceneSpec, cfg: &WorldConfig) -> Result<Sample> {
    let grid = generate_scene(spec, cfg)?;
    let base = base_camera(spec, cfg);
    let cameras = make_trajectory(&base, cfg.frames, cfg.trajectory_step);
    let frames = cameras
        .iter()
        .map(|cam| render(&grid, cam, (cfg.image_hw[0], cfg.image_hw[1])))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample { frames, cameras, grid, spec: *spec })
}

/// Deterministic dataset: sample i is a pure function of (cfg, seed, i).
pub fn generate_dataset(cfg: &WorldConfig, count: usize, seed: u64) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    cfg.validate()?;
    let root = RngStream::new(seed);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut stream = root.derive_n("spec", i as u64);
            // a handful of redraws in case a crowded draw cannot be placed
            for _ in 0..8 {
                let spec = SceneSpec::sample(&mut stream, cfg.density);
                match make_sample(&spec, cfg) {
                    Ok(s) => return Ok(s),
                    Err(OccError::PlacementOverflow { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(OccError::InvalidSpec(format!("sample {i}: placement kept overflowing")))
        })
        .collect()
}

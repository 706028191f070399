//! "OSD1" dataset container plus its JSON manifest.
//!
//! File layout (all little-endian):
//!   magic "OSD1" | version u16 | sample count u32 | blocks...
//! Each block:
//!   header: D, H, W, N, H_img, W_img, C as u16 fields
//!   spec tokens: TOKEN_COUNT x u16
//!   labels: D*H*W x u8
//!   camera flats: N x 25 x f32
//!   frames: N x 3 x H_img x W_img x f32
//!   crc32 of the block bytes above, u32
//! The sibling `<file>.manifest.json` records seeds, config hash, voxel size,
//! and per-sample byte offsets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CameraParams, OccupancyGrid, Sample, SceneSpec, TOKEN_COUNT};
use crate::error::{OccError, Result};
use crate::tensor::Tensor;

pub const OSD_MAGIC: &[u8; 4] = b"OSD1";
pub const OSD_VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u16,
    pub count: u32,
    pub seeds: Vec<u32>,
    pub config_hash: String,
    pub voxel_size: f64,
    pub offsets: Vec<u64>,
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(OccError::FormatError(format!(
                "truncated container: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn encode_block(s: &Sample) -> Result<Vec<u8>> {
    let [d, h, w] = s.grid.dims;
    let n = s.frames.len();
    if n == 0 || s.cameras.len() != n {
        return Err(OccError::InvalidSpec("sample needs N >= 1 frames with cameras".into()));
    }
    let fshape = s.frames[0].shape().to_vec();
    if fshape.len() != 3 || fshape[0] != 3 {
        return Err(OccError::ShapeMismatch(format!("frame shape {fshape:?}")));
    }
    for f in &s.frames {
        if f.shape() != fshape.as_slice() {
            return Err(OccError::ShapeMismatch("frames differ in resolution".into()));
        }
    }
    let (h_img, w_img) = (fshape[1], fshape[2]);

    let mut out = Vec::new();
    for v in [d, h, w, n, h_img, w_img, s.grid.num_classes as usize] {
        if v > u16::MAX as usize {
            return Err(OccError::FormatError(format!("header field {v} exceeds u16")));
        }
        push_u16(&mut out, v as u16);
    }
    for t in s.spec.encode_tokens() {
        push_u16(&mut out, t);
    }
    out.extend_from_slice(&s.grid.labels);
    for cam in &s.cameras {
        for v in cam.flat() {
            push_f32(&mut out, v);
        }
    }
    for f in &s.frames {
        for &v in f.data() {
            push_f32(&mut out, v);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn decode_block(r: &mut Reader, voxel_size: f64) -> Result<Sample> {
    let start = r.pos;
    let d = r.u16()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let n = r.u16()? as usize;
    let h_img = r.u16()? as usize;
    let w_img = r.u16()? as usize;
    let c = r.u16()? as u8;

    let mut tokens = [0u16; TOKEN_COUNT];
    for t in tokens.iter_mut() {
        *t = r.u16()?;
    }
    let spec = SceneSpec::decode_tokens(&tokens)?;

    let labels = r.take(d * h * w)?.to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(OccError::FormatError(format!("label {bad} >= class count {c}")));
    }
    let grid = OccupancyGrid { dims: [d, h, w], voxel_size, labels, num_classes: c };

    let mut cameras = Vec::with_capacity(n);
    for _ in 0..n {
        let mut flat = [0f32; 25];
        for v in flat.iter_mut() {
            *v = r.f32()?;
        }
        cameras.push(CameraParams::from_flat(&flat));
    }
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let mut data = Vec::with_capacity(3 * h_img * w_img);
        for _ in 0..3 * h_img * w_img {
            data.push(r.f32()?);
        }
        frames.push(Tensor::from_vec(vec![3, h_img, w_img], data)?);
    }

    let body = &r.buf[start..r.pos];
    let crc_stored = r.u32()?;
    let crc = crc32fast::hash(body);
    if crc != crc_stored {
        return Err(OccError::FormatError(format!(
            "block checksum mismatch: stored {crc_stored:#010x}, computed {crc:#010x}"
        )));
    }
    Ok(Sample { frames, cameras, grid, spec })
}

/// Single occupancy-grid file: "OGD1" | D,H,W u16 | C u16 | voxel_size f32
/// | labels u8[] | crc32.
pub fn write_grid(grid: &OccupancyGrid, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"OGD1");
    for v in [grid.dims[0], grid.dims[1], grid.dims[2], grid.num_classes as usize] {
        push_u16(&mut out, v as u16);
    }
    push_f32(&mut out, grid.voxel_size as f32);
    out.extend_from_slice(&grid.labels);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<OccupancyGrid> {
    let buf = fs::read(path)?;
    if buf.len() < 18 {
        return Err(OccError::FormatError("grid file too short".into()));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let crc_stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != crc_stored {
        return Err(OccError::FormatError("grid checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let magic = r.take(4)?;
    if magic != b"OGD1" {
        return Err(OccError::FormatError(format!("bad grid magic {magic:?}")));
    }
    let d = r.u16()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let c = r.u16()? as u8;
    let voxel_size = r.f32()? as f64;
    let labels = r.take(d * h * w)?.to_vec();
    Ok(OccupancyGrid { dims: [d, h, w], voxel_size, labels, num_classes: c })
}

/// Write samples and the sibling manifest; returns the manifest.
pub fn write_dataset(
    samples: &[Sample],
    path: &Path,
    config_hash: &str,
) -> Result<DatasetManifest> {
    let voxel_size = samples.first().map(|s| s.grid.voxel_size).unwrap_or(0.0);
    let mut buf = Vec::new();
    buf.extend_from_slice(OSD_MAGIC);
    buf.extend_from_slice(&OSD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());

    let mut offsets = Vec::with_capacity(samples.len());
    let mut seeds = Vec::with_capacity(samples.len());
    for s in samples {
        offsets.push(buf.len() as u64);
        seeds.push(s.spec.seed);
        buf.extend_from_slice(&encode_block(s)?);
    }
    fs::write(path, &buf)?;

    let manifest = DatasetManifest {
        format: "OSD1".into(),
        version: OSD_VERSION,
        count: samples.len() as u32,
        seeds,
        config_hash: config_hash.to_string(),
        voxel_size,
        offsets,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| OccError::FormatError(format!("manifest encode: {e}")))?;
    fs::write(manifest_path(path), json)?;
    Ok(manifest)
}

/// Read a container and its manifest back. Bit-exact inverse of `write_dataset`.
pub fn read_dataset(path: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let buf = fs::read(path)?;
    let manifest_raw = fs::read_to_string(manifest_path(path))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_raw)
        .map_err(|e| OccError::FormatError(format!("manifest decode: {e}")))?;

    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != OSD_MAGIC {
        return Err(OccError::FormatError(format!("bad magic {magic:?}")));
    }
    let version = r.u16()?;
    if version != OSD_VERSION {
        return Err(OccError::VersionMismatch(format!(
            "container version {version}, supported {OSD_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    if count != manifest.count as usize {
        return Err(OccError::FormatError(format!(
            "container holds {count} samples, manifest says {}",
            manifest.count
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        if manifest.offsets.get(i).copied() != Some(r.pos as u64) {
            return Err(OccError::FormatError(format!(
                "sample {i} offset {} disagrees with manifest",
                r.pos
            )));
        }
        samples.push(decode_block(&mut r, manifest.voxel_size)?);
    }
    if r.pos != buf.len() {
        return Err(OccError::FormatError(format!(
            "{} trailing bytes after last sample",
            buf.len() - r.pos
        )));
    }
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, WorldConfig};
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = WorldConfig { frames: 2, image_hw: [8, 12], ..Default::default() };
        let samples = generate_dataset(&cfg, 3, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.osd");
        let manifest = write_dataset(&samples, &path, "cfg123").unwrap();
        assert_eq!(manifest.count, 3);
        let (back, manifest2) = read_dataset(&path).unwrap();
        assert_eq!(manifest, manifest2);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.grid.labels, b.grid.labels);
            assert_eq!(a.spec, b.spec);
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert!(fa.bit_eq(fb));
            }
            for (ca, cb) in a.cameras.iter().zip(&b.cameras) {
                // cameras pass through f32 on disk
                let (fa, fb) = (ca.flat(), cb.flat());
                assert_eq!(fa, fb);
            }
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let cfg = WorldConfig { frames: 1, image_hw: [8, 8], ..Default::default() };
        let samples = generate_dataset(&cfg, 1, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.osd");
        write_dataset(&samples, &path, "x").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(OccError::FormatError(_)) => {}
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn empty_container_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.osd");
        let manifest = write_dataset(&[], &path, "h").unwrap();
        assert_eq!(manifest.count, 0);
        let (samples, m) = read_dataset(&path).unwrap();
        assert!(samples.is_empty());
        assert_eq!(m.count, 0);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.osd");
        write_dataset(&[], &path, "h").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(OccError::FormatError(_))));
    }
}

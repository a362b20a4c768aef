//! Binary and JSON file formats.
//!
//! All binary formats are little-endian and start with a four-byte magic.
//! Readers load the whole file and report malformed input with the file
//! path and the byte offset where parsing failed.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::PaintedCloud;
use crate::geometry::PointCloud;
use crate::painting::{SemanticMask, SemanticScores};
use crate::voxelgrid::VoxelBatch;

pub const SCORES_MAGIC: &[u8; 4] = b"FPSC";
pub const VOXELS_MAGIC: &[u8; 4] = b"FPVX";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPNN";
pub const PAINTED_MAGIC: &[u8; 4] = b"FPPT";
pub const POINTS_MAGIC: &[u8; 4] = b"FPPC";
pub const LABELS_MAGIC: &[u8; 4] = b"FPLB";

/// A named tensor as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        Tensor {
            name: name.into(),
            dims,
            data,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Cursor over a file's bytes that remembers where it is.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader {
            path,
            bytes,
            pos: 0,
        }
    }

    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                self.fail(
                    self.pos,
                    format!("need {n} bytes, {} left", self.bytes.len() - self.pos),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.fail(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// `count` floats, each checked finite.
    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let start = self.pos;
        let bytes = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| self.fail(start, "length overflows"))?,
        )?;
        let out: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(self.fail(start + 4 * i, "non-finite value"));
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::shape(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_scores(path: &Path, scores: &SemanticScores) -> Result<()> {
    let mut out = SCORES_MAGIC.to_vec();
    put_u32(&mut out, scores.n)?;
    put_u32(&mut out, scores.m)?;
    put_f32s(&mut out, &scores.scores);
    write_file(path, &out)
}

pub fn read_scores(path: &Path) -> Result<SemanticScores> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(SCORES_MAGIC)?;
    let n = r.len()?;
    let m = r.len()?;
    let scores = r.f32s(n * m)?;
    r.finish()?;
    Ok(SemanticScores { n, m, scores })
}

pub fn write_voxels(path: &Path, batch: &VoxelBatch) -> Result<()> {
    let mut out = VOXELS_MAGIC.to_vec();
    put_u32(&mut out, batch.len())?;
    put_u32(&mut out, batch.max_points)?;
    put_u32(&mut out, batch.channels())?;
    for c in &batch.coords {
        for v in c {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &c in &batch.counts {
        out.extend_from_slice(&c.to_le_bytes());
    }
    put_f32s(&mut out, &batch.features);
    write_file(path, &out)
}

/// The pad mask is rebuilt from the counts; point provenance is not stored.
pub fn read_voxels(path: &Path) -> Result<VoxelBatch> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(VOXELS_MAGIC)?;
    let e = r.len()?;
    let mp = r.len()?;
    let channels_at = r.pos;
    let channels = r.len()?;
    if channels < 3 || (channels - 3) % 2 != 0 {
        return Err(r.fail(channels_at, format!("{channels} channels is not 3 + 2m")));
    }
    let mut coords = Vec::with_capacity(e);
    for _ in 0..e {
        coords.push([r.i32()?, r.i32()?, r.i32()?]);
    }
    let mut counts = Vec::with_capacity(e);
    for _ in 0..e {
        let at = r.pos;
        let c = r.u32()?;
        if c == 0 {
            return Err(r.fail(at, "voxel count 0".to_string()));
        }
        counts.push(c);
    }
    let features = r.f32s(e * mp * channels)?;
    r.finish()?;
    Ok(VoxelBatch {
        m: (channels - 3) / 2,
        max_points: mp,
        pad_mask: VoxelBatch::pad_mask_from_counts(&counts, mp),
        coords,
        counts,
        features,
        sources: Vec::new(),
    })
}

pub fn write_checkpoint(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_u32(&mut out, tensors.len())?;
    for t in tensors {
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::shape(format!(
                "tensor {} dims disagree with data",
                t.name
            )));
        }
        put_u32(&mut out, t.name.len())?;
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.dims.len())?;
        for &d in &t.dims {
            put_u32(&mut out, d)?;
        }
        put_f32s(&mut out, &t.data);
    }
    write_file(path, &out)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.len()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.len()?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.len()?;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.len()?);
        }
        let at = r.pos;
        let size = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.fail(at, "tensor size overflows"))?;
        let data = r.f32s(size)?;
        out.push(Tensor { name, dims, data });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_painted(path: &Path, cloud: &PaintedCloud) -> Result<()> {
    let mut out = PAINTED_MAGIC.to_vec();
    put_u32(&mut out, cloud.len())?;
    put_u32(&mut out, cloud.m)?;
    put_f32s(&mut out, &cloud.records);
    write_file(path, &out)
}

pub fn read_painted(path: &Path) -> Result<PaintedCloud> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(PAINTED_MAGIC)?;
    let n = r.len()?;
    let m = r.len()?;
    let records = r.f32s(n * (3 + 2 * m))?;
    r.finish()?;
    Ok(PaintedCloud { m, records })
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = POINTS_MAGIC.to_vec();
    put_u32(&mut out, cloud.len())?;
    out.push(cloud.intensity.is_some() as u8);
    let mut rec = Vec::with_capacity(cloud.len() * 4);
    for (i, p) in cloud.xyz.iter().enumerate() {
        rec.extend_from_slice(p);
        if let Some(int) = &cloud.intensity {
            rec.push(int[i]);
        }
    }
    put_f32s(&mut out, &rec);
    write_file(path, &out)
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(POINTS_MAGIC)?;
    let n = r.len()?;
    let at = r.pos;
    let flag = r.u8()?;
    if flag > 1 {
        return Err(r.fail(at, format!("intensity flag {flag} is not 0 or 1")));
    }
    let width = if flag == 1 { 4 } else { 3 };
    let rec = r.f32s(n * width)?;
    r.finish()?;
    let xyz = rec
        .chunks_exact(width)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let intensity = (flag == 1).then(|| rec.chunks_exact(4).map(|c| c[3]).collect());
    Ok(PointCloud { xyz, intensity })
}

/// Per-point class indices: magic, u32 n, then n bytes.
pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = LABELS_MAGIC.to_vec();
    put_u32(&mut out, labels.len())?;
    out.extend_from_slice(labels);
    write_file(path, &out)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(LABELS_MAGIC)?;
    let n = r.len()?;
    let out = r.take(n)?.to_vec();
    r.finish()?;
    Ok(out)
}

/// Binary (P5) greymap with maxval 255; pixel value = class index.
pub fn write_pgm(path: &Path, mask: &SemanticMask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.data);
    write_file(path, &out)
}

/// Reads a P5 mask and checks every pixel against `classes`.
pub fn read_pgm(path: &Path, classes: u32) -> Result<SemanticMask> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    if r.take(2)? != b"P5" {
        return Err(r.fail(0, "not a binary PGM (P5)"));
    }
    let mut header = [0u32; 3];
    for h in &mut header {
        // whitespace and comments between header fields
        loop {
            match bytes.get(r.pos) {
                Some(b'#') => {
                    while bytes.get(r.pos).is_some_and(|&b| b != b'\n') {
                        r.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => r.pos += 1,
                _ => break,
            }
        }
        let start = r.pos;
        while bytes.get(r.pos).is_some_and(u8::is_ascii_digit) {
            r.pos += 1;
        }
        *h = std::str::from_utf8(&bytes[start..r.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| r.fail(start, "expected a header number"))?;
    }
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(r.fail(r.pos, format!("maxval {maxval} is not 8-bit")));
    }
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(r.fail(r.pos, "expected whitespace after header"));
    }
    r.pos += 1;
    if width == 0 || height == 0 {
        return Err(r.fail(r.pos, "empty image"));
    }
    let start = r.pos;
    let data = r.take(width as usize * height as usize)?.to_vec();
    r.finish()?;
    if let Some(i) = data.iter().position(|&v| v as u32 >= classes) {
        return Err(r.fail(start + i, format!("class {} out of range", data[i])));
    }
    Ok(SemanticMask {
        width,
        height,
        classes,
        data,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty-printed with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

//! Dataset files (JSONL and the `BNC1` binary format) and binary helpers
//! shared by the other file formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::geom::{SurfaceParams, UnitVec3, Vec3};
use crate::sim::{BounceSample, Frame, Trajectory};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"BNC1";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Bin,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "bin" => Ok(Format::Bin),
            other => Err(Error::Config(format!("unknown dataset format {other:?} (jsonl or bin)"))),
        }
    }
}

impl Format {
    /// `bin` for `.bin`/`.bnc` paths, JSONL otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin" | "bnc") => Format::Bin,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub schema: u32,
    pub seed: u64,
    pub count: usize,
    /// Simulation settings the records were generated with.
    pub config: KeyValues,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<BounceSample>,
}

impl Dataset {
    pub fn new(seed: u64, config: KeyValues, samples: Vec<BounceSample>) -> Self {
        let header = DatasetHeader { schema: SCHEMA_VERSION, seed, count: samples.len(), config };
        Self { header, samples }
    }
}

// ---- little-endian primitives ----

pub(crate) fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn write_vec3<W: Write>(w: &mut W, v: Vec3) -> Result<()> {
    for c in v.to_array() {
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

fn read_vec3<R: Read>(r: &mut R) -> Result<Vec3> {
    Ok(Vec3::new(read_f64(r)?, read_f64(r)?, read_f64(r)?))
}

/// Frames with f64 times/centers and f32 point coordinates.
pub(crate) fn write_trajectory_f32<W: Write>(w: &mut W, t: &Trajectory) -> Result<()> {
    w.write_all(&(t.frames.len() as u32).to_le_bytes())?;
    for f in &t.frames {
        w.write_all(&f.time.to_le_bytes())?;
        match f.true_center {
            Some(c) => {
                w.write_all(&[1])?;
                write_vec3(w, c)?;
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&(f.points.len() as u32).to_le_bytes())?;
        for p in &f.points {
            for c in p.to_array() {
                w.write_all(&(c as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub(crate) fn read_trajectory_f32<R: Read>(r: &mut R) -> Result<Trajectory> {
    let frames = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(frames.min(1 << 16));
    for _ in 0..frames {
        let time = read_f64(r)?;
        let true_center = match read_u8(r)? {
            0 => None,
            1 => Some(read_vec3(r)?),
            b => return Err(Error::Format(format!("bad center flag {b}"))),
        };
        let n = read_u32(r)? as usize;
        let mut points = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let x = read_f32(r)? as f64;
            let y = read_f32(r)? as f64;
            let z = read_f32(r)? as f64;
            points.push(Vec3::new(x, y, z));
        }
        out.push(Frame { time, points, true_center });
    }
    Trajectory::new(out)
}

// ---- JSONL ----

#[derive(Serialize, Deserialize)]
struct HeaderJson {
    schema: u32,
    seed: u64,
    count: usize,
    config: std::collections::BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct RhoJson {
    cor: f64,
    normal: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct ImpactJson {
    t: f64,
    point: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FrameJson {
    WithCenter(f64, Vec<[f64; 3]>, [f64; 3]),
    Bare(f64, Vec<[f64; 3]>),
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    scene_id: Option<u64>,
    cell: Option<[usize; 2]>,
    rho: RhoJson,
    impact: ImpactJson,
    pre: Vec<FrameJson>,
    post: Vec<FrameJson>,
}

fn frames_to_json(t: &Trajectory) -> Vec<FrameJson> {
    t.frames
        .iter()
        .map(|f| {
            let pts = f.points.iter().map(|p| p.to_array()).collect();
            match f.true_center {
                Some(c) => FrameJson::WithCenter(f.time, pts, c.to_array()),
                None => FrameJson::Bare(f.time, pts),
            }
        })
        .collect()
}

fn frames_from_json(frames: Vec<FrameJson>) -> Result<Trajectory> {
    let frames = frames
        .into_iter()
        .map(|f| {
            let (time, pts, c) = match f {
                FrameJson::WithCenter(t, p, c) => (t, p, Some(Vec3::from_array(c))),
                FrameJson::Bare(t, p) => (t, p, None),
            };
            Frame { time, points: pts.into_iter().map(Vec3::from_array).collect(), true_center: c }
        })
        .collect();
    Trajectory::new(frames)
}

fn params_checked(cor: f64, normal: [f64; 3]) -> Result<SurfaceParams> {
    SurfaceParams::new(cor, UnitVec3::try_from(Vec3::from_array(normal))?)
}

pub fn sample_to_json(s: &BounceSample) -> Result<String> {
    let n = s.params.normal.get().to_array();
    let rec = RecordJson {
        scene_id: s.scene_id,
        cell: s.cell.map(|(x, y)| [x, y]),
        rho: RhoJson { cor: s.params.cor, normal: n },
        impact: ImpactJson { t: s.impact_time, point: s.impact_point.to_array() },
        pre: frames_to_json(&s.pre),
        post: frames_to_json(&s.post),
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn sample_from_json(line: &str) -> Result<BounceSample> {
    let rec: RecordJson = serde_json::from_str(line)?;
    Ok(BounceSample {
        pre: frames_from_json(rec.pre)?,
        post: frames_from_json(rec.post)?,
        params: params_checked(rec.rho.cor, rec.rho.normal)?,
        impact_time: rec.impact.t,
        impact_point: Vec3::from_array(rec.impact.point),
        scene_id: rec.scene_id,
        cell: rec.cell.map(|[x, y]| (x, y)),
    })
}

pub fn write_jsonl<W: Write>(w: &mut W, data: &Dataset) -> Result<()> {
    let h = &data.header;
    let header = HeaderJson {
        schema: h.schema,
        seed: h.seed,
        count: data.samples.len(),
        config: h.config.entries().clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for s in &data.samples {
        writeln!(w, "{}", sample_to_json(s)?)?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let first = lines.next().ok_or(Error::Format("empty dataset file".into()))??;
    let h: HeaderJson = serde_json::from_str(&first)?;
    if h.schema != SCHEMA_VERSION {
        return Err(Error::Format(format!("schema version {} (expected {SCHEMA_VERSION})", h.schema)));
    }
    let mut samples = Vec::with_capacity(h.count.min(1 << 20));
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(sample_from_json(&line)?);
    }
    if samples.len() != h.count {
        return Err(Error::Format(format!("header promises {} records, found {}", h.count, samples.len())));
    }
    let header = DatasetHeader { schema: h.schema, seed: h.seed, count: h.count, config: KeyValues::from_map(h.config) };
    Ok(Dataset { header, samples })
}

// ---- BNC1 ----

fn encode_record(s: &BounceSample) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    match s.scene_id {
        Some(id) => {
            b.push(1);
            b.extend_from_slice(&id.to_le_bytes());
        }
        None => b.push(0),
    }
    match s.cell {
        Some((x, y)) => {
            b.push(1);
            b.extend_from_slice(&(x as u32).to_le_bytes());
            b.extend_from_slice(&(y as u32).to_le_bytes());
        }
        None => b.push(0),
    }
    for v in s.params.to_array() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&s.impact_time.to_le_bytes());
    write_vec3(&mut b, s.impact_point)?;
    write_trajectory_f32(&mut b, &s.pre)?;
    write_trajectory_f32(&mut b, &s.post)?;
    Ok(b)
}

fn decode_record(buf: &[u8]) -> Result<BounceSample> {
    let r = &mut &buf[..];
    let scene_id = match read_u8(r)? {
        0 => None,
        _ => Some(read_u64(r)?),
    };
    let cell = match read_u8(r)? {
        0 => None,
        _ => Some((read_u32(r)? as usize, read_u32(r)? as usize)),
    };
    let cor = read_f64(r)?;
    let normal = [read_f64(r)?, read_f64(r)?, read_f64(r)?];
    let impact_time = read_f64(r)?;
    let impact_point = read_vec3(r)?;
    let pre = read_trajectory_f32(r)?;
    let post = read_trajectory_f32(r)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes in record".into()));
    }
    Ok(BounceSample { pre, post, params: params_checked(cor, normal)?, impact_time, impact_point, scene_id, cell })
}

pub fn write_bin<W: Write>(w: &mut W, data: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&data.header.schema.to_le_bytes())?;
    w.write_all(&data.header.seed.to_le_bytes())?;
    write_string(w, &data.header.config.to_text())?;
    w.write_all(&(data.samples.len() as u64).to_le_bytes())?;
    for s in &data.samples {
        let rec = encode_record(s)?;
        w.write_all(&(rec.len() as u64).to_le_bytes())?;
        w.write_all(&rec)?;
    }
    Ok(())
}

pub fn read_bin<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a BNC1 dataset (bad magic)".into()));
    }
    let schema = read_u32(r)?;
    if schema != SCHEMA_VERSION {
        return Err(Error::Format(format!("schema version {schema} (expected {SCHEMA_VERSION})")));
    }
    let seed = read_u64(r)?;
    let config = KeyValues::parse(&read_string(r)?)?;
    let count = read_u64(r)? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let len = read_u64(r).map_err(|_| Error::Format(format!("truncated before record {i}")))? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(|_| Error::Format(format!("truncated record {i}")))?;
        samples.push(decode_record(&buf)?);
    }
    Ok(Dataset { header: DatasetHeader { schema, seed, count, config }, samples })
}

pub fn write_dataset(path: &Path, format: Format, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        Format::Jsonl => write_jsonl(&mut w, data)?,
        Format::Bin => write_bin(&mut w, data)?,
    }
    w.flush()?;
    Ok(())
}

/// Reads either format, recognising `BNC1` files by their magic.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let head = r.fill_buf()?;
    if head.starts_with(DATASET_MAGIC) {
        read_bin(&mut r)
    } else {
        read_jsonl(r)
    }
}

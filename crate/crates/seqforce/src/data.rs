//! Recording sets: synthetic generation, on-disk layout, preprocessing,
//! frame/force timestamp alignment, and the train/test split.
//!
//! A dataset is a directory with a `manifest.csv` (`path,object,angle_deg,lux`)
//! naming one subdirectory per recording set. Each set holds `frames.csv`
//! (`timestamp_ns,filename`), `force.csv` (`timestamp_ns,force_newtons`),
//! and the frames as binary PGM images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Largest measurable contact force; predictions and targets are trained
/// in units of this scale.
pub const MAX_FORCE_NEWTONS: f64 = 12.0;

pub fn normalize_force(newtons: f64) -> f64 {
    newtons / MAX_FORCE_NEWTONS
}

pub fn denormalize_force(normalized: f64) -> f64 {
    normalized * MAX_FORCE_NEWTONS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Sponge,
    PaperCup,
    Tube,
    Stapler,
}

impl std::str::FromStr for ObjectKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sponge" => Ok(ObjectKind::Sponge),
            "papercup" | "paper_cup" => Ok(ObjectKind::PaperCup),
            "tube" => Ok(ObjectKind::Tube),
            "stapler" => Ok(ObjectKind::Stapler),
            other => Err(Error::Config(format!("unknown object kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ObjectKind::Sponge => "sponge",
            ObjectKind::PaperCup => "papercup",
            ObjectKind::Tube => "tube",
            ObjectKind::Stapler => "stapler",
        };
        f.write_str(s)
    }
}

/// Capture condition of a recording set; sets sharing a condition form one
/// cell of the train/test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Condition {
    pub object: ObjectKind,
    pub angle_deg: u32,
    pub lux: u32,
}

/// One recording: preprocessed frames with a force target per frame.
#[derive(Debug, Clone)]
pub struct RecordingSet {
    pub condition: Condition,
    pub name: String,
    /// Frames as `[S, S, 1]` tensors in [0, 1].
    pub frames: Vec<Tensor>,
    /// Per-frame force in newtons, aligned by nearest timestamp.
    pub forces: Vec<f64>,
}

// ---------------------------------------------------------------------------
// PGM I/O

/// Write a grayscale `[H, W, 1]` tensor in [0, 1] as a binary (P5) PGM.
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, c) = img.dims3()?;
    if c != 1 {
        return Err(Error::Shape(format!("pgm output needs 1 channel, got {c}")));
    }
    let f = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("creating {}: {e}", path.display())))?;
    let mut out = BufWriter::new(f);
    let mut bytes = Vec::with_capacity(h * w);
    for &v in img.data() {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    write!(out, "P5\n{w} {h}\n255\n")
        .and_then(|_| out.write_all(&bytes))
        .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

/// Read a binary (P5) PGM into an `[H, W, 1]` tensor in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("opening {}: {e}", path.display())))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    let err = |m: &str| Error::Io(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut token = |buf: &[u8]| -> Result<String> {
        while pos < buf.len() && (buf[pos] as char).is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !(buf[pos] as char).is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Io("pgm header truncated".into()));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token(&buf)? != "P5" {
        return Err(err("not a binary pgm (P5) file"));
    }
    let w: usize = token(&buf)?.parse().map_err(|_| err("bad width"))?;
    let h: usize = token(&buf)?.parse().map_err(|_| err("bad height"))?;
    let maxval: usize = token(&buf)?.parse().map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    pos += 1; // the single whitespace byte after maxval
    if buf.len() < pos + w * h {
        return Err(err("pixel data truncated"));
    }
    let data = buf[pos..pos + w * h]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![h, w, 1], data)
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Center-crop to square, convert to luminance, bilinear-resize to
/// `target` x `target`, values in [0, 1]. Accepts `[H, W, 1]` or
/// `[H, W, 3]` input; a grayscale image already at the target size passes
/// through unchanged.
pub fn preprocess_frame(img: &Tensor, target: usize) -> Result<Tensor> {
    let (h, w, c) = img.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!(
            "expected 1 or 3 channels, got {c}"
        )));
    }
    if h == target && w == target && c == 1 {
        return Ok(img.clone());
    }
    // luminance
    let gray: Vec<f64> = if c == 1 {
        img.data().to_vec()
    } else {
        (0..h * w)
            .map(|i| {
                let d = img.data();
                0.299 * d[i * 3] + 0.587 * d[i * 3 + 1] + 0.114 * d[i * 3 + 2]
            })
            .collect()
    };
    // center crop to square
    let side = h.min(w);
    let top = (h - side) / 2;
    let left = (w - side) / 2;
    // bilinear resize side -> target, pixel-center aligned
    let scale = side as f64 / target as f64;
    let mut out = Vec::with_capacity(target * target);
    for i in 0..target {
        let sy = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let fy = sy - y0 as f64;
        for j in 0..target {
            let sx = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let fx = sx - x0 as f64;
            let g = |y: usize, x: usize| gray[(top + y) * w + (left + x)];
            let v = g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + g(y0, x1) * (1.0 - fy) * fx
                + g(y1, x0) * fy * (1.0 - fx)
                + g(y1, x1) * fy * fx;
            out.push(v);
        }
    }
    Tensor::new(vec![target, target, 1], out)
}

// ---------------------------------------------------------------------------
// Timestamp alignment

/// For each frame timestamp, pick the force sample with the nearest
/// timestamp. Force timestamps must be strictly increasing; a frame whose
/// nearest force sample is further away than the tolerance (the median
/// force sampling interval) is an error.
pub fn sync_nearest(frame_ts: &[u64], force_ts: &[u64], forces: &[f64]) -> Result<Vec<f64>> {
    if force_ts.len() != forces.len() {
        return Err(Error::Contract(format!(
            "{} force timestamps but {} force values",
            force_ts.len(),
            forces.len()
        )));
    }
    if force_ts.is_empty() {
        return Err(Error::Contract("force record is empty".into()));
    }
    for win in force_ts.windows(2) {
        if win[1] <= win[0] {
            return Err(Error::Contract(format!(
                "force timestamps not strictly increasing at {} -> {}",
                win[0], win[1]
            )));
        }
    }
    let tolerance = if force_ts.len() < 2 {
        u64::MAX
    } else {
        let mut gaps: Vec<u64> = force_ts.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_unstable();
        gaps[gaps.len() / 2]
    };
    let mut out = Vec::with_capacity(frame_ts.len());
    for &t in frame_ts {
        let i = force_ts.partition_point(|&ft| ft < t);
        let mut best = i.min(force_ts.len() - 1);
        let mut best_gap = force_ts[best].abs_diff(t);
        if i > 0 {
            let gap = force_ts[i - 1].abs_diff(t);
            if gap < best_gap {
                best = i - 1;
                best_gap = gap;
            }
        }
        if best_gap > tolerance {
            return Err(Error::Contract(format!(
                "frame at {t} ns has no force sample within {tolerance} ns (nearest {best_gap} ns away)"
            )));
        }
        out.push(forces[best]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV helpers

fn read_csv(path: &Path, expect_header: &str) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Io(format!("{} is empty", path.display())))?;
    if header.trim() != expect_header {
        return Err(Error::Io(format!(
            "{} has header '{}', expected '{expect_header}'",
            path.display(),
            header.trim()
        )));
    }
    let ncols = expect_header.split(',').count();
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != ncols {
            return Err(Error::Io(format!(
                "{} line {}: expected {ncols} fields, got {}",
                path.display(),
                ln + 2,
                fields.len()
            )));
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| {
        Error::Io(format!("{}: bad {field} value '{s}'", path.display()))
    })
}

// ---------------------------------------------------------------------------
// Dataset loading

/// Load every recording set named by a `manifest.csv`, preprocessing each
/// frame to `target` x `target` and aligning forces by nearest timestamp.
pub fn load_dataset(manifest: &Path, target: usize) -> Result<Vec<RecordingSet>> {
    let root = manifest.parent().unwrap_or_else(|| Path::new("."));
    let rows = read_csv(manifest, "path,object,angle_deg,lux")?;
    if rows.is_empty() {
        return Err(Error::Contract(format!("{} lists no sets", manifest.display())));
    }
    let mut sets = Vec::with_capacity(rows.len());
    for row in rows {
        let dir = root.join(&row[0]);
        let condition = Condition {
            object: row[1].parse()?,
            angle_deg: parse(manifest, "angle_deg", &row[2])?,
            lux: parse(manifest, "lux", &row[3])?,
        };
        sets.push(load_set(&dir, condition, &row[0], target)?);
    }
    Ok(sets)
}

fn load_set(dir: &Path, condition: Condition, name: &str, target: usize) -> Result<RecordingSet> {
    let frames_csv = dir.join("frames.csv");
    let force_csv = dir.join("force.csv");
    let frame_rows = read_csv(&frames_csv, "timestamp_ns,filename")?;
    let force_rows = read_csv(&force_csv, "timestamp_ns,force_newtons")?;
    if frame_rows.is_empty() {
        return Err(Error::Contract(format!("{} lists no frames", frames_csv.display())));
    }
    let mut frame_ts = Vec::with_capacity(frame_rows.len());
    let mut frames = Vec::with_capacity(frame_rows.len());
    for row in &frame_rows {
        frame_ts.push(parse::<u64>(&frames_csv, "timestamp_ns", &row[0])?);
        frames.push(preprocess_frame(&read_pgm(&dir.join(&row[1]))?, target)?);
    }
    let mut force_ts = Vec::with_capacity(force_rows.len());
    let mut force_vals = Vec::with_capacity(force_rows.len());
    for row in &force_rows {
        force_ts.push(parse::<u64>(&force_csv, "timestamp_ns", &row[0])?);
        force_vals.push(parse::<f64>(&force_csv, "force_newtons", &row[1])?);
    }
    let forces = sync_nearest(&frame_ts, &force_ts, &force_vals)?;
    Ok(RecordingSet {
        condition,
        name: name.to_string(),
        frames,
        forces,
    })
}

// ---------------------------------------------------------------------------
// Train/test split

/// Split set indices into train and test. Within each capture-condition
/// cell, round(n/5) sets go to test, chosen by a seeded shuffle, so every
/// cell keeps roughly a 4:1 ratio.
pub fn split_indices(conditions: &[Condition], seed: u64) -> (Vec<usize>, Vec<usize>) {
    use std::collections::BTreeMap;
    // group by condition with a stable, deterministic cell order
    let mut cells: BTreeMap<(String, u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, c) in conditions.iter().enumerate() {
        cells
            .entry((c.object.to_string(), c.angle_deg, c.lux))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut members) in cells {
        let n = members.len();
        let n_test = ((n as f64) / 5.0).round() as usize;
        // Fisher-Yates
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// Parameters of the synthetic recording generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of recording sets to generate.
    pub sets: usize,
    pub frames_per_set: usize,
    /// Side length of the square frames.
    pub image_size: usize,
    /// Camera rate in frames per second.
    pub fps: f64,
    /// Force sensor rate in samples per second.
    pub force_hz: f64,
    /// Amplitude of additive pixel noise (0 disables it).
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sets: 10,
            frames_per_set: 200,
            image_size: 32,
            fps: 30.0,
            force_hz: 100.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// A force-versus-time profile: a few separated half-sine press pulses.
#[derive(Debug, Clone)]
pub struct ForceProfile {
    /// (center, half-width) as fractions of the recording, peak in newtons.
    pulses: Vec<(f64, f64, f64)>,
}

impl ForceProfile {
    /// Four evenly spaced pulses with peaks drawn uniformly from [2, 12] N.
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let pulses = (0..4)
            .map(|i| {
                let center = (i as f64 + 0.5) / 4.0;
                let half_width = 0.075; // pulses fill 60% of their quarter
                let peak = rng.gen_range(2.0..=12.0);
                (center, half_width, peak)
            })
            .collect();
        ForceProfile { pulses }
    }

    /// Constant zero force; frames of such a recording are identical.
    pub fn zero() -> Self {
        ForceProfile { pulses: Vec::new() }
    }

    /// Force in newtons at time `t` in [0, 1].
    pub fn at(&self, t: f64) -> f64 {
        for &(center, hw, peak) in &self.pulses {
            if (t - center).abs() < hw {
                let u = (t - center + hw) / (2.0 * hw);
                return peak * (std::f64::consts::PI * u).sin();
            }
        }
        0.0
    }
}

/// Render one synthetic frame: a deformable disk pressed from above by a
/// probe bar. The disk flattens and widens with force; everything is
/// anti-aliased so sub-pixel deformation stays visible at low resolution.
pub fn render_frame(size: usize, force_newtons: f64, noise: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let s = size as f64;
    let d = normalize_force(force_newtons).clamp(0.0, 1.0);
    let cx = 0.5 * s;
    let cy = 0.65 * s;
    let r0 = 0.28 * s;
    let ry = r0 * (1.0 - 0.45 * d);
    let rx = r0 * (1.0 + 0.35 * d);
    let bar_half_w = 0.10 * s;
    let bar_bottom = cy - ry; // probe rests on the squashed disk
    let mut data = Vec::with_capacity(size * size);
    // soft-edge coverage over one pixel
    let edge = |signed_dist: f64| (0.5 - signed_dist).clamp(0.0, 1.0);
    for i in 0..size {
        for j in 0..size {
            let y = i as f64 + 0.5;
            let x = j as f64 + 0.5;
            let mut v = 0.15; // background
            // ellipse: approximate signed distance via normalized radius
            let nr = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
            let disk_dist = (nr.sqrt() - 1.0) * ry.min(rx);
            let disk_cov = edge(disk_dist);
            v = v * (1.0 - disk_cov) + 0.75 * disk_cov;
            // probe bar: axis-aligned rectangle from the top edge
            let bar_dist = ((x - cx).abs() - bar_half_w).max(y - bar_bottom);
            let bar_cov = edge(bar_dist);
            v = v * (1.0 - bar_cov) + 0.45 * bar_cov;
            if noise > 0.0 {
                v += noise * rng.gen_range(-1.0..1.0);
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![size, size, 1], data).unwrap()
}

/// Generate `cfg.sets` synthetic recording sets under `out_dir`, writing
/// PGM frames, `frames.csv`, `force.csv`, and a `manifest.csv`. All sets
/// share one capture condition so the split keeps a 4:1 ratio per cell.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    if cfg.sets == 0 || cfg.frames_per_set == 0 {
        return Err(Error::Config("need at least one set and one frame".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("creating {}: {e}", out_dir.display())))?;
    let mut manifest = String::from("path,object,angle_deg,lux\n");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let duration_ns = (cfg.frames_per_set as f64 / cfg.fps * 1e9) as u64;
    for si in 0..cfg.sets {
        let set_name = format!("set_{si:03}");
        let dir = out_dir.join(&set_name);
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::Io(format!("creating {}: {e}", dir.display())))?;
        let profile = ForceProfile::sample(&mut rng);
        let mut frames_csv = String::from("timestamp_ns,filename\n");
        for fi in 0..cfg.frames_per_set {
            let ts = (fi as f64 / cfg.fps * 1e9) as u64;
            let t = ts as f64 / duration_ns as f64;
            let frame = render_frame(cfg.image_size, profile.at(t), cfg.noise, &mut rng);
            let fname = format!("frame_{fi:05}.pgm");
            write_pgm(&dir.join(&fname), &frame)?;
            frames_csv.push_str(&format!("{ts},{fname}\n"));
        }
        let mut force_csv = String::from("timestamp_ns,force_newtons\n");
        let n_force = (cfg.frames_per_set as f64 / cfg.fps * cfg.force_hz).ceil() as usize;
        for ki in 0..n_force {
            let ts = (ki as f64 / cfg.force_hz * 1e9) as u64;
            let t = ts as f64 / duration_ns as f64;
            force_csv.push_str(&format!("{ts},{:.6}\n", profile.at(t)));
        }
        std::fs::write(dir.join("frames.csv"), frames_csv)
            .map_err(|e| Error::Io(format!("writing frames.csv: {e}")))?;
        std::fs::write(dir.join("force.csv"), force_csv)
            .map_err(|e| Error::Io(format!("writing force.csv: {e}")))?;
        manifest.push_str(&format!("{set_name},sponge,0,350\n"));
    }
    let manifest_path = out_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| Error::Io(format!("writing manifest.csv: {e}")))?;
    Ok(manifest_path)
}

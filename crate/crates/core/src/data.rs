//! Synthetic gaze-like dataset: generation, on-disk format, and loading.
//!
//! Each sample is a triple of RGB patches (face, left eye, right eye) plus a
//! 2-d ground-truth point on a screen rectangle. The red channel carries the
//! signal: an elliptical Gaussian blob whose center encodes the gaze point
//! combined with a per-subject offset — the eye patches see gaze ± offset,
//! the face patch sees the offset alone, so recovering gaze requires fusing
//! patches. Blob centers stay several sigmas inside the borders, keeping the
//! intensity centroid an affine function of the encoded value (the task has
//! a linear sanity floor). Green/blue channels carry random distractor blobs
//! plus a subject-keyed blob: memorizable structure that invites over-fit.
//!
//! Fixation sequences reuse one base rendering per point and jitter it with
//! i.i.d. Gaussian pixel noise and an optional ±1-pixel translation.
//!
//! Directory layout: `header` (key = value lines), `index.tsv`
//! (id, subject, split, sequence, gt_x_cm, gt_y_cm), `data.bin` (fixed-width
//! records: three patches as u8 planes + two little-endian f64), and
//! `sequences.tsv` (sequence_id, gt_x_cm, gt_y_cm, comma-separated frame ids).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::invalid;
use crate::net::PatchBatch;
use crate::ordinal::PlaneCodec;
use crate::rng::stream;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Fraction of the normalized patch coordinate occupied by the subject
/// offset on either side; the encoding maps `[-OFFSET_SPAN, 1 + OFFSET_SPAN]`
/// onto the usable pixel band.
pub const OFFSET_SPAN: f64 = 0.15;

#[derive(Clone, Debug, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Fixation-sequence frames (test subjects).
    Seq,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Seq => "seq",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "seq" => Ok(Split::Seq),
            other => Err(invalid!("unknown split '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub subjects_train: usize,
    pub subjects_val: usize,
    pub subjects_test: usize,
    pub samples_per_subject: usize,
    pub patch: usize,
    pub screen_w_cm: f64,
    pub screen_h_cm: f64,
    /// Blob standard deviation in pixels (at the configured patch size).
    pub blob_sigma: f64,
    /// Peak blob intensity in [0, 255].
    pub blob_intensity: f64,
    /// Additive Gaussian pixel noise on single samples, in [0, 255] units.
    pub sample_noise_std: f64,
    /// Additive Gaussian pixel noise on sequence frames, in [0, 255] units.
    pub noise_std: f64,
    pub seq_points_per_subject: usize,
    pub seq_frames: usize,
    /// Maximum per-frame integer translation (0 disables, 1 = up to ±1 px).
    pub seq_translate_px: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects_train: 14,
            subjects_val: 3,
            subjects_test: 3,
            samples_per_subject: 100,
            patch: 64,
            screen_w_cm: 10.0,
            screen_h_cm: 14.0,
            blob_sigma: 3.0,
            blob_intensity: 220.0,
            sample_noise_std: 2.0,
            noise_std: 4.0,
            seq_points_per_subject: 4,
            seq_frames: 16,
            seq_translate_px: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.screen_w_cm <= 0.0 || self.screen_h_cm <= 0.0 {
            return Err(invalid!("synth config: screen range must be positive"));
        }
        if self.noise_std < 0.0 || self.sample_noise_std < 0.0 {
            return Err(invalid!("synth config: noise std must be >= 0"));
        }
        if self.subjects_train == 0 {
            return Err(invalid!("synth config: need at least one training subject"));
        }
        if self.seq_frames < 2 && self.total_sequences() > 0 {
            return Err(invalid!("synth config: sequences need at least 2 frames"));
        }
        let m = self.margin_px();
        if self.patch < 2 * m + 4 {
            return Err(invalid!(
                "synth config: patch {} too small for blob sigma {} (margin {m})",
                self.patch,
                self.blob_sigma
            ));
        }
        Ok(())
    }

    pub fn total_subjects(&self) -> usize {
        self.subjects_train + self.subjects_val + self.subjects_test
    }

    pub fn total_singles(&self) -> usize {
        self.total_subjects() * self.samples_per_subject
    }

    pub fn total_sequences(&self) -> usize {
        self.subjects_test * self.seq_points_per_subject
    }

    /// Border kept blob-free so intensity centroids stay linear in position.
    pub fn margin_px(&self) -> usize {
        (4.0 * self.blob_sigma).ceil() as usize + self.seq_translate_px + 1
    }

    fn split_of_subject(&self, subject: usize) -> Split {
        if subject < self.subjects_train {
            Split::Train
        } else if subject < self.subjects_train + self.subjects_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Per-subject nuisance parameters (fixed across that subject's samples).
struct SubjectTraits {
    offset: (f64, f64),
    rot: f64,
    ax: f64,
    ay: f64,
    /// Subject-keyed distractor blob position (normalized), green channel.
    key_blob: (f64, f64),
}

fn draw_subject(rng: &mut ChaCha8Rng) -> SubjectTraits {
    SubjectTraits {
        offset: (
            rng.random_range(-OFFSET_SPAN..OFFSET_SPAN),
            rng.random_range(-OFFSET_SPAN..OFFSET_SPAN),
        ),
        rot: rng.random_range(0.0..std::f64::consts::PI),
        ax: rng.random_range(0.75..1.3),
        ay: rng.random_range(0.75..1.3),
        key_blob: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
    }
}

/// Map a value in `[-OFFSET_SPAN, 1 + OFFSET_SPAN]` linearly into `[0, 1]`.
fn squash(t: f64) -> f64 {
    (t + OFFSET_SPAN) / (1.0 + 2.0 * OFFSET_SPAN)
}

struct Renderer<'a> {
    cfg: &'a SynthConfig,
}

impl Renderer<'_> {
    /// Pixel coordinate of a normalized position inside the usable band.
    fn to_px(&self, t: f64) -> f64 {
        let m = self.cfg.margin_px() as f64;
        m + t * (self.cfg.patch as f64 - 1.0 - 2.0 * m)
    }

    /// Add an elliptical Gaussian blob (rotated by `rot`, axis scales
    /// `ax`/`ay`) centered at pixel (cx, cy) into one channel plane.
    fn add_blob(&self, plane: &mut [f64], cx: f64, cy: f64, peak: f64, rot: f64, ax: f64, ay: f64) {
        let p = self.cfg.patch;
        let s = self.cfg.blob_sigma;
        let (sin, cos) = rot.sin_cos();
        let reach = (4.0 * s * ax.max(ay)).ceil() as isize + 1;
        let x0 = ((cx as isize) - reach).max(0);
        let x1 = ((cx as isize) + reach).min(p as isize - 1);
        let y0 = ((cy as isize) - reach).max(0);
        let y1 = ((cy as isize) + reach).min(p as isize - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                // Rotate into the ellipse frame, then scale per axis.
                let u = (cos * dx + sin * dy) / (s * ax);
                let v = (-sin * dx + cos * dy) / (s * ay);
                plane[y as usize * p + x as usize] += peak * (-0.5 * (u * u + v * v)).exp();
            }
        }
    }

    /// Render one patch (3 channel planes, f64 in [0, 255] before noise).
    /// `signal_t` is the normalized blob position for the red channel.
    fn patch(
        &self,
        signal_t: (f64, f64),
        traits: &SubjectTraits,
        brightness: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let p = self.cfg.patch;
        let mut planes = vec![0.0; 3 * p * p];
        let peak = self.cfg.blob_intensity;

        // Red: the signal blob (subject-shaped, centroid = encoded position).
        let (cx, cy) = (self.to_px(signal_t.0), self.to_px(signal_t.1));
        self.add_blob(&mut planes[..p * p], cx, cy, peak * brightness, traits.rot, traits.ax, traits.ay);

        // Green: subject-keyed blob + one random distractor.
        {
            let (g0, g1) = planes[p * p..].split_at_mut(p * p);
            let (kx, ky) = traits.key_blob;
            self.add_blob(
                g0,
                kx * (p - 1) as f64,
                ky * (p - 1) as f64,
                peak * rng.random_range(0.5..1.0),
                0.0,
                1.0,
                1.0,
            );
            self.add_blob(
                g0,
                rng.random_range(0.0..(p - 1) as f64),
                rng.random_range(0.0..(p - 1) as f64),
                peak * rng.random_range(0.3..1.0),
                0.0,
                1.0,
                1.0,
            );
            // Blue: two random distractors.
            for _ in 0..2 {
                self.add_blob(
                    g1,
                    rng.random_range(0.0..(p - 1) as f64),
                    rng.random_range(0.0..(p - 1) as f64),
                    peak * rng.random_range(0.3..1.0),
                    0.0,
                    1.0,
                    1.0,
                );
            }
        }
        planes
    }
}

fn quantize(planes: &[f64], noise_std: f64, rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).unwrap();
        out.extend(planes.iter().map(|&v| (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8));
    } else {
        out.extend(planes.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    }
}

/// Shift a stack of channel planes by an integer offset, zero-filling.
fn translate_planes(planes: &[f64], p: usize, tx: isize, ty: isize) -> Vec<f64> {
    if tx == 0 && ty == 0 {
        return planes.to_vec();
    }
    let mut out = vec![0.0; planes.len()];
    let channels = planes.len() / (p * p);
    for c in 0..channels {
        let src = &planes[c * p * p..(c + 1) * p * p];
        let dst = &mut out[c * p * p..(c + 1) * p * p];
        for y in 0..p as isize {
            let sy = y - ty;
            if sy < 0 || sy >= p as isize {
                continue;
            }
            for x in 0..p as isize {
                let sx = x - tx;
                if sx >= 0 && sx < p as isize {
                    dst[(y * p as isize + x) as usize] = src[(sy * p as isize + sx) as usize];
                }
            }
        }
    }
    out
}

struct IndexRow {
    subject: usize,
    split: Split,
    seq: i64,
    gt: (f64, f64),
}

/// Generate the dataset (singles plus fixation sequences) into `dir`.
/// Deterministic: the same config writes byte-identical files.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let renderer = Renderer { cfg };
    let p = cfg.patch;
    let record_pixels = 3 * 3 * p * p;
    let record_bytes = record_pixels + 16;

    let mut subj_rng = stream(cfg.seed, "synth-subjects");
    let traits: Vec<SubjectTraits> = (0..cfg.total_subjects()).map(|_| draw_subject(&mut subj_rng)).collect();

    let mut data: Vec<u8> = Vec::with_capacity(record_bytes * (cfg.total_singles() + 64));
    let mut rows: Vec<IndexRow> = Vec::new();

    // One patch triple; red-channel positions depend on patch role.
    let render_triple = |gt: (f64, f64), tr: &SubjectTraits, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let u = gt.0 / cfg.screen_w_cm;
        let v = gt.1 / cfg.screen_h_cm;
        let brightness = rng.random_range(0.75..1.0);
        let face = renderer.patch(
            (squash(0.5 + 2.0 * tr.offset.0), squash(0.5 + 2.0 * tr.offset.1)),
            tr,
            brightness,
            rng,
        );
        let left = renderer.patch(
            (squash(u + tr.offset.0), squash(v + tr.offset.1)),
            tr,
            brightness,
            rng,
        );
        let right = renderer.patch(
            (squash(u - tr.offset.0), squash(v - tr.offset.1)),
            tr,
            brightness,
            rng,
        );
        let mut planes = face;
        planes.extend(left);
        planes.extend(right);
        planes
    };

    // Single samples, subject-major order.
    let mut rng = stream(cfg.seed, "synth-samples");
    for (si, tr) in traits.iter().enumerate() {
        let split = cfg.split_of_subject(si);
        for _ in 0..cfg.samples_per_subject {
            let gt = (rng.random_range(0.0..cfg.screen_w_cm), rng.random_range(0.0..cfg.screen_h_cm));
            let planes = render_triple(gt, tr, &mut rng);
            quantize(&planes, cfg.sample_noise_std, &mut rng, &mut data);
            data.extend_from_slice(&gt.0.to_le_bytes());
            data.extend_from_slice(&gt.1.to_le_bytes());
            rows.push(IndexRow { subject: si, split, seq: -1, gt });
        }
    }

    // Fixation sequences for test subjects.
    let mut seq_rng = stream(cfg.seed, "synth-seq");
    let mut sequences: Vec<(usize, (f64, f64), Vec<usize>)> = Vec::new();
    let first_test = cfg.subjects_train + cfg.subjects_val;
    for si in first_test..cfg.total_subjects() {
        for _ in 0..cfg.seq_points_per_subject {
            let gt = (
                seq_rng.random_range(0.0..cfg.screen_w_cm),
                seq_rng.random_range(0.0..cfg.screen_h_cm),
            );
            let base = render_triple(gt, &traits[si], &mut seq_rng);
            let seq_id = sequences.len();
            let mut frame_ids = Vec::with_capacity(cfg.seq_frames);
            for _ in 0..cfg.seq_frames {
                let t = cfg.seq_translate_px as i64;
                let (tx, ty) = if t > 0 {
                    (
                        seq_rng.random_range(-t..=t) as isize,
                        seq_rng.random_range(-t..=t) as isize,
                    )
                } else {
                    (0, 0)
                };
                let shifted = translate_planes(&base, p, tx, ty);
                quantize(&shifted, cfg.noise_std, &mut seq_rng, &mut data);
                data.extend_from_slice(&gt.0.to_le_bytes());
                data.extend_from_slice(&gt.1.to_le_bytes());
                frame_ids.push(rows.len());
                rows.push(IndexRow { subject: si, split: Split::Seq, seq: seq_id as i64, gt });
            }
            sequences.push((seq_id, gt, frame_ids));
        }
    }

    // header
    let mut header = String::new();
    header.push_str(&format!("format_version = {FORMAT_VERSION}\n"));
    header.push_str(&format!("patch = {p}\n"));
    header.push_str("channels = 3\n");
    header.push_str("dtype = u8\n");
    header.push_str(&format!("record_bytes = {record_bytes}\n"));
    header.push_str(&format!("n_records = {}\n", rows.len()));
    header.push_str(&format!("screen_w_cm = {}\n", cfg.screen_w_cm));
    header.push_str(&format!("screen_h_cm = {}\n", cfg.screen_h_cm));
    fs::write(dir.join("header"), header)?;

    // index.tsv
    let mut index = String::from("id\tsubject\tsplit\tsequence\tgt_x_cm\tgt_y_cm\n");
    for (id, r) in rows.iter().enumerate() {
        index.push_str(&format!(
            "{id}\t{}\t{}\t{}\t{:.17}\t{:.17}\n",
            r.subject, r.split, r.seq, r.gt.0, r.gt.1
        ));
    }
    fs::write(dir.join("index.tsv"), index)?;

    // sequences.tsv
    let mut seq_file = String::from("sequence\tgt_x_cm\tgt_y_cm\tframe_ids\n");
    for (id, gt, frames) in &sequences {
        let ids: Vec<String> = frames.iter().map(|f| f.to_string()).collect();
        seq_file.push_str(&format!("{id}\t{:.17}\t{:.17}\t{}\n", gt.0, gt.1, ids.join(",")));
    }
    fs::write(dir.join("sequences.tsv"), seq_file)?;

    let mut f = fs::File::create(dir.join("data.bin"))?;
    f.write_all(&data)?;
    f.sync_all()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub patch: usize,
    pub channels: usize,
    pub record_bytes: usize,
    pub n_records: usize,
    pub screen_w_cm: f64,
    pub screen_h_cm: f64,
}

#[derive(Clone, Debug)]
pub struct RecordMeta {
    pub subject: u32,
    pub split: Split,
    pub sequence: i64,
    pub gt: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct SequenceMeta {
    pub id: usize,
    pub gt: (f64, f64),
    pub frames: Vec<usize>,
}

#[derive(Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<RecordMeta>,
    pub sequences: Vec<SequenceMeta>,
    data: Vec<u8>,
}

fn parse_field<T: std::str::FromStr>(s: &str, file: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| invalid!("{file} line {line}: bad {what} '{s}'"))
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let header = Self::load_header(&dir.join("header"))?;
        let index = fs::read_to_string(dir.join("index.tsv"))?;
        let mut records = Vec::new();
        for (ln, line) in index.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(invalid!("index.tsv line {}: expected 6 columns, got {}", ln + 1, cols.len()));
            }
            let id: usize = parse_field(cols[0], "index.tsv", ln + 1, "record id")?;
            if id != records.len() {
                return Err(invalid!("index.tsv line {}: record id {id} out of order", ln + 1));
            }
            let gt = (
                parse_field(cols[4], "index.tsv", ln + 1, "gt_x_cm")?,
                parse_field(cols[5], "index.tsv", ln + 1, "gt_y_cm")?,
            );
            records.push(RecordMeta {
                subject: parse_field(cols[1], "index.tsv", ln + 1, "subject")?,
                split: parse_field(cols[2], "index.tsv", ln + 1, "split")?,
                sequence: parse_field(cols[3], "index.tsv", ln + 1, "sequence")?,
                gt,
            });
        }
        if records.len() != header.n_records {
            return Err(invalid!(
                "index.tsv lists {} records but header says {}",
                records.len(),
                header.n_records
            ));
        }

        let data = fs::read(dir.join("data.bin"))?;
        if data.len() != header.n_records * header.record_bytes {
            return Err(invalid!(
                "data.bin is {} bytes, expected {} ({} records x {} bytes)",
                data.len(),
                header.n_records * header.record_bytes,
                header.n_records,
                header.record_bytes
            ));
        }

        let seq_text = fs::read_to_string(dir.join("sequences.tsv"))?;
        let mut sequences = Vec::new();
        for (ln, line) in seq_text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(invalid!("sequences.tsv line {}: expected 4 columns", ln + 1));
            }
            let id: usize = parse_field(cols[0], "sequences.tsv", ln + 1, "sequence id")?;
            let gt = (
                parse_field(cols[1], "sequences.tsv", ln + 1, "gt_x_cm")?,
                parse_field(cols[2], "sequences.tsv", ln + 1, "gt_y_cm")?,
            );
            let mut frames = Vec::new();
            for part in cols[3].split(',') {
                let fid: usize = parse_field(part, "sequences.tsv", ln + 1, "frame id")?;
                if fid >= records.len() {
                    return Err(invalid!("sequences.tsv line {}: frame id {fid} out of range", ln + 1));
                }
                frames.push(fid);
            }
            sequences.push(SequenceMeta { id, gt, frames });
        }

        let ds = Dataset { header, records, sequences, data };
        ds.check_consistency()?;
        Ok(ds)
    }

    fn load_header(path: &Path) -> Result<DatasetHeader> {
        let text = fs::read_to_string(path)?;
        let mut h = DatasetHeader {
            format_version: 0,
            patch: 0,
            channels: 0,
            record_bytes: 0,
            n_records: 0,
            screen_w_cm: 0.0,
            screen_h_cm: 0.0,
        };
        let mut dtype_ok = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid!("header line {}: expected 'key = value'", ln + 1))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "format_version" => h.format_version = parse_field(v, "header", ln + 1, k)?,
                "patch" => h.patch = parse_field(v, "header", ln + 1, k)?,
                "channels" => h.channels = parse_field(v, "header", ln + 1, k)?,
                "record_bytes" => h.record_bytes = parse_field(v, "header", ln + 1, k)?,
                "n_records" => h.n_records = parse_field(v, "header", ln + 1, k)?,
                "screen_w_cm" => h.screen_w_cm = parse_field(v, "header", ln + 1, k)?,
                "screen_h_cm" => h.screen_h_cm = parse_field(v, "header", ln + 1, k)?,
                "dtype" => {
                    if v != "u8" {
                        return Err(invalid!("header: unsupported dtype '{v}'"));
                    }
                    dtype_ok = true;
                }
                other => return Err(invalid!("header line {}: unknown key '{other}'", ln + 1)),
            }
        }
        if h.format_version != FORMAT_VERSION {
            return Err(invalid!(
                "unsupported dataset format version {} (this build reads {FORMAT_VERSION})",
                h.format_version
            ));
        }
        if !dtype_ok {
            return Err(invalid!("header: missing dtype"));
        }
        let expect = 3 * h.channels * h.patch * h.patch + 16;
        if h.record_bytes != expect {
            return Err(invalid!("header: record_bytes {} inconsistent with patch/channels (expected {expect})", h.record_bytes));
        }
        Ok(h)
    }

    fn check_consistency(&self) -> Result<()> {
        // Subject-disjoint singles splits.
        for s in [Split::Train, Split::Val, Split::Test] {
            for t in [Split::Train, Split::Val, Split::Test] {
                if s < t {
                    let a = self.subjects(s);
                    let b = self.subjects(t);
                    if a.intersection(&b).next().is_some() {
                        return Err(invalid!("splits {s} and {t} share subjects"));
                    }
                }
            }
        }
        // Ground truth within the screen rectangle (ordinal coverage holds).
        for (i, r) in self.records.iter().enumerate() {
            let ok = r.gt.0 >= 0.0
                && r.gt.0 <= self.header.screen_w_cm
                && r.gt.1 >= 0.0
                && r.gt.1 <= self.header.screen_h_cm;
            if !ok {
                return Err(invalid!("record {i}: ground truth {:?} outside screen range", r.gt));
            }
        }
        // Sequence frames agree on the fixation point.
        for s in &self.sequences {
            for &f in &s.frames {
                if self.records[f].gt != s.gt {
                    return Err(invalid!("sequence {}: frame {f} ground truth differs", s.id));
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn subjects(&self, split: Split) -> BTreeSet<u32> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.subject).collect()
    }

    /// Raw bytes of one record's patch planes (`which` ∈ 0 face, 1 left, 2 right).
    pub fn patch_bytes(&self, id: usize, which: usize) -> &[u8] {
        let plane = 3 * self.header.patch * self.header.patch;
        let base = id * self.header.record_bytes + which * plane;
        &self.data[base..base + plane]
    }

    /// Assemble a batch: patches scaled to [0, 1] plus ground-truth points.
    pub fn batch(&self, ids: &[usize]) -> (PatchBatch, Vec<(f64, f64)>) {
        let p = self.header.patch;
        let plane = 3 * p * p;
        let shape = [ids.len(), 3, p, p];
        let mut face = Vec::with_capacity(ids.len() * plane);
        let mut left = Vec::with_capacity(ids.len() * plane);
        let mut right = Vec::with_capacity(ids.len() * plane);
        let mut gts = Vec::with_capacity(ids.len());
        for &id in ids {
            assert!(id < self.records.len(), "batch: record id {id} out of range");
            let base = id * self.header.record_bytes;
            let px = &self.data[base..base + 3 * plane];
            face.extend(px[..plane].iter().map(|&b| b as f64 / 255.0));
            left.extend(px[plane..2 * plane].iter().map(|&b| b as f64 / 255.0));
            right.extend(px[2 * plane..].iter().map(|&b| b as f64 / 255.0));
            gts.push(self.records[id].gt);
        }
        (
            PatchBatch {
                face: Tensor::from_vec(&shape, face),
                left: Tensor::from_vec(&shape, left),
                right: Tensor::from_vec(&shape, right),
            },
            gts,
        )
    }

    /// As [`Dataset::batch`], also encoding hard ordinal labels.
    pub fn batch_with_labels(&self, ids: &[usize], codec: &PlaneCodec) -> (PatchBatch, Vec<(f64, f64)>, Vec<f64>) {
        let (patches, gts) = self.batch(ids);
        let labels = codec.encode_batch(&gts);
        (patches, gts, labels)
    }
}

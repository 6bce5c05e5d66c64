//! Synthetic word-in-sequence data and its binary container.
//!
//! Every class owns a procedurally drawn stroke glyph and a motion path. A
//! sample shows its class glyph moving along that path inside a random
//! window `[s, s + L)`; every frame outside the window shows one glyph drawn
//! independently from a distractor pool made of every other class's glyph
//! plus a set of neutral glyphs. Members of a confusable pair share their base
//! strokes and motion and differ only inside a single glyph quadrant.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::kv::{KvError, KvMap};
use crate::model::VideoSequence;
use crate::par::{map_indexed, Exec};
use crate::tensor::{RngStream, Tensor};

pub const MAGIC: &[u8; 8] = b"MIMSEQ01";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 5 * 4;

const GLYPH_STREAM: u64 = 0x676c_7970;
const MOTION_STREAM: u64 = 0x6d6f_7469;
const DISTRACTOR_STREAM: u64 = 0x6469_7374;
const SAMPLE_STREAM: u64 = 0x7361_6d70;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}")]
    BadMagic { found: [u8; 8] },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },
    #[error("header extents overflow: {0}")]
    ExtentOverflow(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(u64),
    #[error("record {index}: {detail}")]
    Record { index: usize, detail: String },
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("class {class} outside [0, {classes})")]
    Class { class: usize, classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub frames: usize,
    pub side: usize,
    pub window_min: usize,
    pub window_max: usize,
    pub confusable: Vec<(usize, usize)>,
    /// Glyph intensity range.
    pub brightness: (f64, f64),
    /// Maximum per-sample shift of the glyph box, in pixels.
    pub translation: usize,
    /// Exponent range of the time warp applied to the motion path.
    pub speed_warp: (f64, f64),
    pub noise_std: f64,
    /// Neutral glyphs added to the other classes' glyphs in the distractor pool.
    pub distractor_pool: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            frames: 12,
            side: 32,
            window_min: 4,
            window_max: 7,
            confusable: vec![(0, 1), (2, 3), (4, 5)],
            brightness: (0.6, 1.0),
            translation: 3,
            speed_warp: (0.7, 1.4),
            noise_std: 0.05,
            distractor_pool: 8,
            train_per_class: 200,
            test_per_class: 50,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    /// Held-out split monitored by the learning-rate schedule; sized like `Test`.
    Validation,
    Test,
}

impl SynthSpec {
    pub fn glyph_side(&self) -> usize {
        self.side / 2
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.classes < 2 || self.frames == 0 || self.side < 8 {
            return bad("classes >= 2, frames >= 1 and side >= 8 required".into());
        }
        if self.window_min < 2 || self.window_max < self.window_min || self.window_max > self.frames {
            return bad(format!(
                "window range [{}, {}] must satisfy 2 <= min <= max <= frames ({})",
                self.window_min, self.window_max, self.frames
            ));
        }
        let mut seen = vec![false; self.classes];
        for &(a, b) in &self.confusable {
            if a >= self.classes || b >= self.classes || a == b {
                return bad(format!("confusable pair ({a}, {b}) is not a pair of valid classes"));
            }
            if std::mem::replace(&mut seen[a], true) || std::mem::replace(&mut seen[b], true) {
                return bad(format!("class in pair ({a}, {b}) already belongs to another pair"));
            }
        }
        if !(0.0 <= self.brightness.0 && self.brightness.0 <= self.brightness.1 && self.brightness.1 <= 1.0) {
            return bad("brightness range must lie in [0, 1]".into());
        }
        if !(self.speed_warp.0 > 0.0 && self.speed_warp.0 <= self.speed_warp.1) {
            return bad("speed-warp range must be positive and ordered".into());
        }
        if self.noise_std < 0.0 || self.distractor_pool == 0 {
            return bad("noise_std >= 0 and distractor_pool >= 1 required".into());
        }
        if 2 * self.translation + 8 > self.side - self.glyph_side() {
            return bad("translation leaves no room for motion".into());
        }
        Ok(())
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Validation | Split::Test => self.test_per_class,
        }
    }

    /// Confusable partner of `class`, if any.
    pub fn partner(&self, class: usize) -> Option<usize> {
        self.confusable.iter().find_map(|&(a, b)| match class {
            c if c == a => Some(b),
            c if c == b => Some(a),
            _ => None,
        })
    }

    pub const KEYS: &'static [&'static str] = &[
        "classes",
        "frames",
        "side",
        "window_min",
        "window_max",
        "confusable",
        "brightness",
        "translation",
        "speed_warp",
        "noise_std",
        "distractor_pool",
        "train_per_class",
        "test_per_class",
        "seed",
    ];

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("classes", self.classes);
        m.set("frames", self.frames);
        m.set("side", self.side);
        m.set("window_min", self.window_min);
        m.set("window_max", self.window_max);
        let pairs: Vec<String> = self.confusable.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        m.set("confusable", pairs.join(","));
        m.set("brightness", format!("{},{}", self.brightness.0, self.brightness.1));
        m.set("translation", self.translation);
        m.set("speed_warp", format!("{},{}", self.speed_warp.0, self.speed_warp.1));
        m.set("noise_std", self.noise_std);
        m.set("distractor_pool", self.distractor_pool);
        m.set("train_per_class", self.train_per_class);
        m.set("test_per_class", self.test_per_class);
        m.set("seed", self.seed);
        m
    }

    pub fn from_kv(m: &KvMap, base: &SynthSpec) -> Result<Self, KvError> {
        m.check_keys(Self::KEYS)?;
        let mut s = base.clone();
        m.apply("classes", &mut s.classes)?;
        m.apply("frames", &mut s.frames)?;
        m.apply("side", &mut s.side)?;
        m.apply("window_min", &mut s.window_min)?;
        m.apply("window_max", &mut s.window_max)?;
        if let Some(list) = m.get_list::<String>("confusable")? {
            s.confusable = list
                .iter()
                .map(|p| {
                    let bad = || KvError::Value {
                        key: "confusable".into(),
                        value: p.clone(),
                    };
                    let (a, b) = p.split_once(':').ok_or_else(bad)?;
                    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
                })
                .collect::<Result<_, KvError>>()?;
        }
        for (key, slot) in [("brightness", &mut s.brightness), ("speed_warp", &mut s.speed_warp)] {
            if let Some(v) = m.get_list::<f64>(key)? {
                if v.len() != 2 {
                    return Err(KvError::Value {
                        key: key.into(),
                        value: m.get_str(key).unwrap_or_default().into(),
                    });
                }
                *slot = (v[0], v[1]);
            }
        }
        m.apply("translation", &mut s.translation)?;
        m.apply("noise_std", &mut s.noise_std)?;
        m.apply("distractor_pool", &mut s.distractor_pool)?;
        m.apply("train_per_class", &mut s.train_per_class)?;
        m.apply("test_per_class", &mut s.test_per_class)?;
        m.apply("seed", &mut s.seed)?;
        s.validate().map_err(|e| KvError::Invalid(e.to_string()))?;
        Ok(s)
    }
}

/// A `g x g` intensity image in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub side: usize,
    pub pixels: Vec<f32>,
}

type Segment = [(f64, f64); 2];

fn segment_distance(p: (f64, f64), s: &Segment) -> f64 {
    let [(ax, ay), (bx, by)] = *s;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx - p.0, ay + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

const STROKE_HALF_WIDTH: f64 = 0.8;

/// Anti-aliased strokes; `clip` restricts drawing to `[x0, x1) x [y0, y1)`.
fn draw(pixels: &mut [f32], side: usize, strokes: &[Segment], clip: Option<[usize; 4]>) {
    for y in 0..side {
        for x in 0..side {
            if let Some([x0, x1, y0, y1]) = clip {
                if x < x0 || x >= x1 || y < y0 || y >= y1 {
                    continue;
                }
            }
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = strokes.iter().map(|s| segment_distance(p, s)).fold(f64::INFINITY, f64::min);
            let v = (1.0 - (d - STROKE_HALF_WIDTH)).clamp(0.0, 1.0) as f32;
            let px = &mut pixels[y * side + x];
            *px = px.max(v);
        }
    }
}

fn random_segment(rng: &mut RngStream, [x0, x1, y0, y1]: [f64; 4]) -> Segment {
    loop {
        let a = (rng.uniform_in(x0, x1), rng.uniform_in(y0, y1));
        let b = (rng.uniform_in(x0, x1), rng.uniform_in(y0, y1));
        let min_len = 0.5 * (x1 - x0).min(y1 - y0);
        if ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= min_len {
            return [a, b];
        }
    }
}

/// Quadrant bounds `[x0, x1, y0, y1]` of a `g x g` glyph (0..4, row-major).
fn quadrant(g: usize, q: usize) -> [usize; 4] {
    let h = g / 2;
    let (qx, qy) = (q % 2, q / 2);
    [qx * h, (qx + 1) * h, qy * h, (qy + 1) * h]
}

/// Class glyph. Confusable partners share base strokes (keyed by the smaller
/// class of the pair) and differ only inside their least-inked quadrant,
/// which is cleared for both and holds a solid block for the smaller class.
pub fn class_glyph(spec: &SynthSpec, class: usize) -> Glyph {
    let g = spec.glyph_side();
    let gf = g as f64;
    let key = spec.partner(class).map_or(class, |p| p.min(class));
    let mut base_rng = RngStream::new(spec.seed, GLYPH_STREAM).derive(key as u64);
    let full = [1.0, gf - 1.0, 1.0, gf - 1.0];
    let base: Vec<Segment> = (0..3).map(|_| random_segment(&mut base_rng, full)).collect();
    let mut pixels = vec![0.0f32; g * g];
    draw(&mut pixels, g, &base, None);
    match spec.partner(class) {
        Some(p) => {
            let ink = |q: usize| {
                let [x0, x1, y0, y1] = quadrant(g, q);
                (y0..y1).flat_map(|y| (x0..x1).map(move |x| y * g + x)).map(|i| pixels[i]).sum::<f32>()
            };
            let q = (0..4).min_by(|&a, &b| ink(a).total_cmp(&ink(b))).unwrap_or(0);
            let [x0, x1, y0, y1] = quadrant(g, q);
            for y in y0..y1 {
                pixels[y * g + x0..y * g + x1].fill(0.0);
            }
            if class < p {
                for y in y0 + 1..y1 - 1 {
                    pixels[y * g + x0 + 1..y * g + x1 - 1].fill(1.0);
                }
            }
        }
        None => {
            let mut mark_rng = RngStream::new(spec.seed, GLYPH_STREAM).derive(1_000_000 + class as u64);
            let mark = [random_segment(&mut mark_rng, full)];
            draw(&mut pixels, g, &mark, None);
        }
    }
    Glyph { side: g, pixels }
}

/// Glyph of distractor pool entry `k`; independent of every class.
pub fn distractor_glyph(spec: &SynthSpec, k: usize) -> Glyph {
    let g = spec.glyph_side();
    let gf = g as f64;
    let mut rng = RngStream::new(spec.seed, DISTRACTOR_STREAM).derive(k as u64);
    let strokes: Vec<Segment> = (0..4).map(|_| random_segment(&mut rng, [1.0, gf - 1.0, 1.0, gf - 1.0])).collect();
    let mut pixels = vec![0.0f32; g * g];
    draw(&mut pixels, g, &strokes, None);
    Glyph { side: g, pixels }
}

/// Class motion path: endpoints of a straight sweep through the canvas centre.
fn motion(spec: &SynthSpec, class: usize) -> (f64, f64) {
    let key = spec.partner(class).map_or(class, |p| p.min(class));
    let mut rng = RngStream::new(spec.seed, MOTION_STREAM).derive(key as u64);
    let theta = rng.uniform_in(0.0, std::f64::consts::TAU);
    let room = ((spec.side - spec.glyph_side()) / 2 - spec.translation) as f64;
    let amp = rng.uniform_in(0.5, 1.0) * room;
    (amp * theta.cos(), amp * theta.sin())
}

fn blit(frame: &mut [f32], side: usize, glyph: &Glyph, x0: i64, y0: i64, gain: f32) {
    for gy in 0..glyph.side {
        for gx in 0..glyph.side {
            let (x, y) = (x0 + gx as i64, y0 + gy as i64);
            if x < 0 || y < 0 || x >= side as i64 || y >= side as i64 {
                continue;
            }
            let v = gain * glyph.pixels[gy * glyph.side + gx];
            let px = &mut frame[y as usize * side + x as usize];
            *px = px.max(v);
        }
    }
}

fn sample_stream(spec: &SynthSpec, class: usize, index: usize) -> RngStream {
    RngStream::new(spec.seed, SAMPLE_STREAM).derive(((class as u64) << 32) | index as u64)
}

/// One labelled sequence, fully determined by `(spec.seed, class, index)`.
pub fn generate_sample(spec: &SynthSpec, class: usize, index: usize) -> Result<VideoSequence, DataError> {
    spec.validate()?;
    if class >= spec.classes {
        return Err(DataError::Class {
            class,
            classes: spec.classes,
        });
    }
    Ok(render_sample(spec, &class_glyph(spec, class), class, index, |k| match distractor_source(spec, class, k) {
        Distractor::Class(c) => class_glyph(spec, c),
        Distractor::Neutral(n) => distractor_glyph(spec, n),
    }))
}

enum Distractor {
    Class(usize),
    Neutral(usize),
}

/// Entry `k` of the distractor pool seen by `class`: the other `C - 1` class
/// glyphs first, then the neutral glyphs.
fn distractor_source(spec: &SynthSpec, class: usize, k: usize) -> Distractor {
    let others = spec.classes - 1;
    if k < others {
        Distractor::Class(if k < class { k } else { k + 1 })
    } else {
        Distractor::Neutral(k - others)
    }
}

fn render_sample(
    spec: &SynthSpec,
    glyph: &Glyph,
    class: usize,
    index: usize,
    distractor: impl Fn(usize) -> Glyph,
) -> VideoSequence {
    let (t, s, g) = (spec.frames, spec.side, spec.glyph_side());
    let mut rng = sample_stream(spec, class, index);
    let len = rng.int_in(spec.window_min, spec.window_max);
    let start = rng.int_in(0, t - len);
    let gain = rng.uniform_in(spec.brightness.0, spec.brightness.1) as f32;
    let tr = spec.translation as i64;
    let shift = (rng.int_in(0, 2 * spec.translation) as i64 - tr, rng.int_in(0, 2 * spec.translation) as i64 - tr);
    let warp = rng.uniform_in(spec.speed_warp.0, spec.speed_warp.1);
    let (mx, my) = motion(spec, class);
    let centre = ((s - g) / 2) as f64;
    let room = ((s - g) / 2) as i64;

    let distractor_frame = |rng: &mut RngStream| {
        let k = rng.below(spec.classes - 1 + spec.distractor_pool);
        let pos = (rng.int_in(0, 2 * room as usize) as i64, rng.int_in(0, 2 * room as usize) as i64);
        let dg = rng.uniform_in(spec.brightness.0, spec.brightness.1) as f32;
        (distractor(k), pos, dg)
    };

    let mut data = vec![0.0f32; t * s * s];
    for (f, frame) in data.chunks_mut(s * s).enumerate() {
        if f >= start && f < start + len {
            let tau = ((f - start) as f64 / (len - 1) as f64).powf(warp);
            let x = (centre + shift.0 as f64 + mx * (2.0 * tau - 1.0)).round() as i64;
            let y = (centre + shift.1 as f64 + my * (2.0 * tau - 1.0)).round() as i64;
            blit(frame, s, glyph, x, y, gain);
        } else {
            let (dglyph, (x, y), dg) = distractor_frame(&mut rng);
            blit(frame, s, &dglyph, x, y, dg);
        }
        if spec.noise_std > 0.0 {
            for v in frame.iter_mut() {
                *v += (spec.noise_std * rng.normal()) as f32;
            }
        }
        for v in frame.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let frames = Tensor::new(&[t, 1, s, s], data).expect("extent fixed by spec");
    VideoSequence {
        frames,
        label: class,
        window: Some((start, start + len)),
    }
}

/// All samples of a split; sample `j` has class `j % C` and in-class index `j / C`.
pub fn generate_split(spec: &SynthSpec, split: Split, exec: Exec) -> Result<Vec<VideoSequence>, DataError> {
    spec.validate()?;
    let per = spec.per_class(split);
    let offset = match split {
        Split::Train => 0,
        Split::Test => spec.train_per_class,
        Split::Validation => spec.train_per_class + spec.test_per_class,
    };
    let glyphs: Vec<Glyph> = (0..spec.classes).map(|c| class_glyph(spec, c)).collect();
    let pool: Vec<Glyph> = (0..spec.distractor_pool).map(|k| distractor_glyph(spec, k)).collect();
    let c = spec.classes;
    Ok(map_indexed(exec, per * c, |j| {
        let class = j % c;
        render_sample(spec, &glyphs[class], class, offset + j / c, |k| match distractor_source(spec, class, k) {
            Distractor::Class(o) => glyphs[o].clone(),
            Distractor::Neutral(n) => pool[n].clone(),
        })
    }))
}

/// Per-class sample counts.
pub fn class_balance(samples: &[VideoSequence], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        if let Some(c) = counts.get_mut(s.label) {
            *c += 1;
        }
    }
    counts
}

/// Decoded dataset: extents plus samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub frames: usize,
    pub side: usize,
    pub classes: usize,
    pub samples: Vec<VideoSequence>,
}

impl DatasetFile {
    pub fn new(samples: Vec<VideoSequence>, classes: usize) -> Result<Self, DataError> {
        let first = samples.first().ok_or_else(|| DataError::Record {
            index: 0,
            detail: "empty dataset".into(),
        })?;
        let (frames, side) = (first.num_frames(), first.side());
        for (i, s) in samples.iter().enumerate() {
            if s.frames.shape() != [frames, 1, side, side] {
                return Err(DataError::Record {
                    index: i,
                    detail: format!("extent {:?} differs from {:?}", s.frames.shape(), [frames, 1, side, side]),
                });
            }
            if s.label >= classes {
                return Err(DataError::Record {
                    index: i,
                    detail: format!("label {} outside [0, {classes})", s.label),
                });
            }
        }
        Ok(Self {
            frames,
            side,
            classes,
            samples,
        })
    }

    fn record_len(&self) -> u64 {
        12 + 4 * (self.frames * self.side * self.side) as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity((HEADER_LEN + self.record_len() * self.samples.len() as u64) as usize);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.samples.len() as u32, self.frames as u32, self.side as u32, self.classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.samples {
            let (a, b) = s.window.unwrap_or((0, 0));
            for v in [s.label as u32, a as u32, b as u32] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in s.frames.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a complete container. The header is validated before any record is read.
    pub fn read_from(mut reader: impl Read) -> Result<Self, DataError> {
        let mut pos = 0u64;
        let mut read_exact = |buf: &mut [u8], pos: &mut u64| -> Result<(), DataError> {
            let mut filled = 0;
            while filled < buf.len() {
                match reader.read(&mut buf[filled..]) {
                    Ok(0) => {
                        return Err(DataError::Truncated {
                            offset: *pos + filled as u64,
                            needed: (buf.len() - filled) as u64,
                        })
                    }
                    Ok(n) => filled += n,
                    Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                    Err(e) => return Err(e.into()),
                }
            }
            *pos += buf.len() as u64;
            Ok(())
        };
        let mut magic = [0u8; 8];
        read_exact(&mut magic, &mut pos)?;
        if &magic != MAGIC {
            return Err(DataError::BadMagic { found: magic });
        }
        let mut header = [0u8; 20];
        read_exact(&mut header, &mut pos)?;
        let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap());
        if word(0) != VERSION {
            return Err(DataError::Version(word(0)));
        }
        let (n, frames, side, classes) = (word(1) as u64, word(2) as u64, word(3) as u64, word(4) as u64);
        let payload = frames
            .checked_mul(side)
            .and_then(|v| v.checked_mul(side))
            .filter(|&v| v > 0 && v <= (u32::MAX as u64))
            .ok_or_else(|| DataError::ExtentOverflow(format!("T={frames} S={side}")))?;
        n.checked_mul(12 + 4 * payload)
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or_else(|| DataError::ExtentOverflow(format!("{n} records of {payload} values")))?;
        if classes == 0 {
            return Err(DataError::ExtentOverflow("zero classes".into()));
        }
        let (frames, side) = (frames as usize, side as usize);
        let mut samples = Vec::new();
        let mut fixed = [0u8; 12];
        let mut raw = vec![0u8; 4 * payload as usize];
        for index in 0..n as usize {
            read_exact(&mut fixed, &mut pos)?;
            let w = |i: usize| u32::from_le_bytes(fixed[4 * i..4 * i + 4].try_into().unwrap()) as usize;
            let (label, a, b) = (w(0), w(1), w(2));
            read_exact(&mut raw, &mut pos)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let window = if (a, b) == (0, 0) { None } else { Some((a, b)) };
            let record_err = |detail: String| DataError::Record { index, detail };
            if label >= classes as usize {
                return Err(record_err(format!("label {label} outside [0, {classes})")));
            }
            let frames = Tensor::new(&[frames, 1, side, side], data).map_err(|e| record_err(e.to_string()))?;
            samples.push(VideoSequence::new(frames, label, window).map_err(|e| record_err(e.to_string()))?);
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(DataError::TrailingBytes(rest.len() as u64));
        }
        Ok(Self {
            frames,
            side,
            classes: classes as usize,
            samples,
        })
    }
}

pub fn write_dataset(dataset: &DatasetFile, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&dataset.to_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile, DataError> {
    DatasetFile::read_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_per_class: 2,
            test_per_class: 1,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn determinism_and_ranges() {
        let spec = small();
        let a = generate_sample(&spec, 3, 5).unwrap();
        let b = generate_sample(&spec, 3, 5).unwrap();
        assert_eq!(a, b);
        let (s, e) = a.window.unwrap();
        assert!(e - s >= spec.window_min && e - s <= spec.window_max && e <= spec.frames);
        assert!(a.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(generate_sample(&spec, 10, 0), Err(DataError::Class { .. })));
    }

    #[test]
    fn split_matches_single_samples() {
        let spec = small();
        let test = generate_split(&spec, Split::Test, Exec::Sequential).unwrap();
        assert_eq!(test.len(), 10);
        assert_eq!(test[3], generate_sample(&spec, 3, spec.train_per_class).unwrap());
        assert_eq!(test, generate_split(&spec, Split::Test, Exec::Parallel).unwrap());
    }

    #[test]
    fn confusable_difference_is_confined() {
        let spec = SynthSpec::default();
        let g = spec.glyph_side();
        for &(a, b) in &spec.confusable {
            let (ga, gb) = (class_glyph(&spec, a), class_glyph(&spec, b));
            let diff = ga.pixels.iter().zip(&gb.pixels).filter(|(x, y)| x != y).count();
            assert!(diff > 0);
            assert!(diff * 4 <= g * g, "pair ({a},{b}) differs on {diff} pixels");
        }
    }

    #[test]
    fn balance_counts() {
        let spec = small();
        let train = generate_split(&spec, Split::Train, Exec::Sequential).unwrap();
        assert_eq!(class_balance(&train, 10), vec![2; 10]);
        assert_eq!(class_balance(&[], 3), vec![0; 3]);
    }

    #[test]
    fn spec_validation() {
        let s = SynthSpec {
            window_min: 1,
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
        let s = SynthSpec {
            confusable: vec![(0, 10)],
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
        let spec = SynthSpec::default();
        assert_eq!(SynthSpec::from_kv(&spec.to_kv(), &small()).unwrap(), spec);
    }
}

//! Synthetic referring-video corpus: moving coloured shapes, rectangular
//! occluders and a three-token expression naming one object.
//!
//! # Video file layout (little-endian)
//!
//! | field     | type                 |
//! |-----------|----------------------|
//! | magic     | `b"RVC1"`            |
//! | version   | u32                  |
//! | T, H, W   | 3 × u32              |
//! | frames    | f32 × T·H·W·3 (RGB)  |
//! | masks     | u8 × T·H·W           |
//! | boxes     | f32 × T·4 (cx,cy,w,h)|
//! | presence  | u8 × T               |
//! | L         | u32                  |
//! | tokens    | u16 × L              |
//! | crc32     | u32 over all above   |
//!
//! The corpus directory holds `manifest.json` and one file per video.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BoxCxCyWh, Mask, MaskSequence};
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 4] = b"RVC1";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
/// A target with fewer visible pixels is marked absent.
pub const PRESENCE_MIN_PIXELS: usize = 10;

pub const NUM_COLORS: usize = 6;
pub const COLOR_NAMES: [&str; NUM_COLORS] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const PALETTE: [[f32; 3]; NUM_COLORS] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.8, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.2],
    [0.85, 0.2, 0.85],
    [0.2, 0.85, 0.9],
];
pub const BACKGROUND: f32 = 0.1;
pub const OCCLUDER: f32 = 0.5;

/// Token ids: colours `0..6`, shapes `6..9`, motions `9..13`.
pub const VOCAB_SIZE: usize = 13;
const SHAPE_BASE: u16 = NUM_COLORS as u16;
const MOTION_BASE: u16 = SHAPE_BASE + 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Still,
    Horizontal,
    Vertical,
    Circling,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Still, Motion::Horizontal, Motion::Vertical, Motion::Circling];
}

/// `x(t) = x0 + vx·t + ax·sin(ω·t + φx)`, likewise for `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub omega: f64,
    pub phase_x: f64,
    pub phase_y: f64,
}

impl Trajectory {
    pub fn at(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        (
            self.x0 + self.vx * t + self.ax * (self.omega * t + self.phase_x).sin(),
            self.y0 + self.vy * t + self.ay * (self.omega * t + self.phase_y).sin(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: u8,
    /// Radius (circle) or half-extent (square, triangle) in pixels.
    pub size: f64,
    pub motion: Motion,
    pub trajectory: Trajectory,
}

impl ObjectSpec {
    /// Whether the pixel with centre `(px, py)` is covered when the object is
    /// centred at `(cx, cy)`.
    pub fn covers(&self, cx: f64, cy: f64, px: f64, py: f64) -> bool {
        let (dx, dy, s) = (px - cx, py - cy, self.size);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= s * s,
            Shape::Square => dx.abs() <= s && dy.abs() <= s,
            // apex up at (cx, cy − s), base along y = cy + s
            Shape::Triangle => dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0,
        }
    }
}

/// Axis-aligned rectangle in pixel units, active on frames `start..end`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occluder {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
    pub start: usize,
    pub end: usize,
}

impl Occluder {
    fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        (self.start..self.end).contains(&t)
            && (self.y0..self.y0 + self.height).contains(&y)
            && (self.x0..self.x0 + self.width).contains(&x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Drawn back to front.
    pub objects: Vec<ObjectSpec>,
    pub occluders: Vec<Occluder>,
    pub referred_index: usize,
    pub expression: Vec<u16>,
}

pub fn expression_for(o: &ObjectSpec) -> Vec<u16> {
    let shape = Shape::ALL.iter().position(|&s| s == o.shape).unwrap_or(0) as u16;
    let motion = Motion::ALL.iter().position(|&m| m == o.motion).unwrap_or(0) as u16;
    vec![o.color as u16, SHAPE_BASE + shape, MOTION_BASE + motion]
}

/// Word for every token id, in id order.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = COLOR_NAMES.iter().map(|s| s.to_string()).collect();
    v.extend(["circle", "square", "triangle"].map(String::from));
    v.extend(["still", "horizontal", "vertical", "circling"].map(String::from));
    v
}

/// Objects whose `(colour, shape, motion)` triple matches `tokens`.
pub fn resolve_expression(scene: &SceneSpec, tokens: &[u16]) -> Vec<usize> {
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| expression_for(o) == tokens)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that a video gets an occluder over the target's path.
    pub occluder_prob: f64,
    /// When false, every object in a scene has its own colour.
    pub allow_shared_colors: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_videos: 200,
            frames: 16,
            height: 96,
            width: 96,
            min_objects: 2,
            max_objects: 4,
            occluder_prob: 0.5,
            allow_shared_colors: false,
        }
    }
}

pub const MIN_FRAMES: usize = 10;
const MAX_ATTEMPTS: u64 = 256;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.frames < MIN_FRAMES {
            return bad(format!("T = {} is below the minimum of {MIN_FRAMES}", self.frames));
        }
        if !(2..=4).contains(&self.min_objects) || !(self.min_objects..=4).contains(&self.max_objects) {
            return bad(format!("object count {}..={} outside 2..=4", self.min_objects, self.max_objects));
        }
        if self.height < 32 || self.width < 32 || self.height % 32 != 0 || self.width % 32 != 0 {
            return bad(format!("extent {}x{} must be multiples of 32", self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return bad(format!("occluder probability {}", self.occluder_prob));
        }
        Ok(())
    }

    /// Seed of video `index`, derived from the corpus seed.
    pub fn video_seed(&self, index: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(index as u64 + 1))
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pure function of `(seed, config)`. Each attempt draws from its own
/// ChaCha stream; attempts whose referred triple is ambiguous are rejected.
pub fn gen_scene(seed: u64, cfg: &GeneratorConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let scene = sample_scene(seed, cfg, &mut rng);
        if scene_is_valid(&scene) {
            return Ok(scene);
        }
    }
    Err(Error::ConfigInvalid(format!(
        "no unambiguous scene for seed {seed} after {MAX_ATTEMPTS} attempts"
    )))
}

/// Referred triple unique and every centre inside the frame.
pub fn scene_is_valid(scene: &SceneSpec) -> bool {
    let unique = resolve_expression(scene, &scene.expression) == [scene.referred_index];
    let inside = scene.objects.iter().all(|o| {
        (0..scene.frames).all(|t| {
            let (x, y) = o.trajectory.at(t);
            x >= 0.0 && y >= 0.0 && x < scene.width as f64 && y < scene.height as f64
        })
    });
    unique && inside
}

fn sample_scene(seed: u64, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> SceneSpec {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut colors: Vec<u8> = (0..NUM_COLORS as u8).collect();
    let objects: Vec<ObjectSpec> = (0..n)
        .map(|_| {
            let color = if cfg.allow_shared_colors {
                rng.random_range(0..NUM_COLORS as u8)
            } else {
                colors.swap_remove(rng.random_range(0..colors.len()))
            };
            sample_object(color, cfg, rng)
        })
        .collect();
    let referred_index = rng.random_range(0..n);
    let mut occluders = vec![];
    if rng.random_bool(cfg.occluder_prob) {
        let t_c = rng.random_range(2..cfg.frames - 2);
        let (cx, cy) = objects[referred_index].trajectory.at(t_c);
        let side = rng.random_range(18..=30usize);
        let half = rng.random_range(1..=2usize);
        let clampi = |c: f64, lim: usize| ((c - side as f64 / 2.0).round().max(0.0) as usize).min(lim - side);
        occluders.push(Occluder {
            y0: clampi(cy, cfg.height),
            x0: clampi(cx, cfg.width),
            height: side,
            width: side,
            start: t_c - half,
            end: t_c + half + 1,
        });
    }
    let expression = expression_for(&objects[referred_index]);
    SceneSpec {
        seed,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        objects,
        occluders,
        referred_index,
        expression,
    }
}

fn sample_object(color: u8, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> ObjectSpec {
    let scale = cfg.height.min(cfg.width) as f64 / 96.0;
    let size = rng.random_range(7.0..14.0) * scale;
    let shape = Shape::ALL[rng.random_range(0..3)];
    let motion = Motion::ALL[rng.random_range(0..4)];
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let span = (cfg.frames - 1) as f64;
    let margin = size + 1.0;
    let mut tr = Trajectory {
        x0: 0.0,
        y0: 0.0,
        vx: 0.0,
        vy: 0.0,
        ax: 0.0,
        ay: 0.0,
        omega: 0.0,
        phase_x: 0.0,
        phase_y: 0.0,
    };
    // Travel between two points at least a third of the frame apart, with a
    // small perpendicular wobble.
    let sweep = |rng: &mut ChaCha8Rng, len: f64| -> (f64, f64) {
        let lo = margin;
        let hi = len - margin;
        let dist = rng.random_range((len / 3.0).min(hi - lo)..=(hi - lo));
        let start = rng.random_range(lo..=hi - dist);
        if rng.random_bool(0.5) {
            (start, dist / span)
        } else {
            (start + dist, -dist / span)
        }
    };
    match motion {
        Motion::Still => {
            tr.x0 = rng.random_range(margin..w - margin);
            tr.y0 = rng.random_range(margin..h - margin);
        }
        Motion::Horizontal => {
            (tr.x0, tr.vx) = sweep(rng, w);
            tr.ay = rng.random_range(0.0..2.0);
            tr.y0 = rng.random_range(margin + tr.ay..h - margin - tr.ay);
            tr.omega = rng.random_range(0.3..0.8);
            tr.phase_y = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Motion::Vertical => {
            (tr.y0, tr.vy) = sweep(rng, h);
            tr.ax = rng.random_range(0.0..2.0);
            tr.x0 = rng.random_range(margin + tr.ax..w - margin - tr.ax);
            tr.omega = rng.random_range(0.3..0.8);
            tr.phase_x = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Motion::Circling => {
            let r = rng.random_range(8.0..16.0) * scale;
            tr.ax = r;
            tr.ay = r;
            tr.x0 = rng.random_range(margin + r..w - margin - r);
            tr.y0 = rng.random_range(margin + r..h - margin - r);
            let turns = rng.random_range(1..=2) as f64;
            tr.omega = turns * std::f64::consts::TAU / span * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            tr.phase_x = rng.random_range(0.0..std::f64::consts::TAU);
            tr.phase_y = tr.phase_x + std::f64::consts::FRAC_PI_2;
        }
    }
    ObjectSpec {
        shape,
        color,
        size,
        motion,
        trajectory: tr,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    /// `T·H·W·3` RGB values in `[0, 1]`.
    pub frames: Vec<f32>,
    pub gt_masks: MaskSequence,
    pub gt_boxes: Vec<BoxCxCyWh>,
    pub presence: Vec<bool>,
    pub tokens: Vec<u16>,
    pub scene: SceneSpec,
}

impl CorpusRecord {
    pub fn len(&self) -> usize {
        self.presence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presence.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.scene.height, self.scene.width)
    }

    /// Frames as a `[T, H, W, 3]` tensor.
    pub fn frames_tensor(&self) -> Tensor {
        let (h, w) = self.dims();
        Tensor::new(
            &[self.len(), h, w, 3],
            self.frames.iter().map(|&v| v as f64).collect(),
        )
        .expect("record dims")
    }

    /// Frames `start..start + len` as a shorter record.
    pub fn window(&self, start: usize, len: usize) -> Result<CorpusRecord> {
        if start + len > self.len() || len == 0 {
            return Err(Error::SequenceTooShort { len: self.len(), need: start + len });
        }
        let (h, w) = self.dims();
        let px = h * w * 3;
        let mut scene = self.scene.clone();
        scene.frames = len;
        Ok(CorpusRecord {
            frames: self.frames[start * px..(start + len) * px].to_vec(),
            gt_masks: MaskSequence::new(self.gt_masks.frames()[start..start + len].to_vec())?,
            gt_boxes: self.gt_boxes[start..start + len].to_vec(),
            presence: self.presence[start..start + len].to_vec(),
            tokens: self.tokens.clone(),
            scene,
        })
    }
}

/// Rasterises the scene with hard edges: objects back to front at pixel
/// centres, occluders on top.
pub fn render(scene: &SceneSpec) -> CorpusRecord {
    let (t_n, h, w) = (scene.frames, scene.height, scene.width);
    let mut frames = Vec::with_capacity(t_n * h * w * 3);
    let mut masks = Vec::with_capacity(t_n);
    let mut boxes = Vec::with_capacity(t_n);
    let mut presence = Vec::with_capacity(t_n);
    const BG: i32 = -1;
    const OCC: i32 = -2;
    for t in 0..t_n {
        let mut owner = vec![BG; h * w];
        for (i, o) in scene.objects.iter().enumerate() {
            let (cx, cy) = o.trajectory.at(t);
            let r = o.size.ceil() as isize + 1;
            let ys = (cy as isize - r).max(0) as usize..((cy as isize + r + 1).max(0) as usize).min(h);
            for y in ys {
                let xs = (cx as isize - r).max(0) as usize..((cx as isize + r + 1).max(0) as usize).min(w);
                for x in xs {
                    if o.covers(cx, cy, x as f64 + 0.5, y as f64 + 0.5) {
                        owner[y * w + x] = i as i32;
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                if scene.occluders.iter().any(|oc| oc.covers(t, y, x)) {
                    owner[y * w + x] = OCC;
                }
            }
        }
        for &o in &owner {
            let rgb = match o {
                BG => [BACKGROUND; 3],
                OCC => [OCCLUDER; 3],
                i => PALETTE[scene.objects[i as usize].color as usize],
            };
            frames.extend_from_slice(&rgb);
        }
        let referred = scene.referred_index as i32;
        let visible = Mask::new(h, w, owner.iter().map(|&o| o == referred).collect()).expect("frame dims");
        let present = visible.count() >= PRESENCE_MIN_PIXELS;
        boxes.push(if present { visible.tight_box().unwrap_or([0.0; 4]) } else { [0.0; 4] });
        masks.push(if present { visible } else { Mask::empty(h, w) });
        presence.push(present);
    }
    CorpusRecord {
        frames,
        gt_masks: MaskSequence::new(masks).expect("equal frame extents"),
        gt_boxes: boxes,
        presence,
        tokens: scene.expression.clone(),
        scene: scene.clone(),
    }
}

/// Generates and renders every video of the configured corpus.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<CorpusRecord>> {
    cfg.validate()?;
    (0..cfg.num_videos)
        .map(|i| Ok(render(&gen_scene(cfg.video_seed(i), cfg)?)))
        .collect()
}

/// Index of the first validation video: the last tenth of the corpus, at
/// least one video when the corpus has two or more.
pub fn validation_start(n: usize) -> usize {
    if n < 2 {
        return n;
    }
    n - (n / 10).max(1)
}

pub fn encode_record(rec: &CorpusRecord) -> Vec<u8> {
    let (h, w) = rec.dims();
    let t = rec.len();
    let mut b = Vec::with_capacity(24 + t * h * w * 13 + t * 17 + 4 + rec.tokens.len() * 2 + 4);
    b.extend_from_slice(CORPUS_MAGIC);
    for v in [FORMAT_VERSION, t as u32, h as u32, w as u32] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for v in &rec.frames {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for m in rec.gt_masks.frames() {
        b.extend(m.data().iter().map(|&x| x as u8));
    }
    for bx in &rec.gt_boxes {
        for &v in bx {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    b.extend(rec.presence.iter().map(|&p| p as u8));
    b.extend_from_slice(&(rec.tokens.len() as u32).to_le_bytes());
    for tk in &rec.tokens {
        b.extend_from_slice(&tk.to_le_bytes());
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated video file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses one video file. `scene` comes from the manifest.
pub fn decode_record(bytes: &[u8], scene: SceneSpec) -> Result<CorpusRecord> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CORPUS_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (t, h, w) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let px = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&v| v <= bytes.len())
        .ok_or_else(|| Error::Format("truncated video file".into()))?;
    let fixed = 20 + px * 13 + t * 17;
    let l_bytes = bytes
        .get(fixed..fixed + 4)
        .ok_or_else(|| Error::Format("truncated video file".into()))?;
    let l = u32::from_le_bytes(l_bytes.try_into().expect("4 bytes")) as usize;
    let total = fixed + 4 + 2 * l + 4;
    if bytes.len() != total {
        return Err(Error::Format(format!("file is {} bytes, header implies {total}", bytes.len())));
    }
    let expected = u32::from_le_bytes(bytes[total - 4..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..total - 4]);
    if expected != actual {
        return Err(Error::Checksum { expected, actual });
    }
    if (t, h, w) != (scene.frames, scene.height, scene.width) {
        return Err(Error::Format("video extents disagree with manifest scene".into()));
    }

    let frames: Vec<f32> = c
        .take(px * 12)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let mask_bytes = c.take(px)?;
    let masks = mask_bytes
        .chunks_exact(h * w)
        .map(|m| {
            if m.iter().any(|&v| v > 1) {
                return Err(Error::Format("mask byte outside {0, 1}".into()));
            }
            Mask::new(h, w, m.iter().map(|&v| v == 1).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let stored_boxes: Vec<f32> = c
        .take(t * 16)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let presence: Vec<bool> = c.take(t)?.iter().map(|&p| p == 1).collect();
    c.u32()?;
    let tokens: Vec<u16> = c
        .take(2 * l)?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();

    // Boxes are stored at f32 precision; the exact values are recomputed
    // from the masks and checked against the payload.
    let mut gt_boxes = Vec::with_capacity(t);
    for (i, m) in masks.iter().enumerate() {
        let b = if presence[i] { m.tight_box().unwrap_or([0.0; 4]) } else { [0.0; 4] };
        let stored = &stored_boxes[i * 4..i * 4 + 4];
        if b.iter().zip(stored).any(|(&e, &s)| e as f32 != s) {
            return Err(Error::Format(format!("box of frame {i} disagrees with its mask")));
        }
        gt_boxes.push(b);
    }
    Ok(CorpusRecord {
        frames,
        gt_masks: MaskSequence::new(masks)?,
        gt_boxes,
        presence,
        tokens,
        scene,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub path: String,
    pub crc32: u32,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: GeneratorConfig,
    pub vocabulary: Vec<String>,
    pub videos: Vec<ManifestEntry>,
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:04}")
}

pub fn write_corpus(records: &[CorpusRecord], cfg: &GeneratorConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("videos"))?;
    let mut videos = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let id = video_id(i);
        let rel = format!("videos/{id}.rvc");
        let bytes = encode_record(rec);
        let crc32 = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        fs::write(dir.join(&rel), &bytes)?;
        videos.push(ManifestEntry {
            id,
            seed: rec.scene.seed,
            path: rel,
            crc32,
            scene: rec.scene.clone(),
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: cfg.clone(),
        vocabulary: vocabulary(),
        videos,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported corpus version {}", m.version)));
    }
    Ok(m)
}

pub fn read_corpus(dir: &Path) -> Result<(Manifest, Vec<CorpusRecord>)> {
    let manifest = read_manifest(dir)?;
    let records = manifest
        .videos
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.path);
            let bytes = fs::read(path)?;
            let rec = decode_record(&bytes, e.scene.clone())?;
            let actual = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
            if actual != e.crc32 {
                return Err(Error::Checksum { expected: e.crc32, actual });
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok((manifest, records))
}

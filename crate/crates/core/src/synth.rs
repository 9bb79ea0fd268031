//! Procedurally generated videos of interacting boxes with template
//! captions and a deterministic feature oracle.
//!
//! Every video scripts one two-object event (subject, verb, object) plus
//! independently moving distractors. Object features are clean
//! class-plus-geometry codes; frame-level scene features are noisy averages
//! of a nonlinear per-object code, so which class plays which role is only
//! weakly recoverable from the scene stream.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::graph::{BoundingBox, FrameDetections};
use crate::params::Mat;
use crate::scene::{uniform_sample_indices, CLIP_LEN};

pub const DEFAULT_NOUNS: [&str; 6] = ["disc", "box", "bar", "blob", "ring", "wedge"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    MovesInto,
    JumpsOver,
    Pushes,
    Leaves,
}

impl Verb {
    pub const ALL: [Verb; 4] = [Verb::MovesInto, Verb::JumpsOver, Verb::Pushes, Verb::Leaves];

    pub fn name(self) -> &'static str {
        match self {
            Verb::MovesInto => "moves-into",
            Verb::JumpsOver => "jumps-over",
            Verb::Pushes => "pushes",
            Verb::Leaves => "leaves",
        }
    }

    pub fn parse(name: &str) -> Option<Verb> {
        Verb::ALL.into_iter().find(|v| v.name() == name)
    }

    /// Surface forms; the first is canonical.
    pub fn phrases(self) -> &'static [&'static str] {
        match self {
            Verb::MovesInto => &["moves into", "goes into"],
            Verb::JumpsOver => &["jumps over", "leaps over"],
            Verb::Pushes => &["pushes", "shoves"],
            Verb::Leaves => &["leaves", "moves away from"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Side length of the square frame.
    pub grid_size: f64,
    pub nouns: Vec<String>,
    /// Sampled frames per video.
    pub frames: usize,
    /// Source frames per video; a multiple of the clip length.
    pub source_frames: usize,
    pub n_max: usize,
    pub max_distractors: usize,
    pub object_noise: f64,
    pub scene_noise: f64,
    /// Weight of the box geometry code relative to the unit class code.
    pub geometry_scale: f64,
    /// Gain of the random projection inside the scene oracle's `tanh`.
    pub scene_gain: f64,
    pub d_obj: usize,
    pub d_2d: usize,
    pub d_3d: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid_size: 16.0,
            nouns: DEFAULT_NOUNS.iter().map(|s| s.to_string()).collect(),
            frames: 10,
            source_frames: 48,
            n_max: 5,
            max_distractors: 3,
            object_noise: 0.05,
            scene_noise: 0.5,
            geometry_scale: 0.5,
            scene_gain: 2.0,
            d_obj: 64,
            d_2d: 64,
            d_3d: 32,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nouns.len() < 2 {
            return bad("need at least two nouns".into());
        }
        let mut sorted = self.nouns.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.nouns.len() {
            return bad("nouns must be distinct".into());
        }
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if self.source_frames == 0 || !self.source_frames.is_multiple_of(CLIP_LEN) {
            return bad(format!(
                "source_frames must be a positive multiple of {CLIP_LEN}"
            ));
        }
        if self.n_max < 2 {
            return bad("n_max must hold the two event objects".into());
        }
        if self.d_obj < 8 || !self.d_obj.is_multiple_of(2) {
            return bad("d_obj must be even and at least 8".into());
        }
        if self.d_obj / 2 < self.nouns.len() {
            return bad("d_obj / 2 must be at least the number of nouns".into());
        }
        if self.d_2d == 0 || self.d_3d == 0 {
            return bad("scene feature widths must be positive".into());
        }
        if !(self.object_noise >= 0.0 && self.scene_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if self.grid_size < 12.0 {
            return bad("grid_size must be at least 12".into());
        }
        Ok(())
    }

    pub fn clips(&self) -> usize {
        self.source_frames / CLIP_LEN
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub subject: String,
    pub verb: String,
    pub object: String,
}

impl Event {
    pub fn verb(&self) -> Option<Verb> {
        Verb::parse(&self.verb)
    }
}

/// One synthetic video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub event: Event,
    pub frames: Vec<FrameDetections>,
    /// `T × d_2D`.
    pub f2d: Mat,
    /// `L × d_3D`, one row per 16-frame clip.
    pub f3d: Mat,
    pub refs: Vec<String>,
}

impl VideoSample {
    pub fn source_frames(&self) -> usize {
        self.f3d.nrows() * CLIP_LEN
    }

    pub fn sample_indices(&self) -> Vec<usize> {
        uniform_sample_indices(self.source_frames(), self.frames.len())
    }

    pub fn valid_counts(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.valid_count).collect()
    }
}

/// Ground-truth track index of every valid detection (0 = subject,
/// 1 = object, 2.. = distractors), per sampled frame.
pub type Tracks = Vec<Vec<usize>>;

pub fn caption(subject: &str, phrase: &str, object: &str) -> String {
    format!("a {subject} {phrase} a {object}")
}

/// Parses `a <noun> <verb-phrase> a <noun>` against the configured nouns.
pub fn parse_caption(text: &str, nouns: &[String]) -> Option<Event> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() < 5 || toks[0] != "a" || toks[toks.len() - 2] != "a" {
        return None;
    }
    let subject = toks[1];
    let object = toks[toks.len() - 1];
    if !nouns.iter().any(|n| n == subject) || !nouns.iter().any(|n| n == object) {
        return None;
    }
    let phrase = toks[2..toks.len() - 2].join(" ");
    let verb = Verb::ALL
        .into_iter()
        .find(|v| v.phrases().contains(&phrase.as_str()))?;
    Some(Event {
        subject: subject.to_string(),
        verb: verb.name().to_string(),
        object: object.to_string(),
    })
}

/// Fixed random tables standing in for pretrained feature extractors.
#[derive(Clone, Debug)]
pub struct FeatureOracle {
    class_table: Mat,
    scene_2d: Mat,
    scene_3d: Mat,
    grid_size: f64,
    geometry_scale: f64,
    object_noise: f64,
    d_obj: usize,
}

const DISTRACTOR_DRIFT: f64 = 2.0;
const GEOMETRY_FREQS: [f64; 3] = [1.0, 2.0, 4.0];

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

impl FeatureOracle {
    pub fn new(config: &WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x0AC1E]));
        let d_class = config.d_obj / 2;
        // Orthonormal class codes (Gram-Schmidt on Gaussian draws).
        let mut class_table = Mat::zeros((config.nouns.len(), d_class));
        for c in 0..config.nouns.len() {
            loop {
                let mut v: Array1<f64> =
                    Array1::from_shape_fn(d_class, |_| StandardNormal.sample(&mut rng));
                for prev in 0..c {
                    let p = class_table.row(prev);
                    let proj = v.dot(&p);
                    v.scaled_add(-proj, &p);
                }
                let norm = v.dot(&v).sqrt();
                if norm > 1e-6 {
                    class_table.row_mut(c).assign(&(v / norm));
                    break;
                }
            }
        }
        let gauss = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            let s = config.scene_gain / (r as f64).sqrt();
            Mat::from_shape_fn((r, c), |_| s * Distribution::<f64>::sample(&StandardNormal, rng))
        };
        let scene_2d = gauss(&mut rng, config.d_obj, config.d_2d);
        let scene_3d = gauss(&mut rng, config.d_obj, config.d_3d);
        Self {
            class_table,
            scene_2d,
            scene_3d,
            grid_size: config.grid_size,
            geometry_scale: config.geometry_scale,
            object_noise: config.object_noise,
            d_obj: config.d_obj,
        }
    }

    pub fn with_object_noise(mut self, sigma: f64) -> Self {
        self.object_noise = sigma;
        self
    }

    pub fn d_obj(&self) -> usize {
        self.d_obj
    }

    /// Linear box terms (centre in `[-1, 1]`, size relative to a quarter of
    /// the frame) followed by sinusoids of the centre and size.
    fn geometry_code(&self, b: &BoundingBox) -> Array1<f64> {
        let g = self.grid_size;
        let (cx, cy) = b.center();
        let (w, h) = (b.width() / g, b.height() / g);
        let mut vals = vec![2.0 * cx / g - 1.0, 2.0 * cy / g - 1.0, 4.0 * w, 4.0 * h];
        for &f in &GEOMETRY_FREQS {
            for v in [cx / g, cy / g] {
                vals.push((PI * f * v).sin());
                vals.push((PI * f * v).cos());
            }
        }
        for f in [1.0, 2.0] {
            for v in [w, h] {
                vals.push((PI * f * v).sin());
                vals.push((PI * f * v).cos());
            }
        }
        let width = self.d_obj - self.class_table.ncols();
        let mut code = Array1::zeros(width);
        for (k, v) in vals.into_iter().take(width).enumerate() {
            code[k] = self.geometry_scale * v;
        }
        code
    }

    /// Class code ⊕ box geometry code, plus Gaussian noise drawn from
    /// `noise_seed`. Padding boxes map to the zero vector.
    pub fn object_features(&self, class_id: usize, bbox: &BoundingBox, noise_seed: u64) -> Array1<f64> {
        let mut out = Array1::zeros(self.d_obj);
        if bbox.is_padding {
            return out;
        }
        let d_class = self.class_table.ncols();
        out.slice_mut(ndarray::s![..d_class])
            .assign(&self.class_table.row(class_id));
        out.slice_mut(ndarray::s![d_class..])
            .assign(&self.geometry_code(bbox));
        if self.object_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let normal = Normal::new(0.0, self.object_noise).expect("finite noise");
            out.mapv_inplace(|x| x + normal.sample(&mut rng));
        }
        out
    }

    /// Average over the frame's objects of `tanh(o · P)`.
    fn frame_code(&self, features: &[Array1<f64>], proj: &Mat) -> Array1<f64> {
        let mut acc = Array1::zeros(proj.ncols());
        for f in features {
            acc += &f.dot(proj).mapv(f64::tanh);
        }
        if !features.is_empty() {
            acc /= features.len() as f64;
        }
        acc
    }

    /// Frame-level 2D features at the sampled frames and clip-level 3D
    /// features, each with additive Gaussian noise of std `sigma`.
    pub fn scene_features(
        &self,
        source_objects: &[Vec<Array1<f64>>],
        sample_indices: &[usize],
        sigma: f64,
        noise_seed: u64,
    ) -> (Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite noise");
        let mut noise = |n: usize| -> Array1<f64> {
            if sigma > 0.0 {
                Array1::from_shape_fn(n, |_| normal.sample(&mut rng))
            } else {
                Array1::zeros(n)
            }
        };
        let d2 = self.scene_2d.ncols();
        let d3 = self.scene_3d.ncols();
        let mut f2d = Mat::zeros((sample_indices.len(), d2));
        for (t, &s) in sample_indices.iter().enumerate() {
            let code = self.frame_code(&source_objects[s], &self.scene_2d);
            f2d.row_mut(t).assign(&(code + noise(d2)));
        }
        let clips = source_objects.len().div_ceil(CLIP_LEN);
        let mut f3d = Mat::zeros((clips, d3));
        for l in 0..clips {
            let span = &source_objects[l * CLIP_LEN..((l + 1) * CLIP_LEN).min(source_objects.len())];
            let mut acc = Array1::zeros(d3);
            for objs in span {
                acc += &self.frame_code(objs, &self.scene_3d);
            }
            acc /= span.len() as f64;
            f3d.row_mut(l).assign(&(acc + noise(d3)));
        }
        (f2d, f3d)
    }
}

#[derive(Clone, Copy, Debug)]
struct Track {
    class_id: usize,
    role: usize,
}

/// Box trajectory as a function of normalized time `u ∈ [0, 1]`.
trait Trajectory {
    fn at(&self, u: f64) -> BoundingBox;
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    start: (f64, f64),
    end: (f64, f64),
    size: (f64, f64),
    /// Fraction of the video after which the object stops.
    arrive: f64,
    /// Fraction of the video before which the object has not started.
    depart: f64,
    arc: f64,
}

impl Trajectory for Linear {
    fn at(&self, u: f64) -> BoundingBox {
        let s = ((u - self.depart) / (self.arrive - self.depart)).clamp(0.0, 1.0);
        let cx = self.start.0 + s * (self.end.0 - self.start.0);
        let cy = self.start.1 + s * (self.end.1 - self.start.1) - self.arc * (PI * s).sin();
        let (w, h) = self.size;
        BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }
}

fn still(center: (f64, f64), size: (f64, f64)) -> Linear {
    Linear {
        start: center,
        end: center,
        size,
        arrive: 1.0,
        depart: 0.0,
        arc: 0.0,
    }
}

fn unit_direction(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let a = rng.random_range(0.0..2.0 * PI);
    (a.cos(), a.sin())
}

/// Clips a box to the frame; `None` when nothing remains visible.
fn clip_to_frame(b: BoundingBox, g: f64) -> Option<BoundingBox> {
    let x0 = b.x_min.clamp(0.0, g);
    let y0 = b.y_min.clamp(0.0, g);
    let x1 = b.x_max.clamp(0.0, g);
    let y1 = b.y_max.clamp(0.0, g);
    (x1 - x0 > 1e-6 && y1 - y0 > 1e-6).then(|| BoundingBox::new(x0, y0, x1, y1))
}

fn small(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.random_range(1.2..2.0), rng.random_range(1.2..2.0))
}

fn big(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.random_range(3.0..4.0), rng.random_range(3.0..4.0))
}

/// Subject and object trajectories. The two boxes overlap while they
/// interact and the subject is the smaller of the pair.
fn script(verb: Verb, g: f64, rng: &mut ChaCha8Rng) -> (Linear, Linear) {
    let mid = g / 2.0;
    let oc = (
        rng.random_range(mid - 3.0..mid + 3.0),
        rng.random_range(mid - 3.0..mid + 3.0),
    );
    match verb {
        Verb::MovesInto => {
            let side = rng.random_range(3.5..4.5);
            let o_size = (side * rng.random_range(0.9..1.1), side * rng.random_range(0.9..1.1));
            let r = rng.random_range(0.75..0.85);
            let s_size = (o_size.0 * r, o_size.1 * r);
            let (dx, dy) = unit_direction(rng);
            let dist = rng.random_range(5.5..7.0);
            let start = (oc.0 + dx * dist, oc.1 + dy * dist);
            let subject = Linear {
                start,
                end: oc,
                size: s_size,
                arrive: rng.random_range(0.7..0.85),
                depart: rng.random_range(0.0..0.15),
                arc: 0.0,
            };
            (subject, still(oc, o_size))
        }
        Verb::JumpsOver => {
            let o_size = big(rng);
            let s_size = small(rng);
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let span = rng.random_range(5.0..6.0);
            // The arc grazes the top of the object at its apex.
            let clearance = o_size.1 / 2.0 + s_size.1 / 2.0 - rng.random_range(0.3..0.6);
            let subject = Linear {
                start: (oc.0 - dir * span, oc.1),
                end: (oc.0 + dir * span, oc.1),
                size: s_size,
                arrive: rng.random_range(0.85..1.0),
                depart: rng.random_range(0.0..0.15),
                arc: clearance,
            };
            (subject, still(oc, o_size))
        }
        Verb::Pushes => {
            let o_size = big(rng);
            let s_size = small(rng);
            // Axis-aligned push; the subject presses slightly into the object.
            let (dx, dy): (f64, f64) = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)][rng.random_range(0..4)];
            let gap = rng.random_range(3.0..4.5);
            let contact = (o_size.0 + s_size.0) / 2.0 * dx.abs() + (o_size.1 + s_size.1) / 2.0 * dy.abs()
                - rng.random_range(0.3..0.6);
            let push = rng.random_range(3.0..4.0);
            let t_contact = rng.random_range(0.4..0.5);
            let s_start = (oc.0 - dx * (contact + gap), oc.1 - dy * (contact + gap));
            let o_end = (oc.0 + dx * push, oc.1 + dy * push);
            let s_end = (o_end.0 - dx * contact, o_end.1 - dy * contact);
            // Constant speed throughout: the subject reaches the object at
            // `t_contact` and keeps going, carrying the object along.
            let subject = Linear {
                start: s_start,
                end: s_end,
                size: s_size,
                arrive: t_contact + (1.0 - t_contact) * 0.9,
                depart: t_contact - (t_contact + (1.0 - t_contact) * 0.9 - t_contact) * gap / push,
                arc: 0.0,
            };
            let object = Linear {
                start: oc,
                end: o_end,
                size: o_size,
                arrive: subject.arrive,
                depart: t_contact,
                arc: 0.0,
            };
            (subject, object)
        }
        Verb::Leaves => {
            let o_size = big(rng);
            let s_size = small(rng);
            let (dx, dy) = unit_direction(rng);
            let near = (o_size.0.max(o_size.1) + s_size.0.max(s_size.1)) / 2.0 * 0.8;
            let start = (oc.0 + dx * near, oc.1 + dy * near);
            // Far enough to be fully outside the frame from any start point.
            let end = (start.0 + dx * 2.5 * g, start.1 + dy * 2.5 * g);
            let subject = Linear {
                start,
                end,
                size: s_size,
                arrive: rng.random_range(1.3..1.5),
                depart: rng.random_range(0.05..0.2),
                arc: 0.0,
            };
            (subject, still(oc, o_size))
        }
    }
}

/// Slowly drifting object of a class not involved in the event.
fn distractor(g: f64, rng: &mut ChaCha8Rng) -> Linear {
    let size = (rng.random_range(2.3..2.9), rng.random_range(2.3..2.9));
    let (lo, hi) = (2.0, g - 2.0);
    let start = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let drift = DISTRACTOR_DRIFT;
    let end = (
        (start.0 + rng.random_range(-drift..drift)).clamp(lo, hi),
        (start.1 + rng.random_range(-drift..drift)).clamp(lo, hi),
    );
    Linear {
        start,
        end,
        size,
        arrive: 1.0,
        depart: 0.0,
        arc: 0.0,
    }
}

const DISTRACTOR_TRIES: usize = 50;
const DISTRACTOR_MARGIN: f64 = 0.5;

fn box_gap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let dx = (a.x_min - b.x_max).max(b.x_min - a.x_max).max(0.0);
    let dy = (a.y_min - b.y_max).max(b.y_min - a.y_max).max(0.0);
    dx.max(dy)
}

fn keeps_clear(d: &Linear, event: &[Linear], n_src: usize) -> bool {
    (0..n_src).all(|s| {
        let u = s as f64 / (n_src - 1).max(1) as f64;
        let b = d.at(u);
        event.iter().all(|e| box_gap(&b, &e.at(u)) >= DISTRACTOR_MARGIN)
    })
}

/// All (subject, verb, object) triples with distinct nouns.
pub fn all_events(config: &WorldConfig) -> Vec<Event> {
    let mut out = Vec::new();
    for s in &config.nouns {
        for v in Verb::ALL {
            for o in &config.nouns {
                if s != o {
                    out.push(Event {
                        subject: s.clone(),
                        verb: v.name().to_string(),
                        object: o.clone(),
                    });
                }
            }
        }
    }
    out
}

/// Generates one video with a random event.
pub fn generate_video(config: &WorldConfig, seed: u64) -> Result<VideoSample> {
    config.validate()?;
    let oracle = FeatureOracle::new(config);
    let events = all_events(config);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xE7E27]));
    let event = events[rng.random_range(0..events.len())].clone();
    Ok(generate_video_with(config, &oracle, seed, &event, format!("vid{seed}"))?.0)
}

/// Generates one video for a given event, returning ground-truth tracks.
pub fn generate_video_with(
    config: &WorldConfig,
    oracle: &FeatureOracle,
    seed: u64,
    event: &Event,
    id: String,
) -> Result<(VideoSample, Tracks)> {
    let noun_id = |n: &str| {
        config
            .nouns
            .iter()
            .position(|x| x == n)
            .ok_or_else(|| Error::Config(format!("unknown noun {n}")))
    };
    let verb = event
        .verb()
        .ok_or_else(|| Error::Config(format!("unknown verb {}", event.verb)))?;
    let (s_id, o_id) = (noun_id(&event.subject)?, noun_id(&event.object)?);
    let g = config.grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5C12]));

    let (subject, object) = script(verb, g, &mut rng);
    let mut paths = vec![subject, object];
    let mut tracks = vec![
        Track { class_id: s_id, role: 0 },
        Track { class_id: o_id, role: 1 },
    ];
    let mut spare: Vec<usize> = (0..config.nouns.len()).filter(|&c| c != s_id && c != o_id).collect();
    spare.shuffle(&mut rng);
    let max_d = config.max_distractors.min(config.n_max - 2).min(spare.len());
    let n_distractors = rng.random_range(0..=max_d);
    let n_src = config.source_frames;
    let mut k = 0;
    for &c in spare.iter().take(n_distractors) {
        // Distractors stay clear of the event pair; give up on one that
        // cannot be placed.
        let placed = (0..DISTRACTOR_TRIES)
            .map(|_| distractor(g, &mut rng))
            .find(|d| keeps_clear(d, &paths[..2], n_src));
        if let Some(d) = placed {
            paths.push(d);
            tracks.push(Track { class_id: c, role: 2 + k });
            k += 1;
        }
    }

    // Visible detections and their oracle features at every source frame.
    let mut source_dets: Vec<Vec<(Track, BoundingBox)>> = Vec::with_capacity(n_src);
    let mut source_feats: Vec<Vec<Array1<f64>>> = Vec::with_capacity(n_src);
    for s in 0..n_src {
        let u = s as f64 / (n_src - 1).max(1) as f64;
        let mut dets: Vec<(Track, BoundingBox)> = paths
            .iter()
            .zip(&tracks)
            .filter_map(|(p, tr)| clip_to_frame(p.at(u), g).map(|b| (*tr, b)))
            .collect();
        // Detector output order carries no identity.
        dets.shuffle(&mut rng);
        let feats = dets
            .iter()
            .map(|(tr, b)| oracle.object_features(tr.class_id, b, mix_seed(&[seed, s as u64, tr.role as u64])))
            .collect();
        source_dets.push(dets);
        source_feats.push(feats);
    }

    let sample_indices = uniform_sample_indices(n_src, config.frames);
    let mut frames = Vec::with_capacity(config.frames);
    let mut gt = Vec::with_capacity(config.frames);
    for (t, &s) in sample_indices.iter().enumerate() {
        let dets = &source_dets[s];
        let boxes: Vec<BoundingBox> = dets.iter().map(|(_, b)| *b).collect();
        let mut feats = Mat::zeros((dets.len(), config.d_obj));
        for (r, f) in source_feats[s].iter().enumerate() {
            feats.row_mut(r).assign(f);
        }
        frames.push(FrameDetections::new(t, &boxes, &feats, config.n_max)?);
        gt.push(dets.iter().take(config.n_max).map(|(tr, _)| tr.role).collect());
    }
    let (f2d, f3d) = oracle.scene_features(
        &source_feats,
        &sample_indices,
        config.scene_noise,
        mix_seed(&[seed, 0x5CE4E]),
    );
    let refs = verb
        .phrases()
        .iter()
        .map(|p| caption(&event.subject, p, &event.object))
        .collect();
    Ok((
        VideoSample {
            id,
            event: event.clone(),
            frames,
            f2d,
            f3d,
            refs,
        },
        gt,
    ))
}

/// `n` videos with events assigned round-robin over a seeded shuffle of
/// all triples, so every triple appears `⌊n / #triples⌋` or one more times.
pub fn generate_corpus(config: &WorldConfig, n: usize) -> Result<Vec<VideoSample>> {
    Ok(generate_corpus_with_tracks(config, n)?
        .into_iter()
        .map(|(v, _)| v)
        .collect())
}

pub fn generate_corpus_with_tracks(config: &WorldConfig, n: usize) -> Result<Vec<(VideoSample, Tracks)>> {
    config.validate()?;
    let oracle = FeatureOracle::new(config);
    let mut events = all_events(config);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0xC0B]));
    events.shuffle(&mut rng);
    (0..n)
        .map(|i| {
            let seed = mix_seed(&[config.seed, i as u64]);
            generate_video_with(config, &oracle, seed, &events[i % events.len()], format!("vid{i:05}"))
        })
        .collect()
}

/// Train / validation / test split by index: 80% / 10% / remainder.
pub fn split_corpus<T: Clone>(samples: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = samples.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    (
        samples[..n_train].to_vec(),
        samples[n_train..n_train + n_val].to_vec(),
        samples[n_train + n_val..].to_vec(),
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    boxes: Vec<[f64; 4]>,
    features: Vec<Vec<f64>>,
    valid: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    event: Event,
    frames: Vec<FrameRecord>,
    f2d: Vec<Vec<f64>>,
    f3d: Vec<Vec<f64>>,
    refs: Vec<String>,
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> std::result::Result<Mat, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(format!("{what}: ragged rows"));
    }
    Array2::from_shape_vec((r, c), rows.concat()).map_err(|e| format!("{what}: {e}"))
}

impl VideoSample {
    fn to_record(&self) -> SampleRecord {
        SampleRecord {
            id: self.id.clone(),
            event: self.event.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameRecord {
                    boxes: f.boxes.iter().map(BoundingBox::to_array).collect(),
                    features: rows(&f.features),
                    valid: f.valid_count,
                })
                .collect(),
            f2d: rows(&self.f2d),
            f3d: rows(&self.f3d),
            refs: self.refs.clone(),
        }
    }

    fn from_record(rec: SampleRecord) -> std::result::Result<Self, String> {
        let frames = rec
            .frames
            .into_iter()
            .enumerate()
            .map(|(t, fr)| {
                if fr.boxes.len() != fr.features.len() {
                    return Err(format!("frame {t}: boxes and features differ in length"));
                }
                if fr.valid > fr.boxes.len() {
                    return Err(format!("frame {t}: valid exceeds slot count"));
                }
                let boxes = fr
                    .boxes
                    .iter()
                    .enumerate()
                    .map(|(j, b)| {
                        if j < fr.valid {
                            BoundingBox {
                                x_min: b[0],
                                y_min: b[1],
                                x_max: b[2],
                                y_max: b[3],
                                is_padding: false,
                            }
                        } else {
                            BoundingBox::padding()
                        }
                    })
                    .collect();
                let f = FrameDetections {
                    t,
                    boxes,
                    features: from_rows(&fr.features, "features")?,
                    valid_count: fr.valid,
                };
                f.validate().map_err(|e| e.to_string())?;
                Ok(f)
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok(Self {
            id: rec.id,
            event: rec.event,
            frames,
            f2d: from_rows(&rec.f2d, "f2d")?,
            f3d: from_rows(&rec.f3d, "f3d")?,
            refs: rec.refs,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("sample serializes")
    }
}

/// One JSON object per line. `serde_json` prints the shortest string that
/// round-trips each `f64`, so values are preserved exactly.
pub fn write_corpus(samples: &[VideoSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", s.to_json_line()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_corpus(path: &Path) -> Result<Vec<VideoSample>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(VideoSample::from_record(rec).map_err(parse_err)?);
    }
    Ok(out)
}

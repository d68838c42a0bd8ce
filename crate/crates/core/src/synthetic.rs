//! Procedural tracking sequences: a textured target moving over a textured
//! background, with optional appearance drift, scale oscillation,
//! occluders and distractor objects. Ground truth is exact by construction.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::{read_boxes, write_boxes, BoundingBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub start: usize,
    pub duration: usize,
    /// Fraction of the target area hidden while the event lasts.
    pub coverage: f64,
}

impl Occlusion {
    pub fn active(&self, t: usize) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub target_size: (f64, f64),
    /// Pixels per frame.
    pub speed: f64,
    /// Std-dev of the per-frame heading change, in radians.
    pub turn: f64,
    /// Std-dev of the per-frame positional jitter, in pixels.
    pub jitter: f64,
    /// Appearance drift per frame in `[0, 1]`: the target morphs into a
    /// fresh appearance every `1/drift` frames.
    pub drift: f64,
    pub scale_amplitude: f64,
    pub scale_period: f64,
    pub occlusions: Vec<Occlusion>,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            length: 120,
            target_size: (24.0, 24.0),
            speed: 1.0,
            turn: 0.1,
            jitter: 0.0,
            drift: 0.0,
            scale_amplitude: 0.0,
            scale_period: 60.0,
            occlusions: Vec::new(),
            distractors: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (tw, th) = self.target_size;
        let max_scale = 1.0 + self.scale_amplitude;
        if self.length == 0 || !(tw > 1.0 && th > 1.0) {
            return Err(Error::Config("synthetic: empty sequence or degenerate target".into()));
        }
        if tw * max_scale + 4.0 > self.width as f64 || th * max_scale + 4.0 > self.height as f64 {
            return Err(Error::Config("synthetic: target does not fit on the canvas".into()));
        }
        if !(0.0..=1.0).contains(&self.drift) || !(0.0..0.5).contains(&self.scale_amplitude) {
            return Err(Error::Config("synthetic: drift must lie in [0, 1], scale amplitude in [0, 0.5)".into()));
        }
        if self.occlusions.iter().any(|o| !(0.0..=1.0).contains(&o.coverage)) {
            return Err(Error::Config("synthetic: occlusion coverage outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Frames with per-frame ground truth.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub truth: Vec<BoundingBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Write `img/0001.png, ...` and `groundtruth_rect.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let img = dir.join("img");
        std::fs::create_dir_all(&img)?;
        for (i, f) in self.frames.iter().enumerate() {
            f.save(&img.join(format!("{:04}.png", i + 1)))?;
        }
        write_boxes(&dir.join("groundtruth_rect.txt"), &self.truth)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let truth = read_boxes(&dir.join("groundtruth_rect.txt"))?;
        let mut paths: Vec<_> = std::fs::read_dir(dir.join("img"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png") || x.eq_ignore_ascii_case("jpg")))
            .collect();
        paths.sort();
        if paths.len() != truth.len() {
            return Err(Error::Data(format!(
                "{}: {} frames but {} ground-truth boxes",
                dir.display(),
                paths.len(),
                truth.len()
            )));
        }
        let frames = paths.iter().map(|p| Frame::load(p)).collect::<Result<Vec<_>>>()?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self { name, frames, truth })
    }
}

const WAVES: usize = 3;

/// Interpolatable appearance of a textured blob.
#[derive(Clone, Debug)]
struct Appearance {
    base: [f64; 3],
    /// Per wave: frequency x, frequency y, phase, amplitude, rgb direction.
    waves: [[f64; 7]; WAVES],
    /// Superellipse exponent: 2 is an ellipse, large is a rectangle.
    exponent: f64,
}

impl Appearance {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let mut waves = [[0.0; 7]; WAVES];
        for w in &mut waves {
            *w = [
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.15..0.35),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
        }
        Self {
            base: [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)],
            waves,
            exponent: rng.random_range(2.0..6.0),
        }
    }

    fn lerp(&self, other: &Self, t: f64) -> Self {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        let mut out = self.clone();
        for c in 0..3 {
            out.base[c] = mix(self.base[c], other.base[c]);
        }
        for (w, o) in out.waves.iter_mut().zip(&other.waves) {
            for (a, b) in w.iter_mut().zip(o) {
                *a = mix(*a, *b);
            }
        }
        out.exponent = mix(self.exponent, other.exponent);
        out
    }

    /// Colour at local coordinates `(u, v) ∈ [0, 1]²`, or `None` outside the shape.
    fn shade(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let (x, y) = ((2.0 * u - 1.0).abs(), (2.0 * v - 1.0).abs());
        if x.powf(self.exponent) + y.powf(self.exponent) > 1.0 {
            return None;
        }
        let mut c = self.base;
        for w in &self.waves {
            let s = w[3] * (2.0 * PI * (w[0] * u + w[1] * v) + w[2]).sin();
            for k in 0..3 {
                c[k] += s * w[4 + k];
            }
        }
        Some(c)
    }
}

/// Position and heading of a moving object, reflected at the canvas border.
struct Mover {
    x: f64,
    y: f64,
    heading: f64,
}

impl Mover {
    fn new<R: Rng>(rng: &mut R, spec: &SyntheticSpec, half: (f64, f64)) -> Self {
        let x = rng.random_range(half.0 + 2.0..spec.width as f64 - half.0 - 2.0);
        let y = rng.random_range(half.1 + 2.0..spec.height as f64 - half.1 - 2.0);
        Self {
            x,
            y,
            heading: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn advance<R: Rng>(&mut self, rng: &mut R, speed: f64, turn: f64, bounds: (f64, f64, f64, f64)) {
        if turn > 0.0 {
            self.heading += Normal::new(0.0, turn).unwrap().sample(rng);
        }
        let (mut dx, mut dy) = (speed * self.heading.cos(), speed * self.heading.sin());
        let (x0, y0, x1, y1) = bounds;
        let nx = self.x + dx;
        if nx < x0 || nx > x1 {
            dx = -dx;
        }
        let ny = self.y + dy;
        if ny < y0 || ny > y1 {
            dy = -dy;
        }
        self.heading = dy.atan2(dx);
        self.x = (self.x + dx).clamp(x0, x1);
        self.y = (self.y + dy).clamp(y0, y1);
    }
}

fn background<R: Rng>(rng: &mut R, w: usize, h: usize) -> Vec<[f64; 3]> {
    let base = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let waves: Vec<[f64; 7]> = (0..5)
        .map(|_| {
            [
                rng.random_range(-0.08..0.08),
                rng.random_range(-0.08..0.08),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.05..0.15),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let grain = Normal::new(0.0, 0.03).unwrap();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut c = base;
            for wv in &waves {
                let s = wv[3] * (2.0 * PI * (wv[0] * x as f64 + wv[1] * y as f64) + wv[2]).sin();
                for k in 0..3 {
                    c[k] += s * wv[4 + k];
                }
            }
            let n = grain.sample(rng);
            out.push(c.map(|v| v + n));
        }
    }
    out
}

fn paint(canvas: &mut [[f64; 3]], w: usize, h: usize, bbox: &BoundingBox, look: &Appearance) {
    let (x0, y0, bw, bh) = bbox.corner();
    let xs = (x0.floor().max(0.0) as usize)..((x0 + bw).ceil().min(w as f64) as usize);
    let ys = (y0.floor().max(0.0) as usize)..((y0 + bh).ceil().min(h as f64) as usize);
    for y in ys {
        let v = (y as f64 + 0.5 - y0) / bh;
        if !(0.0..=1.0).contains(&v) {
            continue;
        }
        for x in xs.clone() {
            let u = (x as f64 + 0.5 - x0) / bw;
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            if let Some(c) = look.shade(u, v) {
                canvas[y * w + x] = c;
            }
        }
    }
}

/// The occluder rectangle for an event: a full-height band over the left
/// `coverage` part of the target box.
pub fn occluder_rect(target: &BoundingBox, coverage: f64) -> (f64, f64, f64, f64) {
    let (x, y, w, h) = target.corner();
    (x - 1.0, y - 1.0, w * coverage + 1.0, h + 2.0)
}

fn paint_occluder(canvas: &mut [[f64; 3]], w: usize, h: usize, rect: (f64, f64, f64, f64), color: [f64; 3]) {
    let (x0, y0, rw, rh) = rect;
    for y in 0..h {
        let cy = y as f64 + 0.5;
        if cy < y0 || cy > y0 + rh {
            continue;
        }
        for x in 0..w {
            let cx = x as f64 + 0.5;
            if cx >= x0 && cx <= x0 + rw {
                let stripe = if (x / 3 + y / 3) % 2 == 0 { 0.08 } else { -0.08 };
                canvas[y * w + x] = color.map(|c| c + stripe);
            }
        }
    }
}

fn to_frame(canvas: &[[f64; 3]], w: usize, h: usize) -> Frame {
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, c) in canvas.iter().enumerate() {
        let px = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(px));
    }
    Frame::new(img)
}

/// Render a sequence; the same spec always yields identical bytes.
pub fn generate(spec: &SyntheticSpec, name: impl Into<String>) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let bg = background(&mut rng, w, h);

    let max_scale = 1.0 + spec.scale_amplitude;
    let half = (spec.target_size.0 * max_scale / 2.0, spec.target_size.1 * max_scale / 2.0);
    let bounds = (half.0 + 1.0, half.1 + 1.0, w as f64 - half.0 - 1.0, h as f64 - half.1 - 1.0);
    let mut target = Mover::new(&mut rng, spec, half);
    let keyframes: Vec<Appearance> = {
        let count = (spec.drift * spec.length as f64).ceil() as usize + 2;
        (0..count).map(|_| Appearance::random(&mut rng)).collect()
    };
    let scale_phase = rng.random_range(0.0..2.0 * PI);
    let mut others: Vec<(Mover, Appearance, (f64, f64))> = (0..spec.distractors)
        .map(|_| {
            let size = (
                spec.target_size.0 * rng.random_range(0.8..1.2),
                spec.target_size.1 * rng.random_range(0.8..1.2),
            );
            let m = Mover::new(&mut rng, spec, (size.0 / 2.0, size.1 / 2.0));
            (m, Appearance::random(&mut rng), size)
        })
        .collect();
    let occluder_color = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let jitter = (spec.jitter > 0.0).then(|| Normal::new(0.0, spec.jitter).unwrap());
    let noise = Normal::new(0.0, 0.01).unwrap();

    let mut frames = Vec::with_capacity(spec.length);
    let mut truth = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        if t > 0 {
            target.advance(&mut rng, spec.speed, spec.turn, bounds);
            for (m, _, size) in &mut others {
                let b = (size.0 / 2.0 + 1.0, size.1 / 2.0 + 1.0, w as f64 - size.0 / 2.0 - 1.0, h as f64 - size.1 / 2.0 - 1.0);
                m.advance(&mut rng, spec.speed, spec.turn.max(0.1), b);
            }
        }
        let (jx, jy) = match &jitter {
            Some(n) => (n.sample(&mut rng), n.sample(&mut rng)),
            None => (0.0, 0.0),
        };
        let s = 1.0 + spec.scale_amplitude * (2.0 * PI * t as f64 / spec.scale_period + scale_phase).sin();
        let cx = (target.x + jx).clamp(bounds.0, bounds.2);
        let cy = (target.y + jy).clamp(bounds.1, bounds.3);
        let bbox = BoundingBox::new(cx, cy, spec.target_size.0 * s, spec.target_size.1 * s);

        let phase = spec.drift * t as f64;
        let k = phase.floor() as usize;
        let look = keyframes[k].lerp(&keyframes[k + 1], phase - k as f64);

        let mut canvas = bg.clone();
        for (m, a, size) in &others {
            paint(&mut canvas, w, h, &BoundingBox::new(m.x, m.y, size.0, size.1), a);
        }
        paint(&mut canvas, w, h, &bbox, &look);
        for o in spec.occlusions.iter().filter(|o| o.active(t)) {
            paint_occluder(&mut canvas, w, h, occluder_rect(&bbox, o.coverage), occluder_color);
        }
        for c in &mut canvas {
            let n = noise.sample(&mut rng);
            *c = c.map(|v| v + n);
        }
        frames.push(to_frame(&canvas, w, h));
        truth.push(bbox);
    }
    Ok(Sequence {
        name: name.into(),
        frames,
        truth,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Easy,
    Drift,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Drift, Tier::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Drift => "drift",
            Tier::Hard => "hard",
        }
    }

    /// Tier of a suite seed: 0–6 easy, 7–13 drift, 14–19 hard.
    pub fn of_seed(seed: u64) -> Tier {
        match seed % 20 {
            0..=6 => Tier::Easy,
            7..=13 => Tier::Drift,
            _ => Tier::Hard,
        }
    }

    /// Tier encoded in a sequence name such as `drift_09`.
    pub fn of_name(name: &str) -> Option<Tier> {
        Self::ALL.into_iter().find(|t| name.starts_with(t.name()))
    }
}

pub const SUITE_SEQUENCES: u64 = 20;
pub const SUITE_LENGTH: usize = 120;

/// Spec for seed `seed` of a tier. Parameters are drawn from the seed, so
/// any seed gives a reproducible sequence of that tier's character.
pub fn tier_spec(tier: Tier, seed: u64, length: usize) -> SyntheticSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5);
    let side = |rng: &mut ChaCha8Rng| rng.random_range(20.0..28.0);
    let target_size = (side(&mut rng), side(&mut rng));
    let occlusion = |rng: &mut ChaCha8Rng, coverage: (f64, f64)| {
        let duration = rng.random_range(4..9).min(length / 4);
        Occlusion {
            start: rng.random_range(length / 4..(3 * length / 4).max(length / 4 + 1)),
            duration,
            coverage: rng.random_range(coverage.0..coverage.1),
        }
    };
    let base = SyntheticSpec {
        length,
        target_size,
        seed,
        ..SyntheticSpec::default()
    };
    match tier {
        Tier::Easy => SyntheticSpec {
            speed: rng.random_range(0.5..1.5),
            turn: 0.05,
            jitter: 0.2,
            ..base
        },
        Tier::Drift => SyntheticSpec {
            speed: rng.random_range(1.0..2.0),
            turn: 0.1,
            jitter: 0.3,
            drift: rng.random_range(0.02..0.04),
            scale_amplitude: 0.1,
            distractors: 1,
            occlusions: vec![occlusion(&mut rng, (0.3, 0.5))],
            ..base
        },
        Tier::Hard => SyntheticSpec {
            speed: rng.random_range(2.0..3.0),
            turn: 0.15,
            jitter: 0.8,
            drift: rng.random_range(0.02..0.04),
            scale_amplitude: 0.2,
            distractors: 2,
            occlusions: vec![occlusion(&mut rng, (0.4, 0.7)), occlusion(&mut rng, (0.4, 0.7))],
            ..base
        },
    }
}

/// The fixed evaluation suite: 20 sequences of 120 frames, seeds 0–19.
pub fn suite_specs() -> Vec<(String, SyntheticSpec)> {
    (0..SUITE_SEQUENCES)
        .map(|seed| {
            let tier = Tier::of_seed(seed);
            (format!("{}_{seed:02}", tier.name()), tier_spec(tier, seed, SUITE_LENGTH))
        })
        .collect()
}

pub fn generate_suite() -> Result<Vec<Sequence>> {
    suite_specs().iter().map(|(n, s)| generate(s, n.clone())).collect()
}

/// Training videos drawn from the same tier mix as the suite but from a
/// disjoint seed range.
pub fn training_set(count: usize, length: usize, seed: u64) -> Result<Vec<Sequence>> {
    (0..count as u64)
        .map(|i| {
            let s = 1_000 + seed.wrapping_mul(10_007) + i;
            let tier = Tier::ALL[(i % 3) as usize];
            generate(&tier_spec(tier, s, length), format!("train_{}_{i:04}", tier.name()))
        })
        .collect()
}

pub fn save_suite(dir: &Path, seqs: &[Sequence]) -> Result<()> {
    for s in seqs {
        s.save(&dir.join(&s.name))?;
    }
    Ok(())
}

/// Load every sequence directory under `dir`, sorted by name.
pub fn load_suite(dir: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth_rect.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("{}: no sequences found", dir.display())));
    }
    dirs.iter().map(|d| Sequence::load(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(tier: Tier, seed: u64) -> SyntheticSpec {
        tier_spec(tier, seed, 30)
    }

    #[test]
    fn static_target_has_constant_box() {
        let spec = SyntheticSpec {
            speed: 0.0,
            turn: 0.0,
            length: 10,
            ..SyntheticSpec::default()
        };
        let s = generate(&spec, "still").unwrap();
        assert!(s.truth.iter().all(|b| *b == s.truth[0]));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = short(Tier::Hard, 3);
        let a = generate(&spec, "a").unwrap();
        let b = generate(&spec, "b").unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.image().as_raw(), y.image().as_raw());
        }
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn targets_stay_inside_canvas() {
        for seed in 0..20 {
            let s = generate(&tier_spec(Tier::of_seed(seed), seed, 60), "x").unwrap();
            for b in &s.truth {
                let (x, y, w, h) = b.corner();
                assert!(x >= 0.0 && y >= 0.0 && x + w <= 128.0 && y + h <= 128.0, "{b:?}");
            }
        }
    }

    #[test]
    fn occluder_covers_requested_fraction() {
        let b = BoundingBox::new(50.0, 60.0, 20.0, 24.0);
        let (x, y, w, h) = occluder_rect(&b, 0.4);
        let (bx, by, bw, bh) = b.corner();
        let ix = (x + w).min(bx + bw) - x.max(bx);
        let iy = (y + h).min(by + bh) - y.max(by);
        assert!(ix * iy >= 0.4 * b.area());
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = SyntheticSpec {
            drift: 1.5,
            ..SyntheticSpec::default()
        };
        assert!(generate(&bad, "x").is_err());
        let big = SyntheticSpec {
            target_size: (200.0, 10.0),
            ..SyntheticSpec::default()
        };
        assert!(generate(&big, "x").is_err());
    }

    #[test]
    fn tiers_follow_seed_ranges() {
        let names: Vec<_> = suite_specs().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 20);
        assert_eq!(names[0], "easy_00");
        assert_eq!(names[7], "drift_07");
        assert_eq!(names[19], "hard_19");
        assert_eq!(Tier::of_name("drift_10"), Some(Tier::Drift));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&short(Tier::Drift, 8), "drift_08").unwrap();
        save_suite(dir.path(), std::slice::from_ref(&s)).unwrap();
        let back = load_suite(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].name, "drift_08");
        for (a, b) in s.frames.iter().zip(&back[0].frames) {
            assert_eq!(a.image().as_raw(), b.image().as_raw());
        }
        for (a, b) in s.truth.iter().zip(&back[0].truth) {
            assert!(a.iou(b) > 1.0 - 1e-9);
        }
    }
}

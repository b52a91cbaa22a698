//! Procedural labelled videos of textured shapes moving over a textured
//! background, and the on-disk dataset layout.
//!
//! Shapes are rasterized exactly at pixel centres (no anti-aliasing), so every
//! painted pixel belongs to exactly one object or to the background. Objects
//! are painted in id order; a higher id occludes a lower one.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{read_gten_file, read_pgm, write_gten_file, write_pgm, DType, IndexMask};
use crate::kv;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Ellipse,
    Rectangle,
    Triangle,
    Annulus,
    Cross,
    Star,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] = [
        ShapeClass::Ellipse,
        ShapeClass::Rectangle,
        ShapeClass::Triangle,
        ShapeClass::Annulus,
        ShapeClass::Cross,
        ShapeClass::Star,
    ];
    pub const SEEN: [ShapeClass; 4] = [
        ShapeClass::Ellipse,
        ShapeClass::Rectangle,
        ShapeClass::Triangle,
        ShapeClass::Annulus,
    ];
    pub const UNSEEN: [ShapeClass; 2] = [ShapeClass::Cross, ShapeClass::Star];

    pub fn is_seen(self) -> bool {
        Self::SEEN.contains(&self)
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Ellipse => "ellipse",
            ShapeClass::Rectangle => "rectangle",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Annulus => "annulus",
            ShapeClass::Cross => "cross",
            ShapeClass::Star => "star",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Flat,
    Gradient,
    Noise,
}

/// One object's geometry, appearance and motion.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    /// Outer radius in pixels.
    pub radius: f64,
    /// Minor/major extent ratio, used by ellipses and rectangles.
    pub aspect: f64,
    pub color: [f64; 3],
    pub texture: Texture,
    /// Centre in frame 0 (pixels, x then y).
    pub position: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub angle: f64,
    /// Radians per frame.
    pub rotation: f64,
    /// Seed of the noise texture.
    pub noise_seed: u64,
}

impl ShapeSpec {
    /// Centre and angle at frame `t`. Motion reflects off the canvas edges so
    /// the centre stays inside.
    pub fn pose(&self, t: usize, height: usize, width: usize) -> ([f64; 2], f64) {
        let reflect = |p0: f64, v: f64, extent: f64| {
            let p = p0 + v * t as f64;
            let period = 2.0 * extent;
            let m = p.rem_euclid(period);
            if m <= extent {
                m
            } else {
                period - m
            }
        };
        (
            [
                reflect(self.position[0], self.velocity[0], width as f64),
                reflect(self.position[1], self.velocity[1], height as f64),
            ],
            self.angle + self.rotation * t as f64,
        )
    }

    /// Whether the point `(u, v)` in shape-local coordinates lies inside.
    fn contains_local(&self, u: f64, v: f64) -> bool {
        let r = self.radius;
        match self.class {
            ShapeClass::Ellipse => (u / r).powi(2) + (v / (r * self.aspect)).powi(2) <= 1.0,
            ShapeClass::Rectangle => u.abs() <= r * 0.8 && v.abs() <= r * 0.8 * self.aspect,
            ShapeClass::Triangle => {
                // Equilateral triangle inscribed in the radius-r circle.
                let half = std::f64::consts::FRAC_PI_3;
                (0..3).all(|k| {
                    let a = 2.0 * half * k as f64 - std::f64::consts::FRAC_PI_2;
                    u * a.cos() + v * a.sin() <= r * 0.5
                })
            }
            ShapeClass::Annulus => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= (0.5 * r).powi(2)
            }
            ShapeClass::Cross => {
                let arm = 0.3 * r;
                (u.abs() <= r && v.abs() <= arm) || (v.abs() <= r && u.abs() <= arm)
            }
            ShapeClass::Star => {
                let rho = (u * u + v * v).sqrt();
                if rho > r {
                    return false;
                }
                // Five-pointed star: boundary radius varies linearly in angle
                // between outer tips and inner notches.
                let sector = 2.0 * std::f64::consts::PI / 5.0;
                let theta = v.atan2(u).rem_euclid(sector);
                let frac = (theta / sector * 2.0 - 1.0).abs();
                let boundary = 0.45 * r + (r - 0.45 * r) * frac;
                rho <= boundary
            }
        }
    }

    fn color_at(&self, u: f64, v: f64) -> [f64; 3] {
        let shade = match self.texture {
            Texture::Flat => 0.0,
            Texture::Gradient => 0.25 * u / self.radius,
            Texture::Noise => 0.15 * (hash_unit(self.noise_seed, u.floor() as i64, v.floor() as i64) - 0.5),
        };
        self.color.map(|c| (c + shade).clamp(0.0, 1.0))
    }
}

/// Deterministic value in `[0, 1)` from a seed and integer coordinates.
fn hash_unit(seed: u64, a: i64, b: i64) -> f64 {
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Direction of the colour gradient (radians).
    pub direction: f64,
    /// Side of the square noise blocks, in pixels.
    pub block: usize,
    pub noise_seed: u64,
}

impl Background {
    fn color_at(&self, x: f64, y: f64, height: usize, width: usize) -> [f64; 3] {
        let (c, s) = (self.direction.cos(), self.direction.sin());
        let span = (height.max(width)) as f64;
        let t = (0.5 + (x * c + y * s) / (span * 1.5)).clamp(0.0, 1.0);
        let n = 0.12
            * (hash_unit(
                self.noise_seed,
                (x as usize / self.block) as i64,
                (y as usize / self.block) as i64,
            ) - 0.5);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            out[ch] = (self.color_a[ch] * (1.0 - t) + self.color_b[ch] * t + n).clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Classes objects are drawn from.
    pub classes: Vec<ShapeClass>,
    /// Probability that a multi-object sequence repeats one object's class.
    pub distractor_prob: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    pub max_speed: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 64,
            width: 64,
            frames: 8,
            min_objects: 1,
            max_objects: 5,
            classes: ShapeClass::SEEN.to_vec(),
            distractor_prob: 0.6,
            min_radius: 7.0,
            max_radius: 14.0,
            max_speed: 2.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::invalid(format!(
                "frame size {}×{} must be positive and divisible by 4",
                self.height, self.width
            )));
        }
        if self.frames < 2 {
            return Err(Error::invalid("sequences need at least two frames"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 255 {
            return Err(Error::invalid("object count range must satisfy 1 ≤ min ≤ max ≤ 255"));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("no shape classes to draw from"));
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            return Err(Error::invalid("radius range must satisfy 1 ≤ min ≤ max"));
        }
        if 2.0 * self.max_radius > self.height.min(self.width) as f64 {
            return Err(Error::invalid("objects larger than the canvas"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) || !(self.max_speed >= 0.0) {
            return Err(Error::invalid("distractor probability or speed out of range"));
        }
        Ok(())
    }
}

/// A labelled video: frames `H×W×3` in `[0, 1]` (exactly representable in
/// 32 bits) and index masks with ids `1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<Tensor>,
    pub masks: Vec<IndexMask>,
    /// Class of object `m` at index `m - 1`.
    pub classes: Vec<ShapeClass>,
    pub seed: u64,
}

impl SequenceSample {
    pub fn num_objects(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `start..start + n`.
    pub fn snippet(&self, start: usize, n: usize) -> Result<SequenceSample> {
        if n == 0 || start + n > self.len() {
            return Err(Error::invalid(format!(
                "snippet {start}..{} outside a {}-frame sequence",
                start + n,
                self.len()
            )));
        }
        Ok(SequenceSample {
            frames: self.frames[start..start + n].to_vec(),
            masks: self.masks[start..start + n].to_vec(),
            classes: self.classes.clone(),
            seed: self.seed,
        })
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn random_shape(rng: &mut ChaCha8Rng, class: ShapeClass, cfg: &GenConfig) -> ShapeSpec {
    let radius = rng.gen_range(cfg.min_radius..=cfg.max_radius);
    let texture = *[Texture::Flat, Texture::Gradient, Texture::Noise].choose(rng).expect("nonempty");
    let speed = rng.gen_range(0.0..=cfg.max_speed);
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    ShapeSpec {
        class,
        radius,
        aspect: rng.gen_range(0.55..1.0),
        color: random_color(rng),
        texture,
        position: [
            rng.gen_range(0.0..cfg.width as f64),
            rng.gen_range(0.0..cfg.height as f64),
        ],
        velocity: [speed * heading.cos(), speed * heading.sin()],
        angle: rng.gen_range(0.0..std::f64::consts::TAU),
        rotation: rng.gen_range(-0.1..0.1),
        noise_seed: rng.gen(),
    }
}

/// Minimum visible pixels of every object in frame 0.
fn min_visible(cfg: &GenConfig) -> usize {
    (cfg.min_radius * cfg.min_radius).round() as usize
}

/// Renders one frame: the image rounded to 32-bit values and its index mask.
pub fn render(shapes: &[ShapeSpec], background: &Background, t: usize, height: usize, width: usize) -> (Tensor, IndexMask) {
    let poses: Vec<([f64; 2], f64)> = shapes.iter().map(|s| s.pose(t, height, width)).collect();
    let mut img = Vec::with_capacity(height * width * 3);
    let mut labels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = background.color_at(px, py, height, width);
            let mut label = 0u8;
            for (m, (shape, (centre, angle))) in shapes.iter().zip(&poses).enumerate() {
                let (dx, dy) = (px - centre[0], py - centre[1]);
                let (c, s) = (angle.cos(), angle.sin());
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if shape.contains_local(u, v) {
                    color = shape.color_at(u, v);
                    label = (m + 1) as u8;
                }
            }
            img.extend(color.iter().map(|&c| f64::from(c as f32)));
            labels.push(label);
        }
    }
    (
        Tensor::new(vec![height, width, 3], img).expect("frame dimensions"),
        IndexMask::new(height, width, labels).expect("mask dimensions"),
    )
}

/// Deterministic sequence from `seed`. Object placement is redrawn until every
/// object shows at least `min_radius²` pixels in frame 0.
pub fn generate(seed: u64, cfg: &GenConfig) -> Result<SequenceSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut classes: Vec<ShapeClass> = (0..m).map(|_| *cfg.classes.choose(&mut rng).expect("nonempty")).collect();
    if m >= 2 && rng.gen_bool(cfg.distractor_prob) {
        let (a, b) = (rng.gen_range(0..m), rng.gen_range(0..m - 1));
        let b = if b >= a { b + 1 } else { b };
        classes[b] = classes[a];
    }
    let background = Background {
        color_a: random_color(&mut rng),
        color_b: random_color(&mut rng),
        direction: rng.gen_range(0.0..std::f64::consts::TAU),
        block: rng.gen_range(2..=6),
        noise_seed: rng.gen(),
    };
    let need = min_visible(cfg);
    for _ in 0..1000 {
        let shapes: Vec<ShapeSpec> = classes.iter().map(|&c| random_shape(&mut rng, c, cfg)).collect();
        let (_, mask0) = render(&shapes, &background, 0, cfg.height, cfg.width);
        if (1..=m).all(|id| mask0.count(id as u8) >= need) {
            let (frames, masks) = (0..cfg.frames)
                .map(|t| render(&shapes, &background, t, cfg.height, cfg.width))
                .unzip();
            return Ok(SequenceSample {
                frames,
                masks,
                classes,
                seed,
            });
        }
    }
    Err(Error::invalid("could not place objects visibly; canvas too crowded"))
}

/// Dataset build parameters, read from a `key=value` spec file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub train_frames: usize,
    pub val_frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub distractor_prob: f64,
    pub max_speed: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            train_count: 300,
            val_count: 40,
            train_frames: 8,
            val_frames: 16,
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 5,
            distractor_prob: 0.6,
            max_speed: 2.5,
        }
    }
}

impl DatasetSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = DatasetSpec::default();
        for e in kv::parse(text)? {
            match e.key.as_str() {
                "seed" => s.seed = kv::value(&e)?,
                "train_count" => s.train_count = kv::value(&e)?,
                "val_count" => s.val_count = kv::value(&e)?,
                "train_frames" => s.train_frames = kv::value(&e)?,
                "val_frames" => s.val_frames = kv::value(&e)?,
                "height" => s.height = kv::value(&e)?,
                "width" => s.width = kv::value(&e)?,
                "min_objects" => s.min_objects = kv::value(&e)?,
                "max_objects" => s.max_objects = kv::value(&e)?,
                "distractor_prob" => s.distractor_prob = kv::value(&e)?,
                "max_speed" => s.max_speed = kv::value(&e)?,
                _ => return Err(kv::unknown_key(&e)),
            }
        }
        s.gen_config(Split::Train)?.validate()?;
        s.gen_config(Split::Val)?.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        format!(
            "seed={}\ntrain_count={}\nval_count={}\ntrain_frames={}\nval_frames={}\nheight={}\nwidth={}\nmin_objects={}\nmax_objects={}\ndistractor_prob={}\nmax_speed={}\n",
            self.seed,
            self.train_count,
            self.val_count,
            self.train_frames,
            self.val_frames,
            self.height,
            self.width,
            self.min_objects,
            self.max_objects,
            self.distractor_prob,
            self.max_speed
        )
    }

    /// Training draws from seen classes only; validation from all classes.
    pub fn gen_config(&self, split: Split) -> Result<GenConfig> {
        let (frames, classes) = match split {
            Split::Train => (self.train_frames, ShapeClass::SEEN.to_vec()),
            Split::Val => (self.val_frames, ShapeClass::ALL.to_vec()),
        };
        let short = self.height.min(self.width) as f64;
        Ok(GenConfig {
            height: self.height,
            width: self.width,
            frames,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            classes,
            distractor_prob: self.distractor_prob,
            min_radius: (short * 7.0 / 64.0).max(1.0),
            max_radius: short * 14.0 / 64.0,
            max_speed: self.max_speed,
        })
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
        }
    }

    /// Per-sequence seeds of a split, derived from the dataset seed.
    pub fn sequence_seeds(&self, split: Split) -> Vec<u64> {
        let stream = match split {
            Split::Train => 1,
            Split::Val => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (0..self.count(split)).map(|_| rng.gen()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

pub fn sequence_id(index: usize) -> String {
    format!("seq_{index:04}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn manifest_text(s: &SequenceSample) -> String {
    let classes: Vec<&str> = s.classes.iter().map(|c| c.name()).collect();
    format!(
        "n={}\nM={}\nclasses={}\nseed={}\n",
        s.len(),
        s.num_objects(),
        classes.join(","),
        s.seed
    )
}

/// Writes one sequence directory: frames, masks and manifest.
pub fn write_sequence(dir: &Path, s: &SequenceSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, (frame, mask)) in s.frames.iter().zip(&s.masks).enumerate() {
        write_gten_file(&dir.join(format!("frame_{t:04}.gten")), frame, DType::F32)?;
        write_pgm(&dir.join(format!("mask_{t:04}.pgm")), mask)?;
    }
    write_text(&dir.join("manifest.txt"), &manifest_text(s))
}

pub fn read_sequence(dir: &Path) -> Result<SequenceSample> {
    let path = dir.join("manifest.txt");
    let entries = kv::parse(&read_text(&path)?)?;
    let get = |key: &str| {
        entries
            .iter()
            .find(|e| e.key == key)
            .ok_or_else(|| Error::Format(format!("{}: missing `{key}`", path.display())))
    };
    let n: usize = kv::value(get("n")?)?;
    let m: usize = kv::value(get("M")?)?;
    let seed: u64 = kv::value(get("seed")?)?;
    let classes = get("classes")?
        .value
        .split(',')
        .filter(|c| !c.is_empty())
        .map(ShapeClass::from_str)
        .collect::<Result<Vec<_>>>()?;
    if classes.len() != m {
        return Err(Error::Format(format!(
            "{}: {} classes for {m} objects",
            path.display(),
            classes.len()
        )));
    }
    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for t in 0..n {
        frames.push(read_gten_file(&dir.join(format!("frame_{t:04}.gten")))?);
        masks.push(read_pgm(&dir.join(format!("mask_{t:04}.pgm")))?);
    }
    Ok(SequenceSample {
        frames,
        masks,
        classes,
        seed,
    })
}

/// Generates both splits under `root/<split>/<seq_id>/` and records the spec
/// in `root/spec.txt`. Returns the number of sequences written.
pub fn build_dataset(spec: &DatasetSpec, root: &Path) -> Result<usize> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_text(&root.join("spec.txt"), &spec.to_text())?;
    let mut written = 0;
    for split in [Split::Train, Split::Val] {
        let cfg = spec.gen_config(split)?;
        let dir = root.join(split.name());
        for (i, seed) in spec.sequence_seeds(split).into_iter().enumerate() {
            let seq_dir = dir.join(sequence_id(i));
            if seq_dir.exists() {
                return Err(Error::invalid(format!(
                    "sequence directory {} already exists",
                    seq_dir.display()
                )));
            }
            write_sequence(&seq_dir, &generate(seed, &cfg)?)?;
            written += 1;
        }
    }
    Ok(written)
}

/// A sequence loaded from disk together with its directory name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedSequence {
    pub id: String,
    pub sample: SequenceSample,
}

/// Loads every sequence of a split, sorted by sequence id.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<NamedSequence>> {
    let dir = root.join(split.name());
    let mut ids: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
        .collect::<Result<Vec<_>>>()?;
    ids.retain(|p| p.is_dir());
    ids.sort();
    ids.iter()
        .map(|p| {
            Ok(NamedSequence {
                id: p.file_name().expect("directory entry").to_string_lossy().into_owned(),
                sample: read_sequence(p)?,
            })
        })
        .collect()
}

//! Synthetic moving-shapes videos with exact instance masks.
//!
//! Objects are hard-edged discs, squares and triangles moving linearly and bouncing
//! off the frame borders. Label 0 is background; object `k` (0-based) carries label
//! `k + 1` in every frame. Later objects are drawn on top of earlier ones.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SLTV";
pub const VERSION: u32 = 1;

/// Largest velocity component, in pixels per frame.
pub const MAX_SPEED: f64 = 2.5;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = DatagenError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    /// Whether the offset `(dx, dy)` from the object center lies inside a shape of
    /// half-extent `size`. `dy` grows downwards.
    pub fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        match self {
            ShapeKind::Disc => dx * dx + dy * dy <= size * size,
            ShapeKind::Square => dx.abs() <= size && dy.abs() <= size,
            // Apex at the top, base at the bottom.
            ShapeKind::Triangle => dy.abs() <= size && dx.abs() <= 0.5 * (dy + size),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    /// RGB in `[0, 1]`, quantized to multiples of 1/255.
    pub color: [f32; 3],
    /// Center `(x, y)` in pixels at frame 0.
    pub position: [f64; 2],
    /// Displacement `(dx, dy)` per frame in pixels.
    pub velocity: [f64; 2],
    /// Radius (disc) or half side length.
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub background: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            frames: 4,
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatagenError::Config(m.to_string()));
        if self.height < 16 || self.width < 16 {
            return bad("frame height and width must be at least 16");
        }
        if self.frames < 1 {
            return bad("at least one frame is required");
        }
        if self.batch < 1 {
            return bad("batch must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.max_objects > u16::MAX as usize - 1 {
            return bad("too many objects");
        }
        Ok(())
    }
}

/// Frames and ground-truth masks for `batch` videos.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch {
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `B×T×H×W×3`, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// `B×T×H×W`, 0 = background.
    pub masks: Vec<u16>,
}

impl VideoBatch {
    fn frame_pixels(&self) -> usize {
        self.height * self.width
    }

    /// RGB data of frame `t` of video `b` (`H×W×3`).
    pub fn frame(&self, b: usize, t: usize) -> &[f32] {
        let n = self.frame_pixels() * 3;
        let start = (b * self.frames + t) * n;
        &self.pixels[start..start + n]
    }

    /// Mask of frame `t` of video `b` (`H×W`).
    pub fn mask(&self, b: usize, t: usize) -> &[u16] {
        let n = self.frame_pixels();
        let start = (b * self.frames + t) * n;
        &self.masks[start..start + n]
    }

    /// Masks of all frames of video `b` (`T×H×W`).
    pub fn video_masks(&self, b: usize) -> &[u16] {
        let n = self.frame_pixels() * self.frames;
        &self.masks[b * n..(b + 1) * n]
    }

    /// Frames of video `b` as separate `H×W×3` slices.
    pub fn video_frames(&self, b: usize) -> Vec<&[f32]> {
        (0..self.frames).map(|t| self.frame(b, t)).collect()
    }

    /// Videos selected by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> VideoBatch {
        let (fp, mp) = (self.frame_pixels() * 3 * self.frames, self.frame_pixels() * self.frames);
        let mut out = VideoBatch {
            batch: indices.len(),
            frames: self.frames,
            height: self.height,
            width: self.width,
            pixels: Vec::with_capacity(indices.len() * fp),
            masks: Vec::with_capacity(indices.len() * mp),
        };
        for &b in indices {
            out.pixels.extend_from_slice(&self.pixels[b * fp..(b + 1) * fp]);
            out.masks.extend_from_slice(&self.masks[b * mp..(b + 1) * mp]);
        }
        out
    }

    /// Stack several batches with identical frame geometry.
    pub fn concat(parts: &[VideoBatch]) -> Result<VideoBatch> {
        let first = parts
            .first()
            .ok_or_else(|| DatagenError::Format("no batches to concatenate".into()))?;
        let mut out = VideoBatch {
            batch: 0,
            frames: first.frames,
            height: first.height,
            width: first.width,
            pixels: Vec::new(),
            masks: Vec::new(),
        };
        for p in parts {
            if (p.frames, p.height, p.width) != (out.frames, out.height, out.width) {
                return Err(DatagenError::Format(format!(
                    "geometry mismatch: {}x{}x{} vs {}x{}x{}",
                    p.frames, p.height, p.width, out.frames, out.height, out.width
                )));
            }
            out.batch += p.batch;
            out.pixels.extend_from_slice(&p.pixels);
            out.masks.extend_from_slice(&p.masks);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + self.pixels.len() + 2 * self.masks.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.batch, self.frames, self.height, self.width] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend(self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        for m in &self.masks {
            buf.extend_from_slice(&m.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<VideoBatch> {
        let fmt = |m: String| DatagenError::Format(m);
        if bytes.len() < 24 {
            return Err(fmt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fmt(format!("bad magic {:?}", &bytes[0..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let (b, t, h, w) = (word(8) as usize, word(12) as usize, word(16) as usize, word(20) as usize);
        let n = b
            .checked_mul(t)
            .and_then(|x| x.checked_mul(h))
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| fmt("header dimensions overflow".into()))?;
        let expected = 24 + 3 * n + 2 * n;
        if bytes.len() != expected {
            return Err(fmt(format!(
                "expected {expected} bytes for {b}x{t}x{h}x{w}, found {}",
                bytes.len()
            )));
        }
        let pixels = bytes[24..24 + 3 * n].iter().map(|&v| v as f32 / 255.0).collect();
        let masks = bytes[24 + 3 * n..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(VideoBatch {
            batch: b,
            frames: t,
            height: h,
            width: w,
            pixels,
            masks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<VideoBatch> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized batch, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Load a single dataset file, or every `*.sltv` file of a directory in name order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<VideoBatch> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "sltv"))
            .collect();
        files.sort();
        let parts = files.iter().map(VideoBatch::load).collect::<Result<Vec<_>>>()?;
        VideoBatch::concat(&parts)
    } else {
        VideoBatch::load(path)
    }
}

fn quantized_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [0; 3].map(|_: u8| rng.gen_range(0u8..=255) as f32 / 255.0)
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

/// Draw a random scene.
pub fn random_scene(rng: &mut ChaCha8Rng, config: &GenConfig) -> SceneSpec {
    let (h, w) = (config.height as f64, config.width as f64);
    let background = [0; 3].map(|_: u8| rng.gen_range(0u8..=60) as f32 / 255.0);
    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let min_side = h.min(w);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = match rng.gen_range(0..3) {
            0 => ShapeKind::Disc,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let size = rng.gen_range(min_side / 10.0..min_side / 5.0);
        // Colors stay visibly apart from the background and from each other.
        let color = loop {
            let c = quantized_color(rng);
            if color_distance(c, background) > 0.6
                && objects.iter().all(|o| color_distance(c, o.color) > 0.3)
            {
                break c;
            }
        };
        let position = [rng.gen_range(size..w - 1.0 - size), rng.gen_range(size..h - 1.0 - size)];
        let velocity = [rng.gen_range(-MAX_SPEED..MAX_SPEED), rng.gen_range(-MAX_SPEED..MAX_SPEED)];
        objects.push(ObjectSpec {
            shape,
            color,
            position,
            velocity,
            size,
        });
    }
    SceneSpec { objects, background }
}

/// Object centers for every frame; centers reflect off `[0, extent - 1]`.
pub fn trajectory(object: &ObjectSpec, frames: usize, width: usize, height: usize) -> Vec<[f64; 2]> {
    let bounds = [(width - 1) as f64, (height - 1) as f64];
    let mut pos = object.position;
    let mut vel = object.velocity;
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(pos);
        for a in 0..2 {
            pos[a] += vel[a];
            if pos[a] < 0.0 {
                pos[a] = -pos[a];
                vel[a] = -vel[a];
            } else if pos[a] > bounds[a] {
                pos[a] = 2.0 * bounds[a] - pos[a];
                vel[a] = -vel[a];
            }
        }
    }
    out
}

/// Render a scene into `frames` RGB frames and label masks.
pub fn render_scene(scene: &SceneSpec, frames: usize, height: usize, width: usize) -> (Vec<f32>, Vec<u16>) {
    let npx = height * width;
    let mut pixels = Vec::with_capacity(frames * npx * 3);
    let mut masks = vec![0u16; frames * npx];
    let paths: Vec<_> = scene
        .objects
        .iter()
        .map(|o| trajectory(o, frames, width, height))
        .collect();
    for t in 0..frames {
        let mask = &mut masks[t * npx..(t + 1) * npx];
        for (k, (obj, path)) in scene.objects.iter().zip(&paths).enumerate() {
            let [cx, cy] = path[t];
            let y0 = ((cy - obj.size).floor().max(0.0)) as usize;
            let y1 = ((cy + obj.size).ceil() as usize + 1).min(height);
            let x0 = ((cx - obj.size).floor().max(0.0)) as usize;
            let x1 = ((cx + obj.size).ceil() as usize + 1).min(width);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if obj.shape.contains(dx, dy, obj.size) {
                        mask[y * width + x] = (k + 1) as u16;
                    }
                }
            }
        }
        for &label in mask.iter() {
            let c = if label == 0 {
                scene.background
            } else {
                scene.objects[label as usize - 1].color
            };
            pixels.extend_from_slice(&c);
        }
    }
    (pixels, masks)
}

/// Generate a batch of random videos. Identical `(seed, config)` give identical output.
pub fn generate(seed: u64, config: &GenConfig) -> Result<VideoBatch> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = VideoBatch {
        batch: config.batch,
        frames: config.frames,
        height: config.height,
        width: config.width,
        pixels: Vec::new(),
        masks: Vec::new(),
    };
    for _ in 0..config.batch {
        let scene = random_scene(&mut rng, config);
        let (p, m) = render_scene(&scene, config.frames, config.height, config.width);
        batch.pixels.extend(p);
        batch.masks.extend(m);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            batch: 2,
            frames: 4,
            height: 32,
            width: 32,
            min_objects: 1,
            max_objects: 4,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(0, &small()).unwrap();
        let b = generate(0, &small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), generate(1, &small()).unwrap().to_bytes());
    }

    #[test]
    fn empty_scene_has_empty_masks() {
        let cfg = GenConfig {
            min_objects: 0,
            max_objects: 0,
            ..small()
        };
        let b = generate(3, &cfg).unwrap();
        assert!(b.masks.iter().all(|&m| m == 0));
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            GenConfig { height: 8, ..small() },
            GenConfig { frames: 0, ..small() },
            GenConfig {
                min_objects: 3,
                max_objects: 2,
                ..small()
            },
        ] {
            assert!(matches!(generate(0, &cfg), Err(DatagenError::Config(_))));
        }
    }

    #[test]
    fn disc_centroid_moves_one_pixel_per_frame() {
        let scene = SceneSpec {
            objects: vec![ObjectSpec {
                shape: ShapeKind::Disc,
                color: [1.0, 0.0, 0.0],
                position: [32.0, 32.0],
                velocity: [1.0, 1.0],
                size: 6.0,
            }],
            background: [0.0; 3],
        };
        let (_, masks) = render_scene(&scene, 4, 64, 64);
        let centroid = |t: usize| {
            let m = &masks[t * 4096..(t + 1) * 4096];
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for (i, &l) in m.iter().enumerate() {
                if l == 1 {
                    sx += (i % 64) as f64;
                    sy += (i / 64) as f64;
                    n += 1.0;
                }
            }
            (sx / n, sy / n)
        };
        for t in 0..3 {
            let (a, b) = (centroid(t), centroid(t + 1));
            assert!((b.0 - a.0 - 1.0).abs() <= 0.5);
            assert!((b.1 - a.1 - 1.0).abs() <= 0.5);
        }
    }

    #[test]
    fn later_objects_occlude_earlier() {
        let obj = |color: [f32; 3]| ObjectSpec {
            shape: ShapeKind::Square,
            color,
            position: [16.0, 16.0],
            velocity: [0.0, 0.0],
            size: 4.0,
        };
        let scene = SceneSpec {
            objects: vec![obj([1.0, 0.0, 0.0]), obj([0.0, 1.0, 0.0])],
            background: [0.0; 3],
        };
        let (pixels, masks) = render_scene(&scene, 1, 32, 32);
        assert!(!masks.contains(&1));
        let i = 16 * 32 + 16;
        assert_eq!(masks[i], 2);
        assert_eq!(&pixels[i * 3..i * 3 + 3], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn triangle_apex_points_up() {
        assert!(ShapeKind::Triangle.contains(0.0, -3.9, 4.0));
        assert!(!ShapeKind::Triangle.contains(3.0, -3.0, 4.0));
        assert!(ShapeKind::Triangle.contains(3.0, 3.5, 4.0));
    }

    #[test]
    fn reflection_keeps_centers_inside() {
        let o = ObjectSpec {
            shape: ShapeKind::Disc,
            color: [1.0; 3],
            position: [1.0, 30.0],
            velocity: [-2.5, 2.5],
            size: 3.0,
        };
        for [x, y] in trajectory(&o, 50, 32, 32) {
            assert!((0.0..=31.0).contains(&x) && (0.0..=31.0).contains(&y));
        }
    }

    #[test]
    fn format_errors() {
        assert!(matches!(VideoBatch::from_bytes(&[]), Err(DatagenError::Format(_))));
        let b = generate(7, &small()).unwrap();
        let mut bytes = b.to_bytes();
        assert_eq!(VideoBatch::from_bytes(&bytes).unwrap(), b);
        bytes[0] ^= 0xff;
        assert!(matches!(VideoBatch::from_bytes(&bytes), Err(DatagenError::Format(_))));
        bytes[0] ^= 0xff;
        bytes[4] = 9;
        assert!(matches!(VideoBatch::from_bytes(&bytes), Err(DatagenError::Format(_))));
        bytes[4] = 1;
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(VideoBatch::from_bytes(&bytes), Err(DatagenError::Format(_))));
    }
}

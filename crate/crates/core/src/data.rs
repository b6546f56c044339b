//! Desk-scale image classification data.
//!
//! `SyntheticShapes` renders ten shape classes (filled and hollow primitives,
//! stripes, crosses) at random positions, sizes and colours over a noisy
//! background. Images are stored as 8-bit RGB so the raw-input transmission
//! path and the float model input agree exactly.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_SHAPE_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    /// Channel-major `[C, H, W]` pixels.
    pub pixels: Vec<u8>,
    pub label: u8,
}

/// Which label a head is trained against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// The 10-way shape class.
    Class,
    /// Whether the class index is odd.
    Parity,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Class => NUM_SHAPE_CLASSES,
            Task::Parity => 2,
        }
    }

    pub fn target(self, label: u8) -> usize {
        match self {
            Task::Class => label as usize,
            Task::Parity => (label % 2) as usize,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Task::Class => 0,
            Task::Parity => 1,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(Task::Class),
            "parity" => Ok(Task::Parity),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected class or parity)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapes {
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticShapes {
    fn default() -> Self {
        Self { size: 32, noise: 0.08, seed: 0 }
    }
}

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let cheb = ax.max(ay);
    let dist = (dx * dx + dy * dy).sqrt();
    match class {
        0 => cheb <= r,
        1 => dist <= r,
        2 => dy >= -r && dy <= r && ax <= (dy + r) * 0.5,
        3 => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
        4 => cheb <= r && (ax - ay).abs() <= r / 3.5,
        5 => dist <= r && dist >= r * 0.55,
        6 => cheb <= r && (((dy + r) / (r / 2.0)).floor() as i64) % 2 == 0,
        7 => cheb <= r && (((dx + r) / (r / 2.0)).floor() as i64) % 2 == 0,
        8 => cheb <= r && cheb >= r * 0.55,
        9 => ax + ay <= r,
        _ => unreachable!(),
    }
}

impl SyntheticShapes {
    /// Renders sample `index`; deterministic in `(seed, index)`.
    pub fn sample(&self, index: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
        let label = (index % NUM_SHAPE_CLASSES as u64) as usize;
        let n = self.size;
        let s = n as f64;
        let bg: [f64; 3] = [rng.gen_range(0.0..0.45), rng.gen_range(0.0..0.45), rng.gen_range(0.0..0.45)];
        let mut fg: [f64; 3] = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)];
        // keep some contrast against the background
        let k = rng.gen_range(0..3);
        fg[k] = (bg[k] + 0.5).min(1.0);
        let r = rng.gen_range(0.17 * s..0.33 * s);
        let cx = rng.gen_range(r + 1.0..s - r - 1.0);
        let cy = rng.gen_range(r + 1.0..s - r - 1.0);
        let grad: f64 = rng.gen_range(-0.15..0.15);
        let noise = Normal::new(0.0, self.noise.max(1e-12)).expect("valid noise");
        let mut pixels = vec![0u8; 3 * n * n];
        for y in 0..n {
            for x in 0..n {
                let on = inside(label, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
                for c in 0..3 {
                    let base = if on { fg[c] } else { bg[c] + grad * (y as f64 / s - 0.5) };
                    let v = base + noise.sample(&mut rng);
                    pixels[c * n * n + y * n + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Sample { pixels, label: label as u8 }
    }

    pub fn generate(&self, start: u64, count: usize) -> Dataset {
        Dataset {
            shape: [3, self.size, self.size],
            num_classes: NUM_SHAPE_CLASSES,
            samples: (0..count as u64).map(|i| self.sample(start + i)).collect(),
        }
    }
}

const MAGIC: &[u8; 4] = b"ESDS";
const VERSION: u8 = 1;

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    /// `[N, C, H, W]` float batch in `[0, 1]` for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend(self.samples[i].pixels.iter().map(|&p| p as f64 / 255.0));
        }
        let [c, h, w] = self.shape;
        Tensor::from_parts(vec![indices.len(), c, h, w], data)
    }

    pub fn targets(&self, indices: &[usize], task: Task) -> Vec<usize> {
        indices.iter().map(|&i| task.target(self.samples[i].label)).collect()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset { shape: self.shape, num_classes: self.num_classes, samples: self.samples[range].to_vec() }
    }

    /// Binary layout: `"ESDS"`, version u8, count u32, C/H/W u16, classes u16,
    /// then per sample a label byte and `C·H·W` pixel bytes. Little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        for d in self.shape {
            w.write_all(&(d as u16).to_le_bytes())?;
        }
        w.write_all(&(self.num_classes as u16).to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&[s.label])?;
            w.write_all(&s.pixels)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 4 + 1 + 4 + 6 + 2];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC || head[4] != VERSION {
            return Err(Error::InvalidArgument("not an ESDS v1 dataset file".into()));
        }
        let count = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
        let dim = |i: usize| u16::from_le_bytes([head[9 + 2 * i], head[10 + 2 * i]]) as usize;
        let shape = [dim(0), dim(1), dim(2)];
        let num_classes = u16::from_le_bytes([head[15], head[16]]) as usize;
        let per: usize = shape.iter().product();
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let mut label = [0u8; 1];
            r.read_exact(&mut label)?;
            if label[0] as usize >= num_classes {
                return Err(Error::InvalidArgument(format!("label {} outside {num_classes} classes", label[0])));
            }
            let mut pixels = vec![0u8; per];
            r.read_exact(&mut pixels)?;
            samples.push(Sample { pixels, label: label[0] });
        }
        Ok(Self { shape, num_classes, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let g = SyntheticShapes { seed: 4, ..Default::default() };
        let a = g.generate(0, 20);
        assert_eq!(a, g.generate(0, 20));
        for c in 0..10u8 {
            assert_eq!(a.samples.iter().filter(|s| s.label == c).count(), 2);
        }
        assert_ne!(a.samples[0].pixels, a.samples[10].pixels);
    }

    #[test]
    fn file_round_trip() {
        let d = SyntheticShapes::default().generate(0, 3);
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn parity_targets() {
        assert_eq!(Task::Parity.target(7), 1);
        assert_eq!(Task::Parity.target(4), 0);
        assert_eq!(Task::Class.target(4), 4);
    }
}

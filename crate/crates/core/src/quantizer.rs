//! Rounding surrogates for training, integer latents for coding, and the
//! 8-bit affine quantizer of the channel-reduction baseline.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Graph, Var};
use crate::entropy_model::CLAMP_BOUND;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Draws `U(−½, ½)` noise of the given shape.
pub fn uniform_noise<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let u = Uniform::new(-0.5, 0.5);
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| u.sample(rng)).collect())
}

/// Adds uniform noise to `z` inside the graph; the noise is a constant, so
/// `∂out/∂z = 1`.
pub fn noise_quantize<R: Rng>(g: &mut Graph, z: Var, rng: &mut R) -> Result<Var> {
    let noise = uniform_noise(g.value(z).shape(), rng);
    let n = g.constant(noise)?;
    g.add(z, n)
}

/// Round half away from zero.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Elementwise rounding. Rounded latents only feed frozen-encoder paths, so
/// they enter graphs as constants.
pub fn round_tensor(t: &Tensor) -> Tensor {
    t.map(round_half_away)
}

/// Quantized bottleneck of one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    /// Rounded values in channel-major raster order, escaped positions included.
    pub symbols: Vec<i32>,
    /// `(flat index, raw value)` for every symbol outside `[−B, B−1]`, increasing by index.
    pub escapes: Vec<(u32, i16)>,
    pub beta_id: u16,
}

impl LatentCode {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn is_escaped(value: i32, bound: i32) -> bool {
        value < -bound || value > bound - 1
    }

    /// Builds a code from already-integer symbols, deriving the escape list.
    pub fn from_symbols(shape: [usize; 3], symbols: Vec<i32>, bound: i32, beta_id: u16) -> Result<Self> {
        if shape.iter().product::<usize>() != symbols.len() {
            return Err(Error::Shape(format!("{} symbols for latent shape {shape:?}", symbols.len())));
        }
        let mut escapes = Vec::new();
        for (i, &s) in symbols.iter().enumerate() {
            if Self::is_escaped(s, bound) {
                let raw = i16::try_from(s).map_err(|_| Error::EscapeOverflow(s as i64))?;
                escapes.push((i as u32, raw));
            }
        }
        Ok(Self { shape, symbols, escapes, beta_id })
    }

    /// Latents as a `[1, C, H, W]` float tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [c, h, w] = self.shape;
        Tensor::from_parts(vec![1, c, h, w], self.symbols.iter().map(|&s| s as f64).collect())
    }
}

/// Rounds a continuous `[C, H, W]` (or `[1, C, H, W]`) latent to a [`LatentCode`].
pub fn round_quantize(z: &Tensor, beta_id: u16) -> Result<LatentCode> {
    round_quantize_with_bound(z, CLAMP_BOUND, beta_id)
}

pub fn round_quantize_with_bound(z: &Tensor, bound: i32, beta_id: u16) -> Result<LatentCode> {
    let shape: [usize; 3] = match z.shape() {
        [c, h, w] | [1, c, h, w] => [*c, *h, *w],
        s => return Err(Error::Shape(format!("latent must be [C,H,W] or [1,C,H,W], got {s:?}"))),
    };
    let mut symbols = Vec::with_capacity(z.len());
    for &v in z.data() {
        let r = round_half_away(v);
        if !(i16::MIN as f64..=i16::MAX as f64).contains(&r) {
            return Err(Error::EscapeOverflow(r as i64));
        }
        symbols.push(r as i32);
    }
    LatentCode::from_symbols(shape, symbols, bound, beta_id)
}

/// Per-tensor 8-bit affine quantization: `x ≈ offset + q·scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineQuant8 {
    pub shape: Vec<usize>,
    pub q: Vec<u8>,
    pub scale: f32,
    /// Value represented by `q = 0` (the tensor minimum, rounded down to f32).
    pub offset: f32,
    /// Integer code of the real value 0, clamped to the representable range.
    pub zero_point: u8,
}

/// Smallest scale used for constant tensors.
pub const SCALE_FLOOR: f64 = 1e-12;

fn f32_down(v: f64) -> f32 {
    let f = v as f32;
    if f as f64 > v {
        f.next_down()
    } else {
        f
    }
}

fn f32_up(v: f64) -> f32 {
    let f = v as f32;
    if (f as f64) < v {
        f.next_up()
    } else {
        f
    }
}

/// `scale = (max − min)/255` (floored), `q = round((x − min)/scale)`.
///
/// Scale and offset are stored as `f32` so the in-memory value matches the
/// wire format; the offset rounds down and the scale up so every input stays
/// inside `[0, 255]`.
pub fn quantize_u8(x: &Tensor) -> Result<AffineQuant8> {
    x.ensure_finite("quantize_u8 input")?;
    let min = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let offset = f32_down(min);
    let scale = f32_up(((max - offset as f64) / 255.0).max(SCALE_FLOOR));
    let (s, o) = (scale as f64, offset as f64);
    let q = x.data().iter().map(|&v| ((v - o) / s).round().clamp(0.0, 255.0) as u8).collect();
    let zero_point = (-o / s).round().clamp(0.0, 255.0) as u8;
    Ok(AffineQuant8 { shape: x.shape().to_vec(), q, scale, offset, zero_point })
}

pub fn dequantize_u8(a: &AffineQuant8) -> Tensor {
    let (s, o) = (a.scale as f64, a.offset as f64);
    Tensor::from_parts(a.shape.clone(), a.q.iter().map(|&q| o + q as f64 * s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ties_round_away_from_zero() {
        assert_eq!(round_half_away(1.5), 2.0);
        assert_eq!(round_half_away(-1.5), -2.0);
        assert_eq!(round_half_away(0.49), 0.0);
    }

    #[test]
    fn out_of_range_values_escape() {
        let z = Tensor::new(vec![1, 1, 3], vec![70.2, 3.0, -64.0]).unwrap();
        let code = round_quantize(&z, 0).unwrap();
        assert_eq!(code.escapes, vec![(0, 70)]);
        assert_eq!(code.symbols, vec![70, 3, -64]);
        let z = Tensor::new(vec![1, 1, 1], vec![64.0]).unwrap();
        assert_eq!(round_quantize(&z, 0).unwrap().escapes, vec![(0, 64)]);
    }

    #[test]
    fn escape_overflow_is_an_error() {
        let z = Tensor::new(vec![1, 1, 1], vec![40_000.0]).unwrap();
        assert!(matches!(round_quantize(&z, 0), Err(Error::EscapeOverflow(40_000))));
    }

    #[test]
    fn noise_has_unit_support_and_unit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let z = g.variable(Tensor::zeros(vec![1000])).unwrap();
        let y = noise_quantize(&mut g, z, &mut rng).unwrap();
        assert!(g.value(y).data().iter().all(|v| (-0.5..=0.5).contains(v)));
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(z).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn noise_mean_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let t = uniform_noise(&[n], &mut rng);
        let mean = t.sum() / n as f64;
        let sigma = 1.0 / 12f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn affine_hand_example() {
        let x = Tensor::from_vec(vec![0.0, 2.55, 1.28]);
        let a = quantize_u8(&x).unwrap();
        assert!((a.scale as f64 - 0.01).abs() < 1e-8);
        assert_eq!(a.q[2], 128);
        assert!((dequantize_u8(&a).data()[2] - 1.28).abs() < 1e-6);
    }

    #[test]
    fn constant_tensor_is_exact() {
        let x = Tensor::full(vec![4], 0.75);
        let a = quantize_u8(&x).unwrap();
        assert!(a.q.iter().all(|&q| q == a.q[0]));
        assert_eq!(dequantize_u8(&a), x);
    }

    #[test]
    fn integer_latents_round_trip() {
        let z = Tensor::new(vec![1, 2, 2], vec![1.0, -3.0, 0.0, 100.0]).unwrap();
        let code = round_quantize(&z, 0).unwrap();
        let again = round_quantize(&code.to_tensor(), 0).unwrap();
        assert_eq!(code, again);
    }
}

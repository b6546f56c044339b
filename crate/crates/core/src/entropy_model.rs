//! Factorized learned prior over bottleneck channels.
//!
//! Each channel owns a monotone scalar network `t ↦ logit(CDF(t))` made of
//! four stages. Stage `k` applies a matrix with softplus-positive weights and a
//! bias; the first three stages follow it with `x + tanh(a)·tanh(x)`, which is
//! monotone for `tanh(a) > −1`. A sigmoid on the last stage gives the CDF, and
//! symbol probabilities are CDF differences over unit-width bins.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::Params;
use crate::autodiff::{logistic, softplus, softplus_inverse, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{uniform_tensor, Binder};
use crate::tensor::Tensor;

/// Widths of the monotone network: scalar in, three hidden layers of 3, scalar out.
const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const STAGES: usize = FILTERS.len() - 1;
const INIT_SCALE: f64 = 10.0;

/// Largest magnitude symbol coded without escaping: in-range symbols are `[-B, B-1]`.
pub const CLAMP_BOUND: i32 = 64;
/// Bits of precision of exported frequency tables.
pub const TABLE_PRECISION: u32 = 16;
/// Probability floor used when computing rates.
pub const P_MIN: f64 = 1.0 / (1u64 << TABLE_PRECISION) as f64;

pub const PREFIX: &str = "prior.";

fn name(kind: &str, k: usize) -> String {
    format!("{PREFIX}{kind}{k}")
}

/// Name and shape of every prior parameter.
pub fn prior_param_shapes(channels: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for k in 0..STAGES {
        let (din, dout) = (FILTERS[k], FILTERS[k + 1]);
        out.push((name("matrix", k), vec![channels, dout, din]));
        out.push((name("bias", k), vec![channels, dout]));
        if k + 1 < STAGES {
            out.push((name("factor", k), vec![channels, dout]));
        }
    }
    out
}

/// Fresh prior parameters for `channels` latent channels.
pub fn init_prior(channels: usize, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = INIT_SCALE.powf(1.0 / STAGES as f64);
    let mut p = Params::new();
    for k in 0..STAGES {
        let (din, dout) = (FILTERS[k], FILTERS[k + 1]);
        let init = softplus_inverse(1.0 / scale / dout as f64);
        p.insert(name("matrix", k), Tensor::full(vec![channels, dout, din], init));
        p.insert(name("bias", k), uniform_tensor(vec![channels, dout], -0.5, 0.5, &mut rng));
        if k + 1 < STAGES {
            p.insert(name("factor", k), Tensor::zeros(vec![channels, dout]));
        }
    }
    p
}

/// Read-only view of the prior parameters for eager (non-graph) evaluation.
#[derive(Clone, Debug)]
pub struct EntropyModel {
    channels: usize,
    /// Per stage: softplus(matrix) `[C, dout, din]`, bias `[C, dout]`, tanh(factor) `[C, dout]`.
    stages: Vec<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)>,
}

impl EntropyModel {
    pub fn from_params(params: &Params) -> Result<Self> {
        let first = params
            .get(&name("matrix", 0))
            .ok_or_else(|| Error::Checkpoint("prior parameters missing".into()))?;
        let channels = first.shape()[0];
        let mut stages = Vec::with_capacity(STAGES);
        for k in 0..STAGES {
            let get = |kind: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
                let t = params
                    .get(&name(kind, k))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {}", name(kind, k))))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!("{} has shape {:?}, expected {shape:?}", name(kind, k), t.shape())));
                }
                Ok(t.data().to_vec())
            };
            let (din, dout) = (FILTERS[k], FILTERS[k + 1]);
            let m = get("matrix", vec![channels, dout, din])?.into_iter().map(softplus).collect();
            let b = get("bias", vec![channels, dout])?;
            let f = if k + 1 < STAGES {
                Some(get("factor", vec![channels, dout])?.into_iter().map(f64::tanh).collect())
            } else {
                None
            };
            stages.push((m, b, f));
        }
        Ok(Self { channels, stages })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `logit(CDF(t))` for one channel.
    pub fn logits(&self, t: f64, channel: usize) -> f64 {
        let mut x = [t, 0.0, 0.0];
        let mut next = [0.0; 3];
        for (k, (m, b, f)) in self.stages.iter().enumerate() {
            let (din, dout) = (FILTERS[k], FILTERS[k + 1]);
            for o in 0..dout {
                let row = &m[(channel * dout + o) * din..][..din];
                let mut s = b[channel * dout + o];
                for i in 0..din {
                    s += row[i] * x[i];
                }
                if let Some(f) = f {
                    s += f[channel * dout + o] * s.tanh();
                }
                next[o] = s;
            }
            x[..dout].copy_from_slice(&next[..dout]);
        }
        x[0]
    }

    pub fn cdf(&self, t: f64, channel: usize) -> f64 {
        logistic(self.logits(t, channel))
    }

    /// `P(z) = CDF(z + ½) − CDF(z − ½)`, evaluated on the side of the median
    /// where both terms are small to avoid cancellation.
    pub fn pmf(&self, z: f64, channel: usize) -> f64 {
        let lower = self.logits(z - 0.5, channel);
        let upper = self.logits(z + 0.5, channel);
        let s = if lower + upper > 0.0 { -1.0 } else { 1.0 };
        (logistic(s * upper) - logistic(s * lower)).abs()
    }

    /// Total information content `−Σ log2 P(z_i)` of a `[N, C, H, W]` or `[C, H, W]` tensor.
    pub fn rate_bits(&self, latents: &Tensor) -> Result<RateReport> {
        let (c, plane) = self.layout(latents.shape())?;
        let mut bits = 0.0;
        let mut clamped = 0;
        for (i, &z) in latents.data().iter().enumerate() {
            let p = self.pmf(z, (i / plane) % c);
            if p < P_MIN {
                clamped += 1;
            }
            bits -= p.max(P_MIN).log2();
        }
        Ok(RateReport { bits, clamped })
    }

    /// Per-element information content in bits, same layout as the input.
    pub fn element_bits(&self, latents: &Tensor) -> Result<Tensor> {
        let (c, plane) = self.layout(latents.shape())?;
        let data = latents
            .data()
            .iter()
            .enumerate()
            .map(|(i, &z)| -self.pmf(z, (i / plane) % c).max(P_MIN).log2())
            .collect();
        Ok(Tensor::from_parts(latents.shape().to_vec(), data))
    }

    fn layout(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let c = match shape.len() {
            4 => shape[1],
            3 => shape[0],
            _ => return Err(Error::Shape(format!("latents must be [N,C,H,W] or [C,H,W], got {shape:?}"))),
        };
        if c != self.channels {
            return Err(Error::Shape(format!("prior has {} channels, latents {shape:?}", self.channels)));
        }
        Ok((c, shape[shape.len() - 2] * shape[shape.len() - 1]))
    }

    /// Quantized per-channel frequency tables for the range coder.
    pub fn export_cdf_table(&self, bound: i32, precision: u32) -> Result<CdfTable> {
        if bound <= 0 || !(8..=16).contains(&precision) {
            return Err(Error::InvalidArgument(format!("bound {bound} / precision {precision}")));
        }
        let channels = (0..self.channels)
            .map(|c| {
                let mut probs: Vec<f64> = (-bound..bound).map(|z| self.pmf(z as f64, c)).collect();
                let inside: f64 = probs.iter().sum();
                probs.push((1.0 - inside).max(0.0));
                ChannelTable { offset: -bound, cdf: quantize_pmf(&probs, precision) }
            })
            .collect();
        Ok(CdfTable { precision, channels })
    }
}

/// Rate of a latent tensor plus how many probabilities hit the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateReport {
    pub bits: f64,
    pub clamped: usize,
}

/// Integer frequencies: one guaranteed count per symbol, the rest shared in
/// proportion to `probs` with largest-remainder rounding. Returns the cumulative table.
pub fn quantize_pmf(probs: &[f64], precision: u32) -> Vec<u32> {
    let total = 1u64 << precision;
    let n = probs.len() as u64;
    assert!(n < total, "too many symbols for table precision");
    let sum: f64 = probs.iter().sum();
    let spare = (total - n) as f64;
    let mut freq = Vec::with_capacity(probs.len());
    let mut rema = Vec::with_capacity(probs.len());
    for &p in probs {
        let share = if sum > 0.0 { p / sum * spare } else { spare / n as f64 };
        let whole = share.floor();
        freq.push(1 + whole as u64);
        rema.push(share - whole);
    }
    let assigned: u64 = freq.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| rema[b].total_cmp(&rema[a]).then(a.cmp(&b)));
    for &i in order.iter().take((total - assigned) as usize) {
        freq[i] += 1;
    }
    let mut cdf = Vec::with_capacity(probs.len() + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for f in freq {
        acc += f as u32;
        cdf.push(acc);
    }
    cdf
}

/// One channel's cumulative frequency table. The last symbol is the escape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelTable {
    /// Value of symbol index 0.
    pub offset: i32,
    /// Length `n_symbols + 1`, from 0 to `2^precision`.
    pub cdf: Vec<u32>,
}

impl ChannelTable {
    pub fn n_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn escape_index(&self) -> usize {
        self.n_symbols() - 1
    }

    /// Symbol index for a value, or `None` when it must be escaped.
    pub fn index_of(&self, value: i32) -> Option<usize> {
        let i = value as i64 - self.offset as i64;
        (i >= 0 && (i as usize) < self.escape_index()).then_some(i as usize)
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    /// Symbol index whose interval contains `target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }

    pub fn probability(&self, index: usize, precision: u32) -> f64 {
        self.freq(index) as f64 / (1u64 << precision) as f64
    }
}

/// Frequency tables for every latent channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdfTable {
    pub precision: u32,
    pub channels: Vec<ChannelTable>,
}

impl CdfTable {
    pub fn validate(&self) -> Result<()> {
        let total = 1u32 << self.precision;
        for (c, t) in self.channels.iter().enumerate() {
            if t.cdf.len() < 2 || t.cdf[0] != 0 || *t.cdf.last().unwrap() != total {
                return Err(Error::InvalidArgument(format!("channel {c} table is not normalized to 2^{}", self.precision)));
            }
            if t.cdf.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidArgument(format!("channel {c} table has a zero-frequency symbol")));
            }
        }
        Ok(())
    }
}

/// Appends `rate_nats = −Σ ln P(z)` for `[N, C, H, W]` latents to a graph.
///
/// Returns the scalar rate node and the number of probabilities clamped to [`P_MIN`].
pub fn rate_graph(g: &mut Graph, b: &mut Binder, z: Var) -> Result<(Var, usize)> {
    let shape = g.value(z).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("prior expects [N,C,H,W] latents, got {shape:?}")));
    }
    let lo = g.offset(z, -0.5);
    let hi = g.offset(z, 0.5);
    let lower = logits_graph(g, b, lo)?;
    let upper = logits_graph(g, b, hi)?;
    let signs: Vec<f64> = g
        .value(lower)
        .data()
        .iter()
        .zip(g.value(upper).data())
        .map(|(l, u)| if l + u > 0.0 { -1.0 } else { 1.0 })
        .collect();
    let sign = g.constant(Tensor::from_parts(shape, signs))?;
    let su = g.mul(upper, sign)?;
    let sl = g.mul(lower, sign)?;
    let pu = g.sigmoid(su);
    let pl = g.sigmoid(sl);
    let diff = g.sub(pu, pl)?;
    let lik = g.abs(diff);
    let clamped = g.value(lik).data().iter().filter(|&&p| p < P_MIN).count();
    let lik = g.clamp_min(lik, P_MIN);
    let ll = g.log(lik)?;
    let total = g.sum(ll);
    Ok((g.scale(total, -1.0), clamped))
}

/// `logit(CDF(t))` applied elementwise to `[N, C, H, W]`, using grouped 1x1 convs
/// so every channel runs its own small network.
pub fn logits_graph(g: &mut Graph, b: &mut Binder, t: Var) -> Result<Var> {
    let c = g.value(t).shape()[1];
    let mut x = t;
    for k in 0..STAGES {
        let (din, dout) = (FILTERS[k], FILTERS[k + 1]);
        let m = b.get(g, &name("matrix", k))?;
        let m = g.softplus(m);
        let m = g.reshape(m, &[c * dout, din, 1, 1])?;
        let bias = b.get(g, &name("bias", k))?;
        let bias = g.reshape(bias, &[c * dout])?;
        x = g.conv2d(x, m, Some(bias), 1, 0, c)?;
        if k + 1 < STAGES {
            let f = b.get(g, &name("factor", k))?;
            let f = g.tanh(f);
            let f = g.reshape(f, &[1, c * dout, 1, 1])?;
            let tx = g.tanh(x);
            let gated = g.mul(tx, f)?;
            x = g.add(x, gated)?;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Trainable;

    fn model(channels: usize) -> (Params, EntropyModel) {
        let p = init_prior(channels, 3);
        let m = EntropyModel::from_params(&p).unwrap();
        (p, m)
    }

    #[test]
    fn fresh_cdf_in_open_unit_interval() {
        let (_, m) = model(2);
        for c in 0..2 {
            let v = m.cdf(0.0, c);
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn monotone_over_random_pairs() {
        use rand::Rng;
        let mut p = init_prior(3, 9);
        // push the parameters somewhere non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in p.values_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-2.0..2.0);
            }
        }
        let m = EntropyModel::from_params(&p).unwrap();
        for _ in 0..10_000 {
            let a: f64 = rng.gen_range(-80.0..80.0);
            let b: f64 = rng.gen_range(-80.0..80.0);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let c = rng.gen_range(0..3);
            assert!(m.cdf(lo, c) <= m.cdf(hi, c));
        }
    }

    #[test]
    fn pmf_sums_to_at_most_one() {
        let (_, m) = model(1);
        let s: f64 = (-64..64).map(|k| m.pmf(k as f64, 0)).sum();
        assert!(s <= 1.0 + 1e-12 && s > 0.99);
    }

    #[test]
    fn graph_rate_matches_eager_rate() {
        let (p, m) = model(2);
        let z = Tensor::new(vec![1, 2, 2, 2], vec![0.3, -1.7, 2.2, 0.0, 4.1, -0.4, 1.0, -3.3]).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&p, Trainable::Nothing);
        let zv = g.constant(z.clone()).unwrap();
        let (nats, _) = rate_graph(&mut g, &mut b, zv).unwrap();
        let eager = m.rate_bits(&z).unwrap().bits;
        let graph_bits = g.value(nats).data()[0] / std::f64::consts::LN_2;
        assert!((eager - graph_bits).abs() < 1e-9, "{eager} vs {graph_bits}");
    }

    #[test]
    fn table_invariants() {
        let (_, m) = model(2);
        let t = m.export_cdf_table(CLAMP_BOUND, TABLE_PRECISION).unwrap();
        t.validate().unwrap();
        for ch in &t.channels {
            assert_eq!(ch.n_symbols(), 129);
            assert_eq!(ch.cdf[ch.n_symbols()] - ch.cdf[0], 1 << 16);
        }
    }

    #[test]
    fn degenerate_pmf_still_valid() {
        let mut probs = vec![0.0; 10];
        probs[3] = 1.0;
        let cdf = quantize_pmf(&probs, 16);
        assert_eq!(*cdf.last().unwrap(), 1 << 16);
        assert!(cdf.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn lookup_finds_interval() {
        let t = ChannelTable { offset: -1, cdf: vec![0, 10, 30, 65536] };
        assert_eq!(t.lookup(0), 0);
        assert_eq!(t.lookup(9), 0);
        assert_eq!(t.lookup(10), 1);
        assert_eq!(t.lookup(65535), 2);
        assert_eq!(t.index_of(-1), Some(0));
        assert_eq!(t.index_of(0), Some(1));
        assert_eq!(t.index_of(1), None);
    }
}

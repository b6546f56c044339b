//! Central finite-difference checks of reverse-mode gradients.
//!
//! [`check`] compares the tape's gradient of a scalar function of named
//! tensors against `(f(p + ε) − f(p − ε)) / 2ε` for every element. [`suite`]
//! runs it over every differentiable operation and the composite losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::optim::Params;
use crate::autodiff::{Graph, Var};
use crate::entropy_model::{init_prior, rate_graph};
use crate::error::{Error, Result};
use crate::layers::{layer_graph, section_graph, Binder, LayerSpec, Model, ModelSpec, Section, TeacherWidths, Trainable};
use crate::tensor::Tensor;
use crate::training::{kd_loss, rd_loss};

pub const STEP: f64 = 1e-5;

/// Worst relative error of one operation over its random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all parameters.
pub fn check(params: &Params, f: &dyn Fn(&mut Graph, &mut Binder) -> Result<Var>) -> Result<f64> {
    let eval = |p: &Params| -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binder::new(p, Trainable::Nothing);
        let y = f(&mut g, &mut b)?;
        Ok(g.value(y).data()[0])
    };
    let analytic = {
        let mut g = Graph::new();
        let mut b = Binder::new(params, Trainable::All);
        let y = f(&mut g, &mut b)?;
        g.backward(y)?.into_params()
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let mut work = params.clone();
    for (name, t) in params {
        let zero = Tensor::zeros(t.shape().to_vec());
        let a = analytic.get(name).unwrap_or(&zero);
        for i in 0..t.len() {
            let orig = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let num = (up - down) / (2.0 * STEP);
            let an = a.data()[i];
            diff += (an - num) * (an - num);
            na += an * an;
            nn += num * num;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    Ok(if scale == 0.0 { diff.sqrt() } else { diff.sqrt() / scale })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `±[0.1, 1]`, away from the kinks of relu/abs/clamp.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Contracts an arbitrary node to a scalar with fixed random weights.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(uniform(&mut rng, &shape, -1.0, 1.0))?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn params(entries: Vec<(&str, Tensor)>) -> Params {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

type Builder = fn(&mut Graph, &mut Binder, u64) -> Result<Var>;
type Inputs = fn(&mut ChaCha8Rng) -> Params;

macro_rules! unary {
    ($name:literal, $gen:expr, $body:expr) => {
        (
            $name,
            (|r: &mut ChaCha8Rng| params(vec![("x", $gen(r))])) as Inputs,
            (|g: &mut Graph, b: &mut Binder, s: u64| {
                let x = b.get(g, "x")?;
                #[allow(clippy::redundant_closure_call)]
                let y = $body(g, x)?;
                project(g, y, s)
            }) as Builder,
        )
    };
}

fn gen10(r: &mut ChaCha8Rng) -> Tensor {
    uniform(r, &[2, 5], -2.0, 2.0)
}

fn tiny_student() -> Result<ModelSpec> {
    let t = ModelSpec::teacher([3, 8, 8], TeacherWidths { stage1: 2, stage2: 3 }, 3);
    ModelSpec::entropic_student(&t, 2, 3)
}

fn cases() -> Vec<(&'static str, Inputs, Builder)> {
    vec![
        (
            "conv2d",
            |r| params(vec![("x", uniform(r, &[1, 3, 4, 4], -1.0, 1.0)), ("w", uniform(r, &[2, 3, 3, 3], -1.0, 1.0)), ("b", uniform(r, &[2], -1.0, 1.0))]),
            |g, b, s| {
                let (x, w, bias) = (b.get(g, "x")?, b.get(g, "w")?, b.get(g, "b")?);
                let y = g.conv2d(x, w, Some(bias), 1, 1, 1)?;
                project(g, y, s)
            },
        ),
        (
            "conv2d_grouped_strided",
            |r| params(vec![("x", uniform(r, &[2, 4, 5, 5], -1.0, 1.0)), ("w", uniform(r, &[4, 2, 3, 3], -1.0, 1.0)), ("b", uniform(r, &[4], -1.0, 1.0))]),
            |g, b, s| {
                let (x, w, bias) = (b.get(g, "x")?, b.get(g, "w")?, b.get(g, "b")?);
                let y = g.conv2d(x, w, Some(bias), 2, 1, 2)?;
                project(g, y, s)
            },
        ),
        (
            "linear",
            |r| params(vec![("x", uniform(r, &[3, 4], -1.0, 1.0)), ("w", uniform(r, &[2, 4], -1.0, 1.0)), ("b", uniform(r, &[2], -1.0, 1.0))]),
            |g, b, s| {
                let (x, w, bias) = (b.get(g, "x")?, b.get(g, "w")?, b.get(g, "b")?);
                let y = g.linear(x, w, Some(bias))?;
                project(g, y, s)
            },
        ),
        unary!("upsample2", |r| uniform(r, &[1, 2, 2, 3], -1.0, 1.0), |g: &mut Graph, x| g.upsample2(x)),
        unary!("avgpool2d", |r| uniform(r, &[1, 2, 4, 4], -1.0, 1.0), |g: &mut Graph, x| g.avgpool2d(x, 2)),
        unary!("relu", |r| off_kink(r, &[10]), |g: &mut Graph, x| Ok::<_, Error>(g.relu(x))),
        unary!("abs", |r| off_kink(r, &[10]), |g: &mut Graph, x| Ok::<_, Error>(g.abs(x))),
        unary!("clamp_min", |r| off_kink(r, &[10]), |g: &mut Graph, x| Ok::<_, Error>(g.clamp_min(x, 0.0))),
        unary!("exp", gen10, |g: &mut Graph, x| Ok::<_, Error>(g.exp(x))),
        unary!("log", |r| uniform(r, &[10], 0.3, 3.0), |g: &mut Graph, x| g.log(x)),
        unary!("tanh", gen10, |g: &mut Graph, x| Ok::<_, Error>(g.tanh(x))),
        unary!("softplus", gen10, |g: &mut Graph, x| Ok::<_, Error>(g.softplus(x))),
        unary!("sigmoid", gen10, |g: &mut Graph, x| Ok::<_, Error>(g.sigmoid(x))),
        unary!("scale", gen10, |g: &mut Graph, x| Ok::<_, Error>(g.scale(x, -1.7))),
        unary!("offset", gen10, |g: &mut Graph, x| Ok::<_, Error>(g.offset(x, 0.3))),
        unary!("reshape", gen10, |g: &mut Graph, x| g.reshape(x, &[5, 2])),
        unary!("log_softmax", |r| uniform(r, &[3, 4], -2.0, 2.0), |g: &mut Graph, x| g.log_softmax(x)),
        unary!("softmax", |r| uniform(r, &[3, 4], -2.0, 2.0), |g: &mut Graph, x| g.softmax(x)),
        unary!("sum", gen10, |g: &mut Graph, x| {
            let y = g.exp(x);
            Ok::<_, Error>(g.sum(y))
        }),
        unary!("mean", gen10, |g: &mut Graph, x| {
            let y = g.tanh(x);
            Ok::<_, Error>(g.mean(y))
        }),
        (
            "add_sub_mul_div_broadcast",
            |r| params(vec![("a", uniform(r, &[2, 3, 2, 2], -1.0, 1.0)), ("b", uniform(r, &[1, 3, 1, 1], 0.5, 2.0))]),
            |g, b, s| {
                let (x, y) = (b.get(g, "a")?, b.get(g, "b")?);
                let p = g.add(x, y)?;
                let q = g.sub(p, y)?;
                let m = g.mul(q, y)?;
                let d = g.div(m, y)?;
                let e = g.div(y, d)?;
                let t = g.mul(d, e)?;
                project(g, t, s)
            },
        ),
        (
            "squared_error",
            |r| params(vec![("a", uniform(r, &[5], -1.0, 1.0)), ("b", uniform(r, &[5], -1.0, 1.0))]),
            |g, b, _| {
                let (x, y) = (b.get(g, "a")?, b.get(g, "b")?);
                g.squared_error(x, y)
            },
        ),
        unary!("cross_entropy", |r| uniform(r, &[4, 3], -2.0, 2.0), |g: &mut Graph, x| g.cross_entropy(x, &[0, 2, 1, 2])),
        (
            "kl_divergence",
            |r| params(vec![("p", uniform(r, &[4, 3], -2.0, 2.0)), ("q", uniform(r, &[4, 3], -2.0, 2.0))]),
            |g, b, _| {
                let (p, q) = (b.get(g, "p")?, b.get(g, "q")?);
                g.kl_divergence(p, q, 2.0)
            },
        ),
        (
            "gdn",
            |r| params(vec![("x", off_kink(r, &[2, 3, 2, 2])), ("l.beta", uniform(r, &[3], -1.0, 1.0)), ("l.gamma", uniform(r, &[3, 3], -2.0, 0.0))]),
            |g, b, s| {
                let x = b.get(g, "x")?;
                let y = layer_graph(g, b, &LayerSpec::Gdn { channels: 3 }, "l.", x)?;
                project(g, y, s)
            },
        ),
        (
            "igdn",
            |r| params(vec![("x", off_kink(r, &[2, 3, 2, 2])), ("l.beta", uniform(r, &[3], -1.0, 1.0)), ("l.gamma", uniform(r, &[3, 3], -2.0, 0.0))]),
            |g, b, s| {
                let x = b.get(g, "x")?;
                let y = layer_graph(g, b, &LayerSpec::Igdn { channels: 3 }, "l.", x)?;
                project(g, y, s)
            },
        ),
        (
            "rate_bits",
            |r| {
                let mut p = init_prior(2, r.gen());
                for t in p.values_mut() {
                    for v in t.data_mut() {
                        *v += r.gen_range(-0.3..0.3);
                    }
                }
                p.insert("z".into(), uniform(r, &[1, 2, 2, 2], -3.0, 3.0));
                p
            },
            |g, b, _| {
                let z = b.get(g, "z")?;
                Ok(rate_graph(g, b, z)?.0)
            },
        ),
        (
            "kd_loss",
            |r| params(vec![("s", uniform(r, &[4, 3], -2.0, 2.0)), ("t", uniform(r, &[4, 3], -2.0, 2.0))]),
            |g, b, _| {
                let (s, t) = (b.get(g, "s")?, b.get(g, "t")?);
                kd_loss(g, s, t, &[2, 0, 1, 1], 0.3, 2.0)
            },
        ),
        (
            "rd_loss",
            |r| {
                let spec = tiny_student().expect("tiny spec");
                let mut p = Model::init(spec, r.gen()).expect("init").params;
                p.retain(|k, _| !k.starts_with("tail."));
                p
            },
            |g, b, s| {
                let spec = tiny_student()?;
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let x = g.constant(uniform(&mut rng, &[2, 3, 8, 8], 0.0, 1.0))?;
                let h = g.constant(uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0))?;
                let z = section_graph(g, b, &spec, Section::Encoder, x)?;
                let noise = g.constant(uniform(&mut rng, g.value(z).shape(), -0.5, 0.5))?;
                let zt = g.add(z, noise)?;
                Ok(rd_loss(g, b, &spec, h, zt, 0.7)?.loss)
            },
        ),
    ]
}

/// Every operation, `instances` random draws each.
pub fn suite(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (k, (op, inputs, build)) in cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let s = seed ^ ((k as u64) << 32) ^ i as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let p = inputs(&mut rng);
            let err = check(&p, &|g: &mut Graph, b: &mut Binder| build(g, b, s))?;
            worst = worst.max(err);
        }
        out.push(GradCheck { op, instances, max_rel_err: worst });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // x ↦ relu(x) evaluated where the harness sees a kink: the numeric and
        // analytic answers disagree, so the check must report a large error.
        let p = params(vec![("x", Tensor::from_vec(vec![0.0]))]);
        let err = check(&p, &|g: &mut Graph, b: &mut Binder| {
            let x = b.get(g, "x")?;
            let y = g.relu(x);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err > 0.1);
    }
}

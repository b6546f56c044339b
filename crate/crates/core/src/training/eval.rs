use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::layers::{argmax_rows, Bottleneck, Checkpoint, Model, Side};
use crate::quantizer::round_tensor;
use crate::split_runtime::client_encode;
use crate::tensor::Tensor;

/// One point on a rate–accuracy curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub run_id: String,
    pub beta: Option<f64>,
    pub beta_id: u16,
    /// Mean serialized frame size.
    pub bytes_per_sample: f64,
    pub bits_per_pixel: f64,
    pub accuracy: f64,
    /// Mean `−Σ log2 P(z)` under the continuous prior (entropic models only).
    pub analytic_bits_per_sample: Option<f64>,
    /// Mean range-coder output length in bits (entropic models only).
    pub coded_bits_per_sample: Option<f64>,
    pub params_mobile: usize,
    pub params_server: usize,
}

/// Top-1 accuracy of the deployed model (bottleneck quantization in place).
pub fn evaluate_accuracy(model: &Model, data: &Dataset, indices: &[usize], task: Task) -> Result<f64> {
    accuracy_with(model, data, indices, task, Model::predict_logits)
}

/// Top-1 accuracy with the bottleneck left in floating point.
pub fn evaluate_accuracy_unquantized(model: &Model, data: &Dataset, indices: &[usize], task: Task) -> Result<f64> {
    accuracy_with(model, data, indices, task, Model::predict_logits_float)
}

fn accuracy_with(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    task: Task,
    predict: fn(&Model, &Tensor) -> Result<Tensor>,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut correct = 0;
    for chunk in indices.chunks(100) {
        let pred = argmax_rows(&predict(model, &data.batch(chunk))?);
        let truth = data.targets(chunk, task);
        correct += pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Measures payload size on real frames and accuracy on the same samples.
pub fn eval_rd(run_id: &str, ckpt: &Checkpoint, data: &Dataset, indices: &[usize]) -> Result<RdPoint> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let model = &ckpt.model;
    let entropic = matches!(model.spec.bottleneck, Bottleneck::Entropic { .. });
    let prior = if entropic { Some(model.entropy_model()?) } else { None };
    let (mut bytes, mut analytic, mut coded) = (0usize, 0.0, 0usize);
    for &i in indices {
        let image = data.batch(&[i]);
        let frame = client_encode(ckpt, &image)?;
        bytes += frame.payload_bytes();
        coded += frame.bitstream.len() * 8;
        if let Some(p) = &prior {
            let z = round_tensor(&model.encoder_forward(&image)?);
            analytic += p.rate_bits(&z)?.bits;
        }
    }
    let n = indices.len() as f64;
    let [_, h, w] = model.spec.input_shape;
    let bytes_per_sample = bytes as f64 / n;
    Ok(RdPoint {
        run_id: run_id.to_string(),
        beta: ckpt.meta.beta,
        beta_id: ckpt.meta.beta_id,
        bytes_per_sample,
        bits_per_pixel: bytes_per_sample * 8.0 / (h * w) as f64,
        accuracy: evaluate_accuracy(model, data, indices, ckpt.meta.task)?,
        analytic_bits_per_sample: entropic.then_some(analytic / n),
        coded_bits_per_sample: entropic.then_some(coded as f64 / n),
        params_mobile: model.spec.count_params(Side::Mobile),
        params_server: model.spec.count_params(Side::Server),
    })
}

/// Bits spent at each latent position of one `[1, C, H, W]` image, summed over
/// channels: a `[h, w]` map whose total is the image's information content.
pub fn bit_allocation_latent(ckpt: &Checkpoint, image: &Tensor) -> Result<Tensor> {
    let model = &ckpt.model;
    let prior = model.entropy_model()?;
    if image.rank() != 4 || image.shape()[0] != 1 {
        return Err(Error::Shape(format!("expected one [1, C, H, W] image, got {:?}", image.shape())));
    }
    let z = round_tensor(&model.encoder_forward(image)?);
    let bits = prior.element_bits(&z)?;
    let (c, h, w) = (z.shape()[1], z.shape()[2], z.shape()[3]);
    let mut map = vec![0.0; h * w];
    for ch in 0..c {
        for (p, m) in map.iter_mut().enumerate() {
            *m += bits.data()[ch * h * w + p];
        }
    }
    Tensor::new(vec![h, w], map)
}

/// [`bit_allocation_latent`] upsampled (nearest) to the image grid and scaled to `[0, 1]`.
pub fn bit_allocation_map(ckpt: &Checkpoint, image: &Tensor) -> Result<Tensor> {
    let latent = bit_allocation_latent(ckpt, image)?;
    let (lh, lw) = (latent.shape()[0], latent.shape()[1]);
    let (ih, iw) = (image.shape()[2], image.shape()[3]);
    let max = latent.data().iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(ih * iw);
    for y in 0..ih {
        for x in 0..iw {
            let v = latent.data()[(y * lh / ih) * lw + x * lw / iw];
            out.push(if max > 0.0 { v / max } else { 0.0 });
        }
    }
    Tensor::new(vec![ih, iw], out)
}

//! Parameterized models and eager inference.

use crate::autodiff::optim::Params;
use crate::autodiff::Graph;
use crate::entropy_model::{self, EntropyModel};
use crate::error::{Error, Result};
use crate::quantizer::{dequantize_u8, quantize_u8, round_tensor};
use crate::tensor::Tensor;

use super::{init_params, section_graph, Binder, Bottleneck, ModelSpec, Section, Trainable};

/// A spec together with every tensor it needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
}

/// Seed offset for prior initialization, kept apart from the section seeds.
const PRIOR_SEED_OFFSET: u64 = 17;

/// Every parameter a spec requires, including the prior of an entropic bottleneck.
pub fn expected_params(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let mut v = spec.param_shapes();
    if let Bottleneck::Entropic { channels } = spec.bottleneck {
        v.extend(entropy_model::prior_param_shapes(channels));
    }
    v
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

impl Model {
    /// Checks that `params` holds exactly the tensors `spec` needs.
    pub fn new(spec: ModelSpec, params: Params) -> Result<Self> {
        spec.validate()?;
        let expected = expected_params(&spec);
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!("{name} has shape {:?}, spec says {shape:?}", t.shape())))
                }
                Some(t) => t.ensure_finite(name)?,
            }
        }
        if params.len() != expected.len() {
            let extra = params.keys().find(|k| !expected.iter().any(|(n, _)| n == *k));
            return Err(Error::Checkpoint(format!("unexpected parameter {}", extra.map_or("?", |s| s.as_str()))));
        }
        Ok(Self { spec, params })
    }

    /// Freshly initialized model.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut params = init_params(&spec, seed);
        if let Bottleneck::Entropic { channels } = spec.bottleneck {
            params.extend(entropy_model::init_prior(channels, seed.wrapping_add(PRIOR_SEED_OFFSET)));
        }
        Self::new(spec, params)
    }

    fn run(&self, section: Section, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, Trainable::Nothing);
        let v = g.constant(x.clone())?;
        let y = section_graph(&mut g, &mut b, &self.spec, section, v)?;
        Ok(g.value(y).clone())
    }

    fn check_batch(&self, x: &Tensor, per_sample: Vec<usize>, what: &str) -> Result<()> {
        if x.rank() != per_sample.len() + 1 || x.shape()[1..] != per_sample[..] {
            return Err(Error::Shape(format!("{what} expects [N, {per_sample:?}], got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Continuous (pre-quantization) mobile-side output for `[N, C, H, W]` images.
    pub fn encoder_forward(&self, image: &Tensor) -> Result<Tensor> {
        self.check_batch(image, self.spec.input_shape.to_vec(), "encoder")?;
        self.run(Section::Encoder, image)
    }

    /// Reconstructed split feature `ĥ` from (already quantized) latents.
    pub fn decoder_forward(&self, z: &Tensor) -> Result<Tensor> {
        self.check_batch(z, self.spec.encoder_output_shape()?.batched(0)[1..].to_vec(), "decoder")?;
        self.run(Section::Decoder, z)
    }

    /// Logits from the split feature.
    pub fn tail_forward(&self, h: &Tensor) -> Result<Tensor> {
        self.check_batch(h, self.spec.split_feature_shape()?.batched(0)[1..].to_vec(), "tail")?;
        self.run(Section::Tail, h)
    }

    /// What the server receives for an encoder output: rounded latents,
    /// per-sample 8-bit reconstructions, or the features themselves.
    pub fn transmit(&self, z: &Tensor) -> Result<Tensor> {
        match self.spec.bottleneck {
            Bottleneck::Identity => Ok(z.clone()),
            Bottleneck::Entropic { .. } => Ok(round_tensor(z)),
            Bottleneck::AffineU8 { .. } => {
                let n = z.shape()[0];
                let items: Vec<Tensor> = (0..n)
                    .map(|i| quantize_u8(&z.batch_item(i)).map(|q| dequantize_u8(&q)))
                    .collect::<Result<_>>()?;
                Tensor::stack_batch(&items)
            }
        }
    }

    /// Monolithic inference with the deployed bottleneck in place.
    pub fn predict_logits(&self, image: &Tensor) -> Result<Tensor> {
        let z = self.encoder_forward(image)?;
        let zq = self.transmit(&z)?;
        let h = self.decoder_forward(&zq)?;
        self.tail_forward(&h)
    }

    /// Inference without bottleneck quantization (float features end to end).
    pub fn predict_logits_float(&self, image: &Tensor) -> Result<Tensor> {
        let z = self.encoder_forward(image)?;
        let h = self.decoder_forward(&z)?;
        self.tail_forward(&h)
    }

    pub fn entropy_model(&self) -> Result<EntropyModel> {
        match self.spec.bottleneck {
            Bottleneck::Entropic { .. } => EntropyModel::from_params(&self.params),
            _ => Err(Error::InvalidArgument("model has no entropy bottleneck".into())),
        }
    }

    /// Hash of every parameter in one section (`"encoder"`, `"decoder"`, `"tail"`, `"prior"`).
    pub fn section_hash(&self, prefix: &str) -> String {
        super::params_hash(&self.params, &format!("{prefix}."))
    }
}

/// Student with fresh encoder/decoder (and prior) whose tail is copied from the teacher.
pub fn build_student(teacher: &Model, student: ModelSpec, seed: u64) -> Result<Model> {
    if student.input_shape != teacher.spec.input_shape {
        return Err(Error::Shape(format!(
            "student input {:?} differs from teacher input {:?}",
            student.input_shape, teacher.spec.input_shape
        )));
    }
    if student.decoder_output_shape()? != teacher.spec.split_feature_shape()? {
        return Err(Error::Shape(format!(
            "student decoder produces {:?}, teacher split feature is {:?}",
            student.decoder_output_shape()?,
            teacher.spec.split_feature_shape()?
        )));
    }
    if student.tail != teacher.spec.tail {
        return Err(Error::Shape("student tail layers differ from the teacher tail".into()));
    }
    let mut fresh = Model::init(student, seed)?;
    for (name, t) in &teacher.params {
        if name.starts_with("tail.") {
            fresh.params.insert(name.clone(), t.clone());
        }
    }
    Model::new(fresh.spec, fresh.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ActShape, TeacherWidths};

    fn teacher() -> Model {
        Model::init(ModelSpec::teacher([3, 16, 16], TeacherWidths { stage1: 4, stage2: 8 }, 5), 3).unwrap()
    }

    fn image(n: usize) -> Tensor {
        Tensor::new(vec![n, 3, 16, 16], (0..n * 768).map(|i| ((i * 37 % 101) as f64) / 101.0).collect()).unwrap()
    }

    #[test]
    fn student_copies_tail_and_reinitializes_the_rest() {
        let t = teacher();
        let before = t.clone();
        let spec = ModelSpec::entropic_student(&t.spec, 4, 6).unwrap();
        let s = build_student(&t, spec, 9).unwrap();
        assert_eq!(t, before);
        assert_eq!(s.section_hash("tail"), t.section_hash("tail"));
        for (name, p) in &s.params {
            if name.starts_with("encoder.") && name.ends_with("weight") {
                assert!(t.params.values().all(|q| q != p), "{name} collides with a teacher tensor");
            }
        }
    }

    #[test]
    fn oracle_decoder_reproduces_teacher_logits() {
        let t = teacher();
        let s = build_student(&t, ModelSpec::entropic_student(&t.spec, 4, 6).unwrap(), 1).unwrap();
        let x = image(2);
        let h = t.encoder_forward(&x).unwrap();
        assert_eq!(s.tail_forward(&h).unwrap(), t.predict_logits(&x).unwrap());
    }

    #[test]
    fn latent_shape_follows_encoder_stride() {
        let t = teacher();
        let s = Model::init(ModelSpec::entropic_student(&t.spec, 4, 6).unwrap(), 0).unwrap();
        let z = s.encoder_forward(&image(1)).unwrap();
        assert_eq!(z.shape(), &[1, 4, 4, 4]);
        assert_eq!(s.spec.encoder_output_shape().unwrap(), ActShape::Map { c: 4, h: 4, w: 4 });
        assert!(s.encoder_forward(&Tensor::zeros(vec![1, 3, 8, 8])).is_err());
        assert!(s.decoder_forward(&Tensor::zeros(vec![1, 3, 4, 4])).is_err());
    }

    #[test]
    fn zero_weights_give_zero_latent() {
        let t = teacher();
        let mut s = Model::init(ModelSpec::entropic_student(&t.spec, 4, 6).unwrap(), 0).unwrap();
        for (name, p) in s.params.iter_mut() {
            if name.starts_with("encoder.") && (name.ends_with("weight") || name.ends_with("bias")) {
                *p = Tensor::zeros(p.shape().to_vec());
            }
        }
        let z = s.encoder_forward(&Tensor::zeros(vec![1, 3, 16, 16])).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        let h = s.decoder_forward(&Tensor::zeros(vec![1, 4, 4, 4])).unwrap();
        assert_eq!(h.shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn batch_and_single_inference_agree_bitwise() {
        let t = teacher();
        let s = build_student(&t, ModelSpec::entropic_student(&t.spec, 4, 6).unwrap(), 1).unwrap();
        let x = image(3);
        let all = s.predict_logits(&x).unwrap();
        for i in 0..3 {
            let one = s.predict_logits(&x.batch_item(i).reshape(vec![1, 3, 16, 16]).unwrap()).unwrap();
            assert_eq!(one.data(), &all.data()[i * 5..(i + 1) * 5]);
        }
    }

    #[test]
    fn rejects_missing_or_misshapen_params() {
        let t = teacher();
        let mut p = t.params.clone();
        p.remove("tail.2.bias");
        assert!(Model::new(t.spec.clone(), p).is_err());
        let mut p = t.params.clone();
        p.insert("tail.2.bias".into(), Tensor::zeros(vec![4]));
        assert!(Model::new(t.spec.clone(), p).is_err());
        let mut p = t.params.clone();
        p.insert("stray".into(), Tensor::zeros(vec![1]));
        assert!(Model::new(t.spec, p).is_err());
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let l = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.5, 2.0, -1.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&l), vec![1, 0]);
    }
}

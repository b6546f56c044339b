//! Deployed split pipeline: client encode → channel → server decode and
//! inference, with latency accounting.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coder::{self, Bitstream};
use crate::data::Dataset;
use crate::entropy_model::CdfTable;
use crate::error::{Error, Result};
use crate::layers::{argmax_rows, Bottleneck, Checkpoint, Model, Side};
use crate::quantizer::{quantize_u8, round_quantize, AffineQuant8};
use crate::tensor::Tensor;

mod frame;

pub use frame::{Codec, PayloadFrame, FIXED_OVERHEAD, HEADER_LEN, MAGIC, VERSION};

/// Link between client and server.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub data_rate_bps: f64,
    #[serde(default)]
    pub overhead_bytes: usize,
    #[serde(default)]
    pub loss_probability: f64,
}

impl Default for ChannelProfile {
    fn default() -> Self {
        Self { data_rate_bps: 37_500.0, overhead_bytes: 0, loss_probability: 0.0 }
    }
}

impl ChannelProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_rate_bps.is_finite() && self.data_rate_bps > 0.0) {
            return Err(Error::Config(format!("data rate must be positive, got {}", self.data_rate_bps)));
        }
        if !(0.0..1.0).contains(&self.loss_probability) {
            return Err(Error::Config(format!("loss probability must be in [0, 1), got {}", self.loss_probability)));
        }
        Ok(())
    }
}

/// Transmission delay of a payload: `(bytes + overhead)·8 / rate`.
pub fn simulate_channel(payload_bytes: usize, profile: &ChannelProfile) -> Result<f64> {
    comm_seconds(payload_bytes as f64, profile)
}

/// [`simulate_channel`] for fractional (e.g. mean) payload sizes.
pub fn comm_seconds(payload_bytes: f64, profile: &ChannelProfile) -> Result<f64> {
    profile.validate()?;
    Ok((payload_bytes + profile.overhead_bytes as f64) * 8.0 / profile.data_rate_bps)
}

/// Compute speed of one device under the per-MAC cost model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    pub name: String,
    pub seconds_per_mac: f64,
    #[serde(default)]
    pub fixed_seconds: f64,
}

impl ComputeProfile {
    /// A weak embedded CPU at ~1 GMAC/s.
    pub fn mobile() -> Self {
        Self { name: "mobile".into(), seconds_per_mac: 1e-9, fixed_seconds: 0.0 }
    }

    /// A server at ~100 GMAC/s.
    pub fn server() -> Self {
        Self { name: "server".into(), seconds_per_mac: 1e-11, fixed_seconds: 0.0 }
    }

    pub fn seconds(&self, macs: u64) -> f64 {
        self.fixed_seconds + self.seconds_per_mac * macs as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.seconds_per_mac >= 0.0 && self.fixed_seconds >= 0.0) {
            return Err(Error::Config(format!("compute profile {} has negative costs", self.name)));
        }
        Ok(())
    }
}

/// How encode/server times are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Deterministic: MACs times the device's cost per MAC.
    CostModel,
    /// Measured wall time of this process.
    WallClock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub channel: ChannelProfile,
    pub mobile: ComputeProfile,
    pub server: ComputeProfile,
    pub timing: Timing,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            channel: ChannelProfile::default(),
            mobile: ComputeProfile::mobile(),
            server: ComputeProfile::server(),
            timing: Timing::CostModel,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.mobile.validate()?;
        self.server.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub encode_s: f64,
    pub comm_s: f64,
    pub server_s: f64,
    pub total_s: f64,
    pub payload_bytes: usize,
}

impl LatencyReport {
    pub fn new(encode_s: f64, comm_s: f64, server_s: f64, payload_bytes: usize) -> Self {
        Self { encode_s, comm_s, server_s, total_s: encode_s + comm_s + server_s, payload_bytes }
    }

    pub fn is_additive(&self) -> bool {
        self.total_s == self.encode_s + self.comm_s + self.server_s
    }
}

fn single(image: &Tensor) -> Result<()> {
    if image.rank() != 4 || image.shape()[0] != 1 {
        return Err(Error::Shape(format!("expected one [1, C, H, W] image, got {:?}", image.shape())));
    }
    Ok(())
}

fn map_shape(t: &Tensor) -> [usize; 3] {
    let s = t.shape();
    [s[1], s[2], s[3]]
}

/// Frame carrying an 8-bit image unchanged.
pub fn raw_frame(pixels: &[u8], shape: [usize; 3]) -> Result<PayloadFrame> {
    if pixels.len() != shape.iter().product::<usize>() {
        return Err(Error::Shape(format!("{} pixels for shape {shape:?}", pixels.len())));
    }
    PayloadFrame::new(Codec::Raw, shape, 0, Vec::new(), pixels.to_vec())
}

fn image_to_u8(image: &Tensor) -> Vec<u8> {
    image.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

fn crbq_bitstream(q: &AffineQuant8) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + q.q.len());
    b.extend_from_slice(&q.scale.to_be_bytes());
    b.extend_from_slice(&q.offset.to_be_bytes());
    b.extend_from_slice(&q.q);
    b
}

/// Mobile side: encoder, quantizer and coder for one `[1, C, H, W]` image.
///
/// A model without a bottleneck (a teacher) sends the raw 8-bit image.
pub fn client_encode(ckpt: &Checkpoint, image: &Tensor) -> Result<PayloadFrame> {
    single(image)?;
    let model = &ckpt.model;
    match model.spec.bottleneck {
        Bottleneck::Identity => raw_frame(&image_to_u8(image), map_shape(image)),
        Bottleneck::Entropic { .. } => {
            let tables = ckpt
                .tables
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("entropic checkpoint has no exported tables".into()))?;
            let z = model.encoder_forward(image)?;
            let code = round_quantize(&z, ckpt.meta.beta_id)?;
            let bits = coder::encode(&code, tables)?;
            PayloadFrame::new(Codec::Entropic, code.shape, code.beta_id, code.escapes, bits.bytes)
        }
        Bottleneck::AffineU8 { .. } => {
            let z = model.encoder_forward(image)?;
            let q = quantize_u8(&z.batch_item(0))?;
            PayloadFrame::new(Codec::CrbqU8, map_shape(&z), 0, Vec::new(), crbq_bitstream(&q))
        }
    }
}

fn expect_shape(frame: &PayloadFrame, expected: [usize; 3]) -> Result<()> {
    if frame.shape() != expected {
        return Err(Error::Framing(format!("frame shape {:?} but model expects {expected:?}", frame.shape())));
    }
    Ok(())
}

/// Reconstructs the tensor the server-side network consumes: latents for
/// compressed codecs, the image for raw frames.
pub fn decode_payload(model: &Model, tables: Option<&CdfTable>, frame: &PayloadFrame) -> Result<Tensor> {
    let enc = model.spec.encoder_output_shape()?.batched(1);
    let enc_shape = [enc[1], enc.get(2).copied().unwrap_or(1), enc.get(3).copied().unwrap_or(1)];
    let [c, h, w] = frame.shape();
    match (frame.codec, model.spec.bottleneck) {
        (Codec::Entropic, Bottleneck::Entropic { .. }) => {
            expect_shape(frame, enc_shape)?;
            let tables = tables.ok_or_else(|| Error::Checkpoint("no tables to decode with".into()))?;
            let bits = Bitstream { bytes: frame.bitstream.clone() };
            let code = coder::decode(&bits, tables, frame.shape(), &frame.escapes, frame.beta_id)?;
            Ok(code.to_tensor())
        }
        (Codec::CrbqU8, Bottleneck::AffineU8 { .. }) => {
            expect_shape(frame, enc_shape)?;
            let b = &frame.bitstream;
            if b.len() != 8 + c * h * w {
                return Err(Error::Framing(format!("crbq bitstream of {} bytes for {} elements", b.len(), c * h * w)));
            }
            let scale = f32::from_be_bytes(b[0..4].try_into().unwrap()) as f64;
            let offset = f32::from_be_bytes(b[4..8].try_into().unwrap()) as f64;
            let data = b[8..].iter().map(|&q| offset + q as f64 * scale).collect();
            Tensor::new(vec![1, c, h, w], data)
        }
        (Codec::Raw, _) => {
            expect_shape(frame, model.spec.input_shape)?;
            if frame.bitstream.len() != c * h * w {
                return Err(Error::Framing("raw frame length does not match its shape".into()));
            }
            Tensor::new(vec![1, c, h, w], frame.bitstream.iter().map(|&p| p as f64 / 255.0).collect())
        }
        (codec, b) => Err(Error::Framing(format!("{codec:?} frame cannot feed a {b:?} bottleneck"))),
    }
}

/// Server side: decode a frame and run decoder plus tail. Returns `[1, K]` logits.
pub fn server_decode_infer(ckpt: &Checkpoint, frame: &PayloadFrame) -> Result<Tensor> {
    let x = decode_payload(&ckpt.model, ckpt.tables.as_ref(), frame)?;
    match frame.codec {
        Codec::Raw => ckpt.model.predict_logits(&x),
        _ => {
            let h = ckpt.model.decoder_forward(&x)?;
            ckpt.model.tail_forward(&h)
        }
    }
}

/// Server side from raw bytes: parse (CRC first) then infer.
pub fn server_handle(ckpt: &Checkpoint, bytes: &[u8]) -> Result<Tensor> {
    server_decode_infer(ckpt, &PayloadFrame::parse(bytes)?)
}

/// MACs spent on each side for a frame type.
fn side_macs(model: &Model, codec: Codec) -> Result<(u64, u64)> {
    let total = model.spec.macs(Side::Mobile)? + model.spec.macs(Side::Server)?;
    Ok(match codec {
        Codec::Raw => (0, total),
        _ => (model.spec.macs(Side::Mobile)?, model.spec.macs(Side::Server)?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcess,
    Socket,
}

impl std::str::FromStr for Transport {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-process" | "in_process" | "inprocess" => Ok(Transport::InProcess),
            "socket" | "tcp" => Ok(Transport::Socket),
            _ => Err(Error::Config(format!("unknown transport {s:?} (expected in-process or socket)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutcome {
    pub index: usize,
    /// `None` when the channel dropped the frame.
    pub prediction: Option<usize>,
    pub logits: Option<Vec<f64>>,
    pub report: LatencyReport,
}

/// Server answers: logits and measured server time, or an error message.
enum Reply {
    Ok { logits: Vec<f64>, server_s: f64 },
    Err(String),
}

fn serve_one(ckpt: &Checkpoint, bytes: &[u8]) -> Reply {
    let t0 = Instant::now();
    match server_handle(ckpt, bytes) {
        Ok(l) => Reply::Ok { logits: l.into_data(), server_s: t0.elapsed().as_secs_f64() },
        Err(e) => Reply::Err(e.to_string()),
    }
}

fn write_reply(w: &mut impl Write, r: &Reply) -> std::io::Result<()> {
    match r {
        Reply::Ok { logits, server_s } => {
            w.write_all(&[0])?;
            w.write_all(&server_s.to_be_bytes())?;
            w.write_all(&(logits.len() as u32).to_be_bytes())?;
            for v in logits {
                w.write_all(&v.to_be_bytes())?;
            }
        }
        Reply::Err(msg) => {
            w.write_all(&[1])?;
            w.write_all(&(msg.len() as u32).to_be_bytes())?;
            w.write_all(msg.as_bytes())?;
        }
    }
    w.flush()
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn read_reply(r: &mut impl Read) -> std::io::Result<Reply> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    if tag[0] == 0 {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let server_s = f64::from_be_bytes(b);
        let n = read_u32(r)? as usize;
        let mut logits = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b)?;
            logits.push(f64::from_be_bytes(b));
        }
        Ok(Reply::Ok { logits, server_s })
    } else {
        let n = read_u32(r)? as usize;
        let mut msg = vec![0u8; n];
        r.read_exact(&mut msg)?;
        Ok(Reply::Err(String::from_utf8_lossy(&msg).into_owned()))
    }
}

/// Serves length-prefixed frames on one connection until a zero-length message.
fn serve_connection(ckpt: &Checkpoint, stream: TcpStream) -> std::io::Result<()> {
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::new(stream);
    loop {
        let n = read_u32(&mut r)? as usize;
        if n == 0 {
            return Ok(());
        }
        let mut frame = vec![0u8; n];
        r.read_exact(&mut frame)?;
        write_reply(&mut w, &serve_one(ckpt, &frame))?;
    }
}

enum Link {
    InProcess,
    Socket { r: BufReader<TcpStream>, w: BufWriter<TcpStream> },
}

impl Link {
    fn exchange(&mut self, ckpt: &Checkpoint, bytes: &[u8]) -> Result<Reply> {
        match self {
            Link::InProcess => Ok(serve_one(ckpt, bytes)),
            Link::Socket { r, w } => {
                w.write_all(&(bytes.len() as u32).to_be_bytes())?;
                w.write_all(bytes)?;
                w.flush()?;
                Ok(read_reply(r)?)
            }
        }
    }
}

/// Runs the split pipeline over dataset samples.
///
/// The client and server communicate only through serialized frames; in
/// socket mode the server runs on its own thread behind a loopback TCP
/// connection. Frames dropped by a lossy channel yield no prediction.
pub fn run_split(
    data: &Dataset,
    indices: &[usize],
    ckpt: &Checkpoint,
    cfg: &SplitConfig,
    transport: Transport,
    seed: u64,
) -> Result<Vec<SplitOutcome>> {
    cfg.validate()?;
    if data.shape != ckpt.model.spec.input_shape {
        return Err(Error::Shape(format!(
            "dataset images are {:?}, model expects {:?}",
            data.shape, ckpt.model.spec.input_shape
        )));
    }
    std::thread::scope(|scope| -> Result<Vec<SplitOutcome>> {
        let (mut link, server) = match transport {
            Transport::InProcess => (Link::InProcess, None),
            Transport::Socket => {
                let listener = TcpListener::bind("127.0.0.1:0")?;
                let addr = listener.local_addr()?;
                let handle = scope.spawn(move || -> std::io::Result<()> {
                    let (stream, _) = listener.accept()?;
                    stream.set_nodelay(true)?;
                    serve_connection(ckpt, stream)
                });
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                let link = Link::Socket { r: BufReader::new(stream.try_clone()?), w: BufWriter::new(stream) };
                (link, Some(handle))
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let image = data.batch(&[i]);
            let t0 = Instant::now();
            let frame = client_encode(ckpt, &image)?;
            let bytes = frame.to_bytes();
            let measured_encode = t0.elapsed().as_secs_f64();
            let comm_s = simulate_channel(bytes.len(), &cfg.channel)?;
            let (mobile_macs, server_macs) = side_macs(&ckpt.model, frame.codec)?;
            let lost = cfg.channel.loss_probability > 0.0 && rng.gen::<f64>() < cfg.channel.loss_probability;
            let encode_s = match cfg.timing {
                Timing::CostModel => cfg.mobile.seconds(mobile_macs),
                Timing::WallClock => measured_encode,
            };
            if lost {
                out.push(SplitOutcome {
                    index: i,
                    prediction: None,
                    logits: None,
                    report: LatencyReport::new(encode_s, comm_s, 0.0, bytes.len()),
                });
                continue;
            }
            match link.exchange(ckpt, &bytes)? {
                Reply::Ok { logits, server_s } => {
                    let server_s = match cfg.timing {
                        Timing::CostModel => cfg.server.seconds(server_macs),
                        Timing::WallClock => server_s,
                    };
                    let k = logits.len();
                    let pred = argmax_rows(&Tensor::new(vec![1, k], logits.clone())?)[0];
                    out.push(SplitOutcome {
                        index: i,
                        prediction: Some(pred),
                        logits: Some(logits),
                        report: LatencyReport::new(encode_s, comm_s, server_s, bytes.len()),
                    });
                }
                Reply::Err(msg) => return Err(Error::Transport(format!("server rejected sample {i}: {msg}"))),
            }
        }
        if let Link::Socket { w, .. } = &mut link {
            w.write_all(&0u32.to_be_bytes())?;
            w.flush()?;
        }
        drop(link);
        if let Some(h) = server {
            h.join().map_err(|_| Error::Transport("server thread panicked".into()))??;
        }
        Ok(out)
    })
}

/// Mean and percentiles over delivered samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub delivered: usize,
    pub mean_payload_bytes: f64,
    pub mean_encode_s: f64,
    pub mean_comm_s: f64,
    pub mean_server_s: f64,
    pub mean_total_s: f64,
    pub p50_total_s: f64,
    pub p95_total_s: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

pub fn summarize(outcomes: &[SplitOutcome]) -> LatencySummary {
    let n = outcomes.len().max(1) as f64;
    let mean = |f: &dyn Fn(&LatencyReport) -> f64| outcomes.iter().map(|o| f(&o.report)).sum::<f64>() / n;
    let mut totals: Vec<f64> = outcomes.iter().map(|o| o.report.total_s).collect();
    totals.sort_by(f64::total_cmp);
    LatencySummary {
        samples: outcomes.len(),
        delivered: outcomes.iter().filter(|o| o.prediction.is_some()).count(),
        mean_payload_bytes: mean(&|r| r.payload_bytes as f64),
        mean_encode_s: mean(&|r| r.encode_s),
        mean_comm_s: mean(&|r| r.comm_s),
        mean_server_s: mean(&|r| r.server_s),
        mean_total_s: mean(&|r| r.total_s),
        p50_total_s: percentile(&totals, 0.5),
        p95_total_s: percentile(&totals, 0.95),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Whole teacher on the mobile device.
    Local,
    /// Raw image sent to the server, teacher runs there.
    Edge,
    /// Student encoder on the device, compressed latents sent.
    Split,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Local => "local",
            Scenario::Edge => "edge",
            Scenario::Split => "split",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: Scenario,
    pub run_id: String,
    pub beta: Option<f64>,
    pub mean_payload_bytes: f64,
    pub mean_encode_s: f64,
    pub mean_comm_s: f64,
    pub mean_server_s: f64,
    pub mean_total_s: f64,
    pub accuracy: f64,
}

fn accuracy_of(data: &Dataset, outcomes: &[SplitOutcome]) -> f64 {
    let correct = outcomes
        .iter()
        .filter(|o| o.prediction == Some(data.samples[o.index].label as usize))
        .count();
    correct as f64 / outcomes.len().max(1) as f64
}

/// Local, edge and split latency/accuracy for a teacher and trained students.
pub fn compare_scenarios(
    data: &Dataset,
    indices: &[usize],
    teacher: &Checkpoint,
    students: &[(String, &Checkpoint)],
    cfg: &SplitConfig,
) -> Result<Vec<ScenarioRow>> {
    cfg.validate()?;
    let row = |scenario, run_id: &str, beta, s: &LatencySummary, acc| ScenarioRow {
        scenario,
        run_id: run_id.to_string(),
        beta,
        mean_payload_bytes: s.mean_payload_bytes,
        mean_encode_s: s.mean_encode_s,
        mean_comm_s: s.mean_comm_s,
        mean_server_s: s.mean_server_s,
        mean_total_s: s.mean_total_s,
        accuracy: acc,
    };
    let lossless = SplitConfig { channel: ChannelProfile { loss_probability: 0.0, ..cfg.channel }, ..cfg.clone() };
    let edge = run_split(data, indices, teacher, &lossless, Transport::InProcess, 0)?;
    let edge_summary = summarize(&edge);
    let edge_acc = accuracy_of(data, &edge);
    let teacher_macs = teacher.model.spec.macs(Side::Mobile)? + teacher.model.spec.macs(Side::Server)?;
    let local_encode = match cfg.timing {
        Timing::CostModel => cfg.mobile.seconds(teacher_macs),
        Timing::WallClock => {
            let t0 = Instant::now();
            for &i in indices {
                teacher.model.predict_logits(&data.batch(&[i]))?;
            }
            t0.elapsed().as_secs_f64() / indices.len().max(1) as f64
        }
    };
    let local = LatencySummary {
        mean_payload_bytes: 0.0,
        mean_encode_s: local_encode,
        mean_comm_s: 0.0,
        mean_server_s: 0.0,
        mean_total_s: local_encode,
        ..edge_summary
    };
    let mut rows = vec![
        row(Scenario::Local, "teacher", None, &local, edge_acc),
        row(Scenario::Edge, "teacher", None, &edge_summary, edge_acc),
    ];
    for (run_id, ckpt) in students {
        let out = run_split(data, indices, ckpt, &lossless, Transport::InProcess, 0)?;
        rows.push(row(Scenario::Split, run_id, ckpt.meta.beta, &summarize(&out), accuracy_of(data, &out)));
    }
    Ok(rows)
}

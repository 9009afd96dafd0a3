//! Binary model file.
//!
//! Little-endian throughout:
//!
//! ```text
//! "SELN" | version u32 | total length u64
//! hyperparameters | K u32 | L u32 | z_dim u32 | h_dim u32 | d u32
//! partition layout
//! encoder | decoder | per local: tau net, embedding net, decoder weights, decoder biases
//! CRC32 of everything before it
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::model::{AutoEncoder, LocalEstimator, SelNetModel};
use super::{Hyper, TauInput};
use crate::error::{Error, Result};
use crate::nnet::{Activation, Dense, DenseNet};
use crate::partition::{BallRegion, Cluster, LayoutKind, PartitionLayout, ThresholdSpace};

pub const MODEL_MAGIC: [u8; 4] = *b"SELN";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const FRAME: usize = 4 + 4 + 8;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
    fn usizes(&mut self, vs: &[usize]) {
        self.u64(vs.len());
        for &v in vs {
            self.u64(v);
        }
    }

    fn net(&mut self, net: &DenseNet) {
        self.u32(net.layers().len());
        for layer in net.layers() {
            self.u32(layer.in_dim());
            self.u32(layer.out_dim());
            self.u8(layer.activation.code());
            self.f64s(layer.weight.iter());
            self.f64s(layer.bias.iter());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Malformed(format!("model body ends early at byte {}", self.pos))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Malformed(format!("count {v} too large")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Malformed("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.u64()?;
        if n > self.buf.len() {
            return Err(Error::Malformed(format!("list of {n} entries cannot fit")));
        }
        (0..n).map(|_| self.u64()).collect()
    }

    fn net(&mut self) -> Result<DenseNet> {
        let n = self.u32()?;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let in_dim = self.u32()?;
            let out_dim = self.u32()?;
            let code = self.u8()?;
            let activation = Activation::from_code(code).ok_or_else(|| Error::Malformed(format!("activation code {code}")))?;
            let count = in_dim.checked_mul(out_dim).ok_or_else(|| Error::Malformed("layer size overflow".into()))?;
            let weight = Array2::from_shape_vec((out_dim, in_dim), self.f64s(count)?).expect("length checked");
            let bias = Array1::from(self.f64s(out_dim)?);
            layers.push(Dense {
                weight,
                bias,
                activation,
            });
        }
        DenseNet::from_layers(layers)
    }
}

fn tau_input_code(t: TauInput) -> u8 {
    match t {
        TauInput::Query => 0,
        TauInput::Constant => 1,
    }
}

/// Serializes `model` to bytes.
pub fn encode_model(model: &SelNetModel) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&MODEL_MAGIC);
    w.u32(MODEL_FORMAT_VERSION as usize);
    w.u64(0);

    let h = &model.hyper;
    w.f64s([h.t_max, h.eps_norm, h.eps_log, h.delta_huber, h.lambda_ae, h.beta_joint, h.learning_rate].iter());
    w.u64(h.batch_size);
    w.u8(tau_input_code(h.tau_input));

    w.u32(model.k());
    w.u32(h.control_points);
    w.u32(model.ae.z_dim());
    w.u32(model.locals[0].h_dim());
    w.u32(model.input_dim());

    let layout = &model.layout;
    w.u8(match layout.kind {
        LayoutKind::Metric => 0,
        LayoutKind::Random => 1,
    });
    w.u8(match layout.space {
        ThresholdSpace::Euclidean => 0,
        ThresholdSpace::CosineOnSphere => 1,
    });
    w.f64(layout.ratio);
    for c in &layout.clusters {
        w.usizes(&c.members);
        w.u32(c.balls.len());
        for b in &c.balls {
            w.f64(b.radius);
            w.u32(b.center.len());
            w.f64s(b.center.iter());
            w.usizes(&b.members);
        }
    }

    w.net(&model.ae.encoder);
    w.net(&model.ae.decoder);
    for l in &model.locals {
        w.net(&l.tau_net);
        w.net(&l.m_net);
        w.f64s(l.dec_w.iter());
        w.f64s(l.dec_b.iter());
    }

    let total = w.buf.len() + 4;
    w.buf[8..16].copy_from_slice(&(total as u64).to_le_bytes());
    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    w.buf
}

/// Parses bytes produced by [`encode_model`].
pub fn decode_model(buf: &[u8]) -> Result<SelNetModel> {
    if buf.len() < 4 {
        return Err(Error::Truncated("model header".into()));
    }
    if buf[..4] != MODEL_MAGIC {
        return Err(Error::BadMagic { expected: MODEL_MAGIC });
    }
    if buf.len() < FRAME + 4 {
        return Err(Error::Truncated("model header".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let total = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    if (buf.len() as u64) < total {
        return Err(Error::Truncated(format!("model: {} of {total} bytes", buf.len())));
    }
    if (buf.len() as u64) > total || total < (FRAME + 4) as u64 {
        return Err(Error::Malformed(format!("model length field {total} vs file size {}", buf.len())));
    }
    let body_end = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader {
        buf: &buf[..body_end],
        pos: FRAME,
    };
    let vals = r.f64s(7)?;
    let batch_size = r.u64()?;
    let tau_input = match r.u8()? {
        0 => TauInput::Query,
        1 => TauInput::Constant,
        c => return Err(Error::Malformed(format!("tau input code {c}"))),
    };
    let k = r.u32()?;
    let control_points = r.u32()?;
    let z_dim = r.u32()?;
    let h_dim = r.u32()?;
    let d = r.u32()?;
    let hyper = Hyper {
        control_points,
        t_max: vals[0],
        eps_norm: vals[1],
        eps_log: vals[2],
        delta_huber: vals[3],
        lambda_ae: vals[4],
        beta_joint: vals[5],
        learning_rate: vals[6],
        batch_size,
        tau_input,
    };

    let kind = match r.u8()? {
        0 => LayoutKind::Metric,
        1 => LayoutKind::Random,
        c => return Err(Error::Malformed(format!("layout kind code {c}"))),
    };
    let space = match r.u8()? {
        0 => ThresholdSpace::Euclidean,
        1 => ThresholdSpace::CosineOnSphere,
        c => return Err(Error::Malformed(format!("threshold space code {c}"))),
    };
    let ratio = r.f64()?;
    if k == 0 || k > buf.len() {
        return Err(Error::Malformed(format!("cluster count {k}")));
    }
    let mut clusters = Vec::with_capacity(k);
    for _ in 0..k {
        let members = r.usizes()?;
        let nb = r.u32()?;
        let mut balls = Vec::new();
        for _ in 0..nb {
            let radius = r.f64()?;
            let len = r.u32()?;
            let center = r.f64s(len)?;
            let members = r.usizes()?;
            balls.push(BallRegion { members, center, radius });
        }
        clusters.push(Cluster { members, balls });
    }
    let layout = PartitionLayout {
        clusters,
        kind,
        ratio,
        space,
    };

    let ae = AutoEncoder::from_parts(r.net()?, r.net()?)?;
    let slots = control_points + 2;
    let mut locals = Vec::with_capacity(k);
    for _ in 0..k {
        let tau_net = r.net()?;
        let m_net = r.net()?;
        let dec_w = Array2::from_shape_vec((slots, h_dim), r.f64s(slots * h_dim)?).expect("length checked");
        let dec_b = Array1::from(r.f64s(slots)?);
        locals.push(LocalEstimator::from_parts(tau_net, m_net, dec_w, dec_b)?);
    }
    if r.pos != body_end {
        return Err(Error::Malformed(format!("{} unread bytes in model body", body_end - r.pos)));
    }
    if ae.z_dim() != z_dim || ae.encoder.input_dim() != d {
        return Err(Error::Malformed("header dimensions disagree with the stored networks".into()));
    }
    SelNetModel::from_parts(ae, locals, layout, hyper)
}

/// Writes the model to `path` through a temporary file in the same directory.
pub fn save_model(model: &SelNetModel, path: &Path) -> Result<()> {
    let bytes = encode_model(model);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SelNetModel> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{Architecture, ThresholdEstimator};
    use crate::oracle::{DistanceKind, VectorDataset};
    use crate::partition::partition_metric;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(tau_input: TauInput) -> SelNetModel {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ds = VectorDataset::from_rows(&rows, DistanceKind::Euclidean).unwrap();
        let layout = partition_metric(&ds, 3, 0.1, 1).unwrap();
        let arch = Architecture {
            z_dim: 4,
            h_dim: 3,
            ae_hidden: vec![6, 5],
            tau_hidden: vec![7],
            m_hidden: vec![5, 5],
        };
        let hyper = Hyper {
            control_points: 5,
            t_max: 2.5,
            tau_input,
            ..Hyper::default()
        };
        SelNetModel::new(3, &arch, hyper, layout, 8).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for ti in [TauInput::Query, TauInput::Constant] {
            let m = model(ti);
            let back = decode_model(&encode_model(&m)).unwrap();
            assert_eq!(back, m);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..100 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
                let t = rng.random_range(0.0..=2.5);
                assert_eq!(
                    m.estimate_many(&x, &[t]).unwrap()[0].to_bits(),
                    back.estimate_many(&x, &[t]).unwrap()[0].to_bits()
                );
            }
        }
    }

    #[test]
    fn every_corrupted_body_byte_is_a_checksum_error() {
        let bytes = encode_model(&model(TauInput::Query));
        for i in (FRAME..bytes.len() - 4).step_by(37) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(matches!(decode_model(&bad), Err(Error::Checksum { .. })), "byte {i}");
        }
    }

    #[test]
    fn header_faults_are_distinct() {
        let bytes = encode_model(&model(TauInput::Query));
        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&(MODEL_FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(decode_model(&future), Err(Error::Version { found: 2, .. })));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 10]), Err(Error::Truncated(_))));
        assert!(matches!(decode_model(&bytes[..2]), Err(Error::Truncated(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_model(&magic), Err(Error::BadMagic { .. })));
        let mut longer = bytes;
        longer.push(0);
        assert!(matches!(decode_model(&longer), Err(Error::Malformed(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.seln");
        let m = model(TauInput::Query);
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }
}

//! Binary checkpoint container.
//!
//! Layout, all little-endian: magic `SSA1`, format version (u32), payload,
//! CRC-32 of the payload (u32). Every tensor is preceded by its dimensions.
//! Parameters are stored as f32 and Adam accumulators as f64. Feedback is
//! stored as its generating seeds and scales plus the retained component
//! indices, and regenerated on load.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feedback::{FeedbackBundle, FeedbackSource};
use crate::harness::config::RunConfig;
use crate::learning::{
    AdamConfig, LayerMoments, MethodKind, Moments, RankSchedule, TrainConfig, Trainer, WeightMoments,
};
use crate::model::{
    Activation, ConvGeometry, FactoredWeight, InputShape, Layer, LayerKind, Network, PoolGeometry, Weight,
};
use crate::numerics::Matrix;
use crate::objectives::LossWeights;
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"SSA1";
pub const VERSION: u32 = 1;

/// A restored run: the trainer and, when saved by the harness, its config.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub trainer: Trainer<T>,
    pub run_config: Option<RunConfig>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, x: u8) {
        self.buf.push(x);
    }
    fn bool(&mut self, x: bool) {
        self.u8(u8::from(x));
    }
    fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn usize(&mut self, x: usize) {
        self.u64(x as u64);
    }
    fn u128(&mut self, x: u128) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn opt_f64(&mut self, x: Option<f64>) {
        self.bool(x.is_some());
        if let Some(v) = x {
            self.f64(v);
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.buf.extend_from_slice(b);
    }
    fn f32s<T: Scalar>(&mut self, xs: &[T]) {
        self.usize(xs.len());
        for x in xs {
            self.buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    fn matrix32<T: Scalar>(&mut self, m: &Matrix<T>) {
        self.usize(m.rows());
        self.usize(m.cols());
        self.f32s(m.as_slice());
    }
    fn matrix64<T: Scalar>(&mut self, m: &Matrix<T>) {
        self.usize(m.rows());
        self.usize(m.cols());
        for x in m.as_slice() {
            self.f64(x.as_f64());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("payload ends early at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(corrupt(format!("bad flag byte {b}"))),
        }
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("size overflows usize"))
    }
    /// A length that must fit in the remaining payload at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(corrupt(format!("length {n} exceeds the payload")));
        }
        Ok(n)
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        Ok(if self.bool()? { Some(self.f64()?) } else { None })
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn f32s<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let n = self.len(4)?;
        (0..n)
            .map(|_| Ok(T::of(f32::from_le_bytes(self.array()?) as f64)))
            .collect()
    }
    fn dims(&mut self, unit: usize) -> Result<(usize, usize)> {
        let r = self.usize()?;
        let c = self.usize()?;
        if r.saturating_mul(c).saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(corrupt(format!("{r}x{c} tensor exceeds the payload")));
        }
        Ok((r, c))
    }
    fn matrix32<T: Scalar>(&mut self) -> Result<Matrix<T>> {
        let (r, c) = self.dims(4)?;
        let data = self.f32s()?;
        Matrix::new(r, c, data).map_err(|_| corrupt("tensor size differs from its dims"))
    }
    fn matrix64<T: Scalar>(&mut self) -> Result<Matrix<T>> {
        let (r, c) = self.dims(8)?;
        let data = (0..r * c).map(|_| Ok(T::of(self.f64()?))).collect::<Result<Vec<T>>>()?;
        Matrix::new(r, c, data).map_err(|_| corrupt("tensor size differs from its dims"))
    }
}

fn write_config(w: &mut Writer, c: &TrainConfig) {
    w.u8(c.method.code());
    for x in [c.weights.alpha, c.weights.beta, c.weights.gamma, c.weights.lambda_hoyer] {
        w.f64(x);
    }
    for x in [c.adam.lr, c.adam.beta1, c.adam.beta2, c.adam.eps] {
        w.f64(x);
    }
    w.usize(c.batch_size);
    w.usize(c.epochs);
    w.bool(c.rank_schedule);
    w.usize(c.schedule.total_epochs);
    w.f64(c.schedule.phase1_fraction);
    w.f64(c.schedule.phase1_target_fraction);
    w.f64(c.schedule.energy_threshold);
    w.usize(c.schedule.hoyer_period);
    w.u64(c.seed);
    w.opt_f64(c.projection_sigma);
    w.opt_f64(c.target_sigma);
    w.bool(c.augment);
    w.usize(c.probe_size);
    w.usize(c.alignment_log_every);
    w.bool(c.evaluate_test);
}

fn read_config(r: &mut Reader) -> Result<TrainConfig> {
    let code = r.u8()?;
    let method = MethodKind::from_code(code).ok_or_else(|| corrupt(format!("unknown method code {code}")))?;
    let weights = LossWeights {
        alpha: r.f64()?,
        beta: r.f64()?,
        gamma: r.f64()?,
        lambda_hoyer: r.f64()?,
    };
    let adam = AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let batch_size = r.usize()?;
    let epochs = r.usize()?;
    let rank_schedule = r.bool()?;
    let schedule = RankSchedule {
        total_epochs: r.usize()?,
        phase1_fraction: r.f64()?,
        phase1_target_fraction: r.f64()?,
        energy_threshold: r.f64()?,
        hoyer_period: r.usize()?,
    };
    Ok(TrainConfig {
        method,
        weights,
        adam,
        batch_size,
        epochs,
        rank_schedule,
        schedule,
        seed: r.u64()?,
        projection_sigma: r.opt_f64()?,
        target_sigma: r.opt_f64()?,
        augment: r.bool()?,
        probe_size: r.usize()?,
        alignment_log_every: r.usize()?,
        evaluate_test: r.bool()?,
    })
}

fn write_weight<T: Scalar>(w: &mut Writer, weight: &Weight<T>) {
    match weight {
        Weight::Full(m) => {
            w.u8(0);
            w.matrix32(m);
        }
        Weight::Factored(f) => {
            w.u8(1);
            w.matrix32(&f.u);
            w.f32s(&f.s);
            w.matrix32(&f.vt);
        }
    }
}

fn read_weight<T: Scalar>(r: &mut Reader) -> Result<Weight<T>> {
    match r.u8()? {
        0 => Ok(Weight::Full(r.matrix32()?)),
        1 => {
            let u = r.matrix32()?;
            let s = r.f32s()?;
            let vt = r.matrix32()?;
            let f = FactoredWeight::new(u, s, vt).map_err(|e| corrupt(format!("factored weight: {e}")))?;
            Ok(Weight::Factored(f))
        }
        t => Err(corrupt(format!("unknown weight tag {t}"))),
    }
}

fn write_layer<T: Scalar>(w: &mut Writer, l: &Layer<T>) {
    match &l.kind {
        LayerKind::Dense(weight) => {
            w.u8(0);
            write_weight(w, weight);
        }
        LayerKind::Conv { weight, geom } => {
            w.u8(1);
            for d in [
                geom.in_channels,
                geom.out_channels,
                geom.kh,
                geom.kw,
                geom.height,
                geom.width,
            ] {
                w.usize(d);
            }
            write_weight(w, weight);
        }
        LayerKind::MaxPool(p) => {
            w.u8(2);
            for d in [p.channels, p.height, p.width] {
                w.usize(d);
            }
        }
    }
    w.u8(l.activation.code());
    w.bool(l.bias.is_some());
    if let Some(b) = &l.bias {
        w.f32s(b);
    }
}

fn read_layer<T: Scalar>(r: &mut Reader) -> Result<Layer<T>> {
    let kind = match r.u8()? {
        0 => LayerKind::Dense(read_weight(r)?),
        1 => {
            let geom = ConvGeometry {
                in_channels: r.usize()?,
                out_channels: r.usize()?,
                kh: r.usize()?,
                kw: r.usize()?,
                height: r.usize()?,
                width: r.usize()?,
            };
            let weight = read_weight(r)?;
            if weight.dims() != geom.matrix_shape() {
                return Err(corrupt("conv weight shape differs from its geometry"));
            }
            LayerKind::Conv { weight, geom }
        }
        2 => LayerKind::MaxPool(PoolGeometry {
            channels: r.usize()?,
            height: r.usize()?,
            width: r.usize()?,
        }),
        t => return Err(corrupt(format!("unknown layer tag {t}"))),
    };
    let code = r.u8()?;
    let activation = Activation::from_code(code).ok_or_else(|| corrupt(format!("unknown activation code {code}")))?;
    let bias = if r.bool()? { Some(r.f32s()?) } else { None };
    Ok(Layer { kind, activation, bias })
}

fn write_moments<T: Scalar>(w: &mut Writer, m: &Moments<T>) {
    w.u64(m.step);
    w.matrix64(&m.m);
    w.matrix64(&m.v);
}

fn read_moments<T: Scalar>(r: &mut Reader) -> Result<Moments<T>> {
    let step = r.u64()?;
    let m = r.matrix64()?;
    let v = r.matrix64()?;
    if m.shape() != v.shape() {
        return Err(corrupt("moment shapes differ"));
    }
    Ok(Moments { m, v, step })
}

fn write_layer_moments<T: Scalar>(w: &mut Writer, lm: &LayerMoments<T>) {
    match &lm.weight {
        WeightMoments::Full(m) => {
            w.u8(0);
            write_moments(w, m);
        }
        WeightMoments::Factored {
            u,
            s,
            vt,
            ortho_u,
            ortho_vt,
        } => {
            w.u8(1);
            for m in [u, s, vt, ortho_u, ortho_vt] {
                write_moments(w, m);
            }
        }
    }
    w.bool(lm.bias.is_some());
    if let Some(b) = &lm.bias {
        write_moments(w, b);
    }
}

fn read_layer_moments<T: Scalar>(r: &mut Reader) -> Result<LayerMoments<T>> {
    let weight = match r.u8()? {
        0 => WeightMoments::Full(read_moments(r)?),
        1 => WeightMoments::Factored {
            u: read_moments(r)?,
            s: read_moments(r)?,
            vt: read_moments(r)?,
            ortho_u: read_moments(r)?,
            ortho_vt: read_moments(r)?,
        },
        t => return Err(corrupt(format!("unknown moments tag {t}"))),
    };
    let bias = if r.bool()? { Some(read_moments(r)?) } else { None };
    Ok(LayerMoments { weight, bias })
}

fn write_feedback<T: Scalar>(w: &mut Writer, fb: &FeedbackBundle<T>) {
    let s = &fb.source;
    w.u64(s.seed);
    w.f64(s.projection_sigma);
    w.f64(s.target_sigma);
    w.bool(s.identity_projection);
    w.usize(s.initial_rank);
    w.bool(fb.targets.is_some());
    if let Some(t) = &fb.targets {
        w.usize(t.order.len());
        for &k in &t.order {
            w.usize(k);
        }
    }
}

/// Stored description of one bundle: its source and retained components.
type FeedbackRecord = (FeedbackSource, Option<Vec<usize>>);

fn read_feedback(r: &mut Reader) -> Result<FeedbackRecord> {
    let source = FeedbackSource {
        seed: r.u64()?,
        projection_sigma: r.f64()?,
        target_sigma: r.f64()?,
        identity_projection: r.bool()?,
        initial_rank: r.usize()?,
    };
    let order = if r.bool()? {
        let n = r.len(8)?;
        Some((0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    Ok((source, order))
}

/// Regenerates layer `layer`'s bundle and restricts its targets to the
/// stored components.
fn rebuild_feedback<T: Scalar>(net: &Network<T>, layer: usize, record: FeedbackRecord) -> Result<FeedbackBundle<T>> {
    let (source, order) = record;
    let l = &net.layers[layer];
    let w = l
        .weight()
        .ok_or_else(|| corrupt(format!("feedback stored for layer {layer} without weights")))?;
    // Targets are generated for the original weight shape, which rank
    // truncation does not change.
    let mut fb = FeedbackBundle::from_source(l.out_dim(), net.output_dim(), w.dims(), source)
        .map_err(|e| corrupt(format!("feedback for layer {layer}: {e}")))?;
    match (order, fb.targets.as_ref()) {
        (Some(order), Some(t)) => {
            if order.iter().any(|&k| k >= t.rank()) {
                return Err(corrupt(format!("target component out of range in layer {layer}")));
            }
            fb.targets = Some(t.select(&order));
        }
        (None, None) => {}
        _ => return Err(corrupt(format!("target presence mismatch in layer {layer}"))),
    }
    Ok(fb)
}

fn write_input(w: &mut Writer, input: InputShape) {
    match input {
        InputShape::Flat(d) => {
            w.u8(0);
            w.usize(d);
        }
        InputShape::Image {
            channels,
            height,
            width,
        } => {
            w.u8(1);
            w.usize(channels);
            w.usize(height);
            w.usize(width);
        }
    }
}

fn read_input(r: &mut Reader) -> Result<InputShape> {
    match r.u8()? {
        0 => Ok(InputShape::Flat(r.usize()?)),
        1 => Ok(InputShape::Image {
            channels: r.usize()?,
            height: r.usize()?,
            width: r.usize()?,
        }),
        t => Err(corrupt(format!("unknown input tag {t}"))),
    }
}

/// Serializes a trainer into the container format.
pub fn encode<T: Scalar>(trainer: &Trainer<T>, run_config: Option<&RunConfig>) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    write_config(&mut w, &trainer.config);
    w.bool(run_config.is_some());
    if let Some(rc) = run_config {
        w.bytes(rc.to_toml().as_bytes());
    }
    write_input(&mut w, trainer.net.input);
    w.usize(trainer.net.layers.len());
    for (i, layer) in trainer.net.layers.iter().enumerate() {
        write_layer(&mut w, layer);
        match trainer.initial_ranks.get(i).copied().flatten() {
            Some(r0) => {
                w.bool(true);
                w.usize(r0);
            }
            None => w.bool(false),
        }
        let mom = trainer.moments.get(i).and_then(Option::as_ref);
        w.bool(mom.is_some());
        if let Some(m) = mom {
            write_layer_moments(&mut w, m);
        }
        let fb = trainer.feedback.get(i).and_then(Option::as_ref);
        w.bool(fb.is_some());
        if let Some(f) = fb {
            write_feedback(&mut w, f);
        }
    }
    w.usize(trainer.epoch);
    w.u64(trainer.step);
    w.buf.extend_from_slice(&trainer.rng.get_seed());
    w.u64(trainer.rng.get_stream());
    w.u128(trainer.rng.get_word_pos());

    let payload = w.buf;
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

/// Parses a container produced by [`encode`].
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 12 {
        return Err(corrupt(format!(
            "{} bytes is shorter than the header and checksum",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let (payload, crc) = bytes[8..].split_at(bytes.len() - 12);
    if crc32fast::hash(payload).to_le_bytes() != crc {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let config = read_config(&mut r)?;
    let run_config = if r.bool()? {
        let text = std::str::from_utf8(r.bytes()?).map_err(|_| corrupt("config text is not UTF-8"))?;
        Some(toml::from_str::<RunConfig>(text).map_err(|e| corrupt(format!("embedded config: {e}")))?)
    } else {
        None
    };
    let input = read_input(&mut r)?;
    let n_layers = r.len(1)?;
    let mut layers = Vec::with_capacity(n_layers);
    let mut initial_ranks = Vec::with_capacity(n_layers);
    let mut moments = Vec::with_capacity(n_layers);
    // Feedback is rebuilt once the whole network is known.
    let mut records = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(read_layer::<T>(&mut r)?);
        initial_ranks.push(if r.bool()? { Some(r.usize()?) } else { None });
        moments.push(if r.bool()? {
            Some(read_layer_moments::<T>(&mut r)?)
        } else {
            None
        });
        records.push(if r.bool()? { Some(read_feedback(&mut r)?) } else { None });
    }
    let net = Network::from_layers(input, layers).map_err(|e| corrupt(format!("network: {e}")))?;
    let feedback = records
        .into_iter()
        .enumerate()
        .map(|(i, rec)| rec.map(|rec| rebuild_feedback(&net, i, rec)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let epoch = r.usize()?;
    let step = r.u64()?;
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    if r.pos != payload.len() {
        return Err(corrupt(format!("{} trailing bytes", payload.len() - r.pos)));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    check_state(&net, &moments)?;
    Ok(Checkpoint {
        trainer: Trainer {
            config,
            net,
            feedback,
            moments,
            initial_ranks,
            epoch,
            step,
            rng,
            step_log: Vec::new(),
        },
        run_config,
    })
}

/// Optimizer state must be shaped like the parameters it belongs to.
fn check_state<T: Scalar>(net: &Network<T>, moments: &[Option<LayerMoments<T>>]) -> Result<()> {
    for (i, (l, m)) in net.layers.iter().zip(moments).enumerate() {
        let ok = match (l.weight(), m) {
            (None, None) => true,
            (
                Some(Weight::Full(w)),
                Some(LayerMoments {
                    weight: WeightMoments::Full(mm),
                    ..
                }),
            ) => mm.m.shape() == w.shape(),
            (
                Some(Weight::Factored(f)),
                Some(LayerMoments {
                    weight:
                        WeightMoments::Factored {
                            u,
                            s,
                            vt,
                            ortho_u,
                            ortho_vt,
                        },
                    ..
                }),
            ) => {
                u.m.shape() == f.u.shape()
                    && s.m.shape() == (1, f.rank())
                    && vt.m.shape() == f.vt.shape()
                    && ortho_u.m.shape() == f.u.shape()
                    && ortho_vt.m.shape() == f.vt.shape()
            }
            _ => false,
        };
        let bias_ok = match (&l.bias, m.as_ref().map(|m| &m.bias)) {
            (None, None | Some(None)) => true,
            (Some(b), Some(Some(bm))) => bm.m.shape() == (1, b.len()),
            _ => false,
        };
        if !(ok && bias_ok) {
            return Err(corrupt(format!("optimizer state does not match layer {i}")));
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: &Path, trainer: &Trainer<T>, run_config: Option<&RunConfig>) -> Result<()> {
    std::fs::write(path, encode(trainer, run_config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{synthetic_dataset, SyntheticKind};
    use crate::model::NetworkSpec;

    fn trained(method: MethodKind) -> Trainer<f32> {
        let data = synthetic_dataset(SyntheticKind::Spiral, 200, 3).unwrap();
        let mut cfg = TrainConfig::new(method, 4, 5);
        cfg.batch_size = 32;
        cfg.rank_schedule = true;
        cfg.probe_size = 16;
        let spec = NetworkSpec::mlp3(2, 8, 3, method.factored());
        let mut t = Trainer::new(cfg, &spec).unwrap();
        t.train_epoch(&data).unwrap();
        t.train_epoch(&data).unwrap();
        t
    }

    #[test]
    fn round_trip_is_exact_for_every_method() {
        for method in MethodKind::ALL {
            let t = trained(method);
            let rc = RunConfig::default();
            let back = decode::<f32>(&encode(&t, Some(&rc))).unwrap();
            assert_eq!(back.trainer, t, "{method}");
            assert_eq!(back.run_config, Some(rc));
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = encode(&trained(MethodKind::Ssa), None);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(matches!(decode::<f32>(&bad), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32>(&bad), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode::<f32>(&bad), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(
            decode::<f32>(&bytes[..bytes.len() / 2]),
            Err(Error::CorruptCheckpoint(_))
        ));
        assert!(matches!(decode::<f32>(&bytes[..5]), Err(Error::CorruptCheckpoint(_))));
    }
}

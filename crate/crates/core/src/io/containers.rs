use std::path::Path;

use crate::arch::{Arch, LayerSpec};
use crate::data::{Dataset, Provenance, Split};
use crate::engine::{QLayer, QuantModel};
use crate::error::{Error, Result};
use crate::qtensor::QTensor;
use crate::sea::{pack_param, unpack_param, BitKnowledge};
use crate::train::FloatModel;

use super::bytes::{read_file, write_atomic, Reader, Writer};

pub const MODEL_MAGIC: &[u8; 4] = b"QNNM";
pub const KNOWLEDGE_MAGIC: &[u8; 4] = b"QNNK";
pub const DATASET_MAGIC: &[u8; 4] = b"QNND";
pub const FORMAT_VERSION: u16 = 1;

const TAG_LINEAR: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_POOL: u8 = 3;
const TAG_SOFTMAX: u8 = 4;
const TAG_FLOAT_LINEAR: u8 = 0x10;
const TAG_FLOAT_CONV: u8 = 0x11;

fn write_shape(w: &mut Writer, shape: &[usize]) {
    w.u8(shape.len() as u8);
    for &d in shape {
        w.u32(d);
    }
}

fn read_shape(r: &mut Reader) -> Result<(Vec<usize>, usize)> {
    let n = r.u8()? as usize;
    let shape = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| r.error(format!("shape {shape:?} overflows")))?;
    Ok((shape, len))
}

fn write_input_shape(w: &mut Writer, s: [usize; 3]) {
    for d in s {
        w.u32(d);
    }
}

fn read_input_shape(r: &mut Reader) -> Result<[usize; 3]> {
    Ok([r.u32()?, r.u32()?, r.u32()?])
}

fn read_dec(r: &mut Reader) -> Result<i32> {
    Ok(r.i8()? as i32)
}

fn dec_byte(d: i32) -> i8 {
    i8::try_from(d).expect("exponent fits in i8")
}

fn plain_tag(spec: &LayerSpec) -> Option<u8> {
    match spec {
        LayerSpec::Relu => Some(TAG_RELU),
        LayerSpec::AvgPool2x2 => Some(TAG_POOL),
        LayerSpec::SoftmaxScore => Some(TAG_SOFTMAX),
        _ => None,
    }
}

fn plain_spec(tag: u8) -> Option<LayerSpec> {
    match tag {
        TAG_RELU => Some(LayerSpec::Relu),
        TAG_POOL => Some(LayerSpec::AvgPool2x2),
        TAG_SOFTMAX => Some(LayerSpec::SoftmaxScore),
        _ => None,
    }
}

pub fn encode_model(model: &QuantModel) -> Vec<u8> {
    let mut w = Writer::new(MODEL_MAGIC, FORMAT_VERSION);
    write_input_shape(&mut w, model.input_shape());
    w.i8(dec_byte(model.input_dec()));
    w.u32(model.layers().len());
    for layer in model.layers() {
        match layer {
            QLayer::Linear { weights, in_dec, out_dec } | QLayer::Conv2d { weights, in_dec, out_dec } => {
                w.u8(if matches!(layer, QLayer::Linear { .. }) { TAG_LINEAR } else { TAG_CONV });
                write_shape(&mut w, weights.shape());
                w.i8(dec_byte(weights.dec()));
                w.i8(dec_byte(*in_dec));
                w.i8(dec_byte(*out_dec));
                w.bytes(&weights.values().iter().map(|&v| v as u8).collect::<Vec<_>>());
            }
            other => w.u8(plain_tag(&other.spec()).expect("unweighted layer")),
        }
    }
    w.finish()
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<QuantModel> {
    let mut r = Reader::open(path, bytes, MODEL_MAGIC, FORMAT_VERSION)?;
    let input_shape = read_input_shape(&mut r)?;
    let input_dec = read_dec(&mut r)?;
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let tag = r.u8()?;
        layers.push(match tag {
            TAG_LINEAR | TAG_CONV => {
                let (shape, len) = read_shape(&mut r)?;
                let dec = read_dec(&mut r)?;
                let in_dec = read_dec(&mut r)?;
                let out_dec = read_dec(&mut r)?;
                let values = r.take(len)?.iter().map(|&b| b as i8).collect();
                let weights = QTensor::new(values, shape, dec).map_err(|e| r.error(e.to_string()))?;
                if tag == TAG_LINEAR {
                    QLayer::Linear { weights, in_dec, out_dec }
                } else {
                    QLayer::Conv2d { weights, in_dec, out_dec }
                }
            }
            TAG_FLOAT_LINEAR | TAG_FLOAT_CONV => {
                return Err(r.error("float checkpoint where a quantized model was expected"))
            }
            t => match plain_spec(t) {
                Some(LayerSpec::Relu) => QLayer::Relu,
                Some(LayerSpec::AvgPool2x2) => QLayer::AvgPool2x2,
                Some(_) => QLayer::SoftmaxScore,
                None => return Err(r.error(format!("unknown layer kind tag {t}"))),
            },
        });
    }
    let pos_err = r.error("inconsistent layer stack");
    r.finish()?;
    QuantModel::new(input_shape, input_dec, layers).map_err(|e| match pos_err {
        Error::Parse { path, offset, .. } => Error::Parse { path, offset, message: e.to_string() },
        other => other,
    })
}

pub fn save_model(path: &Path, model: &QuantModel) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<QuantModel> {
    decode_model(path, &read_file(path)?)
}

/// Float checkpoints share the model container with distinct kind tags and
/// IEEE-754 little-endian f64 payloads.
pub fn encode_float_model(model: &FloatModel) -> Vec<u8> {
    let arch = model.arch();
    let shapes = arch.weight_shapes().expect("validated architecture");
    let mut w = Writer::new(MODEL_MAGIC, FORMAT_VERSION);
    write_input_shape(&mut w, arch.input_shape);
    w.i8(0);
    w.u32(arch.layers.len());
    let mut ordinal = 0;
    for spec in &arch.layers {
        match spec {
            LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => {
                w.u8(if matches!(spec, LayerSpec::Linear { .. }) { TAG_FLOAT_LINEAR } else { TAG_FLOAT_CONV });
                write_shape(&mut w, &shapes[ordinal]);
                for &v in model.weights(ordinal) {
                    w.f64(v);
                }
                ordinal += 1;
            }
            other => w.u8(plain_tag(other).expect("unweighted layer")),
        }
    }
    w.finish()
}

pub fn decode_float_model(path: &Path, bytes: &[u8]) -> Result<FloatModel> {
    let mut r = Reader::open(path, bytes, MODEL_MAGIC, FORMAT_VERSION)?;
    let input_shape = read_input_shape(&mut r)?;
    read_dec(&mut r)?;
    let n = r.u32()?;
    let mut layers = Vec::new();
    let mut weights = Vec::new();
    for _ in 0..n {
        let tag = r.u8()?;
        match tag {
            TAG_FLOAT_LINEAR | TAG_FLOAT_CONV => {
                let (shape, len) = read_shape(&mut r)?;
                if len > r.remaining() / 8 {
                    return Err(r.error(format!("weight payload of {len} values exceeds the file")));
                }
                weights.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                let out = *shape.first().ok_or_else(|| r.error("empty weight shape"))?;
                layers.push(if tag == TAG_FLOAT_LINEAR {
                    LayerSpec::Linear { out_features: out }
                } else {
                    LayerSpec::Conv2d { out_channels: out }
                });
            }
            TAG_LINEAR | TAG_CONV => return Err(r.error("quantized layer where a float checkpoint was expected")),
            t => layers.push(plain_spec(t).ok_or_else(|| r.error(format!("unknown layer kind tag {t}")))?),
        }
    }
    let pos_err = r.error("inconsistent layer stack");
    r.finish()?;
    FloatModel::new(Arch { input_shape, layers }, weights).map_err(|e| match pos_err {
        Error::Parse { path, offset, .. } => Error::Parse { path, offset, message: e.to_string() },
        other => other,
    })
}

pub fn save_float_model(path: &Path, model: &FloatModel) -> Result<()> {
    write_atomic(path, &encode_float_model(model))
}

pub fn load_float_model(path: &Path) -> Result<FloatModel> {
    decode_float_model(path, &read_file(path)?)
}

/// One little-endian u16 per parameter: 2-bit slot codes, `b0` in the top
/// bits.
pub fn encode_knowledge(k: &BitKnowledge) -> Vec<u8> {
    let mut w = Writer::new(KNOWLEDGE_MAGIC, FORMAT_VERSION);
    w.u64(k.inputs_consumed);
    w.u64(k.probes_executed);
    w.u32(k.layer_sizes().len());
    for &s in k.layer_sizes() {
        w.u32(s);
    }
    for p in k.slots() {
        w.u16(pack_param(p));
    }
    w.finish()
}

pub fn decode_knowledge(path: &Path, bytes: &[u8]) -> Result<BitKnowledge> {
    let mut r = Reader::open(path, bytes, KNOWLEDGE_MAGIC, FORMAT_VERSION)?;
    let inputs_consumed = r.u64()?;
    let probes_executed = r.u64()?;
    let layers = r.u32()?;
    if layers > r.remaining() / 4 {
        return Err(r.error(format!("{layers} layers exceed the file")));
    }
    let sizes = (0..layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let total: usize = sizes.iter().sum();
    if r.remaining() != 2 * total {
        return Err(r.error(format!(
            "payload holds {} bytes, {} parameters need {}",
            r.remaining(),
            total,
            2 * total
        )));
    }
    let slots = (0..total)
        .map(|_| Ok(unpack_param(u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")))))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let mut k = BitKnowledge::from_parts(sizes, slots)?;
    k.inputs_consumed = inputs_consumed;
    k.probes_executed = probes_executed;
    Ok(k)
}

pub fn save_knowledge(path: &Path, k: &BitKnowledge) -> Result<()> {
    write_atomic(path, &encode_knowledge(k))
}

/// Loads knowledge and, when given, checks it against the model layout.
pub fn load_knowledge(path: &Path, model: Option<&QuantModel>) -> Result<BitKnowledge> {
    let k = decode_knowledge(path, &read_file(path)?)?;
    if let Some(m) = model {
        k.check_model(m)?;
    }
    Ok(k)
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Test => 1,
        Split::Attack => 2,
    }
}

fn provenance_code(p: Provenance) -> u8 {
    match p {
        Provenance::Mnist => 0,
        Provenance::Cifar10 => 1,
        Provenance::Random => 2,
        Provenance::Ga => 3,
        Provenance::TestSet => 4,
        Provenance::Synthetic => 5,
    }
}

const SPLITS: [Split; 3] = [Split::Train, Split::Test, Split::Attack];
const PROVENANCES: [Provenance; 6] = [
    Provenance::Mnist,
    Provenance::Cifar10,
    Provenance::Random,
    Provenance::Ga,
    Provenance::TestSet,
    Provenance::Synthetic,
];

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC, FORMAT_VERSION);
    write_input_shape(&mut w, d.image_shape);
    w.u32(d.len());
    w.u32(d.num_classes);
    w.u8(split_code(d.split));
    w.u8(provenance_code(d.provenance));
    w.u8(d.is_labeled() as u8);
    w.bytes(&d.images.iter().map(|&v| v as u8).collect::<Vec<_>>());
    w.bytes(&d.labels);
    w.finish()
}

pub fn decode_dataset(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(path, bytes, DATASET_MAGIC, FORMAT_VERSION)?;
    let shape = read_input_shape(&mut r)?;
    let n = r.u32()?;
    let classes = r.u32()?;
    let split = *SPLITS.get(r.u8()? as usize).ok_or_else(|| r.error("unknown split code"))?;
    let provenance = *PROVENANCES
        .get(r.u8()? as usize)
        .ok_or_else(|| r.error("unknown provenance code"))?;
    let labeled = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(r.error(format!("bad label flag {b}"))),
    };
    let per: usize = shape.iter().product();
    let need = n.checked_mul(per + labeled as usize).ok_or_else(|| r.error("size overflow"))?;
    if r.remaining() != need {
        return Err(r.error(format!("payload holds {} bytes, expected {need}", r.remaining())));
    }
    let images = r.take(n * per)?.iter().map(|&b| b as i8).collect();
    let labels = if labeled { r.take(n)?.to_vec() } else { Vec::new() };
    let pos_err = r.error("invalid dataset");
    r.finish()?;
    Dataset::new(shape, images, labels, classes, split, provenance).map_err(|e| match pos_err {
        Error::Parse { path, offset, .. } => Error::Parse { path, offset, message: e.to_string() },
        other => other,
    })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(d))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(path, &read_file(path)?)
}

//! Little-endian binary formats for tensors, partitions, layers and models.
//!
//! Tensor file (`EMOE`, version 1):
//!
//! ```text
//! magic  "EMOE"            4 bytes
//! version u32              = 1
//! count   u32              number of entries
//! entry*: name_len u16, name (utf-8), dtype u8 (0 = f32, 1 = f64),
//!         ndim u8 (1 or 2), dims u32 × ndim, payload (row-major)
//! ```
//!
//! Partition file (`EMOP`, version 1): magic, version u32, d u32, N u32, then
//! `d` u32 expert ids.
//!
//! A dense layer is stored as tensors `K`, `V`, `meta = [h, d, activation]`
//! and optionally `b_k`, `b_v`. A split layer stores `K_i`/`V_i` per expert,
//! `G`, `meta = [h, d, activation, N, top_k, gate_mode]` and optional
//! `b_k_i`, `b_v`, `G_bias`, with the neuron grouping in a partition side-car
//! at `<path>.partition`.
//!
//! A toy model checkpoint is one tensor file: `model.meta = [h_in, h,
//! n_classes, n_blocks, adapter_rank, trainable_bits]`, `input_proj`, `head`,
//! optional `adapter.a`, `adapter.b`, `adapter.alpha`, and per block
//! `block{l}.meta.block = [kind, residual]` plus the layer tensors under the
//! `block{l}.` prefix (split blocks add `block{l}.partition`, expert ids).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::clustering::Partition;
use crate::emoe::{EmoeLayer, Expert, GateMode};
use crate::error::{Error, Result};
use crate::ffn::FfnLayer;
use crate::numerics::{ActivationKind, DType, Matrix, Scalar};
use crate::train::{Adapter, Block, BlockLayer, ToyModel, Trainable};

pub const TENSOR_MAGIC: &[u8; 4] = b"EMOE";
pub const PARTITION_MAGIC: &[u8; 4] = b"EMOP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn widen(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

/// A 1-D or 2-D array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

fn wrap<T: Scalar>(v: Vec<T>) -> TensorData {
    match T::DTYPE {
        DType::F32 => TensorData::F32(v.into_iter().map(|x| x.as_f64() as f32).collect()),
        DType::F64 => TensorData::F64(v.into_iter().map(|v| v.as_f64()).collect()),
    }
}

fn unwrap<T: Scalar>(data: &TensorData) -> Option<Vec<T>> {
    if data.dtype() != T::DTYPE {
        return None;
    }
    Some(data.widen().into_iter().map(T::lit).collect())
}

impl Tensor {
    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        Tensor {
            dims: vec![m.rows(), m.cols()],
            data: wrap(m.data().to_vec()),
        }
    }

    pub fn from_vector<T: Scalar>(v: &[T]) -> Self {
        Tensor {
            dims: vec![v.len()],
            data: wrap(v.to_vec()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// 2-D tensor as a matrix of the matching dtype.
    pub fn to_matrix<T: Scalar>(&self) -> Result<Matrix<T>> {
        let data = unwrap::<T>(&self.data).ok_or_else(|| {
            Error::Validation(format!(
                "tensor is {} but {} was expected",
                self.dtype(),
                T::DTYPE
            ))
        })?;
        match self.dims[..] {
            [r, c] => Matrix::new(r, c, data),
            _ => Err(Error::shape(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    /// 1-D tensor as a vector of the matching dtype.
    pub fn to_vector<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dims.len() != 1 {
            return Err(Error::shape(format!(
                "expected a 1-D tensor, got dims {:?}",
                self.dims
            )));
        }
        unwrap::<T>(&self.data).ok_or_else(|| {
            Error::Validation(format!(
                "tensor is {} but {} was expected",
                self.dtype(),
                T::DTYPE
            ))
        })
    }

    /// Rows of a 2-D tensor (or the single row of a 1-D one), widened to f64.
    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        let flat = self.data.widen();
        match self.dims[..] {
            [_, c] if c > 0 => flat.chunks(c).map(<[f64]>::to_vec).collect(),
            _ => vec![flat],
        }
    }

    fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && match (&self.data, &other.data) {
                (TensorData::F32(a), TensorData::F32(b)) => a
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(b.iter().map(|v| v.to_bits())),
                (TensorData::F64(a), TensorData::F64(b)) => a
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(b.iter().map(|v| v.to_bits())),
                _ => false,
            }
    }
}

/// Ordered list of named tensors.
pub type TensorList = Vec<(String, Tensor)>;

pub fn tensors_bitwise_eq(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
}

pub fn find<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

fn require<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    find(tensors, name).ok_or_else(|| Error::Validation(format!("missing tensor '{name}'")))
}

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::argument("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::argument(format!("duplicate tensor name '{name}'")));
        }
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::argument(format!("tensor name too long: {name}")))?;
        if !(1..=2).contains(&t.dims.len()) {
            return Err(Error::argument(format!(
                "tensor '{name}' must be 1-D or 2-D"
            )));
        }
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::argument(format!(
                "tensor '{name}' dims {:?} do not match data",
                t.dims
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        out.push(t.dims.len() as u8);
        for &dim in &t.dims {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::argument(format!("dimension {dim} too large")))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|&x| x.write_le(&mut out)),
            TensorData::F64(v) => v.iter().for_each(|&x| x.write_le(&mut out)),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {found:?}, expected {:?}",
                    std::str::from_utf8(magic).unwrap()
                ),
            ));
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_payload<T: Scalar>(r: &mut Reader<'_>, n: usize, name: &str) -> Result<Vec<T>> {
    let size = T::DTYPE.size();
    let at = r.pos;
    let bytes = r.take(
        n.checked_mul(size)
            .ok_or_else(|| Error::format(at, "payload size overflow"))?,
        "payload",
    )?;
    let values: Vec<T> = bytes.chunks_exact(size).map(T::read_le).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "tensor '{name}' holds a non-finite value at element {i} (byte offset {})",
            at + i * size
        )));
    }
    Ok(values)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<TensorList> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(TENSOR_MAGIC)?;
    let count = r.u32("entry count")?;
    let mut names = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at + 2, "tensor name is not utf-8"))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(Error::format(at, format!("duplicate tensor name '{name}'")));
        }
        let at = r.pos;
        let dtype = DType::from_code(r.u8("dtype")?)
            .ok_or_else(|| Error::format(at, "unknown dtype code"))?;
        let at = r.pos;
        let ndim = r.u8("ndim")? as usize;
        if !(1..=2).contains(&ndim) {
            return Err(Error::format(at, format!("ndim {ndim} is not 1 or 2")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(r.pos, "element count overflow"))?;
        let data = match dtype {
            DType::F32 => TensorData::F32(read_payload::<f32>(&mut r, n, &name)?),
            DType::F64 => TensorData::F64(read_payload::<f64>(&mut r, n, &name)?),
        };
        out.push((name, Tensor { dims, data }));
    }
    r.finish()?;
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensors(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tensors(tensors)?)
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<TensorList> {
    decode_tensors(&read_bytes(path.as_ref())?)
}

pub fn encode_partition(p: &Partition) -> Result<Vec<u8>> {
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::argument(format!("{v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(16 + 4 * p.d());
    out.extend_from_slice(PARTITION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(p.d())?.to_le_bytes());
    out.extend_from_slice(&to_u32(p.n_experts())?.to_le_bytes());
    for &e in p.assignment() {
        out.extend_from_slice(&to_u32(e)?.to_le_bytes());
    }
    Ok(out)
}

/// Decodes and validates range and balance before constructing.
pub fn decode_partition(bytes: &[u8]) -> Result<Partition> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(PARTITION_MAGIC)?;
    let d = r.u32("d")? as usize;
    let n = r.u32("expert count")? as usize;
    let mut assignment = Vec::with_capacity(d.min(bytes.len() / 4));
    for _ in 0..d {
        assignment.push(r.u32("assignment")? as usize);
    }
    r.finish()?;
    Partition::new(assignment, n).map_err(|e| Error::Validation(format!("partition file: {e}")))
}

pub fn write_partition(path: impl AsRef<Path>, p: &Partition) -> Result<()> {
    write_bytes(path.as_ref(), &encode_partition(p)?)
}

pub fn read_partition(path: impl AsRef<Path>) -> Result<Partition> {
    decode_partition(&read_bytes(path.as_ref())?)
}

fn meta_int<T: Scalar>(meta: &[T], i: usize, what: &str) -> Result<usize> {
    let v = meta
        .get(i)
        .ok_or_else(|| Error::Validation(format!("meta is missing {what}")))?
        .as_f64();
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::Validation(format!(
            "meta {what} = {v} is not a count"
        )));
    }
    Ok(v as usize)
}

fn meta_activation<T: Scalar>(meta: &[T]) -> Result<ActivationKind> {
    let code = meta_int(meta, 2, "activation")?;
    ActivationKind::from_code(code as u32)
        .ok_or_else(|| Error::Validation(format!("unknown activation code {code}")))
}

pub fn ffn_to_tensors<T: Scalar>(layer: &FfnLayer<T>) -> TensorList {
    let meta = [layer.h(), layer.d(), layer.activation().code() as usize].map(T::from_count);
    let mut out = vec![
        ("K".to_string(), Tensor::from_matrix(layer.keys())),
        ("V".to_string(), Tensor::from_matrix(layer.values())),
        ("meta".to_string(), Tensor::from_vector(&meta)),
    ];
    if let Some(b) = layer.key_bias() {
        out.push(("b_k".into(), Tensor::from_vector(b)));
    }
    if let Some(b) = layer.value_bias() {
        out.push(("b_v".into(), Tensor::from_vector(b)));
    }
    out
}

pub fn ffn_from_tensors<T: Scalar>(tensors: &[(String, Tensor)]) -> Result<FfnLayer<T>> {
    let meta = require(tensors, "meta")?.to_vector::<T>()?;
    let (h, d) = (meta_int(&meta, 0, "h")?, meta_int(&meta, 1, "d")?);
    let keys = require(tensors, "K")?.to_matrix::<T>()?;
    let values = require(tensors, "V")?.to_matrix::<T>()?;
    if keys.shape() != (h, d) {
        return Err(Error::Validation(format!(
            "K is {:?} but meta says {h}x{d}",
            keys.shape()
        )));
    }
    let opt = |name: &str| find(tensors, name).map(Tensor::to_vector::<T>).transpose();
    let layer = FfnLayer::new(keys, values, meta_activation(&meta)?)?;
    layer.with_biases(opt("b_k")?, opt("b_v")?)
}

pub fn write_ffn<T: Scalar>(path: impl AsRef<Path>, layer: &FfnLayer<T>) -> Result<()> {
    write_tensors(path, &ffn_to_tensors(layer))
}

pub fn read_ffn<T: Scalar>(path: impl AsRef<Path>) -> Result<FfnLayer<T>> {
    ffn_from_tensors(&read_tensors(path)?)
}

/// `<path>.partition`, where a split layer keeps its neuron grouping.
pub fn partition_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partition");
    PathBuf::from(s)
}

pub fn emoe_to_tensors<T: Scalar>(layer: &EmoeLayer<T>) -> TensorList {
    let meta = [
        layer.h(),
        layer.d(),
        layer.activation().code() as usize,
        layer.n_experts(),
        layer.top_k(),
        layer.gate_mode().code() as usize,
    ]
    .map(T::from_count);
    let mut out = Vec::new();
    for (i, e) in layer.experts().iter().enumerate() {
        out.push((format!("K_{i}"), Tensor::from_matrix(&e.keys)));
        out.push((format!("V_{i}"), Tensor::from_matrix(&e.values)));
        if let Some(b) = &e.key_bias {
            out.push((format!("b_k_{i}"), Tensor::from_vector(b)));
        }
    }
    out.push(("G".into(), Tensor::from_matrix(layer.gate())));
    if let Some(b) = layer.gate_bias() {
        out.push(("G_bias".into(), Tensor::from_vector(b)));
    }
    if let Some(b) = layer.value_bias() {
        out.push(("b_v".into(), Tensor::from_vector(b)));
    }
    out.push(("meta".into(), Tensor::from_vector(&meta)));
    out
}

pub fn emoe_from_tensors<T: Scalar>(
    tensors: &[(String, Tensor)],
    partition: &Partition,
) -> Result<EmoeLayer<T>> {
    let meta = require(tensors, "meta")?.to_vector::<T>()?;
    let d = meta_int(&meta, 1, "d")?;
    let n = meta_int(&meta, 3, "N")?;
    let top_k = meta_int(&meta, 4, "top_k")?;
    let mode_code = meta_int(&meta, 5, "gate mode")?;
    let gate_mode = GateMode::from_code(mode_code as u32)
        .ok_or_else(|| Error::Validation(format!("unknown gate mode {mode_code}")))?;
    if partition.d() != d || partition.n_experts() != n {
        return Err(Error::Validation(format!(
            "partition is d = {}, N = {} but layer meta says d = {d}, N = {n}",
            partition.d(),
            partition.n_experts()
        )));
    }
    let experts = partition
        .groups()
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            Ok(Expert {
                keys: require(tensors, &format!("K_{i}"))?.to_matrix()?,
                values: require(tensors, &format!("V_{i}"))?.to_matrix()?,
                key_bias: find(tensors, &format!("b_k_{i}"))
                    .map(Tensor::to_vector)
                    .transpose()?,
                neuron_indices: idx,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let opt = |name: &str| find(tensors, name).map(Tensor::to_vector::<T>).transpose();
    let layer = EmoeLayer::from_parts(
        experts,
        require(tensors, "G")?.to_matrix()?,
        opt("G_bias")?,
        opt("b_v")?,
        meta_activation(&meta)?,
        top_k,
        gate_mode,
    )?;
    if layer.h() != meta_int(&meta, 0, "h")? {
        return Err(Error::Validation("gate rows disagree with meta h".into()));
    }
    Ok(layer)
}

/// Writes the tensor file and its partition side-car.
pub fn write_emoe<T: Scalar>(path: impl AsRef<Path>, layer: &EmoeLayer<T>) -> Result<()> {
    let path = path.as_ref();
    write_tensors(path, &emoe_to_tensors(layer))?;
    write_partition(partition_sidecar(path), &layer.partition()?)
}

pub fn read_emoe<T: Scalar>(path: impl AsRef<Path>) -> Result<EmoeLayer<T>> {
    let path = path.as_ref();
    let tensors = read_tensors(path)?;
    let partition = read_partition(partition_sidecar(path))?;
    emoe_from_tensors(&tensors, &partition)
}

/// Either kind of layer file.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Dense(FfnLayer<T>),
    Emoe(EmoeLayer<T>),
}

/// A layer file loaded at its stored precision.
#[derive(Debug, Clone)]
pub enum LoadedLayer {
    F32(Layer<f32>),
    F64(Layer<f64>),
}

fn layer_from<T: Scalar>(path: &Path, tensors: &[(String, Tensor)]) -> Result<Layer<T>> {
    if find(tensors, "G").is_some() {
        let partition = read_partition(partition_sidecar(path))?;
        Ok(Layer::Emoe(emoe_from_tensors(tensors, &partition)?))
    } else {
        Ok(Layer::Dense(ffn_from_tensors(tensors)?))
    }
}

/// Loads a dense or split layer, detecting kind (`G` present) and dtype.
pub fn load_layer(path: impl AsRef<Path>) -> Result<LoadedLayer> {
    let path = path.as_ref();
    let tensors = read_tensors(path)?;
    let probe = find(&tensors, "K")
        .or_else(|| find(&tensors, "G"))
        .ok_or_else(|| {
            Error::Validation(format!("{} holds neither 'K' nor 'G'", path.display()))
        })?;
    match probe.dtype() {
        DType::F32 => Ok(LoadedLayer::F32(layer_from(path, &tensors)?)),
        DType::F64 => Ok(LoadedLayer::F64(layer_from(path, &tensors)?)),
    }
}

fn with_prefix(prefix: &str, tensors: TensorList) -> TensorList {
    tensors
        .into_iter()
        .map(|(n, t)| (format!("{prefix}{n}"), t))
        .collect()
}

fn strip_prefix(prefix: &str, tensors: &[(String, Tensor)]) -> TensorList {
    tensors
        .iter()
        .filter_map(|(n, t)| {
            n.strip_prefix(prefix)
                .map(|rest| (rest.to_string(), t.clone()))
        })
        .collect()
}

fn trainable_bits(t: Trainable) -> usize {
    [t.input_proj, t.adapter, t.ffn, t.gate, t.head]
        .iter()
        .enumerate()
        .map(|(i, &on)| (on as usize) << i)
        .sum()
}

fn trainable_from_bits(bits: usize) -> Trainable {
    let on = |i: usize| bits >> i & 1 == 1;
    Trainable {
        input_proj: on(0),
        adapter: on(1),
        ffn: on(2),
        gate: on(3),
        head: on(4),
    }
}

pub fn model_to_tensors<T: Scalar>(model: &ToyModel<T>) -> Result<TensorList> {
    let rank = model.adapter.as_ref().map_or(0, Adapter::rank);
    let meta = [
        model.h_in(),
        model.h(),
        model.n_classes(),
        model.blocks.len(),
        rank,
        trainable_bits(model.trainable),
    ]
    .map(T::from_count);
    let mut out = vec![
        ("model.meta".to_string(), Tensor::from_vector(&meta)),
        (
            "input_proj".to_string(),
            Tensor::from_matrix(&model.input_proj),
        ),
        ("head".to_string(), Tensor::from_matrix(&model.head)),
    ];
    if let Some(ad) = &model.adapter {
        out.push(("adapter.a".into(), Tensor::from_matrix(&ad.a)));
        out.push(("adapter.b".into(), Tensor::from_matrix(&ad.b)));
        out.push(("adapter.alpha".into(), Tensor::from_vector(&[ad.alpha])));
    }
    for (l, block) in model.blocks.iter().enumerate() {
        let prefix = format!("block{l}.");
        let kind = match &block.layer {
            BlockLayer::Dense(f) => {
                out.extend(with_prefix(&prefix, ffn_to_tensors(f)));
                0
            }
            BlockLayer::Emoe(e) => {
                out.extend(with_prefix(&prefix, emoe_to_tensors(e)));
                let ids: Vec<T> = e
                    .partition()?
                    .assignment()
                    .iter()
                    .map(|&a| T::from_count(a))
                    .collect();
                out.push((format!("{prefix}partition"), Tensor::from_vector(&ids)));
                1
            }
        };
        let bmeta = [kind, block.residual as usize].map(T::from_count);
        out.push((format!("{prefix}meta.block"), Tensor::from_vector(&bmeta)));
    }
    Ok(out)
}

pub fn model_from_tensors<T: Scalar>(tensors: &[(String, Tensor)]) -> Result<ToyModel<T>> {
    let meta = require(tensors, "model.meta")?.to_vector::<T>()?;
    let (h_in, h, n_classes) = (
        meta_int(&meta, 0, "h_in")?,
        meta_int(&meta, 1, "h")?,
        meta_int(&meta, 2, "n_classes")?,
    );
    let n_blocks = meta_int(&meta, 3, "n_blocks")?;
    let rank = meta_int(&meta, 4, "adapter rank")?;
    let trainable = trainable_from_bits(meta_int(&meta, 5, "trainable")?);
    let input_proj = require(tensors, "input_proj")?.to_matrix::<T>()?;
    let head = require(tensors, "head")?.to_matrix::<T>()?;
    if input_proj.shape() != (h, h_in) || head.shape() != (n_classes, h) {
        return Err(Error::Validation(
            "projection or head shape disagrees with model.meta".into(),
        ));
    }
    let adapter = if rank == 0 {
        None
    } else {
        let a = require(tensors, "adapter.a")?.to_matrix::<T>()?;
        let b = require(tensors, "adapter.b")?.to_matrix::<T>()?;
        let alpha = require(tensors, "adapter.alpha")?.to_vector::<T>()?;
        if a.shape() != (rank, h_in) || b.shape() != (h, rank) || alpha.len() != 1 {
            return Err(Error::Validation(
                "adapter shapes disagree with model.meta".into(),
            ));
        }
        Some(Adapter {
            a,
            b,
            alpha: alpha[0],
        })
    };
    let mut blocks = Vec::with_capacity(n_blocks);
    for l in 0..n_blocks {
        let sub = strip_prefix(&format!("block{l}."), tensors);
        let bmeta = require(&sub, "meta.block")?.to_vector::<T>()?;
        let residual = meta_int(&bmeta, 1, "residual")? == 1;
        let layer = match meta_int(&bmeta, 0, "block kind")? {
            0 => BlockLayer::Dense(ffn_from_tensors(&sub)?),
            1 => {
                let ids = require(&sub, "partition")?.to_vector::<T>()?;
                let assignment = (0..ids.len())
                    .map(|i| meta_int(&ids, i, "expert id"))
                    .collect::<Result<Vec<_>>>()?;
                let n = meta_int(&require(&sub, "meta")?.to_vector::<T>()?, 3, "N")?;
                let partition =
                    Partition::new(assignment, n).map_err(|e| Error::Validation(e.to_string()))?;
                BlockLayer::Emoe(emoe_from_tensors(&sub, &partition)?)
            }
            other => return Err(Error::Validation(format!("unknown block kind {other}"))),
        };
        let dim = match &layer {
            BlockLayer::Dense(f) => f.h(),
            BlockLayer::Emoe(e) => e.h(),
        };
        if dim != h {
            return Err(Error::Validation(format!(
                "block {l} has h = {dim}, model has h = {h}"
            )));
        }
        blocks.push(Block { layer, residual });
    }
    Ok(ToyModel {
        input_proj,
        adapter,
        blocks,
        head,
        trainable,
    })
}

pub fn write_model<T: Scalar>(path: impl AsRef<Path>, model: &ToyModel<T>) -> Result<()> {
    write_tensors(path, &model_to_tensors(model)?)
}

pub fn read_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ToyModel<T>> {
    model_from_tensors(&read_tensors(path)?)
}

/// Stored precision of a model checkpoint.
pub fn model_dtype(tensors: &[(String, Tensor)]) -> Result<DType> {
    Ok(require(tensors, "input_proj")?.dtype())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::random_partition;
    use crate::numerics::Rng;

    #[test]
    fn empty_list_is_header_only() {
        let bytes = encode_tensors(&[]).unwrap();
        assert_eq!(bytes, b"EMOE\x01\x00\x00\x00\x00\x00\x00\x00");
        assert!(decode_tensors(&bytes).unwrap().is_empty());
    }

    #[test]
    fn f64_payload_size() {
        let m = Matrix::<f64>::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        let bytes = encode_tensors(&[("x".into(), Tensor::from_matrix(&m))]).unwrap();
        let header = 12 + 2 + 1 + 1 + 1 + 8;
        assert_eq!(bytes.len() - header, 48);
        let back = decode_tensors(&bytes).unwrap();
        assert!(back[0].1.to_matrix::<f64>().unwrap().bitwise_eq(&m));
    }

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::from_vector(&[1.5f32]);
        let bytes = encode_tensors(&[("ab".into(), t)]).unwrap();
        let mut want = b"EMOE".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend([2, 0, b'a', b'b', 0, 1, 1, 0, 0, 0]);
        want.extend(1.5f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_input() {
        let t = Tensor::from_vector(&[1.0f64, 2.0]);
        let good = encode_tensors(&[("t".into(), t.clone())]).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_tensors(&bad),
            Err(Error::Format { offset: 0, .. })
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            decode_tensors(truncated),
            Err(Error::Format { .. })
        ));

        let mut dtype = good.clone();
        dtype[12 + 2 + 1] = 7;
        assert!(matches!(
            decode_tensors(&dtype),
            Err(Error::Format { offset: 15, .. })
        ));

        let mut version = good.clone();
        version[4] = 2;
        assert!(matches!(
            decode_tensors(&version),
            Err(Error::Format { offset: 4, .. })
        ));

        let mut nan = good.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_tensors(&nan), Err(Error::Validation(_))));

        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(
            decode_tensors(&trailing),
            Err(Error::Format { .. })
        ));

        assert!(matches!(
            encode_tensors(&[("t".into(), t.clone()), ("t".into(), t)]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn partition_file_layout() {
        let p = Partition::from_groups(&[vec![0, 3], vec![1, 2]]).unwrap();
        let bytes = encode_partition(&p).unwrap();
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(
            &bytes[16..],
            &[0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]
        );
        assert_eq!(decode_partition(&bytes).unwrap(), p);

        let mut unbalanced = bytes.clone();
        unbalanced[20] = 0;
        assert!(matches!(
            decode_partition(&unbalanced),
            Err(Error::Validation(_))
        ));
        let mut out_of_range = bytes;
        out_of_range[16] = 5;
        assert!(matches!(
            decode_partition(&out_of_range),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn layer_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(12);
        let layer = FfnLayer::<f32>::random(6, 24, ActivationKind::GeluTanh, &mut rng)
            .with_biases(
                Some((0..24).map(|i| i as f32 * 0.01).collect()),
                Some(vec![0.5; 6]),
            )
            .unwrap();
        let dense = dir.path().join("dense.emoe");
        write_ffn(&dense, &layer).unwrap();
        assert!(read_ffn::<f32>(&dense).unwrap().bitwise_eq(&layer));
        assert!(matches!(read_ffn::<f64>(&dense), Err(Error::Validation(_))));

        let split = EmoeLayer::split(
            &layer,
            &random_partition(24, 4, 3).unwrap(),
            2,
            GateMode::Learned,
        )
        .unwrap();
        let sparse = dir.path().join("sparse.emoe");
        write_emoe(&sparse, &split).unwrap();
        assert!(partition_sidecar(&sparse).exists());
        assert!(read_emoe::<f32>(&sparse).unwrap().bitwise_eq(&split));
        match load_layer(&sparse).unwrap() {
            LoadedLayer::F32(Layer::Emoe(e)) => assert!(e.bitwise_eq(&split)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_layer(&dense).unwrap(),
            LoadedLayer::F32(Layer::Dense(_))
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_tensors("/nonexistent/x.emoe").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.emoe"));
    }

    fn toy_model(split: bool) -> ToyModel<f64> {
        use crate::train::{convert_lora2emoe, ModelSpec};
        let spec = ModelSpec {
            h_in: 3,
            h: 4,
            d: 8,
            n_blocks: 2,
            n_classes: 2,
            activation: ActivationKind::GeluTanh,
            residual: true,
        };
        let mut m = ToyModel::<f64>::new(&spec, 5).unwrap();
        m.blocks[1].residual = false;
        m.adapter = Some(Adapter::new(4, 3, 2, 0.5, &mut Rng::new(6)));
        m.trainable = Trainable::ADAPTER;
        if split {
            let parts = vec![
                random_partition(8, 4, 1).unwrap(),
                random_partition(8, 2, 2).unwrap(),
            ];
            m = convert_lora2emoe(&m, &parts, 2, GateMode::Learned).unwrap();
        }
        m
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for split in [false, true] {
            let m = toy_model(split);
            let path = dir.path().join("m.emoe");
            write_model(&path, &m).unwrap();
            let back: ToyModel<f64> = read_model(&path).unwrap();
            assert!(back.bitwise_eq(&m));
            assert_eq!(back, m);
            assert_eq!(
                model_dtype(&read_tensors(&path).unwrap()).unwrap(),
                DType::F64
            );
        }
    }

    #[test]
    fn model_rejects_missing_block() {
        let tensors: TensorList = model_to_tensors(&toy_model(true))
            .unwrap()
            .into_iter()
            .filter(|(n, _)| n != "block1.partition")
            .collect();
        assert!(matches!(
            model_from_tensors::<f64>(&tensors),
            Err(Error::Validation(_))
        ));
    }

    mod props {
        use super::*;
        use crate::numerics::Rng;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn tensors_round_trip_bitwise(
                rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(), wide in any::<bool>()
            ) {
                let mut rng = Rng::new(seed);
                let t = if wide {
                    Tensor::from_matrix(&Matrix::<f64>::random_normal(rows, cols, 3.0, &mut rng))
                } else {
                    Tensor::from_matrix(&Matrix::<f32>::random_normal(rows, cols, 3.0, &mut rng))
                };
                let list = vec![("m".to_string(), t), ("v".to_string(), Tensor::from_vector(&[seed as f64 * 1e-9]))];
                let back = decode_tensors(&encode_tensors(&list).unwrap()).unwrap();
                prop_assert!(tensors_bitwise_eq(&list, &back));
            }

            #[test]
            fn partitions_round_trip(seed in any::<u64>(), n in 1usize..8, per in 1usize..8) {
                let p = random_partition(n * per, n, seed).unwrap();
                prop_assert_eq!(decode_partition(&encode_partition(&p).unwrap()).unwrap(), p);
            }
        }
    }
}

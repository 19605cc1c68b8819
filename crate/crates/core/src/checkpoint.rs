//! Binary checkpoints for the network and the adapter.
//!
//! Layout (little endian): magic `SHAD`, `u16` version, `u8` kind, `u32`
//! metadata length and JSON metadata, `u32` record count, then per record a
//! `u32` name length, the UTF-8 name, `u32` rows, `u32` cols and the `f64`
//! payload in row-major order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterSpec, MappingVector};
use crate::error::{Error, Result};
use crate::gradcore::RealMatrix;
use crate::model::{Network, NetworkSpec, ParamGroup, ParamStore};
use crate::normalization::{NormConfig, NormLayer};

pub const MAGIC: &[u8; 4] = b"SHAD";
pub const VERSION: u16 = 1;
const KIND_MODEL: u8 = 1;
const KIND_ADAPTER: u8 = 2;

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    spec: NetworkSpec,
    norm_config: NormConfig,
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    spec: AdapterSpec,
    mapping: MappingVector,
}

fn running_name(block: usize, stat: &str) -> String {
    format!("model.block{block}.norm.{stat}")
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: u8, meta: &impl Serialize) -> Result<Self> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.0.push(kind);
        let json = serde_json::to_vec(meta)?;
        w.u32(json.len())?;
        w.0.extend_from_slice(&json);
        Ok(w)
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn records(mut self, records: &[(String, &RealMatrix)]) -> Result<Vec<u8>> {
        self.u32(records.len())?;
        for (name, m) in records {
            self.u32(name.len())?;
            self.0.extend_from_slice(name.as_bytes());
            self.u32(m.rows())?;
            self.u32(m.cols())?;
            for v in m.data() {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(self.0)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    /// Checks the header and returns the metadata JSON.
    fn header(&mut self, kind: u8) -> Result<&'a [u8]> {
        if self.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let found = self.take(1)?[0];
        if found != kind {
            return Err(Error::Checkpoint(format!("expected kind {kind}, found {found}")));
        }
        let len = self.u32()?;
        self.take(len)
    }

    fn records(&mut self) -> Result<Vec<(String, RealMatrix)>> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = self.u32()?;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let (rows, cols) = (self.u32()?, self.u32()?);
            let bytes = self.take(rows * cols * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push((name, RealMatrix::from_vec(rows, cols, data)?));
        }
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint("trailing bytes after records".into()));
        }
        Ok(out)
    }
}

pub fn encode_network(net: &Network) -> Result<Vec<u8>> {
    let norm_config = net
        .norms
        .iter()
        .flatten()
        .next()
        .map(|l| l.config)
        .unwrap_or_default();
    let meta = ModelMeta {
        spec: net.spec.clone(),
        norm_config,
    };
    let mut records: Vec<(String, &RealMatrix)> = net
        .params
        .iter()
        .map(|e| (format!("model.{}", e.name), &e.value))
        .collect();
    for (i, layer) in net.norms.iter().enumerate() {
        if let Some(l) = layer {
            records.push((running_name(i, "running_mean"), &l.running_mean));
            records.push((running_name(i, "running_var"), &l.running_var));
        }
    }
    Writer::new(KIND_MODEL, &meta)?.records(&records)
}

pub fn decode_network(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let meta: ModelMeta = serde_json::from_slice(r.header(KIND_MODEL)?)?;
    let mut records = r.records()?;
    let mut norms: Vec<Option<NormLayer>> = Vec::new();
    for (i, kind) in meta.spec.norm.iter().enumerate() {
        norms.push(match kind {
            crate::model::NormKind::Norm => {
                let mut layer = NormLayer::new(meta.spec.hidden_dims[i], meta.norm_config);
                layer.running_mean = take_record(&mut records, &running_name(i, "running_mean"))?;
                layer.running_var = take_record(&mut records, &running_name(i, "running_var"))?;
                Some(layer)
            }
            crate::model::NormKind::Identity => None,
        });
    }
    let mut params = ParamStore::new();
    for (name, m) in records {
        let stripped = name
            .strip_prefix("model.")
            .ok_or_else(|| Error::Checkpoint(format!("unexpected record `{name}`")))?;
        params.insert(stripped, m, ParamGroup::Trainable)?;
    }
    let net = Network::from_parts(meta.spec, params, norms)?;
    check_layout(&net)?;
    Ok(net)
}

fn check_layout(net: &Network) -> Result<()> {
    let spec = &net.spec;
    let mut expected = Vec::new();
    let mut fan_in = spec.input_dim;
    for (i, (&w, kind)) in spec.hidden_dims.iter().zip(&spec.norm).enumerate() {
        expected.push((crate::model::block_weight(i), (fan_in, w)));
        match kind {
            crate::model::NormKind::Norm => {
                expected.push((crate::model::norm_gamma(i), (1, w)));
                expected.push((crate::model::norm_beta(i), (1, w)));
            }
            crate::model::NormKind::Identity => expected.push((crate::model::block_bias(i), (1, w))),
        }
        fan_in = w;
    }
    expected.push((crate::model::HEAD_WEIGHT.to_string(), (fan_in, spec.num_classes)));
    expected.push((crate::model::HEAD_BIAS.to_string(), (1, spec.num_classes)));
    if expected.len() != net.params.len() {
        return Err(Error::Checkpoint("parameter count does not match the network spec".into()));
    }
    for (name, shape) in expected {
        let got = net
            .params
            .get(&name)
            .map_err(|_| Error::Checkpoint(format!("missing record `model.{name}`")))?;
        if got.shape() != shape {
            return Err(Error::Checkpoint(format!("record `model.{name}` has shape {:?}", got.shape())));
        }
    }
    for (i, layer) in net.norms.iter().enumerate() {
        if let Some(l) = layer {
            let w = spec.hidden_dims[i];
            if l.running_mean.shape() != (1, w) || l.running_var.shape() != (1, w) {
                return Err(Error::Checkpoint(format!("running statistics of block {i} have the wrong width")));
            }
        }
    }
    Ok(())
}

fn take_record(records: &mut Vec<(String, RealMatrix)>, name: &str) -> Result<RealMatrix> {
    let pos = records
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))?;
    Ok(records.remove(pos).1)
}

pub fn encode_adapter(adapter: &Adapter) -> Result<Vec<u8>> {
    let meta = AdapterMeta {
        spec: adapter.spec,
        mapping: adapter.mapping.clone(),
    };
    let records: Vec<(String, &RealMatrix)> =
        adapter.params.iter().map(|e| (e.name.clone(), &e.value)).collect();
    Writer::new(KIND_ADAPTER, &meta)?.records(&records)
}

pub fn decode_adapter(bytes: &[u8]) -> Result<Adapter> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let meta: AdapterMeta = serde_json::from_slice(r.header(KIND_ADAPTER)?)?;
    let records = r.records()?;
    // A zero-seeded template provides the expected names and shapes.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut adapter = Adapter::new(meta.spec, meta.mapping, &mut rng)?;
    if records.len() != adapter.params.len() {
        return Err(Error::Checkpoint("adapter record count does not match its spec".into()));
    }
    for (name, m) in records {
        let slot = adapter
            .params
            .get_mut(&name)
            .map_err(|_| Error::Checkpoint(format!("unexpected record `{name}`")))?;
        if slot.shape() != m.shape() {
            return Err(Error::Checkpoint(format!("record `{name}` has shape {:?}", m.shape())));
        }
        *slot = m;
    }
    Ok(adapter)
}

fn write_file(path: &Path, bytes: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(fs::write(path, bytes)?)
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    write_file(path, encode_network(net)?)
}

pub fn load_network(path: &Path) -> Result<Network> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read model checkpoint {}: {e}", path.display())))?;
    decode_network(&bytes)
}

pub fn save_adapter(adapter: &Adapter, path: &Path) -> Result<()> {
    write_file(path, encode_adapter(adapter)?)
}

pub fn load_adapter(path: &Path) -> Result<Adapter> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read adapter checkpoint {}: {e}", path.display())))?;
    decode_adapter(&bytes)
}

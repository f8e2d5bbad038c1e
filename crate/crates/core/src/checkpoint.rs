//! Sectioned binary checkpoint format.
//!
//! Layout: magic `QGRD1`, format version (u32), section count (u32), then
//! sections of `tag[4] | payload length (u64) | payload`. All integers and
//! floats are little-endian. Sections, in order: `CONF` (model config as
//! `key=value` text), `VOCB` (tokens, one per line), `PARM` (full-precision
//! parameters), `QBAS` (frozen quantized bases), `ADPT` (LoRA adapters) and
//! `META` (training metadata as `key=value` text).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{build_model, HeadKind, Model, ModelConfig};
use crate::quant::{Bits, QuantizedTensor};

pub const MAGIC: &[u8; 5] = b"QGRD1";
pub const FORMAT_VERSION: u32 = 1;

const SECTION_ORDER: [&[u8; 4]; 6] = [b"CONF", b"VOCB", b"PARM", b"QBAS", b"ADPT", b"META"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingMeta {
    pub seed: u64,
    /// Epoch whose parameters are stored (0 for an untrained model).
    pub epoch: u64,
    /// `scorer` or `feedback`.
    pub task: String,
    /// Prompt mode of a feedback generator, `none` otherwise.
    pub mode: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub meta: TrainingMeta,
}

/// Hex SHA-256 of the config text.
pub fn config_hash(config: &ModelConfig) -> String {
    let digest = Sha256::digest(config.to_kv().as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }
    fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }
    fn dims(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BadCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("unexpected end of data"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| bad(format!("length {n} exceeds data")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("array too long"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn str(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.bytes()?).map_err(|_| bad("invalid utf-8"))
    }
    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if n > crate::tensor::MAX_RANK {
            return Err(bad(format!("rank {n} too large")));
        }
        (0..n).map(|_| self.len()).collect()
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn kv_lines(text: &str) -> Vec<(&str, &str)> {
    text.lines().filter_map(|l| l.split_once('=')).collect()
}

impl TrainingMeta {
    fn to_kv(&self, config: &ModelConfig) -> String {
        format!(
            "seed={}\nepoch={}\ntask={}\nmode={}\nconfig_sha256={}\n",
            self.seed,
            self.epoch,
            self.task,
            self.mode,
            config_hash(config)
        )
    }

    fn from_kv(text: &str, config: &ModelConfig) -> Result<Self> {
        let mut meta = TrainingMeta {
            seed: 0,
            epoch: 0,
            task: String::new(),
            mode: String::new(),
        };
        let mut hash = None;
        for (k, v) in kv_lines(text) {
            match k {
                "seed" => meta.seed = v.parse().map_err(|_| bad("bad seed"))?,
                "epoch" => meta.epoch = v.parse().map_err(|_| bad("bad epoch"))?,
                "task" => meta.task = v.to_string(),
                "mode" => meta.mode = v.to_string(),
                "config_sha256" => hash = Some(v.to_string()),
                _ => return Err(bad(format!("unknown metadata key {k:?}"))),
            }
        }
        if hash.as_deref() != Some(config_hash(config).as_str()) {
            return Err(bad("config hash does not match the stored config"));
        }
        Ok(meta)
    }
}

impl Checkpoint {
    pub fn new(model: Model, vocab: Vocab, meta: TrainingMeta) -> Result<Self> {
        if vocab.len() != model.config().vocab_size {
            return Err(Error::InvalidConfig(format!(
                "vocab has {} tokens but the model expects {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        Ok(Self { model, vocab, meta })
    }

    /// Fails with `IncompatibleCheckpoint` unless the model has `head`.
    pub fn require_head(&self, head: HeadKind) -> Result<()> {
        let actual = self.model.config().head_kind;
        if actual != head {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a model with a {head} head, found {actual} (task {})",
                self.meta.task
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model;
        let adapter_params: Vec<usize> = model.adapters().iter().flat_map(|a| [a.a, a.b]).collect();
        let mut sections: Vec<Vec<u8>> = Vec::with_capacity(6);

        sections.push(model.config().to_kv().into_bytes());
        sections.push(self.vocab.tokens().join("\n").into_bytes());

        let mut w = Writer(Vec::new());
        let plain: Vec<_> = model
            .params()
            .iter()
            .enumerate()
            .filter(|(i, _)| !adapter_params.contains(i))
            .collect();
        w.u32(plain.len() as u32);
        for (_, p) in plain {
            w.str(&p.name);
            w.u8(p.trainable as u8);
            w.dims(p.tensor.shape());
            w.f64s(p.tensor.data());
        }
        sections.push(w.0);

        let mut w = Writer(Vec::new());
        w.u32(model.bases().len() as u32);
        for b in model.bases() {
            let q = &b.quantized;
            w.str(&b.name);
            w.dims(q.shape());
            w.u8(q.bits().width());
            w.u64(q.block_size() as u64);
            w.f64s(q.scales());
            w.bytes(&q.packed_codes());
        }
        sections.push(w.0);

        let mut w = Writer(Vec::new());
        w.u32(model.adapters().len() as u32);
        for a in model.adapters() {
            w.str(&a.name);
            w.u32(a.rank as u32);
            w.0.extend_from_slice(&a.alpha.to_le_bytes());
            w.u64(a.seed);
            for idx in [a.a, a.b] {
                let t = &model.params()[idx].tensor;
                w.dims(t.shape());
                w.f64s(t.data());
            }
        }
        sections.push(w.0);

        sections.push(self.meta.to_kv(model.config()).into_bytes());

        let mut out = Writer(Vec::new());
        out.0.extend_from_slice(MAGIC);
        out.u32(FORMAT_VERSION);
        out.u32(sections.len() as u32);
        for (tag, payload) in SECTION_ORDER.iter().zip(&sections) {
            out.0.extend_from_slice(*tag);
            out.bytes(payload);
        }
        out.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes)?;
        let get = |tag: &[u8; 4]| -> Result<&[u8]> {
            header
                .sections
                .iter()
                .find(|(t, _)| t == tag)
                .map(|(_, p)| *p)
                .ok_or_else(|| bad(format!("missing section {}", String::from_utf8_lossy(tag))))
        };
        let text = |tag: &[u8; 4]| -> Result<&str> {
            std::str::from_utf8(get(tag)?).map_err(|_| bad("invalid utf-8 in text section"))
        };

        let config = ModelConfig::from_kv(text(b"CONF")?).map_err(|e| bad(format!("config: {e}")))?;
        let vocab_text = text(b"VOCB")?;
        let vocab = Vocab::from_tokens(vocab_text.split('\n').map(str::to_string).collect())
            .ok_or_else(|| bad("malformed vocabulary"))?;
        let meta = TrainingMeta::from_kv(text(b"META")?, &config)?;
        let mut model = build_model(&config, meta.seed).map_err(|e| bad(format!("model: {e}")))?;

        let adapter_params: Vec<usize> = model.adapters().iter().flat_map(|a| [a.a, a.b]).collect();
        let plain: Vec<usize> = (0..model.params().len())
            .filter(|i| !adapter_params.contains(i))
            .collect();
        let mut r = Reader::new(get(b"PARM")?);
        if r.u32()? as usize != plain.len() {
            return Err(bad("parameter count mismatch"));
        }
        for idx in plain {
            let name = r.str()?.to_string();
            let trainable = r.u8()? != 0;
            let dims = r.dims()?;
            let data = r.f64s()?;
            let p = model.param_mut(idx);
            if p.name != name
                || p.trainable != trainable
                || p.tensor.shape() != dims.as_slice()
                || data.len() != p.tensor.len()
            {
                return Err(bad(format!("parameter {name:?} does not match the config layout")));
            }
            p.tensor.data_mut().copy_from_slice(&data);
        }
        if !r.done() {
            return Err(bad("trailing bytes in PARM"));
        }

        let mut r = Reader::new(get(b"QBAS")?);
        if r.u32()? as usize != model.bases().len() {
            return Err(bad("base count mismatch"));
        }
        for idx in 0..model.bases().len() {
            let name = r.str()?.to_string();
            let dims = r.dims()?;
            let bits = Bits::from_width(r.u8()?).map_err(|e| bad(e.to_string()))?;
            let block_size = r.len()?;
            let scales = r.f64s()?;
            let packed = r.bytes()?;
            if model.bases()[idx].name != name {
                return Err(bad(format!("base {name:?} does not match the config layout")));
            }
            let count = dims.iter().product();
            let codes = QuantizedTensor::unpack_codes(packed, bits, count).map_err(|e| bad(e.to_string()))?;
            let q =
                QuantizedTensor::from_parts(codes, scales, bits, block_size, dims).map_err(|e| bad(e.to_string()))?;
            model.set_base(idx, q).map_err(|e| bad(e.to_string()))?;
        }
        if !r.done() {
            return Err(bad("trailing bytes in QBAS"));
        }

        let mut r = Reader::new(get(b"ADPT")?);
        if r.u32()? as usize != model.adapters().len() {
            return Err(bad("adapter count mismatch"));
        }
        for idx in 0..model.adapters().len() {
            let name = r.str()?.to_string();
            let rank = r.u32()? as usize;
            let alpha = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let seed = r.u64()?;
            let info = model.adapters()[idx].clone();
            if info.name != name || info.rank != rank {
                return Err(bad(format!("adapter {name:?} does not match the config layout")));
            }
            for pidx in [info.a, info.b] {
                let dims = r.dims()?;
                let data = r.f64s()?;
                let t = &mut model.param_mut(pidx).tensor;
                if t.shape() != dims.as_slice() || t.len() != data.len() {
                    return Err(bad(format!("adapter {name:?} has wrong factor shape")));
                }
                t.data_mut().copy_from_slice(&data);
            }
            model
                .set_adapter_meta(idx, alpha, seed)
                .map_err(|e| bad(e.to_string()))?;
        }
        if !r.done() {
            return Err(bad("trailing bytes in ADPT"));
        }
        Checkpoint::new(model, vocab, meta).map_err(|e| bad(e.to_string()))
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp: PathBuf = path.with_file_name(format!(".{name}.tmp"));
    let res = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

/// Parsed header and raw section table.
pub struct Header<'a> {
    pub version: u32,
    pub sections: Vec<([u8; 4], &'a [u8])>,
}

/// Checks magic and version before reading the section table.
pub fn read_header(bytes: &[u8]) -> Result<Header<'_>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing QGRD1 magic"));
    }
    let mut r = Reader::new(&bytes[MAGIC.len()..]);
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut sections = Vec::with_capacity(count.min(16));
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let payload = r.bytes()?;
        sections.push((tag, payload));
    }
    if !r.done() {
        return Err(bad("trailing bytes after sections"));
    }
    Ok(Header { version, sections })
}

/// Human-readable header: version, section sizes, config and metadata.
pub fn describe(bytes: &[u8]) -> Result<String> {
    let header = read_header(bytes)?;
    let mut out = format!("format\tQGRD1\nversion\t{}\n", header.version);
    for (tag, payload) in &header.sections {
        let _ = writeln!(
            out,
            "section\t{}\t{} bytes",
            String::from_utf8_lossy(tag),
            payload.len()
        );
    }
    let ckpt = Checkpoint::from_bytes(bytes)?;
    let _ = writeln!(out, "vocab_size\t{}", ckpt.vocab.len());
    for line in ckpt.model.config().to_kv().lines() {
        let _ = writeln!(out, "config\t{line}");
    }
    for line in ckpt.meta.to_kv(ckpt.model.config()).lines() {
        let _ = writeln!(out, "meta\t{line}");
    }
    let counts = ckpt.model.param_counts();
    let _ = writeln!(
        out,
        "params\ttrainable={}\ttotal={}\tfraction={:.6}",
        counts.trainable,
        counts.total,
        counts.fraction()
    );
    Ok(out)
}

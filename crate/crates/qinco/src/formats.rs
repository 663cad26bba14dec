//! Model, code and index files built on the section container. Every file
//! starts with a `META` section holding the JSON record of the run that
//! produced it.

use std::path::Path;

use qinco_core::codec::{bytes_per_index, PqQincoModel};
use qinco_core::search::{AqDecoder, InvertedList, IvfIndex};
use qinco_core::{CodeArray, Matrix, QincoConfig, QincoModel, Rng, RqModel, Variant};
use serde_json::Value;

use crate::container::{Buf, Reader, Section, Writer};
use crate::error::{Error, Result};
use crate::vecs::{read_bytes, write_bytes};

pub const MODEL_MAGIC: [u8; 8] = *b"QINCOMDL";
pub const PQ_MAGIC: [u8; 8] = *b"QINCOPQM";
pub const CODES_MAGIC: [u8; 8] = *b"QINCODES";
pub const INDEX_MAGIC: [u8; 8] = *b"QINCOIVF";

fn meta_section(w: &mut Writer, meta: &Value) -> Result<()> {
    w.section(*b"META", serde_json::to_vec(meta)?);
    Ok(())
}

fn read_meta(r: &mut Reader<'_>) -> Result<Value> {
    let mut s = r.expect(*b"META")?;
    let offset = s.offset;
    serde_json::from_slice(s.rest()).map_err(|e| Error::Format {
        offset,
        message: format!("metadata is not JSON: {e}"),
    })
}

fn write_model_sections(w: &mut Writer, model: &QincoModel<f32>) {
    let c = model.config();
    let mut b = Buf::default();
    b.u64(c.dim as u64)
        .u64(c.steps as u64)
        .u64(c.codebook_size as u64)
        .u64(c.blocks as u64)
        .u64(c.hidden as u64)
        .u8(match c.variant {
            Variant::Standard => 0,
            Variant::LowRank => 1,
        })
        .u8(c.ivf_coupled_step1 as u8)
        .f32s(&[model.norm_scale]);
    w.section(*b"CONF", b.take());
    let mut t = Buf::default();
    let mut lens = Vec::new();
    model.params.for_each_tensor(|x| lens.push(x.len()));
    t.u64(lens.len() as u64);
    model.params.for_each_tensor(|x| {
        t.u64(x.len() as u64).f32s(x);
    });
    w.section(*b"TENS", t.take());
}

fn read_config(s: &mut Section<'_>) -> Result<(QincoConfig, f32)> {
    let mut cfg = QincoConfig::new(s.len()?, s.len()?, s.len()?, s.len()?, s.len()?);
    cfg.variant = match s.u8()? {
        0 => Variant::Standard,
        1 => Variant::LowRank,
        v => return Err(s.error(format!("unknown variant {v}"))),
    };
    cfg.ivf_coupled_step1 = match s.u8()? {
        0 => false,
        1 => true,
        v => return Err(s.error(format!("invalid flag {v}"))),
    };
    let scale = s.f32s(1)?[0];
    s.finish()?;
    cfg.validate().map_err(|e| s.error(e.to_string()))?;
    if cfg.dim.saturating_mul(cfg.codebook_size).saturating_mul(cfg.steps) > 1 << 31 {
        return Err(s.error("model dimensions are implausibly large"));
    }
    Ok((cfg, scale))
}

fn read_model_sections(r: &mut Reader<'_>) -> Result<QincoModel<f32>> {
    let mut conf = r.expect(*b"CONF")?;
    let (cfg, scale) = read_config(&mut conf)?;
    let zero = RqModel::new(vec![Matrix::zeros(cfg.codebook_size, cfg.dim); cfg.steps])?;
    let mut model = QincoModel::init_from_rq(&zero, cfg, &mut Rng::new(0))?;
    let mut lens = Vec::new();
    model.params.for_each_tensor(|x| lens.push(x.len()));
    let mut t = r.expect(*b"TENS")?;
    let count = t.len()?;
    if count != lens.len() {
        return Err(t.error(format!("expected {} tensors, found {count}", lens.len())));
    }
    let mut flat = Vec::with_capacity(model.num_params());
    for &want in &lens {
        let got = t.len()?;
        if got != want {
            return Err(t.error(format!("tensor of {got} values where {want} are expected")));
        }
        flat.extend(t.f32s(got)?);
    }
    t.finish()?;
    model.params.load_flat(&flat)?;
    QincoModel::from_parts(cfg, scale, model.params).map_err(|e| conf.error(e.to_string()))
}

pub fn model_bytes(model: &QincoModel<f32>, meta: &Value) -> Result<Vec<u8>> {
    let mut w = Writer::new(MODEL_MAGIC);
    meta_section(&mut w, meta)?;
    write_model_sections(&mut w, model);
    Ok(w.finish())
}

pub fn parse_model(bytes: &[u8]) -> Result<(QincoModel<f32>, Value)> {
    let mut r = Reader::parse(bytes, MODEL_MAGIC, "model")?;
    let meta = read_meta(&mut r)?;
    let model = read_model_sections(&mut r)?;
    r.finish()?;
    Ok((model, meta))
}

pub fn pq_model_bytes(model: &PqQincoModel<f32>, meta: &Value) -> Result<Vec<u8>> {
    let mut w = Writer::new(PQ_MAGIC);
    meta_section(&mut w, meta)?;
    w.section(*b"PQHD", Buf::default().u64(model.num_blocks() as u64).take());
    for b in &model.blocks {
        write_model_sections(&mut w, b);
    }
    Ok(w.finish())
}

pub fn parse_pq_model(bytes: &[u8]) -> Result<(PqQincoModel<f32>, Value)> {
    let mut r = Reader::parse(bytes, PQ_MAGIC, "product model")?;
    let meta = read_meta(&mut r)?;
    let mut head = r.expect(*b"PQHD")?;
    let n = head.len()?;
    head.finish()?;
    let blocks = (0..n).map(|_| read_model_sections(&mut r)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((PqQincoModel::new(blocks)?, meta))
}

fn write_indices(b: &mut Buf, indices: &[u32], width: usize) {
    for &i in indices {
        if width == 1 {
            b.u8(i as u8);
        } else {
            b.0.extend_from_slice(&(i as u16).to_le_bytes());
        }
    }
}

fn read_indices(s: &mut Section<'_>, n: usize, width: u8) -> Result<Vec<u32>> {
    let bytes = s.bytes(n.checked_mul(width as usize).ok_or_else(|| s.error("length overflow"))?)?;
    Ok(match width {
        1 => bytes.iter().map(|&b| b as u32).collect(),
        _ => bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect(),
    })
}

pub fn codes_bytes(codes: &CodeArray, meta: &Value) -> Result<Vec<u8>> {
    let mut w = Writer::new(CODES_MAGIC);
    meta_section(&mut w, meta)?;
    let width = codes.bytes_per_index();
    let mut h = Buf::default();
    h.u64(codes.len() as u64)
        .u32(codes.steps() as u32)
        .u32(codes.codebook_size() as u32)
        .u8(width as u8)
        .u8(codes.norms().is_some() as u8);
    w.section(*b"HEAD", h.take());
    let mut idx = Buf::default();
    write_indices(&mut idx, codes.indices(), width);
    w.section(*b"IDX ", idx.take());
    if let Some(n) = codes.norms() {
        w.section(*b"NRM ", Buf::default().f32s(n).take());
    }
    Ok(w.finish())
}

pub fn parse_codes(bytes: &[u8]) -> Result<(CodeArray, Value)> {
    let mut r = Reader::parse(bytes, CODES_MAGIC, "codes")?;
    let meta = read_meta(&mut r)?;
    let mut h = r.expect(*b"HEAD")?;
    let n = h.len()?;
    let steps = h.u32()? as usize;
    let k = h.u32()? as usize;
    let width = h.u8()?;
    let has_norms = h.u8()?;
    if width != 1 && width != 2 {
        return Err(h.error(format!("index width {width} is not 1 or 2")));
    }
    if k > 0 && k <= 1 << 16 && width as usize != bytes_per_index(k) {
        return Err(h.error(format!("index width {width} does not match codebook size {k}")));
    }
    h.finish()?;
    let mut idx = r.expect(*b"IDX ")?;
    let offset = idx.offset;
    let total = n.checked_mul(steps).ok_or_else(|| idx.error("length overflow"))?;
    let indices = read_indices(&mut idx, total, width)?;
    idx.finish()?;
    let norms = match has_norms {
        0 => None,
        1 => {
            let mut s = r.expect(*b"NRM ")?;
            let v = s.f32s(n)?;
            s.finish()?;
            Some(v)
        }
        v => return Err(h.error(format!("invalid flag {v}"))),
    };
    r.finish()?;
    let mut codes = CodeArray::new(steps, k, indices, norms).map_err(|e| Error::Format {
        offset,
        message: e.to_string(),
    })?;
    if steps == 0 && codes.len() != n {
        // zero-step codes carry their count only through the norms
        codes = CodeArray::new(0, k, Vec::new(), Some(vec![0.0; n]))?.truncate(0)?;
    }
    Ok((codes, meta))
}

fn write_matrix(b: &mut Buf, m: &Matrix<f32>) {
    b.u64(m.rows() as u64).u64(m.cols() as u64).f32s(m.as_slice());
}

fn read_matrix(s: &mut Section<'_>) -> Result<Matrix<f32>> {
    let rows = s.len()?;
    let cols = s.len()?;
    let n = rows.checked_mul(cols).ok_or_else(|| s.error("matrix size overflow"))?;
    Ok(Matrix::from_vec(rows, cols, s.f32s(n)?)?)
}

pub fn index_bytes(index: &IvfIndex<f32>, meta: &Value) -> Result<Vec<u8>> {
    let mut w = Writer::new(INDEX_MAGIC);
    meta_section(&mut w, meta)?;
    write_model_sections(&mut w, &index.model);
    let mut c = Buf::default();
    write_matrix(&mut c, &index.centroids);
    w.section(*b"CENT", c.take());
    let mut a = Buf::default();
    a.u64(index.aq.codebooks.len() as u64).f64(index.aq.fitted_mse);
    for cb in &index.aq.codebooks {
        write_matrix(&mut a, cb);
    }
    w.section(*b"AQCB", a.take());
    let width = bytes_per_index(index.model.codebook_size());
    let mut l = Buf::default();
    l.u64(index.lists.len() as u64);
    for list in &index.lists {
        l.u64(list.len() as u64);
        for &id in &list.ids {
            l.u64(id as u64);
        }
        write_indices(&mut l, &list.codes, width);
        l.f32s(&list.norms);
    }
    w.section(*b"LIST", l.take());
    Ok(w.finish())
}

pub fn parse_index(bytes: &[u8]) -> Result<(IvfIndex<f32>, Value)> {
    let mut r = Reader::parse(bytes, INDEX_MAGIC, "index")?;
    let meta = read_meta(&mut r)?;
    let model = read_model_sections(&mut r)?;
    let mut c = r.expect(*b"CENT")?;
    let centroids = read_matrix(&mut c)?;
    c.finish()?;
    let mut a = r.expect(*b"AQCB")?;
    let steps = a.len()?;
    let fitted_mse = a.f64()?;
    let codebooks = (0..steps).map(|_| read_matrix(&mut a)).collect::<Result<Vec<_>>>()?;
    a.finish()?;
    let aq = AqDecoder { codebooks, fitted_mse };
    let width = bytes_per_index(model.codebook_size()) as u8;
    let m = model.steps();
    let mut l = r.expect(*b"LIST")?;
    let offset = l.offset;
    let count = l.len()?;
    let mut lists = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = l.len()?;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let at = l.u64()?;
            ids.push(usize::try_from(at).map_err(|_| l.error("id does not fit in memory"))?);
        }
        let codes = read_indices(&mut l, n * m, width)?;
        let norms = l.f32s(n)?;
        lists.push(InvertedList { ids, codes, norms });
    }
    l.finish()?;
    r.finish()?;
    let index = IvfIndex::from_parts(centroids, model, aq, lists).map_err(|e| Error::Format {
        offset,
        message: e.to_string(),
    })?;
    Ok((index, meta))
}

/// Any of the model kinds a codec command accepts.
pub enum AnyModel {
    Plain(QincoModel<f32>),
    Product(PqQincoModel<f32>),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<(Self, Value)> {
        let bytes = read_bytes(path)?;
        if bytes.starts_with(&PQ_MAGIC) {
            let (m, meta) = parse_pq_model(&bytes)?;
            Ok((Self::Product(m), meta))
        } else {
            let (m, meta) = parse_model(&bytes)?;
            Ok((Self::Plain(m), meta))
        }
    }

    pub fn save(&self, path: &Path, meta: &Value) -> Result<()> {
        let bytes = match self {
            Self::Plain(m) => model_bytes(m, meta)?,
            Self::Product(m) => pq_model_bytes(m, meta)?,
        };
        write_bytes(path, &bytes)
    }
}

pub fn save_codes(path: &Path, codes: &CodeArray, meta: &Value) -> Result<()> {
    write_bytes(path, &codes_bytes(codes, meta)?)
}

pub fn load_codes(path: &Path) -> Result<(CodeArray, Value)> {
    parse_codes(&read_bytes(path)?)
}

pub fn save_index(path: &Path, index: &IvfIndex<f32>, meta: &Value) -> Result<()> {
    write_bytes(path, &index_bytes(index, meta)?)
}

pub fn load_index(path: &Path) -> Result<(IvfIndex<f32>, Value)> {
    parse_index(&read_bytes(path)?)
}

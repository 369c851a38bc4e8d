//! Single-file checkpoint format: JSON config header followed by named
//! float32 tensors (parameters, then buffers). Loads rebuild the model from
//! the embedded config and fail loudly on any name or shape mismatch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};

use super::{EpochCmt, ModelConfig, SequenceCmt};

const MAGIC: &[u8; 8] = b"CMTCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Epoch,
    Sequence,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Epoch => write!(f, "epoch"),
            ModelKind::Sequence => write!(f, "sequence"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epoch" => Ok(ModelKind::Epoch),
            "sequence" => Ok(ModelKind::Sequence),
            other => Err(Error::Config(format!(
                "unknown model kind '{other}' (expected 'epoch' or 'sequence')"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    config: ModelConfig,
    params: Vec<String>,
    buffers: Vec<String>,
}

pub enum CheckpointModel<F> {
    Epoch(EpochCmt<F>),
    Sequence(SequenceCmt<F>),
}

impl<F: Scalar> CheckpointModel<F> {
    pub fn kind(&self) -> ModelKind {
        match self {
            CheckpointModel::Epoch(_) => ModelKind::Epoch,
            CheckpointModel::Sequence(_) => ModelKind::Sequence,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            CheckpointModel::Epoch(m) => m.config(),
            CheckpointModel::Sequence(m) => m.config(),
        }
    }
}

fn write_tensor<F: Scalar>(w: &mut impl Write, t: &Tensor<F>) -> Result<()> {
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        let f = v.to_f64().unwrap() as f32;
        w.write_all(&f.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<F: Scalar>(r: &mut impl Read) -> Result<Tensor<F>> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let ndim = u32::from_le_bytes(b4) as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!("implausible tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut b4)?;
        data.push(sc::<F>(f32::from_le_bytes(b4) as f64));
    }
    Tensor::new(shape, data)
}

fn save_store<F: Scalar>(
    path: &Path,
    kind: ModelKind,
    config: &ModelConfig,
    store: &super::ParamStore<F>,
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind,
        config: config.clone(),
        params: store.names().to_vec(),
        buffers: store.buffer_names().to_vec(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for t in store.tensors() {
        write_tensor(&mut w, t)?;
    }
    for t in store.buffers() {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint<F: Scalar>(model: &CheckpointModel<F>, path: impl AsRef<Path>) -> Result<()> {
    match model {
        CheckpointModel::Epoch(m) => {
            save_store(path.as_ref(), ModelKind::Epoch, m.config(), m.params())
        }
        CheckpointModel::Sequence(m) => {
            save_store(path.as_ref(), ModelKind::Sequence, m.config(), m.params())
        }
    }
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<CheckpointModel<F>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let header_len = u32::from_le_bytes(b4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {} unsupported (expected {})",
            header.format_version, FORMAT_VERSION
        )));
    }

    let mut model = match header.kind {
        ModelKind::Epoch => CheckpointModel::Epoch(EpochCmt::new(&header.config, 0)?),
        ModelKind::Sequence => CheckpointModel::Sequence(SequenceCmt::new(&header.config, 0)?),
    };
    {
        let store = match &mut model {
            CheckpointModel::Epoch(m) => m.params_mut(),
            CheckpointModel::Sequence(m) => m.params_mut(),
        };
        if store.names() != header.params.as_slice()
            || store.buffer_names() != header.buffers.as_slice()
        {
            return Err(Error::Checkpoint(
                "checkpoint tensor names do not match the embedded config".into(),
            ));
        }
        for i in 0..header.params.len() {
            let t = read_tensor::<F>(&mut r)?;
            if t.shape() != store.param_by_index(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for parameter {}: {:?} vs {:?}",
                    header.params[i],
                    t.shape(),
                    store.param_by_index(i).shape()
                )));
            }
            *store.param_by_index_mut(i) = t;
        }
        for i in 0..header.buffers.len() {
            let t = read_tensor::<F>(&mut r)?;
            store.set_buffer_by_index(i, t);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(model)
}

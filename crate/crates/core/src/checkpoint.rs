//! Flat binary checkpoint format: magic + version + config echo followed
//! by the ordered parameter arrays as little-endian f64. The parameter
//! order is the construction order of `ParamSet`, which is stable for a
//! given config.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{Model, ModelConfig, Variant};

const MAGIC: &[u8; 8] = b"SEGCKPT\0";
const VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("model construction failed: {0}")]
    Model(#[from] crate::tensor::TensorError),
}

pub fn save(path: &Path, model: &Model) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = &model.cfg;
    buf.extend_from_slice(&(cfg.in_channels as u32).to_le_bytes());
    for c in cfg.stage_channels {
        buf.extend_from_slice(&(c as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(cfg.input_size as u32).to_le_bytes());
    for k in cfg.dem_kernel_sizes {
        buf.extend_from_slice(&(k as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(cfg.ca_kernel as u32).to_le_bytes());
    buf.push(cfg.mask_source_swap as u8);
    buf.push(match cfg.variant {
        Variant::Full => 0,
        Variant::DetailOnly => 1,
        Variant::SemanticOnly => 2,
        Variant::Baseline => 3,
    });
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    f.write_all(&buf).map_err(|source| CheckpointError::Io { path: path.into(), source })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt { path: self.path.into(), msg: "truncated".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    let corrupt = |msg: &str| CheckpointError::Corrupt { path: path.into(), msg: msg.into() };
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if r.u32()? != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let in_channels = r.u32()? as usize;
    let mut stage_channels = [0usize; 4];
    for c in &mut stage_channels {
        *c = r.u32()? as usize;
    }
    let input_size = r.u32()? as usize;
    let mut dem_kernel_sizes = [0usize; 3];
    for k in &mut dem_kernel_sizes {
        *k = r.u32()? as usize;
    }
    let ca_kernel = r.u32()? as usize;
    let mask_source_swap = r.u8()? != 0;
    let variant = match r.u8()? {
        0 => Variant::Full,
        1 => Variant::DetailOnly,
        2 => Variant::SemanticOnly,
        3 => Variant::Baseline,
        v => return Err(corrupt(&format!("unknown variant tag {v}"))),
    };
    let seed = r.u64()?;
    let cfg = ModelConfig {
        in_channels,
        stage_channels,
        input_size,
        dem_kernel_sizes,
        ca_kernel,
        mask_source_swap,
        variant,
        seed,
    };
    let mut model = Model::new(cfg)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(corrupt(&format!(
            "parameter count {} does not match config ({})",
            count,
            model.params.len()
        )));
    }
    for i in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt("non-utf8 parameter name"))?
            .to_string();
        if name != model.params.name(i) {
            return Err(corrupt(&format!(
                "parameter {i} name '{name}' does not match expected '{}'",
                model.params.name(i)
            )));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != model.params.tensor(i).shape() {
            return Err(corrupt(&format!("parameter '{name}' shape mismatch")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(8 * n)?;
        let t = model.params.tensor_mut(i);
        for (j, chunk) in raw.chunks_exact(8).enumerate() {
            t.data_mut()[j] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(model)
}

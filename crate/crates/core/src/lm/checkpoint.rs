//! Binary model checkpoints. All integers and floats are little-endian.
//!
//! ```text
//! magic            8 bytes  "MKTMODEL"
//! version          u32
//! vocab, hidden, rank, context_window   u32 × 4
//! alpha, context_mix                    f64 × 2
//! embedding        f64 × vocab·hidden   (row-major)
//! hidden           f64 × hidden·hidden
//! output           f64 × hidden·vocab
//! adapter A        f64 × rank·hidden
//! adapter B        f64 × hidden·rank
//! vocabulary id    u64
//! tokenizer spec   u32 byte length, then the spec in its text format
//! ```

use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::Array2;

use super::{BaseParams, LanguageModel, LowRankAdapter, ModelError};
use crate::tokenizers::TokenizerSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MKTMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_array<W: Write>(w: &mut W, a: &Array2<f64>) -> std::io::Result<()> {
    for v in a.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &LanguageModel, mut w: W) -> Result<(), ModelError> {
    let base = model.base();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for dim in [model.vocab_size(), model.hidden_size(), model.adapter.rank(), model.context_window()] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&model.adapter.alpha.to_le_bytes())?;
    w.write_all(&model.context_mix().to_le_bytes())?;
    for a in [&base.embedding, &base.hidden, &base.output, &model.adapter.a, &model.adapter.b] {
        put_array(&mut w, a)?;
    }
    w.write_all(&model.tokenizer().vocab().id().0.to_le_bytes())?;
    let text = model.tokenizer().to_text();
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => ModelError::Checkpoint("truncated checkpoint".into()),
            _ => ModelError::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn array(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>, ModelError> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches shape"))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<LanguageModel, ModelError> {
    let mut c = Cursor { inner: r };
    if &c.bytes::<8>()? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let (v, d, r, window) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    const LIMIT: usize = 1 << 16;
    if v > LIMIT || d > LIMIT || r > d {
        return Err(ModelError::Checkpoint("implausible dimensions".into()));
    }
    let alpha = c.f64()?;
    let context_mix = c.f64()?;
    let base = BaseParams { embedding: c.array(v, d)?, hidden: c.array(d, d)?, output: c.array(d, v)? };
    let adapter = LowRankAdapter { a: c.array(r, d)?, b: c.array(d, r)?, alpha };
    let vocab_id = u64::from_le_bytes(c.bytes()?);
    let len = c.u32()? as usize;
    let mut text = vec![0u8; len];
    c.inner.read_exact(&mut text).map_err(|_| ModelError::Checkpoint("truncated checkpoint".into()))?;
    let text = String::from_utf8(text).map_err(|_| ModelError::Checkpoint("tokenizer spec is not UTF-8".into()))?;
    let tokenizer = TokenizerSpec::from_text(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if tokenizer.vocab().id().0 != vocab_id {
        return Err(ModelError::Checkpoint("tokenizer does not match recorded vocabulary id".into()));
    }
    LanguageModel::from_parts(base, adapter, Arc::new(tokenizer), window, context_mix)
}

//! Versioned little-endian weight files.
//!
//! Layout: magic, version, architecture header, optional tag string, final
//! loss, then each tensor as `ndim, dims.., f64 data` in row-major order.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{Model, ModelError, Params, ToyLmConfig, VocabSpec};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PBLM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `model` with an optional free-form tag (e.g. a config hash).
pub fn write_checkpoint<W: Write>(mut w: W, model: &Model, tag: &str) -> Result<(), ModelError> {
    let c = model.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LE>(CHECKPOINT_VERSION)?;
    for v in [
        c.n_layers,
        c.d_model,
        c.n_heads,
        c.d_ff,
        c.max_seq,
        c.vocab.n_topics,
        c.vocab.n_fillers,
    ] {
        w.write_u32::<LE>(v as u32)?;
    }
    w.write_u64::<LE>(c.seed)?;
    w.write_u32::<LE>(tag.len() as u32)?;
    w.write_all(tag.as_bytes())?;
    w.write_f64::<LE>(model.final_loss().unwrap_or(f64::NAN))?;
    let shapes = Params::shapes(c);
    let tensors = model.params().tensors();
    w.write_u32::<LE>(tensors.len() as u32)?;
    for (t, shape) in tensors.iter().zip(&shapes) {
        w.write_u32::<LE>(shape.len() as u32)?;
        for &d in shape {
            w.write_u32::<LE>(d as u32)?;
        }
        for &x in t.iter() {
            w.write_f64::<LE>(x)?;
        }
    }
    Ok(())
}

/// Reads a checkpoint, returning the model and its tag.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model, String), ModelError> {
    let bad = |m: String| ModelError::BadCheckpoint(m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("wrong magic bytes".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.read_u32::<LE>()? as usize;
    }
    let config = ToyLmConfig {
        n_layers: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        d_ff: dims[3],
        max_seq: dims[4],
        vocab: VocabSpec {
            n_topics: dims[5],
            n_fillers: dims[6],
        },
        seed: r.read_u64::<LE>()?,
    };
    config.validate()?;
    let tag_len = r.read_u32::<LE>()? as usize;
    if tag_len > 1 << 16 {
        return Err(bad("tag too long".into()));
    }
    let mut tag = vec![0u8; tag_len];
    r.read_exact(&mut tag)?;
    let tag = String::from_utf8(tag).map_err(|_| bad("tag is not utf-8".into()))?;
    let loss = r.read_f64::<LE>()?;
    let shapes = Params::shapes(&config);
    let n = r.read_u32::<LE>()? as usize;
    if n != shapes.len() {
        return Err(bad(format!("expected {} tensors, found {n}", shapes.len())));
    }
    let mut params = Params::zeros(&config);
    for (i, (t, shape)) in params.tensors_mut().into_iter().zip(&shapes).enumerate() {
        let ndim = r.read_u32::<LE>()? as usize;
        let mut got = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            got.push(r.read_u32::<LE>()? as usize);
        }
        if &got != shape {
            return Err(bad(format!("tensor {i}: shape {got:?}, expected {shape:?}")));
        }
        r.read_f64_into::<LE>(t)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    let model = Model::from_params(config, params, (!loss.is_nan()).then_some(loss))?;
    Ok((model, tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model {
        Model::new(ToyLmConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq: 12,
            seed: 9,
            vocab: VocabSpec::default(),
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, "abc123").unwrap();
        assert_eq!(&buf[..4], CHECKPOINT_MAGIC);
        let (back, tag) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(tag, "abc123");
        assert_eq!(back, m);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, "").unwrap();
        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            read_checkpoint(wrong_magic.as_slice()),
            Err(ModelError::BadCheckpoint(_))
        ));
        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint(truncated).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_checkpoint(trailing.as_slice()).is_err());
    }
}

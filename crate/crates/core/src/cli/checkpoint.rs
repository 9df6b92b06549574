//! Self-describing binary checkpoints: magic `AR3D`, a format version, the
//! model/tokenizer configuration as length-prefixed text blocks, then every
//! parameter tensor with its name, rank, extents, and little-endian f64
//! data.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::config::{
    decoder_config, encoder_config, layout_to_config, model_to_config, ordering_strategy,
    ordering_to_keys, vocab_layout, FlatConfig,
};
use crate::model::{init_params, DecoderConfig, EncoderConfig, ModelParams};
use crate::tokenizer::{OrderingStrategy, VocabLayout};

pub const MAGIC: [u8; 4] = *b"AR3D";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    BadVersion { found: u32 },
    #[error("malformed config block: {0}")]
    BadConfig(String),
    #[error("unexpected end of file while reading {context}; no partial model is returned")]
    UnexpectedEof { context: String },
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown tensor {name} in checkpoint")]
    UnknownTensor { name: String },
    #[error("tensor {name} missing from checkpoint")]
    MissingTensor { name: String },
    #[error("layout vocab size {layout_vocab} does not match output projection width {out_proj}")]
    LayoutMismatch { layout_vocab: u32, out_proj: usize },
}

/// Everything needed to run a saved model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub enc: EncoderConfig,
    pub dec: DecoderConfig,
    pub layout: VocabLayout,
    /// Object ordering the model was trained with (cascade checks this).
    pub ordering: OrderingStrategy,
    pub params: ModelParams,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let werr = io_err(path);

    w.write_all(&MAGIC).map_err(&werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(&werr)?;

    let mut model_cfg = model_to_config(&ckpt.enc, &ckpt.dec);
    ordering_to_keys(&mut model_cfg, ckpt.ordering);
    for block in [model_cfg.to_text(), layout_to_config(&ckpt.layout).to_text()] {
        let bytes = block.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(&werr)?;
        w.write_all(bytes).map_err(&werr)?;
    }

    for (name, tensor) in ckpt.params.named_tensors() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes()).map_err(&werr)?;
        w.write_all(name_bytes).map_err(&werr)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes()).map_err(&werr)?;
        for &extent in &tensor.shape {
            w.write_all(&(extent as u64).to_le_bytes()).map_err(&werr)?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes()).map_err(&werr)?;
        }
    }
    w.flush().map_err(&werr)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::UnexpectedEof {
                context: context.to_string(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, context: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { found: version });
    }

    let mut read_block = |what: &str| -> Result<FlatConfig, CheckpointError> {
        let len = r.u32(what)? as usize;
        let text = std::str::from_utf8(r.take(len, what)?)
            .map_err(|e| CheckpointError::BadConfig(format!("{what}: {e}")))?;
        FlatConfig::parse(text).map_err(|e| CheckpointError::BadConfig(format!("{what}: {e}")))
    };
    let model_cfg = read_block("model config block")?;
    let layout_cfg = read_block("layout block")?;

    let bad = |e: anyhow::Error| CheckpointError::BadConfig(e.to_string());
    let layout = vocab_layout(&layout_cfg).map_err(bad)?;
    let enc = encoder_config(&model_cfg).map_err(bad)?;
    let dec = decoder_config(&model_cfg, layout.vocab_size()).map_err(bad)?;
    let ordering = ordering_strategy(&model_cfg).map_err(bad)?;

    // Shape skeleton from the configs; every stored tensor must slot into it.
    let mut params = init_params(&enc, &dec, 0);
    let mut filled: Vec<(String, bool)> = params
        .named_tensors()
        .iter()
        .map(|(n, _)| (n.clone(), false))
        .collect();

    while !r.done() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| CheckpointError::BadConfig(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &format!("tensor {name} data"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut named = params.named_tensors_mut();
        let slot = named
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::UnknownTensor { name: name.clone() })?;
        if slot.1.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: slot.1.shape.clone(),
                found: shape,
            });
        }
        slot.1.data = data;
        filled
            .iter_mut()
            .find(|(n, _)| *n == name)
            .expect("named set is fixed")
            .1 = true;
    }
    if let Some((name, _)) = filled.iter().find(|(_, ok)| !ok) {
        return Err(CheckpointError::MissingTensor { name: name.clone() });
    }

    let out_proj = params.out_w.shape[1];
    if out_proj != layout.vocab_size() as usize {
        return Err(CheckpointError::LayoutMismatch {
            layout_vocab: layout.vocab_size(),
            out_proj,
        });
    }
    Ok(Checkpoint {
        enc,
        dec,
        layout,
        ordering,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small_checkpoint(seed: u64) -> Checkpoint {
        let layout = VocabLayout::standard(10);
        let enc = EncoderConfig {
            bev_extent: 12.0,
            cell_size: 1.5,
            pillar_dim: 8,
            feature_dim: 16,
            mlp_depth: 2,
        };
        let dec = DecoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            vocab_size: layout.vocab_size(),
            t_max: 30,
            dropout: 0.1,
        };
        Checkpoint {
            params: init_params(&enc, &dec, seed),
            enc,
            dec,
            layout,
            ordering: OrderingStrategy::Random(17),
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = std::env::temp_dir().join("ar3d_ckpt_rt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ar3d");
        let ckpt = small_checkpoint(5);
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);

        // Saving twice is byte-identical.
        let path2 = dir.join("model2.ar3d");
        save_checkpoint(&path2, &ckpt).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let dir = std::env::temp_dir().join("ar3d_ckpt_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ar3d");
        save_checkpoint(&path, &small_checkpoint(6)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.join("cut.ar3d");
        std::fs::write(&cut, &bytes[..bytes.len() * 2 / 3]).unwrap();
        match load_checkpoint(&cut) {
            Err(CheckpointError::UnexpectedEof { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_distinct() {
        let dir = std::env::temp_dir().join("ar3d_ckpt_magic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ar3d");
        save_checkpoint(&path, &small_checkpoint(7)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        let bad_magic = dir.join("magic.ar3d");
        std::fs::write(&bad_magic, &wrong).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_magic),
            Err(CheckpointError::BadMagic { .. })
        ));

        bytes[4] = 99;
        let bad_version = dir.join("version.ar3d");
        std::fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_version),
            Err(CheckpointError::BadVersion { found: 99 })
        ));
    }

    #[test]
    fn layout_mismatch_reports_both_sizes() {
        let mut ckpt = small_checkpoint(8);
        // A layout whose vocabulary disagrees with the stored projection.
        ckpt.layout = VocabLayout::standard(9);
        let dir = std::env::temp_dir().join("ar3d_ckpt_layout");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ar3d");
        save_checkpoint(&path, &ckpt).unwrap();
        match load_checkpoint(&path) {
            // The config-derived skeleton catches the width difference on
            // the first mismatched tensor.
            Err(CheckpointError::ShapeMismatch { .. } | CheckpointError::LayoutMismatch { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}

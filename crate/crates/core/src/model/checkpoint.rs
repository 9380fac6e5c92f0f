//! Versioned binary checkpoints: config plus all parameters, round-tripping
//! bit-exactly.
//!
//! Layout: magic `CLB1`, format version u32, config JSON (length-prefixed),
//! then each parameter in canonical order as name, shape, and little-endian
//! f32 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::transformer::{LayerParams, ModelConfig, Params, TransformerModel};
use super::ModelError;
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"CLB1";
const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &TransformerModel<f32>, path: &Path) -> Result<(), ModelError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let config_json =
        serde_json::to_vec(&model.config).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    out.write_all(&(config_json.len() as u32).to_le_bytes())?;
    out.write_all(&config_json)?;

    let flat = model.params.flat();
    out.write_all(&(flat.len() as u32).to_le_bytes())?;
    for (name, tensor) in &flat {
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        out.write_all(name_bytes)?;
        out.write_all(&(tensor.shape().len() as u8).to_le_bytes())?;
        for &dim in tensor.shape() {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel<f32>, ModelError> {
    let mut input = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != FORMAT_VERSION {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let config_len = read_u32(&mut input)? as usize;
    let mut config_json = vec![0u8; config_len];
    input.read_exact(&mut config_json)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| ModelError::BadCheckpoint(format!("config: {e}")))?;

    let n_params = read_u32(&mut input)? as usize;
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u16(&mut input)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| ModelError::BadCheckpoint(format!("name: {e}")))?;
        let mut ndim = [0u8; 1];
        input.read_exact(&mut ndim)?;
        let shape: Vec<usize> = (0..ndim[0])
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            input.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| ModelError::BadCheckpoint(format!("{name}: {e}")))?;
        tensors.push((name, tensor));
    }

    rebuild(config, tensors)
}

fn read_u32(input: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(input: &mut impl Read) -> Result<u16, ModelError> {
    let mut buf = [0u8; 2];
    input.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn rebuild(
    config: ModelConfig,
    tensors: Vec<(String, Tensor<f32>)>,
) -> Result<TransformerModel<f32>, ModelError> {
    let mut iter = tensors.into_iter();
    let mut take = |expected: &str| -> Result<Tensor<f32>, ModelError> {
        let (name, tensor) = iter
            .next()
            .ok_or_else(|| ModelError::BadCheckpoint(format!("missing tensor {expected}")))?;
        if name != expected {
            return Err(ModelError::BadCheckpoint(format!(
                "expected tensor {expected}, found {name}"
            )));
        }
        Ok(tensor)
    };

    let tok_embed = take("tok_embed")?;
    let pos_embed = take("pos_embed")?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerParams {
            ln1_gain: take(&format!("layer{i}.ln1_gain"))?,
            ln1_bias: take(&format!("layer{i}.ln1_bias"))?,
            wq: take(&format!("layer{i}.wq"))?,
            bq: take(&format!("layer{i}.bq"))?,
            wk: take(&format!("layer{i}.wk"))?,
            bk: take(&format!("layer{i}.bk"))?,
            wv: take(&format!("layer{i}.wv"))?,
            bv: take(&format!("layer{i}.bv"))?,
            wo: take(&format!("layer{i}.wo"))?,
            ln2_gain: take(&format!("layer{i}.ln2_gain"))?,
            ln2_bias: take(&format!("layer{i}.ln2_bias"))?,
            w1: take(&format!("layer{i}.w1"))?,
            b1: take(&format!("layer{i}.b1"))?,
            w2: take(&format!("layer{i}.w2"))?,
            b2: take(&format!("layer{i}.b2"))?,
        });
    }
    let final_gain = take("final_gain")?;
    let final_bias = take("final_bias")?;
    let unembed = take("unembed")?;
    if iter.next().is_some() {
        return Err(ModelError::BadCheckpoint("trailing tensors".into()));
    }

    let model = TransformerModel {
        config,
        params: Params {
            tok_embed,
            pos_embed,
            layers,
            final_gain,
            final_bias,
            unembed,
        },
    };
    validate_shapes(&model)?;
    Ok(model)
}

fn validate_shapes(model: &TransformerModel<f32>) -> Result<(), ModelError> {
    let c = &model.config;
    let expect = |name: &str, t: &Tensor<f32>, shape: &[usize]| -> Result<(), ModelError> {
        if t.shape() != shape {
            return Err(ModelError::BadCheckpoint(format!(
                "{name}: shape {:?} does not match config {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(())
    };
    expect("tok_embed", &model.params.tok_embed, &[c.vocab_size, c.d_model])?;
    expect("pos_embed", &model.params.pos_embed, &[c.max_seq_len, c.d_model])?;
    for (i, l) in model.params.layers.iter().enumerate() {
        expect(&format!("layer{i}.wq"), &l.wq, &[c.d_model, c.d_model])?;
        expect(&format!("layer{i}.w1"), &l.w1, &[c.d_model, c.d_ff])?;
        expect(&format!("layer{i}.w2"), &l.w2, &[c.d_ff, c.d_model])?;
    }
    expect("unembed", &model.params.unembed, &[c.vocab_size, c.d_model])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn save_load_save_is_byte_identical() {
        let config = ModelConfig::new(2, 2, 16, 32, 20, 16).unwrap();
        let model = TransformerModel::<f32>::init(&config, &mut Rng::new(42));
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&model, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(loaded, model);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(ModelError::BadCheckpoint(_))
        ));
    }
}

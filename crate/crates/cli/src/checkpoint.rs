//! Self-describing checkpoint container.
//!
//! Layout: magic `LSLU`, format version (u32 LE), a length-prefixed flat
//! `key = value` config snapshot, then a tensor directory: for each tensor a
//! length-prefixed name, dtype byte, trainable byte, dims, a little-endian
//! f64 payload, and a CRC32 of the payload bytes. Everything is
//! little-endian, so the roundtrip is bitwise lossless.

use crate::config::{parse, render, ConfigMap};
use lslu_core::backbone::{Backbone, BackboneConfig};
use lslu_core::error::{Error, Result};
use lslu_core::light_encoder::{
    DomainSchema, IcRepr, LightEncoder, LightEncoderConfig, PoolingStrategy,
};
use lslu_core::param::{ParamSet, Parameter};
use lslu_core::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LSLU";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

// ── low-level writer/reader ─────────────────────────────────────────────

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn serialize(config: &ConfigMap, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_bytes(&mut out, render(config).as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        write_bytes(&mut out, p.name.as_bytes());
        out.push(DTYPE_F64);
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.tensor.shape.len() as u32).to_le_bytes());
        for &d in &p.tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let payload_len = (p.tensor.data.len() * 8) as u64;
        out.extend_from_slice(&payload_len.to_le_bytes());
        let mut hasher = crc32fast::Hasher::new();
        for v in &p.tensor.data {
            let bytes = v.to_le_bytes();
            hasher.update(&bytes);
            out.extend_from_slice(&bytes);
        }
        out.extend_from_slice(&hasher.finalize().to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(data_err("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn len_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn deserialize(buf: &[u8]) -> Result<(ConfigMap, ParamSet)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(data_err("not an LSLU checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(data_err(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_text = std::str::from_utf8(r.len_prefixed()?)
        .map_err(|_| data_err("checkpoint config snapshot is not UTF-8"))?;
    let config = parse(config_text).map_err(|e| data_err(format!("checkpoint config: {e}")))?;

    let n_tensors = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_tensors {
        let name = std::str::from_utf8(r.len_prefixed()?)
            .map_err(|_| data_err("tensor name is not UTF-8"))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(data_err(format!(
                "tensor {name}: unsupported dtype {dtype}"
            )));
        }
        let trainable = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let payload_len = r.u64()? as usize;
        let numel: usize = shape.iter().product();
        if payload_len != numel * 8 {
            return Err(data_err(format!(
                "tensor {name}: payload length {payload_len} does not match shape {shape:?}"
            )));
        }
        let payload = r.take(payload_len)?;
        let stored_crc = r.u32()?;
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(payload);
        if hasher.finalize() != stored_crc {
            return Err(data_err(format!(
                "tensor {name}: payload checksum mismatch"
            )));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        let param = if trainable {
            Parameter::trainable(&name, tensor)
        } else {
            Parameter::frozen(&name, tensor)
        };
        params.insert(param)?;
    }
    if r.pos != buf.len() {
        return Err(data_err("trailing bytes after checkpoint payload"));
    }
    Ok((config, params))
}

// ── config snapshots ────────────────────────────────────────────────────

fn backbone_config_map(cfg: &BackboneConfig) -> ConfigMap {
    let mut m = ConfigMap::new();
    m.insert("kind".into(), "backbone".into());
    m.insert("n_layers".into(), cfg.n_layers.to_string());
    m.insert("d_model".into(), cfg.d_model.to_string());
    m.insert("n_heads".into(), cfg.n_heads.to_string());
    m.insert("d_ff".into(), cfg.d_ff.to_string());
    m.insert("vocab_size".into(), cfg.vocab_size.to_string());
    m.insert("max_positions".into(), cfg.max_positions.to_string());
    m.insert("n_type_ids".into(), cfg.n_type_ids.to_string());
    m.insert("dropout".into(), cfg.dropout.to_string());
    m
}

fn get<'a>(map: &'a ConfigMap, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Config(format!("checkpoint config lacks key {key:?}")))
}

fn get_usize(map: &ConfigMap, key: &str) -> Result<usize> {
    get(map, key)?
        .parse()
        .map_err(|_| Error::Config(format!("checkpoint config key {key:?} is not an integer")))
}

fn get_f64(map: &ConfigMap, key: &str) -> Result<f64> {
    get(map, key)?
        .parse()
        .map_err(|_| Error::Config(format!("checkpoint config key {key:?} is not a number")))
}

fn backbone_config_from_map(map: &ConfigMap) -> Result<BackboneConfig> {
    Ok(BackboneConfig {
        n_layers: get_usize(map, "n_layers")?,
        d_model: get_usize(map, "d_model")?,
        n_heads: get_usize(map, "n_heads")?,
        d_ff: get_usize(map, "d_ff")?,
        vocab_size: get_usize(map, "vocab_size")?,
        max_positions: get_usize(map, "max_positions")?,
        n_type_ids: get_usize(map, "n_type_ids")?,
        dropout: get_f64(map, "dropout")?,
    })
}

fn pooling_name(p: PoolingStrategy) -> &'static str {
    match p {
        PoolingStrategy::ConcatAll => "concat_all",
        PoolingStrategy::LearnedLinear => "learned_linear",
        PoolingStrategy::LastLayer => "last_layer",
    }
}

fn pooling_from_name(s: &str) -> Result<PoolingStrategy> {
    match s {
        "concat_all" => Ok(PoolingStrategy::ConcatAll),
        "learned_linear" => Ok(PoolingStrategy::LearnedLinear),
        "last_layer" => Ok(PoolingStrategy::LastLayer),
        other => Err(Error::Config(format!("unknown pooling {other:?}"))),
    }
}

fn light_config_map(le: &LightEncoder) -> ConfigMap {
    let mut m = ConfigMap::new();
    m.insert("kind".into(), "light-encoder".into());
    m.insert("pooling".into(), pooling_name(le.config.pooling).into());
    m.insert("use_bilstm".into(), le.config.use_bilstm.to_string());
    m.insert("lstm_hidden".into(), le.config.lstm_hidden.to_string());
    m.insert("lstm_layers".into(), le.config.lstm_layers.to_string());
    m.insert("dense_out".into(), le.config.dense_out.to_string());
    m.insert("dropout".into(), le.config.dropout.to_string());
    m.insert(
        "ic_repr".into(),
        match le.config.ic_repr {
            IcRepr::ClsToken => "cls".into(),
            IcRepr::MeanPool => "mean".to_string(),
        },
    );
    m.insert("backbone_n_layers".into(), le.n_backbone_layers.to_string());
    m.insert("backbone_d_model".into(), le.d_model.to_string());
    m.insert("domain".into(), le.schema.domain_name.clone());
    m.insert("intents".into(), le.schema.intents.join(","));
    m.insert("slot_labels".into(), le.schema.slot_labels.join(","));
    m
}

// ── public API ──────────────────────────────────────────────────────────

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| data_err(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(bytes)
        .map_err(|e| data_err(format!("cannot write {}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| data_err(format!("cannot open {}: {e}", path.display())))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))?;
    Ok(buf)
}

pub fn save_backbone(path: &Path, backbone: &Backbone) -> Result<()> {
    let bytes = serialize(&backbone_config_map(&backbone.config), &backbone.params);
    write_file(path, &bytes)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let (map, params) = deserialize(&read_file(path)?)?;
    if get(&map, "kind")? != "backbone" {
        return Err(Error::Config(format!(
            "{} is not a backbone checkpoint (kind = {})",
            path.display(),
            get(&map, "kind")?
        )));
    }
    let config = backbone_config_from_map(&map)?;
    config.validate()?;
    let expected = lslu_core::report::count_backbone_params(&config);
    if params.num_scalars() != expected {
        return Err(Error::Config(format!(
            "backbone checkpoint holds {} scalars, config implies {expected}",
            params.num_scalars()
        )));
    }
    Ok(Backbone { config, params })
}

pub fn save_light(path: &Path, light: &LightEncoder) -> Result<()> {
    let bytes = serialize(&light_config_map(light), &light.params);
    write_file(path, &bytes)
}

/// Load a light-encoder checkpoint and verify it matches the backbone it is
/// about to run against — before any computation happens.
pub fn load_light(path: &Path, against: &BackboneConfig) -> Result<LightEncoder> {
    let (map, params) = deserialize(&read_file(path)?)?;
    if get(&map, "kind")? != "light-encoder" {
        return Err(Error::Config(format!(
            "{} is not a light-encoder checkpoint (kind = {})",
            path.display(),
            get(&map, "kind")?
        )));
    }
    let n_layers = get_usize(&map, "backbone_n_layers")?;
    let d_model = get_usize(&map, "backbone_d_model")?;
    if n_layers != against.n_layers || d_model != against.d_model {
        return Err(Error::Config(format!(
            "light encoder was trained against a {n_layers}-layer, {d_model}-wide backbone; \
             refusing to load against {}-layer, {}-wide",
            against.n_layers, against.d_model
        )));
    }
    let config = LightEncoderConfig {
        pooling: pooling_from_name(get(&map, "pooling")?)?,
        use_bilstm: get(&map, "use_bilstm")? == "true",
        lstm_hidden: get_usize(&map, "lstm_hidden")?,
        lstm_layers: get_usize(&map, "lstm_layers")?,
        dense_out: get_usize(&map, "dense_out")?,
        dropout: get_f64(&map, "dropout")?,
        ic_repr: match get(&map, "ic_repr")? {
            "cls" => IcRepr::ClsToken,
            "mean" => IcRepr::MeanPool,
            other => return Err(Error::Config(format!("unknown ic_repr {other:?}"))),
        },
    };
    let schema = DomainSchema {
        domain_name: get(&map, "domain")?.to_string(),
        intents: get(&map, "intents")?
            .split(',')
            .map(str::to_string)
            .collect(),
        slot_labels: get(&map, "slot_labels")?
            .split(',')
            .map(str::to_string)
            .collect(),
    };
    schema.validate()?;
    config.validate()?;
    let fresh = LightEncoder::new(config, schema.clone(), n_layers, d_model, 0)?;
    let mut expected_names = fresh.params.names();
    expected_names.sort();
    let mut got_names = params.names();
    got_names.sort();
    if expected_names != got_names {
        return Err(Error::Config(
            "light-encoder checkpoint parameter inventory does not match its config".into(),
        ));
    }
    for name in &expected_names {
        if params.get(name).tensor.shape != fresh.params.get(name).tensor.shape {
            return Err(Error::ShapeMismatch {
                op: "load_light",
                lhs: params.get(name).tensor.shape.clone(),
                rhs: fresh.params.get(name).tensor.shape.clone(),
            });
        }
    }
    Ok(LightEncoder {
        config,
        schema,
        params,
        n_backbone_layers: n_layers,
        d_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_roundtrip_bitwise() {
        let mut params = ParamSet::new();
        params
            .insert(Parameter::trainable(
                "a",
                Tensor::row(vec![1.0, -0.0, 1e-300, f64::MIN_POSITIVE]),
            ))
            .unwrap();
        params
            .insert(Parameter::frozen("b", Tensor::zeros(2, 3)))
            .unwrap();
        let mut cfg = ConfigMap::new();
        cfg.insert("kind".into(), "test".into());
        let bytes = serialize(&cfg, &params);
        let (cfg2, params2) = deserialize(&bytes).unwrap();
        assert_eq!(cfg2.get("kind").unwrap(), "test");
        assert_eq!(params2.fingerprint(), params.fingerprint());
        assert!(params2.get("a").trainable);
        assert!(!params2.get("b").trainable);
        // byte-identical re-serialization
        assert_eq!(serialize(&cfg2, &params2), bytes);
    }

    #[test]
    fn corruption_detected_per_tensor() {
        let mut params = ParamSet::new();
        params
            .insert(Parameter::trainable("weights", Tensor::row(vec![0.5; 16])))
            .unwrap();
        let cfg = ConfigMap::new();
        let bytes = serialize(&cfg, &params);
        // flip one bit in the payload region (last 4 bytes are the crc)
        let payload_byte = bytes.len() - 5 - 64;
        for target in [payload_byte, bytes.len() - 5] {
            let mut bad = bytes.clone();
            bad[target] ^= 0x01;
            let err = deserialize(&bad).unwrap_err();
            assert!(err.to_string().contains("checksum"), "{err}");
        }
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct() {
        let mut params = ParamSet::new();
        params
            .insert(Parameter::trainable("w", Tensor::scalar(1.0)))
            .unwrap();
        let bytes = serialize(&ConfigMap::new(), &params);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(deserialize(&bad_magic)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(deserialize(truncated)
            .unwrap_err()
            .to_string()
            .contains("truncated"));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(deserialize(&bad_version)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }
}

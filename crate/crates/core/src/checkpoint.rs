//! Binary checkpoint format.
//!
//! Layout: magic `S2PN`, version u32 LE, then self-describing tensor records
//! (name length u32 LE, name bytes, dtype code u8, rank u8, dims as u64 LE,
//! little-endian row-major payload), terminated by a u64 LE checksum of all
//! preceding bytes. Round trips are bit-exact.

use std::path::Path;

use crate::biasedmf::MfParams;
use crate::error::{Error, Result};
use crate::estimator::Variant;
use crate::kernel::{Activation, ParamSlot};
use crate::model::S2pnmModel;
use crate::scalar::{Dtype, Scalar};
use crate::seq2pref::{Seq2PrefParams, SeqDims};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"S2PN";
const VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode<T: Scalar>(tensors: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.as_slice() {
            v.write_le(&mut out);
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

#[derive(Debug)]
pub struct RawTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has dtype {}, expected {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let width = self.dtype.byte_width();
        let data: Vec<T> = self
            .payload
            .chunks_exact(width)
            .map(|c| T::read_le(c))
            .collect();
        Tensor::from_vec(&self.shape, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<RawTensor>> {
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut pos = 8usize;
    let end = body.len();
    let mut out = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > end {
            return Err(Error::Checkpoint("truncated tensor record".into()));
        }
        let slice = &body[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };
    while pos < end {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let dtype_code = take(&mut pos, 1)?[0];
        let dtype = Dtype::from_code(dtype_code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {dtype_code}")))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let payload = take(&mut pos, len * dtype.byte_width())?.to_vec();
        out.push(RawTensor {
            name,
            dtype,
            shape,
            payload,
        });
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Vec<RawTensor>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Dtype of the first tensor record, for dispatching the load path.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let tensors = load_raw(path)?;
    tensors
        .first()
        .map(|t| t.dtype)
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no tensors".into()))
}

fn find<'a>(tensors: &'a [RawTensor], name: &str) -> Result<&'a RawTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
}

fn meta_value(tensors: &[RawTensor], name: &str) -> Option<f64> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .map(|t| match t.dtype {
            Dtype::F32 => f32::from_le_bytes(t.payload[..4].try_into().unwrap()) as f64,
            Dtype::F64 => f64::from_le_bytes(t.payload[..8].try_into().unwrap()),
        })
}

/// Shape guard producing the error message contract: names the tensor.
pub fn expect_shape(name: &str, actual: &[usize], expected: &[usize]) -> Result<()> {
    if actual != expected {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {actual:?}, expected {expected:?}"
        )));
    }
    Ok(())
}

pub fn save_mf<T: Scalar>(path: &Path, mf: &MfParams<T>) -> Result<()> {
    let slots = mf.slots();
    let tensors: Vec<(&str, &Tensor<T>)> =
        slots.iter().map(|s| (s.name.as_str(), &s.value)).collect();
    save(path, &tensors)
}

pub fn load_mf<T: Scalar>(path: &Path) -> Result<MfParams<T>> {
    let raw = load_raw(path)?;
    mf_from_raw(&raw)
}

fn mf_from_raw<T: Scalar>(raw: &[RawTensor]) -> Result<MfParams<T>> {
    let user_factors = find(raw, "mf.user_factors")?.to_tensor::<T>()?;
    let item_factors = find(raw, "mf.item_factors")?.to_tensor::<T>()?;
    let user_bias = find(raw, "mf.user_bias")?.to_tensor::<T>()?;
    let item_bias = find(raw, "mf.item_bias")?.to_tensor::<T>()?;
    let global_bias = find(raw, "mf.global_bias")?.to_tensor::<T>()?;
    let (m, d) = (user_factors.rows(), user_factors.cols());
    let n = item_factors.rows();
    expect_shape("mf.item_factors", item_factors.shape(), &[n, d])?;
    expect_shape("mf.user_bias", user_bias.shape(), &[m])?;
    expect_shape("mf.item_bias", item_bias.shape(), &[n])?;
    expect_shape("mf.global_bias", global_bias.shape(), &[1])?;
    Ok(MfParams {
        user_factors: ParamSlot::new("mf.user_factors", user_factors),
        item_factors: ParamSlot::new("mf.item_factors", item_factors),
        user_bias: ParamSlot::new("mf.user_bias", user_bias),
        item_bias: ParamSlot::new("mf.item_bias", item_bias),
        global_bias: ParamSlot::new("mf.global_bias", global_bias),
    })
}

/// Evaluation-relevant settings carried inside a full-model checkpoint as
/// one-element meta tensors.
#[derive(Debug, Clone, Copy)]
pub struct ModelMeta {
    pub clip_predictions: bool,
}

pub fn save_model<T: Scalar>(path: &Path, model: &S2pnmModel<T>, meta: ModelMeta) -> Result<()> {
    let activation_code = match model.net.activation {
        Activation::Relu => 0.0,
        Activation::Sigmoid => 1.0,
        Activation::Tanh => 2.0,
    };
    let variant_code = match model.variant {
        Variant::Full => 0.0,
        Variant::DynamicOnly => 1.0,
        Variant::StaticOnly => 2.0,
    };
    let meta_tensors = [
        (
            "meta.activation",
            Tensor::scalar(T::from_f64(activation_code)),
        ),
        ("meta.variant", Tensor::scalar(T::from_f64(variant_code))),
        (
            "meta.clip",
            Tensor::scalar(T::from_f64(if meta.clip_predictions { 1.0 } else { 0.0 })),
        ),
        ("meta.p_drop", Tensor::scalar(T::from_f64(model.net.p_drop))),
    ];
    let slots = model.slots();
    let mut tensors: Vec<(&str, &Tensor<T>)> =
        slots.iter().map(|s| (s.name.as_str(), &s.value)).collect();
    for (name, t) in &meta_tensors {
        tensors.push((name, t));
    }
    save(path, &tensors)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(S2pnmModel<T>, ModelMeta)> {
    let raw = load_raw(path)?;
    model_from_raw(&raw)
}

fn model_from_raw<T: Scalar>(raw: &[RawTensor]) -> Result<(S2pnmModel<T>, ModelMeta)> {
    let mf = mf_from_raw(raw)?;
    let load = |name: &str| -> Result<Tensor<T>> { find(raw, name)?.to_tensor::<T>() };
    let item_embed = load("net.item_embed")?;
    let gru_w_update = load("net.gru_w_update")?;
    let gru_w_reset = load("net.gru_w_reset")?;
    let gru_w_cand = load("net.gru_w_cand")?;
    let gru_u_update = load("net.gru_u_update")?;
    let gru_u_reset = load("net.gru_u_reset")?;
    let gru_u_cand = load("net.gru_u_cand")?;
    let gru_b_update = load("net.gru_b_update")?;
    let gru_b_reset = load("net.gru_b_reset")?;
    let gru_b_cand = load("net.gru_b_cand")?;
    let attn_w = load("net.attn_w")?;
    let attn_b = load("net.attn_b")?;
    let dec_w = load("net.dec_w")?;
    let dec_b = load("net.dec_b")?;
    let dict = load("net.dict")?;

    let n = mf.num_items();
    let dims = SeqDims {
        d_embed: item_embed.cols(),
        d_gru: attn_b.len(),
        d_dict: dec_b.len(),
        d_user: mf.d_user(),
    };
    expect_shape("net.item_embed", item_embed.shape(), &[n, dims.d_embed])?;
    for (name, t) in [
        ("net.gru_w_update", &gru_w_update),
        ("net.gru_w_reset", &gru_w_reset),
        ("net.gru_w_cand", &gru_w_cand),
    ] {
        expect_shape(name, t.shape(), &[dims.d_embed, dims.d_gru])?;
    }
    for (name, t) in [
        ("net.gru_u_update", &gru_u_update),
        ("net.gru_u_reset", &gru_u_reset),
        ("net.gru_u_cand", &gru_u_cand),
        ("net.attn_w", &attn_w),
    ] {
        expect_shape(name, t.shape(), &[dims.d_gru, dims.d_gru])?;
    }
    for (name, t) in [
        ("net.gru_b_update", &gru_b_update),
        ("net.gru_b_reset", &gru_b_reset),
        ("net.gru_b_cand", &gru_b_cand),
    ] {
        expect_shape(name, t.shape(), &[dims.d_gru])?;
    }
    expect_shape("net.dec_w", dec_w.shape(), &[4 * dims.d_gru, dims.d_dict])?;
    expect_shape("net.dict", dict.shape(), &[dims.d_dict, dims.d_user])?;

    let activation = match meta_value(raw, "meta.activation").unwrap_or(0.0) as i64 {
        1 => Activation::Sigmoid,
        2 => Activation::Tanh,
        _ => Activation::Relu,
    };
    let variant = match meta_value(raw, "meta.variant").unwrap_or(0.0) as i64 {
        1 => Variant::DynamicOnly,
        2 => Variant::StaticOnly,
        _ => Variant::Full,
    };
    let clip = meta_value(raw, "meta.clip").unwrap_or(1.0) != 0.0;
    let p_drop = meta_value(raw, "meta.p_drop").unwrap_or(0.0);

    let slot = |name: &str, value: Tensor<T>| ParamSlot::new(format!("net.{name}"), value);
    let net = Seq2PrefParams {
        item_embed: slot("item_embed", item_embed),
        gru_w_update: slot("gru_w_update", gru_w_update),
        gru_w_reset: slot("gru_w_reset", gru_w_reset),
        gru_w_cand: slot("gru_w_cand", gru_w_cand),
        gru_u_update: slot("gru_u_update", gru_u_update),
        gru_u_reset: slot("gru_u_reset", gru_u_reset),
        gru_u_cand: slot("gru_u_cand", gru_u_cand),
        gru_b_update: slot("gru_b_update", gru_b_update),
        gru_b_reset: slot("gru_b_reset", gru_b_reset),
        gru_b_cand: slot("gru_b_cand", gru_b_cand),
        attn_w: slot("attn_w", attn_w),
        attn_b: slot("attn_b", attn_b),
        dec_w: slot("dec_w", dec_w),
        dec_b: slot("dec_b", dec_b),
        dict: slot("dict", dict),
        activation,
        p_drop,
    };
    Ok((
        S2pnmModel { mf, net, variant },
        ModelMeta {
            clip_predictions: clip,
        },
    ))
}

/// Either kind of checkpoint, detected by the tensors present.
pub enum LoadedModel<T> {
    Mf(Box<MfParams<T>>),
    Full(Box<S2pnmModel<T>>, ModelMeta),
}

pub fn load_any<T: Scalar>(path: &Path) -> Result<LoadedModel<T>> {
    let raw = load_raw(path)?;
    if raw.iter().any(|t| t.name.starts_with("net.")) {
        let (model, meta) = model_from_raw(&raw)?;
        Ok(LoadedModel::Full(Box::new(model), meta))
    } else {
        Ok(LoadedModel::Mf(Box::new(mf_from_raw(&raw)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::from_vec(
            &[2, 3],
            vec![1.5f64, -2.25, 0.0, 3.125, f64::MIN_POSITIVE, 7.0],
        )
        .unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1f64, 0.2, 0.3]).unwrap();
        let bytes = encode(&[("alpha", &a), ("beta", &b)]);
        let raw = decode(&bytes).unwrap();
        assert_eq!(raw.len(), 2);
        assert_eq!(raw[0].name, "alpha");
        let a2: Tensor<f64> = raw[0].to_tensor().unwrap();
        let b2: Tensor<f64> = raw[1].to_tensor().unwrap();
        assert_eq!(a2.as_slice(), a.as_slice());
        assert_eq!(b2.as_slice(), b.as_slice());
        // Re-encoding is byte-identical.
        assert_eq!(encode(&[("alpha", &a2), ("beta", &b2)]), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let a = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let mut bytes = encode(&[("t", &a)]);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match decode(&bytes) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("checksum"), "{msg}"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let a = Tensor::from_vec(&[4], vec![1.0f64; 4]).unwrap();
        let bytes = encode(&[("t", &a)]);
        assert!(decode(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let a = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        let mut bytes = encode(&[("t", &a)]);
        bytes[4] = 99; // version field
        let body_len = bytes.len() - 8;
        let checksum = fnv1a64(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&checksum.to_le_bytes());
        match decode(&bytes) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_names_tensor() {
        let a = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let bytes = encode(&[("t", &a)]);
        let raw = decode(&bytes).unwrap();
        match raw[0].to_tensor::<f64>() {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("`t`"), "{msg}"),
            other => panic!("expected dtype error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_code_rejected() {
        let a = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        let mut bytes = encode(&[("t", &a)]);
        // dtype byte sits after magic+version+name_len+name.
        let dtype_pos = 4 + 4 + 4 + 1;
        bytes[dtype_pos] = 9;
        // Fix the checksum so the dtype check itself is exercised.
        let body_len = bytes.len() - 8;
        let checksum = fnv1a64(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&checksum.to_le_bytes());
        match decode(&bytes) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("dtype"), "{msg}"),
            other => panic!("expected dtype error, got {other:?}"),
        }
    }

    #[test]
    fn shape_guard_names_tensor() {
        let err = expect_shape("mf.user_factors", &[3, 2], &[3, 5]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("mf.user_factors"));
        assert!(msg.contains("[3, 5]"));
    }
}

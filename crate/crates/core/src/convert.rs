//! Re-encoding float model files into quantized storage.

use serde::Serialize;
use thiserror::Error;

use crate::container::{ContainerError, ModelContainer, Value};
use crate::quant::{self, DType, QuantError};

pub const KEY_FILE_TYPE: &str = "general.file_type";

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("tensor {name:?} is stored as {dtype}; only F32 and F16 sources can be converted")]
    QuantizedSource { name: String, dtype: DType },
    #[error("tensor {name:?}: {source}")]
    Quant { name: String, source: QuantError },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Storage type actually used for a tensor when `target` is requested.
///
/// 1-D tensors (norm weights) stay F32. Rows whose length is not a multiple
/// of the target block fall back to BQ8, then to F16.
pub fn storage_dtype(dims: &[u64], target: DType) -> DType {
    if dims.len() < 2 {
        return DType::F32;
    }
    let cols = dims[dims.len() - 1] as usize;
    [target, DType::Bq8, DType::F16]
        .into_iter()
        .filter(|d| target.is_quantized() || *d == target)
        .find(|d| cols % d.block_len() == 0)
        .unwrap_or(DType::F16)
}

/// Encodes one tensor, choosing its storage type with [`storage_dtype`].
pub fn encode_tensor(
    name: &str,
    dims: &[u64],
    values: &[f32],
    target: DType,
) -> Result<(DType, Vec<u8>), ConvertError> {
    let dtype = storage_dtype(dims, target);
    let bytes = quant::quantize(values, dtype).map_err(|source| ConvertError::Quant {
        name: name.to_string(),
        source,
    })?;
    Ok((dtype, bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvertedTensor {
    pub name: String,
    pub from: DType,
    pub to: DType,
    pub n_elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvertReport {
    pub target: DType,
    pub tensors: Vec<ConvertedTensor>,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

/// Converts every tensor of a float container to `target`, keeping metadata
/// and tensor order. Sets `general.file_type` to the target name.
pub fn convert(src: &ModelContainer, target: DType) -> Result<(ModelContainer, ConvertReport), ConvertError> {
    let mut out = ModelContainer::new();
    out.set_alignment(src.alignment())?;
    for (k, v) in src.metadata() {
        out.set(k.clone(), v.clone());
    }
    out.set(KEY_FILE_TYPE, Value::Str(target.name().to_string()));

    let mut report = ConvertReport {
        target,
        tensors: Vec::new(),
        bytes_in: 0,
        bytes_out: 0,
    };
    for desc in src.tensors() {
        let (_, data) = src.get_tensor(&desc.name)?;
        if desc.dtype.is_quantized() {
            return Err(ConvertError::QuantizedSource {
                name: desc.name.clone(),
                dtype: desc.dtype,
            });
        }
        let values = quant::dequantize(data, desc.dtype).map_err(|source| ConvertError::Quant {
            name: desc.name.clone(),
            source,
        })?;
        let (dtype, bytes) = encode_tensor(&desc.name, &desc.dims, &values, target)?;
        out.add_tensor(desc.name.clone(), &desc.dims, dtype, &bytes)?;
        report.bytes_in += data.len() as u64;
        report.bytes_out += bytes.len() as u64;
        report.tensors.push(ConvertedTensor {
            name: desc.name.clone(),
            from: desc.dtype,
            to: dtype,
            n_elements: desc.n_elements(),
        });
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_chain() {
        assert_eq!(storage_dtype(&[64], DType::Bq4), DType::F32);
        assert_eq!(storage_dtype(&[64, 256], DType::Bq5s), DType::Bq5s);
        assert_eq!(storage_dtype(&[256, 64], DType::Bq5s), DType::Bq8);
        assert_eq!(storage_dtype(&[4, 48], DType::Bq5s), DType::F16);
        assert_eq!(storage_dtype(&[4, 48], DType::F32), DType::F32);
        assert_eq!(storage_dtype(&[4, 64], DType::Bq4), DType::Bq4);
    }

    #[test]
    fn rejects_quantized_source() {
        let mut c = ModelContainer::new();
        let bytes = quant::quantize(&[0.5; 32], DType::Bq8).unwrap();
        c.add_tensor("w", &[1, 32], DType::Bq8, &bytes).unwrap();
        assert!(matches!(
            convert(&c, DType::Bq4),
            Err(ConvertError::QuantizedSource { .. })
        ));
    }

    #[test]
    fn keeps_order_and_norms() {
        let mut c = ModelContainer::new();
        c.set("a", Value::U32(1));
        let w: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        c.add_tensor("n_norm", &[64], DType::F32, &quant::quantize(&w, DType::F32).unwrap())
            .unwrap();
        c.add_tensor("m", &[2, 32], DType::F32, &quant::quantize(&w, DType::F32).unwrap())
            .unwrap();
        let (q, r) = convert(&c, DType::Bq4).unwrap();
        assert_eq!(q.get("a"), Some(&Value::U32(1)));
        assert_eq!(q.get(KEY_FILE_TYPE).and_then(Value::as_str), Some("BQ4"));
        assert_eq!(q.tensors()[0].dtype, DType::F32);
        assert_eq!(q.tensors()[1].dtype, DType::Bq4);
        assert_eq!(r.bytes_out, 256 + 2 * 18);
    }
}

//! JSON encoding for tensors: shape metadata plus base64 little-endian
//! `f64` bytes, so values round-trip bit-exactly.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedTensor {
    pub fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        EncodedTensor {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::format(format!("tensor data is not base64: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::format(
                "tensor data length is not a multiple of 8 bytes",
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(self.shape.clone(), values)
    }
}

/// `#[serde(with = "crate::codec::tensor")]`
pub mod tensor {
    use super::*;

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> std::result::Result<S::Ok, S::Error> {
        EncodedTensor::encode(t).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Tensor, D::Error> {
        EncodedTensor::deserialize(d)?
            .decode()
            .map_err(serde::de::Error::custom)
    }
}

/// `#[serde(with = "crate::codec::tensors")]` for `Vec<Tensor>`.
pub mod tensors {
    use super::*;

    pub fn serialize<S: Serializer>(ts: &[Tensor], s: S) -> std::result::Result<S::Ok, S::Error> {
        ts.iter()
            .map(EncodedTensor::encode)
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<Tensor>, D::Error> {
        Vec::<EncodedTensor>::deserialize(d)?
            .iter()
            .map(|e| e.decode().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips_bit_exactly(v in proptest::collection::vec(-1e300f64..1e300, 1..64)) {
            let t = Tensor::vector(v).unwrap();
            let json = serde_json::to_string(&EncodedTensor::encode(&t)).unwrap();
            let back: EncodedTensor = serde_json::from_str(&json).unwrap();
            let back = back.decode().unwrap();
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&t), bits(&back));
        }
    }

    #[test]
    fn rejects_bad_payloads() {
        let e = EncodedTensor {
            shape: vec![2],
            data: "!!".into(),
        };
        assert!(matches!(e.decode(), Err(Error::Format(_))));
        let e = EncodedTensor {
            shape: vec![2],
            data: STANDARD.encode([0u8; 8]),
        };
        assert!(matches!(e.decode(), Err(Error::Shape(_))));
    }
}

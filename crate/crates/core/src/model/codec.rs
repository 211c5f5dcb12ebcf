//! Checkpoint formats for [`ModelParams`].
//!
//! JSON: `{"layers": [{"input_dim", "output_dim", "activation", "weights",
//! "bias"}, ...]}` with `weights` row-major.
//!
//! Binary (little endian): magic `CEFLMP01`, `u32` layer count, then per
//! layer `u32 input_dim`, `u32 output_dim`, `u8 activation` (0 relu,
//! 1 softmax, 2 identity), followed by the layer's flat values as `f64`.

use serde::{Deserialize, Serialize};

use super::{Activation, Layer, LayerSpec, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CEFLMP01";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    input_dim: usize,
    output_dim: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRecord {
    layers: Vec<LayerRecord>,
}

impl ModelParams {
    pub fn to_json(&self) -> String {
        let record = ModelRecord {
            layers: self
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    input_dim: l.input_dim(),
                    output_dim: l.output_dim(),
                    activation: l.activation,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&record).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: ModelRecord = serde_json::from_str(text)?;
        let layers = record
            .layers
            .into_iter()
            .map(|r| {
                let spec = LayerSpec::new(r.input_dim, r.output_dim, r.activation);
                if r.weights.len() != r.input_dim.saturating_mul(r.output_dim)
                    || r.bias.len() != r.output_dim
                {
                    return Err(Error::input("layer dimensions disagree with data length"));
                }
                let mut flat = r.weights;
                flat.extend(r.bias);
                Layer::from_flat(spec, &flat)
            })
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_layers(layers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.param_count() * 8 + self.layer_count() * 9);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.layer_count() as u32).to_le_bytes());
        for layer in self.layers() {
            out.extend_from_slice(&(layer.input_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.output_dim() as u32).to_le_bytes());
            out.push(layer.activation.code());
            for v in layer.flat_iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != MAGIC {
            return Err(Error::input("bad model checkpoint magic"));
        }
        let count = rd.u32()? as usize;
        let mut layers = Vec::new();
        for _ in 0..count {
            let input_dim = rd.u32()? as usize;
            let output_dim = rd.u32()? as usize;
            let activation = Activation::from_code(rd.take(1)?[0])
                .ok_or_else(|| Error::input("unknown activation code"))?;
            let spec = LayerSpec::new(input_dim, output_dim, activation);
            let n = input_dim
                .checked_mul(output_dim)
                .and_then(|w| w.checked_add(output_dim))
                .ok_or_else(|| Error::input("layer too large"))?;
            let raw = rd.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::input("layer too large"))?,
            )?;
            let flat: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            layers.push(Layer::from_flat(spec, &flat)?);
        }
        if rd.pos != bytes.len() {
            return Err(Error::input("trailing bytes after model checkpoint"));
        }
        ModelParams::from_layers(layers)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::input("truncated model checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use proptest::prelude::*;

    fn specs(hidden: usize, classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(3, hidden, Activation::Relu),
            LayerSpec::new(hidden, classes, Activation::Softmax),
        ]
    }

    proptest! {
        #[test]
        fn json_and_binary_round_trip(hidden in 1usize..6, classes in 1usize..5, seed: u64) {
            let m = init_model(&specs(hidden, classes), seed).unwrap();
            prop_assert_eq!(&ModelParams::from_json(&m.to_json()).unwrap(), &m);
            prop_assert_eq!(&ModelParams::from_bytes(&m.to_bytes()).unwrap(), &m);
        }
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let bytes = init_model(&specs(2, 2), 1).unwrap().to_bytes();
        for cut in [0, 7, 12, bytes.len() - 1] {
            assert!(ModelParams::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn json_with_wrong_lengths_is_rejected() {
        let text = r#"{"layers":[{"input_dim":2,"output_dim":1,"activation":"softmax","weights":[1.0],"bias":[0.0]}]}"#;
        assert!(ModelParams::from_json(text).is_err());
    }
}

//! `FBPOSE-W1` weights container.
//!
//! Layout: the 9-byte magic `FBPOSE-W1`, a little-endian `u64` byte count,
//! that many bytes of JSON header, then the raw little-endian values of every
//! tensor listed in the header, in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::layer::Architecture;
use crate::network::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 9] = b"FBPOSE-W1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub architecture: Option<Architecture>,
    pub tensors: Vec<TensorEntry>,
    pub dtype: String,
    pub seed: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// In-memory form of a weights file. Values are held at 64-bit regardless of
/// the on-disk dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsContainer {
    pub architecture: Option<Architecture>,
    pub dtype: String,
    pub seed: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl WeightsContainer {
    pub fn empty(dtype: &str, seed: u64, meta: serde_json::Value) -> Self {
        Self {
            architecture: None,
            dtype: dtype.to_string(),
            seed,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn from_network<T: Scalar>(net: &Network<T>, seed: u64, meta: serde_json::Value) -> Self {
        let mut tensors = Vec::new();
        for (i, layer) in net.params().iter().enumerate() {
            for (j, t) in layer.iter().enumerate() {
                let name = format!("layer{i}.{}", if j == 0 { "weight" } else { "bias" });
                tensors.push((name, t.to_f64()));
            }
        }
        Self {
            architecture: Some(net.architecture().clone()),
            dtype: T::DTYPE.to_string(),
            seed,
            meta,
            tensors,
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor<f64>) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuild the network stored in this container.
    pub fn network<T: Scalar>(&self) -> Result<Network<T>> {
        let arch = self
            .architecture
            .clone()
            .ok_or_else(|| TensorError::Format("container holds no architecture".into()))?;
        let shapes = arch.shapes()?;
        let mut params = Vec::with_capacity(arch.layers.len());
        for (i, (spec, input)) in arch.layers.iter().zip(&shapes).enumerate() {
            let mut layer = Vec::new();
            for j in 0..spec.param_shapes(input).len() {
                let name = format!("layer{i}.{}", if j == 0 { "weight" } else { "bias" });
                let t = self
                    .get(&name)
                    .ok_or_else(|| TensorError::Format(format!("missing tensor {name}")))?;
                layer.push(t.cast::<T>());
            }
            params.push(layer);
        }
        Network::from_params(arch, params)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = WeightsHeader {
            architecture: self.architecture.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            dtype: self.dtype.clone(),
            seed: self.seed,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, t) in &self.tensors {
            buf.clear();
            match self.dtype.as_str() {
                "f32" => t.data().iter().for_each(|&v| (v as f32).write_le(&mut buf)),
                "f64" => t.data().iter().for_each(|&v| v.write_le(&mut buf)),
                other => return Err(TensorError::Format(format!("unsupported dtype {other}"))),
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: WeightsHeader = serde_json::from_slice(&json)?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(TensorError::Format(format!("unsupported dtype {other}"))),
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * width];
            r.read_exact(&mut raw)?;
            let data: Vec<f64> = raw
                .chunks_exact(width)
                .map(|c| if width == 4 { f32::read_le(c) as f64 } else { f64::read_le(c) })
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
        }
        Ok(Self {
            architecture: header.architecture,
            dtype: header.dtype,
            seed: header.seed,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerSpec;

    #[test]
    fn layout_starts_with_magic_and_header_length() {
        let arch = Architecture {
            input_shape: vec![1, 4, 4],
            layers: vec![LayerSpec::conv(2, 3), LayerSpec::relu(), LayerSpec::dense(3)],
        };
        let net = Network::<f32>::new(arch, 9).unwrap();
        let c = WeightsContainer::from_network(&net, 9, serde_json::json!({"role": "test"}));
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..9], b"FBPOSE-W1");
        let hlen = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let header: WeightsHeader = serde_json::from_slice(&bytes[17..17 + hlen]).unwrap();
        assert_eq!(header.dtype, "f32");
        assert_eq!(header.seed, 9);
        assert_eq!(bytes.len() - 17 - hlen, net.param_count() * 4);
        // first raw value is the first kernel weight
        let first = f32::from_le_bytes(bytes[17 + hlen..21 + hlen].try_into().unwrap());
        assert_eq!(first, net.params()[0][0].data()[0]);

        let back = WeightsContainer::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.network::<f32>().unwrap(), net);
    }
}

//! Model parameter files.
//!
//! Layout (little endian):
//!
//! | field        | type            |
//! |--------------|-----------------|
//! | magic        | `b"RSDM"`       |
//! | version      | u32 (= 1)       |
//! | header bytes | u32             |
//! | header       | UTF-8 JSON      |
//! | param count  | u64             |
//! | params       | f32 x count     |
//!
//! The JSON header names the model kind and carries its configuration.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Parameterization, Trainable};
use crate::error::{Error, Result};

use super::rowmlp::{RowMlp, RowMlpConfig};
use super::stage1::{FeatureSet, LinearPredictor};

const MAGIC: &[u8; 4] = b"RSDM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelHeader {
    Stage1Linear {
        features: FeatureSet,
    },
    RowMlp {
        config: RowMlpConfig,
        channels: usize,
        parameterization: Parameterization,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Stage1(LinearPredictor),
    Denoiser(RowMlp),
}

impl Model {
    fn header(&self) -> ModelHeader {
        match self {
            Model::Stage1(p) => ModelHeader::Stage1Linear { features: p.features },
            Model::Denoiser(n) => ModelHeader::RowMlp {
                config: n.config,
                channels: n.channels,
                parameterization: n.parameterization,
            },
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            Model::Stage1(p) => &p.params,
            Model::Denoiser(n) => n.params(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header()).map_err(|e| Error::format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        let params = self.params();
        w.write_u64::<LittleEndian>(params.len() as u64)?;
        for &p in params {
            w.write_f32::<LittleEndian>(p as f32)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("not a model file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported model version {version}")));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; n];
        r.read_exact(&mut header)?;
        let header: ModelHeader = serde_json::from_slice(&header).map_err(|e| Error::format(e.to_string()))?;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            params.push(r.read_f32::<LittleEndian>()? as f64);
        }
        match header {
            ModelHeader::Stage1Linear { features } => {
                if params.len() != LinearPredictor::param_count(features) {
                    return Err(Error::format("stage-one parameter count mismatch"));
                }
                Ok(Model::Stage1(LinearPredictor { features, params }))
            }
            ModelHeader::RowMlp {
                config,
                channels,
                parameterization,
            } => RowMlp::from_params(config, channels, parameterization, params)
                .map(Model::Denoiser)
                .map_err(|e| Error::format(e.to_string())),
        }
    }

    /// Rounds parameters to f32 precision, so the in-memory model equals what a reload would give.
    pub fn quantized(&self) -> Result<Model> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Model::read(buf.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::NUM_CLASSES;

    #[test]
    fn round_trip_both_kinds() {
        let p = Model::Stage1(LinearPredictor::new(FeatureSet { coords: true, column: true }));
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(Model::read(buf.as_slice()).unwrap(), p);

        let mut net = RowMlp::new(RowMlpConfig::default(), NUM_CLASSES, 1);
        net.parameterization = Parameterization::Consistency;
        let m = Model::Denoiser(net);
        let q = m.quantized().unwrap();
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        m.write(&mut b1).unwrap();
        q.write(&mut b2).unwrap();
        assert_eq!(b1, b2);
        match q {
            Model::Denoiser(n) => assert_eq!(n.parameterization, Parameterization::Consistency),
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Model::read(&b"XXXX\x01\0\0\0"[..]).is_err());
        let p = Model::Stage1(LinearPredictor::new(FeatureSet { coords: false, column: false }));
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(Model::read(buf.as_slice()).is_err());
    }
}

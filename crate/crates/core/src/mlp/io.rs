use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Activation, Architecture, Layer, Network, WeightVector};
use crate::error::{Error, Result};

/// On-disk weight checkpoint:
/// `{"widths": [...], "activation": "tanh", "layers": [{"A": [...], "b": [...]}, ...]}`
/// with `A` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl From<&Network> for WeightFile {
    fn from(net: &Network) -> Self {
        WeightFile {
            widths: net.arch.widths().to_vec(),
            activation: net.arch.activation(),
            layers: net
                .weights
                .layers
                .iter()
                .map(|l| LayerFile {
                    a: (0..l.a.nrows())
                        .flat_map(|i| l.a.row(i).iter().copied().collect::<Vec<_>>())
                        .collect(),
                    b: l.b.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<WeightFile> for Network {
    type Error = Error;

    fn try_from(file: WeightFile) -> Result<Self> {
        let arch = Architecture::new(file.widths, file.activation)?;
        if file.layers.len() != arch.layers() {
            return Err(Error::Dimension {
                what: "layers in weight file",
                expected: arch.layers(),
                found: file.layers.len(),
            });
        }
        let layers = file
            .layers
            .into_iter()
            .zip(arch.widths().windows(2))
            .map(|(l, dims)| {
                let (n_in, n_out) = (dims[0], dims[1]);
                if l.a.len() != n_in * n_out {
                    return Err(Error::Dimension {
                        what: "layer matrix entries",
                        expected: n_in * n_out,
                        found: l.a.len(),
                    });
                }
                if l.b.len() != n_out {
                    return Err(Error::Dimension {
                        what: "layer bias",
                        expected: n_out,
                        found: l.b.len(),
                    });
                }
                Ok(Layer {
                    a: DMatrix::from_row_slice(n_out, n_in, &l.a),
                    b: DVector::from_vec(l.b),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(arch, WeightVector { layers })
    }
}

impl Network {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&WeightFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: WeightFile = serde_json::from_str(s)?;
        Network::try_from(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Network::from_json(&std::fs::read_to_string(path)?)
    }
}

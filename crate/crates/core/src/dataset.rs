//! Training pairs `(ẑ_k, û_k)` and their JSON form.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{Bounds, ControlSpace, Mesh, ProblemData};

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub z_hat: DVector<f64>,
    pub u_hat: DVector<f64>,
}

/// `K` pairs sharing one mesh, control layout and PDE data.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub space: ControlSpace,
    pub data: ProblemData,
    pub pairs: Vec<Pair>,
}

impl DataSet {
    pub fn new(space: ControlSpace, data: ProblemData, pairs: Vec<Pair>) -> Result<Self> {
        let ds = Self { space, data, pairs };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Config("data set needs at least one pair".into()));
        }
        let mesh = self.space.mesh();
        self.data.check(mesh)?;
        for (k, pair) in self.pairs.iter().enumerate() {
            if pair.z_hat.len() != mesh.nodes() {
                return Err(Error::Dimension {
                    what: "target state",
                    expected: mesh.nodes(),
                    found: pair.z_hat.len(),
                });
            }
            self.space.check(&pair.u_hat)?;
            if !self.space.is_admissible(&pair.u_hat) {
                return Err(Error::Config(format!(
                    "control {k} leaves the admissible box"
                )));
            }
        }
        Ok(())
    }

    /// `(1/K) Σ_k û_k`.
    pub fn mean_control(&self) -> DVector<f64> {
        let mut sum = DVector::zeros(self.space.groups());
        for p in &self.pairs {
            sum += &p.u_hat;
        }
        sum / self.pairs.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DataSetFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: DataSetFile = serde_json::from_str(s)?;
        DataSet::try_from(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        DataSet::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `{"mesh": {"N": ..}, "problem": {"f": [..], "g": [gl, gr]},
///   "controls": {"groups": .., "bounds": {..}}, "pairs": [{"z_hat": [..], "u_hat": [..]}]}`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSetFile {
    pub mesh: MeshFile,
    pub problem: ProblemData,
    #[serde(default)]
    pub controls: Option<ControlsFile>,
    pub pairs: Vec<PairFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshFile {
    #[serde(rename = "N")]
    pub cells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlsFile {
    pub group_map: Vec<usize>,
    pub bounds: Bounds,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairFile {
    pub z_hat: Vec<f64>,
    pub u_hat: Vec<f64>,
}

impl From<&DataSet> for DataSetFile {
    fn from(ds: &DataSet) -> Self {
        DataSetFile {
            mesh: MeshFile {
                cells: ds.space.mesh().cells(),
            },
            problem: ds.data.clone(),
            controls: Some(ControlsFile {
                group_map: ds.space.group_map().to_vec(),
                bounds: ds.space.bounds(),
            }),
            pairs: ds
                .pairs
                .iter()
                .map(|p| PairFile {
                    z_hat: p.z_hat.iter().copied().collect(),
                    u_hat: p.u_hat.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<DataSetFile> for DataSet {
    type Error = Error;

    fn try_from(file: DataSetFile) -> Result<Self> {
        let mesh = Mesh::new(file.mesh.cells)?;
        let space = match file.controls {
            Some(c) => {
                Bounds::new(c.bounds.lower, c.bounds.upper)?;
                ControlSpace::new(mesh, c.group_map, c.bounds)?
            }
            None => {
                // without a layout, infer contiguous blocks from the control length
                let groups = file.pairs.first().map_or(1, |p| p.u_hat.len());
                ControlSpace::blocks(mesh, groups, Bounds::default())?
            }
        };
        let pairs = file
            .pairs
            .into_iter()
            .map(|p| Pair {
                z_hat: DVector::from_vec(p.z_hat),
                u_hat: DVector::from_vec(p.u_hat),
            })
            .collect();
        DataSet::new(space, file.problem, pairs)
    }
}

//! The JSON document written by `fit` and read by `predict` and `report`.

use crate::error::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use stmix::gcv::PdeCandidate;
use stmix::mesh::{Point, TriangularMesh};
use stmix::solver::{FitOptions, ModelFit};
use stmix::splines::SplineBasis;

pub const FORMAT: &str = "stmix-fit/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub version: String,
    /// SHA-256 of the configuration file bytes (empty input when none was given).
    pub config_sha256: String,
    /// SHA-256 over the data files, fed in `DataPaths` field order.
    pub data_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshRecord {
    pub nodes: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

/// Variances kept so that `report` needs neither the data nor a refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredVariances {
    /// Empty when the model has no covariates.
    pub var_beta: Vec<Vec<f64>>,
    pub var_f_diagonal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub format: String,
    pub provenance: Provenance,
    pub mesh: MeshRecord,
    pub knots: Vec<f64>,
    pub pde: PdeCandidate,
    pub options: FitOptions,
    pub fit: ModelFit,
    pub variances: StoredVariances,
}

impl FitFile {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let file: FitFile = serde_json::from_str(&text)?;
        if file.format != FORMAT {
            return Err(CliError::Config(format!("unsupported fit file format '{}'", file.format)));
        }
        Ok(file)
    }

    pub fn mesh(&self) -> Result<TriangularMesh, CliError> {
        Ok(TriangularMesh::new(self.mesh.nodes.clone(), self.mesh.triangles.clone())?)
    }

    pub fn basis(&self) -> Result<SplineBasis, CliError> {
        Ok(SplineBasis::new(self.knots.clone())?)
    }
}

pub fn sha256_hex(chunks: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update(c);
    }
    format!("{:x}", h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(sha256_hex(&[]), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(sha256_hex(&[b"ab", b"c"]), sha256_hex(&[b"abc"]));
    }
}

//! Flat parameter vectors with a named-tensor layout.

use serde::{Deserialize, Serialize};

use crate::numerics::RealMat;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: (usize, usize),
}

impl TensorSpec {
    pub fn size(&self) -> usize {
        self.shape.0 * self.shape.1
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GenomeError {
    #[error("genome has {actual} values but the manifest describes {expected}")]
    Length { expected: usize, actual: usize },
    #[error("manifest mismatch at tensor {index}: expected {expected:?}, found {found:?}")]
    Manifest {
        index: usize,
        expected: TensorSpec,
        found: TensorSpec,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentGenome {
    pub values: Vec<f64>,
    pub manifest: Vec<TensorSpec>,
}

pub fn manifest_len(manifest: &[TensorSpec]) -> usize {
    manifest.iter().map(TensorSpec::size).sum()
}

impl AgentGenome {
    pub fn new(values: Vec<f64>, manifest: Vec<TensorSpec>) -> Result<Self, GenomeError> {
        let expected = manifest_len(&manifest);
        if values.len() != expected {
            return Err(GenomeError::Length {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { values, manifest })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn manifest_of(tensors: &[(&str, &RealMat)]) -> Vec<TensorSpec> {
    tensors
        .iter()
        .map(|(name, m)| TensorSpec {
            name: name.to_string(),
            shape: m.shape(),
        })
        .collect()
}

pub fn flatten(tensors: &[(&str, &RealMat)]) -> AgentGenome {
    let mut values = Vec::with_capacity(tensors.iter().map(|(_, m)| m.len()).sum());
    for (_, m) in tensors {
        values.extend_from_slice(m.data());
    }
    AgentGenome {
        values,
        manifest: manifest_of(tensors),
    }
}

/// Copies `values` into `tensors` in order, checking names and shapes against `manifest`.
pub fn unflatten_into(
    values: &[f64],
    manifest: &[TensorSpec],
    tensors: &mut [(&str, &mut RealMat)],
) -> Result<(), GenomeError> {
    let expected: usize = tensors.iter().map(|(_, m)| m.len()).sum();
    if values.len() != expected {
        return Err(GenomeError::Length {
            expected,
            actual: values.len(),
        });
    }
    for (index, ((name, m), spec)) in tensors.iter().zip(manifest).enumerate() {
        if spec.name != *name || spec.shape != m.shape() {
            return Err(GenomeError::Manifest {
                index,
                expected: TensorSpec {
                    name: name.to_string(),
                    shape: m.shape(),
                },
                found: spec.clone(),
            });
        }
    }
    if manifest.len() != tensors.len() {
        return Err(GenomeError::Length {
            expected,
            actual: manifest_len(manifest),
        });
    }
    let mut offset = 0;
    for (_, m) in tensors.iter_mut() {
        let n = m.len();
        m.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

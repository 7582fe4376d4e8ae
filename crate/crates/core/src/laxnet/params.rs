use crate::error::{Error, Result};
use crate::voxgrid::RngStream;

use super::scalar::Scalar;
use super::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    /// Logical dims, e.g. `[cout, cin, 3, 3]` or `[c]`.
    pub dims: Vec<usize>,
    pub tensor: Tensor4<T>,
}

/// Named parameters in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

fn storage_shape(dims: &[usize]) -> [usize; 4] {
    let lead = dims.first().copied().unwrap_or(1);
    let rest: usize = dims.iter().skip(1).product();
    [lead, rest, 1, 1]
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Registers a parameter, drawing from `stream.child(pid)` for random
    /// initializers so each value depends only on the seed and its id.
    pub fn register(&mut self, name: &str, dims: &[usize], init: Init, stream: &RngStream) -> usize {
        let pid = self.entries.len();
        let shape = storage_shape(dims);
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::ZERO; n],
            Init::Ones => vec![T::ONE; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut s = stream.child(pid as u64);
                (0..n).map(|_| T::from_f64(s.uniform(-bound, bound))).collect()
            }
        };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            dims: dims.to_vec(),
            tensor: Tensor4::from_vec(shape, data).expect("sized from shape"),
        });
        pid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn tensor(&self, pid: usize) -> &Tensor4<T> {
        &self.entries[pid].tensor
    }

    pub fn data_mut(&mut self, pid: usize) -> &mut [T] {
        self.entries[pid].tensor.data_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Zeroed gradient buffers, one per parameter.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.entries.iter().map(|e| vec![T::ZERO; e.tensor.len()]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    dims: e.dims.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Overwrites values from `(name, dims, values)` entries; every
    /// parameter must be supplied exactly once.
    pub fn load_entries(&mut self, entries: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<()> {
        if entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                entries.len()
            )));
        }
        let mut seen = vec![false; self.entries.len()];
        for (name, dims, values) in entries {
            let pid = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if seen[pid] {
                return Err(Error::Checkpoint(format!("parameter {name} given twice")));
            }
            seen[pid] = true;
            let e = &mut self.entries[pid];
            if e.dims != dims || e.tensor.len() != values.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: dims {dims:?} do not match {:?}",
                    e.dims
                )));
            }
            e.tensor.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }
}

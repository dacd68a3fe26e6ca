//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is a single file: a text manifest listing tensor names and
//! shapes, terminated by an `end` line, followed by every tensor's values as
//! little-endian `f32` in manifest order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "cotok-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    /// Glorot-uniform initialisation, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, a, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "tensors {}", self.tensors.len()).unwrap();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "{name} {}", dims.join("x")).unwrap();
        }
        writeln!(out, "end").unwrap();
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn from_reader<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = String::new();
        let mut lineno = 0;
        let mut next_line = |reader: &mut BufReader<R>, line: &mut String| -> Result<usize> {
            line.clear();
            lineno += 1;
            reader
                .read_line(line)
                .map_err(|e| Error::io(path, e))?;
            Ok(lineno)
        };

        let n = next_line(&mut reader, &mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::parse(path, n, "not a cotok checkpoint"));
        }
        let n = next_line(&mut reader, &mut line)?;
        let count: usize = line
            .trim_end()
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, n, "expected `tensors <count>`"))?;

        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let n = next_line(&mut reader, &mut line)?;
            let mut parts = line.split_whitespace();
            let (Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(path, n, "expected `<name> <shape>`"));
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, n, format!("bad shape `{dims}`")))?;
            manifest.push((name.to_string(), shape));
        }
        let n = next_line(&mut reader, &mut line)?;
        if line.trim_end() != "end" {
            return Err(Error::parse(path, n, "expected `end`"));
        }

        let mut store = ParamStore::new();
        let mut buf = [0u8; 4];
        for (name, shape) in manifest {
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                reader
                    .read_exact(&mut buf)
                    .map_err(|e| Error::io(path, e))?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            store.add(name, Tensor::new(&shape, data)?);
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f, path)
    }

    /// Copies values from `other` into this store; names and shapes must match.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (i, t) in self.tensors.iter_mut().enumerate() {
            let id = other.id(&self.names[i]).ok_or_else(|| {
                Error::Shape(format!("checkpoint lacks tensor {}", self.names[i]))
            })?;
            let src = other.get(id);
            if src.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor {}: checkpoint {:?}, model {:?}",
                    self.names[i],
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

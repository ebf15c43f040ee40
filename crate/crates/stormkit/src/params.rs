//! Named parameter collections and the CKPT1 checkpoint format.
//!
//! Parameters keep insertion order, so optimizer state, gradients and
//! checkpoint bytes all align by index. CKPT1 layout:
//!
//! ```text
//! CKPT1
//! <config JSON, one line>
//! <param count>
//! <name> <d0> <d1> ...      (one line per parameter)
//! <raw little-endian f32 data, concatenated in manifest order>
//! ```

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::tape::{Grads, Real, Tape, Tx};

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected CKPT1 header")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Parse(String),
    #[error("truncated checkpoint: expected {expected} floats, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, ArrayD<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<T>) {
        if self.index.contains_key(name) {
            panic!("duplicate parameter {name}");
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    /// Total scalar count.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Total scalar count over parameters whose name contains `pat`.
    pub fn count_matching(&self, pat: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.contains(pat))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Convert the scalar type (f32 <-> f64).
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, v) in &self.entries {
            out.add(n, v.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap()));
        }
        out
    }

    /// Push every parameter onto a tape as a leaf; returns handles aligned
    /// with insertion order plus a name lookup.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let mut tx = Vec::with_capacity(self.entries.len());
        for (_, v) in &self.entries {
            tx.push(tape.leaf(v.clone()));
        }
        Binding {
            tx,
            index: self.index.clone(),
        }
    }

    /// Gradients aligned with insertion order; zero arrays where the loss
    /// did not touch a parameter.
    pub fn grads(&self, binding: &Binding, grads: &Grads<T>) -> Vec<ArrayD<T>> {
        self.entries
            .iter()
            .zip(&binding.tx)
            .map(|((_, v), tx)| match grads.get(*tx) {
                Some(g) => g.as_standard_layout().to_owned(),
                None => ArrayD::zeros(v.raw_dim()),
            })
            .collect()
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<T> {
        &self.entries[i].1
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut ArrayD<T> {
        &mut self.entries[i].1
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for a bound parameter set.
pub struct Binding {
    tx: Vec<Tx>,
    index: HashMap<String, usize>,
}

impl Binding {
    pub fn tx(&self, name: &str) -> Tx {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no bound parameter {name}"));
        self.tx[i]
    }

    pub fn all(&self) -> &[Tx] {
        &self.tx
    }
}

pub fn save_ckpt<T: Real>(
    path: &Path,
    config_json: &str,
    params: &ParamSet<T>,
) -> Result<(), CkptError> {
    assert!(
        !config_json.contains('\n'),
        "checkpoint config must be a single line"
    );
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "CKPT1")?;
    writeln!(w, "{}", config_json)?;
    writeln!(w, "{}", params.len())?;
    for (name, v) in params.iter() {
        let dims: Vec<String> = v.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "{} {}", name, dims.join(" "))?;
    }
    let mut buf = Vec::new();
    for (_, v) in params.iter() {
        for x in v.iter() {
            buf.extend_from_slice(&(x.to_f64().unwrap() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_ckpt<T: Real>(path: &Path) -> Result<(String, ParamSet<T>), CkptError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != "CKPT1" {
        return Err(CkptError::BadMagic);
    }
    let mut config = String::new();
    r.read_line(&mut config)?;
    let config = config.trim_end().to_string();
    let mut nline = String::new();
    r.read_line(&mut nline)?;
    let n: usize = nline
        .trim()
        .parse()
        .map_err(|_| CkptError::Parse("bad param count".into()))?;
    let mut manifest = Vec::with_capacity(n);
    for _ in 0..n {
        let mut ml = String::new();
        r.read_line(&mut ml)?;
        let mut it = ml.split_whitespace();
        let name = it
            .next()
            .ok_or_else(|| CkptError::Parse("missing param name".into()))?
            .to_string();
        let dims: Vec<usize> = it
            .map(|d| d.parse().map_err(|_| CkptError::Parse(format!("bad dim in {name}"))))
            .collect::<Result<_, _>>()?;
        manifest.push((name, dims));
    }
    let total: usize = manifest.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != total * 4 {
        return Err(CkptError::Truncated {
            expected: total,
            found: bytes.len() / 4,
        });
    }
    let mut params = ParamSet::new();
    let mut off = 0usize;
    for (name, dims) in manifest {
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let f = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !f.is_finite() {
                return Err(CkptError::Parse(format!("non-finite value in {name}")));
            }
            data.push(T::from_f32(f).unwrap());
            off += 4;
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|_| CkptError::Parse(format!("bad shape for {name}")))?;
        if params.contains(&name) {
            return Err(CkptError::Parse(format!("duplicate parameter {name}")));
        }
        params.add(&name, arr);
    }
    Ok((config, params))
}

//! Named learnable parameters and the text checkpoint format.
//!
//! Checkpoint layout (UTF-8, one record per line):
//!
//! ```text
//! compohoi-checkpoint v1
//! <count>
//! <name>\t<dim0>x<dim1>...\t<v0> <v1> ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle restores every parameter bit for bit.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &str = "compohoi-checkpoint v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                let shape = p.value.shape().to_vec();
                p.grad = Some(Tensor::new(shape, grad.to_vec()).expect("grad shape matches value"));
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Hex SHA-256 over names, shapes and values of parameters whose name
    /// starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            hasher.update(p.name.as_bytes());
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "{}", self.params.len())?;
        let mut line = String::new();
        for p in &self.params {
            line.clear();
            line.push_str(&p.name);
            line.push('\t');
            let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            line.push_str(&dims.join("x"));
            line.push('\t');
            for (i, v) in p.value.data().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:?}").expect("write to string");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, line)) => Ok((i + 1, line?)),
                None => Err(Error::Parse {
                    line: 0,
                    msg: format!("unexpected end of checkpoint, expected {what}"),
                }),
            }
        };
        let (ln, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                line: ln,
                msg: format!("bad checkpoint header `{magic}`"),
            });
        }
        let (ln, count) = next("parameter count")?;
        let count: usize = count.trim().parse().map_err(|_| Error::Parse {
            line: ln,
            msg: "bad parameter count".into(),
        })?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let (ln, line) = next("parameter record")?;
            let bad = |msg: &str| Error::Parse {
                line: ln,
                msg: msg.to_string(),
            };
            let mut fields = line.splitn(3, '\t');
            let name = fields.next().ok_or_else(|| bad("missing name"))?;
            let dims = fields.next().ok_or_else(|| bad("missing shape"))?;
            let values = fields.next().ok_or_else(|| bad("missing values"))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
                .collect::<Result<Vec<_>>>()?;
            let data = values
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<T>().map_err(|_| bad("bad value")))
                .collect::<Result<Vec<_>>>()?;
            let value = Tensor::new(shape, data).map_err(|_| bad("value count does not match shape"))?;
            store.add(name, value).map_err(|e| bad(&e.to_string()))?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }

    /// Copies values from `other` by name; shapes and name sets must agree.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .id_of(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape("checkpoint", p.value.shape(), src.value.shape()));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut s = ParamStore::<f64>::new();
        s.add("enc.w", Tensor::new(vec![2, 2], vec![0.1, -1e-300, 1.0 / 3.0, 12345.678]).unwrap())
            .unwrap();
        s.add("bias", Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0, 7.0])).unwrap();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::<f64>::read_checkpoint(&buf[..]).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::zeros(&[3])).unwrap();
        s.add("b", Tensor::zeros(&[3])).unwrap();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(ParamStore::<f64>::read_checkpoint(cut.as_bytes()).is_err());
    }
}

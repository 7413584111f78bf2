//! Tensor checkpoint files: a JSON document listing every tensor by name and
//! shape with its values as nested arrays, plus optional named scalars.
//!
//! ```json
//! {"tensors": [{"name": "ffnn.b2", "shape": [2], "data": [0.1, -0.3]}],
//!  "scalars": {"margin": 0.05}}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub scalars: BTreeMap<String, Value>,
}

fn nest(data: &[f64], shape: &[usize]) -> Value {
    match shape {
        [] => json!(data[0]),
        [_] => Value::Array(data.iter().map(|&v| json!(v)).collect()),
        [rows, rest @ ..] => {
            let stride = data.len() / rows.max(&1);
            Value::Array(
                (0..*rows)
                    .map(|r| nest(&data[r * stride..(r + 1) * stride], rest))
                    .collect(),
            )
        }
    }
}

fn flatten(name: &str, value: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<()> {
    match shape {
        [] => {
            let v = value
                .as_f64()
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: expected a number, found {value}")))?;
            out.push(v);
        }
        [len, rest @ ..] => {
            let items = value
                .as_array()
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: expected an array")))?;
            if items.len() != *len {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: declared shape {shape:?} but an axis holds {} entries",
                    items.len()
                )));
            }
            for item in items {
                flatten(name, item, rest, out)?;
            }
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn set_scalar(&mut self, name: &str, value: Value) {
        self.scalars.insert(name.to_string(), value);
    }

    pub fn scalar_f64(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Checkpoint(format!("missing numeric field `{name}`")))
    }

    pub fn scalar_str(&self, name: &str) -> Result<&str> {
        self.scalars
            .get(name)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing string field `{name}`")))
    }

    /// Removes and returns the tensor called `name`, checking its shape.
    pub fn take(&mut self, name: &str, expected: &[usize]) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let (_, t) = self.tensors.remove(pos);
        if t.shape() != expected {
            return Err(Error::TensorShape {
                name: name.to_string(),
                found: t.shape().to_vec(),
                expected: expected.to_vec(),
            });
        }
        Ok(t)
    }

    pub fn shape_of(&self, name: &str) -> Result<&[usize]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_json(&self) -> Value {
        let tensors: Vec<Value> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                json!({
                    "name": name,
                    "shape": t.shape(),
                    "data": nest(t.data(), t.shape()),
                })
            })
            .collect();
        let scalars: Map<String, Value> = self.scalars.clone().into_iter().collect();
        json!({ "tensors": tensors, "scalars": scalars })
    }

    pub fn from_json(doc: &Value) -> Result<Self> {
        let entries = doc
            .get("tensors")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Checkpoint("missing `tensors` array".into()))?;
        let mut ckpt = Checkpoint::new();
        for (i, entry) in entries.iter().enumerate() {
            let name = entry
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("tensors[{i}]: missing `name`")))?;
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: missing `shape`")))?
                .iter()
                .map(|d| {
                    d.as_u64()
                        .map(|d| d as usize)
                        .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: bad dimension {d}")))
                })
                .collect::<Result<_>>()?;
            let data_value = entry
                .get("data")
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: missing `data`")))?;
            let mut data = Vec::with_capacity(shape.iter().product());
            flatten(name, data_value, &shape, &mut data)?;
            ckpt.push(name, Tensor::new(shape, data)?);
        }
        if let Some(scalars) = doc.get("scalars").and_then(Value::as_object) {
            for (k, v) in scalars {
                ckpt.scalars.insert(k.clone(), v.clone());
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&doc)
    }
}

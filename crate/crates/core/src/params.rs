//! Named parameter storage shared by the model, optimizer and checkpoints.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Rc<Tensor>,
    /// Receives decoupled weight decay.
    pub decay: bool,
    /// Frozen parameters are bound without gradients and never stepped.
    pub trainable: bool,
}

/// Parameters in insertion order, addressable by index or by name.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        self.insert(Param { name: name.to_string(), value: Rc::new(value), decay, trainable: true })
    }

    pub fn add_frozen(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(Param { name: name.to_string(), value: Rc::new(value), decay: false, trainable: false })
    }

    fn insert(&mut self, p: Param) -> ParamId {
        assert!(!self.by_name.contains_key(&p.name), "duplicate parameter {}", p.name);
        let id = self.params.len();
        self.by_name.insert(p.name.clone(), id);
        self.params.push(p);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    /// Replaces a parameter's values by name, checking the shape.
    pub fn assign(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {}", name)))?;
        if self.value(id).shape() != t.shape() {
            return Err(Error::Shape {
                op: "assign",
                detail: format!("{}: expected {:?}, got {:?}", name, self.value(id).shape(), t.shape()),
            });
        }
        self.params[id.0].value = Rc::new(t);
        Ok(())
    }

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Makes every parameter available to `backend`, index-aligned with the set.
    pub fn bind<B: Backend>(&self, backend: &mut B) -> Vec<B::Var> {
        self.params.iter().map(|p| backend.leaf(p.value.clone(), p.trainable)).collect()
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            Rc::make_mut(&mut p.value).round_to_f32();
        }
    }

    /// FNV-1a over names and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            feed(p.name.as_bytes());
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_assign_and_checksum() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::zeros(&[2]), true);
        ps.add_frozen("b", Tensor::ones(&[3]));
        assert_eq!(ps.id("a"), Some(a));
        assert_eq!(ps.count(), 5);
        assert_eq!(ps.trainable_count(), 2);
        let before = ps.checksum();
        assert!(ps.assign("a", Tensor::zeros(&[3])).is_err());
        ps.assign("a", Tensor::ones(&[2])).unwrap();
        assert_ne!(before, ps.checksum());
    }
}

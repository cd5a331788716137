//! The `l(T)-d` architecture shorthand: one deep block of `l` layers, `T`
//! blocks in total, the rest two layers deep, all of width `d`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::Error;

pub const SHALLOW_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub deep_layers: usize,
    pub blocks: usize,
    pub width: usize,
}

impl ArchSpec {
    /// Layer counts per block in generation order, deep block first.
    pub fn layers(&self) -> Vec<usize> {
        let mut v = vec![SHALLOW_LAYERS; self.blocks];
        if let Some(first) = v.first_mut() {
            *first = self.deep_layers;
        }
        v
    }

    /// Inverse of [`ArchSpec::layers`], if the list has the deep-shallow shape.
    pub fn from_layers(layers: &[usize], width: usize) -> Option<Self> {
        let (&deep, rest) = layers.split_first()?;
        rest.iter()
            .all(|&l| l == SHALLOW_LAYERS)
            .then_some(ArchSpec { deep_layers: deep, blocks: layers.len(), width })
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})-{}", self.deep_layers, self.blocks, self.width)
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Config(format!("expected l(T)-d, got {:?}", s));
        let (l, rest) = s.trim().split_once('(').ok_or_else(bad)?;
        let (t, d) = rest.split_once(")-").ok_or_else(bad)?;
        let num = |x: &str| -> Result<usize, Error> { x.parse::<usize>().map_err(|_| bad()) };
        let spec = ArchSpec { deep_layers: num(l)?, blocks: num(t)?, width: num(d)? };
        if spec.blocks == 0 || spec.width == 0 || spec.deep_layers == 0 {
            return Err(Error::Config(format!("{:?}: counts must be positive", s)));
        }
        if spec.blocks > 1 && spec.deep_layers < SHALLOW_LAYERS {
            return Err(Error::Config(format!("{:?}: deep block shallower than the others", s)));
        }
        Ok(spec)
    }
}

impl From<ArchSpec> for String {
    fn from(a: ArchSpec) -> String {
        format!("{}", a)
    }
}

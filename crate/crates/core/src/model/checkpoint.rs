//! `MDYM` checkpoint files. Trunk, head and catalogue head live in separate
//! files so the trunk can be shared while the head file stays local.
//!
//! Layout (little-endian): magic `MDYM`, version `u16`, part `u8`
//! (0 trunk, 1 head, 2 catalogue), nonlinearity `u8` (0 relu, 1 tanh),
//! layer count `u32`, then per layer `n_in u64`, `n_out u64`, `W` as
//! `f64[n_in·n_out]`, `b` as `f64[n_out]`.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{Dense, ModelParams, Nonlinearity};
use super::ModelError;

pub const MDYM_MAGIC: &[u8; 4] = b"MDYM";
pub const MDYM_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Part {
    Trunk = 0,
    Head = 1,
    Catalogue = 2,
}

/// Trunk layers as stored in a trunk checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrunkCheckpoint {
    pub layers: Vec<Dense>,
    pub nonlinearity: Nonlinearity,
}

fn write_part<W: Write>(
    mut w: W,
    part: Part,
    nonlinearity: Nonlinearity,
    layers: &[&Dense],
) -> Result<(), ModelError> {
    w.write_all(MDYM_MAGIC)?;
    w.write_all(&MDYM_VERSION.to_le_bytes())?;
    w.write_all(&[part as u8, nonlinearity_code(nonlinearity)])?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        w.write_all(&(l.n_in as u64).to_le_bytes())?;
        w.write_all(&(l.n_out as u64).to_le_bytes())?;
        for v in l.w.iter().chain(&l.b) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn nonlinearity_code(n: Nonlinearity) -> u8 {
    match n {
        Nonlinearity::Relu => 0,
        Nonlinearity::Tanh => 1,
    }
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], ModelError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_part<R: Read>(mut r: R, expect: Part) -> Result<(Nonlinearity, Vec<Dense>), ModelError> {
    if &read_exact::<4, _>(&mut r)? != MDYM_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != MDYM_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let [part, nl] = read_exact::<2, _>(&mut r)?;
    if part != expect as u8 {
        return Err(ModelError::Format(format!(
            "expected part {:?}, file holds part {part}",
            expect
        )));
    }
    let nonlinearity = match nl {
        0 => Nonlinearity::Relu,
        1 => Nonlinearity::Tanh,
        other => return Err(ModelError::Format(format!("unknown nonlinearity {other}"))),
    };
    let n_layers = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let n_in = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let n_out = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut read_vec = |len: usize| -> Result<Vec<f64>, ModelError> {
            (0..len)
                .map(|_| Ok(f64::from_le_bytes(read_exact(&mut r)?)))
                .collect()
        };
        let w = read_vec(n_in * n_out)?;
        let b = read_vec(n_out)?;
        layers.push(Dense { n_in, n_out, w, b });
    }
    for pair in layers.windows(2) {
        if pair[0].n_out != pair[1].n_in {
            return Err(ModelError::Format("inconsistent layer shapes".into()));
        }
    }
    Ok((nonlinearity, layers))
}

impl ModelParams {
    pub fn trunk_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let layers: Vec<&Dense> = self.trunk.iter().collect();
        write_part(&mut buf, Part::Trunk, self.nonlinearity, &layers).expect("in-memory write");
        buf
    }

    pub fn head_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_part(&mut buf, Part::Head, self.nonlinearity, &[&self.head]).expect("in-memory write");
        buf
    }

    pub fn catalogue_bytes(&self) -> Option<Vec<u8>> {
        self.catalogue_head.as_ref().map(|c| {
            let mut buf = Vec::new();
            write_part(&mut buf, Part::Catalogue, self.nonlinearity, &[c]).expect("in-memory write");
            buf
        })
    }

    pub fn save_trunk(&self, path: &Path) -> Result<(), ModelError> {
        Ok(std::fs::write(path, self.trunk_bytes())?)
    }

    pub fn save_head(&self, path: &Path) -> Result<(), ModelError> {
        Ok(std::fs::write(path, self.head_bytes())?)
    }

    pub fn save_catalogue(&self, path: &Path) -> Result<(), ModelError> {
        match self.catalogue_bytes() {
            Some(b) => Ok(std::fs::write(path, b)?),
            None => Err(ModelError::Shape("model has no catalogue head".into())),
        }
    }

    /// Stacks a trunk with a head (and optional catalogue head).
    pub fn from_parts(
        trunk: TrunkCheckpoint,
        head: Dense,
        catalogue_head: Option<Dense>,
    ) -> Result<Self, ModelError> {
        let width = trunk
            .layers
            .last()
            .ok_or_else(|| ModelError::Shape("empty trunk".into()))?
            .n_out;
        if head.n_in != width || catalogue_head.as_ref().is_some_and(|c| c.n_in != width) {
            return Err(ModelError::ShapeMismatch {
                expected: width,
                got: head.n_in,
            });
        }
        Ok(Self {
            trunk: trunk.layers,
            head,
            catalogue_head,
            nonlinearity: trunk.nonlinearity,
        })
    }
}

pub fn trunk_from_bytes(bytes: &[u8]) -> Result<TrunkCheckpoint, ModelError> {
    let (nonlinearity, layers) = read_part(bytes, Part::Trunk)?;
    if layers.is_empty() {
        return Err(ModelError::Format("empty trunk".into()));
    }
    Ok(TrunkCheckpoint {
        layers,
        nonlinearity,
    })
}

fn single_layer(bytes: &[u8], part: Part) -> Result<Dense, ModelError> {
    let (_, mut layers) = read_part(bytes, part)?;
    if layers.len() != 1 {
        return Err(ModelError::Format("head files hold exactly one layer".into()));
    }
    Ok(layers.remove(0))
}

pub fn head_from_bytes(bytes: &[u8]) -> Result<Dense, ModelError> {
    single_layer(bytes, Part::Head)
}

pub fn catalogue_from_bytes(bytes: &[u8]) -> Result<Dense, ModelError> {
    single_layer(bytes, Part::Catalogue)
}

pub fn load_trunk(path: &Path) -> Result<TrunkCheckpoint, ModelError> {
    trunk_from_bytes(&std::fs::read(path)?)
}

pub fn load_head(path: &Path) -> Result<Dense, ModelError> {
    head_from_bytes(&std::fs::read(path)?)
}

pub fn load_catalogue(path: &Path) -> Result<Dense, ModelError> {
    catalogue_from_bytes(&std::fs::read(path)?)
}

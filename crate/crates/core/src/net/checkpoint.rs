//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic         4 bytes   b"WSCK"
//! version       u32       1
//! config hash   32 bytes  run config digest (zeros when none)
//! normalize     u8        0 or 1
//! n_layers      u32
//! per layer     u32 in_dim, u32 out_dim, u8 activation (0 relu, 1 identity)
//! per layer     f64 weight[out_dim * in_dim] (row-major), f64 bias[out_dim]
//! ```

use std::io::{Read, Write};

use super::{Activation, DenseLayer, MiniNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(net: &MiniNet, config_hash: [u8; 32], mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&config_hash)?;
    w.write_all(&[u8::from(net.normalize)])?;
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    for l in &net.layers {
        w.write_all(&(l.in_dim as u32).to_le_bytes())?;
        w.write_all(&(l.out_dim as u32).to_le_bytes())?;
        w.write_all(&[match l.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }])?;
    }
    for l in &net.layers {
        for v in l.weight.iter().chain(&l.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

/// Returns the net and the stored config hash.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(MiniNet, [u8; 32])> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    let normalize = match read_u8(&mut r)? {
        0 => false,
        1 => true,
        b => return Err(Error::Checkpoint(format!("bad normalize flag {b}"))),
    };
    let n = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let in_dim = read_u32(&mut r)? as usize;
        let out_dim = read_u32(&mut r)? as usize;
        let activation = match read_u8(&mut r)? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            b => return Err(Error::Checkpoint(format!("bad activation tag {b}"))),
        };
        layers.push(DenseLayer::zeros(in_dim, out_dim, activation));
    }
    for (k, l) in layers.iter().enumerate() {
        if k > 0 && l.in_dim != layers[k - 1].out_dim {
            return Err(Error::Checkpoint(format!(
                "layer {k} input does not match previous output"
            )));
        }
    }
    let mut buf = [0u8; 8];
    for l in layers.iter_mut() {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok((MiniNet { layers, normalize }, hash))
}

//! Binary model checkpoint, little-endian: magic `UMSH`, version (u32),
//! level count (u32), per-level widths (u32), input and output widths (u32),
//! blocks per level (u32), parameter count (u64), then f32 parameters in
//! [`UMeshModel::to_flat`] order.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{Architecture, UMeshModel};
use super::ConvError;

const MAGIC: &[u8; 4] = b"UMSH";
const VERSION: u32 = 1;

pub fn write_checkpoint(model: &UMeshModel, w: &mut impl Write) -> std::io::Result<()> {
    let a = &model.arch;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(a.widths.len() as u32).to_le_bytes())?;
    for &x in &a.widths {
        w.write_all(&(x as u32).to_le_bytes())?;
    }
    for x in [a.input, a.output, a.blocks] {
        w.write_all(&(x as u32).to_le_bytes())?;
    }
    let flat = model.to_flat();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in flat {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn u32_from(r: &mut impl Read) -> Result<u32, ConvError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<UMeshModel, ConvError> {
    let bad = |m: &str| ConvError::Checkpoint(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    if u32_from(r)? != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let levels = u32_from(r)? as usize;
    if levels == 0 || levels > 64 {
        return Err(bad("implausible level count"));
    }
    let widths = (0..levels).map(|_| Ok(u32_from(r)? as usize)).collect::<Result<Vec<_>, ConvError>>()?;
    let arch = Architecture {
        widths,
        input: u32_from(r)? as usize,
        output: u32_from(r)? as usize,
        blocks: u32_from(r)? as usize,
    };
    let mut model = UMeshModel::zeros(arch)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    if u64::from_le_bytes(b8) != model.param_count() as u64 {
        return Err(bad("parameter count does not match the architecture"));
    }
    let mut flat = Vec::with_capacity(model.param_count());
    let mut b4 = [0u8; 4];
    for _ in 0..model.param_count() {
        r.read_exact(&mut b4)?;
        let v = f32::from_le_bytes(b4);
        if !v.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        flat.push(v as f64);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes"));
    }
    model.set_flat(&flat)?;
    Ok(model)
}

impl UMeshModel {
    pub fn write_file(&self, path: &Path) -> Result<(), ConvError> {
        let mut buf = Vec::new();
        write_checkpoint(self, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, ConvError> {
        let bytes = std::fs::read(path)?;
        read_checkpoint(&mut bytes.as_slice())
    }
}

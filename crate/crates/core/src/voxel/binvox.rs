//! Reader and writer for binvox version 1 files.
//!
//! Layout: five ASCII header lines
//!
//! ```text
//! #binvox 1
//! dim D D D
//! translate tx ty tz
//! scale s
//! data
//! ```
//!
//! followed by run-length pairs `(value, count)` with `value ∈ {0, 1}` and
//! `count ∈ 1..=255`. Voxels are enumerated with `x` slowest, then `z`, then
//! `y` fastest, which is the order [`VoxelGrid`] stores its bits in, so the
//! runs map directly onto the linear index.
//!
//! The writer always emits maximal runs and formats reals with the shortest
//! representation that parses back exactly, so `write(read(write(g)))` is
//! byte-identical to `write(g)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::VoxelGrid;

const MAGIC: &str = "#binvox 1";

pub fn write_binvox(grid: &VoxelGrid) -> Vec<u8> {
    let r = grid.resolution();
    let [tx, ty, tz] = grid.translate;
    let mut out = format!(
        "{MAGIC}\ndim {r} {r} {r}\ntranslate {tx} {ty} {tz}\nscale {}\ndata\n",
        grid.scale
    )
    .into_bytes();

    let mut bits = grid.iter();
    let Some(mut current) = bits.next() else {
        return out;
    };
    let mut run: u8 = 1;
    for b in bits {
        if b == current && run < u8::MAX {
            run += 1;
        } else {
            out.push(current as u8);
            out.push(run);
            current = b;
            run = 1;
        }
    }
    out.push(current as u8);
    out.push(run);
    out
}

pub fn read_binvox(bytes: &[u8]) -> Result<VoxelGrid> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| Error::format(start, "unterminated header line"))?;
        *pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| Error::format(start, "header is not ASCII"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (off, magic) = next_line(&mut pos)?;
    if magic.trim() != MAGIC {
        return Err(Error::format(off, format!("bad magic line {magic:?}")));
    }

    let mut dim: Option<usize> = None;
    let mut translate = [0.0; 3];
    let mut scale = 1.0;
    loop {
        let (off, line) = next_line(&mut pos)?;
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("data") => break,
            Some("dim") => {
                let d: Vec<usize> = fields
                    .map(|f| {
                        f.parse()
                            .map_err(|_| Error::format(off, format!("bad dim field {f:?}")))
                    })
                    .collect::<Result<_>>()?;
                if d.len() != 3 || d[0] != d[1] || d[1] != d[2] || d[0] == 0 {
                    return Err(Error::format(
                        off,
                        format!("unsupported dim {d:?}; need a nonzero cube"),
                    ));
                }
                dim = Some(d[0]);
            }
            Some("translate") => {
                let t: Vec<f64> = fields
                    .map(|f| {
                        f.parse()
                            .map_err(|_| Error::format(off, format!("bad translate field {f:?}")))
                    })
                    .collect::<Result<_>>()?;
                if t.len() != 3 {
                    return Err(Error::format(off, "translate needs three values"));
                }
                translate = [t[0], t[1], t[2]];
            }
            Some("scale") => {
                let s = fields
                    .next()
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| Error::format(off, "bad scale line"))?;
                if !(s > 0.0) {
                    return Err(Error::format(off, format!("scale {s} must be positive")));
                }
                scale = s;
            }
            _ => {
                return Err(Error::format(
                    off,
                    format!("unexpected header line {line:?}"),
                ))
            }
        }
    }
    let r = dim.ok_or_else(|| Error::format(pos, "missing dim line"))?;

    let mut grid = VoxelGrid::empty(r)?;
    grid.translate = translate;
    grid.scale = scale;
    let total = grid.len();
    let mut filled = 0usize;
    let data = &bytes[pos..];
    if !data.len().is_multiple_of(2) {
        return Err(Error::format(bytes.len() - 1, "dangling run-length byte"));
    }
    for (k, pair) in data.chunks_exact(2).enumerate() {
        let off = pos + 2 * k;
        let (value, count) = (pair[0], pair[1] as usize);
        if value > 1 {
            return Err(Error::format(
                off,
                format!("run value {value} is not 0 or 1"),
            ));
        }
        if count == 0 {
            return Err(Error::format(off + 1, "zero-length run"));
        }
        if filled + count > total {
            return Err(Error::format(
                off + 1,
                format!(
                    "run overruns grid: {} voxels declared, {} encoded",
                    total,
                    filled + count
                ),
            ));
        }
        if value == 1 {
            for i in filled..filled + count {
                grid.set_index(i, true);
            }
        }
        filled += count;
    }
    if filled != total {
        return Err(Error::format(
            bytes.len(),
            format!("stream ends after {filled} of {total} voxels"),
        ));
    }
    Ok(grid)
}

pub fn load_binvox(path: &Path) -> Result<VoxelGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_binvox(&bytes)
}

pub fn save_binvox(path: &Path, grid: &VoxelGrid) -> Result<()> {
    fs::write(path, write_binvox(grid)).map_err(|e| Error::io(path, e))
}

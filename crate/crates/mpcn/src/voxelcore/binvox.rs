//! Reader and writer for the binvox run-length voxel format.
//!
//! Layout: an ASCII header (`#binvox 1`, `dim`, optional `translate` and
//! `scale`, then `data\n`) followed by (value, count) byte pairs. Within the
//! payload y varies fastest, then z, then x, so the linear payload index of
//! voxel (x, y, z) is `x*d*d + z*d + y`. Runs never exceed 255 and the writer
//! always emits maximal runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MpcnError, Result};
use crate::voxelcore::VoxelGrid;

fn parse_err(offset: usize, msg: impl Into<String>) -> MpcnError {
    MpcnError::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Reads one ASCII line (terminated by `\n`) and advances the offset.
fn read_line(r: &mut impl Read, offset: &mut usize) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(parse_err(*offset, "unexpected end of file in header"));
        }
        *offset += 1;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 256 {
            return Err(parse_err(*offset, "header line exceeds 256 bytes"));
        }
    }
    String::from_utf8(line).map_err(|_| parse_err(*offset, "header is not valid ASCII"))
}

/// Decodes a binvox stream into a grid.
pub fn read_binvox(mut reader: impl Read, source: &str) -> Result<VoxelGrid> {
    let mut offset = 0usize;
    let magic = read_line(&mut reader, &mut offset)?;
    if magic.trim() != "#binvox 1" {
        return Err(parse_err(
            0,
            format!("{source}: bad magic line {magic:?}, expected \"#binvox 1\""),
        ));
    }

    let mut dim: Option<usize> = None;
    loop {
        let line_start = offset;
        let line = read_line(&mut reader, &mut offset)?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("dim") => {
                let dims: Vec<usize> = words
                    .map(|w| {
                        w.parse::<usize>()
                            .map_err(|_| parse_err(line_start, format!("{source}: bad dim value {w:?}")))
                    })
                    .collect::<Result<_>>()?;
                if dims.len() != 3 || dims[0] == 0 {
                    return Err(parse_err(
                        line_start,
                        format!("{source}: dim needs three positive values, got {dims:?}"),
                    ));
                }
                if dims[0] != dims[1] || dims[1] != dims[2] {
                    return Err(parse_err(
                        line_start,
                        format!("{source}: only cubic grids are supported, got {dims:?}"),
                    ));
                }
                dim = Some(dims[0]);
            }
            Some("translate") | Some("scale") => {}
            Some("data") => break,
            Some(other) => {
                return Err(parse_err(
                    line_start,
                    format!("{source}: unknown header keyword {other:?}"),
                ));
            }
            None => {}
        }
    }
    let d = dim.ok_or_else(|| parse_err(offset, format!("{source}: header has no dim line")))?;

    let total = d * d * d;
    let mut payload = vec![0u8; total];
    let mut filled = 0usize;
    let mut pair = [0u8; 2];
    while filled < total {
        let pair_offset = offset;
        reader.read_exact(&mut pair).map_err(|_| {
            parse_err(
                pair_offset,
                format!("{source}: payload truncated, {filled} of {total} voxels decoded"),
            )
        })?;
        offset += 2;
        let (value, count) = (pair[0], pair[1] as usize);
        if value > 1 {
            return Err(parse_err(
                pair_offset,
                format!("{source}: run value {value} is not 0 or 1"),
            ));
        }
        if count == 0 {
            return Err(parse_err(pair_offset, format!("{source}: run count is zero")));
        }
        if filled + count > total {
            return Err(parse_err(
                pair_offset,
                format!(
                    "{source}: run of {count} overflows grid, {filled} of {total} already decoded"
                ),
            ));
        }
        if value == 1 {
            payload[filled..filled + count].fill(1);
        }
        filled += count;
    }
    let trailing_at = offset;
    if reader.read(&mut pair[..1])? != 0 {
        return Err(parse_err(
            trailing_at,
            format!("{source}: trailing bytes after payload"),
        ));
    }

    // Payload order is (x, z, y) with y fastest; our grids use (x, y, z).
    let mut grid = VoxelGrid::empty(d);
    let mut i = 0;
    for x in 0..d {
        for z in 0..d {
            for y in 0..d {
                if payload[i] != 0 {
                    grid.set(x, y, z, true);
                }
                i += 1;
            }
        }
    }
    Ok(grid)
}

/// Reads a binvox file from disk.
pub fn read_binvox_file(path: &Path) -> Result<VoxelGrid> {
    let file = File::open(path).map_err(|e| {
        MpcnError::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    read_binvox(BufReader::new(file), &path.display().to_string())
}

/// Encodes a grid as binvox with a canonical header (unit scale, no offset).
pub fn write_binvox(grid: &VoxelGrid, mut writer: impl Write) -> Result<()> {
    let d = grid.resolution();
    write!(
        writer,
        "#binvox 1\ndim {d} {d} {d}\ntranslate 0 0 0\nscale 1\ndata\n"
    )?;

    let emit = |value: u8, count: usize, w: &mut dyn Write| -> Result<()> {
        let mut left = count;
        while left > 0 {
            let chunk = left.min(255);
            w.write_all(&[value, chunk as u8])?;
            left -= chunk;
        }
        Ok(())
    };

    let mut run_value = 0u8;
    let mut run_len = 0usize;
    for x in 0..d {
        for z in 0..d {
            for y in 0..d {
                let v = grid.get(x, y, z) as u8;
                if run_len > 0 && v == run_value {
                    run_len += 1;
                } else {
                    if run_len > 0 {
                        emit(run_value, run_len, &mut writer)?;
                    }
                    run_value = v;
                    run_len = 1;
                }
            }
        }
    }
    if run_len > 0 {
        emit(run_value, run_len, &mut writer)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes a binvox file to disk.
pub fn write_binvox_file(grid: &VoxelGrid, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| {
        MpcnError::Checkpoint(format!("cannot create {}: {e}", path.display()))
    })?;
    write_binvox(grid, BufWriter::new(file))
}

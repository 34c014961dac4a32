//! Binary (P5) PGM graymap reader and writer.
//!
//! Depth views are stored with `maxval` equal to the grid resolution so the
//! quantized pixel values reproduce the source depths exactly: a pixel value
//! `p` decodes to the depth `p / maxval`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{MpcnError, Result};

/// A decoded graymap. Pixels are row-major, `pixels[row * width + col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Pgm {
    /// Quantizes an image of values in [0, 1] onto a `maxval` scale.
    ///
    /// Values that are exact multiples of `1/maxval` (as produced by the
    /// depth renderer) survive a round trip bit-for-bit.
    pub fn from_unit_image(img: &Array2<f64>, maxval: u16) -> Result<Self> {
        if maxval == 0 {
            return Err(MpcnError::config("PGM maxval must be positive"));
        }
        let (height, width) = img.dim();
        let mut pixels = Vec::with_capacity(width * height);
        for row in img.rows() {
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MpcnError::shape(format!(
                        "pixel value {v} outside [0,1]"
                    )));
                }
                pixels.push((v * maxval as f64).round() as u16);
            }
        }
        Ok(Pgm {
            width,
            height,
            maxval,
            pixels,
        })
    }

    /// Inverse of [`Pgm::from_unit_image`].
    pub fn to_unit_image(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.height, self.width));
        for r in 0..self.height {
            for c in 0..self.width {
                out[[r, c]] = self.pixels[r * self.width + c] as f64 / self.maxval as f64;
            }
        }
        out
    }
}

/// Parses one whitespace-delimited ASCII token, skipping `#` comments.
fn read_token(r: &mut impl Read, offset: &mut usize) -> Result<String> {
    let mut byte = [0u8; 1];
    let mut tok = Vec::new();
    let mut in_comment = false;
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(MpcnError::Parse {
                    offset: *offset,
                    msg: "unexpected end of file in PGM header".into(),
                });
            }
            break;
        }
        *offset += 1;
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        if b == b'#' && tok.is_empty() {
            in_comment = true;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
    }
    String::from_utf8(tok).map_err(|_| MpcnError::Parse {
        offset: *offset,
        msg: "PGM header is not ASCII".into(),
    })
}

fn parse_number(tok: &str, offset: usize, what: &str) -> Result<usize> {
    tok.parse::<usize>().map_err(|_| MpcnError::Parse {
        offset,
        msg: format!("bad PGM {what}: {tok:?}"),
    })
}

/// Decodes a P5 graymap. Supports both one and two byte pixels.
pub fn read_pgm(mut reader: impl Read) -> Result<Pgm> {
    let mut offset = 0usize;
    let magic = read_token(&mut reader, &mut offset)?;
    if magic != "P5" {
        return Err(MpcnError::Parse {
            offset: 0,
            msg: format!("bad PGM magic {magic:?}, expected \"P5\""),
        });
    }
    let width = parse_number(&read_token(&mut reader, &mut offset)?, offset, "width")?;
    let height = parse_number(&read_token(&mut reader, &mut offset)?, offset, "height")?;
    let maxval = parse_number(&read_token(&mut reader, &mut offset)?, offset, "maxval")?;
    if width == 0 || height == 0 {
        return Err(MpcnError::Parse {
            offset,
            msg: format!("degenerate PGM size {width}x{height}"),
        });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(MpcnError::Parse {
            offset,
            msg: format!("PGM maxval {maxval} outside 1..=65535"),
        });
    }
    let wide = maxval > 255;
    let n = width * height;
    let mut raw = vec![0u8; n * if wide { 2 } else { 1 }];
    reader.read_exact(&mut raw).map_err(|_| MpcnError::Parse {
        offset,
        msg: format!("PGM pixel data truncated, expected {} bytes", raw.len()),
    })?;
    let pixels: Vec<u16> = if wide {
        raw.chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]))
            .collect()
    } else {
        raw.iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = pixels.iter().position(|&p| p as usize > maxval) {
        return Err(MpcnError::Parse {
            offset: offset + i * if wide { 2 } else { 1 },
            msg: format!("pixel {i} value {} exceeds maxval {maxval}", pixels[i]),
        });
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

/// Encodes a graymap as P5 with big-endian pixels when `maxval > 255`.
pub fn write_pgm(pgm: &Pgm, mut writer: impl Write) -> Result<()> {
    if pgm.pixels.len() != pgm.width * pgm.height {
        return Err(MpcnError::shape(format!(
            "PGM holds {} pixels, header says {}x{}",
            pgm.pixels.len(),
            pgm.width,
            pgm.height
        )));
    }
    write!(writer, "P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval)?;
    if pgm.maxval > 255 {
        for &p in &pgm.pixels {
            writer.write_all(&p.to_be_bytes())?;
        }
    } else {
        let bytes: Vec<u8> = pgm.pixels.iter().map(|&p| p as u8).collect();
        writer.write_all(&bytes)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a PGM file from disk.
pub fn read_pgm_file(path: &Path) -> Result<Pgm> {
    let file = File::open(path).map_err(|e| {
        MpcnError::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    read_pgm(BufReader::new(file))
}

/// Writes a PGM file to disk.
pub fn write_pgm_file(pgm: &Pgm, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| {
        MpcnError::Checkpoint(format!("cannot create {}: {e}", path.display()))
    })?;
    write_pgm(pgm, BufWriter::new(file))
}

//! Binary payload formats, bit-exact:
//!
//! * Images: binary PGM (`P5`, maxval 255), one byte per pixel,
//!   `round(x * 255)`.
//! * ECG: 16-byte header — magic `ECG1`, `u32` leads, `u32` length,
//!   `u32` rate (all little-endian) — followed by `leads × length`
//!   little-endian `f32` samples, lead-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::preprocess::{EcgRecord, ImageRecord, ECG_LEADS};

use super::{io_err, DataError, DataResult};

const ECG_MAGIC: &[u8; 4] = b"ECG1";

pub fn write_pgm(path: &Path, img: &ImageRecord) -> DataResult<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err(path, e))?,
    );
    write!(f, "P5\n{} {}\n255\n", img.width, img.height).map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

pub fn read_pgm(path: &Path) -> DataResult<ImageRecord> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    // Header: "P5" then width, height, maxval as whitespace-separated
    // ASCII integers, then a single whitespace byte before the raster.
    let mut pos = 0usize;
    let mut next_token = |data: &[u8]| -> DataResult<String> {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Format(format!(
                "{}: truncated PGM header",
                path.display()
            )));
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    let magic = next_token(&data)?;
    if magic != "P5" {
        return Err(DataError::Format(format!(
            "{}: not a binary PGM (magic {magic:?})",
            path.display()
        )));
    }
    let width: usize = next_token(&data)?
        .parse()
        .map_err(|_| DataError::Format(format!("{}: bad width", path.display())))?;
    let height: usize = next_token(&data)?
        .parse()
        .map_err(|_| DataError::Format(format!("{}: bad height", path.display())))?;
    let maxval: usize = next_token(&data)?
        .parse()
        .map_err(|_| DataError::Format(format!("{}: bad maxval", path.display())))?;
    if maxval != 255 {
        return Err(DataError::Format(format!(
            "{}: only maxval 255 supported, got {maxval}",
            path.display()
        )));
    }
    pos += 1; // single whitespace after maxval
    let raster = &data[pos..];
    if raster.len() != width * height {
        return Err(DataError::Format(format!(
            "{}: raster has {} bytes, expected {}",
            path.display(),
            raster.len(),
            width * height
        )));
    }
    let pixels: Vec<f64> = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageRecord::new(pixels, height, width)
        .map_err(|e| DataError::Format(format!("{}: {e}", path.display())))
}

pub fn write_ecg_raw(path: &Path, rec: &EcgRecord) -> DataResult<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err(path, e))?,
    );
    f.write_all(ECG_MAGIC).map_err(|e| io_err(path, e))?;
    let leads = ECG_LEADS as u32;
    let len = rec.len() as u32;
    let rate = rec.rate_hz.round() as u32;
    for v in [leads, len, rate] {
        f.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    for &s in rec.samples() {
        f.write_all(&(s as f32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn read_ecg_raw(path: &Path) -> DataResult<EcgRecord> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| io_err(path, e))?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != ECG_MAGIC {
        return Err(DataError::Format(format!(
            "{}: bad ECG magic {magic:?}",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    let mut read_u32 = |f: &mut dyn Read| -> DataResult<u32> {
        f.read_exact(&mut word).map_err(|e| io_err(path, e))?;
        Ok(u32::from_le_bytes(word))
    };
    let leads = read_u32(&mut f)? as usize;
    let len = read_u32(&mut f)? as usize;
    let rate = read_u32(&mut f)?;
    if leads != ECG_LEADS {
        return Err(DataError::Format(format!(
            "{}: {leads} leads, expected {ECG_LEADS}",
            path.display()
        )));
    }
    let mut bytes = vec![0u8; leads * len * 4];
    f.read_exact(&mut bytes).map_err(|e| io_err(path, e))?;
    let samples: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    EcgRecord::new(samples, len, f64::from(rate))
        .map_err(|e| DataError::Format(format!("{}: {e}", path.display())))
}

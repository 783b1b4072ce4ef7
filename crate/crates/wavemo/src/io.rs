//! File formats: PFM (little-endian 32-bit float, scale -1.0), binary PGM
//! (P5, 8-bit), RFC-4180-style CSV with a header row, and plain key=value
//! manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, WavemoError};
use crate::field::{Field, GridSpec};

/// Write a grayscale PFM. Rows are stored bottom-to-top per the format, and
/// the negative scale marks little-endian data.
pub fn write_pfm(path: &Path, field: &Field) -> Result<()> {
    let n = field.grid.n;
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{n} {n}\n-1.0\n")?;
    for iy in (0..n).rev() {
        for ix in 0..n {
            let v = field.at(ix, iy) as f32;
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Field> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    for _ in 0..3 {
        let mut line = Vec::new();
        loop {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            if b[0] == b'\n' {
                break;
            }
            line.push(b[0]);
        }
        header.push(String::from_utf8_lossy(&line).trim().to_string());
    }
    if header[0] != "Pf" {
        return Err(WavemoError::Io(format!("{}: not a grayscale PFM", path.display())));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| WavemoError::Io("bad PFM dimensions".into())))
        .collect::<Result<_>>()?;
    if dims.len() != 2 || dims[0] != dims[1] {
        return Err(WavemoError::Io(format!("{}: PFM must be square", path.display())));
    }
    let n = dims[0];
    let scale: f64 = header[2]
        .parse()
        .map_err(|_| WavemoError::Io("bad PFM scale".into()))?;
    let little_endian = scale < 0.0;
    let grid = GridSpec::new(n, 0.5)?;
    let mut values = vec![0.0f64; n * n];
    let mut buf = [0u8; 4];
    for iy in (0..n).rev() {
        for ix in 0..n {
            r.read_exact(&mut buf)?;
            let v = if little_endian {
                f32::from_le_bytes(buf)
            } else {
                f32::from_be_bytes(buf)
            };
            values[iy * n + ix] = v as f64;
        }
    }
    Ok(Field { grid, values })
}

/// 8-bit binary PGM; values clamped to [0, 1] and scaled to 255.
pub fn write_pgm(path: &Path, field: &Field) -> Result<()> {
    let n = field.grid.n;
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{n} {n}\n255\n")?;
    for iy in 0..n {
        for ix in 0..n {
            let v = (field.at(ix, iy).clamp(0.0, 1.0) * 255.0).round() as u8;
            w.write_all(&[v])?;
        }
    }
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Field> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    // header: magic, width, height, maxval separated by whitespace
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&data[start..pos]).to_string());
    }
    pos += 1; // single whitespace after maxval
    if tokens[0] != "P5" {
        return Err(WavemoError::Io(format!("{}: not a binary PGM", path.display())));
    }
    let w: usize = tokens[1].parse().map_err(|_| WavemoError::Io("bad PGM width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| WavemoError::Io("bad PGM height".into()))?;
    let maxval: f64 =
        tokens[3].parse().map_err(|_| WavemoError::Io("bad PGM maxval".into()))?;
    if w != h {
        return Err(WavemoError::Io(format!("{}: PGM must be square", path.display())));
    }
    if data.len() < pos + w * h {
        return Err(WavemoError::Io(format!("{}: truncated PGM", path.display())));
    }
    let grid = GridSpec::new(w, 0.5)?;
    let values = data[pos..pos + w * h].iter().map(|&b| b as f64 / maxval).collect();
    Ok(Field { grid, values })
}

/// Dispatch on extension: .pfm or .pgm.
pub fn read_image(path: &Path) -> Result<Field> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path),
        Some("pgm") => read_pgm(path),
        _ => Err(WavemoError::Io(format!("{}: unsupported image format", path.display()))),
    }
}

fn csv_quote(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write rows as CSV with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.iter().map(|h| csv_quote(h)).collect::<Vec<_>>().join(","))?;
    for row in rows {
        writeln!(w, "{}", row.iter().map(|c| csv_quote(c)).collect::<Vec<_>>().join(","))?;
    }
    Ok(())
}

/// Read a CSV of floats, skipping the header row.
pub fn read_csv_floats(path: &Path) -> Result<Vec<Vec<f64>>> {
    let r = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| WavemoError::Io(format!("{}: bad float '{t}'", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Write a key=value manifest; pairs are emitted in the given order.
pub fn write_manifest(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in pairs {
        writeln!(w, "{k}={v}")?;
    }
    Ok(())
}

/// Read a key=value manifest with optional `#` comments.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let r = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for line in r.lines() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            WavemoError::Io(format!("{}: expected key=value, got '{line}'", path.display()))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn manifest_get<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

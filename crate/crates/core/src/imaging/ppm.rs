use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

#[inline]
fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a binary P6 PPM (maxval 255). Values are clamped to `[0, 1]` and rounded half-up.
pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let wrap = |source| Error::Write { path: path.to_path_buf(), source };
    let file = std::fs::File::create(path).map_err(wrap)?;
    let mut out = std::io::BufWriter::new(file);
    write!(out, "P6\n{} {}\n255\n", img.width(), img.height()).map_err(wrap)?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    out.write_all(&bytes).map_err(wrap)?;
    out.flush().map_err(wrap)
}

fn next_token(reader: &mut impl BufRead) -> Result<String> {
    let mut token = String::new();
    loop {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte)? == 0 {
            break;
        }
        let ch = byte[0] as char;
        if ch == '#' && token.is_empty() {
            let mut skip = String::new();
            reader.read_line(&mut skip)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(ch);
    }
    if token.is_empty() {
        return Err(Error::BadBlob("truncated PPM header".into()));
    }
    Ok(token)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Read { path: path.to_path_buf(), source })?;
    let mut reader = BufReader::new(file);
    if next_token(&mut reader)? != "P6" {
        return Err(Error::BadBlob("not a P6 PPM".into()));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| Error::BadBlob(format!("bad PPM number {s:?}")));
    let w = parse(next_token(&mut reader)?)?;
    let h = parse(next_token(&mut reader)?)?;
    let maxval = parse(next_token(&mut reader)?)?;
    if maxval != 255 {
        return Err(Error::BadBlob(format!("unsupported maxval {maxval}")));
    }
    let mut bytes = vec![0u8; w * h * 3];
    reader.read_exact(&mut bytes)?;
    Image::from_vec(w, h, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up_and_clamped() {
        assert_eq!(to_byte(-0.5), 0);
        assert_eq!(to_byte(1.5), 255);
        assert_eq!(to_byte(0.5 / 255.0), 1);
        assert_eq!(to_byte(0.49 / 255.0), 0);
    }

    #[test]
    fn roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = Image::from_fn(3, 2, |r, c| [r as f64 / 2.0, c as f64 / 3.0, 1.0]);
        write_ppm(&img, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert!(raw.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(raw.len(), 11 + 18);
        let back = read_ppm(&path).unwrap();
        assert!(back.mean_abs_diff(&img).unwrap() < 1.0 / 255.0);
    }
}

//! Binary PPM (P6) images and PGM (P5) label maps, 8 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// Gray level of class `c` among `num_classes`: `floor(255 c / (C - 1))`.
pub fn label_gray(c: usize, num_classes: usize) -> u8 {
    if num_classes <= 1 {
        0
    } else {
        (255 * c / (num_classes - 1)) as u8
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` image; values are clamped to `[0, 1]`.
pub fn export_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("export_ppm", format!("image shape {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            buf.push(quantize(d[ch * h * w + i]));
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn export_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    let c = labels.num_classes();
    buf.extend(labels.targets().map(|l| label_gray(l, c)));
    fs::write(path, buf)?;
    Ok(())
}

/// Splits a binary PNM into its magic, width, height and payload.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("PNM header not ASCII".into()))?);
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field {s:?}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(Error::Format(format!("max value {max}, expected 255")));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

/// Reads a P6 file back to a `[3, H, W]` tensor with values `byte / 255`.
pub fn import_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, payload) = parse_pnm(&bytes, "P6")?;
    if payload.len() != 3 * w * h {
        return Err(Error::Format(format!("{} payload bytes for {w}x{h} P6", payload.len())));
    }
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * w * h + i] = f64::from(px[ch]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Inverse of [`export_pgm`] for a known class count.
pub fn import_pgm(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let (w, h, payload) = parse_pnm(&bytes, "P5")?;
    if payload.len() != w * h {
        return Err(Error::Format(format!("{} payload bytes for {w}x{h} P5", payload.len())));
    }
    let mut lookup = [None; 256];
    for c in 0..num_classes {
        lookup[usize::from(label_gray(c, num_classes))] = Some(c as u8);
    }
    let data = payload
        .iter()
        .map(|&g| lookup[usize::from(g)].ok_or_else(|| Error::Format(format!("gray {g} is not a class level"))))
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(h, w, num_classes, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        export_ppm(&p, &Tensor::zeros(&[3, 4, 2])).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n2 4\n255\n"));
        assert_eq!(&bytes[11..], &[0u8; 24]);
        assert_eq!(import_ppm(&p).unwrap(), Tensor::zeros(&[3, 4, 2]));
    }

    #[test]
    fn three_class_grays_and_roundtrip() {
        assert_eq!([0, 1, 2].map(|c| label_gray(c, 3)), [0, 127, 255]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        let labels = LabelMap::new(2, 3, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        export_pgm(&p, &labels).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 127, 255, 255, 127, 0]);
        assert_eq!(import_pgm(&p, 3).unwrap(), labels);
    }

    #[test]
    fn many_class_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        let labels = LabelMap::new(16, 16, 256, (0..=255).collect()).unwrap();
        export_pgm(&p, &labels).unwrap();
        assert_eq!(import_pgm(&p, 256).unwrap(), labels);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        export_ppm(&p, &Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(import_pgm(&p, 3).is_err());
    }
}

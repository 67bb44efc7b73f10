//! File formats: PFM depth maps, PNG images and masks, PLY point clouds.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel float map, row-major top-to-bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Writes a little-endian grayscale PFM (`Pf`). PFM stores rows bottom-up.
pub fn write_pfm(path: &Path, map: &FloatMap) -> Result<()> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(map.data.len() * 4);
    for row in map.data.chunks_exact(map.width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<FloatMap> {
    let bytes = fs::read(path)?;
    let mut reader = BufReader::new(bytes.as_slice());
    let mut header = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        header.push(line.trim().to_string());
    }
    if header[0] != "Pf" {
        return Err(Error::data(path, format!("expected grayscale PFM, got header {:?}", header[0])));
    }
    let dims: Vec<usize> = header[1].split_whitespace().filter_map(|s| s.parse().ok()).collect();
    let [width, height] = dims[..] else {
        return Err(Error::data(path, format!("bad PFM size line {:?}", header[1])));
    };
    let scale: f64 = header[2].parse().map_err(|_| Error::data(path, "bad PFM scale"))?;
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.len() != width * height * 4 {
        return Err(Error::data(path, format!("expected {} data bytes, got {}", width * height * 4, raw.len())));
    }
    let decode = |c: &[u8]| {
        let b = [c[0], c[1], c[2], c[3]];
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let rows: Vec<Vec<f32>> = raw.chunks_exact(width * 4).map(|r| r.chunks_exact(4).map(decode).collect()).collect();
    let data = rows.into_iter().rev().flatten().collect();
    Ok(FloatMap { height, width, data })
}

/// Writes a planar RGB image `[3, H, W]` with values in `[0, 1]`.
pub fn write_rgb_png(path: &Path, rgb: &[f32], height: usize, width: usize) -> Result<()> {
    let n = height * width;
    if rgb.len() != 3 * n {
        return Err(Error::shape("write_rgb_png", format!("{} values for {height}x{width}", rgb.len())));
    }
    let mut buf = vec![0u8; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            buf[3 * i + c] = to_u8(rgb[c * n + i]);
        }
    }
    image::RgbImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer sized above")
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads an 8-bit PNG into planar RGB `[3, H, W]` in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut out = vec![0.0; 3 * n];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + i] = p[c] as f32 / 255.0;
        }
    }
    Ok((out, h, w))
}

/// Writes a grayscale PNG from values in `[0, 1]`.
pub fn write_gray_png(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("write_gray_png", format!("{} values for {height}x{width}", values.len())));
    }
    let buf = values.iter().map(|&v| to_u8(v)).collect();
    image::GrayImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer sized above")
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn write_mask_png(path: &Path, mask: &[bool], height: usize, width: usize) -> Result<()> {
    let v: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_gray_png(path, &v, height, width)
}

pub fn read_mask_png(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| p[0] >= 128).collect(), h, w))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A colored point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub position: [f64; 3],
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

pub fn write_ply(path: &Path, points: &[Point], format: PlyFormat) -> Result<()> {
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat {name} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )?;
    for p in points {
        let [x, y, z] = p.position.map(|v| v as f32);
        match format {
            PlyFormat::Ascii => writeln!(out, "{x} {y} {z} {} {} {}", p.color[0], p.color[1], p.color[2])?,
            PlyFormat::BinaryLittleEndian => {
                for v in [x, y, z] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&p.color);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads PLY files written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<Vec<Point>> {
    let bytes = fs::read(path)?;
    let end = b"end_header\n";
    let pos = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| Error::data(path, "missing end_header"))?;
    let header = String::from_utf8_lossy(&bytes[..pos]);
    let body = &bytes[pos + end.len()..];
    let mut count = None;
    let mut binary = false;
    for line in header.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", _] => binary = false,
            ["format", "binary_little_endian", _] => binary = true,
            ["format", other, _] => return Err(Error::data(path, format!("unsupported PLY format {other}"))),
            ["element", "vertex", n] => count = n.parse::<usize>().ok(),
            _ => {}
        }
    }
    let n = count.ok_or_else(|| Error::data(path, "missing vertex count"))?;
    let mut points = Vec::with_capacity(n);
    if binary {
        if body.len() < n * 15 {
            return Err(Error::data(path, "truncated binary PLY"));
        }
        for rec in body.chunks_exact(15).take(n) {
            let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]) as f64;
            points.push(Point { position: [f(0), f(4), f(8)], color: [rec[12], rec[13], rec[14]] });
        }
    } else {
        for line in String::from_utf8_lossy(body).lines().take(n) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 6 {
                return Err(Error::data(path, format!("bad PLY line {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::data(path, format!("bad number {s:?}")));
            let byte = |s: &str| s.parse::<u8>().map_err(|_| Error::data(path, format!("bad color {s:?}")));
            points.push(Point {
                position: [num(f[0])?, num(f[1])?, num(f[2])?],
                color: [byte(f[3])?, byte(f[4])?, byte(f[5])?],
            });
        }
    }
    if points.len() != n {
        return Err(Error::data(path, format!("expected {n} vertices, read {}", points.len())));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip_keeps_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let map = FloatMap { height: 2, width: 3, data: vec![1.0, 2.0, 3.0, 4.0, 5.0, f32::MAX] };
        write_pfm(&p, &map).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), map);
        // First stored row is the bottom one.
        let raw = fs::read(&p).unwrap();
        let start = raw.len() - 24;
        assert_eq!(f32::from_le_bytes(raw[start..start + 4].try_into().unwrap()), 4.0);
    }

    #[test]
    fn ply_roundtrip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![
            Point { position: [0.5, -1.25, 3.0], color: [1, 2, 3] },
            Point { position: [2.0, 0.0, -0.75], color: [255, 0, 128] },
        ];
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let p = dir.path().join("c.ply");
            write_ply(&p, &pts, fmt).unwrap();
            assert_eq!(read_ply(&p).unwrap(), pts);
        }
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let rgb: Vec<f32> = (0..3 * 6).map(|i| i as f32 / 17.0).collect();
        write_rgb_png(&p, &rgb, 2, 3).unwrap();
        let (back, h, w) = read_rgb_png(&p).unwrap();
        assert_eq!((h, w), (2, 3));
        for (a, b) in rgb.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let m = dir.path().join("m.png");
        let mask = vec![true, false, false, true, true, false];
        write_mask_png(&m, &mask, 2, 3).unwrap();
        assert_eq!(read_mask_png(&m).unwrap().0, mask);
    }
}

//! Lossless 8-bit image codec (binary PPM) and resizing.
//!
//! Pixel mapping is [-1,1] <-> [0,255] with round-half-away-from-zero, so
//! the range endpoints round-trip exactly and everything else stays within
//! one quantization step (1/127.5).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One quantization step of the 8-bit mapping.
pub const QUANT_STEP: f64 = 1.0 / 127.5;

/// [-1,1] to [0,255], round half away from zero.
pub fn quantize(v: f64) -> u8 {
    let scaled = ((v + 1.0) * 127.5).clamp(0.0, 255.0);
    // all values are non-negative here, so half-away == floor(v + 0.5)
    (scaled + 0.5).floor().min(255.0) as u8
}

/// [0,255] back to [-1,1].
pub fn dequantize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Write a [1,3,H,W] image in [-1,1] as binary PPM.
pub fn encode_image(img: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_ppm_bytes(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn encode_ppm_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(
            "encode_image",
            format!("expected a 1x3xHxW image, got {s}"),
        ));
    }
    let mut out = Vec::with_capacity(20 + 3 * s.h * s.w);
    write!(out, "P6\n{} {}\n255\n", s.w, s.h).expect("vec write");
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(quantize(img.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

/// Read a binary PPM into raw (width, height, interleaved RGB bytes).
pub fn decode_ppm_raw(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_ppm_bytes(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn decode_ppm_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and # comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    if magic != "P6" {
        return Err(Error::Data(format!("not a binary PPM (magic {magic:?})")));
    }
    let w: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data("bad width".into()))?;
    let h: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data("bad height".into()))?;
    let maxval: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Data(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Data(format!(
            "truncated pixel data: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Read a binary PPM as a [1,3,H,W] tensor in [-1,1].
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let (w, h, raw) = decode_ppm_raw(path)?;
    Ok(tensor_from_raw(w, h, &raw))
}

pub fn tensor_from_raw(w: usize, h: usize, raw: &[u8]) -> Tensor {
    let s = Shape::new(1, 3, h, w);
    let mut data = vec![0.0; s.numel()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[s.index(0, c, y, x)] = dequantize(raw[(y * w + x) * 3 + c]);
            }
        }
    }
    Tensor::new(s, data)
}

/// Bilinear resize of [N,C,H,W] with half-pixel centers.
pub fn resize_bilinear(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = img.shape();
    let os = Shape::new(s.n, s.c, oh, ow);
    let sy = s.h as f64 / oh as f64;
    let sx = s.w as f64 / ow as f64;
    let mut out = vec![0.0; os.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (s.h - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(s.h - 1);
                let dy = fy - y0 as f64;
                for x in 0..ow {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (s.w - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(s.w - 1);
                    let dx = fx - x0 as f64;
                    let v = (1.0 - dy) * (1.0 - dx) * img.at(n, c, y0, x0)
                        + (1.0 - dy) * dx * img.at(n, c, y0, x1)
                        + dy * (1.0 - dx) * img.at(n, c, y1, x0)
                        + dy * dx * img.at(n, c, y1, x1);
                    out[os.index(n, c, y, x)] = v;
                }
            }
        }
    }
    Tensor::new(os, out)
}

/// Nearest-neighbour resize; keeps exact values, used for semantic maps.
pub fn resize_nearest(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = img.shape();
    let os = Shape::new(s.n, s.c, oh, ow);
    let sy = s.h as f64 / oh as f64;
    let sx = s.w as f64 / ow as f64;
    let mut out = vec![0.0; os.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                let iy = (((y as f64 + 0.5) * sy).floor() as usize).min(s.h - 1);
                for x in 0..ow {
                    let ix = (((x as f64 + 0.5) * sx).floor() as usize).min(s.w - 1);
                    out[os.index(n, c, y, x)] = img.at(n, c, iy, ix);
                }
            }
        }
    }
    Tensor::new(os, out)
}

/// Stack images into a panel grid: one row per entry, one column per image.
/// All images must share one shape.
pub fn image_grid(rows: &[Vec<&Tensor>]) -> Result<Tensor> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Data("image_grid: empty grid".into()));
    }
    let cell = rows[0][0].shape();
    let cols = rows[0].len();
    for row in rows {
        if row.len() != cols {
            return Err(Error::Data("image_grid: ragged rows".into()));
        }
        for img in row {
            if img.shape() != cell {
                return Err(Error::shape(
                    "image_grid",
                    format!("cell {} differs from {}", img.shape(), cell),
                ));
            }
        }
    }
    let os = Shape::new(1, 3, cell.h * rows.len(), cell.w * cols);
    let mut out = vec![0.0; os.numel()];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            for c in 0..3 {
                for y in 0..cell.h {
                    for x in 0..cell.w {
                        out[os.index(0, c, ri * cell.h + y, ci * cell.w + x)] =
                            img.at(0, c, y, x);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(os, out))
}

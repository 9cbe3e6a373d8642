//! Binary PPM/PGM images as `1 x C x H x W` tensors with values in `[0, 1]`,
//! plus the bilinear crop-and-resize used by augmentation.

use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Shape, Tensor};

/// Reads a binary `P6` (RGB) or `P5` (gray) file with maxval up to 255.
pub fn read_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
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
            return Err(Error::parse(1, "truncated PNM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::parse(1, format!("unsupported magic `{other}`"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(1, format!("bad header number `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(1, format!("unsupported maxval {maxval}")));
    }
    let n = w * h * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::parse(1, "raster shorter than header dimensions"))?;
    let mut t = Tensor::zeros(Shape::new(1, channels, h, w));
    for (i, &b) in raster.iter().enumerate() {
        let c = i % channels;
        let p = i / channels;
        t.set(0, c, p / w, p % w, b as f64 / maxval as f64);
    }
    Ok(t)
}

/// Writes `P6` for 3-channel and `P5` for 1-channel tensors.
pub fn write_pnm<W: Write>(t: &Tensor, mut out: W) -> Result<()> {
    let s = t.shape();
    let magic = match s.channels {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::shape(format!("cannot write {c}-channel image"))),
    };
    write!(out, "{magic}\n{} {}\n255\n", s.width, s.height)?;
    let mut raster = Vec::with_capacity(s.plane() * s.channels);
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..s.channels {
                raster.push((t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out.write_all(&raster)?;
    Ok(())
}

/// Bilinearly samples the `crop` window of `img` onto an `out_w x out_h` grid.
/// Taps outside the source take the per-channel `pad` value.
pub fn resample_crop(img: &Tensor, crop: &BBox, out_w: usize, out_h: usize, pad: &[f64]) -> Tensor {
    let s = img.shape();
    let mut out = Tensor::zeros(Shape::new(1, s.channels, out_h, out_w));
    let sx = crop.w / out_w as f64;
    let sy = crop.h / out_h as f64;
    let taps = |o: usize, origin: f64, step: f64| {
        let src = origin + (o as f64 + 0.5) * step - 0.5;
        let i0 = src.floor();
        (i0 as isize, src - i0)
    };
    let xt: Vec<_> = (0..out_w).map(|o| taps(o, crop.x, sx)).collect();
    for c in 0..s.channels {
        let padv = pad.get(c).copied().unwrap_or(0.0);
        let px = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= s.height as isize || x >= s.width as isize {
                padv
            } else {
                img.at(0, c, y as usize, x as usize)
            }
        };
        for oy in 0..out_h {
            let (y0, fy) = taps(oy, crop.y, sy);
            for (ox, &(x0, fx)) in xt.iter().enumerate() {
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
                let bot = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
                out.set(0, c, oy, ox, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Mirrors every plane left-to-right.
pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let s = img.shape();
    let mut out = img.clone();
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    out.set(b, c, y, x, img.at(b, c, y, s.width - 1 - x));
                }
            }
        }
    }
    out
}

//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a `(1,3,H,W)` image as P6 or a `(1,1,H,W)` map as P5.
pub fn encode_pnm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = img.shape();
    let magic = match (n, c) {
        (1, 3) => "P6",
        (1, 1) => "P5",
        _ => return Err(Error::dim("write_ppm", &img.shape(), &[1, 3, h, w])),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                out.push(quantize(img.at(0, ci, y, x)));
            }
        }
    }
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("ppm", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = header_token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("ppm", format!("bad {what} in header")))
}

/// Decode P6 into `(1,3,H,W)` or P5 into `(1,1,H,W)`, values in `[0,1]`.
pub fn decode_pnm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let c = match header_token(bytes, &mut pos)? {
        b"P6" => 3,
        b"P5" => 1,
        m => {
            return Err(Error::format(
                "ppm",
                format!("unsupported magic {:?}", String::from_utf8_lossy(m)),
            ))
        }
    };
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format("ppm", format!("maxval {maxval} unsupported (need 255)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = c * h * w;
    if w == 0 || h == 0 || bytes.len() < pos + need {
        return Err(Error::format("ppm", format!("payload of {need} bytes missing or truncated")));
    }
    let px = &bytes[pos..pos + need];
    let scale = T::lit(1.0 / 255.0);
    Ok(Tensor::from_fn([1, c, h, w], |[_, ci, y, x]| {
        T::lit(px[(y * w + x) * c + ci] as f64) * scale
    }))
}

pub fn write_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_pnm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::format("ppm", format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Min-max normalise a single-channel map to `[0,1]` (constant maps become 0).
pub fn normalize_map<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = m
        .data()
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span <= T::zero() {
        return Tensor::zeros(m.shape());
    }
    m.map(|v| (v - lo) / span)
}

//! Binary PPM (P6) and PGM (P5) codecs for `[0,1]`-valued tensors.
//!
//! Colour images are 3×H×W tensors, grey images and masks 1×H×W. Values are
//! quantised with `round(255·v)` after clamping, so a write/read round trip
//! is within 1/255 per channel and `{0,1}` masks survive exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &'static str, channels: usize, t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    if c != channels {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{magic} needs {channels} channel(s)"),
        });
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    let d = t.data();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(quantize(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    encode("P6", 3, img)
}

pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    encode("P5", 1, img)
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &'static str) -> Result<Header> {
    let fail = |reason: &str| Error::format(magic, reason.to_string());
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(fail("bad magic number"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail("header ends early")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("expected a decimal number in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail("header number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fail("only 8-bit maxval (1..=255) is supported"));
    }
    Ok(Header {
        width,
        height,
        maxval,
        offset: pos,
    })
}

fn decode(bytes: &[u8], magic: &'static str, channels: usize) -> Result<Tensor> {
    let hdr = parse_header(bytes, magic)?;
    let (h, w) = (hdr.height, hdr.width);
    let need = h * w * channels;
    let payload = &bytes[hdr.offset..];
    if payload.len() < need {
        return Err(Error::format(
            magic,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let scale = hdr.maxval as f64;
    let mut data = vec![0.0; need];
    for p in 0..h * w {
        for ch in 0..channels {
            data[ch * h * w + p] = payload[p * channels + ch] as f64 / scale;
        }
    }
    Tensor::new(&[channels, h, w], data)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, "P6", 3)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, "P5", 1)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn colour_round_trip_is_within_quantisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform(&[3, 7, 5], 0.0, 1.0, &mut rng);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn masks_round_trip_exactly() {
        let mask = Tensor::from_fn(&[1, 4, 6], |i| (i % 3 == 0) as u8 as f64);
        assert_eq!(decode_pgm(&encode_pgm(&mask).unwrap()).unwrap(), mask);
    }

    #[test]
    fn header_with_comments_and_odd_spacing() {
        let mut bytes = b"P5 # grey\n# another\n 2\t1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let t = decode_pgm(&bytes).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 x\n255\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_pgm(b"P5\n1 1\n255").is_err());
        assert!(encode_ppm(&Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn lower_maxval_is_rescaled() {
        let mut bytes = b"P5\n2 1\n15\n".to_vec();
        bytes.extend([0u8, 15]);
        assert_eq!(decode_pgm(&bytes).unwrap().data(), &[0.0, 1.0]);
    }
}

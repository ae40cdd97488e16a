//! Binary PPM (P6) images and PGM (P5) label masks, 8 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::label::LabelMask;
use crate::tensor::Tensor;

/// Maps `[0, 1]` to `0..=255` by rounding; values outside are clamped.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `3×H×W` image in `[0, 1]` as P6.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape(format!("PPM needs a 3×H×W image, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(3 * plane);
    for p in 0..plane {
        out.extend([quantize(d[p]), quantize(d[plane + p]), quantize(d[2 * plane + p])]);
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let header = parse_header(bytes, b"P6")?;
    let (w, h) = (header.width, header.height);
    let pixels = payload(bytes, header.data_offset, 3 * w * h)?;
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (p, rgb) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = rgb[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn encode_pgm(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.ids());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMask> {
    let header = parse_header(bytes, b"P5")?;
    let ids = payload(bytes, header.data_offset, header.width * header.height)?;
    LabelMask::new(header.height, header.width, ids.to_vec())
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<LabelMask> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_error(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][i];
            return Err(parse_error(pos, format!("expected {what}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_error(start, "number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_error(pos, "expected single whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(parse_error(2, format!("empty image {width}×{height}")));
    }
    if maxval != 255 {
        return Err(parse_error(2, format!("maxval {maxval} unsupported, expected 255")));
    }
    Ok(Header {
        width,
        height,
        data_offset: pos,
    })
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    let available = bytes.len() - offset;
    if available < len {
        return Err(parse_error(
            bytes.len(),
            format!("truncated pixel data: expected {len} bytes, found {available}"),
        ));
    }
    Ok(&bytes[offset..offset + len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::IGNORE;
    use proptest::prelude::*;

    #[test]
    fn pgm_keeps_ignore_id() {
        let mask = LabelMask::new(2, 3, vec![0, 1, IGNORE, 7, 255, 3]).unwrap();
        let bytes = encode_pgm(&mask);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), mask);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # made by hand\n2 # width\n1\n255\n".to_vec();
        bytes.extend([4, 5]);
        let m = decode_pgm(&bytes).unwrap();
        assert_eq!(m.ids(), &[4, 5]);
    }

    #[test]
    fn truncated_and_malformed() {
        let mask = LabelMask::filled(4, 4, 1);
        let bytes = encode_pgm(&mask);
        let err = decode_pgm(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset == bytes.len() - 3));
        assert!(matches!(
            decode_pgm(b"P6\n1 1\n255\n\0"),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(
            decode_pgm(b"P5\n1 x\n255\n\0"),
            Err(Error::Parse { offset: 5, .. })
        ));
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode_ppm(b"").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255").is_err());
    }

    proptest! {
        #[test]
        fn ppm_round_trip_is_exact_after_quantization(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = crate::params::param_rng(seed, "ppm");
            let img = Tensor::from_fn(&[3, h, w], |_| rand::Rng::gen_range(&mut rng, -0.1f32..1.1));
            let bytes = encode_ppm(&img).unwrap();
            let back = decode_ppm(&bytes).unwrap();
            for (&a, &b) in img.data().iter().zip(back.data()) {
                prop_assert_eq!(quantize(a), quantize(b));
            }
            prop_assert_eq!(encode_ppm(&back).unwrap(), bytes);
        }
    }
}

//! Binary PPM (P6) and PGM (P5) codecs, maxval 255.
//!
//! Encoders always write the canonical header `P6\n<w> <h>\n255\n`; decoders
//! accept any whitespace between header tokens and exactly one whitespace
//! byte after the maxval, as the netpbm format requires.

use crate::image::{ClassId, Image, ImageError, SemanticMask};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Image(#[from] ImageError),
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header, CodecError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(CodecError::MalformedHeader(format!(
            "expected magic {}, got {:?}",
            String::from_utf8_lossy(magic),
            got
        )));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        let ws_start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == ws_start {
            return Err(CodecError::MalformedHeader(format!(
                "missing whitespace before header field {i}"
            )));
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(CodecError::MalformedHeader(format!(
                "header field {i} is not a number"
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| CodecError::MalformedHeader(format!("header field {i} overflows")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(CodecError::MalformedHeader(
                "expected a single whitespace byte after maxval".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(CodecError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(CodecError::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        data_offset: pos,
    })
}

fn payload(bytes: &[u8], header: &Header, channels: usize) -> Result<Vec<u8>, CodecError> {
    let expected = header.width * header.height * channels;
    let data = &bytes[header.data_offset..];
    if data.len() < expected {
        return Err(CodecError::Truncated {
            expected,
            actual: data.len(),
        });
    }
    if data.len() > expected {
        return Err(CodecError::TrailingBytes(data.len() - expected));
    }
    Ok(data.to_vec())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, CodecError> {
    let header = parse_header(bytes, b"P6")?;
    let pixels = payload(bytes, &header, 3)?;
    Ok(Image::new(header.width, header.height, pixels)?)
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

/// Decode a P5 mask, checking every value against `declared`.
pub fn decode_pgm(bytes: &[u8], declared: &[ClassId]) -> Result<SemanticMask, CodecError> {
    let header = parse_header(bytes, b"P5")?;
    let classes = payload(bytes, &header, 1)?;
    Ok(SemanticMask::with_classes(
        header.width,
        header.height,
        classes,
        declared,
    )?)
}

pub fn encode_pgm(mask: &SemanticMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.classes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_two_pixel_ppm() {
        let mut b = b"P6\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[0, 0, 0, 255, 255, 255]);
        let img = decode_ppm(&b).unwrap();
        assert_eq!(img.dims(), (2, 1));
        assert_eq!(img.get(0, 0), [0, 0, 0]);
        assert_eq!(img.get(1, 0), [255, 255, 255]);
        assert_eq!(encode_ppm(&img), b);
    }

    #[test]
    fn wrong_magic_is_malformed() {
        let mut b = b"P5\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[0; 6]);
        assert!(matches!(decode_ppm(&b), Err(CodecError::MalformedHeader(_))));
        assert!(matches!(decode_ppm(b""), Err(CodecError::MalformedHeader(_))));
    }

    #[test]
    fn other_header_errors() {
        let b = b"P6\n2 1\n65535\n".to_vec();
        assert_eq!(decode_ppm(&b), Err(CodecError::UnsupportedMaxval(65535)));
        let mut b = b"P6\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[1, 2, 3]);
        assert_eq!(
            decode_ppm(&b),
            Err(CodecError::Truncated { expected: 6, actual: 3 })
        );
        assert!(matches!(
            decode_ppm(b"P6 x 1 255\n"),
            Err(CodecError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n255"),
            Err(CodecError::MalformedHeader(_))
        ));
    }

    #[test]
    fn decodes_mask() {
        let mut b = b"P5\n2 2\n255\n".to_vec();
        b.extend_from_slice(&[0, 0, 1, 1]);
        let m = decode_pgm(&b, &ClassId::ALL).unwrap();
        assert_eq!(m.get(0, 0), ClassId::BACKGROUND);
        assert_eq!(m.get(1, 1), ClassId::ROAD);
        assert_eq!(encode_pgm(&m), b);
    }

    #[test]
    fn mask_out_of_range() {
        let mut b = b"P5\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[0, 200]);
        assert!(matches!(
            decode_pgm(&b, &ClassId::ALL),
            Err(CodecError::Image(ImageError::UndeclaredClass { index: 200, .. }))
        ));
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let mut rng = crate::rng::rng(seed);
            let pixels: Vec<u8> = (0..w * h * 3).map(|_| rand::Rng::gen(&mut rng)).collect();
            let img = Image::new(w, h, pixels).unwrap();
            let bytes = encode_ppm(&img);
            prop_assert_eq!(decode_ppm(&bytes).unwrap(), img);
            prop_assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()), bytes);
        }

        #[test]
        fn pgm_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let mut rng = crate::rng::rng(seed);
            let classes: Vec<u8> = (0..w * h).map(|_| rand::Rng::gen_range(&mut rng, 0..6u8)).collect();
            let m = SemanticMask::new(w, h, classes).unwrap();
            let bytes = encode_pgm(&m);
            prop_assert_eq!(decode_pgm(&bytes, &ClassId::ALL).unwrap(), m);
        }
    }
}

//! Binary PNM (P5 grayscale, P6 colour) with maxval 255.

use crate::error::{Error, Result};

use super::image::Grid;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Decode("missing PNM magic number".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        other => {
            return Err(Error::Decode(format!(
                "unsupported magic number P{}",
                char::from(other).escape_default()
            )))
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (slot, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        // whitespace and comments before each field
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
            return Err(Error::Decode(format!("malformed header: expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *slot = text
            .parse()
            .map_err(|_| Error::Decode(format!("header {name} out of range: {text}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Decode(
                "malformed header: no separator before payload".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Decode(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Decode(format!("empty image {width}x{height}")));
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos,
    })
}

/// Decodes a P5 or P6 file into a grayscale grid in [0, 1].
pub fn decode_image(bytes: &[u8]) -> Result<Grid> {
    let header = parse_header(bytes)?;
    let pixels = header.width * header.height;
    let needed = pixels * header.channels;
    let payload = &bytes[header.data_start..];
    if payload.len() < needed {
        return Err(Error::Decode(format!(
            "truncated payload: expected {needed} bytes, found {}",
            payload.len()
        )));
    }
    let values = match header.channels {
        1 => payload[..needed]
            .iter()
            .map(|&v| v as f32 / 255.0)
            .collect(),
        _ => payload[..needed]
            .chunks_exact(3)
            .map(|rgb| {
                let luma: f64 = rgb.iter().zip(LUMA).map(|(&c, w)| c as f64 * w).sum();
                (luma / 255.0) as f32
            })
            .collect(),
    };
    Grid::new(header.height, header.width, values)
}

/// Encodes 8-bit grayscale samples as a P5 file.
pub fn encode_p5(width: usize, height: usize, samples: &[u8]) -> Result<Vec<u8>> {
    if samples.len() != width * height {
        return Err(Error::Dimension(format!(
            "P5 payload of {} bytes for a {width}x{height} image",
            samples.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    Ok(out)
}

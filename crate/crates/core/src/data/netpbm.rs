//! Binary Netpbm (P5/P6) and PFM encoding.
//!
//! RGB images are P6 with maxval 255, single-channel maps are P5, depth maps
//! are little-endian greyscale PFM (scale `-1.0`, rows stored bottom to top).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Encodes a `[3, H, W]` tensor as P6. Values are rounded to the nearest
/// integer and clamped to `[0, 255]`.
pub fn encode_ppm(rgb: &Tensor) -> Result<Vec<u8>> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::config(format!("P6 needs [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(rgb.data()[c * h * w + i]));
        }
    }
    Ok(out)
}

/// Encodes an `[H, W]` tensor as P5 with maxval 255.
pub fn encode_pgm(plane: &Tensor) -> Result<Vec<u8>> {
    let s = plane.shape();
    if s.len() != 2 {
        return Err(Error::config(format!("P5 needs [H, W], got {s:?}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(plane.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Encodes an `[H, W]` tensor as little-endian PFM. Values are narrowed to `f32`.
pub fn encode_pfm(plane: &Tensor) -> Result<Vec<u8>> {
    let s = plane.shape();
    if s.len() != 2 {
        return Err(Error::config(format!("PFM needs [H, W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for y in (0..h).rev() {
        for &v in &plane.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, "unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(start, "header token is not ASCII"))
    }

    fn dimension(&mut self) -> Result<usize> {
        let at = self.pos;
        let tok = self.token()?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::format(at, format!("invalid dimension `{tok}`"))),
        }
    }

    /// Consumes the single whitespace byte separating header from payload.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format(self.pos, "missing whitespace after header")),
        }
    }
}

fn parse_pnm_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut hdr = Header { bytes, pos: 0 };
    let m = hdr.token()?;
    if m != magic {
        return Err(Error::format(0, format!("expected magic {magic}, found `{m}`")));
    }
    let w = hdr.dimension()?;
    let h = hdr.dimension()?;
    let at = hdr.pos;
    let maxval = hdr.token()?;
    if maxval != "255" {
        return Err(Error::format(at, format!("unsupported maxval `{maxval}`")));
    }
    Ok((w, h, hdr.end()?))
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    if bytes.len() < start + len {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: expected {len} bytes after offset {start}"),
        ));
    }
    Ok(&bytes[start..start + len])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, start) = parse_pnm_header(bytes, "P6")?;
    let px = payload(bytes, start, 3 * w * h)?;
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            data[c * w * h + i] = px[3 * i + c] as f64;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, start) = parse_pnm_header(bytes, "P5")?;
    let px = payload(bytes, start, w * h)?;
    Tensor::new(vec![h, w], px.iter().map(|&b| b as f64).collect())
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor> {
    let mut hdr = Header { bytes, pos: 0 };
    let m = hdr.token()?;
    if m != "Pf" {
        return Err(Error::format(0, format!("expected magic Pf, found `{m}`")));
    }
    let w = hdr.dimension()?;
    let h = hdr.dimension()?;
    let at = hdr.pos;
    let scale_tok = hdr.token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::format(at, format!("invalid scale `{scale_tok}`")))?;
    if !(scale < 0.0) {
        return Err(Error::format(at, "only little-endian PFM (negative scale) is supported"));
    }
    let start = hdr.end()?;
    let px = payload(bytes, start, 4 * w * h)?;
    let mut data = vec![0.0; w * h];
    for (row, chunk) in px.chunks_exact(4 * w).enumerate() {
        let y = h - 1 - row;
        for (x, b) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            if !v.is_finite() {
                return Err(Error::format(start + row * 4 * w + 4 * x, "non-finite PFM value"));
            }
            data[y * w + x] = v;
        }
    }
    Tensor::new(vec![h, w], data)
}

pub fn write_ppm(path: &Path, rgb: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(rgb)?)?)
}

pub fn write_pgm(path: &Path, plane: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(plane)?)?)
}

pub fn write_pfm(path: &Path, plane: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_pfm(plane)?)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    decode_pfm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn p6_header_is_exact() {
        let img = Tensor::zeros(&[3, 64, 64]);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
        assert_eq!(bytes.len(), 13 + 3 * 64 * 64);
    }

    #[test]
    fn pfm_payload_is_four_bytes_per_value() {
        let d = Tensor::new(vec![2, 2], vec![1.0, 2.5, 3.0, 100.0]).unwrap();
        let bytes = encode_pfm(&d).unwrap();
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(bytes.len(), header.len() + 16);
        assert_eq!(decode_pfm(&bytes).unwrap(), d);
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let d = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let bytes = encode_pfm(&d).unwrap();
        let first = &bytes[bytes.len() - 8..bytes.len() - 4];
        assert_eq!(f32::from_le_bytes(first.try_into().unwrap()), 2.0);
    }

    #[test]
    fn rejects_malformed_headers_with_offsets() {
        match decode_ppm(b"P5\n2 2\n255\n....") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match decode_pgm(b"P5\n2 x\n255\n....") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        assert!(decode_pgm(b"P5\n2 2\n65535\n....").is_err());
        assert!(decode_pfm(b"Pf\n1 1\n1.0\n....").is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        match decode_pgm(b"P5\n2 2\n255\n...") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("{other:?}"),
        }
        assert!(decode_ppm(b"P6\n1 1\n255\n\x01\x02").is_err());
    }

    #[test]
    fn accepts_comments_in_header() {
        let t = decode_pgm(b"P5\n# made by hand\n1 1\n255\n\x07").unwrap();
        assert_eq!(t.data(), &[7.0]);
    }

    proptest! {
        #[test]
        fn ppm_and_pgm_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let mut s = seed | 1;
            let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; (s % 256) as f64 };
            let rgb = Tensor::from_fn(&[3, h, w], |_| next());
            prop_assert_eq!(decode_ppm(&encode_ppm(&rgb).unwrap()).unwrap(), rgb);
            let plane = Tensor::from_fn(&[h, w], |_| next());
            prop_assert_eq!(decode_pgm(&encode_pgm(&plane).unwrap()).unwrap(), plane);
        }

        #[test]
        fn pfm_round_trips_f32_values(vals in proptest::collection::vec(-1e6f32..1e6, 12)) {
            let plane = Tensor::new(vec![3, 4], vals.iter().map(|&v| v as f64).collect()).unwrap();
            prop_assert_eq!(decode_pfm(&encode_pfm(&plane).unwrap()).unwrap(), plane);
        }
    }
}

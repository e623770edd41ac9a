//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::path::Path;

use crate::error::{DesError, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    /// Offset of the first pixel byte.
    data_start: usize,
}

enum Kind {
    Ppm,
    Pgm,
}

impl Kind {
    fn magic(&self) -> &'static [u8; 2] {
        match self {
            Kind::Ppm => b"P6",
            Kind::Pgm => b"P5",
        }
    }

    fn err(&self, offset: usize, detail: impl Into<String>) -> DesError {
        let detail = detail.into();
        match self {
            Kind::Ppm => DesError::Ppm { offset, detail },
            Kind::Pgm => DesError::Pgm { offset, detail },
        }
    }
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            _ => return pos,
        }
    }
}

fn read_uint(kind: &Kind, bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_space_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(kind.err(start, format!("expected {what}")));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("digits are ASCII");
    let v = text
        .parse::<usize>()
        .map_err(|_| kind.err(start, format!("{what} `{text}` is out of range")))?;
    Ok((v, end))
}

fn parse_header(kind: &Kind, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(kind.err(0, "file too short for a magic number"));
    }
    if &bytes[..2] != kind.magic() {
        let found = String::from_utf8_lossy(&bytes[..2]);
        let hint = match (&bytes[..2], kind) {
            (b"P3", Kind::Ppm) => " (ASCII PPM is not supported; only binary P6)",
            (b"P2", Kind::Pgm) => " (ASCII PGM is not supported; only binary P5)",
            _ => "",
        };
        let magic = std::str::from_utf8(kind.magic()).expect("ASCII");
        return Err(kind.err(0, format!("expected magic {magic}, found `{found}`{hint}")));
    }
    let (width, p) = read_uint(kind, bytes, 2, "width")?;
    let (height, p) = read_uint(kind, bytes, p, "height")?;
    let (maxval, p) = read_uint(kind, bytes, p, "maxval")?;
    if width == 0 || height == 0 {
        return Err(kind.err(2, format!("image extent {width}×{height} is empty")));
    }
    if maxval != 255 {
        return Err(kind.err(p, format!("maxval {maxval} unsupported; only 255")));
    }
    match bytes.get(p) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(kind.err(p, "expected a single whitespace byte after maxval")),
    }
    Ok(Header {
        width,
        height,
        data_start: p + 1,
    })
}

fn payload<'a>(kind: &Kind, bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| kind.err(2, "image extent overflows"))?;
    let have = bytes.len() - h.data_start;
    if have < need {
        return Err(kind.err(
            bytes.len(),
            format!("pixel data truncated: need {need} bytes, found {have}"),
        ));
    }
    Ok(&bytes[h.data_start..h.data_start + need])
}

/// Decodes a P6 image into a `3×H×W` tensor with values in `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(&Kind::Ppm, bytes)?;
    let px = payload(&Kind::Ppm, bytes, &h, 3)?;
    let plane = h.width * h.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = rgb[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h.height, h.width], data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `3×H×W` tensor, clamping to `[0, 1]` and rounding to 8 bits.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(DesError::shape("write_ppm", format!("need 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(image.data()[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    parse_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Decodes a P5 image into `(height, width, bytes)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(&Kind::Pgm, bytes)?;
    let px = payload(&Kind::Pgm, bytes, &h, 1)?;
    Ok((h.height, h.width, px.to_vec()))
}

pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(DesError::shape(
            "write_pgm",
            format!("{} pixels for a {height}×{width} image", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// One channel of a feature map as an 8-bit image, min-max normalized.
pub fn channel_to_gray(map: &Tensor, channel: usize) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = map.chw()?;
    if channel >= c {
        return Err(DesError::shape("channel_to_gray", format!("channel {channel} of {c}")));
    }
    let plane = &map.data()[channel * h * w..(channel + 1) * h * w];
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok((h, w, plane.iter().map(|v| quantize((v - lo) / span)).collect()))
}

/// Draws a `thickness`-pixel outline of the normalized box
/// `[xmin, ymin, xmax, ymax]` onto a `3×H×W` image.
pub fn draw_rect(image: &mut Tensor, corners: [f64; 4], color: [f64; 3], thickness: usize) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(DesError::shape("draw_rect", format!("expected 3 channels, got {c}")));
    }
    let px = |v: f64, n: usize| ((v.clamp(0.0, 1.0) * n as f64).round() as usize).min(n - 1);
    let (x0, x1) = (px(corners[0], w), px(corners[2], w));
    let (y0, y1) = (px(corners[1], h), px(corners[3], h));
    let t = thickness.max(1);
    let data = image.data_mut();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let edge = x < x0 + t || x + t > x1 || y < y0 + t || y + t > y1;
            if edge {
                for (ch, &v) in color.iter().enumerate() {
                    data[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
    Ok(())
}

/// Mirrors a `C×H×W` tensor left to right.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = src[row + w - 1 - x];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Bilinear resampling to `out_h×out_w`, pixel centers aligned.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(DesError::shape("resize_bilinear", "target extent must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let sample = |src_len: usize, dst_len: usize, i: usize| {
        let pos = ((i as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..out_h {
            let (y0, y1, fy) = sample(h, out_h, y);
            for x in 0..out_w {
                let (x0, x1, fx) = sample(w, out_w, x);
                let top = src[base + y0 * w + x0] * (1.0 - fx) + src[base + y0 * w + x1] * fx;
                let bottom = src[base + y1 * w + x0] * (1.0 - fx) + src[base + y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_outline_only() {
        let mut img = Tensor::zeros([3, 10, 10]);
        draw_rect(&mut img, [0.2, 0.2, 0.8, 0.8], [1.0, 0.5, 0.0], 1).unwrap();
        assert_eq!(img.at3(0, 2, 2), 1.0);
        assert_eq!(img.at3(1, 8, 5), 0.5);
        assert_eq!(img.at3(0, 5, 5), 0.0);
        assert_eq!(img.at3(0, 1, 1), 0.0);
        assert!(draw_rect(&mut Tensor::zeros([1, 4, 4]), [0.0, 0.0, 1.0, 1.0], [1.0; 3], 1).is_err());
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn offset_of(e: DesError) -> usize {
        match e {
            DesError::Ppm { offset, .. } | DesError::Pgm { offset, .. } => offset,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn white_pixel() {
        let t = parse_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn comments_and_channel_order() {
        let t = parse_ppm(b"P6 # a comment\n2 # width\n1\n255\n\x00\x33\x66\x99\xcc\xff").unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 0.6, 0.2, 0.8, 0.4, 1.0]);
    }

    #[test]
    fn round_trip_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::from_fn([3, 7, 5], |_| rng.gen_range(0.0..1.0));
        let back = parse_ppm(&encode_ppm(&t).unwrap()).unwrap();
        let worst = t.sub(&back).unwrap().max_abs();
        assert!(worst <= 1.0 / 255.0, "{worst}");
    }

    #[test]
    fn rejects_ascii_variant() {
        let e = parse_ppm(b"P3\n1 1\n255\n255 255 255\n").unwrap_err();
        assert!(e.to_string().contains("ASCII"), "{e}");
        assert_eq!(offset_of(e), 0);
    }

    #[test]
    fn header_errors_carry_offsets() {
        assert_eq!(offset_of(parse_ppm(b"P6\n1 x\n255\n").unwrap_err()), 5);
        assert_eq!(offset_of(parse_ppm(b"P6\n1 1\n65535\n").unwrap_err()), 12);
        let e = parse_ppm(b"P6\n2 2\n255\n\x00\x00").unwrap_err();
        assert!(e.to_string().contains("truncated"));
        assert_eq!(offset_of(parse_ppm(b"P6\n0 1\n255\n").unwrap_err()), 2);
        assert_eq!(offset_of(parse_ppm(b"P").unwrap_err()), 0);
        assert_eq!(offset_of(parse_ppm(b"P6\n1 1\n255").unwrap_err()), 10);
    }

    #[test]
    fn pgm_round_trip() {
        let px: Vec<u8> = (0..12).map(|i| i * 20).collect();
        let (h, w, back) = parse_pgm(&encode_pgm(3, 4, &px).unwrap()).unwrap();
        assert_eq!((h, w, back), (3, 4, px));
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let t = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let f = flip_horizontal(&t).unwrap();
        assert_eq!(f.at3(1, 2, 0), t.at3(1, 2, 3));
        assert_eq!(flip_horizontal(&f).unwrap(), t);
    }

    #[test]
    fn resize_constant_and_identity() {
        let t = Tensor::full([3, 5, 9], 0.25);
        let r = resize_bilinear(&t, 4, 4).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let u = Tensor::from_fn([1, 2, 2], |i| i as f64);
        assert_eq!(resize_bilinear(&u, 2, 2).unwrap(), u);
    }
}

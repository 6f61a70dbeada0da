//! File formats: DTEN tensors and 8-bit PGM/PPM images.
//!
//! DTEN layout (little-endian): magic `DTEN`, `u8` version (1), `u8` dtype
//! (1 = f32), `u32` rank, `rank` x `u32` extents, then the row-major payload.
//!
//! PGM/PPM: binary `P5` (gray) or `P6` (RGB), maxval 255, one whitespace byte
//! after the header; comments (`#` to end of line) are accepted in the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DTEN_MAGIC: &[u8; 4] = b"DTEN";
pub const DTEN_VERSION: u8 = 1;
pub const DTEN_F32: u8 = 1;

pub fn encode_dten<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(DTEN_MAGIC);
    out.push(DTEN_VERSION);
    out.push(DTEN_F32);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64c() as f32).to_le_bytes());
    }
    out
}

pub fn decode_dten<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 10 || &bytes[..4] != DTEN_MAGIC {
        return Err(bad("missing DTEN magic"));
    }
    if bytes[4] != DTEN_VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTEN_F32 {
        return Err(bad(&format!("unsupported dtype {}", bytes[5])));
    }
    let u32_at = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| bad("truncated header"))
    };
    let ndim = u32_at(6)?;
    if ndim > 16 {
        return Err(bad(&format!("rank {ndim} is implausible")));
    }
    let shape = (0..ndim).map(|i| u32_at(10 + 4 * i)).collect::<Result<Vec<_>>>()?;
    let start = 10 + 4 * ndim;
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("extent overflow"))?;
    if bytes.len() != start + 4 * numel {
        return Err(bad(&format!("payload is {} bytes, shape {shape:?} needs {}", bytes.len() - start, 4 * numel)));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|b| T::from_f64c(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_dten<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_dten(t))
}

pub fn load_dten<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_dten(&read_bytes(path)?, path)
}

/// Encodes a `1 x H x W` or `3 x H x W` image in `[0, 1]` as P5 or P6.
pub fn encode_pnm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (magic, c, h, w) = match *image.shape() {
        [1, h, w] => ("P5", 1, h, w),
        [3, h, w] => ("P6", 3, h, w),
        ref s => return Err(Error::shape(format!("PNM needs 1 or 3 channels, got {s:?}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = d[(ch * h + y) * w + x].to_f64c();
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Decodes P5/P6 into a channel-first image scaled to `[0, 1]`.
pub fn decode_pnm<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let bad = |msg: String| Error::format(path, msg);
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let c = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(format!("unsupported magic '{other}' (P5/P6 only)"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| bad(format!("bad {what} '{t}'")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero-sized image".into()));
    }
    let start = pos + 1;
    let need = c * h * w;
    let payload = bytes.get(start..start + need).ok_or_else(|| bad(format!("payload shorter than {need} bytes")))?;
    let mut data = vec![T::zero(); need];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = T::from_f64c(payload[(y * w + x) * c + ch] as f64 / 255.0);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], data))
}

pub fn save_pnm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_pnm(image)?)
}

pub fn load_pnm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_pnm(&read_bytes(path)?, path)
}

/// Loads `.pgm`/`.ppm`/`.pnm` as PNM and `.dten` as a `C x H x W` tensor.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("dten") => {
            let t: Tensor<T> = load_dten(path)?;
            if t.ndim() != 3 {
                return Err(Error::format(path, format!("image tensor must be C x H x W, got {:?}", t.shape())));
            }
            Ok(t)
        }
        _ => load_pnm(path),
    }
}

pub fn save_image<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("dten") => save_dten(path, image),
        _ => save_pnm(path, image),
    }
}

/// Parses `key=value` lines, skipping blanks and `#` comments. Returns
/// `(line number, key, value)` triples.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config { line: n + 1, msg: format!("expected key=value, got '{line}'") })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config { line: n + 1, msg: "empty key".into() });
        }
        out.push((n + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dten_byte_layout() {
        let t = Tensor::<f32>::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode_dten(&t);
        let mut want = b"DTEN".to_vec();
        want.extend([1, 1, 2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(b, want);
        assert_eq!(decode_dten::<f32>(&b, Path::new("x")).unwrap(), t);
    }

    #[test]
    fn dten_rejects_corruption() {
        let t = Tensor::<f32>::ones(&[3]).unwrap();
        let mut b = encode_dten(&t);
        b.pop();
        assert!(decode_dten::<f32>(&b, Path::new("x")).is_err());
        let mut b = encode_dten(&t);
        b[5] = 2;
        assert!(decode_dten::<f32>(&b, Path::new("x")).is_err());
        assert!(decode_dten::<f32>(b"DTEX", Path::new("x")).is_err());
    }

    #[test]
    fn pnm_round_trip() {
        let data: Vec<f32> = (0..24).map(|k| (k * 10) as f32 / 255.0).collect();
        let t = Tensor::new(&[3, 2, 4], data).unwrap();
        let back: Tensor<f32> = decode_pnm(&encode_pnm(&t).unwrap(), Path::new("x")).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
        let g = Tensor::new(&[1, 1, 2], vec![0.0f32, 1.0]).unwrap();
        assert_eq!(encode_pnm(&g).unwrap(), b"P5\n2 1\n255\n\x00\xff".to_vec());
    }

    #[test]
    fn pnm_header_comments() {
        let b = b"P5\n# made by hand\n2 1 # size\n255\n\x00\x80";
        let t: Tensor<f64> = decode_pnm(b, Path::new("x")).unwrap();
        assert_eq!(t.shape(), [1, 1, 2]);
        assert!((t.data()[1] - 128.0 / 255.0).abs() < 1e-12);
        assert!(decode_pnm::<f32>(b"P2\n1 1\n255\n0", Path::new("x")).is_err());
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\n a = 1 \n\nb=x # tail\n").unwrap();
        assert_eq!(kv, vec![(2, "a".into(), "1".into()), (4, "b".into(), "x".into())]);
        match parse_key_values("a=1\nnope\n") {
            Err(Error::Config { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}

//! The VFIC clip container and PPM image export.
//!
//! VFIC layout (all integers little-endian):
//!   magic "VFIC" (4 bytes), u32 version = 1, u32 N, u32 H, u32 W, u32 C,
//!   u8 dtype (0 = 32-bit float), then N·C·H·W little-endian f32 values in
//!   [N][C][H][W] order. 25 header bytes total. The format is a frozen
//!   contract: readers in other languages may rely on every byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array4, ArrayView3};

use crate::error::{Error, FormatErrorKind, Result};

use super::Clip;

const MAGIC: &[u8; 4] = b"VFIC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 25;
/// Refuse absurd element counts before allocating.
const MAX_ELEMS: u64 = 1 << 31;

/// Write any `[N,C,H,W]` f32 tensor (clips, flow dumps, depth dumps).
pub fn write_tensor(path: &Path, data: &Array4<f32>) -> Result<()> {
    let (n, c, h, w) = {
        let s = data.shape();
        (s[0] as u32, s[1] as u32, s[2] as u32, s[3] as u32)
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&h.to_le_bytes());
    buf.extend_from_slice(&w.to_le_bytes());
    buf.extend_from_slice(&c.to_le_bytes());
    buf.push(DTYPE_F32);
    // Standard layout iteration is exactly [N][C][H][W] order.
    for &v in data.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Read any `[N,C,H,W]` f32 tensor.
pub fn read_tensor(path: &Path) -> Result<Array4<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::format(
            path,
            FormatErrorKind::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 },
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, FormatErrorKind::BadMagic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            FormatErrorKind::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 },
        ));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::format(path, FormatErrorKind::UnsupportedVersion(version)));
    }
    let (n, h, w, c) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let dtype = bytes[24];
    if dtype != DTYPE_F32 {
        return Err(Error::format(
            path,
            FormatErrorKind::Corrupt(format!("unknown dtype code {dtype}")),
        ));
    }
    let elems = n as u64 * c as u64 * h as u64 * w as u64;
    if elems == 0 || elems > MAX_ELEMS {
        return Err(Error::format(
            path,
            FormatErrorKind::Corrupt(format!("implausible element count {elems}")),
        ));
    }
    let expected = HEADER_LEN as u64 + elems * 4;
    match (bytes.len() as u64).cmp(&expected) {
        std::cmp::Ordering::Less => {
            return Err(Error::format(
                path,
                FormatErrorKind::Truncated { expected, found: bytes.len() as u64 },
            ))
        }
        std::cmp::Ordering::Greater => {
            return Err(Error::format(
                path,
                FormatErrorKind::Corrupt(format!(
                    "{} trailing bytes",
                    bytes.len() as u64 - expected
                )),
            ))
        }
        std::cmp::Ordering::Equal => {}
    }
    let mut values = Vec::with_capacity(elems as usize);
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array4::from_shape_vec((n as usize, c as usize, h as usize, w as usize), values)
        .map_err(|e| Error::format(path, FormatErrorKind::Corrupt(e.to_string())))
}

/// Write a clip's frames. Metadata is not serialized; ground-truth flow and
/// depth travel as sidecar tensors where needed.
pub fn write_clip(clip: &Clip, path: &Path) -> Result<()> {
    write_tensor(path, &clip.frames)
}

/// Read a clip (a `[N>=2, 3, H, W]` tensor in [0,1]).
pub fn read_clip(path: &Path) -> Result<Clip> {
    let frames = read_tensor(path)?;
    let s = frames.shape();
    if s[0] < 2 || s[1] != 3 {
        return Err(Error::format(
            path,
            FormatErrorKind::Corrupt(format!("clip shape {s:?} is not [N>=2, 3, H, W]")),
        ));
    }
    if frames.iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&(v as f64))) {
        return Err(Error::format(
            path,
            FormatErrorKind::Corrupt("clip values outside [0,1]".into()),
        ));
    }
    Clip::new(frames.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Export one `[3,H,W]` frame as binary PPM. Channel bytes are
/// round-half-up of `v · 255`.
pub fn export_ppm(frame: &ArrayView3<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    if c != 3 {
        return Err(Error::shape("export_ppm", format!("expected 3 channels, got {c}")));
    }
    let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("P6\n{w} {h}\n255\n");
    let mut buf = Vec::with_capacity(header.len() + 3 * h * w);
    buf.extend_from_slice(header.as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = frame[[ch, y, x]] as f64;
                let byte = (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
                buf.push(byte);
            }
        }
    }
    out.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the dir so the file outlives this helper; tests are short.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    fn random_tensor(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let t = random_tensor(1, (9, 3, 16, 16));
        let path = tmpfile("clip.vfic");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn file_size_matches_header_arithmetic() {
        let t = random_tensor(2, (9, 3, 64, 64));
        let path = tmpfile("size.vfic");
        write_tensor(&path, &t).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 25 + 9 * 3 * 64 * 64 * 4);
    }

    #[test]
    fn corrupt_magic_truncation_and_version_are_distinct_errors() {
        let t = random_tensor(3, (2, 3, 8, 8));
        let path = tmpfile("bad.vfic");
        write_tensor(&path, &t).unwrap();
        let original = std::fs::read(&path).unwrap();

        let mut bad_magic = original.clone();
        bad_magic[2] ^= 0xFF;
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            read_tensor(&path).unwrap_err(),
            Error::Format { kind: FormatErrorKind::BadMagic, .. }
        ));

        std::fs::write(&path, &original[..original.len() / 2]).unwrap();
        assert!(matches!(
            read_tensor(&path).unwrap_err(),
            Error::Format { kind: FormatErrorKind::Truncated { .. }, .. }
        ));

        let mut bad_version = original.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            read_tensor(&path).unwrap_err(),
            Error::Format { kind: FormatErrorKind::UnsupportedVersion(9), .. }
        ));

        let mut bad_dtype = original.clone();
        bad_dtype[24] = 7;
        std::fs::write(&path, &bad_dtype).unwrap();
        assert!(matches!(
            read_tensor(&path).unwrap_err(),
            Error::Format { kind: FormatErrorKind::Corrupt(_), .. }
        ));

        let mut trailing = original.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(matches!(
            read_tensor(&path).unwrap_err(),
            Error::Format { kind: FormatErrorKind::Corrupt(_), .. }
        ));
    }

    #[test]
    fn ppm_header_and_rounding_are_exact() {
        // 2x2 frame with hand-computed bytes. round_half_up(v*255) applied
        // to the stored f32 values:
        //   0.0 -> 0, 0.5 -> 128, 1.0 -> 255,
        //   0.1 -> 26, 0.2 -> 51, 0.3 -> 77,
        //   0.9 -> 229 (f32(0.9) is just under 0.9, so 229.49999 + 0.5
        //   stays below 230), 0.25 -> 64 (63.75 + 0.5), 0.75 -> 191.
        let mut frame = Array3::<f32>::zeros((3, 2, 2));
        let vals = [
            [0.0, 0.5, 1.0],  // pixel (0,0)
            [0.1, 0.2, 0.3],  // pixel (0,1)
            [0.9, 0.25, 0.75], // pixel (1,0)
            [1.0, 0.0, 0.5],  // pixel (1,1)
        ];
        for (p, rgb) in vals.iter().enumerate() {
            let (y, x) = (p / 2, p % 2);
            for ch in 0..3 {
                frame[[ch, y, x]] = rgb[ch] as f32;
            }
        }
        let path = tmpfile("f.ppm");
        export_ppm(&frame.view(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let expect: [u8; 12] = [0, 128, 255, 26, 51, 77, 229, 64, 191, 255, 0, 128];
        assert_eq!(&bytes[header.len()..], &expect);
    }

    #[test]
    fn clip_reader_validates_shape_and_range() {
        let path = tmpfile("notclip.vfic");
        // C=2 is a valid tensor but not a clip.
        let t = random_tensor(4, (4, 2, 8, 8));
        write_tensor(&path, &t).unwrap();
        assert!(read_clip(&path).is_err());
        assert!(read_tensor(&path).is_ok());

        // Out-of-range values are rejected as clips.
        let mut t = random_tensor(5, (4, 3, 8, 8));
        t[[0, 0, 0, 0]] = 2.0;
        write_tensor(&path, &t).unwrap();
        assert!(read_clip(&path).is_err());
    }
}

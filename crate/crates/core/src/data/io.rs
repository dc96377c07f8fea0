//! 8-bit image files: NetPBM (P2/P3/P5/P6) by hand, PNG through `image`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded 8-bit raster, `channels` of 1 (gray) or 3 (RGB), interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    /// Planar `[C,H,W]` tensor scaled to `[0,1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (c, h, w) = (self.channels, self.height, self.width);
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            self.pixels[p * c + ch] as f32 / 255.0
        })
    }

    /// From a `[C,H,W]` tensor in `[0,1]` (values are rounded and clamped).
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        if t.ndim() != 3 || !(t.dim(0) == 1 || t.dim(0) == 3) {
            return Err(Error::shape("raster", t.shape(), &[3, 0, 0]));
        }
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        let mut pixels = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                let v = t.data()[ch * h * w + p];
                pixels[p * c + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(Raster {
            width: w,
            height: h,
            channels: c,
            pixels,
        })
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        what: "image",
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Whitespace-separated header tokens with `#` comments skipped.
struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Option<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.bytes[start..self.pos]).ok())?
    }

    fn number(&mut self) -> Option<usize> {
        self.next()?.parse().ok()
    }
}

pub fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let mut tk = Tokens { bytes, pos: 0 };
    let magic = tk.next().ok_or_else(|| format_err(path, "empty file"))?;
    let (channels, binary) = match magic {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        m => return Err(format_err(path, format!("unsupported NetPBM magic `{m}`"))),
    };
    let mut header = || tk.number().ok_or_else(|| format_err(path, "bad header"));
    let (width, height, maxval) = (header()?, header()?, header()?);
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("maxval {maxval} is not 8-bit")));
    }
    let n = width * height * channels;
    let scale = |v: usize| ((v * 255 + maxval / 2) / maxval) as u8;
    let pixels = if binary {
        // one whitespace byte separates the header from the raster
        let start = tk.pos + 1;
        let raw = bytes
            .get(start..start + n)
            .ok_or_else(|| format_err(path, "truncated raster"))?;
        raw.iter().map(|&b| scale(b as usize)).collect()
    } else {
        (0..n)
            .map(|_| tk.number().filter(|&v| v <= maxval).map(scale))
            .collect::<Option<Vec<u8>>>()
            .ok_or_else(|| format_err(path, "bad ASCII raster"))?
    };
    Ok(Raster {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn encode_netpbm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Read a PPM/PGM/PNG file; PNGs are converted to RGB or gray as `channels` asks.
pub fn read_raster(path: &Path, channels: usize) -> Result<Raster> {
    let r = if is_png(path) {
        let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = if channels == 3 {
            img.into_rgb8().into_raw()
        } else {
            img.into_luma8().into_raw()
        };
        Raster {
            width: w,
            height: h,
            channels,
            pixels,
        }
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_netpbm(&bytes, path)?
    };
    if r.channels != channels {
        return Err(format_err(path, format!("expected {channels} channels, found {}", r.channels)));
    }
    Ok(r)
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if is_png(path) {
        let color = if r.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer(path, &r.pixels, r.width as u32, r.height as u32, color)
            .map_err(|e| format_err(path, e.to_string()))
    } else {
        fs::write(path, encode_netpbm(r)).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_and_binary_agree() {
        let p = Path::new("t.pgm");
        let ascii = b"P2\n# comment\n3 2\n255\n0 1 2\n250 254 255\n";
        let r = decode_netpbm(ascii, p).unwrap();
        assert_eq!((r.width, r.height, r.channels), (3, 2, 1));
        assert_eq!(r.pixels, vec![0, 1, 2, 250, 254, 255]);
        assert_eq!(decode_netpbm(&encode_netpbm(&r), p).unwrap(), r);
    }

    #[test]
    fn maxval_rescales() {
        let r = decode_netpbm(b"P2 2 1 1 0 1", Path::new("m.pgm")).unwrap();
        assert_eq!(r.pixels, vec![0, 255]);
        assert!(decode_netpbm(b"P5 1 1 65535 ab", Path::new("x.pgm")).is_err());
        assert!(decode_netpbm(b"P6 4 4 255\n", Path::new("x.ppm")).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Raster {
            width: 4,
            height: 3,
            channels: 3,
            pixels: (0..36).map(|i| (i * 7) as u8).collect(),
        };
        for name in ["a.ppm", "a.png"] {
            let p = dir.path().join(name);
            write_raster(&p, &rgb).unwrap();
            assert_eq!(read_raster(&p, 3).unwrap(), rgb);
        }
        let t = rgb.to_tensor();
        assert_eq!(Raster::from_tensor(&t).unwrap(), rgb);
        let missing = dir.path().join("none.pgm");
        match read_raster(&missing, 1) {
            Err(Error::Io { path, .. }) => assert_eq!(path, missing),
            r => panic!("{r:?}"),
        }
    }
}

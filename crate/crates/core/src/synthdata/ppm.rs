//! Binary PPM (P6) reading and writing.

use std::path::Path;

use crate::error::{EivenError, Result};
use crate::vision::ImageGrid;

pub fn encode_ppm(img: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(EivenError::Input("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    if fields[0] != "P6" {
        return Err(EivenError::Input(format!("unsupported PPM magic {:?}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| EivenError::Input(format!("bad PPM header field {s:?}")))
    };
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(EivenError::Input(format!(
            "only 8-bit PPM is supported, got maxval {max}"
        )));
    }
    let raster = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| EivenError::Input("truncated PPM raster".into()))?;
    ImageGrid::new(w, h, raster.to_vec())
}

pub fn write_ppm(path: &Path, img: &ImageGrid) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| EivenError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageGrid> {
    let bytes = std::fs::read(path).map_err(|e| EivenError::io(path, e))?;
    decode_ppm(&bytes)
}

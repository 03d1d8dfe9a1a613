//! Binary portable pixmaps (P6) and graymaps (P5), 8-bit only.

use std::path::Path;

use crate::error::{NomError, Result};
use crate::fsutil::write_atomic;
use crate::nominator::NominationMap;
use crate::tensor::Tensor;

/// Legend colours, indexed by candidate channel (local, CNN, global).
pub const NOMINATION_COLORS: [[u8; 3]; 3] = [[0, 255, 0], [255, 0, 0], [0, 0, 255]];

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode("P6", width, height, 3, rgb)
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    encode("P5", width, height, 1, gray)
}

fn encode(magic: &str, width: usize, height: usize, depth: usize, px: &[u8]) -> Result<Vec<u8>> {
    if px.len() != width * height * depth || width == 0 || height == 0 {
        return Err(NomError::Image(format!(
            "{width}x{height}x{depth} image needs {} bytes, got {}",
            width * height * depth,
            px.len()
        )));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(px);
    Ok(out)
}

pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Parses a P5 or P6 file with maxval at most 255.
pub fn decode(bytes: &[u8]) -> Result<Pixmap> {
    let mut pos = 0usize;
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
                None => return Err(NomError::Image("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(NomError::Image(format!("unsupported magic `{m}`"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| NomError::Image(format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(NomError::Image(format!("maxval {maxval} not in 1..=255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height * channels;
    let data = bytes
        .get(start..start + need)
        .ok_or_else(|| NomError::Image("raster shorter than header claims".into()))?
        .to_vec();
    if bytes.len() != start + need {
        return Err(NomError::Image("trailing bytes after raster".into()));
    }
    Ok(Pixmap {
        width,
        height,
        channels,
        data,
    })
}

/// `[H, W, 3]` image in `[0, 1]` from a P6 file.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| NomError::io(path, e))?;
    let p = decode(&bytes)?;
    if p.channels != 3 {
        return Err(NomError::Image(format!("{} is not a P6 pixmap", path.display())));
    }
    Tensor::new(
        &[p.height, p.width, 3],
        p.data.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

/// One pure legend colour per location of the hard map.
pub fn nomination_rgb(map: &NominationMap) -> Vec<u8> {
    map.choices()
        .into_iter()
        .flat_map(|c| NOMINATION_COLORS[c])
        .collect()
}

pub fn write_nomination_map(map: &NominationMap, path: &Path) -> Result<()> {
    let s = map.hard.shape();
    write_atomic(path, &encode_ppm(s[1], s[0], &nomination_rgb(map))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let px: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let bytes = encode_ppm(3, 2, &px).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let p = decode(&bytes).unwrap();
        assert_eq!((p.width, p.height, p.channels), (3, 2, 3));
        assert_eq!(p.data, px);
    }

    #[test]
    fn pgm_with_comments_parses() {
        let mut bytes = b"P5\n# made by hand\n2 2 # dims\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255]);
        let p = decode(&bytes).unwrap();
        assert_eq!((p.width, p.height, p.channels), (2, 2, 1));
        assert_eq!(p.data, vec![0, 64, 128, 255]);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(decode(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P6\n1 1\n65535\n\x00\x00\x00").is_err());
        assert!(encode_ppm(2, 2, &[0; 5]).is_err());
    }

    #[test]
    fn legend_colours_are_pure_and_distinct() {
        for (i, a) in NOMINATION_COLORS.iter().enumerate() {
            assert_eq!(a.iter().filter(|&&v| v == 255).count(), 1);
            assert_eq!(a.iter().filter(|&&v| v == 0).count(), 2);
            for b in &NOMINATION_COLORS[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }
}

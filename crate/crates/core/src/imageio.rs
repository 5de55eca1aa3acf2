//! Frame and mask files: GMFV1 tensors and binary PPM/PGM.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{io, Tensor};

/// Regular files in `dir` with one of `exts`, in lexicographic order.
pub fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if ok && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Load a frame as `3×H×W` in `[0, 1]`. Single-channel sources are
/// replicated across the three channels.
pub fn load_frame(path: &Path) -> Result<Tensor> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let t = match ext.as_str() {
        "ppm" | "pgm" => read_pnm(path)?,
        _ => io::load(path)?,
    };
    to_three_channels(t).map_err(|e| Error::format(path, e.to_string()))
}

/// Lift `H×W`, `1×H×W` or `3×H×W` to `3×H×W`.
pub fn to_three_channels(t: Tensor) -> Result<Tensor> {
    match *t.shape() {
        [3, _, _] => Ok(t),
        [1, h, w] | [h, w] => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![3, h, w], data)
        }
        _ => Err(dim_err!("frame must be H×W, 1×H×W or 3×H×W, got {:?}", t.shape())),
    }
}

/// All frames of a video directory (`.gmf`, `.ppm`, `.pgm`), lexicographic order.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<Tensor>> {
    sorted_files(dir, &["gmf", "ppm", "pgm"])?
        .iter()
        .map(|p| load_frame(p))
        .collect()
}

fn pnm_token<R: BufRead>(r: &mut R) -> std::io::Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if c == '#' {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

/// Binary PGM (P5) or PPM (P6) with maxval ≤ 255, as `C×H×W` in `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |reason: &str| Error::format(path, reason);
    let magic = pnm_token(&mut r).map_err(|_| fmt("missing header"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(fmt("not a binary PGM/PPM")),
    };
    let mut num = || -> Result<usize> {
        pnm_token(&mut r)
            .map_err(|_| fmt("truncated header"))?
            .parse()
            .map_err(|_| fmt("bad header number"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval == 0 || maxval > 255 {
        return Err(fmt("only 8-bit maxval is supported"));
    }
    let mut raw = vec![0u8; w * h * channels];
    r.read_exact(&mut raw).map_err(|_| fmt("truncated pixel data"))?;
    // interleaved → planar
    let mut data = vec![0.0; raw.len()];
    for (i, &b) in raw.iter().enumerate() {
        let (px, c) = (i / channels, i % channels);
        data[c * w * h + px] = b as f64 / maxval as f64;
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Write a `1×H×W`/`H×W` tensor as P5 or a `3×H×W` tensor as P6.
pub fn write_pnm(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = match *t.shape() {
        [h, w] => (1, h, w),
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => return Err(dim_err!("cannot write {:?} as PGM/PPM", t.shape())),
    };
    let mut buf = format!("{}\n{} {}\n255\n", if c == 1 { "P5" } else { "P6" }, w, h).into_bytes();
    for px in 0..h * w {
        for ch in 0..c {
            buf.push((t.data()[ch * h * w + px] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Boolean mask from a PGM file (nonzero pixels are set).
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let t = read_pnm(path)?;
    match *t.shape() {
        [1, h, w] => Ok((h, w, t.data().iter().map(|&v| v > 0.0).collect())),
        _ => Err(Error::format(path, "mask must be single-channel PGM")),
    }
}

pub fn write_mask(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let data = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_pnm(path, &Tensor::new(vec![1, height, width], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_and_gray_replication() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Tensor::new(vec![3, 1, 2], vec![0.0, 1.0, 0.2, 0.4, 1.0, 0.0]).unwrap();
        let p = dir.path().join("a.ppm");
        write_pnm(&p, &rgb).unwrap();
        let back = load_frame(&p).unwrap();
        for (a, b) in back.data().iter().zip(rgb.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
        let g = dir.path().join("b.pgm");
        write_mask(&g, 2, 2, &[true, false, false, true]).unwrap();
        let frame = load_frame(&g).unwrap();
        assert_eq!(frame.shape(), &[3, 2, 2]);
        assert_eq!(&frame.data()[8..], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(read_mask(&g).unwrap().2, vec![true, false, false, true]);
        let files = sorted_files(dir.path(), &["pgm", "ppm"]).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[0] < files[1]);
    }

    #[test]
    fn rejects_ascii_pnm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, b"P2\n1 1\n255\n7\n").unwrap();
        assert!(matches!(read_pnm(&p), Err(Error::Format { .. })));
    }
}

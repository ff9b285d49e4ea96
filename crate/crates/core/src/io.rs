//! On-disk formats: raster images, residual logs, key=value manifests.
//!
//! A raster is a raw little-endian f32 row-major payload. Its dimensions live
//! in a sidecar text header `<path>.hdr` containing a single line
//! `raster <width> <height>` (plus a trailing `<depth>` for volumes), so the
//! payload byte count is exactly 4 * width * height * depth.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{io_err, Error, Result};
use crate::image::Image;

pub fn header_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

pub fn write_raster(path: &Path, image: &Image) -> Result<()> {
    let header = if image.depth() == 1 {
        format!("raster {} {}\n", image.width(), image.height())
    } else {
        format!(
            "raster {} {} {}\n",
            image.width(),
            image.height(),
            image.depth()
        )
    };
    fs::write(header_path(path), header).map_err(|e| io_err(header_path(path), e))?;
    let mut payload = Vec::with_capacity(image.len() * 4);
    for &v in image.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, payload).map_err(|e| io_err(path, e))
}

pub fn read_raster(path: &Path) -> Result<Image> {
    let hdr = header_path(path);
    let text = fs::read_to_string(&hdr).map_err(|e| io_err(&hdr, e))?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    let dims: Vec<usize> = match fields.as_slice() {
        ["raster", rest @ ..] if rest.len() == 2 || rest.len() == 3 => rest
            .iter()
            .map(|t| {
                t.parse::<usize>().map_err(|_| Error::Format {
                    path: hdr.clone(),
                    detail: format!("bad dimension {t:?}"),
                })
            })
            .collect::<Result<_>>()?,
        _ => {
            return Err(Error::Format {
                path: hdr,
                detail: "expected header `raster <width> <height> [depth]`".into(),
            })
        }
    };
    let (w, h, d) = (dims[0], dims[1], *dims.get(2).unwrap_or(&1));
    if w == 0 || h == 0 || d == 0 {
        return Err(Error::Format {
            path: hdr,
            detail: "zero dimension".into(),
        });
    }
    let payload = fs::read(path).map_err(|e| io_err(path, e))?;
    let expected = w * h * d * 4;
    if payload.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!(
                "payload is {} bytes, header implies {expected}",
                payload.len()
            ),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Image::from_vec_3d(w, h, d, data))
}

/// Writes the residual log as CSV: header line, then one row per iteration
/// with both residuals in scientific notation at 10 fractional digits
/// (11 significant), enough to reproduce the f64 comparisons downstream.
pub fn write_residual_csv(path: &Path, rows: &[(usize, f64, f64)]) -> Result<()> {
    let mut out = String::from("iteration,primal_residual,dual_residual\n");
    for &(k, primal, dual) in rows {
        out.push_str(&format!("{k},{primal:.10e},{dual:.10e}\n"));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Flat `key=value` text used by manifests and resolved configs.
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for (k, v) in pairs {
        writeln!(f, "{k}={v}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn parse_kv(text: &str) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn raster_round_trip_preserves_f32_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.raster");
        let img = Image::from_vec(2, 2, vec![0.0, 1.5, -2.25, 0.0009765625]);
        write_raster(&path, &img).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 16);
        assert_eq!(
            fs::read_to_string(header_path(&path)).unwrap(),
            "raster 2 2\n"
        );
        let back = read_raster(&path).unwrap();
        assert_eq!(back.shape(), (2, 2, 1));
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn raster_volume_header_has_depth() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.raster");
        let img = Image::zeros_3d(2, 3, 4);
        write_raster(&path, &img).unwrap();
        assert_eq!(
            fs::read_to_string(header_path(&path)).unwrap(),
            "raster 2 3 4\n"
        );
        assert_eq!(read_raster(&path).unwrap().shape(), (2, 3, 4));
    }

    #[test]
    fn raster_size_mismatch_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.raster");
        fs::write(header_path(&path), "raster 4 4\n").unwrap();
        fs::write(&path, vec![0u8; 63]).unwrap();
        match read_raster(&path) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("63"), "{detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn residual_csv_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("residuals.csv");
        write_residual_csv(&path, &[(1, 0.5, 0.0), (2, 1.23e-7, f64::INFINITY)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,primal_residual,dual_residual");
        assert_eq!(lines[1], "1,5.0000000000e-1,0.0000000000e0");
        assert!(lines[2].starts_with("2,1.2300000000e-7,"));
        assert!(lines[2].ends_with("inf"));
    }

    #[test]
    fn kv_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let pairs = vec![
            ("seed".to_string(), "42".to_string()),
            ("kind".to_string(), "superellipse".to_string()),
        ];
        write_kv(&path, &pairs).unwrap();
        let back = parse_kv(&fs::read_to_string(&path).unwrap());
        assert_eq!(back, pairs);
    }
}

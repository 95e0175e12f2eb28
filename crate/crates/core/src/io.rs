//! File formats: DLB1 feature matrices, CSV, binary PGM, atomic writes.
//!
//! DLB1 layout: magic `DLB1`, `dims: u32 LE`, `count: u32 LE`, then
//! `count * dims` f64 LE values, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DLB1_MAGIC: &[u8; 4] = b"DLB1";

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_dlb1(x: &Array2<f64>) -> Vec<u8> {
    let (count, dims) = x.dim();
    let mut out = Vec::with_capacity(12 + 8 * count * dims);
    out.extend_from_slice(DLB1_MAGIC);
    out.extend_from_slice(&(dims as u32).to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for v in x.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dlb1(path: &Path, bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 12 || &bytes[..4] != DLB1_MAGIC {
        return Err(Error::format(path, "missing DLB1 header"));
    }
    let dims = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != 8 * dims * count {
        return Err(Error::format(
            path,
            format!(
                "header says {count} x {dims} values, body holds {} bytes",
                body.len()
            ),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((count, dims), values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_dlb1(path: &Path, x: &Array2<f64>) -> Result<()> {
    atomic_write(path, &encode_dlb1(x))
}

/// CSV with an optional `# ` comment block and one header row.
pub fn encode_csv(comment: Option<&str>, header: &[&str], x: &Array2<f64>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for row in x.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Parse numeric CSV. `#` lines are skipped and one non-numeric header row
/// is allowed.
pub fn decode_csv(path: &Path, text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seen_header = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if rows.is_empty() && !seen_header => seen_header = true,
            Err(e) => {
                return Err(Error::format(path, format!("line {}: {e}", lineno + 1)));
            }
        }
    }
    let dims = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|r| r.len() != dims) {
        return Err(Error::format(
            path,
            format!("row {bad} has a different width"),
        ));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, dims), rows.into_iter().flatten().collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Read a feature matrix, DLB1 or CSV by content.
pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(DLB1_MAGIC) {
        return decode_dlb1(path, &bytes);
    }
    let text =
        String::from_utf8(bytes).map_err(|_| Error::format(path, "neither DLB1 nor UTF-8 CSV"))?;
    decode_csv(path, &text)
}

/// Write DLB1 when the extension is `.bin` or `.dlb`, CSV otherwise.
pub fn write_features(path: &Path, comment: Option<&str>, x: &Array2<f64>) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("dlb") => write_dlb1(path, x),
        _ => {
            let header: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            atomic_write(path, encode_csv(comment, &header, x).as_bytes())
        }
    }
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Tile `side x side` images (rows of `x`, values in `[-1, 1]`) into a
/// square-ish grid and encode as binary PGM.
pub fn encode_pgm_grid(x: &Array2<f64>, side: usize, comment: Option<&str>) -> Result<Vec<u8>> {
    if x.ncols() != side * side {
        return Err(Error::shape(format!(
            "rows hold {} values, {side}x{side} images need {}",
            x.ncols(),
            side * side
        )));
    }
    let n = x.nrows().max(1);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (w, h) = (cols * side, rows * side);
    let mut pixels = vec![0u8; w * h];
    for (k, img) in x.rows().into_iter().enumerate() {
        let (gr, gc) = (k / cols, k % cols);
        for i in 0..side {
            for j in 0..side {
                pixels[(gr * side + i) * w + gc * side + j] = to_byte(img[i * side + j]);
            }
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"P5\n");
    if let Some(c) = comment {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Decoded binary PGM.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<Pgm> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P5" {
        return Err(Error::format(path, "only binary PGM (P5) is supported"));
    }
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad PGM header field {s:?}")))
    };
    let width = num(token(bytes)?)?;
    let height = num(token(bytes)?)?;
    let maxval = num(token(bytes)?)?;
    if maxval != 255 {
        return Err(Error::format(path, "PGM maxval must be 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let raster = bytes
        .get(start..start + width * height)
        .ok_or_else(|| Error::format(path, "PGM raster is truncated"))?;
    Ok(Pgm {
        width,
        height,
        pixels: raster.to_vec(),
    })
}

/// Cut a PGM grid into `side x side` tiles, row-major over the grid, each
/// flattened row-major and mapped to the lattice `k / 127.5 - 1`.
pub fn read_pgm_tiles(path: &Path, side: usize) -> Result<Array2<f64>> {
    let pgm = decode_pgm(path, &read_bytes(path)?)?;
    if side == 0 || pgm.width % side != 0 || pgm.height % side != 0 {
        return Err(Error::format(
            path,
            format!(
                "{}x{} is not a grid of {side}x{side} tiles",
                pgm.width, pgm.height
            ),
        ));
    }
    let (cols, rows) = (pgm.width / side, pgm.height / side);
    let mut x = Array2::zeros((cols * rows, side * side));
    for gr in 0..rows {
        for gc in 0..cols {
            let k = gr * cols + gc;
            for i in 0..side {
                for j in 0..side {
                    let p = pgm.pixels[(gr * side + i) * pgm.width + gc * side + j];
                    x[[k, i * side + j]] = p as f64 / 127.5 - 1.0;
                }
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn dlb1_layout_is_fixed() {
        let x = array![[1.0, -2.5], [0.0, 3.0], [4.0, 5.0]];
        let bytes = encode_dlb1(&x);
        assert_eq!(&bytes[..4], b"DLB1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[20..28], &(-2.5f64).to_le_bytes());
        assert_eq!(bytes.len(), 12 + 6 * 8);
    }

    #[test]
    fn dlb1_rejects_truncation() {
        let mut bytes = encode_dlb1(&array![[1.0, 2.0]]);
        bytes.pop();
        assert!(decode_dlb1(Path::new("x"), &bytes).is_err());
    }

    proptest! {
        #[test]
        fn dlb1_round_trips(values in proptest::collection::vec(-1e6f64..1e6, 1..40), dims in 1usize..5) {
            let n = values.len() / dims;
            prop_assume!(n > 0);
            let x = Array2::from_shape_vec((n, dims), values[..n * dims].to_vec()).unwrap();
            prop_assert_eq!(decode_dlb1(Path::new("x"), &encode_dlb1(&x)).unwrap(), x);
        }

        #[test]
        fn csv_round_trips(values in proptest::collection::vec(-1e6f64..1e6, 2..40)) {
            let n = values.len() / 2;
            let x = Array2::from_shape_vec((n, 2), values[..n * 2].to_vec()).unwrap();
            let text = encode_csv(Some("config: seed=1"), &["a", "b"], &x);
            prop_assert_eq!(decode_csv(Path::new("x"), &text).unwrap(), x);
        }
    }

    #[test]
    fn pgm_tiles_round_trip_on_lattice() {
        let dir = tempfile::tempdir().unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| {
            ((i * 4 + j) * 13 % 256) as f64 / 127.5 - 1.0
        });
        let bytes = encode_pgm_grid(&x, 2, Some("samples")).unwrap();
        let path = dir.path().join("grid.pgm");
        atomic_write(&path, &bytes).unwrap();
        let back = read_pgm_tiles(&path, 2).unwrap();
        // 5 images fill a 3x2 grid; the sixth tile is blank padding.
        assert_eq!(back.nrows(), 6);
        for i in 0..5 {
            for j in 0..4 {
                assert!((back[[i, j]] - x[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}

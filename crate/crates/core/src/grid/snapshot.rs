//! Field snapshot container and CSV exports.
//!
//! Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header,
//! then the payload as little-endian (re, im) pairs in the stated precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Grid, GridSpec, C64};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ALSNAP\0\x01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Complex64,
    Complex128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub grid: GridSpec,
    /// Simulation time in s.
    pub time: f64,
    pub component: String,
    pub units: String,
    pub precision: Precision,
    pub len: usize,
}

pub fn write_snapshot(path: &Path, grid: &Grid, time: f64, component: &str, precision: Precision, field: &[C64]) -> Result<()> {
    if field.len() != grid.len() {
        return Err(Error::Precondition("snapshot field does not match grid".into()));
    }
    let header = SnapshotHeader {
        grid: grid.spec().clone(),
        time,
        component: component.to_string(),
        units: "m^-3/2".into(),
        precision,
        len: field.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for c in field {
        match precision {
            Precision::Complex128 => {
                w.write_all(&c.re.to_le_bytes()).map_err(io)?;
                w.write_all(&c.im.to_le_bytes()).map_err(io)?;
            }
            Precision::Complex64 => {
                w.write_all(&(c.re as f32).to_le_bytes()).map_err(io)?;
                w.write_all(&(c.im as f32).to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn read_snapshot(path: &Path) -> Result<(SnapshotHeader, Vec<C64>)> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::parse(path, "not a snapshot file"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let hlen = u64::from_le_bytes(len) as usize;
    if hlen > 1 << 24 {
        return Err(Error::parse(path, "snapshot header too large"));
    }
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json).map_err(io)?;
    let header: SnapshotHeader = serde_json::from_slice(&json).map_err(|e| Error::parse(path, e))?;
    if header.len != header.grid.len() {
        return Err(Error::parse(path, "payload length does not match grid"));
    }
    let mut field = Vec::with_capacity(header.len);
    match header.precision {
        Precision::Complex128 => {
            let mut buf = [0u8; 16];
            for _ in 0..header.len {
                r.read_exact(&mut buf).map_err(io)?;
                let re = f64::from_le_bytes(buf[..8].try_into().unwrap());
                let im = f64::from_le_bytes(buf[8..].try_into().unwrap());
                field.push(C64::new(re, im));
            }
        }
        Precision::Complex64 => {
            let mut buf = [0u8; 8];
            for _ in 0..header.len {
                r.read_exact(&mut buf).map_err(io)?;
                let re = f32::from_le_bytes(buf[..4].try_into().unwrap());
                let im = f32::from_le_bytes(buf[4..].try_into().unwrap());
                field.push(C64::new(re as f64, im as f64));
            }
        }
    }
    Ok((header, field))
}

/// Node indices of the line through the lattice centre along `axis`.
pub fn axis_line(grid: &Grid, axis: usize) -> Vec<usize> {
    let shape = grid.shape();
    let mut centre = shape.map(|n| n / 2);
    if grid.is_cylindrical() {
        centre[0] = 0;
    }
    (0..shape[axis])
        .map(|j| {
            let mut i = centre;
            i[axis] = j;
            grid.flat_index(i)
        })
        .collect()
}

/// Writes coordinate (um), real and imaginary parts and density along an axis through the centre.
pub fn write_axis_cut(path: &Path, grid: &Grid, field: &[C64], axis: usize) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "coord_um,re,im,density").map_err(io)?;
    for idx in axis_line(grid, axis) {
        let c = field[idx];
        writeln!(w, "{:.6},{:.9e},{:.9e},{:.9e}", grid.point(idx)[axis] * 1e6, c.re, c.im, c.norm_sqr()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes a row-major matrix with a header row of column coordinates and a
/// leading column of row coordinates.
pub fn write_matrix_csv(path: &Path, rows: &[f64], cols: &[f64], values: &[f64]) -> Result<()> {
    if values.len() != rows.len() * cols.len() {
        return Err(Error::Precondition("matrix shape mismatch".into()));
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write!(w, "row\\col").map_err(io)?;
    for c in cols {
        write!(w, ",{c:.6e}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (i, r) in rows.iter().enumerate() {
        write!(w, "{r:.6e}").map_err(io)?;
        for v in &values[i * cols.len()..(i + 1) * cols.len()] {
            write!(w, ",{v:.6e}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(GridSpec::cylindrical(8, 5e-6, 16, 10e-6)).unwrap();
        let f = g.from_fn(|p| C64::new(p[0] * 1e6, p[2] * 1e6 + 0.25));
        let p = dir.path().join("a.bin");
        write_snapshot(&p, &g, 0.09, "m1", Precision::Complex128, &f).unwrap();
        let (h, back) = read_snapshot(&p).unwrap();
        assert_eq!(h.grid, *g.spec());
        assert_eq!(h.time, 0.09);
        assert_eq!(h.component, "m1");
        assert_eq!(back, f);
        write_snapshot(&p, &g, 0.0, "0", Precision::Complex64, &f).unwrap();
        let (_, back) = read_snapshot(&p).unwrap();
        for (a, b) in back.iter().zip(&f) {
            assert!((a - b).norm() < 1e-5 * b.norm().max(1.0));
        }
        std::fs::write(&p, b"garbage!garbage!").unwrap();
        assert!(read_snapshot(&p).is_err());
    }

    #[test]
    fn axis_cut_and_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(GridSpec::cartesian([4, 4, 8], [4e-6, 4e-6, 8e-6])).unwrap();
        let f = g.from_fn(|p| C64::new(p[2], 0.0));
        let p = dir.path().join("cut.csv");
        write_axis_cut(&p, &g, &f, 2).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 9);
        let line = axis_line(&g, 2);
        assert!(line.iter().all(|&i| g.point(i)[0] == 0.0 && g.point(i)[1] == 0.0));
        let m = dir.path().join("m.csv");
        write_matrix_csv(&m, &[1.0, 2.0], &[0.5], &[3.0, 4.0]).unwrap();
        assert_eq!(std::fs::read_to_string(&m).unwrap().lines().count(), 3);
        assert!(write_matrix_csv(&m, &[1.0], &[0.5], &[3.0, 4.0]).is_err());
    }
}

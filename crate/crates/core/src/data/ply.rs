//! ASCII PLY and XYZ point files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::DataError;
use crate::geometry::{Point, PointCloud};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |e| DataError::Io(format!("{}: {e}", path.display()))
}

/// PLY text with nine significant digits per coordinate.
pub fn ply_string(pc: &PointCloud) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        pc.len()
    );
    for p in pc.points() {
        let _ = writeln!(s, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
    }
    s
}

pub fn export_ply(pc: &PointCloud, path: &Path) -> Result<(), DataError> {
    fs::write(path, ply_string(pc)).map_err(io_err(path))
}

pub fn export_xyz(pc: &PointCloud, path: &Path) -> Result<(), DataError> {
    let mut s = String::new();
    for p in pc.points() {
        let _ = writeln!(s, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Reads ASCII PLY files whose vertex element starts with `x y z`
/// properties; other elements and extra properties are skipped.
pub fn parse_ply(text: &str) -> Result<PointCloud, DataError> {
    let bad = |m: &str| DataError::Parse(format!("ply: {m}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing magic line"));
    }
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    loop {
        let line = lines.next().ok_or_else(|| bad("header not terminated"))?.trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "ascii" => return Err(bad("only ascii format is supported")),
            ["element", name, count] => {
                let n = count.parse().map_err(|_| bad("bad element count"))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", ..] => {
                if let Some(e) = elements.last_mut() {
                    e.2.push("<list>".into());
                }
            }
            ["property", _, name] => {
                if let Some(e) = elements.last_mut() {
                    e.2.push(name.to_string());
                }
            }
            _ => {}
        }
    }
    let mut points = Vec::new();
    for (name, count, props) in &elements {
        for _ in 0..*count {
            let line = lines.next().ok_or_else(|| bad("fewer data lines than declared"))?;
            if name != "vertex" {
                continue;
            }
            let find = |axis: &str| props.iter().position(|p| p == axis).ok_or_else(|| bad("vertex lacks x/y/z"));
            let (ix, iy, iz) = (find("x")?, find("y")?, find("z")?);
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|w| w.parse::<f64>().map_err(|_| bad("bad number")))
                .collect::<Result<_, _>>()?;
            if vals.len() < props.len() {
                return Err(bad("short vertex line"));
            }
            points.push([vals[ix], vals[iy], vals[iz]]);
        }
    }
    PointCloud::new(points).map_err(|e| DataError::Parse(format!("ply: {e}")))
}

pub fn read_ply(path: &Path) -> Result<PointCloud, DataError> {
    parse_ply(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn parse_xyz(text: &str) -> Result<PointCloud, DataError> {
    let mut pts: Vec<Point> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| DataError::Parse(format!("xyz line {}: bad number", i + 1)))?;
        if vals.len() != 3 {
            return Err(DataError::Parse(format!("xyz line {}: expected 3 values", i + 1)));
        }
        pts.push([vals[0], vals[1], vals[2]]);
    }
    PointCloud::new(pts).map_err(|e| DataError::Parse(format!("xyz: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_point_file() {
        let pc = PointCloud::new(vec![[1.0, -2.5, 0.125]]).unwrap();
        let s = ply_string(&pc);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(
            &lines[..7],
            &["ply", "format ascii 1.0", "element vertex 1", "property float x", "property float y", "property float z", "end_header"]
        );
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[7], "1.00000000e0 -2.50000000e0 1.25000000e-1");
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let pc = PointCloud::new((0..50).map(|i| [i as f64 / 7.0, -(i as f64).sqrt(), 1.0 / (i as f64 + 1.0)]).collect()).unwrap();
        let ply = dir.path().join("a.ply");
        export_ply(&pc, &ply).unwrap();
        let text = fs::read_to_string(&ply).unwrap();
        assert!(text.contains("element vertex 50\n"));
        let back = read_ply(&ply).unwrap();
        for (a, b) in pc.points().iter().zip(back.points()) {
            assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-6));
        }
        let xyz = dir.path().join("a.xyz");
        export_xyz(&pc, &xyz).unwrap();
        let back = parse_xyz(&fs::read_to_string(&xyz).unwrap()).unwrap();
        assert_eq!(back.len(), 50);
    }

    #[test]
    fn reads_files_with_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n9 1 2 3\n9 4 5 6\n3 0 1 1\n";
        let pc = parse_ply(text).unwrap();
        assert_eq!(pc.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
    }
}

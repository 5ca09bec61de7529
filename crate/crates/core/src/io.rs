//! Point cloud readers and writers: XYZ, OBJ and PLY.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{Cloud, Vec3};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: byte offset {offset}: {msg}")]
    ParseBinary {
        path: PathBuf,
        offset: usize,
        msg: String,
    },
    #[error("{0}: unsupported cloud format (expected .xyz, .txt, .obj or .ply)")]
    UnsupportedFormat(PathBuf),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Write serializable rows as a headed CSV (floats in shortest round-trip form).
pub fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

/// Options for turning meshes into clouds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    /// Replace mesh vertices by this many area-weighted surface samples.
    pub surface_samples: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

pub fn load_cloud(path: &Path, opts: &LoadOptions) -> Result<Cloud, IoError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if !matches!(ext.as_str(), "xyz" | "txt" | "obj" | "ply") {
        return Err(IoError::UnsupportedFormat(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mesh = match ext.as_str() {
        "xyz" | "txt" => parse_xyz(path, &text(path, &bytes)?)?,
        "obj" => parse_obj(path, &text(path, &bytes)?)?,
        "ply" => parse_ply(path, &bytes)?,
        _ => return Err(IoError::UnsupportedFormat(path.to_path_buf())),
    };
    match opts.surface_samples {
        Some(n) if !mesh.triangles.is_empty() => Ok(Cloud::new(sample_surface(&mesh, n, opts.seed))),
        _ => Ok(Cloud::new(mesh.vertices)),
    }
}

fn text<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a str, IoError> {
    std::str::from_utf8(bytes).map_err(|e| IoError::ParseBinary {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
        msg: "file is not valid UTF-8 text".into(),
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64, IoError> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("expected a number, found {tok:?}")))
}

/// Whitespace-separated `x y z` per line; blank lines and `#` comments skipped.
pub fn parse_xyz(path: &Path, src: &str) -> Result<Mesh, IoError> {
    let mut vertices = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(path, i + 1, format!("expected 3 coordinates, found {}", toks.len())));
        }
        vertices.push(Vec3::new(
            parse_f64(path, i + 1, toks[0])?,
            parse_f64(path, i + 1, toks[1])?,
            parse_f64(path, i + 1, toks[2])?,
        ));
    }
    Ok(Mesh {
        vertices,
        triangles: Vec::new(),
    })
}

/// `v` and `f` records; polygons are fan-triangulated, `a/b/c` index forms
/// and negative indices accepted.
pub fn parse_obj(path: &Path, src: &str) -> Result<Mesh, IoError> {
    let mut mesh = Mesh::default();
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<&str> = toks.collect();
                if c.len() < 3 {
                    return Err(parse_err(path, i + 1, "vertex needs 3 coordinates"));
                }
                mesh.vertices.push(Vec3::new(
                    parse_f64(path, i + 1, c[0])?,
                    parse_f64(path, i + 1, c[1])?,
                    parse_f64(path, i + 1, c[2])?,
                ));
            }
            Some("f") => {
                let idx = toks
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        head.parse::<i64>()
                            .map_err(|_| parse_err(path, i + 1, format!("bad face index {t:?}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if idx.len() < 3 {
                    return Err(parse_err(path, i + 1, "face needs at least 3 vertices"));
                }
                faces.push((i + 1, idx));
            }
            _ => {}
        }
    }
    let nv = mesh.vertices.len() as i64;
    for (line, idx) in faces {
        let resolved = idx
            .iter()
            .map(|&k| {
                let r = if k < 0 { nv + k } else { k - 1 };
                if r < 0 || r >= nv {
                    Err(parse_err(path, line, format!("face index {k} out of range")))
                } else {
                    Ok(r as usize)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        for j in 1..resolved.len() - 1 {
            mesh.triangles.push([resolved[0], resolved[j], resolved[j + 1]]);
        }
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// ASCII and binary little-endian PLY; reads `vertex` x/y/z and, when present,
/// `face` vertex index lists.
pub fn parse_ply(path: &Path, bytes: &[u8]) -> Result<Mesh, IoError> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Option<(usize, String)> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..].iter().position(|b| *b == b'\n').map_or(bytes.len(), |e| *pos + e);
        let line = String::from_utf8_lossy(&bytes[*pos..end]).trim_end_matches('\r').to_string();
        *pos = (end + 1).min(bytes.len());
        line_no += 1;
        Some((line_no, line))
    };
    let header_err = |line: usize, content: &str, msg: &str| {
        parse_err(path, line, format!("bad PLY header line {content:?}: {msg}"))
    };
    match next_line(&mut pos) {
        Some((_, l)) if l.trim() == "ply" => {}
        Some((n, l)) => return Err(header_err(n, &l, "expected \"ply\"")),
        None => return Err(parse_err(path, 1, "empty file")),
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    let data_line;
    loop {
        let Some((n, l)) = next_line(&mut pos) else {
            return Err(parse_err(path, line_no, "header has no end_header"));
        };
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", ..] => return Err(header_err(n, &l, "unsupported format")),
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| header_err(n, &l, "element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", ct, it, name] => {
                let (Some(ct), Some(it)) = (Scalar::parse(ct), Scalar::parse(it)) else {
                    return Err(header_err(n, &l, "unknown list type"));
                };
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err(n, &l, "property before element"))?;
                el.props.push(Property::List(name.to_string(), ct, it));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| header_err(n, &l, "unknown property type"))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err(n, &l, "property before element"))?;
                el.props.push(Property::Scalar(name.to_string(), ty));
            }
            ["end_header"] => {
                data_line = n + 1;
                break;
            }
            _ => return Err(header_err(n, &l, "unrecognized keyword")),
        }
    }
    let binary = binary.ok_or_else(|| parse_err(path, 2, "PLY header has no format line"))?;
    let vertex = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(path, 1, "PLY has no vertex element"))?;
    let coord_idx: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|axis| {
            vertex
                .props
                .iter()
                .position(|p| matches!(p, Property::Scalar(n, _) if n == axis))
                .ok_or_else(|| parse_err(path, 1, format!("vertex element lacks property {axis}")))
        })
        .collect::<Result<_, _>>()?;

    let mut mesh = Mesh::default();
    let mut faces = Vec::new();
    if binary {
        let mut off = pos;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], IoError> {
            let s = bytes.get(*off..*off + n).ok_or_else(|| IoError::ParseBinary {
                path: path.to_path_buf(),
                offset: *off,
                msg: "unexpected end of binary data".into(),
            })?;
            *off += n;
            Ok(s)
        };
        for el in &elements {
            for _ in 0..el.count {
                let mut row: Vec<f64> = Vec::with_capacity(el.props.len());
                let mut list: Vec<usize> = Vec::new();
                for prop in &el.props {
                    match prop {
                        Property::Scalar(_, t) => row.push(t.read_le(take(&mut off, t.size())?)),
                        Property::List(name, ct, it) => {
                            let len = ct.read_le(take(&mut off, ct.size())?) as usize;
                            let mut vals = Vec::with_capacity(len);
                            for _ in 0..len {
                                vals.push(it.read_le(take(&mut off, it.size())?) as usize);
                            }
                            if name == "vertex_indices" || name == "vertex_index" {
                                list = vals;
                            }
                            row.push(f64::NAN);
                        }
                    }
                }
                collect_row(el, &row, &coord_idx, list, &mut mesh, &mut faces);
            }
        }
    } else {
        let body = text(path, &bytes[pos..])?;
        let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        for el in &elements {
            for _ in 0..el.count {
                let (i, l) = lines
                    .next()
                    .ok_or_else(|| parse_err(path, data_line, format!("missing {} rows", el.name)))?;
                let ln = data_line + i;
                let mut toks = l.split_whitespace();
                let mut row = Vec::with_capacity(el.props.len());
                let mut list = Vec::new();
                for prop in &el.props {
                    let mut next = || {
                        toks.next()
                            .ok_or_else(|| parse_err(path, ln, format!("short {} row", el.name)))
                            .and_then(|t| parse_f64(path, ln, t))
                    };
                    match prop {
                        Property::Scalar(..) => row.push(next()?),
                        Property::List(name, ..) => {
                            let len = next()? as usize;
                            let mut vals = Vec::with_capacity(len);
                            for _ in 0..len {
                                vals.push(next()? as usize);
                            }
                            if name == "vertex_indices" || name == "vertex_index" {
                                list = vals;
                            }
                            row.push(f64::NAN);
                        }
                    }
                }
                collect_row(el, &row, &coord_idx, list, &mut mesh, &mut faces);
            }
        }
    }
    let nv = mesh.vertices.len();
    for f in faces {
        if f.len() >= 3 && f.iter().all(|i| *i < nv) {
            for j in 1..f.len() - 1 {
                mesh.triangles.push([f[0], f[j], f[j + 1]]);
            }
        }
    }
    Ok(mesh)
}

fn collect_row(
    el: &Element,
    row: &[f64],
    coord_idx: &[usize],
    list: Vec<usize>,
    mesh: &mut Mesh,
    faces: &mut Vec<Vec<usize>>,
) {
    match el.name.as_str() {
        "vertex" => mesh
            .vertices
            .push(Vec3::new(row[coord_idx[0]], row[coord_idx[1]], row[coord_idx[2]])),
        "face" => faces.push(list),
        _ => {}
    }
}

/// Area-weighted uniform samples on a triangle mesh.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Vec<Vec3> {
    let mut cum = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i]);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cum.push(total);
    }
    if total <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r = rng.random_range(0.0..total);
            let k = cum.partition_point(|c| *c <= r).min(cum.len() - 1);
            let [a, b, c] = mesh.triangles[k].map(|i| mesh.vertices[i]);
            let (u, v): (f64, f64) = (rng.random(), rng.random());
            let su = u.sqrt();
            a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v)
        })
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    std::fs::write(path, contents).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// XYZ text with shortest round-trip decimals.
pub fn save_xyz(path: &Path, points: &[Vec3]) -> Result<(), IoError> {
    let mut s = String::with_capacity(points.len() * 48);
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    write_file(path, &s)
}

/// ASCII PLY with vertices and (optionally) polygon faces.
pub fn save_ply(path: &Path, vertices: &[Vec3], faces: &[Vec<usize>]) -> Result<(), IoError> {
    let mut s = String::new();
    let _ = writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", vertices.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(s, "element face {}", faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for p in vertices {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    for f in faces {
        let _ = write!(s, "{}", f.len());
        for i in f {
            let _ = write!(s, " {i}");
        }
        s.push('\n');
    }
    write_file(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn manifest_csv_round_trip() {
        use crate::data::{make_manifest, Family, ManifestRow};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let rows = make_manifest(&Family::ALL, 3, 1, 1, 4);
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,family,seed,split\ntrain_00000,mirrored_blob,"));
        assert_eq!(read_csv::<ManifestRow>(&path).unwrap(), rows);
    }

    #[test]
    fn xyz_save_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        let pts = vec![Vec3::new(0.1, 1.0 / 3.0, -2e-300), Vec3::new(f64::MAX, 5e-324, -0.0)];
        save_xyz(&path, &pts).unwrap();
        let back = load_cloud(&path, &LoadOptions::default()).unwrap();
        let bits = |v: &[Vec3]| v.iter().flat_map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]).collect::<Vec<_>>();
        assert_eq!(bits(&back.points), bits(&pts));
        assert!(matches!(
            load_cloud(&dir.path().join("c.stl"), &LoadOptions::default()),
            Err(IoError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            load_cloud(&dir.path().join("missing.xyz"), &LoadOptions::default()),
            Err(IoError::Io { .. })
        ));
    }

    #[test]
    fn xyz_two_points() {
        let m = parse_xyz(p(), "0 0 0\n1 2 3").unwrap();
        assert_eq!(m.vertices, vec![Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)]);
        let e = parse_xyz(p(), "0 0 0\n1 x 3\n").unwrap_err();
        assert!(matches!(e, IoError::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn obj_faces_and_negative_indices() {
        let src = "# tri\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\nf -4 -3 -2\n";
        let m = parse_obj(p(), src).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3], [0, 1, 2]]);
        assert!(parse_obj(p(), "v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn ply_ascii_with_faces() {
        let src = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255\n1 0 0 0\n0 1 0 7\n3 0 1 2\n";
        let m = parse_ply(p(), src.as_bytes()).unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.vertices[1], Vec3::x());
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn ply_binary_little_endian() {
        let mut b = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty float z\nend_header\n".to_vec();
        for (x, y, z) in [(0.1f64, -2.5f64, 3.25f32), (1e-300, 7.0, -0.5)] {
            b.extend_from_slice(&x.to_le_bytes());
            b.extend_from_slice(&y.to_le_bytes());
            b.extend_from_slice(&z.to_le_bytes());
        }
        let m = parse_ply(p(), &b).unwrap();
        assert_eq!(m.vertices, vec![Vec3::new(0.1, -2.5, 3.25), Vec3::new(1e-300, 7.0, -0.5)]);
        b.truncate(b.len() - 2);
        assert!(matches!(parse_ply(p(), &b), Err(IoError::ParseBinary { .. })));
    }

    #[test]
    fn malformed_ply_header_names_the_line() {
        let src = "ply\nformat ascii 1.0\nelement vertex three\nend_header\n";
        match parse_ply(p(), src.as_bytes()) {
            Err(IoError::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("element vertex three"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn surface_samples_lie_on_triangle() {
        let mesh = Mesh {
            vertices: vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 2.0), Vec3::new(0.0, 1.0, 0.5)],
            triangles: vec![[0, 1, 2]],
        };
        let [a, b, c] = mesh.triangles[0].map(|i| mesh.vertices[i]);
        let n = (b - a).cross(&(c - a)).normalize();
        for q in sample_surface(&mesh, 10_000, 3) {
            assert!((q - a).dot(&n).abs() < 1e-9);
            // Barycentric coordinates are all non-negative.
            let v0 = b - a;
            let v1 = c - a;
            let v2 = q - a;
            let (d00, d01, d11) = (v0.dot(&v0), v0.dot(&v1), v1.dot(&v1));
            let (d20, d21) = (v2.dot(&v0), v2.dot(&v1));
            let den = d00 * d11 - d01 * d01;
            let v = (d11 * d20 - d01 * d21) / den;
            let w = (d00 * d21 - d01 * d20) / den;
            assert!(v >= -1e-12 && w >= -1e-12 && v + w <= 1.0 + 1e-12);
        }
    }
}

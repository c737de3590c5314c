//! Mesh and point-cloud file I/O.
//!
//! OBJ (`v`/`f` records, polygons fan-triangulated, labels in a
//! `<mesh>.labels.txt` sidecar) and PLY (ascii or binary little-endian,
//! labels as a per-vertex integer property). Floats in text formats are
//! emitted with 9 significant digits.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{GeometryError, Mesh, PointCloud, Vec3};

/// On-disk mesh encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyAscii,
    PlyBinary,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<MeshFormat> {
        match path.extension()?.to_str()? {
            "obj" => Some(MeshFormat::Obj),
            "ply" => Some(MeshFormat::PlyAscii),
            _ => None,
        }
    }
}

/// Non-fatal observations from a load (kept out of the error channel).
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    /// Indices of zero-area faces found at load time. These are kept.
    pub degenerate_faces: Vec<usize>,
    /// Number of polygon faces that were fan-triangulated.
    pub triangulated_polygons: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> GeometryError {
    GeometryError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> GeometryError {
    GeometryError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Nine significant digits, round-trippable by any float parser.
fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{:.8e}", x)
    }
}

fn labels_sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".labels.txt");
    PathBuf::from(os)
}

/// Load a triangulated mesh; polygon faces are fan-triangulated in file
/// order. Degenerate faces are kept and flagged in the report.
pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<(Mesh, LoadReport), GeometryError> {
    let mut mesh = match format {
        MeshFormat::Obj => load_obj(path)?,
        MeshFormat::PlyAscii | MeshFormat::PlyBinary => load_ply(path)?,
    };
    if mesh.labels.is_none() {
        let sidecar = labels_sidecar_path(path);
        if sidecar.exists() {
            let labels = load_labels(&sidecar)?;
            if labels.len() != mesh.vertices.len() {
                return Err(GeometryError::LabelCountMismatch {
                    labels: labels.len(),
                    vertices: mesh.vertices.len(),
                });
            }
            mesh.labels = Some(labels);
        }
    }
    let mut report = LoadReport::default();
    for f in 0..mesh.faces.len() {
        if mesh.face_area(f) == 0.0 {
            report.degenerate_faces.push(f);
        }
    }
    Ok((mesh, report))
}

/// Save a mesh; labels go to the sidecar for OBJ and to a vertex property
/// for PLY.
pub fn save_mesh(mesh: &Mesh, path: &Path, format: MeshFormat) -> Result<(), GeometryError> {
    match format {
        MeshFormat::Obj => save_obj(mesh, path),
        MeshFormat::PlyAscii => save_ply(mesh, path, false),
        MeshFormat::PlyBinary => save_ply(mesh, path, true),
    }
}

fn load_labels(path: &Path) -> Result<Vec<u32>, GeometryError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut labels = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id: u32 = line
            .parse()
            .map_err(|_| parse_err(path, ln + 1, format!("bad label id `{line}`")))?;
        labels.push(id);
    }
    Ok(labels)
}

fn resolve_obj_index(raw: &str, count: usize, path: &Path, ln: usize) -> Result<usize, GeometryError> {
    let first = raw.split('/').next().unwrap_or("");
    let value: i64 = first
        .parse()
        .map_err(|_| parse_err(path, ln, format!("bad face index `{raw}`")))?;
    let idx = if value > 0 {
        (value - 1) as usize
    } else if value < 0 {
        let back = (-value) as usize;
        if back > count {
            return Err(parse_err(path, ln, format!("relative index {value} out of range")));
        }
        count - back
    } else {
        return Err(parse_err(path, ln, "face index 0 is not valid"));
    };
    if idx >= count {
        return Err(GeometryError::FaceIndexOutOfRange {
            index: idx,
            vertex_count: count,
        });
    }
    Ok(idx)
}

fn load_obj(path: &Path) -> Result<Mesh, GeometryError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut coord = [0.0f64; 3];
                for c in &mut coord {
                    let tok = parts
                        .next()
                        .ok_or_else(|| parse_err(path, ln, "vertex with fewer than 3 coordinates"))?;
                    *c = tok
                        .parse()
                        .map_err(|_| parse_err(path, ln, format!("bad coordinate `{tok}`")))?;
                }
                vertices.push(Vec3::new(coord[0], coord[1], coord[2]));
            }
            Some("f") => {
                let idx: Result<Vec<usize>, _> = parts
                    .map(|tok| resolve_obj_index(tok, vertices.len(), path, ln))
                    .collect();
                let idx = idx?;
                if idx.len() < 3 {
                    return Err(parse_err(path, ln, "face with fewer than 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            // Normals, texcoords, groups, materials: ignored.
            _ => {}
        }
    }
    Mesh::new(vertices, faces)
}

fn save_obj(mesh: &Mesh, path: &Path) -> Result<(), GeometryError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>, s: String| -> Result<(), GeometryError> {
        w.write_all(s.as_bytes()).map_err(|e| io_err(path, e))
    };
    for v in &mesh.vertices {
        write(&mut w, format!("v {} {} {}\n", fmt_f64(v.x), fmt_f64(v.y), fmt_f64(v.z)))?;
    }
    for f in &mesh.faces {
        write(&mut w, format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    if let Some(labels) = &mesh.labels {
        let sidecar = labels_sidecar_path(path);
        let mut text = String::new();
        for l in labels {
            text.push_str(&l.to_string());
            text.push('\n');
        }
        fs::write(&sidecar, text).map_err(|e| io_err(&sidecar, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<PlyScalar> {
        match name {
            "char" | "int8" => Some(PlyScalar::I8),
            "uchar" | "uint8" => Some(PlyScalar::U8),
            "short" | "int16" => Some(PlyScalar::I16),
            "ushort" | "uint16" => Some(PlyScalar::U16),
            "int" | "int32" => Some(PlyScalar::I32),
            "uint" | "uint32" => Some(PlyScalar::U32),
            "float" | "float32" => Some(PlyScalar::F32),
            "double" | "float64" => Some(PlyScalar::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::I32 | PlyScalar::U32 | PlyScalar::F32 => 4,
            PlyScalar::F64 => 8,
        }
    }

    fn read(self, bytes: &[u8]) -> f64 {
        match self {
            PlyScalar::I8 => bytes[0] as i8 as f64,
            PlyScalar::U8 => bytes[0] as f64,
            PlyScalar::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            PlyScalar::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            PlyScalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar { kind: PlyScalar, name: String },
    List { count: PlyScalar, item: PlyScalar, name: String },
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

fn load_ply(path: &Path) -> Result<Mesh, GeometryError> {
    let data = fs::read(path).map_err(|e| io_err(path, e))?;
    // Header is ascii terminated by "end_header".
    let header_end = find_header_end(&data)
        .ok_or_else(|| parse_err(path, 0, "missing end_header"))?;
    let header_text = std::str::from_utf8(&data[..header_end])
        .map_err(|_| parse_err(path, 0, "header is not utf-8"))?;

    let mut lines = header_text.lines().enumerate();
    let (_, magic) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if magic.trim() != "ply" {
        return Err(parse_err(path, 1, "not a ply file"));
    }
    let mut binary = false;
    let mut elements: Vec<PlyElement> = Vec::new();
    for (ln, line) in lines {
        let ln = ln + 1;
        let line = line.trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => match parts.next() {
                Some("ascii") => binary = false,
                Some("binary_little_endian") => binary = true,
                Some(other) => {
                    return Err(parse_err(path, ln, format!("unsupported format `{other}`")))
                }
                None => return Err(parse_err(path, ln, "format line missing encoding")),
            },
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = parts
                    .next()
                    .ok_or_else(|| parse_err(path, ln, "element without name"))?;
                let count: usize = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(path, ln, "element without count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, ln, "property before element"))?;
                let kind = parts
                    .next()
                    .ok_or_else(|| parse_err(path, ln, "property without type"))?;
                if kind == "list" {
                    let count = parts
                        .next()
                        .and_then(PlyScalar::parse)
                        .ok_or_else(|| parse_err(path, ln, "bad list count type"))?;
                    let item = parts
                        .next()
                        .and_then(PlyScalar::parse)
                        .ok_or_else(|| parse_err(path, ln, "bad list item type"))?;
                    let name = parts
                        .next()
                        .ok_or_else(|| parse_err(path, ln, "list property without name"))?;
                    element.properties.push(PlyProperty::List {
                        count,
                        item,
                        name: name.to_string(),
                    });
                } else {
                    let kind = PlyScalar::parse(kind)
                        .ok_or_else(|| parse_err(path, ln, format!("bad property type `{kind}`")))?;
                    let name = parts
                        .next()
                        .ok_or_else(|| parse_err(path, ln, "property without name"))?;
                    element.properties.push(PlyProperty::Scalar {
                        kind,
                        name: name.to_string(),
                    });
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(path, ln, format!("unknown header record `{other}`"))),
            None => {}
        }
    }

    let body = &data[header_end..];
    let mut vertices = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut has_labels = false;
    let mut faces = Vec::new();

    if binary {
        let mut offset = 0usize;
        for element in &elements {
            for _ in 0..element.count {
                let mut x = 0.0;
                let mut y = 0.0;
                let mut z = 0.0;
                let mut label = None;
                let mut list: Vec<usize> = Vec::new();
                for prop in &element.properties {
                    match prop {
                        PlyProperty::Scalar { kind, name } => {
                            if offset + kind.size() > body.len() {
                                return Err(parse_err(path, 0, "unexpected end of binary data"));
                            }
                            let v = kind.read(&body[offset..]);
                            offset += kind.size();
                            match name.as_str() {
                                "x" => x = v,
                                "y" => y = v,
                                "z" => z = v,
                                "label" => label = Some(v as u32),
                                _ => {}
                            }
                        }
                        PlyProperty::List { count, item, name } => {
                            if offset + count.size() > body.len() {
                                return Err(parse_err(path, 0, "unexpected end of binary data"));
                            }
                            let n = count.read(&body[offset..]) as usize;
                            offset += count.size();
                            let is_face_list = name == "vertex_indices" || name == "vertex_index";
                            for _ in 0..n {
                                if offset + item.size() > body.len() {
                                    return Err(parse_err(path, 0, "unexpected end of binary data"));
                                }
                                if is_face_list {
                                    list.push(item.read(&body[offset..]) as usize);
                                }
                                offset += item.size();
                            }
                        }
                    }
                }
                finish_ply_row(element, x, y, z, label, &list, &mut vertices, &mut labels, &mut has_labels, &mut faces, path)?;
            }
        }
    } else {
        let text = std::str::from_utf8(body).map_err(|_| parse_err(path, 0, "body is not utf-8"))?;
        let mut rows = text.lines().filter(|l| !l.trim().is_empty());
        for element in &elements {
            for _ in 0..element.count {
                let row = rows
                    .next()
                    .ok_or_else(|| parse_err(path, 0, "unexpected end of ascii data"))?;
                let mut toks = row.split_whitespace();
                let mut x = 0.0;
                let mut y = 0.0;
                let mut z = 0.0;
                let mut label = None;
                let mut list: Vec<usize> = Vec::new();
                for prop in &element.properties {
                    match prop {
                        PlyProperty::Scalar { name, .. } => {
                            let tok = toks
                                .next()
                                .ok_or_else(|| parse_err(path, 0, "row with missing values"))?;
                            let v: f64 = tok
                                .parse()
                                .map_err(|_| parse_err(path, 0, format!("bad value `{tok}`")))?;
                            match name.as_str() {
                                "x" => x = v,
                                "y" => y = v,
                                "z" => z = v,
                                "label" => label = Some(v as u32),
                                _ => {}
                            }
                        }
                        PlyProperty::List { name, .. } => {
                            let tok = toks
                                .next()
                                .ok_or_else(|| parse_err(path, 0, "row with missing list count"))?;
                            let n: usize = tok
                                .parse()
                                .map_err(|_| parse_err(path, 0, format!("bad list count `{tok}`")))?;
                            let is_face_list = name == "vertex_indices" || name == "vertex_index";
                            for _ in 0..n {
                                let tok = toks
                                    .next()
                                    .ok_or_else(|| parse_err(path, 0, "row with missing list item"))?;
                                let v: usize = tok
                                    .parse()
                                    .map_err(|_| parse_err(path, 0, format!("bad index `{tok}`")))?;
                                if is_face_list {
                                    list.push(v);
                                }
                            }
                        }
                    }
                }
                finish_ply_row(element, x, y, z, label, &list, &mut vertices, &mut labels, &mut has_labels, &mut faces, path)?;
            }
        }
    }

    if has_labels {
        Mesh::with_labels(vertices, faces, labels)
    } else {
        Mesh::new(vertices, faces)
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_ply_row(
    element: &PlyElement,
    x: f64,
    y: f64,
    z: f64,
    label: Option<u32>,
    list: &[usize],
    vertices: &mut Vec<Vec3>,
    labels: &mut Vec<u32>,
    has_labels: &mut bool,
    faces: &mut Vec<[usize; 3]>,
    path: &Path,
) -> Result<(), GeometryError> {
    match element.name.as_str() {
        "vertex" => {
            vertices.push(Vec3::new(x, y, z));
            if let Some(l) = label {
                *has_labels = true;
                labels.push(l);
            }
        }
        "face" => {
            if list.len() < 3 {
                return Err(parse_err(path, 0, "face with fewer than 3 indices"));
            }
            for k in 1..list.len() - 1 {
                faces.push([list[0], list[k], list[k + 1]]);
            }
        }
        _ => {}
    }
    Ok(())
}

fn find_header_end(data: &[u8]) -> Option<usize> {
    let needle = b"end_header";
    let pos = data
        .windows(needle.len())
        .position(|w| w == needle)?;
    let mut end = pos + needle.len();
    // Swallow the line terminator after end_header.
    if data.get(end) == Some(&b'\r') {
        end += 1;
    }
    if data.get(end) == Some(&b'\n') {
        end += 1;
    }
    Some(end)
}

fn save_ply(mesh: &Mesh, path: &Path, binary: bool) -> Result<(), GeometryError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::new();
    header.push_str("ply\n");
    header.push_str(if binary {
        "format binary_little_endian 1.0\n"
    } else {
        "format ascii 1.0\n"
    });
    header.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if mesh.labels.is_some() {
        header.push_str("property int label\n");
    }
    header.push_str(&format!("element face {}\n", mesh.faces.len()));
    header.push_str("property list uchar int vertex_indices\n");
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(|e| io_err(path, e))?;

    if binary {
        for (i, v) in mesh.vertices.iter().enumerate() {
            w.write_all(&v.x.to_le_bytes()).map_err(|e| io_err(path, e))?;
            w.write_all(&v.y.to_le_bytes()).map_err(|e| io_err(path, e))?;
            w.write_all(&v.z.to_le_bytes()).map_err(|e| io_err(path, e))?;
            if let Some(labels) = &mesh.labels {
                w.write_all(&(labels[i] as i32).to_le_bytes())
                    .map_err(|e| io_err(path, e))?;
            }
        }
        for f in &mesh.faces {
            w.write_all(&[3u8]).map_err(|e| io_err(path, e))?;
            for &idx in f {
                w.write_all(&(idx as i32).to_le_bytes())
                    .map_err(|e| io_err(path, e))?;
            }
        }
    } else {
        for (i, v) in mesh.vertices.iter().enumerate() {
            let mut row = format!("{} {} {}", fmt_f64(v.x), fmt_f64(v.y), fmt_f64(v.z));
            if let Some(labels) = &mesh.labels {
                row.push_str(&format!(" {}", labels[i]));
            }
            row.push('\n');
            w.write_all(row.as_bytes()).map_err(|e| io_err(path, e))?;
        }
        for f in &mesh.faces {
            w.write_all(format!("3 {} {} {}\n", f[0], f[1], f[2]).as_bytes())
                .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Load a point cloud from `.xyz` (one `x y z [label]` row per line), `.obj`
/// (`v` records), or `.ply` (vertex element).
pub fn load_point_cloud(path: &Path) -> Result<PointCloud, GeometryError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "xyz" => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let mut points = Vec::new();
            let mut labels = Vec::new();
            let mut has_labels = false;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() < 3 {
                    return Err(parse_err(path, ln + 1, "row with fewer than 3 values"));
                }
                let mut c = [0.0f64; 3];
                for (i, v) in c.iter_mut().enumerate() {
                    *v = toks[i]
                        .parse()
                        .map_err(|_| parse_err(path, ln + 1, format!("bad value `{}`", toks[i])))?;
                }
                points.push(Vec3::new(c[0], c[1], c[2]));
                if toks.len() > 3 {
                    has_labels = true;
                    labels.push(toks[3].parse().map_err(|_| {
                        parse_err(path, ln + 1, format!("bad label `{}`", toks[3]))
                    })?);
                }
            }
            if has_labels && labels.len() == points.len() {
                PointCloud::with_labels(points, labels)
            } else {
                Ok(PointCloud::new(points))
            }
        }
        "obj" => {
            let mesh = load_obj(path)?;
            Ok(PointCloud {
                points: mesh.vertices,
                labels: mesh.labels,
            })
        }
        "ply" => {
            let mesh = load_ply(path)?;
            Ok(PointCloud {
                points: mesh.vertices,
                labels: mesh.labels,
            })
        }
        other => Err(GeometryError::UnsupportedFormat {
            path: path.display().to_string(),
            message: format!("unknown point-cloud extension `{other}`"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;
    use tempfile::tempdir;

    #[test]
    fn obj_quad_cube_fan_triangulates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cube.obj");
        let obj = "\
v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nv 1 0 1\nv 1 1 1\nv 0 1 1\n\
f 1 4 3 2\nf 5 6 7 8\nf 1 2 6 5\nf 2 3 7 6\nf 3 4 8 7\nf 4 1 5 8\n";
        fs::write(&path, obj).unwrap();
        let (mesh, _) = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert_eq!(mesh.vertex_count(), 8);
        assert_eq!(mesh.face_count(), 12);
    }

    #[test]
    fn obj_out_of_range_face_index_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.obj");
        fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n").unwrap();
        let err = load_mesh(&path, MeshFormat::Obj).unwrap_err();
        assert!(matches!(err, GeometryError::FaceIndexOutOfRange { index: 8, .. }));
    }

    #[test]
    fn obj_single_triangle() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let (mesh, report) = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert_eq!(mesh.vertex_count(), 3);
        assert_eq!(mesh.face_count(), 1);
        assert!(report.degenerate_faces.is_empty());
    }

    #[test]
    fn degenerate_faces_flagged_not_fatal() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("degen.obj");
        fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 1 2\nf 1 2 3\n").unwrap();
        let (mesh, report) = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert_eq!(mesh.face_count(), 2);
        assert_eq!(report.degenerate_faces, vec![0]);
    }

    #[test]
    fn obj_round_trip_preserves_topology_and_coordinates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.obj");
        let mesh = toy::icosphere(1, 0.37);
        save_mesh(&mesh, &path, MeshFormat::Obj).unwrap();
        let (back, _) = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert_eq!(back.faces, mesh.faces);
        assert_eq!(back.vertex_count(), mesh.vertex_count());
        for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
            assert!((a - b).norm() <= 1e-8 * a.norm().max(1.0));
        }
    }

    #[test]
    fn empty_mesh_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.obj");
        let mesh = Mesh::new(vec![], vec![]).unwrap();
        save_mesh(&mesh, &path, MeshFormat::Obj).unwrap();
        let (back, _) = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert_eq!(back.vertex_count(), 0);
        assert_eq!(back.face_count(), 0);
    }

    #[test]
    fn ply_ascii_labels_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("labeled.ply");
        let mut mesh = toy::unit_cube();
        mesh.labels = Some((0..8).map(|i| (i % 3) as u32).collect());
        save_mesh(&mesh, &path, MeshFormat::PlyAscii).unwrap();
        let (back, _) = load_mesh(&path, MeshFormat::PlyAscii).unwrap();
        assert_eq!(back.labels, mesh.labels);
        assert_eq!(back.faces, mesh.faces);
    }

    #[test]
    fn ply_binary_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bin.ply");
        let mesh = toy::icosphere(2, 0.5);
        save_mesh(&mesh, &path, MeshFormat::PlyBinary).unwrap();
        let (back, _) = load_mesh(&path, MeshFormat::PlyBinary).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.faces, mesh.faces);
    }

    #[test]
    fn obj_labels_sidecar_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("side.obj");
        let mut mesh = toy::unit_cube();
        mesh.labels = Some(vec![7; 8]);
        save_mesh(&mesh, &path, MeshFormat::Obj).unwrap();
        assert!(dir.path().join("side.obj.labels.txt").exists());
        let (back, _) = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert_eq!(back.labels, Some(vec![7; 8]));
    }

    #[test]
    fn xyz_point_cloud_loads() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.xyz");
        fs::write(&path, "0 0 0\n0.5 0.25 -0.125\n").unwrap();
        let cloud = load_point_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[1], Vec3::new(0.5, 0.25, -0.125));
    }
}

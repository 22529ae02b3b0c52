//! OBJ and PLY (ascii, binary little-endian) reading and writing.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use super::{Mesh, MeshError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyAscii,
    PlyBinaryLittleEndian,
}

impl MeshFormat {
    /// Picks a format from a file extension; `.ply` defaults to binary.
    pub fn from_path(path: &Path) -> Option<MeshFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(MeshFormat::Obj),
            "ply" => Some(MeshFormat::PlyBinaryLittleEndian),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("byte {offset}: {message}")]
    Byte { offset: usize, message: String },
    #[error("mesh file has no faces")]
    Empty,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("unknown mesh format for {0}")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn line_err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError::Line {
        line,
        message: message.into(),
    }
}

/// Parses mesh file content. Polygons are fan-triangulated; faces that
/// repeat a vertex are dropped. Normals are taken from the file when present.
pub fn parse_mesh(bytes: &[u8], format: MeshFormat) -> Result<Mesh, ParseError> {
    let (vertices, faces, normals) = match format {
        MeshFormat::Obj => parse_obj(bytes)?,
        MeshFormat::PlyAscii | MeshFormat::PlyBinaryLittleEndian => parse_ply(bytes)?,
    };
    if faces.is_empty() {
        return Err(ParseError::Empty);
    }
    let mesh = match normals {
        Some(n) => Mesh::with_normals(vertices, faces, n)?,
        None => Mesh::new(vertices, faces)?,
    };
    Ok(mesh)
}

pub fn read_mesh(path: &Path) -> Result<Mesh, ParseError> {
    let format = MeshFormat::from_path(path)
        .ok_or_else(|| ParseError::UnknownFormat(path.display().to_string()))?;
    let bytes = std::fs::read(path)?;
    parse_mesh(&bytes, format)
}

fn push_polygon(poly: &[usize], faces: &mut Vec<[usize; 3]>) {
    for k in 1..poly.len().saturating_sub(1) {
        let f = [poly[0], poly[k], poly[k + 1]];
        if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
            faces.push(f);
        }
    }
}

type Parsed = (Vec<Point3<f64>>, Vec<[usize; 3]>, Option<Vec<Vector3<f64>>>);

fn parse_obj(bytes: &[u8]) -> Result<Parsed, ParseError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ParseError::Byte {
        offset: e.valid_up_to(),
        message: "invalid utf-8".into(),
    })?;
    let mut vertices = Vec::new();
    let mut file_normals: Vec<Vector3<f64>> = Vec::new();
    let mut vertex_normal: Vec<Option<usize>> = Vec::new();
    let mut faces = Vec::new();
    let mut poly = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tok = content.split_whitespace();
        let Some(tag) = tok.next() else { continue };
        match tag {
            "v" | "vn" => {
                let mut xyz = [0.0; 3];
                for c in &mut xyz {
                    let t = tok.next().ok_or_else(|| line_err(line, "expected 3 coordinates"))?;
                    *c = t
                        .parse()
                        .map_err(|_| line_err(line, format!("invalid number '{t}'")))?;
                }
                if tag == "v" {
                    vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
                    vertex_normal.push(None);
                } else {
                    file_normals.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
                }
            }
            "f" => {
                poly.clear();
                for t in tok {
                    let mut parts = t.split('/');
                    let vi = resolve_obj_index(parts.next().unwrap_or(""), vertices.len(), line)?;
                    let _texture = parts.next();
                    if let Some(n) = parts.next().filter(|s| !s.is_empty()) {
                        let ni = resolve_obj_index(n, file_normals.len(), line)?;
                        vertex_normal[vi].get_or_insert(ni);
                    }
                    poly.push(vi);
                }
                if poly.len() < 3 {
                    return Err(line_err(line, "face with fewer than 3 vertices"));
                }
                push_polygon(&poly, &mut faces);
            }
            _ => {}
        }
    }
    let normals = if !file_normals.is_empty() && vertex_normal.iter().all(Option::is_some) {
        Some(vertex_normal.iter().map(|n| file_normals[n.unwrap()]).collect())
    } else {
        None
    };
    Ok((vertices, faces, normals))
}

fn resolve_obj_index(tok: &str, count: usize, line: usize) -> Result<usize, ParseError> {
    let i: i64 = tok
        .parse()
        .map_err(|_| line_err(line, format!("invalid index '{tok}'")))?;
    let idx = if i > 0 {
        i - 1
    } else if i < 0 {
        count as i64 + i
    } else {
        -1
    };
    if idx < 0 || idx as usize >= count {
        return Err(line_err(line, format!("index {i} out of range")));
    }
    Ok(idx as usize)
}

#[derive(Debug, Clone, Copy)]
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
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
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
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct PlyHeader {
    binary: bool,
    elements: Vec<Element>,
    body_offset: usize,
    body_line: usize,
}

fn parse_ply_header(bytes: &[u8]) -> Result<PlyHeader, ParseError> {
    let mut offset = 0;
    let mut line_no = 0;
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| line_err(line_no + 1, "unterminated ply header"))?;
        let raw = &bytes[offset..offset + end];
        offset += end + 1;
        line_no += 1;
        let text = std::str::from_utf8(raw)
            .map_err(|_| line_err(line_no, "header is not utf-8"))?
            .trim();
        let toks: Vec<&str> = text.split_whitespace().collect();
        match toks.first().copied() {
            Some("ply") if line_no == 1 => {}
            _ if line_no == 1 => return Err(line_err(1, "missing 'ply' magic")),
            Some("format") => {
                binary = Some(match toks.get(1).copied() {
                    Some("ascii") => false,
                    Some("binary_little_endian") => true,
                    other => {
                        return Err(line_err(line_no, format!("unsupported ply format {other:?}")))
                    }
                });
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                if toks.len() != 3 {
                    return Err(line_err(line_no, "malformed element line"));
                }
                let count = toks[2]
                    .parse()
                    .map_err(|_| line_err(line_no, "invalid element count"))?;
                elements.push(Element {
                    name: toks[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| line_err(line_no, "property before element"))?;
                let prop = if toks.get(1) == Some(&"list") {
                    if toks.len() != 5 {
                        return Err(line_err(line_no, "malformed list property"));
                    }
                    let c = Scalar::parse(toks[2]).ok_or_else(|| line_err(line_no, "bad type"))?;
                    let i = Scalar::parse(toks[3]).ok_or_else(|| line_err(line_no, "bad type"))?;
                    Property::List(toks[4].to_string(), c, i)
                } else {
                    if toks.len() != 3 {
                        return Err(line_err(line_no, "malformed property"));
                    }
                    let t = Scalar::parse(toks[1]).ok_or_else(|| line_err(line_no, "bad type"))?;
                    Property::Scalar(toks[2].to_string(), t)
                };
                el.props.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(line_err(line_no, format!("unexpected header keyword '{other}'"))),
        }
    }
    let binary = binary.ok_or_else(|| line_err(line_no, "missing format line"))?;
    Ok(PlyHeader {
        binary,
        elements,
        body_offset: offset,
        body_line: line_no,
    })
}

/// Values of one element record: scalars by property position, lists separately.
struct Record {
    scalars: Vec<f64>,
    lists: Vec<Vec<f64>>,
}

fn parse_ply(bytes: &[u8]) -> Result<Parsed, ParseError> {
    let header = parse_ply_header(bytes)?;
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut has_normals = false;
    let mut faces = Vec::new();
    let mut poly = Vec::new();

    let mut cursor = header.body_offset;
    let mut line_no = header.body_line;
    let body_text = if header.binary {
        None
    } else {
        Some(
            std::str::from_utf8(&bytes[header.body_offset..])
                .map_err(|e| ParseError::Byte {
                    offset: header.body_offset + e.valid_up_to(),
                    message: "invalid utf-8 in ascii body".into(),
                })?
                .lines(),
        )
    };
    let mut lines = body_text;

    for el in &header.elements {
        let position = |name: &str| {
            el.props
                .iter()
                .position(|p| matches!(p, Property::Scalar(n, _) if n == name))
        };
        let xyz = [position("x"), position("y"), position("z")];
        let nxyz = [position("nx"), position("ny"), position("nz")];
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        if is_vertex && xyz.iter().any(Option::is_none) {
            return Err(line_err(header.body_line, "vertex element lacks x/y/z"));
        }
        let index_list = el.props.iter().position(
            |p| matches!(p, Property::List(n, _, _) if n == "vertex_indices" || n == "vertex_index"),
        );
        if is_face && index_list.is_none() {
            return Err(line_err(header.body_line, "face element lacks vertex_indices"));
        }
        if is_vertex && nxyz.iter().all(Option::is_some) {
            has_normals = true;
        }
        for _ in 0..el.count {
            let rec = match lines.as_mut() {
                Some(it) => {
                    line_no += 1;
                    let l = it.next().ok_or_else(|| line_err(line_no, "unexpected end of file"))?;
                    read_ascii_record(l, &el.props, line_no)?
                }
                None => read_binary_record(bytes, &mut cursor, &el.props)?,
            };
            if is_vertex {
                let g = |i: Option<usize>| rec.scalars[i.unwrap()];
                vertices.push(Point3::new(g(xyz[0]), g(xyz[1]), g(xyz[2])));
                if has_normals {
                    normals.push(Vector3::new(g(nxyz[0]), g(nxyz[1]), g(nxyz[2])));
                }
            } else if is_face {
                let li = el.props[..index_list.unwrap()]
                    .iter()
                    .filter(|p| matches!(p, Property::List(..)))
                    .count();
                poly.clear();
                for &x in &rec.lists[li] {
                    if x < 0.0 || x as usize >= vertices.len() {
                        return Err(line_err(line_no, format!("vertex index {x} out of range")));
                    }
                    poly.push(x as usize);
                }
                if poly.len() < 3 {
                    return Err(line_err(line_no, "face with fewer than 3 vertices"));
                }
                push_polygon(&poly, &mut faces);
            }
        }
    }
    Ok((vertices, faces, has_normals.then_some(normals)))
}

fn read_ascii_record(line: &str, props: &[Property], line_no: usize) -> Result<Record, ParseError> {
    let mut toks = line.split_whitespace();
    let mut next = || -> Result<f64, ParseError> {
        let t = toks.next().ok_or_else(|| line_err(line_no, "too few values"))?;
        t.parse()
            .map_err(|_| line_err(line_no, format!("invalid number '{t}'")))
    };
    let mut rec = Record {
        scalars: vec![0.0; props.len()],
        lists: Vec::new(),
    };
    for (i, p) in props.iter().enumerate() {
        match p {
            Property::Scalar(..) => rec.scalars[i] = next()?,
            Property::List(..) => {
                let n = next()?;
                if n < 0.0 {
                    return Err(line_err(line_no, "negative list length"));
                }
                let mut items = Vec::with_capacity(n as usize);
                for _ in 0..n as usize {
                    items.push(next()?);
                }
                rec.lists.push(items);
            }
        }
    }
    Ok(rec)
}

fn read_binary_record(bytes: &[u8], cursor: &mut usize, props: &[Property]) -> Result<Record, ParseError> {
    let mut take = |t: Scalar| -> Result<f64, ParseError> {
        let n = t.size();
        if *cursor + n > bytes.len() {
            return Err(ParseError::Byte {
                offset: *cursor,
                message: "unexpected end of binary body".into(),
            });
        }
        let v = t.read_le(&bytes[*cursor..*cursor + n]);
        *cursor += n;
        Ok(v)
    };
    let mut rec = Record {
        scalars: vec![0.0; props.len()],
        lists: Vec::new(),
    };
    for (i, p) in props.iter().enumerate() {
        match *p {
            Property::Scalar(_, t) => rec.scalars[i] = take(t)?,
            Property::List(_, ct, it) => {
                let n = take(ct)?;
                let mut items = Vec::with_capacity(n as usize);
                for _ in 0..n as usize {
                    items.push(take(it)?);
                }
                rec.lists.push(items);
            }
        }
    }
    Ok(rec)
}

/// Serializes a mesh with its vertex normals. Coordinates are written at
/// full f64 precision.
pub fn write_mesh(mesh: &Mesh, format: MeshFormat) -> Vec<u8> {
    match format {
        MeshFormat::Obj => {
            let mut s = String::new();
            for p in mesh.vertices() {
                writeln!(s, "v {} {} {}", p.x, p.y, p.z).unwrap();
            }
            for n in mesh.normals() {
                writeln!(s, "vn {} {} {}", n.x, n.y, n.z).unwrap();
            }
            for f in mesh.faces() {
                let [a, b, c] = f.map(|v| v + 1);
                writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}").unwrap();
            }
            s.into_bytes()
        }
        MeshFormat::PlyAscii | MeshFormat::PlyBinaryLittleEndian => {
            let binary = format == MeshFormat::PlyBinaryLittleEndian;
            let mut out = format!(
                "ply\nformat {} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
                 property double nx\nproperty double ny\nproperty double nz\nelement face {}\n\
                 property list uchar int vertex_indices\nend_header\n",
                if binary { "binary_little_endian" } else { "ascii" },
                mesh.vertex_count(),
                mesh.face_count()
            )
            .into_bytes();
            if binary {
                for (p, n) in mesh.vertices().iter().zip(mesh.normals()) {
                    for x in [p.x, p.y, p.z, n.x, n.y, n.z] {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                for f in mesh.faces() {
                    out.push(3);
                    for &v in f {
                        out.extend_from_slice(&(v as i32).to_le_bytes());
                    }
                }
            } else {
                let mut s = String::new();
                for (p, n) in mesh.vertices().iter().zip(mesh.normals()) {
                    writeln!(s, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z).unwrap();
                }
                for f in mesh.faces() {
                    writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
                }
                out.extend_from_slice(s.as_bytes());
            }
            out
        }
    }
}

pub fn write_mesh_file(mesh: &Mesh, path: &Path) -> Result<(), ParseError> {
    let format = MeshFormat::from_path(path)
        .ok_or_else(|| ParseError::UnknownFormat(path.display().to_string()))?;
    std::fs::write(path, write_mesh(mesh, format))?;
    Ok(())
}

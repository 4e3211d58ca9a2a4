//! Minimal PLY reader/writer for point clouds.
//!
//! Reads ASCII and binary little-endian files, keeping only the `vertex`
//! element's `x, y, z` and (optionally) `nx, ny, nz` properties; every other
//! property and element is parsed and skipped. Writes binary little-endian
//! doubles by default so that coordinates survive a round trip bit-for-bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    fn decode(self, b: &[u8]) -> f64 {
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
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    format: Format,
    elements: Vec<Element>,
    lines: usize,
}

fn err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Ply {
        location: location.into(),
        message: message.into(),
    }
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<Header> {
    let mut line = String::new();
    let mut lineno = 0usize;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| err(format!("line {}", lineno + 1), e.to_string()))?;
        lineno += 1;
        if n == 0 {
            return Err(err(format!("line {lineno}"), "missing end_header"));
        }
        let loc = format!("line {lineno}");
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if lineno == 1 {
            if tokens != ["ply"] {
                return Err(err(loc, "file does not start with 'ply'"));
            }
            continue;
        }
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", kind, _version] => {
                format = Some(match *kind {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    other => return Err(err(loc, format!("unsupported format '{other}'"))),
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse::<usize>()
                    .map_err(|_| err(&loc, format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(&loc, "property before any element"))?;
                let count = Scalar::parse(count).ok_or_else(|| err(&loc, "bad list count type"))?;
                let item = Scalar::parse(item).ok_or_else(|| err(&loc, "bad list item type"))?;
                el.properties.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(&loc, "property before any element"))?;
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| err(&loc, format!("unknown property type '{ty}'")))?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            ["end_header"] => break,
            _ => {
                return Err(err(
                    loc,
                    format!("unrecognised header line '{}'", line.trim()),
                ))
            }
        }
    }
    let format = format.ok_or_else(|| err("header", "missing format line"))?;
    Ok(Header {
        format,
        elements,
        lines: lineno,
    })
}

struct VertexLayout {
    xyz: [usize; 3],
    normal: Option<[usize; 3]>,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    let find = |name: &str| {
        el.properties.iter().position(|p| match p {
            Property::Scalar { name: n, .. } => n == name,
            Property::List { .. } => false,
        })
    };
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(err("header", "vertex element lacks x, y, z")),
    };
    let normal = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        (None, None, None) => None,
        _ => return Err(err("header", "vertex element has a partial normal")),
    };
    Ok(VertexLayout { xyz, normal })
}

fn make_point(values: &[f64], layout: &VertexLayout, loc: &str) -> Result<Point> {
    let position = Vector3::new(
        values[layout.xyz[0]],
        values[layout.xyz[1]],
        values[layout.xyz[2]],
    );
    if !position.iter().all(|v| v.is_finite()) {
        return Err(err(loc, "non-finite coordinate"));
    }
    let normal = match layout.normal {
        None => None,
        Some([a, b, c]) => {
            let n = Vector3::new(values[a], values[b], values[c]);
            if !n.iter().all(|v| v.is_finite()) {
                return Err(err(loc, "non-finite normal"));
            }
            let len = n.norm();
            if len == 0.0 {
                None
            } else if (len - 1.0).abs() > 1e-9 {
                Some(n / len)
            } else {
                Some(n)
            }
        }
    };
    Ok(Point { position, normal })
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_ply(BufReader::new(file), id)
}

pub fn read_ply<R: BufRead>(mut reader: R, source_id: impl Into<String>) -> Result<PointCloud> {
    let header = read_header(&mut reader)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| err("header", "no vertex element"))?;
    let layout = vertex_layout(&header.elements[vertex_pos])?;
    let points = match header.format {
        Format::Ascii => read_ascii(reader, &header, vertex_pos, &layout)?,
        Format::BinaryLe => read_binary(reader, &header, vertex_pos, &layout)?,
    };
    PointCloud::new(points, source_id)
}

fn read_ascii<R: BufRead>(
    reader: R,
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<Vec<Point>> {
    let mut lines = reader
        .lines()
        .enumerate()
        .map(|(i, l)| (i + header.lines + 1, l))
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
    let mut points = Vec::new();
    for (ei, el) in header.elements.iter().enumerate() {
        for k in 0..el.count {
            let (lineno, line) = lines.next().ok_or_else(|| {
                err(
                    format!("{} element {k}", el.name),
                    format!("expected {} {} elements, found {k}", el.count, el.name),
                )
            })?;
            let loc = format!("line {lineno} ({} element {k})", el.name);
            let line = line.map_err(|e| err(&loc, e.to_string()))?;
            let mut tokens = line.split_whitespace();
            let mut values = Vec::with_capacity(el.properties.len());
            for prop in &el.properties {
                let mut next = || -> Result<f64> {
                    let tok = tokens.next().ok_or_else(|| err(&loc, "too few values"))?;
                    tok.parse::<f64>()
                        .map_err(|_| err(&loc, format!("invalid number '{tok}'")))
                };
                match prop {
                    Property::Scalar { .. } => values.push(next()?),
                    Property::List { .. } => {
                        let n = next()?;
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(err(&loc, "invalid list length"));
                        }
                        for _ in 0..n as usize {
                            next()?;
                        }
                        values.push(f64::NAN);
                    }
                }
            }
            if tokens.next().is_some() {
                return Err(err(&loc, "too many values"));
            }
            if ei == vertex_pos {
                points.push(make_point(&values, layout, &loc)?);
            }
        }
    }
    if let Some((lineno, _)) = lines.next() {
        return Err(err(
            format!("line {lineno}"),
            "data after the last declared element",
        ));
    }
    Ok(points)
}

fn read_binary<R: Read>(
    mut reader: R,
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    let mut buf = [0u8; 8];
    for (ei, el) in header.elements.iter().enumerate() {
        for k in 0..el.count {
            let loc = format!("{} element {k}", el.name);
            let mut read = |ty: Scalar| -> Result<f64> {
                reader.read_exact(&mut buf[..ty.size()]).map_err(|_| {
                    err(
                        &loc,
                        format!(
                            "unexpected end of data; declared {} {} elements",
                            el.count, el.name
                        ),
                    )
                })?;
                Ok(ty.decode(&buf))
            };
            let mut values = Vec::with_capacity(el.properties.len());
            for prop in &el.properties {
                match *prop {
                    Property::Scalar { ty, .. } => values.push(read(ty)?),
                    Property::List { count, item } => {
                        let n = read(count)?;
                        for _ in 0..n as usize {
                            read(item)?;
                        }
                        values.push(f64::NAN);
                    }
                }
            }
            if ei == vertex_pos {
                points.push(make_point(&values, layout, &loc)?);
            }
        }
    }
    Ok(points)
}

fn write_header<W: Write>(
    w: &mut W,
    cloud: &PointCloud,
    format: &str,
    normals: bool,
) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format {format} 1.0")?;
    if !cloud.source_id().is_empty() {
        writeln!(w, "comment source {}", cloud.source_id())?;
    }
    writeln!(w, "element vertex {}", cloud.len())?;
    for name in ["x", "y", "z"] {
        writeln!(w, "property double {name}")?;
    }
    if normals {
        for name in ["nx", "ny", "nz"] {
            writeln!(w, "property double {name}")?;
        }
    }
    writeln!(w, "end_header")
}

fn any_normals(cloud: &PointCloud) -> bool {
    cloud.points().iter().any(|p| p.normal.is_some())
}

/// Writes binary little-endian doubles. Unset normals are written as zero
/// vectors, which the reader maps back to "unset".
pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let normals = any_normals(cloud);
    write_header(&mut w, cloud, "binary_little_endian", normals).map_err(io)?;
    for p in cloud.points() {
        for v in p.position.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        if normals {
            let n = p.normal.unwrap_or_else(Vector3::zeros);
            for v in n.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// ASCII variant; values use Rust's shortest round-trip formatting.
pub fn save_ply_ascii(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let normals = any_normals(cloud);
    write_header(&mut w, cloud, "ascii", normals).map_err(io)?;
    for p in cloud.points() {
        let q = p.position;
        if normals {
            let n = p.normal.unwrap_or_else(Vector3::zeros);
            writeln!(w, "{} {} {} {} {} {}", q.x, q.y, q.z, n.x, n.y, n.z).map_err(io)?;
        } else {
            writeln!(w, "{} {} {}", q.x, q.y, q.z).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

//! ASCII OFF and Wavefront OBJ readers, plus writers for both.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Point3;

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::formats::atomic_write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "off" => Some(MeshFormat::Off),
            "obj" => Some(MeshFormat::Obj),
            _ => None,
        }
    }
}

impl FromStr for MeshFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(MeshFormat::Off),
            "obj" => Ok(MeshFormat::Obj),
            other => Err(Error::InvalidArgument(format!("unknown mesh format {other:?}"))),
        }
    }
}

pub fn load_mesh(path: impl AsRef<Path>, format: MeshFormat) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        MeshFormat::Off => parse_off(&text),
        MeshFormat::Obj => parse_obj(&text),
    }
}

/// Loads a mesh, picking the format from the file extension.
pub fn load_mesh_auto(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let format = MeshFormat::from_path(path)
        .ok_or_else(|| Error::InvalidArgument(format!("cannot infer mesh format of {}", path.display())))?;
    load_mesh(path, format)
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_num<T: FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("cannot parse {tok:?}")))
}

/// Polygons with more than three corners are fan-triangulated.
fn push_polygon(faces: &mut Vec<[usize; 3]>, poly: &[usize], line: usize) -> Result<()> {
    if poly.len() < 3 {
        return Err(parse_err(line, "face with fewer than 3 vertices"));
    }
    for w in 1..poly.len() - 1 {
        faces.push([poly[0], poly[w], poly[w + 1]]);
    }
    Ok(())
}

pub fn parse_off(text: &str) -> Result<TriangleMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.first() != Some(&"OFF") {
        return Err(parse_err(hline, "missing OFF header"));
    }
    tokens.remove(0);
    let (cline, counts) = if tokens.is_empty() {
        let (l, c) = lines.next().ok_or_else(|| parse_err(hline, "missing counts"))?;
        (l, c.split_whitespace().collect::<Vec<_>>())
    } else {
        (hline, tokens)
    };
    if counts.len() < 2 {
        return Err(parse_err(cline, "expected vertex and face counts"));
    }
    let nv: usize = parse_num(counts[0], cline)?;
    let nf: usize = parse_num(counts[1], cline)?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, s) = lines
            .next()
            .ok_or_else(|| parse_err(cline, "unexpected end of file in vertex block"))?;
        let t: Vec<&str> = s.split_whitespace().collect();
        if t.len() < 3 {
            return Err(parse_err(l, "vertex needs 3 coordinates"));
        }
        vertices.push(Point3::new(
            parse_num(t[0], l)?,
            parse_num(t[1], l)?,
            parse_num(t[2], l)?,
        ));
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, s) = lines
            .next()
            .ok_or_else(|| parse_err(cline, "unexpected end of file in face block"))?;
        let t: Vec<&str> = s.split_whitespace().collect();
        let count: usize = parse_num(t.first().copied().unwrap_or(""), l)?;
        if t.len() < count + 1 {
            return Err(parse_err(l, "face line shorter than its vertex count"));
        }
        let poly = t[1..=count]
            .iter()
            .map(|tok| parse_num::<usize>(tok, l))
            .collect::<Result<Vec<_>>>()?;
        push_polygon(&mut faces, &poly, l)?;
    }
    TriangleMesh::new(vertices, faces)
}

pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let l = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut t = line.split_whitespace();
        match t.next() {
            Some("v") => {
                let c: Vec<&str> = t.collect();
                if c.len() < 3 {
                    return Err(parse_err(l, "vertex needs 3 coordinates"));
                }
                vertices.push(Point3::new(
                    parse_num(c[0], l)?,
                    parse_num(c[1], l)?,
                    parse_num(c[2], l)?,
                ));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in t {
                    let head = tok.split('/').next().unwrap_or("");
                    let idx: i64 = parse_num(head, l)?;
                    let resolved = if idx > 0 {
                        idx - 1
                    } else if idx < 0 {
                        vertices.len() as i64 + idx
                    } else {
                        return Err(parse_err(l, "OBJ indices are 1-based; got 0"));
                    };
                    if resolved < 0 {
                        return Err(parse_err(l, format!("relative index {idx} before first vertex")));
                    }
                    poly.push(resolved as usize);
                }
                push_polygon(&mut faces, &poly, l)?;
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

pub fn to_off_string(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    writeln!(s, "OFF").unwrap();
    writeln!(s, "{} {} 0", mesh.n_vertices(), mesh.n_faces()).unwrap();
    for v in mesh.vertices() {
        writeln!(s, "{:?} {:?} {:?}", v.x, v.y, v.z).unwrap();
    }
    for f in mesh.faces() {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    s
}

pub fn to_obj_string(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    for v in mesh.vertices() {
        writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z).unwrap();
    }
    for f in mesh.faces() {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

pub fn write_off(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), to_off_string(mesh).as_bytes())
}

pub fn write_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), to_obj_string(mesh).as_bytes())
}

//! File formats shared across the pipeline.
//!
//! - point maps: binary little-endian PLY with float `x,y,z,confidence`
//! - cameras: one JSON document listing per-view `R`, `t`, `K` (and
//!   optional estimated poses `R_est`, `t_est`)
//! - meshes: ASCII OBJ and binary little-endian PLY
//! - images: 8-bit PNG plus float PFM for tests
//! - metrics and run logs: JSON / newline-delimited JSON

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geoinit::CameraModel;
use crate::meshx::TriangleMesh;
use crate::{Error, Result};

// --- point-map PLY --------------------------------------------------------

pub fn write_pointmap_ply(path: &Path, points: &[[f64; 3]], confidence: &[f64]) -> Result<()> {
    assert_eq!(points.len(), confidence.len());
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float confidence\nend_header\n",
        points.len()
    )?;
    for (p, &c) in points.iter().zip(confidence) {
        for a in 0..3 {
            w.write_all(&(p[a] as f32).to_le_bytes())?;
        }
        w.write_all(&(c as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pointmap_ply(path: &Path) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = PlyHeader::parse(&mut r, path)?;
    if header.vertex_props != ["x", "y", "z", "confidence"] {
        return Err(Error::format(
            path,
            format!("expected x,y,z,confidence float properties, got {:?}", header.vertex_props),
        ));
    }
    let mut points = Vec::with_capacity(header.vertex_count);
    let mut conf = Vec::with_capacity(header.vertex_count);
    let mut buf = [0u8; 16];
    for _ in 0..header.vertex_count {
        r.read_exact(&mut buf)?;
        let f = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64;
        points.push([f(0), f(4), f(8)]);
        conf.push(f(12));
    }
    Ok((points, conf))
}

// --- mesh PLY / OBJ -------------------------------------------------------

pub fn write_mesh_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for v in &mesh.vertices {
        for a in 0..3 {
            w.write_all(&(v[a] as f32).to_le_bytes())?;
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for &i in t {
            w.write_all(&i.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_mesh_ply(path: &Path) -> Result<TriangleMesh> {
    let mut r = BufReader::new(File::open(path)?);
    let header = PlyHeader::parse(&mut r, path)?;
    if header.vertex_props.len() < 3 || header.vertex_props[..3] != ["x", "y", "z"] {
        return Err(Error::format(path, "expected float x,y,z vertex properties"));
    }
    let extra = header.vertex_props.len() - 3;
    let mut vertices = Vec::with_capacity(header.vertex_count);
    let mut buf = vec![0u8; 4 * (3 + extra)];
    for _ in 0..header.vertex_count {
        r.read_exact(&mut buf)?;
        let f = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64;
        vertices.push([f(0), f(4), f(8)]);
    }
    let mut triangles = Vec::with_capacity(header.face_count);
    for _ in 0..header.face_count {
        let mut n = [0u8; 1];
        r.read_exact(&mut n)?;
        if n[0] != 3 {
            return Err(Error::format(path, format!("non-triangular face ({} vertices)", n[0])));
        }
        let mut idx = [0u8; 12];
        r.read_exact(&mut idx)?;
        let g = |o: usize| u32::from_le_bytes(idx[o..o + 4].try_into().unwrap());
        triangles.push([g(0), g(4), g(8)]);
    }
    Ok(TriangleMesh { vertices, triangles })
}

struct PlyHeader {
    vertex_count: usize,
    vertex_props: Vec<String>,
    face_count: usize,
}

impl PlyHeader {
    fn parse(r: &mut impl BufRead, path: &Path) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != "ply" {
            return Err(Error::format(path, "not a PLY file"));
        }
        let mut vertex_count = 0;
        let mut face_count = 0;
        let mut vertex_props = Vec::new();
        let mut current = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::format(path, "unterminated header"));
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.as_slice() {
                ["end_header"] => break,
                ["comment", ..] => {}
                ["format", "binary_little_endian", "1.0"] => {}
                ["format", other, ..] => {
                    return Err(Error::format(path, format!("unsupported format {other}")));
                }
                ["element", name, count] => {
                    current = name.to_string();
                    let count: usize = count
                        .parse()
                        .map_err(|_| Error::format(path, "bad element count"))?;
                    match current.as_str() {
                        "vertex" => vertex_count = count,
                        "face" => face_count = count,
                        other => {
                            return Err(Error::format(path, format!("unsupported element {other}")))
                        }
                    }
                }
                ["property", "float", name] if current == "vertex" => {
                    vertex_props.push(name.to_string());
                }
                ["property", "list", "uchar", "uint", "vertex_indices"] if current == "face" => {}
                other => {
                    return Err(Error::format(path, format!("unsupported header line {other:?}")));
                }
            }
        }
        Ok(PlyHeader {
            vertex_count,
            vertex_props,
            face_count,
        })
    }
}

pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let r = BufReader::new(File::open(path)?);
    let mut mesh = TriangleMesh::default();
    for line in r.lines() {
        let line = line?;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut v = [0.0; 3];
                for x in v.iter_mut() {
                    *x = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::format(path, "bad vertex line"))?;
                }
                mesh.vertices.push(v);
            }
            Some("f") => {
                let mut idx = [0u32; 3];
                for x in idx.iter_mut() {
                    let t = tokens
                        .next()
                        .ok_or_else(|| Error::format(path, "bad face line"))?;
                    let first = t.split('/').next().unwrap_or(t);
                    let one_based: i64 = first
                        .parse()
                        .map_err(|_| Error::format(path, "bad face index"))?;
                    if one_based < 1 {
                        return Err(Error::format(path, "negative face indices unsupported"));
                    }
                    *x = (one_based - 1) as u32;
                }
                if tokens.next().is_some() {
                    return Err(Error::format(path, "non-triangular face in OBJ"));
                }
                mesh.triangles.push(idx);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

/// Load either mesh format by extension; bare vertices are fine (point sets).
pub fn read_mesh_auto(path: &Path) -> Result<TriangleMesh> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => read_obj(path),
        Some("ply") => {
            // mesh PLY or pointmap PLY, both yield vertices
            match read_mesh_ply(path) {
                Ok(m) => Ok(m),
                Err(_) => {
                    let (points, _) = read_pointmap_ply(path)?;
                    Ok(TriangleMesh {
                        vertices: points,
                        triangles: Vec::new(),
                    })
                }
            }
        }
        _ => Err(Error::format(path, "unknown mesh extension (want .obj or .ply)")),
    }
}

// --- PFM ------------------------------------------------------------------

/// Write a PFM image; `channels` must be 1 or 3. Data is row-major
/// top-to-bottom with `channels` floats per pixel; the file stores rows
/// bottom-to-top with a negative (little-endian) scale, per convention.
pub fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    assert!(channels == 1 || channels == 3);
    assert_eq!(data.len(), width * height * channels);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{}\n{} {}\n-1.0\n", if channels == 3 { "PF" } else { "Pf" }, width, height)?;
    for row in (0..height).rev() {
        for col in 0..width {
            for c in 0..channels {
                let v = data[(row * width + col) * channels + c] as f32;
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line)?;
        header.push_str(&line);
    }
    let mut tokens = header.split_whitespace();
    let channels = match tokens.next() {
        Some("PF") => 3,
        Some("Pf") => 1,
        _ => return Err(Error::format(path, "not a PFM file")),
    };
    let width: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(path, "bad width"))?;
    let height: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(path, "bad height"))?;
    let scale: f64 = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(path, "bad scale"))?;
    if scale >= 0.0 {
        return Err(Error::format(path, "big-endian PFM unsupported"));
    }
    let mut raw = vec![0u8; width * height * channels * 4];
    r.read_exact(&mut raw)?;
    let mut data = vec![0.0; width * height * channels];
    for row in 0..height {
        let src_row = height - 1 - row;
        for col in 0..width {
            for c in 0..channels {
                let o = (src_row * width + col) * channels * 4 + c * 4;
                let v = f32::from_le_bytes(raw[o..o + 4].try_into().unwrap());
                data[(row * width + col) * channels + c] = v as f64;
            }
        }
    }
    Ok((width, height, channels, data))
}

// --- PNG ------------------------------------------------------------------

pub fn write_png_rgb(path: &Path, width: u32, height: u32, rgb: &[[f64; 3]]) -> Result<()> {
    let mut img = image::RgbImage::new(width, height);
    for (i, px) in rgb.iter().enumerate() {
        let x = (i as u32) % width;
        let y = (i as u32) / width;
        img.put_pixel(
            x,
            y,
            image::Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]),
        );
    }
    img.save(path)
        .map_err(|e| Error::format(path, format!("png write failed: {e}")))?;
    Ok(())
}

pub fn write_png_gray(path: &Path, width: u32, height: u32, gray: &[f64]) -> Result<()> {
    let mut img = image::GrayImage::new(width, height);
    for (i, &v) in gray.iter().enumerate() {
        let x = (i as u32) % width;
        let y = (i as u32) / width;
        img.put_pixel(x, y, image::Luma([to_u8(v)]));
    }
    img.save(path)
        .map_err(|e| Error::format(path, format!("png write failed: {e}")))?;
    Ok(())
}

pub fn read_png_rgb(path: &Path) -> Result<(u32, u32, Vec<[f64; 3]>)> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("png read failed: {e}")))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0])
        .collect();
    Ok((w, h, data))
}

pub fn read_png_gray(path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("png read failed: {e}")))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Ok((w, h, data))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// --- cameras.json ---------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewJson {
    /// Row-major 3x3 world-to-camera rotation.
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    /// Row-major 3x3 intrinsics.
    pub k: Vec<f64>,
    pub width: u32,
    pub height: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_est: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_est: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CamerasJson {
    pub views: Vec<ViewJson>,
}

impl ViewJson {
    pub fn from_camera(cam: &CameraModel) -> Self {
        ViewJson {
            r: cam.r.transpose().as_slice().to_vec(), // nalgebra stores column-major
            t: cam.t.as_slice().to_vec(),
            k: cam.k.transpose().as_slice().to_vec(),
            width: cam.width,
            height: cam.height,
            r_est: None,
            t_est: None,
        }
    }

    pub fn camera(&self, path: &Path) -> Result<CameraModel> {
        if self.r.len() != 9 || self.t.len() != 3 || self.k.len() != 9 {
            return Err(Error::format(path, "R/t/K must have 9/3/9 entries"));
        }
        Ok(CameraModel {
            r: Matrix3::from_row_slice(&self.r),
            t: Vector3::from_column_slice(&self.t),
            k: Matrix3::from_row_slice(&self.k),
            width: self.width,
            height: self.height,
        })
    }

    pub fn estimated_pose(&self, path: &Path) -> Result<Option<(Matrix3<f64>, Vector3<f64>)>> {
        match (&self.r_est, &self.t_est) {
            (Some(r), Some(t)) => {
                if r.len() != 9 || t.len() != 3 {
                    return Err(Error::format(path, "R_est/t_est must have 9/3 entries"));
                }
                Ok(Some((Matrix3::from_row_slice(r), Vector3::from_column_slice(t))))
            }
            (None, None) => Ok(None),
            _ => Err(Error::format(path, "R_est and t_est must be given together")),
        }
    }
}

pub fn write_cameras_json(path: &Path, cams: &CamerasJson) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, cams)?;
    w.flush()?;
    Ok(())
}

pub fn read_cameras_json(path: &Path) -> Result<CamerasJson> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

// --- metrics and run log --------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsJson {
    pub chamfer: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
}

/// One line of the newline-delimited JSON training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunLogLine {
    pub iter: u64,
    pub photo: f64,
    pub normal: f64,
    pub eik: f64,
    pub smooth: f64,
    pub local_eik: f64,
    pub mask: f64,
    pub ray_eik: f64,
    pub nd_mean: f64,
    pub nd_med: f64,
    pub total: f64,
    pub s: f64,
    pub level: u8,
    pub voxel_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdivided: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pointmap_ply_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("pm.ply");
        let points = vec![[0.5, -1.25, 3.0], [0.0009765625, 2.0, -7.5]];
        let conf = vec![1.0, 0.25];
        write_pointmap_ply(&path, &points, &conf).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let (p2, c2) = read_pointmap_ply(&path).unwrap();
        assert_eq!(p2, points);
        assert_eq!(c2, conf);
        write_pointmap_ply(&path, &p2, &c2).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn mesh_formats_roundtrip() {
        let dir = tempdir().unwrap();
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let obj = dir.path().join("m.obj");
        write_obj(&obj, &mesh).unwrap();
        let back = read_obj(&obj).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.triangles, mesh.triangles);

        let ply = dir.path().join("m.ply");
        write_mesh_ply(&ply, &mesh).unwrap();
        let back = read_mesh_ply(&ply).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.triangles, mesh.triangles);
    }

    #[test]
    fn pfm_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pfm");
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 * 0.125).collect();
        write_pfm(&path, 3, 2, 3, &data).unwrap();
        let (w, h, c, back) = read_pfm(&path).unwrap();
        assert_eq!((w, h, c), (3, 2, 3));
        assert_eq!(back, data);
    }

    #[test]
    fn cameras_json_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cameras.json");
        let cam = CameraModel {
            r: Matrix3::identity(),
            t: Vector3::new(0.0, 0.0, 3.0),
            k: Matrix3::new(100.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0),
            width: 64,
            height: 64,
        };
        let mut view = ViewJson::from_camera(&cam);
        view.r_est = Some(view.r.clone());
        view.t_est = Some(view.t.clone());
        write_cameras_json(&path, &CamerasJson { views: vec![view] }).unwrap();
        let back = read_cameras_json(&path).unwrap();
        assert_eq!(back.views.len(), 1);
        let cam2 = back.views[0].camera(&path).unwrap();
        assert_eq!(cam2.r, cam.r);
        assert_eq!(cam2.t, cam.t);
        assert_eq!(cam2.k, cam.k);
        assert!(back.views[0].estimated_pose(&path).unwrap().is_some());
    }
}

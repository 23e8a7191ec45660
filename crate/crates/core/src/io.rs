//! File formats: PNG images, float maps, PLY/OBJ geometry and cloud checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussians::{sh_rest_count, GaussianCloud, Quat};
use crate::imageproc::Image;

pub const CLOUD_MAGIC: &[u8; 16] = b"VASPLAT.CLOUD.v1";

/// Writes an RGB (or single-channel, replicated) image as 8-bit PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let p = &img.data[i * img.channels..(i + 1) * img.channels];
        *px = match img.channels {
            1 => image::Rgb([q(p[0]); 3]),
            _ => image::Rgb([q(p[0]), q(p[1]), q(p[2])]),
        };
    }
    buf.save(path)?;
    Ok(())
}

/// Loads any image the `image` crate understands as RGB in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::from_vec(w as usize, h as usize, 3, rgb.as_raw().iter().map(|v| *v as f64 / 255.0).collect())
}

/// Sidecar metadata of a float map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FloatMapHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Raw little-endian f32 samples plus a `<path>.json` sidecar with the shape.
pub fn write_floatmap(path: &Path, header: FloatMapHeader, data: &[f64]) -> Result<()> {
    if data.len() != header.width * header.height * header.channels {
        return Err(Error::ShapeMismatch(format!("{} samples for {header:?}", data.len())));
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    std::fs::write(sidecar(path), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

pub fn read_floatmap(path: &Path) -> Result<(FloatMapHeader, Vec<f64>)> {
    let header: FloatMapHeader = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
    let bytes = std::fs::read(path)?;
    let n = header.width * header.height * header.channels;
    if bytes.len() != n * 4 {
        return Err(Error::BadHeader(format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), n * 4)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok((header, data))
}

/// Vertices, optional per-vertex colours in `[0, 1]` and triangles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<Vector3<f64>>,
    pub colors: Option<Vec<Vector3<f64>>>,
    pub faces: Vec<[u32; 3]>,
}

/// Binary little-endian PLY with float positions, optional uchar colours and
/// uchar-counted int faces.
pub fn write_ply(path: &Path, ply: &PlyData) -> Result<()> {
    if let Some(c) = &ply.colors {
        if c.len() != ply.vertices.len() {
            return Err(Error::ShapeMismatch("one colour per vertex expected".into()));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}", ply.vertices.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if ply.colors.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "element face {}\nproperty list uchar int vertex_indices\nend_header", ply.faces.len())?;
    for (i, v) in ply.vertices.iter().enumerate() {
        for c in v.iter() {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        if let Some(cols) = &ply.colors {
            for c in cols[i].iter() {
                w.write_all(&[(c.clamp(0.0, 1.0) * 255.0).round() as u8])?;
            }
        }
    }
    for f in &ply.faces {
        w.write_all(&[3u8])?;
        for i in f {
            w.write_all(&(*i as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
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
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return Err(Error::BadHeader(format!("unknown PLY scalar type `{s}`"))),
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

    fn read_le(self, r: &mut impl Read) -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b[..self.size()])?;
        Ok(match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b),
        })
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug)]
struct Property {
    name: String,
    kind: Scalar,
    list_count: Option<Scalar>,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Reads ASCII or binary little-endian PLY. Vertex `x, y, z` are required;
/// `red, green, blue` (integer 0-255 or float 0-1) and a face list are optional.
/// Faces with more than three corners are fanned into triangles.
pub fn read_ply(path: &Path) -> Result<PlyData> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::BadHeader("unexpected end of PLY header".into()));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(Error::BadHeader(format!("{} is not a PLY file", path.display())));
    }
    let mut ascii = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["format", f, _] => {
                ascii = Some(match *f {
                    "ascii" => true,
                    "binary_little_endian" => false,
                    other => return Err(Error::UnsupportedFormat(format!("PLY encoding {other}"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::BadHeader(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", c, k, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::BadHeader("property before element".into()))?;
                el.props.push(Property { name: name.to_string(), kind: Scalar::parse(k)?, list_count: Some(Scalar::parse(c)?) });
            }
            ["property", k, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::BadHeader("property before element".into()))?;
                el.props.push(Property { name: name.to_string(), kind: Scalar::parse(k)?, list_count: None });
            }
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(Error::BadHeader(format!("unrecognised PLY header line `{l}`"))),
        }
    }
    let ascii = ascii.ok_or_else(|| Error::BadHeader("PLY header lacks a format line".into()))?;
    let mut words: Box<dyn Iterator<Item = String>> = if ascii {
        let mut rest = String::new();
        r.read_to_string(&mut rest)?;
        Box::new(rest.split_whitespace().map(str::to_string).collect::<Vec<_>>().into_iter())
    } else {
        Box::new(std::iter::empty())
    };
    let mut value = |kind: Scalar, r: &mut BufReader<File>| -> Result<f64> {
        if ascii {
            let w = words.next().ok_or_else(|| Error::BadHeader("PLY body ended early".into()))?;
            w.parse::<f64>().map_err(|_| Error::BadHeader(format!("bad PLY value `{w}`")))
        } else {
            kind.read_le(r)
        }
    };

    let mut out = PlyData::default();
    for el in &elements {
        let find = |n: &str| el.props.iter().position(|p| p.name == n);
        let xyz = [find("x"), find("y"), find("z")];
        let rgb = [find("red"), find("green"), find("blue")];
        let has_rgb = rgb.iter().all(Option::is_some);
        let faces = find("vertex_indices").or_else(|| find("vertex_index"));
        if el.name == "vertex" && xyz.iter().any(Option::is_none) {
            return Err(Error::BadHeader("PLY vertices need x, y and z".into()));
        }
        if el.name == "vertex" && has_rgb {
            out.colors = Some(Vec::with_capacity(el.count));
        }
        for _ in 0..el.count {
            let mut scalars = vec![0.0; el.props.len()];
            for (k, p) in el.props.iter().enumerate() {
                match p.list_count {
                    None => scalars[k] = value(p.kind, &mut r)?,
                    Some(c) => {
                        let n = value(c, &mut r)? as usize;
                        let idx = (0..n).map(|_| value(p.kind, &mut r)).collect::<Result<Vec<_>>>()?;
                        if el.name == "face" && Some(k) == faces {
                            for j in 1..n.saturating_sub(1) {
                                out.faces.push([idx[0] as u32, idx[j] as u32, idx[j + 1] as u32]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                out.vertices.push(Vector3::new(
                    scalars[xyz[0].unwrap()],
                    scalars[xyz[1].unwrap()],
                    scalars[xyz[2].unwrap()],
                ));
                if let Some(cols) = &mut out.colors {
                    let c = Vector3::from_fn(|i, _| {
                        let k = rgb[i].unwrap();
                        if el.props[k].kind.is_integer() {
                            scalars[k] / 255.0
                        } else {
                            scalars[k]
                        }
                    });
                    cols.push(c);
                }
            }
        }
    }
    let n = out.vertices.len() as u32;
    if out.faces.iter().flatten().any(|i| *i >= n) {
        return Err(Error::BadHeader("PLY face index out of range".into()));
    }
    Ok(out)
}

/// Text OBJ with `v` and `f` records only.
pub fn write_obj(path: &Path, ply: &PlyData) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in &ply.vertices {
        writeln!(w, "v {} {} {}", v.x as f32, v.y as f32, v.z as f32)?;
    }
    for f in &ply.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_obj(path: &Path) -> Result<PlyData> {
    let text = std::fs::read_to_string(path)?;
    let mut out = PlyData::default();
    let bad = |l: &str| Error::BadHeader(format!("bad OBJ line `{l}`"));
    for l in text.lines() {
        let mut t = l.split_whitespace();
        match t.next() {
            Some("v") => {
                let c: Vec<f64> = t.take(3).map(|s| s.parse().map_err(|_| bad(l))).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad(l));
                }
                out.vertices.push(Vector3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = t
                    .map(|s| {
                        let head = s.split('/').next().unwrap_or("");
                        head.parse::<u32>().ok().filter(|i| *i >= 1).map(|i| i - 1).ok_or_else(|| bad(l))
                    })
                    .collect::<Result<_>>()?;
                for j in 1..idx.len().saturating_sub(1) {
                    out.faces.push([idx[0], idx[j], idx[j + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Cloud checkpoint: 16-byte magic, `u64` count and SH degree, then per
/// primitive position, rotation, log-scale, opacity logit, colour and SH rest,
/// all little-endian `f64`.
pub fn save_cloud(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CLOUD_MAGIC)?;
    w.write_all(&(cloud.len() as u64).to_le_bytes())?;
    w.write_all(&(cloud.sh_degree as u64).to_le_bytes())?;
    for i in 0..cloud.len() {
        let vals = cloud.positions[i]
            .iter()
            .chain(cloud.rotations[i].iter())
            .chain(cloud.log_scales[i].iter())
            .chain(std::iter::once(&cloud.opacity_logits[i]))
            .chain(cloud.colors[i].iter())
            .chain(cloud.sh_coeffs(i).iter().flat_map(|c| c.iter()));
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic).map_err(|_| Error::BadHeader("truncated cloud checkpoint".into()))?;
    if &magic != CLOUD_MAGIC {
        return Err(Error::BadHeader(format!("{} is not a cloud checkpoint", path.display())));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let truncated = || Error::BadHeader("truncated cloud checkpoint".into());
    if body.len() < 16 {
        return Err(truncated());
    }
    let word = |k: usize| -> [u8; 8] { body[k * 8..k * 8 + 8].try_into().unwrap() };
    let count = u64::from_le_bytes(word(0)) as usize;
    let degree = u64::from_le_bytes(word(1)) as usize;
    if degree > 2 {
        return Err(Error::BadHeader(format!("SH degree {degree} in checkpoint")));
    }
    let k = sh_rest_count(degree);
    let per = 14 + 3 * k;
    let words = (body.len() - 16) / 8;
    if (body.len() - 16) % 8 != 0 || words < count.saturating_mul(per) {
        return Err(truncated());
    }
    if words > count * per {
        return Err(Error::BadHeader("trailing bytes after cloud checkpoint".into()));
    }
    let f = |k: usize| f64::from_le_bytes(word(k + 2));
    let v3 = |k: usize| Vector3::new(f(k), f(k + 1), f(k + 2));
    let mut cloud = GaussianCloud::empty();
    cloud.set_sh_degree(degree)?;
    for i in 0..count {
        let b = i * per;
        cloud.positions.push(v3(b));
        cloud.rotations.push(Quat::new(f(b + 3), f(b + 4), f(b + 5), f(b + 6)));
        cloud.log_scales.push(v3(b + 7));
        cloud.opacity_logits.push(f(b + 10));
        cloud.colors.push(v3(b + 11));
        for j in 0..k {
            cloud.sh_rest.push(v3(b + 14 + 3 * j));
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::init_random_sphere;
    use tempfile::tempdir;

    #[test]
    fn png_round_trip_quantises_to_8_bit() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(5, 4, 3, |x, y, c| ((x * 7 + y * 3 + c * 11) % 256) as f64 / 255.0).unwrap();
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!((back.width, back.height, back.channels), (5, 4, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn floatmap_round_trip_to_f32() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.f32bin");
        let h = FloatMapHeader { width: 3, height: 2, channels: 1 };
        let data = [1.0, 2.5, -3.25, 1e-3, 7.0, 0.1];
        write_floatmap(&p, h, &data).unwrap();
        let (h2, back) = read_floatmap(&p).unwrap();
        assert_eq!(h, h2);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert!(write_floatmap(&p, h, &data[..5]).is_err());
    }

    fn sample_mesh() -> PlyData {
        PlyData {
            vertices: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.25), Vector3::new(0.1, 0.2, 0.3)],
            colors: Some(vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, 0.0, 1.0), Vector3::repeat(0.2)]),
            faces: vec![[0, 1, 2], [1, 3, 2]],
        }
    }

    #[test]
    fn ply_binary_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.ply");
        let m = sample_mesh();
        write_ply(&p, &m).unwrap();
        let back = read_ply(&p).unwrap();
        assert_eq!(back.faces, m.faces);
        for (a, b) in m.vertices.iter().zip(&back.vertices) {
            assert_eq!(a.map(|v| v as f32 as f64), *b);
        }
        let c = back.colors.unwrap();
        assert!((c[3] - Vector3::repeat(51.0 / 255.0)).norm() < 1e-12);
    }

    #[test]
    fn ply_empty_mesh_is_valid() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.ply");
        write_ply(&p, &PlyData::default()).unwrap();
        let back = read_ply(&p).unwrap();
        assert!(back.vertices.is_empty() && back.faces.is_empty());
    }

    #[test]
    fn ply_ascii_with_quads_and_float_colours() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.ply");
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\n\
                    property float red\nproperty float green\nproperty float blue\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n\
                    0 0 0 1 0 0\n1 0 0 0 1 0\n1 1 0 0 0 1\n0 1 0 0.5 0.5 0.5\n4 0 1 2 3\n";
        std::fs::write(&p, text).unwrap();
        let m = read_ply(&p).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert_eq!(m.colors.unwrap()[3], Vector3::repeat(0.5));
    }

    #[test]
    fn ply_rejects_garbage() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.ply");
        std::fs::write(&p, "not a ply\n").unwrap();
        assert!(matches!(read_ply(&p), Err(Error::BadHeader(_))));
        std::fs::write(&p, "ply\nformat binary_big_endian 1.0\nend_header\n").unwrap();
        assert!(matches!(read_ply(&p), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn obj_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.obj");
        let m = sample_mesh();
        write_obj(&p, &m).unwrap();
        let back = read_obj(&p).unwrap();
        assert_eq!(back.faces, m.faces);
        for (a, b) in m.vertices.iter().zip(&back.vertices) {
            assert_eq!(a.map(|v| v as f32), b.map(|v| v as f32));
        }
    }

    #[test]
    fn cloud_checkpoint_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let mut cloud = init_random_sphere(17, 1.3, Vector3::new(0.1, 0.0, -0.2), 4).unwrap();
        cloud.set_sh_degree(2).unwrap();
        cloud.sh_rest[5] = Vector3::new(0.3, -0.1, 0.7);
        cloud.opacity_logits[3] = -2.75;
        save_cloud(&cloud, &p).unwrap();
        assert_eq!(load_cloud(&p).unwrap(), cloud);

        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..16], CLOUD_MAGIC);
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_cloud(&p), Err(Error::BadHeader(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_cloud(&p), Err(Error::BadHeader(_))));
    }
}

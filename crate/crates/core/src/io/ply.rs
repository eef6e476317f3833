//! PLY point-cloud ingestion and export.
//!
//! Positions are required; normals, per-point radii and descriptor
//! channels are picked up when present. Descriptors come either from
//! `red`/`green`/`blue` color properties (8-bit values normalized to
//! [0,1]) or from `d0`, `d1`, ... float properties. Clouds without a
//! `radius` property get radii estimated from nearest-neighbor spacing.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::scene::{estimate_world_radii, DescriptorSpace, PointCloud, DEFAULT_NEIGHBORS};
use crate::{Error, Result};

/// Radius assigned when the cloud is too small for neighbor estimation.
const FALLBACK_RADIUS: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    F32,
    F64,
    U8,
}

impl ScalarType {
    fn parse(token: &str, line: usize) -> Result<ScalarType> {
        match token {
            "float" | "float32" => Ok(ScalarType::F32),
            "double" | "float64" => Ok(ScalarType::F64),
            "uchar" | "uint8" => Ok(ScalarType::U8),
            other => Err(Error::Parse(format!(
                "line {line}: unsupported property type {other:?} (float, double, uchar)"
            ))),
        }
    }

    fn size(self) -> usize {
        match self {
            ScalarType::F32 => 4,
            ScalarType::F64 => 8,
            ScalarType::U8 => 1,
        }
    }
}

struct Property {
    name: String,
    ty: ScalarType,
}

struct Header {
    format: PlyFormat,
    count: usize,
    properties: Vec<Property>,
    space: DescriptorSpace,
    header_len: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let mut line_start = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut count = None;
    let mut properties = Vec::new();
    let mut space = DescriptorSpace::Linear;
    let mut in_vertex_element = false;

    loop {
        let rest = &bytes[line_start..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(Error::Parse(format!("{}: header has no end_header line", path.display())));
        };
        let line = String::from_utf8_lossy(&rest[..nl]);
        let line = line.trim_end_matches('\r');
        line_no += 1;
        line_start += nl + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();

        if line_no == 1 {
            if tokens != ["ply"] {
                return Err(Error::Parse(format!("{}: missing ply magic", path.display())));
            }
            continue;
        }
        match tokens.first().copied() {
            Some("format") => {
                format = Some(match tokens.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(Error::Parse(format!(
                            "line {line_no}: unsupported format {other:?}"
                        )))
                    }
                });
            }
            Some("comment") => {
                if tokens.get(1).copied() == Some("descriptor_space") {
                    space = match tokens.get(2).copied() {
                        Some("linear") => DescriptorSpace::Linear,
                        Some("logarithmic") => DescriptorSpace::Logarithmic,
                        other => {
                            return Err(Error::Parse(format!(
                                "line {line_no}: unknown descriptor_space {other:?}"
                            )))
                        }
                    };
                }
            }
            Some("element") => {
                if tokens.get(1).copied() == Some("vertex") {
                    let n: usize = tokens
                        .get(2)
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Parse(format!("line {line_no}: bad vertex count")))?;
                    count = Some(n);
                    in_vertex_element = true;
                } else {
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if !in_vertex_element {
                    continue;
                }
                if tokens.get(1).copied() == Some("list") {
                    return Err(Error::Parse(format!(
                        "line {line_no}: list properties are not supported"
                    )));
                }
                let ty = ScalarType::parse(
                    tokens.get(1).copied().unwrap_or(""),
                    line_no,
                )?;
                let name = tokens
                    .get(2)
                    .ok_or_else(|| Error::Parse(format!("line {line_no}: property missing name")))?;
                properties.push(Property { name: (*name).to_string(), ty });
            }
            Some("end_header") => {
                let format = format
                    .ok_or_else(|| Error::Parse(format!("{}: no format line", path.display())))?;
                let count = count.ok_or_else(|| {
                    Error::Parse(format!("{}: no vertex element", path.display()))
                })?;
                return Ok(Header { format, count, properties, space, header_len: line_start });
            }
            _ => {}
        }
    }
}

/// Column layout resolved from the property list.
struct Layout {
    xyz: [usize; 3],
    normals: Option<[usize; 3]>,
    radius: Option<usize>,
    /// Descriptor columns in channel order plus a per-channel u8 flag.
    descriptors: Vec<(usize, bool)>,
}

fn resolve_layout(props: &[Property]) -> Result<Layout> {
    let find = |n: &str| props.iter().position(|p| p.name == n);
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => [a, b, c],
        _ => return Err(Error::Parse("vertex element lacks x/y/z properties".into())),
    };
    let normals = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        (None, None, None) => None,
        _ => return Err(Error::Parse("incomplete normal properties (need nx, ny, nz)".into())),
    };
    let radius = find("radius");

    let rgb: Vec<usize> = ["red", "green", "blue"].iter().filter_map(|n| find(n)).collect();
    let mut dn = Vec::new();
    loop {
        match find(&format!("d{}", dn.len())) {
            Some(i) => dn.push(i),
            None => break,
        }
    }
    let descriptors = if !dn.is_empty() {
        if rgb.len() == 3 {
            return Err(Error::Parse("both red/green/blue and d0.. descriptor properties".into()));
        }
        dn.iter().map(|&i| (i, props[i].ty == ScalarType::U8)).collect()
    } else if rgb.len() == 3 {
        rgb.iter().map(|&i| (i, props[i].ty == ScalarType::U8)).collect()
    } else {
        Vec::new()
    };
    Ok(Layout { xyz, normals, radius, descriptors })
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header = parse_header(&bytes, path)?;
    let layout = resolve_layout(&header.properties)?;
    let n = header.count;
    let ncols = header.properties.len();

    // One row of scalar values at a time, decoded per format.
    let mut row = vec![0.0f64; ncols];
    let mut positions = Vec::with_capacity(n);
    let mut normals = layout.normals.map(|_| Vec::with_capacity(n));
    let mut radii = layout.radius.map(|_| Vec::with_capacity(n));
    let dim = layout.descriptors.len().max(1);
    let mut descriptors = Vec::with_capacity(n * dim);

    let body = &bytes[header.header_len..];
    let mut ascii_tokens = None;
    let mut offset = 0usize;
    if header.format == PlyFormat::Ascii {
        let text = std::str::from_utf8(body)
            .map_err(|_| Error::Parse(format!("{}: non-utf8 ascii body", path.display())))?;
        ascii_tokens = Some(text.split_whitespace());
    }

    for v in 0..n {
        match header.format {
            PlyFormat::Ascii => {
                let tokens = ascii_tokens.as_mut().unwrap();
                for (c, prop) in header.properties.iter().enumerate() {
                    let tok = tokens.next().ok_or_else(|| {
                        Error::Parse(format!(
                            "{}: truncated at vertex {v}: expected {n} vertices",
                            path.display()
                        ))
                    })?;
                    row[c] = tok.parse::<f64>().map_err(|_| {
                        Error::Parse(format!(
                            "{}: vertex {v}: bad {} value {tok:?}",
                            path.display(),
                            prop.name
                        ))
                    })?;
                }
            }
            PlyFormat::BinaryLittleEndian => {
                for (c, prop) in header.properties.iter().enumerate() {
                    let sz = prop.ty.size();
                    let Some(raw) = body.get(offset..offset + sz) else {
                        return Err(Error::Parse(format!(
                            "{}: truncated at vertex {v}: expected {n} vertices",
                            path.display()
                        )));
                    };
                    row[c] = match prop.ty {
                        ScalarType::F32 => f32::from_le_bytes(raw.try_into().unwrap()) as f64,
                        ScalarType::F64 => f64::from_le_bytes(raw.try_into().unwrap()),
                        ScalarType::U8 => raw[0] as f64,
                    };
                    offset += sz;
                }
            }
        }
        positions.push(Vector3::new(row[layout.xyz[0]], row[layout.xyz[1]], row[layout.xyz[2]]));
        if let (Some(ns), Some(cols)) = (normals.as_mut(), layout.normals) {
            ns.push(Vector3::new(row[cols[0]], row[cols[1]], row[cols[2]]));
        }
        if let (Some(rs), Some(col)) = (radii.as_mut(), layout.radius) {
            rs.push(row[col]);
        }
        if layout.descriptors.is_empty() {
            descriptors.push(0.5);
        } else {
            for &(col, is_u8) in &layout.descriptors {
                descriptors.push(if is_u8 { row[col] / 255.0 } else { row[col] });
            }
        }
    }

    let world_radii = match radii {
        Some(r) => r,
        None if positions.len() > DEFAULT_NEIGHBORS => {
            estimate_world_radii(&positions, DEFAULT_NEIGHBORS)?
        }
        None => vec![FALLBACK_RADIUS; positions.len()],
    };
    let cloud = PointCloud {
        positions,
        normals,
        descriptors,
        descriptor_dim: dim,
        world_radii,
        descriptor_space: header.space,
    };
    cloud.validate()?;
    Ok(cloud)
}

pub fn save_ply(cloud: &PointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    cloud.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let space = match cloud.descriptor_space {
        DescriptorSpace::Linear => "linear",
        DescriptorSpace::Logarithmic => "logarithmic",
    };
    writeln!(w, "ply")?;
    writeln!(w, "format {fmt} 1.0")?;
    writeln!(w, "comment descriptor_space {space}")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property double {axis}")?;
    }
    if cloud.normals.is_some() {
        for axis in ["nx", "ny", "nz"] {
            writeln!(w, "property double {axis}")?;
        }
    }
    writeln!(w, "property double radius")?;
    for ch in 0..cloud.descriptor_dim {
        writeln!(w, "property double d{ch}")?;
    }
    writeln!(w, "end_header")?;

    let mut row: Vec<f64> = Vec::new();
    for i in 0..cloud.len() {
        row.clear();
        let p = cloud.positions[i];
        row.extend([p.x, p.y, p.z]);
        if let Some(ns) = &cloud.normals {
            row.extend([ns[i].x, ns[i].y, ns[i].z]);
        }
        row.push(cloud.world_radii[i]);
        row.extend_from_slice(cloud.descriptor(i));
        match format {
            PlyFormat::Ascii => {
                let text: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                writeln!(w, "{}", text.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in &row {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{key_uniform, Stream};
    use tempfile::tempdir;

    fn random_cloud(n: usize, dim: usize, with_normals: bool) -> PointCloud {
        let r = |s: u64, i: usize| key_uniform(s, Stream::Noise, i as u64, 0) * 2.0 - 1.0;
        PointCloud {
            positions: (0..n)
                .map(|i| Vector3::new(r(1, i), r(2, i), r(3, i)))
                .collect(),
            normals: with_normals.then(|| {
                (0..n)
                    .map(|i| Vector3::new(r(4, i), r(5, i), r(6, i)).normalize())
                    .collect()
            }),
            descriptors: (0..n * dim).map(|i| r(7, i).abs()).collect(),
            descriptor_dim: dim,
            world_radii: (0..n).map(|i| 0.01 + r(8, i).abs()).collect(),
            descriptor_space: DescriptorSpace::Logarithmic,
        }
    }

    #[test]
    fn one_point_ascii_cloud() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1.5 -2.0 3.25\n",
        )
        .unwrap();
        let cloud = load_ply(&path).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.positions[0], Vector3::new(1.5, -2.0, 3.25));
        assert_eq!(cloud.descriptor_dim, 1);
        assert_eq!(cloud.world_radii, vec![FALLBACK_RADIUS]);
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = random_cloud(10_000, 4, true);
        save_ply(&cloud, &path, PlyFormat::BinaryLittleEndian).unwrap();
        let back = load_ply(&path).unwrap();
        assert_eq!(back.positions, cloud.positions);
        assert_eq!(back.normals, cloud.normals);
        assert_eq!(back.descriptors, cloud.descriptors);
        assert_eq!(back.world_radii, cloud.world_radii);
        assert_eq!(back.descriptor_space, cloud.descriptor_space);
    }

    #[test]
    fn ascii_round_trip_is_exact() {
        // Shortest round-trip float printing makes even ascii lossless.
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = random_cloud(200, 2, false);
        save_ply(&cloud, &path, PlyFormat::Ascii).unwrap();
        let back = load_ply(&path).unwrap();
        assert_eq!(back.positions, cloud.positions);
        assert_eq!(back.descriptors, cloud.descriptors);
    }

    #[test]
    fn truncated_payload_names_the_vertex() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ply");
        let mut text = String::from(
            "ply\nformat ascii 1.0\nelement vertex 10\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        );
        for i in 0..9 {
            text.push_str(&format!("{i} 0 0\n"));
        }
        std::fs::write(&path, text).unwrap();
        let err = load_ply(&path).unwrap_err().to_string();
        assert!(err.contains("vertex 9"), "{err}");

        let path2 = dir.path().join("t2.ply");
        let cloud = random_cloud(10, 1, false);
        save_ply(&cloud, &path2, PlyFormat::BinaryLittleEndian).unwrap();
        let bytes = std::fs::read(&path2).unwrap();
        std::fs::write(&path2, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_ply(&path2).unwrap_err().to_string();
        assert!(err.contains("vertex 9"), "{err}");
    }

    #[test]
    fn uchar_colors_are_normalized() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rgb.ply");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(
            b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        );
        for (p, c) in [([0.0f64, 0.0, 1.0], [255u8, 0, 51]), ([1.0, 0.0, 2.0], [0, 128, 255])] {
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.extend_from_slice(&c);
        }
        std::fs::write(&path, bytes).unwrap();
        let cloud = load_ply(&path).unwrap();
        assert_eq!(cloud.descriptor_dim, 3);
        assert_eq!(cloud.descriptor(0), &[1.0, 0.0, 51.0 / 255.0]);
        assert_eq!(cloud.descriptor(1), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, "not a ply\n").unwrap();
        assert!(load_ply(&path).is_err());

        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nend_header\n0\n",
        )
        .unwrap();
        let err = load_ply(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported property type"), "{err}");

        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nend_header\n0 0 0 0\n",
        )
        .unwrap();
        let err = load_ply(&path).unwrap_err().to_string();
        assert!(err.contains("incomplete normal"), "{err}");
    }

    #[test]
    fn missing_radius_is_estimated_for_large_clouds() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.ply");
        let mut text = String::from(
            "ply\nformat ascii 1.0\nelement vertex 9\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        );
        for i in 0..3 {
            for j in 0..3 {
                text.push_str(&format!("{} {} 0\n", i as f64 * 0.1, j as f64 * 0.1));
            }
        }
        std::fs::write(&path, text).unwrap();
        let cloud = load_ply(&path).unwrap();
        assert!(cloud.world_radii.iter().all(|r| *r > 0.0 && *r < 1.0));
    }
}

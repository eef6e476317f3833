//! Plain-text camera and pose tables.
//!
//! Cameras: one line per camera, `id kind width height fx fy cx cy k1 k2
//! k3 k4`. Poses: one line per entry, `id qw qx qy qz tx ty tz` with a
//! world-to-camera convention. Lines starting with `#` are comments.

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::geometry::{CameraKind, CameraModel, Pose};
use crate::{Error, Result};

fn kind_name(kind: CameraKind) -> &'static str {
    match kind {
        CameraKind::PinholeDistorted => "pinhole",
        CameraKind::FisheyeEquidistant => "fisheye",
    }
}

fn parse_kind(token: &str, line: usize) -> Result<CameraKind> {
    match token {
        "pinhole" => Ok(CameraKind::PinholeDistorted),
        "fisheye" => Ok(CameraKind::FisheyeEquidistant),
        other => Err(Error::Parse(format!("line {line}: unknown camera kind {other:?}"))),
    }
}

pub fn save_cameras(cameras: &[CameraModel], path: &Path) -> Result<()> {
    let mut out = String::from("# id kind width height fx fy cx cy k1 k2 k3 k4\n");
    for (id, c) in cameras.iter().enumerate() {
        out.push_str(&format!(
            "{id} {} {} {} {} {} {} {} {} {} {} {}\n",
            kind_name(c.kind),
            c.width,
            c.height,
            c.fx,
            c.fy,
            c.cx,
            c.cy,
            c.distortion[0],
            c.distortion[1],
            c.distortion[2],
            c.distortion[3],
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    let text = fs::read_to_string(path)?;
    let mut cameras = Vec::new();
    for (line_no, line) in data_lines(&text) {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 12 {
            return Err(Error::Parse(format!(
                "{}: line {line_no}: expected 12 fields, got {}",
                path.display(),
                t.len()
            )));
        }
        let id: usize = t[0]
            .parse()
            .map_err(|_| Error::Parse(format!("line {line_no}: bad camera id {:?}", t[0])))?;
        if id != cameras.len() {
            return Err(Error::Parse(format!(
                "line {line_no}: camera ids must be dense and ordered, got {id}"
            )));
        }
        let kind = parse_kind(t[1], line_no)?;
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Parse(format!("line {line_no}: bad number {s:?}")))
        };
        let width: u32 = t[2]
            .parse()
            .map_err(|_| Error::Parse(format!("line {line_no}: bad width {:?}", t[2])))?;
        let height: u32 = t[3]
            .parse()
            .map_err(|_| Error::Parse(format!("line {line_no}: bad height {:?}", t[3])))?;
        cameras.push(CameraModel::new(
            kind,
            width,
            height,
            num(t[4])?,
            num(t[5])?,
            num(t[6])?,
            num(t[7])?,
            [num(t[8])?, num(t[9])?, num(t[10])?, num(t[11])?],
        )?);
    }
    Ok(cameras)
}

pub fn save_poses(poses: &[Pose], path: &Path) -> Result<()> {
    let mut out = String::from("# id qw qx qy qz tx ty tz (world-to-camera)\n");
    for (id, p) in poses.iter().enumerate() {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.rotation));
        out.push_str(&format!(
            "{id} {} {} {} {} {} {} {}\n",
            q.w, q.i, q.j, q.k, p.translation.x, p.translation.y, p.translation.z
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (line_no, line) in data_lines(&text) {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 8 {
            return Err(Error::Parse(format!(
                "{}: line {line_no}: expected 8 fields, got {}",
                path.display(),
                t.len()
            )));
        }
        let mut v = [0.0f64; 8];
        for (slot, tok) in v.iter_mut().zip(&t) {
            *slot = tok
                .parse()
                .map_err(|_| Error::Parse(format!("line {line_no}: bad number {tok:?}")))?;
        }
        let id = v[0] as usize;
        if id != poses.len() {
            return Err(Error::Parse(format!(
                "line {line_no}: pose ids must be dense and ordered, got {id}"
            )));
        }
        let q = UnitQuaternion::new_normalize(Quaternion::new(v[1], v[2], v[3], v[4]));
        let rotation = *q.to_rotation_matrix().matrix();
        poses.push(Pose::new(rotation, Vector3::new(v[5], v[6], v[7]))?);
    }
    Ok(poses)
}

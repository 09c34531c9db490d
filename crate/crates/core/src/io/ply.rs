//! ASCII PLY point clouds. A panorama plus depth back-projects to one point
//! per valid pixel; the color channel carries either the RGB image or the
//! color-coded normals, matching the two export flavors.

use std::io::Write as _;
use std::path::Path;

use super::png::quantize8;
use super::with_path;
use crate::geometry::{depth_to_points, ErpLayout};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyPoint {
    pub pos: [f32; 3],
    pub color: [u8; 3],
}

pub fn write_ply(path: &Path, points: &[PlyPoint]) -> Result<()> {
    let mut out = Vec::with_capacity(64 + 32 * points.len());
    let header = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    out.extend_from_slice(header.as_bytes());
    for p in points {
        // Display prints the shortest decimal that parses back to the same f32.
        writeln!(
            out,
            "{} {} {} {} {} {}",
            p.pos[0], p.pos[1], p.pos[2], p.color[0], p.color[1], p.color[2]
        )
        .expect("write to vec");
    }
    with_path(std::fs::write(path, out), path)
}

/// Parse back a file produced by `write_ply`; used by tests and round trips,
/// not a general PLY reader.
pub fn read_ply(path: &Path) -> Result<Vec<PlyPoint>> {
    let text = with_path(std::fs::read_to_string(path), path)?;
    let fail = |msg: &str| Error::format(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let mut count: Option<usize> = None;
    loop {
        let line = lines.next().ok_or_else(|| fail("header never ends"))?;
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(rest.trim().parse().map_err(|_| fail("bad vertex count"))?);
        }
        if line.trim() == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| fail("no vertex element"))?;
    let mut points = Vec::with_capacity(count);
    for line in lines {
        let mut it = line.split_ascii_whitespace();
        let mut next = || it.next().ok_or_else(|| fail("short vertex line"));
        let pos = [
            next()?.parse::<f32>().map_err(|_| fail("bad float"))?,
            next()?.parse::<f32>().map_err(|_| fail("bad float"))?,
            next()?.parse::<f32>().map_err(|_| fail("bad float"))?,
        ];
        let color = [
            next()?.parse::<u8>().map_err(|_| fail("bad color"))?,
            next()?.parse::<u8>().map_err(|_| fail("bad color"))?,
            next()?.parse::<u8>().map_err(|_| fail("bad color"))?,
        ];
        points.push(PlyPoint { pos, color });
    }
    if points.len() != count {
        return Err(fail(&format!("header promised {count} vertices, found {}", points.len())));
    }
    Ok(points)
}

fn cloud(
    layout: ErpLayout,
    depth: &[f64],
    mask: &[bool],
    color_at: impl Fn(usize) -> [u8; 3],
) -> Result<Vec<PlyPoint>> {
    let hw = layout.npixels();
    if depth.len() != hw || mask.len() != hw {
        return Err(Error::invalid(format!(
            "depth/mask lengths {}/{} do not match {hw} pixels",
            depth.len(),
            mask.len()
        )));
    }
    let points = depth_to_points(layout, depth, mask);
    Ok(points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            p.map(|pos| PlyPoint {
                pos: [pos[0] as f32, pos[1] as f32, pos[2] as f32],
                color: color_at(i),
            })
        })
        .collect())
}

/// One point per valid pixel, colored by the panorama (`rgb` is `[3, h, w]`
/// in [0,1]).
pub fn rgb_cloud(
    layout: ErpLayout,
    depth: &[f64],
    mask: &[bool],
    rgb: &[f64],
) -> Result<Vec<PlyPoint>> {
    let hw = layout.npixels();
    if rgb.len() != 3 * hw {
        return Err(Error::invalid(format!("rgb length {} is not 3x{hw}", rgb.len())));
    }
    cloud(layout, depth, mask, |i| {
        [quantize8(rgb[i]), quantize8(rgb[hw + i]), quantize8(rgb[2 * hw + i])]
    })
}

/// One point per valid pixel, colored by (n+1)/2.
pub fn normal_cloud(
    layout: ErpLayout,
    depth: &[f64],
    mask: &[bool],
    normal: &[f64],
) -> Result<Vec<PlyPoint>> {
    let hw = layout.npixels();
    if normal.len() != 3 * hw {
        return Err(Error::invalid(format!("normal length {} is not 3x{hw}", normal.len())));
    }
    cloud(layout, depth, mask, |i| {
        [
            quantize8((normal[i] + 1.0) / 2.0),
            quantize8((normal[hw + i] + 1.0) / 2.0),
            quantize8((normal[2 * hw + i] + 1.0) / 2.0),
        ]
    })
}

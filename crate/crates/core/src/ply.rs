//! Binary PLY interchange in the common Gaussian-splat checkpoint layout.
//!
//! Opacity is stored as a logit, scales as natural logs, rotations as unit
//! (w, x, y, z) quaternions and higher SH coefficients channel-major. The DC
//! term is shifted by 0.5/C0 because viewers add 0.5 to the decoded color.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianPrimitive, SH_C0, SH_COEFFS};

/// Property names in file order.
pub const PROPERTIES: [&str; 26] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "f_rest_0", "f_rest_1", "f_rest_2", "f_rest_3",
    "f_rest_4", "f_rest_5", "f_rest_6", "f_rest_7", "f_rest_8", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

/// Opacities are clamped this far from 0 and 1 so their logits stay finite.
const OPACITY_EPS: f64 = 1e-7;
const DC_OFFSET: f64 = 0.5 / SH_C0;

fn logit(a: f64) -> f64 {
    let a = a.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (a / (1.0 - a)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn encode(g: &GaussianPrimitive) -> Vec<f64> {
    let mut row = vec![g.position.x, g.position.y, g.position.z, 0.0, 0.0, 0.0];
    row.extend((0..3).map(|c| g.sh[0][c] - DC_OFFSET));
    for c in 0..3 {
        row.extend((1..SH_COEFFS).map(|k| g.sh[k][c]));
    }
    row.push(logit(g.opacity));
    row.extend(g.scale.iter().map(|s| s.ln()));
    row.extend(g.rotation);
    row
}

fn decode(row: &[f64]) -> GaussianPrimitive {
    let mut sh = [[0.0; 3]; SH_COEFFS];
    for c in 0..3 {
        sh[0][c] = row[6 + c] + DC_OFFSET;
        for k in 1..SH_COEFFS {
            sh[k][c] = row[9 + c * (SH_COEFFS - 1) + (k - 1)];
        }
    }
    GaussianPrimitive {
        position: Vector3::new(row[0], row[1], row[2]),
        opacity: sigmoid(row[18]),
        scale: Vector3::new(row[19].exp(), row[20].exp(), row[21].exp()),
        rotation: [row[22], row[23], row[24], row[25]],
        sh,
    }
}

/// Writes `gaussians` as a binary little-endian PLY.
pub fn export_ply(gaussians: &[GaussianPrimitive], path: &Path) -> Result<()> {
    if gaussians.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", gaussians.len());
    for name in PROPERTIES {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;
    for g in gaussians {
        for v in encode(g) {
            w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
}

/// Reads a binary little-endian PLY written by [`export_ply`] or by another
/// tool using the same property names. Properties may appear in any order
/// and as float or double; unknown properties are skipped.
pub fn parse_ply(path: &Path) -> Result<Vec<GaussianPrimitive>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let ctx = path.display().to_string();
    let bad = |reason: String| Error::MalformedHeader { context: ctx.clone(), reason };

    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut line = String::new();
    let mut first = true;
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("missing end_header".into()));
        }
        let t = line.trim_end();
        if first {
            if t != "ply" {
                return Err(bad("not a PLY file".into()));
            }
            first = false;
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", f, ..] => return Err(bad(format!("unsupported format {f}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
            }
            ["element", other, _] => return Err(bad(format!("unsupported element {other}"))),
            ["property", ty, name] => {
                let s = match *ty {
                    "float" | "float32" => Scalar::F32,
                    "double" | "float64" => Scalar::F64,
                    other => return Err(bad(format!("unsupported property type {other}"))),
                };
                props.push((name.to_string(), s));
            }
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(bad(format!("unexpected header line {t:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let names = PROPERTIES;
    let mut slot = vec![None; props.len()];
    for (i, (name, _)) in props.iter().enumerate() {
        slot[i] = names.iter().position(|n| n == name);
    }
    for (j, name) in names.iter().enumerate() {
        let optional = matches!(*name, "nx" | "ny" | "nz");
        if !optional && !slot.contains(&Some(j)) {
            return Err(bad(format!("missing property {name}")));
        }
    }
    let mut out = Vec::with_capacity(count);
    let mut row = vec![0.0; names.len()];
    let eof = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::dims(format!("vertex data of {}", path.display()), count, "fewer")
        } else {
            Error::io(path, e)
        }
    };
    for _ in 0..count {
        for ((_, ty), s) in props.iter().zip(&slot) {
            let v = match ty {
                Scalar::F32 => r.read_f32::<LittleEndian>().map_err(eof)? as f64,
                Scalar::F64 => r.read_f64::<LittleEndian>().map_err(eof)?,
            };
            if let Some(j) = s {
                row[*j] = v;
            }
        }
        out.push(decode(&row));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::dims(format!("vertex data of {}", path.display()), count, "more"));
    }
    Ok(out)
}

/// Vertex count declared in a PLY header.
pub fn vertex_count(path: &Path) -> Result<usize> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(n) = line.strip_prefix("element vertex ") {
            return n.trim().parse().map_err(|_| Error::MalformedHeader {
                context: path.display().to_string(),
                reason: format!("bad vertex count {n}"),
            });
        }
        if line == "end_header" {
            break;
        }
    }
    Err(Error::MalformedHeader { context: path.display().to_string(), reason: "no vertex element".into() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_opacity_is_zero_logit() {
        assert_eq!(logit(0.5), 0.0);
    }

    #[test]
    fn empty_cloud_refused() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(export_ply(&[], &dir.path().join("x.ply")), Err(Error::EmptyCloud)));
    }

    #[test]
    fn layout_is_channel_major() {
        let mut g = GaussianPrimitive::isotropic(Vector3::new(1.0, 2.0, 3.0), 0.1, 0.5, [0.2, 0.4, 0.6]);
        g.sh[2][1] = 7.0;
        let row = encode(&g);
        assert_eq!(row.len(), 26);
        assert_eq!(row[9 + 3 + 1], 7.0);
        assert_eq!(decode(&row).sh[2][1], 7.0);
    }
}

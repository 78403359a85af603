//! BVH export, plus a small reader used to check exports.
//!
//! Offsets and positions are written in centimeters. Every joint carries
//! `Zrotation Yrotation Xrotation` channels (local rotation
//! `Rz * Ry * Rx`, degrees); the root adds positions first. Bone offsets come
//! from the first exported frame, so a body-scaled sequence keeps its own
//! proportions.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use movin_core::rotation::{matrix_from_rot6d, rot_x, rot_y, rot_z};
use movin_core::skeleton::{JointTransform, PoseFeatures, Skeleton};

use crate::error::{Error, Result};

const CM: f64 = 100.0;

/// `(z, y, x)` angles in radians with `m = Rz(z) * Ry(y) * Rx(x)`.
pub fn euler_zyx(m: &Matrix3<f64>) -> [f64; 3] {
    let sy = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let y = sy.asin();
    if sy.abs() < 1.0 - 1e-9 {
        [m[(1, 0)].atan2(m[(0, 0)]), y, m[(2, 1)].atan2(m[(2, 2)])]
    } else {
        // gimbal lock: only z - x (or z + x) is determined; put it all in z
        [(-m[(0, 1)]).atan2(m[(1, 1)]), y, 0.0]
    }
}

pub fn matrix_from_euler_zyx([z, y, x]: [f64; 3]) -> Matrix3<f64> {
    rot_z(z) * rot_y(y) * rot_x(x)
}

fn children(skeleton: &Skeleton, joint: usize) -> Vec<usize> {
    (0..skeleton.len()).filter(|&k| skeleton.parent(k) == Some(joint)).collect()
}

fn write_joint(out: &mut String, skeleton: &Skeleton, offsets: &[Vector3<f64>], joint: usize, depth: usize) {
    let pad = "  ".repeat(depth);
    let name = &skeleton.joints()[joint].name;
    if depth == 0 {
        let _ = writeln!(out, "ROOT {name}");
    } else {
        let _ = writeln!(out, "{pad}JOINT {name}");
    }
    let _ = writeln!(out, "{pad}{{");
    let o = if depth == 0 { Vector3::zeros() } else { offsets[joint] * CM };
    let _ = writeln!(out, "{pad}  OFFSET {:.6} {:.6} {:.6}", o.x, o.y, o.z);
    if depth == 0 {
        let _ = writeln!(out, "{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation");
    } else {
        let _ = writeln!(out, "{pad}  CHANNELS 3 Zrotation Yrotation Xrotation");
    }
    let kids = children(skeleton, joint);
    if kids.is_empty() {
        let _ = writeln!(out, "{pad}  End Site\n{pad}  {{\n{pad}    OFFSET 0.000000 0.000000 0.000000\n{pad}  }}");
    }
    for k in kids {
        write_joint(out, skeleton, offsets, k, depth + 1);
    }
    let _ = writeln!(out, "{pad}}}");
}

/// Depth-first joint order used by the channel layout.
fn dfs_order(skeleton: &Skeleton, joint: usize, out: &mut Vec<usize>) {
    out.push(joint);
    for k in children(skeleton, joint) {
        dfs_order(skeleton, k, out);
    }
}

pub fn export_bvh(skeleton: &Skeleton, poses: &[PoseFeatures], frame_time: f64) -> Result<String> {
    let first = poses.first().ok_or_else(|| Error::Bvh("no poses to export".into()))?;
    if first.local.len() != skeleton.len() {
        return Err(movin_core::Error::Dimension { what: "pose joints", expected: skeleton.len(), got: first.local.len() }.into());
    }
    let offsets: Vec<Vector3<f64>> = first.local.joints.iter().map(|j| j.pos).collect();
    let mut out = String::from("HIERARCHY\n");
    write_joint(&mut out, skeleton, &offsets, 0, 0);
    let mut order = Vec::with_capacity(skeleton.len());
    dfs_order(skeleton, 0, &mut order);
    let _ = writeln!(out, "MOTION\nFrames: {}\nFrame Time: {frame_time:.6}", poses.len());
    for pose in poses {
        if pose.local.len() != skeleton.len() {
            return Err(movin_core::Error::Dimension { what: "pose joints", expected: skeleton.len(), got: pose.local.len() }.into());
        }
        let root = pose.global.root_transform()?;
        let mut values = Vec::with_capacity(3 + 3 * skeleton.len());
        for &k in &order {
            let local = matrix_from_rot6d(&pose.local.joints[k].rot)?;
            let rot = if k == 0 {
                let p = (root.position + root.rotation * pose.local.joints[0].pos) * CM;
                values.extend([p.x, p.y, p.z]);
                root.rotation * local
            } else {
                local
            };
            values.extend(euler_zyx(&rot).map(f64::to_degrees));
        }
        let line: Vec<String> = values.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    Ok(out)
}

/// Parsed BVH, joints in file (depth-first) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Bvh {
    pub names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    /// Centimeters.
    pub offsets: Vec<Vector3<f64>>,
    pub frame_time: f64,
    /// Channel values per frame, in the export layout.
    pub frames: Vec<Vec<f64>>,
}

impl Bvh {
    /// World joint positions of `frame`, meters.
    pub fn world_positions(&self, frame: usize) -> Vec<Vector3<f64>> {
        let v = &self.frames[frame];
        let mut out: Vec<JointTransform> = Vec::with_capacity(self.names.len());
        for (k, parent) in self.parents.iter().enumerate() {
            let base = 3 + 3 * k;
            let rot = matrix_from_euler_zyx([v[base].to_radians(), v[base + 1].to_radians(), v[base + 2].to_radians()]);
            let t = match parent {
                None => JointTransform { position: Vector3::new(v[0], v[1], v[2]) / CM, rotation: rot },
                Some(p) => {
                    let p = out[*p];
                    JointTransform { position: p.position + p.rotation * self.offsets[k] / CM, rotation: p.rotation * rot }
                }
            };
            out.push(t);
        }
        out.into_iter().map(|t| t.position).collect()
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Bvh(detail.into())
}

/// Reads files in the layout written by [`export_bvh`].
pub fn parse_bvh(text: &str) -> Result<Bvh> {
    let mut tokens = text.split_whitespace();
    let mut next = || tokens.next().ok_or_else(|| bad("unexpected end of file"));
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
    if next()? != "HIERARCHY" {
        return Err(bad("missing HIERARCHY"));
    }
    let (mut names, mut parents, mut offsets) = (Vec::new(), Vec::new(), Vec::new());
    let mut stack: Vec<Option<usize>> = Vec::new();
    let mut in_end_site = false;
    loop {
        match next()? {
            "ROOT" | "JOINT" => {
                names.push(next()?.to_owned());
                parents.push(stack.iter().rev().find_map(|s| *s));
            }
            "End" => {
                next()?;
                in_end_site = true;
            }
            "{" => {
                stack.push(if in_end_site { None } else { Some(names.len() - 1) });
            }
            "}" => {
                if stack.pop().flatten().is_none() {
                    in_end_site = false;
                }
                if stack.is_empty() {
                    break;
                }
            }
            "OFFSET" => {
                let o = Vector3::new(num(next()?)?, num(next()?)?, num(next()?)?);
                if !in_end_site {
                    offsets.push(o);
                }
            }
            "CHANNELS" => {
                let n = num(next()?)? as usize;
                for _ in 0..n {
                    next()?;
                }
            }
            other => return Err(bad(format!("unexpected token `{other}`"))),
        }
    }
    if next()? != "MOTION" || next()? != "Frames:" {
        return Err(bad("missing MOTION header"));
    }
    let count = num(next()?)? as usize;
    if next()? != "Frame" || next()? != "Time:" {
        return Err(bad("missing frame time"));
    }
    let frame_time = num(next()?)?;
    let width = 3 + 3 * names.len();
    let frames = (0..count).map(|_| (0..width).map(|_| num(next()?)).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
    Ok(Bvh { names, parents, offsets, frame_time, frames })
}

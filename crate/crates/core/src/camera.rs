//! Pinhole camera model and its text file format.
//!
//! Convention, fixed once: the camera looks down +z in its own frame, x points
//! right, y points down. Poses are stored world-to-camera (`x_cam = R x_w + t`).
//! Rays go through pixel centers and carry unit world directions; depth along
//! a ray is the ray parameter, not the camera-space z.

use std::fmt::Write as _;
use std::path::Path;

use crate::math::{mat3_orthonormality_error, mat3_tmul_vec, vec3, Mat3, Vec3};
use crate::tracer::Ray;

#[derive(Debug, thiserror::Error)]
pub enum CameraError {
    #[error("io error reading cameras: {0}")]
    Io(#[from] std::io::Error),
    #[error("camera file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("camera {index}: rotation is not orthonormal (error {err:.3e})")]
    BadRotation { index: usize, err: f64 },
    #[error("camera {index}: {msg}")]
    BadCamera { index: usize, msg: String },
}

/// Pinhole camera: pixel intrinsics plus a world-to-camera rigid transform.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
}

impl CameraModel {
    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -mat3_tmul_vec(&self.rotation, self.translation)
    }

    /// Ray through the center of pixel (px, py); px counts columns.
    pub fn ray(&self, px: usize, py: usize) -> Ray {
        let dir_cam = vec3(
            (px as f64 + 0.5 - self.cx) / self.fx,
            (py as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        let dir = mat3_tmul_vec(&self.rotation, dir_cam).normalized();
        Ray::new(self.center(), dir)
    }

    /// All pixel rays in row-major order.
    pub fn rays(&self) -> Vec<Ray> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for py in 0..self.height {
            for px in 0..self.width {
                out.push(self.ray(px, py));
            }
        }
        out
    }

    /// Forward axis (+z of the camera) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        mat3_tmul_vec(&self.rotation, vec3(0.0, 0.0, 1.0))
    }

    /// Build a pose looking from `eye` toward `target`. `down` picks the
    /// world direction the image y axis leans toward.
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: Vec3,
        target: Vec3,
        down: Vec3,
    ) -> CameraModel {
        let z = (target - eye).normalized();
        let x = down.cross(z).normalized();
        let y = z.cross(x);
        let rotation: Mat3 = [[x.x, x.y, x.z], [y.x, y.y, y.z], [z.x, z.y, z.z]];
        let translation = -vec3(x.dot(eye), y.dot(eye), z.dot(eye));
        CameraModel {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
        }
    }

    fn validate(&self, index: usize) -> Result<(), CameraError> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CameraError::BadCamera {
                index,
                msg: format!("non-positive focal ({}, {})", self.fx, self.fy),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::BadCamera {
                index,
                msg: "zero image dimensions".into(),
            });
        }
        let err = mat3_orthonormality_error(&self.rotation);
        if err > 1e-3 {
            return Err(CameraError::BadRotation { index, err });
        }
        Ok(())
    }
}

const HEADER: &str = "# splatray cameras v1";

/// Serialize cameras to the documented text schema; values round-trip exactly.
pub fn cameras_to_string(cams: &[CameraModel]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{HEADER}");
    for (i, c) in cams.iter().enumerate() {
        let _ = writeln!(s, "camera {i}");
        let _ = writeln!(s, "size {} {}", c.width, c.height);
        let _ = writeln!(s, "intrinsics {} {} {} {}", c.fx, c.fy, c.cx, c.cy);
        let mut row = String::from("rotation");
        for r in &c.rotation {
            for v in r {
                let _ = write!(row, " {v}");
            }
        }
        let _ = writeln!(s, "{row}");
        let _ = writeln!(
            s,
            "translation {} {} {}",
            c.translation.x, c.translation.y, c.translation.z
        );
    }
    s
}

pub fn save_cameras(path: &Path, cams: &[CameraModel]) -> Result<(), CameraError> {
    std::fs::write(path, cameras_to_string(cams))?;
    Ok(())
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraModel>, CameraError> {
    let text = std::fs::read_to_string(path)?;
    parse_cameras(&text)
}

pub fn parse_cameras(text: &str) -> Result<Vec<CameraModel>, CameraError> {
    let mut cams: Vec<CameraModel> = Vec::new();
    let mut current: Option<(usize, CameraModel, [bool; 4])> = None;
    let finish = |cur: Option<(usize, CameraModel, [bool; 4])>,
                  cams: &mut Vec<CameraModel>,
                  line: usize|
     -> Result<(), CameraError> {
        if let Some((index, cam, seen)) = cur {
            if !seen.iter().all(|s| *s) {
                return Err(CameraError::Parse {
                    line,
                    msg: format!("camera {index} is missing fields"),
                });
            }
            cam.validate(index)?;
            cams.push(cam);
        }
        Ok(())
    };

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        let rest: Vec<&str> = parts.collect();
        let parse_f = |v: &str| -> Result<f64, CameraError> {
            v.parse::<f64>().map_err(|_| CameraError::Parse {
                line: line_no,
                msg: format!("bad number `{v}`"),
            })
        };
        match key {
            "camera" => {
                finish(current.take(), &mut cams, line_no)?;
                let index: usize =
                    rest.first()
                        .and_then(|v| v.parse().ok())
                        .ok_or(CameraError::Parse {
                            line: line_no,
                            msg: "camera needs an index".into(),
                        })?;
                if index != cams.len() {
                    return Err(CameraError::Parse {
                        line: line_no,
                        msg: format!(
                            "camera index {index} out of order, expected {}",
                            cams.len()
                        ),
                    });
                }
                current = Some((
                    index,
                    CameraModel {
                        width: 0,
                        height: 0,
                        fx: 0.0,
                        fy: 0.0,
                        cx: 0.0,
                        cy: 0.0,
                        rotation: [[0.0; 3]; 3],
                        translation: Vec3::ZERO,
                    },
                    [false; 4],
                ));
            }
            "size" | "intrinsics" | "rotation" | "translation" => {
                let (_, cam, seen) = current.as_mut().ok_or(CameraError::Parse {
                    line: line_no,
                    msg: format!("`{key}` before any `camera` record"),
                })?;
                match key {
                    "size" => {
                        if rest.len() != 2 {
                            return Err(CameraError::Parse {
                                line: line_no,
                                msg: "size needs width and height".into(),
                            });
                        }
                        cam.width = rest[0].parse().map_err(|_| CameraError::Parse {
                            line: line_no,
                            msg: format!("bad width `{}`", rest[0]),
                        })?;
                        cam.height = rest[1].parse().map_err(|_| CameraError::Parse {
                            line: line_no,
                            msg: format!("bad height `{}`", rest[1]),
                        })?;
                        seen[0] = true;
                    }
                    "intrinsics" => {
                        if rest.len() != 4 {
                            return Err(CameraError::Parse {
                                line: line_no,
                                msg: "intrinsics needs fx fy cx cy".into(),
                            });
                        }
                        cam.fx = parse_f(rest[0])?;
                        cam.fy = parse_f(rest[1])?;
                        cam.cx = parse_f(rest[2])?;
                        cam.cy = parse_f(rest[3])?;
                        seen[1] = true;
                    }
                    "rotation" => {
                        if rest.len() != 9 {
                            return Err(CameraError::Parse {
                                line: line_no,
                                msg: "rotation needs 9 row-major entries".into(),
                            });
                        }
                        for (k, v) in rest.iter().enumerate() {
                            cam.rotation[k / 3][k % 3] = parse_f(v)?;
                        }
                        seen[2] = true;
                    }
                    _ => {
                        if rest.len() != 3 {
                            return Err(CameraError::Parse {
                                line: line_no,
                                msg: "translation needs 3 entries".into(),
                            });
                        }
                        cam.translation =
                            vec3(parse_f(rest[0])?, parse_f(rest[1])?, parse_f(rest[2])?);
                        seen[3] = true;
                    }
                }
            }
            other => {
                return Err(CameraError::Parse {
                    line: line_no,
                    msg: format!("unknown key `{other}`"),
                });
            }
        }
    }
    finish(current.take(), &mut cams, text.lines().count())?;
    Ok(cams)
}

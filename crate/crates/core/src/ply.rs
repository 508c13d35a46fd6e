//! Binary little-endian PLY dialect for surfel sets and sparse point clouds.
//!
//! The vertex layout follows community splat conventions, extended for
//! surfels and stored as doubles so optimizer checkpoints round trip
//! bit-exactly: `x y z, quat_w quat_x quat_y quat_z, log_scale_u log_scale_v,
//! raw_opacity, f_dc_0..2, f_rest_0..23`, plus `raw_blend` for base sets. A
//! `comment set_kind base|env` header line disambiguates the two set kinds.
//! SH memory layout is channel-major (R c0..c8, G, B); on disk `f_dc_*` holds
//! the three DC terms and `f_rest_*` the 24 higher-order terms, channel-major.
//!
//! Parsers fail with byte offsets and never return partially filled sets.

use std::io::Write;
use std::path::Path;

use crate::math::{vec3, Vec3};
use crate::primitives::{GaussianSet, SetKind};

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error("io error on ply: {0}")]
    Io(#[from] std::io::Error),
    #[error("ply parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("ply payload truncated at byte {offset}: expected {expected} more bytes")]
    Truncated { offset: usize, expected: usize },
}

const N_PROPS_COMMON: usize = 3 + 4 + 2 + 1 + 27;

fn property_names(kind: SetKind) -> Vec<String> {
    let mut names = vec![
        "x".into(),
        "y".into(),
        "z".into(),
        "quat_w".into(),
        "quat_x".into(),
        "quat_y".into(),
        "quat_z".into(),
        "log_scale_u".into(),
        "log_scale_v".into(),
        "raw_opacity".into(),
    ];
    for i in 0..3 {
        names.push(format!("f_dc_{i}"));
    }
    for i in 0..24 {
        names.push(format!("f_rest_{i}"));
    }
    if kind == SetKind::Base {
        names.push("raw_blend".into());
    }
    names
}

/// Map the in-memory channel-major SH array to the on-disk order
/// (f_dc_0..2 then f_rest_0..23, both channel-major for the rest block).
fn sh_disk_order(sh: &[f64; 27]) -> [f64; 27] {
    let mut out = [0.0; 27];
    for ch in 0..3 {
        out[ch] = sh[ch * 9];
        for k in 0..8 {
            out[3 + ch * 8 + k] = sh[ch * 9 + 1 + k];
        }
    }
    out
}

fn sh_memory_order(disk: &[f64; 27]) -> [f64; 27] {
    let mut out = [0.0; 27];
    for ch in 0..3 {
        out[ch * 9] = disk[ch];
        for k in 0..8 {
            out[ch * 9 + 1 + k] = disk[3 + ch * 8 + k];
        }
    }
    out
}

/// Write a surfel set in the dialect; round trips are bit-exact.
pub fn save_gaussians(path: &Path, set: &GaussianSet) -> Result<(), PlyError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let kind_tag = match set.kind() {
        SetKind::Base => "base",
        SetKind::Env => "env",
    };
    write!(
        f,
        "ply\nformat binary_little_endian 1.0\ncomment set_kind {kind_tag}\nelement vertex {}\n",
        set.len()
    )?;
    for name in property_names(set.kind()) {
        writeln!(f, "property double {name}")?;
    }
    writeln!(f, "end_header")?;
    for i in 0..set.len() {
        let mut row: Vec<f64> = Vec::with_capacity(38);
        let c = set.centers[i];
        row.extend_from_slice(&[c.x, c.y, c.z]);
        row.extend_from_slice(&set.rotations[i]);
        row.extend_from_slice(&set.log_scales[i]);
        row.push(set.raw_opacities[i]);
        row.extend_from_slice(&sh_disk_order(&set.sh[i]));
        if set.kind() == SetKind::Base {
            row.push(set.raw_blends[i]);
        }
        for v in row {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_gaussians(path: &Path) -> Result<GaussianSet, PlyError> {
    let bytes = std::fs::read(path)?;
    parse_gaussians(&bytes)
}

struct HeaderInfo {
    kind: SetKind,
    count: usize,
    props: Vec<String>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<HeaderInfo, PlyError> {
    let mut offset = 0usize;
    let mut lines: Vec<(usize, String)> = Vec::new();
    loop {
        let start = offset;
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(PlyError::Parse {
                offset,
                msg: "header has no end_header line".into(),
            });
        };
        let line = String::from_utf8_lossy(&bytes[start..start + nl]).into_owned();
        offset = start + nl + 1;
        let is_end = line.trim() == "end_header";
        lines.push((start, line));
        if is_end {
            break;
        }
        if offset >= bytes.len() {
            return Err(PlyError::Parse {
                offset,
                msg: "header has no end_header line".into(),
            });
        }
    }
    let mut it = lines.iter();
    let (off0, magic) = it.next().unwrap();
    if magic.trim() != "ply" {
        return Err(PlyError::Parse {
            offset: *off0,
            msg: format!("bad magic `{magic}`"),
        });
    }
    let mut kind: Option<SetKind> = None;
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut format_seen = false;
    for (off, line) in it {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                let rest: Vec<&str> = parts.collect();
                if rest != ["binary_little_endian", "1.0"] {
                    return Err(PlyError::Parse {
                        offset: *off,
                        msg: format!("unsupported format `{}`", rest.join(" ")),
                    });
                }
                format_seen = true;
            }
            Some("comment") => {
                let rest: Vec<&str> = parts.collect();
                if rest.first() == Some(&"set_kind") {
                    kind = match rest.get(1) {
                        Some(&"base") => Some(SetKind::Base),
                        Some(&"env") => Some(SetKind::Env),
                        other => {
                            return Err(PlyError::Parse {
                                offset: *off,
                                msg: format!("unknown set_kind `{other:?}`"),
                            })
                        }
                    };
                }
            }
            Some("element") => {
                let rest: Vec<&str> = parts.collect();
                if rest.first() != Some(&"vertex") {
                    return Err(PlyError::Parse {
                        offset: *off,
                        msg: format!("only vertex elements supported, got `{line}`"),
                    });
                }
                count = rest.get(1).and_then(|v| v.parse().ok());
                if count.is_none() {
                    return Err(PlyError::Parse {
                        offset: *off,
                        msg: format!("bad vertex count in `{line}`"),
                    });
                }
            }
            Some("property") => {
                let rest: Vec<&str> = parts.collect();
                if rest.len() != 2 || rest[0] != "double" {
                    return Err(PlyError::Parse {
                        offset: *off,
                        msg: format!("expected `property double <name>`, got `{line}`"),
                    });
                }
                props.push(rest[1].to_string());
            }
            _ => {
                return Err(PlyError::Parse {
                    offset: *off,
                    msg: format!("unknown header line `{line}`"),
                });
            }
        }
    }
    if !format_seen {
        return Err(PlyError::Parse {
            offset: 0,
            msg: "missing format line".into(),
        });
    }
    let kind = kind.ok_or(PlyError::Parse {
        offset: 0,
        msg: "missing `comment set_kind base|env`".into(),
    })?;
    let count = count.ok_or(PlyError::Parse {
        offset: 0,
        msg: "missing vertex element".into(),
    })?;
    Ok(HeaderInfo {
        kind,
        count,
        props,
        body_offset: offset,
    })
}

pub fn parse_gaussians(bytes: &[u8]) -> Result<GaussianSet, PlyError> {
    let header = parse_header(bytes)?;
    let expected_props = property_names(header.kind);
    if header.props != expected_props {
        return Err(PlyError::Parse {
            offset: header.body_offset,
            msg: format!(
                "property list mismatch for a {:?} set: got {:?}",
                header.kind, header.props
            ),
        });
    }
    let n_props = expected_props.len();
    let need = header.count * n_props * 8;
    let have = bytes.len() - header.body_offset;
    if have < need {
        return Err(PlyError::Truncated {
            offset: bytes.len(),
            expected: need - have,
        });
    }
    let mut set = GaussianSet::new(header.kind);
    let mut p = header.body_offset;
    let read_f64 = |bytes: &[u8], p: usize| {
        f64::from_le_bytes([
            bytes[p],
            bytes[p + 1],
            bytes[p + 2],
            bytes[p + 3],
            bytes[p + 4],
            bytes[p + 5],
            bytes[p + 6],
            bytes[p + 7],
        ])
    };
    for _ in 0..header.count {
        let mut row = Vec::with_capacity(n_props);
        for _ in 0..n_props {
            row.push(read_f64(bytes, p));
            p += 8;
        }
        let mut disk_sh = [0.0; 27];
        disk_sh.copy_from_slice(&row[10..10 + 27]);
        set.push(crate::primitives::Gaussian2D {
            center: vec3(row[0], row[1], row[2]),
            rotation: [row[3], row[4], row[5], row[6]],
            log_scales: [row[7], row[8]],
            raw_opacity: row[9],
            sh_coeffs: sh_memory_order(&disk_sh),
            raw_blend: if header.kind == SetKind::Base {
                Some(row[N_PROPS_COMMON])
            } else {
                None
            },
        });
    }
    Ok(set)
}

/// Plain xyz point cloud in the same binary PLY framing (no set_kind).
pub fn save_points(path: &Path, points: &[Vec3]) -> Result<(), PlyError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(
        f,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    )?;
    for p in points {
        f.write_all(&p.x.to_le_bytes())?;
        f.write_all(&p.y.to_le_bytes())?;
        f.write_all(&p.z.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_points(path: &Path) -> Result<Vec<Vec3>, PlyError> {
    let bytes = std::fs::read(path)?;
    let header = parse_header_points(&bytes)?;
    let need = header.1 * 24;
    if bytes.len() - header.0 < need {
        return Err(PlyError::Truncated {
            offset: bytes.len(),
            expected: need - (bytes.len() - header.0),
        });
    }
    let mut out = Vec::with_capacity(header.1);
    let mut p = header.0;
    for _ in 0..header.1 {
        let mut c = [0.0f64; 3];
        for v in &mut c {
            *v = f64::from_le_bytes(bytes[p..p + 8].try_into().unwrap());
            p += 8;
        }
        out.push(vec3(c[0], c[1], c[2]));
    }
    Ok(out)
}

/// (body offset, count) of a plain point PLY.
fn parse_header_points(bytes: &[u8]) -> Result<(usize, usize), PlyError> {
    let text_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or(PlyError::Parse {
            offset: 0,
            msg: "no end_header".into(),
        })?;
    let body = text_end + 11;
    let header = String::from_utf8_lossy(&bytes[..body]);
    let mut count = None;
    for line in header.lines() {
        let mut parts = line.split_whitespace();
        if parts.next() == Some("element") && parts.next() == Some("vertex") {
            count = parts.next().and_then(|v| v.parse().ok());
        }
    }
    let count = count.ok_or(PlyError::Parse {
        offset: 0,
        msg: "missing vertex element".into(),
    })?;
    Ok((body, count))
}

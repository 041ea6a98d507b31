//! Binary little-endian splat PLY in the layout common splat viewers read.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Gaussian, GaussianSet};
use crate::error::{Error, Result};

/// Zeroth-order spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.28209479177387814;

const PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn record(g: &Gaussian) -> [f32; 17] {
    let mut r = [0f32; 17];
    for i in 0..3 {
        r[i] = g.center[i] as f32;
        r[6 + i] = ((g.color[i] - 0.5) / SH_C0) as f32;
        r[10 + i] = g.scale[i].ln() as f32;
    }
    r[9] = logit(g.opacity) as f32;
    for i in 0..4 {
        r[13 + i] = g.rotation[i] as f32;
    }
    r
}

pub fn write_ply<W: Write>(w: &mut W, set: &GaussianSet) -> Result<()> {
    write!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", set.len())?;
    for p in PROPERTIES {
        writeln!(w, "property float {p}")?;
    }
    w.write_all(b"end_header\n")?;
    for g in set.iter() {
        for v in record(&g) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_ply(set: &GaussianSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply(&mut w, set)?;
    w.flush()?;
    Ok(())
}

fn header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(format_err("PLY header ends before end_header"));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

pub fn read_ply<R: BufRead>(r: &mut R) -> Result<GaussianSet> {
    if header_line(r)? != "ply" {
        return Err(format_err("missing 'ply' magic line"));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    loop {
        let line = header_line(r)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(format_err(format!("unsupported PLY format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(format_err("duplicate vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|_| format_err(format!("bad vertex count '{n}'")))?);
            }
            ["element", name, _] => return Err(format_err(format!("unsupported PLY element '{name}'"))),
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(format_err("property before any element"));
                }
                if *ty != "float" && *ty != "float32" {
                    return Err(format_err(format!("property '{name}' has type '{ty}', expected float")));
                }
                props.push(name.to_string());
            }
            _ => return Err(format_err(format!("malformed PLY header line '{line}'"))),
        }
    }
    let count = count.ok_or_else(|| format_err("PLY has no vertex element"))?;
    let mut slot = [0usize; 17];
    for (k, name) in PROPERTIES.iter().enumerate() {
        slot[k] = props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| format_err(format!("PLY is missing property '{name}'")))?;
    }
    let stride = props.len();
    let mut buf = vec![0u8; stride * 4];
    let mut set = GaussianSet::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => format_err(format!("PLY payload truncated at vertex {i}")),
            _ => Error::Io(e),
        })?;
        let f = |k: usize| {
            let o = slot[k] * 4;
            f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64
        };
        set.push(Gaussian {
            center: [f(0), f(1), f(2)],
            color: [0, 1, 2].map(|c| f(6 + c) * SH_C0 + 0.5),
            opacity: 1.0 / (1.0 + (-f(9)).exp()),
            scale: [0, 1, 2].map(|c| f(10 + c).exp()),
            rotation: [0, 1, 2, 3].map(|c| f(13 + c)),
        });
    }
    Ok(set)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianSet> {
    read_ply(&mut BufReader::new(File::open(path)?))
}

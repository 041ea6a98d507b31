use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::Mesh;
use crate::error::{Error, Result};

/// `v x y z [r g b]` and `f a b c` lines, 1-based, six decimals.
pub fn write_obj<W: Write>(w: &mut W, mesh: &Mesh) -> Result<()> {
    mesh.validate()?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        match mesh.colors.get(i) {
            Some(c) => writeln!(w, "v {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}", v[0], v[1], v[2], c[0], c[1], c[2])?,
            None => writeln!(w, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2])?,
        }
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

pub fn export_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_obj(&mut w, mesh)?;
    w.flush()?;
    Ok(())
}

/// Reads `v` and triangular `f` lines; other statements are ignored.
pub fn read_obj<R: BufRead>(r: R) -> Result<Mesh> {
    let mut mesh = Mesh::default();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        let bad = |what: &str| Error::Format(format!("OBJ line {}: {what}", n + 1));
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it.map(|s| s.parse().map_err(|_| bad("bad number"))).collect::<Result<_>>()?;
                match nums.len() {
                    3 => {}
                    6 => mesh.colors.push([nums[3], nums[4], nums[5]]),
                    _ => return Err(bad("vertex needs 3 or 6 numbers")),
                }
                mesh.vertices.push([nums[0], nums[1], nums[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|s| {
                        let i: u32 = s.split('/').next().unwrap_or("").parse().map_err(|_| bad("bad index"))?;
                        i.checked_sub(1).ok_or_else(|| bad("indices are 1-based"))
                    })
                    .collect::<Result<_>>()?;
                let f: [u32; 3] = idx.try_into().map_err(|_| bad("only triangles are supported"))?;
                mesh.faces.push(f);
            }
            _ => {}
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    read_obj(BufReader::new(File::open(path)?))
}

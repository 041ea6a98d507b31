//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

fn quantize<T: Real>(v: T) -> u8 {
    (255.0 * v.as_f64().clamp(0.0, 1.0)).round() as u8
}

fn write_pnm<W: Write, T: Real>(w: &mut W, img: &Tensor<T>, channels: usize, magic: &str) -> Result<()> {
    if img.ndim() != 3 || img.shape()[0] != channels {
        return Err(shape_err!("{magic} export expects [{channels}, H, W], got {:?}", img.shape()));
    }
    let (h, wd) = (img.shape()[1], img.shape()[2]);
    write!(w, "{magic}\n{wd} {h}\n255\n")?;
    let hw = h * wd;
    let d = img.data();
    let mut row = Vec::with_capacity(hw * channels);
    for i in 0..hw {
        for c in 0..channels {
            row.push(quantize(d[c * hw + i]));
        }
    }
    w.write_all(&row)?;
    Ok(())
}

pub fn write_ppm<W: Write, T: Real>(w: &mut W, rgb: &Tensor<T>) -> Result<()> {
    write_pnm(w, rgb, 3, "P6")
}

pub fn write_pgm<W: Write, T: Real>(w: &mut W, gray: &Tensor<T>) -> Result<()> {
    write_pnm(w, gray, 1, "P5")
}

pub fn save_ppm<T: Real>(rgb: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm(&mut w, rgb)?;
    w.flush()?;
    Ok(())
}

pub fn save_pgm<T: Real>(gray: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pgm(&mut w, gray)?;
    w.flush()?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("image header ends early".into()));
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
        } else if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(b as char);
        }
    }
}

/// Reads a P6 or P5 image into `[C, H, W]` values in `[0, 1]`.
pub fn read_pnm<R: BufRead>(r: &mut R) -> Result<Tensor<f64>> {
    let magic = header_token(r)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Format(format!("unsupported image type '{m}' (need P6 or P5)"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        let t = header_token(r)?;
        t.parse().map_err(|_| Error::Format(format!("bad image {what} '{t}'")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(Error::Format(format!("only 8-bit images are supported, maxval {max}")));
    }
    let hw = w * h;
    let mut raw = vec![0u8; hw * channels];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format("image payload truncated".into()))?;
    let mut out = Tensor::zeros(&[channels, h, w]);
    let d = out.data_mut();
    for i in 0..hw {
        for c in 0..channels {
            d[c * hw + i] = raw[i * channels + c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    read_pnm(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_layout_and_round_trip() {
        let img = Tensor::<f64>::from_f64(&[3, 1, 2], &[0.0, 1.0, 0.5, 2.0, 1.0, -1.0]).unwrap();
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        assert_eq!(&buf[..11], b"P6\n2 1\n255\n");
        assert_eq!(&buf[11..], &[0, 128, 255, 255, 255, 0]);
        let back = read_pnm(&mut &buf[..]).unwrap();
        assert_eq!(back.shape(), &[3, 1, 2]);
        assert_eq!(back.at(&[1, 0, 0]), 128.0 / 255.0);
    }

    #[test]
    fn pgm_and_errors() {
        let a = Tensor::<f64>::full(&[1, 2, 2], 0.25);
        let mut buf = Vec::new();
        write_pgm(&mut buf, &a).unwrap();
        assert!(buf.starts_with(b"P5\n2 2\n255\n"));
        assert!(write_pgm(&mut Vec::new(), &Tensor::<f64>::zeros(&[3, 2, 2])).is_err());
        assert!(read_pnm(&mut &b"P3\n1 1\n255\n0 0 0"[..]).is_err());
        assert!(read_pnm(&mut &b"P6\n# c\n2 2\n255\n\x01"[..]).is_err());
    }
}

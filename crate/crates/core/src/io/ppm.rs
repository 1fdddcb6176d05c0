use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

fn header_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(&buf[start..*pos])
}

fn header_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(buf, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("PPM {what} is not a number")))
}

/// Decode a binary (P6, maxval 255) PPM into an H×W×3 tensor in [0,1].
pub fn ppm_decode<T: Scalar>(buf: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let magic = header_token(buf, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::Format(format!(
            "unsupported PPM variant `{}` (only binary P6)",
            String::from_utf8_lossy(magic)
        )));
    }
    let w = header_number(buf, &mut pos, "width")?;
    let h = header_number(buf, &mut pos, "height")?;
    let maxval = header_number(buf, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval} (only 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("PPM has zero extent".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = h * w * 3;
    let raster =
        buf.get(pos..pos + n).ok_or_else(|| Error::Format(format!("truncated PPM payload: need {n} bytes")))?;
    Tensor::new(vec![h, w, 3], raster.iter().map(|&b| T::c(b as f64 / 255.0)).collect())
}

pub fn ppm_encode<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = match image.dims() {
        &[h, w, 3] => (h, w),
        d => return Err(shape_err!("PPM needs an H×W×3 image, got {d:?}")),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn ppm_load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    ppm_decode(&buf).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn ppm_save<T: Scalar>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ppm_encode(image)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    #[test]
    fn white_pixel() {
        let t: Tensor<f64> = ppm_decode(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.dims(), &[1, 1, 3]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn header_comments_allowed() {
        let t: Tensor<f32> = ppm_decode(b"P6 # made by hand\n2 1 255\n\x00\x00\x00\xff\x00\x00").unwrap();
        assert_eq!(t.dims(), &[1, 2, 3]);
        assert_eq!(t.data()[3], 1.0);
    }

    #[test]
    fn quantization_bound() {
        let mut rng = Rng::new(4);
        let img = Tensor::new(vec![4, 5, 3], rng.uniform_vec::<f64>(60, 0.0, 1.0)).unwrap();
        let back: Tensor<f64> = ppm_decode(&ppm_encode(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 1.0 / 510.0 + 1e-15);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(ppm_decode::<f64>(b"P3\n1 1\n255\n255 255 255"), Err(Error::Format(_))));
        assert!(matches!(ppm_decode::<f64>(b"P6\n2 2\n255\n\x00\x00"), Err(Error::Format(_))));
        assert!(matches!(ppm_decode::<f64>(b"P6\n2"), Err(Error::Format(_))));
        assert!(matches!(ppm_decode::<f64>(b"P6\n1 1\n65535\n\x00\x00\x00"), Err(Error::Format(_))));
    }
}

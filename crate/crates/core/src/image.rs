//! Image helpers: binary PPM previews, loading by extension, bilinear
//! resizing and reflect padding. Images are `3×H×W` tensors in `[0, 1]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_awtf, Tensor};

/// `(H, W)` of a `3×H×W` image.
pub fn image_dims(img: &Tensor<f32>) -> Result<(usize, usize)> {
    match img.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(Error::shape("image", s, &[3, 0, 0])),
    }
}

/// Writes a binary P6 PPM (maxval 255), clamping to `[0, 1]` and rounding.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let d = img.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Reads a binary P6 PPM with maxval < 256.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut pos = 0;
    let mut header = [0usize; 3];
    if ppm_token(&bytes, &mut pos) != Some(b"P6") {
        return Err(Error::format(ctx, "not a binary PPM (P6)"));
    }
    for slot in header.iter_mut() {
        *slot = ppm_token(&bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(ctx.clone(), "bad PPM header"))?;
    }
    let [w, h, maxval] = header;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::format(ctx, format!("unsupported PPM {w}x{h} maxval {maxval}")));
    }
    pos += 1;
    let pixels = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| Error::format(ctx.clone(), "truncated PPM payload"))?;
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = pixels[3 * i + c] as f32 / maxval as f32;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Loads `.awtf` or `.ppm` images, checking the `3×H×W` layout.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path)?,
        Some("awtf") => read_awtf(path)?,
        _ => {
            return Err(Error::Usage(format!(
                "{}: expected a .awtf or .ppm image",
                path.display()
            )))
        }
    };
    image_dims(&img).map_err(|_| {
        Error::format(path.display().to_string(), format!("expected 3×H×W, got {:?}", img.shape()))
    })?;
    Ok(img)
}

/// Bilinear resize with half-pixel centres and edge clamping (the
/// `align_corners = false` convention).
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w) = image_dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Param("resize target must be positive".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone().with_requires_grad(false));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let d = img.data();
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        let plane = &d[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[3, out_h, out_w], out)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Pads bottom and right by reflection up to the next multiple of `multiple`.
pub fn reflect_pad_to_multiple(img: &Tensor<f32>, multiple: usize) -> Result<Tensor<f32>> {
    let (h, w) = image_dims(img)?;
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for x in 0..pw {
                out.push(d[(c * h + sy) * w + reflect(x as isize, w)]);
            }
        }
    }
    Tensor::new(&[3, ph, pw], out)
}

/// Top-left `h×w` window of an image.
pub fn crop(img: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (ih, iw) = image_dims(img)?;
    if h > ih || w > iw {
        return Err(Error::shape("crop", img.shape(), &[3, h, w]));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            let row = (c * ih + y) * iw;
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Tensor::new(&[3, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        let data = (0..3 * h * w).map(|i| (i % 251) as f32 / 250.0).collect();
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn ppm_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = ramp(5, 7);
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), &[3, 5, 7]);
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
    }

    #[test]
    fn resize_constant_and_identity() {
        let img = ramp(6, 6);
        assert_eq!(resize_bilinear(&img, 6, 6).unwrap(), img);
        let flat = Tensor::full(&[3, 5, 9], 0.25f32);
        let r = resize_bilinear(&flat, 32, 32).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn resize_halving_averages_pairs() {
        // Half-pixel centres land exactly between source pixels.
        let img = Tensor::new(&[3, 2, 2], vec![0.0, 1.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let r = resize_bilinear(&img, 1, 1).unwrap();
        assert_eq!(r.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn reflect_pad_then_crop_restores() {
        let img = ramp(5, 7);
        let padded = reflect_pad_to_multiple(&img, 8).unwrap();
        assert_eq!(padded.shape(), &[3, 8, 8]);
        // Row 5 mirrors row 3.
        assert_eq!(padded.at(&[0, 5, 0]), img.at(&[0, 3, 0]));
        assert_eq!(padded.at(&[1, 0, 7]), img.at(&[1, 0, 5]));
        assert_eq!(crop(&padded, 5, 7).unwrap(), img);
    }
}

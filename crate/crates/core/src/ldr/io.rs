//! Sample directories: `ldr_{1,2,3}.png`, `exposure.txt`, optional
//! `gt.pfm` or `gt.hdr`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::{ImageBuffer, Rgb};

use super::{ExposureBracket, Image};
use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(f64::from).collect();
    Image::new(h as usize, w as usize, 3, data)
}

/// Reads a Radiance RGBE (`.hdr`) image.
pub fn read_hdr_image(path: &Path) -> Result<Image> {
    decode(path)
}

/// Loads one bracket from a sample directory.
pub fn load_bracket(dir: &Path) -> Result<ExposureBracket> {
    let frame = |i: usize| -> Result<Image> {
        let path = dir.join(format!("ldr_{i}.png"));
        if !path.is_file() {
            return Err(Error::ingest(&path, "missing LDR frame"));
        }
        decode(&path)
    };
    let ldr = [frame(1)?, frame(2)?, frame(3)?];

    let exp_path = dir.join("exposure.txt");
    let text = fs::read_to_string(&exp_path).map_err(|e| Error::ingest(&exp_path, e.to_string()))?;
    let evs: Vec<f64> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| Error::ingest(&exp_path, format!("cannot parse EV `{l}`")))
        })
        .collect::<Result<_>>()?;
    if evs.len() != 3 {
        return Err(Error::ingest(&exp_path, format!("expected 3 EV lines, found {}", evs.len())));
    }
    let times = [evs[0].exp2(), evs[1].exp2(), evs[2].exp2()];

    let pfm = dir.join("gt.pfm");
    let hdr = dir.join("gt.hdr");
    let gt = if pfm.is_file() {
        Some(read_pfm(&pfm)?)
    } else if hdr.is_file() {
        Some(read_hdr_image(&hdr)?)
    } else {
        None
    };
    ExposureBracket::new(ldr, times, gt).map_err(|e| Error::ingest(dir, e.to_string()))
}

/// Writes a bracket in the sample-directory layout (16-bit PNG frames,
/// PFM ground truth).
pub fn write_bracket(dir: &Path, bracket: &ExposureBracket) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in bracket.ldr.iter().enumerate() {
        write_png16(&dir.join(format!("ldr_{}.png", i + 1)), img)?;
    }
    let ev: String = bracket
        .exposure_times
        .iter()
        .map(|t| format!("{}\n", t.log2()))
        .collect();
    let exp_path = dir.join("exposure.txt");
    fs::write(&exp_path, ev).map_err(|e| Error::io(&exp_path, e))?;
    if let Some(gt) = &bracket.gt_hdr {
        write_pfm(&dir.join("gt.pfm"), gt)?;
    }
    Ok(())
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round_ties_even()
}

pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    let data: Vec<u16> = rgb_values(img)?.map(|v| quantize(v, 65535.0) as u16).collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data)
            .ok_or_else(|| Error::Contract("PNG buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| Error::ingest(path, e.to_string()))
}

/// 8-bit PNG with round-half-even quantisation.
pub fn write_png8(path: &Path, img: &Image) -> Result<()> {
    let data: Vec<u8> = rgb_values(img)?.map(|v| quantize(v, 255.0) as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data)
            .ok_or_else(|| Error::Contract("PNG buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| Error::ingest(path, e.to_string()))
}

fn rgb_values(img: &Image) -> Result<impl Iterator<Item = f64> + '_> {
    if img.channels() != 3 {
        return Err(Error::Contract(format!("expected an RGB image, got {} channels", img.channels())));
    }
    Ok(img.data().iter().copied())
}

/// Writes a little-endian colour PFM (rows stored bottom-up).
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 12);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                out.extend_from_slice(&(img.get(y, x, c) as f32).to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a colour (`PF`) or greyscale (`Pf`) PFM in either byte order;
/// greyscale is replicated to RGB.
pub fn read_pfm(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<fs::File>| -> Result<String> {
        line.clear();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::ingest(path, e.to_string()))?;
        Ok(line.trim().to_string())
    };
    let channels = match next_line(&mut reader)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::ingest(path, format!("bad PFM magic `{other}`"))),
    };
    let dims = next_line(&mut reader)?;
    let parsed: Vec<usize> = dims.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    let [w, h] = parsed[..] else {
        return Err(Error::ingest(path, format!("bad PFM dimensions `{dims}`")));
    };
    let scale: f64 = next_line(&mut reader)?
        .parse()
        .map_err(|_| Error::ingest(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; w * h * channels * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::ingest(path, "truncated PFM payload"))?;
    let vals: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            f64::from(if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) })
        })
        .collect();
    Ok(Image::from_fn(h, w, 3, |y, x, c| {
        let row = h - 1 - y;
        vals[(row * w + x) * channels + if channels == 3 { c } else { 0 }]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldr::{synth_scene, SynthParams};

    #[test]
    fn pfm_header_and_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(2, 3, 3, |y, x, c| (y * 100 + x * 10 + c) as f64 * 0.5);
        let path = dir.path().join("a.pfm");
        write_pfm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"PF\n3 2\n-1.0\n"));
        let header = b"PF\n3 2\n-1.0\n".len();
        // First stored row is the bottom image row.
        let first = f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap());
        assert_eq!(first, 50.0);
        assert_eq!(read_pfm(&path).unwrap(), img);
    }

    #[test]
    fn bracket_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = synth_scene(&SynthParams { seed: 1, size: 32, motion_px: 4, saturation_frac: 0.1 }).unwrap();
        write_bracket(dir.path(), &scene.bracket).unwrap();
        let back = load_bracket(dir.path()).unwrap();
        assert_eq!(back.exposure_times, scene.bracket.exposure_times);
        for i in 0..3 {
            let err = back.ldr[i].data().iter().zip(scene.bracket.ldr[i].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 65535.0 + 1e-7, "{err}");
        }
        let gt_err = back.gt_hdr.unwrap().data().iter().zip(scene.bracket.gt_hdr.unwrap().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gt_err < 1e-7);
    }

    #[test]
    fn ingestion_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_bracket(dir.path()).unwrap_err().to_string();
        assert!(err.contains("ldr_1.png"), "{err}");

        let scene = synth_scene(&SynthParams { size: 32, ..Default::default() }).unwrap();
        write_bracket(dir.path(), &scene.bracket).unwrap();
        fs::write(dir.path().join("exposure.txt"), "-2\n0\n").unwrap();
        let err = load_bracket(dir.path()).unwrap_err().to_string();
        assert!(err.contains("exposure.txt") && err.contains("3 EV"), "{err}");
    }
}

//! Files: float32 NPY arrays, PNG images, `key=value` text records and the
//! on-disk burst dataset layout.
//!
//! ```text
//! <root>/<split>/<burst_id>/frame_00.npy ... frame_{N-1}.npy   [4, H, W]
//! <root>/<split>/<burst_id>/gt.npy                              [3, 2sH, 2sW]
//! <root>/<split>/<burst_id>/meta.txt
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use npyz::WriterBuilder;

use crate::error::{Error, Result};
use crate::raw_pipeline::{BurstSet, IspParams, Motion, NoiseParams, RggbFrame, SrgbImage};
use crate::tensor::Tensor;

/// Serializes a tensor as a float32 C-order NPY byte stream.
pub fn npy_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_npy_to(&mut buf, t).map_err(|e| Error::io("encoding npy", e))?;
    Ok(buf)
}

fn write_npy_to<W: Write>(w: W, t: &Tensor<f32>) -> std::io::Result<()> {
    let shape: Vec<u64> = t.shape().iter().map(|&d| d as u64).collect();
    let mut writer = npyz::WriteOptions::new().default_dtype().shape(&shape).writer(w).begin_nd()?;
    writer.extend(t.data().iter().copied())?;
    writer.finish()
}

pub fn npy_from_bytes(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    read_npy_from(bytes, origin)
}

fn read_npy_from<R: Read>(r: R, origin: &Path) -> Result<Tensor<f32>> {
    let npy = npyz::NpyFile::new(r).map_err(|e| Error::format(origin, e.to_string()))?;
    if npy.order() != npyz::Order::C {
        return Err(Error::format(origin, "only C-order arrays are supported"));
    }
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let data: Vec<f32> = npy.into_vec().map_err(|e| Error::format(origin, e.to_string()))?;
    Tensor::from_vec(&shape, data).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write_npy(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_npy_to(BufWriter::new(f), t).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_npy(path: &Path) -> Result<Tensor<f32>> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_npy_from(BufReader::new(f), path)
}

/// Writes a `[1, H, W]` or `[3, H, W]` tensor as an 8-bit PNG, clipping to `[0, 1]`.
pub fn write_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = t.dims3();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let result = match c {
        1 => image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([q(t.at3(0, y as usize, x as usize))]))
            .save(path),
        3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([q(t.at3(0, y, x)), q(t.at3(1, y, x)), q(t.at3(2, y, x))])
        })
        .save(path),
        _ => return Err(Error::Dimension(format!("cannot render {c} channels"))),
    };
    result.map_err(|e| Error::format(path, e.to_string()))
}

/// Reads any supported raster as an sRGB image with values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<SrgbImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set3(c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    SrgbImage::new(t)
}

/// Ordered `key=value` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record(pub Vec<(String, String)>);

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.push(key, value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Option<T> {
        self.get(key)?.parse().ok()
    }

    /// Single-line form: pairs separated by spaces.
    pub fn to_line(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }

    pub fn from_line(line: &str) -> Self {
        Self(line.split_whitespace().filter_map(|kv| kv.split_once('=')).map(|(k, v)| (k.into(), v.into())).collect())
    }

    /// Multi-line form: one pair per line.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Self {
        Self(
            text.lines()
                .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.trim().into(), v.trim().into()))
                .collect(),
        )
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

/// Metadata record of a burst (everything except the pixel arrays).
pub fn burst_meta(b: &BurstSet) -> Record {
    let mut r = Record::new();
    r.push("seed", b.seed)
        .push("scale", b.scale)
        .push("n_frames", b.len())
        .push("noise_shot", b.noise.shot)
        .push("noise_read", b.noise.read)
        .push("gains", join_f64(&b.isp.gains))
        .push("ccm", join_f64(&b.isp.ccm.concat()));
    for (i, m) in b.motions.iter().enumerate() {
        r.push(format!("motion_{i:02}"), join_f64(&[m.rotation, m.dx, m.dy]));
    }
    r
}

pub fn write_burst(dir: &Path, b: &BurstSet) -> Result<()> {
    create_dir(dir)?;
    for (i, f) in b.frames.iter().enumerate() {
        write_npy(&dir.join(format!("frame_{i:02}.npy")), &f.data)?;
    }
    write_npy(&dir.join("gt.npy"), &b.gt.data)?;
    write_text(&dir.join("meta.txt"), &burst_meta(b).to_text())
}

pub fn read_burst(dir: &Path) -> Result<BurstSet> {
    let meta_path = dir.join("meta.txt");
    let meta = Record::from_text(&read_text(&meta_path)?);
    let bad = |what: &str| Error::format(&meta_path, format!("missing or malformed `{what}`"));
    let n: usize = meta.parse_value("n_frames").ok_or_else(|| bad("n_frames"))?;
    let scale: usize = meta.parse_value("scale").ok_or_else(|| bad("scale"))?;
    let seed: u64 = meta.parse_value("seed").ok_or_else(|| bad("seed"))?;
    let noise = NoiseParams {
        shot: meta.parse_value("noise_shot").ok_or_else(|| bad("noise_shot"))?,
        read: meta.parse_value("noise_read").ok_or_else(|| bad("noise_read"))?,
    };
    let gains = meta.get("gains").and_then(split_f64).filter(|v| v.len() == 3).ok_or_else(|| bad("gains"))?;
    let ccm = meta.get("ccm").and_then(split_f64).filter(|v| v.len() == 9).ok_or_else(|| bad("ccm"))?;
    let isp = IspParams {
        gains: [gains[0], gains[1], gains[2]],
        ccm: [[ccm[0], ccm[1], ccm[2]], [ccm[3], ccm[4], ccm[5]], [ccm[6], ccm[7], ccm[8]]],
    };
    let mut motions = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let key = format!("motion_{i:02}");
        let m = meta.get(&key).and_then(split_f64).filter(|v| v.len() == 3).ok_or_else(|| bad(&key))?;
        motions.push(Motion { rotation: m[0], dx: m[1], dy: m[2] });
        let path = dir.join(format!("frame_{i:02}.npy"));
        frames.push(RggbFrame::new(read_npy(&path)?).map_err(|e| Error::format(&path, e.to_string()))?);
    }
    let gt_path = dir.join("gt.npy");
    if !gt_path.exists() {
        return Err(Error::format(&gt_path, "ground truth missing"));
    }
    let gt = SrgbImage::new(read_npy(&gt_path)?).map_err(|e| Error::format(&gt_path, e.to_string()))?;
    Ok(BurstSet { frames, gt, scale, motions, noise, isp, seed })
}

/// Sorted burst directories under `<root>/<split>`.
pub fn list_bursts(root: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let dir = root.join(split);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.txt").is_file())
        .collect();
    out.sort();
    Ok(out)
}

/// A burst loaded from disk with its directory name.
#[derive(Clone, Debug)]
pub struct NamedBurst {
    pub id: String,
    pub burst: BurstSet,
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<NamedBurst>> {
    list_bursts(root, split)?
        .into_iter()
        .map(|dir| {
            let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(NamedBurst { id, burst: read_burst(&dir)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw_pipeline::{synthesize_burst, SynthesisConfig};

    #[test]
    fn npy_round_trip() {
        let t = Tensor::from_fn(&[2, 3, 5], |i| i as f32 * 0.25 - 1.0);
        let bytes = npy_bytes(&t).unwrap();
        assert_eq!(&bytes[1..6], b"NUMPY");
        assert_eq!(npy_from_bytes(&bytes, Path::new("mem")).unwrap(), t);
    }

    #[test]
    fn record_lines() {
        let r = Record::new().with("step", 3).with("lr", 1e-4).with("l_sr", 0.5);
        assert_eq!(r.to_line(), "step=3 lr=0.0001 l_sr=0.5");
        assert_eq!(Record::from_line(&r.to_line()), r);
        assert_eq!(Record::from_text(&r.to_text()), r);
        assert_eq!(r.parse_value::<f64>("lr"), Some(1e-4));
    }

    #[test]
    fn burst_round_trip() {
        let gt = SrgbImage::new(Tensor::from_fn(&[3, 16, 16], |i| (i % 17) as f32 / 17.0)).unwrap();
        let b = synthesize_burst(&gt, 3, 2, 11, &SynthesisConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train").join("0000");
        write_burst(&path, &b).unwrap();
        assert_eq!(read_burst(&path).unwrap(), b);
        let all = load_split(dir.path(), "train").unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].id, "0000");
        fs::remove_file(path.join("gt.npy")).unwrap();
        assert!(matches!(read_burst(&path), Err(Error::Format { .. })));
    }
}

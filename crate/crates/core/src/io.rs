//! File formats: PFM depth, PGM masks, PPM/PNG images, binary PLY point
//! clouds, the Gaussian checkpoint and the camera/split JSON files.
//!
//! Readers never panic on malformed bytes; they return [`IoError::Malformed`].

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{DepthMap, DepthRole, Image, Intrinsics, Pose};
use crate::mvs::PointCloud;
use crate::render::GaussianSet;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {format}: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

fn malformed(format: &'static str, reason: impl Into<String>) -> IoError {
    IoError::Malformed {
        format,
        reason: reason.into(),
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|source| IoError::Io {
                path: dir.to_owned(),
                source,
            })?;
        }
    }
    std::fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Whitespace-separated header tokens of the netpbm family, with `#` comments.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Self { bytes, pos: 0, format }
    }

    fn token(&mut self) -> Result<&'a str, IoError> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while let Some(&c) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(malformed(self.format, "truncated header")),
            }
        }
        let start = self.pos;
        while let Some(c) = self.bytes.get(self.pos) {
            if c.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| malformed(self.format, "non-ascii header"))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, IoError> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| malformed(self.format, format!("bad {what} {t:?}")))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn payload(mut self, len: usize) -> Result<&'a [u8], IoError> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => self.pos += 1,
            _ => return Err(malformed(self.format, "missing header terminator")),
        }
        let rest = &self.bytes[self.pos..];
        if rest.len() != len {
            return Err(malformed(
                self.format,
                format!("payload is {} bytes, expected {len}", rest.len()),
            ));
        }
        Ok(rest)
    }
}

fn checked_len(format: &'static str, dims: &[usize]) -> Result<usize, IoError> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| malformed(format, "empty or oversized dimensions"))
}

/// A decoded PFM raster, stored top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Little-endian PFM, rows written bottom to top.
pub fn encode_pfm(pfm: &Pfm) -> Vec<u8> {
    let tag = if pfm.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", pfm.width, pfm.height).into_bytes();
    let row = pfm.width * pfm.channels;
    for y in (0..pfm.height).rev() {
        for v in &pfm.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Pfm, IoError> {
    const F: &str = "PFM";
    let mut h = HeaderReader::new(bytes, F);
    let channels = match h.token()? {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(malformed(F, format!("unknown tag {t:?}"))),
    };
    let width: usize = h.number("width")?;
    let height: usize = h.number("height")?;
    let scale: f64 = h.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed(F, "scale must be finite and nonzero"));
    }
    let n = checked_len(F, &[width, height, channels])?;
    let payload = h.payload(n.checked_mul(4).ok_or_else(|| malformed(F, "oversized"))?)?;
    let little = scale < 0.0;
    let row = width * channels;
    let mut data = vec![0.0f32; n];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

/// 8-bit binary PGM (P5).
pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), IoError> {
    const F: &str = "PGM";
    let mut h = HeaderReader::new(bytes, F);
    if h.token()? != "P5" {
        return Err(malformed(F, "expected P5"));
    }
    let width: usize = h.number("width")?;
    let height: usize = h.number("height")?;
    let maxval: u32 = h.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(malformed(F, format!("unsupported maxval {maxval}")));
    }
    let n = checked_len(F, &[width, height])?;
    Ok((width, height, h.payload(n)?.to_vec()))
}

/// 8-bit binary PPM (P6) with raw bytes.
pub fn encode_ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn decode_ppm_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), IoError> {
    const F: &str = "PPM";
    let mut h = HeaderReader::new(bytes, F);
    if h.token()? != "P6" {
        return Err(malformed(F, "expected P6"));
    }
    let width: usize = h.number("width")?;
    let height: usize = h.number("height")?;
    let maxval: u32 = h.number("maxval")?;
    if maxval != 255 {
        return Err(malformed(F, format!("unsupported maxval {maxval}")));
    }
    let n = checked_len(F, &[width, height, 3])?;
    Ok((width, height, h.payload(n)?.to_vec()))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_to_bytes(img: &Image) -> Vec<u8> {
    img.data.iter().map(|&v| quantize(v)).collect()
}

fn image_from_bytes(width: usize, height: usize, rgb: &[u8]) -> Image {
    Image::from_data(width, height, rgb.iter().map(|&b| b as f32 / 255.0).collect())
        .expect("length checked by the decoder")
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    encode_ppm_bytes(img.width, img.height, &image_to_bytes(img))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, IoError> {
    let (w, h, rgb) = decode_ppm_bytes(bytes)?;
    Ok(image_from_bytes(w, h, &rgb))
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>, IoError> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, image_to_bytes(img))
        .ok_or_else(|| malformed("PNG", "buffer size"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Image, IoError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(image_from_bytes(w as usize, h as usize, img.as_raw()))
}

/// Reads a `.png` or `.ppm` by extension.
pub fn read_image(path: &Path) -> Result<Image, IoError> {
    let bytes = read_file(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => decode_png(&bytes),
        _ => decode_ppm(&bytes),
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<(), IoError> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => encode_png(img)?,
        _ => encode_ppm(img),
    };
    write_file(path, &bytes)
}

/// Depth as a single-channel PFM; invalid pixels are stored as 0.
pub fn depth_to_pfm(d: &DepthMap) -> Pfm {
    Pfm {
        width: d.width,
        height: d.height,
        channels: 1,
        data: (0..d.width * d.height)
            .map(|i| if d.valid[i] { d.depth[i] as f32 } else { 0.0 })
            .collect(),
    }
}

/// Nonpositive or non-finite samples are invalid unless a mask says otherwise.
pub fn depth_from_pfm(
    pfm: &Pfm,
    mask: Option<&[u8]>,
    role: DepthRole,
) -> Result<DepthMap, IoError> {
    if pfm.channels != 1 {
        return Err(malformed("PFM", "depth must have one channel"));
    }
    let n = pfm.width * pfm.height;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(malformed("PGM", "mask size differs from depth"));
        }
    }
    let mut d = DepthMap::empty(pfm.width, pfm.height, role);
    for i in 0..n {
        let v = pfm.data[i] as f64;
        let ok = v > 0.0 && v.is_finite() && mask.is_none_or(|m| m[i] != 0);
        if ok {
            d.depth[i] = v;
            d.valid[i] = true;
        }
    }
    Ok(d)
}

pub fn mask_path(depth_path: &Path) -> PathBuf {
    depth_path.with_extension("pgm")
}

pub fn mask_to_bytes(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&m| if m { 255 } else { 0 }).collect()
}

/// Writes `path` and, when some pixels are invalid, the PGM mask next to it.
pub fn write_depth(path: &Path, d: &DepthMap) -> Result<(), IoError> {
    write_file(path, &encode_pfm(&depth_to_pfm(d)))?;
    let mp = mask_path(path);
    if d.valid.iter().any(|v| !v) {
        write_file(&mp, &encode_pgm(d.width, d.height, &mask_to_bytes(&d.valid)))?;
    } else if mp.exists() {
        std::fs::remove_file(&mp).map_err(|source| IoError::Io { path: mp, source })?;
    }
    Ok(())
}

pub fn read_depth(path: &Path, role: DepthRole) -> Result<DepthMap, IoError> {
    let pfm = decode_pfm(&read_file(path)?)?;
    let mp = mask_path(path);
    let mask = if mp.exists() {
        let (w, h, m) = decode_pgm(&read_file(&mp)?)?;
        if (w, h) != (pfm.width, pfm.height) {
            return Err(malformed("PGM", "mask size differs from depth"));
        }
        Some(m)
    } else {
        None
    };
    depth_from_pfm(&pfm, mask.as_deref(), role)
}

const PLY_HEADER_END: &[u8] = b"end_header\n";

/// Binary little-endian PLY with `float x,y,z` and `uchar red,green,blue`.
pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.positions.len();
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {n}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    )
    .into_bytes();
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in c {
            out.push(quantize(*v as f32));
        }
    }
    out
}

pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud, IoError> {
    const F: &str = "PLY";
    let end = bytes
        .windows(PLY_HEADER_END.len())
        .position(|w| w == PLY_HEADER_END)
        .ok_or_else(|| malformed(F, "no end_header"))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|_| malformed(F, "non-utf8 header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(malformed(F, "missing magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(malformed(F, format!("unsupported {line:?}"))),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| malformed(F, "bad vertex count"))?)
            }
            ["element", ..] => return Err(malformed(F, format!("unsupported {line:?}"))),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            _ => return Err(malformed(F, format!("unexpected {line:?}"))),
        }
    }
    let expected = [
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("uchar", "red"),
        ("uchar", "green"),
        ("uchar", "blue"),
    ];
    if props.len() != expected.len()
        || props.iter().zip(expected).any(|((t, n), (et, en))| t != et || n != en)
    {
        return Err(malformed(F, "unsupported vertex layout"));
    }
    let n = count.ok_or_else(|| malformed(F, "no vertex element"))?;
    let body = &bytes[end + PLY_HEADER_END.len()..];
    if n.checked_mul(15) != Some(body.len()) {
        return Err(malformed(F, "body length does not match vertex count"));
    }
    let mut cloud = PointCloud {
        positions: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
    };
    for rec in body.chunks_exact(15) {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
        cloud.positions.push([f(0), f(4), f(8)]);
        cloud
            .colors
            .push([rec[12], rec[13], rec[14]].map(|b| b as f64 / 255.0));
    }
    Ok(cloud)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVPG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout: magic, version, count, SH degree, then positions,
/// log-scales, rotations, opacity logits and SH coefficients as f32 LE.
pub fn encode_checkpoint(g: &GaussianSet) -> Vec<u8> {
    let n = g.len();
    let mut out = Vec::with_capacity(20 + n * (11 + g.sh_stride()) * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(g.sh_degree as u32).to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    g.positions.iter().flatten().for_each(|&v| put(v));
    g.log_scales.iter().flatten().for_each(|&v| put(v));
    g.rotations.iter().flatten().for_each(|&v| put(v));
    g.opacity_logits.iter().for_each(|&v| put(v));
    g.sh_coeffs.iter().for_each(|&v| put(v));
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GaussianSet, IoError> {
    const F: &str = "checkpoint";
    if bytes.len() < 20 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(malformed(F, "missing magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(malformed(F, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let degree = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if degree > 3 {
        return Err(malformed(F, format!("SH degree {degree} > 3")));
    }
    let n = usize::try_from(n).map_err(|_| malformed(F, "count overflow"))?;
    let per_row = 11 + (degree + 1) * (degree + 1) * 3;
    let body = &bytes[20..];
    if n.checked_mul(per_row * 4) != Some(body.len()) {
        return Err(malformed(F, "body length does not match count"));
    }
    let mut vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut take = |k: usize| -> Vec<f64> { vals.by_ref().take(k).collect() };
    let triples = |v: Vec<f64>| -> Vec<[f64; 3]> {
        v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    };
    let positions = triples(take(n * 3));
    let log_scales = triples(take(n * 3));
    let rotations = take(n * 4)
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let opacity_logits = take(n);
    let sh_coeffs = take(n * (per_row - 11));
    Ok(GaussianSet {
        sh_degree: degree,
        positions,
        log_scales,
        rotations,
        opacity_logits,
        sh_coeffs,
    })
}

/// One entry of `cameras.json`. `R` and `t` are the camera-to-world rotation
/// (row-major) and camera center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(k: &Intrinsics, pose: &Pose) -> Self {
        let m = pose.rotation;
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            r: [
                m[(0, 0)], m[(0, 1)], m[(0, 2)],
                m[(1, 0)], m[(1, 1)], m[(1, 2)],
                m[(2, 0)], m[(2, 1)], m[(2, 2)],
            ],
            t: pose.translation.into(),
        }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics, crate::geometry::GeometryError> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    pub fn pose(&self) -> Result<Pose, crate::geometry::GeometryError> {
        Pose::new(Matrix3::from_row_slice(&self.r), Vector3::from(self.t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pfm_rows_are_bottom_up() {
        let pfm = Pfm {
            width: 1,
            height: 2,
            channels: 1,
            data: vec![1.0, 2.0],
        };
        let bytes = encode_pfm(&pfm);
        let header = b"Pf\n1 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 4], &2.0f32.to_le_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap(), pfm);
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-3.0f32).to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data, vec![1.5, -3.0]);
    }

    #[test]
    fn malformed_inputs_are_errors() {
        for bad in [
            &b""[..],
            b"Pf\n",
            b"Pf\n2 2\n-1.0\n\0\0",
            b"Pq\n1 1\n-1.0\n\0\0\0\0",
            b"Pf\n0 1\n-1.0\n",
            b"Pf\n99999999999 99999999999\n-1.0\n",
            b"Pf\n1 1\n0\n\0\0\0\0",
        ] {
            assert!(decode_pfm(bad).is_err());
        }
        assert!(decode_ppm(b"P6\n2 2\n255\n\0").is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode_ply(b"ply\nformat ascii 1.0\nend_header\n").is_err());
        assert!(decode_checkpoint(b"MVPG").is_err());
        assert!(decode_png(b"\x89PNG garbage").is_err());
    }

    #[test]
    fn netpbm_comments_are_skipped() {
        let (w, h, px) = decode_ppm_bytes(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!((w, h, px), (1, 1, vec![1, 2, 3]));
    }

    #[test]
    fn depth_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = DepthMap::from_depths(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], DepthRole::Mvs);
        d.valid[4] = false;
        d.depth[4] = 0.0;
        let p = dir.path().join("depth_mvs/000.pfm");
        write_depth(&p, &d).unwrap();
        assert!(mask_path(&p).exists());
        assert_eq!(read_depth(&p, DepthRole::Mvs).unwrap(), d);
    }

    #[test]
    fn png_round_trip() {
        let img = Image::from_data(2, 1, vec![0.0, 1.0, 128.0 / 255.0, 1.0, 0.0, 3.0 / 255.0]).unwrap();
        assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn camera_record_round_trip() {
        let k = Intrinsics::centered(40.0, 32, 24).unwrap();
        let pose = Pose::look_at(
            Vector3::new(1.0, -0.5, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        );
        let rec = CameraRecord::from_camera(&k, &pose);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"R\""));
        let back: CameraRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.intrinsics().unwrap(), k);
        assert_eq!(back.pose().unwrap(), pose);
    }

    fn finite_f32() -> impl Strategy<Value = f32> {
        any::<f32>().prop_filter("finite", |v| v.is_finite())
    }

    proptest! {
        #[test]
        fn pfm_bytes_round_trip(w in 1usize..9, h in 1usize..9, c in prop::sample::select(vec![1usize, 3]),
                                seed in proptest::collection::vec(finite_f32(), 243)) {
            let data = seed[..w * h * c].to_vec();
            let pfm = Pfm { width: w, height: h, channels: c, data };
            let bytes = encode_pfm(&pfm);
            let back = decode_pfm(&bytes).unwrap();
            prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            pfm.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(encode_pfm(&back), bytes);
        }

        #[test]
        fn ppm_bytes_round_trip(w in 1usize..9, h in 1usize..9, px in proptest::collection::vec(any::<u8>(), 192)) {
            let bytes = encode_ppm_bytes(w, h, &px[..w * h * 3]);
            let img = decode_ppm(&bytes).unwrap();
            prop_assert_eq!(encode_ppm(&img), bytes);
        }

        #[test]
        fn readers_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_pfm(&bytes);
            let _ = decode_ppm(&bytes);
            let _ = decode_pgm(&bytes);
            let _ = decode_ply(&bytes);
            let _ = decode_checkpoint(&bytes);
        }

        #[test]
        fn truncated_headers_never_panic(cut in 0usize..40) {
            let mut full = encode_ppm_bytes(2, 2, &[7; 12]);
            full.truncate(cut.min(full.len()));
            let _ = decode_ppm(&full);
            let mut p = encode_pfm(&Pfm { width: 2, height: 1, channels: 1, data: vec![1.0, 2.0] });
            p.truncate(cut.min(p.len()));
            let _ = decode_pfm(&p);
        }
    }
}

//! Little-endian raster formats: `.pt3r` coherency rasters, `.plbl` label
//! maps, `.pftc` feature cubes and `.pspx` superpixel maps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::decomposition::FeatureCube;
use crate::error::{Error, Result};
use crate::polsar::{CoherencyMatrix, Hermitian3, PolSARImage};
use crate::superpixel::SuperpixelMap;

pub const PT3R_MAGIC: &[u8; 4] = b"PT3R";
pub const PLBL_MAGIC: &[u8; 4] = b"PLBL";
pub const PFTC_MAGIC: &[u8; 4] = b"PFTC";
pub const PSPX_MAGIC: &[u8; 4] = b"PSPX";

/// Writes via a sibling temp file and a rename so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Invalid(format!("missing input file {}", path.display()))
        } else {
            Error::Io(e)
        }
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::Format(format!("{what}: bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        Ok(Self { buf, pos: 4, what })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn dims(&mut self) -> Result<(usize, usize)> {
        Ok((self.u32()? as usize, self.u32()? as usize))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4], h: usize, w: usize, capacity: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + capacity);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out
}

pub fn encode_pt3r(img: &PolSARImage) -> Vec<u8> {
    let mut out = header(PT3R_MAGIC, img.height, img.width, img.len() * 36);
    for p in &img.pixels {
        for v in p.to_reals() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes pixel data only; labels travel in a separate `.plbl` file.
pub fn decode_pt3r(buf: &[u8]) -> Result<PolSARImage> {
    let mut r = Reader::new(buf, PT3R_MAGIC, "pt3r")?;
    let (h, w) = r.dims()?;
    let mut pixels = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        let mut v = [0.0; 9];
        for x in &mut v {
            *x = f64::from(r.f32()?);
        }
        pixels.push(CoherencyMatrix(Hermitian3::from_reals(&v)));
    }
    r.finish()?;
    PolSARImage::new(h, w, pixels)
}

pub fn encode_plbl(height: usize, width: usize, labels: &[u16]) -> Vec<u8> {
    let mut out = header(PLBL_MAGIC, height, width, labels.len() * 2);
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_plbl(buf: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut r = Reader::new(buf, PLBL_MAGIC, "plbl")?;
    let (h, w) = r.dims()?;
    let labels = (0..h * w).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((h, w, labels))
}

pub fn encode_pftc(cube: &FeatureCube) -> Vec<u8> {
    let mut out = header(PFTC_MAGIC, cube.height, cube.width, cube.data.len() * 4);
    out.extend_from_slice(&(cube.n_features() as u32).to_le_bytes());
    out.extend_from_slice(&(cube.n_groups() as u32).to_le_bytes());
    for &g in &cube.group_index {
        out.extend_from_slice(&g.to_le_bytes());
    }
    out.extend_from_slice(&(cube.group_names.len() as u16).to_le_bytes());
    for name in &cube.group_names {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_pftc(buf: &[u8]) -> Result<FeatureCube> {
    let mut r = Reader::new(buf, PFTC_MAGIC, "pftc")?;
    let (h, w) = r.dims()?;
    let n_features = r.u32()? as usize;
    let n_groups = r.u32()? as usize;
    let group_index = (0..n_features).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let count = r.u16()? as usize;
    if count != n_groups {
        return Err(Error::Format(format!("pftc: {count} group names for {n_groups} groups")));
    }
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let bytes = r.take(len)?;
        names.push(
            String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("pftc: group name is not UTF-8".into()))?,
        );
    }
    let data = (0..h * w * n_features).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    FeatureCube::new(h, w, group_index, names, data)
}

pub fn encode_pspx(map: &SuperpixelMap) -> Vec<u8> {
    let mut out = header(PSPX_MAGIC, map.height, map.width, map.ids.len() * 4 + 4);
    out.extend_from_slice(&(map.count as u32).to_le_bytes());
    for id in &map.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_pspx(buf: &[u8]) -> Result<SuperpixelMap> {
    let mut r = Reader::new(buf, PSPX_MAGIC, "pspx")?;
    let (h, w) = r.dims()?;
    let count = r.u32()? as usize;
    let ids = (0..h * w).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let map = SuperpixelMap::from_ids(h, w, ids)?;
    if map.count != count {
        return Err(Error::Format(format!("pspx: header says {count} superpixels, ids use {}", map.count)));
    }
    Ok(map)
}

/// Reads a `.pt3r` raster and, when given, its `.plbl` label map.
pub fn load_image(raster: &Path, labels: Option<&Path>) -> Result<PolSARImage> {
    let img = decode_pt3r(&read_file(raster)?)?;
    match labels {
        None => Ok(img),
        Some(p) => {
            let (h, w, l) = decode_plbl(&read_file(p)?)?;
            if (h, w) != (img.height, img.width) {
                return Err(Error::Invalid(format!(
                    "label map is {h}x{w} but raster is {}x{}",
                    img.height, img.width
                )));
            }
            img.with_labels(l)
        }
    }
}

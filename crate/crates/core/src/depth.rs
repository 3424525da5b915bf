use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, CoreError, Result};

/// Depth stored for pixels without a measurement. Any crop maps it to the
/// rear face of its cube.
pub const FAR_DEPTH: f32 = 10_000.0;

pub const DEPTH_MAGIC: &[u8; 9] = b"FBPOSE-D1";

/// Metric depth image in mm, row-major. A pixel is valid iff its depth is
/// below [`FAR_DEPTH`].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn invalid(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            data: vec![FAR_DEPTH; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return invalid(format!("{} values for a {width}x{height} image", data.len()));
        }
        if data.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return invalid("depth values must be finite and positive");
        }
        let data = data.into_iter().map(|d| d.min(FAR_DEPTH)).collect();
        Ok(DepthImage { width, height, data })
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.data[idx] < FAR_DEPTH
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d < FAR_DEPTH).count()
    }

    pub fn validity(&self) -> Vec<bool> {
        self.data.iter().map(|d| *d < FAR_DEPTH).collect()
    }

    /// Raw `FBPOSE-D1` encoding: magic, width and height as u32 LE, then the
    /// f32 LE depths row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 4 * self.data.len());
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for d in &self.data {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 17 || &bytes[..9] != DEPTH_MAGIC {
            return Err(CoreError::Format("missing FBPOSE-D1 magic".into()));
        }
        let w = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        let body = &bytes[17..];
        if body.len() != 4 * w * h {
            return Err(CoreError::Format(format!("expected {} depth bytes, found {}", 4 * w * h, body.len())));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(DepthImage { width: w, height: h, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Pixel-wise minimum; invalid pixels act as +inf so validity is an OR.
pub fn composite_min(a: &DepthImage, b: &DepthImage) -> Result<DepthImage> {
    if a.width != b.width || a.height != b.height {
        return invalid(format!(
            "composite of {}x{} with {}x{}",
            a.width, a.height, b.width, b.height
        ));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x.min(*y)).collect();
    Ok(DepthImage {
        width: a.width,
        height: a.height,
        data,
    })
}

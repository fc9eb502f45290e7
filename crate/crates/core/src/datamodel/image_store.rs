use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, RgbaImage};
use serde::{Deserialize, Serialize};

use super::{sha256_hex, DataError, Result};

pub const PNG_MEDIA_TYPE: &str = "image/png";

/// Pointer to an image held in an [`ImageStore`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub digest: String,
    pub media: String,
    pub width: u32,
    pub height: u32,
}

/// Content-addressed PNG store laid out as `images/<first-2-hex>/<digest>`.
///
/// Incoming bytes are decoded and re-encoded as 8-bit RGBA PNG with fixed
/// encoder settings, so one logical raster always maps to one digest.
#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    /// Opens (creating if needed) the store rooted at `dir/images`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().join("images");
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        let prefix = digest.get(..2).unwrap_or("__");
        self.root.join(prefix).join(digest)
    }

    pub fn contains(&self, digest: &str) -> bool {
        digest.len() == 64
            && digest.bytes().all(|b| b.is_ascii_hexdigit())
            && self.path_for(digest).is_file()
    }

    /// Decodes `bytes` as PNG, stores the canonical encoding and returns its ref.
    pub fn put(&self, bytes: &[u8]) -> Result<ImageRef> {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| DataError::UndecodableImage(e.to_string()))?;
        self.put_image(&decoded.to_rgba8())
    }

    pub fn put_image(&self, img: &RgbaImage) -> Result<ImageRef> {
        let bytes = encode_png(img)?;
        let digest = sha256_hex(&bytes);
        let path = self.path_for(&digest);
        if !path.is_file() {
            let dir = path.parent().expect("digest path has a parent");
            fs::create_dir_all(dir)?;
            // Write-then-rename keeps concurrent puts of the same bytes safe.
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            tmp.write_all(&bytes)?;
            tmp.flush()?;
            if let Err(err) = tmp.persist(&path) {
                if !path.is_file() {
                    return Err(DataError::Io(err.error));
                }
            }
        }
        Ok(ImageRef {
            digest,
            media: PNG_MEDIA_TYPE.to_string(),
            width: img.width(),
            height: img.height(),
        })
    }

    pub fn get(&self, image: &ImageRef) -> Result<Vec<u8>> {
        if !self.contains(&image.digest) {
            return Err(DataError::DanglingImage(image.digest.clone()));
        }
        Ok(fs::read(self.path_for(&image.digest))?)
    }

    pub fn load(&self, image: &ImageRef) -> Result<RgbaImage> {
        let bytes = self.get(image)?;
        let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| DataError::UndecodableImage(e.to_string()))?;
        Ok(decoded.to_rgba8())
    }

    /// Number of objects currently stored.
    pub fn object_count(&self) -> Result<usize> {
        let mut count = 0;
        for prefix in fs::read_dir(&self.root)? {
            let prefix = prefix?;
            if prefix.file_type()?.is_dir() {
                for entry in fs::read_dir(prefix.path())? {
                    let entry = entry?;
                    let name = entry.file_name();
                    if entry.file_type()?.is_file() && name.len() == 64 {
                        count += 1;
                    }
                }
            }
        }
        Ok(count)
    }
}

/// Canonical PNG encoding used throughout the artifact.
pub fn encode_png(img: &RgbaImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    let encoder =
        PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive);
    encoder
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgba8,
        )
        .map_err(|e| DataError::UndecodableImage(e.to_string()))?;
    Ok(out.into_inner())
}

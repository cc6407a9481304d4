//! Image catalog backed by a dataset manifest, plus the interface a remote
//! archive client would implement.

use image::RgbImage;
use protomsl::dataset::{DatasetIndex, ImageEntry, ImageLoader};

use crate::error::{ApiError, ApiResult};

/// Source of encoded image bytes by id, for catalogs not on local disk.
pub trait ImageArchive: Send + Sync {
    fn fetch(&self, image_id: &str) -> ApiResult<Vec<u8>>;
}

/// Placeholder for a remote archive; every fetch reports the archive as unavailable.
#[derive(Clone, Debug, Default)]
pub struct RemoteArchive {
    pub base_url: String,
}

impl ImageArchive for RemoteArchive {
    fn fetch(&self, image_id: &str) -> ApiResult<Vec<u8>> {
        Err(ApiError::new(
            axum::http::StatusCode::SERVICE_UNAVAILABLE,
            "archive_unavailable",
            format!("remote archive at `{}` is not connected; cannot fetch {image_id}", self.base_url),
        ))
    }
}

#[derive(Debug)]
pub struct Catalog {
    index: DatasetIndex,
    loader: ImageLoader,
}

impl Catalog {
    pub fn new(index: DatasetIndex, input_size: usize) -> Self {
        Self {
            index,
            loader: ImageLoader::with_cache(input_size),
        }
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn input_size(&self) -> usize {
        self.loader.input_size()
    }

    pub fn entry(&self, image_id: &str) -> ApiResult<&ImageEntry> {
        self.index
            .get(image_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown image_id `{image_id}`")))
    }

    /// Decoded image at model input size.
    pub fn image(&self, image_id: &str) -> ApiResult<RgbImage> {
        let entry = self.entry(image_id)?;
        Ok(self.loader.load(entry)?)
    }

    pub fn decode(&self, bytes: &[u8]) -> ApiResult<RgbImage> {
        Ok(self.loader.decode(bytes)?)
    }

    /// Original encoded file bytes.
    pub fn raw(&self, image_id: &str) -> ApiResult<Vec<u8>> {
        let entry = self.entry(image_id)?;
        std::fs::read(&entry.path).map_err(|e| ApiError::internal(format!("{}: {e}", entry.path.display())))
    }
}

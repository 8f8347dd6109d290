use std::collections::HashMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;

/// Resolves a record's `image_ref` to pixels.
pub trait ImageStore: Sync {
    fn load(&self, image_ref: &str) -> Result<ImageBuffer>;
}

/// Reads image files, resolving relative refs against `root` when set.
#[derive(Clone, Debug, Default)]
pub struct FileStore {
    pub root: Option<PathBuf>,
}

impl FileStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rooted(root: impl Into<PathBuf>) -> Self {
        Self { root: Some(root.into()) }
    }
}

impl ImageStore for FileStore {
    fn load(&self, image_ref: &str) -> Result<ImageBuffer> {
        match &self.root {
            Some(root) => ImageBuffer::open(root.join(image_ref)),
            None => ImageBuffer::open(image_ref),
        }
    }
}

/// In-memory images keyed by `image_ref`, used for synthetic corpora.
#[derive(Clone, Debug, Default)]
pub struct MemoryStore {
    images: HashMap<String, ImageBuffer>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, image: ImageBuffer) {
        self.images.insert(image_ref.into(), image);
    }

    pub fn get(&self, image_ref: &str) -> Option<&ImageBuffer> {
        self.images.get(image_ref)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ImageBuffer)> {
        self.images.iter()
    }
}

impl ImageStore for MemoryStore {
    fn load(&self, image_ref: &str) -> Result<ImageBuffer> {
        self.images.get(image_ref).cloned().ok_or_else(|| Error::UnreadableImage {
            path: image_ref.to_owned(),
            reason: "not in the in-memory store".into(),
        })
    }
}

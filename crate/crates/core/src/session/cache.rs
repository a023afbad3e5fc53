use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::ImageId;

/// Similarity values keyed by `(exact serialized text, image id)`.
///
/// Values are deterministic functions of the key, so overwriting an entry
/// with a different value is refused.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityCache {
    entries: BTreeMap<String, BTreeMap<ImageId, f64>>,
}

/// Attempted to overwrite a cached value with a different one.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("cache already holds {existing} for ({text:?}, {image}), refusing {attempted}")]
pub struct InconsistentCacheWrite {
    pub text: String,
    pub image: ImageId,
    pub existing: f64,
    pub attempted: f64,
}

/// One row of `cache.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRow {
    pub text: String,
    pub image_id: ImageId,
    pub score: f64,
}

impl SimilarityCache {
    pub fn get(&self, text: &str, image: &ImageId) -> Option<f64> {
        self.entries.get(text)?.get(image).copied()
    }

    pub fn put(&mut self, text: &str, image: &ImageId, score: f64) -> Result<(), InconsistentCacheWrite> {
        let row = self.entries.entry(text.to_owned()).or_default();
        match row.get(image) {
            Some(&existing) if existing.to_bits() != score.to_bits() => Err(InconsistentCacheWrite {
                text: text.to_owned(),
                image: image.clone(),
                existing,
                attempted: score,
            }),
            Some(_) => Ok(()),
            None => {
                row.insert(image.clone(), score);
                Ok(())
            }
        }
    }

    /// Cached values for `text` over `images`, or `None` if any is missing.
    pub fn get_all<'a>(&self, text: &str, images: impl IntoIterator<Item = &'a ImageId>) -> Option<Vec<f64>> {
        let row = self.entries.get(text)?;
        images.into_iter().map(|id| row.get(id).copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Drops every entry for the given images.
    pub fn forget_images(&mut self, images: &[ImageId]) {
        for row in self.entries.values_mut() {
            for id in images {
                row.remove(id);
            }
        }
        self.entries.retain(|_, row| !row.is_empty());
    }

    /// Rows sorted by text, then image id.
    pub fn rows(&self) -> Vec<CacheRow> {
        self.entries
            .iter()
            .flat_map(|(text, row)| {
                row.iter().map(move |(image, &score)| CacheRow {
                    text: text.clone(),
                    image_id: image.clone(),
                    score,
                })
            })
            .collect()
    }

    pub fn from_rows(rows: Vec<CacheRow>) -> Result<Self, InconsistentCacheWrite> {
        let mut cache = Self::default();
        for row in rows {
            cache.put(&row.text, &row.image_id, row.score)?;
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_semantics() {
        let mut c = SimilarityCache::default();
        let img = ImageId::from("i1");
        assert_eq!(c.get("a dog", &img), None);
        c.put("a dog", &img, 0.4).unwrap();
        assert_eq!(c.get("a dog", &img), Some(0.4));
        c.put("a dog", &img, 0.4).unwrap();
        let err = c.put("a dog", &img, 0.5).unwrap_err();
        assert_eq!(err.existing, 0.4);
        assert_eq!(c.get("a dog", &img), Some(0.4));
    }

    #[test]
    fn texts_are_not_canonicalized() {
        let mut c = SimilarityCache::default();
        let img = ImageId::from("i1");
        c.put("a dog", &img, 0.4).unwrap();
        assert_eq!(c.get("a  dog", &img), None);
        assert_eq!(c.get("A dog", &img), None);
    }

    #[test]
    fn get_all_requires_every_image() {
        let mut c = SimilarityCache::default();
        let (a, b) = (ImageId::from("a"), ImageId::from("b"));
        c.put("t", &a, 0.1).unwrap();
        assert_eq!(c.get_all("t", [&a, &b]), None);
        c.put("t", &b, 0.2).unwrap();
        assert_eq!(c.get_all("t", [&b, &a]), Some(vec![0.2, 0.1]));
    }

    #[test]
    fn rows_round_trip() {
        let mut c = SimilarityCache::default();
        c.put("b", &ImageId::from("2"), 0.25).unwrap();
        c.put("a", &ImageId::from("1"), 0.75).unwrap();
        let rows = c.rows();
        assert_eq!(rows[0].text, "a");
        assert_eq!(SimilarityCache::from_rows(rows).unwrap(), c);
        c.forget_images(&[ImageId::from("2")]);
        assert_eq!(c.len(), 1);
    }
}

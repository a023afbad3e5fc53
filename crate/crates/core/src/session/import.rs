use std::fs;
use std::path::{Path, PathBuf};

use super::{image_file_ref, ImageOwner, Result, Session, SessionError};
use crate::embedding::{embed_images, EmbeddingProvider, EmbeddingTable};
use crate::ids::{AnchorId, ImageId};
use crate::imaging::is_png;
use crate::par;
use crate::tree::NodeId;

#[derive(Debug, Clone, Copy, Default)]
pub struct ImportOptions {
    /// Accept fewer or more files than `config.n`, with a warning.
    pub allow_partial: bool,
}

/// An image with its bytes and raw embedding, ready to be added.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: ImageId,
    pub bytes: Vec<u8>,
    pub raw: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportReport {
    pub anchor: AnchorId,
    pub imported: Vec<ImageId>,
    /// Image-embedding calls made to the provider.
    pub provider_calls: usize,
}

fn read_png(path: &Path) -> Result<(ImageId, Vec<u8>)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| SessionError::Format(format!("bad file name {}", path.display())))?;
    let bytes = fs::read(path)?;
    if !is_png(&bytes) {
        return Err(SessionError::NotPng(path.to_path_buf()));
    }
    Ok((ImageId::new(stem), bytes))
}

/// Attaches embeddings to images: looked up by id in `table` when given,
/// otherwise fetched from `provider` with one call per image.
pub fn prepare_images(
    images: Vec<(ImageId, Vec<u8>)>,
    table: Option<&EmbeddingTable>,
    provider: Option<&dyn EmbeddingProvider>,
    dim: Option<usize>,
) -> Result<(Vec<PreparedImage>, usize)> {
    if let Some(table) = table {
        if let Some(d) = dim.filter(|&d| d != table.dim) {
            return Err(SessionError::DimInconsistent(format!(
                "session dim is {d}, embeddings file has {}",
                table.dim
            )));
        }
        let prepared = images
            .into_iter()
            .map(|(id, bytes)| {
                let raw = table
                    .get(id.as_str())
                    .ok_or_else(|| SessionError::MissingEmbedding(id.clone()))?
                    .to_vec();
                Ok(PreparedImage { id, bytes, raw })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok((prepared, 0));
    }
    let provider = provider
        .ok_or_else(|| SessionError::InvalidConfig("neither an embeddings file nor a provider was given".into()))?;
    let vectors = par::map_coarse(&images, |(_, bytes)| {
        embed_images(provider, std::slice::from_ref(bytes), dim)
    });
    let calls = images.len();
    let mut prepared = Vec::with_capacity(images.len());
    for ((id, bytes), v) in images.into_iter().zip(vectors) {
        let v = v?.pop().expect("one vector per image");
        prepared.push(PreparedImage {
            id,
            bytes,
            raw: v.to_f32(),
        });
    }
    Ok((prepared, calls))
}

/// Copies image files into the session directory, embeds them and records
/// them under `anchor`. Nothing is changed if any step before writing fails.
pub fn import_anchor_images(
    session: &mut Session,
    dir: &Path,
    anchor: &AnchorId,
    files: &[PathBuf],
    embeddings: Option<&EmbeddingTable>,
    provider: Option<&dyn EmbeddingProvider>,
    options: ImportOptions,
) -> Result<ImportReport> {
    let expected = session.config().n;
    let existing = session.anchor(anchor)?.image_ids.len();
    let found = existing + files.len();
    if found != expected {
        if !options.allow_partial {
            return Err(SessionError::CountMismatch {
                anchor: anchor.clone(),
                expected,
                found,
            });
        }
        log::warn!("anchor {anchor} will have {found} images, config expects {expected}");
    }
    let images = files.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    let (prepared, provider_calls) = prepare_images(images, embeddings, provider, session.config().dim)?;
    let prompt = session.anchor(anchor)?.prompt_text.clone();
    let imported = ingest(session, dir, ImageOwner::Anchor(anchor.clone()), &prompt, &prepared)?;
    Ok(ImportReport {
        anchor: anchor.clone(),
        imported,
        provider_calls,
    })
}

/// Stores generated images for a test node and flags the node.
pub fn add_test_images(
    session: &mut Session,
    dir: &Path,
    node: NodeId,
    origin_prompt: &str,
    images: &[PreparedImage],
) -> Result<Vec<ImageId>> {
    ingest(session, dir, ImageOwner::Node(node), origin_prompt, images)
}

/// Writes image files and records the images in the session.
pub(crate) fn ingest(
    session: &mut Session,
    dir: &Path,
    owner: ImageOwner,
    origin_prompt: &str,
    images: &[PreparedImage],
) -> Result<Vec<ImageId>> {
    // Validate against a scratch copy so a failure leaves no partial state.
    let mut scratch = session.clone();
    let ids = scratch.add_images(owner, origin_prompt, images)?;
    fs::create_dir_all(dir.join(super::IMAGES_DIR))?;
    for img in images {
        super::store::write_atomic(&dir.join(image_file_ref(&img.id)), &img.bytes)?;
    }
    *session = scratch;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{CountingProvider, HashProvider};
    use crate::imaging::noise_png;
    use crate::session::{load_session, save_session, AnchorSpec, SessionConfig};

    fn setup(n: usize, k: usize) -> (tempfile::TempDir, Session, Vec<PathBuf>) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SessionConfig {
            n,
            ..Default::default()
        };
        let s = Session::create("t", vec![AnchorSpec::new("a"), AnchorSpec::new("b")], cfg).unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(&src).unwrap();
        let files = (0..k)
            .map(|i| {
                let p = src.join(format!("a{i:02}.png"));
                fs::write(&p, noise_png(i as u64, 4, 4)).unwrap();
                p
            })
            .collect();
        (dir, s, files)
    }

    #[test]
    fn provider_path_one_call_per_image() {
        let (dir, mut s, files) = setup(6, 6);
        let provider = CountingProvider::new(HashProvider::new(8, 1));
        let r = import_anchor_images(
            &mut s,
            &dir.path().join("sess"),
            &AnchorId::from("c1"),
            &files,
            None,
            Some(&provider),
            ImportOptions::default(),
        )
        .unwrap();
        assert_eq!(r.imported.len(), 6);
        assert_eq!(provider.image_calls(), 6);
        assert_eq!(s.config().dim, Some(8));
        assert_eq!(s.anchor(&AnchorId::from("c1")).unwrap().image_ids.len(), 6);
        save_session(&s, &dir.path().join("sess")).unwrap();
        assert_eq!(load_session(&dir.path().join("sess")).unwrap(), s);
    }

    #[test]
    fn file_path_makes_no_calls() {
        let (dir, mut s, files) = setup(3, 3);
        let mut table = EmbeddingTable::new(4, "fixture");
        for i in 0..3 {
            table
                .insert(format!("a{i:02}"), vec![i as f32 + 1.0, 0.5, -0.5, 0.0])
                .unwrap();
        }
        let provider = CountingProvider::new(HashProvider::new(4, 1));
        import_anchor_images(
            &mut s,
            dir.path(),
            &AnchorId::from("c2"),
            &files,
            Some(&table),
            Some(&provider),
            ImportOptions::default(),
        )
        .unwrap();
        assert_eq!(provider.image_calls(), 0);
        assert_eq!(s.images().len(), 3);
        assert!(dir.path().join("images/a01.png").is_file());
    }

    #[test]
    fn count_mismatch_unless_partial() {
        let (dir, mut s, files) = setup(5, 2);
        let provider = HashProvider::new(4, 1);
        let before = s.clone();
        let err = import_anchor_images(
            &mut s,
            dir.path(),
            &AnchorId::from("c1"),
            &files,
            None,
            Some(&provider),
            ImportOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SessionError::CountMismatch {
                expected: 5,
                found: 2,
                ..
            }
        ));
        assert_eq!(s, before);
        import_anchor_images(
            &mut s,
            dir.path(),
            &AnchorId::from("c1"),
            &files,
            None,
            Some(&provider),
            ImportOptions { allow_partial: true },
        )
        .unwrap();
        assert_eq!(s.images().len(), 2);
    }

    #[test]
    fn rejects_non_png_and_missing_embeddings() {
        let (dir, mut s, mut files) = setup(2, 1);
        let bad = dir.path().join("src/bad.png");
        fs::write(&bad, b"GIF89a").unwrap();
        files.push(bad);
        let provider = HashProvider::new(4, 1);
        assert!(matches!(
            import_anchor_images(
                &mut s,
                dir.path(),
                &AnchorId::from("c1"),
                &files,
                None,
                Some(&provider),
                ImportOptions::default()
            ),
            Err(SessionError::NotPng(_))
        ));
        files.pop();
        let table = EmbeddingTable::new(4, "empty");
        assert!(matches!(
            import_anchor_images(
                &mut s,
                dir.path(),
                &AnchorId::from("c1"),
                &files,
                Some(&table),
                None,
                ImportOptions { allow_partial: true }
            ),
            Err(SessionError::MissingEmbedding(_))
        ));
        assert!(s.images().is_empty());
    }

    #[test]
    fn dim_conflict_with_session() {
        let (dir, mut s, files) = setup(1, 1);
        let c1 = AnchorId::from("c1");
        let v = crate::embedding::EmbeddingVector::normalize(&[1.0, 0.0, 0.0]).unwrap();
        s.set_anchor_text_embedding(&c1, &v).unwrap();
        let provider = HashProvider::new(4, 1);
        let err = import_anchor_images(
            &mut s,
            dir.path(),
            &c1,
            &files,
            None,
            Some(&provider),
            ImportOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SessionError::Embedding(_)), "{err:?}");
    }
}

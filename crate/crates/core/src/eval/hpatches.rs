//! Loader for HPatches-style sequence folders.
//!
//! Each sequence directory holds `1.ppm` … `N.ppm` and `H_1_k` files mapping
//! image 1 into image `k`. Directory names starting with `i_` are
//! illumination sequences, `v_` viewpoint sequences.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imgproc::{load_image, Homography};
use crate::train::ImagePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceKind {
    Illumination,
    Viewpoint,
    Other,
}

#[derive(Clone, Debug)]
pub struct HPatchesSequence {
    pub name: String,
    pub kind: SequenceKind,
    /// Pairs `(1, k)` for every `k` with an image and a homography file.
    pub pairs: Vec<ImagePair>,
}

fn find_image(dir: &Path, idx: usize) -> Option<std::path::PathBuf> {
    ["ppm", "pgm", "png"]
        .iter()
        .map(|e| dir.join(format!("{idx}.{e}")))
        .find(|p| p.exists())
}

pub fn load_sequence(dir: &Path) -> Result<HPatchesSequence> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let kind = if name.starts_with("i_") {
        SequenceKind::Illumination
    } else if name.starts_with("v_") {
        SequenceKind::Viewpoint
    } else {
        SequenceKind::Other
    };
    let first = find_image(dir, 1).ok_or_else(|| Error::EmptyInput(format!("{}: no image 1", dir.display())))?;
    let a = load_image(first)?;
    let mut pairs = Vec::new();
    for k in 2.. {
        let (Some(img), hp) = (find_image(dir, k), dir.join(format!("H_1_{k}"))) else {
            break;
        };
        if !hp.exists() {
            break;
        }
        pairs.push(ImagePair {
            a: a.clone(),
            b: load_image(img)?,
            h: Some(Homography::load(hp)?),
        });
    }
    Ok(HPatchesSequence { name, kind, pairs })
}

/// All sequence directories under `root`, sorted by name.
pub fn load_hpatches(root: impl AsRef<Path>) -> Result<Vec<HPatchesSequence>> {
    let root = root.as_ref();
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let seqs: Vec<HPatchesSequence> = dirs.iter().map(|d| load_sequence(d)).collect::<Result<_>>()?;
    if seqs.is_empty() {
        return Err(Error::EmptyInput(format!("{}: no sequences", root.display())));
    }
    Ok(seqs)
}

//! Corpus directory layout and manifest.
//!
//! A corpus directory holds `<stem>.img.png` + `<stem>.gt.png` pairs with an
//! optional `<stem>.coarse.png`. The scan result is cached as
//! `<dir>/manifest.tsv` for inspection by other tools.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CrmError, Result};

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub stem: String,
    pub image: PathBuf,
    pub gt: PathBuf,
    pub coarse: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub dir: PathBuf,
    /// Sorted lexicographically by stem.
    pub items: Vec<CorpusItem>,
    pub skipped: Vec<(String, String)>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items whose coarse mask is missing and must be synthesized.
    pub fn needs_perturbation(&self) -> Vec<&CorpusItem> {
        self.items.iter().filter(|i| i.coarse.is_none()).collect()
    }
}

/// Scan a corpus directory into a manifest.
///
/// Images without a ground-truth partner are skipped with a warning entry;
/// an empty result or a duplicate stem is an error.
pub fn load_corpus(dir: &Path) -> Result<CorpusManifest> {
    if !dir.is_dir() {
        return Err(CrmError::Corpus(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    #[derive(Default)]
    struct Roles {
        image: Option<PathBuf>,
        gt: Option<PathBuf>,
        coarse: Option<PathBuf>,
    }
    let mut stems: BTreeMap<String, Roles> = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some((stem, role)) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(split_role)
        else {
            continue;
        };
        let (stem, role) = (stem.to_string(), role.to_string());
        let slot = stems.entry(stem.clone()).or_default();
        let prev = match role.as_str() {
            "img" => slot.image.replace(path.clone()),
            "gt" => slot.gt.replace(path.clone()),
            "coarse" => slot.coarse.replace(path.clone()),
            _ => unreachable!(),
        };
        if let Some(prev) = prev {
            return Err(CrmError::Corpus(format!(
                "duplicate stem '{stem}' ({} vs {})",
                prev.display(),
                path.display()
            )));
        }
    }

    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for (stem, roles) in stems {
        match (roles.image, roles.gt) {
            (Some(image), Some(gt)) => items.push(CorpusItem {
                stem,
                image,
                gt,
                coarse: roles.coarse,
            }),
            (Some(_), None) => {
                eprintln!("warning: corpus item '{stem}' has no ground truth, skipping");
                skipped.push((stem, "missing ground truth".to_string()));
            }
            (None, Some(_)) => {
                eprintln!("warning: corpus item '{stem}' has no image, skipping");
                skipped.push((stem, "missing image".to_string()));
            }
            (None, None) => {}
        }
    }
    if items.is_empty() {
        return Err(CrmError::Corpus(format!(
            "no image/ground-truth pairs found in {}",
            dir.display()
        )));
    }
    let manifest = CorpusManifest {
        dir: dir.to_path_buf(),
        items,
        skipped,
    };
    // Cache is best effort; a read-only corpus directory is still usable.
    let _ = write_manifest_cache(&manifest);
    Ok(manifest)
}

fn split_role(name: &str) -> Option<(&str, &str)> {
    for role in ["img", "gt", "coarse"] {
        if let Some(stem) = name.strip_suffix(&format!(".{role}.png")) {
            if !stem.is_empty() {
                return Some((stem, role));
            }
        }
    }
    None
}

fn write_manifest_cache(manifest: &CorpusManifest) -> Result<()> {
    let path = manifest.dir.join("manifest.tsv");
    let tmp = manifest.dir.join("manifest.tsv.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(f, "# stem\timage\tgt\tcoarse")?;
        for item in &manifest.items {
            writeln!(
                f,
                "{}\t{}\t{}\t{}",
                item.stem,
                item.image.file_name().unwrap_or_default().to_string_lossy(),
                item.gt.file_name().unwrap_or_default().to_string_lossy(),
                item.coarse
                    .as_ref()
                    .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
                    .unwrap_or_else(|| "-".to_string()),
            )?;
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pngio::{write_image_png, write_mask_png};
    use crate::data::synth::gen_sample;

    fn write_item(dir: &Path, stem: &str, with_coarse: bool) {
        let (img, gt) = gen_sample(stem.len() as u64, 16);
        write_image_png(&img, &dir.join(format!("{stem}.img.png"))).unwrap();
        write_mask_png(&gt.to_tensor(), &dir.join(format!("{stem}.gt.png"))).unwrap();
        if with_coarse {
            write_mask_png(&gt.to_tensor(), &dir.join(format!("{stem}.coarse.png"))).unwrap();
        }
    }

    #[test]
    fn manifest_lists_sorted_pairs() {
        let dir = tempfile::tempdir().unwrap();
        for stem in ["bb", "aa", "cc"] {
            write_item(dir.path(), stem, false);
        }
        let m = load_corpus(dir.path()).unwrap();
        assert_eq!(m.len(), 3);
        let stems: Vec<&str> = m.items.iter().map(|i| i.stem.as_str()).collect();
        assert_eq!(stems, vec!["aa", "bb", "cc"]);
        assert!(dir.path().join("manifest.tsv").exists());
    }

    #[test]
    fn missing_gt_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        write_item(dir.path(), "ok", false);
        let (img, _) = gen_sample(5, 16);
        write_image_png(&img, &dir.path().join("orphan.img.png")).unwrap();
        let m = load_corpus(dir.path()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.skipped.len(), 1);
        assert_eq!(m.skipped[0].0, "orphan");
    }

    #[test]
    fn missing_coarse_flagged_for_perturbation() {
        let dir = tempfile::tempdir().unwrap();
        write_item(dir.path(), "with", true);
        write_item(dir.path(), "without", false);
        let m = load_corpus(dir.path()).unwrap();
        let needs: Vec<&str> = m
            .needs_perturbation()
            .iter()
            .map(|i| i.stem.as_str())
            .collect();
        assert_eq!(needs, vec!["without"]);
    }

    #[test]
    fn empty_directory_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_corpus(dir.path()),
            Err(CrmError::Corpus(_))
        ));
    }
}

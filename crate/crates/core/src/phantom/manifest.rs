use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PhantomSubject;
use crate::error::{Error, Result};
use crate::volio::{read_mask, read_volume, write_mask, write_volume, Availability, Contrast, MultiContrastVolume};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One subject of a cohort on disk; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub availability: Availability,
    pub seed: u64,
    pub contrasts: BTreeMap<String, String>,
    pub rater1: String,
    pub rater2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub seed: u64,
    pub subjects: Vec<ManifestEntry>,
}

/// Writes every subject as gzipped NIfTI files plus `manifest.json`.
pub fn write_cohort(dir: impl AsRef<Path>, subjects: &[PhantomSubject], seed: u64) -> Result<CohortManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(subjects.len());
    for s in subjects {
        let mut contrasts = BTreeMap::new();
        for c in s.mcv.availability().contrasts() {
            let name = format!("{}_{}.nii.gz", s.id, c.name());
            write_volume(s.mcv.get(c).expect("available"), dir.join(&name))?;
            contrasts.insert(c.name().to_string(), name);
        }
        let r1 = format!("{}_rater1.nii.gz", s.id);
        let r2 = format!("{}_rater2.nii.gz", s.id);
        write_mask(&s.rater1, dir.join(&r1))?;
        write_mask(&s.rater2, dir.join(&r2))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            availability: s.mcv.availability(),
            seed,
            contrasts,
            rater1: r1,
            rater2: r2,
        });
    }
    let manifest = CohortManifest { seed, subjects: entries };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, json)?;
    fs::rename(tmp, dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a cohort from a manifest file or a directory containing one.
pub fn read_cohort(path: impl AsRef<Path>) -> Result<(CohortManifest, Vec<PhantomSubject>)> {
    let path = path.as_ref();
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let base = file.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&file)?;
    let manifest: CohortManifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for e in &manifest.subjects {
        let mut pairs = Vec::new();
        for (name, p) in &e.contrasts {
            let c = Contrast::from_name(name).ok_or_else(|| Error::Config(format!("unknown contrast {name:?}")))?;
            pairs.push((c, read_volume(resolve(base, p))?));
        }
        let mcv = MultiContrastVolume::from_pairs(pairs)?;
        if mcv.availability() != e.availability {
            return Err(Error::Config(format!("{}: availability does not match listed contrasts", e.id)));
        }
        let rater1 = read_mask(resolve(base, &e.rater1))?;
        let rater2 = read_mask(resolve(base, &e.rater2))?;
        if rater1.dims() != mcv.dims() || rater2.dims() != mcv.dims() {
            return Err(Error::Shape(format!("{}: mask dims differ from image dims", e.id)));
        }
        let n_lesions = crate::components::label_26(&rater1).count;
        subjects.push(PhantomSubject { id: e.id.clone(), mcv, rater1, rater2, n_lesions });
    }
    Ok((manifest, subjects))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomConfig};

    #[test]
    fn round_trip() {
        let cfg = PhantomConfig { dims: [16, 16, 16], n_subjects: 2, lesion_count: (1, 2), lesion_radius: (1.0, 1.5), seed: 4, ..Default::default() };
        let subjects = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_cohort(dir.path(), &subjects, 4).unwrap();
        let (m2, back) = read_cohort(dir.path()).unwrap();
        assert_eq!(m, m2);
        for (a, b) in subjects.iter().zip(&back) {
            assert_eq!(a.mcv, b.mcv);
            assert_eq!(a.rater1, b.rater1);
            assert_eq!(a.rater2, b.rater2);
        }
    }
}

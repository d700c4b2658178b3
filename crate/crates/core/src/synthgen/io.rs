use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::synthgen::{generate_split, ModalityProfile, ModalitySample, SceneSpec, SynthError};
use crate::tensorfile;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: u64,
    pub tensors: String,
    pub annotation: String,
    pub tensors_sha256: String,
    pub annotation_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scene: SceneSpec,
    pub profiles: [ModalityProfile; 2],
    pub first_index: u64,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleAnnotation {
    index: u64,
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
    visibility: Vec<(bool, bool)>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<ModalitySample>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generates and writes samples `first_index .. first_index + count` into
/// `dir`, creating it if needed. Existing sample files are overwritten.
pub fn write_dataset(
    dir: &Path,
    scene: &SceneSpec,
    profiles: &[ModalityProfile; 2],
    first_index: u64,
    count: usize,
) -> Result<DatasetManifest, SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let samples = generate_split(scene, profiles, first_index, count);
    let mut entries = Vec::with_capacity(count);
    for (k, s) in samples.iter().enumerate() {
        let index = first_index + k as u64;
        let stem = format!("sample_{index:06}");
        let tensors = tensorfile::to_bytes(&[
            ("m1".to_string(), s.image_m1.clone()),
            ("m2".to_string(), s.image_m2.clone()),
        ]);
        let ann = serde_json::to_vec_pretty(&SampleAnnotation {
            index,
            boxes: s.boxes.clone(),
            classes: s.classes.clone(),
            visibility: s.visibility.clone(),
        })
        .expect("annotation serializes");
        let (tname, aname) = (format!("{stem}.bin"), format!("{stem}.json"));
        let tpath = dir.join(&tname);
        fs::write(&tpath, &tensors).map_err(io_err(&tpath))?;
        let apath = dir.join(&aname);
        fs::write(&apath, &ann).map_err(io_err(&apath))?;
        entries.push(SampleEntry {
            index,
            tensors: tname,
            annotation: aname,
            tensors_sha256: sha256_hex(&tensors),
            annotation_sha256: sha256_hex(&ann),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        scene: scene.clone(),
        profiles: *profiles,
        first_index,
        samples: entries,
    };
    let mpath = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    Ok(manifest)
}

fn read_checked(dir: &Path, name: &str, sha: &str) -> Result<Vec<u8>, SynthError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(SynthError::Missing(path.display().to_string()));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if sha256_hex(&bytes) != sha {
        return Err(SynthError::Checksum(path.display().to_string()));
    }
    Ok(bytes)
}

/// Loads a dataset, verifying the format version and every checksum.
pub fn read_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let version: Option<u32> = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("format_version")?.as_u64())
        .map(|v| v as u32);
    match version {
        Some(FORMAT_VERSION) => {}
        Some(found) => {
            return Err(SynthError::Version {
                found,
                expected: FORMAT_VERSION,
            })
        }
        None => {
            return Err(SynthError::Corrupt {
                path: mpath.display().to_string(),
                detail: "missing format_version".into(),
            })
        }
    }
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| SynthError::Corrupt {
        path: mpath.display().to_string(),
        detail: e.to_string(),
    })?;
    let corrupt = |name: &str, detail: String| SynthError::Corrupt {
        path: dir.join(name).display().to_string(),
        detail,
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let tbytes = read_checked(dir, &e.tensors, &e.tensors_sha256)?;
        let abytes = read_checked(dir, &e.annotation, &e.annotation_sha256)?;
        let mut tensors =
            tensorfile::read_tensors(&tbytes[..]).map_err(|err| corrupt(&e.tensors, err.to_string()))?;
        if tensors.len() != 2 || tensors[0].0 != "m1" || tensors[1].0 != "m2" {
            return Err(corrupt(&e.tensors, "expected tensors m1 and m2".into()));
        }
        let ann: SampleAnnotation = serde_json::from_slice(&abytes)
            .map_err(|err| corrupt(&e.annotation, err.to_string()))?;
        if ann.boxes.len() != ann.classes.len() || ann.boxes.len() != ann.visibility.len() {
            return Err(corrupt(&e.annotation, "field lengths disagree".into()));
        }
        let image_m2 = tensors.pop().expect("two tensors").1;
        let image_m1 = tensors.pop().expect("two tensors").1;
        samples.push(ModalitySample {
            image_m1,
            image_m2,
            boxes: ann.boxes,
            classes: ann.classes,
            visibility: ann.visibility,
        });
    }
    Ok(Dataset { manifest, samples })
}

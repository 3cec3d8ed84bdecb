use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_annotations, Dataset, Sample, SegmentAnnotation, UntrimmedVideo};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "losa-ds-v1";
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    num_classes: usize,
    videos: Vec<VideoEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoEntry {
    video_id: String,
    shape: [usize; 4],
    file: String,
    annotations: Vec<SegmentAnnotation>,
}

/// Writes `manifest.json` and one little-endian f32 `.raw` file per video.
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut videos = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let file = format!("{}.raw", s.video.video_id);
        let bytes: Vec<u8> = s
            .video
            .frames
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(dir.join(&file), bytes)?;
        let sh = s.video.frames.shape();
        videos.push(VideoEntry {
            video_id: s.video.video_id.clone(),
            shape: [sh[0], sh[1], sh[2], sh[3]],
            file,
            annotations: s.annotations.clone(),
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION.to_owned(),
        num_classes: ds.num_classes,
        videos,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_owned()),
        _ => Error::Io(e),
    })
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let raw = read(&dir.join(MANIFEST))?;
    let value: serde_json::Value = serde_json::from_slice(&raw).map_err(|e| Error::Malformed {
        what: "manifest".into(),
        detail: e.to_string(),
    })?;
    let found = value.get("format").and_then(|v| v.as_str()).unwrap_or("<none>");
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION.into(),
            found: found.into(),
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| Error::Malformed {
        what: "manifest".into(),
        detail: e.to_string(),
    })?;
    let mut samples = Vec::with_capacity(manifest.videos.len());
    for v in manifest.videos {
        if v.file.contains('/') || v.file.contains('\\') || v.file.starts_with('.') {
            return Err(Error::Malformed {
                what: "manifest".into(),
                detail: format!("payload name `{}` must be a plain file name", v.file),
            });
        }
        if v.shape[3] != 3 || v.shape.contains(&0) {
            return Err(Error::Malformed {
                what: "manifest".into(),
                detail: format!("video `{}` has shape {:?}", v.video_id, v.shape),
            });
        }
        let path = dir.join(&v.file);
        let bytes = read(&path)?;
        let expected = v.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                path,
                expected,
                found: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let video = UntrimmedVideo::new(v.video_id, Tensor::new(v.shape.to_vec(), data)?)?;
        validate_annotations(&v.annotations, video.len(), manifest.num_classes)?;
        samples.push(Sample {
            video,
            annotations: v.annotations,
        });
    }
    Ok(Dataset {
        num_classes: manifest.num_classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};

    fn ds() -> Dataset {
        generate(&GeneratorConfig {
            num_videos: 3,
            max_len: 80,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let d = ds();
        let dir = tempfile::tempdir().unwrap();
        save(&d, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), d);
    }

    #[test]
    fn error_kinds_are_distinct() {
        let d = ds();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(Error::MissingFile(_))));

        save(&d, dir.path()).unwrap();
        let payload = dir.path().join("vid_00001.raw");
        let bytes = fs::read(&payload).unwrap();
        fs::write(&payload, &bytes[..bytes.len() - 4]).unwrap();
        match load(dir.path()) {
            Err(Error::Truncated { expected, found, .. }) => assert_eq!(expected, found + 4),
            other => panic!("expected truncation, got {other:?}"),
        }

        fs::remove_file(&payload).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::MissingFile(p)) if p == payload));

        let m = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&m).unwrap();
        fs::write(&m, text.replace(FORMAT_VERSION, "losa-ds-v0")).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Version { .. })));

        fs::write(&m, "{ not json").unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Malformed { .. })));
    }
}

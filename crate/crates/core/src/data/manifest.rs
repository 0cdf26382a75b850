//! Tab-separated manifest datasets.
//!
//! One record per line: `sr_path  lr_path  scale  label  content_id  method_id`,
//! paths relative to the dataset root. Lines starting with `#` and blank lines
//! are skipped.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::config::DatasetFormat;
use crate::datamodel::{validate_sample, RgbImage, Sample};
use crate::error::{PfiqaError, Result};

const FIELDS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub sr: PathBuf,
    pub lr: PathBuf,
    pub scale: f64,
    pub label: f64,
    pub content: String,
    pub method: String,
    /// 1-based line number in the manifest.
    pub line: usize,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = |msg: String| PfiqaError::MalformedManifest {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if fields.len() != FIELDS {
            return Err(malformed(format!("expected {FIELDS} tab-separated fields, got {}", fields.len())));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(malformed("empty field".into()));
        }
        let scale: f64 = fields[2]
            .parse()
            .map_err(|_| malformed(format!("bad scale factor {:?}", fields[2])))?;
        let label: f64 = match fields[3].parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                return Err(PfiqaError::UnparseableLabel {
                    path: path.to_path_buf(),
                    line,
                    label: fields[3].to_string(),
                })
            }
        };
        out.push(ManifestRecord {
            sr: PathBuf::from(fields[0]),
            lr: PathBuf::from(fields[1]),
            scale,
            label,
            content: fields[4].to_string(),
            method: fields[5].to_string(),
            line,
        });
    }
    Ok(out)
}

/// Min-max normalize labels to `[0, 1]`.
///
/// Rank labels are mapped linearly as well; when rank 1 is the best image the
/// direction is flipped so that higher always means better.
pub fn normalize_labels(labels: &[f64], ranks: bool, rank_one_is_best: bool) -> Result<Vec<f64>> {
    let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    if hi <= lo {
        return Err(PfiqaError::Range(format!("all labels equal {lo}; cannot normalize")));
    }
    let span = hi - lo;
    Ok(labels
        .iter()
        .map(|&l| {
            if ranks && rank_one_is_best {
                (hi - l) / span
            } else {
                (l - lo) / span
            }
        })
        .collect())
}

pub fn decode_image(path: &Path) -> Result<RgbImage> {
    if !path.is_file() {
        return Err(PfiqaError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| PfiqaError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

fn dataset_id(format: DatasetFormat) -> &'static str {
    match format {
        DatasetFormat::Qads => "qads",
        DatasetFormat::Wind => "wind",
        DatasetFormat::Realsrq => "realsrq",
        DatasetFormat::Manifest => "manifest",
        DatasetFormat::Synthetic => "synthetic",
    }
}

/// Read `root/manifest`, decode every image pair and normalize labels.
pub fn load_manifest(root: &Path, manifest: &str, format: DatasetFormat, rank_one_is_best: bool) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(PfiqaError::MissingFile(root.to_path_buf()));
    }
    let path = root.join(manifest);
    if !path.is_file() {
        return Err(PfiqaError::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path)?;
    let records = parse_manifest(&text, &path)?;
    if records.is_empty() {
        return Err(PfiqaError::MalformedManifest {
            path,
            line: 0,
            msg: "no records".into(),
        });
    }
    let labels: Vec<f64> = records.iter().map(|r| r.label).collect();
    let mos = normalize_labels(&labels, format.labels_are_ranks(), rank_one_is_best)?;
    // LR sources are shared by every method of a content; decode each once.
    let mut lr_cache: HashMap<(PathBuf, usize, usize), RgbImage> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for (r, m) in records.into_iter().zip(mos) {
        let sr = decode_image(&root.join(&r.sr))?;
        let key = (r.lr.clone(), sr.height(), sr.width());
        let lr_up = match lr_cache.get(&key) {
            Some(img) => img.clone(),
            None => {
                let lr = decode_image(&root.join(&r.lr))?;
                let up = lr.resize_bilinear(sr.height(), sr.width());
                lr_cache.insert(key, up.clone());
                up
            }
        };
        out.push(validate_sample(Sample {
            sr_image: sr,
            lr_image_upsampled: lr_up,
            scale_factor: r.scale,
            mos: Some(m),
            dataset_id: dataset_id(format).to_string(),
            content_id: r.content,
            method_id: r.method,
        })?);
    }
    log::info!("loaded {} samples from {}", out.len(), path.display());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_blanks() {
        let text = "# sr\tlr\tscale\tlabel\tcontent\tmethod\n\na.png\tb.png\t4\t3.5\tc1\tm1\n";
        let recs = parse_manifest(text, Path::new("m.tsv")).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].line, 3);
        assert_eq!(recs[0].scale, 4.0);
        assert_eq!(recs[0].content, "c1");
    }

    #[test]
    fn parse_errors() {
        let short = parse_manifest("a\tb\t4\t1\tc\n", Path::new("m"));
        assert!(matches!(short, Err(PfiqaError::MalformedManifest { line: 1, .. })));
        let scale = parse_manifest("a\tb\tx4\t1\tc\tm\n", Path::new("m"));
        assert!(matches!(scale, Err(PfiqaError::MalformedManifest { .. })));
        let label = parse_manifest("#h\na\tb\t4\tgood\tc\tm\n", Path::new("m"));
        match label {
            Err(PfiqaError::UnparseableLabel { line, label, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(label, "good");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_normalization() {
        assert_eq!(normalize_labels(&[2.0, 4.0, 3.0], false, true).unwrap(), vec![0.0, 1.0, 0.5]);
        // rank 1 is the best image
        assert_eq!(normalize_labels(&[1.0, 3.0, 2.0], true, true).unwrap(), vec![1.0, 0.0, 0.5]);
        assert_eq!(normalize_labels(&[1.0, 3.0, 2.0], true, false).unwrap(), vec![0.0, 1.0, 0.5]);
        assert!(normalize_labels(&[2.0, 2.0], false, true).is_err());
    }

    #[test]
    fn missing_root_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(matches!(
            load_manifest(&missing, "manifest.tsv", DatasetFormat::Qads, true),
            Err(PfiqaError::MissingFile(p)) if p == missing
        ));
        assert!(matches!(
            load_manifest(dir.path(), "manifest.tsv", DatasetFormat::Qads, true),
            Err(PfiqaError::MissingFile(_))
        ));
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, SampleShape};
use crate::error::{Error, Result};

/// On-disk dataset layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "format")]
pub enum IngestFormat {
    /// `root/<class name>/<image file>`; images are resized to
    /// `height x width` and stored as grayscale or RGB in `[0, 1]`.
    ImageFolder {
        height: u32,
        width: u32,
        #[serde(default)]
        grayscale: bool,
    },
    /// CSV with a header row; every column other than `label_column` is a
    /// numeric feature.
    Table { label_column: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dataset: Dataset,
    /// Samples per class name.
    pub counts: BTreeMap<String, usize>,
    /// Source file of each row (one entry per table row for CSV input).
    pub sources: Vec<PathBuf>,
}

fn ingestion(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn ingest(path: &Path, format: &IngestFormat) -> Result<Ingested> {
    let dataset_and_sources = match format {
        IngestFormat::ImageFolder {
            height,
            width,
            grayscale,
        } => image_folder(path, *height, *width, *grayscale)?,
        IngestFormat::Table { label_column } => table(path, label_column)?,
    };
    let (dataset, sources) = dataset_and_sources;
    Ok(Ingested {
        counts: dataset.count_manifest(),
        dataset,
        sources,
    })
}

fn image_folder(
    root: &Path,
    height: u32,
    width: u32,
    grayscale: bool,
) -> Result<(Dataset, Vec<PathBuf>)> {
    if height == 0 || width == 0 {
        return Err(ingestion(root, "target image size must be positive"));
    }
    let entries = std::fs::read_dir(root).map_err(|e| ingestion(root, e.to_string()))?;
    let mut class_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(ingestion(root, "no class directories found"));
    }

    let channels = if grayscale { 1 } else { 3 };
    let (h, w) = (height as usize, width as usize);
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        names.push(
            dir.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| ingestion(dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(ingestion(dir, "class directory contains no images"));
        }
        for file in files {
            let img = image::open(&file)
                .map_err(|e| ingestion(&file, e.to_string()))?
                .resize_exact(width, height, image::imageops::FilterType::Triangle);
            if grayscale {
                let g = img.to_luma8();
                rows.extend(g.pixels().map(|p| p.0[0] as f64 / 255.0));
            } else {
                let rgb = img.to_rgb8();
                for c in 0..3 {
                    rows.extend(rgb.pixels().map(|p| p.0[c] as f64 / 255.0));
                }
            }
            labels.push(label);
            sources.push(file);
        }
    }
    let shape = SampleShape::Image {
        channels,
        height: h,
        width: w,
    };
    let features = Array2::from_shape_vec((labels.len(), shape.len()), rows)
        .map_err(|e| ingestion(root, e.to_string()))?;
    let mut dataset = Dataset::new(shape, features, labels)?;
    dataset.class_names = Some(names);
    Ok((dataset, sources))
}

fn table(path: &Path, label_column: &str) -> Result<(Dataset, Vec<PathBuf>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ingestion(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| ingestion(path, e.to_string()))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| ingestion(path, format!("missing label column '{label_column}'")))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(ingestion(path, "table has no feature columns"));
    }

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ingestion(path, e.to_string()))?;
        for (col, field) in record.iter().enumerate() {
            if col == label_idx {
                raw_labels.push(field.trim().to_string());
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| {
                ingestion(
                    path,
                    format!(
                        "row {}: column '{}' is not numeric: '{field}'",
                        line + 1,
                        &headers[col]
                    ),
                )
            })?;
            if !v.is_finite() {
                return Err(ingestion(
                    path,
                    format!("row {}: non-finite value", line + 1),
                ));
            }
            values.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(ingestion(path, "table has no rows"));
    }
    let mut names: Vec<String> = raw_labels.clone();
    names.sort();
    names.dedup();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| names.binary_search(l).expect("label is present"))
        .collect();
    let n = labels.len();
    let features =
        Array2::from_shape_vec((n, dim), values).map_err(|e| ingestion(path, e.to_string()))?;
    let mut dataset = Dataset::new(SampleShape::Vector { len: dim }, features, labels)?;
    dataset.class_names = Some(names);
    Ok((dataset, vec![path.to_path_buf(); n]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn table_with_string_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "a,grade,b\n1.0,mild,2\n3,none,4\n5,mild,6").unwrap();
        let got = ingest(
            &p,
            &IngestFormat::Table {
                label_column: "grade".into(),
            },
        )
        .unwrap();
        assert_eq!(got.dataset.dim(), 2);
        assert_eq!(got.dataset.labels, vec![0, 1, 0]);
        assert_eq!(got.counts["mild"], 2);
        assert_eq!(got.dataset.features[[1, 1]], 4.0);
    }

    #[test]
    fn bad_cell_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x,y\n1,a\nfoo,b\n").unwrap();
        let err = ingest(
            &p,
            &IngestFormat::Table {
                label_column: "y".into(),
            },
        )
        .unwrap_err();
        assert_eq!(err.kind(), "ingestion");
        assert!(err.to_string().contains("bad.csv"));
    }

    #[test]
    fn missing_file_is_an_ingestion_error() {
        let err = ingest(
            Path::new("/nonexistent/none.csv"),
            &IngestFormat::Table {
                label_column: "y".into(),
            },
        )
        .unwrap_err();
        assert_eq!(err.kind(), "ingestion");
    }

    #[test]
    fn image_folder_reads_classes_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        for (class, shade) in [("b_severe", 200u8), ("a_none", 10u8)] {
            let cdir = dir.path().join(class);
            std::fs::create_dir(&cdir).unwrap();
            for i in 0..2 {
                let img = image::RgbImage::from_pixel(5, 4, image::Rgb([shade, shade, shade]));
                img.save(cdir.join(format!("{i}.png"))).unwrap();
            }
        }
        let got = ingest(
            dir.path(),
            &IngestFormat::ImageFolder {
                height: 3,
                width: 3,
                grayscale: true,
            },
        )
        .unwrap();
        assert_eq!(got.dataset.dim(), 9);
        assert_eq!(got.dataset.labels, vec![0, 0, 1, 1]);
        assert_eq!(got.dataset.class_name(0), "a_none");
        assert!((got.dataset.features[[3, 0]] - 200.0 / 255.0).abs() < 1e-9);
        assert_eq!(got.counts["b_severe"], 2);
    }

    #[test]
    fn corrupt_image_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cdir = dir.path().join("c");
        std::fs::create_dir(&cdir).unwrap();
        std::fs::write(cdir.join("broken.png"), b"not a png").unwrap();
        let err = ingest(
            dir.path(),
            &IngestFormat::ImageFolder {
                height: 2,
                width: 2,
                grayscale: false,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("broken.png"));
    }
}

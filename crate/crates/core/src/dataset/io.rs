//! Dataset directory layout.
//!
//! ```text
//! DIR/
//!   meta.json        spec echo, class names, split sizes, channel means
//!   labels.csv       sample_id,label for both splits
//!   samples/
//!     train_0000_rgb.fgt        [3,S,S]
//!     train_0000_depth.fgt      [S,S]
//!     train_0000_depthcol.fgt   [3,S,S]
//!     ...
//! ```
//!
//! Sample ids are prefixed `train_` / `test_`; the prefix decides the split
//! on load. Tensor files round-trip bit-exactly, so a loaded dataset equals
//! the generated one.

use std::fs;
use std::path::Path;

use crate::dataset::{ChannelStats, Dataset, DatasetSpec, RgbdSample};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DatasetMeta {
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
    /// Per-channel means of the train split. Absent means the dataset was
    /// written without fitting; preprocessing cannot proceed without them.
    pub channel_means: Option<ChannelStats>,
}

impl DatasetMeta {
    pub fn stats(&self) -> Result<ChannelStats> {
        self.channel_means.ok_or_else(|| {
            Error::Dataset(
                "meta.json has no channel means; fit ChannelStats on the train split \
                 (or regenerate the dataset) before preprocessing"
                    .into(),
            )
        })
    }
}

pub fn save_dataset(
    dir: &Path,
    spec: &DatasetSpec,
    train: &Dataset,
    test: &Dataset,
    stats: &ChannelStats,
) -> Result<()> {
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    let meta = DatasetMeta {
        spec: spec.clone(),
        class_names: train.class_names.clone(),
        train_size: train.len(),
        test_size: test.len(),
        channel_means: Some(*stats),
    };
    let meta_path = dir.join("meta.json");
    let body = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Dataset(format!("cannot encode meta.json: {e}")))?;
    fs::write(&meta_path, body).map_err(|e| Error::io(&meta_path, e))?;

    let mut csv = String::from("sample_id,label\n");
    for sample in train.samples.iter().chain(&test.samples) {
        csv.push_str(&format!("{},{}\n", sample.id, sample.label));
        write_sample(&samples_dir, sample)?;
    }
    let csv_path = dir.join("labels.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
}

fn write_sample(samples_dir: &Path, sample: &RgbdSample) -> Result<()> {
    write_tensor(
        &samples_dir.join(format!("{}_rgb.fgt", sample.id)),
        &sample.rgb_tensor(),
    )?;
    write_tensor(
        &samples_dir.join(format!("{}_depth.fgt", sample.id)),
        &sample.depth_raw_tensor(),
    )?;
    write_tensor(
        &samples_dir.join(format!("{}_depthcol.fgt", sample.id)),
        &sample.depth_colorized_tensor(),
    )
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Dataset, DatasetMeta)> {
    let meta_path = dir.join("meta.json");
    let body = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&body)
        .map_err(|e| Error::format(&meta_path, format!("invalid meta.json: {e}")))?;

    let csv_path = dir.join("labels.csv");
    let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut lines = csv.lines();
    match lines.next() {
        Some("sample_id,label") => {}
        other => {
            return Err(Error::format(
                &csv_path,
                format!("expected header \"sample_id,label\", got {other:?}"),
            ));
        }
    }

    let samples_dir = dir.join("samples");
    let size = meta.spec.image_size;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, label_str) = line.split_once(',').ok_or_else(|| {
            Error::format(&csv_path, format!("line {}: no comma in {line:?}", lineno + 2))
        })?;
        let label: usize = label_str.parse().map_err(|_| {
            Error::format(&csv_path, format!("line {}: bad label {label_str:?}", lineno + 2))
        })?;
        if label >= meta.spec.num_classes {
            return Err(Error::format(
                &csv_path,
                format!("label {label} out of range for {} classes", meta.spec.num_classes),
            ));
        }

        let rgb = read_shaped(&samples_dir, id, "rgb", &[3, size, size])?;
        let depth_raw = read_shaped(&samples_dir, id, "depth", &[size, size])?;
        let depth_colorized = read_shaped(&samples_dir, id, "depthcol", &[3, size, size])?;
        let sample = RgbdSample {
            id: id.to_string(),
            label,
            instance: 0,
            size,
            rgb,
            depth_raw,
            depth_colorized,
        };
        if id.starts_with("train_") {
            train.push(sample);
        } else if id.starts_with("test_") {
            test.push(sample);
        } else {
            return Err(Error::format(
                &csv_path,
                format!("sample id {id:?} has neither train_ nor test_ prefix"),
            ));
        }
    }

    let build = |samples: Vec<RgbdSample>| Dataset {
        samples,
        num_classes: meta.spec.num_classes,
        image_size: size,
        class_names: meta.class_names.clone(),
    };
    Ok((build(train), build(test), meta))
}

fn read_shaped(samples_dir: &Path, id: &str, kind: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let path = samples_dir.join(format!("{id}_{kind}.fgt"));
    let tensor = read_tensor(&path)?;
    if tensor.shape() != shape {
        return Err(Error::format(
            &path,
            format!("expected shape {shape:?}, found {:?}", tensor.shape()),
        ));
    }
    Ok(tensor.data().to_vec())
}

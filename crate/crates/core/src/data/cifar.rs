//! CIFAR-10 binary format: 3073-byte records, one label byte followed by the
//! R, G and B planes of a 32×32 image in row-major order.

use std::fs;
use std::path::Path;

use super::{Image, IMAGE_BYTES};
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
const N_CLASSES: u8 = 10;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug)]
pub struct RawDataset {
    pub train: Split,
    pub test: Split,
    pub n_classes: usize,
}

pub fn read_batch_file(path: &Path) -> Result<Split> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, path)
}

fn parse_records(bytes: &[u8], path: &Path) -> Result<Split> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "size {} is not a multiple of the {RECORD_BYTES}-byte record",
                bytes.len()
            ),
        });
    }
    let mut split = Split::default();
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] >= N_CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("record {i} has label byte {} (expected < {N_CLASSES})", rec[0]),
            });
        }
        split.labels.push(rec[0] as usize);
        split
            .images
            .push(Image::from_planes(rec[1..].to_vec()).expect("record length"));
    }
    Ok(split)
}

/// Writes records in the same binary layout (used for fixtures and synthetic
/// stand-ins).
pub fn write_batch_file(path: &Path, split: &Split) -> Result<()> {
    let mut out = Vec::with_capacity(split.len() * RECORD_BYTES);
    for (img, &label) in split.images.iter().zip(&split.labels) {
        if label >= N_CLASSES as usize {
            return Err(Error::param(format!("label {label} does not fit the CIFAR-10 format")));
        }
        out.push(label as u8);
        out.extend_from_slice(img.bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<RawDataset> {
    let mut train = Split::default();
    for name in TRAIN_FILES {
        let part = read_batch_file(&dir.join(name))?;
        train.images.extend(part.images);
        train.labels.extend(part.labels);
    }
    let test = read_batch_file(&dir.join(TEST_FILE))?;
    Ok(RawDataset {
        train,
        test,
        n_classes: N_CLASSES as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..IMAGE_BYTES).map(fill));
        r
    }

    #[test]
    fn n_records_from_length() {
        let mut bytes = Vec::new();
        for l in 0..4u8 {
            bytes.extend(record(l, |i| (i % 251) as u8));
        }
        let s = parse_records(&bytes, Path::new("mem")).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let mut bytes = record(1, |_| 0);
        bytes.extend(record(2, |_| 0));
        bytes.pop();
        assert!(matches!(parse_records(&bytes, Path::new("mem")), Err(Error::Format { .. })));
    }

    #[test]
    fn label_out_of_range_is_format_error() {
        let bytes = record(10, |_| 0);
        assert!(matches!(parse_records(&bytes, Path::new("mem")), Err(Error::Format { .. })));
    }

    #[test]
    fn pixel_planes_are_rgb_row_major() {
        // R plane value 11 at (0,0), G plane 22 at (0,0), B plane 33 at (0,1)
        let mut bytes = record(7, |_| 0);
        bytes[1] = 11;
        bytes[1 + 1024] = 22;
        bytes[1 + 2048 + 1] = 33;
        let s = parse_records(&bytes, Path::new("mem")).unwrap();
        let img = &s.images[0];
        assert_eq!(img.get(0, 0, 0), 11);
        assert_eq!(img.get(1, 0, 0), 22);
        assert_eq!(img.get(2, 0, 1), 33);
        assert_eq!(img.get(2, 0, 0), 0);
    }
}

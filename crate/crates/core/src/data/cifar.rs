//! CIFAR-10 binary version: records of one label byte followed by 3072
//! pixel bytes (red, green, blue planes of 32x32, row-major).

use std::fs;
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Decodes whole records from `bytes`, stopping after `max_n` samples.
pub fn parse_records(bytes: &[u8], max_n: Option<usize>) -> Result<Vec<Sample>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format(format!(
            "CIFAR-10 data of {} bytes is not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let limit = max_n.unwrap_or(usize::MAX);
    bytes
        .chunks_exact(RECORD_BYTES)
        .take(limit)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CLASSES {
                return Err(Error::Format(format!("record {i}: label byte {label} > 9")));
            }
            let pixels = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(Sample {
                image: Tensor::from_vec(&[3, 32, 32], pixels)?,
                label,
                mask: None,
            })
        })
        .collect()
}

pub fn load_cifar10_binary(path: impl AsRef<Path>, max_n: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    Dataset::new(parse_records(&bytes, max_n)?, CLASSES)
}

/// Reads up to `max_n` samples from several batch files in order.
pub fn load_cifar10_files<P: AsRef<Path>>(paths: &[P], max_n: Option<usize>) -> Result<Dataset> {
    let mut samples = Vec::new();
    for p in paths {
        let remaining = max_n.map(|m| m.saturating_sub(samples.len()));
        if remaining == Some(0) {
            break;
        }
        samples.extend(parse_records(&fs::read(p)?, remaining)?);
    }
    Dataset::new(samples, CLASSES)
}

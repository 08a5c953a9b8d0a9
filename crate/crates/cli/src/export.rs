//! Selector maps as binary PGM images and CSV grids.

use sfcm_core::data::Dataset;
use sfcm_core::models::Model;
use sfcm_core::train::load_checkpoint;

use crate::{write, CliError, ExportArgs};

/// Min-max scales `values` to 0..=255. A constant map becomes all zeros.
pub fn scale_to_u8(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary greymap ("P5", maxval 255) of a row-major `width x height` map.
pub fn pgm(values: &[f32], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "map size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(scale_to_u8(values));
    out
}

/// One line per row, comma-separated, full f32 precision.
pub fn csv(values: &[f32], width: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn cmd_export_selector(args: &ExportArgs) -> Result<(), CliError> {
    let model: Model<f32> = load_checkpoint(&args.checkpoint).map_err(CliError::from_core_usage)?;
    let sites = model.selector_site_count();
    if sites == 0 {
        return Err(CliError::usage("no selector sites in this checkpoint"));
    }
    if args.site >= sites {
        return Err(CliError::usage(format!("site {} out of range; the model has {sites}", args.site)));
    }
    let data = Dataset::load_tsr(&args.input, Some(model.config().classes)).map_err(CliError::from_core_usage)?;
    crate::config::check_compatible(model.config(), &data)?;
    if args.sample >= data.len() {
        return Err(CliError::usage(format!("sample {} out of range; the dataset has {}", args.sample, data.len())));
    }
    let batch = data.batch::<f32>(&[args.sample]).map_err(CliError::from_core_usage)?;
    let out = model.predict(&batch.images).map_err(CliError::from_core)?;
    let map = &out.selector_maps[args.site].map;
    let (h, w) = (map.dims()[2], map.dims()[3]);

    let base = args.out.as_os_str().to_owned();
    let with_ext = |ext: &str| {
        let mut p = base.clone();
        p.push(ext);
        std::path::PathBuf::from(p)
    };
    write(&with_ext(".pgm"), pgm(map.data(), w, h))?;
    write(&with_ext(".csv"), csv(map.data(), w))?;
    Ok(())
}

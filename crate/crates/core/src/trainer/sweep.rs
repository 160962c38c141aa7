use std::fs;
use std::path::{Path, PathBuf};

use ndtensor::Tensor;

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::model::{default_deltas, XCapsModel};
use crate::ratings::ATTRIBUTE_NAMES;

/// Number of perturbation offsets per sweep row.
pub const SWEEP_COLUMNS: usize = 11;

/// Binary 8-bit PGM; pixels in `[0, 1]` are stored as `round(255 p)`.
pub fn encode_pgm(width: usize, height: usize, pixels: &[f64]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::invalid(
            "encode_pgm",
            format!("{} pixels for a {width}x{height} image", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|p| (255.0 * p.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)?).map_err(|e| Error::io(path, e))
}

fn attribute_label(index: usize) -> String {
    ATTRIBUTE_NAMES
        .get(index)
        .map_or_else(|| format!("attr{index}"), |s| s.to_string())
}

/// Writes one grid per attribute capsule (rows: capsule dimensions, columns:
/// offsets -0.25..+0.25) plus the input and its reconstruction.
pub fn emit_sweep_images(model: &XCapsModel, sample: &SampleRecord, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = model.config();
    let side = cfg.image_size;
    if sample.image.len() != side * side {
        return Err(Error::invalid("emit_sweep_images", "sample size does not match the model input"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let image = Tensor::new(&[side, side], sample.image_f64())?;
    let out = model.forward_one(&image)?;
    let mut written = Vec::new();

    let input_path = out_dir.join(format!("{}_input.pgm", sample.id));
    write_pgm(&input_path, side, side, image.data())?;
    written.push(input_path);
    let recon_path = out_dir.join(format!("{}_reconstruction.pgm", sample.id));
    write_pgm(&recon_path, side, side, out.reconstruction.data())?;
    written.push(recon_path);

    let deltas = default_deltas();
    let (width, height) = (SWEEP_COLUMNS * side, cfg.attr_dim * side);
    for attr in 0..cfg.attr_count {
        let mut grid = vec![0.0; width * height];
        for dim in 0..cfg.attr_dim {
            let tiles = model.perturb_and_decode(&out.attr_vectors, attr, dim, &deltas)?;
            for (col, tile) in tiles.iter().enumerate() {
                for y in 0..side {
                    let row = (dim * side + y) * width + col * side;
                    grid[row..row + side].copy_from_slice(&tile.data()[y * side..(y + 1) * side]);
                }
            }
        }
        let path = out_dir.join(format!("{}_{}.pgm", sample.id, attribute_label(attr)));
        write_pgm(&path, width, height, &grid)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticConfig};
    use crate::model::XCapsConfig;

    #[test]
    fn pgm_header_and_rounding() {
        let bytes = encode_pgm(2, 1, &[0.0, 0.5]).unwrap();
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\x80");
        assert!(encode_pgm(2, 2, &[0.0]).is_err());
    }

    #[test]
    fn sweep_grid_layout_and_determinism() {
        let cfg = XCapsConfig {
            conv_filters: 2,
            primary_types: 1,
            decoder_widths: vec![8],
            ..XCapsConfig::desk()
        };
        let model = XCapsModel::build(cfg, 3).unwrap();
        let sample = synthesize(&SyntheticConfig::new(0, 1)).unwrap().remove(0).record;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let files = emit_sweep_images(&model, &sample, a.path()).unwrap();
        emit_sweep_images(&model, &sample, b.path()).unwrap();
        assert_eq!(files.len(), 2 + 6);
        for f in &files {
            let name = f.file_name().unwrap();
            assert_eq!(fs::read(f).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let grid = fs::read(&files[2]).unwrap();
        let header = b"P5\n352 512\n255\n";
        assert_eq!(&grid[..header.len()], header);
        assert_eq!(grid.len(), header.len() + 352 * 512);

        // delta-0 column equals the plain reconstruction
        let recon = fs::read(&files[1]).unwrap();
        let recon_px = &recon[recon.len() - 32 * 32..];
        let px = &grid[header.len()..];
        for y in 0..32 {
            let row = &px[y * 352 + 5 * 32..y * 352 + 6 * 32];
            assert_eq!(row, &recon_px[y * 32..(y + 1) * 32]);
        }
    }
}

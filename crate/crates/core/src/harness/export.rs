use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::pnm::Pnm;

/// Min-max normalized, nearest-neighbour upscaled 8-bit grayscale image of an `h×w`
/// map. A constant map becomes all zeros.
pub fn map_to_pgm(map: &[f64], h: usize, w: usize, factor: usize) -> Result<Pnm> {
    if factor == 0 {
        return Err(Error::invalid("upscale factor must be at least 1"));
    }
    if map.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape("export_pgm", format!("{} values as {h}×{w}", map.len())));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention map".into()));
    }
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let px = |v: f64| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 };
    let (oh, ow) = (h * factor, w * factor);
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            data.push(px(map[(y / factor) * w + x / factor]));
        }
    }
    Ok(Pnm { width: ow, height: oh, channels: 1, data })
}

pub fn export_pgm(map: &[f64], h: usize, w: usize, path: &Path, factor: usize) -> Result<()> {
    map_to_pgm(map, h, w, factor)?.write(path)
}

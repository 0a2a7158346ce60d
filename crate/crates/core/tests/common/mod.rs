#![allow(dead_code)]

use mdnet::synth::{generate, Case, SynthConfig};
use mdnet::Tensor;

/// Synthetic cases with images box-filtered from 32×32 down to 8×8, for the toy model.
pub fn toy_cases(n: usize, seed: u64) -> Vec<Case> {
    generate(&SynthConfig::new(seed, n, 1))
        .train
        .into_iter()
        .map(|mut c| {
            let src = c.image.clone();
            let f = src.shape()[0] / 8;
            let mut img = Tensor::zeros(&[8, 8, 3]);
            let mut mask = vec![false; 64];
            for y in 0..8 {
                for x in 0..8 {
                    let mut inside = 0;
                    for ch in 0..3 {
                        let mut s = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                s += src.at(&[y * f + dy, x * f + dx, ch]);
                            }
                        }
                        img.set(&[y, x, ch], s / (f * f) as f64);
                    }
                    for dy in 0..f {
                        for dx in 0..f {
                            inside += c.mask[(y * f + dy) * src.shape()[1] + x * f + dx] as usize;
                        }
                    }
                    mask[y * 8 + x] = 2 * inside >= f * f;
                }
            }
            c.image = img;
            c.mask = mask;
            c
        })
        .collect()
}

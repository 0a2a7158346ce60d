//! Procedural rendering of a case: pink-noise stroma, an elliptical lesion and
//! nuclei whose size, count, arrangement and marks follow the attribute levels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::CaseSpec;
use crate::tensor::Tensor;

/// Nominal nuclei per base area at each crowding level.
pub const CROWDING_DENSITY: [f64; 3] = [10.0, 25.0, 50.0];

/// Reference area, as a multiple of the image area, for the crowding densities.
pub const BASE_AREA: f64 = 1.5;

/// Radius set available at each pleomorphism level.
pub const RADIUS_SETS: [&[f64]; 3] = [&[1.0], &[1.0, 1.6], &[1.0, 1.6, 2.3]];

pub const STROMA_RGB: [f64; 3] = [0.92, 0.72, 0.82];
pub const LESION_RGB: [f64; 3] = [0.78, 0.66, 0.88];
pub const NUCLEUS_RGB: [f64; 3] = [0.30, 0.18, 0.45];
pub const MITOSIS_RGB: [f64; 3] = [0.98, 0.30, 0.40];
pub const NUCLEOLUS_RGB: [f64; 3] = [0.40, 0.30, 0.98];

const NOISE_AMPLITUDE: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nucleus {
    pub x: i32,
    pub y: i32,
    pub radius: f64,
}

impl Nucleus {
    /// Pixels `(x, y)` covered by the disk.
    pub fn pixels(&self) -> Vec<(i32, i32)> {
        let r = self.radius.floor() as i32;
        let r2 = self.radius * self.radius;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if (dx * dx + dy * dy) as f64 <= r2 {
                    out.push((self.x + dx, self.y + dy));
                }
            }
        }
        out
    }

    /// Integer half-width of the covered square.
    pub fn extent(&self) -> i32 {
        self.radius.floor() as i32
    }
}

/// A rendered case.
#[derive(Debug, Clone)]
pub struct Rendered {
    /// `[H, W, 3]`, values quantized to multiples of 1/255.
    pub image: Tensor,
    /// Row-major lesion mask, `H·W` entries.
    pub mask: Vec<bool>,
    pub nuclei: Vec<Nucleus>,
}

impl Rendered {
    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Lesion mask: the `round(area)` pixels whose centers have the smallest normalized
/// ellipse radius, i.e. a level set of the ellipse sized to match its analytic area.
pub fn lesion_mask(spec: &CaseSpec) -> Vec<bool> {
    let s = spec.size;
    let e = &spec.lesion;
    let (sn, cs) = e.angle.sin_cos();
    let mut rho: Vec<(f64, usize)> = (0..s * s)
        .map(|i| {
            let dx = (i % s) as f64 + 0.5 - e.cx;
            let dy = (i / s) as f64 + 0.5 - e.cy;
            let u = dx * cs + dy * sn;
            let v = -dx * sn + dy * cs;
            ((u / e.a).powi(2) + (v / e.b).powi(2), i)
        })
        .collect();
    rho.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = (e.area().round() as usize).min(s * s);
    let mut m = vec![false; s * s];
    for &(_, i) in &rho[..n] {
        m[i] = true;
    }
    m
}

/// Multi-octave value noise with amplitude proportional to cell size, normalized to
/// zero mean and unit standard deviation.
pub fn pink_noise<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut cell = size.max(2) / 2;
    while cell >= 1 {
        let g = size / cell + 2;
        let grid: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let amp = cell as f64;
        for y in 0..size {
            let fy = y as f64 / cell as f64;
            let (iy, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..size {
                let fx = x as f64 / cell as f64;
                let (ix, tx) = (fx.floor() as usize, fx.fract());
                let v00 = grid[iy * g + ix];
                let v01 = grid[iy * g + ix + 1];
                let v10 = grid[(iy + 1) * g + ix];
                let v11 = grid[(iy + 1) * g + ix + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[y * size + x] += amp * (top + (bot - top) * ty);
            }
        }
        cell /= 2;
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    out
}

/// Number of nuclei for a crowding level and lesion area fraction.
pub fn nuclei_count(crowding: u8, area_fraction: f64) -> usize {
    ((CROWDING_DENSITY[crowding as usize] * area_fraction / BASE_AREA).round() as usize).max(crowding as usize + 1)
}

fn radius_for(pleomorphism: u8, i: usize, rng: &mut ChaCha8Rng) -> f64 {
    let set = RADIUS_SETS[pleomorphism as usize];
    if i < set.len() {
        // Largest first, so every size in the set is present.
        set[set.len() - 1 - i]
    } else {
        set[rng.gen_range(0..set.len())]
    }
}

/// Disks at least one clear pixel apart (no 4- or 8-adjacency between them).
fn separated(a: &Nucleus, b: &Nucleus) -> bool {
    let dx = (a.x - b.x).abs();
    let dy = (a.y - b.y).abs();
    let need = a.extent() + b.extent() + 2;
    if dx >= need || dy >= need {
        return true;
    }
    let bp = b.pixels();
    a.pixels()
        .iter()
        .all(|&(x, y)| bp.iter().all(|&(u, v)| (x - u).abs() > 1 || (y - v).abs() > 1))
}

/// Center and its four neighbours lie in the mask and the whole disk lies in the image.
fn disk_inside(n: &Nucleus, mask: &[bool], size: usize) -> bool {
    let in_image = |x: i32, y: i32| x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size;
    n.pixels().iter().all(|&(x, y)| in_image(x, y))
        && [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .all(|&(dx, dy)| mask[(n.y + dy) as usize * size + (n.x + dx) as usize])
}

/// Row-aligned placement: nuclei are packed left to right along horizontal rows, rows
/// taken in order from a random starting row. Of all row phases and starting rows, the
/// packing holding the most nuclei is used.
fn place_rows(spec: &CaseSpec, mask: &[bool], radii: &[f64], rng: &mut ChaCha8Rng) -> Vec<Nucleus> {
    let size = spec.size as i32;
    let ext = radii.iter().map(|r| r.floor() as i32).max().unwrap_or(1);
    let pitch = 2 * ext + 2;
    let pack = |oy: i32, start: usize| {
        let rows: Vec<i32> = (oy..size).step_by(pitch as usize).collect();
        let mut placed: Vec<Nucleus> = Vec::new();
        let mut next = 0;
        for k in 0..rows.len() {
            let y = rows[(start + k) % rows.len()];
            let mut x = 0;
            while x < size && next < radii.len() {
                let n = Nucleus { x, y, radius: radii[next] };
                if disk_inside(&n, mask, spec.size) && placed.iter().all(|p| separated(p, &n)) {
                    placed.push(n);
                    next += 1;
                    x += 1 + n.extent();
                } else {
                    x += 1;
                }
            }
        }
        placed
    };
    let mut best: Vec<Vec<Nucleus>> = Vec::new();
    for oy in 0..pitch {
        let n_rows = (oy..size).step_by(pitch as usize).count();
        for start in 0..n_rows {
            let p = pack(oy, start);
            match best.first().map(Vec::len) {
                Some(n) if p.len() < n => {}
                Some(n) if p.len() == n => best.push(p),
                _ => best = vec![p],
            }
        }
    }
    if best.is_empty() {
        return Vec::new();
    }
    best.swap_remove(rng.gen_range(0..best.len()))
}

/// Scattered placement with rejection of touching disks.
fn place_scattered(spec: &CaseSpec, mask: &[bool], radii: &[f64], rng: &mut ChaCha8Rng) -> Vec<Nucleus> {
    let inside: Vec<(i32, i32)> = (0..spec.size * spec.size)
        .filter(|&i| mask[i])
        .map(|i| ((i % spec.size) as i32, (i / spec.size) as i32))
        .collect();
    let mut placed: Vec<Nucleus> = Vec::new();
    if inside.is_empty() {
        return placed;
    }
    for &radius in radii {
        for _ in 0..400 {
            let (x, y) = inside[rng.gen_range(0..inside.len())];
            let n = Nucleus { x, y, radius };
            if disk_inside(&n, mask, spec.size) && placed.iter().all(|p| separated(p, &n)) {
                placed.push(n);
                break;
            }
        }
    }
    placed
}

/// Renders the case deterministically from `spec.seed`.
pub fn render(spec: &CaseSpec) -> Rendered {
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mask = lesion_mask(spec);
    let lum = pink_noise(size, &mut rng);
    let chroma: Vec<[f64; 3]> = (0..size * size)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();

    let mut img = vec![[0.0f64; 3]; size * size];
    for i in 0..size * size {
        let base = if mask[i] { LESION_RGB } else { STROMA_RGB };
        for c in 0..3 {
            img[i][c] = base[c] + NOISE_AMPLITUDE * (lum[i] + 0.25 * chroma[i][c]);
        }
    }

    let count = nuclei_count(spec.crowding, spec.area_fraction());
    let radii: Vec<f64> = (0..count).map(|i| radius_for(spec.pleomorphism, i, &mut rng)).collect();
    let nuclei = if spec.polarity_loss == 0 {
        place_rows(spec, &mask, &radii, &mut rng)
    } else {
        place_scattered(spec, &mask, &radii, &mut rng)
    };

    let paint = |x: i32, y: i32, rgb: [f64; 3], img: &mut Vec<[f64; 3]>| {
        if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
            let i = y as usize * size + x as usize;
            for c in 0..3 {
                img[i][c] = rgb[c] + 0.5 * NOISE_AMPLITUDE * lum[i];
            }
        }
    };
    for n in &nuclei {
        for (x, y) in n.pixels() {
            paint(x, y, NUCLEUS_RGB, &mut img);
        }
        if spec.mitosis == 1 {
            paint(n.x, n.y, MITOSIS_RGB, &mut img);
        }
        if spec.nucleoli == 1 {
            paint(n.x, n.y - 1, NUCLEOLUS_RGB, &mut img);
        }
    }

    let data: Vec<f64> = img
        .iter()
        .flat_map(|px| px.iter().map(|&v| quantize(v)))
        .collect();
    Rendered {
        image: Tensor::new(vec![size, size, 3], data).expect("image shape"),
        mask,
        nuclei,
    }
}

/// Nearest multiple of 1/255 inside `[0, 1]`.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

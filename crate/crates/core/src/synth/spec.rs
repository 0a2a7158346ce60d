//! Case attributes, lesion geometry and the conclusion rule.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Side length of generated images in pixels.
pub const IMAGE_SIZE: usize = 32;

/// Lesions below this area fraction cannot be graded.
pub const INSUFFICIENT_AREA: f64 = 0.08;

/// Area-fraction range for gradable lesions.
pub const GRADABLE_AREA: (f64, f64) = (0.15, 0.5);

/// Area-fraction range drawn for insufficient cases.
pub const SMALL_AREA: (f64, f64) = (0.06, 0.078);

/// Diagnostic conclusion classes, in label-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal = 0,
    LowGrade = 1,
    HighGrade = 2,
    Insufficient = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Normal, Label::LowGrade, Label::HighGrade, Label::Insufficient];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::LowGrade => "low-grade",
            Label::HighGrade => "high-grade",
            Label::Insufficient => "insufficient",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown label {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-major axis.
    pub a: f64,
    /// Semi-minor axis.
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }

    /// Half-widths of the axis-aligned bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let ex = (self.a * self.a * c * c + self.b * self.b * s * s).sqrt();
        let ey = (self.a * self.a * s * s + self.b * self.b * c * c).sqrt();
        (ex, ey)
    }

    /// True when the ellipse stays at least one pixel away from every image edge.
    pub fn fits(&self, size: usize) -> bool {
        let (ex, ey) = self.half_extents();
        let s = size as f64;
        self.cx - ex >= 1.0 && self.cx + ex <= s - 1.0 && self.cy - ey >= 1.0 && self.cy + ey <= s - 1.0
    }
}

/// Attribute levels and lesion geometry of one synthetic case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSpec {
    /// Nuclear pleomorphism, 0..=2.
    pub pleomorphism: u8,
    /// Cell crowding, 0..=2.
    pub crowding: u8,
    /// Loss of cell polarity, 0..=1.
    pub polarity_loss: u8,
    /// Mitotic activity, 0..=1.
    pub mitosis: u8,
    /// Prominent nucleoli, 0..=1.
    pub nucleoli: u8,
    pub lesion: Ellipse,
    pub size: usize,
    /// Drives rendering and report paraphrase choice.
    pub seed: u64,
}

impl CaseSpec {
    pub fn area_fraction(&self) -> f64 {
        self.lesion.area() / (self.size * self.size) as f64
    }

    /// `p + c + o + m + n`.
    pub fn score(&self) -> u8 {
        self.pleomorphism + self.crowding + self.polarity_loss + self.mitosis + self.nucleoli
    }

    /// Level of each of the five description tasks, in task order.
    pub fn levels(&self) -> [u8; 5] {
        [self.pleomorphism, self.crowding, self.polarity_loss, self.mitosis, self.nucleoli]
    }

    pub fn validate(&self) -> Result<()> {
        let max = [2, 2, 1, 1, 1];
        for (i, (&l, &m)) in self.levels().iter().zip(&max).enumerate() {
            if l > m {
                return Err(Error::invalid(format!("attribute {i} level {l} exceeds {m}")));
            }
        }
        if !self.lesion.fits(self.size) {
            return Err(Error::invalid("lesion does not fit inside the image"));
        }
        Ok(())
    }
}

/// Insufficient below the area floor; otherwise graded by attribute score.
pub fn conclusion_rule(spec: &CaseSpec) -> Label {
    if spec.area_fraction() < INSUFFICIENT_AREA {
        return Label::Insufficient;
    }
    match spec.score() {
        0 => Label::Normal,
        1..=3 => Label::LowGrade,
        _ => Label::HighGrade,
    }
}

fn draw_levels<R: Rng + ?Sized>(rng: &mut R) -> [u8; 5] {
    [
        rng.gen_range(0..3),
        rng.gen_range(0..3),
        rng.gen_range(0..2),
        rng.gen_range(0..2),
        rng.gen_range(0..2),
    ]
}

fn draw_lesion<R: Rng + ?Sized>(rng: &mut R, area_fraction: f64, size: usize) -> Ellipse {
    let area_px = area_fraction * (size * size) as f64;
    loop {
        let q: f64 = rng.gen_range(0.7..1.0);
        let a = (area_px / (PI * q)).sqrt();
        let b = q * a;
        let angle = rng.gen_range(0.0..PI);
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let e = Ellipse { cx, cy, a, b, angle };
        if e.fits(size) {
            return e;
        }
    }
}

/// Draws a case with every conclusion class equally likely.
///
/// The class is drawn first; attribute levels are then drawn uniformly and rejected
/// until their score lands in the class's band. Insufficient cases get an area
/// fraction below 0.08 and unconstrained attributes.
pub fn sample_case_spec<R: Rng + ?Sized>(rng: &mut R) -> CaseSpec {
    sample_case_spec_sized(rng, IMAGE_SIZE)
}

pub fn sample_case_spec_sized<R: Rng + ?Sized>(rng: &mut R, size: usize) -> CaseSpec {
    let target = Label::ALL[rng.gen_range(0..4)];
    let levels = match target {
        Label::Normal => [0; 5],
        Label::Insufficient => draw_levels(rng),
        Label::LowGrade | Label::HighGrade => loop {
            let l = draw_levels(rng);
            let s: u8 = l.iter().sum();
            let ok = if target == Label::LowGrade { (1..=3).contains(&s) } else { s >= 4 };
            if ok {
                break l;
            }
        },
    };
    let area = match target {
        Label::Insufficient => rng.gen_range(SMALL_AREA.0..SMALL_AREA.1),
        _ => rng.gen_range(GRADABLE_AREA.0..GRADABLE_AREA.1),
    };
    let lesion = draw_lesion(rng, area, size);
    let seed = rng.gen();
    CaseSpec {
        pleomorphism: levels[0],
        crowding: levels[1],
        polarity_loss: levels[2],
        mitosis: levels[3],
        nucleoli: levels[4],
        lesion,
        size,
        seed,
    }
}

//! Seeded corpus generation and its on-disk layout.
//!
//! ```text
//! out/images/<id>.ppm
//! out/masks/<id>.pgm
//! out/reports/<id>_<v>.txt   (v = 1..=5, six lines each)
//! out/manifest.csv           (id,label,split)
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pnm::{to_byte, Pnm};
use super::render::render;
use super::reports::{compose_reports, parse_level, Report, NUM_TASKS, VARIANTS};
use super::spec::{conclusion_rule, sample_case_spec_sized, CaseSpec, Label, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub split: Split,
    pub label: Label,
    /// Attribute levels in task order.
    pub levels: [u8; 5],
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    pub mask: Vec<bool>,
    pub reports: Vec<Report>,
    /// Present for generated cases, absent for cases read from disk.
    pub spec: Option<CaseSpec>,
}

impl Case {
    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Case>,
    pub test: Vec<Case>,
}

impl Dataset {
    pub fn cases(&self) -> impl Iterator<Item = &Case> {
        self.train.iter().chain(&self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, n_train: usize, n_test: usize) -> Self {
        SynthConfig { seed, n_train, n_test, size: IMAGE_SIZE }
    }
}

fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    rng
}

/// Builds one case from its spec.
pub fn make_case(id: String, split: Split, spec: CaseSpec) -> Case {
    let label = conclusion_rule(&spec);
    let r = render(&spec);
    let mut report_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    report_rng.set_stream(7);
    let reports = compose_reports(&spec, label, &mut report_rng);
    Case {
        id,
        split,
        label,
        levels: spec.levels(),
        image: r.image,
        mask: r.mask,
        reports,
        spec: Some(spec),
    }
}

/// Generates train and test cases from disjoint random streams of one seed.
pub fn generate(cfg: &SynthConfig) -> Dataset {
    let make = |split: Split, n: usize, offset: usize| {
        let mut rng = split_rng(cfg.seed, split);
        (0..n)
            .map(|i| {
                let spec = sample_case_spec_sized(&mut rng, cfg.size);
                make_case(format!("case{:05}", offset + i), split, spec)
            })
            .collect::<Vec<_>>()
    };
    let train = make(Split::Train, cfg.n_train, 0);
    let test = make(Split::Test, cfg.n_test, cfg.n_train);
    Dataset { train, test }
}

/// Fails if any test case's seed also drives a training case.
pub fn audit_disjoint(ds: &Dataset) -> Result<()> {
    let train: HashSet<u64> = ds.train.iter().filter_map(|c| c.spec.as_ref().map(|s| s.seed)).collect();
    for c in &ds.test {
        if let Some(s) = &c.spec {
            if train.contains(&s.seed) {
                return Err(Error::invalid(format!("test case {} reuses a training seed", c.id)));
            }
        }
    }
    Ok(())
}

pub fn write_dataset(ds: &Dataset, out: &Path) -> Result<()> {
    for d in ["images", "masks", "reports"] {
        fs::create_dir_all(out.join(d))?;
    }
    let mut manifest = String::from("id,label,split\n");
    for c in ds.cases() {
        let s = c.image.shape();
        let (h, w) = (s[0], s[1]);
        Pnm { width: w, height: h, channels: 3, data: c.image.data().iter().map(|&v| to_byte(v)).collect() }
            .write(&out.join("images").join(format!("{}.ppm", c.id)))?;
        Pnm { width: w, height: h, channels: 1, data: c.mask.iter().map(|&m| if m { 255 } else { 0 }).collect() }
            .write(&out.join("masks").join(format!("{}.pgm", c.id)))?;
        for (v, r) in c.reports.iter().enumerate() {
            fs::write(out.join("reports").join(format!("{}_{}.txt", c.id, v + 1)), r.to_text())?;
        }
        let _ = writeln!(manifest, "{},{},{}", c.id, c.label, c.split.name());
    }
    fs::write(out.join("manifest.csv"), manifest)?;
    Ok(())
}

/// An RGB PPM as an `[H, W, 3]` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = Pnm::read(path)?;
    if img.channels != 3 {
        return Err(Error::Format(format!("{}: image is not RGB", path.display())));
    }
    Tensor::new(vec![img.height, img.width, 3], img.data.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut ds = Dataset { train: Vec::new(), test: Vec::new() };
    for (ln, line) in manifest.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("manifest line {}: expected 3 fields", ln + 1)));
        }
        let id = f[0].to_string();
        let label: Label = f[1].parse()?;
        let split = match f[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            s => return Err(Error::Format(format!("manifest line {}: unknown split {s:?}", ln + 1))),
        };
        let image = read_image(&dir.join("images").join(format!("{id}.ppm")))?;
        let m = Pnm::read(&dir.join("masks").join(format!("{id}.pgm")))?;
        if [m.height, m.width, m.channels] != [image.shape()[0], image.shape()[1], 1] {
            return Err(Error::Format(format!("{id}: mask does not match image")));
        }
        let mask = m.data.iter().map(|&b| b >= 128).collect();
        let mut reports = Vec::with_capacity(VARIANTS);
        for v in 1..=VARIANTS {
            let text = fs::read_to_string(dir.join("reports").join(format!("{id}_{v}.txt")))?;
            reports.push(
                Report::parse(&text)
                    .ok_or_else(|| Error::Format(format!("{id}_{v}: expected {NUM_TASKS} sentences")))?,
            );
        }
        let mut levels = [0u8; 5];
        for (t, l) in levels.iter_mut().enumerate() {
            *l = parse_level(t, &reports[0].sentences[t])
                .ok_or_else(|| Error::Format(format!("{id}: unparseable sentence for task {t}")))?
                as u8;
        }
        let case = Case { id, split, label, levels, image, mask, reports, spec: None };
        match split {
            Split::Train => ds.train.push(case),
            Split::Test => ds.test.push(case),
        }
    }
    Ok(ds)
}

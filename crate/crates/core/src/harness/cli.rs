//! Command-line front end: `mdnet <subcommand> [flags]`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::error::{Error, Result};
use crate::language::Vocab;
use crate::model::{Mdnet, ModelConfig};
use crate::synth::{generate, read_dataset, read_image, write_dataset, Case, SynthConfig};
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig, TrainRegime};

use super::eval::{evaluate, generate_all, query_sequences, retrieval_scores, EvalOptions, FeatureBank, MetricReport};
use super::export::export_pgm;
use super::gradsuite::{run_suite, SUITE_SEEDS};
use super::metrics::rank_desc;

pub const CHECKPOINT_FILE: &str = "model.mdn";

#[derive(Parser, Debug)]
#[command(name = "mdnet", about = "Image-to-report diagnosis network on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        train_n: usize,
        #[arg(long, default_value_t = 200)]
        test_n: usize,
    },
    /// Train on the train split of a corpus; writes the checkpoint, vocabulary and step log to `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "joint")]
        regime: String,
        #[arg(long, default_value_t = 5.0)]
        eta: f64,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 10)]
        batch: usize,
    },
    /// Greedy report sentence for one image and task (1-based).
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        task: usize,
    },
    /// Rank the test images for the description of test case `--query-id`.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        query_id: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Test-split metrics as CSV on stdout plus a per-case JSON-lines log.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `eval_log.jsonl` beside the checkpoint.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        queries: usize,
    },
    /// Per-word attention maps and the class activation map as PGM files.
    Attend {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every primitive and composite.
    Gradcheck,
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load(ckpt: &Path) -> Result<Mdnet> {
    Mdnet::load(&checkpoint_path(ckpt))
}

fn check_image(model: &Mdnet, img: &Tensor) -> Result<()> {
    let c = &model.config.image;
    if img.shape() != [c.input_h, c.input_w, 3] {
        return Err(Error::Invalid(format!(
            "image is {:?}, model expects {}×{}×3",
            img.shape(),
            c.input_h,
            c.input_w
        )));
    }
    Ok(())
}

fn words(model: &Mdnet, tokens: &[usize]) -> Vec<String> {
    tokens
        .iter()
        .take_while(|&&t| t != model.vocab.end())
        .filter_map(|&t| model.vocab.token(t).map(String::from))
        .collect()
}

fn run(cmd: Cmd, out: &mut String) -> Result<()> {
    match cmd {
        Cmd::Synth { seed, out: dir, train_n, test_n } => {
            if train_n == 0 || test_n == 0 {
                return Err(Error::Invalid("train and test sizes must be at least 1".into()));
            }
            let ds = generate(&SynthConfig::new(seed, train_n, test_n));
            write_dataset(&ds, &dir)?;
            let _ = writeln!(out, "wrote {} train and {} test cases to {}", train_n, test_n, dir.display());
        }
        Cmd::Train { data, regime, eta, epochs, seed, out: dir, lr, batch } => {
            let regime: TrainRegime = regime.parse()?;
            let cfg = TrainConfig { eta, epochs, seed, lr, batch, ..Default::default() };
            cfg.validate()?;
            let ds = read_dataset(&data)?;
            if ds.train.is_empty() {
                return Err(Error::Invalid("dataset has no training cases".into()));
            }
            let mut model = Mdnet::new(ModelConfig::default(), Vocab::templates(), seed)?;
            let log = train(&mut model, &ds.train, &cfg, regime, &mut |s| {
                if s.step % 100 == 0 {
                    eprintln!("step {} L_M {:.4} L_L {:.4} beta {:.3}", s.step, s.loss_m, s.loss_l, s.beta);
                }
            })?;
            fs::create_dir_all(&dir)?;
            model.save(&dir.join(CHECKPOINT_FILE))?;
            log.write_csv(&dir.join("train_log.csv"))?;
            let _ = writeln!(out, "trained {} steps; checkpoint in {}", log.steps.len(), dir.display());
        }
        Cmd::Generate { ckpt, image, task } => {
            let model = load(&ckpt)?;
            if task == 0 || task > model.vocab.tasks() {
                return Err(Error::Invalid(format!("task must be in 1..={}", model.vocab.tasks())));
            }
            let img = read_image(&image)?;
            check_image(&model, &img)?;
            let bank = FeatureBank::compute(&model, &[&img])?;
            let g = generate_all(&model, &bank, super::eval::DEFAULT_MAX_LEN)?;
            let _ = writeln!(out, "{}", words(&model, &g[0][task - 1].tokens).join(" "));
        }
        Cmd::Retrieve { ckpt, data, query_id, k } => {
            let model = load(&ckpt)?;
            let ds = read_dataset(&data)?;
            let pool: &[Case] = &ds.test;
            if k == 0 || k > pool.len() {
                return Err(Error::Invalid(format!("k must be in 1..={}", pool.len())));
            }
            let query = ds
                .cases()
                .find(|c| c.id == query_id)
                .ok_or_else(|| Error::Invalid(format!("no case {query_id:?}")))?;
            let images: Vec<&Tensor> = pool.iter().map(|c| &c.image).collect();
            let bank = FeatureBank::compute(&model, &images)?;
            let scores = retrieval_scores(&model, &bank, &[query_sequences(&model, &query.reports[0])?])?;
            let _ = writeln!(out, "rank,id,label,score");
            for (r, &i) in rank_desc(&scores[0]).iter().take(k).enumerate() {
                let _ = writeln!(out, "{},{},{},{:.6}", r + 1, pool[i].id, pool[i].label, scores[0][i]);
            }
        }
        Cmd::Eval { ckpt, data, log, queries } => {
            let model = load(&ckpt)?;
            let ds = read_dataset(&data)?;
            let r = evaluate(&model, &ds.test, EvalOptions { queries, ..Default::default() })?;
            let mut lines = String::new();
            for c in &r.cases {
                let v = json!({
                    "id": c.id,
                    "dca_pred": c.dca_pred.map(|l| l.name()),
                    "bleu1": c.bleu[0],
                    "bleu2": c.bleu[1],
                    "bleu3": c.bleu[2],
                    "bleu4": c.bleu[3],
                    "attn_ratio": c.attn_ratio,
                });
                let _ = writeln!(lines, "{v}");
            }
            let path = log.unwrap_or_else(|| checkpoint_path(&ckpt).with_file_name("eval_log.jsonl"));
            fs::write(&path, lines)?;
            out.push_str(&MetricReport::from_runs(std::slice::from_ref(&r)).to_csv());
        }
        Cmd::Attend { ckpt, image, out_dir } => {
            let model = load(&ckpt)?;
            let img = read_image(&image)?;
            check_image(&model, &img)?;
            let bank = FeatureBank::compute(&model, &[&img])?;
            let g = generate_all(&model, &bank, super::eval::DEFAULT_MAX_LEN)?;
            let (gh, gw) = model.config.image.out_hw();
            let factor = model.config.image.input_h / gh;
            fs::create_dir_all(&out_dir)?;
            export_pgm(bank.cam.data(), gh, gw, &out_dir.join("cam.pgm"), factor)?;
            for (e, ge) in g[0].iter().enumerate() {
                let ws = words(&model, &ge.tokens);
                for (j, (w, a)) in ws.iter().zip(&ge.attention).enumerate() {
                    let safe: String = w.chars().map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' }).collect();
                    export_pgm(a, gh, gw, &out_dir.join(format!("task{}_{:02}_{}.pgm", e + 1, j, safe)), factor)?;
                }
                let _ = writeln!(out, "task {}: {}", e + 1, ws.join(" "));
            }
        }
        Cmd::Gradcheck => {
            let results = run_suite(&SUITE_SEEDS, &mut |r| {
                eprintln!("{:<40} seed {} rel_err {:.3e} {}", r.name, r.seed, r.rel_err, if r.passed() { "ok" } else { "FAIL" });
            })?;
            let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
            if let Some(worst) = failed.first() {
                return Err(Error::Invalid(format!(
                    "{} of {} gradient checks failed (first: {} seed {})",
                    failed.len(),
                    results.len(),
                    worst.name,
                    worst.seed
                )));
            }
            let _ = writeln!(out, "all {} gradient checks passed", results.len());
        }
    }
    Ok(())
}

/// Runs the CLI on `argv` (program name first). Returns 0 on success, 1 on usage or
/// validation failure and 2 on numeric failure.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut out = String::new();
    let res = run(cli.cmd, &mut out);
    print!("{out}");
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

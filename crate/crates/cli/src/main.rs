use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zslmetric::extractor::export_attention;
use zslmetric::harness::{grid, grid_csv, load_model, train, zsl_split, DataSource, ExperimentConfig, Mode, UNSEEN};
use zslmetric::losses::LossKind;
use zslmetric::metrics::{append_csv, evaluate};
use zslmetric::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "zslmetric", version, about = "Metric learning on class-disjoint retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synth` or `idx:IMAGES,LABELS`.
    #[arg(long, default_value = "synth")]
    data: String,
    /// base, energy, soft_adv, or adapt_adv.
    #[arg(long)]
    mode: Option<String>,
    /// contrastive, triplet, npair, angular, or proxy_nca.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write logs, metrics, report, and checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the unseen classes of a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "synth")]
        data: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ks: Vec<usize>,
        /// Refuse checkpoints trained under a different config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Append the report row to this metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the adversarial weight bound over the configured grid.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-stage attention heatmaps (CSV and PGM) for one input.
    ExportAttn {
        #[arg(long)]
        model: PathBuf,
        /// Text file holding one comma- or whitespace-separated input vector.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient and oracle suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn resolve(run: &RunArgs) -> Result<(ExperimentConfig, DataSource)> {
    let mut cfg = match &run.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(m) = &run.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(l) = &run.loss {
        cfg.loss.kind = parse_loss(l)?;
    }
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok((cfg, run.data.parse()?))
}

fn parse_loss(s: &str) -> Result<LossKind> {
    toml::Value::String(s.into())
        .try_into()
        .map_err(|_| Error::Config(format!("unknown loss {s:?}")))
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("{}: {t:?} is not a number", path.display())))
        })
        .collect()
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { run, out } => {
            let (cfg, data) = resolve(&run)?;
            let ds = data.load(&cfg.synth, cfg.seed)?;
            let outcome = train(&cfg, &ds)?;
            outcome.write(&out)?;
            if let Some(r) = outcome.last_report(UNSEEN) {
                println!("{}", r.csv_row());
            }
        }
        Command::Eval {
            model,
            data,
            ks,
            config,
            out,
        } => {
            let expected = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let ck = load_model(&model, expected.as_ref())?;
            let data: DataSource = data.parse()?;
            let ds = data.load(&ck.config.synth, ck.config.seed)?;
            let split = zsl_split(&ds, ck.config.train_fraction)?;
            let mut rng = ChaCha8Rng::seed_from_u64(ck.config.seed);
            let report = evaluate(
                &ck.model,
                &ds.rows(&split.test_idx)?,
                &ds.labels_of(&split.test_idx),
                &split.train_classes,
                &ks,
                UNSEEN,
                ck.config.epochs,
                &mut rng,
            )?;
            if let Some(path) = out {
                append_csv(&path, std::slice::from_ref(&report))?;
            }
            println!("{}", report.to_json()?);
        }
        Command::Grid { run, seeds, out } => {
            let (mut cfg, data) = resolve(&run)?;
            if !cfg.mode.uses_classifier() {
                cfg.mode = Mode::AdaptAdv;
            }
            let seeds = seeds.unwrap_or_else(|| vec![cfg.seed]);
            let ds = data.load(&cfg.synth, cfg.seed)?;
            let csv = grid_csv(&grid(&cfg, &ds, &seeds)?);
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::ExportAttn { model, input, out } => {
            let ck = load_model(&model, None)?;
            let ex = &ck.model.extractor;
            if !ex.config.attention.is_scalar() {
                return Err(Error::Config(
                    "heatmaps need one weight per location; multidim attention has one per feature".into(),
                ));
            }
            let x = read_vector(&input)?;
            if x.len() != ex.config.backbone.input_dim {
                return Err(Error::Config(format!(
                    "input has {} values, model expects {}",
                    x.len(),
                    ex.config.backbone.input_dim
                )));
            }
            std::fs::create_dir_all(&out)?;
            for (i, (w, stage)) in ex.attention_weights(&x)?.iter().zip(&ex.config.backbone.stages).enumerate() {
                let (csv, pgm) = export_attention(w.data(), stage.height, stage.width, &out.join(format!("stage{i}")))?;
                println!("{} {}", csv.display(), pgm.display());
            }
        }
        Command::Selftest { seed } => {
            let checks = selftest::run(seed)?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} self-check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

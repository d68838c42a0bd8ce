use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use memtrack::checkpoint::{self, Checkpoint};
use memtrack::eval::{self, SWEEP_SIZES};
use memtrack::geometry::{read_boxes, write_boxes};
use memtrack::synthetic::{self, Sequence, Tier};
use memtrack::trainer::{self, OptimizerState, LOG_HEADER};
use memtrack::{tracker, Config, Model, Variant};

#[derive(Parser)]
#[command(name = "memtrack", version, about = "Template tracking with a dynamic external memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track one sequence from its first ground-truth box.
    Track {
        #[arg(long)]
        model: PathBuf,
        /// Directory with `img/` frames and `groundtruth_rect.txt`.
        #[arg(long)]
        sequence: PathBuf,
        /// Model config; its shapes must match the checkpoint.
        #[arg(long)]
        config: PathBuf,
        /// Results file, one `x,y,w,h` line per frame.
        #[arg(long, default_value = "results.txt")]
        out: PathBuf,
        /// Also write per-frame slot weights to `<out>.memory.csv`.
        #[arg(long)]
        dump_memory: bool,
        /// Also write per-frame attention maps to `<out>.attention.csv`.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Train a model on a directory of sequences.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory for `<name>.ckpt` and `<name>.log.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint stem; defaults to the variant name.
        #[arg(long)]
        name: Option<String>,
        /// Override the configured number of steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a results file against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Write `precision.csv` and `success.csv` here.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
    /// Run one checkpoint over a suite of sequences.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        /// Directory for the per-sequence table and mean curves.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare variant checkpoints (`<dir>/<variant>.ckpt`) on a suite.
    Ablate {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        /// Restrict to one tier: easy, drift or hard.
        #[arg(long)]
        tier: Option<String>,
        /// Variants to compare; defaults to all five.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Also run the memory-size sweep over `<dir>/slots_<N>.ckpt`.
        #[arg(long)]
        sweep: bool,
        /// Directory for `ablation.csv` and `sweep.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic evaluation suite, or a training set.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Generate this many training videos instead of the suite.
        #[arg(long)]
        train: Option<usize>,
        #[arg(long, default_value_t = 48)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn track(model: &Path, sequence: &Path, config: &Path, out: &Path, dump_memory: bool, dump_attention: bool) -> Result<()> {
    let config = Config::load(config).with_context(|| format!("reading config {}", config.display()))?;
    let model = Checkpoint::load(model)
        .and_then(|c| c.into_model_with(config))
        .with_context(|| format!("loading checkpoint {}", model.display()))?;
    let seq = Sequence::load(sequence).with_context(|| format!("loading sequence {}", sequence.display()))?;
    let mut memory = dump_memory.then(|| vec![tracker::memory_dump_header().to_string()]);
    let mut attention = dump_attention.then(|| vec![tracker::attention_dump_header().to_string()]);
    let boxes = tracker::track_with(&model, &seq.frames, seq.truth[0], |i, r| {
        if let Some(m) = memory.as_mut() {
            m.extend(tracker::memory_dump_rows(i, r));
        }
        if let Some(a) = attention.as_mut() {
            a.extend(tracker::attention_dump_rows(i, r));
        }
    })?;
    write_boxes(out, &boxes)?;
    for (lines, suffix) in [(memory, ".memory.csv"), (attention, ".attention.csv")] {
        if let Some(lines) = lines {
            std::fs::write(with_suffix(out, suffix), lines.join("\n") + "\n")?;
        }
    }
    let e = eval::evaluate(&boxes, &seq.truth)?;
    eprintln!(
        "{}: {} frames, AUC {:.3}, precision@20 {:.3}",
        seq.name,
        boxes.len(),
        e.auc,
        e.precision_at(eval::PRECISION_AT)
    );
    Ok(())
}

fn train(data: &Path, config: &Path, out: &Path, name: Option<String>, steps: Option<usize>) -> Result<()> {
    let config = Config::load(config).with_context(|| format!("reading config {}", config.display()))?;
    let videos = synthetic::load_suite(data)?;
    std::fs::create_dir_all(out)?;
    let stem = name.unwrap_or_else(|| config.variant.name().to_string());
    let steps = steps.unwrap_or(config.train.steps);
    let every = config.train.log_every.max(1);
    let mut model = Model::new(config)?;
    let mut opt = OptimizerState::new(&model.params);
    let mut log = BufWriter::new(File::create(out.join(format!("{stem}.log.csv")))?);
    writeln!(log, "{LOG_HEADER}")?;
    let mut io_error = None;
    trainer::train(&mut model, &mut opt, &videos, steps, |_, row| {
        if let Err(e) = writeln!(log, "{}", row.to_csv()) {
            io_error.get_or_insert(e);
        }
        if row.step % every == 0 {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}  {:.0}s", row.step, row.loss, row.lr, row.wall_time);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    log.flush()?;
    let path = out.join(format!("{stem}.ckpt"));
    checkpoint::save(&model, opt.step as u64, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn evaluate(results: &Path, truth: &Path, plot_dir: Option<PathBuf>) -> Result<()> {
    let r = read_boxes(results).with_context(|| format!("reading {}", results.display()))?;
    let t = read_boxes(truth).with_context(|| format!("reading {}", truth.display()))?;
    let e = eval::evaluate(&r, &t)?;
    println!("frames_scored,auc,precision_20,mean_iou");
    println!("{},{},{},{}", e.ious.len(), e.auc, e.precision_at(eval::PRECISION_AT), e.mean_iou());
    if let Some(dir) = plot_dir {
        std::fs::create_dir_all(&dir)?;
        eval::write_csv(&dir.join("precision.csv"), &e.precision_curve())?;
        eval::write_csv(&dir.join("success.csv"), &e.success_curve())?;
    }
    Ok(())
}

fn bench(ckpt: &Path, suite: &Path, out: Option<PathBuf>) -> Result<()> {
    let (model, _) = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let seqs = synthetic::load_suite(suite)?;
    let results = eval::run_suite(&model, &seqs)?;
    let rows: Vec<_> = results.iter().map(|r| r.row()).collect();
    print!("{}", eval::to_csv_string(&rows)?);
    println!(
        "# mean AUC {:.4}, mean IoU {:.4}",
        eval::mean_auc(&results),
        eval::mean_iou(&results)
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        eval::write_csv(&dir.join("sequences.csv"), &rows)?;
        eval::write_csv(&dir.join("success.csv"), &eval::mean_success(&results))?;
        eval::write_csv(&dir.join("precision.csv"), &eval::mean_precision(&results))?;
    }
    Ok(())
}

fn ablate(
    ckpt_dir: &Path,
    suite: &Path,
    tier: Option<String>,
    variants: Option<Vec<String>>,
    sweep: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut seqs = synthetic::load_suite(suite)?;
    if let Some(t) = tier {
        let Some(tier) = Tier::ALL.into_iter().find(|x| x.name() == t) else {
            bail!("unknown tier `{t}` (expected easy, drift or hard)");
        };
        seqs = eval::filter_tier(&seqs, tier);
        if seqs.is_empty() {
            bail!("no `{t}` sequences in {}", suite.display());
        }
    }
    let variants = match variants {
        Some(names) => names.iter().map(|n| Variant::parse(n)).collect::<memtrack::Result<Vec<_>>>()?,
        None => Variant::ALL.to_vec(),
    };
    let table = eval::run_ablation(ckpt_dir, &variants, &seqs)?;
    print!("{}", eval::to_csv_string(&table)?);
    let sweep_rows = if sweep {
        let rows = eval::memory_size_sweep(ckpt_dir, &SWEEP_SIZES, &seqs)?;
        print!("{}", eval::to_csv_string(&rows)?);
        Some(rows)
    } else {
        None
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        eval::write_csv(&dir.join("ablation.csv"), &table)?;
        if let Some(rows) = sweep_rows {
            eval::write_csv(&dir.join("sweep.csv"), &rows)?;
        }
    }
    Ok(())
}

fn generate(out: &Path, train: Option<usize>, length: usize, seed: u64) -> Result<()> {
    let seqs = match train {
        Some(n) => synthetic::training_set(n, length, seed)?,
        None => synthetic::generate_suite()?,
    };
    synthetic::save_suite(out, &seqs)?;
    eprintln!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Track {
            model,
            sequence,
            config,
            out,
            dump_memory,
            dump_attention,
        } => track(&model, &sequence, &config, &out, dump_memory, dump_attention),
        Command::Train {
            data,
            config,
            out,
            name,
            steps,
        } => train(&data, &config, &out, name, steps),
        Command::Eval { results, truth, plot_dir } => evaluate(&results, &truth, plot_dir),
        Command::Bench { ckpt, suite, out } => bench(&ckpt, &suite, out),
        Command::Ablate {
            ckpt_dir,
            suite,
            tier,
            variants,
            sweep,
            out,
        } => ablate(&ckpt_dir, &suite, tier, variants, sweep, out),
        Command::Generate {
            out,
            train,
            length,
            seed,
        } => generate(&out, train, length, seed),
    }
}

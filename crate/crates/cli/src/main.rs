use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agglomerate::config::ExperimentConfig;
use agglomerate::export::{export_run, ExportKind};
use agglomerate::segmetrics::{dice, hd95_with, read_pgm, Hd95Mode};
use agglomerate::trainer::{
    build_grid, param_counts, prepare_run_dir, run_ablation, run_experiment, thread_count, write_run_dir, Axis,
};
use agglomerate::trainer::{csv_field, fmt_opt};
use clap::{Parser, Subcommand};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "agglomerate", version, about = "Multi-teacher feature distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill the student, fit the decoder and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output_dir.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Validate the config and print parameter counts only.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run the cross-product of the given axes over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of balancing, standardization, teachers, seed.
        #[arg(long, value_delimiter = ',', required = true)]
        axes: Vec<String>,
        /// Number of consecutive seeds starting at the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Overrides the first seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        dry_run: bool,
    },
    /// Score predicted PGM masks against ground truth masks of the same names.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Also write the CSV here.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Takes the HD95 convention from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Plot-ready CSV from a finished run: curves, alpha or pca.
    Export {
        run_dir: PathBuf,
        what: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<agglomerate::Error>() {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            output,
            force,
            dry_run,
        } => train(&config, seed, output, force, dry_run),
        Command::Ablate {
            config,
            axes,
            seeds,
            seed,
            output,
            force,
            dry_run,
        } => ablate(&config, &axes, seeds, seed, output, force, dry_run),
        Command::Eval {
            pred_dir,
            gt_dir,
            output,
            force,
            config,
        } => eval(&pred_dir, &gt_dir, output.as_deref(), force, config.as_deref()),
        Command::Export {
            run_dir,
            what,
            output,
            force,
        } => export(&run_dir, &what, output.as_deref(), force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_output(path: Option<&Path>, text: &str, force: bool) -> anyhow::Result<()> {
    let Some(path) = path else { return Ok(()) };
    if path.exists() && !force {
        return Err(agglomerate::Error::Config(format!("{} already exists; pass --force to overwrite", path.display())).into());
    }
    fs::write(path, text).map_err(|e| agglomerate::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn train(config: &Path, seed: Option<u64>, output: Option<PathBuf>, force: bool, dry_run: bool) -> anyhow::Result<()> {
    let cfg = load_config(config, seed)?;
    let dir = output.unwrap_or_else(|| cfg.output_dir.clone());
    if dry_run {
        let p = param_counts(&cfg)?;
        println!("config ok: {} teachers, seed {}, output {}", cfg.teachers.len(), cfg.seed, dir.display());
        println!("student    {:>8}", p.student);
        println!("heads      {:>8}", p.heads);
        println!("balancer   {:>8}", p.balancer);
        println!("decoder    {:>8}", p.decoder);
        println!("student+heads {:>5}", p.student_and_heads());
        return Ok(());
    }
    prepare_run_dir(&dir, force)?;
    let out = run_experiment(&cfg, &mut |line| eprintln!("{line}"))?;
    write_run_dir(&dir, &out)?;
    println!("{}", out.report.summary());
    Ok(())
}

fn ablate(
    config: &Path,
    axes: &[String],
    seeds: u64,
    seed: Option<u64>,
    output: Option<PathBuf>,
    force: bool,
    dry_run: bool,
) -> anyhow::Result<()> {
    let axes = axes.iter().map(|a| a.parse::<Axis>()).collect::<Result<Vec<_>, _>>()?;
    let base = load_config(config, seed)?;
    if seeds == 0 {
        return Err(agglomerate::Error::Config("--seeds must be at least 1".into()).into());
    }
    let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
    let variants = build_grid(&base, &axes);
    for v in &variants {
        v.cfg.validate()?;
    }
    let threads = thread_count();
    if dry_run {
        for v in &variants {
            println!("{}", v.label);
        }
        println!("{} configurations x {} seeds on {threads} workers", variants.len(), seed_list.len());
        return Ok(());
    }
    let dir = output.unwrap_or_else(|| PathBuf::from(format!("{}-ablation", base.output_dir.display())));
    prepare_run_dir(&dir, force)?;
    let per_seed = axes.contains(&Axis::Seed);
    eprintln!("{} configurations x {} seeds on {threads} workers", variants.len(), seed_list.len());
    let report = run_ablation(&variants, &seed_list, per_seed, threads, Some(&dir), &|line| eprintln!("{line}"))?;
    let md = report.to_markdown();
    for (name, text) in [
        ("ablation.csv", report.to_csv()),
        ("ablation.md", md.clone()),
        ("ablation.json", report.to_json()),
    ] {
        write_output(Some(&dir.join(name)), &text, true)?;
    }
    print!("{md}");
    Ok(())
}

fn list_pgm(dir: &Path) -> anyhow::Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| agglomerate::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|err| agglomerate::Error::Io {
            path: dir.to_path_buf(),
            source: err,
        })?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".pgm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn eval(pred: &Path, gt: &Path, output: Option<&Path>, force: bool, config: Option<&Path>) -> anyhow::Result<()> {
    let mode = match config {
        Some(p) => ExperimentConfig::load(p)?.metrics.hd95_mode,
        None => Hd95Mode::default(),
    };
    let gt_names = list_pgm(gt)?;
    let pred_names = list_pgm(pred)?;
    for n in &gt_names {
        if !pred_names.contains(n) {
            return Err(agglomerate::Error::Config(format!("missing prediction {}", pred.join(n).display())).into());
        }
    }
    for n in &pred_names {
        if !gt_names.contains(n) {
            return Err(agglomerate::Error::Config(format!("missing ground truth {}", gt.join(n).display())).into());
        }
    }
    if gt_names.is_empty() {
        return Err(agglomerate::Error::Config(format!("no .pgm masks in {}", gt.display())).into());
    }
    let mut csv = String::from("file,dice,hd95\r\n");
    let (mut dsum, mut hsum, mut hn) = (0.0, 0.0, 0usize);
    for n in &gt_names {
        let p = read_pgm(&pred.join(n))?;
        let t = read_pgm(&gt.join(n))?;
        let d = dice(&p, &t)?;
        let h = hd95_with(&p, &t, mode)?;
        dsum += d;
        if let Some(h) = h {
            hsum += h;
            hn += 1;
        }
        csv.push_str(&format!("{},{d},{}\r\n", csv_field(n), fmt_opt(h)));
    }
    let macro_hd = (hn > 0).then(|| hsum / hn as f64);
    csv.push_str(&format!("macro,{},{}\r\n", dsum / gt_names.len() as f64, fmt_opt(macro_hd)));
    write_output(output, &csv, force)?;
    print!("{csv}");
    Ok(())
}

fn export(run_dir: &Path, what: &str, output: Option<&Path>, force: bool) -> anyhow::Result<()> {
    let kind: ExportKind = what.parse()?;
    let csv = export_run(run_dir, kind)?;
    write_output(output, &csv, force)?;
    if output.is_none() {
        print!("{csv}");
    }
    Ok(())
}

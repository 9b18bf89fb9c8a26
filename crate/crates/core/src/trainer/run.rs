use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{
    align_phase, distill_phase, patchify_all, AlignData, Dataset, Distiller, ParamCounts, RunReport, TeacherBundle,
    ToyDecoder, CLASS_NAMES, NUM_CLASSES,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::features::{encode_sections, save_embeddings, Image, PatchGrid, INPUT_SIZE};
use crate::rng;

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub model: Distiller,
    pub decoder: ToyDecoder<f32>,
    pub bundle: TeacherBundle,
    /// Student tokens of the held-out images.
    pub test_tokens: PatchGrid,
    pub log: Vec<String>,
}

/// Trains both phases. `echo` receives every log line as it is produced.
pub fn run_experiment(cfg: &ExperimentConfig, echo: &mut dyn FnMut(&str)) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let seed = cfg.seed;
    let tc = &cfg.trainer;
    let mut lines = Vec::new();
    let mut log = |s: &str| {
        echo(s);
        lines.push(s.to_string());
    };

    let data = Dataset::generate(rng::mix(seed, 0xda7a), tc.train_images, tc.test_images)?;
    let train_images: Vec<Image> = data.train.iter().map(|s| s.image.clone()).collect();
    let test_images: Vec<Image> = data.test.iter().map(|s| s.image.clone()).collect();
    let bundle = TeacherBundle::build(
        &cfg.teachers,
        cfg.standardization.kind,
        &train_images,
        &test_images,
        cfg.student.grid,
    )?;
    let mut model = Distiller::init(&cfg.student, &cfg.balancing, &bundle.names, &bundle.channels(), seed)?;
    log(&format!(
        "seed {seed}: {} teachers, {} balancing, {} targets, {} train / {} held-out images",
        bundle.len(),
        cfg.balancing.kind.label(),
        cfg.standardization.kind.label(),
        tc.train_images,
        tc.test_images
    ));

    let patches = patchify_all(&train_images, &cfg.student)?;
    let mut rows = distill_phase(&mut model, &bundle, &patches, tc, seed, &mut log)?;
    drop(patches);

    // phase 2 sees only frozen encoder outputs
    let train_tokens = model.embed_all(&train_images)?;
    let test_tokens = model.embed_all(&test_images)?;
    let fidelity = model.fidelity(&test_tokens, &bundle.test)?;
    let mut decoder = ToyDecoder::init(
        cfg.student.embed_dim,
        NUM_CLASSES,
        cfg.student.grid,
        [INPUT_SIZE, INPUT_SIZE],
        rng::mix(seed, 0xdec),
    )?;
    let align = AlignData {
        train_embeddings: &train_tokens,
        train_labels: data.train.iter().map(|s| s.labels.as_slice()).collect(),
        test_embeddings: &test_tokens,
        test_labels: data.test.iter().map(|s| s.labels.as_slice()).collect(),
    };
    let (rows2, metrics) = align_phase(&mut decoder, &align, tc, seed, cfg.metrics.hd95_mode, &mut log)?;
    rows.extend(rows2);

    let report = RunReport {
        seed,
        teachers: bundle.names.clone(),
        classes: CLASS_NAMES[1..].iter().map(|s| s.to_string()).collect(),
        rows,
        final_metrics: Some(metrics),
        fidelity_mse: fidelity,
        params: param_counts(cfg)?,
        config_echo: cfg.to_toml(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    log(&report.summary());
    Ok(RunOutcome {
        report,
        model,
        decoder,
        bundle,
        test_tokens,
        log: lines,
    })
}

/// Parameter counts of the models `cfg` would train, without training.
pub fn param_counts(cfg: &ExperimentConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let names = cfg.teacher_names();
    let channels: Vec<usize> = cfg.teachers.iter().map(|t| t.out_channels).collect();
    let model = Distiller::init(&cfg.student, &cfg.balancing, &names, &channels, cfg.seed)?;
    let decoder = ToyDecoder::<f32>::init(
        cfg.student.embed_dim,
        NUM_CLASSES,
        cfg.student.grid,
        [INPUT_SIZE, INPUT_SIZE],
        0,
    )?;
    Ok(ParamCounts {
        student: model.student.params().numel(),
        heads: model.heads.iter().map(|h| h.params().numel()).sum(),
        balancer: model.balancer.params().numel(),
        decoder: decoder.params().numel(),
    })
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Writes the run directory layout: config echo, checkpoints, reports, log,
/// fitted standardizers and the held-out student tokens.
pub fn write_run_dir(dir: &Path, out: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    write(dir.join("config.echo"), &out.report.config_echo)?;
    let mut p1 = out.model.student.params().to_sections("student.");
    for h in &out.model.heads {
        p1.extend(h.params().to_sections(&format!("head.{}.", h.teacher())));
    }
    p1.extend(out.model.balancer.params().to_sections("balancer."));
    write(dir.join("checkpoints/phase1.bin"), encode_sections(&p1)?)?;
    write(
        dir.join("checkpoints/phase2.bin"),
        encode_sections(&out.decoder.params().to_sections("decoder."))?,
    )?;
    write(dir.join("report.csv"), out.report.to_csv())?;
    write(dir.join("report.json"), out.report.to_json())?;
    let mut log = out.log.join("\n");
    log.push('\n');
    write(dir.join("log"), log)?;
    for (name, state) in out.bundle.names.iter().zip(&out.bundle.states) {
        state.save(dir.join(format!("standardizer_{name}.json")))?;
    }
    save_embeddings(&out.test_tokens, dir.join("tokens.bin"))
}

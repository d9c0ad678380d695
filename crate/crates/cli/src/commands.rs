use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use gaunet_core::critic::Critic;
use gaunet_core::dataset::{
    make_synthetic_dataset, read_png, write_dataset, write_png, Dataset, DatasetSplit, ImageTensor, TemplateOracle,
};
use gaunet_core::evaluation::{
    augmentation_study, averaging_label, conditional_accuracy, image_fid, write_sample_grid, AugmentSource,
    ClassOracle, ClassificationBlock, Classifier, GeneratorSource, MetricsReport, RunMetadata, StudyConfig, GRID_SIDE,
};
use gaunet_core::generator::Generator;
use gaunet_core::rng::stream;
use gaunet_core::training::{load_checkpoint, save_checkpoint, TrainState, Trainer};

use crate::config::{resolve_seed, ExperimentConfig, SEED_ENV};
use crate::{ClassifyArgs, EvalArgs, GenerateArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.gck";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const LOSS_LOG_FILE: &str = "loss_log.txt";
pub const REPORT_FILE: &str = "metrics.txt";
pub const GRID_FILE: &str = "samples.png";

/// Flag, then `GAU_SEED`, then `fallback`.
fn seed_or(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if flag.is_some() || std::env::var_os(SEED_ENV).is_some() {
        resolve_seed(flag)
    } else {
        Ok(fallback)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn synth_data(a: &SynthArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let ds = make_synthetic_dataset(a.classes as usize, a.per_class, a.size, a.noise, seed)?;
    create_dir(&a.out)?;
    let manifest = write_dataset(&ds, &a.out).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!("wrote {} images and {}", ds.len(), manifest.display());
    Ok(())
}

/// A trained checkpoint with the configuration and data it was trained on.
struct Experiment {
    cfg: ExperimentConfig,
    data: Dataset,
    split: DatasetSplit,
    generator: Generator,
    state: TrainState<f32>,
}

impl Experiment {
    fn load(path: &Path) -> Result<Self> {
        let (state, text) =
            load_checkpoint::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let cfg = ExperimentConfig::parse(&text)
            .and_then(ExperimentConfig::resolve)
            .with_context(|| format!("configuration embedded in {}", path.display()))?;
        let (data, split) = cfg.load_data()?;
        let generator = Generator::new(cfg.generator_config())?;
        Ok(Experiment {
            cfg,
            data,
            split,
            generator,
            state,
        })
    }

    fn source(&self) -> GeneratorSource<'_> {
        GeneratorSource {
            generator: &self.generator,
            params: &self.state.generator,
            data: &self.data,
            pool: &self.split.train,
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        let k = self.data.num_classes;
        ensure!(
            class < k,
            "class {class} is not in the checkpoint's classes 0..{}",
            k - 1
        );
        Ok(())
    }

    /// `count` images of every class, class-major.
    fn generate_all(&self, count: usize, seed: u64) -> Result<(Vec<ImageTensor>, Vec<usize>)> {
        let mut rng = stream(seed, "generate");
        let source = self.source();
        let mut images = Vec::new();
        let mut classes = Vec::new();
        for c in 0..self.data.num_classes {
            images.extend(source.generate(c, count, &mut rng)?);
            classes.extend(std::iter::repeat_n(c, count));
        }
        Ok((images, classes))
    }

    fn metadata(&self, seed: u64, checkpoint: &Path) -> RunMetadata {
        RunMetadata {
            seed,
            config_hash: self.cfg.hash(),
            checkpoint: checkpoint.display().to_string(),
        }
    }
}

fn write_loss_log(path: &Path, state: &TrainState<f32>) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut log = BufWriter::new(file);
    for r in &state.history {
        writeln!(log, "{}", r.log_line())?;
    }
    log.flush()?;
    Ok(log)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let resumed = match &a.resume {
        Some(p) => Some(load_checkpoint::<f32>(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    let mut cfg = match (&a.config, &resumed) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some((_, text))) => ExperimentConfig::parse(text).context("configuration embedded in the checkpoint")?,
        (None, None) => unreachable!("clap requires --config or --resume"),
    };
    if let Some(steps) = a.steps {
        cfg.training.total_steps = steps;
    }
    let cfg = cfg.resolve()?;
    let text = cfg.to_text();
    let (data, split) = cfg.load_data()?;
    let generator = Generator::new(cfg.generator_config())?;
    let critic = Critic::new(cfg.critic_config())?;
    let trainer = Trainer::new(&generator, &critic, cfg.train_config()?, &data, &split.train)?;

    let out = cfg.output_dir();
    create_dir(&out)?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, &text).with_context(|| format!("writing {}", resolved.display()))?;

    let mut state = match resumed {
        Some((s, _)) => s,
        None => trainer.init_state::<f32>(),
    };
    let mut log = write_loss_log(&out.join(LOSS_LOG_FILE), &state)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let total = cfg.training.total_steps;
    let every = cfg.training.checkpoint_every;
    let stop = a.max_steps.map_or(total, |m| total.min(state.step.saturating_add(m)));
    while state.step < stop {
        let r = trainer.step(&mut state)?;
        writeln!(log, "{}", r.log_line())
            .and_then(|_| log.flush())
            .context("writing loss log")?;
        if r.step % every == 0 || r.step == stop {
            save_checkpoint(&checkpoint, &state, &text)?;
        }
        if r.step % 100 == 0 || r.step == stop {
            eprintln!(
                "step {}/{total}: critic {:.4} gp {:.4} generator {:.4}",
                r.step, r.critic_loss, r.gp, r.gen_loss
            );
        }
    }
    if !checkpoint.exists() {
        save_checkpoint(&checkpoint, &state, &text)?;
    }
    println!("trained to step {} -> {}", state.step, checkpoint.display());
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let exp = Experiment::load(&a.checkpoint)?;
    exp.check_class(a.class)?;
    let seed = seed_or(a.seed, exp.cfg.seed())?;
    let mut rng = stream(seed, "generate");
    let images = exp.source().generate(a.class, a.count, &mut rng)?;
    create_dir(&a.out)?;
    for (i, img) in images.iter().enumerate() {
        write_png(&a.out.join(format!("{}_{i:05}.png", a.class)), img)?;
    }
    println!(
        "wrote {} images of class {} to {}",
        images.len(),
        a.class,
        a.out.display()
    );
    Ok(())
}

/// Sorted PNGs of a directory.
fn read_png_dir(dir: &Path, size: usize) -> Result<Vec<(PathBuf, ImageTensor)>> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e
            .with_context(|| format!("reading directory {}", dir.display()))?
            .path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            paths.push(p);
        }
    }
    paths.sort();
    ensure!(!paths.is_empty(), "directory {} contains no PNG images", dir.display());
    paths
        .into_iter()
        .map(|p| {
            let img = read_png(&p)?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            ensure!(
                h == size && w == size,
                "{} is {w}x{h}, expected {size}x{size}",
                p.display()
            );
            Ok((p, img))
        })
        .collect()
}

/// Class ids from `<class>_<index>.png` names; `None` unless every name parses.
fn classes_from_names(paths: &[PathBuf]) -> Option<Vec<usize>> {
    paths
        .iter()
        .map(|p| p.file_stem()?.to_str()?.split_once('_')?.0.parse().ok())
        .collect()
}

fn train_embedder(cfg: &ExperimentConfig, data: &Dataset, split: &DatasetSplit) -> Result<Classifier> {
    let seed = cfg.evaluation.embedder_seed;
    let mut embedder = Classifier::init(cfg.embedder_config(), seed)?;
    embedder.fit(&data.stack(&split.train), &data.labels(&split.train), seed)?;
    Ok(embedder)
}

fn footer(started: Instant) -> Vec<(String, String)> {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    vec![
        ("written_unix".to_string(), now.to_string()),
        (
            "elapsed_secs".to_string(),
            format!("{:.1}", started.elapsed().as_secs_f64()),
        ),
    ]
}

fn write_outputs(report: &MetricsReport, grid: &[ImageTensor], out: &Path) -> Result<()> {
    create_dir(out)?;
    let path = out.join(REPORT_FILE);
    report
        .write(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    if !grid.is_empty() {
        let path = out.join(GRID_FILE);
        write_sample_grid(grid, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let exp = match &a.checkpoint {
        Some(p) => Some(Experiment::load(p)?),
        None => None,
    };
    let cfg = match (&a.config, &exp) {
        (Some(p), _) => ExperimentConfig::load(p)?.resolve()?,
        (None, Some(e)) => e.cfg.clone(),
        (None, None) => unreachable!("clap requires --checkpoint or --config"),
    };
    let seed = seed_or(a.seed, cfg.seed())?;
    let (data, split) = match &exp {
        Some(e) if a.config.is_none() => (e.data.clone(), e.split.clone()),
        _ => cfg.load_data()?,
    };
    let size = cfg.data.image_size;

    let (fake, classes) = match (&a.fake, &exp) {
        (Some(dir), _) => {
            let entries = read_png_dir(dir, size)?;
            let paths: Vec<PathBuf> = entries.iter().map(|(p, _)| p.clone()).collect();
            (
                entries.into_iter().map(|(_, img)| img).collect(),
                classes_from_names(&paths),
            )
        }
        (None, Some(e)) => {
            let count = a.count.unwrap_or(cfg.evaluation.n_generated_per_class);
            ensure!(count > 0, "--count must be positive");
            let (images, classes) = e.generate_all(count, seed)?;
            (images, Some(classes))
        }
        (None, None) => bail!("eval needs --checkpoint or --fake"),
    };
    let real: Vec<ImageTensor> = match &a.real {
        Some(dir) => read_png_dir(dir, size)?.into_iter().map(|(_, img)| img).collect(),
        None => split.test.iter().map(|&i| data.images[i].clone()).collect(),
    };

    let embedder = train_embedder(&cfg, &data, &split)?;
    let fid = image_fid(&embedder, &real, &fake)?;
    let template;
    let oracle: &dyn ClassOracle = match cfg.evaluation.oracle.as_str() {
        "template" | "auto" if cfg.is_synthetic() => {
            template = TemplateOracle::new(data.num_classes);
            &template
        }
        _ => &embedder,
    };
    let accuracy = match &classes {
        Some(c) if c.iter().all(|&k| k < data.num_classes) => Some(conditional_accuracy(&fake, c, oracle)?),
        _ => None,
    };
    let report = MetricsReport {
        fid: Some(fid),
        conditional_accuracy: accuracy.as_ref().map(|c| c.overall),
        per_class_accuracy: accuracy.map(|c| c.per_class).unwrap_or_default(),
        classification: Vec::new(),
        metadata: RunMetadata {
            seed,
            config_hash: cfg.hash(),
            checkpoint: a
                .checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        },
        footer: footer(started),
    };
    let per_class = (GRID_SIDE * GRID_SIDE).div_ceil(data.num_classes);
    let grid: Vec<ImageTensor> = match &classes {
        Some(c) => (0..data.num_classes)
            .flat_map(|k| {
                c.iter()
                    .enumerate()
                    .filter(move |&(_, &ck)| ck == k)
                    .map(|(i, _)| i)
                    .take(per_class)
            })
            .map(|i| fake[i].clone())
            .collect(),
        None => fake.clone(),
    };
    write_outputs(&report, &grid, &a.out)
}

pub fn classify(a: &ClassifyArgs) -> Result<()> {
    let started = Instant::now();
    let exp = Experiment::load(&a.checkpoint)?;
    let cfg = &exp.cfg;
    let seed = seed_or(a.seed, cfg.seed())?;
    let train: Vec<usize> = match a.real_per_class {
        Some(k) => {
            ensure!(k > 0, "--real-per-class must be positive");
            (0..exp.data.num_classes)
                .flat_map(|c| exp.data.class_members(&exp.split.train, c).into_iter().take(k))
                .collect()
        }
        None => exp.split.train.clone(),
    };
    let study = StudyConfig {
        classifier: cfg.classifier_config(),
        n_generated_per_class: a.n_generated.unwrap_or(cfg.evaluation.n_generated_per_class),
        bootstrap_replicates: cfg.evaluation.bootstrap_replicates,
        seed,
    };
    let outcome = augmentation_study(&exp.data, &train, &exp.split.test, &exp.source(), &study)?;
    let averaging = averaging_label(exp.data.num_classes).to_string();
    let block = |name: &str, report| ClassificationBlock {
        name: name.to_string(),
        averaging: averaging.clone(),
        report,
    };
    let report = MetricsReport {
        classification: vec![block("without", outcome.without), block("with", outcome.with)],
        metadata: exp.metadata(seed, &a.checkpoint),
        footer: footer(started),
        ..Default::default()
    };
    let per_class = (GRID_SIDE * GRID_SIDE).div_ceil(exp.data.num_classes);
    let (grid, _) = exp.generate_all(per_class, seed)?;
    write_outputs(&report, &grid, &a.out)
}

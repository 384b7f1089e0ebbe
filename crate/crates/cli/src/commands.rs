//! Subcommand implementations. Each mutating command writes a run manifest.

use std::path::{Path, PathBuf};

use anyhow::Context;
use wspace_core::checkpoint::Persist;
use wspace_core::config::Config;
use wspace_core::encoders::{
    train_latent_regression_encoder, train_masked_encoder, train_modality_encoder, Modality,
};
use wspace_core::eval::evaluate;
use wspace_core::features::{train_feature_extractor, AttributeClassifier};
use wspace_core::generator::{train_adversarial_generator, train_reference_decoder, GeneratorModel, Variant};
use wspace_core::guided::train_learned_similarity;
use wspace_core::imageio::{decode_gray_png, load_rgb, read_file, save_rgb, write_file};
use wspace_core::latent::probe_layer_attributes;
use wspace_core::pipeline::{generate_from_modality, EditKind, EditSession, Generated, StrategyRegistry};
use wspace_core::toyfaces::dataset::MANIFEST_FILE;
use wspace_core::toyfaces::Dataset;
use wspace_core::util::tensor_hash;
use wspace_core::Error;

use crate::args::{Command, DatasetCommand, EditArgs, GenerateArgs, InputModality, RoiEditArgs, TrainCommand};
use crate::artifacts::{self, load_models};
use crate::inputs::{check_image, labels_from_gray, mask_from_gray, sketch_from_gray};
use crate::manifest::Recorder;

/// Exit status for input and configuration problems.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 1;

/// Usage errors detected by the command layer itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::UnsupportedResolution(..),
        ) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(command: Command, cfg: &Config) -> anyhow::Result<()> {
    match command {
        Command::Dataset(DatasetCommand::Build { out }) => dataset_build(cfg, out),
        Command::Train(t) => train(t, cfg),
        Command::Generate(a) => generate(a, cfg),
        Command::Edit(a) => edit(a, cfg),
        Command::RoiEdit(a) => roi_edit(a, cfg),
        Command::ProbeLayers(a) => probe_layers(cfg, a.out),
        Command::Eval(a) => eval(cfg, a.out),
        Command::Serve(a) => {
            let addr = a.addr.unwrap_or_else(|| cfg.serve.addr.clone());
            let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            rt.block_on(crate::service::serve(cfg.clone(), &addr))
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn dataset_build(cfg: &Config, out: Option<PathBuf>) -> anyhow::Result<()> {
    let dir = out.unwrap_or_else(|| cfg.dataset_dir());
    let mut rec = Recorder::start("dataset build", cfg);
    let ds = Dataset::generate(&cfg.dataset)?;
    ds.write(&dir)?;
    rec.output("dataset", ds.hash());
    rec.output_file("manifest", &dir.join(MANIFEST_FILE))?;
    println!("{} samples written to {} (hash {})", ds.samples.len(), dir.display(), ds.hash());
    rec.finish(&cfg.runs_dir())?;
    Ok(())
}

/// The built dataset if present, otherwise one generated in memory.
fn dataset(cfg: &Config, rec: &mut Recorder) -> anyhow::Result<Dataset> {
    let dir = cfg.dataset_dir();
    let ds = if dir.join(MANIFEST_FILE).exists() {
        Dataset::load(&dir)?
    } else {
        log::warn!("{} has no dataset; generating it in memory", dir.display());
        Dataset::generate(&cfg.dataset)?
    };
    if ds.config.resolution != cfg.dataset.resolution {
        return Err(Error::Config(format!(
            "dataset at {} has resolution {}, config says {}",
            dir.display(),
            ds.config.resolution,
            cfg.dataset.resolution
        ))
        .into());
    }
    rec.input("dataset", ds.hash());
    Ok(ds)
}

fn load<T: Persist>(cfg: &Config, file: &str, rec: &mut Recorder) -> anyhow::Result<T> {
    let path = artifacts::artifact(cfg, file);
    if !path.exists() {
        return Err(Error::MissingModel(format!("{} (train it first)", path.display())).into());
    }
    rec.input_file(file, &path)?;
    Ok(T::load(&path)?)
}

fn save<T: Persist>(cfg: &Config, file: &str, model: &T, rec: &mut Recorder) -> anyhow::Result<()> {
    let path = artifacts::artifact(cfg, file);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    model.save(&path)?;
    rec.output_file(file, &path)?;
    println!("saved {}", path.display());
    Ok(())
}

fn train(t: TrainCommand, cfg: &Config) -> anyhow::Result<()> {
    let mut rec = Recorder::start(&format!("train {t:?}").to_lowercase(), cfg);
    match t {
        TrainCommand::Generator => {
            let ds = dataset(cfg, &mut rec)?;
            let g = match cfg.generator.model.variant {
                Variant::Reference => train_reference_decoder(&ds, &cfg.generator.model, &cfg.generator.reference)?.0,
                Variant::Adversarial => train_adversarial_generator(&ds, &cfg.generator.model, &cfg.generator.adversarial)?.0,
            };
            save(cfg, artifacts::GENERATOR, &g, &mut rec)?;
        }
        TrainCommand::Features => {
            let ds = dataset(cfg, &mut rec)?;
            let f = train_feature_extractor(&ds, &cfg.encoders.features, &cfg.encoders.classifier)?;
            save(cfg, artifacts::FEATURES, &f, &mut rec)?;
        }
        TrainCommand::Inversion { modality, baseline } => {
            let ds = dataset(cfg, &mut rec)?;
            let g: GeneratorModel = load(cfg, artifacts::GENERATOR, &mut rec)?;
            if baseline {
                if modality != InputModality::Photo {
                    return Err(UsageError("--baseline applies to photos only".into()).into());
                }
                let (enc, _) = train_latent_regression_encoder(&ds, &g, &cfg.encoders.inversion)?;
                save(cfg, artifacts::BASELINE, &enc, &mut rec)?;
            } else {
                let f: AttributeClassifier = load(cfg, artifacts::FEATURES, &mut rec)?;
                let (m, tcfg, file) = match modality {
                    InputModality::Photo => (Modality::Photo, &cfg.encoders.inversion, artifacts::INVERSION),
                    InputModality::Sketch => (Modality::Sketch, &cfg.encoders.modality, artifacts::SKETCH),
                    InputModality::Label => (Modality::Label, &cfg.encoders.modality, artifacts::LABEL),
                };
                let (enc, _) = train_modality_encoder(m, &ds, &g, &f, tcfg)?;
                save(cfg, file, &enc, &mut rec)?;
            }
        }
        TrainCommand::Text => {
            let ds = dataset(cfg, &mut rec)?;
            let g: GeneratorModel = load(cfg, artifacts::GENERATOR, &mut rec)?;
            let f: AttributeClassifier = load(cfg, artifacts::FEATURES, &mut rec)?;
            let ev = load(cfg, artifacts::INVERSION, &mut rec)?;
            let (te, _) = wspace_core::text_align::train_text_encoder(&ds, &ev, &g, &f, &cfg.text)?;
            save(cfg, artifacts::TEXT, &te, &mut rec)?;
        }
        TrainCommand::Masked => {
            let g: GeneratorModel = load(cfg, artifacts::GENERATOR, &mut rec)?;
            let f: AttributeClassifier = load(cfg, artifacts::FEATURES, &mut rec)?;
            let (em, _) = train_masked_encoder(&g, &f, &cfg.encoders.masked)?;
            save(cfg, artifacts::MASKED, &em, &mut rec)?;
        }
        TrainCommand::Similarity => {
            let ds = dataset(cfg, &mut rec)?;
            let s = train_learned_similarity(&ds, &cfg.guided.train)?;
            save(cfg, artifacts::SIMILARITY, &s, &mut rec)?;
        }
    }
    rec.finish(&cfg.runs_dir())?;
    Ok(())
}

fn probe_layers(cfg: &Config, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut rec = Recorder::start("probe-layers", cfg);
    let g: GeneratorModel = load(cfg, artifacts::GENERATOR, &mut rec)?;
    let f: AttributeClassifier = load(cfg, artifacts::FEATURES, &mut rec)?;
    let table = probe_layer_attributes(&g, &f, &cfg.generator.probe)?;
    let path = out.unwrap_or_else(|| artifacts::artifact(cfg, artifacts::LAYERS));
    write_file(&path, &serde_json::to_vec_pretty(&table)?)?;
    rec.output_file("layers", &path)?;
    for (layer, flips) in &table.0 {
        let row: Vec<String> = flips.iter().map(|f| format!("{}={:.2}", f.slot.name(), f.flip_rate)).collect();
        println!("layer {layer:>2}: {}", row.join(" "));
    }
    rec.finish(&cfg.runs_dir())?;
    Ok(())
}

fn out_dir(cfg: &Config, out: Option<PathBuf>, rec: &Recorder) -> PathBuf {
    out.unwrap_or_else(|| cfg.workdir.join("outputs").join(rec.run_id()))
}

fn read_gray(path: &Path, rec: &mut Recorder, name: &str) -> anyhow::Result<(Vec<u8>, usize, usize)> {
    rec.input_file(name, path)?;
    Ok(decode_gray_png(&read_file(path)?)?)
}

fn generate(a: GenerateArgs, cfg: &Config) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(UsageError("-n must be at least 1".into()).into());
    }
    let mut rec = Recorder::start("generate", cfg);
    rec.input("text", a.text.clone());
    let (models, _) = load_models(cfg)?;
    let r = models.generator()?.resolution();
    let pcfg = cfg.pipeline();
    let outputs: Vec<Generated> = if let Some(path) = &a.sketch {
        let (v, h, w) = read_gray(path, &mut rec, "sketch")?;
        generate_from_modality(&sketch_from_gray(&v, h, w, r)?, Modality::Sketch, &a.text, a.n, a.seed, &models, &pcfg)?
    } else if let Some(path) = &a.label {
        let (v, h, w) = read_gray(path, &mut rec, "label")?;
        generate_from_modality(&labels_from_gray(&v, h, w, r)?, Modality::Label, &a.text, a.n, a.seed, &models, &pcfg)?
    } else {
        StrategyRegistry::default().get(&a.strategy)?.generate(&a.text, a.n, a.seed, &models, &pcfg)?
    };
    let dir = out_dir(cfg, a.out, &rec);
    for (k, g) in outputs.iter().enumerate() {
        let path = dir.join(format!("sample-{k:02}.png"));
        save_rgb(&path, &g.image)?;
        rec.output(format!("sample-{k:02}"), tensor_hash(&g.image));
        println!("{}", path.display());
    }
    let codes: Vec<Vec<Vec<f64>>> = outputs.iter().map(|g| g.w.rows()).collect();
    write_file(&dir.join("codes.json"), &serde_json::to_vec(&codes)?)?;
    rec.finish(&cfg.runs_dir())?;
    Ok(())
}

/// Open `id` under the sessions directory, or start it from `image`.
fn open_session(cfg: &Config, id: &str, image: Option<&Path>, r: usize, rec: &mut Recorder) -> anyhow::Result<EditSession> {
    let dir = cfg.sessions_dir().join(id);
    if dir.join(wspace_core::pipeline::SESSION_FILE).exists() {
        if image.is_some() {
            return Err(UsageError(format!("session {id} exists; omit --image to continue it")).into());
        }
        let s = EditSession::load(&dir)?;
        rec.input("session", s.current_hash());
        return Ok(s);
    }
    let path = image.ok_or_else(|| UsageError(format!("session {id} does not exist; --image is required")))?;
    rec.input_file("image", path)?;
    let img = load_rgb(path)?;
    check_image(&img, r)?;
    Ok(EditSession::new(id, &img)?)
}

fn run_edit(
    cfg: &Config,
    mut rec: Recorder,
    session: Option<&str>,
    image: Option<&Path>,
    kind: EditKind,
    text: &str,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    if session.is_none() && image.is_none() {
        return Err(UsageError("--image is required without --session".into()).into());
    }
    let (models, _) = load_models(cfg)?;
    let r = models.generator()?.resolution();
    let id = session.map_or_else(|| rec.run_id().to_string(), str::to_string);
    let mut s = open_session(cfg, &id, image, r, &mut rec)?;
    let step = s.apply(kind, text, &models, &StrategyRegistry::default(), &cfg.pipeline(), None)?;
    if let Some(t) = &step.trace {
        if let (Some(a), Some(b)) = (t.first_total(), t.last_total()) {
            println!("objective {}: {a:.6} -> {b:.6}", t.objective);
        }
    }
    if let Some(layers) = &step.layers {
        println!("text layers: {:?}", layers.iter().collect::<Vec<_>>());
    }
    if session.is_some() {
        let dir = cfg.sessions_dir().join(&id);
        s.save(&dir)?;
        println!("session {id}: {} edits in {}", s.history().len(), dir.display());
    }
    let path = out.unwrap_or_else(|| cfg.workdir.join("outputs").join(rec.run_id()).join("edited.png"));
    save_rgb(&path, s.current_image())?;
    rec.output("image", s.current_hash());
    println!("{}", path.display());
    rec.finish(&cfg.runs_dir())?;
    Ok(())
}

fn edit(a: EditArgs, cfg: &Config) -> anyhow::Result<()> {
    let mut rec = Recorder::start("edit", cfg);
    rec.input("text", a.text.clone());
    let kind = EditKind::Text { strategy: a.strategy };
    run_edit(cfg, rec, a.session.as_deref(), a.image.as_deref(), kind, &a.text, a.out)
}

fn roi_edit(a: RoiEditArgs, cfg: &Config) -> anyhow::Result<()> {
    let mut rec = Recorder::start("roi-edit", cfg);
    rec.input("text", a.text.clone());
    let (v, h, w) = read_gray(&a.mask, &mut rec, "mask")?;
    let roi = mask_from_gray(&v, h, w, cfg.generator.model.resolution)?;
    if roi.count() == 0 {
        return Err(UsageError("the mask selects no pixels".into()).into());
    }
    run_edit(cfg, rec, a.session.as_deref(), a.image.as_deref(), EditKind::Roi { roi }, &a.text, a.out)
}

fn eval(cfg: &Config, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut rec = Recorder::start("eval", cfg);
    let ds = dataset(cfg, &mut rec)?;
    let (models, _) = load_models(cfg)?;
    let report = evaluate(&models, &ds, &cfg.pipeline(), &cfg.eval)?;
    let path = out.unwrap_or_else(|| cfg.workdir.join("eval.json"));
    write_file(&path, &serde_json::to_vec_pretty(&report)?)?;
    rec.output_file("report", &path)?;
    print!("{}", report.table());
    rec.finish(&cfg.runs_dir())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_separate_usage_from_runtime() {
        assert_eq!(exit_code(&Error::Config("x".into()).into()), EXIT_USAGE);
        assert_eq!(exit_code(&Error::shape(1, 2).into()), EXIT_USAGE);
        assert_eq!(exit_code(&UsageError("x".into()).into()), EXIT_USAGE);
        assert_eq!(exit_code(&Error::MissingModel("g".into()).into()), EXIT_RUNTIME);
        assert_eq!(exit_code(&Error::Cancelled.into()), EXIT_RUNTIME);
    }
}

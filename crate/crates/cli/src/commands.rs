use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use signgru::dataio::{ingest, prepare_all, split, synthesize, write, PreparedSample};
use signgru::graphnet::{GraphContext, SkeletonTopology};
use signgru::model::{
    load_checkpoint, model_gradcheck, reference_config, GradientFault, ModelParams, MODEL_GRADCHECK_EPS,
    MODEL_GRADCHECK_TOL,
};
use signgru::training::{evaluate, predict_samples, train as run_training, SortOrder, TrainOutputs};

use crate::config::{io_err, require_file, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.ndjson";

pub fn synth(config: &RunConfig) -> Result<(), CliError> {
    let manifest = synthesize(&config.synth_spec())?;
    let parts = split(&manifest, config.data.split, config.seed)?;
    let paths = [&config.data.train_path, &config.data.val_path, &config.data.test_path];
    for (name, (part, path)) in ["train", "val", "test"].iter().zip(parts.iter().zip(paths)) {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        write(part, path)?;
        let counts: Vec<String> = part.class_counts().iter().map(usize::to_string).collect();
        println!("{name}\t{}\t{}\tper-class [{}]", part.len(), path.display(), counts.join(", "));
    }
    config.echo("synth")?;
    Ok(())
}

pub fn train(config: &RunConfig, resume: Option<PathBuf>) -> Result<(), CliError> {
    let topology = config.topology()?;
    let resume = resume.or_else(|| config.train.resume.clone());
    if let Some(p) = &resume {
        require_file(p, "train.resume")?;
    }
    let train_set = load_split(config, &config.data.train_path, "data.train_path", &topology)?;
    let val_set = load_split(config, &config.data.val_path, "data.val_path", &topology)?;
    let params = match &resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.check_compatible(&config.model, &topology)?;
            log::info!("resuming from {}", path.display());
            ckpt.params
        }
        None => ModelParams::init(&config.model, &mut ChaCha8Rng::seed_from_u64(config.seed))?,
    };
    config.echo("train")?;
    let outputs = TrainOutputs {
        checkpoint: Some(config.output.dir.join(CHECKPOINT_FILE)),
        log: Some(config.output.dir.join(LOG_FILE)),
    };
    let graph = GraphContext::new(topology)?;
    let result = run_training(
        params,
        &config.model,
        &graph,
        &train_set,
        &val_set,
        &config.plan(),
        &config.optim,
        &outputs,
    )?;
    println!(
        "best epoch {} val_acc {:.6} ({} epochs, {} steps); checkpoint {}",
        result.best_epoch,
        result.best_val_acc,
        result.log.len(),
        result.steps,
        config.output.dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn eval(config: &RunConfig, checkpoint: Option<PathBuf>, split: &str, order: &str) -> Result<(), CliError> {
    let order: SortOrder = order.parse()?;
    let (params, graph) = load_model(config, checkpoint)?;
    let (path, key) = match split {
        "train" => (&config.data.train_path, "data.train_path"),
        "val" => (&config.data.val_path, "data.val_path"),
        _ => (&config.data.test_path, "data.test_path"),
    };
    let samples = load_split(config, path, key, &graph.topology)?;
    let report = evaluate(&params, &config.model, &graph, &samples, config.train.batch_size)?;
    let table = report.to_table(order);
    print!("{table}");
    let out = config.output.dir.join(format!("eval_{split}.tsv"));
    write_artifact(config, &out, &table)?;
    config.echo("eval")?;
    Ok(())
}

pub fn predict(config: &RunConfig, checkpoint: Option<PathBuf>, input: &Path) -> Result<(), CliError> {
    let (params, graph) = load_model(config, checkpoint)?;
    let samples = load_split(config, input, "--input", &graph.topology)?;
    let (preds, _) = predict_samples(&params, &config.model, &graph, &samples, config.train.batch_size)?;
    let mut text = String::from("id\tclass\tprobability\n");
    for (s, p) in samples.iter().zip(&preds) {
        let _ = writeln!(text, "{}\t{}\t{}", s.id, p.class, p.probability);
    }
    print!("{text}");
    write_artifact(config, &config.output.dir.join("predictions.tsv"), &text)?;
    config.echo("predict")?;
    Ok(())
}

pub fn gradcheck(config: &RunConfig, fault_param: Option<String>, fault_offset: f64) -> Result<(), CliError> {
    let reference = reference_config();
    let topology = SkeletonTopology::chain(reference.n_nodes)?;
    let fault = fault_param.map(|param| GradientFault {
        param,
        offset: fault_offset,
    });
    let report = model_gradcheck(&reference, &topology, config.seed, MODEL_GRADCHECK_EPS, fault.as_ref())?;
    for c in &report.checks {
        println!("{}\t{:.3e}", c.name, c.report.max_rel_error);
    }
    let worst = report.worst();
    println!("max relative error {:.3e} at `{}`", worst.report.max_rel_error, worst.name);
    if report.passed(MODEL_GRADCHECK_TOL) {
        println!("PASS (tolerance {MODEL_GRADCHECK_TOL:e})");
        Ok(())
    } else {
        println!("FAIL (tolerance {MODEL_GRADCHECK_TOL:e})");
        Err(CliError::GradcheckFailed(format!(
            "`{}` relative error {:.3e}",
            worst.name, worst.report.max_rel_error
        )))
    }
}

fn load_split(config: &RunConfig, path: &Path, key: &str, topology: &SkeletonTopology) -> Result<Vec<PreparedSample>, CliError> {
    require_file(path, key)?;
    let manifest = ingest(path, topology, config.model.classes)?;
    Ok(prepare_all(&manifest.samples, config.model.seq_len, config.data.normalization)?)
}

fn load_model(config: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(ModelParams, GraphContext), CliError> {
    let path = checkpoint.unwrap_or_else(|| config.output.dir.join(CHECKPOINT_FILE));
    require_file(&path, "checkpoint")?;
    let topology = config.topology()?;
    let ckpt = load_checkpoint(&path)?;
    ckpt.check_compatible(&config.model, &topology)?;
    Ok((ckpt.params, GraphContext::new(topology)?))
}

/// Writes `body` preceded by the effective configuration as `#` comments.
fn write_artifact(config: &RunConfig, path: &Path, body: &str) -> Result<(), CliError> {
    fs::create_dir_all(&config.output.dir).map_err(|e| io_err(&config.output.dir, e))?;
    let mut text = String::new();
    for line in config.to_toml().lines() {
        let _ = writeln!(text, "# {line}");
    }
    text.push_str(body);
    fs::write(path, text).map_err(|e| io_err(path, e))
}

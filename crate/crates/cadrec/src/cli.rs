//! Command implementations behind the `cadrec` binary: dataset
//! generation, training, evaluation, gradient verification, density
//! export, and the cumulative stage-preset matrix.
//!
//! Every command is a plain function over a [`Config`], so the binary
//! stays a thin argument parser and tests drive the commands directly.
//! Each run writes a manifest naming its inputs by content hash, and
//! text artifacts open with a `manifest <hash>` line, so any result
//! file can be traced to the exact configuration that produced it.

use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::Config;
use crate::evalinfer::{self, EvalResult, Strategy};
use crate::gradcheck;
use crate::graph::Graph;
use crate::losses::LossWeights;
use crate::model::{self, AblationFlags, ModelConfig};
use crate::params::ParamStore;
use crate::scenegen::{self, Expression, GenParams, SceneRecord, Vocab};
use crate::train::{self, TrainStats};
use crate::{Error, Result};

/// Largest per-coordinate relative error a gradient check may report.
pub const GRAD_TOL: f64 = 1e-4;
/// Smallest disagreement the corrupted-backward control must produce.
pub const CONTROL_MIN: f64 = 0.1;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const STREAM_VOCAB: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SCENE: u64 = 3;

/// Decorrelated per-purpose seed from the one run seed, so vocabulary,
/// initialisation, and scene generation never share an RNG stream.
fn stream_seed(base: u64, stream: u64) -> u64 {
    base ^ stream.wrapping_mul(GOLDEN)
}

fn scene_seed(base: u64, index: usize) -> u64 {
    stream_seed(base, STREAM_SCENE).wrapping_add((index as u64 + 1).wrapping_mul(GOLDEN))
}

/// The vocabulary a run with this config builds. Derived from the run
/// seed, so any consumer of a run's artifacts can reconstruct it.
pub fn build_vocab(cfg: &Config) -> Result<Vocab> {
    Vocab::build(
        cfg.gen.n_classes,
        cfg.gen.attrs_per_class,
        cfg.model.channels,
        stream_seed(cfg.seed, STREAM_VOCAB),
    )
}

/// A freshly initialised parameter store for this config, ready for
/// `checkpoint::load_params`. Matches what `cmd_train` starts from.
pub fn init_store(cfg: &Config) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_INIT));
    model::init_model(&mut store, &mut rng, &cfg.model)?;
    Ok(store)
}

/// Scalar count of a configuration's trainable parameters.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model::init_model(&mut store, &mut rng, cfg)?;
    Ok(store.iter().map(|(_, t)| t.numel()).sum())
}

/// Loads the config (or defaults), then applies the command-line seed
/// and stage-preset overrides.
pub fn resolve_config(
    path: Option<&Path>,
    seed: Option<u64>,
    preset: Option<usize>,
) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(row) = preset {
        cfg.model.flags = AblationFlags::preset(row)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---- run manifests ----

/// Provenance record for one run: the full config, the seed, the
/// artifact paths, and a hash over the run's input bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config_text: String,
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub metrics: Option<String>,
    pub hash: String,
}

/// Hex SHA-256 over length-prefixed parts, so distinct part splits can
/// never collide by concatenation.
pub fn content_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_path_for(artifact: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest", artifact.display()))
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        s.push_str("manifest v1\n");
        s.push_str(&format!("hash {}\n", self.hash));
        s.push_str(&format!("seed {}\n", self.seed));
        s.push_str(&format!("checkpoint {}\n", self.checkpoint.as_deref().unwrap_or("-")));
        s.push_str(&format!("metrics {}\n", self.metrics.as_deref().unwrap_or("-")));
        s.push_str("config-begin\n");
        s.push_str(&self.config_text);
        s.push_str("config-end\n");
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let bad = |msg: &str| Error::Config(format!("manifest {}: {msg}", path.display()));
        if lines.next() != Some("manifest v1") {
            return Err(bad("missing version line"));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let (key, value) = line.split_once(' ').ok_or_else(|| bad("malformed field"))?;
            if key != name {
                return Err(bad(&format!("expected {name}, found {key}")));
            }
            Ok(value.to_string())
        };
        let hash = field("hash")?;
        let seed: u64 = field("seed")?
            .parse()
            .map_err(|_| bad("seed is not an integer"))?;
        let opt = |v: String| if v == "-" { None } else { Some(v) };
        let checkpoint = opt(field("checkpoint")?);
        let metrics = opt(field("metrics")?);
        if lines.next() != Some("config-begin") {
            return Err(bad("missing config-begin"));
        }
        let mut config_text = String::new();
        loop {
            match lines.next() {
                Some("config-end") => break,
                Some(l) => {
                    config_text.push_str(l);
                    config_text.push('\n');
                }
                None => return Err(bad("missing config-end")),
            }
        }
        Ok(RunManifest {
            config_text,
            seed,
            checkpoint,
            metrics,
            hash,
        })
    }
}

// ---- gen ----

pub struct GenOutputs {
    pub train_path: PathBuf,
    pub val_path: PathBuf,
    pub manifest_path: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub hash: String,
}

/// Generates `cfg.scenes` scenes with per-index seeds, samples each
/// scene's expression pool, and writes the deterministic train/val
/// split plus a manifest into `out_dir`.
pub fn cmd_gen(cfg: &Config, out_dir: &Path) -> Result<GenOutputs> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let (n_train, n_val) = cfg.split_counts();
    let mut records = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let seed = scene_seed(cfg.seed, i);
        let scene = scenegen::generate_scene(&cfg.gen, seed)?;
        let expressions = scenegen::sample_expressions(&scene, &cfg.gen, seed);
        records.push(SceneRecord { scene, expressions });
    }
    let train_path = out_dir.join("train.scenes");
    let val_path = out_dir.join("val.scenes");
    scenegen::write_dataset(&train_path, &records[..n_train])?;
    scenegen::write_dataset(&val_path, &records[n_train..])?;
    let config_text = cfg.canonical();
    let train_bytes = fs::read(&train_path)?;
    let val_bytes = fs::read(&val_path)?;
    let hash = content_hash(&[config_text.as_bytes(), &train_bytes, &val_bytes]);
    let manifest_path = out_dir.join("gen.manifest");
    RunManifest {
        config_text,
        seed: cfg.seed,
        checkpoint: None,
        metrics: None,
        hash: hash.clone(),
    }
    .write(&manifest_path)?;
    Ok(GenOutputs {
        train_path,
        val_path,
        manifest_path,
        n_train,
        n_val,
        hash,
    })
}

// ---- train ----

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub manifest_path: PathBuf,
    pub stats: TrainStats,
    pub hash: String,
}

/// Initialises a model from the run seed, trains it on the dataset, and
/// writes the checkpoint, the metrics log, and the manifest. Identical
/// inputs produce byte-identical outputs.
pub fn cmd_train(
    cfg: &Config,
    data: &Path,
    out_ckpt: &Path,
    metrics: Option<&Path>,
) -> Result<TrainOutputs> {
    cfg.validate()?;
    let dataset = scenegen::read_dataset(data)?;
    let vocab = build_vocab(cfg)?;
    let mut store = init_store(cfg)?;
    let metrics_path = metrics
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_ckpt.with_extension("metrics"));

    let config_text = cfg.canonical();
    let data_bytes = fs::read(data)?;
    let hash = content_hash(&[config_text.as_bytes(), &data_bytes]);
    let manifest_path = manifest_path_for(out_ckpt);
    RunManifest {
        config_text,
        seed: cfg.seed,
        checkpoint: Some(out_ckpt.display().to_string()),
        metrics: Some(metrics_path.display().to_string()),
        hash: hash.clone(),
    }
    .write(&manifest_path)?;

    let mut log = BufWriter::new(File::create(&metrics_path)?);
    writeln!(log, "manifest {hash}")?;
    let stats = train::train(
        &mut store,
        &cfg.model,
        &cfg.train,
        &cfg.weights,
        &dataset,
        &vocab,
        &cfg.gen,
        cfg.kernel_size,
        cfg.sigma(),
        cfg.seed,
        &mut log,
    )?;
    log.flush()?;
    checkpoint::save_params(out_ckpt, &store)?;
    Ok(TrainOutputs {
        checkpoint: out_ckpt.to_path_buf(),
        metrics: metrics_path,
        manifest_path,
        stats,
        hash,
    })
}

// ---- eval ----

#[derive(Debug)]
pub struct EvalOutputs {
    pub report: PathBuf,
    pub manifest_path: PathBuf,
    pub result: EvalResult,
    pub hash: String,
}

/// Evaluates a checkpoint over every (scene, expression) pair. One
/// forward pass per pair yields both counting strategies; `strategy`
/// (or the config's inference switch) picks which one the aggregate
/// counting metrics follow.
pub fn cmd_eval(
    cfg: &Config,
    ckpt: &Path,
    data: &Path,
    strategy: Option<Strategy>,
    out_report: &Path,
) -> Result<EvalOutputs> {
    cfg.validate()?;
    let dataset = scenegen::read_dataset(data)?;
    let vocab = build_vocab(cfg)?;
    let mut store = init_store(cfg)?;
    checkpoint::load_params(ckpt, &mut store)?;
    let mut opts = cfg.eval_options();
    if let Some(s) = strategy {
        opts.strategy = s;
    }
    let mut pairs = Vec::new();
    for (sid, rec) in dataset.iter().enumerate() {
        for eid in 0..rec.expressions.len() {
            pairs.push(model::evaluate_pair(
                &store, &cfg.model, rec, sid, eid, &vocab, &cfg.gen, cfg.seed, &opts,
            )?);
        }
    }
    let result = EvalResult::from_pairs(pairs, opts.strategy, opts.tau)?;
    result.validate()?;

    let config_text = cfg.canonical();
    let ckpt_bytes = fs::read(ckpt)?;
    let data_bytes = fs::read(data)?;
    let hash = content_hash(&[config_text.as_bytes(), &ckpt_bytes, &data_bytes]);
    let manifest_path = manifest_path_for(out_report);
    RunManifest {
        config_text,
        seed: cfg.seed,
        checkpoint: Some(ckpt.display().to_string()),
        metrics: Some(out_report.display().to_string()),
        hash: hash.clone(),
    }
    .write(&manifest_path)?;
    let mut out = BufWriter::new(File::create(out_report)?);
    writeln!(out, "manifest {hash}")?;
    evalinfer::write_report(&mut out, &result)?;
    out.flush()?;
    Ok(EvalOutputs {
        report: out_report.to_path_buf(),
        manifest_path,
        result,
        hash,
    })
}

// ---- gradcheck ----

fn verdict(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "FAIL"
    }
}

/// End-to-end check: the full objective on a jittered micro model,
/// differentiated along parameter routes that cross every stage (the
/// text mixer feeding the queries, the estimator output head, and the
/// classification head).
fn composite_objective_cases(seed: u64) -> Result<Vec<gradcheck::CaseResult>> {
    let gen = GenParams {
        image_size: (32, 32),
        count_range: (2, 3),
        n_classes: 2,
        attrs_per_class: 3,
        max_attrs_per_object: 2,
        min_separation: 4.0,
        margin: 4.0,
        scale_range: (2.0, 4.0),
        noise_amplitude: 0.05,
        context_amplitude: 0.3,
        max_expressions_per_scene: 4,
    };
    let cfg = ModelConfig {
        channels: 8,
        queries: 5,
        decoder_blocks: 1,
        heads: 2,
        cade_depth: 1,
        flags: AblationFlags::full(),
    };
    let vocab = Vocab::build(gen.n_classes, gen.attrs_per_class, cfg.channels, seed ^ 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    model::init_model(&mut store, &mut rng, &cfg)?;
    // freshly initialised biases park ReLU inputs on the kink; jitter to
    // a generic point before differentiating
    gradcheck::jitter_params(&mut store, &mut rng, 0.05);
    let scene = scenegen::generate_scene(&gen, seed ^ 2)?;
    let expressions = scenegen::sample_expressions(&scene, &gen, seed ^ 3);
    let rec = SceneRecord { scene, expressions };
    let spec = rec
        .expressions
        .first()
        .ok_or_else(|| Error::invalid("cli::gradcheck", "empty expression pool"))?;
    let expr = Expression::new(spec.class_id, spec.attribute_ids.clone(), &vocab, 4)?;
    let pyramid = scenegen::render_features(&rec.scene, &vocab, &gen, seed ^ 4)?;
    let text = scenegen::embed_expression(&expr, &vocab)?;
    let gt_density = scenegen::gt_density_map(&rec.scene, &expr, (8, 8), 15)?;
    let weights = LossWeights::default();
    // the matching is a fixed combinatorial choice during backward, so
    // pin it from the unperturbed pass
    let assignment = {
        let mut g = Graph::new();
        let f_v = model::pyramid_nodes(&mut g, &pyramid)?;
        let fwd = model::forward(&mut g, &store, &cfg, &f_v, &text)?;
        model::scene_loss(
            &mut g,
            &store,
            &cfg,
            &fwd,
            &rec.scene,
            &expr,
            &vocab,
            Some(&gt_density),
            &weights,
        )?
        .assignment
    };
    let gt_points = model::gt_norm_points(&rec.scene, &expr);
    let contrast = model::contrast_embeddings(&vocab, &expr)?;
    let mut out = Vec::new();
    for path in ["query.m", "cade.out.w", "head.cls.w"] {
        let error = gradcheck::grad_check_param(
            &store,
            path,
            |g, st| {
                let f_v = model::pyramid_nodes(g, &pyramid)?;
                let fwd = model::forward(g, st, &cfg, &f_v, &text)?;
                let loss = model::scene_loss_with_assignment(
                    g,
                    st,
                    &cfg,
                    &fwd,
                    assignment.clone(),
                    &gt_points,
                    contrast.as_ref().map(|(p, n)| (p.as_slice(), n.as_slice())),
                    Some(&gt_density),
                    text.n_real(),
                    &weights,
                )?;
                Ok(loss.total)
            },
            gradcheck::DEFAULT_EPS,
        )?;
        out.push(gradcheck::CaseResult {
            name: format!("objective.{path}"),
            error,
        });
    }
    Ok(out)
}

/// One line per check. Returns true iff every operation passes, the
/// end-to-end objective passes, and the corrupted-backward control is
/// caught rather than waved through.
pub fn cmd_gradcheck(cfg: &Config, out: &mut impl Write) -> Result<bool> {
    cfg.validate()?;
    let mut all_ok = true;
    let mut cases = gradcheck::run_standard_cases(cfg.seed, 1, gradcheck::DEFAULT_EPS)?;
    cases.extend(composite_objective_cases(cfg.seed)?);
    for c in &cases {
        let pass = c.error < GRAD_TOL;
        all_ok &= pass;
        writeln!(out, "gradcheck {} {:.3e} {}", c.name, c.error, verdict(pass))?;
    }
    let control = gradcheck::corrupted_backward_control(cfg.seed, gradcheck::DEFAULT_EPS)?;
    let caught = control > CONTROL_MIN;
    all_ok &= caught;
    writeln!(
        out,
        "control corrupted_backward {:.3e} {}",
        control,
        if caught { "caught" } else { "MISSED" }
    )?;
    Ok(all_ok)
}

// ---- export-density ----

#[derive(Debug)]
pub struct ExportOutputs {
    pub pred_tensor: PathBuf,
    pub gt_tensor: PathBuf,
    pub pred_pgm: PathBuf,
    pub gt_pgm: PathBuf,
    pub manifest_path: PathBuf,
    pub predicted_count: f64,
    pub gt_count: f64,
}

/// Writes the predicted and ground-truth density maps for one
/// (scene, expression) pair, each as a binary tensor file and an 8-bit
/// graymap under `out_prefix`.
pub fn cmd_export_density(
    cfg: &Config,
    ckpt: &Path,
    data: &Path,
    scene_idx: usize,
    expr_idx: usize,
    out_prefix: &Path,
) -> Result<ExportOutputs> {
    cfg.validate()?;
    let dataset = scenegen::read_dataset(data)?;
    let rec = dataset.get(scene_idx).ok_or_else(|| {
        Error::Config(format!(
            "scene {scene_idx} out of range, dataset has {}",
            dataset.len()
        ))
    })?;
    let spec = rec.expressions.get(expr_idx).ok_or_else(|| {
        Error::Config(format!(
            "expression {expr_idx} out of range, scene has {}",
            rec.expressions.len()
        ))
    })?;
    let vocab = build_vocab(cfg)?;
    let mut store = init_store(cfg)?;
    checkpoint::load_params(ckpt, &mut store)?;
    let budget = model::expression_token_budget(&cfg.gen);
    let expr = Expression::new(spec.class_id, spec.attribute_ids.clone(), &vocab, budget)?;
    let prediction = model::predict_scene(
        &store,
        &cfg.model,
        &rec.scene,
        &expr,
        &vocab,
        &cfg.gen,
        scenegen::feature_seed(rec, cfg.seed),
    )?;
    let density = prediction.density.ok_or_else(|| {
        Error::invalid(
            "cli::export_density",
            "this configuration has no density estimator",
        )
    })?;
    let (lh, lw) = (density.grid.shape()[0], density.grid.shape()[1]);
    let gt = scenegen::gt_density_map_with_sigma(
        &rec.scene,
        &expr,
        (lh, lw),
        cfg.kernel_size,
        cfg.sigma(),
    )?;
    let selected = rec
        .scene
        .selected_indices(expr.class_id, &expr.attribute_ids)
        .len();
    if (gt.count() - selected as f64).abs() > 1e-6 {
        return Err(Error::Invalid {
            context: "cli::export_density",
            message: format!(
                "ground-truth mass {} deviates from the {selected} referred objects",
                gt.count()
            ),
        });
    }

    let path = |suffix: &str| PathBuf::from(format!("{}.{suffix}", out_prefix.display()));
    let pred_tensor = path("pred.tensors");
    let gt_tensor = path("gt.tensors");
    let pred_pgm = path("pred.pgm");
    let gt_pgm = path("gt.pgm");
    checkpoint::write_tensors(&pred_tensor, [("density.pred", &density.grid)])?;
    checkpoint::write_tensors(&gt_tensor, [("density.gt", &gt.grid)])?;
    scenegen::write_pgm(&pred_pgm, lh, lw, density.grid.data())?;
    scenegen::write_pgm(&gt_pgm, lh, lw, gt.grid.data())?;

    let config_text = cfg.canonical();
    let ckpt_bytes = fs::read(ckpt)?;
    let data_bytes = fs::read(data)?;
    let hash = content_hash(&[config_text.as_bytes(), &ckpt_bytes, &data_bytes]);
    let manifest_path = manifest_path_for(out_prefix);
    RunManifest {
        config_text,
        seed: cfg.seed,
        checkpoint: Some(ckpt.display().to_string()),
        metrics: None,
        hash,
    }
    .write(&manifest_path)?;
    Ok(ExportOutputs {
        pred_tensor,
        gt_tensor,
        pred_pgm,
        gt_pgm,
        manifest_path,
        predicted_count: density.count(),
        gt_count: gt.count(),
    })
}

// ---- ablate ----

pub struct AblateRow {
    pub preset: usize,
    pub param_scalars: usize,
    pub checkpoint: PathBuf,
    pub result: EvalResult,
}

/// Trains and evaluates the cumulative stage presets 1..=7 on one shared
/// dataset under an identical optimisation budget, writing per-preset
/// checkpoints, metrics, and reports into `out_dir` and one table line
/// per preset into `out`.
pub fn cmd_ablate(cfg: &Config, out_dir: &Path, out: &mut impl Write) -> Result<Vec<AblateRow>> {
    cfg.validate()?;
    let data = cmd_gen(cfg, out_dir)?;
    let mut rows = Vec::new();
    for preset in 1..=7 {
        let mut row_cfg = cfg.clone();
        row_cfg.model.flags = AblationFlags::preset(preset)?;
        let ckpt = out_dir.join(format!("preset{preset}.ckpt"));
        cmd_train(&row_cfg, &data.train_path, &ckpt, None)?;
        let report = out_dir.join(format!("preset{preset}.report"));
        let eval = cmd_eval(&row_cfg, &ckpt, &data.val_path, None, &report)?;
        let param_scalars = param_count(&row_cfg.model)?;
        let r = &eval.result;
        writeln!(
            out,
            "preset {preset} params {param_scalars} strategy {} mae {:.4} rmse {:.4} p {:.4} r {:.4} f1 {:.4}",
            r.strategy, r.mae, r.rmse, r.precision, r.recall, r.f1
        )?;
        rows.push(AblateRow {
            preset,
            param_scalars,
            checkpoint: ckpt,
            result: eval.result,
        });
    }
    Ok(rows)
}

//! Pipeline stages. Each stage reads its inputs from the output directory,
//! writes its artifacts there and records them in the run manifest.
//!
//! Seeds: stage `s` uses `derive_seed(root, s)` with generate = 1,
//! train-encoder = 2, train-bnn = 3, evaluate = 4, explain = 5,
//! compress = 6. Both framework modes share the train-bnn and evaluate
//! seeds so the only difference between them is the tracker.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use har_core::bnn::{
    calibrate_ood_threshold, classify_pipeline, embed_windows, pair_features, train_fcbnn, weight_variability_summary,
    FcBnnModel, FrameworkMode, FrozenEnsemble, LabeledFeatures, PipelineOutput,
};
use har_core::data::{generate_synthetic, read_dataset, write_dataset, DatasetSplit, ImuWindow, ACTIVITY_NAMES};
use har_core::encoder::{train_encoder, EmbeddingDistribution, EncoderModel};
use har_core::explain::{
    background_mean, class_means, class_similarity, compress_loop, global_shap_summary, kernel_shap, EmbeddedSet,
    FeatureGroups, ShapExplanation, SimilarityMatrix,
};
use har_core::metrics::{accuracy, auroc};
use har_core::nncore::{load_checkpoint, save_checkpoint, CheckpointData};
use har_core::rng::{self, derive_seed};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::{RunManifest, StageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    TrainEncoder,
    TrainBnn,
    Evaluate,
    Explain,
    Compress,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainEncoder => "train-encoder",
            Stage::TrainBnn => "train-bnn",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Compress => "compress",
            Stage::Report => "report",
        }
    }

    fn seed_id(self) -> u64 {
        match self {
            Stage::Generate => 1,
            Stage::TrainEncoder => 2,
            Stage::TrainBnn => 3,
            Stage::Evaluate => 4,
            Stage::Explain => 5,
            Stage::Compress => 6,
            Stage::Report => 7,
        }
    }

    fn key(self, mode: Option<FrameworkMode>) -> String {
        match mode {
            Some(m) => format!("{}/{}", self.name(), mode_slug(m)),
            None => self.name().to_string(),
        }
    }
}

pub fn mode_slug(mode: FrameworkMode) -> &'static str {
    match mode {
        FrameworkMode::Sota => "sota",
        FrameworkMode::Tracked => "tracked",
    }
}

/// A loaded config bound to its output directory.
pub struct RunContext {
    pub config: PipelineConfig,
    hash: String,
}

impl RunContext {
    pub fn new(config: PipelineConfig) -> CliResult<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Self { config, hash })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    pub fn seed(&self, stage: Stage) -> u64 {
        derive_seed(self.config.seed, stage.seed_id())
    }

    pub fn manifest(&self) -> CliResult<RunManifest> {
        RunManifest::load_or_new(self.out_dir(), &self.hash, self.config.seed)
    }

    fn record(&self, stage: Stage, mode: Option<FrameworkMode>, record: StageRecord) -> CliResult<()> {
        let mut m = self.manifest()?;
        m.stages.insert(stage.key(mode), record);
        m.write_atomic(self.out_dir())
    }

    /// Path of an artifact produced by an earlier stage of this config.
    fn artifact(&self, stage: Stage, mode: Option<FrameworkMode>, name: &str) -> CliResult<PathBuf> {
        let key = stage.key(mode);
        let missing = |path: PathBuf| CliError::MissingArtifact { stage: stage_command(stage, mode), path };
        let m = self.manifest()?;
        let rel = m.stages.get(&key).and_then(|r| r.artifacts.get(name)).ok_or_else(|| missing(self.path(name)))?;
        let path = self.out_dir().join(rel);
        if !path.exists() {
            return Err(missing(path));
        }
        Ok(path)
    }
}

fn stage_command(stage: Stage, mode: Option<FrameworkMode>) -> String {
    match mode {
        Some(m) => format!("{} --mode {}", stage.name(), mode_slug(m)),
        None => stage.name().to_string(),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    fs::write(path, contents).map_err(io_err(format!("writing {}", path.display())))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, &text)
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<D> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("malformed {}: {e}", path.display())))
}

fn save_model(path: &Path, data: &CheckpointData) -> CliResult<()> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(format!("creating {}", path.display())))?);
    save_checkpoint(&mut out, data)?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<CheckpointData> {
    let mut f = std::io::BufReader::new(File::open(path).map_err(io_err(format!("opening {}", path.display())))?);
    Ok(load_checkpoint(&mut f)?)
}

fn artifacts(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn class_name(label: usize) -> String {
    ACTIVITY_NAMES.get(label).map_or_else(|| format!("class{label}"), |s| s.to_string())
}

// ---------------------------------------------------------------- generate

pub fn generate(ctx: &RunContext) -> CliResult<DatasetSplit<f64>> {
    let cfg = &ctx.config.dataset;
    let (data, location) = match &cfg.path {
        Some(path) => (read_dataset(path)?, path.to_string_lossy().into_owned()),
        None => {
            let data = generate_synthetic(&cfg.synthetic_spec(ctx.seed(Stage::Generate)))?;
            write_dataset(&ctx.path("data"), &data, cfg.storage)?;
            (data, "data".to_string())
        }
    };
    let mut metrics = BTreeMap::new();
    for (name, split) in data.splits() {
        metrics.insert(format!("windows.{name}"), split.len() as f64);
    }
    metrics.insert("num_classes".into(), data.num_classes as f64);
    ctx.record(Stage::Generate, None, StageRecord { artifacts: artifacts(&[("dataset", &location)]), metrics })?;
    Ok(data)
}

pub fn load_data(ctx: &RunContext) -> CliResult<DatasetSplit<f64>> {
    Ok(read_dataset(&ctx.artifact(Stage::Generate, None, "dataset")?)?)
}

// ----------------------------------------------------------- train-encoder

pub fn train_encoder_stage(ctx: &RunContext) -> CliResult<EncoderModel<f64>> {
    let data = load_data(ctx)?;
    let trained = train_encoder(&data.train, &ctx.config.encoder, ctx.seed(Stage::TrainEncoder))?;
    save_model(&ctx.path("encoder.ckpt"), &trained.model.to_checkpoint())?;
    let mut csv = String::from("epoch,recon,kl,metric,total\n");
    for e in &trained.trace {
        writeln!(csv, "{},{},{},{},{}", e.epoch, e.recon, e.kl, e.metric, e.total).unwrap();
    }
    write_file(&ctx.path("encoder_trace.csv"), &csv)?;
    let first = trained.trace.first().expect("at least one epoch");
    let last = trained.trace.last().expect("at least one epoch");
    let metrics = BTreeMap::from([
        ("loss.initial".to_string(), first.total),
        ("loss.final".to_string(), last.total),
        ("loss.final.recon".to_string(), last.recon),
        ("loss.final.kl".to_string(), last.kl),
        ("loss.final.metric".to_string(), last.metric),
    ]);
    ctx.record(
        Stage::TrainEncoder,
        None,
        StageRecord { artifacts: artifacts(&[("encoder", "encoder.ckpt"), ("trace", "encoder_trace.csv")]), metrics },
    )?;
    Ok(trained.model)
}

pub fn load_encoder(ctx: &RunContext) -> CliResult<EncoderModel<f64>> {
    Ok(EncoderModel::from_checkpoint(&load_model(&ctx.artifact(Stage::TrainEncoder, None, "encoder")?)?)?)
}

fn embed(
    ctx: &RunContext,
    encoder: &EncoderModel<f64>,
    mode: FrameworkMode,
    windows: &[ImuWindow<f64>],
) -> CliResult<Vec<EmbeddingDistribution<f64>>> {
    Ok(embed_windows(encoder, mode.tracker(&ctx.config.tracker), windows)?)
}

fn labels(windows: &[ImuWindow<f64>]) -> CliResult<Vec<usize>> {
    windows.iter().map(|w| w.label.ok_or_else(|| CliError::Config(format!("window {} has no label", w.id)))).collect()
}

fn embedded_set(
    ctx: &RunContext,
    encoder: &EncoderModel<f64>,
    mode: FrameworkMode,
    windows: &[ImuWindow<f64>],
) -> CliResult<EmbeddedSet<f64>> {
    Ok(EmbeddedSet::new(embed(ctx, encoder, mode, windows)?, labels(windows)?)?)
}

// --------------------------------------------------------------- train-bnn

fn bnn_file(mode: FrameworkMode) -> String {
    format!("bnn_{}.ckpt", mode_slug(mode))
}

pub fn train_bnn_stage(ctx: &RunContext, mode: FrameworkMode) -> CliResult<FcBnnModel<f64>> {
    let data = load_data(ctx)?;
    let encoder = load_encoder(ctx)?;
    let kept: Vec<usize> = (0..encoder.latent_dim).collect();
    let train = embedded_set(ctx, &encoder, mode, &data.train)?.features(&kept);
    let val = embedded_set(ctx, &encoder, mode, &data.validation)?.features(&kept);
    let trained = train_fcbnn(
        encoder.latent_dim,
        &kept,
        data.num_classes,
        &train,
        &val,
        &ctx.config.bnn,
        ctx.seed(Stage::TrainBnn),
    )?;
    let slug = mode_slug(mode);
    let (ckpt, trace_file, var_file) =
        (bnn_file(mode), format!("bnn_{slug}_trace.csv"), format!("bnn_{slug}_variability.csv"));
    save_model(&ctx.path(&ckpt), &trained.model.to_checkpoint())?;

    let mut csv = String::from("epoch,loss,kl,nll,val_accuracy\n");
    for e in &trained.trace {
        writeln!(csv, "{},{},{},{},{}", e.epoch, e.loss, e.kl, e.nll, e.val_accuracy).unwrap();
    }
    write_file(&ctx.path(&trace_file), &csv)?;
    let mut var = String::from("layer,count,sigma_mean,sigma_std,sigma_min,sigma_max,bin_lo,bin_hi,bin_count\n");
    for l in weight_variability_summary(&trained.model, 20) {
        for (lo, hi, c) in &l.histogram {
            writeln!(
                var,
                "{},{},{},{},{},{},{lo},{hi},{c}",
                l.layer, l.count, l.sigma_mean, l.sigma_std, l.sigma_min, l.sigma_max
            )
            .unwrap();
        }
    }
    write_file(&ctx.path(&var_file), &var)?;

    let last = trained.trace.last().expect("at least one epoch");
    let metrics = BTreeMap::from([
        ("val_accuracy.final".to_string(), last.val_accuracy),
        ("loss.final".to_string(), last.loss),
        ("kl.final".to_string(), last.kl),
        ("nll.final".to_string(), last.nll),
        ("param_count".to_string(), har_core::bnn::fcbnn_param_count(&trained.model.dims()) as f64),
    ]);
    ctx.record(
        Stage::TrainBnn,
        Some(mode),
        StageRecord {
            artifacts: artifacts(&[("bnn", &ckpt), ("trace", &trace_file), ("variability", &var_file)]),
            metrics,
        },
    )?;
    Ok(trained.model)
}

pub fn load_bnn(ctx: &RunContext, mode: FrameworkMode) -> CliResult<FcBnnModel<f64>> {
    Ok(FcBnnModel::from_checkpoint(&load_model(&ctx.artifact(Stage::TrainBnn, Some(mode), "bnn")?)?)?)
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub mode: FrameworkMode,
    pub test_windows: usize,
    pub unknown_windows: usize,
    pub accuracy: f64,
    pub ood_threshold: f64,
    pub mean_ood_score_known: f64,
    pub mean_ood_score_unknown: Option<f64>,
    pub ood_auroc: Option<f64>,
    pub entropy_auroc: Option<f64>,
    pub rejected_known: f64,
    pub rejected_unknown: Option<f64>,
    pub mean_entropy_known: f64,
    pub mean_entropy_unknown: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn prediction_rows(csv: &mut String, split: &str, mode: FrameworkMode, rows: &[PipelineOutput<f64>]) {
    for o in rows {
        let label = o.label.map(|l| l.to_string()).unwrap_or_default();
        write!(csv, "{},{},{},{}", o.window_id, split, label, o.result.argmax()).unwrap();
        for p in o.result.prob_mean.iter().chain(&o.result.prob_std) {
            write!(csv, ",{p}").unwrap();
        }
        writeln!(csv, ",{},{},{},{}", o.result.entropy, o.decision.score, u8::from(o.decision.is_ood), mode).unwrap();
    }
}

pub fn evaluate_stage(ctx: &RunContext, mode: FrameworkMode, with_unknown: bool) -> CliResult<EvaluationSummary> {
    let data = load_data(ctx)?;
    let encoder = load_encoder(ctx)?;
    let model = load_bnn(ctx, mode)?;
    let (samples, seed) = (ctx.config.evaluation.samples, ctx.seed(Stage::Evaluate));
    let tracker = mode.tracker(&ctx.config.tracker);

    let val = classify_pipeline(&encoder, tracker, &model, &data.validation, samples, 0.0, seed)?;
    let threshold = calibrate_ood_threshold(&val.iter().map(|o| o.decision.score).collect::<Vec<_>>())?;
    let test = classify_pipeline(&encoder, tracker, &model, &data.test, samples, threshold, seed)?;
    let unknown = if with_unknown && !data.unknown.is_empty() {
        classify_pipeline(&encoder, tracker, &model, &data.unknown, samples, threshold, seed)?
    } else {
        Vec::new()
    };

    let truth = labels(&data.test)?;
    let acc = accuracy(&test.iter().map(|o| o.result.argmax()).collect::<Vec<_>>(), &truth);
    let score = |rows: &[PipelineOutput<f64>]| rows.iter().map(|o| o.decision.score).collect::<Vec<_>>();
    let entropy = |rows: &[PipelineOutput<f64>]| rows.iter().map(|o| o.result.entropy).collect::<Vec<_>>();
    let rejected =
        |rows: &[PipelineOutput<f64>]| rows.iter().filter(|o| o.decision.is_ood).count() as f64 / rows.len() as f64;
    let has_unknown = !unknown.is_empty();
    let summary = EvaluationSummary {
        mode,
        test_windows: test.len(),
        unknown_windows: unknown.len(),
        accuracy: acc,
        ood_threshold: threshold,
        mean_ood_score_known: mean(&score(&test)),
        mean_ood_score_unknown: has_unknown.then(|| mean(&score(&unknown))),
        ood_auroc: if has_unknown { auroc(&score(&unknown), &score(&test)) } else { None },
        entropy_auroc: if has_unknown { auroc(&entropy(&unknown), &entropy(&test)) } else { None },
        rejected_known: rejected(&test),
        rejected_unknown: has_unknown.then(|| rejected(&unknown)),
        mean_entropy_known: mean(&entropy(&test)),
        mean_entropy_unknown: has_unknown.then(|| mean(&entropy(&unknown))),
    };

    let k = model.num_classes;
    let mut csv = String::from("window_id,split,true_label,argmax");
    for c in 0..k {
        write!(csv, ",prob_mean_{c}").unwrap();
    }
    for c in 0..k {
        write!(csv, ",prob_std_{c}").unwrap();
    }
    csv.push_str(",entropy,ood_score,is_ood,mode\n");
    prediction_rows(&mut csv, "test", mode, &test);
    prediction_rows(&mut csv, "unknown", mode, &unknown);
    let slug = mode_slug(mode);
    let (pred_file, eval_file) = (format!("predictions_{slug}.csv"), format!("eval_{slug}.json"));
    write_file(&ctx.path(&pred_file), &csv)?;
    write_json(&ctx.path(&eval_file), &summary)?;

    let mut metrics = BTreeMap::from([
        ("accuracy".to_string(), summary.accuracy),
        ("ood_threshold".to_string(), threshold),
        ("mean_ood_score_known".to_string(), summary.mean_ood_score_known),
    ]);
    if let Some(a) = summary.ood_auroc {
        metrics.insert("ood_auroc".into(), a);
    }
    ctx.record(
        Stage::Evaluate,
        Some(mode),
        StageRecord { artifacts: artifacts(&[("predictions", &pred_file), ("summary", &eval_file)]), metrics },
    )?;
    Ok(summary)
}

// ----------------------------------------------------------------- explain

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSummary {
    pub mode: FrameworkMode,
    pub explained_inputs: usize,
    pub base_value: Vec<f64>,
    pub ranking: Vec<har_core::explain::FeatureImportance>,
    pub max_efficiency_gap: f64,
    pub similarity: Vec<SimilarityMatrix>,
    pub similarity_argmax: Vec<(FrameworkMode, usize)>,
}

/// Pearson similarity of the unknown-class mean embedding to every known
/// class, computed on the test split.
pub fn similarity(
    ctx: &RunContext,
    encoder: &EncoderModel<f64>,
    data: &DatasetSplit<f64>,
    mode: FrameworkMode,
) -> CliResult<SimilarityMatrix> {
    if data.unknown.is_empty() {
        return Err(CliError::Config("class similarity needs a held-out class".into()));
    }
    let known = embed(ctx, encoder, mode, &data.test)?;
    let means =
        class_means(&known.iter().map(|e| e.mean.clone()).collect::<Vec<_>>(), &labels(&data.test)?, data.num_classes)?;
    let unknown = embed(ctx, encoder, mode, &data.unknown)?;
    let u = class_means(&unknown.iter().map(|e| e.mean.clone()).collect::<Vec<_>>(), &vec![0; unknown.len()], 1)?;
    Ok(class_similarity(&means, &u[0], mode)?)
}

pub fn explain_stage(ctx: &RunContext, mode: FrameworkMode) -> CliResult<ExplainSummary> {
    let data = load_data(ctx)?;
    let encoder = load_encoder(ctx)?;
    let model = load_bnn(ctx, mode)?;
    let cfg = &ctx.config.explain;
    let seed = ctx.seed(Stage::Explain);

    let kept = model.kept_dims.clone();
    let background = vec![background_mean(&embedded_set(ctx, &encoder, mode, &data.train)?.features(&kept).features)?];
    let test = embedded_set(ctx, &encoder, mode, &data.test)?;
    let n = cfg.inputs.min(test.len());
    let picks: Vec<usize> = (0..n).map(|i| i * test.len() / n).collect();
    let ensemble = FrozenEnsemble::new(&model, cfg.shap_samples, &mut rng::stream(seed, 0))?;
    let model_fn = |x: &[f64]| ensemble.prob_mean(x);
    let groups = FeatureGroups::paired(kept.iter().map(|d| format!("z{d}")).collect());
    let explanations: Vec<ShapExplanation<f64>> = picks
        .iter()
        .map(|&i| {
            let x = pair_features(&test.embeddings[i], &kept);
            kernel_shap(&model_fn, &x, &background, &groups, cfg.n_coalitions, &mut rng::stream(seed, 1 + i as u64))
        })
        .collect::<har_core::Result<_>>()?;
    let summary = global_shap_summary(&explanations)?;
    let max_gap = explanations.iter().map(|e| e.efficiency_gap()).fold(0.0, f64::max);

    let slug = mode_slug(mode);
    let ids: Vec<u64> = picks.iter().map(|&i| data.test[i].id).collect();
    let mut values = String::from("input_id,class,feature,value,phi\n");
    for p in &summary.beeswarm {
        writeln!(values, "{},{},{},{},{}", ids[p.input], p.class, groups.names[p.feature], p.value, p.phi).unwrap();
    }
    let mut force = String::from("input_id,class,base_value,output");
    for name in &groups.names {
        write!(force, ",{name}").unwrap();
    }
    force.push('\n');
    for r in &summary.force {
        write!(force, "{},{},{},{}", ids[r.input], r.class, r.base_value, r.output).unwrap();
        for c in &r.contributions {
            write!(force, ",{c}").unwrap();
        }
        force.push('\n');
    }

    let sims =
        FrameworkMode::ALL.iter().map(|&m| similarity(ctx, &encoder, &data, m)).collect::<CliResult<Vec<_>>>()?;
    let mut sim_csv = String::from("mode,class,name,pearson\n");
    for s in &sims {
        for (k, r) in s.r.iter().enumerate() {
            writeln!(sim_csv, "{},{k},{},{r}", s.mode, class_name(k)).unwrap();
        }
    }
    let out = ExplainSummary {
        mode,
        explained_inputs: explanations.len(),
        base_value: explanations[0].base_value.clone(),
        ranking: summary.ranking.clone(),
        max_efficiency_gap: max_gap,
        similarity_argmax: sims.iter().map(|s| (s.mode, s.argmax())).collect(),
        similarity: sims,
    };
    let files = [
        format!("shap_{slug}_values.csv"),
        format!("shap_{slug}_force.csv"),
        format!("shap_{slug}_summary.json"),
        "similarity.csv".to_string(),
    ];
    write_file(&ctx.path(&files[0]), &values)?;
    write_file(&ctx.path(&files[1]), &force)?;
    write_json(&ctx.path(&files[2]), &out)?;
    write_file(&ctx.path(&files[3]), &sim_csv)?;

    let mut metrics = BTreeMap::from([
        ("max_efficiency_gap".to_string(), max_gap),
        ("top_feature".to_string(), kept[summary.ranking[0].feature] as f64),
    ]);
    for (m, k) in &out.similarity_argmax {
        metrics.insert(format!("similarity_argmax.{}", mode_slug(*m)), *k as f64);
    }
    ctx.record(
        Stage::Explain,
        Some(mode),
        StageRecord {
            artifacts: artifacts(&[
                ("values", &files[0]),
                ("force", &files[1]),
                ("summary", &files[2]),
                ("similarity", &files[3]),
            ]),
            metrics,
        },
    )?;
    Ok(out)
}

// ---------------------------------------------------------------- compress

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionSummary {
    pub mode: FrameworkMode,
    pub report: har_core::explain::CompressionReport,
    pub baseline_test_accuracy: f64,
    pub compressed_test_accuracy: f64,
    pub param_reduction: f64,
}

pub fn compress_stage(ctx: &RunContext, mode: FrameworkMode) -> CliResult<CompressionSummary> {
    let data = load_data(ctx)?;
    let encoder = load_encoder(ctx)?;
    let baseline = load_bnn(ctx, mode)?;
    let train = embedded_set(ctx, &encoder, mode, &data.train)?;
    let val = embedded_set(ctx, &encoder, mode, &data.validation)?;
    let test = embedded_set(ctx, &encoder, mode, &data.test)?;
    let seed = ctx.seed(Stage::Compress);
    let (report, compressed) = compress_loop(&train, &val, &baseline, &ctx.config.bnn, &ctx.config.compression, seed)?;

    let samples = ctx.config.evaluation.samples;
    let test_acc = |m: &FcBnnModel<f64>| -> CliResult<f64> {
        let f: LabeledFeatures<f64> = test.features(&m.kept_dims);
        let preds = har_core::bnn::predict_batch(m, &f.features, samples, ctx.seed(Stage::Evaluate))?;
        Ok(accuracy(&preds.iter().map(|p| p.argmax()).collect::<Vec<_>>(), &f.labels))
    };
    let summary = CompressionSummary {
        mode,
        baseline_test_accuracy: test_acc(&baseline)?,
        compressed_test_accuracy: test_acc(&compressed)?,
        param_reduction: report.param_reduction(),
        report,
    };

    let slug = mode_slug(mode);
    let files =
        [format!("compression_{slug}.json"), format!("compression_{slug}.csv"), format!("bnn_{slug}_compressed.ckpt")];
    let mut csv = String::from("iteration,kept_dims,hidden,param_count,val_accuracy,accepted\n");
    for it in &summary.report.iterations {
        let kept: Vec<String> = it.kept_dims.iter().map(|d| d.to_string()).collect();
        let hidden: Vec<String> = it.hidden.iter().map(|h| h.to_string()).collect();
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            it.iteration,
            kept.join(" "),
            hidden.join(" "),
            it.param_count,
            it.val_accuracy,
            it.accepted
        )
        .unwrap();
    }
    write_json(&ctx.path(&files[0]), &summary)?;
    write_file(&ctx.path(&files[1]), &csv)?;
    save_model(&ctx.path(&files[2]), &compressed.to_checkpoint())?;

    let fin = summary.report.final_state();
    let metrics = BTreeMap::from([
        ("baseline_val_accuracy".to_string(), summary.report.baseline_accuracy),
        ("final_val_accuracy".to_string(), fin.val_accuracy),
        ("baseline_test_accuracy".to_string(), summary.baseline_test_accuracy),
        ("compressed_test_accuracy".to_string(), summary.compressed_test_accuracy),
        ("param_count.baseline".to_string(), summary.report.iterations[0].param_count as f64),
        ("param_count.final".to_string(), fin.param_count as f64),
        ("kept_features".to_string(), fin.kept_dims.len() as f64),
    ]);
    ctx.record(
        Stage::Compress,
        Some(mode),
        StageRecord {
            artifacts: artifacts(&[("report", &files[0]), ("iterations", &files[1]), ("bnn", &files[2])]),
            metrics,
        },
    )?;
    Ok(summary)
}

// ------------------------------------------------------------------ report

/// One `metric,mode,variant,value` row per comparison, from whichever
/// evaluation, explanation and compression artifacts exist.
pub fn report_stage(ctx: &RunContext) -> CliResult<String> {
    let m = ctx.manifest()?;
    let mut rows: Vec<(String, String, String, f64)> = Vec::new();
    let mut push = |metric: &str, mode: FrameworkMode, variant: &str, v: Option<f64>| {
        if let Some(v) = v {
            rows.push((metric.to_string(), mode.to_string(), variant.to_string(), v));
        }
    };
    let mut found = false;
    for mode in FrameworkMode::ALL {
        if m.stages.contains_key(&Stage::Evaluate.key(Some(mode))) {
            let e: EvaluationSummary = read_json(&ctx.artifact(Stage::Evaluate, Some(mode), "summary")?)?;
            found = true;
            push("accuracy", mode, "full", Some(e.accuracy));
            push("mean_ood_score_known", mode, "full", Some(e.mean_ood_score_known));
            push("mean_ood_score_unknown", mode, "full", e.mean_ood_score_unknown);
            push("ood_auroc", mode, "full", e.ood_auroc);
            push("rejected_unknown", mode, "full", e.rejected_unknown);
        }
        if m.stages.contains_key(&Stage::Compress.key(Some(mode))) {
            let c: CompressionSummary = read_json(&ctx.artifact(Stage::Compress, Some(mode), "report")?)?;
            push("accuracy", mode, "compressed", Some(c.compressed_test_accuracy));
            push("param_count", mode, "full", Some(c.report.iterations[0].param_count as f64));
            push("param_count", mode, "compressed", Some(c.report.final_state().param_count as f64));
            push("kept_features", mode, "compressed", Some(c.report.final_state().kept_dims.len() as f64));
        }
        if m.stages.contains_key(&Stage::Explain.key(Some(mode))) {
            let x: ExplainSummary = read_json(&ctx.artifact(Stage::Explain, Some(mode), "summary")?)?;
            for s in &x.similarity {
                if s.mode == mode {
                    push("similarity_argmax", mode, "full", Some(s.argmax() as f64));
                    push("similarity_max", mode, "full", s.r.get(s.argmax()).copied());
                }
            }
        }
    }
    if !found {
        return Err(CliError::MissingArtifact {
            stage: "evaluate --mode <sota|tracked>".into(),
            path: ctx.path("eval_<mode>.json"),
        });
    }
    let mut csv = String::from("metric,mode,variant,value\n");
    for (metric, mode, variant, v) in &rows {
        writeln!(csv, "{metric},{mode},{variant},{v}").unwrap();
    }
    write_file(&ctx.path("report.csv"), &csv)?;
    ctx.record(
        Stage::Report,
        None,
        StageRecord {
            artifacts: artifacts(&[("report", "report.csv")]),
            metrics: BTreeMap::from([("rows".to_string(), rows.len() as f64)]),
        },
    )?;
    Ok(csv)
}

/// Every stage in order: both modes are trained and evaluated, then the
/// `mode` classifier is explained and compressed.
pub fn run_all(ctx: &RunContext, mode: FrameworkMode) -> CliResult<String> {
    generate(ctx)?;
    train_encoder_stage(ctx)?;
    for m in FrameworkMode::ALL {
        train_bnn_stage(ctx, m)?;
        evaluate_stage(ctx, m, ctx.config.evaluation.with_unknown)?;
    }
    explain_stage(ctx, mode)?;
    compress_stage(ctx, mode)?;
    report_stage(ctx)
}

//! Subcommand entry points for the `spooftrace` binary.
//!
//! Every command is deterministic under fixed seeds: reports carry no
//! timestamps, iteration follows manifest order, and floats print through
//! the shortest round-trip form, so a rerun writes byte-identical files.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use spooftrace_core::attention::{detection_score, BONAFIDE_CLASS, SPOOF_CLASS};
use spooftrace_core::audio::write_wav;
use spooftrace_core::checkpoint::Checkpoint;
use spooftrace_core::config::RunConfig;
use spooftrace_core::corpus::{build_manifest, read_manifest, write_manifest, Manifest, Split, N_APIS};
use spooftrace_core::detector::detector_logits;
use spooftrace_core::frontend::{EncoderParams, FeatureCache, FrontendConfig};
use spooftrace_core::metrics::{
    compute_act_dcf, compute_eer, compute_min_dcf, macro_f1, ConfusionTable, MetricSubset,
    ScoreRecord, ScoreSet, TrialLabel, UNSEEN,
};
use spooftrace_core::scores::{read_score_file, write_decisions, write_score_file, DecisionRecord};
use spooftrace_core::tensor::Tensor;
use spooftrace_core::tracer::{
    calibrate_threshold, open_set_decide, pooled_embedding, trace_logits, CalibrationPoint,
    TraceDecision, TracerParams,
};
use spooftrace_core::train::{train_detector, train_tracer, DetExample, TraceExample, TrainReport};
use spooftrace_core::{Error, Result};

/// Writes to stdout, exiting quietly if the reader closed the pipe.
///
/// Every command finishes its file artifacts before printing anything, so a
/// truncated stream (`spooftrace ... | head`) is an ordinary early exit, not
/// a failure. A bare `println!` would panic on EPIPE instead.
fn emit(args: std::fmt::Arguments) {
    use std::io::Write;
    if std::io::stdout().write_fmt(args).is_err() {
        std::process::exit(0);
    }
}

macro_rules! say {
    ($($arg:tt)*) => { emit(format_args!("{}\n", format_args!($($arg)*))) };
}

/// Anti-spoofing detector and API tracer over a synthetic speech corpus.
#[derive(Debug, Parser)]
#[command(name = "spooftrace", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Build a corpus manifest, optionally rendering the audio to disk.
    GenCorpus(GenCorpusArgs),
    /// Train the spoofing detector; writes checkpoints and a report.
    Train(TrainArgs),
    /// Score one manifest split with a detector checkpoint.
    Score(ScoreArgs),
    /// Compute detection metrics from a score file.
    Eval(EvalArgs),
    /// Train the source tracer, calibrate its threshold, decide the eval split.
    Trace(TraceArgs),
    /// Histogram detection scores per label as CSV.
    Density(DensityArgs),
}

/// Config file plus key overrides, shared by the commands that read one.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file with [section] headers; defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one entry as section.key=value. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        if let Some(p) = &self.config {
            rc.merge_file(p)?;
        }
        for assignment in &self.set {
            rc.apply_override(assignment)?;
        }
        rc.validate()?;
        Ok(rc)
    }
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Corpus seed; every utterance seed derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spoof utterances per API.
    #[arg(long, default_value_t = 10)]
    pub n_per_api: usize,
    /// Bonafide utterances; 0 matches the spoof total for a balanced corpus.
    #[arg(long, default_value_t = 0)]
    pub n_bonafide: usize,
    /// Manifest path to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Render every utterance as a wav file under this directory.
    #[arg(long, value_name = "DIR")]
    pub audio_dir: Option<PathBuf>,
    /// Sample rate for rendered audio.
    #[arg(long, default_value_t = 16000)]
    pub sample_rate: u32,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory for checkpoints and the training report.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Detector checkpoint; model geometry is read from it.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Corpus manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Split to score: train, dev, or eval.
    #[arg(long, value_parser = parse_split)]
    pub split: Split,
    /// Score file to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Feature cache directory; falls back to the cache env var.
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score file produced by the score command.
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// Manifest sidecar; enables the seen/unseen API breakdown.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Report path; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Corpus manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory for the tracer checkpoint, decisions, embeddings, and report.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    /// Score file produced by the score command.
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// Number of histogram bins.
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    /// CSV path to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenCorpus(a) => cmd_gen_corpus(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Score(a) => cmd_score(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Trace(a) => cmd_trace(&a),
        Cmd::Density(a) => cmd_density(&a),
    }
}

/// Cache precedence: explicit config path, then the env var, else memory only.
fn cache_from_config(rc: &RunConfig) -> FeatureCache {
    if rc.paths.cache_dir.is_empty() {
        FeatureCache::from_env()
    } else {
        FeatureCache::new(Some(PathBuf::from(&rc.paths.cache_dir)))
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, body)?;
    Ok(())
}

/// Encode one manifest record through the cache, rendering audio on demand.
fn encode_record(
    m: &Manifest,
    r: &spooftrace_core::corpus::ManifestRecord,
    fe: &FrontendConfig,
    enc: &EncoderParams,
    cache: &FeatureCache,
) -> Result<spooftrace_core::frontend::FeatureStack> {
    cache.get_or_encode(&r.utt_id, fe, enc, || m.render(r, fe.sample_rate))
}

pub fn cmd_gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let n_bonafide = if a.n_bonafide == 0 { N_APIS * a.n_per_api } else { a.n_bonafide };
    let m = build_manifest(a.seed, a.n_per_api, n_bonafide)?;
    write_manifest(&a.out, &m)?;
    if let Some(dir) = &a.audio_dir {
        fs::create_dir_all(dir)?;
        for r in &m.records {
            let w = m.render(r, a.sample_rate)?;
            write_wav(&dir.join(format!("{}.wav", r.utt_id)), &w)?;
        }
    }
    for split in Split::ALL {
        let n = m.split(split).count();
        let apis = m.apis_in_split(split).len();
        say!("{}: {} utterances, {} spoof apis", split.as_str(), n, apis);
    }
    say!("manifest: {}", a.out.display());
    Ok(())
}

fn detector_examples(
    m: &Manifest,
    split: Split,
    fe: &FrontendConfig,
    enc: &EncoderParams,
    cache: &FeatureCache,
) -> Result<Vec<DetExample>> {
    let mut out = Vec::new();
    for r in m.split(split) {
        let stack = encode_record(m, r, fe, enc, cache)?;
        let label = match r.label {
            TrialLabel::Bonafide => BONAFIDE_CLASS,
            TrialLabel::Spoof => SPOOF_CLASS,
        };
        out.push(DetExample { features: stack.last().clone(), label });
    }
    Ok(out)
}

/// Training history as aligned text rows; the metric column is command specific.
fn history_block(report_metric: &str, history: &[spooftrace_core::train::ProgressPoint]) -> String {
    let mut s = format!("step\tbatch_ce\t{report_metric}\n");
    for p in history {
        match p.dev_metric {
            Some(m) => s.push_str(&format!("{}\t{}\t{}\n", p.step, p.batch_loss, m)),
            None => s.push_str(&format!("{}\t{}\t-\n", p.step, p.batch_loss)),
        }
    }
    s
}

fn opt_metric(m: Option<f64>) -> String {
    match m {
        Some(v) => format!("{v}"),
        None => "-".to_string(),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let rc = a.config.resolve()?;
    let m = read_manifest(&a.manifest)?;
    let fe = rc.frontend_config();
    let enc = EncoderParams::from_seed(&fe)?;
    let cache = cache_from_config(&rc);

    let train = detector_examples(&m, Split::Train, &fe, &enc, &cache)?;
    let dev = detector_examples(&m, Split::Dev, &fe, &enc, &cache)?;
    if train.is_empty() {
        return Err(Error::invalid("train", "manifest has no train records"));
    }

    let cfg = rc.detector_config()?;
    let tc = rc.detector_train_config()?;
    let mut params = spooftrace_core::detector::DetectorParams::init(&cfg, rc.model.model_seed)?;
    let report = train_detector(&mut params, &cfg, &train, &dev, &tc)?;

    fs::create_dir_all(&a.out_dir)?;
    let best_path = a.out_dir.join("detector_best.json");
    let final_path = a.out_dir.join("detector_final.json");
    Checkpoint::for_detector(&report.best_params, &cfg, &fe, None, report.best_step as u64, tc.seed)
        .save(&best_path)?;
    Checkpoint::for_detector(&params, &cfg, &fe, Some(&report.optimizer), report.steps as u64, tc.seed)
        .save(&final_path)?;

    let body = format!(
        "# train report\n\
         n_train = {}\n\
         n_dev = {}\n\
         steps = {}\n\
         final_batch_loss = {}\n\
         final_mean_loss = {}\n\
         best_dev_eer = {}\n\
         best_step = {}\n\
         \n# history\n{}\
         \n# config\n{}",
        train.len(),
        dev.len(),
        report.steps,
        report.final_batch_loss,
        report.final_mean_loss,
        opt_metric(report.best_dev),
        report.best_step,
        history_block("dev_eer", &report.history),
        rc.render(),
    );
    let report_path = a.out_dir.join("train_report.txt");
    write_text(&report_path, &body)?;

    say!("steps: {}", report.steps);
    say!("final mean ce: {}", report.final_mean_loss);
    say!("best dev eer: {}", opt_metric(report.best_dev));
    say!("wrote: {}", best_path.display());
    say!("wrote: {}", final_path.display());
    say!("wrote: {}", report_path.display());
    Ok(())
}

pub fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (params, cfg) = ckpt.detector_params()?;
    let fe = ckpt.frontend.clone();
    let enc = ckpt.encoder()?;
    let cache = FeatureCache::new(
        a.cache_dir.clone().or_else(|| std::env::var_os(spooftrace_core::frontend::CACHE_ENV).map(PathBuf::from)),
    );

    let m = read_manifest(&a.manifest)?;
    let mut records = Vec::new();
    for r in m.split(a.split) {
        let stack = encode_record(&m, r, &fe, &enc, &cache)?;
        let logits = detector_logits(stack.last(), &params, &cfg)?;
        records.push(ScoreRecord {
            utt_id: r.utt_id.clone(),
            score: detection_score(&logits),
            label: r.label,
        });
    }
    if records.is_empty() {
        return Err(Error::invalid(
            "score",
            format!("manifest has no {} records", a.split.as_str()),
        ));
    }
    let n = records.len();
    let set = ScoreSet::new(records)?;
    write_score_file(&a.out, &set)?;
    say!("scored {} {} utterances", n, a.split.as_str());
    say!("wrote: {}", a.out.display());
    Ok(())
}

/// Detection metrics for one score subset, or a skip note when single sided.
fn metric_block(set: &ScoreSet, costs: &spooftrace_core::metrics::DcfCosts) -> Result<String> {
    let n_bona = set.records.iter().filter(|r| r.label == TrialLabel::Bonafide).count();
    let n_spoof = set.records.len() - n_bona;
    let mut s = format!(
        "n_trials = {}\nn_bonafide = {}\nn_spoof = {}\n",
        set.records.len(),
        n_bona,
        n_spoof
    );
    if n_bona == 0 || n_spoof == 0 {
        s.push_str("metrics skipped: only one label present\n");
        return Ok(s);
    }
    let (eer, eer_t) = compute_eer(set)?;
    let (min_dcf, min_t) = compute_min_dcf(set, costs)?;
    let act_dcf = compute_act_dcf(set, costs)?;
    s.push_str(&format!(
        "eer = {}\neer_threshold = {}\nmin_dcf = {}\nmin_dcf_threshold = {}\nact_dcf = {}\nbayes_threshold = {}\n",
        eer, eer_t, min_dcf, min_t, act_dcf, costs.bayes_threshold()
    ));
    Ok(s)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let rc = a.config.resolve()?;
    let set = read_score_file(&a.scores)?;
    let costs = rc.dcf;

    let mut body = String::from("# eval report\n");
    body.push_str(&metric_block(&set, &costs)?);

    if let Some(mp) = &a.manifest {
        let m = read_manifest(mp)?;
        let seen: std::collections::HashSet<String> = m.apis_in_split(Split::Train).into_iter().collect();
        let by_id: HashMap<&str, &spooftrace_core::corpus::ManifestRecord> =
            m.records.iter().map(|r| (r.utt_id.as_str(), r)).collect();
        let mut seen_side = Vec::new();
        let mut unseen_side = Vec::new();
        for rec in &set.records {
            let mr = by_id.get(rec.utt_id.as_str()).ok_or_else(|| {
                Error::invalid("eval", format!("utt {} not in manifest", rec.utt_id))
            })?;
            match rec.label {
                // Bonafide trials anchor both subsets.
                TrialLabel::Bonafide => {
                    seen_side.push(rec.clone());
                    unseen_side.push(rec.clone());
                }
                TrialLabel::Spoof => {
                    if seen.contains(&mr.api_id) {
                        seen_side.push(rec.clone());
                    } else {
                        unseen_side.push(rec.clone());
                    }
                }
            }
        }
        body.push_str("\n# seen-api subset\n");
        body.push_str(&metric_block(&ScoreSet::new(seen_side)?, &costs)?);
        body.push_str("\n# unseen-api subset\n");
        body.push_str(&metric_block(&ScoreSet::new(unseen_side)?, &costs)?);
    }

    body.push_str(&format!("\n# config\n{}", rc.render()));
    match &a.out {
        Some(p) => {
            write_text(p, &body)?;
            say!("wrote: {}", p.display());
        }
        None => emit(format_args!("{body}")),
    }
    Ok(())
}

/// One tracer-relevant utterance with its logits under the trained model.
struct TracePoint {
    utt_id: String,
    api_id: String,
    /// The api id when seen, otherwise [`UNSEEN`].
    true_class: String,
    logits: Tensor,
}

fn trace_points(
    m: &Manifest,
    split: Split,
    fe: &FrontendConfig,
    enc: &EncoderParams,
    cache: &FeatureCache,
    params: &TracerParams,
) -> Result<Vec<TracePoint>> {
    let mut out = Vec::new();
    for r in m.split(split) {
        if r.label != TrialLabel::Spoof {
            continue;
        }
        let stack = encode_record(m, r, fe, enc, cache)?;
        let logits = trace_logits(&stack.layers, params)?;
        let true_class = if params.class_index(&r.api_id).is_some() {
            r.api_id.clone()
        } else {
            UNSEEN.to_string()
        };
        out.push(TracePoint { utt_id: r.utt_id.clone(), api_id: r.api_id.clone(), true_class, logits });
    }
    Ok(out)
}

/// Per-class and macro precision/recall/F1 rows over decided points.
fn f1_block(pairs: &[(String, String)], classes: &[String]) -> Result<String> {
    let mut all = classes.to_vec();
    all.push(UNSEEN.to_string());
    let mut ct = ConfusionTable::new(all)?;
    for (true_class, predicted) in pairs {
        ct.record(true_class, predicted)?;
    }
    let mut s = String::from("class\tsupport\tpredicted\tprecision\trecall\tf1\n");
    for row in ct.per_class() {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            row.class, row.support, row.predicted, row.precision, row.recall, row.f1
        ));
    }
    for (name, subset) in [
        ("macro_seen", MetricSubset::Seen),
        ("macro_unseen", MetricSubset::Unseen),
        ("macro_overall", MetricSubset::Overall),
    ] {
        let (p, r, f1) = macro_f1(&ct, subset)?;
        s.push_str(&format!("{name}\tprecision = {p}\trecall = {r}\tf1 = {f1}\n"));
    }
    Ok(s)
}

fn decide(p: &TracePoint, threshold: f64, classes: &[String]) -> Result<TraceDecision> {
    open_set_decide(&p.logits, threshold, classes)
}

pub fn cmd_trace(a: &TraceArgs) -> Result<()> {
    let rc = a.config.resolve()?;
    let m = read_manifest(&a.manifest)?;
    let fe = rc.frontend_config();
    let enc = EncoderParams::from_seed(&fe)?;
    let cache = cache_from_config(&rc);

    let classes = m.apis_in_split(Split::Train);
    if classes.is_empty() {
        return Err(Error::invalid("trace", "manifest has no train-split spoof records"));
    }
    let cfg = rc.tracer_config()?;
    let mut params = TracerParams::init(&cfg, classes.clone(), rc.model.model_seed)?;

    // Training examples: train-split spoof, labeled by class index.
    let mut train = Vec::new();
    for r in m.split(Split::Train) {
        if r.label != TrialLabel::Spoof {
            continue;
        }
        let class = params
            .class_index(&r.api_id)
            .ok_or_else(|| Error::invalid("trace", format!("api {} not in class list", r.api_id)))?;
        let stack = encode_record(&m, r, &fe, &enc, &cache)?;
        out_of_line_check(&stack.layers, cfg.layers)?;
        train.push(TraceExample { layers: stack.layers, class });
    }

    // Dev accuracy tracks seen APIs only; unseen dev APIs calibrate the threshold.
    let mut dev_seen = Vec::new();
    for r in m.split(Split::Dev) {
        if r.label != TrialLabel::Spoof {
            continue;
        }
        if let Some(class) = params.class_index(&r.api_id) {
            let stack = encode_record(&m, r, &fe, &enc, &cache)?;
            dev_seen.push(TraceExample { layers: stack.layers, class });
        }
    }

    let tc = rc.tracer_train_config()?;
    let report: TrainReport<TracerParams> = train_tracer(&mut params, &train, &dev_seen, &tc)?;
    let best = &report.best_params;

    // Calibration grid over all dev spoof, seen and unseen alike.
    let dev_points = trace_points(&m, Split::Dev, &fe, &enc, &cache, best)?;
    let cal: Vec<CalibrationPoint> = dev_points
        .iter()
        .map(|p| {
            let d = decide(p, 0.0, &best.classes)?;
            Ok(CalibrationPoint { probs: d.probs, true_class: p.true_class.clone() })
        })
        .collect::<Result<_>>()?;
    let threshold = calibrate_threshold(&cal, &best.classes)?;

    // Eval decisions under the calibrated threshold.
    let eval_points = trace_points(&m, Split::Eval, &fe, &enc, &cache, best)?;
    let mut decisions = Vec::new();
    for p in &eval_points {
        let d = decide(p, threshold, &best.classes)?;
        decisions.push(DecisionRecord {
            utt_id: p.utt_id.clone(),
            true_api: p.api_id.clone(),
            pred_api: d.predicted,
            max_prob: d.max_prob,
        });
    }

    fs::create_dir_all(&a.out_dir)?;
    let decisions_path = a.out_dir.join("decisions.tsv");
    write_decisions(&decisions_path, &decisions)?;

    // Pooled embeddings of the eval spoof utterances, one CSV row each.
    let mut csv = String::from("utt_id,api_id");
    for i in 0..cfg.channels {
        csv.push_str(&format!(",e{i}"));
    }
    csv.push('\n');
    for r in m.split(Split::Eval) {
        if r.label != TrialLabel::Spoof {
            continue;
        }
        let stack = encode_record(&m, r, &fe, &enc, &cache)?;
        let e = pooled_embedding(&stack.layers, best)?;
        csv.push_str(&format!("{},{}", r.utt_id, r.api_id));
        for v in e.data() {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let embeddings_path = a.out_dir.join("embeddings.csv");
    write_text(&embeddings_path, &csv)?;

    let ckpt_path = a.out_dir.join("tracer.json");
    Checkpoint::for_tracer(best, &cfg, &fe, None, report.best_step as u64, tc.seed, Some(threshold))
        .save(&ckpt_path)?;

    let dev_pairs: Vec<(String, String)> = dev_points
        .iter()
        .map(|p| Ok((p.true_class.clone(), decide(p, threshold, &best.classes)?.predicted)))
        .collect::<Result<_>>()?;
    let eval_pairs: Vec<(String, String)> = eval_points
        .iter()
        .zip(&decisions)
        .map(|(p, d)| (p.true_class.clone(), d.pred_api.clone()))
        .collect();

    let body = format!(
        "# trace report\n\
         classes = {}\n\
         n_train = {}\n\
         n_dev_seen = {}\n\
         n_dev_total = {}\n\
         n_eval = {}\n\
         steps = {}\n\
         final_batch_loss = {}\n\
         final_mean_loss = {}\n\
         best_dev_accuracy = {}\n\
         best_step = {}\n\
         threshold = {}\n\
         \n# dev decisions at calibrated threshold\n{}\
         \n# eval decisions at calibrated threshold\n{}\
         \n# history\n{}\
         \n# config\n{}",
        classes.join(" "),
        train.len(),
        dev_seen.len(),
        dev_points.len(),
        eval_points.len(),
        report.steps,
        report.final_batch_loss,
        report.final_mean_loss,
        opt_metric(report.best_dev),
        report.best_step,
        threshold,
        f1_block(&dev_pairs, &best.classes)?,
        f1_block(&eval_pairs, &best.classes)?,
        history_block("dev_acc", &report.history),
        rc.render(),
    );
    let report_path = a.out_dir.join("trace_report.txt");
    write_text(&report_path, &body)?;

    say!("classes: {}", classes.len());
    say!("steps: {}", report.steps);
    say!("best dev accuracy: {}", opt_metric(report.best_dev));
    say!("threshold: {threshold}");
    say!("wrote: {}", decisions_path.display());
    say!("wrote: {}", embeddings_path.display());
    say!("wrote: {}", ckpt_path.display());
    say!("wrote: {}", report_path.display());
    Ok(())
}

/// The tracer pools a fixed number of layers; a mismatched stack is a config error.
fn out_of_line_check(layers: &[Tensor], expect: usize) -> Result<()> {
    if layers.len() != expect {
        return Err(Error::invalid(
            "trace",
            format!("stack has {} layers, tracer expects {}", layers.len(), expect),
        ));
    }
    Ok(())
}

pub fn cmd_density(a: &DensityArgs) -> Result<()> {
    if a.bins == 0 {
        return Err(Error::invalid("density", "bins must be positive"));
    }
    let set = read_score_file(&a.scores)?;
    if set.records.is_empty() {
        return Err(Error::invalid("density", "empty score file"));
    }
    let lo = set.records.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    let mut hi = set.records.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        // Degenerate range: give the histogram unit width so densities stay finite.
        hi = lo + 1.0;
    }
    let width = (hi - lo) / a.bins as f64;
    let mut bona = vec![0usize; a.bins];
    let mut spoof = vec![0usize; a.bins];
    let n_bona = set.records.iter().filter(|r| r.label == TrialLabel::Bonafide).count();
    let n_spoof = set.records.len() - n_bona;
    for r in &set.records {
        // The max score lands exactly on the right edge; clamp it into the last bin.
        let b = (((r.score - lo) / width) as usize).min(a.bins - 1);
        match r.label {
            TrialLabel::Bonafide => bona[b] += 1,
            TrialLabel::Spoof => spoof[b] += 1,
        }
    }
    let density = |count: usize, n: usize| {
        if n == 0 {
            0.0
        } else {
            count as f64 / (n as f64 * width)
        }
    };
    let mut csv = String::from("bin_lo,bin_hi,bonafide,spoof\n");
    for i in 0..a.bins {
        let b_lo = lo + i as f64 * width;
        let b_hi = lo + (i + 1) as f64 * width;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            b_lo,
            b_hi,
            density(bona[i], n_bona),
            density(spoof[i], n_spoof)
        ));
    }
    write_text(&a.out, &csv)?;
    say!("binned {} scores into {} bins", set.records.len(), a.bins);
    say!("wrote: {}", a.out.display());
    Ok(())
}

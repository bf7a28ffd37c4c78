//! The CLI commands. Each reads its inputs from earlier steps of the same run
//! root and publishes one [`RunRecord`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;

use super::config::ExperimentConfig;
use super::pipeline::{
    answer_cache, evaluate_generator, generator_samples, report_corpus, train_probes, with_image_mode, CueSetting, CueSpec, EvalOutput, EvalRequest,
    FeatureBank,
};
use super::run::{RunRecord, RunRoot, Step};
use crate::backbone::Backbone;
use crate::discriminator::{evaluate_probe, LinearProbe};
use crate::error::{Error, Result};
use crate::evalproto::metrics::MetricsReport;
use crate::generator::{pretrain_decoder, train_stage1, train_stage2, Generator, Vocabulary};
use crate::questions::QuestionSet;
use crate::reliance::{reliance_report, summary_csv, trace_reliance, AttentionTrace};
use crate::synthdata::{make_dataset, Dataset};

pub const GEN_DATA: &str = "gen-data";
pub const TRAIN_PROBE: &str = "train-probe";
pub const PRETRAIN_DECODER: &str = "pretrain-decoder";
pub const TRAIN_VLM: &str = "train-vlm";
pub const EVALUATE: &str = "evaluate";
pub const RELIANCE: &str = "reliance";
pub const ABLATE: &str = "ablate";
pub const REPORT_TABLES: &str = "report-tables";

/// Which trained generator a command refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSelector {
    pub dropout: f64,
    pub train_cue: CueSetting,
    pub no_image: bool,
}

impl ModelSelector {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self { dropout: cfg.dropout, train_cue: cfg.train_cue_setting()?, no_image: cfg.no_image })
    }

    /// Directory name, e.g. `p0.3-gt` or `p0-gt-noimage`.
    pub fn variant(&self) -> String {
        format!("p{}-{}{}", self.dropout, self.train_cue.key(), if self.no_image { "-noimage" } else { "" })
    }
}

/// Upstream artifacts shared by most commands.
struct Inputs {
    train: Dataset,
    eval: Dataset,
    train_bank: FeatureBank,
    eval_bank: FeatureBank,
}

fn load_inputs(root: &RunRoot, step: &mut Step) -> Result<Inputs> {
    let mut need = |rel: &str| -> Result<std::path::PathBuf> {
        let p = root.require(rel, GEN_DATA)?;
        step.input(rel);
        Ok(p)
    };
    Ok(Inputs {
        train: Dataset::read(&need("gen-data/train")?)?,
        eval: Dataset::read(&need("gen-data/eval")?)?,
        train_bank: FeatureBank::read(&need("gen-data/features-train.bin")?)?,
        eval_bank: FeatureBank::read(&need("gen-data/features-eval.bin")?)?,
    })
}

fn probe_file(qs: &QuestionSet) -> String {
    format!("probe-{}.ckpt", qs.id.label().to_ascii_lowercase())
}

/// Cue spec for the configured cue sets, with probes attached when a setting needs them.
fn cue_spec(cfg: &ExperimentConfig, root: &RunRoot, step: &mut Step, settings: &[CueSetting]) -> Result<CueSpec> {
    let mut spec = CueSpec::new(cfg.cue_question_sets()?, cfg.cue_seed());
    if settings.contains(&CueSetting::Probe) {
        for qs in spec.sets.clone() {
            let rel = format!("{TRAIN_PROBE}/{}", probe_file(&qs));
            let probe = LinearProbe::read(&root.require(&rel, TRAIN_PROBE)?)?;
            if probe.qs != qs {
                return Err(Error::Config(format!("{rel} was trained for a different question set")));
            }
            step.input(rel);
            spec.probes.push(probe);
        }
    }
    Ok(spec)
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// One JSON object per question followed by one macro row, per question set.
pub fn metrics_jsonl(reports: &[MetricsReport]) -> Result<String> {
    let mut rows = Vec::new();
    for m in reports {
        for r in &m.rows {
            rows.push(json!({
                "question_set": m.qs.label(), "question": r.question, "precision": r.precision, "recall": r.recall,
                "f1": r.f1, "auroc": r.auroc, "support": r.support,
            }));
        }
        rows.push(json!({
            "question_set": m.qs.label(), "question": "macro", "precision": m.macro_precision, "recall": m.macro_recall,
            "f1": m.macro_f1, "auroc": m.macro_auroc, "samples": m.samples, "bleu_mean": m.bleu_mean,
        }));
    }
    jsonl(&rows)
}

const PER_QUESTION_HEADER: &str = "question_set,question,precision,recall,f1,support";

fn per_question_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{PER_QUESTION_HEADER}\n");
    for m in reports {
        for r in &m.rows {
            let _ = writeln!(out, "{},\"{}\",{:.6},{:.6},{:.6},{}", m.qs.label(), r.question, r.precision, r.recall, r.f1, r.support);
        }
    }
    out
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let root = RunRoot::open(cfg)?;
    let mut step = root.begin(GEN_DATA, None)?;
    let dcfg = cfg.dataset_config();
    let train = make_dataset(cfg.data_train_size, cfg.train_seed(), &dcfg)?;
    let eval = make_dataset(cfg.data_eval_size, cfg.eval_seed(), &dcfg)?;
    train.write_with(&step.path("train"), false)?;
    eval.write_with(&step.path("eval"), false)?;

    let mut backbone = Backbone::new(cfg.backbone_config())?;
    let mut pretrain_losses = Vec::new();
    if cfg.data_pretrain_size > 0 && cfg.backbone_pretrain_epochs > 0 {
        let pre = make_dataset(cfg.data_pretrain_size, cfg.pretrain_seed(), &dcfg)?;
        pre.write_with(&step.path("pretrain"), false)?;
        log::info!("pretraining the backbone on {} phantoms", pre.len());
        pretrain_losses = backbone.pretrain(&pre, &cfg.backbone_pretrain_config())?;
        step.write("backbone_pretrain_losses.json", serde_json::to_vec(&pretrain_losses)?)?;
    }
    backbone.write(&step.path("backbone.ckpt"))?;
    log::info!("extracting features");
    FeatureBank::extract(&backbone, &train)?.write(&step.path("features-train.bin"))?;
    FeatureBank::extract(&backbone, &eval)?.write(&step.path("features-eval.bin"))?;
    step.finish(json!({
        "train_size": train.len(),
        "eval_size": eval.len(),
        "pretrain_size": cfg.data_pretrain_size,
        "backbone_pretrain_final_loss": pretrain_losses.last(),
    }))
}

pub fn train_probe(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let root = RunRoot::open(cfg)?;
    let mut step = root.begin(TRAIN_PROBE, None)?;
    let inputs = load_inputs(&root, &mut step)?;
    let sets = ExperimentConfig::probe_question_sets();
    let trained = train_probes(&inputs.train_bank, &inputs.train, &sets, &cfg.probe_config())?;
    let mut reports = Vec::new();
    let mut summary = serde_json::Map::new();
    for (qs, t) in sets.iter().zip(&trained) {
        t.probe.write(&step.path(&probe_file(qs)))?;
        let labels = inputs.eval.samples.iter().map(|s| qs.project(s.gt.labels(qs.id))).collect::<Result<Vec<_>>>()?;
        let m = evaluate_probe(&t.probe, &inputs.eval_bank.embeddings, &labels)?;
        summary.insert(format!("{}_macro_f1", qs.id.label().to_ascii_lowercase()), json!(m.macro_f1));
        reports.push(m);
    }
    step.write("metrics.jsonl", metrics_jsonl(&reports)?)?;
    step.write("per_question.csv", per_question_csv(&reports))?;
    step.finish(serde_json::Value::Object(summary))
}

pub fn pretrain_decoder_cmd(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let root = RunRoot::open(cfg)?;
    let mut step = root.begin(PRETRAIN_DECODER, None)?;
    let inputs = load_inputs(&root, &mut step)?;
    let vocab = Vocabulary::closed();
    let mut gen = Generator::new(ExperimentConfig { no_image: false, ..cfg.clone() }.generator_config(), vocab.clone())?;
    let corpus = report_corpus(&inputs.train, &vocab, None)?;
    let heldout = report_corpus(&inputs.eval, &vocab, Some(100))?;
    let rep = pretrain_decoder(&mut gen, &corpus, &heldout, &cfg.decoder_schedule(), cfg.decoder_max_perplexity)?;
    gen.write(&step.path("decoder.ckpt"))?;
    step.write("losses.json", serde_json::to_vec(&rep.losses)?)?;
    step.finish(json!({ "heldout_perplexity": rep.perplexity }))
}

fn load_pretrained(root: &RunRoot, step: &mut Step) -> Result<Generator> {
    let rel = format!("{PRETRAIN_DECODER}/decoder.ckpt");
    let g = Generator::read(&root.require(&rel, PRETRAIN_DECODER)?)?;
    step.input(rel);
    Ok(g)
}

/// Stage 1 for one prompt layout, shared by every dropout rate.
pub fn stage1_model(cfg: &ExperimentConfig, base: &Generator, train: &[crate::generator::GenSample], no_image: bool) -> Result<(Generator, Vec<f64>)> {
    let mut g = with_image_mode(base, no_image)?;
    let rep = train_stage1(&mut g, train, &cfg.stage1_schedule())?;
    Ok((g, rep.losses))
}

pub fn stage2_model(cfg: &ExperimentConfig, stage1: &Generator, train: &[crate::generator::GenSample], sel: &ModelSelector) -> Result<(Generator, Vec<f64>)> {
    let mut g = stage1.clone();
    let rep = train_stage2(&mut g, train, sel.dropout, sel.train_cue.source(), &cfg.stage2_schedule())?;
    Ok((g, rep.losses))
}

pub fn train_vlm(cfg: &ExperimentConfig, sel: &ModelSelector) -> Result<RunRecord> {
    let root = RunRoot::open(cfg)?;
    let variant = sel.variant();
    let mut step = root.begin(TRAIN_VLM, Some(&variant))?;
    let inputs = load_inputs(&root, &mut step)?;
    let base = load_pretrained(&root, &mut step)?;
    let cues = cue_spec(cfg, &root, &mut step, &[sel.train_cue])?;
    let bank = (!sel.no_image).then_some(&inputs.train_bank);
    let samples = generator_samples(&inputs.train, bank, &base.vocab, &cues, sel.train_cue)?;
    let (s1, l1) = stage1_model(cfg, &base, &samples, sel.no_image)?;
    s1.write(&step.path("stage1.ckpt"))?;
    let (s2, l2) = stage2_model(cfg, &s1, &samples, sel)?;
    s2.write(&step.path("generator.ckpt"))?;
    step.write("losses.json", serde_json::to_vec(&json!({ "stage1": l1, "stage2": l2 }))?)?;
    step.finish(json!({
        "dropout": sel.dropout,
        "train_cue_source": sel.train_cue.key(),
        "no_image": sel.no_image,
        "stage1_final_loss": l1.last(),
        "stage2_final_loss": l2.last(),
    }))
}

fn eval_request<'a>(cfg: &ExperimentConfig, inputs: &'a Inputs, cues: &'a CueSpec, sets: &'a [QuestionSet], sel: &ModelSelector, setting: CueSetting) -> EvalRequest<'a> {
    EvalRequest {
        data: &inputs.eval,
        bank: (!sel.no_image).then_some(&inputs.eval_bank),
        cues,
        setting,
        eval_sets: sets,
        max_len: cfg.eval_max_len,
        dropout_rate: sel.dropout,
        limit: cfg.eval_limit(),
    }
}

fn eval_summary(out: &EvalOutput) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    m.insert("test_cue_source".into(), json!(out.setting.key()));
    for r in &out.metrics {
        m.insert(format!("{}_macro_f1", r.qs.label().to_ascii_lowercase()), json!(r.macro_f1));
    }
    m.insert("bleu_mean".into(), json!(out.bleu_mean));
    m.insert("reliance".into(), json!(out.reliance));
    serde_json::Value::Object(m)
}

pub fn evaluate(cfg: &ExperimentConfig, sel: &ModelSelector, setting: CueSetting) -> Result<RunRecord> {
    let root = RunRoot::open(cfg)?;
    let variant = format!("{}/{}", sel.variant(), setting.key());
    let mut step = root.begin(EVALUATE, Some(&variant))?;
    let inputs = load_inputs(&root, &mut step)?;
    let rel = format!("{TRAIN_VLM}/{}/generator.ckpt", sel.variant());
    let gen = Generator::read(&root.require(&rel, TRAIN_VLM)?)?;
    step.input(rel);
    let cues = cue_spec(cfg, &root, &mut step, &[setting])?;
    let sets = ExperimentConfig::eval_question_sets();
    let mut cache = answer_cache(&sets);
    let mut out = evaluate_generator(&gen, &eval_request(cfg, &inputs, &cues, &sets, sel, setting), &mut cache)?;
    for (rec, trace) in out.records.iter_mut().zip(&out.traces) {
        let name = format!("traces/{}.trace", rec.id);
        trace.write(&step.path(&name))?;
        rec.trace_file = Some(name);
    }
    step.write("generations.jsonl", jsonl(&out.records)?)?;
    step.write("metrics.jsonl", metrics_jsonl(&out.metrics)?)?;
    step.write("per_question.csv", per_question_csv(&out.metrics))?;
    if let Some(h) = &out.hierarchy {
        step.write("hierarchy.json", serde_json::to_vec_pretty(h)?)?;
    }
    step.finish(eval_summary(&out))
}

pub fn reliance(cfg: &ExperimentConfig, sel: &ModelSelector, setting: CueSetting) -> Result<RunRecord> {
    let root = RunRoot::open(cfg)?;
    let variant = format!("{}/{}", sel.variant(), setting.key());
    let mut step = root.begin(RELIANCE, Some(&variant))?;
    let eval_dir = root.step_path(EVALUATE, Some(&variant));
    let gens_rel = format!("{EVALUATE}/{variant}/generations.jsonl");
    let gens = fs::read_to_string(root.require(&gens_rel, EVALUATE)?)?;
    step.input(gens_rel);
    let mut per_trace = String::from("id,S_text,S_image,m_text,m_image,steps\n");
    let mut traces = Vec::new();
    for line in gens.lines().filter(|l| !l.trim().is_empty()) {
        let rec: super::pipeline::GenerationRecord = serde_json::from_str(line)?;
        let file = rec.trace_file.ok_or_else(|| Error::Format(format!("generation {} has no trace file", rec.id)))?;
        let t = AttentionTrace::read(&eval_dir.join(&file))?;
        let r = trace_reliance(&t)?;
        let _ = writeln!(per_trace, "{},{:.9},{:.9},{:.9},{:.9},{}", rec.id, r.s_text, r.s_image, r.m_text, r.m_image, t.steps());
        traces.push(t);
    }
    let summary = reliance_report(&traces)?;
    step.write("per_trace.csv", per_trace)?;
    step.write("reliance.csv", summary_csv(&[(sel.variant(), summary.clone())]))?;
    step.finish(json!({ "setting": sel.variant(), "test_cue_source": setting.key(), "reliance": summary }))
}

/// Grid of training dropout rates × test cue settings, for each training cue source.
pub fn ablate(cfg: &ExperimentConfig, rates: &[f64], settings: &[CueSetting], train_cues: &[CueSetting], no_image: bool) -> Result<RunRecord> {
    let root = RunRoot::open(cfg)?;
    let mut step = root.begin(ABLATE, None)?;
    let inputs = load_inputs(&root, &mut step)?;
    let base = load_pretrained(&root, &mut step)?;
    let mut needed: Vec<CueSetting> = settings.to_vec();
    needed.extend_from_slice(train_cues);
    let cues = cue_spec(cfg, &root, &mut step, &needed)?;
    let sets = ExperimentConfig::eval_question_sets();
    let mut csv = String::from("train_cue_source,training_dropout,test_setting,label,qs1_macro_f1,qs2_macro_f1,qs3_macro_f1,bleu_mean,mean_S_text\n");
    let mut rows = Vec::new();
    let bank = (!no_image).then_some(&inputs.train_bank);
    for &train_cue in train_cues {
        let samples = generator_samples(&inputs.train, bank, &base.vocab, &cues, train_cue)?;
        let (s1, _) = stage1_model(cfg, &base, &samples, no_image)?;
        for &p in rates {
            let sel = ModelSelector { dropout: p, train_cue, no_image };
            log::info!("ablate: training {}", sel.variant());
            let (g, _) = stage2_model(cfg, &s1, &samples, &sel)?;
            g.write(&step.path(&format!("models/{}.ckpt", sel.variant())))?;
            for &setting in settings {
                let mut cache = answer_cache(&sets);
                let out = evaluate_generator(&g, &eval_request(cfg, &inputs, &cues, &sets, &sel, setting), &mut cache)?;
                let s_text = out.reliance.as_ref().map(|r| format!("{:.6}", r.mean_s_text)).unwrap_or_default();
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                    train_cue.key(),
                    p,
                    setting.key(),
                    setting.label(),
                    out.macro_f1(0),
                    out.macro_f1(1),
                    out.macro_f1(2),
                    out.bleu_mean,
                    s_text
                );
                let mut row = eval_summary(&out);
                row["train_cue_source"] = json!(train_cue.key());
                row["training_dropout"] = json!(p);
                rows.push(row);
            }
        }
    }
    step.write("ablation.csv", csv)?;
    step.write("ablation.jsonl", jsonl(&rows)?)?;
    step.finish(json!({ "rows": rows.len() }))
}

/// Subdirectories holding a finished record, two levels deep (`<variant>/<cue>`), sorted.
fn finished_variants(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for model in sorted_dirs(dir)? {
        for cue in sorted_dirs(&dir.join(&model))? {
            if dir.join(&model).join(&cue).join(super::run::RECORD_FILE).exists() {
                out.push((model.clone(), cue));
            }
        }
    }
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.ends_with(".partial"))
        .collect();
    names.sort();
    Ok(names)
}

fn macro_rows(path: &Path) -> Result<BTreeMap<String, serde_json::Value>> {
    let mut out = BTreeMap::new();
    for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["question"] == "macro" {
            out.insert(v["question_set"].as_str().unwrap_or_default().to_string(), v);
        }
    }
    Ok(out)
}

fn num(v: &serde_json::Value) -> String {
    v.as_f64().map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Joins finished records into table-shaped CSVs. Output depends only on file contents.
pub fn report_tables(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let root = RunRoot::open(cfg)?;
    let evals = finished_variants(&root.dir.join(EVALUATE))?;
    let has_probe = root.is_complete(TRAIN_PROBE, None);
    let has_ablate = root.is_complete(ABLATE, None);
    if evals.is_empty() && !has_probe && !has_ablate {
        return Err(Error::MissingArtifact { path: root.dir.join(EVALUATE).display().to_string(), producer: EVALUATE.into() });
    }
    let mut step = root.begin(REPORT_TABLES, None)?;

    let mut cue_quality = String::from("model,test_setting,label,qs1_macro_f1,qs2_macro_f1,qs3_macro_f1,bleu_mean\n");
    let mut collapse = String::from("model,test_setting,qs1_macro_precision,qs1_macro_recall,qs1_macro_f1\n");
    let mut per_question = format!("source,test_setting,{PER_QUESTION_HEADER}\n");
    for (model, cue) in &evals {
        let dir = root.step_path(EVALUATE, Some(&format!("{model}/{cue}")));
        step.input(format!("{EVALUATE}/{model}/{cue}"));
        let macros = macro_rows(&dir.join("metrics.jsonl"))?;
        let get = |qs: &str, k: &str| macros.get(qs).map(|v| num(&v[k])).unwrap_or_default();
        let label = CueSetting::parse(cue, cfg.noisy_flip_rate).map(|s| s.label()).unwrap_or_else(|_| cue.clone());
        let bleu = macros.get("QS1").map(|v| num(&v["bleu_mean"])).unwrap_or_default();
        let _ = writeln!(cue_quality, "{model},{cue},{label},{},{},{},{bleu}", get("QS1", "f1"), get("QS2", "f1"), get("QS3", "f1"));
        let _ = writeln!(collapse, "{model},{cue},{},{},{}", get("QS1", "precision"), get("QS1", "recall"), get("QS1", "f1"));
        for line in fs::read_to_string(dir.join("per_question.csv"))?.lines().skip(1) {
            let _ = writeln!(per_question, "{model},{cue},{line}");
        }
    }
    if has_probe {
        step.input(TRAIN_PROBE);
        for line in fs::read_to_string(root.step_path(TRAIN_PROBE, None).join("per_question.csv"))?.lines().skip(1) {
            let _ = writeln!(per_question, "linear-probe,,{line}");
        }
    }
    step.write("cue_quality.csv", cue_quality)?;
    step.write("collapse.csv", collapse)?;
    step.write("per_question_f1.csv", per_question)?;

    let rel = finished_variants(&root.dir.join(RELIANCE))?;
    let mut reliance_csv = String::from("model,test_setting,mean_S_text,std_S_text,n\n");
    for (model, cue) in &rel {
        step.input(format!("{RELIANCE}/{model}/{cue}"));
        let text = fs::read_to_string(root.step_path(RELIANCE, Some(&format!("{model}/{cue}"))).join("reliance.csv"))?;
        for line in text.lines().skip(1) {
            let rest = line.split_once(',').map(|(_, r)| r).unwrap_or(line);
            let _ = writeln!(reliance_csv, "{model},{cue},{rest}");
        }
    }
    step.write("reliance.csv", reliance_csv)?;

    if has_ablate {
        step.input(ABLATE);
        let text = fs::read(root.step_path(ABLATE, None).join("ablation.csv"))?;
        step.write("ablation.csv", text)?;
    }
    step.finish(json!({ "evaluations": evals.len(), "reliance_runs": rel.len(), "ablation": has_ablate }))
}

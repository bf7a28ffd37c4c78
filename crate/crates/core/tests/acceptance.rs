//! Acceptance suite. Each test checks one criterion and prints a single
//! `PASS`/`FAIL` line to stderr (bypassing the test harness capture).
//!
//! The trend criteria share one pretrained backbone and three seeded
//! generator runs, built lazily the first time any of them is needed.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcppd::backbone::{hierarchy_shapes, Backbone, BackboneConfig};
use dcppd::cueprompt::{dropout_mask, template, CueEntity, CueSource};
use dcppd::discriminator::evaluate_probe;
use dcppd::evalproto::bleu::bleu_mean;
use dcppd::evalproto::extract::parse_report;
use dcppd::evalproto::metrics::{auroc, mean_std, Confusion};
use dcppd::generator::{
    assemble_prompt, pretrain_decoder, train_stage1, train_stage2, Adapters, GenSample, Generator, GeneratorConfig, TrainConfig, Vocabulary,
};
use dcppd::harness::commands::{stage1_model, stage2_model, ModelSelector};
use dcppd::harness::pipeline::{
    answer_cache, evaluate_generator, generator_samples, report_corpus, train_probes, CueSetting, CueSpec, EvalOutput, EvalRequest, FeatureBank,
};
use dcppd::harness::ExperimentConfig;
use dcppd::nn::gradcheck::{check_params, GradCheck};
use dcppd::nn::{ParamId, Tensor};
use dcppd::questions::{FindingKind, QsId, Side};
use dcppd::reliance::trace_reliance;
use dcppd::rng::stream;
use dcppd::synthdata::{make_dataset, render_report, FindingSpec, GroundTruth, ReportOptions};

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("{} C{id:02} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{}", line.trim_end());
}

// ---------------------------------------------------------------------------
// Shared trend runs

const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const TREND_TRAIN: usize = 1000;
const TREND_EVAL: usize = 200;

fn backbone() -> &'static Backbone {
    static BB: OnceLock<Backbone> = OnceLock::new();
    BB.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let mut bb = Backbone::new(cfg.backbone_config()).unwrap();
        let pre = make_dataset(cfg.data_pretrain_size, cfg.pretrain_seed(), &cfg.dataset_config()).unwrap();
        bb.pretrain(&pre, &cfg.backbone_pretrain_config()).unwrap();
        bb
    })
}

struct TrendRun {
    seed: u64,
    p0_none: EvalOutput,
    p0_gt: EvalOutput,
    p3_none: EvalOutput,
    p3_noisy03: EvalOutput,
    p3_noisy01: EvalOutput,
    p3_gt: EvalOutput,
    cue_only_gt: EvalOutput,
}

fn trend_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed, data_train_size: TREND_TRAIN, data_eval_size: TREND_EVAL, ..ExperimentConfig::default() }
}

fn trend_run(seed: u64) -> TrendRun {
    let cfg = trend_config(seed);
    let bb = backbone();
    let dcfg = cfg.dataset_config();
    let train = make_dataset(cfg.data_train_size, cfg.train_seed(), &dcfg).unwrap();
    let eval = make_dataset(cfg.data_eval_size, cfg.eval_seed(), &dcfg).unwrap();
    let ftr = FeatureBank::extract(bb, &train).unwrap();
    let fev = FeatureBank::extract(bb, &eval).unwrap();
    let vocab = Vocabulary::closed();
    let cues = CueSpec::new(cfg.cue_question_sets().unwrap(), cfg.cue_seed());
    let eval_sets = ExperimentConfig::eval_question_sets();

    let mut base = Generator::new(cfg.generator_config(), vocab.clone()).unwrap();
    let corpus = report_corpus(&train, &vocab, None).unwrap();
    let held = report_corpus(&eval, &vocab, Some(100)).unwrap();
    pretrain_decoder(&mut base, &corpus, &held, &cfg.decoder_schedule(), cfg.decoder_max_perplexity).unwrap();

    let with_img = generator_samples(&train, Some(&ftr), &vocab, &cues, CueSetting::Gt).unwrap();
    let cue_only = generator_samples(&train, None, &vocab, &cues, CueSetting::Gt).unwrap();
    let (s1, _) = stage1_model(&cfg, &base, &with_img, false).unwrap();
    let (s1_cue_only, _) = stage1_model(&cfg, &base, &cue_only, true).unwrap();
    let sel = |dropout: f64, no_image: bool| ModelSelector { dropout, train_cue: CueSetting::Gt, no_image };
    let (p0, _) = stage2_model(&cfg, &s1, &with_img, &sel(0.0, false)).unwrap();
    let (p3, _) = stage2_model(&cfg, &s1, &with_img, &sel(0.3, false)).unwrap();
    let (p3_cue_only, _) = stage2_model(&cfg, &s1_cue_only, &cue_only, &sel(0.3, true)).unwrap();

    let eval_with = |g: &Generator, setting: CueSetting, p: f64, no_image: bool| {
        let mut cache = answer_cache(&eval_sets);
        let req = EvalRequest {
            data: &eval,
            bank: (!no_image).then_some(&fev),
            cues: &cues,
            setting,
            eval_sets: &eval_sets,
            max_len: cfg.eval_max_len,
            dropout_rate: p,
            limit: None,
        };
        evaluate_generator(g, &req, &mut cache).unwrap()
    };
    let run = TrendRun {
        seed,
        p0_none: eval_with(&p0, CueSetting::None, 0.0, false),
        p0_gt: eval_with(&p0, CueSetting::Gt, 0.0, false),
        p3_none: eval_with(&p3, CueSetting::None, 0.3, false),
        p3_noisy03: eval_with(&p3, CueSetting::Noisy(0.3), 0.3, false),
        p3_noisy01: eval_with(&p3, CueSetting::Noisy(0.1), 0.3, false),
        p3_gt: eval_with(&p3, CueSetting::Gt, 0.3, false),
        cue_only_gt: eval_with(&p3_cue_only, CueSetting::Gt, 0.3, true),
    };
    let _ = std::io::stderr().write_all(
        format!(
            "     seed {seed}: QS1 F1 p0[none {:.3} gt {:.3}] p0.3[none {:.3} noisy0.3 {:.3} noisy0.1 {:.3} gt {:.3}] cue-only gt {:.3}; QS3 full {:.3} cue-only {:.3}\n",
            run.p0_none.macro_f1(0),
            run.p0_gt.macro_f1(0),
            run.p3_none.macro_f1(0),
            run.p3_noisy03.macro_f1(0),
            run.p3_noisy01.macro_f1(0),
            run.p3_gt.macro_f1(0),
            run.cue_only_gt.macro_f1(0),
            run.p3_gt.macro_f1(2),
            run.cue_only_gt.macro_f1(2),
        )
        .as_bytes(),
    );
    run
}

fn trend_runs() -> &'static [TrendRun] {
    static RUNS: OnceLock<Vec<TrendRun>> = OnceLock::new();
    RUNS.get_or_init(|| TREND_SEEDS.iter().map(|s| trend_run(*s)).collect())
}

fn seeds_passing(f: impl Fn(&TrendRun) -> bool) -> (usize, String) {
    let runs = trend_runs();
    let passing: Vec<u64> = runs.iter().filter(|r| f(r)).map(|r| r.seed).collect();
    (passing.len(), format!("{} of {} seeds pass {:?}", passing.len(), runs.len(), passing))
}

// ---------------------------------------------------------------------------
// 1. Report round trip

fn all_findings() -> Vec<FindingSpec> {
    let mut out = Vec::new();
    let spec = |kind, laterality, lobe| FindingSpec { kind, laterality, lobe, extent: 2, intensity: 1.0, center: [0, 0, 0] };
    for kind in FindingKind::ALL {
        for side in [Side::Left, Side::Right] {
            out.push(spec(kind, side, None));
            if kind.has_lobes() {
                for lobe in side.lobes() {
                    out.push(spec(kind, side, Some(*lobe)));
                }
            }
        }
    }
    out
}

fn round_trip_failures(gt: &GroundTruth, report: &str) -> Vec<String> {
    let ex = match parse_report(report, true) {
        Ok(ex) => ex,
        Err(e) => return vec![format!("parse error {e} on {report:?}")],
    };
    [QsId::Qs1, QsId::Qs2, QsId::Qs3]
        .into_iter()
        .filter(|qs| ex.labels(*qs) != gt.labels(*qs))
        .map(|qs| format!("{} mismatch on {report:?}", qs.label()))
        .collect()
}

#[test]
fn c01_report_round_trip() {
    let start = std::time::Instant::now();
    let cfg = ExperimentConfig::default();
    let mut failures = Vec::new();
    let mut checked = 0;
    for structured in [true, false] {
        let dcfg = ExperimentConfig { data_structured_reports: structured, ..cfg.clone() }.dataset_config();
        let eval = make_dataset(cfg.data_eval_size, cfg.eval_seed(), &dcfg).unwrap();
        for s in &eval.samples {
            failures.extend(round_trip_failures(&s.gt, &s.report.flat_text));
            checked += 1;
        }
    }
    let singles = all_findings();
    let mut combos: Vec<Vec<FindingSpec>> = vec![vec![]];
    for (i, a) in singles.iter().enumerate() {
        combos.push(vec![a.clone()]);
        for b in &singles[i + 1..] {
            if a.kind != b.kind {
                combos.push(vec![a.clone(), b.clone()]);
            }
        }
    }
    let n_combos = combos.len();
    for findings in combos {
        let gt = GroundTruth::from_findings(findings).unwrap();
        for structured in [true, false] {
            for style_seed in 0..6 {
                let opts = ReportOptions { structured, ..ReportOptions::default() };
                let report = render_report(&gt, style_seed, &opts).unwrap();
                failures.extend(round_trip_failures(&gt, &report.flat_text));
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    let first = failures.first().cloned().unwrap_or_default();
    verdict(
        1,
        "report round trip",
        pass,
        &format!("{checked} reports ({n_combos} label combinations), {} mismatches, {secs:.1}s {first}", failures.len()),
    );
}

// ---------------------------------------------------------------------------
// 2. Shape laws

fn shape_config() -> impl Strategy<Value = BackboneConfig> {
    let axis = (1usize..=3, 1usize..=3, 1usize..=2, 1usize..=2);
    (prop::collection::vec(axis, 3), 2usize..=3, 1usize..=2)
        .prop_map(|(axes, levels, c_mult)| {
            let mut patch = [0; 3];
            let mut s1 = [0; 3];
            let mut s2 = [0; 3];
            let mut grid = [0; 3];
            for (a, (p, base, st1, st2)) in axes.into_iter().enumerate() {
                patch[a] = p;
                s1[a] = st1;
                s2[a] = st2;
                let coarse = base * st1 * if levels == 3 { st2 } else { 1 };
                grid[a] = p * coarse;
            }
            let strides = if levels == 3 { vec![s1, s2] } else { vec![s1] };
            BackboneConfig { in_channels: 2, grid, patch, c_in: 4 * c_mult, strides, stages: levels, heads: 2, token_scale: 1, token_stage: 1, ..Default::default() }
        })
}

#[test]
fn c02_shape_laws() {
    let start = std::time::Instant::now();
    let mut runner = TestRunner::new(PtConfig { cases: 120, ..PtConfig::default() });
    let cases = std::sync::atomic::AtomicUsize::new(0);
    let result = runner.run(&shape_config(), |cfg| {
        cases.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let dims = hierarchy_shapes(cfg.grid, cfg.patch, &cfg.strides).unwrap();
        let mut expect = [0; 3];
        for a in 0..3 {
            expect[a] = cfg.grid[a] / cfg.patch[a];
        }
        prop_assert_eq!(dims[0], expect);
        for (l, s) in cfg.strides.iter().enumerate() {
            for a in 0..3 {
                expect[a] /= s[a];
            }
            prop_assert_eq!(dims[l + 1], expect);
        }
        let bb = Backbone::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.grid.iter().product::<usize>() as u64);
        let n: usize = cfg.grid.iter().product();
        let vol = dcppd::synthdata::PhantomVolume {
            channels: cfg.in_channels,
            dims: cfg.grid,
            data: (0..n * cfg.in_channels).map(|_| rng.random::<f64>()).collect(),
            spacing: 1.0,
            channel_descriptors: vec![],
        };
        let (tokens, emb) = bb.features(&vol).unwrap();
        prop_assert_eq!(emb.len(), cfg.levels() * cfg.c_in);
        prop_assert_eq!(tokens.shape(), (dims[0].iter().product::<usize>(), cfg.c_in));
        Ok(())
    });
    let p = BackboneConfig::paper_preset();
    let paper = hierarchy_shapes(p.grid, p.patch, &p.strides).unwrap();
    let paper_ok = paper == vec![[32, 32, 64], [4, 4, 64], [1, 1, 16]] && p.embedding_dim() == 1152;
    let secs = start.elapsed().as_secs_f64();
    let n = cases.load(std::sync::atomic::Ordering::Relaxed);
    let pass = result.is_ok() && paper_ok && n >= 100 && secs < 60.0;
    verdict(
        2,
        "shape laws",
        pass,
        &format!(
            "{n} random configs: {}; production preset {paper:?} / {} dims; {secs:.1}s",
            result.err().map(|e| e.to_string()).unwrap_or_else(|| "all hold".into()),
            p.embedding_dim()
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness

fn named(store: &dcppd::nn::ParamStore, prefix: &str) -> Vec<ParamId> {
    store.ids().filter(|id| store.name(*id).starts_with(prefix)).collect()
}

#[test]
fn c03_gradient_checks() {
    let start = std::time::Instant::now();
    let mut rng = stream(21, 0);
    let mut results: Vec<(&str, GradCheck)> = Vec::new();

    let bcfg = BackboneConfig { grid: [8, 8, 8], patch: [2, 2, 2], c_in: 8, heads: 2, ..Default::default() };
    let bb = Backbone::new(bcfg.clone()).unwrap();
    let k = bcfg.in_channels * 8;
    let patches = Tensor::randn(64, k, 1.0, &mut rng);
    let w_tok = Arc::new(Tensor::randn(64, 8, 1.0, &mut rng));
    let w_emb = Arc::new(Tensor::randn(1, 24, 1.0, &mut rng));
    let with_store = |s: &dcppd::nn::ParamStore| {
        let mut b = bb.clone();
        b.store = s.clone();
        b
    };
    results.push((
        "stem",
        check_params(&bb.store, &named(&bb.store, "stem"), 1e-5, 40, 1e-6, |g, s| {
            let x = g.constant(patches.clone());
            let t = with_store(s).patchify_graph(g, x);
            g.dot_const(t, w_tok.clone())
        }),
    ));
    results.push((
        "encoder stage",
        check_params(&bb.store, &named(&bb.store, "stage1."), 1e-5, 4, 1e-6, |g, s| {
            let x = g.constant(patches.clone());
            let e = with_store(s).embedding_graph(g, x);
            g.dot_const(e, w_emb.clone())
        }),
    ));

    let gcfg = GeneratorConfig {
        c_in: 4,
        image_tokens: 2,
        projector_heads: 2,
        projector_hidden: 8,
        d_model: 8,
        blocks: 1,
        heads: 2,
        ffn_mult: 2,
        lora_rank: 2,
        lora_alpha: 4.0,
        no_image: false,
        seed: 5,
    };
    let mut gen = Generator::new(gcfg, Vocabulary::closed()).unwrap();
    for id in gen.adapter_ids() {
        let t = gen.store.get(id);
        let (r, c) = (t.rows, t.cols);
        gen.store.set(id, Tensor::randn(r, c, 0.3, &mut rng));
    }
    let visual = Tensor::randn(5, 4, 1.0, &mut rng);
    let w_img = Arc::new(Tensor::randn(2, 8, 1.0, &mut rng));
    results.push((
        "projector",
        check_params(&gen.store, &gen.projector_ids(), 1e-5, 8, 1e-6, |g, s| {
            let v = g.constant(visual.clone());
            let img = gen.projector.forward(g, s, v);
            g.dot_const(img, w_img.clone())
        }),
    ));
    let cue = template(&[CueEntity::new(QsId::Qs1, 10)], CueSource::Gt);
    let prompt = assemble_prompt(&gen.vocab, 2, Some(&cue), dcppd::generator::vocab::QUERY).unwrap();
    let mut ids = prompt.text_ids();
    ids.extend(gen.vocab.tokenize("Lungs: No lung nodule.").unwrap());
    let targets: Arc<Vec<Option<usize>>> = Arc::new((prompt.len()..2 + ids.len()).map(|p| ids.get(p + 1 - 2).copied()).collect());
    let mut block_ids = gen.decoder_base_ids();
    block_ids.extend(gen.adapter_ids());
    results.push((
        "decoder block",
        check_params(&gen.store, &block_ids, 1e-5, 4, 1e-6, |g, s| {
            let emb = gen.decoder.embed_ids(g, s, &ids);
            let v = g.constant(visual.clone());
            let img = gen.projector.forward(g, s, v);
            let x = g.concat_rows(&[img, emb]);
            let logits = gen.decoder.forward(g, s, x, prompt.len(), Adapters::On);
            g.cross_entropy(logits, targets.clone())
        }),
    ));

    let mut store = dcppd::nn::ParamStore::new();
    let w = store.add("w", Tensor::randn(6, 4, 0.5, &mut rng));
    let b = store.add("b", Tensor::randn(1, 4, 0.5, &mut rng));
    let x = Tensor::randn(7, 6, 1.0, &mut rng);
    let y = Arc::new(Tensor::from_vec(7, 4, (0..28).map(|_| f64::from(rng.random::<bool>() as u8)).collect()));
    let pw = Arc::new(vec![1.0, 3.0, 0.5, 2.0]);
    let include = Arc::new(vec![true, true, true, false]);
    results.push((
        "weighted BCE",
        check_params(&store, &[w, b], 1e-5, 24, 1e-6, |g, s| {
            let xv = g.constant(x.clone());
            let wv = g.param(s, w);
            let bv = g.param(s, b);
            let z = g.matmul(xv, wv);
            let z = g.add_row(z, bv);
            g.weighted_bce(z, y.clone(), pw.clone(), include.clone())
        }),
    ));

    let secs = start.elapsed().as_secs_f64();
    let pass = results.iter().all(|(_, r)| r.passes(1e-3)) && secs < 300.0;
    let detail: Vec<String> = results.iter().map(|(n, r)| format!("{n} {} entries max rel err {:.1e}", r.checked, r.max_rel_err)).collect();
    verdict(3, "gradient checks", pass, &format!("{}; {secs:.1}s", detail.join(", ")));
}

// ---------------------------------------------------------------------------
// 4. Probe quality

#[test]
fn c04_probe_quality() {
    let cfg = ExperimentConfig::default();
    let bb = backbone();
    let dcfg = cfg.dataset_config();
    let train = make_dataset(cfg.data_train_size, cfg.train_seed(), &dcfg).unwrap();
    let eval = make_dataset(cfg.data_eval_size, cfg.eval_seed(), &dcfg).unwrap();
    let ftr = FeatureBank::extract(bb, &train).unwrap();
    let fev = FeatureBank::extract(bb, &eval).unwrap();
    let sets = ExperimentConfig::probe_question_sets();
    let trained = train_probes(&ftr, &train, &sets, &cfg.probe_config()).unwrap();
    let f1: Vec<f64> = sets
        .iter()
        .zip(&trained)
        .map(|(qs, t)| {
            let labels: Vec<_> = eval.samples.iter().map(|s| qs.project(s.gt.labels(qs.id)).unwrap()).collect();
            evaluate_probe(&t.probe, &fev.embeddings, &labels).unwrap().macro_f1
        })
        .collect();
    let pass = f1[0] >= 0.90 && f1[2] < f1[0];
    verdict(
        4,
        "probe quality",
        pass,
        &format!("macro-F1 QS1 {:.3} (need >= 0.90), QS2 {:.3}, QS3 {:.3} (need < QS1)", f1[0], f1[1], f1[2]),
    );
}

// ---------------------------------------------------------------------------
// 5-7, 10. Trend criteria

#[test]
fn c05_shortcut_collapse() {
    let (n, detail) = seeds_passing(|r| {
        r.p0_none.macro_f1(0) <= 0.5 * r.p3_none.macro_f1(0) && r.p0_gt.macro_f1(0) >= 0.9 && r.p3_gt.macro_f1(0) >= 0.9
    });
    verdict(5, "shortcut collapse without cues", n >= 2, &detail);
}

#[test]
fn c06_cue_quality_monotonicity() {
    let (n, detail) = seeds_passing(|r| {
        let f = [r.p3_none.macro_f1(0), r.p3_noisy03.macro_f1(0), r.p3_noisy01.macro_f1(0), r.p3_gt.macro_f1(0)];
        f[0] <= f[1] && f[1] <= f[2] && f[2] <= f[3] && f[0] < f[1] && f[2] < f[3]
    });
    verdict(6, "cue-quality monotonicity", n >= 2, &detail);
}

#[test]
fn c07_reliance_direction() {
    let r = &trend_runs()[0];
    let mut exact = true;
    let mut s = [Vec::new(), Vec::new()];
    for (k, out) in [&r.p0_gt, &r.p3_gt].into_iter().enumerate() {
        for t in &out.traces {
            let rel = trace_reliance(t).unwrap();
            exact &= rel.s_text + rel.s_image == 1.0;
            s[k].push(rel.s_text);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m0, m3) = (mean(&s[0]), mean(&s[1]));
    let n = s[0].len().min(s[1].len());
    let pass = exact && n >= 200 && m0 - m3 >= 0.03;
    verdict(
        7,
        "reliance direction",
        pass,
        &format!("mean S_text p=0 {m0:.3} vs p=0.3 {m3:.3} (gap {:.3}, need >= 0.03) over {n} traces each; S_text + S_image = 1 exactly: {exact}", m0 - m3),
    );
}

#[test]
fn c10_no_image_ablation() {
    let (n, detail) = seeds_passing(|r| {
        (r.cue_only_gt.macro_f1(0) - r.p3_gt.macro_f1(0)).abs() <= 0.05 && r.p3_gt.macro_f1(2) - r.cue_only_gt.macro_f1(2) >= 0.10
    });
    verdict(10, "no-image ablation", n >= 2, &detail);
}

// ---------------------------------------------------------------------------
// 8. Dropout statistics

#[test]
fn c08_dropout_statistics() {
    const DRAWS: usize = 100_000;
    let mut details = Vec::new();
    let mut pass = true;
    for (k, p) in [0.1, 0.3, 0.5, 0.7].into_iter().enumerate() {
        let mut dropped = 0;
        for i in 0..DRAWS / 4 {
            dropped += dropout_mask(4, p, dcppd::rng::derive(k as u64, i as u64)).unwrap().iter().filter(|keep| !**keep).count();
        }
        let rate = dropped as f64 / DRAWS as f64;
        pass &= (rate - p).abs() <= 0.005;
        details.push(format!("p={p}: {rate:.4}"));
    }
    let ents: Vec<CueEntity> = [7, 9, 10, 15].iter().map(|i| CueEntity::new(QsId::Qs1, *i)).collect();
    let mut identity = true;
    let mut empty = true;
    for seed in 0..1000 {
        identity &= dcppd::cueprompt::prompt_dropout(&ents, 0.0, seed).unwrap() == ents;
        empty &= dcppd::cueprompt::prompt_dropout(&ents, 1.0, seed).unwrap().is_empty();
    }
    pass &= identity && empty;
    verdict(8, "dropout statistics", pass, &format!("{}; p=0 identity {identity}, p=1 empty {empty}", details.join(", ")));
}

// ---------------------------------------------------------------------------
// 9. Freeze and adapter contracts

#[test]
fn c09_freeze_and_adapter_contracts() {
    let cfg = GeneratorConfig {
        c_in: 4,
        image_tokens: 2,
        projector_heads: 2,
        projector_hidden: 16,
        d_model: 16,
        blocks: 2,
        heads: 2,
        ffn_mult: 2,
        lora_rank: 2,
        lora_alpha: 4.0,
        no_image: false,
        seed: 8,
    };
    let mut gen = Generator::new(cfg, Vocabulary::closed()).unwrap();
    let data = make_dataset(12, 4, &Default::default()).unwrap();
    let mut rng = stream(8, 0);
    let samples: Vec<GenSample> = data
        .samples
        .iter()
        .map(|s| GenSample {
            id: s.id.clone(),
            visual: Some(Arc::new(Tensor::randn(6, 4, 1.0, &mut rng))),
            report_ids: gen.vocab.tokenize(&s.report.flat_text).unwrap(),
            cues: vec![CueEntity::new(QsId::Qs1, 10)],
        })
        .collect();
    let corpus: Vec<Vec<usize>> = samples.iter().map(|s| s.report_ids.clone()).collect();
    let sched = |epochs| TrainConfig { epochs, batch_size: 4, lr: 1e-2, clip_norm: Some(1.0), seed: 3 };
    pretrain_decoder(&mut gen, &corpus, &[], &sched(2), f64::INFINITY).unwrap();

    let base = gen.decoder_base_ids();
    let adapters = gen.adapter_ids();
    let decoder_before = gen.checksum(&[base.clone(), adapters.clone()].concat());
    train_stage1(&mut gen, &samples, &sched(2)).unwrap();
    let stage1_ok = gen.checksum(&[base.clone(), adapters.clone()].concat()) == decoder_before;

    let cue = template(&samples[0].cues, CueSource::Gt);
    let prompt = assemble_prompt(&gen.vocab, gen.cfg.prompt_image_tokens(), Some(&cue), dcppd::generator::vocab::QUERY).unwrap();
    let mut zero_init_ok = true;
    let mut s2 = gen.clone();
    s2.adapters = Adapters::On;
    for s in &samples[..4] {
        let v = s.visual.as_deref();
        zero_init_ok &= gen.report_logits(v, &prompt, &s.report_ids).unwrap().data == s2.report_logits(v, &prompt, &s.report_ids).unwrap().data;
    }

    let base_before = gen.checksum(&base);
    let rep = train_stage2(&mut s2, &samples, 0.3, CueSource::Gt, &sched(2)).unwrap();
    let stage2_ok = s2.checksum(&base) == base_before && rep.frozen_checksum == base_before && s2.checksum(&adapters) != gen.checksum(&adapters);
    verdict(
        9,
        "freeze and adapter contracts",
        stage1_ok && stage2_ok && zero_init_ok,
        &format!("stage-1 decoder checksum unchanged {stage1_ok}, stage-2 base checksum unchanged {stage2_ok}, zero-init logits bitwise equal {zero_init_ok}"),
    );
}

// ---------------------------------------------------------------------------
// 11. Metric oracles

fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, si) in scores.iter().enumerate() {
        for (j, sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn oracle_bleu_mean(cand: &str, refr: &str) -> f64 {
    let c: Vec<&str> = cand.split_whitespace().collect();
    let r: Vec<&str> = refr.split_whitespace().collect();
    let mut precisions = Vec::new();
    for n in 1..=4 {
        let grams = |t: &[&str]| {
            let mut m: HashMap<String, usize> = HashMap::new();
            for i in 0..t.len().saturating_sub(n - 1) {
                *m.entry(t[i..i + n].join(" ")).or_default() += 1;
            }
            m
        };
        let (gc, gr) = (grams(&c), grams(&r));
        let total: usize = gc.values().sum();
        let hit: usize = gc.iter().map(|(g, k)| (*k).min(*gr.get(g).unwrap_or(&0))).sum();
        precisions.push(if total == 0 { 0.0 } else { hit as f64 / total as f64 });
    }
    let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
    (1..=4)
        .map(|n| {
            let ps = &precisions[..n];
            if ps.iter().any(|p| *p == 0.0) {
                0.0
            } else {
                bp * ps.iter().product::<f64>().powf(1.0 / n as f64)
            }
        })
        .sum::<f64>()
        / 4.0
}

#[test]
fn c11_metric_oracles() {
    let mut errs: Vec<(String, f64)> = Vec::new();
    // Hand-counted: tp 3, fp 1, fn 2, tn 2.
    let c = Confusion::from_pairs([1, 1, 1, 1, 0, 0, 0, 0], [1, 1, 1, 0, 1, 1, 0, 0]);
    errs.push(("confusion".into(), if (c.tp, c.fp, c.fn_, c.tn) == (3, 1, 2, 2) { 0.0 } else { 1.0 }));
    errs.push(("precision".into(), (c.precision() - 0.75).abs()));
    errs.push(("recall".into(), (c.recall() - 0.6).abs()));
    errs.push(("f1".into(), (c.f1() - 2.0 * 0.75 * 0.6 / 1.35).abs()));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut auroc_err: f64 = 0.0;
    for case in 0..50 {
        let n = 6 + case % 9;
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random::<bool>() as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect();
        auroc_err = auroc_err.max((auroc(&scores, &labels).unwrap() - brute_auroc(&scores, &labels)).abs());
    }
    errs.push(("auroc".into(), auroc_err));

    let pairs = [
        ("the cat sat on the mat", "the cat sat on the mat"),
        ("the cat sat on a mat today", "the cat sat on the mat"),
        ("the the the the", "the cat sat on the mat"),
        ("lungs clear no effusion", "lungs : no nodule no effusion"),
        ("a b c d e f g", "a b c x e f g h i"),
    ];
    let bleu_err = pairs.iter().map(|(c, r)| (bleu_mean(c, r) - oracle_bleu_mean(c, r)).abs()).fold(0.0, f64::max);
    errs.push(("bleu_mean".into(), bleu_err));
    errs.push(("bleu identical".into(), (bleu_mean(pairs[0].0, pairs[0].1) - 1.0).abs()));

    let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
    let (m, s) = mean_std(&xs).unwrap();
    errs.push(("mean".into(), (m - 5.0).abs()));
    errs.push(("std".into(), (s - (32.0f64 / 7.0).sqrt()).abs()));

    let pass = errs.iter().all(|(name, e)| *e <= if name == "auroc" { 1e-6 } else { 1e-9 });
    let worst = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(11, "metric oracles", pass, &format!("max abs errors: {worst}"));
}

// ---------------------------------------------------------------------------
// 12. Determinism of report-tables

const TINY_CONFIG: &str = r#"
seed = 3
data_train_size = 24
data_eval_size = 8
data_pretrain_size = 16
backbone_c_in = 8
backbone_pretrain_epochs = 1
probe_epochs = 20
gen_d_model = 16
gen_blocks = 1
gen_heads = 2
gen_image_tokens = 2
gen_lora_rank = 2
gen_lora_alpha = 4.0
batch_size = 8
decoder_epochs = 1
decoder_max_perplexity = 1e9
stage1_epochs = 1
stage2_epochs = 1
eval_max_len = 24
ablate_dropouts = [0.0, 0.3]
ablate_settings = ["gt", "probe", "none"]
"#;

fn dcppd(config: &Path, runs: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_dcppd"))
        .arg("--config")
        .arg(config)
        .arg("--runs-dir")
        .arg(runs)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "dcppd {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn tables(runs: &Path) -> Vec<(String, Vec<u8>)> {
    let run = std::fs::read_dir(runs).unwrap().next().unwrap().unwrap().path();
    let dir = run.join("report-tables");
    let names: BTreeSet<String> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.into_iter().filter(|n| n != "record.json").map(|n| (n.clone(), std::fs::read(dir.join(&n)).unwrap())).collect()
}

#[test]
fn c12_report_tables_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let mut outputs = Vec::new();
    for r in ["a", "b"] {
        let runs = tmp.path().join(r);
        for cmd in [
            &["gen-data"][..],
            &["train-probe"],
            &["pretrain-decoder"],
            &["train-vlm"],
            &["evaluate", "--cue-source", "none"],
            &["reliance", "--cue-source", "none"],
            &["ablate"],
            &["report-tables"],
        ] {
            dcppd(&config, &runs, cmd);
        }
        outputs.push(tables(&runs));
    }
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    let pass = !outputs[0].is_empty() && outputs[0] == outputs[1];
    verdict(12, "report-tables determinism", pass, &format!("{} files byte-identical across two runs: {}", names.len(), names.join(", ")));
}

//! Property tests over the public API.

use proptest::prelude::*;

use dcppd::cueprompt::{labels_to_entities, prompt_dropout, template, CueEntity, CueSource};
use dcppd::evalproto::bleu::bleu_mean;
use dcppd::evalproto::extract::parse_report;
use dcppd::evalproto::metrics::auroc;
use dcppd::generator::vocab::split_words;
use dcppd::nn::checkpoint::{decode, encode, DType};
use dcppd::nn::Tensor;
use dcppd::questions::{is_hierarchy_consistent, LabelVector, QsId, QuestionSet};
use dcppd::reliance::{trace_reliance, AttentionTrace};
use dcppd::synthdata::dataset::{item_seed, style_seed};
use dcppd::synthdata::phantom::generate_ground_truth;
use dcppd::synthdata::{render_report, DatasetConfig, ReportOptions};

fn entities(n: usize) -> Vec<CueEntity> {
    (0..n).map(|i| CueEntity::new(QsId::Qs3, i)).collect()
}

proptest! {
    #[test]
    fn dropout_keeps_an_ordered_subset(n in 0usize..15, p in 0.0f64..=1.0, seed in any::<u64>()) {
        let all = entities(n);
        let kept = prompt_dropout(&all, p, seed).unwrap();
        prop_assert_eq!(&kept, &prompt_dropout(&all, p, seed).unwrap());
        let mut it = all.iter();
        for k in &kept {
            prop_assert!(it.any(|e| e == k), "kept entities must preserve order");
        }
        prop_assert_eq!(prompt_dropout(&all, 0.0, seed).unwrap(), all.clone());
        prop_assert!(prompt_dropout(&all, 1.0, seed).unwrap().is_empty());
    }

    #[test]
    fn template_spans_point_at_entity_words(mask in prop::collection::vec(any::<bool>(), 15)) {
        let qs = QuestionSet::full(QsId::Qs3);
        let labels = LabelVector { qs: QsId::Qs3, values: mask.iter().map(|b| *b as u8).collect() };
        let ents = labels_to_entities(&[(&qs, &labels)]).unwrap();
        prop_assert_eq!(ents.len(), labels.popcount());
        let cue = template(&ents, CueSource::Gt);
        let words = split_words(&cue.text);
        for span in &cue.entity_spans {
            let surface = split_words(&span.entity.surface);
            prop_assert_eq!(&words[span.start..span.end], surface.as_slice());
        }
    }

    #[test]
    fn sampled_reports_round_trip(seed in any::<u64>(), lobe_rate in 0.0f64..=1.0, prevalence in 0.0f64..=1.0, structured in any::<bool>()) {
        let mut cfg = DatasetConfig { lobe_rate, prevalence: [prevalence; 4], ..DatasetConfig::default() };
        cfg.report = ReportOptions { structured, ..ReportOptions::default() };
        let s = item_seed(seed, 0);
        let gt = generate_ground_truth(s, &cfg).unwrap();
        prop_assert!(is_hierarchy_consistent(&gt.qs1, &gt.qs2, &gt.qs3));
        let report = render_report(&gt, style_seed(s), &cfg.report).unwrap();
        let ex = parse_report(&report.flat_text, true).unwrap();
        prop_assert_eq!(&ex.qs1, &gt.qs1);
        prop_assert_eq!(&ex.qs2, &gt.qs2);
        prop_assert_eq!(&ex.qs3, &gt.qs3);
    }

    #[test]
    fn reliance_shares_sum_to_one(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 8), 1..6)) {
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| { let s: f64 = r.iter().sum(); r.into_iter().map(|v| v / s).collect() }).collect();
        let trace = AttentionTrace { prompt_len: 8, image: vec![0, 1, 2], text: vec![3, 4], query: vec![5, 6, 7], rows };
        trace.validate().unwrap();
        let r = trace_reliance(&trace).unwrap();
        prop_assert_eq!(r.s_text + r.s_image, 1.0);
        prop_assert!((0.0..=1.0).contains(&r.s_text));
    }

    #[test]
    fn auroc_matches_pairwise_count(pairs in prop::collection::vec((0u8..4, any::<bool>()), 2..30)) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s as f64).collect();
        let labels: Vec<u8> = pairs.iter().map(|(_, l)| *l as u8).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        match auroc(&scores, &labels) {
            Some(a) => prop_assert!((a - num / den).abs() < 1e-12),
            None => prop_assert_eq!(den, 0.0),
        }
    }

    #[test]
    fn bleu_is_bounded(a in prop::collection::vec(0u8..6, 1..20), b in prop::collection::vec(0u8..6, 1..20)) {
        let text = |v: &[u8]| v.iter().map(|x| format!("w{x}")).collect::<Vec<_>>().join(" ");
        let (ta, tb) = (text(&a), text(&b));
        let s = bleu_mean(&ta, &tb);
        prop_assert!((0.0..=1.0).contains(&s));
        let self_score = a.len().min(4) as f64 / 4.0;
        prop_assert!((bleu_mean(&ta, &ta) - self_score).abs() < 1e-12);
    }

    #[test]
    fn f64_checkpoints_round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = dcppd::rng::stream(seed, 0);
        let t = Tensor::randn(rows, cols, 3.0, &mut rng);
        let bytes = encode("test", &serde_json::json!({ "k": 1 }), &[("t", &t)], DType::F64).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.tensor("t").unwrap(), &t);
        prop_assert_eq!(back.kind.as_str(), "test");
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::{generate_dataset, Dataset, Grammar};
use crate::model::ModelConfig;
use crate::scenegraph::{mask_candidates, parse_scene_graph, RoleLexicon};

fn lexicon() -> RoleLexicon {
    RoleLexicon::from_tsv(
        "a\tDET\nyoung\tADJ\nred\tADJ\nman\tNOUN\nball\tNOUN\nwoman\tNOUN\nbeach\tNOUN\ncarrying\tVERB\n",
    )
    .unwrap()
}

fn vocab() -> Vocabulary {
    Vocabulary::build(&["a", "young", "red", "man", "ball", "woman", "beach", "carrying"]).unwrap()
}

fn candidates(text: &str) -> MaskCandidateSet {
    let seq = vocab().tokenize(text);
    mask_candidates(&parse_scene_graph(&seq, &lexicon()), &seq)
}

fn negative(source: &str, caption: &str) -> SyntheticNegative {
    let v = vocab();
    let (source, caption) = (v.tokenize(source), v.tokenize(caption));
    let replaced_positions = (0..caption.len()).filter(|&i| caption.ids()[i] != source.ids()[i]).collect();
    SyntheticNegative {
        caption,
        source,
        replaced_positions,
        itm: f64::NAN,
    }
}

#[test]
fn masks_two_tokens_of_seven() {
    let c = candidates("a young man carrying a red ball");
    for seed in 0..50 {
        let m = mask_caption(&c, 0.15, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let masked: Vec<usize> = (0..7).filter(|&i| m.ids[i] == MASK_ID).collect();
        assert_eq!(masked.len(), 2);
        assert_eq!(masked, m.positions());
        assert!(masked.iter().all(|&p| c.spans.iter().any(|s| s.positions().contains(&p))));
        assert!(!masked.contains(&0) && !masked.contains(&4));
    }
}

#[test]
fn single_candidate_is_always_masked() {
    let c = candidates("a man");
    let m = mask_caption(&c, 0.01, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(m.ids, vec![vocab().id("a").unwrap(), MASK_ID]);
    let none = candidates("a a");
    assert!(matches!(
        mask_caption(&none, 0.15, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::UnmaskableCaption)
    ));
    assert_eq!(Error::UnmaskableCaption.to_string(), "unmaskable caption");
}

#[test]
fn masking_is_deterministic() {
    let c = candidates("a young man carrying a red ball");
    let a = mask_caption(&c, 0.15, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let b = mask_caption(&c, 0.15, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    assert_eq!(a, b);
    let w1 = mask_words(&c.source, 0.3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let w2 = mask_words(&c.source, 0.3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    assert_eq!(w1, w2);
    assert_eq!(w1.positions().len(), 3);
}

#[test]
fn refill_distribution_excludes_reserved() {
    let logits = [9.0, 9.0, 9.0, 9.0, 9.0, 0.0, 1.0, 2.0];
    let p = refill_distribution(&logits, 1.0).unwrap();
    assert!(p[..5].iter().all(|&x| x == 0.0));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((p[7] - 0.6652409557748218).abs() < 1e-12);
    assert!(refill_distribution(&logits, 0.0).is_err());
    let cold = refill_distribution(&logits, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        assert_eq!(sample_index(&cold, &mut rng).unwrap(), 7);
    }
}

#[test]
fn false_negative_rule() {
    let anns = vec![vocab().tokenize("a woman carrying a ball"), vocab().tokenize("a red ball")];
    assert!(is_false_negative(&negative("a man carrying a ball", "a woman carrying a ball"), &anns));
    assert!(!is_false_negative(&negative("a man carrying a ball", "a beach carrying a ball"), &anns));
    assert!(is_false_negative(&negative("a man", "a man"), &anns));
}

#[test]
fn gold_wod_marks_replacements() {
    let n = negative("a young man carrying a red ball", "a young woman carrying a red beach");
    assert_eq!(n.replaced_positions, vec![2, 6]);
    assert_eq!(n.gold_wod(), vec![1, 1, 0, 1, 1, 1, 0]);
}

#[test]
fn mining_examples() {
    let pool: Vec<SyntheticNegative> = [0.2, 0.9, 0.5]
        .iter()
        .map(|&s| SyntheticNegative {
            itm: s,
            ..negative("a man", "a woman")
        })
        .collect();
    let top: Vec<f64> = mine_top_m(pool.clone(), 2).iter().map(|n| n.itm).collect();
    assert_eq!(top, vec![0.9, 0.5]);
    assert_eq!(mine_top_m(pool[..1].to_vec(), 3).len(), 1);
}

#[test]
fn pool_is_bounded_and_clean() {
    let g = Grammar::new();
    let vocab = g.vocabulary();
    let data = generate_dataset(&g, 3, 2);
    let ds = Dataset::from_records(&data.records, &vocab).unwrap();
    let mut cfg = ModelConfig::new(vocab.len(), ds.images[0].region_dim());
    cfg.d_model = 16;
    cfg.ffn_hidden = 32;
    let model = MatchModel::new(cfg, 3).unwrap();
    let gen = GenerationConfig {
        k: 2,
        l: 4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for im in &ds.images {
        for cap in &im.captions {
            let c = mask_candidates(&parse_scene_graph(cap, g.lexicon()), cap);
            let pool = generate_pool(&model, &model, &vocab, im, &c, &gen, &mut rng).unwrap();
            assert!(pool.len() <= 8);
            for item in &pool {
                assert_ne!(item.caption.ids(), cap.ids());
                assert!(!is_false_negative(item, &im.captions));
                assert!(item.itm > 0.0 && item.itm < 1.0);
                assert!(item.caption.ids().iter().all(|&id| !vocab.is_reserved(id)));
            }
        }
    }
}

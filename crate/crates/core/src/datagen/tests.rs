use std::collections::BTreeSet;

use super::*;
use crate::scenegraph::{mask_candidates, parse_scene_graph};

#[test]
fn single_image_caption_parses_to_its_scene() {
    let g = Grammar::new();
    let data = generate_dataset(&g, 1, 7);
    let vocab = g.vocabulary();
    let truth = g.canonical_scene(&data.scenes[0]);
    for caption in &data.records[0].captions {
        let seq = vocab.tokenize(caption);
        let graph = parse_scene_graph(&seq, g.lexicon());
        assert_eq!(g.canonicalize(&seq, &graph).as_ref(), Some(&truth), "{caption}");
    }
}

#[test]
fn generation_is_deterministic_in_seed() {
    let g = Grammar::new();
    let a = generate_dataset(&g, 20, 3);
    let b = generate_dataset(&g, 20, 3);
    let c = generate_dataset(&g, 20, 4);
    assert_eq!(a, b);
    assert_ne!(a.records, c.records);
}

#[test]
fn thousand_images_have_five_distinct_valid_captions() {
    let g = Grammar::new();
    let vocab = g.vocabulary();
    let data = generate_dataset(&g, 1000, 11);
    let dim = region_dim(&g);
    for (record, derivations) in data.records.iter().zip(&data.derivations) {
        let distinct: BTreeSet<&String> = record.captions.iter().collect();
        assert_eq!(distinct.len(), CAPTIONS_PER_IMAGE);
        assert_eq!(record.regions.len(), DEFAULT_REGIONS);
        assert!(record.regions.iter().all(|r| r.len() == dim));
        for (caption, d) in record.captions.iter().zip(derivations) {
            let seq = vocab.tokenize(caption);
            assert!(seq.len() <= MAX_CAPTION_LEN);
            assert!(!seq.ids().contains(&vocab.unk_id()), "{caption}");
            d.graph.validate(seq.len()).unwrap();
            let graph = parse_scene_graph(&seq, g.lexicon());
            assert_eq!(graph, d.graph, "{caption}");
            assert!(!mask_candidates(&graph, &seq).is_empty());
        }
    }
}

#[test]
fn vocabulary_covers_exactly_the_terminals() {
    let g = Grammar::new();
    let mut terminals: BTreeSet<&str> = BTreeSet::new();
    for i in 0..g.num_nouns() {
        terminals.insert(g.noun(i));
    }
    for i in 0..g.num_adjectives() {
        terminals.insert(g.adjective(i));
    }
    let data = generate_dataset(&g, 2000, 5);
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for r in &data.records {
        for c in &r.captions {
            seen.extend(c.split_whitespace().map(str::to_string));
        }
    }
    let vocab = g.vocabulary();
    assert!(seen.iter().all(|w| vocab.id(w).is_some()));
    assert!(terminals.iter().all(|w| vocab.id(w).is_some()));
    // Every lexicon word is reachable, so sampling enough images shows them all.
    assert_eq!(vocab.len(), seen.len() + crate::text::RESERVED.len());
}

#[test]
fn region_features_are_one_hot_blocks() {
    let g = Grammar::new();
    let scene = LatentScene {
        entities: vec![
            Entity { noun: 2, adjectives: vec![1] },
            Entity { noun: 5, adjectives: vec![] },
        ],
        relations: vec![SceneRelation { relation: 3, subject: 0, object: 1 }],
    };
    let r = region_features(&g, &scene, 4);
    assert_eq!(r.len(), 4);
    let ones = |v: &Vec<f64>| v.iter().enumerate().filter(|(_, x)| **x == 1.0).map(|(i, _)| i).collect::<Vec<_>>();
    assert_eq!(ones(&r[0]), vec![2, 60 + 1]);
    assert_eq!(ones(&r[1]), vec![5]);
    assert_eq!(ones(&r[2]), vec![85 + 3]);
    assert!(r[3].iter().all(|&x| x == 0.0));
}

#[test]
fn jsonl_round_trip_is_exact() {
    let g = Grammar::new();
    let data = generate_dataset(&g, 10, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_jsonl(&data.records, &path).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), data.records);

    write_jsonl(&[], &path).unwrap();
    assert!(read_jsonl(&path).unwrap().is_empty());
}

#[test]
fn truncated_jsonl_reports_line() {
    let g = Grammar::new();
    let data = generate_dataset(&g, 3, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_jsonl(&data.records, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() - 20]).unwrap();
    match read_jsonl(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn records_convert_to_images() {
    let g = Grammar::new();
    let vocab = g.vocabulary();
    let data = generate_dataset(&g, 4, 1);
    let ds = Dataset::from_records(&data.records, &vocab).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.images[0].regions.shape(), [DEFAULT_REGIONS, region_dim(&g)]);
    let (head, tail) = ds.split_tail(1);
    assert_eq!((head.len(), tail.len()), (3, 1));
    assert_eq!(tail.images[0].image_id, 3);

    let mut bad = data.records[0].clone();
    bad.captions.pop();
    assert!(RegionImage::from_record(&bad, &vocab).is_err());
}

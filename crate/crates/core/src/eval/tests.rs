use proptest::prelude::*;

use super::*;
use crate::datagen::{generate_dataset, Grammar};
use crate::model::ModelConfig;

fn data(n: usize) -> (Grammar, Vocabulary, Dataset) {
    let g = Grammar::new();
    let v = g.vocabulary();
    let d = Dataset::from_records(&generate_dataset(&g, n, 8).records, &v).unwrap();
    (g, v, d)
}

fn tiny(v: &Vocabulary, d: &Dataset) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 16,
        ..ModelConfig::new(v.len(), d.images[0].region_dim())
    }
}

#[test]
fn recall_rank_arithmetic() {
    let ranks = [1, 3, 7];
    assert_eq!(recall_from_ranks(&ranks, 1), 1.0 / 3.0);
    assert_eq!(recall_from_ranks(&ranks, 5), 2.0 / 3.0);
    assert_eq!(recall_from_ranks(&ranks, 10), 1.0);
    assert_eq!(rank_of(&[0.5, 0.9, 0.5, 0.1], 2), 3);
    assert_eq!(rank_of(&[0.5, 0.9, 0.5, 0.1], 0), 2);
}

#[test]
fn oracle_scores_rsum_600() {
    let (_, _, d) = data(12);
    let r = recall_at_k(&OracleScorer, &d.images).unwrap();
    assert_eq!(r.i2t, [1.0; 3]);
    assert_eq!(r.t2i, [1.0; 3]);
    assert_eq!(r.rsum, 600.0);
    assert!(matches!(recall_at_k(&OracleScorer, &[]), Err(Error::EmptyGallery)));
}

#[test]
fn constant_scorer_ranks_by_index() {
    let (_, _, d) = data(12);
    let r = recall_at_k(&|_: &RegionImage, _: &TokenSeq| 0.5, &d.images).unwrap();
    // Ties fall back to gallery order: image i's captions sit at 5i..5i+5.
    assert_eq!(r.i2t[0], 1.0 / 12.0);
    assert_eq!(r.t2i[0], 1.0 / 12.0);
    assert_eq!(r.t2i[2], 10.0 / 12.0);
}

#[test]
fn discrimination_conventions() {
    let (_, _, d) = data(2);
    let im = &d.images[0];
    let triples = vec![Triple {
        image: im,
        positive: im.captions[0].clone(),
        negative: d.images[1].captions[0].clone(),
    }];
    assert_eq!(discrimination_accuracy(&OracleScorer, &triples).unwrap(), 1.0);
    let flat = |_: &RegionImage, _: &TokenSeq| 0.5;
    assert_eq!(discrimination_accuracy(&flat, &triples).unwrap(), 0.0);
}

#[test]
fn word_task_conventions_on_zero_model() {
    let (_, v, d) = data(2);
    let m = MatchModel::zeros(tiny(&v, &d)).unwrap();
    let im = &d.images[0];
    let src = im.captions[0].clone();
    let mut caption = src.clone();
    let p = src.len() - 1;
    caption.set(p, v.id("zebra").unwrap(), "zebra".into());
    let n = SyntheticNegative {
        caption,
        source: src.clone(),
        replaced_positions: vec![p],
        itm: 0.0,
    };
    let expect = (src.len() - 1) as f64 / src.len() as f64;
    assert_eq!(wod_accuracy(&m, &[(im, &n)]).unwrap(), expect);
    // All logits tie, so the lowest ordinary id wins.
    let want = if src.ids()[p] == RESERVED.len() { 1.0 } else { 0.0 };
    assert_eq!(woc_accuracy(&m, &[(im, &n)]).unwrap(), want);
}

#[test]
fn histogram_bins() {
    assert_eq!(GapHistogram::bin_of(-1.0), 0);
    assert_eq!(GapHistogram::bin_of(1.0), GAP_BINS - 1);
    assert_eq!(GapHistogram::bin_of(0.0), 20);
    assert_eq!(GapHistogram::bin_of(-0.01), 19);
    let h = GapHistogram::from_values(vec![0.0, 0.0, -0.5]);
    assert_eq!(h.counts().iter().sum::<usize>(), 3);
    assert_eq!(h.counts()[20], 2);
    let csv = h.to_csv();
    assert!(csv.starts_with("bin_left,count\n-1.00,0\n"));
    assert_eq!(csv.lines().count(), GAP_BINS + 1);
}

#[test]
fn gap_histograms_cover_every_image() {
    let (g, v, d) = data(6);
    let m = MatchModel::new(tiny(&v, &d), 3).unwrap();
    let ctx = GapContext {
        generator: &m,
        vocab: &v,
        lexicon: g.lexicon(),
    };
    let opts = GapOptions {
        batch_size: 3,
        ..Default::default()
    };
    for s in GapStrategy::ALL {
        let h = difficulty_gap(&m, ctx, &d, s, &opts).unwrap();
        assert_eq!(h.values.len() + h.skipped, d.len(), "{s}");
        assert!(h.values.iter().all(|x| (-1.0..=1.0).contains(x)));
    }
    assert_eq!(
        difficulty_gap(&m, ctx, &d, GapStrategy::InBatch, &opts).unwrap(),
        difficulty_gap(&m, ctx, &d, GapStrategy::InBatch, &opts).unwrap()
    );
}

proptest! {
    #[test]
    fn recall_is_monotone_and_rank_based(
        raw in proptest::collection::vec(0.0f64..1.0, 4 * 20),
    ) {
        let (_, _, d) = data(4);
        let images = &d.images;
        let captions = 20;
        let owner: Vec<usize> = (0..captions).map(|c| c / 5).collect();
        let m = ScoreMatrix { scores: raw.clone(), images: images.len(), captions, owner: owner.clone() };
        let r = RetrievalReport::from_matrix(&m);
        prop_assert!(r.i2t[0] <= r.i2t[1] && r.i2t[1] <= r.i2t[2]);
        prop_assert!(r.t2i[0] <= r.t2i[1] && r.t2i[1] <= r.t2i[2]);
        let squashed = ScoreMatrix { scores: raw.iter().map(|x| (3.0 * x).exp()).collect(), images: images.len(), captions, owner };
        prop_assert_eq!(RetrievalReport::from_matrix(&squashed), r);
    }
}

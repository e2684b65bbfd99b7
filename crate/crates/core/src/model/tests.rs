use super::*;
use crate::datagen::{generate_dataset, Dataset, Grammar};

fn tiny_config(vocab: usize, d_img: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 16,
        regions: 8,
        d_img,
        max_len: MAX_CAPTION_LEN,
    }
}

fn sample() -> (Grammar, Dataset) {
    let g = Grammar::new();
    let data = generate_dataset(&g, 2, 0);
    let ds = Dataset::from_records(&data.records, &g.vocabulary()).unwrap();
    (g, ds)
}

#[test]
fn zero_model_is_uninformative() {
    let (g, ds) = sample();
    let cfg = tiny_config(g.vocabulary().len(), ds.images[0].region_dim());
    let m = MatchModel::zeros(cfg).unwrap();
    let im = &ds.images[0];
    let cap = &im.captions[0];
    assert_eq!(m.itm_score(im, cap).unwrap(), 0.5);
    let wod = m.wod_probs(im, cap).unwrap();
    assert_eq!(wod.shape(), [cap.len(), 2]);
    assert!(wod.data().iter().all(|&p| p == 0.5));
    let woc = m.woc_logits(im, cap).unwrap();
    assert!(woc.data().iter().all(|&x| x == 0.0));
}

#[test]
fn head_shapes_and_ranges() {
    let (g, ds) = sample();
    let vocab = g.vocabulary();
    let cfg = tiny_config(vocab.len(), ds.images[0].region_dim());
    let m = MatchModel::new(cfg, 1).unwrap();
    let im = &ds.images[0];
    let cap = &im.captions[0];
    let s = m.itm_score(im, cap).unwrap();
    assert!(s > 0.0 && s < 1.0);
    let wod = m.wod_probs(im, cap).unwrap();
    for r in 0..wod.rows() {
        assert!((wod.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(m.woc_logits(im, cap).unwrap().shape(), [cap.len(), vocab.len()]);

    let mut ids = cap.ids().to_vec();
    ids[1] = MASK_ID;
    assert_eq!(m.mlm_logits(im, &ids).unwrap().shape(), [ids.len(), vocab.len()]);
    assert!(matches!(m.mlm_logits(im, cap.ids()), Err(Error::NothingToPredict)));
    assert_eq!(Error::NothingToPredict.to_string(), "nothing to predict");
}

#[test]
fn input_validation() {
    let (g, ds) = sample();
    let cfg = tiny_config(g.vocabulary().len(), ds.images[0].region_dim());
    let m = MatchModel::new(cfg, 1).unwrap();
    let im = &ds.images[0];
    let long = vec![5; MAX_CAPTION_LEN + 1];
    let mut tape = m.tape();
    assert!(matches!(
        m.encode(&mut tape, im, &long),
        Err(Error::CaptionTooLong { len: 25, max: 24 })
    ));
    let mut wrong = im.clone();
    wrong.regions = Tensor::zeros(&[3, im.region_dim()]);
    assert!(matches!(m.itm_score(&wrong, &im.captions[0]), Err(Error::ShapeMismatch { .. })));

    let mut bad = cfg;
    bad.heads = 3;
    assert!(MatchModel::new(bad, 0).is_err());
}

#[test]
fn region_order_does_not_change_the_score() {
    let (g, ds) = sample();
    let cfg = tiny_config(g.vocabulary().len(), ds.images[0].region_dim());
    let m = MatchModel::new(cfg, 2).unwrap();
    let im = &ds.images[0];
    let mut rows: Vec<Vec<f64>> = (0..im.region_count()).map(|r| im.regions.row(r).to_vec()).collect();
    rows.reverse();
    let mut flipped = im.clone();
    flipped.regions = Tensor::from_rows(&rows).unwrap();
    let a = m.itm_score(im, &im.captions[0]).unwrap();
    let b = m.itm_score(&flipped, &im.captions[0]).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn parameter_names_are_grouped() {
    let (g, ds) = sample();
    let cfg = tiny_config(g.vocabulary().len(), ds.images[0].region_dim());
    let m = MatchModel::new(cfg, 0).unwrap();
    for (_, p) in m.params().iter() {
        assert!(
            p.name.starts_with(BACKBONE_PREFIX) || p.name.starts_with("head."),
            "{}",
            p.name
        );
    }
    let restored = MatchModel::from_params(cfg, m.params().clone()).unwrap();
    assert_eq!(restored, m);
}

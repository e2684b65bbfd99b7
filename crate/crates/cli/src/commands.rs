//! Subcommand bodies. Each returns `Err(Failure)` carrying the exit code.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tags_core::datagen::{generate_dataset, load_checkpoint, read_jsonl, save_checkpoint, write_jsonl, Dataset, Grammar};
use tags_core::eval::{difficulty_gap, recall_at_k, GapContext, GapStrategy, OracleScorer};
use tags_core::generator::generate_pool;
use tags_core::model::MatchModel;
use tags_core::scenegraph::{mask_candidates, parse_scene_graph};
use tags_core::training::{StepReport, Trainer};

use crate::config::{ConfigError, RunConfig};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self {
            code: EXIT_USAGE,
            message: e.0,
        }
    }
}

impl From<tags_core::Error> for Failure {
    fn from(e: tags_core::Error) -> Self {
        runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    }
}

type Outcome = std::result::Result<(), Failure>;

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> std::result::Result<&'a Path, Failure> {
    path.as_deref()
        .ok_or_else(|| ConfigError(format!("missing required key {key:?}")).into())
}

fn load_data(config: &RunConfig, grammar: &Grammar) -> std::result::Result<Dataset, Failure> {
    let records = read_jsonl(required(&config.data, "data")?)?;
    Ok(Dataset::from_records(&records, &grammar.vocabulary())?)
}

fn load_model(config: &RunConfig, grammar: &Grammar) -> std::result::Result<MatchModel, Failure> {
    let model = load_checkpoint(required(&config.checkpoint, "checkpoint")?)?;
    let vocab = grammar.vocabulary().len();
    if model.config().vocab_size != vocab {
        return Err(runtime(format!(
            "checkpoint vocabulary has {} entries, expected {vocab}",
            model.config().vocab_size
        )));
    }
    Ok(model)
}

fn create(path: &Path) -> std::result::Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn fmt_part(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn datagen(config: &RunConfig) -> Outcome {
    let out = required(&config.out, "out")?;
    let grammar = Grammar::new();
    let generated = generate_dataset(&grammar, config.n, config.train.seed);
    write_jsonl(&generated.records, out)?;
    println!("wrote {} images to {}", config.n, out.display());
    Ok(())
}

pub fn train(config: &RunConfig) -> Outcome {
    let checkpoint = required(&config.checkpoint, "checkpoint")?;
    let grammar = Grammar::new();
    let vocab = grammar.vocabulary();
    let data = load_data(config, &grammar)?;
    let d_img = data
        .images
        .first()
        .ok_or_else(|| runtime("dataset is empty"))?
        .region_dim();
    let model = MatchModel::new(config.model_config(vocab.len(), d_img), config.train.seed)?;
    let mut trainer = Trainer::new(model, vocab, grammar.lexicon(), data, config.train)?;

    let mut metrics = match &config.metrics {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{}", StepReport::CSV_HEADER)?;
            Some(w)
        }
        None => None,
    };
    let mut last: Option<StepReport> = None;
    let mut io_error = None;
    trainer.run(config.steps, |r| {
        if let Some(w) = metrics.as_mut() {
            if let Err(e) = writeln!(w, "{}", r.csv_row()) {
                io_error.get_or_insert(e);
            }
        }
        last = Some(r.clone());
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    save_checkpoint(trainer.model(), checkpoint)?;
    // The resolved configuration, readable again with --config.
    let mut resolved = checkpoint.as_os_str().to_owned();
    resolved.push(".cfg");
    fs::write(&resolved, config.to_text())?;

    match last {
        Some(r) => println!(
            "step {} irtm {} mlm {} istm {} wod {} woc {} pool {:.2}",
            r.step,
            fmt_part(r.l_irtm),
            fmt_part(r.l_mlm),
            fmt_part(r.l_istm),
            fmt_part(r.l_wod),
            fmt_part(r.l_woc),
            r.mean_pool_size
        ),
        None => println!("no steps run"),
    }
    println!("checkpoint written to {}", checkpoint.display());
    Ok(())
}

pub fn generate(config: &RunConfig) -> Outcome {
    let out = required(&config.out, "out")?;
    let grammar = Grammar::new();
    let vocab = grammar.vocabulary();
    let lexicon = grammar.lexicon();
    let data = load_data(config, &grammar)?;
    let model = load_model(config, &grammar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut w = create(out)?;
    let mut lines = 0;
    for image in &data.images {
        let caption = &image.captions[0];
        let candidates = mask_candidates(&parse_scene_graph(caption, lexicon), caption);
        let pool = match generate_pool(&model, &model, &vocab, image, &candidates, &config.generation(), &mut rng) {
            Ok(p) => p,
            Err(tags_core::Error::UnmaskableCaption) => continue,
            Err(e) => return Err(e.into()),
        };
        for item in pool {
            let line = json!({
                "image_id": image.image_id,
                "source": item.source.surfaces().join(" "),
                "negative": item.caption.surfaces().join(" "),
                "replaced_positions": item.replaced_positions,
                "itm": item.itm,
            });
            writeln!(w, "{line}")?;
            lines += 1;
        }
    }
    w.flush()?;
    println!("wrote {lines} negatives to {}", out.display());
    Ok(())
}

pub fn eval(config: &RunConfig) -> Outcome {
    let grammar = Grammar::new();
    let data = load_data(config, &grammar)?;
    let report = if config.oracle {
        recall_at_k(&OracleScorer, &data.images)?
    } else {
        recall_at_k(&load_model(config, &grammar)?, &data.images)?
    };
    println!("{report}");
    if let Some(out) = &config.out {
        fs::write(out, report.to_csv()).map_err(|e| runtime(format!("cannot write {}: {e}", out.display())))?;
    }
    Ok(())
}

pub fn compare(config: &RunConfig) -> Outcome {
    let out = required(&config.out, "out")?;
    let grammar = Grammar::new();
    let vocab = grammar.vocabulary();
    let data = load_data(config, &grammar)?;
    let model = load_model(config, &grammar)?;
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    let ctx = GapContext {
        generator: &model,
        vocab: &vocab,
        lexicon: grammar.lexicon(),
    };
    for strategy in GapStrategy::ALL {
        let hist = difficulty_gap(&model, ctx, &data, strategy, &config.gap_options())?;
        let path = out.join(format!("gap_{strategy}.csv"));
        fs::write(&path, hist.to_csv()).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
        println!(
            "{strategy}: mean gap {} over {} images ({} skipped)",
            fmt_part(hist.mean()),
            hist.values.len(),
            hist.skipped
        );
    }
    Ok(())
}

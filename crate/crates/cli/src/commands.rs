use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::{ControlFlow, Range};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use glimpse::data::{
    build_dataset, decode_caption, generate_corpus, occupancy_raster, read_annotations, split_ranges,
    write_annotations, AnnotationDataset, Relation, SceneSpec, Vocabulary,
};
use glimpse::decoder::{
    generate, read_checkpoint, write_checkpoint, ContextMode, Decoder, DecoderParams, Mode, ModelDims, Strategy,
};
use glimpse::evalviz::{alignment_score, bleu, export_heatmaps, render_attention, DEFAULT_SIGMA};
use glimpse::training::{train as run_training, Example, TrainError};
use glimpse::verify::{self, Fault, Level};

use crate::config::RunConfig;
use crate::{
    CaptionArgs, Classify, CmdResult, Code, EvaluateArgs, Failure, FaultArg, GenDataArgs, LevelArg, SplitArg,
    StrategyArg, TrainArgs, VerifyArgs,
};

/// Sidecar holding the vocabulary next to a dataset file.
pub fn vocab_path(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".vocab");
    PathBuf::from(name)
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::new(Code::Usage, anyhow!(msg.into()))
}

fn parse_relation(name: &str) -> Result<Relation, Failure> {
    match name {
        "single" => Ok(Relation::Single),
        "left_of" | "left-of" => Ok(Relation::LeftOf),
        "above" => Ok(Relation::Above),
        other => Err(usage(format!(
            "unknown relation `{other}` (expected single, left_of or above)"
        ))),
    }
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let mut spec = SceneSpec::default();
    if let Some(v) = a.grid_side {
        spec.grid_side = v;
    }
    if let Some(v) = a.colors {
        spec.colors = v;
    }
    if let Some(v) = a.shapes {
        spec.shapes = v;
    }
    if let Some(v) = a.relations {
        spec.relations = v.iter().map(|s| parse_relation(s)).collect::<Result<_, _>>()?;
    }
    if let Some(v) = a.noise {
        spec.noise_sigma = v;
    }
    spec.validate().or_exit(Code::Usage, "invalid scene spec")?;

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let scenes = generate_corpus(&spec, a.count, &mut rng).or_exit(Code::Usage, "cannot generate corpus")?;
    let vocab = spec.vocabulary();
    let data = build_dataset(&scenes, &spec, &vocab, &mut rng).or_exit(Code::Data, "cannot encode corpus")?;
    write_annotations(&data, &a.out).or_exit(Code::Data, &format!("cannot write {}", a.out.display()))?;
    let sidecar = vocab_path(&a.out);
    vocab
        .write(&sidecar)
        .or_exit(Code::Data, &format!("cannot write {}", sidecar.display()))?;

    let [tr, va, te] = split_ranges(data.len());
    println!(
        "wrote {} records ({} train / {} val / {} test) to {}",
        data.len(),
        tr.len(),
        va.len(),
        te.len(),
        a.out.display()
    );
    println!(
        "locations={} features={} vocab={}",
        data.locations, data.features, data.vocab_size
    );
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &data.records {
        *histogram.entry(r.caption.len()).or_default() += 1;
    }
    println!("caption length histogram (tokens incl. end):");
    for (len, n) in histogram {
        println!("  {len:>3}  {n}");
    }
    Ok(())
}

fn load_data(path: &Path) -> Result<AnnotationDataset, Failure> {
    read_annotations(path).or_exit(Code::Data, &format!("cannot read dataset {}", path.display()))
}

fn load_vocab(data: &Path) -> Option<Vocabulary> {
    Vocabulary::read(&vocab_path(data)).ok()
}

fn training_failure(e: TrainError) -> Failure {
    let code = match e {
        TrainError::NonFinite(_) | TrainError::Diverged { .. } => Code::Numeric,
        TrainError::Config(_) => Code::Usage,
        _ => Code::Data,
    };
    Failure::new(code, anyhow::Error::new(e).context("training failed"))
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut config = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply(&a)?;
    let data_path = config
        .paths
        .data
        .clone()
        .ok_or_else(|| usage("no dataset given (--data or [paths] data)"))?;
    let out_dir = config
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| usage("no output directory given (--out-dir or [paths] out_dir)"))?;

    let data = load_data(&data_path)?;
    let [tr, va, _] = split_ranges(data.len());
    if tr.is_empty() || va.is_empty() {
        return Err(Failure::new(
            Code::Data,
            anyhow!(
                "dataset of {} records is too small to split into training and validation",
                data.len()
            ),
        ));
    }
    let examples: Vec<Example> = data.records.iter().map(|r| r.example()).collect();
    let train_end = config.limit.map_or(tr.end, |n| tr.start + n.clamp(1, tr.len()));

    let dims = ModelDims {
        vocab: data.vocab_size,
        embed: config.model.embed,
        hidden: config.model.hidden,
        features: data.features,
        attn: config.model.attn,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let params = DecoderParams::random(dims, &mut rng).or_exit(Code::Usage, "invalid model dimensions")?;

    fs::create_dir_all(&out_dir).or_exit(Code::Data, &format!("cannot create {}", out_dir.display()))?;
    fs::write(out_dir.join("config.toml"), config.to_toml()).or_exit(Code::Data, "cannot write config.toml")?;
    let log_path = out_dir.join("metrics.log");
    let mut log = BufWriter::new(File::create(&log_path).or_exit(Code::Data, "cannot create metrics.log")?);
    let mut log_error = None;

    let outcome = run_training(
        &examples[tr.start..train_end],
        params,
        &examples[va],
        &config.train,
        |m| {
            println!("{m}");
            if let Err(e) = writeln!(log, "{m}").and_then(|_| log.flush()) {
                log_error = Some(e);
                return ControlFlow::Break(());
            }
            ControlFlow::Continue(())
        },
    )
    .map_err(training_failure)?;
    if let Some(e) = log_error {
        return Err(Failure::new(
            Code::Data,
            anyhow::Error::new(e).context("cannot write metrics.log"),
        ));
    }

    let ckpt = out_dir.join("checkpoint.ckpt");
    write_checkpoint(&outcome.params, &ckpt).or_exit(Code::Data, "cannot write checkpoint")?;
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "best epoch {} (bleu1={:.4} bleu4={:.4}); checkpoint {}",
        outcome.best_epoch,
        best.bleu[0],
        best.bleu[3],
        ckpt.display()
    );
    Ok(())
}

/// Loads a checkpoint and checks it against the dataset it will read.
fn load_model(checkpoint: &Path, data: &AnnotationDataset) -> Result<DecoderParams, Failure> {
    let params =
        read_checkpoint(checkpoint).or_exit(Code::Data, &format!("cannot read checkpoint {}", checkpoint.display()))?;
    let dims = params.dims();
    if dims.vocab != data.vocab_size || dims.features != data.features {
        return Err(Failure::new(
            Code::Data,
            anyhow!(
                "checkpoint expects vocabulary {} and feature size {}, dataset has vocabulary {} and feature size {}",
                dims.vocab,
                dims.features,
                data.vocab_size,
                data.features
            ),
        ));
    }
    Ok(params)
}

fn split_range(split: SplitArg, n: usize) -> Range<usize> {
    let [tr, va, te] = split_ranges(n);
    match split {
        SplitArg::Train => tr,
        SplitArg::Val => va,
        SplitArg::Test => te,
        SplitArg::All => 0..n,
    }
}

fn render_words(tokens: &[usize], vocab: Option<&Vocabulary>) -> Vec<String> {
    match vocab {
        Some(v) => decode_caption(tokens, v),
        None => tokens
            .iter()
            .take_while(|&&t| t != glimpse::decoder::EOS)
            .map(|t| t.to_string())
            .collect(),
    }
}

pub fn caption(a: CaptionArgs) -> CmdResult {
    if a.width == 0 {
        return Err(usage("--width must be at least 1"));
    }
    if !(a.temperature > 0.0 && a.temperature.is_finite()) {
        return Err(usage("--temperature must be positive"));
    }
    if a.max_len == 0 {
        return Err(usage("--max-len must be at least 1"));
    }
    let data = load_data(&a.data)?;
    let params = load_model(&a.checkpoint, &data)?;
    let vocab = load_vocab(&a.data);
    let strategy = match a.strategy {
        StrategyArg::Greedy => Strategy::Greedy,
        StrategyArg::Beam => Strategy::Beam { width: a.width },
        StrategyArg::Sample => Strategy::Sample {
            temperature: a.temperature,
        },
    };
    let context = ContextMode::for_mode(a.mode.into(), a.sample_attention);
    let mut range = split_range(a.split, data.len());
    if let Some(n) = a.limit {
        range.end = range.end.min(range.start + n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for index in range {
        let record = &data.records[index];
        let (caption, trace) = generate(&record.grid, &params, context, strategy, a.max_len, &mut rng)
            .or_exit(Code::Data, &format!("cannot caption record {index}"))?;
        let words = render_words(caption.tokens(), vocab.as_ref());
        println!("{index}\t{}", words.join(" "));
        if let Some(dir) = &a.viz {
            let mut maps = render_attention(&trace, DEFAULT_SIGMA).or_exit(Code::Data, "cannot render attention")?;
            for (t, map) in maps.iter_mut().enumerate() {
                map.word = Some(words.get(t).cloned().unwrap_or_else(|| "<eos>".to_string()));
            }
            let base = occupancy_raster(&record.grid);
            export_heatmaps(&maps, base.as_ref(), dir, &format!("rec{index:05}"))
                .or_exit(Code::Data, "cannot write heatmaps")?;
        }
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    if a.max_len == 0 {
        return Err(usage("--max-len must be at least 1"));
    }
    let data = load_data(&a.data)?;
    let params = load_model(&a.checkpoint, &data)?;
    let range = split_range(a.split, data.len());
    if range.is_empty() {
        return Err(Failure::new(Code::Data, anyhow!("the selected split is empty")));
    }
    let mode: Mode = a.mode.into();
    let context = ContextMode::for_mode(mode, false);
    let decoder = Decoder::new(&params, data.locations).or_exit(Code::Data, "dataset grid does not fit the model")?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (mut candidates, mut references, mut alignments) = (Vec::new(), Vec::new(), Vec::new());
    let mut log_lik = 0.0;
    for index in range.clone() {
        let r = &data.records[index];
        let (caption, _) = generate(&r.grid, &params, context, Strategy::Greedy, a.max_len, &mut rng)
            .or_exit(Code::Data, &format!("cannot caption record {index}"))?;
        candidates.push(caption.words().to_vec());
        references.push(vec![r.caption.words().to_vec()]);
        let tf = decoder
            .teacher_forced(&r.grid, &r.caption, context, &mut rng)
            .or_exit(Code::Data, &format!("cannot score record {index}"))?;
        log_lik += tf.log_likelihood;
        alignments.extend(alignment_score(&tf.trace, &r.alignment));
    }
    let report = bleu(&candidates, &references, 4).or_exit(Code::Data, "cannot score captions")?;
    if !log_lik.is_finite() {
        return Err(Failure::new(
            Code::Numeric,
            anyhow!("non-finite log-likelihood on the selected split"),
        ));
    }
    println!("records={}", range.len());
    for n in 1..=4 {
        println!("bleu{n}={:.6}", report.bleu(n));
    }
    println!("nll_per_caption={:.6}", -log_lik / range.len() as f64);
    match alignments.is_empty() {
        true => println!("alignment=none"),
        false => println!(
            "alignment={:.6}",
            alignments.iter().sum::<f64>() / alignments.len() as f64
        ),
    }
    Ok(())
}

pub fn verify(a: VerifyArgs) -> CmdResult {
    let level = match a.level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    };
    let fault = a.inject_fault.map(|f| match f {
        FaultArg::Gradient => Fault::GradientBug,
    });
    let results = verify::run(level, fault, |r| println!("{r}"));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    println!("{} checks, {} failed", results.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            Code::Numeric,
            anyhow!("failed checks: {}", failed.join(", ")),
        ))
    }
}

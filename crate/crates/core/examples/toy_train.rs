//! Trains a decoder on the synthetic corpus and reports validation BLEU
//! and test-split alignment.
//!
//! `cargo run --release -p glimpse-core --example toy_train -- [soft|hard] [seconds] [seed]`

use std::env;

use glimpse::attention::AnnotationGrid;
use glimpse::data::{build_dataset, generate_corpus, split_ranges, SceneSpec};
use glimpse::decoder::{ContextMode, Decoder, DecoderParams, Mode, ModelDims};
use glimpse::evalviz::alignment_score;
use glimpse::training::{train, Example, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = env::args().collect();
    let mode = match args.get(1).map(String::as_str) {
        Some("hard") => Mode::Hard,
        _ => Mode::Soft,
    };
    let seconds: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300.0);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let spec = SceneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = generate_corpus(&spec, 5000, &mut rng).unwrap();
    let vocab = spec.vocabulary();
    let data = build_dataset(&scenes, &spec, &vocab, &mut rng).unwrap();
    let [tr, va, te] = split_ranges(data.len());
    let examples: Vec<Example> = data.records.iter().map(|r| r.example()).collect();

    let dims = ModelDims {
        vocab: vocab.len(),
        embed: 32,
        hidden: 64,
        features: spec.feature_dim(),
        attn: 32,
    };
    let params = DecoderParams::random(dims, &mut rng).unwrap();
    let mut config = TrainConfig {
        mode,
        seed,
        time_limit_secs: Some(seconds),
        max_epochs: 100,
        ..TrainConfig::default()
    };
    if let Ok(v) = env::var("LAMBDA") {
        config.soft.lambda_penalty = v.parse().unwrap();
    }
    if let Ok(v) = env::var("PATIENCE") {
        config.patience = v.parse().unwrap();
    }
    if let Ok(v) = env::var("LR") {
        config.optimizer.learning_rate = v.parse().unwrap();
    }
    if let Ok(v) = env::var("DROPOUT") {
        config.soft.dropout_rate = v.parse().unwrap();
        config.hard.dropout_rate = v.parse().unwrap();
    }
    let out = train(&examples[tr], params, &examples[va.clone()], &config, |m| {
        println!("{m}");
        std::ops::ControlFlow::Continue(())
    })
    .unwrap();
    println!("best epoch {}", out.best_epoch);

    let decoder = Decoder::new(&out.params, spec.locations()).unwrap();
    let mut scores = Vec::new();
    for r in &data.records[te] {
        let grid: &AnnotationGrid = &r.grid;
        let tf = decoder
            .teacher_forced(grid, &r.caption, ContextMode::for_mode(mode, false), &mut rng)
            .unwrap();
        scores.extend(alignment_score(&tf.trace, &r.alignment));
    }
    println!("alignment {:.4}", scores.iter().sum::<f64>() / scores.len() as f64);
    if env::var("DEBUG").is_ok() {
        use glimpse::decoder::{generate, Strategy};
        use glimpse::training::{soft_loss, SoftLossConfig};
        let cfg = SoftLossConfig {
            lambda_penalty: 0.0,
            dropout_rate: 0.0,
        };
        for r in &data.records[va.start..va.start + 12] {
            let tf = decoder
                .teacher_forced(&r.grid, &r.caption, ContextMode::Soft, &mut rng)
                .unwrap();
            let g = soft_loss(&[r.example()], &out.params, &cfg, &mut rng).unwrap();
            let (cap, _) = generate(&r.grid, &out.params, ContextMode::Soft, Strategy::Greedy, 20, &mut rng).unwrap();
            let words = |t: &[usize]| t.iter().map(|&i| vocab.token(i).unwrap()).collect::<Vec<_>>().join(" ");
            println!(
                "tf {:.4} graph {:.4} | {} || {}",
                -tf.log_likelihood,
                g.nll,
                words(r.caption.tokens()),
                words(cap.tokens())
            );
        }
    }
}

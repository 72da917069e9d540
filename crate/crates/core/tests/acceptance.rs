//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! Set `GLIMPSE_ACCEPTANCE_SKIP_TRAINING=1` to skip the two training
//! criteria (they are then reported as SKIP, and the run still fails).

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glimpse::attention::{AnnotationGrid, AttentionWeights};
use glimpse::data::{
    build_dataset, generate_corpus, read_annotations_bytes, split_ranges, write_annotations_bytes, DataError, SceneSpec,
};
use glimpse::decoder::{
    read_checkpoint_bytes, write_checkpoint_bytes, CaptionSequence, CheckpointError, ContextMode, Decoder,
    DecoderParams, Mode, ModelDims, BOS,
};
use glimpse::evalviz::{alignment_score, bleu};
use glimpse::graphcore::{GradientMap, Tensor};
use glimpse::training::{
    exact_hard_objective, soft_loss, train, BaselineState, Example, HardLossConfig, HardSampler, SoftLossConfig,
    TrainConfig,
};

type Outcome = Result<String, String>;

fn random_grid(rng: &mut ChaCha8Rng, locations: usize, features: usize) -> AnnotationGrid {
    let rows: Vec<Vec<f64>> = (0..locations)
        .map(|_| (0..features).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    AnnotationGrid::from_rows(&rows).unwrap()
}

fn random_caption(rng: &mut ChaCha8Rng, words: usize, vocab: usize) -> CaptionSequence {
    let w: Vec<usize> = (0..words).map(|_| rng.random_range(3..vocab)).collect();
    CaptionSequence::from_words(&w).unwrap()
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        vocab: 6,
        embed: 3,
        hidden: 4,
        features: 3,
        attn: 3,
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences of `f` over every parameter entry, in the order of
/// `params.iter()`.
fn numeric_gradient(
    params: &DecoderParams,
    step: f64,
    mut f: impl FnMut(&DecoderParams) -> f64,
) -> Vec<(String, Vec<f64>)> {
    let dims = params.dims();
    let base: BTreeMap<String, Tensor> = params.tensors().clone();
    let mut out = Vec::new();
    for (name, t) in &base {
        let mut grad = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let mut eval = |delta: f64| {
                let mut moved = base.clone();
                moved.get_mut(name).unwrap().data_mut()[i] += delta;
                f(&DecoderParams::from_tensors(dims, moved).unwrap())
            };
            grad.push((eval(step) - eval(-step)) / (2.0 * step));
        }
        out.push((name.clone(), grad));
    }
    out
}

/// Largest relative error per block; every block must be below `tol`.
fn check_blocks(analytic: &GradientMap, numeric: &[(String, Vec<f64>)], tol: f64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (name, n) in numeric {
        let a = analytic
            .get(name)
            .ok_or_else(|| format!("no analytic gradient for {name}"))?;
        let e = a.data().iter().zip(n).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max);
        if e >= tol {
            return Err(format!("block {name}: relative error {e:.3e}"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn c1_gradient() -> Outcome {
    let dims = ModelDims {
        vocab: 12,
        embed: 8,
        hidden: 8,
        features: 6,
        attn: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let params = DecoderParams::random(dims, &mut rng).unwrap();
    let grid = random_grid(&mut rng, 4, 6);
    // three tokens: two words and the end token
    let caption = random_caption(&mut rng, 2, 12);
    assert_eq!(caption.len(), 3);
    let batch = [Example {
        grid: &grid,
        caption: &caption,
    }];
    let cfg = SoftLossConfig {
        lambda_penalty: 1.0,
        dropout_rate: 0.0,
    };
    let out = soft_loss(&batch, &params, &cfg, &mut rng).unwrap();
    if out.stats.penalty < 1e-3 {
        return Err("instance has a vanishing penalty term".into());
    }
    let numeric = numeric_gradient(&params, 1e-5, |p| {
        soft_loss(&batch, p, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .loss
    });
    let worst = check_blocks(&out.grads, &numeric, 1e-4)?;
    Ok(format!("{} blocks, max relative error {worst:.2e}", numeric.len()))
}

fn c2_nwgm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let locations = rng.random_range(2..=5);
        let dims = ModelDims {
            vocab: 9,
            embed: 4,
            hidden: 5,
            features: 3,
            attn: 4,
        };
        let params = DecoderParams::random(dims, &mut rng).unwrap();
        let grid = random_grid(&mut rng, locations, 3);
        let decoder = Decoder::new(&params, locations).unwrap();
        let prep = decoder.prepare(&grid).unwrap();
        let (alpha, _) = decoder.attend(&prep.grid_proj, &prep.state).unwrap();
        let logits = decoder.per_location_logits(&grid, &prep.state, BOS).unwrap();
        let a = alpha.as_slice();
        let k = logits[0].len();
        let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l.data())).collect();
        let geo: Vec<f64> = (0..k)
            .map(|j| a.iter().zip(&probs).map(|(w, p)| p[j].powf(*w)).product())
            .collect();
        let z: f64 = geo.iter().sum();
        let expected: Vec<f64> = (0..k)
            .map(|j| a.iter().zip(&logits).map(|(w, l)| w * l.data()[j]).sum())
            .collect();
        for (g, e) in geo.iter().zip(softmax(&expected)) {
            worst = worst.max((g / z - e).abs());
        }
    }
    if worst <= 1e-10 {
        Ok(format!("100 instances, max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.3e}"))
    }
}

/// Every location sequence with its prior probability and the caption's
/// log-likelihood given it, by stepping the decoder with fixed locations.
fn enumerate(params: &DecoderParams, grid: &AnnotationGrid, caption: &CaptionSequence) -> Vec<(f64, f64)> {
    let l = grid.locations();
    let c = caption.len();
    let decoder = Decoder::new(params, l).unwrap();
    let prep = decoder.prepare(grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    for code in 0..l.pow(c as u32) {
        let mut state = prep.state.clone();
        let (mut prior, mut ll, mut prev, mut rest) = (1.0, 0.0, BOS, code);
        for &token in caption.tokens() {
            let loc = rest % l;
            rest /= l;
            let step = decoder
                .step(grid, &prep.grid_proj, &state, prev, ContextMode::Fixed(loc), &mut rng)
                .unwrap();
            prior *= step.weights.as_slice()[loc];
            ll += step.distribution.data()[token].ln();
            state = step.state;
            prev = token;
        }
        out.push((prior, ll));
    }
    out
}

fn bound_value(params: &DecoderParams, grid: &AnnotationGrid, caption: &CaptionSequence) -> f64 {
    enumerate(params, grid, caption).iter().map(|(p, ll)| p * ll).sum()
}

fn log_marginal(params: &DecoderParams, grid: &AnnotationGrid, caption: &CaptionSequence) -> f64 {
    let terms: Vec<f64> = enumerate(params, grid, caption)
        .iter()
        .map(|(p, ll)| p.ln() + ll)
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

struct McInstance {
    params: DecoderParams,
    grid: AnnotationGrid,
    caption: CaptionSequence,
    exact: Vec<f64>,
}

fn mc_instance(seed: u64) -> McInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DecoderParams::random(tiny_dims(), &mut rng).unwrap();
    let grid = random_grid(&mut rng, 3, 3);
    let caption = random_caption(&mut rng, 1, 6);
    assert_eq!(caption.len(), 2);
    let exact = numeric_gradient(&params, 1e-5, |p| bound_value(p, &grid, &caption))
        .into_iter()
        .flat_map(|(_, g)| g)
        .collect();
    McInstance {
        params,
        grid,
        caption,
        exact,
    }
}

fn plain_config() -> HardLossConfig {
    HardLossConfig {
        lambda_r: 1.0,
        lambda_e: 0.0,
        sample_count: 1,
        expectation_substitution_prob: 0.0,
        baseline_decay: 0.9,
        dropout_rate: 0.0,
    }
}

/// Single-sample estimates drawn with a fixed or running baseline.
fn draw(
    inst: &McInstance,
    samples: usize,
    seed: u64,
    mut baseline: Option<BaselineState>,
    fixed: f64,
) -> Vec<Vec<f64>> {
    let sampler = HardSampler::new(&inst.params, inst.caption.len(), inst.grid.locations(), false).unwrap();
    let ex = Example {
        grid: &inst.grid,
        caption: &inst.caption,
    };
    let cfg = plain_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let b = baseline.map_or(fixed, |s| s.b);
            let s = sampler.sample(ex, &cfg, b, &mut rng).unwrap();
            if let Some(state) = baseline.as_mut() {
                *state = state.update(s.log_likelihood, cfg.baseline_decay);
            }
            s.grads.flatten()
        })
        .collect()
}

fn mean_var(draws: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = draws.len() as f64;
    let dim = draws[0].len();
    let mean: Vec<f64> = (0..dim).map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / n).collect();
    let var = (0..dim)
        .map(|i| draws.iter().map(|d| (d[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    (mean, var)
}

fn within_3se(exact: &[f64], draws: &[Vec<f64>]) -> f64 {
    let (mean, var) = mean_var(draws);
    let n = draws.len() as f64;
    let ok = exact
        .iter()
        .zip(&mean)
        .zip(&var)
        .filter(|((e, m), v)| (*m - *e).abs() <= 3.0 * (*v / n).sqrt() + 1e-9)
        .count();
    ok as f64 / exact.len() as f64
}

fn c3_unbiased() -> Outcome {
    let inst = mc_instance(103);
    let frac = within_3se(&inst.exact, &draw(&inst, 20_000, 1, None, 0.0));
    let msg = format!("{:.2}% of {} coordinates within 3 SE", 100.0 * frac, inst.exact.len());
    if frac >= 0.99 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c4_baseline() -> Outcome {
    let inst = mc_instance(104);
    let shifted = within_3se(&inst.exact, &draw(&inst, 20_000, 2, None, -2.5));
    if shifted < 0.99 {
        return Err(format!(
            "constant baseline -2.5: only {:.2}% within 3 SE",
            100.0 * shifted
        ));
    }
    // let the running baseline settle before measuring
    let sampler = HardSampler::new(&inst.params, inst.caption.len(), inst.grid.locations(), false).unwrap();
    let ex = Example {
        grid: &inst.grid,
        caption: &inst.caption,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut warm = BaselineState::default();
    for _ in 0..200 {
        let s = sampler.sample(ex, &plain_config(), warm.b, &mut rng).unwrap();
        warm = warm.update(s.log_likelihood, plain_config().baseline_decay);
    }
    let running = draw(&inst, 5_000, 4, Some(warm), 0.0);
    let zero = draw(&inst, 5_000, 5, None, 0.0);
    let (m1, v1) = mean_var(&running);
    let (m0, v0) = mean_var(&zero);
    let n = 5_000.0;
    let se_of_var = |d: &[Vec<f64>], m: &[f64], v: &[f64], i: usize| {
        let m4 = d.iter().map(|x| (x[i] - m[i]).powi(4)).sum::<f64>() / n;
        ((m4 - v[i] * v[i]).max(0.0) / n).sqrt()
    };
    let dim = v1.len();
    let worse = (0..dim)
        .filter(|&i| {
            let s1 = se_of_var(&running, &m1, &v1, i);
            let s0 = se_of_var(&zero, &m0, &v0, i);
            v1[i] - v0[i] > 3.0 * (s1 * s1 + s0 * s0).sqrt() + 1e-12
        })
        .count();
    let frac = worse as f64 / dim as f64;
    let msg = format!(
        "b=-2.5 unbiased on {:.2}%; running baseline worse on {:.1}% of coordinates (total variance {:.3e} vs {:.3e})",
        100.0 * shifted,
        100.0 * frac,
        v1.iter().sum::<f64>(),
        v0.iter().sum::<f64>()
    );
    if frac <= 0.10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c5_lower_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut min_margin = f64::INFINITY;
    for _ in 0..50 {
        let params = DecoderParams::random(tiny_dims(), &mut rng).unwrap();
        let locations = rng.random_range(2..=4);
        let grid = random_grid(&mut rng, locations, 3);
        let words = rng.random_range(0..=2);
        let caption = random_caption(&mut rng, words, 6);
        let bound = bound_value(&params, &grid, &caption);
        let exact = log_marginal(&params, &grid, &caption);
        let library = exact_hard_objective(&grid, &caption, &params).unwrap();
        if (library.value - bound).abs() > 1e-9 || (library.log_marginal - exact).abs() > 1e-9 {
            return Err("library objective disagrees with the enumeration".into());
        }
        min_margin = min_margin.min(exact - bound);
    }
    // identical annotations make the likelihood location-independent
    let params = DecoderParams::random(tiny_dims(), &mut rng).unwrap();
    let row = vec![0.3, -0.7, 0.1];
    let flat = AnnotationGrid::from_rows(&[row.clone(), row.clone(), row]).unwrap();
    let caption = random_caption(&mut rng, 2, 6);
    let gap = log_marginal(&params, &flat, &caption) - bound_value(&params, &flat, &caption);
    if min_margin < -1e-12 {
        return Err(format!("bound violated by {:.3e}", -min_margin));
    }
    if gap.abs() > 1e-12 {
        return Err(format!("location-independent case leaves a gap of {gap:.3e}"));
    }
    Ok(format!("smallest margin {min_margin:.3e}; equality case gap {gap:.1e}"))
}

fn c6_penalty() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let on = SoftLossConfig {
        lambda_penalty: 1.0,
        dropout_rate: 0.0,
    };
    let off = SoftLossConfig {
        lambda_penalty: 0.0,
        ..on
    };
    // the penalty reported by training matches the attention column sums
    for _ in 0..20 {
        let dims = tiny_dims();
        let params = DecoderParams::random(dims, &mut rng).unwrap();
        let l = rng.random_range(2..=4);
        let grid = random_grid(&mut rng, l, 3);
        let words = rng.random_range(0..=3);
        let caption = random_caption(&mut rng, words, 6);
        let tf = Decoder::new(&params, l)
            .unwrap()
            .teacher_forced(&grid, &caption, ContextMode::Soft, &mut rng)
            .unwrap();
        let sums: Vec<f64> = (0..l)
            .map(|i| {
                tf.trace
                    .per_step
                    .iter()
                    .map(|w: &AttentionWeights| w.as_slice()[i])
                    .sum()
            })
            .collect();
        let oracle: f64 = sums.iter().map(|s| (1.0 - s).powi(2)).sum();
        let ex = [Example {
            grid: &grid,
            caption: &caption,
        }];
        let got = soft_loss(&ex, &params, &on, &mut rng).unwrap().stats.penalty;
        if (got - oracle).abs() > 1e-9 {
            return Err(format!("penalty {got} but column sums give {oracle}"));
        }
        let zero = sums.iter().all(|s| (s - 1.0).abs() <= 1e-9);
        if zero != (got <= 1e-9) {
            return Err(format!("penalty {got:.3e} with column sums {sums:?}"));
        }
    }
    // zero parameters attend uniformly, so C = L balances every column
    let params = DecoderParams::zeros(tiny_dims()).unwrap();
    let grid = random_grid(&mut rng, 3, 3);
    let balanced = random_caption(&mut rng, 2, 6);
    let p = soft_loss(
        &[Example {
            grid: &grid,
            caption: &balanced,
        }],
        &params,
        &on,
        &mut rng,
    )
    .unwrap()
    .stats
    .penalty;
    if p.abs() > 1e-9 {
        return Err(format!("balanced uniform attention has penalty {p:.3e}"));
    }
    // gradient of the penalty term alone
    let params = DecoderParams::random(tiny_dims(), &mut rng).unwrap();
    let grid = random_grid(&mut rng, 3, 3);
    let caption = random_caption(&mut rng, 3, 6);
    let ex = [Example {
        grid: &grid,
        caption: &caption,
    }];
    let mut grads = soft_loss(&ex, &params, &on, &mut rng).unwrap().grads;
    grads.accumulate(&soft_loss(&ex, &params, &off, &mut rng).unwrap().grads, -1.0);
    let numeric = numeric_gradient(&params, 1e-5, |p| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        soft_loss(&ex, p, &on, &mut r).unwrap().loss - soft_loss(&ex, p, &off, &mut r).unwrap().loss
    });
    let worst = check_blocks(&grads, &numeric, 1e-4)?;
    Ok(format!(
        "matches column sums on 20 instances; penalty gradient max relative error {worst:.2e}"
    ))
}

struct Toy {
    data: glimpse::data::AnnotationDataset,
    dims: ModelDims,
}

fn toy_corpus() -> Toy {
    let spec = SceneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scenes = generate_corpus(&spec, 5000, &mut rng).unwrap();
    let vocab = spec.vocabulary();
    let data = build_dataset(&scenes, &spec, &vocab, &mut rng).unwrap();
    let dims = ModelDims {
        vocab: vocab.len(),
        embed: 32,
        hidden: 64,
        features: spec.feature_dim(),
        attn: 32,
    };
    Toy { data, dims }
}

/// Trains until the thresholds are met or the budget runs out. Returns
/// the outcome line and the best parameters.
fn toy_train(toy: &Toy, mode: Mode, budget_secs: f64, bleu1: f64, bleu4: f64) -> (Outcome, DecoderParams) {
    let [tr, va, _] = split_ranges(toy.data.len());
    let examples: Vec<Example> = toy.data.records.iter().map(|r| r.example()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = DecoderParams::random(toy.dims, &mut rng).unwrap();
    let mut config = TrainConfig {
        mode,
        seed: 1,
        max_epochs: 1000,
        patience: 50,
        time_limit_secs: Some(budget_secs),
        ..TrainConfig::default()
    };
    config.soft.lambda_penalty = 0.0;
    let started = Instant::now();
    let mut reached: Option<(usize, f64, [f64; 4])> = None;
    let mut last = (0, [0.0; 4]);
    let out = train(&examples[tr], params, &examples[va], &config, |m| {
        let elapsed = started.elapsed().as_secs_f64();
        last = (m.epoch, m.bleu);
        eprintln!("  {m}");
        if m.bleu[0] >= bleu1 && m.bleu[3] >= bleu4 && elapsed <= budget_secs {
            reached = Some((m.epoch, elapsed, m.bleu));
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    })
    .unwrap();
    let outcome = match reached {
        Some((epoch, secs, b)) => Ok(format!(
            "BLEU-1 {:.3}, BLEU-4 {:.3} at epoch {epoch} after {secs:.0} s",
            b[0], b[3]
        )),
        None => Err(format!(
            "thresholds not met within {budget_secs:.0} s (last epoch {}: BLEU-1 {:.3}, BLEU-4 {:.3})",
            last.0, last.1[0], last.1[3]
        )),
    };
    (outcome, out.params)
}

fn c8_alignment(toy: &Toy, params: &DecoderParams) -> Outcome {
    let [_, _, te] = split_ranges(toy.data.len());
    let decoder = Decoder::new(params, toy.data.locations).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scores = Vec::new();
    for r in &toy.data.records[te] {
        let tf = decoder
            .teacher_forced(&r.grid, &r.caption, ContextMode::Soft, &mut rng)
            .unwrap();
        // mass on the true cell at each aligned word, computed directly
        for &(pos, cell) in &r.alignment {
            scores.push(tf.trace.per_step[pos].as_slice()[cell]);
        }
        if let Some(lib) = alignment_score(&tf.trace, &r.alignment) {
            let own: f64 = r
                .alignment
                .iter()
                .map(|&(p, c)| tf.trace.per_step[p].as_slice()[c])
                .sum::<f64>()
                / r.alignment.len() as f64;
            if (lib - own).abs() > 1e-12 {
                return Err("alignment_score disagrees with the direct computation".into());
            }
        }
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let msg = format!(
        "mean test alignment {mean:.3} over {} words (uniform 0.0625)",
        scores.len()
    );
    if mean >= 0.25 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c9_bleu() -> Outcome {
    let w = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let clipped = bleu(&[w("a a a a")], &[vec![w("a b")]], 1).map_err(|e| e.to_string())?;
    if clipped.bleu(1) != 0.25 {
        return Err(format!("clipping case gave {}", clipped.bleu(1)));
    }
    let same = bleu(
        &[w("a red square left of a blue circle")],
        &[vec![w("a red square left of a blue circle")]],
        4,
    )
    .map_err(|e| e.to_string())?;
    if (1..=4).any(|n| same.bleu(n) != 1.0) {
        return Err("identical pair does not score 1.0".into());
    }
    // unigrams: the×2, cat, on, mat match (5 of 6); bigrams: "the cat",
    // "on the", "the mat" (3 of 5)
    let r = bleu(&[w("the cat sat on the mat")], &[vec![w("the cat is on the mat")]], 2).map_err(|e| e.to_string())?;
    let want2 = (5.0f64 / 6.0 * 3.0 / 5.0).sqrt();
    if r.bleu(1) != 5.0 / 6.0 || (r.bleu(2) - want2).abs() > 1e-15 {
        return Err(format!("modified precision example gave {} / {}", r.bleu(1), r.bleu(2)));
    }
    // multiple references: clip by the max count in any one reference
    let m = bleu(&[w("b b b")], &[vec![w("b x"), w("b b y")]], 1).map_err(|e| e.to_string())?;
    if m.bleu(1) != 2.0 / 3.0 {
        return Err(format!("multi-reference clipping gave {}", m.bleu(1)));
    }
    Ok("clipping 0.25, identity 1.0, hand-computed precisions exact".into())
}

fn tiny_checkpoint(seed: u64) -> Vec<u8> {
    let spec = SceneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = generate_corpus(&spec, 60, &mut rng).unwrap();
    let data = build_dataset(&scenes, &spec, &spec.vocabulary(), &mut rng).unwrap();
    let examples: Vec<Example> = data.records.iter().map(|r| r.example()).collect();
    let dims = ModelDims {
        vocab: data.vocab_size,
        embed: 4,
        hidden: 6,
        features: data.features,
        attn: 4,
    };
    let params = DecoderParams::random(dims, &mut rng).unwrap();
    let mut out = Vec::new();
    for mode in [Mode::Soft, Mode::Hard] {
        let config = TrainConfig {
            mode,
            seed,
            max_epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let o = train(&examples[..48], params.clone(), &examples[48..], &config, |_| {
            ControlFlow::Continue(())
        })
        .unwrap();
        out.extend(write_checkpoint_bytes(&o.params));
    }
    out
}

fn c10_determinism() -> Outcome {
    let spec = SceneSpec::default();
    let dataset = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes = generate_corpus(&spec, 200, &mut rng).unwrap();
        build_dataset(&scenes, &spec, &spec.vocabulary(), &mut rng).unwrap()
    };
    let a = write_annotations_bytes(&dataset(7)).unwrap();
    if a != write_annotations_bytes(&dataset(7)).unwrap() {
        return Err("same seed gave different dataset bytes".into());
    }
    if a == write_annotations_bytes(&dataset(8)).unwrap() {
        return Err("different seeds gave identical datasets".into());
    }
    let back = read_annotations_bytes(&a).unwrap();
    if write_annotations_bytes(&back).unwrap() != a || back != dataset(7) {
        return Err("dataset does not round-trip".into());
    }
    let ck = tiny_checkpoint(9);
    if ck != tiny_checkpoint(9) {
        return Err("same seed gave different checkpoint bytes".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = DecoderParams::random(tiny_dims(), &mut rng).unwrap();
    let bytes = write_checkpoint_bytes(&params);
    let restored = read_checkpoint_bytes(&bytes).unwrap();
    if restored != params || write_checkpoint_bytes(&restored) != bytes {
        return Err("checkpoint does not round-trip".into());
    }
    let (mut bad_data, mut bad_ckpt) = (a.clone(), bytes.clone());
    bad_data[0] ^= 0xff;
    bad_ckpt[3] ^= 0xff;
    if !matches!(read_annotations_bytes(&bad_data), Err(DataError::BadMagic)) {
        return Err("corrupted dataset magic not reported as BadMagic".into());
    }
    if !matches!(read_checkpoint_bytes(&bad_ckpt), Err(CheckpointError::BadMagic)) {
        return Err("corrupted checkpoint magic not reported as BadMagic".into());
    }
    Ok("datasets and trained checkpoints byte-identical per seed; round trips exact; bad magic typed".into())
}

fn report(results: &mut Vec<bool>, n: usize, title: &str, started: Instant, outcome: Outcome) {
    let secs = started.elapsed().as_secs_f64();
    let (status, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {status} [{secs:>7.1}s] {title}: {detail}");
    results.push(outcome.is_ok());
}

fn timed(results: &mut Vec<bool>, n: usize, title: &str, limit_secs: f64, f: impl FnOnce() -> Outcome) {
    let started = Instant::now();
    let outcome = f();
    let secs = started.elapsed().as_secs_f64();
    let outcome = match outcome {
        Ok(d) if secs > limit_secs => Err(format!("{d} (took {secs:.1} s, limit {limit_secs} s)")),
        other => other,
    };
    report(results, n, title, started, outcome);
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    timed(&mut results, 1, "soft-path gradient check", 60.0, c1_gradient);
    timed(&mut results, 2, "NWGM identity", 10.0, c2_nwgm);
    timed(&mut results, 3, "hard estimator unbiased", 300.0, c3_unbiased);
    timed(&mut results, 4, "baseline neutrality and variance", 300.0, c4_baseline);
    timed(&mut results, 5, "variational lower bound", 30.0, c5_lower_bound);
    timed(&mut results, 6, "doubly stochastic penalty", 60.0, c6_penalty);

    if std::env::var_os("GLIMPSE_ACCEPTANCE_SKIP_TRAINING").is_some() {
        println!("criterion  7 SKIP toy-task learning");
        println!("criterion  8 SKIP attention quality");
        results.push(false);
    } else {
        let toy = toy_corpus();
        let started = Instant::now();
        let (soft, soft_params) = toy_train(&toy, Mode::Soft, 600.0, 0.9, 0.5);
        report(&mut results, 7, "toy-task learning (soft)", started, soft);
        let started = Instant::now();
        let (hard, _) = toy_train(&toy, Mode::Hard, 1800.0, 0.8, 0.0);
        report(&mut results, 7, "toy-task learning (hard)", started, hard);
        let started = Instant::now();
        report(
            &mut results,
            8,
            "attention quality",
            started,
            c8_alignment(&toy, &soft_params),
        );
    }

    timed(&mut results, 9, "BLEU oracle", 10.0, c9_bleu);
    timed(&mut results, 10, "determinism and formats", 120.0, c10_determinism);

    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} checks, {failed} failed", results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

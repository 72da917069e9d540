//! Oracle suites runnable outside the test harness.
//!
//! The fast level runs deterministic identities in a few seconds; the full
//! level adds the Monte Carlo checks of the hard-attention estimator.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AnnotationGrid, AttentionWeights};
use crate::data::{build_dataset, generate_corpus, read_annotations_bytes, write_annotations_bytes, SceneSpec};
use crate::decoder::{
    read_checkpoint_bytes, write_checkpoint_bytes, CaptionSequence, Decoder, DecoderParams, ModelDims,
};
use crate::evalviz::bleu;
use crate::graphcore::{central_differences, compare, Tensor};
use crate::training::{
    exact_hard_objective, soft_loss, BaselineState, Example, HardLossConfig, HardSampler, SoftLossConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

/// Deliberate defects for checking that the suites notice them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Adds 0.1 to one analytic gradient entry before comparison.
    GradientBug,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<28} {:>7.2}s  {}", self.name, self.seconds, self.detail)
    }
}

type Check = fn(Option<Fault>) -> Result<String, String>;

const FAST: [(&str, Check); 7] = [
    ("soft_gradient", soft_gradient),
    ("nwgm_identity", nwgm_identity),
    ("exact_hard_gradient", exact_hard_gradient),
    ("lower_bound", lower_bound),
    ("penalty_zero", penalty_zero),
    ("bleu_oracles", bleu_oracles),
    ("file_round_trips", file_round_trips),
];

const FULL: [(&str, Check); 3] = [
    ("estimator_unbiased", estimator_unbiased),
    ("baseline_neutral", baseline_neutral),
    ("variance_reduction", variance_reduction),
];

/// Runs every suite of `level`, calling `progress` after each one.
pub fn run(level: Level, fault: Option<Fault>, mut progress: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let full: &[(&str, Check)] = if level == Level::Full { &FULL } else { &[] };
    FAST.iter()
        .chain(full)
        .map(|&(name, check)| {
            let start = Instant::now();
            let outcome = check(fault);
            let result = CheckResult {
                name,
                passed: outcome.is_ok(),
                detail: outcome.unwrap_or_else(|e| e),
                seconds: start.elapsed().as_secs_f64(),
            };
            progress(&result);
            result
        })
        .collect()
}

fn random_grid<R: Rng>(rng: &mut R, locations: usize, features: usize) -> AnnotationGrid {
    let rows: Vec<Vec<f64>> = (0..locations)
        .map(|_| (0..features).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    AnnotationGrid::from_rows(&rows).expect("finite grid")
}

fn random_caption<R: Rng>(rng: &mut R, words: usize, vocab: usize) -> CaptionSequence {
    let w: Vec<usize> = (0..words).map(|_| rng.random_range(3..vocab)).collect();
    CaptionSequence::from_words(&w).expect("valid tokens")
}

fn err(e: impl fmt::Display) -> String {
    e.to_string()
}

fn soft_gradient(fault: Option<Fault>) -> Result<String, String> {
    let dims = ModelDims {
        vocab: 12,
        embed: 8,
        hidden: 8,
        features: 6,
        attn: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = DecoderParams::random(dims, &mut rng).map_err(err)?;
    let grid = random_grid(&mut rng, 4, 6);
    let caption = random_caption(&mut rng, 2, 12);
    let batch = [Example {
        grid: &grid,
        caption: &caption,
    }];
    let cfg = SoftLossConfig {
        lambda_penalty: 1.0,
        dropout_rate: 0.0,
    };
    let mut analytic = soft_loss(&batch, &params, &cfg, &mut rng).map_err(err)?.grads;
    if fault == Some(Fault::GradientBug) {
        analytic.get_mut("lstm_w").expect("lstm weights").data_mut()[0] += 0.1;
    }
    let names: Vec<&str> = params.names().collect();
    let numeric = central_differences(params.tensors(), &names, 1e-5, |pt| {
        let p = DecoderParams::from_tensors(dims, pt.clone()).map_err(err)?;
        soft_loss(&batch, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .map(|o| o.loss)
            .map_err(err)
    })?;
    let report = compare(&analytic, &numeric, 1e-4);
    if report.passed() {
        Ok(format!("max relative error {:.2e}", report.max_error()))
    } else {
        let bad: Vec<String> = report.failures().map(|f| f.name.clone()).collect();
        Err(format!("gradient mismatch in {}", bad.join(", ")))
    }
}

fn nwgm_identity(_: Option<Fault>) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let locations = rng.random_range(2..=5);
        let dims = ModelDims {
            vocab: 7,
            embed: 4,
            hidden: 5,
            features: 3,
            attn: 4,
        };
        let params = DecoderParams::random(dims, &mut rng).map_err(err)?;
        let grid = random_grid(&mut rng, locations, 3);
        let decoder = Decoder::new(&params, locations).map_err(err)?;
        let prep = decoder.prepare(&grid).map_err(err)?;
        let (alpha, _) = decoder.attend(&prep.grid_proj, &prep.state).map_err(err)?;
        let logits = decoder.per_location_logits(&grid, &prep.state, 0).map_err(err)?;
        let (nwgm, expected) = nwgm_pair(&alpha, &logits);
        for (a, b) in nwgm.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst <= 1e-10 {
        Ok(format!("max deviation {worst:.1e} over 100 instances"))
    } else {
        Err(format!("max deviation {worst:.3e} exceeds 1e-10"))
    }
}

/// Normalised weighted geometric mean of per-location softmaxes, and the
/// softmax of the expected logits.
fn nwgm_pair(alpha: &AttentionWeights, logits: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let k = logits[0].len();
    let softmax = |v: &[f64]| {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let per_location: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l.data())).collect();
    let log_geo: Vec<f64> = (0..k)
        .map(|j| {
            alpha
                .as_slice()
                .iter()
                .zip(&per_location)
                .map(|(a, p)| a * p[j].ln())
                .sum()
        })
        .collect();
    let nwgm = softmax(&log_geo);
    let mean_logits: Vec<f64> = (0..k)
        .map(|j| alpha.as_slice().iter().zip(logits).map(|(a, l)| a * l.data()[j]).sum())
        .collect();
    (nwgm, softmax(&mean_logits))
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

fn exact_hard_gradient(fault: Option<Fault>) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = DecoderParams::random(tiny_dims(), &mut rng).map_err(err)?;
    let grid = random_grid(&mut rng, 3, 3);
    let caption = random_caption(&mut rng, 1, 6);
    let mut exact = exact_hard_objective(&grid, &caption, &params).map_err(err)?.grads;
    if fault == Some(Fault::GradientBug) {
        exact.get_mut("embed").expect("embedding").data_mut()[0] += 0.1;
    }
    let names: Vec<&str> = params.names().collect();
    let numeric = central_differences(params.tensors(), &names, 1e-5, |pt| {
        let p = DecoderParams::from_tensors(tiny_dims(), pt.clone()).map_err(err)?;
        exact_hard_objective(&grid, &caption, &p).map(|e| e.value).map_err(err)
    })?;
    let report = compare(&exact, &numeric, 1e-4);
    if report.passed() {
        Ok(format!("max relative error {:.2e}", report.max_error()))
    } else {
        Err(format!("enumerated gradient mismatch ({:.2e})", report.max_error()))
    }
}

fn lower_bound(_: Option<Fault>) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut min_margin = f64::INFINITY;
    for _ in 0..50 {
        let params = DecoderParams::random(tiny_dims(), &mut rng).map_err(err)?;
        let locations = rng.random_range(2..=4);
        let grid = random_grid(&mut rng, locations, 3);
        let words = rng.random_range(0..=2);
        let caption = random_caption(&mut rng, words, 6);
        let e = exact_hard_objective(&grid, &caption, &params).map_err(err)?;
        min_margin = min_margin.min(e.log_marginal - e.value);
    }
    if min_margin >= -1e-12 {
        Ok(format!("smallest margin {min_margin:.3e}"))
    } else {
        Err(format!("bound violated by {:.3e}", -min_margin))
    }
}

fn penalty_zero(_: Option<Fault>) -> Result<String, String> {
    // zero parameters attend uniformly: with C = L every column sums to 1
    let dims = tiny_dims();
    let params = DecoderParams::zeros(dims).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let grid = random_grid(&mut rng, 3, 3);
    let cfg = SoftLossConfig {
        lambda_penalty: 1.0,
        dropout_rate: 0.0,
    };
    let balanced = random_caption(&mut rng, 2, 6);
    let unbalanced = random_caption(&mut rng, 3, 6);
    let p0 = soft_loss(
        &[Example {
            grid: &grid,
            caption: &balanced,
        }],
        &params,
        &cfg,
        &mut rng,
    )
    .map_err(err)?
    .stats
    .penalty;
    let p1 = soft_loss(
        &[Example {
            grid: &grid,
            caption: &unbalanced,
        }],
        &params,
        &cfg,
        &mut rng,
    )
    .map_err(err)?
    .stats
    .penalty;
    // four uniform steps over three cells: 3 * (1 - 4/3)^2 = 1/3
    if p0.abs() <= 1e-9 && (p1 - 1.0 / 3.0).abs() <= 1e-9 {
        Ok("balanced 0, unbalanced 1/3".into())
    } else {
        Err(format!("penalties {p0:.3e} and {p1:.6}"))
    }
}

fn bleu_oracles(_: Option<Fault>) -> Result<String, String> {
    let w = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let same = bleu(
        &[w("a red square above a blue circle")],
        &[vec![w("a red square above a blue circle")]],
        4,
    )
    .map_err(err)?;
    let clipped = bleu(&[w("a a a a")], &[vec![w("a b")]], 4).map_err(err)?;
    if same.scores != [1.0; 4] {
        return Err(format!("identical pair scored {:?}", same.scores));
    }
    if clipped.bleu(1) != 0.25 {
        return Err(format!("clipping case scored {}", clipped.bleu(1)));
    }
    Ok("identity 1.0, clipping 0.25".into())
}

fn file_round_trips(_: Option<Fault>) -> Result<String, String> {
    let spec = SceneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let scenes = generate_corpus(&spec, 20, &mut rng).map_err(err)?;
    let data = build_dataset(&scenes, &spec, &spec.vocabulary(), &mut rng).map_err(err)?;
    let bytes = write_annotations_bytes(&data).map_err(err)?;
    if read_annotations_bytes(&bytes).map_err(err)? != data {
        return Err("dataset changed on round trip".into());
    }
    let params = DecoderParams::random(tiny_dims(), &mut rng).map_err(err)?;
    if read_checkpoint_bytes(&write_checkpoint_bytes(&params)).map_err(err)? != params {
        return Err("checkpoint changed on round trip".into());
    }
    Ok("dataset and checkpoint bit-exact".into())
}

/// Per-coordinate running mean and variance.
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn variance(&self) -> Vec<f64> {
        self.m2.iter().map(|s| s / (self.n - 1.0)).collect()
    }
}

struct McInstance {
    params: DecoderParams,
    grid: AnnotationGrid,
    caption: CaptionSequence,
}

fn mc_instance(seed: u64) -> Result<McInstance, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(McInstance {
        params: DecoderParams::random(tiny_dims(), &mut rng).map_err(err)?,
        grid: random_grid(&mut rng, 3, 3),
        caption: random_caption(&mut rng, 1, 6),
    })
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

/// Fraction of coordinates whose Monte Carlo mean lies within three
/// standard errors of the exact gradient.
fn unbiased_fraction(inst: &McInstance, baseline: f64, samples: usize, seed: u64) -> Result<f64, String> {
    let exact = exact_hard_objective(&inst.grid, &inst.caption, &inst.params).map_err(err)?;
    let sampler = HardSampler::new(&inst.params, inst.caption.len(), inst.grid.locations(), false).map_err(err)?;
    let ex = Example {
        grid: &inst.grid,
        caption: &inst.caption,
    };
    let cfg = plain_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = exact.grads.flatten();
    let mut m = Moments::new(target.len());
    for _ in 0..samples {
        let s = sampler.sample(ex, &cfg, baseline, &mut rng).map_err(err)?;
        m.push(&s.grads.flatten());
    }
    let var = m.variance();
    let within = target
        .iter()
        .zip(&m.mean)
        .zip(&var)
        .filter(|((t, mu), v)| (*mu - *t).abs() <= 3.0 * (*v / m.n).sqrt() + 1e-9)
        .count();
    Ok(within as f64 / target.len() as f64)
}

fn estimator_unbiased(_: Option<Fault>) -> Result<String, String> {
    let inst = mc_instance(17)?;
    let frac = unbiased_fraction(&inst, 0.0, 20_000, 1)?;
    if frac >= 0.99 {
        Ok(format!("{:.1}% of coordinates within 3 SE", 100.0 * frac))
    } else {
        Err(format!("only {:.1}% of coordinates within 3 SE", 100.0 * frac))
    }
}

fn baseline_neutral(_: Option<Fault>) -> Result<String, String> {
    let inst = mc_instance(17)?;
    let frac = unbiased_fraction(&inst, -2.5, 20_000, 2)?;
    if frac >= 0.99 {
        Ok(format!("b = -2.5: {:.1}% of coordinates within 3 SE", 100.0 * frac))
    } else {
        Err(format!("b = -2.5 shifts the mean: {:.1}% within 3 SE", 100.0 * frac))
    }
}

fn variance_reduction(_: Option<Fault>) -> Result<String, String> {
    let inst = mc_instance(18)?;
    let sampler = HardSampler::new(&inst.params, inst.caption.len(), inst.grid.locations(), false).map_err(err)?;
    let ex = Example {
        grid: &inst.grid,
        caption: &inst.caption,
    };
    let cfg = plain_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut baseline = BaselineState::default();
    for _ in 0..200 {
        let s = sampler.sample(ex, &cfg, baseline.b, &mut rng).map_err(err)?;
        baseline = baseline.update(s.log_likelihood, cfg.baseline_decay);
    }
    let dim = inst.params.count();
    let (mut with, mut without) = (Moments::new(dim), Moments::new(dim));
    let mut fourth = (vec![0.0; dim], vec![0.0; dim]);
    let mut draws: (Vec<Vec<f64>>, Vec<Vec<f64>>) = (Vec::new(), Vec::new());
    for _ in 0..5_000 {
        let s = sampler.sample(ex, &cfg, baseline.b, &mut rng).map_err(err)?;
        baseline = baseline.update(s.log_likelihood, cfg.baseline_decay);
        let g = s.grads.flatten();
        with.push(&g);
        draws.0.push(g);
        let z = sampler.sample(ex, &cfg, 0.0, &mut rng).map_err(err)?.grads.flatten();
        without.push(&z);
        draws.1.push(z);
    }
    for (x, y) in draws.0.iter().zip(&draws.1) {
        for i in 0..dim {
            fourth.0[i] += (x[i] - with.mean[i]).powi(4) / with.n;
            fourth.1[i] += (y[i] - without.mean[i]).powi(4) / without.n;
        }
    }
    let (v1, v0) = (with.variance(), without.variance());
    let worse = (0..dim)
        .filter(|&i| {
            let se1 = ((fourth.0[i] - v1[i] * v1[i]).max(0.0) / with.n).sqrt();
            let se0 = ((fourth.1[i] - v0[i] * v0[i]).max(0.0) / without.n).sqrt();
            v1[i] - v0[i] > 3.0 * (se1 * se1 + se0 * se0).sqrt() + 1e-12
        })
        .count();
    let total1: f64 = v1.iter().sum();
    let total0: f64 = v0.iter().sum();
    let frac = worse as f64 / dim as f64;
    let summary = format!(
        "total variance {total1:.3e} with baseline vs {total0:.3e} without; {:.1}% coordinates worse",
        100.0 * frac
    );
    if frac <= 0.10 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

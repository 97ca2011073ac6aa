//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line each; exits non-zero if any criterion outside
//! `KNOWN_SHORTFALLS` fails. `TODI_ACCEPTANCE=2,3,7` runs a subset;
//! the ablation criterion reuses the conditioning run, so it pulls that in.

mod common;

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use todi::config::{Resolved, RunConfig};
use todi::datagen::generate_records;
use todi::diffusion::{Ablation, DiffusionConfig, DiffusionData, DiffusionModel, NoiseSchedule, ScheduleKind};
use todi::eval::{
    fcd, folded_morgan_embedding, frechet_distance, levenshtein, morgan_fingerprint, tanimoto, Fingerprint,
    FingerprintKind, GaussianStats, MetricReport, METRIC_COLUMNS,
};
use todi::numerics::{
    AttnMask, FeedForward, Gradients, Graph, LayerNorm, Linear, Mode, MultiHeadAttention, ParamId, ParamSet, Tensor, Var,
};
use todi::omics::{kl_divergence, OmicsVae, VaeConfig};
use todi::pipeline::{self as pl, ConditionRow, Corpus, Stage, Upstream};
use todi::selfies::{decode_symbols, graph_to_selfies, selfies_to_graph, tokens_to_string, Symbol, MAX_LEN};
use todi::text::{mask_tokens, TextConfig, TextEncoder, TextVocabulary};

/// Criteria allowed to fail; each has an entry in the decisions ledger.
const KNOWN_SHORTFALLS: &[u8] = &[8, 9];

/// Gradient checks: worst relative error per tensor, and the outermost
/// finite-difference step.
const GRAD_TOL: f64 = 1e-3;
const FD_STEP: f32 = 3e-3;
/// Forward marginal variance, KL Monte Carlo: relative tolerance.
const VAR_TOL: f64 = 0.02;
const KL_TOL: f64 = 0.02;
/// FCD of shifted Gaussians: relative tolerance.
const FCD_SHIFT_TOL: f64 = 0.01;
const FCD_SELF_TOL: f64 = 1e-6;
/// Required hit-ratio margin of the full model over the unconditional one.
const HIT_MARGIN: f64 = 0.10;
/// One-sided z threshold for Tanimoto against the shuffled control (5%).
const Z_ONE_SIDED: f64 = 1.645;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn main() {
    let only: Option<HashSet<u8>> = std::env::var("TODI_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let selected = |id: u8| only.as_ref().is_none_or(|o| o.contains(&id) || (id == 8 && o.contains(&9)));
    let mut failed = Vec::new();
    let mut ran = 0;
    let mut run = |id: u8, name: &str, f: &mut dyn FnMut() -> todi::Result<Outcome>| {
        if !selected(id) {
            return;
        }
        ran += 1;
        let start = Instant::now();
        let o = f().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2}. {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(id);
        }
    };

    let desk = RunConfig::desk().resolve().expect("desk config");
    let records = generate_records(&desk.datagen).expect("desk corpus");
    let corpus = Corpus::from_records(records, &desk).expect("vocabularies");

    run(1, "validity of sampled molecules", &mut || validity(&desk, &corpus));
    run(2, "SELFIES decoder fuzz", &mut selfies_fuzz);
    run(3, "graph -> SELFIES -> graph round trip", &mut round_trip);
    run(4, "gradient fidelity", &mut gradients);
    run(5, "VAE correctness", &mut vae);
    run(6, "forward marginal variance", &mut forward_marginal);
    run(7, "metric oracles", &mut || metric_oracles(&corpus));
    let mut shared = None;
    run(8, "conditioning efficacy", &mut || conditioning(&desk, &corpus, &mut shared));
    run(9, "ablation harness", &mut || ablations(&desk, &corpus, &shared));
    run(10, "lambda sweep harness", &mut || lambda_sweep(&desk, &corpus));
    run(11, "determinism", &mut determinism);

    let unexpected: Vec<u8> = failed.iter().copied().filter(|id| !KNOWN_SHORTFALLS.contains(id)).collect();
    println!("acceptance: {} of {ran} criteria pass", ran - failed.len());
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

fn validity(cfg: &Resolved, corpus: &Corpus) -> todi::Result<Outcome> {
    let start = Instant::now();
    let mut c = cfg.diffusion.clone();
    c.ablation = Ablation::Unconditional;
    let model = DiffusionModel::new(c, corpus.selfies_vocab.len(), &mut rng(1))?;
    // Through the checkpoint format, as a user would load it.
    let ckpt = pl::diffusion_checkpoint(&model, &corpus.selfies_vocab);
    let bytes = ckpt.to_bytes()?;
    let (model, vocab) = pl::diffusion_from_checkpoint(&todi::checkpoint::Checkpoint::from_bytes(&bytes)?)?;
    let rows = vec![ConditionRow::default(); 10];
    let samples = pl::generate(&model, &vocab, &Upstream::default(), &rows, 100, &mut pl::stage_rng(cfg.seed, Stage::Sampling))?;
    let valid = samples.iter().filter(|s| s.valid).count();
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        samples.len() == 1000 && valid == 1000 && secs < 300.0,
        format!("{valid}/{} valid from a random checkpoint in {secs:.0}s (limit 300s)", samples.len()),
    ))
}

fn selfies_fuzz() -> todi::Result<Outcome> {
    let alphabet = Symbol::alphabet();
    let mut r = rng(2);
    let mut bad = 0;
    for _ in 0..10_000 {
        let len = r.random_range(0..=MAX_LEN);
        let symbols: Vec<Symbol> = (0..len).map(|_| alphabet[r.random_range(0..alphabet.len())]).collect();
        let g = decode_symbols(&symbols);
        if g.validate().is_err() || !g.is_connected() {
            bad += 1;
        }
    }
    Ok(outcome(bad == 0, format!("{bad} failures or valence violations in 10000 sequences")))
}

fn round_trip() -> todi::Result<Outcome> {
    let mut r = rng(3);
    let mut ok = 0;
    for _ in 0..1000 {
        let g = common::random_graph(&mut r, 20);
        let text = tokens_to_string(&graph_to_selfies(&g)?);
        if common::isomorphic(&g, &selfies_to_graph(&text)?) {
            ok += 1;
        }
    }
    Ok(outcome(ok == 1000, format!("{ok}/1000 isomorphic after the round trip")))
}

/// Finite-difference derivative along one unit direction per parameter
/// tensor, against the analytic directional derivative. The derivative is
/// the least-squares slope through eight symmetric points within `h`, which
/// averages down the rounding of single f32 evaluations. The error of a
/// tensor is the gap over the larger of the two derivatives, floored at a
/// hundredth of the largest derivative in the check. Tensors whose gradient
/// is identically zero (key biases under softmax) are judged by the size of
/// the difference against that largest derivative.
fn fd_worst(params: &ParamSet, h: f32, f: &dyn Fn(&ParamSet) -> (f64, Option<Gradients>)) -> FdCheck {
    let (_, grads) = f(params);
    let grads = grads.expect("gradients");
    let mut r = rng(4);
    let mut pairs = Vec::new();
    for id in params.ids() {
        let Some(analytic) = grads.param(id) else { continue };
        // Half random, half along the analytic gradient, which keeps the
        // derivative well above the rounding of the loss.
        let unit = |v: &mut Vec<f32>| {
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x /= norm);
        };
        let mut v: Vec<f32> = (0..analytic.len()).map(|_| StandardNormal.sample(&mut r)).collect();
        unit(&mut v);
        let mut along = analytic.data().to_vec();
        unit(&mut along);
        v.iter_mut().zip(&along).for_each(|(x, g)| *x += g);
        unit(&mut v);
        let a: f64 = analytic.data().iter().zip(&v).map(|(g, d)| *g as f64 * *d as f64).sum();
        let at = |t: f32| {
            let mut p = params.clone();
            p.get_mut(id).data_mut().iter_mut().zip(&v).for_each(|(w, d)| *w += t * d);
            f(&p).0
        };
        // Least-squares slope through the points at +-k*h/4, k = 1..4.
        let s = h / 4.0;
        let fd = (1..=4).map(|k| k as f64 * (at(k as f32 * s) - at(-(k as f32) * s))).sum::<f64>() / (60.0 * s as f64);
        pairs.push((params.name(id).to_string(), a, fd));
    }
    let largest = pairs.iter().map(|(_, a, fd)| a.abs().max(fd.abs())).fold(1e-6, f64::max);
    let mut worst = FdCheck { error: 0.0, tensor: String::new(), tensors: pairs.len() };
    for (name, a, fd) in pairs {
        let err = if a.abs() < 1e-6 * largest {
            // Identically zero gradient: the difference must vanish on the
            // scale of the check.
            fd.abs() / largest
        } else {
            (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2 * largest)
        };
        if err > worst.error {
            worst.error = err;
            worst.tensor = name;
        }
    }
    worst
}

struct FdCheck {
    error: f64,
    tensor: String,
    tensors: usize,
}

/// Scalar probe: sum of the output weighted by fixed random values.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

fn run_graph(params: &ParamSet, build: &dyn Fn(&mut Graph) -> Var) -> (f64, Option<Gradients>) {
    let mut g = Graph::with_params(params);
    let loss = build(&mut g);
    let v = g.scalar(loss) as f64;
    (v, Some(g.backward(loss).unwrap()))
}

fn gradients() -> todi::Result<Outcome> {
    let mut r = rng(5);
    let mut results: Vec<(String, FdCheck)> = Vec::new();
    let x = Tensor::randn(&[6, 8], 1.0, &mut r);
    let kv = Tensor::randn(&[8, 5], 1.0, &mut r);
    let h = FD_STEP;

    let mut p = ParamSet::new();
    let lin = Linear::new(&mut p, "lin", 8, 4, &mut r);
    let xs = x.clone();
    results.push(("linear".into(), fd_worst(&p, h, &|ps| run_graph(ps, &|g| {
        let xv = g.constant(xs.clone());
        let y = lin.forward(g, xv).unwrap();
        probe(g, y, 10)
    }))));

    let mut p = ParamSet::new();
    let ln = LayerNorm::new(&mut p, "ln", 8);
    let xs = x.clone();
    results.push(("layer norm".into(), fd_worst(&p, h, &|ps| run_graph(ps, &|g| {
        let xv = g.constant(xs.clone());
        let y = ln.forward(g, xv, false).unwrap();
        probe(g, y, 11)
    }))));

    let mut p = ParamSet::new();
    let attn = MultiHeadAttention::new(&mut p, "self", 8, 8, 2, &mut r);
    let xs = x.clone();
    results.push(("masked self-attention".into(), fd_worst(&p, h, &|ps| run_graph(ps, &|g| {
        let xv = g.constant(xs.clone());
        let mask = AttnMask::Keys(vec![true, true, false, true, true, true]);
        let y = attn.forward(g, xv, xv, 2, 3, 3, &mask, false).unwrap();
        probe(g, y, 12)
    }))));

    let mut p = ParamSet::new();
    let cross = MultiHeadAttention::new(&mut p, "cross", 8, 5, 2, &mut r);
    let (xs, kvs) = (x.clone(), kv.clone());
    results.push(("cross-attention".into(), fd_worst(&p, h, &|ps| run_graph(ps, &|g| {
        let xv = g.constant(xs.clone());
        let kvv = g.constant(kvs.clone());
        let mask = AttnMask::Keys(vec![true, true, true, false, true, true, true, true]);
        let y = cross.forward(g, xv, kvv, 2, 3, 4, &mask, false).unwrap();
        probe(g, y, 13)
    }))));

    let mut p = ParamSet::new();
    let ff = FeedForward::new(&mut p, "ff", 8, 12, &mut r);
    let xs = x.clone();
    results.push(("feed-forward".into(), fd_worst(&p, h, &|ps| run_graph(ps, &|g| {
        let xv = g.constant(xs.clone());
        let y = ff.forward(g, xv, 0.0, &mut rng(0), Mode::Eval, false).unwrap();
        probe(g, y, 14)
    }))));

    let mut p = ParamSet::new();
    let table: ParamId = p.add("embed", Tensor::randn(&[7, 4], 1.0, &mut r));
    let other = Tensor::randn(&[5, 4], 1.0, &mut r);
    results.push(("embedding, tied logits, cross-entropy, cosine".into(), fd_worst(&p, h, &|ps| run_graph(ps, &|g| {
        let t = g.param(table);
        let e = g.gather(t, &[1, 4, 4, 0, 6]).unwrap();
        let logits = g.matmul_t(e, t).unwrap();
        let ce = g.cross_entropy(logits, &[2, 4, 1, 0, 3]).unwrap();
        let o = g.constant(other.clone());
        let cos = g.cosine_rows(e, o).unwrap();
        let cm = g.mean(cos).unwrap();
        g.add(ce, cm).unwrap()
    }))));

    let vc = VaeConfig { genes: 10, hidden1: 8, hidden2: 6, latent: 3, dropout: 0.0, ..VaeConfig::default() };
    let vae0 = OmicsVae::new(vc.clone(), &mut r);
    let vx = Tensor::randn(&[4, 10], 1.0, &mut r);
    let veps = Tensor::randn(&[4, 3], 1.0, &mut r);
    results.push(("VAE negative ELBO".into(), fd_worst(&vae0.params, h, &|ps| {
        let vae = OmicsVae::from_params(vc.clone(), ps.clone()).unwrap();
        run_graph(&vae.params, &|g| {
            let xv = g.constant(vx.clone());
            vae.elbo_graph(g, xv, &veps, 1.0, Mode::Eval, &mut rng(0)).unwrap().0
        })
    })));

    let descs = ["an ether group", "two aromatic rings"];
    let vocab = TextVocabulary::build(&descs, 64)?;
    let tc = TextConfig { max_len: 6, width: 8, heads: 2, layers: 1, ff_hidden: 6, dropout: 0.0, ..TextConfig::default() };
    let enc0 = TextEncoder::new(tc.clone(), vocab.clone(), &mut r)?;
    let batch: Vec<_> = descs.iter().map(|d| mask_tokens(&enc0.tokenize(d), 0.3, &mut rng(6)).unwrap()).collect();
    results.push(("text masked-token loss".into(), fd_worst(&enc0.params, h, &|ps| {
        let enc = TextEncoder::from_params(tc.clone(), vocab.clone(), ps.clone(), false).unwrap();
        run_graph(&enc.params, &|g| enc.mlm_loss_graph(g, &batch, Mode::Eval, &mut rng(0)).unwrap())
    })));

    results.push(("diffusion total loss".into(), diffusion_loss_fd()?));

    let worst = results.iter().map(|(_, c)| c.error).fold(0.0, f64::max);
    let tensors: usize = results.iter().map(|(_, c)| c.tensors).sum();
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, c)| c.error >= GRAD_TOL)
        .map(|(n, c)| format!("{n} ({}) {:.2e}", c.tensor, c.error))
        .collect();
    Ok(outcome(
        failing.is_empty(),
        if failing.is_empty() {
            format!(
                "{} checks over {tensors} tensors, worst relative error {worst:.2e} (limit {GRAD_TOL:.0e})",
                results.len()
            )
        } else {
            format!("over {GRAD_TOL:.0e}: {}", failing.join("; "))
        },
    ))
}

fn tiny_diffusion() -> DiffusionConfig {
    DiffusionConfig {
        seq_len: 5,
        d_emb: 4,
        hidden: 8,
        blocks: 1,
        heads: 2,
        ff_hidden: 8,
        text_width: 6,
        latent: 3,
        steps: 20,
        skip_stride: 5,
        dropout: 0.0,
        batch_size: 2,
        ..DiffusionConfig::default()
    }
}

fn tiny_data(n: usize, seed: u64) -> DiffusionData {
    let mut r = rng(seed);
    let sequences = (0..n)
        .map(|_| {
            let len = r.random_range(1..=5);
            (0..5).map(|p| if p < len { r.random_range(1..7) } else { 0 }).collect()
        })
        .collect();
    let text = (0..n)
        .map(|i| {
            let mask = (0..4).map(|p| u8::from(p < 2 + i % 2)).collect();
            (Tensor::randn(&[4, 6], 1.0, &mut r), mask)
        })
        .collect();
    DiffusionData { sequences, text: Some(text), omics: Some(Tensor::randn(&[n, 3], 1.0, &mut r)) }
}

/// Elementwise check of the full diffusion objective on a tiny config.
fn diffusion_loss_fd() -> todi::Result<FdCheck> {
    let c = tiny_diffusion();
    let m0 = DiffusionModel::new(c.clone(), 7, &mut rng(7))?;
    let batch = m0.make_batch(&tiny_data(3, 8), &[0, 1, 2], &mut rng(9))?;
    Ok(fd_worst(&m0.params, FD_STEP, &|ps| {
        let m = DiffusionModel::from_params(c.clone(), ps.clone()).unwrap();
        let mut g = Graph::with_params(&m.params);
        let v = m.loss_graph(&mut g, &batch, Mode::Eval, &mut rng(0)).unwrap();
        let loss = g.scalar(v.total) as f64;
        (loss, Some(g.backward(v.total).unwrap()))
    }))
}

fn vae() -> todi::Result<Outcome> {
    let mu = [0.5f64, -1.0, 0.2, 1.5];
    let lv = [0.3f64, -0.5, 0.8, -1.2];
    let closed = kl_divergence(&mu.map(|v| v as f32), &lv.map(|v| v as f32));
    let mut r = rng(10);
    let n = 1_000_000;
    let mut acc = 0.0f64;
    for _ in 0..n {
        for d in 0..4 {
            let e: f64 = StandardNormal.sample(&mut r);
            let sd = (0.5 * lv[d]).exp();
            let z = mu[d] + sd * e;
            acc += -0.5 * e * e - sd.ln() + 0.5 * z * z;
        }
    }
    let mc = acc / n as f64;
    let kl_err = ((mc - closed) / closed).abs();

    let small = VaeConfig { genes: 12, hidden1: 8, hidden2: 6, latent: 3, ..VaeConfig::default() };
    let v = OmicsVae::new(small, &mut rng(11));
    let x = Tensor::randn(&[5, 12], 1.0, &mut rng(12));
    let eps = Tensor::randn(&[5, 3], 1.0, &mut rng(13));
    let parts = v.elbo(&x, &eps, 0.0)?;
    let beta0 = parts.total.to_bits() == parts.reconstruction.to_bits();

    let data = low_rank_profiles(1000, 978, 16, 14);
    let mut vae = OmicsVae::new(VaeConfig { epochs: 50, ..VaeConfig::default() }, &mut rng(15));
    let eps = Tensor::randn(&[1000, vae.config.latent], 1.0, &mut rng(16));
    let before = vae.elbo(&data, &eps, 1.0)?.total as f64;
    vae.train(&data, &mut rng(17))?;
    let after = vae.elbo(&data, &eps, 1.0)?.total as f64;
    let drop = 1.0 - after / before;
    Ok(outcome(
        kl_err < KL_TOL && beta0 && drop >= 0.5,
        format!(
            "KL closed {closed:.4} vs MC {mc:.4} (rel {kl_err:.2e}, limit {KL_TOL}); beta=0 loss equals MSE: {beta0}; \
             50 epochs cut loss {before:.3} -> {after:.3} ({:.0}%, need 50%)",
            100.0 * drop
        ),
    ))
}

/// Low-rank profiles plus noise, standardized per gene.
fn low_rank_profiles(n: usize, genes: usize, rank: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let w = Tensor::randn(&[rank, genes], 1.0 / (rank as f32).sqrt(), &mut r);
    let mut data = vec![0.0f32; n * genes];
    for i in 0..n {
        let f: Vec<f32> = (0..rank).map(|_| StandardNormal.sample(&mut r)).collect();
        for j in 0..genes {
            let noise: f32 = StandardNormal.sample(&mut r);
            data[i * genes + j] = (0..rank).map(|k| f[k] * w.get(&[k, j])).sum::<f32>() + 0.3 * noise;
        }
    }
    for j in 0..genes {
        let col: Vec<f64> = (0..n).map(|i| data[i * genes + j] as f64).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            data[i * genes + j] = ((data[i * genes + j] as f64 - mean) / sd) as f32;
        }
    }
    Tensor::new(vec![n, genes], data).unwrap()
}

fn forward_marginal() -> todi::Result<Outcome> {
    // Paper-scale schedule; each draw noises an [8, 32] embedding block.
    let steps = 2000;
    let s = NoiseSchedule::new(steps, ScheduleKind::Sqrt)?;
    let mut r = rng(18);
    let x0 = Tensor::randn(&[8, 32], 1.0, &mut r);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for t in [steps / 4, steps / 2, steps] {
        let a = s.alpha_bar[t].sqrt();
        let (mut sum, mut sq, mut count) = (0.0f64, 0.0f64, 0usize);
        for _ in 0..10_000 {
            let eps = Tensor::randn(&[8, 32], 1.0, &mut r);
            let xt = s.q_sample(&x0, t, &eps)?;
            for (v, x) in xt.data().iter().zip(x0.data()) {
                let res = *v as f64 - a * *x as f64;
                sum += res;
                sq += res * res;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sq / count as f64 - mean * mean;
        let rel = (var / (1.0 - s.alpha_bar[t]) - 1.0).abs();
        worst = worst.max(rel);
        parts.push(format!("t={t}: {var:.4} vs {:.4}", 1.0 - s.alpha_bar[t]));
    }
    Ok(outcome(worst < VAR_TOL, format!("{}; worst rel {worst:.2e} (limit {VAR_TOL})", parts.join(", "))))
}

/// Edit distance straight from its recursive definition, memoized.
fn levenshtein_oracle(a: &[char], b: &[char], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let sub = levenshtein_oracle(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let del = levenshtein_oracle(&a[1..], b, memo) + 1;
    let ins = levenshtein_oracle(a, &b[1..], memo) + 1;
    let v = sub.min(del).min(ins);
    memo.insert((a.len(), b.len()), v);
    v
}

fn metric_oracles(corpus: &Corpus) -> todi::Result<Outcome> {
    let mut r = rng(19);
    let alphabet: Vec<char> = "abcd".chars().collect();
    let mut lev_ok = 0;
    for _ in 0..200 {
        let word = |r: &mut ChaCha8Rng| -> Vec<char> { (0..r.random_range(0..=12)).map(|_| alphabet[r.random_range(0..4)]).collect() };
        let (a, b) = (word(&mut r), word(&mut r));
        if levenshtein(&a, &b) == levenshtein_oracle(&a, &b, &mut HashMap::new()) {
            lev_ok += 1;
        }
    }

    let mut tan_ok = 0;
    for _ in 0..200 {
        let bits: usize = 2048;
        // A small range of bits so that overlaps are common.
        let sa: HashSet<usize> = (0..r.random_range(0..20)).map(|_| r.random_range(0..40) * 51 % bits).collect();
        let sb: HashSet<usize> = (0..r.random_range(0..20)).map(|_| r.random_range(0..40) * 51 % bits).collect();
        let fa = Fingerprint::from_bits(FingerprintKind::MorganR2, sa.iter().copied())?;
        let fb = Fingerprint::from_bits(FingerprintKind::MorganR2, sb.iter().copied())?;
        let union = sa.union(&sb).count();
        let oracle = if union == 0 { 1.0 } else { sa.intersection(&sb).count() as f64 / union as f64 };
        if (tanimoto(&fa, &fb)? - oracle).abs() < 1e-12 {
            tan_ok += 1;
        }
    }

    let graphs: Vec<_> = corpus.records[..500].iter().map(|r| selfies_to_graph(&r.selfies)).collect::<Result<_, _>>()?;
    let self_fcd = fcd(&graphs, &graphs, folded_morgan_embedding)?;

    let m = [1.0f64, -0.5, 2.0, 0.3];
    let draw = |shift: bool, r: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..100_000)
            .map(|_| (0..4).map(|d| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r) + if shift { m[d] } else { 0.0 }).collect::<Vec<f64>>())
            .collect()
    };
    let a = GaussianStats::fit(&draw(false, &mut r))?;
    let b = GaussianStats::fit(&draw(true, &mut r))?;
    let shifted = frechet_distance(&a, &b)?;
    let want: f64 = m.iter().map(|v| v * v).sum();
    let shift_err = (shifted - want).abs() / want;

    Ok(outcome(
        lev_ok == 200 && tan_ok == 200 && self_fcd <= FCD_SELF_TOL && shift_err < FCD_SHIFT_TOL,
        format!(
            "Levenshtein {lev_ok}/200, Tanimoto {tan_ok}/200 agree; FCD(G,G) {self_fcd:.1e}; \
             shifted FCD {shifted:.4} vs {want:.4} (rel {shift_err:.1e})"
        ),
    ))
}

/// Runs shared between the conditioning and ablation criteria.
struct Trained {
    up: Upstream,
    full: pl::DiffusionRun,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn paired_tanimoto(rows: &[ConditionRow], samples: &[pl::GeneratedSample]) -> todi::Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let reference = selfies_to_graph(rows[s.condition].reference.as_deref().expect("reference"))?;
            tanimoto(&morgan_fingerprint(&s.graph)?, &morgan_fingerprint(&reference)?)
        })
        .collect()
}

fn conditioning(cfg: &Resolved, corpus: &Corpus, shared: &mut Option<Trained>) -> todi::Result<Outcome> {
    let start = Instant::now();
    let (train, held_out) = corpus.split(cfg.eval.held_out)?;
    let up = pl::train_upstream(cfg, corpus, train, &[Ablation::Full])?;
    let full = pl::run_diffusion(cfg, corpus, train, held_out, &up)?;
    let mut ucfg = cfg.clone();
    ucfg.diffusion.ablation = Ablation::Unconditional;
    let uncond = pl::run_diffusion(&ucfg, corpus, train, held_out, &up)?;

    // Control: the same model with conditions shuffled across rows,
    // scored against the original row's reference.
    let rows: Vec<ConditionRow> = held_out.iter().map(ConditionRow::from).collect();
    let mut perm: Vec<usize> = (0..rows.len()).collect();
    perm.shuffle(&mut rng(20));
    let shuffled_rows: Vec<ConditionRow> = perm
        .iter()
        .zip(&rows)
        .map(|(&p, r)| ConditionRow { reference: r.reference.clone(), ..rows[p].clone() })
        .collect();
    let shuffled = pl::generate(&full.model, &corpus.selfies_vocab, &up, &shuffled_rows, 1, &mut pl::stage_rng(cfg.seed, Stage::Sampling))?;

    let t_true = paired_tanimoto(&rows, &full.samples)?;
    let t_shuf = paired_tanimoto(&shuffled_rows, &shuffled)?;
    let z = (mean(&t_true) - mean(&t_shuf)) / (var(&t_true) / t_true.len() as f64 + var(&t_shuf) / t_shuf.len() as f64).sqrt();
    let margin = full.hit.ratio - uncond.hit.ratio;
    let matches = |h: &todi::eval::HitRatioReport| h.matches.iter().filter(|&&m| m).count();
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "hit ratio full {:.3} ({} matches) vs unconditional {:.3} ({} matches), margin {margin:+.3} (need {HIT_MARGIN}); \
         Tanimoto {:.3} vs shuffled {:.3}, z {z:.2} (need {Z_ONE_SIDED}); {} samples per arm; {secs:.0}s (limit 3600s)",
        full.hit.ratio,
        matches(&full.hit),
        uncond.hit.ratio,
        matches(&uncond.hit),
        mean(&t_true),
        mean(&t_shuf),
        rows.len(),
    );
    let pass = margin >= HIT_MARGIN && z > Z_ONE_SIDED && secs <= 3600.0;
    *shared = Some(Trained { up, full });
    Ok(outcome(pass, detail))
}

fn ablations(cfg: &Resolved, corpus: &Corpus, shared: &Option<Trained>) -> todi::Result<Outcome> {
    let Some(t) = shared else {
        return Ok(outcome(false, "full model unavailable"));
    };
    let (train, held_out) = corpus.split(cfg.eval.held_out)?;
    let mut rows: Vec<(Ablation, MetricReport, f64)> = vec![(Ablation::Full, t.full.metrics.clone(), t.full.hit.ratio)];
    for a in [Ablation::NoText, Ablation::NoOmics] {
        let mut c = cfg.clone();
        c.diffusion.ablation = a;
        let r = pl::run_diffusion(&c, corpus, train, held_out, &t.up)?;
        rows.push((a, r.metrics, r.hit.ratio));
    }
    let header = pl::report_header("variant");
    let mut want = vec!["variant".to_string()];
    want.extend(METRIC_COLUMNS.iter().map(|c| c.to_string()));
    want.push("hit_ratio".into());
    let columns_ok = header == want.join(",");
    let complete = rows.iter().all(|(_, m, h)| m.values().iter().all(|v| v.is_some_and(f64::is_finite)) && h.is_finite());
    let full = rows[0].2;
    let dominates = rows[1..].iter().all(|(_, _, h)| full >= *h);
    let summary: Vec<String> = rows.iter().map(|(a, _, h)| format!("{a} {h:.3}")).collect();
    Ok(outcome(
        columns_ok && complete && dominates,
        format!("hit ratio {}; columns match: {columns_ok}; all metrics populated: {complete}", summary.join(", ")),
    ))
}

fn lambda_sweep(cfg: &Resolved, corpus: &Corpus) -> todi::Result<Outcome> {
    // Harness shape at a short schedule; efficacy is criterion 8's job.
    let mut base = cfg.clone();
    base.diffusion.epochs = 3;
    let (train, held_out) = corpus.split(base.eval.held_out)?;
    let up = pl::train_upstream(&base, corpus, train, &[Ablation::Full])?;
    let grid = [0.0f32, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
    let mut lines = vec![pl::report_header("lambda")];
    let mut populated = true;
    for &lambda in &grid {
        let mut c = base.clone();
        c.diffusion.lambda = lambda;
        let r = pl::run_diffusion(&c, corpus, train, held_out, &up)?;
        populated &= r.metrics.values().iter().all(|v| v.is_some_and(f64::is_finite)) && r.hit.ratio.is_finite();
        lines.push(pl::report_row(&format!("{lambda}"), &r.metrics, r.hit.ratio));
    }

    // Additivity: the weighted term enters the loss bit-exactly.
    let mut exact = true;
    let data = tiny_data(4, 21);
    for &lambda in &grid {
        let c = DiffusionConfig { lambda, ..tiny_diffusion() };
        let m = DiffusionModel::new(c, 7, &mut rng(22))?;
        let batch = m.make_batch(&data, &[0, 1, 2, 3], &mut rng(23))?;
        let p = m.loss(&batch)?;
        let a = p.alignment.expect("alignment under full conditioning");
        let want = if lambda == 0.0 { p.base } else { p.base + lambda * a };
        exact &= p.total.to_bits() == want.to_bits();
    }
    Ok(outcome(
        lines.len() == 8 && populated && exact,
        format!("{} rows, metrics populated: {populated}; loss = base + lambda * alignment exactly: {exact}", lines.len() - 1),
    ))
}

fn determinism() -> todi::Result<Outcome> {
    let cfg = RunConfig::from_toml_str(
        "seed = 5\nK = 32\nL_max = 48\nL_d = 32\nH = 16\nd_emb = 8\nd_o = 8\nT = 20\nskip_stride = 5\nepochs = 2\nbatch_size = 8\n\
         [datagen]\nn = 200\nmax_atoms = 8\n[omics]\nhidden1 = 16\nhidden2 = 16\nepochs = 2\nbatch_size = 8\n\
         [text]\nwidth = 16\nheads = 2\nlayers = 1\nff_hidden = 16\nepochs = 1\nbatch_size = 16\n\
         [diffusion]\nblocks = 1\nheads = 2\nff_hidden = 16\n[eval]\nheld_out = 20\n",
    )?
    .resolve()?;
    let once = || -> todi::Result<Vec<Vec<u8>>> {
        let dir = tempfile::tempdir().map_err(|e| todi::Error::io(std::env::temp_dir(), e))?;
        let files = todi::datagen::generate_corpus(&cfg.datagen, dir.path())?;
        let mut out: Vec<Vec<u8>> = [&files.corpus, &files.stats, &files.selfies_vocab, &files.text_vocab]
            .iter()
            .map(|p| std::fs::read(p).map_err(|e| todi::Error::io(p, e)))
            .collect::<todi::Result<_>>()?;
        let corpus = Corpus::load(&files.corpus, &cfg)?;
        let (train, held_out) = corpus.split(cfg.eval.held_out)?;
        let (vae, l1) = pl::train_omics(&cfg, train)?;
        let (enc, l2) = pl::train_text(&cfg, train, &corpus.text_vocab)?;
        let up = Upstream { omics: Some(vae), text: Some(enc) };
        let (model, l3) = pl::train_diffusion(&cfg, train, &corpus.selfies_vocab, &up)?;
        for log in [&l1, &l2, &l3] {
            out.push(pl::loss_csv(log).into_bytes());
        }
        out.push(pl::omics_checkpoint(up.omics.as_ref().unwrap()).to_bytes()?);
        out.push(pl::text_checkpoint(up.text.as_ref().unwrap()).to_bytes()?);
        out.push(pl::diffusion_checkpoint(&model, &corpus.selfies_vocab).to_bytes()?);
        let rows: Vec<ConditionRow> = held_out.iter().map(ConditionRow::from).collect();
        let samples = pl::generate(&model, &corpus.selfies_vocab, &up, &rows, 2, &mut pl::stage_rng(cfg.seed, Stage::Sampling))?;
        out.push(samples.iter().map(|s| format!("{} {}\n", s.selfies, s.noise_error)).collect::<String>().into_bytes());
        Ok(out)
    };
    let (a, b) = (once()?, once()?);
    let names = ["corpus", "stats", "SELFIES vocab", "text vocab", "omics loss", "text loss", "diffusion loss", "omics ckpt", "text ckpt", "diffusion ckpt", "samples"];
    let differing: Vec<&str> = names.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
    Ok(outcome(
        differing.is_empty() && a.len() == names.len(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two seeded runs", names.len())
        } else {
            format!("differ: {}", differing.join(", "))
        },
    ))
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng as _;
use trident::cli::run_to;
use trident::config::RunConfig;
use trident::io::to_json;
use trident::pipeline::train_run;
use trident_core::aux::parse_transcript;
use trident_core::autograd::{numerical_gradient, relative_error, Graph, Var};
use trident_core::config::{Ablations, ModelConfig};
use trident_core::data::{Phase, RawImageFeatures, Split, SyntheticSpec, TripletSampler};
use trident_core::disentangle::DisentangleParams;
use trident_core::eval::{accuracy_at_bias, bias_sweep, curve_auc, harmonic_mean, score_phase, seen_accuracy, CurvePoint, ScoreMatrix};
use trident_core::features::{orthogonal_penalty, orthogonal_penalty_var, ExtractorParams, Mode};
use trident_core::losses::smoothed_targets;
use trident_core::model::{SeenPairs, TridentModel, TripletInput};
use trident_core::nn::{stream_rng, Parameters};
use trident_core::tensor::Matrix;
use trident_core::vocab::Composition;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- gradients

fn random(rows: usize, cols: usize, stream: u64) -> Matrix {
    let mut rng = stream_rng(77, stream);
    Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

/// `Σ v ⊙ R` for a fixed random `R`, so every output entry gets its own weight.
fn project(g: &mut Graph<'_>, v: Var, stream: u64) -> Var {
    let (r, c) = g.value(v).shape();
    let w = g.mul_const(v, random(r, c, stream));
    g.sum(w)
}

struct Toy {
    images: Vec<RawImageFeatures>,
    fx: Matrix,
    fy: Matrix,
}

type Objective<M> = for<'a> fn(&'a M, &mut Graph<'a>, &Toy) -> Var;

fn local_features<'a>(m: &'a ExtractorParams, g: &mut Graph<'a>, t: &Toy) -> Var {
    let refs: Vec<&RawImageFeatures> = t.images.iter().collect();
    let iv = m.forward_images(g, &refs).unwrap();
    let parts: Vec<Var> = iv.iter().enumerate().map(|(i, v)| project(g, v.local, i as u64)).collect();
    let all = g.concat_rows(&parts);
    g.sum(all)
}

fn global_features<'a>(m: &'a ExtractorParams, g: &mut Graph<'a>, t: &Toy) -> Var {
    let refs: Vec<&RawImageFeatures> = t.images.iter().collect();
    let iv = m.forward_images(g, &refs).unwrap();
    let parts: Vec<Var> = iv.iter().enumerate().map(|(i, v)| project(g, v.global, 10 + i as u64)).collect();
    let all = g.concat_rows(&parts);
    g.sum(all)
}

fn ortho_of_stacked<'a>(m: &'a ExtractorParams, g: &mut Graph<'a>, t: &Toy) -> Var {
    let refs: Vec<&RawImageFeatures> = t.images.iter().collect();
    let iv = m.forward_images(g, &refs).unwrap();
    let parts: Vec<Var> = iv.iter().map(|v| orthogonal_penalty_var(g, v.stacked)).collect();
    let all = g.concat_rows(&parts);
    g.sum(all)
}

fn composition_vector<'a>(m: &'a ExtractorParams, g: &mut Graph<'a>, t: &Toy) -> Var {
    let refs: Vec<&RawImageFeatures> = t.images.iter().collect();
    let iv = m.forward_images(g, &refs).unwrap();
    let (comp, _) = m.embed_images(g, &iv, Mode::Train, None);
    project(g, comp, 20)
}

fn disentangled<'a>(m: &'a DisentangleParams, g: &mut Graph<'a>, t: &Toy) -> Var {
    let fx = g.leaf(t.fx.clone());
    let fy = g.leaf(t.fy.clone());
    disentangle_objective(m, g, fx, fy)
}

fn disentangle_objective<'a>(m: &'a DisentangleParams, g: &mut Graph<'a>, fx: Var, fy: Var) -> Var {
    let outs = m.forward(g, &[(fx, fy), (fy, fx)]);
    let mut parts = Vec::new();
    for (i, o) in outs.iter().enumerate() {
        for (j, v) in [o.shared_x2y, o.shared_y2x, o.excl_x2y, o.excl_y2x, o.fused].into_iter().enumerate() {
            parts.push(project(g, v, 30 + (5 * i + j) as u64));
        }
    }
    let all = g.concat_rows(&parts);
    g.sum(all)
}

/// Worst relative error over every parameter of `m`.
fn param_check<M: Parameters + Clone>(m: &M, toy: &Toy, f: Objective<M>) -> Result<f64, String> {
    let mut g = Graph::new();
    let out = f(m, &mut g, toy);
    let grads = g.backward(out);
    let mut list = Vec::new();
    m.params("", &mut list);
    let mut worst = 0.0f64;
    for (i, p) in list.iter().enumerate() {
        let analytic = grads.param(p.value).cloned().unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols()));
        let numeric = numerical_gradient(p.value, 1e-5, |probe| {
            let mut c = m.clone();
            let mut l = Vec::new();
            c.params_mut("", &mut l);
            *l.into_iter().nth(i).unwrap().value = probe.clone();
            let mut g = Graph::new();
            let o = f(&c, &mut g, toy);
            g.scalar(o)
        });
        let e = relative_error(&analytic, &numeric);
        if !(e <= 1e-5) {
            return Err(format!("{}: relative error {e:.2e}", p.name));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn input_check<'a>(x: &Matrix, f: impl Fn(&mut Graph<'a>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v);
    let analytic = g.backward(out).get(v).cloned().unwrap();
    let numeric = numerical_gradient(x, 1e-5, |probe| {
        let mut g = Graph::new();
        let v = g.leaf(probe.clone());
        let o = f(&mut g, v);
        g.scalar(o)
    });
    relative_error(&analytic, &numeric)
}

fn toy_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.synthetic = SyntheticSpec {
        attributes: 2,
        objects: 2,
        seen_pairs: 3,
        unseen_pairs: 1,
        train_images_per_pair: 2,
        eval_images_per_pair: 1,
        num_patches: 4,
        cls_dim: 8,
        patch_dim: 6,
        seed: 5,
        ..SyntheticSpec::default()
    };
    c.model = ModelConfig {
        num_patches: 4,
        feature_dim: 8,
        patch_dim: 6,
        word_embedding_dim: 6,
        word_dim: 8,
        comp_dim: 5,
        local_features: 2,
        global_features: 1,
        word_mlp_hidden: vec![7],
        disentangle_hidden: 5,
        aux_count: 2,
        dropout: 0.0,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    c
}

fn criterion_gradients() -> Outcome {
    let c = toy_config();
    let (data, state) = common::prepare(&c);
    let model = &state.model;
    let split = &data.split;
    let train = split.indices(Split::Train);
    let images: Vec<RawImageFeatures> = train[..3].iter().map(|&i| data.store.get(&split.record(i).image_id).unwrap().clone()).collect();
    let d = c.model.feature_dim;
    let toy = Toy { images, fx: random(3, d, 90), fy: random(3, d, 91) };

    let mut report = Vec::new();
    let checks: [(&str, Objective<ExtractorParams>); 4] = [
        ("aggregation", local_features),
        ("masks", global_features),
        ("ortho", ortho_of_stacked),
        ("embedding", composition_vector),
    ];
    for (name, f) in checks {
        let e = param_check(&model.extractor, &toy, f).map_err(|m| format!("{name}: {m}"))?;
        report.push(format!("{name} {e:.1e}"));
    }
    let e = input_check(&toy.fx, orthogonal_penalty_var);
    ensure(e <= 1e-5, format!("ortho input: {e:.2e}"))?;
    report.push(format!("ortho-input {e:.1e}"));
    for (name, branch) in [("attr-branch", &model.attr_branch), ("obj-branch", &model.obj_branch)] {
        let e = param_check(branch, &toy, disentangled).map_err(|m| format!("{name}: {m}"))?;
        report.push(format!("{name} {e:.1e}"));
    }
    let e = input_check(&toy.fx, |g, fx| {
        let fy = g.constant(toy.fy.clone());
        disentangle_objective(&model.attr_branch, g, fx, fy)
    });
    ensure(e <= 1e-5, format!("disentangle input: {e:.2e}"))?;
    report.push(format!("disentangle-input {e:.1e}"));

    // Full objective over every model parameter.
    let seen = SeenPairs::new(&model.vocab, split.seen_pairs()).unwrap();
    let sampler = TripletSampler::new(split);
    let mut rng = stream_rng(1, 1);
    let triplets: Vec<_> = train[..2].iter().map(|&i| sampler.sample(split, i, &mut rng)).collect();
    let labels: Vec<[Composition; 3]> = triplets
        .iter()
        .map(|t| [t.main, t.attr_companion, t.obj_companion].map(|i| split.record(i).composition()))
        .collect();
    let batch: Vec<TripletInput> = triplets
        .iter()
        .zip(&labels)
        .map(|(t, l)| TripletInput {
            images: [t.main, t.attr_companion, t.obj_companion].map(|i| data.store.get(&split.record(i).image_id).unwrap()),
            labels: [&l[0], &l[1], &l[2]],
        })
        .collect();
    let e = total_loss_check(model, &batch, &seen)?;
    report.push(format!("total {e:.1e}"));
    Ok(report.join(", "))
}

fn total_loss_check(model: &TridentModel, batch: &[TripletInput<'_>], seen: &SeenPairs) -> Result<f64, String> {
    let loss = |m: &TridentModel| {
        let mut g = Graph::new();
        let o = m.forward_batch(&mut g, batch, seen, Mode::Train, None).unwrap();
        g.scalar(o.total)
    };
    let mut g = Graph::new();
    let out = model.forward_batch(&mut g, batch, seen, Mode::Train, None).unwrap();
    let grads = g.backward(out.total);
    let mut list = Vec::new();
    model.params("", &mut list);
    let mut worst = 0.0f64;
    for (i, p) in list.iter().enumerate() {
        let analytic = grads.param(p.value).cloned().ok_or(format!("{} has no gradient", p.name))?;
        let numeric = numerical_gradient(p.value, 1e-5, |probe| {
            let mut c = model.clone();
            let mut l = Vec::new();
            c.params_mut("", &mut l);
            *l.into_iter().nth(i).unwrap().value = probe.clone();
            loss(&c)
        });
        let e = relative_error(&analytic, &numeric);
        ensure(e <= 1e-5, format!("total loss, {}: relative error {e:.2e}", p.name))?;
        worst = worst.max(e);
    }
    Ok(worst)
}

// ------------------------------------------------------------------ metrics

fn lattice_instance(seed: u64) -> ScoreMatrix {
    let mut rng = stream_rng(seed, 0);
    let rows = rng.random_range(1..=20);
    let cols = rng.random_range(2..=10);
    let mut unseen: Vec<bool> = (0..cols).map(|_| rng.random_bool(0.5)).collect();
    unseen[0] = false;
    unseen[1] = true;
    // Multiples of 1/16 keep every score difference exact.
    let scores = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-16i32..=16) as f64 / 16.0);
    let gt = (0..rows).map(|_| rng.random_range(0..cols)).collect();
    ScoreMatrix::new(scores, gt, unseen).unwrap()
}

fn criterion_metric_oracle() -> Outcome {
    let instances = 60;
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let s = lattice_instance(seed);
        for k in [1, 3] {
            let r = bias_sweep(&s, k).map_err(|e| e.to_string())?;
            let seen: Vec<usize> = (0..s.scores.rows()).filter(|&i| !s.row_is_unseen(i)).collect();
            let unseen: Vec<usize> = (0..s.scores.rows()).filter(|&i| s.row_is_unseen(i)).collect();
            let grid: Vec<CurvePoint> = (0..10_000)
                .map(|i| {
                    let b = -2.5 + (i as f64 + 0.5) * 5.0 / 10_000.0;
                    CurvePoint { bias: b, seen: accuracy_at_bias(&s, &seen, b, k), unseen: accuracy_at_bias(&s, &unseen, b, k) }
                })
                .collect();
            for w in grid.windows(2) {
                ensure(w[1].seen <= w[0].seen && w[1].unseen >= w[0].unseen, format!("instance {seed}: not monotone"))?;
            }
            let best = |f: &dyn Fn(&CurvePoint) -> f64| grid.iter().map(f).fold(0.0, f64::max);
            let oracle = [best(&|p| p.seen), best(&|p| p.unseen), best(&|p| harmonic_mean(p.seen, p.unseen)), curve_auc(&grid)];
            let got = [r.best_seen, r.best_unseen, r.best_hm, r.auc];
            for (o, g) in oracle.iter().zip(got) {
                worst = worst.max((o - g).abs());
            }
            ensure(worst <= 1e-6, format!("instance {seed}, k={k}: sweep {got:?} vs dense grid {oracle:?}"))?;
            for w in r.curve.windows(2) {
                ensure(w[1].seen <= w[0].seen && w[1].unseen >= w[0].unseen, format!("instance {seed}: sweep not monotone"))?;
            }
        }
    }
    Ok(format!("{instances} instances x k in {{1,3}}, max deviation {worst:.1e}"))
}

// --------------------------------------------------------------- synthetic

fn criterion_synthetic() -> Outcome {
    let c = RunConfig::desk();
    ensure(c.synthetic.attributes == 6 && c.synthetic.objects == 6, "grid size")?;
    ensure(c.synthetic.seen_pairs == 24 && c.synthetic.unseen_pairs == 12, "pair counts")?;
    ensure(c.synthetic.noise == 0.1 && c.synthetic.background_fraction == 0.25, "noise settings")?;
    ensure(c.model.smoothing == 0.09 && c.model.aux_count == 3 && c.train.epochs <= 200, "loss settings")?;
    let (data, mut state) = common::prepare(&c);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    train_run(&mut state, &data.split, &data.store, &c.train, tmp.path()).map_err(|e| e.to_string())?;
    let seen = seen_accuracy(&state.model, &data.split, &data.store, Split::Train).map_err(|e| e.to_string())?;
    let s = score_phase(&state.model, &data.split, &data.store, Phase::Test).map_err(|e| e.to_string())?;
    let unseen_rows: Vec<usize> = (0..s.scores.rows()).filter(|&i| s.row_is_unseen(i)).collect();
    let unseen = accuracy_at_bias(&s, &unseen_rows, 0.0, 1);
    let report = bias_sweep(&s, 1).map_err(|e| e.to_string())?;
    let chance = 100.0 / 36.0;
    let msg = format!(
        "{} epochs: seen train top-1 {seen:.1}%, unseen test top-1 {unseen:.1}% (need {:.1}%), best unseen {:.1}%, AUC {:.1}",
        c.train.epochs,
        10.0 * chance,
        report.best_unseen,
        report.auc
    );
    ensure(seen >= 95.0 && unseen >= 10.0 * chance, msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- exactness

fn criterion_smoothing() -> Outcome {
    let t = smoothed_targets(4, 0, &[1, 2, 3], 0.09).map_err(|e| e.to_string())?;
    let want = [0.91, 0.03, 0.03, 0.03];
    for (a, b) in t.iter().zip(want) {
        ensure((a - b).abs() <= 1e-12, format!("{t:?}"))?;
    }
    let sum: f64 = t.iter().sum();
    ensure((sum - 1.0).abs() <= 1e-12, format!("sum {sum}"))?;
    Ok(format!("{t:?}"))
}

fn criterion_parser() -> Outcome {
    let beef = Composition::new("browned", "beef");
    let garden = Composition::new("large", "garden");
    let cases: [(&Composition, usize, &str, &[&str]); 7] = [
        (&beef, 5, "1. Flavorful\n2. Juicy\n3. Savory\n4. Tender\n5. Rich", &["flavorful", "juicy", "savory", "tender", "rich"]),
        (&beef, 5, "1. Juicy beef\n2. Tender beef\n3. Flavorful beef\n4. Savory beef\n5. Succulent beef", &["juicy", "tender", "flavorful", "savory", "succulent"]),
        (&beef, 5, "1. Juicy\n2. Brown\n3. Savory\n4. Tender\n5. Succulent", &["juicy", "brown", "savory", "tender", "succulent"]),
        (&beef, 5, "1. Juicy\n2. Glistening\n3. Crispy\n4. Sizzling\n5. Mouthwatering", &["juicy", "glistening", "crispy", "sizzling", "mouthwatering"]),
        (&garden, 3, "1. Lush\n2. Vibrant\n3. Flourishing", &["lush", "vibrant", "flourishing"]),
        (&garden, 5, "1. Lush\n2. Expansive\n3. Vibrant\n4. Serene\n5. Verdant", &["lush", "expansive", "vibrant", "serene", "verdant"]),
        (
            &garden,
            10,
            "1. Lush\n2. Vibrant\n3. Expansive\n4. Serene\n5. Colorful\n6. Beautiful\n7. Bountiful\n8. Captivating\n9. Peaceful\n10. Tranquil",
            &["lush", "vibrant", "expansive", "serene", "colorful", "beautiful", "bountiful", "captivating", "peaceful", "tranquil"],
        ),
    ];
    for (comp, t, raw, want) in cases {
        let got = parse_transcript(raw, t, Some(comp)).map_err(|e| e.to_string())?;
        ensure(got == want, format!("{comp} t={t}: {got:?}"))?;
    }
    Ok("4 browned beef and 3 large garden transcripts".into())
}

fn criterion_ortho() -> Outcome {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let orthonormal = Matrix::from_rows(&[vec![s, s, 0.0], vec![-s, s, 0.0], vec![0.0, 0.0, 1.0]]);
    let zero = orthogonal_penalty(&orthonormal);
    let dup = orthogonal_penalty(&Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]));
    ensure(zero.abs() <= 1e-9, format!("orthonormal rows gave {zero}"))?;
    ensure((dup - 2f64.sqrt()).abs() <= 1e-9, format!("duplicated rows gave {dup}"))?;
    Ok(format!("orthonormal {zero:.1e}, duplicated {dup:.12}"))
}

fn criterion_config() -> Outcome {
    let c = RunConfig::default();
    let json = to_json(&c);
    let back: RunConfig = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    ensure(back == c, "round trip changed the document")?;
    ensure(to_json(&back) == json, "re-serialization differs")?;
    let t = &c.train;
    let m = &c.model;
    let w = &m.loss_weights;
    ensure(t.batch_size == 128 && t.epochs == 50 && t.weight_decay == 5e-5, "batch/epochs/decay")?;
    ensure(t.lr_main == 2e-4 && t.lr_embeddings == 1.5e-6, "learning rates")?;
    ensure(t.decay_epochs == [30, 40] && t.decay_factor == 0.1, "schedule")?;
    ensure((w.ortho, w.comp, w.attr, w.obj) == (0.1, 1.0, 0.5, 0.5), "loss weights")?;
    ensure(m.temperature == 0.05, "temperature")?;
    ensure(m.local_features == 2 * m.global_features, "p = 2q")?;
    ensure(m.aux_count == 3 && m.smoothing == 0.09 && m.global_features == 6 && c.topk == 1, "defaults")?;
    Ok("batch 128, 50 epochs, wd 5e-5, lr 2e-4/1.5e-6, decay 30/40, weights (0.1,1,0.5,0.5), temperature 0.05, p=12=2q".into())
}

// --------------------------------------------------------------------- CLI

fn cli(args: &[&str]) -> Result<String, String> {
    let mut argv = vec!["trident"];
    argv.extend_from_slice(args);
    let mut out = Vec::new();
    match run_to(argv, &mut out) {
        0 => Ok(String::from_utf8(out).unwrap()),
        code => Err(format!("`trident {}` exited with {code}", args.join(" "))),
    }
}

fn pipeline(dir: &Path, epochs: usize, ablate: Option<&str>) -> Result<(Vec<u8>, Vec<u8>), String> {
    let mut c = RunConfig::desk();
    c.train.epochs = epochs;
    c.train.decay_epochs.retain(|&m| m < epochs);
    c.out = dir.to_path_buf();
    let cfg = dir.join("run.json");
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    std::fs::write(&cfg, to_json(&c)).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    let mut extra = Vec::new();
    if let Some(a) = ablate {
        extra = vec!["--ablate", a];
    }
    cli(&["synth", "--config", cfg, "--seed", "7"])?;
    cli(&["gen-aux", "--config", cfg, "--provider", "stub"])?;
    cli(&["embed-words", "--config", cfg, "--seed", "7"])?;
    cli(&[&["train", "--config", cfg, "--seed", "7"], extra.as_slice()].concat())?;
    cli(&[&["eval", "--config", cfg, "--phase", "test"], extra.as_slice()].concat())?;
    let ck = std::fs::read(dir.join("checkpoint.tric")).map_err(|e| e.to_string())?;
    let metrics = std::fs::read(dir.join("metrics_test.json")).map_err(|e| e.to_string())?;
    Ok((ck, metrics))
}

fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline(&tmp.path().join("a"), 2, None)?;
    let b = pipeline(&tmp.path().join("b"), 2, None)?;
    ensure(a.0 == b.0, "checkpoints differ")?;
    ensure(a.1 == b.1, "metrics differ")?;
    Ok(format!("checkpoint {} bytes and metrics {} bytes identical", a.0.len(), a.1.len()))
}

fn criterion_ablations() -> Outcome {
    let names = Ablations::NAMES;
    let want = ["condition_masks", "faa", "word_expanding", "attribute_smoothing", "disentangle_losses", "ortho"];
    ensure(want.iter().all(|w| names.contains(w)), format!("flags {names:?}"))?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for name in want {
        let (_, metrics) = pipeline(&tmp.path().join(name), 2, Some(name))?;
        let v: serde_json::Value = serde_json::from_slice(&metrics).map_err(|e| e.to_string())?;
        ensure(v["auc"].is_number(), format!("{name}: no AUC"))?;
    }
    Ok(format!("{} ablated pipelines completed", want.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("1 gradient suite", criterion_gradients, Duration::from_secs(60)),
        ("2 metric oracle", criterion_metric_oracle, Duration::from_secs(30)),
        ("3 synthetic generalization", criterion_synthetic, Duration::from_secs(300)),
        ("4 smoothed targets", criterion_smoothing, Duration::MAX),
        ("5 transcript parser", criterion_parser, Duration::MAX),
        ("6 orthogonality penalty", criterion_ortho, Duration::MAX),
        ("7 config defaults", criterion_config, Duration::MAX),
        ("8 determinism", criterion_determinism, Duration::MAX),
        ("9 ablation hooks", criterion_ablations, Duration::MAX),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, limit) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = outcome.and_then(|m| if took <= limit { Ok(m) } else { Err(format!("{m}; took {took:.1?}, limit {limit:?}")) });
        match outcome {
            Ok(m) => println!("PASS  {name}  ({took:.1?})  {m}"),
            Err(m) => {
                failed += 1;
                println!("FAIL  {name}  ({took:.1?})  {m}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

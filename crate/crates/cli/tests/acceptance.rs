//! Acceptance suite: the nine criteria the engine has to meet, each run at
//! its stated tolerance and reported on one line.
//!
//! Run with `cargo test -p ihq-cli --test acceptance -- --nocapture` to see
//! the per-criterion lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ihq::contrastive::{info_nce, pair_retrieval, pretrain, pretrain_pooled, ContrastiveModel, HeadConfig, PretrainConfig, DEFAULT_TAU};
use ihq::curation::*;
use ihq::data::{class_stats, stratified_kfold, ClassId, Manifest, NUM_CLASSES};
use ihq::evaluation::{ablate_modalities, cross_validate};
use ihq::fusion::{Arch, Modalities, TrainConfig, XattnConfig};
use ihq::gradcheck::{run_all, Precision};
use ihq::numerics::{Tape, Tensor};
use ihq::synthetic::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> anyhow::Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

const CHANCE: f64 = 1.0 / NUM_CLASSES as f64;

/// Desk-scale classifier settings shared by the learnability criteria.
fn mlp_config() -> TrainConfig {
    let mut c = TrainConfig::supervised(Arch::Mlp);
    c.epochs = 10;
    c.lr = 1e-3;
    c.mlp_hidden = [128, 64];
    c
}

fn xattn_config() -> TrainConfig {
    let mut c = TrainConfig::supervised(Arch::Xattn);
    c.epochs = 10;
    c.lr = 1e-3;
    c.xattn = XattnConfig {
        d_model: 64,
        ff_dim: 128,
        heads: 8,
        blocks: 2,
        dropout: 0.1,
    };
    c
}

fn cv_accuracy(m: &Manifest, config: &TrainConfig, pretrained: Option<&ContrastiveModel>) -> anyhow::Result<f64> {
    let folds = stratified_kfold(m, 5, 0)?;
    Ok(cross_validate(m, &folds, config, pretrained)?.report.mean.accuracy)
}

fn gradient_oracle() -> anyhow::Result<Outcome> {
    let t0 = Instant::now();
    let mut worst = Vec::new();
    let mut failed = Vec::new();
    for p in [Precision::F32, Precision::F64] {
        let results = run_all(p)?;
        for r in &results {
            if !r.passed {
                failed.push(format!("{}@{}", r.name, p));
            }
        }
        let max = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        worst.push(format!("{p} max rel err {max:.1e} (tol {:.0e}, {} cases)", p.tolerance(), results.len()));
    }
    let elapsed = t0.elapsed();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(60);
    outcome(pass, format!("{}; failed {:?}; {elapsed:.1?}", worst.join(", "), failed))
}

fn closed_forms() -> anyhow::Result<Outcome> {
    let loss = |a: Tensor<f64>, b: Tensor<f64>| -> anyhow::Result<f64> {
        let mut tape = Tape::<f64>::new();
        let (va, vb) = (tape.constant(a)?, tape.constant(b)?);
        let t = tape.constant(Tensor::scalar(1.0 / DEFAULT_TAU))?;
        let l = info_nce(&mut tape, va, vb, t, false)?;
        Ok(tape.value(l).item())
    };
    let single = loss(Tensor::matrix(1, 3, vec![0.4, -1.0, 2.0])?, Tensor::matrix(1, 3, vec![3.0, 0.5, -0.2])?)?;
    let mut pass = single.abs() <= 1e-9;
    let mut worst_ln = 0.0f64;
    for n in [2usize, 4, 8] {
        let a = Tensor::matrix(n, 3, [1.0, -2.0, 0.5].repeat(n))?;
        let b = Tensor::matrix(n, 3, [0.3, 0.3, -1.0].repeat(n))?;
        let err = (loss(a, b)? - (n as f64).ln()).abs();
        worst_ln = worst_ln.max(err);
    }
    pass &= worst_ln <= 1e-6;

    let config = HeadConfig {
        in_dims: [6, 5, 4],
        hidden: 8,
        out_dim: 4,
        tau: DEFAULT_TAU,
        learnable_tau: false,
        symmetric: false,
    };
    let model = ContrastiveModel::new(config, &mut ihq::rng::stream(0, "acceptance", 0))?;
    let params = model.params.cast::<f64>();
    let mut tape = Tape::<f64>::new();
    let p = params.bind(&mut tape, false)?;
    let data = aligned_triplets(9, 3, [6, 5, 4], 0.5, 11);
    let mut inputs = Vec::new();
    for t in &data {
        inputs.push(tape.constant(t.cast::<f64>())?);
    }
    let l = model.loss(&mut tape, &p, [inputs[0], inputs[1], inputs[2]])?;
    let v = |x| tape.value(x).item();
    let sum_err = (v(l.total) - (v(l.tv) + v(l.va) + v(l.at))).abs();
    pass &= sum_err <= 1e-6;
    outcome(
        pass,
        format!("N=1 loss {single:.1e}; max |L - ln N| {worst_ln:.1e}; |L_total - sum of pairs| {sum_err:.1e}"),
    )
}

fn split_rows(t: &Tensor<f32>, a: usize, b: usize) -> anyhow::Result<Tensor<f32>> {
    let d = t.last_dim();
    Ok(Tensor::matrix(b - a, d, t.data()[a * d..b * d].to_vec())?)
}

fn contrastive_learnability() -> anyhow::Result<Outcome> {
    let t0 = Instant::now();
    let all = aligned_triplets(264, 16, [32, 24, 20], 0.2, 3);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for t in &all {
        train.push(split_rows(t, 0, 200)?);
        test.push(split_rows(t, 200, 264)?);
    }
    let train: [Tensor<f32>; 3] = train.try_into().expect("three modalities");
    let test: [Tensor<f32>; 3] = test.try_into().expect("three modalities");
    let config = PretrainConfig {
        epochs: 0,
        batch: 32,
        lr: 2e-3,
        hidden: 64,
        out_dim: 32,
        seed: 3,
        ..PretrainConfig::default()
    };
    let before = pair_retrieval(&pretrain_pooled(&train, &config)?.model, &test, 32, 1)?;
    let config = PretrainConfig { epochs: 10, ..config };
    let after = pair_retrieval(&pretrain_pooled(&train, &config)?.model, &test, 32, 1)?;
    let elapsed = t0.elapsed();
    let chance = 1.0 / 32.0;
    let near_chance = before.iter().all(|&b| b <= 3.0 * chance);
    let lifted = after.iter().all(|&a| a >= 0.80);
    outcome(
        near_chance && lifted && elapsed < Duration::from_secs(120),
        format!("top-1 of 32 (t-v, v-a, a-t) before {before:.3?} after {after:.3?}; {elapsed:.1?}"),
    )
}

fn supervised_learnability() -> anyhow::Result<Outcome> {
    let t0 = Instant::now();
    let clean = clustered_manifest(&SyntheticSpec::default())?;
    let shuffled = clustered_manifest(&SyntheticSpec {
        shuffle_labels: true,
        ..SyntheticSpec::default()
    })?;
    let mlp = cv_accuracy(&clean, &mlp_config(), None)?;
    let xattn = cv_accuracy(&clean, &xattn_config(), None)?;
    let mlp_s = cv_accuracy(&shuffled, &mlp_config(), None)?;
    let xattn_s = cv_accuracy(&shuffled, &xattn_config(), None)?;
    let elapsed = t0.elapsed();
    let pass = mlp >= 0.95 && xattn >= 0.90 && mlp_s <= 0.13 && xattn_s <= 0.13 && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!("mlp {mlp:.3}, xattn {xattn:.3}; shuffled mlp {mlp_s:.3}, xattn {xattn_s:.3}; {elapsed:.1?}"),
    )
}

fn finetune_ordering() -> anyhow::Result<Outcome> {
    let spec = SyntheticSpec {
        latent: 8,
        dims: [64, 48, 40],
        nuisance: 1.5,
        token_noise: 0.3,
        separation: 1.0,
        noise: 0.5,
        variants: true,
        per_class: 10,
        ..SyntheticSpec::default()
    };
    let m = clustered_manifest(&spec)?;
    let pre = pretrain(
        &m,
        &PretrainConfig {
            epochs: 30,
            batch: 64,
            lr: 1e-3,
            hidden: 128,
            out_dim: 32,
            ..PretrainConfig::default()
        },
    )?;
    let mut raw = TrainConfig::supervised(Arch::Mlp);
    raw.epochs = 20;
    raw.lr = 1e-3;
    raw.mlp_hidden = [128, 64];
    let mut ft = TrainConfig::finetune();
    ft.set_epochs(20);
    ft.lr = 1e-3;
    ft.mlp_hidden = [128, 64];
    let raw_acc = cv_accuracy(&m, &raw, None)?;
    let ft_acc = cv_accuracy(&m, &ft, Some(&pre.model))?;
    outcome(ft_acc >= raw_acc, format!("fine-tuned {ft_acc:.3} vs raw-feature MLP {raw_acc:.3}"))
}

fn ablation_signal() -> anyhow::Result<Outcome> {
    let m = clustered_manifest(&SyntheticSpec {
        signal: Signal::VideoOnly,
        ..SyntheticSpec::default()
    })?;
    let folds = stratified_kfold(&m, 5, 0)?;
    let arms = ablate_modalities(&m, &folds, &mlp_config(), None)?;
    let acc = |label: &str| {
        arms.iter()
            .find(|r| r.modalities.label() == label)
            .map(|r| r.mean.accuracy)
            .expect("every arm is reported")
    };
    let audio = acc("a");
    let with_video: Vec<(Modalities, f64)> = arms
        .iter()
        .filter(|r| r.modalities.contains(ihq::data::Modality::Video))
        .map(|r| (r.modalities, r.mean.accuracy))
        .collect();
    let pass = with_video.len() == 4 && with_video.iter().all(|&(_, a)| a > audio) && audio <= 2.0 * CHANCE;
    let table: Vec<String> = arms.iter().map(|r| format!("{} {:.3}", r.modalities, r.mean.accuracy)).collect();
    outcome(pass, format!("{}; a-only bound {:.3}", table.join(", "), 2.0 * CHANCE))
}

/// Independent tally used as the brute-force reference.
fn tally(decisions: &[Decision; 3], provisional: ClassId) -> Verdict {
    let outcomes: Vec<Option<usize>> = decisions
        .iter()
        .map(|d| match d {
            Decision::Keep => Some(provisional.index()),
            Decision::Change(c) => Some(c.index()),
            Decision::Remove => None,
        })
        .collect();
    for o in &outcomes {
        if outcomes.iter().filter(|x| *x == o).count() >= 2 {
            return match o {
                None => Verdict::Remove,
                Some(c) if *c == provisional.index() => Verdict::Keep,
                Some(c) => Verdict::Relabel(ClassId::new(*c).expect("valid class")),
            };
        }
    }
    Verdict::Disagreement
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/curation").join(name)
}

fn curation_oracle() -> anyhow::Result<Outcome> {
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for provisional in 0..NUM_CLASSES {
        let p = ClassId::new(provisional)?;
        let pool: Vec<usize> = (0..5).map(|i| (provisional + i * 5) % NUM_CLASSES).collect();
        // Every subset of the pool with at most three change targets.
        for mask in 0u32..(1 << pool.len()) {
            if mask.count_ones() > 3 {
                continue;
            }
            let mut options = vec![Decision::Keep, Decision::Remove];
            for (i, &c) in pool.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    options.push(Decision::Change(ClassId::new(c)?));
                }
            }
            for a in &options {
                for b in &options {
                    for c in &options {
                        let d = [*a, *b, *c];
                        checked += 1;
                        if majority(&d, p) != tally(&d, p) {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }

    let catalog = read_catalog(&fixture("catalog.jsonl"))?;
    let keywords = read_keywords(&fixture("keywords.tsv"))?;
    let annotations = read_annotations(&fixture("annotations.jsonl"))?;
    let pool = collect_candidates(&catalog, &keywords)?;
    let res = resolve_annotations(&pool, &annotations)?;
    let kept: Vec<(String, String)> = res
        .labeled
        .iter()
        .map(|l| (l.video_id.clone(), l.class.name().to_string()))
        .collect();
    let expected: Vec<(String, String)> = [
        ("v01", "Financial fraud"),
        ("v02", "Comedy"),
        ("v05", "Comedy"),
        ("v06", "Comedy"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    let fixture_ok = kept == expected && pool.filtered_out == ["v04"] && pool.candidates.len() == 7;
    outcome(
        mismatches == 0 && fixture_ok,
        format!("{checked} decision triples, {mismatches} mismatches; fixture kept set {kept:?}"),
    )
}

fn data_invariants() -> anyhow::Result<Outcome> {
    let base = replica_manifest(0)?;
    let s = class_stats(&base);
    let totals = (s.total, s.benign, s.malicious) == (5168, 2472, 2696);
    let m = jitter_variants(&base, 0.1, 0)?;
    let folds = stratified_kfold(&m, 5, 0)?;
    let spread = folds.max_class_spread();
    let family_ok = m.variants().all(|v| {
        let p = m.get(&v.parent_id).expect("parent present");
        folds.fold_of(&v.video_id) == folds.fold_of(&p.video_id) && v.features.video == p.features.video
    });
    let size_ok = m.len() == 4 * m.num_originals();
    outcome(
        totals && spread <= 1 && family_ok && size_ok,
        format!(
            "totals {}/{}/{}; fold spread {spread}; variants share fold and video: {family_ok}; augmented {} = 4 x {}",
            s.total,
            s.benign,
            s.malicious,
            m.len(),
            m.num_originals()
        ),
    )
}

fn ihq(args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_ihq")).args(args).output()?;
    anyhow::ensure!(
        out.status.success(),
        "ihq {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn tree(dir: &Path) -> anyhow::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir)?.to_path_buf(), std::fs::read(&path)?);
            }
        }
    }
    Ok(files)
}

fn pipeline(root: &Path) -> anyhow::Result<()> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let manifest = p("data/manifest.jsonl");
    let folds = p("split/folds.json");
    let small = ["--epochs", "2", "--mlp-hidden", "16,8", "--fold-file", folds.as_str()];
    ihq(&["synth", "--seed", "4", "--per-class", "3", "--variants", "--out", &p("data")])?;
    ihq(&["split", "--manifest", &manifest, "--seed", "4", "--folds", "3", "--out", &p("split")])?;
    ihq(&["pretrain", "--manifest", &manifest, "--seed", "4", "--epochs", "2", "--hidden", "16", "--embed-dim", "8", "--out", &p("pretrain")])?;
    let mut train = vec!["train", "--manifest", manifest.as_str(), "--seed", "4"];
    let train_out = p("train");
    train.extend(small);
    train.extend(["--out", train_out.as_str()]);
    ihq(&train)?;
    let ckpt = p("pretrain/contrastive.ihqc");
    let ft_out = p("finetune");
    let mut ft = vec!["finetune", "--manifest", manifest.as_str(), "--seed", "4", "--checkpoint", ckpt.as_str()];
    ft.extend(small);
    ft.extend(["--out", ft_out.as_str()]);
    ihq(&ft)?;
    ihq(&["evaluate", "--predictions", &p("train/predictions.jsonl"), "--out", &p("evaluate")])?;
    ihq(&[
        "curate",
        "--catalog",
        &fixture("catalog.jsonl").to_string_lossy(),
        "--keywords",
        &fixture("keywords.tsv").to_string_lossy(),
        "--annotations",
        &fixture("annotations.jsonl").to_string_lossy(),
        "--out",
        &p("curate"),
    ])?;
    Ok(())
}

fn determinism() -> anyhow::Result<Outcome> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (ta, tb) = (tree(a.path())?, tree(b.path())?);
    let differing: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .filter(|k| ta.get(*k) != tb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let checkpoints = ta.keys().filter(|k| k.extension().is_some_and(|e| e == "ihqc")).count();
    let jsons = ta.keys().filter(|k| k.extension().is_some_and(|e| e == "json")).count();
    outcome(
        differing.is_empty() && checkpoints > 0,
        format!(
            "{} files ({checkpoints} checkpoints, {jsons} json) over synth/split/pretrain/train/finetune/evaluate/curate; differing {differing:?}",
            ta.len()
        ),
    )
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, fn() -> anyhow::Result<Outcome>);
    let criteria: [Criterion; 9] = [
        ("gradient oracle", gradient_oracle),
        ("contrastive closed forms", closed_forms),
        ("contrastive learnability", contrastive_learnability),
        ("supervised learnability", supervised_learnability),
        ("fine-tune ordering", finetune_ordering),
        ("ablation signal recovery", ablation_signal),
        ("curation oracle", curation_oracle),
        ("data invariants", data_invariants),
        ("determinism", determinism),
    ];
    let mut failures = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("criterion {} [{tag}] {name}: {detail} ({:.1?})", i + 1, t0.elapsed());
        if !pass {
            failures.push(i + 1);
        }
    }
    assert!(failures.is_empty(), "failing criteria: {failures:?}");
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p voxtrain-cli --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_yaml::Value;
use voxtrain::config::{base_config, load_config, merge, save_config, CacheKind, Config, ConfigError, Direction, LabelKind, LabelSpec};
use voxtrain::dataset::{CacheStrategy, Dataset};
use voxtrain::evaluation::metrics::{auc, brier, c_index, calibration_errors};
use voxtrain::evaluation::table::{read_metrics_csv, EndpointColumn, PredictionRow, PredictionTable};
use voxtrain::hpo::{run_experiment_with, Study, TrialState};
use voxtrain::manifest::{load_manifest, stratified_kfold, DataContract, LabelValue, Manifest, PatientRecord, Split, TabularStats};
use voxtrain::training::losses::{BinaryObjective, MaskedLoss};
use voxtrain::training::run_standard;
use voxtrain::transforms::{DeterministicStep, Stage, TransformPlan};
use voxtrain_cli::{cmd_make_synthetic, cmd_test, cmd_train, load, SyntheticArgs, TestArgs, TrainArgs};
use voxtrain_models::{build_model, Architecture, ComposedModel, EncoderSpec, EndpointKind, EndpointSpec, OutputSpec, VitSpec};
use voxtrain_tensor::nn::{Ctx, Module, Slot};
use voxtrain_tensor::{no_grad, Param, Tensor, Var};

type Outcome = Result<String, String>;
type Check<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// End-to-end synthetic runs

const BUDGET: Duration = Duration::from_secs(15 * 60);

struct Run {
    trial: PathBuf,
    config: PathBuf,
    elapsed: Duration,
    metrics: BTreeMap<String, BTreeMap<String, Option<f64>>>,
}

fn synthetic_run(root: &Path) -> Result<Run, String> {
    let start = Instant::now();
    let data = root.join("data");
    cmd_make_synthetic(&SyntheticArgs { out: data.clone(), n: 60, shape: vec![16, 16, 16], seed: 0, overwrite: false }).map_err(err)?;
    let config = data.join("config.yaml");
    cmd_train(&TrainArgs { config: config.clone(), folds: None, out: Some(root.join("runs")), overwrite: false }).map_err(err)?;
    let trial = root.join("runs/synthetic/trial_0");
    cmd_test(&TestArgs { run_dir: trial.clone(), config: config.clone(), data_root: None, csv: None }).map_err(err)?;
    let elapsed = start.elapsed();
    let metrics = read_metrics_csv(&trial.join("test_eval/ensemble/metrics_test.csv")).map_err(err)?;
    Ok(Run { trial, config, elapsed, metrics })
}

fn metric(run: &Run, endpoint: &str, name: &str) -> Result<f64, String> {
    run.metrics.get(endpoint).and_then(|m| m.get(name).copied().flatten()).ok_or_else(|| format!("{endpoint} {name} is undefined"))
}

fn binary_run(run: &Result<Run, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let (a, e) = (metric(run, "label", "auc")?, metric(run, "label", "ece")?);
    let secs = run.elapsed.as_secs_f64();
    let detail = format!("ensemble test AUC {a:.4} (>= 0.95), ECE {e:.4} (<= 0.15), {secs:.1} s");
    ensure(a >= 0.95 && e <= 0.15 && run.elapsed <= BUDGET, || detail.clone())?;
    Ok(detail)
}

fn survival_run(run: &Result<Run, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let c = metric(run, "os", "c_index")?;
    let secs = run.elapsed.as_secs_f64();
    let detail = format!("ensemble test C-index {c:.4} (>= 0.8), {secs:.1} s");
    ensure(c >= 0.8 && run.elapsed <= BUDGET, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Metric oracles

fn pair_score(a: f64, b: f64) -> u64 {
    if a > b {
        2
    } else if a == b {
        1
    } else {
        0
    }
}

fn oracle_auc(p: &[f64], y: &[f64]) -> Option<f64> {
    let (mut twice, mut pairs) = (0, 0u64);
    for i in 0..p.len() {
        for j in 0..p.len() {
            if y[i] == 1.0 && y[j] == 0.0 {
                pairs += 1;
                twice += pair_score(p[i], p[j]);
            }
        }
    }
    (pairs > 0).then(|| twice as f64 * 0.5 / pairs as f64)
}

fn oracle_c_index(r: &[f64], t: &[f64], e: &[f64]) -> Option<f64> {
    let (mut twice, mut pairs) = (0, 0u64);
    for i in 0..r.len() {
        for j in 0..r.len() {
            if e[i] == 1.0 && t[i] < t[j] {
                pairs += 1;
                twice += pair_score(r[i], r[j]);
            }
        }
    }
    (pairs > 0).then(|| twice as f64 * 0.5 / pairs as f64)
}

fn gap(idx: &[usize], p: &[f64], y: &[f64]) -> f64 {
    let m = idx.len() as f64;
    (idx.iter().map(|&i| y[i]).sum::<f64>() / m - idx.iter().map(|&i| p[i]).sum::<f64>() / m).abs()
}

fn oracle_calibration(p: &[f64], y: &[f64], bins: usize) -> (f64, f64, Option<f64>) {
    let n = p.len();
    let (mut ece, mut mce) = (0.0, 0.0f64);
    for b in 0..bins {
        let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
        let idx: Vec<usize> = (0..n).filter(|&i| p[i] >= lo && (p[i] < hi || b == bins - 1)).collect();
        if !idx.is_empty() {
            let g = gap(&idx, p, y);
            ece += idx.len() as f64 / n as f64 * g;
            mce = mce.max(g);
        }
    }
    let ace = (n >= bins).then(|| {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        let mut start = 0;
        let mut total = 0.0;
        for b in 0..bins {
            let size = n / bins + usize::from(b < n % bins);
            total += gap(&order[start..start + size], p, y);
            start += size;
        }
        total / bins as f64
    });
    (ece, mce, ace)
}

fn within(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= tol,
        (a, b) => a.is_none() && b.is_none(),
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..500 {
        let n = rng.gen_range(1..=200);
        // A coarse grid in half the cases makes ties frequent.
        let grid = case % 2 == 0;
        let p: Vec<f64> = (0..n).map(|_| if grid { f64::from(rng.gen_range(0..=20u32)) / 20.0 } else { rng.gen() }).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(1..40u32))).collect();
        let e: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.6)))).collect();
        let bins = rng.gen_range(1..=15);
        ensure(auc(&p, &y) == oracle_auc(&p, &y), || format!("table {case}: AUC differs"))?;
        ensure(c_index(&p, &t, &e) == oracle_c_index(&p, &t, &e), || format!("table {case}: C-index differs"))?;
        let (ece, mce, ace) = oracle_calibration(&p, &y, bins);
        let c = calibration_errors(&p, &y, bins);
        ensure(within(c.ece, Some(ece), 1e-12) && within(c.mce, Some(mce), 1e-12) && within(c.ace, ace, 1e-12), || {
            format!("table {case}: calibration {c:?} vs ({ece}, {mce}, {ace:?})")
        })?;
        let b = p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
        ensure(within(brier(&p, &y), Some(b), 1e-12), || format!("table {case}: Brier differs"))?;
    }
    Ok("500 tables: AUC and C-index exact, ECE/MCE/ACE and Brier within 1e-12".into())
}

// ---------------------------------------------------------------------------
// Masking

fn masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let objectives = [
        BinaryObjective::Bce,
        BinaryObjective::Focal { gamma: 2.0 },
        BinaryObjective::Asl { gamma_pos: 0.0, gamma_neg: 4.0, clip: 0.05 },
        BinaryObjective::Hill { lambda: 1.5, margin: 1.0, gamma: 2.0 },
    ];
    let mut checked = 0;
    for case in 0..500 {
        let (b, e) = (rng.gen_range(2..12), rng.gen_range(1..4));
        let n = b * e;
        let kinds: Vec<LabelKind> = (0..e).map(|_| if rng.gen_bool(0.5) { LabelKind::Event } else { LabelKind::Binary }).collect();
        let out: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let labels: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
        let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..50.0)).collect();
        let masks: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        if masks.iter().all(|m| !m) {
            continue;
        }
        let loss = MaskedLoss::new(objectives[case % 4].clone(), kinds);
        let base = loss.evaluate(&out, &labels, &times, &masks).map_err(err)?;

        let shape = [b, e];
        let f32s = |v: &[f64]| Tensor::from_vec(v.iter().map(|&x| x as f32).collect(), &shape);
        let mask_t = Tensor::from_vec(masks.iter().map(|&m| f32::from(u8::from(m))).collect(), &shape);
        let leaf = Var::leaf(Tensor::from_vec(out.clone(), &shape));
        loss.forward(&leaf, &f32s(&labels), &f32s(&times), &mask_t).map_err(err)?.backward();
        let grad = leaf.grad().ok_or("no gradient")?;

        let (mut labels2, mut times2, mut out2) = (labels.clone(), times.clone(), out.clone());
        for i in (0..n).filter(|&i| !masks[i]) {
            ensure(base.grad[i] == 0.0 && grad.data()[i] == 0.0, || format!("case {case}: masked entry {i} has gradient"))?;
            labels2[i] = 1.0 - labels2[i];
            times2[i] = rng.gen_range(0.1..100.0);
            out2[i] += rng.gen_range(-50.0..50.0);
        }
        let perturbed = loss.evaluate(&out, &labels2, &times2, &masks).map_err(err)?;
        ensure(perturbed == base, || format!("case {case}: masked-label perturbation changed the loss"))?;
        let perturbed = loss.evaluate(&out2, &labels2, &times2, &masks).map_err(err)?;
        ensure(perturbed == base, || format!("case {case}: masked-output perturbation changed the loss"))?;
        checked += 1;
    }
    Ok(format!("{checked} random batches: masked gradients exactly zero, loss identical under masked perturbation"))
}

// ---------------------------------------------------------------------------
// Gradient check

fn flat_params(m: &ComposedModel<f64>) -> Vec<(Param<f64>, usize)> {
    m.named_slots()
        .into_iter()
        .filter_map(|(_, s)| match s {
            Slot::Param(p) => Some(p),
            Slot::Buffer(_) => None,
        })
        .flat_map(|p| (0..p.numel()).map(move |i| (p.clone(), i)))
        .collect()
}

fn gradient_check() -> Outcome {
    let mut enc = EncoderSpec::new(Architecture::Cnn, "");
    enc.cnn_widths = vec![3, 4];
    let out = OutputSpec { n_clinical_layers: 1, clinical_sizes: vec![3], dropout: 0.0, ..Default::default() };
    let endpoints = [EndpointSpec::new("a", EndpointKind::Binary), EndpointSpec::new("os", EndpointKind::Event)];
    let m = build_model::<f64>(&enc, &out, &endpoints, 1, 2, 7).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Var::constant(Tensor::randn(&[4, 1, 4, 4, 4], 1.0, &mut rng));
    let t = Var::constant(Tensor::randn(&[4, 2], 1.0, &mut rng));
    let labels = Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0], &[4, 2]);
    let times = Tensor::from_vec(vec![0.0, 3.0, 0.0, 9.0, 0.0, 5.0, 0.0, 7.0], &[4, 2]);
    let masks = Tensor::from_vec(vec![1.0; 8], &[4, 2]);
    let loss = MaskedLoss::new(BinaryObjective::Bce, vec![LabelKind::Binary, LabelKind::Event]);
    let value = || -> Result<f64, String> {
        let _g = no_grad();
        let y = m.forward(Some(&x), Some(&t), &mut Ctx::eval()).map_err(err)?;
        Ok(loss.forward(&y, &labels, &times, &masks).map_err(err)?.item())
    };
    let y = m.forward(Some(&x), Some(&t), &mut Ctx::eval()).map_err(err)?;
    loss.forward(&y, &labels, &times, &masks).map_err(err)?.backward();
    let params = flat_params(&m);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (p, i) = &params[rng.gen_range(0..params.len())];
        let analytic = p.grad().map_or(0.0, |g| g.data()[*i]);
        let orig = p.value().data()[*i];
        p.update(|d| d[*i] = orig + h);
        let up = value()?;
        p.update(|d| d[*i] = orig - h);
        let down = value()?;
        p.update(|d| d[*i] = orig);
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    let detail = format!("50 parameters, worst relative error {worst:.2e} (<= 1e-3)");
    ensure(worst <= 1e-3, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Shape suite

fn shape_suite() -> Outcome {
    let _g = no_grad();
    let endpoints = [EndpointSpec::new("a", EndpointKind::Binary), EndpointSpec::new("os", EndpointKind::Event)];
    let mut specs: Vec<EncoderSpec> = Vec::new();
    for arch in Architecture::ALL {
        let variants = arch.variants();
        if variants.is_empty() {
            specs.push(EncoderSpec::new(arch, ""));
        }
        specs.extend(variants.iter().map(|v| EncoderSpec::new(arch, *v)));
    }
    let mut transrp = EncoderSpec::new(Architecture::TransRp, "");
    transrp.transrp_backbone = Architecture::Densenet;
    transrp.transrp_size = "121".into();
    specs.push(transrp);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let channels = 2;
    let tab = Var::constant(Tensor::randn(&[2, 3], 1.0, &mut rng));
    for spec in &specs {
        let n_mod = if spec.architecture == Architecture::None { 0 } else { channels };
        let name = format!("{}-{}", spec.architecture.name(), spec.size);
        let m = build_model::<f32>(spec, &OutputSpec::default(), &endpoints, n_mod, 3, 0).map_err(|e| format!("{name}: {e}"))?;
        let x = (n_mod > 0).then(|| Var::constant(Tensor::randn(&[2, channels, 64, 64, 32], 1.0, &mut rng)));
        let y = m.forward(x.as_ref(), Some(&tab), &mut Ctx::eval()).map_err(|e| format!("{name}: {e}"))?;
        ensure(y.shape() == [2, 2] && y.value().all_finite(), || format!("{name}: output {:?}", y.shape()))?;
    }

    let mut vit = EncoderSpec::new(Architecture::Vit, "");
    vit.vit = VitSpec { patch_size: [8; 3], hidden: 48, depth: 1, heads: 4, mlp_dim: 64 };
    let m = build_model::<f32>(&vit, &OutputSpec::default(), &endpoints, 1, 0, 0).map_err(err)?;
    let tokens = m.encoder().and_then(|e| e.token_count([64, 64, 32]));
    ensure(tokens == Some(8 * 8 * 4), || format!("patch-8 ViT on 64x64x32 gave {tokens:?} tokens"))?;
    Ok(format!("{} backbones map (2, 2, 64, 64, 32) to finite (2, 2); patch-8 ViT has 256 tokens", specs.len()))
}

// ---------------------------------------------------------------------------
// Fold properties

fn strat_manifest(cells: &[(u8, u8)]) -> Manifest {
    let records = cells
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| PatientRecord {
            patient_id: format!("P{i:04}"),
            split: Split::TrainVal,
            labels: vec![LabelValue { value: f64::from(a), time: 0.0, observed: true }],
            tabular: vec![],
            volume_paths: vec![],
            cells: BTreeMap::from([("a".to_string(), a.to_string()), ("b".to_string(), b.to_string())]),
        })
        .collect();
    Manifest {
        records,
        label_specs: vec![LabelSpec::binary("a")],
        tabular_names: vec![],
        modalities: vec![],
        volume_shape: None,
        columns: vec!["PatientID".into(), "a".into(), "b".into()],
    }
}

fn fold_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let n = rng.gen_range(10..150);
        let cells: Vec<(u8, u8)> = (0..n).map(|_| (rng.gen_range(0..3), rng.gen_range(0..4))).collect();
        let m = strat_manifest(&cells);
        let k = rng.gen_range(2..=6);
        let vars: Vec<String> = if rng.gen_bool(0.5) { vec!["a".into(), "b".into()] } else { vec!["a".into()] };
        let folds = stratified_kfold(&m, k, &vars, rng.gen()).map_err(err)?;
        let mut seen = BTreeSet::new();
        let mut counts: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
        for f in &folds {
            ensure(f.train.len() + f.val.len() == n && f.train.iter().all(|id| !f.val.contains(id)), || format!("manifest {case}: fold {} train/val overlap", f.index))?;
            for id in &f.val {
                ensure(seen.insert(id.clone()), || format!("manifest {case}: {id} validated twice"))?;
                let r = m.get(id).ok_or("unknown id")?;
                counts.entry(vars.iter().map(|v| r.cells[v].clone()).collect()).or_insert_with(|| vec![0; k])[f.index] += 1;
            }
        }
        ensure(seen.len() == n, || format!("manifest {case}: {} of {n} patients validated", seen.len()))?;
        for (key, c) in counts {
            let spread = c.iter().max().unwrap_or(&0) - c.iter().min().unwrap_or(&0);
            ensure(spread <= 1, || format!("manifest {case}: stratum {key:?} spread {c:?}"))?;
        }
    }
    Ok("100 manifests: exact cover, per-stratum imbalance <= 1".into())
}

// ---------------------------------------------------------------------------
// Cache transparency

fn eval_dataset(m: &Manifest, plan: &TransformPlan, kind: CacheKind, cache_dir: &Path) -> Result<Dataset, String> {
    let strategy = CacheStrategy { kind, fraction: 0.5, replace_rate: 0.25, cache_dir: cache_dir.to_path_buf() };
    Dataset::build(m, plan, &TabularStats::fit(m), &strategy, Stage::Eval).map_err(err)
}

fn bits(ds: &Dataset, id: &str) -> Result<Vec<u32>, String> {
    let s = ds.get_patient(id).map_err(err)?;
    let img = s.image.ok_or("sample has no image")?;
    Ok(img.data.iter().chain(&s.tabular).map(|v| v.to_bits()).collect())
}

fn cache_transparency(root: &Path) -> Outcome {
    let data = root.join("cache_data");
    cmd_make_synthetic(&SyntheticArgs { out: data.clone(), n: 10, shape: vec![12, 12, 12], seed: 5, overwrite: false }).map_err(err)?;
    let s = load(&data.join("config.yaml"), None).map_err(err)?.settings().map_err(err)?;
    let m = load_manifest(&DataContract::from_settings(&s)).map_err(err)?;
    let mut plan = TransformPlan::from_settings(&s);
    plan.deterministic.push(DeterministicStep::CenterCrop([10, 10, 10]));
    let cache = root.join("cache");

    let reference = eval_dataset(&m, &plan, CacheKind::Standard, &cache)?;
    for kind in [CacheKind::Cache, CacheKind::Smartcache, CacheKind::Persistent] {
        let ds = eval_dataset(&m, &plan, kind, &cache)?;
        for id in m.ids() {
            ensure(bits(&ds, &id)? == bits(&reference, &id)?, || format!("{kind:?} differs for {id}"))?;
        }
    }
    let hit = eval_dataset(&m, &plan, CacheKind::Persistent, &cache)?;
    for id in m.ids() {
        ensure(bits(&hit, &id)? == bits(&reference, &id)?, || format!("cached entry differs for {id}"))?;
    }
    ensure(hit.deterministic_computations() == 0, || format!("cache hit recomputed {} entries", hit.deterministic_computations()))?;

    let clip = |f: fn(&mut [f64; 4])| {
        let mut p = plan.clone();
        if let DeterministicStep::ClipNormalize { a_min, a_max, b_min, b_max, .. } = &mut p.deterministic[0] {
            let mut v = [*a_min, *a_max, *b_min, *b_max];
            f(&mut v);
            [*a_min, *a_max, *b_min, *b_max] = v;
        }
        p
    };
    let mut variants = vec![
        ("a_min", clip(|v| v[0] -= 1.0)),
        ("a_max", clip(|v| v[1] += 1.0)),
        ("b_min", clip(|v| v[2] -= 0.5)),
        ("b_max", clip(|v| v[3] += 0.5)),
    ];
    let mut crop = plan.clone();
    crop.deterministic[1] = DeterministicStep::CenterCrop([8, 10, 10]);
    variants.push(("crop size", crop));
    let mut mapped = plan.clone();
    mapped.deterministic.insert(0, DeterministicStep::ValueMap { modality: "CT".into(), mapping: vec![(0.0, 1.0)] });
    variants.push(("value map", mapped));
    for (what, p) in variants {
        let ds = eval_dataset(&m, &p, CacheKind::Persistent, &cache)?;
        ensure(ds.deterministic_computations() == m.len(), || format!("changing {what} reused {} cached entries", m.len() - ds.deterministic_computations()))?;
    }
    Ok("standard, cache, smartcache and persistent samples bit-identical; cache hit recomputes nothing; 6 parameter changes invalidate".into())
}

// ---------------------------------------------------------------------------
// Config

const TINY: &str = "
dataset: {batch_size: 4, strategy: standard}
model:
  architecture: cnn
  cnn: {widths: [4, 8]}
  output: {shared_sizes: [8], endpoint_sizes: [4], dropout: 0.0}
training: {K: 3, epochs: 3, early_stopping: {patience: 0}, folds_to_run: [0, 1]}
";

fn set_out(cfg: &mut Config, out: &Path) -> Result<(), String> {
    cfg.set("output_dir", Value::String(out.to_string_lossy().into_owned())).map_err(err)
}

fn config_contract(root: &Path) -> Outcome {
    let base = base_config();
    ensure(merge(&base, &Config::empty()).map_err(err)? == base, || "empty override changed the defaults".into())?;
    let a = Config::from_yaml_str("training: {epochs: 7, optimizer: {lr: 0.5}}").map_err(err)?;
    let b = Config::from_yaml_str("training: {optimizer: {lr: 0.25}}").map_err(err)?;
    let ab = merge(&merge(&base, &a).map_err(err)?, &b).map_err(err)?;
    ensure(ab.get("training.epochs") == Some(&Value::from(7)) && ab.get("training.optimizer.lr") == Some(&Value::from(0.25)), || "later layer did not win".into())?;
    let typo = Config::from_yaml_str("training: {optimiser: {lr: 0.1}}").map_err(err)?;
    ensure(matches!(merge(&base, &typo), Err(ConfigError::UnknownKey(ref k)) if k == "training.optimiser"), || "unknown key accepted".into())?;

    let saved = root.join("roundtrip.yaml");
    save_config(&ab, &saved).map_err(err)?;
    ensure(load_config(&saved).map_err(err)? == ab, || "save/load round trip changed the config".into())?;

    let data = root.join("config_data");
    cmd_make_synthetic(&SyntheticArgs { out: data.clone(), n: 24, shape: vec![8, 8, 8], seed: 2, overwrite: false }).map_err(err)?;
    let mut cfg = load(&data.join("config.yaml"), Some(&root.join("first"))).map_err(err)?;
    cfg = merge(&cfg, &Config::from_yaml_str(TINY).map_err(err)?).map_err(err)?;
    run_standard(&cfg).map_err(err)?;
    let fold = |out: &str, k: usize| root.join(out).join(format!("synthetic/trial_0/fold_{k}"));
    for k in [0, 1] {
        let mut replay = load_config(&fold("first", k).join("config.yaml")).map_err(err)?;
        set_out(&mut replay, &root.join(format!("replay_{k}")))?;
        run_standard(&replay).map_err(err)?;
        for f in ["predictions_train.csv", "predictions_val.csv"] {
            let original = fs::read(fold("first", k).join(f)).map_err(err)?;
            let again = fs::read(fold(&format!("replay_{k}"), k).join(f)).map_err(err)?;
            ensure(original == again, || format!("fold {k} replay changed {f}"))?;
        }
    }
    Ok("merge identity, precedence and unknown-key rejection hold; round trip exact; 2 fold configs replay to identical predictions".into())
}

// ---------------------------------------------------------------------------
// HPO

fn hpo_config() -> Result<Config, String> {
    let space = "experiment:
  sampler: random
  search_space:
    - {path: training.optimizer.lr, type: float, low: 1.0e-4, high: 1.0e-1, log: true}
    - {path: training.epochs, type: int, low: 1, high: 50}
    - {path: training.optimizer.name, type: categorical, choices: [adam, sgd, adamw]}
";
    merge(&base_config(), &Config::from_yaml_str(space).map_err(err)?).map_err(err)
}

fn stub(c: &Config) -> Result<Vec<Option<f64>>, String> {
    let s = c.settings().map_err(err)?;
    let bonus = match c.get("training.optimizer.name").and_then(Value::as_str) {
        Some("sgd") => 0.3,
        Some("adamw") => 0.1,
        _ => 0.0,
    };
    let v = -(s.training.optimizer.lr.log10() + 2.0).powi(2) - ((s.training.epochs as f64 - 20.0) / 10.0).powi(2) + bonus;
    Ok(vec![Some(v), Some(v)])
}

fn hpo(root: &Path) -> Outcome {
    let cfg = hpo_config()?;
    let mut study = Study::new(Direction::Maximize);
    run_experiment_with(&cfg, 40, Direction::Maximize, &mut study, |c, _| stub(c)).map_err(err)?;
    let mut brute = None::<(usize, f64)>;
    for t in &study.trials {
        let mut c = cfg.clone();
        for (k, v) in &t.assignment {
            c.set(k, v.clone()).map_err(err)?;
        }
        let v = stub(&c)?[0].ok_or("stub undefined")?;
        if brute.is_none_or(|(_, b)| v > b) {
            brute = Some((t.index, v));
        }
    }
    let best = study.best().ok_or("no best trial")?.index;
    ensure(Some(best) == brute.map(|b| b.0), || format!("best trial {best}, brute force {brute:?}"))?;

    let whole = root.join("whole.log");
    let mut reference = Study::open(&whole, Direction::Maximize).map_err(err)?;
    run_experiment_with(&cfg, 12, Direction::Maximize, &mut reference, |c, _| stub(c)).map_err(err)?;
    let part = root.join("part.log");
    let crashed = panic::catch_unwind(|| {
        let mut s = Study::open(&part, Direction::Maximize).expect("fresh study");
        let _ = run_experiment_with(&cfg, 12, Direction::Maximize, &mut s, |c, i| {
            assert_ne!(i, 7, "simulated crash");
            stub(c)
        });
    });
    ensure(crashed.is_err(), || "crash was not simulated".into())?;
    let mut resumed = Study::open(&part, Direction::Maximize).map_err(err)?;
    ensure(resumed.get(7).is_some_and(|t| t.state == TrialState::Running), || "interrupted trial not recorded as running".into())?;
    run_experiment_with(&cfg, 12, Direction::Maximize, &mut resumed, |c, _| stub(c)).map_err(err)?;
    let reopened = Study::open(&part, Direction::Maximize).map_err(err)?;
    ensure(resumed.trials == reference.trials && reopened.trials == reference.trials, || "resumed study differs from an uninterrupted one".into())?;
    Ok(format!("best of 40 random trials is the brute-force optimum (trial {best}); resume after a crash in trial 7 is lossless"))
}

// ---------------------------------------------------------------------------
// Ensemble

fn one_row_table(p: f64) -> PredictionTable {
    PredictionTable {
        endpoints: vec![EndpointColumn { name: "label".into(), kind: LabelKind::Binary }],
        rows: vec![PredictionRow { patient_id: "P1".into(), preds: vec![p], labels: vec![1.0], times: vec![0.0], observed: vec![true] }],
    }
}

fn ensemble(run: &Result<Run, String>, root: &Path) -> Outcome {
    let pair = PredictionTable::ensemble(&[one_row_table(0.2), one_row_table(0.8)]).map_err(err)?;
    ensure((pair.rows[0].preds[0] - 0.5).abs() < 1e-15, || format!("0.2/0.8 gave {}", pair.rows[0].preds[0]))?;

    let run = run.as_ref().map_err(Clone::clone)?;
    let fold0 = PredictionTable::read_csv(&run.trial.join("test_eval/fold_0/predictions_test.csv")).map_err(err)?;
    let same = PredictionTable::ensemble(&[fold0.clone(), fold0.clone(), fold0.clone()]).map_err(err)?;
    ensure(same == fold0, || "identical folds did not ensemble to themselves".into())?;

    let trial = root.join("partial/trial_0");
    fs::create_dir_all(&trial).map_err(err)?;
    for k in 0..3 {
        let src = run.trial.join(format!("fold_{k}"));
        let dst = trial.join(format!("fold_{k}"));
        fs::create_dir_all(&dst).map_err(err)?;
        for f in ["config.yaml", "tabular_stats.csv", "weights.bin", "predictions_val.csv", "DONE"] {
            if k != 1 || f != "weights.bin" {
                fs::copy(src.join(f), dst.join(f)).map_err(err)?;
            }
        }
    }
    cmd_test(&TestArgs { run_dir: trial.clone(), config: run.config.clone(), data_root: None, csv: None }).map_err(err)?;
    for k in [0, 2] {
        ensure(trial.join(format!("test_eval/fold_{k}/metrics_test.csv")).is_file(), || format!("fold {k} report missing"))?;
    }
    ensure(!trial.join("test_eval/fold_1").exists() && trial.join("test_eval/ensemble/metrics_test.csv").is_file(), || "fold 1 should be skipped".into())?;
    Ok("0.2/0.8 -> 0.5; identical folds idempotent; folds 0 and 2 reported with fold 1 weights missing".into())
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    panic::set_hook(Box::new(|_| {}));
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let run = panic::catch_unwind(AssertUnwindSafe(|| synthetic_run(&root.join("e2e")))).unwrap_or_else(|_| Err("synthetic run panicked".into()));

    let criteria: Vec<Check<'_>> = vec![
        ("end-to-end binary endpoint", Box::new(|| binary_run(&run))),
        ("end-to-end survival endpoint", Box::new(|| survival_run(&run))),
        ("metric oracle equivalence", Box::new(metric_oracles)),
        ("masking", Box::new(masking)),
        ("gradient check", Box::new(gradient_check)),
        ("shape suite", Box::new(shape_suite)),
        ("fold properties", Box::new(fold_properties)),
        ("cache transparency", Box::new(|| cache_transparency(root))),
        ("config", Box::new(|| config_contract(root))),
        ("hyperparameter search", Box::new(|| hpo(root))),
        ("ensemble", Box::new(|| ensemble(&run, root))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = guarded(check);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

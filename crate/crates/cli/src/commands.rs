use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ivtrust::datasets::{fold_split, generate_synthetic, kfold_split, load_frames_dir, sample_attack_set, save_frames_dir, Dataset, Example, FoldSplit};
use ivtrust::explain::{attribute, cam_heatmap, min_max_normalize, overlay, write_attribution, AttributionMap, Method};
use ivtrust::metrics::{component_ap, ComponentAp};
use ivtrust::model::{encode_checkpoint, ReferenceModel};
use ivtrust::report::{core_spurious_mass, curve_svg, mass_csv, metrics_csv, top_k, top_k_csv, MassFractions, ReportWriter};
use ivtrust::robustness::{correctly_classified, records_csv, records_jsonl, robustness_curve, robustness_eval, AttackItem, MaskSource, RobustnessCurve, RobustnessRecord, SetKind};
use ivtrust::training::{adversarial_fit, history_csv, predictions, sgd_fit};
use ivtrust::triplet::{ComponentId, TripletTable};
use ivtrust::Classifier;
use serde::Serialize;

use crate::config::{DataSource, RunConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => Ok(generate_synthetic(&cfg.data.synthetic, cfg.data.n_examples)?),
        DataSource::Frames => {
            let dir = cfg.data.dir.as_deref().ok_or_else(|| CliError::config("data.dir is not set"))?;
            let table = TripletTable::load(&dir.join("triplet_map.txt"))?;
            let ds = load_frames_dir(dir, &table)?;
            if ds.is_empty() {
                return Err(CliError::data(format!("no frames under {}", dir.display())));
            }
            Ok(ds)
        }
    }
}

pub fn split(cfg: &RunConfig, ds: &Dataset) -> Result<FoldSplit> {
    let folds = kfold_split(&ds.video_ids(), cfg.data.folds, cfg.seed())?;
    Ok(fold_split(&folds, cfg.fold, cfg.data.val_videos)?)
}

fn image_size(ds: &Dataset) -> Result<(usize, usize)> {
    let e = ds.examples.first().ok_or_else(|| CliError::data("dataset is empty"))?;
    let s = e.image.shape();
    Ok((s[0], s[1]))
}

fn load_model(cfg: &RunConfig, ds: &Dataset) -> Result<ReferenceModel> {
    let path = cfg.checkpoint();
    if !path.is_file() {
        return Err(CliError::data(format!("checkpoint {} does not exist; run `train` first", path.display())));
    }
    let (h, w) = image_size(ds)?;
    Ok(ReferenceModel::load_checkpoint_for(&path, &cfg.model_config(h, w, &ds.table))?)
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::data(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn finish(cfg: &RunConfig, w: ReportWriter) -> Result<usize> {
    let n = w.files().len();
    w.finish(&cfg.to_json())?;
    Ok(n)
}

fn test_examples<'a>(ds: &'a Dataset, cfg: &RunConfig) -> Result<Vec<&'a Example>> {
    let s = split(cfg, ds)?;
    let test = ds.select_videos(&s.test);
    if test.is_empty() {
        return Err(CliError::data("test fold is empty"));
    }
    Ok(test)
}

fn track_tree(w: &mut ReportWriter, rel: &str) -> Result<()> {
    let root = w.path(rel);
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(&root).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::data(e.to_string()))?;
        if entry.file_type().is_file() {
            let p = entry.path().strip_prefix(w.root()).map_err(|e| CliError::data(e.to_string()))?;
            files.push(p.to_string_lossy().replace('\\', "/"));
        }
    }
    for f in files {
        w.track(&f)?;
    }
    Ok(())
}

/// `synth`: writes the synthetic dataset as a frames directory under
/// `<out>/data`, plus the fold assignment.
pub fn synth(cfg: &RunConfig) -> Result<String> {
    if cfg.data.source != DataSource::Synthetic {
        return Err(CliError::config("synth needs data.source = \"synthetic\""));
    }
    let ds = load_dataset(cfg)?;
    let mut w = ReportWriter::open(&cfg.out)?;
    save_frames_dir(&ds, &w.path("data"))?;
    track_tree(&mut w, "data")?;
    let folds = kfold_split(&ds.video_ids(), cfg.data.folds, cfg.seed())?;
    w.write("folds.json", &json_bytes(&folds)?)?;
    let n = finish(cfg, w)?;
    Ok(format!("synth: {} examples, {} videos, {n} files in {}", ds.len(), ds.video_ids().len(), cfg.out.display()))
}

#[derive(Serialize)]
struct TrainSummary {
    adversarial: bool,
    best_epoch: usize,
    epochs: usize,
    train_examples: usize,
    val_examples: usize,
    split: FoldSplit,
}

/// `train`: fits the reference model on the training videos of the fold,
/// selecting the epoch by validation AP.
pub fn train(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let s = split(cfg, &ds)?;
    let (train, val) = (ds.select_videos(&s.train), ds.select_videos(&s.val));
    if train.is_empty() {
        return Err(CliError::data("no training examples in the fold"));
    }
    let (h, w) = image_size(&ds)?;
    let model = ReferenceModel::init(cfg.model_config(h, w, &ds.table))?;
    let fit = if cfg.adversarial.enabled {
        adversarial_fit(model, &ds.table, &train, &val, &cfg.adversarial_config())?
    } else {
        sgd_fit(model, &ds.table, &train, &val, &cfg.train)?
    };
    let mut wr = ReportWriter::open(&cfg.out)?;
    let bytes = encode_checkpoint(fit.model.config(), fit.model.params())?;
    match &cfg.model.checkpoint {
        None => {
            wr.write("model.ckpt", &bytes)?;
        }
        Some(p) => std::fs::write(p, &bytes).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?,
    }
    wr.write("history.csv", history_csv(&fit.history).as_bytes())?;
    let summary = TrainSummary {
        adversarial: cfg.adversarial.enabled,
        best_epoch: fit.best_epoch,
        epochs: cfg.train.epochs,
        train_examples: train.len(),
        val_examples: val.len(),
        split: s,
    };
    wr.write("train.json", &json_bytes(&summary)?)?;
    finish(cfg, wr)?;
    Ok(format!("train: {} examples, best epoch {}, checkpoint {}", train.len(), fit.best_epoch, cfg.checkpoint().display()))
}

fn component_aps(model: &ReferenceModel, table: &TripletTable, examples: &[&Example]) -> Result<Vec<ComponentAp>> {
    let (pred, _) = predictions(model, examples)?;
    let mut out = Vec::new();
    for d in ComponentId::ALL {
        out.push(component_ap(&pred, table, d)?);
    }
    Ok(out)
}

fn mean_table(aps: &[ComponentAp]) -> BTreeMap<String, Option<f64>> {
    aps.iter().map(|a| (a.component.name().to_string(), a.mean)).collect()
}

/// `eval`: per-component AP on the test fold.
pub fn eval(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let test = test_examples(&ds, cfg)?;
    let aps = component_aps(&model, &ds.table, &test)?;
    let mut w = ReportWriter::open(&cfg.out)?;
    w.write("metrics.csv", metrics_csv(&aps).as_bytes())?;
    w.write("metrics.json", &json_bytes(&mean_table(&aps))?)?;
    finish(cfg, w)?;
    let ivt = aps.iter().find(|a| a.component == ComponentId::IVT).and_then(|a| a.mean);
    Ok(format!("eval: {} test examples, AP_IVT {}", test.len(), ivt.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into())))
}

/// Class explained for an example: its single label, else the prediction.
fn explained_class(model: &ReferenceModel, e: &Example) -> Result<usize> {
    match e.single_label() {
        Some(y) => Ok(y),
        None => Ok(model.predict(&e.image)?),
    }
}

fn attribution(cfg: &RunConfig, model: &ReferenceModel, table: &TripletTable, e: &Example, m: usize, method: Method) -> Result<AttributionMap> {
    match method {
        Method::Cam => {
            let out = model.forward(&e.image)?;
            Ok(cam_heatmap(model, &out, table.project(ComponentId::I, m)?)?)
        }
        _ => Ok(attribute(model, &e.image, m, method, &cfg.explain.explain_config())?),
    }
}

/// Mean core/spurious/background fractions per method over the examples
/// that carry ground-truth masks.
fn mass_rows(cfg: &RunConfig, model: &ReferenceModel, table: &TripletTable, examples: &[&Example]) -> Result<Vec<(String, f64, MassFractions)>> {
    let p = cfg.explain.mass_fraction;
    let with_masks: Vec<&&Example> = examples.iter().filter(|e| e.core_mask.is_some() && e.spurious_mask.is_some() && !e.blacked_out).collect();
    let mut rows = Vec::new();
    if with_masks.is_empty() {
        return Ok(rows);
    }
    for &method in &cfg.explain.methods {
        let per = ivtrust::par::map(&with_masks, |e| -> Result<MassFractions> {
            let a = attribution(cfg, model, table, e, explained_class(model, e)?, method)?;
            Ok(core_spurious_mass(&a, e.core_mask.as_ref().expect("filtered"), e.spurious_mask.as_ref().expect("filtered"), p)?)
        });
        let mut acc = MassFractions { core: 0.0, spurious: 0.0, background: 0.0 };
        for f in per {
            let f = f?;
            acc.core += f.core;
            acc.spurious += f.spurious;
            acc.background += f.background;
        }
        let n = with_masks.len() as f64;
        rows.push((method.name().to_string(), p, MassFractions { core: acc.core / n, spurious: acc.spurious / n, background: acc.background / n }));
    }
    Ok(rows)
}

/// `explain`: heatmap overlays, raw attribution dumps and the
/// core/spurious mass table for the first test examples.
pub fn explain(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let test = test_examples(&ds, cfg)?;
    let chosen: Vec<&Example> = test.iter().copied().filter(|e| !e.blacked_out).take(cfg.explain.n_examples).collect();
    let mut w = ReportWriter::open(&cfg.out)?;
    let mut index = String::from("example_id,video_id,frame_id,class,method,overlay,attribution\n");
    for e in &chosen {
        let m = explained_class(&model, e)?;
        for &method in &cfg.explain.methods {
            let a = attribution(cfg, &model, &ds.table, e, m, method)?;
            let mut heat = a.values.clone();
            min_max_normalize(&mut heat);
            let img = overlay(&e.image, &heat, cfg.explain.alpha)?;
            let stem = format!("explain/{:05}_{}", e.id, method.name());
            let png = w.path(&format!("{stem}.png"));
            if let Some(dir) = png.parent() {
                std::fs::create_dir_all(dir).map_err(|err| CliError::data(format!("{}: {err}", dir.display())))?;
            }
            img.save(&png).map_err(|err| CliError::data(format!("{}: {err}", png.display())))?;
            w.track(&format!("{stem}.png"))?;
            write_attribution(&a, &w.path(&format!("{stem}.attr")))?;
            w.track(&format!("{stem}.attr"))?;
            let _ = writeln!(index, "{},{},{},{m},{},{stem}.png,{stem}.attr", e.id, e.video_id, e.frame_id, method.name());
        }
    }
    w.write("explain/index.csv", index.as_bytes())?;
    let rows = mass_rows(cfg, &model, &ds.table, &chosen)?;
    w.write("mass.csv", mass_csv(&rows).as_bytes())?;
    finish(cfg, w)?;
    Ok(format!("explain: {} examples x {} methods", chosen.len(), cfg.explain.methods.len()))
}

/// Correctly classified single-label test examples, sampled without
/// replacement (at most `attack.n_examples`).
pub fn attack_items(cfg: &RunConfig, model: &ReferenceModel, test: &[&Example]) -> Result<Vec<AttackItem>> {
    let items = correctly_classified(model, test)?;
    if items.is_empty() {
        return Err(CliError::data("no correctly classified single-label test examples to attack"));
    }
    let by_id: BTreeMap<usize, &Example> = test.iter().map(|e| (e.id, *e)).collect();
    let refs: Vec<&Example> = items.iter().map(|i| by_id[&i.id]).collect();
    let n = cfg.attack.n_examples.min(items.len());
    let picked = sample_attack_set(&refs, n, cfg.seed())?;
    Ok(picked.into_iter().map(|k| items[k].clone()).collect())
}

fn summary_csv(rows: &[(String, SetKind, f64, ivtrust::robustness::EvalSummary)]) -> String {
    let mut s = String::from("explainer,set,fraction,mean_epsilon,n_success,n_censored\n");
    for (ex, set, f, sm) in rows {
        let mean = sm.mean.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{ex},{},{f},{mean},{},{}", set.name(), sm.n_success, sm.n_censored);
    }
    s
}

/// `attack`: minimum-norm attacks on the relevant and irrelevant sets of
/// each explainer at `attack.fraction`, plus the full mask.
pub fn attack(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let test = test_examples(&ds, cfg)?;
    let items = attack_items(cfg, &model, &test)?;
    let ecfg = cfg.explain.explain_config();
    let mut records: Vec<RobustnessRecord> = Vec::new();
    let mut rows = Vec::new();
    let mut runs: Vec<(MaskSource, SetKind)> = Vec::new();
    for &m in &cfg.attack.explainers {
        runs.push((MaskSource::Explainer(m), SetKind::Relevant));
        if cfg.attack.fraction < 1.0 {
            runs.push((MaskSource::Explainer(m), SetKind::Irrelevant));
        }
    }
    if cfg.attack.full {
        runs.push((MaskSource::Full, SetKind::Full));
    }
    for (source, set) in runs {
        let f = if source == MaskSource::Full { 1.0 } else { cfg.attack.fraction };
        let (rs, sm) = robustness_eval(&model, &items, source, f, set, &cfg.attack.solver, &ecfg)?;
        rows.push((source.name().to_string(), set, f, sm));
        records.extend(rs);
    }
    let mut w = ReportWriter::open(&cfg.out)?;
    w.write("robustness.csv", records_csv(&records).as_bytes())?;
    w.write("robustness.jsonl", records_jsonl(&records)?.as_bytes())?;
    w.write("robustness_summary.csv", summary_csv(&rows).as_bytes())?;
    finish(cfg, w)?;
    Ok(format!("attack: {} examples, {} records", items.len(), records.len()))
}

pub fn curve_csv(curves: &[RobustnessCurve]) -> String {
    let mut s = String::from("explainer,fraction,set,mean_epsilon,n_censored,n_examples\n");
    for c in curves {
        for (k, f) in c.fractions.iter().enumerate() {
            for (set, means, cens) in [("relevant", &c.relevant, &c.relevant_censored), ("irrelevant", &c.irrelevant, &c.irrelevant_censored)] {
                let mean = means[k].map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{},{f},{set},{mean},{},{}", c.explainer, cens[k], c.n_examples);
            }
        }
    }
    s
}

/// `curve`: robustness of `S_r` and its complement over `curve.fractions`.
pub fn curve(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let test = test_examples(&ds, cfg)?;
    let items = attack_items(cfg, &model, &test)?;
    let ecfg = cfg.explain.explain_config();
    let mut curves = Vec::new();
    let mut records = Vec::new();
    for &m in &cfg.attack.explainers {
        let (c, rs) = robustness_curve(&model, &items, MaskSource::Explainer(m), &cfg.curve.fractions, &cfg.attack.solver, &ecfg)?;
        curves.push(c);
        records.extend(rs);
    }
    let mut w = ReportWriter::open(&cfg.out)?;
    w.write("curve.csv", curve_csv(&curves).as_bytes())?;
    w.write("curve.json", &json_bytes(&curves)?)?;
    w.write("curve_records.csv", records_csv(&records).as_bytes())?;
    w.write("curve.svg", curve_svg(&curves, "Robustness against top-fraction feature sets").as_bytes())?;
    finish(cfg, w)?;
    Ok(format!("curve: {} explainers x {} fractions on {} examples", curves.len(), cfg.curve.fractions.len(), items.len()))
}

fn triplet_names(table: &TripletTable) -> Vec<String> {
    table.rows().iter().map(|(i, v, t)| format!("i{i}_v{v}_t{t}")).collect()
}

/// `report`: metrics, top-k classes per component, the core/spurious mass
/// table and, when `curve` has run, the robustness figure.
pub fn report(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let test = test_examples(&ds, cfg)?;
    let aps = component_aps(&model, &ds.table, &test)?;
    let mut w = ReportWriter::open(&cfg.out)?;
    w.write("report/metrics.csv", metrics_csv(&aps).as_bytes())?;
    let names = triplet_names(&ds.table);
    let mut top = String::new();
    for ap in &aps {
        let rows = top_k(&ap.per_class, cfg.report.top_k);
        let n = (ap.component == ComponentId::IVT).then_some(names.as_slice());
        let csv = top_k_csv(ap.component.name(), &rows, n);
        if top.is_empty() {
            top.push_str(&csv);
        } else {
            top.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
        }
    }
    w.write("report/top_k.csv", top.as_bytes())?;
    let mut mass_examples: Vec<&Example> = test.iter().copied().filter(|e| !e.blacked_out).collect();
    mass_examples.truncate(cfg.explain.n_examples);
    let rows = mass_rows(cfg, &model, &ds.table, &mass_examples)?;
    w.write("report/mass.csv", mass_csv(&rows).as_bytes())?;
    let curve_json = w.path("curve.json");
    if curve_json.is_file() {
        let text = std::fs::read_to_string(&curve_json).map_err(|e| CliError::data(format!("{}: {e}", curve_json.display())))?;
        let curves: Vec<RobustnessCurve> = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", curve_json.display())))?;
        w.write("report/robustness.svg", curve_svg(&curves, "Robustness against top-fraction feature sets").as_bytes())?;
    }
    w.write("report/summary.json", &json_bytes(&mean_table(&aps))?)?;
    let n = finish(cfg, w)?;
    let bad = ivtrust::report::verify_manifest(&cfg.out)?;
    if !bad.is_empty() {
        return Err(CliError::data(format!("manifest mismatch for {}", bad.join(", "))));
    }
    Ok(format!("report: {n} files tracked in {}", Path::new(&cfg.out).join("manifest.json").display()))
}

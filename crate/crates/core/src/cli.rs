//! Command-line front end. Every subcommand writes provenance-stamped files
//! under `<output>/<subcommand>/` plus a manifest, and prints a one-line
//! JSON summary on stdout. Failures print `{"error": {kind, message}}` on
//! stderr and exit nonzero.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::concepts::ConceptMethod;
use crate::config::{open_backend, RunConfig, MODEL_ENV};
use crate::dataset::Dataset;
use crate::descriptors::{instantiate, DescriptorBank};
use crate::embedding::Facet;
use crate::error::{Error, Result};
use crate::eval::{acc_drop, acc_increase, accuracy, mean_auc, PredictionRecord};
use crate::imaging::{overlay, PixelMask};
use crate::mi::{aggregate_mi, MiRecord};
use crate::pipeline::{Explanation, ImageInput, Pipeline};
use crate::report::{read_manifest, verify_file, write_atomic, OutputWriter};
use crate::spectral::{mask_to_rgba, MaskExport};
use crate::store::extract_store;

#[derive(Debug, Parser)]
#[command(name = "clipmi", version, about = "Multimodal concept explanations and mutual-information analysis for CLIP-style classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a dataset and its descriptor prompts into a CLIPEMB1 store.
    Extract(CommonArgs),
    /// Localize, segment and ground concepts; write overlays and reports.
    Explain {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        selection: Selection,
    },
    /// Grounded descriptors only, as JSON and CSV.
    Ground {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        selection: Selection,
    },
    /// Mutual-information dynamics between vision and language concepts.
    Mi {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        selection: Selection,
    },
    /// Deletion, insertion, AccDrop and AccInc over the dataset.
    Evaluate(CommonArgs),
    /// Descriptor-boosted zero-shot classification.
    Boost(CommonArgs),
    /// Verify every manifest under the output directory and collect summaries.
    Report(CommonArgs),
}

/// Options shared by every subcommand. Values from `--config` are read first
/// and explicit flags override them.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Encoder file (.json analytic encoder or .onnx graph).
    #[arg(long, env = MODEL_ENV)]
    pub model: Option<PathBuf>,
    /// CLIPEMB1 store consulted before the model.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Dataset directory with classes.json and labels.csv.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Per-class descriptor JSON.
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    /// Output directory; each subcommand writes into its own subdirectory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Patch feature facet: tokens or keys.
    #[arg(long, value_parser = parse_facet)]
    pub facet: Option<Facet>,
    /// Model input resolution, needed when serving from a store alone.
    #[arg(long)]
    pub input_size: Option<u32>,
    /// Concept decomposition: kmeans or pca.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<ConceptMethod>,
    /// Number of visual concepts.
    #[arg(long = "concepts", short = 'l')]
    pub l: Option<usize>,
    /// Candidate descriptors kept per concept after the median filter.
    #[arg(long)]
    pub k: Option<usize>,
    /// Sinkhorn temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub sinkhorn_max_iters: Option<usize>,
    /// Sinkhorn stopping tolerance on the marginals.
    #[arg(long)]
    pub sinkhorn_tol: Option<f64>,
    /// Descriptors retrieved around the predicted class.
    #[arg(long)]
    pub u: Option<usize>,
    /// Descriptors reported per concept.
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Cluster raw rather than L2-normalized patch features.
    #[arg(long)]
    pub no_normalize: bool,
    /// imagenet, places365 or food101.
    #[arg(long)]
    pub templates: Option<String>,
    /// Seed for every random choice in the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
}

fn parse_facet(s: &str) -> std::result::Result<Facet, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<ConceptMethod, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown method {s:?} (kmeans or pca)"))
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    c.$f = v.clone().into();
                }
            )*};
        }
        set!(model, store, dataset, descriptors, output, facet, input_size, method, l, k, tau);
        set!(sinkhorn_max_iters, sinkhorn_tol, u, top_n, templates, seed, workers);
        if self.no_normalize {
            c.normalize_features = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Selection {
    /// Only images of this class (repeatable).
    #[arg(long = "class")]
    pub classes: Vec<String>,
    /// Only this image id (repeatable).
    #[arg(long = "image")]
    pub images: Vec<String>,
}

/// Inputs to process and the ids to report. Concepts are fit per class, so
/// every image of a selected image's class is processed.
fn select(dataset: &Dataset, sel: &Selection) -> Result<(Vec<ImageInput>, BTreeSet<String>)> {
    let mut class_ids = BTreeSet::new();
    for name in &sel.classes {
        class_ids.insert(
            dataset
                .class_index(name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown class {name:?}")))?,
        );
    }
    for id in &sel.images {
        if dataset.item(id).is_none() {
            return Err(Error::InvalidInput(format!("unknown image {id:?}")));
        }
    }
    let chosen: BTreeSet<String> = dataset
        .items
        .iter()
        .filter(|i| sel.classes.is_empty() || class_ids.contains(&i.label))
        .filter(|i| sel.images.is_empty() || sel.images.contains(&i.id))
        .map(|i| i.id.clone())
        .collect();
    if chosen.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: BTreeSet<usize> = dataset
        .items
        .iter()
        .filter(|i| chosen.contains(&i.id))
        .map(|i| i.label)
        .collect();
    let mut inputs = Vec::new();
    for item in dataset.items.iter().filter(|i| labels.contains(&i.label)) {
        inputs.push(ImageInput {
            id: item.id.clone(),
            image: dataset.load_image(item)?,
            label: Some(item.label),
            gt_box: item.gt_box,
        });
    }
    Ok((inputs, chosen))
}

fn pixel_mask_rgba(mask: &PixelMask, colour: [u8; 3]) -> RgbaImage {
    RgbaImage::from_fn(mask.width(), mask.height(), |x, y| {
        if mask.get(x, y) {
            Rgba([colour[0], colour[1], colour[2], 255])
        } else {
            Rgba([0, 0, 0, 0])
        }
    })
}

fn prediction_json(p: &PredictionRecord, classes: &[String]) -> Value {
    json!({
        "predicted": classes[p.predicted],
        "predicted_id": p.predicted,
        "label": p.label.map(|l| classes[l].clone()),
        "correct": p.correct,
        "score": p.scores[p.predicted],
    })
}

fn corloc_rate(explanations: &[&Explanation]) -> Option<f64> {
    let hits: Vec<bool> = explanations.iter().filter_map(|e| e.analysis.corloc.map(|c| c.hit)).collect();
    if hits.is_empty() {
        None
    } else {
        Some(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
    }
}

fn chosen<'e>(explanations: &'e [Explanation], ids: &BTreeSet<String>) -> Vec<&'e Explanation> {
    explanations.iter().filter(|e| ids.contains(&e.analysis.id)).collect()
}

pub fn cmd_extract(config: &RunConfig) -> Result<Value> {
    let backend = open_backend(config)?;
    let dataset = Dataset::load(config.require_dataset()?)?;
    let bank = DescriptorBank::load(config.require_descriptors()?)?;
    let images = dataset
        .items
        .iter()
        .map(|i| Ok((i.id.clone(), dataset.load_image(i)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut prompts = bank.prompts();
    for t in config.templates()? {
        prompts.extend(dataset.classes.iter().map(|c| instantiate(t, c)));
    }
    let store = config.thread_pool()?.install(|| extract_store(backend.as_ref(), &images, &prompts))?;
    let mut w = OutputWriter::new(config.output.join("extract"), config.clone())?;
    let bytes = store.to_bytes()?;
    write_atomic(&w.dir().join("store.clipemb"), &bytes)?;
    w.write_json("descriptors.json", &bank.manifest_json()?)?;
    let summary = json!({
        "store": "store.clipemb",
        "store_sha256": crate::report::sha256_hex(&bytes),
        "header": store.header(),
        "images": store.images().len(),
        "texts": store.num_texts(),
    });
    w.write_json("extract.json", &summary)?;
    w.finish()?;
    Ok(summary)
}

pub fn cmd_explain(config: &RunConfig, selection: &Selection) -> Result<Value> {
    let backend = open_backend(config)?;
    let (p, dataset) = Pipeline::from_config(config.clone(), backend.as_ref())?;
    let (inputs, ids) = select(&dataset, selection)?;
    let explanations = p.explain(&inputs)?;
    let shown = chosen(&explanations, &ids);
    let classes = &dataset.classes;
    let mut w = OutputWriter::new(config.output.join("explain"), config.clone())?;
    let mut images = Vec::new();
    for e in &shown {
        let id = &e.analysis.id;
        let geometry = e.analysis.prominent.geometry;
        w.write_png(&format!("{id}/overlay.png"), &overlay(&e.analysis.image, geometry, &e.segmentation.labels)?)?;
        w.write_rgba_png(&format!("{id}/prominent.png"), &mask_to_rgba(&e.analysis.prominent))?;
        w.write_json(
            &format!("{id}/prominent.json"),
            &json!({
                "mask": MaskExport::from(&e.analysis.prominent),
                "eigenvalues": e.analysis.partition.eigenvalues,
                "flags": e.analysis.partition.flags,
                "corloc": e.analysis.corloc,
            }),
        )?;
        w.write_json(&format!("{id}/segmentation.json"), &e.segmentation)?;
        for g in &e.grounded.concepts {
            let mask = e.segmentation.concept_pixels(g.concept)?;
            w.write_rgba_png(&format!("{id}/concept_{}.png", g.concept), &pixel_mask_rgba(&mask, g.colour))?;
        }
        w.write_json(
            &format!("{id}/concepts.json"),
            &json!({
                "image_id": id,
                "prediction": prediction_json(&e.analysis.prediction, classes),
                "grounding": e.grounded.report(p.bank()),
                "flags": e.flags,
            }),
        )?;
        images.push(json!({
            "image_id": id,
            "prediction": prediction_json(&e.analysis.prediction, classes),
            "corloc": e.analysis.corloc,
            "concepts": e.grounded.concepts.len(),
            "flags": e.flags,
        }));
    }
    let records: Vec<PredictionRecord> = shown.iter().map(|e| e.analysis.prediction.clone()).collect();
    let summary = json!({
        "images": shown.len(),
        "accuracy": accuracy(&records).ok(),
        "corloc": corloc_rate(&shown),
    });
    w.write_json("summary.json", &json!({ "summary": summary, "images": images }))?;
    w.finish()?;
    Ok(summary)
}

pub fn cmd_ground(config: &RunConfig, selection: &Selection) -> Result<Value> {
    let backend = open_backend(config)?;
    let (p, dataset) = Pipeline::from_config(config.clone(), backend.as_ref())?;
    let (inputs, ids) = select(&dataset, selection)?;
    let explanations = p.explain(&inputs)?;
    let shown = chosen(&explanations, &ids);
    let mut w = OutputWriter::new(config.output.join("ground"), config.clone())?;
    let mut rows = Vec::new();
    let mut diversity = 0.0;
    for e in &shown {
        let id = &e.analysis.id;
        w.write_json(&format!("{id}.json"), &e.grounded.report(p.bank()))?;
        diversity += e.grounded.diversity();
        for g in &e.grounded.concepts {
            for (rank, d) in g.descriptors.iter().enumerate() {
                rows.push(vec![
                    id.clone(),
                    g.concept.to_string(),
                    rank.to_string(),
                    d.id.to_string(),
                    p.bank().text(d.id).to_string(),
                    format!("{}", d.score),
                    format!("{}", d.mass),
                    format!("{}", g.importance),
                ]);
            }
        }
    }
    w.write_csv(
        "descriptors.csv",
        &["image_id", "concept", "rank", "descriptor_id", "text", "score", "mass", "importance"],
        &rows,
    )?;
    let summary = json!({
        "images": shown.len(),
        "assignments": rows.len(),
        "mean_diversity_entropy": diversity / shown.len() as f64,
    });
    w.write_json("summary.json", &summary)?;
    w.finish()?;
    Ok(summary)
}

pub fn cmd_mi(config: &RunConfig, selection: &Selection) -> Result<Value> {
    let backend = open_backend(config)?;
    let (p, dataset) = Pipeline::from_config(config.clone(), backend.as_ref())?;
    let (inputs, ids) = select(&dataset, selection)?;
    let explanations = p.explain(&inputs)?;
    let shown = chosen(&explanations, &ids);
    let classes = &dataset.classes;
    let mut w = OutputWriter::new(config.output.join("mi"), config.clone())?;
    let mut records = Vec::new();
    let mut correct: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    let mut predicted_classes = BTreeSet::new();
    for e in &shown {
        let id = &e.analysis.id;
        let r = p.mutual_information(e)?;
        let class = classes[r.predicted].clone();
        w.write_csv(&format!("curves/{id}.csv"), &["step", "mi"], &r.curve.csv_rows())?;
        w.write_json(
            &format!("curves/{id}.json"),
            &json!({
                "image_id": id,
                "predicted": class,
                "vision": r.vision.iter().map(|d| json!({"id": d, "text": p.bank().text(*d)})).collect::<Vec<_>>(),
                "language": r.language.ids,
                "curve": r.curve.values,
                "auc": r.curve.auc,
                "order": r.curve.order,
                "flags": r.curve.flags,
            }),
        )?;
        predicted_classes.insert(r.predicted);
        let ok = e.analysis.prediction.correct.unwrap_or(false);
        correct.entry("all".into()).or_default().push(ok);
        correct.entry(class.clone()).or_default().push(ok);
        records.push(MiRecord {
            image_id: id.clone(),
            class,
            mi: r.curve.initial(),
            auc: r.curve.auc,
        });
    }
    for c in predicted_classes {
        w.write_json(
            &format!("language/{}.json", classes[c]),
            &p.class_concepts(c)?.report(&classes[c], p.bank()),
        )?;
    }
    let summaries = aggregate_mi(&records, true)?;
    let model = p.backend().info().model_id.clone();
    let top1 = |g: &str| {
        let v = &correct[g];
        100.0 * v.iter().filter(|c| **c).count() as f64 / v.len() as f64
    };
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.group.clone(),
                model.clone(),
                s.count.to_string(),
                format!("{}", top1(&s.group)),
                format!("{}", s.mean_mi),
                format!("{}", s.mean_auc),
            ]
        })
        .collect();
    w.write_csv("summary.csv", &["group", "model", "data_size", "top1", "mi", "auc"], &rows)?;
    w.write_json("summary.json", &summaries)?;
    w.finish()?;
    Ok(json!({
        "images": records.len(),
        "mi": summaries[0].mean_mi,
        "auc": summaries[0].mean_auc,
    }))
}

/// Dataset-level faithfulness metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: String,
    pub images: usize,
    pub deletion: f64,
    pub insertion: f64,
    pub acc_drop: f64,
    pub acc_increase: f64,
    pub accuracy: f64,
    pub corloc: Option<f64>,
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<Metrics> {
    let backend = open_backend(config)?;
    let (p, dataset) = Pipeline::from_config(config.clone(), backend.as_ref())?;
    let inputs = ImageInput::from_dataset(&dataset)?;
    let explanations = p.explain(&inputs)?;
    let curves = p.faithfulness_all(&explanations)?;
    let deletion: Vec<_> = curves.iter().map(|c| c.deletion.clone()).collect();
    let insertion: Vec<_> = curves.iter().map(|c| c.insertion.clone()).collect();
    let predictions: Vec<PredictionRecord> = explanations.iter().map(|e| e.analysis.prediction.clone()).collect();
    let metrics = Metrics {
        method: match config.method {
            ConceptMethod::Kmeans => "kmeans".into(),
            ConceptMethod::Pca => "pca".into(),
        },
        images: explanations.len(),
        deletion: mean_auc(&deletion)?,
        insertion: mean_auc(&insertion)?,
        acc_drop: acc_drop(&deletion)?,
        acc_increase: acc_increase(&insertion)?,
        accuracy: accuracy(&predictions)?,
        corloc: corloc_rate(&explanations.iter().collect::<Vec<_>>()),
    };
    let mut w = OutputWriter::new(config.output.join("evaluate"), config.clone())?;
    for c in &curves {
        let rows: Vec<Vec<String>> = (0..c.deletion.scores.len())
            .map(|t| {
                vec![
                    t.to_string(),
                    format!("{}", c.deletion.scores[t]),
                    format!("{}", c.insertion.scores[t]),
                    format!("{}", c.deletion.plot_scores()[t]),
                    format!("{}", c.insertion.plot_scores()[t]),
                ]
            })
            .collect();
        w.write_csv(
            &format!("curves/{}.csv", c.image_id),
            &["step", "deletion", "insertion", "deletion_plot", "insertion_plot"],
            &rows,
        )?;
    }
    let classes = &dataset.classes;
    let prediction_rows: Vec<Vec<String>> = predictions
        .iter()
        .map(|r| {
            vec![
                r.image_id.clone(),
                r.label.map(|l| classes[l].clone()).unwrap_or_default(),
                classes[r.predicted].clone(),
                r.correct.map(|c| c.to_string()).unwrap_or_default(),
                format!("{}", r.scores[r.predicted]),
            ]
        })
        .collect();
    w.write_csv("predictions.csv", &["image_id", "label", "predicted", "correct", "score"], &prediction_rows)?;
    w.write_csv(
        "metrics.csv",
        &["method", "images", "deletion", "insertion", "acc_drop", "acc_increase"],
        &[vec![
            metrics.method.clone(),
            metrics.images.to_string(),
            format!("{}", metrics.deletion),
            format!("{}", metrics.insertion),
            format!("{}", metrics.acc_drop),
            format!("{}", metrics.acc_increase),
        ]],
    )?;
    w.write_json("metrics.json", &metrics)?;
    w.finish()?;
    Ok(metrics)
}

pub fn cmd_boost(config: &RunConfig) -> Result<Value> {
    let backend = open_backend(config)?;
    let (p, dataset) = Pipeline::from_config(config.clone(), backend.as_ref())?;
    let inputs = ImageInput::from_dataset(&dataset)?;
    let explanations = p.explain(&inputs)?;
    let mut found: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    let mut images = Vec::new();
    for e in &explanations {
        let label = e.analysis.label.expect("dataset images are labelled");
        let ids = found.entry(label).or_default();
        for d in e.grounded.ranked_descriptor_ids() {
            if !ids.contains(&d) {
                ids.push(d);
            }
        }
        images.push((e.analysis.embedding.clone(), label));
    }
    let base = dataset
        .classes
        .iter()
        .map(|c| {
            p.bank()
                .class_ids(c)
                .map(|ids| ids.to_vec())
                .ok_or_else(|| Error::InvalidInput(format!("class {c:?} has no descriptors")))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = crate::boost::descriptor_boost(p.classifier(), &base, &found, p.bank(), &images, p.backend())?;
    let mut w = OutputWriter::new(config.output.join("boost"), config.clone())?;
    let rows: Vec<Vec<String>> = report
        .per_class
        .iter()
        .map(|c| {
            vec![
                c.class.clone(),
                c.neighbours.join(";"),
                c.added.iter().map(|d| p.bank().text(*d)).collect::<Vec<_>>().join(";"),
                c.accepted.to_string(),
                format!("{}", c.baseline_accuracy),
                format!("{}", c.boosted_accuracy),
            ]
        })
        .collect();
    w.write_csv(
        "boost.csv",
        &["class", "neighbours", "added", "accepted", "baseline_accuracy", "boosted_accuracy"],
        &rows,
    )?;
    w.write_json("boost.json", &report)?;
    w.finish()?;
    Ok(json!({
        "baseline_accuracy": report.baseline_accuracy,
        "boosted_accuracy": report.boosted_accuracy,
        "delta": report.boosted_accuracy - report.baseline_accuracy,
        "accepted": report.per_class.iter().filter(|c| c.accepted).count(),
    }))
}

/// Subcommand directories `report` looks at, with the file whose payload is
/// copied into the report.
const SECTIONS: [(&str, &str); 6] = [
    ("extract", "extract.json"),
    ("explain", "summary.json"),
    ("ground", "summary.json"),
    ("mi", "summary.json"),
    ("evaluate", "metrics.json"),
    ("boost", "boost.json"),
];

fn payload(path: &Path) -> Result<Value> {
    let v: Value = serde_json::from_slice(&std::fs::read(path).map_err(Error::at(path))?)?;
    Ok(v.get("data").cloned().unwrap_or(Value::Null))
}

pub fn cmd_report(config: &RunConfig) -> Result<Value> {
    let mut sections = serde_json::Map::new();
    let mut counts = serde_json::Map::new();
    let mut rows = Vec::new();
    let mut failed = 0;
    for (name, headline) in SECTIONS {
        let dir = config.output.join(name);
        if !dir.join("manifest.json").exists() {
            continue;
        }
        let entries = read_manifest(&dir)?;
        let mut ok = 0;
        for e in &entries {
            let good = verify_file(&dir, e).unwrap_or(false);
            ok += usize::from(good);
            rows.push(vec![name.to_string(), e.file.clone(), e.content_hash.clone(), good.to_string()]);
        }
        failed += entries.len() - ok;
        counts.insert(name.to_string(), json!({ "files": entries.len(), "verified": ok }));
        sections.insert(
            name.to_string(),
            json!({
                "files": entries.len(),
                "verified": ok,
                "summary": payload(&dir.join(headline))?,
            }),
        );
    }
    if sections.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no subcommand outputs under {}",
            config.output.display()
        )));
    }
    let mut w = OutputWriter::new(config.output.join("report"), config.clone())?;
    w.write_csv("verification.csv", &["section", "file", "content_hash", "ok"], &rows)?;
    let report = json!({ "sections": sections, "failed": failed });
    w.write_json("report.json", &report)?;
    w.finish()?;
    if failed > 0 {
        return Err(Error::Format(format!("{failed} output files do not match their manifests")));
    }
    Ok(json!({ "sections": counts, "failed": failed }))
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Extract(a) => cmd_extract(&a.resolve()?),
        Command::Explain { common, selection } => cmd_explain(&common.resolve()?, &selection),
        Command::Ground { common, selection } => cmd_ground(&common.resolve()?, &selection),
        Command::Mi { common, selection } => cmd_mi(&common.resolve()?, &selection),
        Command::Evaluate(a) => Ok(serde_json::to_value(cmd_evaluate(&a.resolve()?)?)?),
        Command::Boost(a) => cmd_boost(&a.resolve()?),
        Command::Report(a) => cmd_report(&a.resolve()?),
    }
}

pub fn error_json(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            // A closed stdout is not a failure of the command itself.
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}

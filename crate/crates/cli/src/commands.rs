use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use fae_core::encoder::{Classifier, Image, SaliencyMap, SaliencySource};
use fae_core::explainer::{ContextScale, DecodeMode, ExplanationRecord, StepSet, Vocabulary};
use fae_core::metrics::{evaluate, tokenize, Metric, ScoredImage};
use fae_core::synthdata::{generate_dataset, load_dataset, DataConfig, Dataset, Lexicon, PartAnnotation, Split, SynthExample};
use fae_core::training::{
    accuracy, caption_examples, extract_features, init_classifier, init_explainer, load_checkpoint,
    train_classifier as fit_classifier, train_explainer as fit_explainer, AlignInput, Checkpoint, ClassifierTrainConfig,
    ExplainerBundle, ExplainerDims, TrainConfig, TrainLog,
};
use fae_core::{Precision, Real};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{DumpAttnArgs, EvalArgs, ExplainArgs, GenDataArgs, GradcamArgs, TrainClassifierArgs, TrainExplainerArgs};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(fae_core::Error),
}

impl CliError {
    pub fn is_config(&self) -> bool {
        matches!(self, CliError::Config(_))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<fae_core::Error> for CliError {
    fn from(e: fae_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Collects written files and emits `manifest.json` next to them.
struct Output {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Output {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| fae_core::Error::Path {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| fae_core::Error::Path {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        std::fs::write(&path, bytes).map_err(|e| fae_core::Error::Path { path, source: e })?;
        self.artifacts.push(rel.to_string());
        Ok(())
    }

    fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(fae_core::Error::from)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn record(&mut self, rel: &str) {
        self.artifacts.push(rel.to_string());
    }

    fn finish(mut self, command: &str, config: serde_json::Value) -> Result<()> {
        self.artifacts.sort();
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "artifacts": self.artifacts,
        });
        let mut out = Self {
            dir: self.dir.clone(),
            artifacts: Vec::new(),
        };
        out.write_json("manifest.json", &manifest)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| fae_core::Error::Path {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(fae_core::Error::Format(format!("{}: {e}", path.display()))))
}

/// Config files are user input: unknown keys and bad values are config errors.
fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| fae_core::Error::Path {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(config_err(format!("unknown split {other:?} (train or test)"))),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn labeled<'a>(set: &[&'a SynthExample]) -> Vec<(&'a Image, usize)> {
    set.iter().map(|e| (&e.image, e.record.class)).collect()
}

fn images<'a>(set: &[&'a SynthExample]) -> Vec<&'a Image> {
    set.iter().map(|e| &e.image).collect()
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let config = DataConfig {
        num_classes: a.num_classes,
        train_size: a.train_size,
        test_size: a.test_size,
        seed: a.seed,
    };
    config.validate().map_err(config_err)?;
    let mut out = Output::create(&a.out)?;
    let data = generate_dataset(&config, &a.out)?;
    for ex in &data.examples {
        out.record(&format!("images/{}.ppm", ex.record.id));
    }
    for f in ["data.jsonl", "lexicon.json", "config.json"] {
        out.record(f);
    }
    println!("wrote {} examples to {}", data.examples.len(), a.out.display());
    out.finish("gen-data", serde_json::to_value(config).map_err(fae_core::Error::from)?)
}

pub fn train_classifier(a: TrainClassifierArgs) -> Result<()> {
    let mut config: ClassifierTrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => ClassifierTrainConfig::default(),
    };
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.learning_rate = a.lr.unwrap_or(config.learning_rate);
    config.batch_size = a.batch_size.unwrap_or(config.batch_size);
    config.seed = a.seed.unwrap_or(config.seed);
    if config.batch_size == 0 || !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) || !(config.clip_norm > 0.0) {
        return Err(config_err("batch_size must be positive, learning_rate finite and nonnegative, clip_norm positive"));
    }

    let data = load_dataset(&a.data)?;
    let (train, test) = (data.train(), data.test());
    let mut classifier: Classifier =
        init_classifier(fae_core::encoder::ClassifierConfig::reference(data.config.num_classes), config.seed);
    let log = fit_classifier(&config, &mut classifier, &labeled(&train))?;
    let train_acc = accuracy(&classifier, &labeled(&train))?;
    let test_acc = accuracy(&classifier, &labeled(&test))?;

    let snapshot = json!({"data": path_str(&a.data), "classifier_train": config});
    let checkpoint = Checkpoint {
        classifier,
        explainer: None,
        config: snapshot.clone(),
    };
    let mut out = Output::create(&a.out)?;
    out.write("classifier.ckpt", &checkpoint.to_bytes()?)?;
    out.write("train_log.jsonl", log.to_jsonl().as_bytes())?;
    out.write_json("metrics.json", &json!({"train_accuracy": train_acc, "test_accuracy": test_acc}))?;
    println!("test accuracy {test_acc:.4}");
    out.finish("train-classifier", snapshot)
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExplainerRunConfig {
    train: TrainConfig,
    dims: ExplainerDims,
}

fn train_in<T: Real>(
    classifier: &Classifier,
    train: &[&SynthExample],
    vocab: &Vocabulary,
    run: &ExplainerRunConfig,
) -> Result<(ExplainerBundle, TrainLog)> {
    let classifier: Classifier<T> = classifier.cast();
    let features = extract_features(&classifier, &images(train))?;
    let captions: Vec<Vec<String>> = train.iter().map(|e| e.record.captions.clone()).collect();
    let examples = caption_examples(&features, &captions, vocab);
    let (mut explainer, mut aligner) = init_explainer(vocab.len(), &features[0], &run.dims, &run.train)?;
    let log = fit_explainer(&run.train, &mut explainer, &mut aligner, &examples)?;
    Ok((
        ExplainerBundle {
            explainer: explainer.cast(),
            aligner: aligner.cast(),
            vocabulary: vocab.clone(),
        },
        log,
    ))
}

pub fn train_explainer(a: TrainExplainerArgs) -> Result<()> {
    let mut run: ExplainerRunConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => ExplainerRunConfig::default(),
    };
    let t = &mut run.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.lambda_align = a.lambda_align.unwrap_or(t.lambda_align);
    t.lambda_ds = a.lambda_ds.unwrap_or(t.lambda_ds);
    t.seed = a.seed.unwrap_or(t.seed);
    if let Some(s) = &a.context_scale {
        t.context_scale = s.parse::<ContextScale>().map_err(config_err)?;
    }
    if a.two_pass {
        t.align_input = AlignInput::TwoPass;
    }
    t.stop_grad_realign |= a.stop_grad_realign;
    if a.f64 {
        t.precision = Precision::F64;
    }
    t.validate().map_err(config_err)?;
    let d = run.dims;
    if d.embed_dim == 0 || d.att_dim == 0 || d.max_len == 0 || d.hidden_dim == 0 || d.hidden_dim % 2 != 0 {
        return Err(config_err("dims must be positive and hidden_dim even"));
    }

    let data = load_dataset(&a.data)?;
    let base: Checkpoint = load_checkpoint(&a.ckpt)?;
    let train = data.train();
    let vocab = Vocabulary::from_captions(train.iter().flat_map(|e| e.record.captions.iter().map(String::as_str)));
    let (bundle, log) = match run.train.precision {
        Precision::F32 => train_in::<f32>(&base.classifier, &train, &vocab, &run)?,
        Precision::F64 => train_in::<f64>(&base.classifier, &train, &vocab, &run)?,
    };
    let snapshot = json!({
        "data": path_str(&a.data),
        "classifier_ckpt": path_str(&a.ckpt),
        "classifier": base.config,
        "explainer": run,
    });
    let checkpoint = Checkpoint {
        classifier: base.classifier,
        explainer: Some(bundle),
        config: snapshot.clone(),
    };
    let mut out = Output::create(&a.out)?;
    out.write("model.ckpt", &checkpoint.to_bytes()?)?;
    out.write("train_log.jsonl", log.to_jsonl().as_bytes())?;
    if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
        println!("cross-entropy {:.4} -> {:.4}", first.ce, last.ce);
    }
    out.finish("train-explainer", snapshot)
}

fn explain_one(
    ck: &Checkpoint,
    bundle: &ExplainerBundle,
    id: &str,
    image: &Image,
    enforce: Option<(&SaliencyMap, &StepSet, &str)>,
    mode: DecodeMode,
) -> Result<ExplanationRecord> {
    let (logits, features) = ck.classifier.classify_batch(&[image])?.remove(0);
    let rec = match enforce {
        Some((eps, steps, label)) => bundle.explainer.generate_enforced(&features, eps, steps, label)?,
        None => bundle.explainer.generate(&features, mode)?,
    };
    let mut rec = rec.with_vocabulary(&bundle.vocabulary);
    rec.image_id = id.to_string();
    rec.predicted_class = Some(fae_core::encoder::argmax(&logits));
    Ok(rec)
}

fn attention_maps(out: &mut Output, prefix: &str, rec: &ExplanationRecord, side: usize, size: usize) -> Result<()> {
    for a in &rec.attention {
        if a.weights.len() != side * side {
            return Err(CliError::Runtime(fae_core::Error::Format(format!(
                "{}: attention map of {} weights is not square",
                rec.image_id,
                a.weights.len()
            ))));
        }
        let map = SaliencyMap::new(side, side, a.weights.iter().map(|&w| w as f32).collect(), SaliencySource::Custom)?;
        let raster = map.upsample_nearest(size, size).to_raster();
        out.write(&format!("{prefix}step_{:02}.pgm", a.step), &raster.encode())?;
    }
    Ok(())
}

fn image_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let steps = match &a.steps {
        Some(spec) => StepSet::parse(spec).map_err(config_err)?,
        None => StepSet::default(),
    };
    let split = parse_split(&a.split)?;
    let mode = match a.beam {
        Some(0) => return Err(config_err("beam width must be positive")),
        Some(w) => DecodeMode::Beam(w),
        None => DecodeMode::Greedy,
    };

    let ck: Checkpoint = load_checkpoint(&a.ckpt)?;
    let bundle = ck
        .explainer
        .as_ref()
        .ok_or_else(|| CliError::Runtime(fae_core::Error::Format(format!("{}: no explainer in checkpoint", a.ckpt.display()))))?;
    steps.check_within(bundle.explainer.config.max_len).map_err(config_err)?;
    let eps = match &a.enforce {
        Some(p) => Some(SaliencyMap::read(p, SaliencySource::Custom)?),
        None => None,
    };
    let label = a.enforce.as_deref().map(image_id).unwrap_or_default();
    let enforce = eps.as_ref().map(|m| (m, &steps, label.as_str()));
    let side = (bundle.explainer.config.locations as f64).sqrt() as usize;

    let config = json!({
        "ckpt": path_str(&a.ckpt),
        "image": a.image.as_deref().map(path_str),
        "data": a.data.as_deref().map(path_str),
        "split": a.split,
        "enforce": a.enforce.as_deref().map(path_str),
        "steps": steps,
        "mode": mode,
    });
    if let Some(path) = &a.image {
        let image = Image::read_ppm(path)?;
        let rec = explain_one(&ck, bundle, &image_id(path), &image, enforce, mode)?;
        let mut out = Output::create(&a.out)?;
        out.write_json("record.json", &rec)?;
        attention_maps(&mut out, "attention/", &rec, side, image.width)?;
        println!("{}", rec.sentence());
        return out.finish("explain", config);
    }
    let data = load_dataset(a.data.as_deref().expect("clap requires --image or --data"))?;
    let mut records = Vec::new();
    for ex in data.split(split) {
        records.push(explain_one(&ck, bundle, &ex.record.id, &ex.image, enforce, mode)?);
    }
    let mut out = Output::create(&a.out)?;
    out.write_json("predictions.json", &records)?;
    println!("explained {} images", records.len());
    out.finish("explain", config)
}

pub fn gradcam(a: GradcamArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let ck: Checkpoint = load_checkpoint(&a.ckpt)?;
    if let Some(c) = a.class {
        if c >= ck.classifier.config.num_classes {
            return Err(config_err(format!("class {c} outside 0..{}", ck.classifier.config.num_classes)));
        }
    }
    let inputs: Vec<(String, Image)> = match (&a.image, &a.data) {
        (Some(p), _) => vec![(image_id(p), Image::read_ppm(p)?)],
        (None, Some(dir)) => load_dataset(dir)?
            .split(split)
            .map(|e| (e.record.id.clone(), e.image.clone()))
            .collect(),
        (None, None) => unreachable!("clap requires --image or --data"),
    };
    let mut out = Output::create(&a.out)?;
    let mut classes = BTreeMap::new();
    for (id, image) in &inputs {
        let class = match a.class {
            Some(c) => c,
            None => ck.classifier.predict(image)?,
        };
        let map = ck.classifier.gradcam(image, class)?;
        out.write_json(&format!("{id}.json"), &map)?;
        out.write(
            &format!("{id}.pgm"),
            &map.upsample_nearest(image.height, image.width).to_raster().encode(),
        )?;
        classes.insert(id.clone(), class);
    }
    out.write_json("classes.json", &classes)?;
    out.finish(
        "gradcam",
        json!({
            "ckpt": path_str(&a.ckpt),
            "image": a.image.as_deref().map(path_str),
            "data": a.data.as_deref().map(path_str),
            "split": a.split,
            "class": a.class,
        }),
    )
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Records {
    Many(Vec<ExplanationRecord>),
    One(Box<ExplanationRecord>),
}

fn read_records(path: &Path) -> Result<Vec<ExplanationRecord>> {
    Ok(match read_json(path)? {
        Records::Many(v) => v,
        Records::One(r) => vec![*r],
    })
}

fn dataset_tables(data: &Dataset) -> (BTreeMap<String, Vec<String>>, BTreeMap<String, Vec<PartAnnotation>>) {
    let refs = data.examples.iter().map(|e| (e.record.id.clone(), e.record.captions.clone())).collect();
    let parts = data.examples.iter().map(|e| (e.record.id.clone(), e.record.parts.clone())).collect();
    (refs, parts)
}

fn read_gradcam(dir: &Path, id: &str) -> Result<Option<SaliencyMap>> {
    let json = dir.join(format!("{id}.json"));
    if json.exists() {
        return Ok(Some(SaliencyMap::read(&json, SaliencySource::Gradcam)?));
    }
    let pgm = dir.join(format!("{id}.pgm"));
    if pgm.exists() {
        return Ok(Some(SaliencyMap::read(&pgm, SaliencySource::Gradcam)?));
    }
    Ok(None)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut metrics = Vec::new();
    for m in a.metrics.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Metric = m.parse().map_err(config_err)?;
        if !metrics.contains(&m) {
            metrics.push(m);
        }
    }
    if metrics.is_empty() {
        return Err(config_err("no metrics selected"));
    }
    metrics.sort();
    let wants_fer = metrics.contains(&Metric::Fer);
    if wants_fer && a.data.is_none() && a.annotations.is_none() {
        return Err(config_err("fer needs --annotations or --data"));
    }
    if a.image_size == 0 {
        return Err(config_err("image size must be positive"));
    }

    let records = read_records(&a.preds)?;
    let dataset = match &a.data {
        Some(dir) => Some(load_dataset(dir)?),
        None => None,
    };
    let (mut refs, mut parts) = dataset.as_ref().map(dataset_tables).unwrap_or_default();
    if let Some(p) = &a.refs {
        refs = read_json(p)?;
    }
    if let Some(p) = &a.annotations {
        parts = read_json(p)?;
    }
    let lexicon = match (&a.lexicon, &dataset) {
        (Some(p), _) => Lexicon::read(p)?,
        (None, Some(d)) => d.lexicon.clone(),
        (None, None) => Lexicon::synthetic(),
    };
    let mut scored = Vec::with_capacity(records.len());
    for rec in &records {
        let missing = |what: &str| CliError::Runtime(fae_core::Error::Format(format!("{}: no {what}", rec.image_id)));
        let references = refs.get(&rec.image_id).ok_or_else(|| missing("references"))?;
        let gradcam = match &a.gradcam {
            Some(dir) => read_gradcam(dir, &rec.image_id)?,
            None => None,
        };
        scored.push(ScoredImage {
            id: rec.image_id.clone(),
            generated: rec.tokens.clone(),
            references: references.iter().map(|s| tokenize(s)).collect(),
            parts: if wants_fer {
                parts.get(&rec.image_id).cloned().ok_or_else(|| missing("part annotations"))?
            } else {
                Vec::new()
            },
            gradcam,
            image_size: (a.image_size, a.image_size),
        });
    }
    let report = evaluate(&scored, &metrics, &lexicon)?;
    let mut out = Output::create(&a.out)?;
    out.write_json("report.json", &report)?;
    let summary: Vec<String> = [
        ("bleu4", report.bleu4),
        ("rougeL", report.rouge_l),
        ("ciderD", report.cider_d),
        ("fer", report.fer),
    ]
    .iter()
    .filter_map(|(n, v)| v.map(|v| format!("{n} {v:.4}")))
    .collect();
    println!("{}", summary.join("  "));
    out.finish(
        "eval",
        json!({
            "preds": path_str(&a.preds),
            "data": a.data.as_deref().map(path_str),
            "refs": a.refs.as_deref().map(path_str),
            "annotations": a.annotations.as_deref().map(path_str),
            "lexicon": a.lexicon.as_deref().map(path_str),
            "gradcam": a.gradcam.as_deref().map(path_str),
            "metrics": a.metrics,
            "image_size": a.image_size,
        }),
    )
}

pub fn dump_attn(a: DumpAttnArgs) -> Result<()> {
    if a.size == 0 {
        return Err(config_err("size must be positive"));
    }
    let records = read_records(&a.records)?;
    let mut out = Output::create(&a.out)?;
    for (i, rec) in records.iter().enumerate() {
        let k = rec.attention.first().map_or(0, |m| m.weights.len());
        let side = (k as f64).sqrt() as usize;
        let name = if rec.image_id.is_empty() { format!("record_{i:04}") } else { rec.image_id.clone() };
        attention_maps(&mut out, &format!("{name}/"), rec, side, a.size)?;
    }
    out.finish("dump-attn", json!({"records": path_str(&a.records), "size": a.size}))
}

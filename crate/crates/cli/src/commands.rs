use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use faithkit::canonical::{tokenize, UnitTable};
use faithkit::jsonl::{self, JsonlError};
use faithkit::metrics::{evaluate, AmbiguityPolicy, GoldSample};
use faithkit::model::{ComplianceAnalysis, Document, ErrorType, PreferencePair, Tier};
use faithkit::perturb::{build_pairs, Perturber, ResponseInput};
use faithkit::seed::derive_seed;
use faithkit::synthgen::{build_dataset, write_dataset, DatasetSplit, GeneratorConfig, Sample, SplitName, SynthError};
use faithkit::toylm::{
    encode_pair, load_checkpoint, per_token_gradient_profile, preference_accuracy, random_control_pair, save_checkpoint, train, DpoConfig, EncodedPair,
    GradientProfile, ProfileSummary, ToyError, ToyModel, ToyModelConfig, TrainConfig, Vocab,
};
use faithkit::{ToyModelF32, ToyModelF64};
use serde::{Deserialize, Serialize};

/// Failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    NothingEligible(String),
    Schema(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NothingEligible(_) => 3,
            CliError::Schema(_) => 4,
            CliError::Divergence(_) => 5,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::NothingEligible(m) | CliError::Schema(m) | CliError::Divergence(m) => m,
        }
    }
}

impl From<JsonlError> for CliError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { .. } => CliError::Config(e.to_string()),
            JsonlError::Schema { path, errors } => {
                let mut msg = format!("{path}: {} malformed line(s)", errors.len());
                for (line, err) in errors {
                    let _ = write!(msg, "\n  line {line}: {err}");
                }
                CliError::Schema(msg)
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ToyError> for CliError {
    fn from(e: ToyError) -> Self {
        match e {
            ToyError::DivergenceDetected { .. } => CliError::Divergence(e.to_string()),
            ToyError::EmptyTrainingSet => CliError::NothingEligible(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub beta: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = DpoConfig::default();
        TrainSettings { epochs: d.epochs, beta: d.beta, lambda: d.lambda, learning_rate: d.learning_rate, batch_size: TrainConfig::default().batch_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub context_len: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ToyModelConfig::new(1);
        ModelSettings { layers: c.layers, model_dim: c.model_dim, heads: c.heads, context_len: c.context_len }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSettings {
    /// Pairs profiled (each with one control when enabled).
    pub limit: usize,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        ProfileSettings { limit: 100 }
    }
}

/// Contents of `--config`: one optional table per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub generator: GeneratorConfig,
    pub train: TrainSettings,
    pub model: ModelSettings,
    pub profile: ProfileSettings,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// What a command produced.
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

fn synth_err(e: SynthError) -> CliError {
    match e {
        SynthError::Io(io) => CliError::Config(io.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn gen(cfg: &GeneratorConfig, out: &Path) -> CliResult<Outcome> {
    let ds = build_dataset(cfg).map_err(synth_err)?;
    let mut outputs = write_dataset(&ds, out).map_err(synth_err)?;
    let report = out.join("gen_report.json");
    write_json(&report, &ds.report)?;
    outputs.push(report);
    for (name, r) in &ds.report.splits {
        log::info!("{}: {} samples, tiers {:?}", name.name(), r.samples, r.tiers);
    }
    Ok(Outcome { outputs })
}

pub fn parse_types(list: Option<&str>) -> CliResult<Vec<ErrorType>> {
    let Some(list) = list else { return Ok(ErrorType::ALL.to_vec()) };
    let mut out = Vec::new();
    for t in list.split(',').filter(|t| !t.trim().is_empty()) {
        let ty: ErrorType = t.parse().map_err(|e| CliError::Config(format!("--types: {e}")))?;
        if !out.contains(&ty) {
            out.push(ty);
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("--types lists no error type".into()));
    }
    Ok(out)
}

pub fn perturb(samples_path: &Path, split: Option<(SplitName, &Path)>, types: &[ErrorType], seed: u64, out: &Path) -> CliResult<Outcome> {
    let mut samples: Vec<Sample> = jsonl::read(samples_path)?;
    if let Some((name, split_path)) = split {
        let text = fs::read_to_string(split_path).map_err(|e| CliError::Config(format!("{}: {e}", split_path.display())))?;
        let split: DatasetSplit = serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", split_path.display())))?;
        let keep: BTreeSet<&String> = split.samples(name).iter().collect();
        samples.retain(|s| keep.contains(&s.id));
    }
    let prompts: Vec<String> = samples.iter().map(Sample::pair_prompt).collect();
    let inputs: Vec<ResponseInput> = samples.iter().zip(&prompts).map(|(s, p)| ResponseInput { id: &s.id, prompt: p, analysis: &s.analysis }).collect();
    let build = build_pairs(&Perturber::default(), &inputs, types, seed).map_err(|e| CliError::Config(e.to_string()))?;
    if build.pairs.is_empty() {
        return Err(CliError::NothingEligible(format!("no eligible element of {types:?} in {} sample(s)", samples.len())));
    }
    fs::create_dir_all(out)?;
    let pairs = out.join("pairs.jsonl");
    jsonl::write(&pairs, &build.pairs)?;
    let balance = out.join("balance.json");
    write_json(&balance, &build.report)?;
    Ok(Outcome { outputs: vec![pairs, balance] })
}

/// Gold or predicted analysis keyed by sample id. Extra fields (such as the
/// rest of a generated sample) are ignored.
#[derive(Debug, Clone, Deserialize)]
struct AnalysisRecord {
    id: String,
    #[serde(default)]
    tier: Option<Tier>,
    analysis: ComplianceAnalysis,
}

/// Plain documents, or generated ones whose `document` field is taken.
fn read_documents(path: &Path) -> CliResult<Vec<Document>> {
    let lines: Vec<serde_json::Value> = jsonl::read(path)?;
    let mut docs = Vec::with_capacity(lines.len());
    let mut errors = Vec::new();
    for (i, mut v) in lines.into_iter().enumerate() {
        let inner = v.get_mut("document").map(serde_json::Value::take).unwrap_or(v);
        match serde_json::from_value(inner) {
            Ok(d) => docs.push(d),
            Err(e) => errors.push((i + 1, e.to_string())),
        }
    }
    if errors.is_empty() {
        Ok(docs)
    } else {
        Err(JsonlError::Schema { path: path.display().to_string(), errors }.into())
    }
}

pub fn eval(gold_path: &Path, pred_path: &Path, docs_path: Option<&Path>, policy: AmbiguityPolicy, out: &Path) -> CliResult<Outcome> {
    let gold: Vec<AnalysisRecord> = jsonl::read(gold_path)?;
    let preds: Vec<AnalysisRecord> = jsonl::read(pred_path)?;
    let docs = match docs_path {
        Some(p) => read_documents(p)?,
        None => Vec::new(),
    };
    let predictions: BTreeMap<String, ComplianceAnalysis> = preds.into_iter().map(|r| (r.id, r.analysis)).collect();
    let samples: Vec<GoldSample> = gold.iter().map(|g| GoldSample { id: &g.id, tier: g.tier, analysis: &g.analysis }).collect();
    let report = evaluate(&samples, &predictions, &docs, UnitTable::builtin(), policy).map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(out)?;
    let path = out.join("report.json");
    write_json(&path, &report)?;
    Ok(Outcome { outputs: vec![path] })
}

fn pair_vocab(pairs: &[PreferencePair]) -> Vocab {
    let texts: Vec<Vec<String>> = pairs.iter().flat_map(|p| [tokenize(&p.prompt), p.chosen.clone(), p.rejected.clone()]).collect();
    Vocab::build(texts.iter().map(Vec::as_slice))
}

fn encode_all(pairs: &[PreferencePair], vocab: &Vocab) -> CliResult<Vec<EncodedPair>> {
    pairs.iter().map(|p| encode_pair(p, vocab).map_err(CliError::from)).collect()
}

fn model_config(settings: &ModelSettings, vocab_size: usize, seed: u64) -> ToyModelConfig {
    ToyModelConfig {
        vocab_size,
        layers: settings.layers,
        model_dim: settings.model_dim,
        heads: settings.heads,
        context_len: settings.context_len,
        seed: derive_seed(seed, &["model"]),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    pairs: usize,
    heldout_pairs: usize,
    n_params: usize,
    vocab_size: usize,
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    train_preference_accuracy: f64,
    heldout_preference_accuracy: Option<f64>,
}

pub fn train_cmd(pairs_path: &Path, heldout: Option<&Path>, cfg: &FileConfig, seed: u64, out: &Path) -> CliResult<Outcome> {
    let pairs: Vec<PreferencePair> = jsonl::read(pairs_path)?;
    if pairs.is_empty() {
        return Err(CliError::NothingEligible(format!("{}: no preference pairs", pairs_path.display())));
    }
    let vocab = pair_vocab(&pairs);
    let enc = encode_all(&pairs, &vocab)?;
    let held = match heldout {
        Some(p) => encode_all(&jsonl::read::<PreferencePair>(p)?, &vocab)?,
        None => Vec::new(),
    };

    let t = &cfg.train;
    let tc = TrainConfig {
        dpo: DpoConfig { beta: t.beta, lambda: t.lambda, learning_rate: t.learning_rate, epochs: t.epochs },
        batch_size: t.batch_size,
        seed: derive_seed(seed, &["train"]),
    };
    let reference: ToyModelF32 = ToyModel::init(model_config(&cfg.model, vocab.len(), seed))?;
    let mut policy = reference.clone();
    fs::create_dir_all(out)?;
    let init_path = out.join("init.ckpt");
    save_checkpoint(&init_path, &reference, &vocab).map_err(|e| CliError::Config(e.to_string()))?;

    let report = train(&mut policy, &reference, &enc, &tc)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &policy, &vocab).map_err(|e| CliError::Config(e.to_string()))?;
    let mut csv = String::from("epoch,loss\n");
    let _ = writeln!(csv, "0,{}", report.initial_loss);
    for (i, l) in report.loss_curve.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    let curve = out.join("loss_curve.csv");
    fs::write(&curve, csv)?;

    let summary = TrainSummary {
        pairs: enc.len(),
        heldout_pairs: held.len(),
        n_params: policy.n_params(),
        vocab_size: vocab.len(),
        steps: report.steps,
        initial_loss: report.initial_loss,
        final_loss: report.loss_curve.last().copied().unwrap_or(report.initial_loss),
        train_preference_accuracy: preference_accuracy(&policy, &enc)?,
        heldout_preference_accuracy: if held.is_empty() { None } else { Some(preference_accuracy(&policy, &held)?) },
    };
    let summary_path = out.join("train_report.json");
    write_json(&summary_path, &summary)?;
    Ok(Outcome { outputs: vec![init_path, ckpt, curve, summary_path] })
}

#[derive(Serialize)]
struct ProfileLine<'a> {
    pair: usize,
    kind: &'a str,
    #[serde(flatten)]
    profile: &'a GradientProfile,
}

#[derive(Serialize)]
struct GradSummary {
    model: String,
    pairs: usize,
    control_kind: String,
    #[serde(flatten)]
    summary: ProfileSummary,
}

pub fn gradprofile(pairs_path: &Path, checkpoint: Option<&Path>, control: bool, cfg: &FileConfig, seed: u64, out: &Path) -> CliResult<Outcome> {
    let pairs: Vec<PreferencePair> = jsonl::read(pairs_path)?;
    let (model, vocab, label): (ToyModelF64, Vocab, String) = match checkpoint {
        Some(p) => {
            let (m, v) = load_checkpoint(p).map_err(|e| CliError::Config(e.to_string()))?;
            (m, v, p.display().to_string())
        }
        None => {
            let v = pair_vocab(&pairs);
            let m = ToyModel::init(model_config(&cfg.model, v.len(), seed))?;
            (m, v, "untrained initialization".to_string())
        }
    };
    let enc = encode_all(&pairs, &vocab)?;
    let chosen: Vec<&EncodedPair> = enc.iter().take(cfg.profile.limit).collect();
    if chosen.is_empty() {
        return Err(CliError::NothingEligible(format!("{}: no preference pairs", pairs_path.display())));
    }
    let mut minimal = Vec::with_capacity(chosen.len());
    let mut controls = Vec::new();
    for (i, p) in chosen.iter().enumerate() {
        minimal.push(per_token_gradient_profile(&model, p)?);
        if control {
            let c = random_control_pair(p, &vocab, derive_seed(seed, &["control", &i.to_string()]));
            controls.push(per_token_gradient_profile(&model, &c)?);
        }
    }
    fs::create_dir_all(out)?;
    let lines: Vec<ProfileLine> = minimal
        .iter()
        .enumerate()
        .map(|(i, p)| ProfileLine { pair: i, kind: "minimal", profile: p })
        .chain(controls.iter().enumerate().map(|(i, p)| ProfileLine { pair: i, kind: "control", profile: p }))
        .collect();
    let profiles = out.join("profiles.jsonl");
    jsonl::write(&profiles, &lines)?;
    let summary = GradSummary {
        model: label,
        pairs: chosen.len(),
        control_kind: if control { "random" } else { "none" }.to_string(),
        summary: ProfileSummary::new(&minimal, &controls),
    };
    let summary_path = out.join("gradprofile_summary.json");
    write_json(&summary_path, &summary)?;
    Ok(Outcome { outputs: vec![profiles, summary_path] })
}

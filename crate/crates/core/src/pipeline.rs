//! End-to-end run: ingest, preprocessing, balancing, unimodal encoders,
//! complementarity analysis, fusion, evaluation and comparison tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::balance::{adasyn, fidelity_report, radar_export, AdasynOutput, FidelityReport};
use crate::complementarity::{complementarity_report, lowest_score_pair, select_best_pair, ComplementarityReport};
use crate::config::{DataSource, RunConfig};
use crate::dsp::{bandpass, build_domain_views, Domain, DomainViews, FeatureMatrix};
use crate::error::{Error, Result};
use crate::ingest::{generate_synthetic, load_dataset_dir, minmax_normalize, split_by_patient, LabeledDataset, Signal1D};
use crate::models::{
    branch_tap, build_1dcnn, build_2dcnn, build_cnn_transformer, build_hybrid, extract_deep_features, image_tensor,
    sequence_tensor, Branch, ModelKind,
};
use crate::nn::{persist, train, History, Net, Tensor, TrainConfig, TrainData};
use crate::stats::{
    bayes_compare, diffs_csv, evaluate, run_ablation, stream_key, strip_plot_svg, AblationConfig, AblationPair,
    AblationTable, ConfusionMatrix, DiffLabel, PairDiff,
};

pub const MODEL_1D: &str = "1D-CNN";
pub const MODEL_2D: &str = "2D-CNN";
pub const MODEL_TRANSFORMER: &str = "Transformer";
pub const HYBRID_1: &str = "Hybrid1";
pub const HYBRID_2: &str = "Hybrid2";

/// Signal representation consumed by one unimodal encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum View {
    Time,
    Frequency,
    TimeFrequency,
}

impl View {
    pub const ALL: [View; 3] = [View::Time, View::Frequency, View::TimeFrequency];

    pub fn name(self) -> &'static str {
        match self {
            View::Time => "time",
            View::Frequency => "frequency",
            View::TimeFrequency => "time_frequency",
        }
    }

    pub fn model_name(self) -> &'static str {
        match self {
            View::Time => MODEL_1D,
            View::Frequency => MODEL_TRANSFORMER,
            View::TimeFrequency => MODEL_2D,
        }
    }

    pub fn kind(self) -> ModelKind {
        match self {
            View::Time => ModelKind::OneD,
            View::Frequency => ModelKind::Transformer,
            View::TimeFrequency => ModelKind::TwoD,
        }
    }

    pub fn from_name(s: &str) -> Result<View> {
        View::ALL
            .into_iter()
            .find(|v| v.name() == s || v.model_name() == s)
            .ok_or_else(|| Error::Config(format!("unknown view `{s}`")))
    }

    /// The view a unimodal network was built for, read from its input name.
    pub fn of_net(net: &Net) -> Result<View> {
        let first = net.inputs.first().map(|&i| net.nodes[i].name.as_str()).unwrap_or("");
        match first.rsplit('.').next().unwrap_or("") {
            "signal" => Ok(View::Time),
            "spectrum" => Ok(View::Frequency),
            "scalogram" => Ok(View::TimeFrequency),
            other => Err(Error::InvalidInput(format!("network input `{other}` matches no view"))),
        }
    }

    pub fn tensor(self, views: &DomainViews) -> Result<Tensor> {
        match self {
            View::Time => Ok(sequence_tensor(&views.time)),
            View::Frequency => Ok(sequence_tensor(&views.frequency)),
            View::TimeFrequency => image_tensor(&views.time_frequency),
        }
    }
}

/// 64-bit sub-seed for a named consumer of the run seed.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let k = stream_key(seed, tag);
    u64::from_le_bytes(k[..8].try_into().expect("32-byte key"))
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| e.in_stage(name))
}

/// Partitions after preprocessing and optional oversampling.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub class_names: Vec<String>,
    /// Real training rows followed by synthetic ones.
    pub train: LabeledDataset,
    pub n_real_train: usize,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub adasyn: Option<AdasynOutput>,
}

pub fn load_source(cfg: &RunConfig) -> Result<LabeledDataset> {
    match cfg.data.source {
        DataSource::Synthetic => generate_synthetic(&cfg.data.synthetic),
        DataSource::Directory => {
            let dir = cfg.data.directory.as_ref().ok_or_else(|| Error::Config("data.directory missing".into()))?;
            load_dataset_dir(dir, cfg.data.sample_rate, cfg.data.image_len)
        }
    }
}

/// Ingest, band-pass, normalize, split by patient, then oversample the
/// training partition only.
pub fn prepare(cfg: &RunConfig, skip_adasyn: bool) -> Result<Prepared> {
    let raw = stage("ingest", || load_source(cfg))?;
    let filtered = stage("bandpass", || {
        let signals = raw.signals.iter().map(|s| bandpass(s, &cfg.preprocess.bandpass)).collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(signals, raw.class_names.clone())
    })?;
    let ds = if cfg.preprocess.normalize { stage("normalize", || minmax_normalize(&filtered))? } else { filtered };
    let (train, val, test) = stage("split", || split_by_patient(&ds, &cfg.split))?;
    let n_real_train = train.len();
    let (train, out) = if cfg.balance.enabled && !skip_adasyn {
        stage("adasyn", || {
            let out = adasyn(
                &FeatureMatrix::new(train.signal_matrix()?, Domain::Time)?,
                &train.labels(),
                &cfg.balance.adasyn,
            )?;
            let mut signals = train.signals.clone();
            for (k, p) in out.provenance.iter().enumerate() {
                let base = &train.signals[p.base];
                let row = out.features.data.row(n_real_train + k).to_vec();
                let label = out.labels[n_real_train + k];
                let id = format!("synthetic-{k:05}-{}", base.source_id);
                signals.push(Signal1D::new(row, base.sample_rate, label, base.patient_id.clone(), id)?);
            }
            Ok((LabeledDataset::new(signals, train.class_names.clone())?, Some(out)))
        })?
    } else {
        (train, None)
    };
    Ok(Prepared { class_names: ds.class_names.clone(), train, n_real_train, val, test, adasyn: out })
}

#[derive(Debug, Clone)]
pub struct ViewSet {
    pub train: DomainViews,
    pub val: DomainViews,
    pub test: DomainViews,
}

/// Domain views with the frequency scaler fitted on the training rows.
pub fn build_views(cfg: &RunConfig, p: &Prepared) -> Result<ViewSet> {
    stage("views", || {
        let (train, scaler) = build_domain_views(&p.train, &cfg.views, None)?;
        let (val, _) = build_domain_views(&p.val, &cfg.views, Some(&scaler))?;
        let (test, _) = build_domain_views(&p.test, &cfg.views, Some(&scaler))?;
        Ok(ViewSet { train, val, test })
    })
}

/// Builds and trains the encoder for one view.
pub fn train_unimodal(cfg: &RunConfig, view: View, p: &Prepared, views: &ViewSet) -> Result<(Net, History)> {
    let n_classes = p.class_names.len();
    let tag = view.model_name();
    let seed = sub_seed(cfg.seed, tag);
    let (mcfg, net) = match view {
        View::Time => {
            let m = &cfg.models.oned;
            (m, build_1dcnn(&m.scale, views.train.time.ncols(), n_classes, seed)?)
        }
        View::Frequency => {
            let m = &cfg.models.transformer;
            (m, build_cnn_transformer(&m.scale, views.train.frequency.ncols(), n_classes, seed)?)
        }
        View::TimeFrequency => {
            let m = &cfg.models.twod;
            let (h, w) = views.train.time_frequency.first().map(|s| s.power.dim()).unwrap_or((0, 0));
            (m, build_2dcnn(&m.scale, h, w, n_classes, seed)?)
        }
    };
    let tcfg = TrainConfig { seed: sub_seed(cfg.seed, &format!("{tag}/train")) ^ mcfg.train.seed, ..mcfg.train.clone() };
    let tr = TrainData::new(vec![view.tensor(&views.train)?], p.train.labels())?;
    let va = TrainData::new(vec![view.tensor(&views.val)?], p.val.labels())?;
    train(net, &tr, Some(&va), &tcfg)
}

/// Fusion network over trained encoders, trained on the same partitions.
pub fn train_hybrid(
    cfg: &RunConfig,
    name: &str,
    encoders: &[(View, &Net)],
    p: &Prepared,
    views: &ViewSet,
) -> Result<(Net, History)> {
    let branches: Vec<Branch> = encoders
        .iter()
        .map(|(v, net)| Branch { name: v.name().to_string(), net, tap: branch_tap(v.kind()).to_string() })
        .collect();
    let h = &cfg.models.hybrid;
    let net = build_hybrid(&branches, &h.scale, h.finetune, sub_seed(cfg.seed, name))?;
    let inputs = |dv: &DomainViews| encoders.iter().map(|(v, _)| v.tensor(dv)).collect::<Result<Vec<_>>>();
    let tcfg = TrainConfig { seed: sub_seed(cfg.seed, &format!("{name}/train")) ^ h.train.seed, ..h.train.clone() };
    let tr = TrainData::new(inputs(&views.train)?, p.train.labels())?;
    let va = TrainData::new(inputs(&views.val)?, p.val.labels())?;
    train(net, &tr, Some(&va), &tcfg)
}

/// Penultimate features of each encoder on the real training rows.
pub fn deep_features(
    encoders: &mut BTreeMap<View, Net>,
    views: &DomainViews,
    rows: usize,
) -> Result<BTreeMap<View, FeatureMatrix>> {
    let idx: Vec<usize> = (0..rows).collect();
    let mut out = BTreeMap::new();
    for (&v, net) in encoders.iter_mut() {
        let x = v.tensor(views)?.select_rows(&idx);
        out.insert(v, extract_deep_features(net, &[&x], "hidden", v.kind())?.matrix);
    }
    Ok(out)
}

/// The pair fused by the first hybrid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairChoice {
    pub pair: (String, String),
    /// No pair met the complementarity premise; the lowest-scoring pair was used.
    pub fallback: bool,
}

pub fn choose_pair(report: &ComplementarityReport) -> Result<PairChoice> {
    match select_best_pair(report) {
        Ok(pair) => Ok(PairChoice { pair, fallback: false }),
        Err(Error::NoComplementaryPair) => {
            let pair = lowest_score_pair(report).ok_or(Error::NoComplementaryPair)?;
            log::warn!("no complementary pair; fusing lowest-score pair {} + {}", pair.0, pair.1);
            Ok(PairChoice { pair, fallback: true })
        }
        Err(e) => Err(e),
    }
}

/// Files written so far, with their SHA-256 digests.
struct Artifacts {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Artifacts {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.hashes.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(&self.dir).unwrap_or(path).to_string_lossy().replace('\\', "/");
        self.hashes.insert(rel, sha256_hex(&bytes));
        Ok(())
    }

    fn weights(&mut self, net: &Net, stem: &str) -> Result<()> {
        let dir = self.dir.join("weights");
        let (j, b) = persist::save(net, &dir, stem)?;
        self.record(&j)?;
        self.record(&b)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitSummary {
    pub patients: BTreeMap<String, Vec<String>>,
    pub class_counts: BTreeMap<String, Vec<usize>>,
    pub n_synthetic: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LeakageChecks {
    pub patients_disjoint: bool,
    /// Every synthetic row was interpolated from real training rows.
    pub synthetic_from_train_only: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_name: String,
    pub seed: u64,
    pub hybrid1: PairChoice,
    pub checks: LeakageChecks,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run directory name under `output_dir`; a timestamped name when absent.
    pub run_name: Option<String>,
    pub skip_adasyn: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: ComplementarityReport,
    pub hybrid1: PairChoice,
    pub ablation: AblationTable,
    pub bayes: Vec<PairDiff>,
    pub fidelity: Option<FidelityReport>,
    pub manifest: RunManifest,
}

fn default_run_name() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("run-{secs}")
}

fn leakage_checks(p: &Prepared) -> LeakageChecks {
    let tr = p.train.subset(&(0..p.n_real_train).collect::<Vec<_>>()).patient_ids();
    let va = p.val.patient_ids();
    let te = p.test.patient_ids();
    let patients_disjoint = tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te);
    let synthetic_from_train_only = p.adasyn.as_ref().is_none_or(|o| {
        o.n_original() == p.n_real_train
            && o.provenance.iter().all(|q| q.base < p.n_real_train && q.neighbor < p.n_real_train)
    });
    LeakageChecks { patients_disjoint, synthetic_from_train_only }
}

fn predictions_csv(y: &[usize], preds: &[(String, Vec<usize>)]) -> String {
    let mut s = String::from("index,y_true");
    for (name, _) in preds {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (i, t) in y.iter().enumerate() {
        s.push_str(&format!("{i},{t}"));
        for (_, p) in preds {
            s.push_str(&format!(",{}", p[i]));
        }
        s.push('\n');
    }
    s
}

/// Runs every stage and writes all artifacts under `output_dir/<run name>`.
/// A failing stage aborts the run; files already written stay in place.
pub fn run_pipeline(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let run_name = opts.run_name.clone().unwrap_or_else(default_run_name);
    let dir = cfg.output_dir.join(&run_name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut art = Artifacts { dir: dir.clone(), hashes: BTreeMap::new() };
    art.write("config.toml", cfg.to_toml()?.as_bytes())?;

    let p = prepare(cfg, opts.skip_adasyn)?;
    let checks = leakage_checks(&p);
    let split = SplitSummary {
        patients: [("train", &p.train), ("val", &p.val), ("test", &p.test)]
            .into_iter()
            .map(|(k, d)| (k.to_string(), d.patient_ids().into_iter().collect()))
            .collect(),
        class_counts: [("train", &p.train), ("val", &p.val), ("test", &p.test)]
            .into_iter()
            .map(|(k, d)| (k.to_string(), d.class_counts()))
            .collect(),
        n_synthetic: p.train.len() - p.n_real_train,
    };
    art.json("split.json", &split)?;
    let views = build_views(cfg, &p)?;

    let mut encoders = BTreeMap::new();
    let mut histories: BTreeMap<String, History> = BTreeMap::new();
    for v in View::ALL {
        let (net, hist) = stage(&format!("train {}", v.model_name()), || train_unimodal(cfg, v, &p, &views))?;
        art.weights(&net, v.model_name())?;
        histories.insert(v.model_name().to_string(), hist);
        encoders.insert(v, net);
    }

    let feats = stage("features", || deep_features(&mut encoders, &views.train, p.n_real_train))?;
    let (report, hybrid1) = stage("complementarity", || {
        let named: Vec<(String, &FeatureMatrix)> = feats.iter().map(|(v, m)| (v.name().to_string(), m)).collect();
        let report =
            complementarity_report(&named, &cfg.complementarity.thresholds, cfg.complementarity.bins)?;
        let choice = choose_pair(&report)?;
        Ok((report, choice))
    })?;
    art.json(
        "complementarity.json",
        &serde_json::json!({ "report": report, "heatmap": report.heatmap(), "hybrid1": hybrid1 }),
    )?;
    art.write("complementarity.csv", report.to_csv().as_bytes())?;

    let pair = [View::from_name(&hybrid1.pair.0)?, View::from_name(&hybrid1.pair.1)?];
    let mut fused = BTreeMap::new();
    for (name, members) in [(HYBRID_1, pair.to_vec()), (HYBRID_2, View::ALL.to_vec())] {
        let (net, hist) = stage(&format!("train {name}"), || {
            let refs: Vec<(View, &Net)> = members.iter().map(|v| (*v, &encoders[v])).collect();
            train_hybrid(cfg, name, &refs, &p, &views)
        })?;
        art.weights(&net, name)?;
        histories.insert(name.to_string(), hist);
        fused.insert(name, (members, net));
    }
    art.json("history.json", &histories)?;

    let y_test = p.test.labels();
    let preds: Vec<(String, Vec<usize>)> = stage("evaluate", || {
        let mut out = Vec::new();
        for v in View::ALL {
            let x = v.tensor(&views.test)?;
            let net = encoders.get_mut(&v).expect("trained");
            out.push((v.model_name().to_string(), net.predict(&[&x])?.argmax_rows()));
        }
        for name in [HYBRID_1, HYBRID_2] {
            let (members, net) = fused.get_mut(name).expect("trained");
            let xs = members.iter().map(|v| v.tensor(&views.test)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor> = xs.iter().collect();
            out.push((name.to_string(), net.predict(&refs)?.argmax_rows()));
        }
        Ok(out)
    })?;
    art.write("predictions.csv", predictions_csv(&y_test, &preds).as_bytes())?;
    let confusion = preds
        .iter()
        .map(|(n, pr)| Ok((n.clone(), evaluate(&y_test, pr, &p.class_names)?.0)))
        .collect::<Result<BTreeMap<String, ConfusionMatrix>>>()?;
    art.json("confusion.json", &confusion)?;

    let mut pairs: Vec<AblationPair> = pair
        .iter()
        .map(|v| AblationPair {
            model_a: HYBRID_1.into(),
            model_b: v.model_name().into(),
            label: DiffLabel::Complementarity,
        })
        .collect();
    pairs.push(AblationPair { model_a: HYBRID_2.into(), model_b: HYBRID_1.into(), label: DiffLabel::Redundancy });
    let acfg = AblationConfig {
        pairs: pairs.clone(),
        metrics: cfg.stats.metrics.clone(),
        iters: cfg.stats.bootstrap_iters,
        seed: cfg.seed,
    };
    let ablation = stage("ablation", || run_ablation(&preds, &y_test, &p.class_names, &acfg))?;
    art.write("ablation.csv", ablation.to_csv().as_bytes())?;
    art.json("metrics.json", &ablation.rows)?;
    art.write("diff_bootstrap.csv", diffs_csv(&ablation.diffs).as_bytes())?;

    let bayes = stage("compare", || {
        let find = |n: &str| &preds.iter().find(|(m, _)| m == n).expect("model").1;
        pairs
            .iter()
            .map(|pr| {
                let results = bayes_compare(
                    &y_test,
                    find(&pr.model_a),
                    find(&pr.model_b),
                    p.class_names.len(),
                    &cfg.stats.metrics,
                    cfg.stats.bootstrap_iters,
                    cfg.seed,
                )?;
                Ok(PairDiff { model_a: pr.model_a.clone(), model_b: pr.model_b.clone(), results })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    art.write("diff_bayes.csv", diffs_csv(&bayes).as_bytes())?;
    let strip: Vec<_> = ablation.diffs.iter().flat_map(|d| d.results.iter().cloned()).collect();
    art.write("diff_strip.svg", strip_plot_svg(&strip).as_bytes())?;

    let fidelity = match &p.adasyn {
        Some(out) => Some(stage("fidelity", || {
            // fidelity is measured in the 2D encoder's hidden space
            let x = View::TimeFrequency.tensor(&views.train)?;
            let net = encoders.get_mut(&View::TimeFrequency).expect("trained");
            let deep = extract_deep_features(net, &[&x], "hidden", ModelKind::TwoD)?;
            let in_deep = AdasynOutput { features: deep.matrix, ..out.clone() };
            let rep = fidelity_report(&in_deep, &p.class_names)?;
            art.json("fidelity.json", &rep)?;
            art.json("radar.json", &radar_export(&rep))?;
            Ok(rep)
        })?),
        None => None,
    };

    let manifest = RunManifest {
        run_name,
        seed: cfg.seed,
        hybrid1: hybrid1.clone(),
        checks,
        artifacts: art.hashes.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text).map_err(|e| Error::io(dir.join("manifest.json"), e))?;
    Ok(RunOutcome { dir, report, hybrid1, ablation, bayes, fidelity, manifest })
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ogrit::datakit::synthetic::{generate_synthetic, ScenarioKind, SimConfig};
use ogrit::datakit::{
    datasets_by_goal_type, extract_all, ingest_csv, read_samples, split_episodes, write_csv, write_samples, Recording,
    Sample, Split, SplitPolicy,
};
use ogrit::dtree::{load_models, save_models, train_models, TrainingConfig};
use ogrit::eval::{evaluate, measure_latency, LatencyStats};
use ogrit::inference::{observe_history, infer_from_history};
use ogrit::occlusion::export_occlusion_dataset;
use ogrit::scene::{load_scene, save_scene, StaticScene, VehicleId};
use ogrit::verify::{self, Proposition, Verdict};
use ogrit::Error;

const SCENE_FILE: &str = "scene.json";
const FEATURES_FILE: &str = "features.csv";
const ORACLE_FEATURES_FILE: &str = "features_oracle.csv";
const SPLIT_FILE: &str = "split.json";
const RECORDINGS_DIR: &str = "recordings";

#[derive(Parser)]
#[command(name = "ogrit", version, about = "Goal recognition under occlusion with verifiable decision trees")]
struct Cli {
    /// Where to write the run manifest (defaults next to the primary output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate synthetic episodes and extract training samples.
    MakeData(MakeDataArgs),
    /// Extract training samples from recorded trajectory CSV files.
    ExtractFeatures(ExtractFeaturesArgs),
    /// Compute per-frame occluded regions for every ego in a recording.
    ExtractOcclusions(ExtractOcclusionsArgs),
    /// Train one tree per goal type.
    Train(TrainArgs),
    /// Score models on held-out episodes.
    Evaluate(EvaluateArgs),
    /// Goal posterior for one target seen by one ego.
    Infer(InferArgs),
    /// Check a proposition against trained models.
    Verify(VerifyArgs),
}

#[derive(Args, Serialize)]
struct MakeDataArgs {
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Episode length in seconds.
    #[arg(long, default_value_t = 45.0)]
    duration: f64,
    #[arg(long, default_value_t = 100.0)]
    range: f64,
    /// hold-one-out-each, hold-k, hold-<k> or ratio-60-20-20.
    #[arg(long, default_value = "ratio-60-20-20")]
    split_policy: String,
}

#[derive(Args, Serialize)]
struct ExtractFeaturesArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    recording: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    frame_rate: f64,
    #[arg(long, default_value_t = 100.0)]
    range: f64,
    #[arg(long, default_value = "ratio-60-20-20")]
    split_policy: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct ExtractOcclusionsArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    recording: PathBuf,
    #[arg(long, default_value_t = 100.0)]
    range: f64,
    #[arg(long, default_value_t = 25.0)]
    frame_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Data directories written by make-data or extract-features.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// JSON training configuration; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_samples: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Train the fully observed baseline on the oracle feature rows.
    #[arg(long)]
    oracle: bool,
    /// Use every episode instead of the training part of the split.
    #[arg(long)]
    all_episodes: bool,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Models trained with --oracle, scored on the oracle feature rows.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Pipeline calls to time; 0 disables the latency measurement.
    #[arg(long, default_value_t = 200)]
    latency_calls: usize,
    #[arg(long, default_value_t = 100.0)]
    range: f64,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    recording: PathBuf,
    #[arg(long)]
    ego: VehicleId,
    #[arg(long)]
    target: VehicleId,
    /// Time in seconds; the nearest frame is used.
    #[arg(long)]
    t: f64,
    /// Seconds of history, sampled at one-second ticks.
    #[arg(long, default_value_t = 2)]
    history: usize,
    #[arg(long, default_value_t = 25.0)]
    frame_rate: f64,
    #[arg(long, default_value_t = 100.0)]
    range: f64,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    models: PathBuf,
    /// Proposition JSON file.
    #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
    prop: Option<PathBuf>,
    /// oncoming-entropy, stopped-oncoming-occluded or exit-number-four.
    #[arg(long)]
    builtin: Option<String>,
    #[arg(long)]
    emit_smt: Option<PathBuf>,
    /// Write the full result (with any counterexample) as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Record of one command run.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    version: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.insert(path.display().to_string(), hex);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn time(&mut self, stage: &str, since: Instant) {
        self.timings_ms.insert(stage.to_string(), since.elapsed().as_secs_f64() * 1e3);
    }

    fn write(&self, explicit: Option<&Path>, default: Option<PathBuf>) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self)?;
        match explicit.map(Path::to_path_buf).or(default) {
            Some(p) => std::fs::write(&p, text).map_err(|e| Error::io(&p, e)),
            None => {
                info!("manifest: {}", serde_json::to_string(self)?);
                Ok(())
            }
        }
    }
}

/// Failure kinds with their exit codes.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file or directory: {}", path.display())))
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes samples, oracle samples, the scene and a split into `dir`.
fn write_data_dir(
    dir: &Path,
    scene: &StaticScene,
    recs: &[Recording],
    range: f64,
    policy: &str,
    seed: u64,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    let policy: SplitPolicy = policy.parse()?;
    let t = Instant::now();
    let pairs: Vec<(&Recording, &StaticScene)> = recs.iter().map(|r| (r, scene)).collect();
    let ex = extract_all(&pairs, range)?;
    manifest.time("extract", t);
    if ex.skipped_vehicles > 0 {
        warn!("{} vehicles skipped: true goal could not be determined", ex.skipped_vehicles);
    }
    info!(
        "{} samples from {} goal sets; {} goal sets lack the true goal",
        ex.samples.len(),
        ex.groups,
        ex.groups_without_true_goal
    );
    let episodes: Vec<String> = recs.iter().map(|r| r.episode_id.clone()).collect();
    // Too few recordings for a split is fine for single-file conversion;
    // training then needs --all-episodes.
    let split = match split_episodes(&episodes, policy, seed) {
        Ok(s) => Some(s),
        Err(Error::InsufficientEpisodes { needed, have }) => {
            warn!("{have} episodes cannot be split ({needed} needed); no {SPLIT_FILE} written");
            None
        }
        Err(e) => return Err(e.into()),
    };
    for (name, value) in [(FEATURES_FILE, &ex.samples), (ORACLE_FEATURES_FILE, &ex.oracle)] {
        let p = dir.join(name);
        write_samples(value, &p)?;
        manifest.output(&p);
    }
    let p = dir.join(SCENE_FILE);
    save_scene(scene, &p)?;
    manifest.output(&p);
    if let Some(split) = split {
        let p = dir.join(SPLIT_FILE);
        write_json(&p, &split)?;
        manifest.output(&p);
    }
    Ok(())
}

fn cmd_make_data(a: &MakeDataArgs, mpath: Option<&Path>) -> CmdResult {
    let kind: ScenarioKind = a.kind.parse()?;
    let mut m = RunManifest::new("make-data", a, Some(a.seed));
    let cfg = SimConfig {
        duration: a.duration,
        ..SimConfig::default()
    };
    let t = Instant::now();
    let (scene, recs) = generate_synthetic(kind, a.episodes, a.seed, &cfg)?;
    m.time("simulate", t);
    let rec_dir = a.out.join(RECORDINGS_DIR);
    std::fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
    for r in &recs {
        let p = rec_dir.join(format!("{}.csv", r.episode_id));
        write_csv(r, &p)?;
        m.output(&p);
    }
    write_data_dir(&a.out, &scene, &recs, a.range, &a.split_policy, a.seed, &mut m)?;
    println!("wrote {} episodes of {} to {}", recs.len(), kind.name(), a.out.display());
    m.write(mpath, Some(a.out.join("manifest.json")))?;
    Ok(())
}

fn cmd_extract_features(a: &ExtractFeaturesArgs, mpath: Option<&Path>) -> CmdResult {
    require(&a.scene)?;
    for r in &a.recording {
        require(r)?;
    }
    let mut m = RunManifest::new("extract-features", a, Some(a.seed));
    m.input(&a.scene)?;
    let scene = load_scene(&a.scene)?;
    let mut recs = Vec::new();
    for p in &a.recording {
        m.input(p)?;
        recs.push(ingest_csv(p, &scene.scenario_id, a.frame_rate)?);
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_data_dir(&a.out, &scene, &recs, a.range, &a.split_policy, a.seed, &mut m)?;
    m.write(mpath, Some(a.out.join("manifest.json")))?;
    Ok(())
}

fn cmd_extract_occlusions(a: &ExtractOcclusionsArgs, mpath: Option<&Path>) -> CmdResult {
    require(&a.scene)?;
    require(&a.recording)?;
    let mut m = RunManifest::new("extract-occlusions", a, None);
    m.input(&a.scene)?;
    m.input(&a.recording)?;
    let scene = load_scene(&a.scene)?;
    let rec = ingest_csv(&a.recording, &scene.scenario_id, a.frame_rate)?;
    let t = Instant::now();
    let ds = export_occlusion_dataset(&rec, &scene, a.range, &a.out)?;
    m.time("occlusions", t);
    m.output(&a.out);
    println!("{} occlusion records written to {}", ds.frames.len(), a.out.display());
    m.write(mpath, Some(sidecar(&a.out)))?;
    Ok(())
}

/// Samples from every data directory, restricted to one split part.
fn load_samples(dirs: &[PathBuf], oracle: bool, part: Option<&str>, m: &mut RunManifest) -> Result<Vec<Sample>, Failure> {
    let mut out = Vec::new();
    for d in dirs {
        let file = d.join(if oracle { ORACLE_FEATURES_FILE } else { FEATURES_FILE });
        require(&file)?;
        m.input(&file)?;
        let samples = read_samples(&file)?;
        let keep: Option<BTreeSet<String>> = match part {
            None => None,
            Some(part) => {
                let sp = d.join(SPLIT_FILE);
                require(&sp)?;
                m.input(&sp)?;
                let split: Split = read_json(&sp)?;
                let eps = match part {
                    "train" => split.train,
                    "val" => split.val,
                    _ => split.test,
                };
                let have: BTreeSet<&str> = samples.iter().map(|s| s.episode_id.as_str()).collect();
                if let Some(e) = eps.iter().find(|e| !have.contains(e.as_str())) {
                    return Err(Error::SplitMismatch(format!("{}: split episode {e} has no samples", d.display())).into());
                }
                Some(eps.into_iter().collect())
            }
        };
        out.extend(samples.into_iter().filter(|s| keep.as_ref().map_or(true, |k| k.contains(&s.episode_id))));
    }
    Ok(out)
}

fn cmd_train(a: &TrainArgs, mpath: Option<&Path>) -> CmdResult {
    for d in &a.data {
        require(d)?;
    }
    let mut cfg = match &a.config {
        Some(p) => {
            require(p)?;
            read_json::<TrainingConfig>(p)?
        }
        None => TrainingConfig::default(),
    };
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.max_depth {
        cfg.max_depth = v;
    }
    if let Some(v) = a.min_samples {
        cfg.min_samples_leaf = v;
    }
    if let Some(v) = a.alpha {
        cfg.laplace_alpha = v;
    }
    cfg.oracle |= a.oracle;
    cfg.validate()?;
    let mut m = RunManifest::new("train", &(a, cfg), None);
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    let part = (!a.all_episodes).then_some("train");
    let samples = load_samples(&a.data, a.oracle, part, &mut m)?;
    let t = Instant::now();
    let (models, reports, warnings) = train_models(&datasets_by_goal_type(&samples), &cfg)?;
    m.time("train", t);
    for w in &warnings {
        warn!("{w}");
    }
    save_models(&models, &a.out)?;
    m.output(&a.out);
    let mut metrics = a.out.as_os_str().to_owned();
    metrics.push(".metrics.json");
    let metrics = PathBuf::from(metrics);
    write_json(&metrics, &reports)?;
    m.output(&metrics);
    println!("{:<16} {:>8} {:>8} {:>6} {:>7} {:>10}", "goal type", "samples", "positive", "depth", "leaves", "impurity");
    for r in &reports {
        println!(
            "{:<16} {:>8} {:>8} {:>6} {:>7} {:>10.4}",
            r.goal_type.to_string(),
            r.n_samples,
            r.n_positive,
            r.depth,
            r.leaves,
            r.training_impurity
        );
    }
    m.write(mpath, Some(sidecar(&a.out)))?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, mpath: Option<&Path>) -> CmdResult {
    require(&a.models)?;
    let mut m = RunManifest::new("evaluate", a, None);
    m.input(&a.models)?;
    let models = load_models(&a.models)?;
    let samples = load_samples(&a.data, false, Some("test"), &mut m)?;
    let oracle = match &a.oracle {
        Some(p) => {
            require(p)?;
            m.input(p)?;
            Some((load_models(p)?, load_samples(&a.data, true, Some("test"), &mut m)?))
        }
        None => None,
    };
    let t = Instant::now();
    let mut report = evaluate(&models, &samples, oracle.as_ref().map(|(om, os)| (om, os.as_slice())))?;
    m.time("score", t);
    if a.latency_calls > 0 {
        let t = Instant::now();
        let mut durations = Vec::new();
        for d in &a.data {
            let scene = load_scene(d.join(SCENE_FILE))?;
            let split: Split = read_json(&d.join(SPLIT_FILE))?;
            if let Some(ep) = split.test.first() {
                let p = d.join(RECORDINGS_DIR).join(format!("{ep}.csv"));
                if p.exists() {
                    let rec = ingest_csv(&p, &scene.scenario_id, 25.0)?;
                    durations.extend(measure_latency(&rec, &scene, &models, a.range, a.latency_calls));
                }
            }
        }
        report.latency = LatencyStats::from_durations(&durations);
        m.time("latency", t);
    }
    write_json(&a.out, &report)?;
    m.output(&a.out);
    print!("{}", report.summary());
    m.write(mpath, Some(sidecar(&a.out)))?;
    Ok(())
}

fn cmd_infer(a: &InferArgs, mpath: Option<&Path>) -> CmdResult {
    for p in [&a.scene, &a.models, &a.recording] {
        require(p)?;
    }
    let mut m = RunManifest::new("infer", a, None);
    for p in [&a.scene, &a.models, &a.recording] {
        m.input(p)?;
    }
    let scene = load_scene(&a.scene)?;
    let models = load_models(&a.models)?;
    let rec = ingest_csv(&a.recording, &scene.scenario_id, a.frame_rate)?;
    let nearest = |t: f64| {
        rec.frames
            .iter()
            .enumerate()
            .min_by(|x, y| (x.1.time - t).abs().total_cmp(&(y.1.time - t).abs()))
            .map(|(i, _)| i)
    };
    let now = nearest(a.t).ok_or_else(|| Failure::Runtime(Error::Validation("recording has no frames".into())))?;
    let mut idx: Vec<usize> = (1..=a.history)
        .filter_map(|k| {
            let t = rec.frames[now].time - k as f64;
            (t >= rec.frames[0].time - 1e-9).then(|| nearest(t)).flatten()
        })
        .collect();
    idx.reverse();
    idx.push(now);
    idx.dedup();
    let frames: Vec<_> = idx.iter().map(|i| rec.frames[*i].states.clone()).collect();
    let current = frames.last().unwrap();
    if !current.contains_key(&a.ego) {
        return Err(Failure::Runtime(Error::Validation(format!("ego {} not present at t={}", a.ego, a.t))));
    }
    let t = Instant::now();
    let history = observe_history(&frames, &scene, a.ego, a.range)?;
    let (post, _) = infer_from_history(&history, current, a.ego, a.target, &scene, &models, a.range)?;
    m.time("infer", t);
    for e in &post.entries {
        let line = serde_json::json!({
            "t": post.time,
            "ego_id": a.ego,
            "vehicle_id": post.vehicle_id,
            "goal_lane": e.goal.lane_id,
            "goal_type": e.goal.goal_type,
            "goal_x": e.goal.location.x,
            "goal_y": e.goal.location.y,
            "prior": e.prior,
            "likelihood": e.likelihood,
            "posterior": e.posterior,
        });
        println!("{line}");
    }
    m.write(mpath, None)?;
    Ok(())
}

fn cmd_verify(a: &VerifyArgs, mpath: Option<&Path>) -> CmdResult {
    require(&a.models)?;
    let mut m = RunManifest::new("verify", a, None);
    m.input(&a.models)?;
    let models = load_models(&a.models)?;
    let prop = match (&a.prop, &a.builtin) {
        (Some(p), _) => {
            require(p)?;
            m.input(p)?;
            Proposition::load(p)?
        }
        (None, Some(name)) => verify::builtin(name).ok_or_else(|| {
            Failure::Usage(format!(
                "unknown built-in proposition '{name}'; choose one of {}",
                verify::BUILTIN_NAMES.join(", ")
            ))
        })?,
        (None, None) => return Err(Failure::Usage("give --prop or --builtin".into())),
    };
    let t = Instant::now();
    let result = verify::check(&models, &prop)?;
    m.time("check", t);
    match result.verdict {
        Verdict::Verified => println!("verified"),
        Verdict::Refuted => {
            println!("refuted");
            if let Some(cx) = &result.counterexample {
                let confirmed = cx.confirm(&models, &prop)?;
                println!("counterexample confirmed by direct evaluation: {confirmed}");
                println!("{}", serde_json::to_string_pretty(&cx.vectors)?);
                println!("likelihoods: {}", serde_json::to_string(&verify::summarize(&prop, cx))?);
            }
        }
    }
    if let Some(p) = &a.emit_smt {
        verify::emit_smtlib(&models, &prop, p)?;
        m.output(p);
    }
    if let Some(p) = &a.out {
        write_json(p, &result)?;
        m.output(p);
    }
    m.write(mpath, a.out.as_deref().map(sidecar))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("OGRIT_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    warn!("could not size thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: OGRIT_THREADS must be a positive integer, got '{n}'");
                return ExitCode::from(2);
            }
        }
    }
    let mp = cli.manifest.as_deref();
    let r = match &cli.command {
        Command::MakeData(a) => cmd_make_data(a, mp),
        Command::ExtractFeatures(a) => cmd_extract_features(a, mp),
        Command::ExtractOcclusions(a) => cmd_extract_occlusions(a, mp),
        Command::Train(a) => cmd_train(a, mp),
        Command::Evaluate(a) => cmd_evaluate(a, mp),
        Command::Infer(a) => cmd_infer(a, mp),
        Command::Verify(a) => cmd_verify(a, mp),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

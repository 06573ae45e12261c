//! Command-line front end for the hand–object interaction pipeline: corpus
//! generation and splitting, the three training stages, staged inference,
//! end-to-end runs, metric evaluation, and refinement-depth sweeps.
//!
//! Exit codes: 0 on success, 2 on usage errors (bad flags or flag values),
//! 1 on runtime failures. All randomness flows from `--seed`; repeated runs
//! with the same seed and configuration produce identical artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hoi_forge_core::checkpoint::{self, ModelKind};
use hoi_forge_core::config::PipelineConfig;
use hoi_forge_core::corpus::{self, Action, DatasetIndex, Episode, Split};
use hoi_forge_core::diffusion::DiffusionSchedule;
use hoi_forge_core::evaluate::{self, Aggregate, EpisodeScores, EvalReport};
use hoi_forge_core::manifest::CheckpointRef;
use hoi_forge_core::metrics::{self, StatsItem};
use hoi_forge_core::motion::{self, MotionRefiner, RefinementConfig};
use hoi_forge_core::nn::ParamStore;
use hoi_forge_core::planner::{ConditioningBundle, VideoPlanner};
use hoi_forge_core::posectrl::{self, DrawSpec, PipelineModels, PoseAdapter};
use hoi_forge_core::rng;
use hoi_forge_core::TrainScalar;

#[derive(Parser)]
#[command(name = "hoi-forge", version, about = "Task-conditioned hand-object video pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic episode corpus.
    GenCorpus {
        /// Number of episodes.
        #[arg(long)]
        n: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML configuration file (defaults are used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker threads; the generated corpus is identical for any value.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Assign train/test splits over a generated corpus.
    Split {
        /// Corpus directory (as produced by gen-corpus).
        dir: PathBuf,
        /// Test fraction per action category (ceil, at least one episode).
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Summary statistics over a corpus: palm-orientation bins and angle
    /// histograms, with bar-chart plots.
    Stats {
        /// Corpus directory.
        dir: PathBuf,
        /// Report path (defaults to DIR/stats.json; plots go to DIR/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the coarse video planner on the train split.
    TrainPlanner {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path (defaults to HOME/ckpt/planner.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        home: Option<PathBuf>,
    },
    /// Train the pose refinement model on the train split.
    TrainMdm {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path (defaults to HOME/ckpt/motion.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        home: Option<PathBuf>,
    },
    /// Train the pose-conditioning adapter against a frozen planner.
    TrainPosectrl {
        #[arg(long)]
        corpus: PathBuf,
        /// Planner checkpoint; its recorded configuration hash must match.
        #[arg(long)]
        planner: PathBuf,
        /// Checkpoint path (defaults to HOME/ckpt/posectrl.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        home: Option<PathBuf>,
    },
    /// Stage I only: generate a coarse video for one episode's conditioning.
    InferCoarse {
        /// Episode directory providing instruction and context frame.
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        planner: PathBuf,
        /// Output directory (defaults to HOME/gen/coarse-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        home: Option<PathBuf>,
        /// Accept checkpoints trained under a different configuration.
        #[arg(long)]
        force: bool,
        /// Cut sampling steps for quick runs (not bit-comparable to full runs).
        #[arg(long)]
        fast: bool,
    },
    /// Stage II only: refine a stored pose track.
    Refine {
        /// Directory holding pose.bin / validity.bin to refine.
        #[arg(long)]
        poses: PathBuf,
        /// Episode directory providing the conditioning.
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        mdm: PathBuf,
        /// Partial-refinement depth (defaults to the configured value).
        #[arg(long)]
        n_rv: Option<usize>,
        /// Output directory (defaults to HOME/gen/refined-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        home: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        fast: bool,
    },
    /// Stage III only: regenerate a video conditioned on a stored pose track.
    InferFine {
        #[arg(long)]
        episode: PathBuf,
        /// Directory holding the conditioning pose track.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        planner: PathBuf,
        #[arg(long)]
        posectrl: PathBuf,
        /// Output directory (defaults to HOME/gen/fine-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        home: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        fast: bool,
    },
    /// All three stages end to end for one episode, with a run manifest.
    Pipeline {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        planner: Option<PathBuf>,
        #[arg(long)]
        mdm: Option<PathBuf>,
        #[arg(long)]
        posectrl: Option<PathBuf>,
        #[arg(long)]
        n_rv: Option<usize>,
        /// Run directory (defaults to HOME/runs/run-seed<seed>-nrv<n>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        home: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        fast: bool,
    },
    /// Score pipeline outputs against a corpus split.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        planner: Option<PathBuf>,
        #[arg(long)]
        mdm: Option<PathBuf>,
        #[arg(long)]
        posectrl: Option<PathBuf>,
        #[arg(long)]
        n_rv: Option<usize>,
        /// Which split to score.
        #[arg(long, default_value = "test", value_parser = ["test", "train"])]
        split: String,
        /// Cap the number of episodes scored.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path (defaults to HOME/reports/eval-seed<seed>.json).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        home: Option<PathBuf>,
        /// Proceed despite corpus or checkpoint configuration mismatches.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        fast: bool,
        /// Accepted for symmetry; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate several refinement depths and report the trend.
    SweepNrv {
        /// Comma-separated refinement depths, e.g. 0,10,50.
        #[arg(long)]
        values: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        planner: Option<PathBuf>,
        #[arg(long)]
        mdm: Option<PathBuf>,
        #[arg(long)]
        posectrl: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["test", "train"])]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path (defaults to HOME/reports/sweep-seed<seed>.json).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        home: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        fast: bool,
    },
}

/// Runtime failures exit 1; bad flag values exit 2 (clap handles malformed
/// flags itself, also with 2).
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

// ---- shared plumbing ----

/// The artifact root: --home flag, else HOI_FORGE_HOME, else ./hoi-forge-home.
fn home_dir(arg: &Option<PathBuf>) -> PathBuf {
    arg.clone()
        .or_else(|| std::env::var_os("HOI_FORGE_HOME").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("./hoi-forge-home"))
}

fn load_config(path: &Option<PathBuf>) -> CliResult<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Cut sampling depth for quick iteration. Fast runs stay deterministic but
/// are not comparable to full-depth runs.
fn apply_fast(cfg: &mut PipelineConfig, fast: bool) {
    if fast {
        cfg.planner.sample_steps = cfg.planner.sample_steps.div_ceil(5).max(5);
        cfg.motion.sample_steps = cfg.motion.sample_steps.div_ceil(5).max(5);
    }
}

/// Resolve the partial-refinement depth and reject values deeper than the
/// sampling chain.
fn resolve_n_rv(arg: Option<usize>, cfg: &PipelineConfig) -> CliResult<usize> {
    let n_rv = arg.unwrap_or(cfg.motion.n_rv);
    if n_rv > cfg.motion.sample_steps {
        return Err(usage(format!(
            "--n-rv {n_rv} exceeds the {}-step sampling chain",
            cfg.motion.sample_steps
        )));
    }
    Ok(n_rv)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| hoi_forge_core::Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| hoi_forge_core::Error::io(path, e))?;
    Ok(())
}

/// Top-level record for a generated corpus: the configuration it was built
/// under and every episode that was written. Produced by gen-corpus and
/// consumed by split and the configuration guards.
#[derive(Serialize, Deserialize)]
struct CorpusListing {
    config_hash: String,
    master_seed: u64,
    /// (episode id, directory relative to the corpus root, action).
    entries: Vec<(String, String, Action)>,
}

fn listing_path(corpus: &Path) -> PathBuf {
    corpus.join("episodes.json")
}

fn read_listing(corpus: &Path) -> CliResult<CorpusListing> {
    let path = listing_path(corpus);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| hoi_forge_core::Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Refuse to mix a corpus with models or metrics from another configuration.
fn check_corpus_config(corpus: &Path, cfg: &PipelineConfig, force: bool) -> CliResult<()> {
    if force {
        return Ok(());
    }
    let listing = read_listing(corpus).map_err(|_| {
        Failure::Runtime(anyhow::anyhow!(
            "{} has no readable episode listing; was it produced by gen-corpus? \
             (--force skips this check)",
            corpus.display()
        ))
    })?;
    let want = cfg.content_hash()?;
    if listing.config_hash != want {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "corpus {} was generated under configuration {} but the current \
             configuration hashes to {want}; pass the matching --config or --force",
            corpus.display(),
            listing.config_hash
        )));
    }
    Ok(())
}

fn load_split_index(corpus: &Path) -> CliResult<DatasetIndex> {
    let path = corpus.join("index.json");
    if !path.exists() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{} not found; run the split command first",
            path.display()
        )));
    }
    Ok(corpus::load_index(&path)?)
}

fn parse_split(name: &str) -> Split {
    if name == "train" {
        Split::Train
    } else {
        Split::Test
    }
}

fn load_episodes(
    corpus: &Path,
    index: &DatasetIndex,
    split: Split,
    limit: Option<usize>,
) -> CliResult<Vec<Episode>> {
    let entries = index.split(split);
    let take = limit.unwrap_or(entries.len()).min(entries.len());
    let mut eps = Vec::with_capacity(take);
    for entry in entries.into_iter().take(take) {
        eps.push(corpus::read_episode(&corpus.join(&entry.path))?);
    }
    if eps.is_empty() {
        return Err(hoi_forge_core::Error::EmptyDataset.into());
    }
    Ok(eps)
}

/// Initialize a parameter table of the right shape for `kind`, then fill it
/// from the checkpoint, insisting on a matching configuration hash unless
/// `force` is set.
fn load_model_params(
    cfg: &PipelineConfig,
    kind: ModelKind,
    path: &Path,
    force: bool,
) -> CliResult<(ParamStore<TrainScalar>, CheckpointRef)> {
    let mut ps: ParamStore<TrainScalar> = match kind {
        ModelKind::Planner => VideoPlanner::new(cfg)?.init_params(0),
        ModelKind::Motion => MotionRefiner::new(cfg)?.init_params(0),
        ModelKind::PoseCtrl => PoseAdapter::new(cfg)?.init_params(0),
    };
    let hash = cfg.content_hash()?;
    let expected = if force { None } else { Some(hash.as_str()) };
    checkpoint::load_into(path, kind, expected, &mut ps)?;
    let reference = CheckpointRef {
        path: path.display().to_string(),
        sha256: checkpoint::file_sha256(path)?,
    };
    Ok((ps, reference))
}

struct LoadedModels {
    cfg: PipelineConfig,
    planner_ps: ParamStore<TrainScalar>,
    mdm_ps: ParamStore<TrainScalar>,
    posectrl_ps: ParamStore<TrainScalar>,
    refs: BTreeMap<String, CheckpointRef>,
}

impl LoadedModels {
    fn models(&self) -> PipelineModels<'_, TrainScalar> {
        PipelineModels {
            cfg: &self.cfg,
            planner_ps: &self.planner_ps,
            mdm_ps: &self.mdm_ps,
            adapter_ps: &self.posectrl_ps,
        }
    }
}

fn default_ckpt(arg: Option<PathBuf>, home: &Path, name: &str) -> PathBuf {
    arg.unwrap_or_else(|| home.join("ckpt").join(name))
}

fn load_all_models(
    cfg: PipelineConfig,
    planner: &Path,
    mdm: &Path,
    posectrl: &Path,
    force: bool,
) -> CliResult<LoadedModels> {
    let (planner_ps, planner_ref) = load_model_params(&cfg, ModelKind::Planner, planner, force)?;
    let (mdm_ps, mdm_ref) = load_model_params(&cfg, ModelKind::Motion, mdm, force)?;
    let (posectrl_ps, posectrl_ref) =
        load_model_params(&cfg, ModelKind::PoseCtrl, posectrl, force)?;
    let mut refs = BTreeMap::new();
    refs.insert("planner".to_string(), planner_ref);
    refs.insert("motion".to_string(), mdm_ref);
    refs.insert("pose_ctrl".to_string(), posectrl_ref);
    Ok(LoadedModels { cfg, planner_ps, mdm_ps, posectrl_ps, refs })
}

fn frames_to_bytes(frames: &ndarray::Array4<u8>) -> &[u8] {
    frames.as_slice().expect("frames are contiguous")
}

/// Sidecar metadata written next to every generated video or pose track.
#[derive(Serialize)]
struct GenInfo {
    config_hash: String,
    seed: u64,
    steps: usize,
    frames: usize,
    height: usize,
    width: usize,
}

fn write_video(
    dir: &Path,
    frames: &ndarray::Array4<u8>,
    info: &GenInfo,
) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| hoi_forge_core::Error::io(dir, e))?;
    let path = dir.join("frames.bin");
    std::fs::write(&path, frames_to_bytes(frames))
        .map_err(|e| hoi_forge_core::Error::io(&path, e))?;
    write_json(&dir.join("gen.json"), info)
}

// ---- evaluation driver shared by evaluate and sweep-nrv ----

struct EvalOutcome {
    rows: Vec<EpisodeScores>,
    aggregate: Aggregate,
    fvd_coarse: Option<f64>,
    fvd_fine: Option<f64>,
}

fn score_split(
    loaded: &LoadedModels,
    episodes: &[Episode],
    n_rv: usize,
    seed: u64,
) -> CliResult<EvalOutcome> {
    let models = loaded.models();
    let mut rows = Vec::with_capacity(episodes.len());
    let mut coarse_set = Vec::with_capacity(episodes.len());
    let mut fine_set = Vec::with_capacity(episodes.len());
    let mut gt_set = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let master = rng::derive(seed, &ep.episode_id);
        let (row, art) = evaluate::score_episode(&models, ep, n_rv, master)?;
        eprintln!(
            "  [{}/{}] {} gpv {} -> {}",
            i + 1,
            episodes.len(),
            ep.episode_id,
            row.gpv_coarse.map_or("-".into(), |v| format!("{v:.3}")),
            row.gpv_fine.map_or("-".into(), |v| format!("{v:.3}")),
        );
        coarse_set.push(art.coarse.frames);
        fine_set.push(art.fine.frames);
        gt_set.push(ep.frames.clone());
        rows.push(row);
    }
    let aggregate = evaluate::aggregate(&rows);
    let fvd_coarse = metrics::feature_video_distance(&coarse_set, &gt_set).ok();
    let fvd_fine = metrics::feature_video_distance(&fine_set, &gt_set).ok();
    Ok(EvalOutcome { rows, aggregate, fvd_coarse, fvd_fine })
}

/// One sweep row: the aggregate scores at a single refinement depth.
#[derive(Serialize)]
struct SweepRow {
    n_rv: usize,
    aggregate: Aggregate,
    fvd_fine: Option<f64>,
}

/// Trend fields over the swept depths, in the order given on the command
/// line. "First" is the shallowest run (typically no refinement at all).
#[derive(Serialize)]
struct SweepTrend {
    values: Vec<usize>,
    mean_gpv_fine: Vec<Option<f64>>,
    mean_wrist_endpoint_err: Vec<f64>,
    /// Second depth scores at-or-better grasp validity than the first.
    refinement_helps_gpv: Option<bool>,
    /// Deepest depth drifts at least as far from the coarse endpoint as the
    /// second — over-refinement trades spatial grounding for pose quality.
    deep_refinement_increases_drift: Option<bool>,
}

#[derive(Serialize)]
struct SweepReport {
    config_hash: String,
    master_seed: u64,
    split: String,
    n_episodes: usize,
    rows: Vec<SweepRow>,
    trend: SweepTrend,
}

fn sweep_trend(values: &[usize], rows: &[SweepRow]) -> SweepTrend {
    let gpv: Vec<Option<f64>> = rows.iter().map(|r| r.aggregate.mean_gpv_fine).collect();
    let wrist: Vec<f64> = rows
        .iter()
        .map(|r| r.aggregate.mean_wrist_endpoint_err)
        .collect();
    let helps = (rows.len() >= 2)
        .then(|| match (gpv[1], gpv[0]) {
            (Some(b), Some(a)) => Some(b <= a),
            _ => None,
        })
        .flatten();
    let drifts = (rows.len() >= 2).then(|| wrist[rows.len() - 1] >= wrist[1]);
    SweepTrend {
        values: values.to_vec(),
        mean_gpv_fine: gpv,
        mean_wrist_endpoint_err: wrist,
        refinement_helps_gpv: helps,
        deep_refinement_increases_drift: drifts,
    }
}

// ---- command bodies ----

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::GenCorpus { n, out, seed, config, jobs } => {
            let cfg = load_config(&config)?;
            if jobs == 0 {
                return Err(usage("--jobs must be at least 1"));
            }
            let entries = corpus::generate_corpus(&cfg.corpus, n, seed, &out, jobs)?;
            let listing = CorpusListing {
                config_hash: cfg.content_hash()?,
                master_seed: seed,
                entries,
            };
            write_json(&listing_path(&out), &listing)?;
            println!(
                "wrote {} episodes under {}",
                listing.entries.len(),
                out.display()
            );
            Ok(())
        }

        Cmd::Split { dir, fraction, seed, config } => {
            let cfg = load_config(&config)?;
            check_corpus_config(&dir, &cfg, false)?;
            let listing = read_listing(&dir)?;
            let fraction = fraction.unwrap_or(cfg.eval.test_fraction);
            let index = corpus::build_split(listing.entries, fraction, seed, cfg.corpus)?;
            let path = dir.join("index.json");
            corpus::save_index(&index, &path)?;
            let n_test = index.split(Split::Test).len();
            println!(
                "wrote {} ({} train / {n_test} test)",
                path.display(),
                index.episodes.len() - n_test
            );
            Ok(())
        }

        Cmd::Stats { dir, out } => {
            let items = collect_stats_items(&dir)?;
            let report = metrics::stats_report(&items)?;
            let out = out.unwrap_or_else(|| dir.join("stats.json"));
            write_json(&out, &report)?;
            metrics::save_report_plots(&report, &dir.join("plots"))?;
            println!("wrote {}", out.display());
            for (i, (p, r)) in report
                .orientation_bin_proportion
                .iter()
                .zip(report.reference_bin_percent.iter())
                .enumerate()
            {
                println!(
                    "  orientation bin {i}: {:.1}% (reference {r:.1}%)",
                    100.0 * p
                );
            }
            Ok(())
        }

        Cmd::TrainPlanner { corpus: corpus_dir, out, seed, config, home } => {
            let cfg = load_config(&config)?;
            check_corpus_config(&corpus_dir, &cfg, false)?;
            let out = default_ckpt(out, &home_dir(&home), "planner.ckpt");
            ensure_parent(&out)?;
            let index = load_split_index(&corpus_dir)?;
            let log = out.with_extension("loss.csv");
            let (ps, records) = hoi_forge_core::planner::train_planner::<TrainScalar>(
                &index,
                &corpus_dir,
                &cfg,
                seed,
                Some(&log),
            )?;
            checkpoint::save(
                &out,
                ModelKind::Planner,
                &cfg.content_hash()?,
                cfg.schedule,
                cfg.planner.train_steps,
                &ps,
            )?;
            report_training(&out, &records);
            Ok(())
        }

        Cmd::TrainMdm { corpus: corpus_dir, out, seed, config, home } => {
            let cfg = load_config(&config)?;
            check_corpus_config(&corpus_dir, &cfg, false)?;
            let out = default_ckpt(out, &home_dir(&home), "motion.ckpt");
            ensure_parent(&out)?;
            let index = load_split_index(&corpus_dir)?;
            let log = out.with_extension("loss.csv");
            let (ps, records) =
                motion::train_mdm::<TrainScalar>(&index, &corpus_dir, &cfg, seed, Some(&log))?;
            checkpoint::save(
                &out,
                ModelKind::Motion,
                &cfg.content_hash()?,
                cfg.schedule,
                cfg.motion.train_steps,
                &ps,
            )?;
            report_training(&out, &records);
            Ok(())
        }

        Cmd::TrainPosectrl { corpus: corpus_dir, planner, out, seed, config, home } => {
            let cfg = load_config(&config)?;
            check_corpus_config(&corpus_dir, &cfg, false)?;
            let out = default_ckpt(out, &home_dir(&home), "posectrl.ckpt");
            ensure_parent(&out)?;
            let index = load_split_index(&corpus_dir)?;
            // The adapter is only meaningful against the exact planner it was
            // trained to feed, so the hash check here has no override.
            let (planner_ps, _) = load_model_params(&cfg, ModelKind::Planner, &planner, false)?;
            let log = out.with_extension("loss.csv");
            let (ps, records) = posectrl::train_posectrl::<TrainScalar>(
                &index,
                &corpus_dir,
                &cfg,
                &planner_ps,
                seed,
                Some(&log),
            )?;
            checkpoint::save(
                &out,
                ModelKind::PoseCtrl,
                &cfg.content_hash()?,
                cfg.schedule,
                cfg.posectrl.train_steps,
                &ps,
            )?;
            report_training(&out, &records);
            Ok(())
        }

        Cmd::InferCoarse { episode, planner, out, seed, config, home, force, fast } => {
            let mut cfg = load_config(&config)?;
            apply_fast(&mut cfg, fast);
            let out = out.unwrap_or_else(|| {
                home_dir(&home).join("gen").join(format!("coarse-seed{seed}"))
            });
            let (planner_ps, _) = load_model_params(&cfg, ModelKind::Planner, &planner, force)?;
            let model = VideoPlanner::new(&cfg)?;
            let sched = DiffusionSchedule::<TrainScalar>::new(cfg.schedule)?;
            let ep = corpus::read_episode(&episode)?;
            let cond = ConditioningBundle::for_episode(&ep);
            let video = model.generate_coarse(
                &planner_ps,
                &sched,
                &cond,
                cfg.planner.sample_steps,
                cfg.planner.w_text,
                cfg.planner.w_img,
                seed,
            )?;
            let (l, h, w, _) = video.frames.dim();
            write_video(
                &out,
                &video.frames,
                &GenInfo {
                    config_hash: cfg.content_hash()?,
                    seed,
                    steps: video.steps,
                    frames: l,
                    height: h,
                    width: w,
                },
            )?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Cmd::Refine { poses, episode, mdm, n_rv, out, seed, config, home, force, fast } => {
            let mut cfg = load_config(&config)?;
            apply_fast(&mut cfg, fast);
            let n_rv = resolve_n_rv(n_rv, &cfg)?;
            let out = out.unwrap_or_else(|| {
                home_dir(&home).join("gen").join(format!("refined-seed{seed}"))
            });
            let (mdm_ps, _) = load_model_params(&cfg, ModelKind::Motion, &mdm, force)?;
            let refiner = MotionRefiner::new(&cfg)?;
            let sched = DiffusionSchedule::<TrainScalar>::new(cfg.schedule)?;
            let ep = corpus::read_episode(&episode)?;
            let cond = ConditioningBundle::for_episode(&ep);
            let p_in = corpus::read_pose_files(&poses)?;
            let l_in = p_in.coords.dim().0;
            let p_c = motion::resample_pose(&p_in, refiner.l_p)?;
            let rcfg = RefinementConfig { n_rv, sample_steps: cfg.motion.sample_steps };
            let refined = refiner.refine_pose(&p_c, &cond, &mdm_ps, &sched, rcfg, seed)?;
            let p_out = motion::resample_pose(&refined, l_in)?;
            std::fs::create_dir_all(&out).map_err(|e| hoi_forge_core::Error::io(&out, e))?;
            corpus::write_pose_files(&p_out, &out)?;
            write_json(
                &out.join("gen.json"),
                &serde_json::json!({
                    "config_hash": cfg.content_hash()?,
                    "seed": seed,
                    "n_rv": n_rv,
                    "frames": l_in,
                }),
            )?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Cmd::InferFine { episode, poses, planner, posectrl, out, seed, config, home, force, fast } => {
            let mut cfg = load_config(&config)?;
            apply_fast(&mut cfg, fast);
            let out = out.unwrap_or_else(|| {
                home_dir(&home).join("gen").join(format!("fine-seed{seed}"))
            });
            let (planner_ps, _) = load_model_params(&cfg, ModelKind::Planner, &planner, force)?;
            let (adapter_ps, _) = load_model_params(&cfg, ModelKind::PoseCtrl, &posectrl, force)?;
            let model = VideoPlanner::new(&cfg)?;
            let adapter = PoseAdapter::new(&cfg)?;
            let sched = DiffusionSchedule::<TrainScalar>::new(cfg.schedule)?;
            let ep = corpus::read_episode(&episode)?;
            let cond = ConditioningBundle::for_episode(&ep);
            let p_in = corpus::read_pose_files(&poses)?;
            let p = motion::resample_pose(&p_in, cfg.corpus.frames)?;
            let imgs = posectrl::render_pose_images::<TrainScalar>(
                &p,
                DrawSpec::from_config(&cfg),
                cfg.corpus.image_size,
                cfg.corpus.image_size,
            )?;
            let video = posectrl::generate_fine(
                &model,
                &planner_ps,
                &adapter,
                &adapter_ps,
                &sched,
                &cond,
                &imgs,
                cfg.planner.sample_steps,
                cfg.planner.w_text,
                cfg.planner.w_img,
                seed,
            )?;
            let (l, h, w, _) = video.frames.dim();
            write_video(
                &out,
                &video.frames,
                &GenInfo {
                    config_hash: cfg.content_hash()?,
                    seed,
                    steps: video.steps,
                    frames: l,
                    height: h,
                    width: w,
                },
            )?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Cmd::Pipeline {
            episode, planner, mdm, posectrl, n_rv, out, seed, config, home, force, fast,
        } => {
            let mut cfg = load_config(&config)?;
            apply_fast(&mut cfg, fast);
            let n_rv = resolve_n_rv(n_rv, &cfg)?;
            let home = home_dir(&home);
            let out = out.unwrap_or_else(|| {
                home.join("runs").join(format!("run-seed{seed}-nrv{n_rv}"))
            });
            let loaded = load_all_models(
                cfg,
                &default_ckpt(planner, &home, "planner.ckpt"),
                &default_ckpt(mdm, &home, "motion.ckpt"),
                &default_ckpt(posectrl, &home, "posectrl.ckpt"),
                force,
            )?;
            let ep = corpus::read_episode(&episode)?;
            let cond = ConditioningBundle::for_episode(&ep);
            let art = posectrl::run_pipeline(
                &loaded.models(),
                &cond,
                n_rv,
                seed,
                loaded.refs.clone(),
                Some(&out),
            )?;
            println!("wrote {}", out.join("run.json").display());
            for (name, value) in &art.manifest.metrics {
                println!("  {name}: {value:.4}");
            }
            Ok(())
        }

        Cmd::Evaluate {
            corpus: corpus_dir, planner, mdm, posectrl, n_rv, split, limit, seed, out,
            config, home, force, fast, jobs,
        } => {
            let mut cfg = load_config(&config)?;
            apply_fast(&mut cfg, fast);
            if jobs == 0 {
                return Err(usage("--jobs must be at least 1"));
            }
            let n_rv = resolve_n_rv(n_rv, &cfg)?;
            check_corpus_config(&corpus_dir, &cfg, force)?;
            let home = home_dir(&home);
            let out = out.unwrap_or_else(|| {
                home.join("reports").join(format!("eval-seed{seed}.json"))
            });
            let loaded = load_all_models(
                cfg,
                &default_ckpt(planner, &home, "planner.ckpt"),
                &default_ckpt(mdm, &home, "motion.ckpt"),
                &default_ckpt(posectrl, &home, "posectrl.ckpt"),
                force,
            )?;
            let index = load_split_index(&corpus_dir)?;
            let episodes = load_episodes(&corpus_dir, &index, parse_split(&split), limit)?;
            let outcome = score_split(&loaded, &episodes, n_rv, seed)?;
            let report = EvalReport {
                config_hash: loaded.cfg.content_hash()?,
                master_seed: seed,
                n_rv,
                split,
                rows: outcome.rows,
                aggregate: outcome.aggregate,
                fvd_coarse: outcome.fvd_coarse,
                fvd_fine: outcome.fvd_fine,
            };
            write_json(&out, &report)?;
            println!("wrote {}", out.display());
            print_aggregate(&report.aggregate);
            Ok(())
        }

        Cmd::SweepNrv {
            values, corpus: corpus_dir, planner, mdm, posectrl, split, limit, seed, out,
            config, home, force, fast,
        } => {
            let parsed: Vec<usize> = values
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| usage(format!("--values entry '{s}' is not a count")))
                })
                .collect::<Result<_, _>>()?;
            if parsed.is_empty() {
                return Err(usage("--values needs at least one refinement depth"));
            }
            let mut cfg = load_config(&config)?;
            apply_fast(&mut cfg, fast);
            for &v in &parsed {
                if v > cfg.motion.sample_steps {
                    return Err(usage(format!(
                        "--values entry {v} exceeds the {}-step sampling chain",
                        cfg.motion.sample_steps
                    )));
                }
            }
            check_corpus_config(&corpus_dir, &cfg, force)?;
            let home = home_dir(&home);
            let out = out.unwrap_or_else(|| {
                home.join("reports").join(format!("sweep-seed{seed}.json"))
            });
            let loaded = load_all_models(
                cfg,
                &default_ckpt(planner, &home, "planner.ckpt"),
                &default_ckpt(mdm, &home, "motion.ckpt"),
                &default_ckpt(posectrl, &home, "posectrl.ckpt"),
                force,
            )?;
            let index = load_split_index(&corpus_dir)?;
            let episodes = load_episodes(&corpus_dir, &index, parse_split(&split), limit)?;
            let mut rows = Vec::with_capacity(parsed.len());
            for &n_rv in &parsed {
                eprintln!("depth {n_rv}:");
                let outcome = score_split(&loaded, &episodes, n_rv, seed)?;
                rows.push(SweepRow {
                    n_rv,
                    aggregate: outcome.aggregate,
                    fvd_fine: outcome.fvd_fine,
                });
            }
            let report = SweepReport {
                config_hash: loaded.cfg.content_hash()?,
                master_seed: seed,
                split,
                n_episodes: episodes.len(),
                trend: sweep_trend(&parsed, &rows),
                rows,
            };
            write_json(&out, &report)?;
            println!("wrote {}", out.display());
            for row in &report.rows {
                println!(
                    "  n_rv {:>3}: gpv_fine {} wrist_drift {:.4}",
                    row.n_rv,
                    row.aggregate
                        .mean_gpv_fine
                        .map_or("-".into(), |v| format!("{v:.4}")),
                    row.aggregate.mean_wrist_endpoint_err,
                );
            }
            Ok(())
        }
    }
}

/// Stats items for every episode listed in the split index, or in the
/// generation listing when no split has been assigned yet.
fn collect_stats_items(dir: &Path) -> CliResult<Vec<StatsItem>> {
    let paths: Vec<PathBuf> = if dir.join("index.json").exists() {
        corpus::load_index(&dir.join("index.json"))?
            .episodes
            .iter()
            .map(|e| dir.join(&e.path))
            .collect()
    } else {
        read_listing(dir)?
            .entries
            .iter()
            .map(|(_, rel, _)| dir.join(rel))
            .collect()
    };
    let mut items = Vec::with_capacity(paths.len());
    for p in &paths {
        let ep = corpus::read_episode(p)?;
        items.push(StatsItem { poses: ep.poses, grasp: ep.grasp_phase });
    }
    Ok(items)
}

fn report_training(out: &Path, records: &[hoi_forge_core::planner::TrainRecord]) {
    let last = hoi_forge_core::planner::smoothed_losses(records, 20)
        .last()
        .copied()
        .unwrap_or(f64::NAN);
    println!("wrote {} (smoothed final loss {last:.4})", out.display());
}

fn print_aggregate(a: &Aggregate) {
    println!(
        "  episodes {} | gpv coarse {} -> fine {} (improved {}/{})",
        a.n_episodes,
        a.mean_gpv_coarse.map_or("-".into(), |v| format!("{v:.4}")),
        a.mean_gpv_fine.map_or("-".into(), |v| format!("{v:.4}")),
        a.gpv_improved,
        a.gpv_pairs,
    );
    println!(
        "  gtce {} | hmda {} | grounding {:.2} | adherence {} | wrist drift {:.4}",
        a.mean_gtce.map_or("-".into(), |v| format!("{v:.4}")),
        a.mean_hmda.map_or("-".into(), |v| format!("{v:.4}")),
        a.grounding_rate,
        a.mean_adherence.map_or("-".into(), |v| format!("{v:.4}")),
        a.mean_wrist_endpoint_err,
    );
}

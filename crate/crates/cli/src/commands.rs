use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use whispersv::audio::{self, AudioClip, MixRecord};
use whispersv::corpus::{self, Corpus, SplitSpec, SynthConfig, TrialType};
use whispersv::evaluation::{self, EvalReport, RunResult};
use whispersv::postnet::{self, PostNet, PostNetConfig};
use whispersv::trainer::{self, TrainConfig, WeightDecayMode};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.emb";
pub const WEIGHTS_FILE: &str = "postnet.bin";
pub const CONFIG_FILE: &str = "config.json";
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "whispersv", version, about = "Whispered-speech speaker verification: embedding post-net training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-style embedding corpus.
    GenSynth(GenSynthArgs),
    /// Validate a manifest + embedding file pair and print a summary.
    Import(ImportArgs),
    /// Train a post-net on the training speakers of a corpus.
    Train(TrainArgs),
    /// Score trial lists and report EER/AUC over reseeded runs.
    Evaluate(EvaluateArgs),
    /// Mix noise into speech WAV files at target SNRs.
    MixNoise(MixNoiseArgs),
    /// Finite-difference check of the full training-loss gradient.
    Gradcheck(GradcheckArgs),
    /// Write ROC curves (CSV) and the scored trial lists (TSV).
    RocExport(RocExportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusArgs {
    /// Utterance manifest (TSV).
    #[arg(long)]
    pub manifest: PathBuf,
    /// EMB1 embedding file aligned with the manifest rows.
    #[arg(long)]
    pub embeddings: PathBuf,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus, CliError> {
        require_file(&self.manifest)?;
        require_file(&self.embeddings)?;
        Ok(corpus::load_corpus(&self.manifest, &self.embeddings)?)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub speakers: usize,
    #[arg(long, default_value_t = 40)]
    pub utts: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.85)]
    pub whisper_gain: f64,
    #[arg(long, default_value_t = 3.0)]
    pub whisper_offset: f64,
    #[arg(long, default_value_t = 4)]
    pub rotation_planes: usize,
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
    pub rotation_angle: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ImportArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for a JSON summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Post-net learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Head learning rate; defaults to --lr.
    #[arg(long)]
    pub lr_head: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub wd: f64,
    /// Apply weight decay directly to parameters instead of through the gradient.
    #[arg(long)]
    pub decoupled_wd: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    #[arg(long)]
    pub gradual_unfreeze: bool,
    #[arg(long, default_value_t = 5)]
    pub unfreeze_period: usize,
}

impl HyperArgs {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr_postnet: self.lr,
            lr_head: self.lr_head.unwrap_or(self.lr),
            weight_decay: self.wd,
            decay_mode: if self.decoupled_wd {
                WeightDecayMode::Decoupled
            } else {
                WeightDecayMode::Coupled
            },
            gamma: self.gamma,
            margin: self.margin,
            dropout: self.dropout,
            gradual_unfreeze: self.gradual_unfreeze,
            unfreeze_period: self.unfreeze_period,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("model").required(true).args(["weights", "baseline", "retrain"])))]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Trained post-net weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Evaluate the identity post-net (raw embeddings).
    #[arg(long)]
    pub baseline: bool,
    /// Train a fresh post-net for every run (seed + run).
    #[arg(long)]
    pub retrain: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// `all` or a comma-separated list of norm_whsp, norm_norm, whsp_whsp, all_all.
    #[arg(long, default_value = "all")]
    pub trial: String,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MixNoiseArgs {
    /// Directory of speech WAV files.
    #[arg(long)]
    pub speech: PathBuf,
    /// Directory of noise WAV files.
    #[arg(long)]
    pub noise: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![5.0, 15.0])]
    pub snr: Vec<f64>,
    /// Reference speech directory: its mean PSNR at each SNR becomes the
    /// target PSNR for the speech set.
    #[arg(long)]
    pub psnr_reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub gamma: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("model").required(true).args(["weights", "baseline"])))]
pub struct RocExportArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value = "all")]
    pub trial: String,
    /// Which reseeded trial construction to export.
    #[arg(long, default_value_t = 0)]
    pub run: usize,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(&a),
        Command::Import(a) => import(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::MixNoise(a) => mix_noise(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::RocExport(a) => roc_export(&a),
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file not found: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input directory not found: {}", path.display())))
    }
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_config(dir: &Path, command: &str, args: &impl Serialize, resolved: serde_json::Value) -> Result<(), CliError> {
    write_json(
        &dir.join(CONFIG_FILE),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "args": args,
            "resolved": resolved,
        }),
    )
}

fn parse_trial_types(spec: &str) -> Result<Vec<TrialType>, CliError> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(TrialType::ALL.to_vec());
    }
    let mut types = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let t: TrialType = part.parse().map_err(CliError::Usage)?;
        if !types.contains(&t) {
            types.push(t);
        }
    }
    if types.is_empty() {
        return Err(CliError::Usage("--trial needs at least one trial type".into()));
    }
    Ok(types)
}

fn check_fraction(f: f64) -> Result<(), CliError> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--train-frac must lie in (0, 1), got {f}")))
    }
}

fn split(corpus: &Corpus, train_frac: f64, seed: u64) -> Result<(Corpus, Corpus), CliError> {
    check_fraction(train_frac)?;
    Ok(corpus::split_speakers(corpus, SplitSpec { train_fraction: train_frac, seed })?)
}

fn gen_synth(a: &GenSynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        num_speakers: a.speakers,
        utts_per_speaker_per_style: a.utts,
        dim: a.dim,
        noise_sigma: a.noise_sigma,
        whisper_gain: a.whisper_gain,
        whisper_offset: a.whisper_offset,
        rotation_planes: a.rotation_planes,
        rotation_angle: a.rotation_angle,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let c = corpus::generate_synthetic(&cfg)?;
    create_out(&a.out)?;
    corpus::save_corpus(&c, a.out.join(MANIFEST_FILE), a.out.join(EMBEDDINGS_FILE))?;
    write_config(&a.out, "gen-synth", a, json!({ "synth": cfg }))?;
    println!(
        "wrote {} utterances ({} speakers, dim {}) to {}",
        c.len(),
        c.num_speakers(),
        c.dim(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct CorpusSummary {
    utterances: usize,
    speakers: usize,
    dim: usize,
    normal: usize,
    whisper: usize,
    pairs: usize,
    train_speakers: Vec<String>,
    test_speakers: Vec<String>,
}

fn import(a: &ImportArgs) -> Result<(), CliError> {
    let c = a.corpus.load()?;
    let (tr, te) = split(&c, a.train_frac, a.seed)?;
    let normal = c.utterances().iter().filter(|u| u.style == corpus::Style::Normal).count();
    let summary = CorpusSummary {
        utterances: c.len(),
        speakers: c.num_speakers(),
        dim: c.dim(),
        normal,
        whisper: c.len() - normal,
        pairs: c.num_pairs(),
        train_speakers: tr.speakers().to_vec(),
        test_speakers: te.speakers().to_vec(),
    };
    println!(
        "{} utterances, {} speakers, dim {}, {} normal / {} whisper, {} pairs; split {} train / {} test speakers",
        summary.utterances,
        summary.speakers,
        summary.dim,
        summary.normal,
        summary.whisper,
        summary.pairs,
        summary.train_speakers.len(),
        summary.test_speakers.len()
    );
    if let Some(out) = &a.out {
        create_out(out)?;
        write_json(&out.join("summary.json"), &summary)?;
        write_config(out, "import", a, json!({}))?;
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let c = a.corpus.load()?;
    let (tr, te) = split(&c, a.train_frac, a.seed)?;
    let cfg = a.hyper.train_config(a.seed);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = trainer::train::<f64>(&tr, &cfg)?;
    create_out(&a.out)?;
    postnet::save_weights(&out.net, a.out.join(WEIGHTS_FILE))?;
    fs::write(a.out.join("history.csv"), out.history.to_csv())?;
    write_json(
        &a.out.join("split.json"),
        &json!({ "train": tr.speakers(), "test": te.speakers() }),
    )?;
    write_config(&a.out, "train", a, json!({ "train": cfg, "postnet": out.net.config() }))?;
    let last = out.history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} speakers: l_trip {:.6}, l_ce {:.4}, l {:.6}; weights in {}",
        cfg.epochs,
        tr.num_speakers(),
        last.l_trip,
        last.l_ce,
        last.l_combined,
        a.out.join(WEIGHTS_FILE).display()
    );
    Ok(())
}

fn load_or_identity(weights: Option<&Path>, dim: usize) -> Result<PostNet<f64>, CliError> {
    match weights {
        Some(path) => {
            require_file(path)?;
            let net = postnet::load_weights::<f64>(path)?;
            if net.embed_dim() != dim {
                return Err(CliError::Runtime(format!(
                    "weights expect dim {} but the corpus has dim {dim}",
                    net.embed_dim()
                )));
            }
            Ok(net)
        }
        None => Ok(PostNet::init(PostNetConfig::for_embedding(dim))?),
    }
}

fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let types = parse_trial_types(&a.trial)?;
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let c = a.corpus.load()?;
    let (tr, te) = split(&c, a.train_frac, a.seed)?;
    let (model, report) = if a.retrain {
        let mut results: Vec<RunResult> = Vec::with_capacity(a.runs);
        for run in 0..a.runs {
            let cfg = a.hyper.train_config(a.seed.wrapping_add(run as u64));
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let out = trainer::train::<f64>(&tr, &cfg)?;
            log::info!("run {run}: retrained");
            results.push(evaluation::evaluate_run(&out.net, &te, &types, a.seed, run)?);
        }
        ("retrain", evaluation::aggregate_runs(&results))
    } else {
        let net = load_or_identity(a.weights.as_deref(), c.dim())?;
        let model = if a.baseline { "baseline" } else { "weights" };
        (model, evaluation::evaluate(&net, &te, &types, a.runs, a.seed)?)
    };
    create_out(&a.out)?;
    write_report(&a.out, model, &report)?;
    let resolved = if a.retrain {
        json!({ "train": a.hyper.train_config(a.seed), "test_speakers": te.speakers() })
    } else {
        json!({ "test_speakers": te.speakers() })
    };
    write_config(&a.out, "evaluate", a, resolved)?;
    print!("{}", report.to_table());
    Ok(())
}

fn write_report(dir: &Path, model: &str, report: &EvalReport) -> Result<(), CliError> {
    write_json(&dir.join("report.json"), &json!({ "model": model, "report": report }))
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    require_dir(dir)?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_clips(files: &[PathBuf]) -> Result<Vec<AudioClip>, CliError> {
    files
        .iter()
        .map(|f| audio::ingest(f).map_err(|e| CliError::Runtime(format!("{}: {e}", f.display()))))
        .collect()
}

fn mix_noise(a: &MixNoiseArgs) -> Result<(), CliError> {
    if a.snr.is_empty() || a.snr.iter().any(|s| !s.is_finite()) {
        return Err(CliError::Usage("--snr needs finite values".into()));
    }
    let speech_files = list_wavs(&a.speech)?;
    let noise_files = list_wavs(&a.noise)?;
    let reference_files = a.psnr_reference.as_deref().map(list_wavs).transpose()?;
    let speech = load_clips(&speech_files)?;
    let noise = load_clips(&noise_files)?;
    let reference = reference_files.as_deref().map(load_clips).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    create_out(&a.out)?;
    let mut records = Vec::new();
    let mut targets = Vec::new();
    for &snr in &a.snr {
        let mixes: Vec<(usize, f64, audio::MixResult)> = match &reference {
            Some(refs) => {
                let mut psnr_sum = 0.0;
                for clip in refs {
                    let k = rng.random_range(0..noise.len());
                    psnr_sum += audio::mix_at_snr(clip, &noise[k], snr, &mut rng)?.achieved_psnr_db;
                }
                let target = psnr_sum / refs.len() as f64;
                targets.push(json!({ "snr_db": snr, "reference_psnr_db": target }));
                audio::match_psnr(target, &speech, &noise, &mut rng)?
                    .into_iter()
                    .map(|m| (m.noise_index, m.snr_db, m.result))
                    .collect()
            }
            None => speech
                .iter()
                .map(|clip| {
                    let k = rng.random_range(0..noise.len());
                    audio::mix_at_snr(clip, &noise[k], snr, &mut rng).map(|r| (k, snr, r))
                })
                .collect::<Result<_, _>>()?,
        };
        for (file, (k, assigned, r)) in speech_files.iter().zip(&mixes) {
            let utt = stem(file);
            audio::write_wav(&r.mixed, a.out.join(format!("{utt}_snr{snr}.wav")))?;
            records.push(MixRecord {
                utt_id: utt,
                noise_id: stem(&noise_files[*k]),
                snr_db: *assigned,
                achieved_snr_db: r.achieved_snr_db,
                achieved_psnr_db: r.achieved_psnr_db,
                clip_count: r.clip_count,
            });
        }
        let n = mixes.len() as f64;
        println!(
            "snr {snr} dB: {} clips, mean achieved PSNR {:.2} dB",
            mixes.len(),
            mixes.iter().map(|m| m.2.achieved_psnr_db).sum::<f64>() / n
        );
    }
    fs::write(a.out.join("mix_manifest.csv"), audio::mixing_manifest_csv(&records))?;
    write_config(&a.out, "mix-noise", a, json!({ "psnr_targets": targets }))?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut worst = 0.0f64;
    let mut params = 0;
    for seed in a.seed..a.seed + a.seeds {
        let r = trainer::pipeline_gradient_check(seed, a.dim, a.gamma)?;
        worst = worst.max(r.max_relative_error);
        params = r.parameters;
    }
    println!(
        "max relative error: {worst:e} ({params} parameters, {} seed(s) from {})",
        a.seeds, a.seed
    );
    if let Some(out) = &a.out {
        create_out(out)?;
        write_json(
            &out.join("gradcheck.json"),
            &json!({ "max_relative_error": worst, "parameters": params, "tolerance": GRADCHECK_TOLERANCE }),
        )?;
        write_config(out, "gradcheck", a, json!({}))?;
    }
    if worst > GRADCHECK_TOLERANCE {
        return Err(CliError::GradCheck(worst, GRADCHECK_TOLERANCE));
    }
    Ok(())
}

fn roc_export(a: &RocExportArgs) -> Result<(), CliError> {
    let types = parse_trial_types(&a.trial)?;
    let c = a.corpus.load()?;
    let (_, te) = split(&c, a.train_frac, a.seed)?;
    let net = load_or_identity(a.weights.as_deref(), c.dim())?;
    create_out(&a.out)?;
    for t in types {
        let list = corpus::build_trials(&te, t, evaluation::trial_seed(a.seed, a.run, t));
        let scored = evaluation::score_trials(&net, &te, &list.trials)?;
        let roc = evaluation::compute_roc(&scored)?;
        let eer = evaluation::compute_eer(&scored)?;
        fs::write(a.out.join(format!("roc_{}.csv", t.as_str())), roc.to_csv())?;
        fs::write(a.out.join(format!("trials_{}.tsv", t.as_str())), corpus::trials_to_tsv(&te, &list.trials))?;
        println!(
            "{}: {} points, EER {:.2}%, AUC {:.2}%",
            t.as_str(),
            roc.points.len(),
            100.0 * eer.eer,
            100.0 * roc.area()
        );
    }
    write_config(&a.out, "roc-export", a, json!({ "test_speakers": te.speakers() }))?;
    Ok(())
}

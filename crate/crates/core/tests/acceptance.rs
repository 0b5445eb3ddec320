//! End-to-end acceptance gate. Runs every criterion, prints one PASS/FAIL
//! line each and exits nonzero if any failed.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use whispersv::audio::{self, AudioClip};
use whispersv::corpus::{
    build_trials, generate_synthetic, split_speakers, Corpus, Label, SplitSpec, SynthConfig, TrialType,
};
use whispersv::evaluation::{
    auc_from_scores, eer_from_scores, evaluate, relative_change, score_trials, EvalReport,
};
use whispersv::objectives::{combined_loss, cosine_similarity, LossWeights, DEFAULT_GAMMA};
use whispersv::postnet::{Mode, PostNet, PostNetConfig};
use whispersv::trainer::{pipeline_gradient_check, train, TrainConfig};

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn combined_loss_anchor() -> Outcome {
    ensure(DEFAULT_GAMMA == 1e-4, || format!("default gamma {DEFAULT_GAMMA}"))?;
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let l_trip: f64 = rng.random_range(0.0..2.0);
        let l_ce: f64 = rng.random_range(0.0..50.0);
        worst = worst.max((combined_loss(l_trip, l_ce, w) - (l_trip + 1e-4 * l_ce)).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("gamma=1e-4, max deviation {worst:e} over 10000 draws"))
}

fn relative_change_anchors() -> Outcome {
    let cases = [((24.08, 2.20), 9.94), ((6.14, 0.41), 13.97), ((25.60, 2.30), 10.13)];
    for ((noisy, clean), expected) in cases {
        let got = relative_change(noisy, clean).map_err(|e| e.to_string())?;
        ensure((got - expected).abs() <= 0.01, || format!("({noisy}, {clean}) -> {got}, want {expected}"))?;
    }
    let erratum = relative_change(2.40, 0.41).map_err(|e| e.to_string())?;
    ensure((erratum - 3.15).abs() > 0.01 && (erratum - 4.85).abs() <= 0.01, || {
        format!("(2.40, 0.41) -> {erratum}")
    })?;
    Ok(format!("three anchors within 0.01; (2.40, 0.41) -> {erratum:.2}, not 3.15"))
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut retries = 0;
    for seed in 0..50 {
        let r = pipeline_gradient_check(seed, 16, DEFAULT_GAMMA).map_err(|e| e.to_string())?;
        ensure(r.max_relative_error < 1e-5, || format!("seed {seed}: {:e}", r.max_relative_error))?;
        worst = worst.max(r.max_relative_error);
        retries += r.kink_retries;
    }
    Ok(format!("50 seeds at dim 16, max relative error {worst:.2e}, {retries} kink redraws"))
}

fn identity_at_init(corpus: &Corpus) -> Outcome {
    let net = PostNet::<f64>::init(PostNetConfig::for_embedding(corpus.dim())).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for u in corpus.utterances() {
        let y = net.forward(&u.embedding, &mut Mode::Eval).map_err(|e| e.to_string())?;
        for (a, b) in y.as_slice().iter().zip(u.embedding.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max elementwise deviation {worst:e}"))?;
    let trials = build_trials(corpus, TrialType::AllAll, 3);
    let scored = score_trials(&net, corpus, &trials.trials).map_err(|e| e.to_string())?;
    let mut score_dev = 0.0f64;
    for s in &scored {
        let raw = cosine_similarity(
            &corpus.utterance(s.trial.enroll).embedding,
            &corpus.utterance(s.trial.test).embedding,
        )
        .map_err(|e| e.to_string())?;
        score_dev = score_dev.max((s.score - raw).abs());
    }
    ensure(score_dev <= 1e-12, || format!("score deviation {score_dev:e}"))?;
    Ok(format!("max output deviation {worst:e}, {} trial scores equal raw cosines", scored.len()))
}

fn oracle_rates(targets: &[f64], nontargets: &[f64], t: f64) -> (f64, f64) {
    let fnr = targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64;
    let fpr = nontargets.iter().filter(|&&s| s >= t).count() as f64 / nontargets.len() as f64;
    (fpr, fnr)
}

/// Sweeps every candidate threshold by direct counting and interpolates the
/// first sign change of FPR − FNR.
fn brute_force_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut cands: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands.push(f64::INFINITY);
    let rates: Vec<(f64, f64)> = cands.iter().map(|&t| oracle_rates(targets, nontargets, t)).collect();
    for k in 0..rates.len() {
        let (fpr, fnr) = rates[k];
        if fpr - fnr <= 0.0 {
            if k == 0 || fpr == fnr {
                return fpr;
            }
            let (pf, pn) = rates[k - 1];
            let (d0, d1) = (pf - pn, fpr - fnr);
            return pf + d0 / (d0 - d1) * (fpr - pf);
        }
    }
    unreachable!("+inf has FPR - FNR = -1")
}

fn pairwise_auc(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &t in targets {
        for &n in nontargets {
            wins += if t > n {
                1.0
            } else if t == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (targets.len() * nontargets.len()) as f64
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nt = rng.random_range(1..=50);
    let nn = rng.random_range(1..=50);
    let shift = rng.random_range(-1.0..2.0);
    // Coarse quantization injects ties within and across classes.
    let levels = rng.random_range(3..40) as f64;
    let mut draw = |mu: f64| ((rng.random_range(-1.0..1.0) + mu) * levels).round() / levels;
    let t = (0..nt).map(|_| draw(shift)).collect();
    let n = (0..nn).map(|_| draw(0.0)).collect();
    (t, n)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut eer_dev, mut auc_dev) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (t, n) = random_instance(&mut rng);
        eer_dev = eer_dev.max((eer_from_scores(&t, &n).eer - brute_force_eer(&t, &n)).abs());
    }
    for _ in 0..200 {
        let (t, n) = random_instance(&mut rng);
        auc_dev = auc_dev.max((auc_from_scores(&t, &n) - pairwise_auc(&t, &n)).abs());
    }
    ensure(eer_dev <= 1e-9, || format!("EER deviation {eer_dev:e}"))?;
    ensure(auc_dev <= 1e-12, || format!("AUC deviation {auc_dev:e}"))?;
    Ok(format!("200+200 tied instances, EER dev {eer_dev:e}, AUC dev {auc_dev:e}"))
}

/// Voiced-speech-like test signal: harmonic stack under a syllable envelope.
fn speech_clip(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> AudioClip {
    let f0 = rng.random_range(90.0..250.0);
    let rate = audio::CANONICAL_RATE as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let env = (std::f64::consts::PI * 4.0 * t).sin().abs();
            let v: f64 = (1..=5).map(|h| (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64).sum();
            amp * env * v / 2.3
        })
        .collect();
    AudioClip::new(samples, audio::CANONICAL_RATE).unwrap()
}

fn noise_clip(rng: &mut ChaCha8Rng, n: usize) -> AudioClip {
    AudioClip::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), audio::CANONICAL_RATE).unwrap()
}

fn noise_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let normal: Vec<AudioClip> = (0..20).map(|_| speech_clip(&mut rng, 8000, 0.4)).collect();
    let pool: Vec<AudioClip> = (0..4).map(|_| noise_clip(&mut rng, 12_000)).collect();
    let e = |e: audio::AudioError| e.to_string();

    let (mut snr_dev, mut ident_dev) = (0.0f64, 0.0f64);
    let mut reference = BTreeMap::new();
    for snr in [5.0, 15.0] {
        let mut psnrs = Vec::new();
        for (i, clip) in normal.iter().enumerate() {
            let r = audio::mix_at_snr(clip, &pool[i % pool.len()], snr, &mut rng).map_err(e)?;
            ensure(!r.clipped(), || format!("unexpected clipping at {snr} dB"))?;
            snr_dev = snr_dev.max((r.achieved_snr_db - snr).abs());
            let crest = audio::crest_factor_db(clip).map_err(e)?;
            ident_dev = ident_dev.max((r.achieved_psnr_db - (r.achieved_snr_db + crest)).abs());
            psnrs.push(r.achieved_psnr_db);
        }
        reference.insert(snr as i64, psnrs.iter().sum::<f64>() / psnrs.len() as f64);
    }
    ensure(snr_dev <= 0.01, || format!("SNR deviation {snr_dev} dB"))?;
    ensure(ident_dev <= 1e-9, || format!("PSNR identity deviation {ident_dev:e}"))?;

    let whisper: Vec<AudioClip> = normal.iter().map(|c| c.scaled(0.3).unwrap()).collect();
    let mut worst = 0.0f64;
    for (snr, ref_psnr) in &reference {
        let matched = audio::match_psnr(*ref_psnr, &whisper, &pool, &mut rng).map_err(e)?;
        let mean = matched.iter().map(|m| m.result.achieved_psnr_db).sum::<f64>() / matched.len() as f64;
        ensure((mean - ref_psnr).abs() <= 0.1, || format!("{snr} dB: whisper PSNR {mean} vs {ref_psnr}"))?;
        worst = worst.max((mean - ref_psnr).abs());
    }
    Ok(format!(
        "SNR dev {snr_dev:.1e} dB, identity dev {ident_dev:.1e}, matched PSNR dev {worst:.1e} dB (ref {:.2}/{:.2} dB)",
        reference[&5], reference[&15]
    ))
}

struct Experiment {
    baseline: EvalReport,
    trained: EvalReport,
}

fn run_experiment(train_corpus: &Corpus, test_corpus: &Corpus) -> Result<Experiment, String> {
    let out = train::<f64>(train_corpus, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let identity = PostNet::<f64>::init(out.net.config().clone()).map_err(|e| e.to_string())?;
    let baseline = evaluate(&identity, test_corpus, &TrialType::ALL, 10, 0).map_err(|e| e.to_string())?;
    let trained = evaluate(&out.net, test_corpus, &TrialType::ALL, 10, 0).map_err(|e| e.to_string())?;
    Ok(Experiment { baseline, trained })
}

fn end_to_end(train_corpus: &Corpus, test_corpus: &Corpus) -> Outcome {
    let x = run_experiment(train_corpus, test_corpus)?;
    let eer = |r: &EvalReport, t| r.get(t).map(|m| m.eer_mean).unwrap_or(f64::NAN);
    let (b_nw, t_nw) = (eer(&x.baseline, TrialType::NormWhsp), eer(&x.trained, TrialType::NormWhsp));
    let (b_nn, t_nn) = (eer(&x.baseline, TrialType::NormNorm), eer(&x.trained, TrialType::NormNorm));
    let (b_ww, t_ww) = (eer(&x.baseline, TrialType::WhspWhsp), eer(&x.trained, TrialType::WhspWhsp));
    let summary = format!(
        "NORM_WHSP {:.2}% -> {:.2}%, NORM_NORM {:.2}% -> {:.2}%, WHSP_WHSP {:.2}% -> {:.2}%",
        100.0 * b_nw,
        100.0 * t_nw,
        100.0 * b_nn,
        100.0 * t_nn,
        100.0 * b_ww,
        100.0 * t_ww
    );
    ensure(b_nw > 0.0 && t_nw <= 0.5 * b_nw, || format!("(a) failed: {summary}"))?;
    ensure(t_nn - b_nn < 0.02, || format!("(b) failed: {summary}"))?;
    ensure(t_ww <= b_ww, || format!("(c) failed: {summary}"))?;
    Ok(summary)
}

fn protocol_fidelity(corpus: &Corpus) -> Outcome {
    let mut total = 0;
    for t in TrialType::ALL {
        let list = build_trials(corpus, t, 11);
        let mut per_enroll: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for tr in &list.trials {
            let (e, s) = (corpus.utterance(tr.enroll), corpus.utterance(tr.test));
            ensure(t.conforms(e.style, s.style), || format!("{} style violation", t.as_str()))?;
            ensure(tr.enroll != tr.test, || "self trial".into())?;
            let same = e.speaker_id == s.speaker_id;
            ensure(same == (tr.label == Label::Target), || "label/speaker mismatch".into())?;
            let c = per_enroll.entry(tr.enroll).or_default();
            match tr.label {
                Label::Target => c.0 += 1,
                Label::Nontarget => c.1 += 1,
            }
        }
        ensure(per_enroll.values().all(|&c| c == (1, 1)), || format!("{}: not one TARGET + one NONTARGET", t.as_str()))?;
        let eligible = corpus
            .utterances()
            .iter()
            .filter(|u| t.enroll_style().is_none_or(|s| s == u.style))
            .count();
        ensure(per_enroll.len() + list.skipped == eligible, || format!("{}: enrollments unaccounted", t.as_str()))?;
        total += list.trials.len();
    }
    let full = generate_synthetic(&SynthConfig::default()).map_err(|e| e.to_string())?;
    for seed in 0..1000 {
        let (tr, te) = split_speakers(&full, SplitSpec { train_fraction: 0.7, seed }).map_err(|e| e.to_string())?;
        let overlap = tr.speakers().iter().any(|s| te.speakers().contains(s));
        ensure(!overlap && tr.num_speakers() + te.num_speakers() == full.num_speakers(), || {
            format!("split seed {seed} not speaker-disjoint")
        })?;
    }
    Ok(format!("{total} trials over 4 types conform; 1000 splits disjoint"))
}

fn determinism(train_corpus: &Corpus, test_corpus: &Corpus) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
    let mut weights = Vec::new();
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = train::<f64>(train_corpus, &cfg).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("postnet{k}.bin"));
        whispersv::postnet::save_weights(&out.net, &path).map_err(|e| e.to_string())?;
        weights.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        let report = evaluate(&out.net, test_corpus, &TrialType::ALL, 10, 0).map_err(|e| e.to_string())?;
        reports.push(format!("{}{:?}{}", report.to_table(), report, out.history.to_csv()));
    }
    ensure(weights[0] == weights[1], || "weight files differ".into())?;
    ensure(reports[0] == reports[1], || "reports differ".into())?;
    Ok(format!("weight files ({} bytes) and reports byte-identical", weights[0].len()))
}

fn main() {
    let corpus = generate_synthetic(&SynthConfig::default()).expect("default synthetic corpus");
    let (train_corpus, test_corpus) =
        split_speakers(&corpus, SplitSpec { train_fraction: 0.7, seed: 0 }).expect("70/30 split");

    let criteria: Vec<(&str, Check<'_>)> = vec![
        ("combined loss weighting", Box::new(combined_loss_anchor)),
        ("relative change anchors", Box::new(relative_change_anchors)),
        ("full-pipeline gradient check", Box::new(gradient_correctness)),
        ("identity at initialization", Box::new(|| identity_at_init(&corpus))),
        ("EER / AUC oracles", Box::new(metric_oracles)),
        ("noise mixing and PSNR matching", Box::new(noise_protocol)),
        ("end-to-end synthetic experiment", Box::new(|| end_to_end(&train_corpus, &test_corpus))),
        ("trial protocol fidelity", Box::new(|| protocol_fidelity(&test_corpus))),
        ("determinism", Box::new(|| determinism(&train_corpus, &test_corpus))),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all {} acceptance criteria passed", criteria.len());
}

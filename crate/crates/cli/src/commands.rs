//! Subcommand bodies. Each returns the process exit code.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use videograph::data::{read_features, synthetic_dataset, write_features, FeatureSet, SplitConfig, SyntheticSpec, SyntheticTruth};
use videograph::eval::{dominance, Dominance, EvalReport, EvalSummary, KeyshotConfig, KeyshotSummary};
use videograph::gradcheck::suite::{faulty_case, model_suite, op_suite, CheckResult};
use videograph::gradcheck::GradCheckOptions;
use videograph::model::{predict, QueryEmbedding, QueryMode};
use videograph::train::{train as run_training, Checkpoint, Dataset};

use crate::config::{container_ids, resolve};
use crate::manifest::{now, RunManifest};
use crate::{usage, EvalArgs, GradcheckArgs, SummarizeArgs, SynthArgs, TrainArgs};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct TruthRecord<'a> {
    video_id: &'a str,
    #[serde(flatten)]
    truth: &'a SyntheticTruth,
}

pub fn synth(a: &SynthArgs, argv: &[String]) -> Result<u8> {
    let started = now();
    let spec = SyntheticSpec {
        frames: a.frames,
        objects: a.objects,
        d_obj: a.d_obj,
        n_events: a.events,
        keyframe_ratio: a.keyframe_ratio,
        noise_sigma: a.noise,
        seed: a.seed,
        query_mode: a.query_mode,
        query_dim: a.query_dim,
        stride: a.stride,
        video_index: 0,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if a.videos == 0 {
        return Err(usage("--videos must be >= 1"));
    }
    let (default_val, default_test) = if a.videos >= 3 { (1, (a.videos / 4).max(1)) } else { (0, 0) };
    let n_val = a.val.unwrap_or(default_val);
    let n_train = a.train.unwrap_or(a.videos.saturating_sub(n_val + default_test));
    if n_train == 0 || n_train + n_val > a.videos {
        return Err(usage(format!("cannot split {} videos into {n_train} train and {n_val} val", a.videos)));
    }

    create_dir(&a.out)?;
    let videos = synthetic_dataset(&spec, a.videos)?;
    let mut outputs = Vec::new();
    let mut truths = Vec::new();
    for (fs, truth) in &videos {
        let path = a.out.join(format!("{}.vgf", fs.video_id));
        write_features(fs, &path)?;
        outputs.push(path);
        truths.push(TruthRecord {
            video_id: &fs.video_id,
            truth,
        });
    }
    let ids: Vec<String> = videos.iter().map(|(fs, _)| fs.video_id.clone()).collect();
    let split = SplitConfig::sequential(&ids, n_train, n_val)?;
    let split_path = a.out.join("split.json");
    write_json(&split_path, &split)?;
    let truth_path = a.out.join("truth.json");
    write_json(&truth_path, &truths)?;
    outputs.extend([split_path, truth_path]);

    println!("wrote {} containers to {}", videos.len(), a.out.display());
    println!("split: {} train, {} val, {} test", split.train.len(), split.val.len(), split.test.len());
    let mut m = RunManifest::new("synth", argv, json!({ "spec": spec, "videos": a.videos, "split": split }), Some(a.seed), started);
    m.outputs = outputs;
    m.write(&a.out.join("manifest.json"))?;
    Ok(0)
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Result<u8> {
    let started = now();
    let (resolved, train_videos, val_videos) = resolve(a)?;
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    create_dir(&a.out)?;
    println!(
        "training {} videos ({} val), mode {}, query {}, K={}, {} epochs",
        train_videos.len(),
        val_videos.len(),
        resolved.train.mode.as_str(),
        resolved.model.query_mode.as_str(),
        resolved.model.iterations,
        resolved.train.epochs
    );
    let data = Dataset {
        train: train_videos,
        val: val_videos,
    };
    let outcome = run_training(&data, &resolved.model, &resolved.train, resume.as_ref())?;
    for r in &outcome.history {
        let mut line = format!("epoch {:>4} lr={:.2e} loss={:.6}", r.epoch + 1, r.lr, r.train.total);
        for (k, v) in &r.train.components {
            let _ = write!(line, " {k}={v:.6}");
        }
        if let Some(f) = r.val_f_score {
            let _ = write!(line, " val_f={f:.4}");
        }
        if r.rejected_steps > 0 {
            let _ = write!(line, " rejected={}", r.rejected_steps);
        }
        println!("{line}");
    }
    println!("best epoch {}", outcome.best_epoch);

    let last = a.out.join("last.vgck");
    let best = a.out.join("best.vgck");
    let history = a.out.join("history.json");
    outcome.last.save(&last)?;
    outcome.best.save(&best)?;
    write_json(&history, &outcome.history)?;
    let mut m = RunManifest::new("train", argv, serde_json::to_value(&resolved)?, Some(resolved.train.seed), started);
    m.outputs = vec![last, best, history];
    m.write(&a.out.join("manifest.json"))?;
    Ok(0)
}

/// Everything `summarize` reports for one video; `eval` reads it back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub video_id: String,
    pub t_original: usize,
    pub picks: Vec<usize>,
    /// Keyframe probability per sampled frame.
    pub frame_scores: Option<Vec<f64>>,
    pub keyframe_set: Vec<usize>,
    pub summary: KeyshotSummary,
    pub dominance: Option<Dominance>,
    pub query_words: Vec<String>,
    pub warnings: Vec<String>,
}

fn plot_data(p: &PredictionFile) -> String {
    let mut s = String::from("# frame score\n");
    if let Some(scores) = &p.frame_scores {
        for (f, v) in p.picks.iter().zip(scores) {
            let _ = writeln!(s, "{f} {v:.6}");
        }
    }
    s.push_str("\n# shot_start shot_end\n");
    for (a, b) in p.summary.shots() {
        let _ = writeln!(s, "{a} {b}");
    }
    s
}

fn summary_text(p: &PredictionFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "video_id={}", p.video_id);
    let _ = writeln!(s, "t_original={}", p.t_original);
    let _ = writeln!(s, "budget_ratio={}", p.summary.budget_ratio);
    let _ = writeln!(s, "selected_frames={}", p.summary.selected_frames());
    let _ = writeln!(s, "query_words={}", p.query_words.join(","));
    for (i, (a, b)) in p.summary.shots().iter().enumerate() {
        let _ = writeln!(s, "shot.{i}={a}..{b}");
    }
    if let Some(scores) = &p.frame_scores {
        for (t, v) in scores.iter().enumerate() {
            let _ = writeln!(s, "score.{t}={v:.6}");
        }
    }
    if let Some(d) = &p.dominance {
        for (t, row) in d.scores.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "dominance.{t}={}", cells.join(","));
        }
    }
    s
}

pub fn summarize(a: &SummarizeArgs, argv: &[String]) -> Result<u8> {
    let started = now();
    if !(0.0..=1.0).contains(&a.budget) {
        return Err(usage(format!("--budget must lie in [0, 1], got {}", a.budget)));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = ckpt.model_config.clone();
    let params = ckpt.model_params()?;
    let fs = read_features(&a.input)?;
    if fs.d_obj != cfg.d_obj {
        anyhow::bail!(
            "object embedding layer expects d_obj={}, {} stores {}",
            cfg.d_obj,
            fs.video_id,
            fs.d_obj
        );
    }
    let mut warnings = Vec::new();
    let (query, words) = if cfg.query_mode == QueryMode::None {
        if a.query.is_some() {
            warnings.push("model has no query input, --query ignored".to_string());
        }
        (QueryEmbedding::none(), Vec::new())
    } else {
        if a.query.is_some() && fs.query_mode != QueryMode::Word {
            warnings.push(format!("{} has {} queries, --query ignored", fs.video_id, fs.query_mode.as_str()));
        }
        let words = a.words.unwrap_or(cfg.words);
        let chosen = a.query.as_deref().filter(|_| fs.query_mode == QueryMode::Word);
        let (q, w) = fs.query_embedding(words, chosen);
        warnings.extend(w);
        let used = match (q.mode, chosen) {
            (QueryMode::Word, Some(c)) => c.to_vec(),
            (QueryMode::Word, None) => fs.select_word_queries(words).words,
            _ => Vec::new(),
        };
        if let Some(width) = q.vectors.as_ref().map(|v| v.shape()[1]).filter(|&w| w != cfg.query_dim) {
            anyhow::bail!(
                "query fusion layer expects width {}, {} stores {width}",
                cfg.query_dim,
                fs.video_id
            );
        }
        (q, used)
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let (scores, diag) = predict(&params, &cfg, &fs.objects_tensor(), &query)?;
    let kp = scores.keyframe_probs();
    let keyshot = KeyshotConfig {
        budget_ratio: a.budget,
        ..KeyshotConfig::default()
    };
    let summary = fs.keyshots(&kp, &keyshot)?;
    let dom = match diag.s_ops.last() {
        Some(s) => Some(dominance(s)?),
        None => None,
    };
    let pred = PredictionFile {
        video_id: fs.video_id.clone(),
        t_original: fs.t_original,
        picks: fs.picks.clone(),
        frame_scores: Some(kp),
        keyframe_set: scores.keyframe_set.clone(),
        summary,
        dominance: dom,
        query_words: words,
        warnings,
    };
    print!("{}", summary_text(&pred));

    let mut outputs: Vec<PathBuf> = Vec::new();
    if let Some(plot) = &a.plot {
        std::fs::write(plot, plot_data(&pred)).with_context(|| format!("writing {}", plot.display()))?;
        outputs.push(plot.clone());
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join(format!("{}.summary.json", pred.video_id));
        write_json(&path, &pred)?;
        outputs.push(path);
        let config = json!({ "model": cfg, "keyshot": keyshot, "query": a.query, "words": a.words });
        let mut m = RunManifest::new("summarize", argv, config, None, started);
        m.outputs = outputs;
        m.write(&dir.join(format!("{}.manifest.json", pred.video_id)))?;
    }
    Ok(0)
}

#[derive(Serialize)]
struct EvalOutput {
    videos: Vec<EvalReport>,
    mean: EvalSummary,
    missing_gt: Vec<String>,
}

fn read_prediction(path: &Path) -> Result<PredictionFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn eval_one(p: &PredictionFile, gt: &FeatureSet, a: &EvalArgs) -> Result<EvalReport> {
    if p.t_original != gt.t_original || p.summary.binary.len() != gt.t_original {
        anyhow::bail!(
            "{}: prediction covers {} frames, groundtruth {}",
            p.video_id,
            p.summary.binary.len(),
            gt.t_original
        );
    }
    let keyshot = KeyshotConfig {
        budget_ratio: a.budget,
        ..KeyshotConfig::default()
    };
    let users: Vec<Vec<u8>> = gt.gt_summaries(a.gt_source, &keyshot)?.into_iter().map(|s| s.binary).collect();
    let user_scores: Vec<Vec<f64>> = gt
        .gt_scores
        .as_ref()
        .map(|us| us.iter().map(|u| u.iter().map(|&v| v as f64).collect()).collect())
        .unwrap_or_default();
    let scores = p.frame_scores.as_deref().filter(|s| s.len() == gt.frames());
    Ok(EvalReport::compute(&p.video_id, &p.summary.binary, &users, scores, &user_scores, a.aggregation)?)
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> Result<u8> {
    let started = now();
    if !(0.0..=1.0).contains(&a.budget) {
        return Err(usage(format!("--budget must lie in [0, 1], got {}", a.budget)));
    }
    let mut preds = Vec::new();
    for entry in std::fs::read_dir(&a.pred).with_context(|| format!("listing {}", a.pred.display()))? {
        let path = entry?.path();
        if path.to_string_lossy().ends_with(".summary.json") {
            preds.push(path);
        }
    }
    preds.sort();
    if preds.is_empty() {
        anyhow::bail!("no *.summary.json files in {}", a.pred.display());
    }
    let available = container_ids(&a.gt)?;
    let mut reports = Vec::new();
    let mut missing = Vec::new();
    for path in &preds {
        let p = read_prediction(path)?;
        if !available.contains(&p.video_id) {
            eprintln!("missing groundtruth: {}", p.video_id);
            missing.push(p.video_id);
            continue;
        }
        let gt = read_features(&a.gt.join(format!("{}.vgf", p.video_id)))?;
        reports.push(eval_one(&p, &gt, a)?);
    }
    if reports.is_empty() {
        anyhow::bail!("groundtruth missing for all {} predictions", missing.len());
    }
    let mean = EvalSummary::from_reports(&reports);
    println!(
        "{:<24} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "video", "precision", "recall", "f_score", "tau", "rho"
    );
    for r in &reports {
        println!(
            "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            r.video_id, r.precision, r.recall, r.f_score, r.kendall_tau, r.spearman_rho
        );
    }
    println!(
        "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
        "mean", mean.precision, mean.recall, mean.f_score, mean.kendall_tau, mean.spearman_rho
    );
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("eval.json");
        write_json(
            &path,
            &EvalOutput {
                videos: reports,
                mean,
                missing_gt: missing,
            },
        )?;
        let config = json!({
            "aggregation": a.aggregation,
            "gt_source": a.gt_source,
            "budget": a.budget,
            "pred": a.pred,
            "gt": a.gt,
        });
        let mut m = RunManifest::new("eval", argv, config, None, started);
        m.outputs = vec![path];
        m.write(&dir.join("manifest.json"))?;
    }
    Ok(0)
}

pub fn gradcheck(a: &GradcheckArgs, argv: &[String]) -> Result<u8> {
    let started = now();
    if a.frames < 2 || a.objects < 2 || a.seeds == 0 {
        return Err(usage("gradcheck needs --frames >= 2, --objects >= 2 and --seeds >= 1"));
    }
    if !(a.tolerance > 0.0 && a.eps > 0.0) {
        return Err(usage("--tolerance and --eps must be positive"));
    }
    let opts = GradCheckOptions {
        eps: a.eps,
        ..GradCheckOptions::default()
    };
    let mut results: Vec<CheckResult> = Vec::new();
    if !a.skip_ops {
        for s in a.seed..a.seed + a.seeds {
            for mut r in op_suite(s, &opts)? {
                if a.seeds > 1 {
                    r.name = format!("{}#{s}", r.name);
                }
                results.push(r);
            }
        }
    }
    if !a.skip_model {
        results.extend(model_suite(a.seed, a.frames, a.objects, a.iterations, &opts)?);
    }
    if a.inject_fault {
        results.push(faulty_case(a.seed, &opts)?);
    }
    let mut failed = 0;
    let mut rows = Vec::new();
    for r in &results {
        let ok = r.report.max_rel_error <= a.tolerance;
        failed += usize::from(!ok);
        println!(
            "{} {} max_rel_error={:.3e} worst={}[{}] entries={}",
            if ok { "ok  " } else { "FAIL" },
            r.name,
            r.report.max_rel_error,
            r.report.worst_param,
            r.report.worst_index,
            r.report.entries_checked
        );
        rows.push(json!({
            "name": r.name,
            "max_rel_error": r.report.max_rel_error,
            "worst_param": r.report.worst_param,
            "worst_index": r.report.worst_index,
            "analytic": r.report.analytic,
            "numeric": r.report.numeric,
            "entries": r.report.entries_checked,
            "pass": ok,
        }));
    }
    println!("{} checks, {} failed, tolerance {:e}", results.len(), failed, a.tolerance);
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("gradcheck.json");
        write_json(&path, &rows)?;
        let config = json!({
            "frames": a.frames,
            "objects": a.objects,
            "iterations": a.iterations,
            "seeds": a.seeds,
            "tolerance": a.tolerance,
            "eps": a.eps,
            "ops": !a.skip_ops,
            "model": !a.skip_model,
            "inject_fault": a.inject_fault,
        });
        let mut m = RunManifest::new("gradcheck", argv, config, Some(a.seed), started);
        m.outputs = vec![path];
        m.write(&dir.join("manifest.json"))?;
    }
    Ok(if failed == 0 { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred() -> PredictionFile {
        PredictionFile {
            video_id: "v".into(),
            t_original: 10,
            picks: vec![0, 5],
            frame_scores: Some(vec![0.25, 0.75]),
            keyframe_set: vec![1],
            summary: KeyshotSummary {
                binary: vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1],
                selected_segments: vec![1],
                segments: vec![(0, 5), (5, 10)],
                budget_ratio: 0.5,
            },
            dominance: None,
            query_words: vec![],
            warnings: vec![],
        }
    }

    #[test]
    fn plot_data_is_two_columns_plus_shots() {
        assert_eq!(plot_data(&pred()), "# frame score\n0 0.250000\n5 0.750000\n\n# shot_start shot_end\n5 10\n");
    }

    #[test]
    fn prediction_file_round_trips() {
        let p = pred();
        let back: PredictionFile = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}

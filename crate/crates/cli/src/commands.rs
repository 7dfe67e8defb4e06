use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use atlas_match::identify::{
    build_index, evaluate as evaluate_embeddings, load_atlas, train_identifier, Embedder,
    EvalReport, LabeledSlice, LossKind, TrainingData,
};
use atlas_match::imagekit::{load_pgm, save_pgm, warp_affine};
use atlas_match::register::{
    identify_by_mi, mutual_information, predict_affine, random_search_with, register_affine,
    regressor_spec, train_regressor, RegistrationResult, RegressorConfig,
};
use atlas_match::synthatlas::{build_dataset, AtlasSpec, AugmentationRanges, DatasetManifest, Split};
use atlas_match::tensornet::{load_checkpoint, save_checkpoint, Checkpoint};
use atlas_match::GrayImage;
use serde::Serialize;
use serde_json::json;

use crate::config::{env_seed, existing, RunConfig};
use crate::report::{self, RunReport, BUILD};
use crate::{
    EvaluateArgs, Failure, GenDataArgs, Mode, RegisterArgs, TrainArgs, TrainRegressorArgs,
};

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(atlas_match::Error::IoFailure {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, Failure> {
    Ok(flag.or(env_seed()?).unwrap_or(fallback))
}

pub fn gen_data(a: &GenDataArgs) -> CmdResult {
    let start = Instant::now();
    let seed = resolve_seed(a.seed, 0)?;
    let spec = AtlasSpec {
        num_plates: a.plates,
        image_size: a.size,
        seed,
        morph_rate: a.morph_rate,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let counts = a.counts;
    let manifest = build_dataset(&spec, counts, &AugmentationRanges::default(), seed, &a.out)?;
    let per_split: serde_json::Map<_, _> = Split::ALL
        .iter()
        .map(|s| (s.to_string(), json!(manifest.split(*s).count())))
        .collect();
    report::print(
        &RunReport {
            command: "gen-data",
            config: json!({
                "plates": a.plates, "size": a.size, "seed": seed,
                "counts": counts, "morph_rate": a.morph_rate, "out": a.out,
            }),
            result: json!({"entries": manifest.entries.len(), "splits": per_split}),
            total_seconds: start.elapsed().as_secs_f64(),
            build: BUILD,
        },
        false,
    );
    Ok(())
}

struct Dataset {
    manifest: DatasetManifest,
    root: PathBuf,
    atlas: Vec<GrayImage>,
}

fn load_dataset(cfg: &RunConfig, manifest_flag: Option<&PathBuf>) -> Result<Dataset, Failure> {
    let path = manifest_flag
        .or(cfg.paths.manifest.as_ref())
        .ok_or_else(|| Failure::Usage("no manifest given (--manifest or paths.manifest)".into()))?;
    existing(path, "manifest")?;
    let mut manifest = DatasetManifest::load(path)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    if let Some(dir) = &cfg.paths.atlas_dir {
        existing(dir, "atlas directory")?;
        // manifest paths are relative to root; an absolute override wins on join
        manifest.atlas_dir = dir.to_string_lossy().into_owned();
    }
    let atlas = load_atlas(&manifest, &root)?;
    Ok(Dataset { manifest, root, atlas })
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    log: PathBuf,
    best_iteration: usize,
    best_val_mae: f64,
    iterations_run: usize,
    stopped_early: bool,
    seconds: f64,
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let start = Instant::now();
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply_seed_env()?;
    if let Some(s) = a.common.seed {
        cfg.training.seed = s;
    }
    if let Some(l) = &a.loss {
        cfg.model.loss = l.parse().map_err(|e: atlas_match::Error| Failure::Usage(e.to_string()))?;
    }
    if let Some(m) = &a.mining {
        cfg.model.mining = m.parse().map_err(|e: atlas_match::Error| Failure::Usage(e.to_string()))?;
    }
    if let Some(b) = a.batch_size {
        cfg.model.batch_size = b;
    }
    if let Some(s) = a.input_size {
        cfg.model.input_size = s;
    }
    if let Some(n) = a.max_iterations {
        cfg.training.max_iterations = n;
    }
    if let Some(lr) = a.learning_rate {
        cfg.training.learning_rate = lr;
    }
    if let Some(o) = &a.out {
        cfg.paths.out_dir = Some(o.clone());
    }
    if let Some(m) = &a.manifest {
        cfg.paths.manifest = Some(m.clone());
    }
    cfg.validate()?;
    let out = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| Failure::Usage("no output directory (--out or paths.out_dir)".into()))?;
    if cfg.model.loss == LossKind::Contrastive {
        eprintln!("warning: mining = {} is ignored for contrastive loss", cfg.model.mining);
    }
    let data = load_dataset(&cfg, None)?;
    let train = LabeledSlice::load_split(&data.manifest, &data.root, Split::Train)?;
    let validation = LabeledSlice::load_split(&data.manifest, &data.root, Split::Val1)?;
    let tc = cfg.train_config();
    let outcome = train_identifier(
        &TrainingData {
            atlas: &data.atlas,
            train: &train,
            validation: &validation,
        },
        &tc,
    )?;
    create_dir(&out)?;
    let ckpt_path = cfg.paths.checkpoint.clone().unwrap_or_else(|| out.join("model.amck"));
    let log_path = out.join("train_log.csv");
    save_checkpoint(
        &Checkpoint::from_network(&outcome.network, outcome.best_iteration as u64, tc.seed),
        &ckpt_path,
    )?;
    write_file(&log_path, &outcome.log_csv())?;
    cfg.paths.checkpoint = Some(ckpt_path.clone());
    report::print(
        &RunReport {
            command: "train",
            result: TrainSummary {
                checkpoint: ckpt_path,
                log: log_path,
                best_iteration: outcome.best_iteration,
                best_val_mae: outcome.best_val_mae,
                iterations_run: outcome.iterations_run,
                stopped_early: outcome.stopped_early,
                seconds: start.elapsed().as_secs_f64(),
            },
            config: cfg,
            total_seconds: start.elapsed().as_secs_f64(),
            build: BUILD,
        },
        a.common.no_timing,
    );
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> CmdResult {
    let start = Instant::now();
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    cfg.apply_seed_env()?;
    if let Some(s) = a.common.seed {
        cfg.training.seed = s;
    }
    if let Some(n) = a.resolutions {
        cfg.registration.pyramid.num_resolutions = n;
    }
    if let Some(n) = a.iterations {
        cfg.registration.pyramid.max_iterations = n;
    }
    if let Some(c) = &a.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if let Some(m) = &a.manifest {
        cfg.paths.manifest = Some(m.clone());
    }
    cfg.validate()?;
    let split: Split = a.split.parse().map_err(|e: atlas_match::Error| Failure::Usage(e.to_string()))?;
    let checkpoint = match (&a.baseline, &cfg.paths.checkpoint) {
        (Some(_), _) => None,
        (None, Some(c)) => {
            existing(c, "checkpoint")?;
            Some(c.clone())
        }
        (None, None) => {
            return Err(Failure::Usage(
                "evaluate needs --checkpoint unless --baseline mi is given".into(),
            ))
        }
    };
    let data = load_dataset(&cfg, None)?;
    let queries = LabeledSlice::load_split(&data.manifest, &data.root, split)?;
    let eval = match checkpoint {
        Some(path) => {
            let net = load_checkpoint(&path, None)?.into_network()?;
            let embedder = Embedder::new(net, cfg.model.clahe);
            let index = build_index(&data.atlas, &embedder)?;
            evaluate_embeddings(&queries, &index, &embedder)?.0
        }
        None => {
            let mut rankings = Vec::with_capacity(queries.len());
            let mut seconds = 0.0;
            for q in &queries {
                let r = identify_by_mi(
                    &q.id,
                    &q.image,
                    &data.atlas,
                    &cfg.registration.pyramid,
                    cfg.training.seed,
                    Some(q.plate),
                )?;
                seconds += r.seconds;
                rankings.push(r.ranking);
            }
            EvalReport::from_rankings(&rankings, seconds)?
        }
    };
    report::print(
        &RunReport {
            command: "evaluate",
            config: json!({
                "run": cfg, "split": split, "baseline": a.baseline.map(|_| "mi"),
            }),
            result: eval,
            total_seconds: start.elapsed().as_secs_f64(),
            build: BUILD,
        },
        a.common.no_timing,
    );
    Ok(())
}

fn load_image(path: &Path, what: &str) -> Result<GrayImage, Failure> {
    existing(path, what)?;
    Ok(load_pgm(path)?)
}

pub fn register(a: &RegisterArgs) -> CmdResult {
    let start = Instant::now();
    let s = &a.search;
    let mut cfg = RunConfig::load_or_default(s.config.as_deref())?;
    cfg.apply_seed_env()?;
    if let Some(seed) = s.common.seed {
        cfg.training.seed = seed;
    }
    if let Some(t) = s.trials {
        if t == 0 {
            return Err(Failure::Usage("--trials must be at least 1".into()));
        }
        cfg.registration.trials = t;
    }
    cfg.validate()?;
    if a.mode == Mode::Regress && a.checkpoint.is_none() {
        return Err(Failure::Usage("--mode regress requires --checkpoint".into()));
    }
    let fixed = load_image(&s.fixed, "fixed image")?;
    let moving = load_image(&s.moving, "moving image")?;
    let seed = cfg.training.seed;
    let pyramid = &cfg.registration.pyramid;
    create_dir(&s.out)?;

    let mut extra = json!({});
    let result = match a.mode {
        Mode::Optimize => register_affine(&fixed, &moving, pyramid, seed)?,
        Mode::Search => {
            let outcome = random_search_with(&fixed, &moving, cfg.registration.trials, seed, pyramid)?;
            let log_path = s.out.join("trials.jsonl");
            let mut log = String::new();
            for t in &outcome.trials {
                log.push_str(&report::to_json(t, s.common.no_timing));
                log.push('\n');
            }
            write_file(&log_path, &log)?;
            extra = json!({"best_trial": outcome.best_trial, "trial_log": log_path});
            outcome.best
        }
        Mode::Regress => {
            let path = a.checkpoint.as_ref().expect("checked above");
            existing(path, "checkpoint")?;
            let net = load_checkpoint(path, Some(&regressor_spec()?))?.into_network()?;
            let t0 = Instant::now();
            let transform = predict_affine(&net, &moving, &fixed)?;
            let moved = warp_affine(&moving, &transform, fixed.width(), fixed.height())?;
            RegistrationResult {
                transform,
                final_mi: mutual_information(&fixed, &moved, pyramid.bins, None)?,
                trace: Vec::new(),
                seconds: t0.elapsed().as_secs_f64(),
            }
        }
    };
    let moved = warp_affine(&moving, &result.transform, fixed.width(), fixed.height())?;
    let moved_path = s.out.join("moved.pgm");
    save_pgm(&moved, &moved_path)?;
    let mode = match a.mode {
        Mode::Optimize => "optimize",
        Mode::Search => "search",
        Mode::Regress => "regress",
    };
    report::print(
        &RunReport {
            command: "register",
            config: json!({
                "run": cfg, "mode": mode, "fixed": s.fixed, "moving": s.moving,
                "out": s.out, "checkpoint": a.checkpoint,
            }),
            result: json!({"registration": result, "moved": moved_path, "search": extra}),
            total_seconds: start.elapsed().as_secs_f64(),
            build: BUILD,
        },
        s.common.no_timing,
    );
    Ok(())
}

pub fn train_regressor_cmd(a: &TrainRegressorArgs) -> CmdResult {
    let start = Instant::now();
    let seed = resolve_seed(a.common.seed, 0)?;
    let rc = RegressorConfig {
        pretrain_iterations: a.pretrain_iterations,
        finetune_iterations: a.finetune_iterations,
        learning_rate: a.learning_rate,
        seed,
        ..Default::default()
    };
    rc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = load_dataset(&RunConfig::default(), Some(&a.manifest))?;
    let train = LabeledSlice::load_split(&data.manifest, &data.root, Split::Train)?;
    let pairs: Vec<(GrayImage, GrayImage)> = train
        .iter()
        .map(|s| (data.atlas[s.plate].clone(), s.image.clone()))
        .collect();
    let outcome = train_regressor(&data.atlas, &pairs, &rc)?;
    create_dir(&a.out)?;
    let path = a.out.join("regressor.amck");
    save_checkpoint(
        &Checkpoint::from_network(&outcome.network, rc.pretrain_iterations as u64, seed),
        &path,
    )?;
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let tail = &outcome.pretrain_mi[outcome.pretrain_mi.len().saturating_sub(100)..];
    report::print(
        &RunReport {
            command: "train-regressor",
            config: json!({"manifest": a.manifest, "out": a.out, "regressor": rc}),
            result: json!({
                "checkpoint": path,
                "pretrain_final_mean_mi": mean(tail),
                "finetune_mi": outcome.finetune_mi,
                "finetune_best": outcome.finetune_best,
                "seconds": outcome.seconds,
            }),
            total_seconds: start.elapsed().as_secs_f64(),
            build: BUILD,
        },
        a.common.no_timing,
    );
    Ok(())
}

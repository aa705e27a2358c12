//! Learning commands: cross-validated training, checkpoint evaluation, and
//! the parameter/runtime benchmark table.

use std::time::Instant;

use abfr_core::eval::{auc, bench_csv, BenchRecord, Confusion, MetricSet};
use abfr_core::kan::{BasisConfig, BlockKind};
use abfr_core::model::{history_csv, run_cv, Model, ModelConfig, TrainConfig};
use abfr_core::rng::Rng;
use abfr_core::sampling::{load_representation, Representation};
use abfr_core::tensor::Graph;

use crate::util::{ensure_dir, read_manifest, write_json, write_text, ConfigFile};
use crate::{BenchArgs, CliError, EvalArgs, TrainArgs};

fn parse_kind(s: &str) -> Result<BlockKind, CliError> {
    BlockKind::parse(s).map_err(|e| CliError::Config(e.to_string()))
}

fn load_reps(dir: &std::path::Path) -> Result<Vec<Representation>, CliError> {
    let manifest = read_manifest(&dir.join("labels.csv"))?;
    let mut reps = Vec::with_capacity(manifest.len());
    for row in &manifest {
        let mut rep = load_representation(&dir.join(&row.file))
            .map_err(|e| CliError::Config(format!("subject {}: {e}", row.subject)))?;
        rep.label = Some(row.label);
        reps.push(rep);
    }
    Ok(reps)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrainDump {
    model: ModelConfig,
    train: TrainConfig,
    folds: usize,
    seed: u64,
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32, CliError> {
    let cfg = ConfigFile::load(args.config.as_ref())?;
    let encoder = parse_kind(&cfg.string_or(args.encoder.clone(), "encoder", "mlp")?)?;
    let head = parse_kind(&cfg.string_or(args.head.clone(), "head", "mlp")?)?;
    let folds = cfg.usize_or(args.folds, "folds", 5)?;
    let epochs = cfg.usize_or(args.epochs, "epochs", 100)?;
    let d_model = cfg.usize_or(args.d_model, "d_model", 32)?;
    let n_heads = cfg.usize_or(args.heads, "heads", 4)?;
    let n_layers = cfg.usize_or(args.layers, "layers", 1)?;
    let keep_ratio = cfg.f64_or(args.keep_ratio, "keep_ratio", 0.8)?;
    let batch_size = cfg.usize_or(args.batch, "batch", 8)?;
    let lr = cfg.f64_or(args.lr, "lr", 0.001)?;
    let weight_decay = cfg.f64_or(args.weight_decay, "weight_decay", 0.0001)?;
    let seed = cfg.seed(args.seed)?;
    if folds < 2 {
        return Err(CliError::Config("folds must be >= 2".into()));
    }
    if !(0.0 < keep_ratio && keep_ratio <= 1.0) {
        return Err(CliError::Config("keep_ratio must be in (0, 1]".into()));
    }
    ensure_dir(&args.out)?;

    let reps = load_reps(&args.reps)?;
    let model_cfg = ModelConfig {
        n_anchors: reps[0].f_bar.cols(),
        pos_dim: reps[0].positions.cols(),
        d_model,
        n_heads,
        n_layers,
        keep_ratio,
        n_classes: 2,
        encoder_block: encoder,
        head_block: head,
        basis: BasisConfig::default(),
    };
    let train_cfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        weight_decay,
        ..TrainConfig::default()
    };
    write_json(
        &args.out.join("config.json"),
        &TrainDump {
            model: model_cfg.clone(),
            train: train_cfg.clone(),
            folds,
            seed,
        },
    )?;

    let result = run_cv(&reps, &model_cfg, &train_cfg, folds, seed)
        .map_err(|e| CliError::Run(e.to_string()))?;

    let mut summary =
        String::from("fold,accuracy,precision,recall,specificity,f1,auc\n");
    for (f, fold) in result.folds.iter().enumerate() {
        write_text(&args.out.join(format!("history_fold{f}.csv")), &history_csv(&fold.history))?;
        abfr_core::checkpoint::save(
            &fold.model.named_params(),
            &args.out.join(format!("model_fold{f}.abfk")),
        )
        .map_err(|e| CliError::Run(e.to_string()))?;
        let m = &fold.metrics;
        summary.push_str(&format!(
            "{f},{},{},{},{},{},{}\n",
            m.accuracy, m.precision, m.recall, m.specificity, m.f1, fold.val_auc
        ));
    }
    summary.push_str(&format!(
        "mean,{},,,,,{}\nstd,{},,,,,{}\n",
        result.mean_acc, result.mean_auc, result.std_acc, result.std_auc
    ));
    write_text(&args.out.join("summary.csv"), &summary)?;
    println!(
        "{}-{}: mean val acc {:.4} +/- {:.4}, mean auc {:.4}",
        encoder.name(),
        head.name(),
        result.mean_acc,
        result.std_acc,
        result.mean_auc
    );
    Ok(0)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32, CliError> {
    let dump_text = std::fs::read_to_string(&args.train_config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.train_config.display())))?;
    let dump: TrainDump = serde_json::from_str(&dump_text)
        .map_err(|e| CliError::Config(format!("bad training config: {e}")))?;
    let reps = load_reps(&args.reps)?;
    let mut model = Model::new(&dump.model, &mut Rng::new(0))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let entries = abfr_core::checkpoint::load(&args.model)
        .map_err(|e| CliError::Config(e.to_string()))?;
    model
        .load_params(&entries)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut labels = Vec::new();
    let mut preds = Vec::new();
    let mut scores = Vec::new();
    for rep in &reps {
        let (pred, score) = model.predict(rep).map_err(|e| CliError::Run(e.to_string()))?;
        labels.push(rep.label.expect("loader attaches labels"));
        preds.push(pred);
        scores.push(score);
    }
    let c = Confusion::tally(&labels, &preds).map_err(|e| CliError::Run(e.to_string()))?;
    let m = MetricSet::from_confusion(&c);
    let a = auc(&labels, &scores).map_err(|e| CliError::Run(e.to_string()))?;
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("accuracy,{}\n", m.accuracy));
    out.push_str(&format!("precision,{}\n", m.precision));
    out.push_str(&format!("recall,{}\n", m.recall));
    out.push_str(&format!("specificity,{}\n", m.specificity));
    out.push_str(&format!("f1,{}\n", m.f1));
    out.push_str(&format!("auc,{a}\n"));
    out.push_str(&format!("degenerate,{}\n", m.degenerate));
    match &args.out {
        Some(p) => write_text(p, &out)?,
        None => print!("{out}"),
    }
    Ok(0)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<i32, CliError> {
    let d_model = args.d_model.unwrap_or(32);
    let n = args.patches.unwrap_or(64);
    let n_anchors = args.anchors.unwrap_or(32);
    let mut rng = Rng::new(args.seed.unwrap_or(42));
    let rep = Representation {
        f_bar: abfr_core::tensor::Tensor::rand_uniform(&[n, n_anchors], 1.0, &mut rng),
        positions: abfr_core::tensor::Tensor::rand_uniform(&[n, 9], 0.5, &mut rng),
        label: None,
    };
    let mut records = Vec::new();
    for encoder in BlockKind::ALL {
        for head in BlockKind::ALL {
            let cfg = ModelConfig {
                n_anchors,
                pos_dim: 9,
                d_model,
                n_heads: 4,
                n_layers: 1,
                keep_ratio: 0.8,
                n_classes: 2,
                encoder_block: encoder,
                head_block: head,
                basis: BasisConfig::default(),
            };
            let model = Model::new(&cfg, &mut rng).map_err(|e| CliError::Run(e.to_string()))?;
            let start = Instant::now();
            let reps_timed = 5;
            for _ in 0..reps_timed {
                let mut g = Graph::new();
                let _ = model
                    .forward(&mut g, &rep, false)
                    .map_err(|e| CliError::Run(e.to_string()))?;
            }
            records.push(BenchRecord {
                config: format!("{}-{}", encoder.name(), head.name()),
                params: model.param_count(),
                seconds: start.elapsed().as_secs_f64() / reps_timed as f64,
            });
        }
    }
    let csv = bench_csv(&records);
    match &args.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

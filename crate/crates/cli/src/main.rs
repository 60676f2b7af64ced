//! `iot`: train, evaluate and study instance-wise ordered transformers.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iot_core::checkpoint::{load_checkpoint, Checkpoint};
use iot_core::config::RunConfig;
use iot_core::data::{generate_corpus, Corpus, Instance, Split};
use iot_core::metrics::Metric;
use iot_core::model::{IotModel, OrderOverride, TrainMode};
use iot_core::studies::{self, StudyReport};
use iot_core::train::{evaluate, fit, save_run};
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] iot_core::Error),
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "iot", version, about = "Instance-wise ordered transformer lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (the corpus seed stays in the task config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args, Debug, Clone)]
struct SplitArg {
    /// Split to score: dev or test.
    #[arg(long, default_value = "dev", value_parser = parse_split)]
    split: Split,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints and logs.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Decode a split and print metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        split: SplitArg,
        /// Forced order codes: `DEC` or `ENC,DEC`.
        #[arg(long)]
        order_override: Option<String>,
    },
    /// Share of instances on which each fixed-order model scores best.
    Ratios {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Per-instance versus corpus-level score variance across fixed-order models.
    Variance {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Score each predicted-order subset under every decoder order.
    Subsets {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Score one model under every forced decoder order.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Average the next-token distributions of several models.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Parameter count and predictor overhead.
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Write the corpus splits as `src ids<TAB>tgt ids` lines.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        "train" => Ok(Split::Train),
        other => Err(format!("unknown split {other:?} (expected dev or test)")),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| iot_core::Error::io(format!("creating {}", dir.display()), e).into())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| iot_core::Error::io(format!("writing {}", path.display()), e).into())
}

/// Checkpoints plus the run configuration that defines their data: `--config`
/// when given, otherwise the configuration stored in the first checkpoint.
struct Loaded {
    ckpts: Vec<Checkpoint>,
    cfg: RunConfig,
    corpus: Corpus,
}

fn load(common: &Common, paths: &[PathBuf]) -> CliResult<Loaded> {
    let ckpts = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>, _>>()?;
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => match &ckpts[0].meta.run {
            Value::Null => {
                return Err(CliError::Usage(
                    "checkpoint has no stored run configuration; pass --config".into(),
                ))
            }
            run => RunConfig::from_json(&run.to_string())?,
        },
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let corpus = generate_corpus(&cfg.task)?;
    Ok(Loaded { ckpts, cfg, corpus })
}

impl Loaded {
    fn models(&self) -> Vec<&IotModel<f32>> {
        self.ckpts.iter().map(|c| &c.model).collect()
    }

    fn instances(&self, split: Split) -> Vec<&Instance> {
        self.corpus.split(split).iter().collect()
    }

    fn metric(&self) -> Metric {
        Metric::for_task(self.cfg.task.kind)
    }

    fn report(&self, study: &str, split: Split, paths: &[PathBuf], result: Value, table: Vec<Vec<String>>) -> StudyReport {
        StudyReport {
            study: study.into(),
            metric: self.metric(),
            split: split_name(split).into(),
            seed: self.cfg.seed,
            checkpoints: paths.iter().map(|p| p.display().to_string()).collect(),
            configs: self
                .ckpts
                .iter()
                .map(|c| match &c.meta.run {
                    Value::Null => serde_json::to_value(&self.cfg).expect("config serializes"),
                    run => run.clone(),
                })
                .collect(),
            result,
            table,
        }
    }
}

fn emit(report: &StudyReport, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(report).map_err(iot_core::Error::from)? + "\n";
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_file(&dir.join(format!("{}.json", report.study)), &text)?;
        write_file(&dir.join(format!("{}.csv", report.study)), &report.to_csv())?;
    }
    print!("{text}");
    Ok(())
}

fn parse_override(text: &str, model: &IotModel<f32>) -> CliResult<OrderOverride> {
    let codes = text
        .split(',')
        .map(|c| c.trim().parse::<u8>().map_err(|_| CliError::Usage(format!("bad order code {c:?}"))))
        .collect::<CliResult<Vec<u8>>>()?;
    let (enc, dec) = match codes.as_slice() {
        [d] => (None, Some(*d)),
        [e, d] => (Some(*e), Some(*d)),
        _ => return Err(CliError::Usage("--order-override takes DEC or ENC,DEC".into())),
    };
    Ok(model.override_from_codes(enc, dec)?)
}

fn fixed_code(model: &IotModel<f32>) -> Option<u8> {
    match model.mode() {
        TrainMode::FixedOrder(code) => Some(code),
        _ => None,
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = resolve_config(&common)?;
            if common.dump_config {
                println!("{}", cfg.to_json_pretty());
                return Ok(());
            }
            let out = common.out.ok_or_else(|| CliError::Usage("train needs --out".into()))?;
            let corpus = generate_corpus(&cfg.task)?;
            let outcome = fit(&cfg, &corpus, &mut |r| {
                eprintln!(
                    "epoch {} step {} loss {:.4} dev_em {:.4} dev_loss {:.4}",
                    r.epoch, r.step, r.train_loss, r.dev_exact_match, r.dev_loss
                );
            })?;
            save_run(&out, &cfg, &outcome)?;
            let best = &outcome.epochs[(outcome.best_epoch - 1) as usize];
            println!(
                "{}",
                json!({"best_epoch": outcome.best_epoch, "best_step": outcome.best_step,
                       "dev_exact_match": best.dev_exact_match, "seed": cfg.seed,
                       "out": out.display().to_string()})
            );
        }
        Command::Eval { common, ckpt, split, order_override } => {
            let paths = [ckpt];
            let loaded = load(&common, &paths)?;
            if common.dump_config {
                println!("{}", loaded.cfg.to_json_pretty());
                return Ok(());
            }
            let model = &loaded.ckpts[0].model;
            let over = match &order_override {
                Some(text) => parse_override(text, model)?,
                None => OrderOverride::default(),
            };
            let eval = evaluate(&[model], &loaded.instances(split.split), loaded.cfg.decode_max_len(), over)?;
            let result = json!({"summary": eval.summary, "order_override": order_override});
            let s = &eval.summary;
            let table = vec![
                vec!["exact_match".into(), "token_acc".into(), "bleu".into(), "count".into()],
                vec![s.exact_match.to_string(), s.token_acc.to_string(), s.bleu.to_string(), s.count.to_string()],
            ];
            emit(&loaded.report("eval", split.split, &paths, result, table), common.out.as_deref())?;
        }
        Command::Ratios { common, ckpts, split } => {
            let loaded = load(&common, &ckpts)?;
            let (codes, scores) = fixed_order_scores(&loaded, split.split)?;
            let ratios = studies::preference_ratios(&scores)?;
            let result = json!({"codes": codes, "ratios": ratios});
            let table = studies::ratios_table(&codes, &ratios);
            emit(&loaded.report("ratios", split.split, &ckpts, result, table), common.out.as_deref())?;
        }
        Command::Variance { common, ckpts, split } => {
            let loaded = load(&common, &ckpts)?;
            let (codes, scores) = fixed_order_scores(&loaded, split.split)?;
            let v = studies::variance_report(&scores)?;
            let table = studies::variance_table(&codes, &v);
            let result = json!({"codes": codes, "variance": v});
            emit(&loaded.report("variance", split.split, &ckpts, result, table), common.out.as_deref())?;
        }
        Command::Subsets { common, ckpt, split } => {
            let paths = [ckpt];
            let loaded = load(&common, &paths)?;
            let model = &loaded.ckpts[0].model;
            let (scores, predicted) = studies::override_score_matrix(
                model,
                &loaded.instances(split.split),
                loaded.metric(),
                loaded.cfg.decode_max_len(),
            )?;
            let s = studies::subset_matrix(&scores, &predicted)?;
            let codes = model.dec_orders.codes().to_vec();
            let table = studies::subset_table(&codes, &s);
            let result = json!({"codes": codes, "subsets": s});
            emit(&loaded.report("subsets", split.split, &paths, result, table), common.out.as_deref())?;
        }
        Command::Robustness { common, ckpt, split } => {
            let paths = [ckpt];
            let loaded = load(&common, &paths)?;
            let model = &loaded.ckpts[0].model;
            let codes = studies::robustness_codes(model);
            let scores = studies::forced_order_scores(
                model,
                &codes,
                &loaded.instances(split.split),
                loaded.metric(),
                loaded.cfg.decode_max_len(),
            )?;
            let r = studies::robustness_report(&codes, &scores, fixed_code(model));
            let table = studies::robustness_table(&r);
            let result = serde_json::to_value(&r).map_err(iot_core::Error::from)?;
            emit(&loaded.report("robustness", split.split, &paths, result, table), common.out.as_deref())?;
        }
        Command::Ensemble { common, ckpts, split } => {
            if ckpts.len() == 1 {
                eprintln!("warning: ensemble of a single checkpoint is plain greedy decoding");
            }
            let loaded = load(&common, &ckpts)?;
            let instances = loaded.instances(split.split);
            let max_len = loaded.cfg.decode_max_len();
            let ensemble = evaluate(&loaded.models(), &instances, max_len, OrderOverride::default())?;
            let mut singles = Vec::new();
            for m in loaded.models() {
                singles.push(evaluate(&[m], &instances, max_len, OrderOverride::default())?.summary);
            }
            let mut table = vec![vec!["model".to_string(), "exact_match".into(), "token_acc".into(), "bleu".into()]];
            for (p, s) in ckpts.iter().zip(&singles) {
                table.push(vec![p.display().to_string(), s.exact_match.to_string(), s.token_acc.to_string(), s.bleu.to_string()]);
            }
            let e = &ensemble.summary;
            table.push(vec!["ensemble".into(), e.exact_match.to_string(), e.token_acc.to_string(), e.bleu.to_string()]);
            let result = json!({"ensemble": ensemble.summary, "singles": singles});
            emit(&loaded.report("ensemble", split.split, &ckpts, result, table), common.out.as_deref())?;
        }
        Command::Params { common, ckpt } => {
            let ck = load_checkpoint(&ckpt)?;
            let p = studies::param_overhead(&ck.model);
            let report = StudyReport {
                study: "params".into(),
                metric: Metric::ExactMatch,
                split: String::new(),
                seed: common.seed.unwrap_or(ck.meta.seed),
                checkpoints: vec![ckpt.display().to_string()],
                configs: vec![match &ck.meta.run {
                    Value::Null => serde_json::to_value(&ck.meta.spec).map_err(iot_core::Error::from)?,
                    run => run.clone(),
                }],
                result: serde_json::to_value(p).map_err(iot_core::Error::from)?,
                table: studies::params_table(&p),
            };
            emit(&report, common.out.as_deref())?;
        }
        Command::GenData { common } => {
            let cfg = resolve_config(&common)?;
            if common.dump_config {
                println!("{}", cfg.to_json_pretty());
                return Ok(());
            }
            let out = common.out.ok_or_else(|| CliError::Usage("gen-data needs --out".into()))?;
            ensure_dir(&out)?;
            let corpus = generate_corpus(&cfg.task)?;
            for split in [Split::Train, Split::Dev, Split::Test] {
                let mut text = String::new();
                for inst in corpus.split(split) {
                    text.push_str(&join_ids(&inst.src));
                    text.push('\t');
                    text.push_str(&join_ids(&inst.tgt));
                    text.push('\n');
                }
                write_file(&out.join(format!("{}.tsv", split_name(split))), &text)?;
            }
            write_file(&out.join("config.json"), &(cfg.to_json_pretty() + "\n"))?;
        }
    }
    Ok(())
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Per-instance scores of each (fixed-order) checkpoint, with the decoder
/// order code each was trained with.
fn fixed_order_scores(loaded: &Loaded, split: Split) -> CliResult<(Vec<u8>, studies::ScoreMatrix)> {
    let models = loaded.models();
    let mut codes = Vec::with_capacity(models.len());
    for m in &models {
        match fixed_code(m) {
            Some(c) => codes.push(c),
            None => return Err(CliError::Usage("ratios and variance need fixed-order checkpoints".into())),
        }
    }
    let scores = studies::model_score_matrix(&models, &loaded.instances(split), loaded.metric(), loaded.cfg.decode_max_len())?;
    Ok((codes, scores))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

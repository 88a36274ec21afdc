//! `reasoning-lens` command line. Exit status: 0 on success, 2 on usage or
//! configuration errors, 1 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lens_core::data::{Dataset, InputKind, Sample};
use lens_core::lab::{fraction_curve, ood_curve, recall_confounder_check, PruneCategory};
use lens_core::model::{HeadAddress, PruneMask, VlTransformer};
use lens_core::train::evaluate;
use serde_json::json;

use crate::config::LabConfig;
use crate::dump::{AttentionDump, DataRef};
use crate::error::{Error, Result};
use crate::run::RunDir;
use crate::{checkpoint, dataset, dump, io, report, run, server};

#[derive(Debug, Parser)]
#[command(name = "reasoning-lens", version, about = "Train, probe and serve tiny vision-language transformers")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file (missing fields take their defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data, initialization, shuffling and t-SNE.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set pipeline.oracle.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for sweeps (1 is the strict sequential mode).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InputArg {
    Oracle,
    Dense,
    Predicted,
}

impl From<InputArg> for InputKind {
    fn from(a: InputArg) -> Self {
        match a {
            InputArg::Oracle => InputKind::Oracle,
            InputArg::Dense => InputKind::Dense,
            InputArg::Predicted => InputKind::Predicted,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory from `gen-data`; generated from the config if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Split to evaluate (default: `analysis.split`).
    #[arg(long)]
    pub split: Option<String>,
    /// Visual input (default: the checkpoint's encoder).
    #[arg(long, value_enum)]
    pub input: Option<InputArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset directory.
    GenData,
    /// Train one model from scratch.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "oracle")]
        input: InputArg,
    },
    /// Oracle, oracle transfer and scratch baseline.
    Transfer {
        #[command(flatten)]
        data: DataArgs,
        /// Also run the visual-block-only and no-retraining variants.
        #[arg(long)]
        ablation: bool,
    },
    /// Evaluate a checkpoint, optionally with pruned heads.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Head addresses such as `vl,0,1`, separated by `;`.
        #[arg(long, value_delimiter = ';')]
        prune: Vec<String>,
        /// Prune every head of a category (L, V, L<-V, V<-L).
        #[arg(long)]
        prune_category: Vec<String>,
    },
    /// Attention and rarity analyses.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Category and random-fraction pruning sweeps.
    Prune {
        #[command(flatten)]
        model: ModelArgs,
        /// Fractions of cross-modal heads (default: `analysis.prune_fractions`).
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Write an attention dump.
    Dump {
        #[command(flatten)]
        model: ModelArgs,
        /// Number of samples (default: `analysis.limit`).
        #[arg(long)]
        limit: Option<usize>,
    },
    /// HTTP inspection server over attention dumps.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// `name=DUMP_DIR` pairs, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// k-number statistics per head (`k_stats.csv`).
    K {
        #[arg(long)]
        dump: PathBuf,
    },
    /// Attention mode labels (`modes.json`).
    Modes {
        #[arg(long)]
        dump: PathBuf,
    },
    /// Median k-ratio per head and function (`funcmatrix.csv`).
    Funcmatrix {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        cross_only: bool,
    },
    /// t-SNE of behavior vectors (`tsne.csv`, `tsne.json`).
    Tsne {
        #[arg(long)]
        dump: PathBuf,
    },
    /// Accuracy on the rarest answers over the alpha grid (`ood.csv`).
    Ood {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Needed-object recall, tail vs head (`recall.csv`).
    Recall {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        split: Option<String>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if c.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let mut config = LabConfig::resolve(c.config.as_deref(), &c.overrides, c.seed)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("lens-out"));
    match cli.command {
        Command::GenData => {
            let ds = Dataset::generate(config.data.clone())?;
            if !ds.warnings.is_empty() {
                eprintln!("warning: {} (and {} more, see manifest.json)", ds.warnings[0], ds.warnings.len() - 1);
            }
            dataset::save(&out, &ds)
        }
        Command::Train { data, input } => {
            let (ds, dir) = resolve_data(&data, &mut config)?;
            let run = RunDir::create(&out, &config, "train", dir.as_deref())?;
            let r = run::train_single(&run, &ds, &config, input.into())?;
            eprintln!("val {:.4} test {:.4}", r.val.overall, r.test.overall);
            Ok(())
        }
        Command::Transfer { data, ablation } => {
            let (ds, dir) = resolve_data(&data, &mut config)?;
            let run = RunDir::create(&out, &config, "transfer", dir.as_deref())?;
            run::transfer(&run, &ds, &config, ablation)?;
            Ok(())
        }
        Command::Eval { model, prune, prune_category } => {
            let ctx = ModelContext::load(&model, &mut config)?;
            let mut heads = Vec::new();
            for p in &prune {
                heads.push(p.parse::<HeadAddress>()?);
            }
            for c in &prune_category {
                let cat: PruneCategory = c.parse()?;
                heads.extend(cat.mask(ctx.model.config()).iter().copied());
            }
            let mask = PruneMask::new(ctx.model.config(), heads)?;
            let (_, m) = evaluate(&ctx.model, &ctx.ds, ctx.samples()?, ctx.input, &mask)?;
            let pruned: Vec<String> = mask.iter().map(|h| h.to_string()).collect();
            io::write_json(
                &out.join("metrics.json"),
                &json!({ "checkpoint": model.checkpoint, "split": ctx.split, "input": ctx.input, "pruned": pruned, "metrics": m }),
            )
        }
        Command::Analyze { what } => analyze(what, &mut config, &out),
        Command::Prune { model, fractions } => {
            let ctx = ModelContext::load(&model, &mut config)?;
            let samples = ctx.samples()?;
            let none = PruneMask::none();
            let (_, base) = evaluate(&ctx.model, &ctx.ds, samples, ctx.input, &none)?;
            let cats = par_map(c.jobs, &PruneCategory::ALL, |cat| {
                let mask = cat.mask(ctx.model.config());
                let (_, m) = evaluate(&ctx.model, &ctx.ds, samples, ctx.input, &mask)?;
                Ok((cat.as_str().to_string(), mask.len(), m))
            })?;
            report::write_prune_categories(&out.join("prune_categories.csv"), &base, &cats)?;
            let fractions = fractions.unwrap_or_else(|| config.analysis.prune_fractions.clone());
            let seeds = config.analysis.prune_seeds.clone();
            let points = par_map(c.jobs, &fractions, |&r| {
                Ok(fraction_curve(&ctx.model, &ctx.ds, samples, ctx.input, &[r], &seeds)?.remove(0))
            })?;
            report::write_prune_fractions(&out.join("prune_fractions.csv"), &points)
        }
        Command::Dump { model, limit } => {
            let ctx = ModelContext::load(&model, &mut config)?;
            let samples = ctx.samples()?;
            let n = limit.or(config.analysis.limit).unwrap_or(samples.len()).min(samples.len());
            let data = DataRef::new(ctx.data_dir.as_deref(), &ctx.ds.config, &ctx.split);
            let d = dump::write(&out, &ctx.model, Some(&model.checkpoint), &ctx.ds, Some(data), &samples[..n], ctx.input)?;
            eprintln!("dumped {} samples x {} heads to {}", d.len(), d.manifest.heads.len(), out.display());
            Ok(())
        }
        Command::Serve { port, host, models } => {
            let mut specs = Vec::new();
            for m in &models {
                let (name, dir) =
                    m.split_once('=').ok_or_else(|| Error::Config(format!("--models entry `{m}` is not name=DUMP_DIR")))?;
                specs.push((name.to_string(), PathBuf::from(dir)));
            }
            let state = server::AppState::load(&specs, &config)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Runtime(e.to_string()))?;
            rt.block_on(server::serve(&format!("{host}:{port}"), state))
        }
    }
}

fn analyze(what: Analysis, config: &mut LabConfig, out: &Path) -> Result<()> {
    let a = config.analysis.clone();
    match what {
        Analysis::K { dump } => {
            let d = AttentionDump::open(&dump)?;
            let table = report::ktable_from_dump(&d, a.theta)?;
            report::write_k_stats(&out.join("k_stats.csv"), &report::head_summaries(&table, &a.modes, a.pooling))
        }
        Analysis::Modes { dump } => {
            let d = AttentionDump::open(&dump)?;
            let table = report::ktable_from_dump(&d, a.theta)?;
            let heads = report::head_summaries(&table, &a.modes, a.pooling);
            report::write_modes(&out.join("modes.json"), a.theta, &a.modes, a.pooling, &heads)
        }
        Analysis::Funcmatrix { dump, cross_only } => {
            let d = AttentionDump::open(&dump)?;
            let ds = d.load_dataset()?;
            let table = report::ktable_from_dump(&d, a.theta)?;
            report::write_function_matrix(&out.join("funcmatrix.csv"), &table, &d.samples(&ds)?, cross_only)
        }
        Analysis::Tsne { dump } => {
            let d = AttentionDump::open(&dump)?;
            let ds = d.load_dataset()?;
            let table = report::ktable_from_dump(&d, a.theta)?;
            let r = report::write_tsne(out, &table, &d.samples(&ds)?, a.tsne_samples, &a.tsne)?;
            eprintln!("t-SNE of {} samples, template purity {:.3}", r.samples, r.purity);
            Ok(())
        }
        Analysis::Ood { model } => {
            let ctx = ModelContext::load(&model, config)?;
            let samples = ctx.samples()?;
            let (preds, m) = evaluate(&ctx.model, &ctx.ds, samples, ctx.input, &PruneMask::none())?;
            report::write_ood(&out.join("ood.csv"), &ood_curve(samples, &preds, &a.alphas)?)?;
            io::write_json(&out.join("ood_metrics.json"), &json!({ "split": ctx.split, "input": ctx.input, "metrics": m }))
        }
        Analysis::Recall { data, split } => {
            let (ds, _) = resolve_data(&data, config)?;
            let split = split.unwrap_or(a.split);
            let t = recall_confounder_check(ds.split(&split)?, ds.config.alpha_star, &a.recall_ious);
            report::write_recall(&out.join("recall.csv"), &t)
        }
    }
}

/// Loads `--data` or generates the configured dataset; the dataset's own
/// configuration then replaces `config.data`.
fn resolve_data(args: &DataArgs, config: &mut LabConfig) -> Result<(Dataset, Option<PathBuf>)> {
    let ds = match &args.data {
        Some(dir) => dataset::load(dir)?,
        None => dataset::load_or_generate(&config.data)?,
    };
    config.data = ds.config.clone();
    Ok((ds, args.data.clone()))
}

struct ModelContext {
    model: VlTransformer,
    ds: Dataset,
    data_dir: Option<PathBuf>,
    split: String,
    input: InputKind,
}

impl ModelContext {
    fn load(args: &ModelArgs, config: &mut LabConfig) -> Result<Self> {
        let (model, _) = checkpoint::load(&args.checkpoint)?;
        let (ds, data_dir) = resolve_data(&args.data, config)?;
        let input = args.input.map(InputKind::from).unwrap_or(InputKind::for_encoder(model.config().encoder));
        if input.encoder() != model.config().encoder {
            return Err(Error::Config(format!("input {input:?} does not fit a {:?} model", model.config().encoder)));
        }
        let split = args.split.clone().unwrap_or_else(|| config.analysis.split.clone());
        ds.split(&split).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { model, ds, data_dir, split, input })
    }

    fn samples(&self) -> Result<&[Sample]> {
        Ok(self.ds.split(&self.split)?)
    }
}

/// Maps `f` over `items` on up to `jobs` scoped threads, keeping order.
pub fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(per).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Runtime("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

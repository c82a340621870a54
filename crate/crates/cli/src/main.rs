use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sgg_core::config::RunConfig;
use sgg_core::decoder::VariantTag;
use sgg_core::runner::{
    ablate, ablation_header, dump_attention, evaluate_split, load_model, param_table_text, save_report, train, Data,
    CHECKPOINT_FILE,
};

/// Scene graph generation with task-specific triplet queries.
#[derive(Parser)]
#[command(name = "sgg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file; a `preset=` line selects the base preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given.
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    /// Override a config key (repeatable), e.g. `--set steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides the `out` key).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Model checkpoint; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Synthetic split to use.
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the checkpoint and step log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Do not echo step lines to stdout.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and write `metrics_<split>.txt`.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ck: CheckpointArgs,
    },
    /// Train and evaluate a grid of decoder variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated variants.
        #[arg(long, default_value = "sta,sts,tts", value_delimiter = ',')]
        variants: Vec<String>,
        /// Comma-separated query-group counts.
        #[arg(long, default_value = "1", value_delimiter = ',')]
        groups: Vec<usize>,
    },
    /// Print symbolic parameter counts.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export last-layer cross-attention and the top triplets for one scene.
    DumpAttention {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Scene index within the split.
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

impl ConfigArgs {
    /// Preset or file, then `--set` overrides, then `--out`.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_text(&text)?
            }
            None => RunConfig::preset(self.preset.as_deref().unwrap_or("desk"))?,
        };
        cfg.apply(self.overrides.iter().map(String::as_str))?;
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config stored in the checkpoint unless a file or preset is given.
    fn resolve_with_checkpoint(&self, ck: &CheckpointArgs) -> Result<(RunConfig, sgg_core::model::SggModel)> {
        let explicit = (self.config.is_some() || self.preset.is_some()).then(|| self.resolve()).transpose()?;
        let out = self.out.clone().or_else(|| explicit.as_ref().map(|c| c.out.clone()));
        let path = match (&ck.checkpoint, &out) {
            (Some(p), _) => p.clone(),
            (None, Some(o)) => o.join(CHECKPOINT_FILE),
            (None, None) => RunConfig::desk().out.join(CHECKPOINT_FILE),
        };
        let (mut cfg, model) = load_model(&path, explicit, &self.overrides)
            .with_context(|| format!("loading {}", path.display()))?;
        if let Some(o) = out {
            cfg.out = o;
        }
        Ok((cfg, model))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, quiet } => {
            let cfg = cfg.resolve()?;
            let data = Data::new(&cfg)?;
            train(&cfg, &data, Some(&cfg.out), &mut |s| {
                if !quiet {
                    println!("{}", s.to_line());
                }
            })?;
            log::info!("wrote {}", cfg.out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { cfg, ck } => {
            let (cfg, model) = cfg.resolve_with_checkpoint(&ck)?;
            let data = Data::new(&cfg)?;
            let (split, images) = data.split(&ck.split)?;
            let report = evaluate_split(&model, split, images, &data.train.label_triples(), &cfg)?;
            let path = save_report(&cfg.out, &ck.split, &report)?;
            print!("{}", report.to_text());
            log::info!("wrote {}", path.display());
        }
        Command::Ablate { cfg, variants, groups } => {
            let cfg = cfg.resolve()?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<VariantTag>())
                .collect::<sgg_core::Result<Vec<_>>>()?;
            if groups.contains(&0) {
                return Err(sgg_core::Error::Config("group counts must be positive".into()).into());
            }
            let data = Data::new(&cfg)?;
            let mut table = ablation_header();
            println!("{table}");
            ablate(&cfg, &data, &variants, &groups, &mut |row| {
                let line = row.to_line();
                println!("{line}");
                table.push('\n');
                table.push_str(&line);
            })?;
            table.push('\n');
            write(&cfg.out.join("ablation.txt"), &table)?;
        }
        Command::Params { cfg } => {
            print!("{}", param_table_text(&cfg.resolve()?)?);
        }
        Command::DumpAttention { cfg, ck, scene } => {
            let (cfg, model) = cfg.resolve_with_checkpoint(&ck)?;
            let data = Data::new(&cfg)?;
            let (split, images) = data.split(&ck.split)?;
            let image = images.get(scene).ok_or_else(|| {
                sgg_core::Error::Config(format!("scene {scene} outside the {} split of {} scenes", ck.split, images.len()))
            })?;
            let dump = dump_attention(&model, image, &cfg, split)?;
            let (maps, text) = dump.save(&cfg.out)?;
            for line in &dump.top {
                println!("{line}");
            }
            log::info!("wrote {} and {}", maps.display(), text.display());
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<sgg_core::Error>() {
                Some(sgg_core::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

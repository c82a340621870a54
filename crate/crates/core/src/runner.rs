//! Training, evaluation, ablation and inspection pipelines.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::config::{RunConfig, Switch};
use crate::datasets::{build_splits, DatasetSplit, SyntheticSpec};
use crate::decoder::{count_parameters, VariantTag, TASKS};
use crate::encoder::ImageBatch;
use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::matching::{one_to_many_match, Assignment, predicate_class_weights, triplet_loss, LossBreakdown, LossConfig, TaskLoss};
use crate::metrics::{decode_queries, evaluate, score_queries, EvalSettings, ImageEval, MetricReport, QueryOutput};
use crate::model::{SggModel, MODEL_FORMAT};
use crate::nn::Module;
use crate::optim::AdamW;
use crate::rng::{derive, SeededRng};
use crate::tensor::checkpoint::Checkpoint;
use crate::Tensor;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.txt";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Synthetic splits with their rendered images.
#[derive(Debug, Clone)]
pub struct Data {
    pub spec: SyntheticSpec,
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub train_images: Vec<Tensor>,
    pub test_images: Vec<Tensor>,
}

impl Data {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let spec = cfg.spec();
        let (train, test) = build_splits(&spec, cfg.train_scenes, cfg.test_scenes)?;
        let train_images = train.images(&spec)?;
        let test_images = test.images(&spec)?;
        Ok(Self {
            spec,
            train,
            test,
            train_images,
            test_images,
        })
    }

    pub fn split(&self, name: &str) -> Result<(&DatasetSplit, &[Tensor])> {
        match name {
            "train" => Ok((&self.train, &self.train_images)),
            "test" => Ok((&self.test, &self.test_images)),
            _ => Err(Error::Config(format!("unknown split '{name}' (expected train or test)"))),
        }
    }
}

fn image_batch(images: &[Tensor], idx: &[usize]) -> Result<ImageBatch> {
    let parts: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
    ImageBatch::new(Tensor::stack(&parts, 0)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub tasks: [TaskLoss; 3],
    /// Matched query/ground-truth pairs in the batch.
    pub pairs: usize,
    /// Ground-truth triplets in the batch.
    pub gt: usize,
    pub grad_norm: f64,
    pub scenes: Vec<u64>,
    pub assignment: Assignment,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        let mut s = format!("step={} loss={:.6}", self.step, self.loss);
        for (name, t) in TASKS.iter().zip(&self.tasks) {
            write!(s, " {name}.class={:.6} {name}.l1={:.6} {name}.giou={:.6}", t.class, t.l1, t.giou)
                .expect("writing to a String");
        }
        write!(s, " pairs={} gt={} grad_norm={:.6}", self.pairs, self.gt, self.grad_norm).expect("writing to a String");
        s
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SggModel,
    pub log: Vec<StepLog>,
}

/// Writes the offending batch next to the run outputs and returns the error.
fn dump_nonfinite(
    out: Option<&Path>,
    step: usize,
    batch: &ImageBatch,
    scenes: &[u64],
    loss: &LossBreakdown,
) -> Error {
    let mut msg = format!("non-finite loss at step {step} (scenes {scenes:?})");
    if let Some(dir) = out {
        let path = dir.join(format!("nonfinite_step{step}.ckpt"));
        let mut meta = format!("sgg-nonfinite 1\nstep={step}\nscenes={scenes:?}\n");
        for (name, t) in TASKS.iter().zip(&loss.tasks) {
            writeln!(meta, "{name}.class={} {name}.l1={} {name}.giou={}", t.class, t.l1, t.giou)
                .expect("writing to a String");
        }
        let mut ck = Checkpoint::new(meta);
        ck.push("images", &batch.0);
        match ck.save(&path) {
            Ok(()) => write!(msg, "; batch written to {}", path.display()).expect("writing to a String"),
            Err(e) => write!(msg, "; batch dump failed: {e}").expect("writing to a String"),
        }
    }
    Error::Numeric(msg)
}

/// Checkpoint metadata for a model trained with `cfg`: its config without
/// the output directory, so relocating a run does not change the bytes.
pub fn checkpoint_metadata(cfg: &RunConfig) -> String {
    cfg.entries()
        .into_iter()
        .filter(|(k, _)| *k != "out")
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

/// Step-by-step training state over a fixed dataset.
pub struct Trainer<'a> {
    pub cfg: RunConfig,
    pub model: SggModel,
    data: &'a Data,
    opt: AdamW,
    loss_cfg: LossConfig,
    graphs: Vec<SceneGraph>,
    rng: SeededRng,
    order: Vec<usize>,
    out: Option<PathBuf>,
    pub step: usize,
}

impl<'a> Trainer<'a> {
    /// Fresh model and optimizer; `out` receives non-finite batch dumps.
    pub fn new(cfg: &RunConfig, data: &'a Data, out: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let mut loss_cfg = cfg.loss();
        if cfg.reweight {
            loss_cfg.predicate_weights = Some(predicate_class_weights(
                &data.train.predicate_freq,
                cfg.alpha,
                cfg.beta,
                cfg.weight_cap,
            ));
        }
        Ok(Self {
            cfg: cfg.clone(),
            model: SggModel::new(&cfg.model(), cfg.seed)?,
            data,
            opt: AdamW::new(cfg.optimizer()),
            loss_cfg,
            graphs: data.train.graphs(),
            rng: derive(cfg.seed, 3),
            order: Vec::new(),
            out: out.map(Path::to_path_buf),
            step: 0,
        })
    }

    /// Next batch of a reshuffled pass over the training scenes.
    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.graphs.len();
        let bs = self.cfg.batch_size.min(n);
        if self.order.len() < bs {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut self.rng);
            self.order.extend(perm);
        }
        self.order.drain(..bs).collect()
    }

    pub fn step(&mut self) -> Result<StepLog> {
        self.step += 1;
        let idx = self.next_batch();
        let batch = image_batch(&self.data.train_images, &idx)?;
        let gt: Vec<SceneGraph> = idx.iter().map(|&i| self.graphs[i].clone()).collect();
        let scenes: Vec<u64> = idx.iter().map(|&i| self.data.train.scenes[i].id).collect();

        let preds = self.model.forward(&batch)?;
        let asg = one_to_many_match(&preds.detach(), &gt, &self.loss_cfg.cost)?;
        let loss = triplet_loss(&preds, &gt, &asg, &self.loss_cfg)?;
        let value = loss.total.item()?;
        if !value.is_finite() {
            return Err(dump_nonfinite(self.out.as_deref(), self.step, &batch, &scenes, &loss));
        }
        loss.total.backward()?;
        let grad_norm = self.opt.step(&mut self.model)?;
        Ok(StepLog {
            step: self.step,
            loss: value,
            tasks: loss.tasks,
            pairs: asg.pair_count(),
            gt: gt.iter().map(SceneGraph::len).sum(),
            grad_norm,
            scenes,
            assignment: asg,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(&checkpoint_metadata(&self.cfg))
    }
}

/// Trains from scratch for `cfg.steps`; with `out` set, writes the config, a
/// per-step log and the final checkpoint there.
pub fn train(
    cfg: &RunConfig,
    data: &Data,
    out: Option<&Path>,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, data, out)?;
    if let Some(dir) = out {
        write_file(&dir.join(CONFIG_FILE), cfg.to_text())?;
    }
    let mut log = Vec::with_capacity(cfg.steps);
    let mut text = String::new();
    for _ in 0..cfg.steps {
        let entry = trainer.step()?;
        log::debug!("{}", entry.to_line());
        on_step(&entry);
        text.push_str(&entry.to_line());
        text.push('\n');
        log.push(entry);
    }
    if let Some(dir) = out {
        write_file(&dir.join(TRAIN_LOG_FILE), &text)?;
        trainer.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
    })
}

/// Rebuilds a model from a checkpoint. The stored configuration is used
/// unless `cfg` is given; `overrides` apply on top either way.
pub fn load_model(path: &Path, cfg: Option<RunConfig>, overrides: &[String]) -> Result<(RunConfig, SggModel)> {
    let ck = Checkpoint::load(path)?;
    let mut cfg = match cfg {
        Some(c) => c,
        None => {
            let body = ck
                .metadata
                .strip_prefix(MODEL_FORMAT)
                .ok_or_else(|| Error::Checkpoint(format!("{}: not a model checkpoint", path.display())))?;
            RunConfig::from_text(body)?
        }
    };
    cfg.apply(overrides.iter().map(String::as_str))?;
    cfg.validate()?;
    let model = SggModel::from_checkpoint(&cfg.model(), &ck)?;
    Ok((cfg, model))
}

/// Decoded last-layer outputs of query group 0 for every image.
pub fn predict(model: &SggModel, images: &[Tensor], batch_size: usize) -> Result<Vec<Vec<QueryOutput>>> {
    let mut out = Vec::with_capacity(images.len());
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let preds = model.forward(&image_batch(images, chunk)?)?.group(0)?;
        out.extend(decode_queries(preds.last())?);
    }
    Ok(out)
}

/// Metrics of `model` on a split; zero-shot triples are those absent from `seen`.
pub fn evaluate_split(
    model: &SggModel,
    split: &DatasetSplit,
    images: &[Tensor],
    seen: &HashSet<(usize, usize, usize)>,
    cfg: &RunConfig,
) -> Result<MetricReport> {
    let queries = predict(model, images, cfg.batch_size)?;
    let evals = queries
        .iter()
        .zip(split.graphs())
        .map(|(q, g)| ImageEval::from_queries(q, g, cfg.top_k_predicates))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&evals, seen, &EvalSettings::new(split.predicate_classes.len())))
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: VariantTag,
    pub relation_queries: bool,
    pub triplet_attention: bool,
    pub groups: usize,
    pub params: usize,
    pub report: MetricReport,
}

pub const ABLATION_METRICS: [&str; 10] = [
    "R@20", "R@50", "R@100", "mR@20", "mR@50", "mR@100", "hR@20", "hR@50", "hR@100", "AP50",
];

/// The configurations swept by an ablation: every variant, with and without
/// relation queries and triplet attention where applicable, at each group count.
pub fn ablation_grid(base: &RunConfig, variants: &[VariantTag], groups: &[usize]) -> Vec<RunConfig> {
    let mut out = Vec::new();
    for &v in variants {
        let switches: &[(bool, bool)] = match v {
            VariantTag::Sta => &[(false, false)],
            _ => &[(false, false), (true, false), (false, true), (true, true)],
        };
        for &(rq, tsa) in switches {
            for &k in groups {
                let mut c = base.clone();
                c.variant = v;
                c.relation_queries = if rq { Switch::On } else { Switch::Off };
                c.triplet_attention = if tsa { Switch::On } else { Switch::Off };
                c.groups = k;
                out.push(c);
            }
        }
    }
    out
}

pub fn ablate(
    base: &RunConfig,
    data: &Data,
    variants: &[VariantTag],
    groups: &[usize],
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let seen = data.train.label_triples();
    let mut rows = Vec::new();
    for cfg in ablation_grid(base, variants, groups) {
        let trained = train(&cfg, data, None, &mut |_| {})?;
        let report = evaluate_split(&trained.model, &data.test, &data.test_images, &seen, &cfg)?;
        let m = cfg.model();
        let row = AblationRow {
            variant: cfg.variant,
            relation_queries: m.decoder.relation_queries,
            triplet_attention: m.decoder.triplet_attention,
            groups: cfg.groups,
            params: trained.model.num_params(),
            report,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.2}"))
}

pub fn ablation_header() -> String {
    let mut s = format!("{:<8}{:<5}{:<5}{:<4}{:>10}", "variant", "rq", "tsa", "K", "params");
    for m in ABLATION_METRICS {
        write!(s, "{m:>9}").expect("writing to a String");
    }
    s
}

impl AblationRow {
    pub fn to_line(&self) -> String {
        let yn = |b: bool| if b { "yes" } else { "no" };
        let mut s = format!(
            "{:<8}{:<5}{:<5}{:<4}{:>10}",
            self.variant.as_str(),
            yn(self.relation_queries),
            yn(self.triplet_attention),
            self.groups,
            self.params
        );
        for m in ABLATION_METRICS {
            write!(s, "{:>9}", fmt_metric(self.report.get(m))).expect("writing to a String");
        }
        s
    }
}

/// Symbolic parameter counts per component, without building the model.
pub fn param_table(cfg: &RunConfig) -> Result<Vec<(String, usize)>> {
    cfg.model().validate()?;
    let m = cfg.model();
    let mut rows = vec![("encoder".to_string(), m.encoder.param_count())];
    rows.extend(count_parameters(&m.decoder).rows.into_iter().map(|(k, v)| (format!("decoder.{k}"), v)));
    let total = rows.iter().map(|(_, v)| v).sum();
    rows.push(("total".into(), total));
    Ok(rows)
}

pub fn param_table_text(cfg: &RunConfig) -> Result<String> {
    let m = cfg.model();
    let mut s = format!(
        "variant={} d={} queries={} groups={} relation_queries={} triplet_attention={}\n",
        m.decoder.variant,
        m.decoder.d,
        m.decoder.queries,
        m.decoder.groups,
        m.decoder.relation_queries,
        m.decoder.triplet_attention
    );
    for (k, v) in param_table(cfg)? {
        writeln!(s, "{k:<28}{v:>12}").expect("writing to a String");
    }
    Ok(s)
}

/// Last-layer cross-attention of group 0 for one image plus its best triplets.
#[derive(Debug, Clone)]
pub struct AttentionDump {
    /// `(streams, N, HW)`; one stream for the shared-query variant.
    pub maps: Tensor,
    pub streams: Vec<String>,
    pub grid: (usize, usize),
    pub top: Vec<String>,
}

pub fn dump_attention(model: &SggModel, image: &Tensor, cfg: &RunConfig, names: &DatasetSplit) -> Result<AttentionDump> {
    let batch = ImageBatch::new(Tensor::stack(&[image], 0)?)?;
    let (preds, trace) = model.forward_traced(&batch)?;
    let n = model.cfg.decoder.queries;
    let maps = trace
        .cross_attention
        .iter()
        .map(|w| w.narrow(1, 0, n)?.reshape(&[n, w.shape()[2]]))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = maps.iter().collect();
    let maps = Tensor::stack(&refs, 0)?.detach();
    let streams = if maps.shape()[0] == 1 {
        vec!["shared".to_string()]
    } else {
        TASKS.iter().map(|s| s.to_string()).collect()
    };
    let shape = image.shape();
    let p = model.cfg.encoder.patch;
    let grid = (shape[1] / p, shape[2] / p);
    if grid.0 * grid.1 != maps.shape()[2] {
        return Err(Error::Dimension(format!(
            "attention over {} tokens does not fit a {}x{} grid",
            maps.shape()[2],
            grid.0,
            grid.1
        )));
    }
    let queries = decode_queries(preds.group(0)?.last())?;
    let name = |list: &[String], i: usize| list.get(i).cloned().unwrap_or_else(|| i.to_string());
    let top = score_queries(&queries[0], cfg.top_k_predicates)?
        .into_iter()
        .take(10)
        .map(|t| {
            let b = |x: &crate::graph::BBox| x.corners().map(|v| format!("{v:.3}")).join(",");
            format!(
                "query={} score={:.6} subject={} [{}] predicate={} object={} [{}]",
                t.query,
                t.score,
                name(&names.entity_classes, t.subject),
                b(&t.boxes[0]),
                name(&names.predicate_classes, t.predicate),
                name(&names.entity_classes, t.object),
                b(&t.boxes[1]),
            )
        })
        .collect();
    Ok(AttentionDump {
        maps,
        streams,
        grid,
        top,
    })
}

impl AttentionDump {
    /// Writes `attention.ckpt` and `top_triplets.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let meta = format!(
            "sgg-attention 1\nstreams={}\ngrid={}x{}\n",
            self.streams.join(","),
            self.grid.0,
            self.grid.1
        );
        let mut ck = Checkpoint::new(meta);
        ck.push("cross_attention", &self.maps);
        let a = dir.join("attention.ckpt");
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        ck.save(&a)?;
        let t = dir.join("top_triplets.txt");
        write_file(&t, self.top.iter().map(|l| format!("{l}\n")).collect::<String>())?;
        Ok((a, t))
    }
}

/// Writes a metric report as `metrics_<split>.txt` under `dir`.
pub fn save_report(dir: &Path, split: &str, report: &MetricReport) -> Result<PathBuf> {
    let path = dir.join(format!("metrics_{split}.txt"));
    write_file(&path, report.to_text())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_loss_dumps_the_batch() {
        let dir = tempfile::tempdir().unwrap();
        let images = Tensor::new((0..2 * 3 * 4 * 4).map(|i| i as f64 / 96.0).collect(), &[2, 3, 4, 4]).unwrap();
        let batch = ImageBatch::new(images.clone()).unwrap();
        let mut tasks = [TaskLoss::default(); 3];
        tasks[2].class = f64::NAN;
        let loss = LossBreakdown {
            total: Tensor::scalar(f64::NAN),
            tasks,
            matches: 4,
        };
        let err = dump_nonfinite(Some(dir.path()), 7, &batch, &[11, 12], &loss);
        let Error::Numeric(msg) = err else { panic!("expected numeric error, got {err:?}") };
        assert!(msg.contains("step 7") && msg.contains("[11, 12]"), "{msg}");
        let ck = Checkpoint::load(dir.path().join("nonfinite_step7.ckpt")).unwrap();
        assert_eq!(ck.get("images").unwrap().data(), images.data());
        assert!(ck.metadata.contains("predicate.class=NaN"));
    }
}

//! Stage implementations over an artifact directory.
//!
//! Every stage that computes something writes a stamp under `.stamps/`: a
//! hash of the config sections and input artifacts it read, plus the
//! content hashes of what it wrote. A stage whose stamp still matches is
//! skipped and its artifacts are loaded instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adaptwin::assemble::{MixedModel, SlotKind};
use adaptwin::compress::{accounting_for_plan, CompressionPlan, LayerPlan, SizeReport};
use adaptwin::finetune::{finetune_all_layers, TrainReport};
use adaptwin::model::{HiddenStatePairSet, LayerStack, Model};
use adaptwin::pipeline::{
    capture_pairs, compress_svd_only, eval_report, evaluate, gen_toy, layer_objectives, quantize_slots,
    rank_sweep, successive_sweep, train_toy, AccountingSummary, DistributionEval, EvalInputs, EvalReport,
    LayerObjective, RunConfig, RunProvenance, StageTiming, SweepReport, Task, ToyTrainReport,
};
use adaptwin::store::{
    content_hash, load_checkpoint, load_pairs, load_report, read_header, save_checkpoint, save_pairs,
    save_report, Dtype, PairReader, CHECKPOINT_KIND, PAIRS_KIND, REPORT_KIND,
};
use adaptwin::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const SOURCE: &str = "source.adpt";
const TRAINED: &str = "trained.adpt";
const SVD: &str = "svd.adpt";
const FINETUNED: &str = "finetuned.adpt";
const FINETUNE_REPORT: &str = "finetune.adpt";

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: Some(path.to_path_buf()),
        source,
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn stage_err(stage: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            source: Box::new(other),
        },
    }
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(stage_err(stage));
    timings.push(StageTiming {
        stage: stage.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    key: String,
    outputs: BTreeMap<String, String>,
}

/// Rank plan with its accounting.
#[derive(Debug, Serialize, Deserialize)]
struct PlanReport {
    plan: CompressionPlan,
    accounting: AccountingSummary,
}

/// Metrics of one checkpoint against the source model.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEval {
    checkpoint_hash: String,
    provenance: RunProvenance,
    objectives: Vec<LayerObjective>,
    evals: Vec<DistributionEval>,
    accounting: AccountingSummary,
}

struct Source {
    model: Model,
    hash: String,
    task: Option<Task>,
}

pub struct Workspace {
    cfg: RunConfig,
    out: PathBuf,
    force: bool,
}

impl Workspace {
    /// Creates the artifact directory and records the resolved config in it.
    pub fn open(cfg: RunConfig, force: bool) -> Result<Self> {
        let out = cfg.paths.out_dir.clone();
        std::fs::create_dir_all(out.join(".stamps")).map_err(io_at(&out))?;
        let config_path = out.join("config.toml");
        std::fs::write(&config_path, cfg.to_toml()).map_err(io_at(&config_path))?;
        Ok(Self { cfg, out, force })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn pair_name(layer: usize) -> String {
        format!("pairs/layer{layer}.adpt")
    }

    fn key(stage: &str, inputs: &impl Serialize) -> String {
        let json = serde_json::to_vec(&(stage, inputs)).expect("stage inputs serialize");
        hex_digest(&json)
    }

    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.out.join(".stamps").join(format!("{stage}.json"))
    }

    fn fresh(&self, stage: &str, key: &str) -> bool {
        if self.force {
            return false;
        }
        let Ok(text) = std::fs::read_to_string(self.stamp_path(stage)) else {
            return false;
        };
        let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
            return false;
        };
        stamp.key == key
            && stamp
                .outputs
                .iter()
                .all(|(name, hash)| content_hash(&self.path(name)).is_ok_and(|h| h == *hash))
    }

    fn stamp(&self, stage: &str, key: &str, outputs: &[String]) -> Result<()> {
        let mut map = BTreeMap::new();
        for name in outputs {
            map.insert(name.clone(), content_hash(&self.path(name))?);
        }
        let stamp = Stamp {
            key: key.to_string(),
            outputs: map,
        };
        let path = self.stamp_path(stage);
        let text = serde_json::to_string_pretty(&stamp).expect("stamp serializes");
        std::fs::write(&path, text).map_err(io_at(&path))
    }

    fn provenance(&self, source_hash: &str) -> RunProvenance {
        RunProvenance {
            config_hash: self.cfg.config_hash(),
            source_hash: source_hash.to_string(),
            seed: self.cfg.seed,
        }
    }

    /// `paths.source`, else a trained toy model, else the generated one.
    fn source_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.cfg.paths.source {
            return Ok(p.clone());
        }
        let trained = self.path(TRAINED);
        if trained.exists() {
            return Ok(trained);
        }
        let generated = self.path(SOURCE);
        if generated.exists() {
            return Ok(generated);
        }
        Err(Error::Input(format!(
            "no source checkpoint in {}; run `adaptwin gen-toy` first or pass --source",
            self.out.display()
        )))
    }

    fn load_source(&self) -> Result<Source> {
        let path = self.source_path()?;
        let mixed = load_checkpoint(&path)?;
        if mixed.compressed_slots().iter().any(Option::is_some) {
            return Err(Error::Input(format!("{} holds compressed layers; a source must be original", path.display())));
        }
        let task = mixed.provenance.task;
        let model = mixed.source_model();
        if model.config != self.cfg.model_config()? {
            return Err(Error::Config(format!(
                "source {} does not match the configured model section",
                path.display()
            )));
        }
        Ok(Source {
            model,
            hash: content_hash(&path)?,
            task,
        })
    }

    pub fn gen_toy(&self) -> Result<PathBuf> {
        let path = self.path(SOURCE);
        let key = Self::key("gen-toy", &(&self.cfg.model, self.cfg.seed));
        if self.fresh("gen-toy", &key) {
            println!("gen-toy: up to date ({SOURCE})");
            return Ok(path);
        }
        let model = gen_toy(&self.cfg)?;
        let mut mixed = MixedModel::from_model(model);
        mixed.provenance.seed = Some(self.cfg.seed);
        save_checkpoint(&path, &mixed, Dtype::F32)?;
        self.stamp("gen-toy", &key, &[SOURCE.to_string()])?;
        let bytes = std::fs::metadata(&path).map_err(io_at(&path))?.len();
        println!(
            "gen-toy: wrote {SOURCE} ({} parameters, {bytes} bytes, hash {})",
            mixed.source_model().param_count(),
            short(&content_hash(&path)?)
        );
        Ok(path)
    }

    pub fn train_toy(&self) -> Result<PathBuf> {
        let base = match &self.cfg.paths.source {
            Some(p) => p.clone(),
            None => self.gen_toy()?,
        };
        let base_hash = content_hash(&base)?;
        let path = self.path(TRAINED);
        let key = Self::key(
            "train-toy",
            &(&self.cfg.toy, &self.cfg.data, self.cfg.seed, &base_hash),
        );
        if self.fresh("train-toy", &key) {
            let report: ToyTrainReport = load_report(&self.path("train-toy.adpt"), "train-toy")?;
            println!("train-toy: up to date ({TRAINED})");
            print!("{}", toy_table(&report));
            return Ok(path);
        }
        let mixed = load_checkpoint(&base)?;
        let (model, report) = train_toy(mixed.source_model(), &self.cfg.toy, &self.cfg.data, self.cfg.seed)?;
        let mut trained = MixedModel::from_model(model);
        trained.provenance.source_hash = base_hash;
        trained.provenance.seed = Some(self.cfg.seed);
        trained.provenance.task = Some(report.task);
        save_checkpoint(&path, &trained, Dtype::F32)?;
        save_report(&self.path("train-toy.adpt"), "train-toy", &report)?;
        self.stamp("train-toy", &key, &[TRAINED.to_string(), "train-toy.adpt".to_string()])?;
        println!("train-toy: wrote {TRAINED}");
        print!("{}", toy_table(&report));
        Ok(path)
    }

    pub fn capture(&self) -> Result<Vec<HiddenStatePairSet>> {
        let src = self.load_source()?;
        self.capture_from(&src)
    }

    fn capture_from(&self, src: &Source) -> Result<Vec<HiddenStatePairSet>> {
        let n = src.model.layers.len();
        let names: Vec<String> = (0..n).map(Self::pair_name).collect();
        let key = Self::key("capture", &(&self.cfg.data, self.cfg.seed, &src.hash));
        if self.fresh("capture", &key) {
            println!("capture: up to date ({n} pair sets)");
            return names.iter().map(|name| load_pairs(&self.path(name))).collect();
        }
        let dir = self.path("pairs");
        std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        let sets = capture_pairs(&src.model, &self.cfg, &src.hash)?;
        for (set, name) in sets.iter().zip(&names) {
            save_pairs(&self.path(name), set, Dtype::F64)?;
        }
        self.stamp("capture", &key, &names)?;
        println!(
            "capture: wrote {n} pair sets of {} samples (narrow inputs)",
            sets.first().map_or(0, |s| s.len())
        );
        Ok(sets)
    }

    pub fn plan(&self) -> Result<()> {
        let plan = self.write_plan()?;
        print!("{}", plan_table(&plan));
        Ok(())
    }

    fn write_plan(&self) -> Result<PlanReport> {
        let dims = self.cfg.model_config()?.dims;
        let plan = self.cfg.compression_plan()?;
        let report = PlanReport {
            accounting: AccountingSummary::from(&accounting_for_plan(&dims, &plan)),
            plan,
        };
        save_report(&self.path("plan.adpt"), "plan", &report)?;
        Ok(report)
    }

    pub fn compress(&self) -> Result<MixedModel> {
        let src = self.load_source()?;
        self.compress_from(&src)
    }

    fn compress_from(&self, src: &Source) -> Result<MixedModel> {
        let path = self.path(SVD);
        let key = Self::key("compress", &(&self.cfg.plan, &self.cfg.train, self.cfg.seed, &src.hash));
        if self.fresh("compress", &key) {
            println!("compress: up to date ({SVD})");
            return load_checkpoint(&path);
        }
        let plan = self.cfg.compression_plan()?;
        let mut mixed = compress_svd_only(&src.model, &plan, &self.cfg.train_config())?;
        self.set_provenance(&mut mixed, src, &plan);
        save_checkpoint(&path, &mixed, Dtype::F64)?;
        self.stamp("compress", &key, &[SVD.to_string()])?;
        println!("compress: wrote {SVD}");
        print!("{}", size_table(&mixed.size_report()));
        Ok(mixed)
    }

    fn set_provenance(&self, mixed: &mut MixedModel, src: &Source, plan: &CompressionPlan) {
        mixed.provenance.source_hash = src.hash.clone();
        mixed.provenance.plan = Some(plan.clone());
        mixed.provenance.seed = Some(self.cfg.seed);
        mixed.provenance.config_hash = self.cfg.config_hash();
        mixed.provenance.task = src.task;
    }

    pub fn finetune(&self) -> Result<(MixedModel, Vec<TrainReport>)> {
        let src = self.load_source()?;
        let pairs = self.capture_from(&src)?;
        self.finetune_from(&src, &pairs)
    }

    fn finetune_from(&self, src: &Source, pairs: &[HiddenStatePairSet]) -> Result<(MixedModel, Vec<TrainReport>)> {
        let path = self.path(FINETUNED);
        let pair_hashes = (0..pairs.len())
            .map(|j| content_hash(&self.path(&Self::pair_name(j))))
            .collect::<Result<Vec<_>>>()?;
        let key = Self::key(
            "finetune",
            &(&self.cfg.plan, &self.cfg.train, self.cfg.seed, &src.hash, &pair_hashes),
        );
        if self.fresh("finetune", &key) {
            let histories: Vec<TrainReport> = load_report(&self.path(FINETUNE_REPORT), "finetune")?;
            println!("finetune: up to date ({FINETUNED})");
            return Ok((load_checkpoint(&path)?, histories));
        }
        let plan = self.cfg.compression_plan()?;
        let start = Instant::now();
        let (mut mixed, histories) =
            finetune_all_layers(&src.model, &plan, pairs, &self.cfg.train_config(), self.cfg.schedule())?;
        self.set_provenance(&mut mixed, src, &plan);
        save_checkpoint(&path, &mixed, Dtype::F64)?;
        save_report(&self.path(FINETUNE_REPORT), "finetune", &histories)?;
        self.stamp("finetune", &key, &[FINETUNED.to_string(), FINETUNE_REPORT.to_string()])?;
        println!("finetune: wrote {FINETUNED} in {:.1} s", start.elapsed().as_secs_f64());
        print!("{}", finetune_table(&histories));
        Ok((mixed, histories))
    }

    pub fn quantize(&self) -> Result<()> {
        let (mixed, _) = self.finetune()?;
        let before = mixed.size_report();
        let quantized = quantize_slots(&mixed)?;
        save_checkpoint(&self.path("quantized.adpt"), &quantized, Dtype::F64)?;
        let after = quantized.size_report();
        println!(
            "quantize: wrote quantized.adpt; byte fraction {:.4} → {:.4}",
            before.byte_fraction(),
            after.byte_fraction()
        );
        Ok(())
    }

    pub fn assemble(&self, from: Option<PathBuf>, layers: Option<Vec<usize>>) -> Result<()> {
        let mixed = match from {
            Some(p) => load_checkpoint(&p)?,
            None => self.finetune()?.0,
        };
        let active = match layers {
            Some(l) => l,
            None => (0..mixed.layer_count()).filter(|&i| mixed.compressed(i).is_some()).collect(),
        };
        let assembled = mixed.with_active_set(&active)?;
        save_checkpoint(&self.path("assembled.adpt"), &assembled, Dtype::F64)?;
        println!("assemble: wrote assembled.adpt with compressed layers {active:?}");
        print!("{}", size_table(&assembled.size_report()));
        Ok(())
    }

    pub fn eval(&self) -> Result<EvalReport> {
        let src = self.load_source()?;
        let pairs = self.capture_from(&src)?;
        let svd = self.compress_from(&src)?;
        let (ft, histories) = self.finetune_from(&src, &pairs)?;
        let report = eval_report(EvalInputs {
            cfg: &self.cfg,
            source: &src.model,
            source_hash: &src.hash,
            pairs: &pairs,
            plan: &self.cfg.compression_plan()?,
            svd_only: &svd,
            finetuned: &ft,
            histories,
            task: src.task,
        })?;
        save_report(&self.path("eval.adpt"), "eval", &report)?;
        print!("{}", report.table());
        Ok(report)
    }

    pub fn eval_checkpoint(&self, path: &Path) -> Result<()> {
        let src = self.load_source()?;
        let pairs = self.capture_from(&src)?;
        let candidate = load_checkpoint(path)?;
        let report = CheckpointEval {
            checkpoint_hash: content_hash(path)?,
            provenance: self.provenance(&src.hash),
            objectives: layer_objectives(&candidate, &pairs)?,
            evals: evaluate(&src.model, &candidate, &self.cfg, src.task)?,
            accounting: AccountingSummary::from(&candidate.size_report()),
        };
        let stem = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        save_report(&self.path(&format!("eval-{stem}.adpt")), "checkpoint-eval", &report)?;
        print!("{}", checkpoint_eval_table(&report));
        Ok(())
    }

    pub fn sweep(&self, ranks: bool) -> Result<()> {
        let src = self.load_source()?;
        let pairs = self.capture_from(&src)?;
        let (ft, _) = self.finetune_from(&src, &pairs)?;
        let report = SweepReport {
            provenance: self.provenance(&src.hash),
            successive: successive_sweep(&ft, &pairs, &self.cfg)?,
            ranks: if ranks {
                rank_sweep(&src.model, &pairs, &self.cfg)?
            } else {
                Vec::new()
            },
        };
        save_report(&self.path("sweep.adpt"), "sweep", &report)?;
        print!("{}", report.table());
        Ok(())
    }

    pub fn pipeline(&self) -> Result<()> {
        let mut t = Vec::new();
        let src = timed(&mut t, "config", || {
            self.cfg.validate()?;
            self.load_source()
        })?;
        let pairs = timed(&mut t, "capture", || self.capture_from(&src))?;
        let plan = timed(&mut t, "plan", || self.write_plan())?;
        let svd = timed(&mut t, "compress", || self.compress_from(&src))?;
        let (ft, histories) = timed(&mut t, "finetune", || self.finetune_from(&src, &pairs))?;
        let ft = timed(&mut t, "assemble", || {
            let active: Vec<usize> = plan.plan.compressed_indices();
            let assembled = ft.with_active_set(&active)?;
            save_checkpoint(&self.path("assembled.adpt"), &assembled, Dtype::F64)?;
            Ok(assembled)
        })?;
        let mut report = timed(&mut t, "eval", || {
            eval_report(EvalInputs {
                cfg: &self.cfg,
                source: &src.model,
                source_hash: &src.hash,
                pairs: &pairs,
                plan: &plan.plan,
                svd_only: &svd,
                finetuned: &ft,
                histories,
                task: src.task,
            })
        })?;
        report.timings = t;
        save_report(&self.path("eval.adpt"), "eval", &report)?;
        println!();
        print!("{}", report.table());
        Ok(())
    }
}

/// Human-readable summary of any container file.
pub fn describe(path: &Path) -> Result<String> {
    let header = read_header(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "{}: {} container, hash {}", path.display(), header.kind, short(&header.content_hash));
    match header.kind.as_str() {
        REPORT_KIND => {
            let name = header.meta.get("name").and_then(|v| v.as_str()).unwrap_or_default();
            match name {
                "eval" => s += &load_report::<EvalReport>(path, name)?.table(),
                "sweep" => s += &load_report::<SweepReport>(path, name)?.table(),
                "plan" => s += &plan_table(&load_report(path, name)?),
                "finetune" => s += &finetune_table(&load_report::<Vec<TrainReport>>(path, name)?),
                "train-toy" => s += &toy_table(&load_report(path, name)?),
                "checkpoint-eval" => s += &checkpoint_eval_table(&load_report(path, name)?),
                _ => {
                    let body = load_report::<serde_json::Value>(path, name)?;
                    let _ = writeln!(s, "report `{name}`");
                    s += &serde_json::to_string_pretty(&body).unwrap_or_default();
                    s.push('\n');
                }
            }
        }
        CHECKPOINT_KIND => {
            let m = load_checkpoint(path)?;
            let d = m.config().dims;
            let _ = writeln!(
                s,
                "d_model {}  heads {}  d_head {}  d_ff {}  layers {}  vocab {}",
                d.d_model, d.n_heads, d.d_head, d.d_ff, d.n_layers, d.vocab
            );
            let _ = writeln!(s, "layer  compressed  quantized  active");
            for i in 0..m.layer_count() {
                let slot = m.compressed(i);
                let _ = writeln!(
                    s,
                    "{i:>5}  {:<10}  {:<9}  {}",
                    if slot.is_some() { "yes" } else { "no" },
                    if slot.is_some_and(|c| c.is_quantized()) { "yes" } else { "no" },
                    match m.active()[i] {
                        SlotKind::Original => "original",
                        SlotKind::Compressed => "compressed",
                    }
                );
            }
            s += &size_table(&m.size_report());
            let p = &m.provenance;
            if !p.source_hash.is_empty() {
                let _ = writeln!(s, "source {}", short(&p.source_hash));
            }
            if let Some(seed) = p.seed {
                let _ = writeln!(s, "seed {seed}");
            }
            if let Some(task) = p.task {
                let _ = writeln!(s, "trained on {task:?}");
            }
        }
        PAIRS_KIND => {
            let mut reader = PairReader::open(path)?;
            let meta = reader.meta().clone();
            let count = reader.by_ref().try_fold(0usize, |n, p| p.map(|_| n + 1))?;
            let _ = writeln!(
                s,
                "layer {}  d_model {}  {} samples ({} verified)  distribution {}  dtype {:?}",
                meta.layer_index, meta.d_model, meta.samples, count, meta.distribution, meta.dtype
            );
        }
        other => {
            let _ = writeln!(s, "unknown container kind `{other}`");
        }
    }
    Ok(s)
}

fn size_table(r: &SizeReport) -> String {
    format!(
        "params {} of {} (retained {:.4}, removed {:.4}); bytes {} of {} (fraction {:.4}, nominal {:.4})\n",
        r.params(),
        r.original_params(),
        r.retained_fraction(),
        r.removed_fraction(),
        r.bytes(),
        r.original_bytes_f32(),
        r.byte_fraction(),
        r.nominal_byte_fraction()
    )
}

fn plan_table(p: &PlanReport) -> String {
    let mut s = String::from("layer  plan        r_a  l_a  r_f  l_f  int8\n");
    for (i, l) in p.plan.layers.iter().enumerate() {
        match l {
            LayerPlan::Keep => {
                let _ = writeln!(s, "{i:>5}  keep");
            }
            LayerPlan::Compress { ranks, quantize } => {
                let _ = writeln!(
                    s,
                    "{i:>5}  compress  {:>4} {:>4} {:>4} {:>4}  {}",
                    ranks.r_a,
                    ranks.l_a,
                    ranks.r_f,
                    ranks.l_f,
                    if *quantize { "yes" } else { "no" }
                );
            }
        }
    }
    let a = &p.accounting;
    let _ = writeln!(
        s,
        "retained {:.6}  removed {:.6}  byte fraction {:.4} (nominal {:.4})",
        a.retained_fraction, a.removed_fraction, a.byte_fraction, a.nominal_byte_fraction
    );
    s
}

fn finetune_table(h: &[TrainReport]) -> String {
    let mut s = String::from("layer  mode  initial objective  final objective  best epoch\n");
    for r in h {
        let _ = writeln!(
            s,
            "{:>5}  {:<4}  {:>17.6e}  {:>15.6e}  {:>10}",
            r.layer_index,
            r.mode.label(),
            r.initial_loss(),
            r.final_loss(),
            r.best_epoch
        );
    }
    s
}

fn toy_table(r: &ToyTrainReport) -> String {
    format!(
        "task {:?}  steps {}  loss {:.4} → {:.4}  held-out accuracy {:.4} → {:.4}\n",
        r.task,
        r.steps,
        r.losses.first().copied().unwrap_or(f64::NAN),
        r.losses.last().copied().unwrap_or(f64::NAN),
        r.initial_accuracy,
        r.final_accuracy
    )
}

fn checkpoint_eval_table(r: &CheckpointEval) -> String {
    let mut s = format!("checkpoint {}  source {}\n", short(&r.checkpoint_hash), short(&r.provenance.source_hash));
    let _ = writeln!(s, "layer  objective");
    for o in &r.objectives {
        let _ = writeln!(s, "{:>5}  {:.6e}", o.layer, o.objective);
    }
    let _ = writeln!(s, "dist    divergence  agreement  TER");
    for e in &r.evals {
        let ter = e.token_error_rate.map_or("-".to_string(), |t| format!("{t:.4}"));
        let _ = writeln!(s, "{:<6}  {:>10.6}  {:>9.4}  {ter}", e.distribution.label(), e.divergence, e.agreement);
    }
    let a = &r.accounting;
    let _ = writeln!(
        s,
        "retained {:.4}  removed {:.4}  bytes {:.4}",
        a.retained_fraction, a.removed_fraction, a.byte_fraction
    );
    s
}

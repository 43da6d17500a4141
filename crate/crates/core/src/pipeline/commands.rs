use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::config::{Budget, PipelineConfig, Selector};
use super::stages::*;
use crate::attack::PoisonManifest;
use crate::data::Dataset;
use crate::datafree::save_recovered;
use crate::detect::DetectionReport;
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{load_checkpoint, save_checkpoint, Model};
use crate::reverse::{load_trigger, save_trigger, TriggerSpec};
use crate::shapley::TableFile;

/// Artifact layout under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("attack").join("model.ckpt")
    }

    pub fn triggers(&self) -> PathBuf {
        self.root.join("reverse")
    }

    pub fn norms(&self) -> PathBuf {
        self.triggers().join("norms.json")
    }

    pub fn recovered(&self) -> PathBuf {
        self.root.join("recovered")
    }

    pub fn detection(&self) -> PathBuf {
        self.root.join("detect").join("detection.json")
    }

    pub fn tables(&self) -> PathBuf {
        self.root.join("shapley")
    }

    pub fn mitigate(&self) -> PathBuf {
        self.root.join("mitigate")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format {
        kind: "json",
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path).map_err(|e| Error::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Audit record written next to every command's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub seeds: BTreeMap<String, u64>,
}

fn write_manifest(cfg: &PipelineConfig, command: &str) -> Result<()> {
    let mut seeds = BTreeMap::new();
    if let super::config::DataSource::Synthetic {
        train_seed,
        test_seed,
        defender_seed,
        ..
    } = cfg.data
    {
        seeds.insert("train_data".into(), train_seed);
        seeds.insert("test_data".into(), test_seed);
        seeds.insert("defender_data".into(), defender_seed);
    }
    seeds.insert("trigger".into(), cfg.attack.trigger_seed);
    seeds.insert("poison".into(), cfg.attack.poison_seed);
    seeds.insert("model_init".into(), cfg.attack.model_seed);
    seeds.insert("train".into(), cfg.attack.train.seed);
    seeds.insert("reverse".into(), cfg.reverse.seed);
    seeds.insert("shapley".into(), cfg.shapley.seed);
    seeds.insert("fine_tune".into(), cfg.fine_tune.seed);
    seeds.insert("datafree_fine_tune".into(), cfg.datafree_fine_tune.seed);
    seeds.insert("recovery".into(), cfg.recovery.seed);
    let m = RunManifest {
        command: command.to_string(),
        config_hash: cfg.hash()?,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds,
    };
    write_json(&cfg.output_dir.join(format!("manifest_{command}.json")), &m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub clean_accuracy: f64,
    pub attack_success_rate: f64,
    pub poisoned: usize,
}

/// Train the poisoned reference model and write it with its manifest.
pub fn cmd_attack(cfg: &PipelineConfig) -> Result<AttackSummary> {
    let run = || -> Result<AttackSummary> {
        let layout = Layout::new(&cfg.output_dir);
        let fixture = Fixture::build(cfg)?;
        let model = fixture.train_poisoned(cfg)?;
        let (acc, asr) = fixture.eval_sets().score(&model)?;
        fs::create_dir_all(layout.model().parent().expect("has parent"))?;
        save_checkpoint(&model, &layout.model())?;
        let manifest: PoisonManifest = fixture.data.manifest(&fixture.poison);
        write_json(&layout.root.join("attack").join("poison_manifest.json"), &manifest)?;
        let summary = AttackSummary {
            clean_accuracy: acc,
            attack_success_rate: asr,
            poisoned: fixture.data.poisoned_indices.len(),
        };
        write_json(&layout.root.join("attack").join("attack.json"), &summary)?;
        write_manifest(cfg, "attack")?;
        Ok(summary)
    };
    run().map_err(|e| e.in_stage("attack"))
}

fn save_defender(layout: &Layout, defender: &DefenderSet) -> Result<()> {
    if let Some(batch) = &defender.recovered {
        let dir = layout.recovered();
        save_recovered(batch, &dir)?;
        io::save_idx_dataset(&batch.data, &dir.join("images.idx"), &dir.join("labels.idx"))?;
    }
    Ok(())
}

/// Defender images for the stage commands; data-free runs reuse the batch
/// recovered by `reverse`.
fn stage_defender(cfg: &PipelineConfig, layout: &Layout, model: &Model) -> Result<Dataset> {
    match cfg.budget {
        Budget::PerClass(n) => {
            let (_, test) = load_data(cfg)?;
            defender_images(cfg, &test, n)
        }
        Budget::DataFree => {
            let dir = layout.recovered();
            if dir.join("images.idx").exists() {
                io::load_idx_dataset(
                    &dir.join("images.idx"),
                    &dir.join("labels.idx"),
                    Some(model.class_count()),
                )
            } else {
                let (_, test) = load_data(cfg)?;
                Ok(defender_set(cfg, model, &test)?.data)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormsFile {
    pub norms: Vec<f64>,
}

fn save_triggers(layout: &Layout, triggers: &[TriggerSpec]) -> Result<()> {
    let dir = layout.triggers();
    fs::create_dir_all(&dir)?;
    for t in triggers {
        save_trigger(t, &dir)?;
    }
    write_json(
        &layout.norms(),
        &NormsFile {
            norms: triggers.iter().map(|t| t.l1_norm).collect(),
        },
    )
}

/// Reverse a trigger for every class of the checkpoint.
pub fn cmd_reverse(cfg: &PipelineConfig, checkpoint: &Path) -> Result<Vec<f64>> {
    let run = || -> Result<Vec<f64>> {
        let layout = Layout::new(&cfg.output_dir);
        let model = load_model(checkpoint)?;
        let defender = {
            let (_, test) = load_data(cfg)?;
            defender_set(cfg, &model, &test)?
        };
        save_defender(&layout, &defender)?;
        let triggers = reverse_stage(&model, &defender.data, cfg)?;
        save_triggers(&layout, &triggers)?;
        write_manifest(cfg, "reverse")?;
        Ok(triggers.iter().map(|t| t.l1_norm).collect())
    };
    run().map_err(|e| e.in_stage("reverse"))
}

pub fn cmd_detect(cfg: &PipelineConfig, norms: &Path) -> Result<DetectionReport> {
    let run = || -> Result<DetectionReport> {
        let layout = Layout::new(&cfg.output_dir);
        let file: NormsFile = read_json(norms)?;
        let report = detect_stage(&file.norms, cfg)?;
        write_json(&layout.detection(), &report)?;
        write_manifest(cfg, "detect")?;
        Ok(report)
    };
    run().map_err(|e| e.in_stage("detect"))
}

fn load_triggers(dir: &Path, classes: usize) -> Result<Vec<TriggerSpec>> {
    (0..classes)
        .map(|c| {
            let (trigger, side) = load_trigger(dir, c)?;
            Ok(TriggerSpec {
                l1_norm: trigger.l1_norm(),
                trigger,
                class: c,
                loss_trace: Vec::new(),
                best_objective: side.best_objective,
            })
        })
        .collect()
}

/// Attribute ASR (and accuracy, for mixture selection) to every neuron.
pub fn cmd_shapley(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    triggers: &Path,
    detection: &Path,
) -> Result<Tables> {
    let run = || -> Result<Tables> {
        let layout = Layout::new(&cfg.output_dir);
        let model = load_model(checkpoint)?;
        let report: DetectionReport = read_json(detection)?;
        let target = suspected_target(&report);
        let specs = load_triggers(triggers, model.class_count())?;
        let defender = stage_defender(cfg, &layout, &model)?;
        let shapley = cfg.shapley.resolve(model.neuron_count())?;
        let acc_data = match cfg.shapley.selector(cfg.budget) {
            Selector::Mixture => Some(acc_game_data(&defender, cfg.budget, target)?),
            Selector::TopK => None,
        };
        let tables = shapley_stage(&model, &defender, &specs[target], &shapley, acc_data.as_ref())?;
        write_tables(&layout, &tables, &shapley)?;
        write_manifest(cfg, "shapley")?;
        Ok(tables)
    };
    run().map_err(|e| e.in_stage("shapley"))
}

fn write_tables(layout: &Layout, tables: &Tables, shapley: &crate::shapley::ShapleyConfig) -> Result<()> {
    write_json(&layout.tables().join("asr.json"), &tables.asr.to_file(shapley)?)?;
    if let Some(acc) = &tables.acc {
        write_json(&layout.tables().join("acc.json"), &acc.to_file(shapley)?)?;
    }
    Ok(())
}

fn load_tables(dir: &Path) -> Result<Tables> {
    let asr: TableFile = read_json(&dir.join("asr.json"))?;
    let acc_path = dir.join("acc.json");
    let acc = if acc_path.exists() {
        Some(read_json::<TableFile>(&acc_path)?.into_table()?)
    } else {
        None
    };
    Ok(Tables {
        asr: asr.into_table()?,
        acc,
    })
}

fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut text = String::from("pruned,acc,asr\n");
    for p in points {
        text.push_str(&format!("{},{:.6},{:.6}\n", p.pruned, p.acc, p.asr));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Prune the selected neurons, fine-tune and report.
pub fn cmd_mitigate(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    tables_dir: &Path,
    detection: &Path,
    plot: bool,
) -> Result<MitigationReport> {
    let run = || -> Result<MitigationReport> {
        let layout = Layout::new(&cfg.output_dir);
        let model = load_model(checkpoint)?;
        let detection: DetectionReport = read_json(detection)?;
        let tables = load_tables(tables_dir)?;
        let defender = stage_defender(cfg, &layout, &model)?;
        let eval = Fixture::build(cfg)?.eval_sets();
        let shapley = cfg.shapley.resolve(model.neuron_count())?;
        let selector = cfg.shapley.selector(cfg.budget);
        let mut timings = BTreeMap::new();
        let start = Instant::now();
        let selection = select_stage(&tables, &shapley, selector)?;
        let pruned = model.apply_prune_mask(&selection.neurons)?;
        let (acc_before, asr_before) = eval.score(&model)?;
        let (acc_pruned, asr_pruned) = eval.score(&pruned)?;
        let after = crate::nn::train_sgd(&pruned, &defender, cfg.fine_tune_for(cfg.budget)).map_err(|e| e.in_stage("fine_tune"))?;
        let (acc_after, asr_after) = eval.score(&after)?;
        timings.insert("mitigate".to_string(), start.elapsed().as_secs_f64());
        let n = model.neuron_count();
        let report = MitigationReport {
            verdict: detection.verdict,
            target_class: Some(suspected_target(&detection)),
            mitigated: true,
            neuron_count: n,
            pruned: selection.neurons.clone(),
            pruned_fraction: selection.neurons.len() as f64 / n as f64,
            selection: Some(selection),
            acc_before,
            asr_before,
            acc_pruned,
            asr_pruned,
            acc_after,
            asr_after,
            timings,
            config: cfg.clone(),
            detection,
        };
        fs::create_dir_all(layout.mitigate())?;
        save_checkpoint(&after, &layout.mitigate().join("model.ckpt"))?;
        write_json(&layout.mitigate().join("report.json"), &report)?;
        if plot {
            let order = pruning_order(&tables, &shapley, selector);
            let curve = pruning_curve(&model, &order, (4 * shapley.top_k).max(8), &eval)?;
            write_curve(&layout.mitigate().join("pruning_curve.csv"), &curve)?;
        }
        write_manifest(cfg, "mitigate")?;
        Ok(report)
    };
    run().map_err(|e| e.in_stage("mitigate"))
}

/// Every stage end to end: attack, reverse, detect and, when the model is
/// flagged or `force` is set, attribution, pruning and fine-tuning.
pub fn cmd_full(cfg: &PipelineConfig, force: bool, plot: bool) -> Result<MitigationReport> {
    let run = || -> Result<MitigationReport> {
        let layout = Layout::new(&cfg.output_dir);
        let mut timings = BTreeMap::new();
        let start = Instant::now();
        cmd_attack(cfg)?;
        timings.insert("attack".to_string(), start.elapsed().as_secs_f64());
        let model = load_model(&layout.model())?;
        let fixture = Fixture::build(cfg)?;
        let eval = fixture.eval_sets();
        let start = Instant::now();
        let defender = defender_set(cfg, &model, &fixture.test)?;
        if defender.recovered.is_some() {
            timings.insert("recover".to_string(), start.elapsed().as_secs_f64());
        }
        let run = defend(&model, defender, &eval, cfg, force, timings)?;
        save_defender(&layout, &run.defender)?;
        save_triggers(&layout, &run.triggers)?;
        write_json(&layout.detection(), &run.report.detection)?;
        if let (Some(tables), Some(shapley)) = (&run.tables, &run.shapley) {
            write_tables(&layout, tables, shapley)?;
            fs::create_dir_all(layout.mitigate())?;
            save_checkpoint(&run.model_after, &layout.mitigate().join("model.ckpt"))?;
            if plot {
                let selector = cfg.shapley.selector(cfg.budget);
                let order = pruning_order(tables, shapley, selector);
                let curve = pruning_curve(&model, &order, (4 * shapley.top_k).max(8), &eval)?;
                write_curve(&layout.mitigate().join("pruning_curve.csv"), &curve)?;
            }
        }
        write_json(&layout.mitigate().join("report.json"), &run.report)?;
        write_manifest(cfg, "full")?;
        Ok(run.report)
    };
    run().map_err(|e| e.in_stage("full"))
}

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use ufl_core::bank::MemoryBank;
use ufl_core::baseline::{random_baseline, GuessModel};
use ufl_core::data::{
    chip_paths, exponent_for_ratio, extract_chips, read_manifest, synth_dataset, ChipDataset,
    DiskImages, PopulationTable,
};
use ufl_core::hierarchy::{agglomerate, similarity_from_confusion, Linkage};
use ufl_core::knn::{evaluate, ConfusionMatrix};
use ufl_core::models::{Checkpoint, Decoder, Encoder, SupervisedHead};
use ufl_core::outliers::{flag_outliers, intra_class_nn_distances, OutlierReport, StdConvention};
use ufl_core::pca::{pca_project, write_projection_csv};
use ufl_core::retrieval::{nearest_instances, write_manifest, RetrievalRecord};
use ufl_core::seed::mix;
use ufl_core::train::{train_autoencoder, train_supervised, train_ufl, EpochLog, LossMode};
use ufl_core::ClassId;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{
    Averaging, BaselineArgs, ChipArgs, EvalArgs, GuessArg, HierarchyArgs, LinkageArg, LossArg,
    OutlierArgs, ProjectArgs, SearchArgs, SourceArgs, StdArg, SynthArgs, TrainArgs, TrainMode,
};

const RESOLVED: &str = "config.resolved.toml";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_parent(file: &Path) -> CliResult<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// `runs/search.jsonl` gets `runs/search.config.toml`.
fn sidecar(file: &Path) -> PathBuf {
    file.with_extension("config.toml")
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(ufl_core::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub(crate) fn chip(args: ChipArgs, mut cfg: RunConfig, out: &mut dyn Write) -> CliResult<()> {
    if let Some(f) = args.test_fraction {
        cfg.chip.test_fraction = f;
    }
    if let Some(s) = args.seed {
        cfg.chip.seed = s;
    }
    if !(0.0..1.0).contains(&cfg.chip.test_fraction) {
        return Err(CliError::Usage("test fraction must lie in [0, 1)".into()));
    }
    let annotations = read_manifest(&args.manifest)?;
    let names: Vec<String> = match &args.classes {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::io(p, e))?
            .lines()
            .map(str::to_owned)
            .collect(),
        None => {
            let count = annotations
                .iter()
                .map(|a| a.class_id + 1)
                .max()
                .unwrap_or(0);
            (0..count).map(|c| format!("class_{c}")).collect()
        }
    };
    if let Some(a) = annotations.iter().find(|a| a.class_id >= names.len()) {
        return Err(ufl_core::Error::Invalid(format!(
            "annotation for {} has class id {} but only {} class names",
            a.image,
            a.class_id,
            names.len()
        ))
        .into());
    }

    let extraction = extract_chips(&annotations, &DiskImages::new(&args.images));

    // Stratified split: within each class, a seeded hash of the annotation
    // index decides which chips go to the test set.
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (slot, &ann) in extraction.kept.iter().enumerate() {
        by_class
            .entry(annotations[ann].class_id)
            .or_default()
            .push(slot);
    }
    let mut is_test = vec![false; extraction.chips.len()];
    for slots in by_class.values_mut() {
        slots.sort_by_key(|&s| (mix(cfg.chip.seed, &[extraction.kept[s] as u64]), s));
        let mut n_test = (cfg.chip.test_fraction * slots.len() as f64).round() as usize;
        if slots.len() >= 2 {
            n_test = n_test.min(slots.len() - 1);
        } else {
            n_test = 0;
        }
        for &s in &slots[..n_test] {
            is_test[s] = true;
        }
    }
    let mut ds = ChipDataset {
        class_names: names,
        ..Default::default()
    };
    for (chip, test) in extraction.chips.into_iter().zip(is_test) {
        if test {
            ds.test.push(chip);
        } else {
            ds.train.push(chip);
        }
    }
    ds.save(&args.out)?;

    #[derive(Serialize)]
    struct DiscardLine<'a> {
        annotation: usize,
        image: &'a str,
        bbox: [i64; 4],
        class_id: ClassId,
        reason: String,
    }
    let log_path = args.out.join("discards.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut w = BufWriter::new(file);
    for d in &extraction.discarded {
        let a = &annotations[d.annotation];
        let line = DiscardLine {
            annotation: d.annotation,
            image: &a.image,
            bbox: a.bbox,
            class_id: a.class_id,
            reason: d.reason.to_string(),
        };
        serde_json::to_writer(&mut w, &line).map_err(ufl_core::Error::from)?;
        w.write_all(b"\n").map_err(|e| CliError::io(&log_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&log_path, e))?;
    cfg.save(&args.out.join(RESOLVED))?;
    say(
        out,
        format!(
            "{} annotations: {} train chips, {} test chips, {} discarded",
            annotations.len(),
            ds.train.len(),
            ds.test.len(),
            extraction.discarded.len()
        ),
    )
}

pub(crate) fn synth(args: SynthArgs, mut cfg: RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let s = &mut cfg.synth;
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.classes {
        s.num_classes = v;
    }
    if let Some(v) = args.total {
        s.total = v;
    }
    if let Some(v) = args.side {
        s.side = v;
    }
    if let Some(r) = args.ratio {
        if !(r >= 1.0 && r.is_finite()) {
            return Err(CliError::Usage(
                "--ratio must be a finite number >= 1".into(),
            ));
        }
        s.imbalance_exponent = exponent_for_ratio(s.num_classes, r);
    }
    let ds = synth_dataset(&cfg.synth)?;
    ds.save(&args.out)?;
    cfg.save(&args.out.join(RESOLVED))?;
    say(
        out,
        format!(
            "{} classes: {} train chips, {} test chips",
            ds.num_classes(),
            ds.train.len(),
            ds.test.len()
        ),
    )
}

fn training_bank(encoder: &Encoder, ds: &ChipDataset, tau: f64) -> CliResult<MemoryBank> {
    let emb = encoder.embed(&ds.train)?;
    Ok(MemoryBank::from_embeddings(&emb)?
        .with_labels(ds.train_labels())?
        .with_tau(tau)?)
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    mean_loss: f64,
    lr: f64,
    elapsed_s: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    mode: &'static str,
    train_instances: usize,
    epochs: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    nce_z: Option<f64>,
    elapsed_s: f64,
}

pub(crate) fn train(args: TrainArgs, mut cfg: RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let t = &mut cfg.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.lr.initial = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.tau {
        t.tau = v;
    }
    if let Some(v) = args.noise_samples {
        t.nce.noise_samples = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
        cfg.encoder.seed = v;
    }
    match (args.mode, args.loss) {
        (TrainMode::Ufl, Some(LossArg::Exact)) => cfg.train.mode = LossMode::Exact,
        (TrainMode::Ufl, Some(LossArg::Nce)) => cfg.train.mode = LossMode::Nce,
        (_, Some(_)) => return Err(CliError::Usage("--loss applies only to --mode ufl".into())),
        (_, None) => {}
    }
    cfg.train.validate()?;

    let ds = ChipDataset::load(&args.data)?;
    let labels = ds.train_labels();
    create_dir(&args.out)?;
    cfg.save(&args.out.join(RESOLVED))?;

    let log_path = args.out.join("log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log_w = BufWriter::new(file);
    let mut log_err = None;
    let start = Instant::now();
    let mut on_epoch = |e: &EpochLog| {
        let line = EpochLine {
            epoch: e.epoch,
            mean_loss: e.mean_loss,
            lr: e.lr,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        let res = serde_json::to_writer(&mut log_w, &line)
            .map_err(std::io::Error::other)
            .and_then(|_| log_w.write_all(b"\n"))
            .and_then(|_| log_w.flush());
        if let Err(e) = res {
            log_err.get_or_insert(e);
        }
    };

    let encoder = Encoder::new(cfg.encoder.clone())?;
    let tau = cfg.train.tau;
    let (checkpoint, bank, log, initial_loss, z, mode) = match args.mode {
        TrainMode::Ufl => {
            let o = train_ufl(&ds.train, Some(&labels), encoder, &cfg.train, &mut on_epoch)?;
            let name = match cfg.train.mode {
                LossMode::Exact => "ufl-exact",
                LossMode::Nce => "ufl-nce",
            };
            let bank = o.bank.with_tau(tau)?;
            (
                Checkpoint::encoder_only(o.encoder),
                bank,
                o.log,
                Some(o.initial_loss),
                o.z,
                name,
            )
        }
        TrainMode::Autoencoder => {
            let decoder = Decoder::new(&cfg.encoder)?;
            let (enc, dec, log) =
                train_autoencoder(&ds.train, encoder, decoder, &cfg.train, &mut on_epoch)?;
            let ckpt = Checkpoint {
                encoder: enc,
                decoder: Some(dec),
                head: None,
            };
            let bank = training_bank(&ckpt.encoder, &ds, tau)?;
            (ckpt, bank, log, None, None, "autoencoder")
        }
        TrainMode::Supervised => {
            let head = SupervisedHead::new(
                ds.num_classes(),
                cfg.encoder.embedding_dim,
                mix(cfg.train.seed, &[7]),
            )?;
            let (enc, head, log) =
                train_supervised(&ds.train, &labels, encoder, head, &cfg.train, &mut on_epoch)?;
            let ckpt = Checkpoint {
                encoder: enc,
                decoder: None,
                head: Some(head),
            };
            let bank = training_bank(&ckpt.encoder, &ds, tau)?;
            (ckpt, bank, log, None, None, "supervised")
        }
    };
    if let Some(e) = log_err {
        return Err(CliError::io(&log_path, e));
    }

    checkpoint.save(&args.out.join("model.uflm"))?;
    bank.save(&args.out.join("bank.uflb"))?;
    let loss_path = args.out.join("loss.csv");
    let mut w = csv::Writer::from_path(&loss_path).map_err(ufl_core::Error::from)?;
    for row in &log {
        w.serialize(row).map_err(ufl_core::Error::from)?;
    }
    w.flush().map_err(|e| CliError::io(&loss_path, e))?;

    let summary = TrainSummary {
        mode,
        train_instances: ds.train.len(),
        epochs: cfg.train.epochs,
        initial_loss,
        final_loss: log.last().map(|l| l.mean_loss),
        nce_z: z,
        elapsed_s: start.elapsed().as_secs_f64(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    say(
        out,
        format!(
            "{mode}: {} epochs, final loss {}, {:.1}s",
            summary.epochs,
            summary
                .final_loss
                .map_or("n/a".into(), |l| format!("{l:.5}")),
            summary.elapsed_s
        ),
    )
}

/// Loads the checkpoint, if any, and the bank to search: the named bank
/// file, or else the training split embedded with the checkpoint. An
/// unlabeled bank the size of the training split takes its labels.
fn resolve_bank(
    src: &SourceArgs,
    ds: &ChipDataset,
    tau: f64,
) -> CliResult<(Option<Checkpoint>, MemoryBank)> {
    let ckpt = src.model.as_deref().map(Checkpoint::load).transpose()?;
    let bank = match (&src.bank, &ckpt) {
        (Some(p), _) => {
            let bank = MemoryBank::load(p)?;
            if bank.labels().is_none() && bank.len() == ds.train.len() {
                bank.with_labels(ds.train_labels())?
            } else {
                bank
            }
        }
        (None, Some(c)) => training_bank(&c.encoder, ds, tau)?,
        (None, None) => {
            return Err(CliError::Usage(
                "either --model or --bank is required".into(),
            ))
        }
    };
    Ok((ckpt, bank))
}

fn require_model(ckpt: Option<Checkpoint>) -> CliResult<Checkpoint> {
    ckpt.ok_or_else(|| CliError::Usage("--model is required to embed query chips".into()))
}

pub(crate) fn eval(args: EvalArgs, mut cfg: RunConfig, out: &mut dyn Write) -> CliResult<()> {
    if let Some(k) = args.k {
        cfg.eval.k = k;
    }
    if let Some(t) = args.tau {
        cfg.eval.tau = t;
    }
    let ds = ChipDataset::load(&args.source.data)?;
    let (ckpt, bank) = resolve_bank(&args.source, &ds, cfg.eval.tau)?;
    let encoder = require_model(ckpt)?.encoder;
    let test = encoder.embed(&ds.test)?;
    let report = evaluate(&bank, &test, &ds.test_labels(), cfg.eval.k, cfg.eval.tau)?;

    create_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    let mut train_counts = vec![0usize; ds.num_classes()];
    for c in ds.train_labels() {
        train_counts[c] += 1;
    }
    report.write_per_class_csv(
        &args.out.join("per_class.csv"),
        &ds.class_names,
        &train_counts,
    )?;
    report
        .confusion_top1
        .write_csv(&args.out.join("confusion_top1.csv"), &ds.class_names)?;
    report
        .confusion_top5
        .write_csv(&args.out.join("confusion_top5.csv"), &ds.class_names)?;
    cfg.save(&args.out.join(RESOLVED))?;
    say(out, "averaging  top-1   top-5")?;
    say(
        out,
        format!(
            "instance   {:5.2}   {:5.2}",
            report.top1_instance, report.top5_instance
        ),
    )?;
    say(
        out,
        format!(
            "class      {:5.2}   {:5.2}",
            report.top1_class, report.top5_class
        ),
    )
}

pub(crate) fn search(args: SearchArgs, mut cfg: RunConfig) -> CliResult<()> {
    if let Some(k) = args.k {
        cfg.search.k = k;
    }
    let ds = ChipDataset::load(&args.source.data)?;
    let (ckpt, bank) = resolve_bank(&args.source, &ds, cfg.eval.tau)?;
    let encoder = require_model(ckpt)?.encoder;
    let queries = match args.split.as_str() {
        "train" => &ds.train,
        "test" => &ds.test,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split {other:?}; use train or test"
            )))
        }
    };
    let q = encoder.embed(queries)?;
    let bank_paths = chip_paths(&args.source.data, "train")?;
    let query_paths = chip_paths(&args.source.data, &args.split)?;
    let k = cfg.search.k;
    let records = (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let mut matches = nearest_instances(&bank, q.row(i), k)?;
            for m in &mut matches {
                m.chip_path = bank_paths.get(m.id as usize).cloned();
            }
            Ok(RetrievalRecord {
                query_id: i as u64,
                query_path: query_paths.get(i).cloned(),
                matches,
            })
        })
        .collect::<ufl_core::Result<Vec<_>>>()?;
    create_parent(&args.out)?;
    write_manifest(&args.out, &records)?;
    cfg.save(&sidecar(&args.out))
}

#[derive(Serialize)]
struct FlaggedChip {
    id: u64,
    class: ClassId,
    class_name: String,
    distance: f64,
    chip_path: Option<PathBuf>,
}

#[derive(Serialize)]
struct OutlierOutput {
    #[serde(flatten)]
    report: OutlierReport,
    flagged_chips: Vec<FlaggedChip>,
}

pub(crate) fn outliers(
    args: OutlierArgs,
    mut cfg: RunConfig,
    out: &mut dyn Write,
) -> CliResult<()> {
    if let Some(s) = args.sigmas {
        cfg.outliers.sigmas = s;
    }
    if let Some(s) = args.std {
        cfg.outliers.std = match s {
            StdArg::Population => StdConvention::Population,
            StdArg::Sample => StdConvention::Sample,
        };
    }
    if !(cfg.outliers.sigmas >= 0.0 && cfg.outliers.sigmas.is_finite()) {
        return Err(CliError::Usage(
            "--sigmas must be a finite number >= 0".into(),
        ));
    }
    let ds = ChipDataset::load(&args.source.data)?;
    let (_, bank) = resolve_bank(&args.source, &ds, cfg.eval.tau)?;
    let distances = intra_class_nn_distances(&bank)?;
    let report = flag_outliers(&distances, cfg.outliers.sigmas, cfg.outliers.std);
    let paths = chip_paths(&args.source.data, "train")?;
    let flagged_chips = report
        .classes
        .iter()
        .flat_map(|c| {
            let (ds, paths) = (&ds, &paths);
            c.flagged.iter().map(move |f| FlaggedChip {
                id: f.id,
                class: c.class,
                class_name: ds.class_names.get(c.class).cloned().unwrap_or_default(),
                distance: f.distance,
                chip_path: paths.get(f.id as usize).cloned(),
            })
        })
        .collect::<Vec<_>>();
    let n = flagged_chips.len();
    create_parent(&args.out)?;
    write_json(
        &args.out,
        &OutlierOutput {
            report,
            flagged_chips,
        },
    )?;
    cfg.save(&sidecar(&args.out))?;
    say(out, format!("{n} of {} chips flagged", bank.len()))
}

pub(crate) fn hierarchy(
    args: HierarchyArgs,
    mut cfg: RunConfig,
    out: &mut dyn Write,
) -> CliResult<()> {
    if let Some(l) = args.linkage {
        cfg.hierarchy.linkage = match l {
            LinkageArg::Average => Linkage::Average,
            LinkageArg::Single => Linkage::Single,
            LinkageArg::Complete => Linkage::Complete,
        };
    }
    let (confusion, names) = ConfusionMatrix::read_csv(&args.confusion)?;
    let d = similarity_from_confusion(&confusion.to_f64())?;
    let tree = agglomerate(&d, cfg.hierarchy.linkage)?;
    create_dir(&args.out)?;
    let newick = tree.to_newick(&names)?;
    for (file, text) in [
        ("hierarchy.nwk", newick.clone()),
        ("hierarchy.json", tree.to_json(&names)?),
        ("hierarchy.txt", tree.to_text(&names)?),
    ] {
        let path = args.out.join(file);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    }
    cfg.save(&args.out.join(RESOLVED))?;
    say(out, newick.trim_end())
}

pub(crate) fn project(args: ProjectArgs, mut cfg: RunConfig) -> CliResult<()> {
    if let Some(s) = args.seed {
        cfg.project.seed = s;
    }
    let ds = ChipDataset::load(&args.source.data)?;
    let (_, bank) = resolve_bank(&args.source, &ds, cfg.eval.tau)?;
    let points: Vec<Vec<f64>> = bank
        .rows()
        .map(|r| r.iter().map(|&x| f64::from(x)).collect())
        .collect();
    let proj = pca_project(&points, 2, cfg.project.seed)?;
    for w in &proj.warnings {
        log::warn!("{w}");
    }
    let labels: Option<Vec<String>> = bank.labels().map(|ls| {
        ls.iter()
            .map(|&c| {
                ds.class_names
                    .get(c)
                    .cloned()
                    .unwrap_or_else(|| c.to_string())
            })
            .collect()
    });
    create_parent(&args.out)?;
    write_projection_csv(&args.out, bank.ids(), &proj.coords, labels.as_deref())?;
    cfg.save(&sidecar(&args.out))
}

pub(crate) fn baseline(args: BaselineArgs, out: &mut dyn Write) -> CliResult<()> {
    let table = match &args.populations {
        Some(p) => PopulationTable::load(p)?,
        None => PopulationTable::xview(),
    };
    let model = match args.guess {
        GuessArg::Independent => GuessModel::Independent,
        GuessArg::WithoutReplacement => GuessModel::WithoutReplacement,
    };
    let (train, test) = (table.train_counts(), table.test_counts());
    let tops = match args.top {
        Some(0) => return Err(CliError::Usage("--top must be at least 1".into())),
        Some(n) => vec![n],
        None => vec![1, 5],
    };
    let scores = tops
        .iter()
        .map(|&n| random_baseline(&train, &test, n, model))
        .collect::<ufl_core::Result<Vec<_>>>()?;

    if let Some(avg) = args.averaging {
        for s in &scores {
            let v = match avg {
                Averaging::Instance => s.instance_averaged,
                Averaging::Class => s.class_averaged,
            };
            say(out, format!("{v:.2}"))?;
        }
    } else {
        say(out, "top-N  instance  class")?;
        for s in &scores {
            say(
                out,
                format!(
                    "{:<5}  {:8.2}  {:5.2}",
                    s.top_n, s.instance_averaged, s.class_averaged
                ),
            )?;
        }
    }
    if args.per_class {
        let names = table.names();
        for (i, name) in names.iter().enumerate() {
            let cells: Vec<String> = scores
                .iter()
                .map(|s| format!("{:.2}", s.per_class[i]))
                .collect();
            say(out, format!("{name}\t{}", cells.join("\t")))?;
        }
    }
    Ok(())
}

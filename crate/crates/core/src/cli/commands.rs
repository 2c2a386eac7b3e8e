use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::{require, Outcome, RunConfig};
use crate::analysis::{
    normalized_tap_maps, permeation_profile, write_pgm, ProfileOptions, SizeLabel, INVISIBLE_RATE, PROFILE_HEADER,
};
use crate::data::synthetic::generate_splits;
use crate::data::{load_dataset, scale_intensity, write_dataset, SlicePair, HU_HIGH, HU_LOW};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_network, predict_masks, score, Evaluation};
use crate::gradcheck::suite::run_suite;
use crate::gradcheck::GradCheckOptions;
use crate::metrics::{aggregate, Summary};
use crate::network::NetworkGraph;
use crate::training::{init_params_with, recalibrate_batch_norm, train_with, Checkpoint, Dataset, Trainer};
use crate::Fault;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

fn say(cfg: &RunConfig, level: u8, msg: impl AsRef<str>) {
    if cfg.verbosity >= level {
        println!("{}", msg.as_ref());
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write through a temporary sibling so a crash never leaves a torn file.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = require(&cfg.paths.out, "--out")?.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    cfg.freeze(&out)?;
    Ok(out)
}

fn open_log(path: &Path, append: bool, header: Option<&str>) -> Result<File> {
    let existed = path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if let Some(h) = header {
        if !(append && existed) {
            writeln!(f, "{h}").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(f)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<SlicePair>> {
    let dir = require(&cfg.paths.data, "--data")?;
    let pairs = load_dataset(dir, Some(split))?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("{}: split `{split}` is empty or missing", dir.display())));
    }
    Ok(pairs)
}

fn to_dataset(pairs: &[SlicePair], classes: usize) -> Result<Dataset> {
    Ok(Dataset { samples: pairs.iter().map(|p| p.to_sample(classes)).collect::<Result<_>>()? })
}

/// The configured network with the checkpoint's weights.
fn restored_network(cfg: &RunConfig) -> Result<NetworkGraph> {
    let path = require(&cfg.paths.checkpoint, "--checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    let mut net = NetworkGraph::build(cfg.network.clone())?;
    ckpt.restore_into(&mut net)?;
    Ok(net)
}

fn image_chw(p: &SlicePair) -> Result<crate::Tensor> {
    let (h, w) = p.extent();
    scale_intensity(&p.image, HU_LOW, HU_HIGH)?.reshape(vec![1, h, w])
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Outcome> {
    let out = require(&cfg.paths.out, "--out")?.clone();
    // Everything is generated (and validated) before the first write.
    let splits = generate_splits(&cfg.data)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_dataset(&out, &splits)?;
    cfg.freeze(&out)?;
    for (name, pairs) in &splits {
        let objects: usize = pairs.iter().map(|p| p.objects.len()).sum();
        say(cfg, 1, format!("{name}: {} slices, {objects} objects", pairs.len()));
    }
    say(cfg, 1, format!("wrote {}", out.display()));
    Ok(Outcome::Success)
}

fn summary_rows(epoch: u64, rows: &[Summary]) -> String {
    let mut s = String::new();
    for line in Summary::to_tsv(rows).lines().skip(1) {
        let _ = writeln!(s, "{epoch}\t{line}");
    }
    s
}

fn summary_header() -> String {
    let h = Summary::to_tsv(&[]);
    format!("epoch\t{}", h.trim_end())
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<Outcome> {
    cfg.network.validate()?;
    cfg.train.validate()?;
    let train_pairs = load_split(cfg, "train")?;
    let data_dir = require(&cfg.paths.data, "--data")?;
    let val_pairs = load_dataset(data_dir, Some("val"))?;
    let classes = cfg.network.out_classes;
    let train_set = to_dataset(&train_pairs, classes)?;
    let mut net = NetworkGraph::build(cfg.network.clone())?;
    train_set
        .check_against(&net)
        .map_err(|e| Error::Config(format!("dataset does not fit the network: {e}")))?;

    let mut trainer = if resume {
        let path = require(&cfg.paths.checkpoint, "--resume")?;
        let ckpt = Checkpoint::load(path)?;
        let mut t = Trainer::resume(net, &ckpt)?;
        t.set_max_epochs(cfg.train.max_epochs);
        say(cfg, 1, format!("resuming at epoch {}", t.epoch()));
        t
    } else {
        init_params_with(&mut net, cfg.train.seed, cfg.train.init_std, cfg.train.init_bias);
        Trainer::new(net, cfg.train.clone())?
    };

    let out = prepare_out(cfg)?;
    write_file(&out.join("network.manifest"), trainer.network().manifest().text())?;
    say(cfg, 1, format!("{} network, {} parameters", cfg.network.variant, trainer.network().param_count()));
    let log_path = out.join("train_log.jsonl");
    let mut log = open_log(&log_path, resume, None)?;
    let val_path = out.join("val_metrics.tsv");
    let mut val_log = open_log(&val_path, resume, Some(&summary_header()))?;

    let max = trainer.config().max_epochs;
    let recal = trainer.config().bn_recalibrate;
    let bs = trainer.config().batch_size;
    let every = cfg.eval.every;
    let mut last_val_epoch = None;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let result = train_with(
        &mut trainer,
        &train_set,
        |t, rec| {
            writeln!(log, "{}", rec.to_json_line()).map_err(|e| Error::io(&log_path, e))?;
            let done = rec.epoch + 1;
            if cfg.verbosity >= 2 || (cfg.verbosity >= 1 && (done % 25 == 0 || done == max)) {
                println!("epoch {:>4}  lr {:.3e}  loss {:.6}  {:.0} ms", rec.epoch, rec.lr, rec.loss, rec.wall_ms);
            }
            if every > 0 && done % every == 0 && !val_pairs.is_empty() {
                let mut probe = t.network().clone();
                if recal {
                    recalibrate_batch_norm(&mut probe, &train_set, bs)?;
                }
                let ev = evaluate_network(&mut probe, &val_pairs)?;
                write!(val_log, "{}", summary_rows(done, &aggregate(&ev.reports()))).map_err(|e| Error::io(&val_path, e))?;
                last_val_epoch = Some(done);
            }
            Ok(())
        },
        |ckpt| write_atomic(&ckpt_path, |p| ckpt.save(p)),
    );
    if let Err(failure) = result {
        if let Some(good) = failure.last_good {
            let path = out.join(LAST_GOOD_FILE);
            if good.save(&path).is_ok() {
                eprintln!("last good state saved to {}", path.display());
            }
        }
        return Err(failure.error);
    }

    // The network already carries recalibrated moments from the final
    // checkpoint hook.
    let done = trainer.epoch();
    if !val_pairs.is_empty() && last_val_epoch != Some(done) {
        let ev = evaluate_network(trainer.network_mut(), &val_pairs)?;
        let rows = aggregate(&ev.reports());
        write!(val_log, "{}", summary_rows(done, &rows)).map_err(|e| Error::io(&val_path, e))?;
        say(cfg, 1, format!("validation after epoch {done}:\n{}", Summary::table(&rows)));
    }
    say(cfg, 1, format!("wrote {}", ckpt_path.display()));
    Ok(Outcome::Success)
}

fn write_evaluation(out: &Path, ev: &Evaluation) -> Result<String> {
    let rows = aggregate(&ev.reports());
    let table = Summary::table(&rows);
    write_file(&out.join("per_case.tsv"), ev.per_case_tsv())?;
    write_file(&out.join("summary.tsv"), Summary::to_tsv(&rows))?;
    write_file(&out.join("summary.txt"), &table)?;
    write_file(&out.join("objects.tsv"), ev.objects_tsv())?;
    let mut sizes = String::from("class\tsize\tcount\tmean_dsc\n");
    for ((class, size), (n, mean)) in ev.size_class_dsc() {
        let _ = writeln!(sizes, "{class}\t{}\t{n}\t{mean}", size.as_str());
    }
    write_file(&out.join("size_classes.tsv"), sizes)?;
    Ok(table)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let pairs = load_split(cfg, &cfg.eval.split)?;
    let preds = if cfg.eval.ground_truth {
        pairs.iter().map(|p| p.mask.clone()).collect()
    } else {
        let mut net = restored_network(cfg)?;
        predict_masks(&mut net, &pairs)?
    };
    let ev = score(&pairs, &preds)?;
    let out = prepare_out(cfg)?;
    let table = write_evaluation(&out, &ev)?;
    say(cfg, 1, format!("{} cases from split `{}`\n{table}", pairs.len(), cfg.eval.split));
    Ok(Outcome::Success)
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<Outcome> {
    let a = &cfg.analysis;
    let mut pairs = load_split(cfg, &cfg.eval.split)?;
    if a.limit > 0 {
        pairs.truncate(a.limit);
    }
    let mut net = restored_network(cfg)?;
    if a.zero_residual {
        net.zero_residual_paths();
    }
    let known = net.tap_names();
    if let Some(bad) = a.taps.iter().find(|t| !known.contains(t)) {
        return Err(Error::UnknownTap(bad.clone()));
    }
    let out = prepare_out(cfg)?;
    let maps_dir = out.join("maps");
    if a.dump_maps {
        std::fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
    }
    let mut map_names: Vec<String> = Vec::new();
    if a.dump_maps {
        for s in 1..cfg.network.stages {
            map_names.push(format!("stage{s}.fm_b"));
            map_names.push(format!("stage{s}.fm_a"));
        }
        map_names.extend(a.taps.iter().cloned());
    }
    let map_refs: Vec<&str> = map_names.iter().map(String::as_str).collect();

    let mut table = format!("case\t{PROFILE_HEADER}\n");
    // (stage, size) -> (objects, visible, sum of visible rates)
    let mut totals: BTreeMap<(usize, SizeLabel), (usize, usize, f64)> = BTreeMap::new();
    for p in &pairs {
        let image = image_chw(p)?;
        let opts = ProfileOptions {
            rule: a.rule,
            per_channel: a.per_channel,
            size_threshold: a.size_threshold,
            reference_stage: a.reference_stage,
            mm_per_pixel: [p.mask.spacing()[0], p.mask.spacing()[1]],
        };
        let records = permeation_profile(&mut net, &image, &p.object_masks(), &opts)?;
        for line in crate::analysis::profile_to_tsv(&records).lines().skip(1) {
            let _ = writeln!(table, "{}\t{line}", p.id);
        }
        for r in records.iter().filter(|r| r.channel.is_none()) {
            let e = totals.entry((r.stage, r.size)).or_insert((0, 0, 0.0));
            e.0 += 1;
            if r.rate != INVISIBLE_RATE {
                e.1 += 1;
                e.2 += r.rate;
            }
        }
        if !map_refs.is_empty() {
            for (name, map) in normalized_tap_maps(&mut net, &image, &map_refs)? {
                write_pgm(&maps_dir.join(format!("{}_{name}.pgm", p.id)), &map)?;
            }
        }
    }
    write_file(&out.join("permeation.tsv"), &table)?;
    let mut summary = String::from("stage\tsize\tobjects\tvisible\tmean_rate\n");
    for ((stage, size), (n, vis, sum)) in &totals {
        let mean = if *vis > 0 { format!("{}", sum / *vis as f64) } else { "undefined".into() };
        let _ = writeln!(summary, "{stage}\t{}\t{n}\t{vis}\t{mean}", size.as_str());
    }
    write_file(&out.join("permeation_summary.tsv"), &summary)?;
    say(cfg, 1, format!("{} slices analyzed\n{summary}", pairs.len()));
    Ok(Outcome::Success)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let g = &cfg.gradcheck;
    if !(g.eps.is_finite() && g.eps > 0.0) {
        return Err(Error::Config(format!("gradcheck.eps must be positive, got {}", g.eps)));
    }
    if !g.fault_scale.is_finite() {
        return Err(Error::Config("gradcheck.fault_scale must be finite".into()));
    }
    let opts = GradCheckOptions { eps: g.eps, max_coords_per_param: None, seed: g.seed };
    let fault = (g.fault_scale != 1.0).then_some(Fault::ScaleConvKernelGrad(g.fault_scale));
    let report = run_suite(&opts, fault)?;
    let text = report.to_string();
    if cfg.paths.out.is_some() {
        let out = prepare_out(cfg)?;
        write_file(&out.join("gradcheck.txt"), &text)?;
    }
    if cfg.verbosity >= 2 {
        print!("{text}");
    } else if cfg.verbosity == 1 {
        for c in &report.cases {
            print!("{}", c.to_string().lines().next().map(|l| format!("{l}\n")).unwrap_or_default());
        }
    }
    if report.passed() {
        say(cfg, 1, format!("all {} cases passed", report.cases.len()));
        Ok(Outcome::Success)
    } else {
        let failed = report.cases.iter().filter(|c| !c.passed()).count();
        match report.worst() {
            Some((case, w)) => eprintln!(
                "gradient check failed in {failed} case(s); worst parameter {} ({}, case {case}) max_rel {:.3e}",
                w.id, w.name, w.max_rel
            ),
            None => eprintln!("gradient check failed in {failed} case(s)"),
        }
        Ok(Outcome::CheckFailed)
    }
}

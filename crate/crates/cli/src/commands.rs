//! The five subcommands. Each is a pure function of the configuration and
//! its input files; progress goes to `out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use covloc::covgen::{generate_dataset_with, FrameOutcome};
use covloc::covmodel::{predict, train, TrainSample};
use covloc::fusion::{ade, fde, measurement_covariances, prepare_frames, run_filter};
use covloc::metrics::evaluate;
use covloc::pointcloud::{write_kitti_poses, write_kitti_scan};
use covloc::{
    make_synthetic_scene, Cov6, Dataset, FusionMode, InMemorySequence, KittiSequence, PointToPlane,
    RegressionModel, SequenceSource, Trajectory,
};
use rayon::prelude::*;

use crate::config::{RunConfig, SourceKind};
use crate::error::CliError;

pub const FUSION_TABLE: &str = "ade_fde.txt";
pub const GROUND_TRUTH: &str = "ground_truth.txt";

pub enum Sequence {
    Synthetic(InMemorySequence),
    Kitti(KittiSequence),
}

impl Sequence {
    pub fn source(&self) -> &dyn SequenceSource {
        match self {
            Sequence::Synthetic(s) => s,
            Sequence::Kitti(s) => s,
        }
    }
}

pub fn load_sequence(cfg: &RunConfig) -> Result<Sequence, CliError> {
    match cfg.sequence.source {
        SourceKind::Synthetic => Ok(Sequence::Synthetic(make_synthetic_scene(&cfg.synth()?))),
        SourceKind::Kitti => {
            let velodyne = cfg.sequence.velodyne_dir.as_deref().expect("validated");
            let poses = cfg.sequence.poses.as_deref().expect("validated");
            Ok(Sequence::Kitti(KittiSequence::open(velodyne, poses)?))
        }
    }
}

/// The configured frame ids within a sequence of length `len`.
pub fn select_frames(cfg: &RunConfig, len: usize) -> Result<Vec<usize>, CliError> {
    let f = &cfg.frames;
    let end = f.end.unwrap_or(len);
    if end > len {
        return Err(CliError::Data(format!("frames.end = {end} exceeds the sequence length {len}")));
    }
    let frames: Vec<usize> = (f.start..end).step_by(f.stride).collect();
    if frames.is_empty() {
        return Err(CliError::Data(format!("empty frame set ({}..{end})", f.start)));
    }
    Ok(frames)
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("{key} is not set")))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn config_pairs(cfg: &RunConfig) -> impl Iterator<Item = (String, String)> {
    cfg.flat().into_iter().map(|(k, v)| (format!("config.{k}"), v))
}

pub fn cmd_generate(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let path = require(&cfg.paths.dataset, "paths.dataset")?;
    let seq = load_sequence(cfg)?;
    let frames = select_frames(cfg, seq.source().len())?;
    let g = cfg.generate();
    let mut ds = generate_dataset_with(&PointToPlane(g.icp), seq.source(), &frames, &g, |o| {
        let _ = match o {
            FrameOutcome::Record(r) => writeln!(
                out,
                "frame {}: {} valid, {} diverged",
                r.frame_id, r.n, r.diverged_count
            ),
            FrameOutcome::Skipped { frame_id, reason } => {
                writeln!(out, "frame {frame_id}: skipped ({reason})")
            }
        };
    })?;
    ds.metadata.extend(config_pairs(cfg));
    ds.write(path)?;
    let attempted = frames.len() * g.n;
    let _ = writeln!(
        out,
        "frames: {} ({} records, {} skipped), diverged: {:.2}%",
        frames.len(),
        ds.records.len(),
        ds.skipped.len(),
        100.0 * ds.total_diverged() as f64 / attempted as f64
    );
    Ok(())
}

/// Dataset records restricted to the configured frames, with their scans.
fn labelled_samples(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<TrainSample>, CliError> {
    let seq = load_sequence(cfg)?;
    let frames = select_frames(cfg, seq.source().len())?;
    let samples = ds
        .records
        .iter()
        .filter(|r| frames.binary_search(&r.frame_id).is_ok())
        .map(|r| {
            Ok(TrainSample {
                scan: seq.source().scan(r.frame_id)?,
                label: r.covariance,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if samples.is_empty() {
        return Err(CliError::Data("no dataset records in the selected frames".into()));
    }
    Ok(samples)
}

pub fn cmd_train(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let dataset = require(&cfg.paths.dataset, "paths.dataset")?;
    let model_path = require(&cfg.paths.model, "paths.model")?;
    let trace_path = require(&cfg.paths.loss_trace, "paths.loss_trace")?;
    let ds = Dataset::read(dataset)?;
    let samples = labelled_samples(cfg, &ds)?;
    let outcome = train(&samples, &cfg.train())?;
    let mut model = outcome.model;
    model.notes.extend(config_pairs(cfg));
    model.save(model_path)?;

    let mut trace = cfg.comment_header();
    trace.push_str("# step loss\n");
    for (step, loss) in outcome.trace.iter().enumerate() {
        trace.push_str(&format!("{step} {loss:.16e}\n"));
    }
    write_file(trace_path, &trace)?;
    if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
        let _ = writeln!(
            out,
            "trained on {} records for {} steps: loss {first:.6e} -> {last:.6e}",
            samples.len(),
            outcome.trace.len()
        );
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let dataset = require(&cfg.paths.dataset, "paths.dataset")?;
    let model_path = require(&cfg.paths.model, "paths.model")?;
    let report_path = require(&cfg.paths.report, "paths.report")?;
    let ds = Dataset::read(dataset)?;
    let model = RegressionModel::load(model_path)?;
    let samples = labelled_samples(cfg, &ds)?;
    let predictions = samples
        .par_iter()
        .map(|s| predict(&model, &s.scan))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<Cov6> = samples.into_iter().map(|s| s.label).collect();
    let report = evaluate(&predictions, &labels)?;
    write_file(report_path, &format!("{}{}", cfg.comment_header(), report.to_text()))?;
    let _ = write!(out, "{}", report.to_text());
    Ok(())
}

pub fn cmd_fuse(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let modes = cfg.fusion_modes()?;
    let out_dir = require(&cfg.paths.output_dir, "paths.output_dir")?;
    if cfg.fusion.seeds.is_empty() {
        return Err(CliError::Usage("fusion.seeds is empty".into()));
    }
    let fc = cfg.fusion();
    fc.validate()?;
    let model = if modes.contains(&FusionMode::PredictedCov) {
        let path = require(&cfg.paths.model, "paths.model (needed by predicted_cov)")?;
        Some(RegressionModel::load(path)?)
    } else {
        None
    };
    let fixed = if modes.contains(&FusionMode::FixedCov) {
        Some(match cfg.fusion.fixed_sigma {
            Some(s) => Cov6::from_diagonal(&s.map(|v| v * v))?,
            None => {
                let path = require(&cfg.paths.dataset, "paths.dataset (needed by fixed_cov)")?;
                Dataset::read(path)?
                    .mean_covariance()
                    .ok_or_else(|| CliError::Data(format!("{} has no records", path.display())))?
            }
        })
    } else {
        None
    };

    let seq = load_sequence(cfg)?;
    let frames = select_frames(cfg, seq.source().len())?;
    let prepared = prepare_frames(seq.source(), &frames, &fc)?;
    let truth = Trajectory::from_sequence(seq.source(), &frames)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let header = cfg.comment_header();
    write_file(&out_dir.join(GROUND_TRUTH), &format!("{header}{}", truth.to_text()))?;

    let aligner = PointToPlane(fc.icp);
    let mut table = String::from("mode ade_m fde_m\n");
    for mode in modes {
        let covs = measurement_covariances(&prepared, mode, fixed.as_ref(), model.as_ref())?;
        let runs = cfg
            .fusion
            .seeds
            .par_iter()
            .map(|&s| run_filter(&aligner, &prepared, &covs, &fc, s))
            .collect::<Result<Vec<_>, _>>()?;
        let (mut a, mut f) = (0.0, 0.0);
        for (seed, t) in cfg.fusion.seeds.iter().zip(&runs) {
            write_file(
                &out_dir.join(format!("{mode}_seed{seed}.txt")),
                &format!("{header}{}", t.to_text()),
            )?;
            a += ade(t, &truth)?;
            f += fde(t, &truth)?;
        }
        let k = runs.len() as f64;
        table.push_str(&format!("{mode} {:.9} {:.9}\n", a / k, f / k));
    }
    write_file(&out_dir.join(FUSION_TABLE), &format!("{header}{table}"))?;
    let _ = write!(out, "{table}");
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    if cfg.sequence.source != SourceKind::Synthetic {
        return Err(CliError::Usage("synth needs sequence.source = \"synthetic\"".into()));
    }
    let dir = require(&cfg.paths.synth_dir, "paths.synth_dir")?;
    let seq = make_synthetic_scene(&cfg.synth()?);
    let velodyne = dir.join("velodyne");
    fs::create_dir_all(&velodyne).map_err(|e| CliError::io(&velodyne, e))?;
    for (k, scan) in seq.scans.iter().enumerate() {
        write_kitti_scan(&velodyne.join(format!("{k:06}.bin")), scan)?;
    }
    write_kitti_poses(&dir.join("poses.txt"), &seq.poses)?;
    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    let _ = writeln!(out, "wrote {} {} frames to {}", seq.scans.len(), cfg.sequence.kind, dir.display());
    Ok(())
}

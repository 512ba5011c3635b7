//! One-pass evaluation: initialise from the frame-0 groundtruth, track to
//! the end without re-initialisation, score every frame.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nighttrack_core::ntc::CalibrationDecision;
use nighttrack_core::tracker::{Tracker, TrackerOptions};
use nighttrack_core::{BoundingBox, CoreError, Model};
use rayon::prelude::*;

use crate::dataset::{read_boxes, write_boxes, LoadedSequence, SequenceOnDisk};
use crate::error::{EvalError, Result};
use crate::metrics::{count_frames, report_header, FrameCounts, Metrics};

/// Boxes for every frame (frame 0 is the initialisation box) and the
/// calibration decision of every tracked frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub boxes: Vec<BoundingBox>,
    pub decisions: Vec<CalibrationDecision>,
}

pub trait SequenceTracker: Sync {
    /// Trackers may read only `groundtruth[0]`; the whole sequence is
    /// passed so harness stubs can replay it.
    fn track(&self, seq: &LoadedSequence) -> Result<TrackOutput>;
}

pub struct ModelTracker {
    pub model: Model,
    pub options: TrackerOptions,
}

impl SequenceTracker for ModelTracker {
    fn track(&self, seq: &LoadedSequence) -> Result<TrackOutput> {
        let t = Tracker::new(&self.model, self.options);
        let (boxes, state) = t.run(&seq.frames, seq.groundtruth[0])?;
        Ok(TrackOutput {
            boxes,
            decisions: state.history,
        })
    }
}

/// Replays the groundtruth: a perfect tracker for harness self-tests.
pub struct OracleTracker;

impl SequenceTracker for OracleTracker {
    fn track(&self, seq: &LoadedSequence) -> Result<TrackOutput> {
        Ok(TrackOutput {
            boxes: seq.groundtruth.clone(),
            decisions: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub name: String,
    pub boxes: Vec<BoundingBox>,
    pub counts: FrameCounts,
    pub metrics: Metrics,
    pub decisions: Vec<CalibrationDecision>,
}

impl SequenceResult {
    pub fn new(name: String, output: TrackOutput, gts: &[BoundingBox]) -> Result<Self> {
        let counts = count_frames(&output.boxes, gts)?;
        Ok(Self {
            name,
            metrics: counts.metrics(),
            counts,
            boxes: output.boxes,
            decisions: output.decisions,
        })
    }

    pub fn mean_s_c(&self) -> Option<f64> {
        (!self.decisions.is_empty())
            .then(|| self.decisions.iter().map(|d| d.s_c).sum::<f64>() / self.decisions.len() as f64)
    }

    pub fn update_count(&self) -> usize {
        self.decisions.iter().filter(|d| d.applied).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpeReport {
    pub sequences: Vec<SequenceResult>,
    pub aggregate: Metrics,
    /// Sequences that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl OpeReport {
    pub fn from_results(sequences: Vec<SequenceResult>, skipped: Vec<(String, String)>) -> Self {
        let mut pooled = FrameCounts::default();
        for s in &sequences {
            pooled.merge(&s.counts);
        }
        Self {
            aggregate: pooled.metrics(),
            sequences,
            skipped,
        }
    }
}

fn is_data_error(e: &EvalError) -> bool {
    !matches!(e, EvalError::Core(CoreError::Numerical(_) | CoreError::Config(_)))
}

/// Evaluate `tracker` on every sequence. With `parallel` the sequences are
/// spread over the rayon pool; results keep input order either way and the
/// pooled metrics are integer sums, so both modes agree exactly. Unreadable
/// sequences are skipped and listed; numerical failures abort the run.
pub fn run_ope(tracker: &dyn SequenceTracker, seqs: &[SequenceOnDisk], parallel: bool) -> Result<OpeReport> {
    let one = |s: &SequenceOnDisk| -> Result<SequenceResult> {
        let loaded = s.load()?;
        let out = tracker.track(&loaded)?;
        SequenceResult::new(s.name.clone(), out, &loaded.groundtruth)
    };
    let outcomes: Vec<Result<SequenceResult>> = if parallel {
        seqs.par_iter().map(one).collect()
    } else {
        seqs.iter().map(one).collect()
    };
    let (mut results, mut skipped) = (Vec::new(), Vec::new());
    for (s, o) in seqs.iter().zip(outcomes) {
        match o {
            Ok(r) => results.push(r),
            Err(e) if is_data_error(&e) => skipped.push((s.name.clone(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(OpeReport::from_results(results, skipped))
}

/// Score existing results files `<results_dir>/<sequence>.txt`.
pub fn evaluate_results(results_dir: &Path, seqs: &[SequenceOnDisk]) -> Result<OpeReport> {
    let (mut results, mut skipped) = (Vec::new(), Vec::new());
    for s in seqs {
        let path = results_file(results_dir, &s.name);
        let outcome = read_boxes(&path).and_then(|boxes| {
            SequenceResult::new(
                s.name.clone(),
                TrackOutput {
                    boxes,
                    decisions: Vec::new(),
                },
                &s.groundtruth,
            )
        });
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => skipped.push((s.name.clone(), e.to_string())),
        }
    }
    Ok(OpeReport::from_results(results, skipped))
}

pub fn results_file(dir: &Path, sequence: &str) -> PathBuf {
    dir.join(format!("{sequence}.txt"))
}

/// `sequence,frames,P,P_Norm,AUC,mean_s_c,update_count`, one row per
/// sequence and a final `ALL` row with pooled metrics. Unknown calibration
/// figures are left empty.
pub fn summary_csv(report: &OpeReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sequence", "frames", "P", "P_Norm", "AUC", "mean_s_c", "update_count"])?;
    let num = |v: f64| v.to_string();
    for s in &report.sequences {
        let calibrated = !s.decisions.is_empty();
        w.write_record([
            s.name.clone(),
            s.metrics.frames.to_string(),
            num(s.metrics.p),
            num(s.metrics.p_norm),
            num(s.metrics.auc),
            s.mean_s_c().map(num).unwrap_or_default(),
            if calibrated { s.update_count().to_string() } else { String::new() },
        ])?;
    }
    let a = &report.aggregate;
    let decisions: Vec<&CalibrationDecision> = report.sequences.iter().flat_map(|s| &s.decisions).collect();
    let mean_s_c = (!decisions.is_empty())
        .then(|| decisions.iter().map(|d| d.s_c).sum::<f64>() / decisions.len() as f64);
    w.write_record([
        "ALL".to_string(),
        a.frames.to_string(),
        num(a.p),
        num(a.p_norm),
        num(a.auc),
        mean_s_c.map(num).unwrap_or_default(),
        if decisions.is_empty() {
            String::new()
        } else {
            decisions.iter().filter(|d| d.applied).count().to_string()
        },
    ])?;
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Human-readable report: metric definitions, per-sequence lines, skipped
/// sequences.
pub fn report_text(report: &OpeReport) -> String {
    let mut s = report_header();
    for r in &report.sequences {
        let _ = writeln!(
            s,
            "{:<24} frames {:>5}  P {:.4}  P_Norm {:.4}  AUC {:.4}",
            r.name, r.metrics.frames, r.metrics.p, r.metrics.p_norm, r.metrics.auc
        );
    }
    let a = &report.aggregate;
    let _ = writeln!(
        s,
        "{:<24} frames {:>5}  P {:.4}  P_Norm {:.4}  AUC {:.4}",
        "ALL", a.frames, a.p, a.p_norm, a.auc
    );
    for (name, why) in &report.skipped {
        let _ = writeln!(s, "skipped {name}: {why}");
    }
    s
}

/// Results files, `summary.csv` and `report.txt` under `out`.
pub fn write_report(out: &Path, report: &OpeReport) -> Result<()> {
    fs::create_dir_all(out)?;
    for r in &report.sequences {
        write_boxes(&results_file(out, &r.name), &r.boxes)?;
    }
    fs::write(out.join("summary.csv"), summary_csv(report)?)?;
    fs::write(out.join("report.txt"), report_text(report))?;
    Ok(())
}

/// Per-frame calibration log lines: `sequence frame s_c update applied`.
/// Frame numbers count from 1 because frame 0 only initialises.
pub fn decision_log(report: &OpeReport) -> String {
    let mut s = String::new();
    for r in &report.sequences {
        for (i, d) in r.decisions.iter().enumerate() {
            let _ = writeln!(s, "{} {} {} {} {}", r.name, i + 1, d.s_c, d.update, d.applied);
        }
    }
    s
}

//! Attention-based interpretability: intra-modal scores over 0.5 s windows,
//! cross-modal scores over modalities, and inter-epoch scores over sequence
//! positions, recomputed as single-head scaled dot products from the cached
//! block outputs. Reports export to CSV, JSON, or signal-overlay SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::SequenceCmt;
use crate::tape::Tape;
use crate::tensor::{softmax, Tensor};
use crate::train::{channel_indices, sequence_batch};

/// Scaled dot-product scores of one query against a set of keys:
/// `softmax_i(q . k_i / sqrt(E))`.
fn scaled_dot_scores(query: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| query.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    softmax(&logits)
}

/// Attention of the CLS representation over the window representations
/// `Z_i` (rows of the intra-modal block output), one score per 0.5 s window.
pub fn intra_modal_scores(cls_repr: &[f64], window_reprs: &[Vec<f64>]) -> Vec<f64> {
    scaled_dot_scores(cls_repr, window_reprs)
}

/// Attention of the CLS_cross representation over the per-modality CLS
/// representations from the cross-modal block output.
pub fn cross_modal_scores(cross_repr: &[f64], modality_reprs: &[Vec<f64>]) -> Vec<f64> {
    scaled_dot_scores(cross_repr, modality_reprs)
}

/// Pairwise attention between the per-epoch CLS_cross vectors: row `q` is the
/// distribution of query epoch `q` over all epochs.
pub fn inter_epoch_scores(cls_per_epoch: &[Vec<f64>]) -> Vec<Vec<f64>> {
    cls_per_epoch
        .iter()
        .map(|q| scaled_dot_scores(q, cls_per_epoch))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochScores {
    /// Offset of this epoch within the recording's epoch list.
    pub epoch_offset: usize,
    pub orig_index: usize,
    pub true_label: String,
    pub predicted: String,
    pub probabilities: Vec<f64>,
    /// Per modality: one score per 0.5 s window, summing to 1.
    pub intra: Vec<Vec<f64>>,
    /// One score per modality, summing to 1.
    pub cross: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    /// `<recording_id>:<start-offset>`.
    pub sequence_id: String,
    pub modalities: Vec<String>,
    pub epochs: Vec<EpochScores>,
    /// `L x L`; row q is query epoch q's distribution over epochs.
    pub inter: Vec<Vec<f64>>,
}

/// A report plus the window's raw signals (needed by the SVG rendering).
pub struct ReportBundle {
    pub report: AttentionReport,
    /// `[L, T, M]` signals of the interpreted window.
    pub signals: Tensor<f32>,
}

fn rows_f64(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let (rows, cols) = t.dims2().expect("2-d cache tensor");
    let data = t.to_f64_vec();
    (0..rows)
        .map(|r| data[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

/// Run the sequence model over one window (eval mode) and assemble the
/// report from the cached representations.
pub fn report_for_window(
    model: &SequenceCmt<f32>,
    dataset: &Dataset,
    recording: usize,
    start: usize,
) -> Result<ReportBundle> {
    let l = model.config().seq_len;
    let rec = dataset
        .recordings
        .get(recording)
        .ok_or_else(|| Error::Input(format!("recording index {recording} out of range")))?;
    if start + l > rec.epochs.len() {
        return Err(Error::Input(format!(
            "window [{start}, {}) exceeds the {} epochs of recording {}",
            start + l,
            rec.epochs.len(),
            rec.recording_id
        )));
    }
    for i in 1..l {
        if rec.epochs[start + i].orig_index != rec.epochs[start + i - 1].orig_index + 1 {
            return Err(Error::Input(format!(
                "window [{start}, {}) of recording {} crosses a discarded-epoch gap",
                start + l,
                rec.recording_id
            )));
        }
    }
    let idxs = channel_indices(dataset, &model.config().modalities)?;
    let (signals, _) = sequence_batch(
        dataset,
        &[crate::dataset::SequenceRef { recording, start }],
        l,
        &idxs,
    )?;

    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, &signals, false)?;
    let trace = &out.trace[0];
    let n_windows = model.config().n_windows();
    let m = model.config().modalities.len();

    // Inter-epoch scores from the block input (post positional encoding).
    let inter = inter_epoch_scores(&rows_f64(tape.value(trace.inter_input)));

    let logits_t = tape.value(out.logits).clone();
    let mut epochs = Vec::with_capacity(l);
    for li in 0..l {
        let cache = &trace.epochs[li];
        let mut intra = Vec::with_capacity(m);
        for mi in 0..m {
            let rows = rows_f64(tape.value(cache.intra_out[mi]));
            let cls = rows[0].clone();
            let windows = rows[1..=n_windows].to_vec();
            intra.push(intra_modal_scores(&cls, &windows));
        }
        let cross_rows = rows_f64(tape.value(cache.cross_out));
        let cross = cross_modal_scores(&cross_rows[0], &cross_rows[1..=m].to_vec());

        let logit_row: Vec<f64> = logits_t.row(li).iter().map(|&v| v as f64).collect();
        let probabilities = softmax(&logit_row);
        let mut pred = 0usize;
        for (i, &p) in probabilities.iter().enumerate() {
            if p > probabilities[pred] {
                pred = i;
            }
        }
        let epoch = &rec.epochs[start + li];
        epochs.push(EpochScores {
            epoch_offset: start + li,
            orig_index: epoch.orig_index,
            true_label: epoch.label.name().to_string(),
            predicted: crate::labels::AasmStage::from_index(pred)?.name().to_string(),
            probabilities,
            intra,
            cross,
        });
    }

    let report = AttentionReport {
        sequence_id: format!("{}:{}", rec.recording_id, start),
        modalities: model.config().modalities.clone(),
        epochs,
        inter,
    };
    let signals3 = signals.reshaped(&[
        l,
        model.config().epoch_samples,
        model.config().modalities.len(),
    ])?;
    Ok(ReportBundle {
        report,
        signals: signals3,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            "svg" => Ok(ExportFormat::Svg),
            other => Err(Error::Config(format!(
                "unknown export format '{other}' (expected csv, json, or svg)"
            ))),
        }
    }
}

fn file_stem(sequence_id: &str) -> String {
    sequence_id.replace(':', "-")
}

/// Write the report in the requested format; returns the paths written.
pub fn export_report(
    bundle: &ReportBundle,
    format: ExportFormat,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    match format {
        ExportFormat::Csv => export_csv(&bundle.report, dir),
        ExportFormat::Json => export_json(&bundle.report, dir),
        ExportFormat::Svg => Ok(vec![export_svg(bundle, dir)?]),
    }
}

/// Three CSVs: intra (sequence_id, epoch_idx, modality, window_idx, score),
/// cross (sequence_id, epoch_idx, modality, score), and inter
/// (sequence_id, query_epoch, key_epoch, score).
fn export_csv(report: &AttentionReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let stem = file_stem(&report.sequence_id);
    let intra_path = dir.join(format!("{stem}_intra.csv"));
    let mut intra = String::from("sequence_id,epoch_idx,modality,window_idx,score\n");
    for (ei, epoch) in report.epochs.iter().enumerate() {
        for (mi, scores) in epoch.intra.iter().enumerate() {
            for (wi, s) in scores.iter().enumerate() {
                writeln!(
                    intra,
                    "{},{},{},{},{}",
                    report.sequence_id, ei, report.modalities[mi], wi, s
                )
                .unwrap();
            }
        }
    }
    std::fs::write(&intra_path, intra)?;

    let cross_path = dir.join(format!("{stem}_cross.csv"));
    let mut cross = String::from("sequence_id,epoch_idx,modality,score\n");
    for (ei, epoch) in report.epochs.iter().enumerate() {
        for (mi, s) in epoch.cross.iter().enumerate() {
            writeln!(
                cross,
                "{},{},{},{}",
                report.sequence_id, ei, report.modalities[mi], s
            )
            .unwrap();
        }
    }
    std::fs::write(&cross_path, cross)?;

    let inter_path = dir.join(format!("{stem}_inter.csv"));
    let mut inter = String::from("sequence_id,query_epoch,key_epoch,score\n");
    for (qi, row) in report.inter.iter().enumerate() {
        for (ki, s) in row.iter().enumerate() {
            writeln!(inter, "{},{},{},{}", report.sequence_id, qi, ki, s).unwrap();
        }
    }
    std::fs::write(&inter_path, inter)?;
    Ok(vec![intra_path, cross_path, inter_path])
}

fn export_json(report: &AttentionReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let path = dir.join(format!("{}.json", file_stem(&report.sequence_id)));
    std::fs::write(&path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(vec![path])
}

/// One SVG per sequence: signal traces with red per-window backgrounds whose
/// opacity is `score / max(score)` within that epoch and modality, bar charts
/// for cross-modal scores, and a bar chart per query epoch for inter-epoch
/// scores. Element order is deterministic.
fn export_svg(bundle: &ReportBundle, dir: &Path) -> Result<PathBuf> {
    let report = &bundle.report;
    let path = dir.join(format!("{}.svg", file_stem(&report.sequence_id)));
    let (l, t, m) = bundle.signals.dims3()?;
    let n_windows = report.epochs[0].intra[0].len();

    let plot_w = 900.0;
    let trace_h = 70.0;
    let bar_h = 60.0;
    let margin = 40.0;
    let epoch_h = trace_h * m as f64 + bar_h + 30.0;
    let inter_h = bar_h + 40.0;
    let total_h = margin + inter_h + l as f64 * epoch_h + margin;
    let total_w = plot_w + 2.0 * margin;

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w:.0}\" height=\"{total_h:.0}\" viewBox=\"0 0 {total_w:.0} {total_h:.0}\">"
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"{margin}\" y=\"24\" font-size=\"16\">sequence {}</text>",
        report.sequence_id
    )
    .unwrap();

    // Inter-epoch bars: one group per query epoch.
    let mut y0 = margin;
    let group_w = plot_w / l as f64;
    for (qi, row) in report.inter.iter().enumerate() {
        let base_x = margin + qi as f64 * group_w;
        writeln!(
            svg,
            "<text x=\"{base_x:.1}\" y=\"{:.1}\" font-size=\"10\">inter q{qi}</text>",
            y0 + bar_h + 12.0
        )
        .unwrap();
        let bw = (group_w - 10.0) / row.len() as f64;
        for (ki, &s) in row.iter().enumerate() {
            let h = s * bar_h;
            writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"steelblue\"/>",
                base_x + ki as f64 * bw,
                y0 + bar_h - h,
                bw * 0.85,
                h
            )
            .unwrap();
        }
    }
    y0 += inter_h;

    for (ei, epoch) in report.epochs.iter().enumerate() {
        writeln!(
            svg,
            "<text x=\"{margin}\" y=\"{:.1}\" font-size=\"12\">epoch {ei} true={} pred={}</text>",
            y0 + 12.0,
            epoch.true_label,
            epoch.predicted
        )
        .unwrap();
        let mut trace_y = y0 + 20.0;
        for mi in 0..m {
            let scores = &epoch.intra[mi];
            let max = scores.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
            let win_w = plot_w / n_windows as f64;
            for (wi, &s) in scores.iter().enumerate() {
                writeln!(
                    svg,
                    "<rect x=\"{:.1}\" y=\"{trace_y:.1}\" width=\"{win_w:.2}\" height=\"{trace_h:.1}\" fill=\"rgb(255,0,0)\" fill-opacity=\"{:.4}\"/>",
                    margin + wi as f64 * win_w,
                    s / max
                )
                .unwrap();
            }
            // Decimated signal polyline, scaled into the trace band.
            let step = (t / 600).max(1);
            let mut lo = f32::MAX;
            let mut hi = f32::MIN;
            for i in (0..t).step_by(step) {
                let v = bundle.signals.data()[(ei * t + i) * m + mi];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let span = (hi - lo).max(1e-6);
            let mut points = String::new();
            for i in (0..t).step_by(step) {
                let v = bundle.signals.data()[(ei * t + i) * m + mi];
                let x = margin + plot_w * i as f64 / t as f64;
                let y = trace_y + trace_h as f64 * (1.0 - ((v - lo) / span) as f64);
                write!(points, "{x:.1},{y:.1} ").unwrap();
            }
            writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"0.6\"/>",
                points.trim_end()
            )
            .unwrap();
            writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{}</text>",
                margin + plot_w + 4.0,
                trace_y + trace_h / 2.0,
                report.modalities[mi]
            )
            .unwrap();
            trace_y += trace_h;
        }
        // Cross-modal bars.
        let bw = 60.0;
        for (mi, &s) in epoch.cross.iter().enumerate() {
            let h = s * bar_h;
            writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"crimson\"/>",
                margin + mi as f64 * (bw + 10.0),
                trace_y + bar_h - h,
                bw,
                h
            )
            .unwrap();
            writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{} {:.3}</text>",
                margin + mi as f64 * (bw + 10.0),
                trace_y + bar_h + 12.0,
                report.modalities[mi],
                s
            )
            .unwrap();
        }
        y0 += epoch_h;
    }
    writeln!(svg, "</svg>").unwrap();
    std::fs::write(&path, svg)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_keys_give_uniform_scores() {
        let keys = vec![vec![0.3, -0.7, 1.1]; 6];
        let scores = intra_modal_scores(&[0.5, 0.5, 0.5], &keys);
        for &s in &scores {
            assert!((s - 1.0 / 6.0).abs() < 1e-12);
        }
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn aligned_key_dominates() {
        let cls = vec![1.0, 0.0, 0.0, 0.0];
        let mut keys = vec![vec![0.0, 1.0, 0.0, 0.0]; 8];
        keys[3] = vec![50.0, 0.0, 0.0, 0.0];
        let scores = intra_modal_scores(&cls, &keys);
        let argmax = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 3);
    }

    #[test]
    fn cross_scores_closed_form() {
        // dot products (2, 0) with E=4 -> softmax(2/2, 0)
        let cross = vec![1.0, 1.0, 0.0, 0.0];
        let keys = vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0]];
        let scores = cross_modal_scores(&cross, &keys);
        let expected = softmax(&[2.0 / 2.0, 0.0]);
        assert!((scores[0] - expected[0]).abs() < 1e-12);
        assert!((scores[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn single_modality_scores_one() {
        let scores = cross_modal_scores(&[0.2, 0.4], &[vec![1.0, -1.0]]);
        assert_eq!(scores, vec![1.0]);
    }

    #[test]
    fn inter_scores_rows_are_distributions() {
        let cls = vec![
            vec![0.1, 0.9],
            vec![-0.4, 0.2],
            vec![1.5, 0.0],
        ];
        let rows = inter_epoch_scores(&cls);
        assert_eq!(rows.len(), 3);
        for row in &rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&s| s >= 0.0));
        }
        // L=1 degenerates to [[1.0]]
        assert_eq!(inter_epoch_scores(&[vec![3.0, 4.0]]), vec![vec![1.0]]);
    }

    #[test]
    fn rotation_invariance() {
        // A common orthogonal rotation of cls and all keys preserves scores.
        let theta: f64 = 0.7;
        let rot = |v: &[f64]| {
            vec![
                v[0] * theta.cos() - v[1] * theta.sin(),
                v[0] * theta.sin() + v[1] * theta.cos(),
            ]
        };
        let cls = vec![0.8, -0.3];
        let keys: Vec<Vec<f64>> = vec![vec![1.0, 0.2], vec![-0.5, 0.9], vec![0.0, 1.4]];
        let base = intra_modal_scores(&cls, &keys);
        let rot_keys: Vec<Vec<f64>> = keys.iter().map(|k| rot(k)).collect();
        let rotated = intra_modal_scores(&rot(&cls), &rot_keys);
        for (a, b) in base.iter().zip(&rotated) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

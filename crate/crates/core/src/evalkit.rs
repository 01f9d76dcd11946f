//! Metrics (SNR, SI-SNR, SNRi, failure rate), evaluation over manifests and report files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clue::ClueKind;
use crate::error::{Error, Result};
use crate::mixsim::{Manifest, MixtureSample};
use crate::model::TseModel;
use crate::signal::Waveform;

/// Relative floor on the error energy; caps every SNR at 60 dB.
pub const EPS: f64 = 1e-6;

/// SNRi below this counts as a failed extraction.
pub const FAILURE_THRESHOLD_DB: f64 = 1.0;

fn check_pair(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    let e: f64 = b.iter().map(|&v| (v as f64).powi(2)).sum();
    if e == 0.0 {
        return Err(Error::EmptyReference);
    }
    Ok(e)
}

/// `10 log10(|r|^2 / (|r - e|^2 + EPS |r|^2))` on raw sample slices.
pub fn snr_db_slice(est: &[f32], reference: &[f32]) -> Result<f64> {
    let r2 = check_pair(est, reference)?;
    let d2: f64 = est
        .iter()
        .zip(reference)
        .map(|(&e, &r)| (r as f64 - e as f64).powi(2))
        .sum();
    Ok(10.0 * (r2 / (d2 + EPS * r2)).log10())
}

pub fn snr_db(est: &Waveform, reference: &Waveform) -> Result<f64> {
    snr_db_slice(est.samples(), reference.samples())
}

/// Scale-invariant SNR of zero-mean signals, with the same 60 dB cap.
pub fn si_snr_db_slice(est: &[f32], reference: &[f32]) -> Result<f64> {
    check_pair(est, reference)?;
    let n = est.len() as f64;
    let me = est.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mr = reference.iter().map(|&v| v as f64).sum::<f64>() / n;
    let e: Vec<f64> = est.iter().map(|&v| v as f64 - me).collect();
    let r: Vec<f64> = reference.iter().map(|&v| v as f64 - mr).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::EmptyReference);
    }
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let er: f64 = e.iter().zip(&r).map(|(a, b)| a * b).sum();
    let alpha = er / rr;
    let target = alpha * alpha * rr;
    let noise: f64 = e.iter().zip(&r).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    Ok(10.0 * ((target + EPS * ee) / (noise + EPS * ee)).log10())
}

pub fn si_snr_db(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_snr_db_slice(est.samples(), reference.samples())
}

/// SNR improvement of `est` over the unprocessed mixture.
pub fn snri(est: &Waveform, reference: &Waveform, mix: &Waveform) -> Result<f64> {
    if mix.len() != reference.len() {
        return Err(Error::Shape(format!("lengths {} and {}", mix.len(), reference.len())));
    }
    Ok(snr_db(est, reference)? - snr_db(mix, reference)?)
}

/// Percentage of values below [`FAILURE_THRESHOLD_DB`].
pub fn failure_rate(snri_values: &[f64]) -> Result<f64> {
    if snri_values.is_empty() {
        return Err(Error::Empty("SNRi list"));
    }
    let bad = snri_values.iter().filter(|&&v| v < FAILURE_THRESHOLD_DB).count();
    Ok(100.0 * bad as f64 / snri_values.len() as f64)
}

/// One extracted target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetric {
    pub sample_id: usize,
    pub class_id: usize,
    pub clue_kind: ClueKind,
    pub snri_db: f64,
    pub si_snr_db: f64,
}

/// Extracts both targets of every sample with clues of `kind`.
pub fn evaluate_samples(model: &TseModel, samples: &[MixtureSample], kind: ClueKind) -> Result<Vec<SampleMetric>> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut out = Vec::new();
    for s in samples {
        let n_classes = model.config().n_classes;
        if let Some(t) = s.targets.iter().find(|t| t.class >= n_classes) {
            return Err(Error::Config(format!(
                "sample {} has class {} but the model knows {n_classes} classes",
                s.record.id, t.class
            )));
        }
        let e = match kind {
            ClueKind::ClassLabel => {
                model.embed_labels(&s.targets.iter().map(|t| t.class).collect::<Vec<_>>())?
            }
            ClueKind::Enrollment => model.embed_enrollments(
                &s.targets.iter().map(|t| t.enrollment.clone()).collect::<Vec<_>>(),
            )?,
        };
        let mixes = vec![s.mixture.clone(); s.targets.len()];
        let y = model.forward_waveforms(&mixes, &e)?;
        for (i, t) in s.targets.iter().enumerate() {
            let est = crate::model::tensor_to_waveform(&y, i)?;
            out.push(SampleMetric {
                sample_id: s.record.id,
                class_id: t.class,
                clue_kind: kind,
                snri_db: snri(&est, &t.reference, &s.mixture)?,
                si_snr_db: si_snr_db(&est, &t.reference)?,
            });
        }
    }
    Ok(out)
}

/// Evaluates every manifest record with clues of `kind`.
pub fn evaluate(model: &TseModel, manifest: &Manifest, kind: ClueKind) -> Result<Vec<SampleMetric>> {
    if manifest.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    if manifest.bank.len() > model.config().n_classes {
        return Err(Error::Config(format!(
            "manifest bank has {} classes, the checkpoint {}",
            manifest.bank.len(),
            model.config().n_classes
        )));
    }
    let mut out = Vec::new();
    for i in 0..manifest.len() {
        out.extend(evaluate_samples(model, &[manifest.realize(i)?], kind)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub clue_kind: ClueKind,
    pub n: usize,
    pub mean_snri_db: f64,
    pub mean_si_snr_db: f64,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub model: String,
    pub class_names: Vec<String>,
    pub rows: Vec<SampleMetric>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl Report {
    pub fn kinds(&self) -> Vec<ClueKind> {
        let mut k: Vec<ClueKind> = self.rows.iter().map(|r| r.clue_kind).collect();
        k.sort();
        k.dedup();
        k
    }

    /// One row per clue kind present, class label first.
    pub fn summary(&self) -> Result<Vec<SummaryRow>> {
        self.kinds()
            .into_iter()
            .map(|kind| {
                let rows: Vec<&SampleMetric> = self.rows.iter().filter(|r| r.clue_kind == kind).collect();
                let snri: Vec<f64> = rows.iter().map(|r| r.snri_db).collect();
                Ok(SummaryRow {
                    clue_kind: kind,
                    n: rows.len(),
                    mean_snri_db: mean(snri.iter().copied()),
                    mean_si_snr_db: mean(rows.iter().map(|r| r.si_snr_db)),
                    failure_rate: failure_rate(&snri)?,
                })
            })
            .collect()
    }

    /// Mean SNRi per class for one clue kind.
    pub fn per_class(&self, kind: ClueKind) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.clue_kind == kind) {
            let e = acc.entry(r.class_id).or_default();
            e.0 += r.snri_db;
            e.1 += 1;
        }
        acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
    }

    fn class_name(&self, c: usize) -> String {
        self.class_names.get(c).cloned().unwrap_or_else(|| format!("class {c}"))
    }

    /// Classes in descending order of the first clue kind's mean SNRi.
    pub fn chart_order(&self) -> Vec<usize> {
        let Some(&first) = self.kinds().first() else {
            return Vec::new();
        };
        let mut classes: Vec<usize> = self.rows.iter().map(|r| r.class_id).collect();
        classes.sort();
        classes.dedup();
        let base = self.per_class(first);
        classes.sort_by(|a, b| {
            let va = base.get(a).copied().unwrap_or(f64::NEG_INFINITY);
            let vb = base.get(b).copied().unwrap_or(f64::NEG_INFINITY);
            vb.total_cmp(&va).then(a.cmp(b))
        });
        classes
    }

    pub fn summary_markdown(&self) -> Result<String> {
        let mut s = format!("# {}\n\n", self.model);
        s.push_str("| clue | samples | SNRi [dB] | SI-SNR [dB] | FR [%] |\n|---|---:|---:|---:|---:|\n");
        for r in self.summary()? {
            s.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {:.2} |\n",
                r.clue_kind.as_str(),
                r.n,
                r.mean_snri_db,
                r.mean_si_snr_db,
                r.failure_rate
            ));
        }
        let kinds = self.kinds();
        s.push_str("\nPer-class SNRi [dB]\n\n| class |");
        for k in &kinds {
            s.push_str(&format!(" {} |", k.as_str()));
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(kinds.len()));
        s.push('\n');
        let tables: Vec<_> = kinds.iter().map(|&k| self.per_class(k)).collect();
        for c in self.chart_order() {
            s.push_str(&format!("| {} |", self.class_name(c)));
            for t in &tables {
                match t.get(&c) {
                    Some(v) => s.push_str(&format!(" {v:.2} |")),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        Ok(s)
    }
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub chart: PathBuf,
}

pub fn write_csv(rows: &[SampleMetric], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<SampleMetric>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<SampleMetric>, _>>()?;
    Ok(rows)
}

/// Writes `metrics.csv`, `summary.md` and the per-class bar chart `per_class.svg` into `dir`.
pub fn emit_report(report: &Report, dir: impl AsRef<Path>) -> Result<ReportFiles> {
    if report.rows.is_empty() {
        return Err(Error::Empty("report"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let files = ReportFiles {
        csv: dir.join("metrics.csv"),
        summary: dir.join("summary.md"),
        chart: dir.join("per_class.svg"),
    };
    write_csv(&report.rows, &files.csv)?;
    std::fs::write(&files.summary, report.summary_markdown()?)?;
    draw_chart(report, &files.chart)?;
    Ok(files)
}

fn draw_chart(report: &Report, path: &Path) -> Result<()> {
    use plotters::prelude::*;

    let order = report.chart_order();
    let kinds = report.kinds();
    let tables: Vec<_> = kinds.iter().map(|&k| report.per_class(k)).collect();
    let values = tables.iter().flat_map(|t| t.values().copied());
    let (lo, hi) = values.fold((0.0f64, 1.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = 0.1 * (hi - lo);
    let n = order.len();
    let plot_err = |e: &dyn std::fmt::Display| Error::Io(std::io::Error::other(e.to_string()));

    let root = SVGBackend::new(path, (160 + 90 * n as u32, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("SNRi per target class", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n as f64, (lo - pad)..(hi + pad))
        .map_err(|e| plot_err(&e))?;
    let names: Vec<String> = order.iter().map(|&c| report.class_name(c)).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.max(1))
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            names.get(i).cloned().unwrap_or_default()
        })
        .y_desc("SNRi [dB]")
        .draw()
        .map_err(|e| plot_err(&e))?;
    let palette = [RGBColor(52, 101, 164), RGBColor(204, 102, 0)];
    let width = 0.8 / kinds.len().max(1) as f64;
    for (j, (kind, table)) in kinds.iter().zip(&tables).enumerate() {
        let color = palette[j % palette.len()];
        let bars: Vec<_> = order
            .iter()
            .enumerate()
            .filter_map(|(i, c)| table.get(c).map(|&v| (i, v)))
            .map(|(i, v)| {
                let x0 = i as f64 + 0.1 + j as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, v)], color.filled())
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(|e| plot_err(&e))?
            .label(kind.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// A published full-scale result: AudioSet-pretrained encoder, 20-class reverberant
/// corpus, 100k training mixtures. Listed for orientation; toy runs do not reach these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub backbone: &'static str,
    pub m2d_enroll: bool,
    pub m2d_mixture: bool,
    pub clue: ClueKind,
    pub snri_db: f64,
    /// Failure rate as reported.
    pub failure_rate: f64,
}

const fn rp(backbone: &'static str, e: bool, m: bool, clue: ClueKind, snri_db: f64, failure_rate: f64) -> ReferencePoint {
    ReferencePoint {
        backbone,
        m2d_enroll: e,
        m2d_mixture: m,
        clue,
        snri_db,
        failure_rate,
    }
}

pub const REFERENCE_POINTS: [ReferencePoint; 12] = [
    rp("soundbeam", false, false, ClueKind::ClassLabel, 9.48, 0.05),
    rp("soundbeam", false, false, ClueKind::Enrollment, 7.72, 0.19),
    rp("soundbeam", true, false, ClueKind::ClassLabel, 9.52, 0.05),
    rp("soundbeam", true, false, ClueKind::Enrollment, 9.13, 0.09),
    rp("soundbeam", true, true, ClueKind::ClassLabel, 10.49, 0.03),
    rp("soundbeam", true, true, ClueKind::Enrollment, 9.86, 0.08),
    rp("waveformer", false, false, ClueKind::ClassLabel, 7.75, 0.07),
    rp("waveformer", false, false, ClueKind::Enrollment, 6.01, 0.23),
    rp("waveformer", true, false, ClueKind::ClassLabel, 7.43, 0.09),
    rp("waveformer", true, false, ClueKind::Enrollment, 7.01, 0.12),
    rp("waveformer", true, true, ClueKind::ClassLabel, 7.73, 0.07),
    rp("waveformer", true, true, ClueKind::Enrollment, 7.17, 0.10),
];

/// Mixture SNR of the full-scale test corpus, dB.
pub const REFERENCE_MIXTURE_SNR_DB: f64 = -0.40;

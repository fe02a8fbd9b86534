use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::experiment::{files, read_jsonl, ExperimentConfig};
use crate::pipeline::StageRecord;

/// Metric groups of one run with the metadata needed to reproduce it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    /// SHA-256 of the run configuration.
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    /// Content hash of each checkpoint.
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
}

impl MetricsReport {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("layout".into(), cfg.backbone.layout.to_string());
        meta.insert("variant".into(), cfg.backbone.variant.kind.to_string());
        meta.insert("levels".into(), cfg.backbone.levels.to_string());
        Self {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            meta,
            checkpoints: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    /// Adds a metric group, refusing non-finite values.
    pub fn insert_group(&mut self, group: &str, values: BTreeMap<String, f64>) -> Result<()> {
        if let Some((k, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Range(format!("metric {group}.{k} is {v}")));
        }
        self.metrics.insert(group.to_string(), values);
        Ok(())
    }

    pub fn get(&self, group: &str, metric: &str) -> Option<f64> {
        self.metrics.get(group)?.get(metric).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// `group,metric,value` rows in key order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,metric,value\n");
        for (g, m) in &self.metrics {
            for (k, v) in m {
                s.push_str(&format!("{g},{k},{v}\n"));
            }
        }
        s
    }
}

/// What [`report`] found and wrote.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportOutput {
    /// Reports keyed by run name; `.` is the directory itself.
    pub runs: BTreeMap<String, MetricsReport>,
    /// Missing or unreadable artifacts.
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Runs found in `dir`: the directory itself and its immediate
/// subdirectories, whichever hold a metrics file or stage logs.
fn run_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = vec![(".".to_string(), dir.to_path_buf())];
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subs.sort();
    for p in subs {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((name, p));
    }
    Ok(out)
}

/// Absolute form of a path that may not exist yet: its deepest existing
/// ancestor, canonicalized, with the remaining components appended.
fn resolved(path: &Path) -> Result<PathBuf> {
    let abs = if path.is_absolute() { path.to_path_buf() } else { std::env::current_dir()?.join(path) };
    let mut base = abs.as_path();
    let mut rest = Vec::new();
    while !base.exists() {
        match (base.parent(), base.file_name()) {
            (Some(parent), Some(name)) => {
                rest.push(name.to_os_string());
                base = parent;
            }
            _ => break,
        }
    }
    let mut out = base.canonicalize()?;
    out.extend(rest.iter().rev());
    Ok(out)
}

fn has_artifacts(dir: &Path) -> bool {
    [files::METRICS, files::STAGE2_LOG, files::STAGE3_LOG, files::TOKENIZER_LOG]
        .iter()
        .any(|f| dir.join(f).exists())
}

/// Aggregates the run artifacts under `run_dir` into CSV tables and SVG
/// plots written to `out_dir`. Missing artifacts are listed as warnings;
/// nothing under `run_dir` is modified.
pub fn report(run_dir: &Path, out_dir: &Path) -> Result<ReportOutput> {
    if !run_dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", run_dir.display())));
    }
    if resolved(out_dir)?.starts_with(run_dir.canonicalize()?) {
        return Err(Error::Config("report output must lie outside the run directory".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut out = ReportOutput::default();
    let mut losses: Vec<(String, StageRecord)> = Vec::new();
    for (name, dir) in run_dirs(run_dir)? {
        if !has_artifacts(&dir) {
            if name == "." && run_dirs(run_dir)?.len() == 1 {
                out.warnings.push(format!("{}: no run artifacts found", dir.display()));
            }
            continue;
        }
        match MetricsReport::load(&dir.join(files::METRICS)) {
            Ok(r) => {
                out.runs.insert(name.clone(), r);
            }
            Err(e) => out.warnings.push(format!("{name}: {} unreadable ({e})", files::METRICS)),
        }
        for log in [files::STAGE2_LOG, files::STAGE3_LOG] {
            match read_jsonl::<StageRecord>(&dir.join(log)) {
                Ok(recs) => losses.extend(recs.into_iter().map(|r| (name.clone(), r))),
                Err(e) => out.warnings.push(format!("{name}: {log} unreadable ({e})")),
            }
        }
    }
    if out.runs.is_empty() && out.warnings.is_empty() {
        out.warnings.push("no metrics reports found".into());
    }

    let write = |out: &mut ReportOutput, name: &str, body: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        out.files.push(p);
        Ok(())
    };

    let mut metrics_csv = String::from("run,group,metric,value\n");
    for (run, r) in &out.runs {
        for line in r.to_csv().lines().skip(1) {
            metrics_csv.push_str(&format!("{run},{line}\n"));
        }
    }
    write(&mut out, "metrics.csv", metrics_csv)?;

    let mut loss_csv = String::from("run,stage,step,task,loss\n");
    for (run, r) in &losses {
        loss_csv.push_str(&format!("{run},{},{},{},{}\n", r.stage, r.step, r.task, r.loss));
    }
    write(&mut out, "loss_curve.csv", loss_csv)?;

    let recon = recon_curves(&out.runs);
    let mut recon_csv = String::from("run,levels,mse\n");
    for (run, pts) in &recon {
        for (l, v) in pts {
            recon_csv.push_str(&format!("{run},{l},{v}\n"));
        }
    }
    write(&mut out, "recon_vs_levels.csv", recon_csv)?;

    let bars = layout_nll(&out.runs);
    let mut bars_csv = String::from("layout,runs,nll_residual\n");
    for (layout, (v, n)) in &bars {
        bars_csv.push_str(&format!("{layout},{n},{v}\n"));
    }
    write(&mut out, "nll_by_layout.csv", bars_csv)?;

    if !recon.is_empty() {
        let p = out_dir.join("recon_vs_levels.svg");
        plot_curves(&p, "held-out reconstruction MSE", "quantizer levels", &recon).map_err(plot_error)?;
        out.files.push(p);
    }
    if !bars.is_empty() {
        let p = out_dir.join("nll_by_layout.svg");
        plot_bars(&p, &bars).map_err(plot_error)?;
        out.files.push(p);
    }
    if !losses.is_empty() {
        let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        let mut stage2_len: BTreeMap<&str, usize> = BTreeMap::new();
        for (run, r) in &losses {
            if r.stage == 2 {
                *stage2_len.entry(run).or_default() += 1;
            }
        }
        for (run, r) in &losses {
            let off = if r.stage == 3 { stage2_len.get(run.as_str()).copied().unwrap_or(0) } else { 0 };
            curves.entry(run.clone()).or_default().push(((r.step + off) as f64, r.loss));
        }
        let p = out_dir.join("loss_curve.svg");
        plot_curves(&p, "training loss", "step", &curves).map_err(plot_error)?;
        out.files.push(p);
    }
    Ok(out)
}

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot rendering failed: {e}"))
}

/// `recon_mse_levels<l>` of each run's tokenizer group, in level order.
pub fn recon_curves(runs: &BTreeMap<String, MetricsReport>) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut out = BTreeMap::new();
    for (run, r) in runs {
        let Some(g) = r.metrics.get("tokenizer") else { continue };
        let mut pts: Vec<(f64, f64)> = g
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("recon_mse_levels")?.parse::<usize>().ok().map(|l| (l as f64, *v)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if !pts.is_empty() {
            out.insert(run.clone(), pts);
        }
    }
    out
}

/// Mean residual-stream NLL of the last stage of each run, averaged per layout.
pub fn layout_nll(runs: &BTreeMap<String, MetricsReport>) -> BTreeMap<String, (f64, usize)> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in runs.values() {
        let Some(layout) = r.meta.get("layout") else { continue };
        let stage = if r.metrics.keys().any(|k| k.starts_with("stage3:")) { "stage3:" } else { "stage2:" };
        let vals: Vec<f64> = r
            .metrics
            .iter()
            .filter(|(k, _)| k.starts_with(stage))
            .filter_map(|(_, m)| m.get("nll_residual").copied())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let e = acc.entry(layout.clone()).or_insert((0.0, 0));
        e.0 += vals.iter().sum::<f64>() / vals.len() as f64;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect()
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn plot_curves(
    path: &Path,
    title: &str,
    x_label: &str,
    curves: &BTreeMap<String, Vec<(f64, f64)>>,
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let (x0, x1) = bounds(curves.values().flatten().map(|p| p.0));
    let (y0, y1) = bounds(curves.values().flatten().map(|p| p.1));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc(x_label).draw()?;
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

fn plot_bars(path: &Path, bars: &BTreeMap<String, (f64, usize)>) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (560, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let top = bars.values().map(|b| b.0).fold(0.0, f64::max) * 1.1 + 1e-9;
    let n = bars.len();
    let mut chart = ChartBuilder::on(&root)
        .caption("held-out residual-stream NLL by layout", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..n as f64, 0.0..top)?;
    let names: Vec<&String> = bars.keys().collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| names.get(x.floor() as usize).map(|s| s.to_string()).unwrap_or_default())
        .draw()?;
    chart.draw_series(bars.values().enumerate().map(|(i, (v, _))| {
        Rectangle::new([(i as f64 + 0.2, 0.0), (i as f64 + 0.8, *v)], Palette99::pick(i).filled())
    }))?;
    root.present()?;
    Ok(())
}

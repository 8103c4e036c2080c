//! Aggregation of metrics and latency CSVs into a models × indicators
//! summary, one block per experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndbench::harness::mean_stderr;
use ndbench::metrics::{read_records, MetricsRecord, Recovery, RunStatus};
use ndbench::ModelKind;

use crate::commands::{is_metrics_csv, LatencyRow};
use crate::error::CliError;

#[derive(Debug, Default)]
pub struct Tables {
    pub records: Vec<MetricsRecord>,
    pub latency: Vec<LatencyRow>,
}

pub struct Summary {
    pub markdown: String,
    pub csv: Vec<u8>,
    pub scaling: Vec<u8>,
}

/// Reads every metrics or latency CSV among `inputs` (files, or
/// directories scanned one level deep). Other CSVs are ignored.
pub fn collect(inputs: &[PathBuf]) -> Result<Tables, CliError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(CliError::io(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && is_metrics_csv(f))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(CliError::Usage(format!("report input {} does not exist", p.display())));
        }
    }
    let mut t = Tables::default();
    for f in files {
        match header(&f)? {
            Kind::Metrics => t.records.extend(read_records(&f)?),
            Kind::Latency => {
                let mut r = csv::Reader::from_path(&f)?;
                for row in r.deserialize() {
                    t.latency.push(row?);
                }
            }
            Kind::Other => {}
        }
    }
    Ok(t)
}

enum Kind {
    Metrics,
    Latency,
    Other,
}

fn header(path: &Path) -> Result<Kind, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?;
    let has = |name: &str| h.iter().any(|c| c == name);
    Ok(if has("experiment") && has("r2_avg") && has("seed") {
        Kind::Metrics
    } else if has("row_type") && has("median_s") {
        Kind::Latency
    } else {
        Kind::Other
    })
}

fn model_order(name: &str) -> (usize, String) {
    let pos = ModelKind::ALL.iter().position(|k| k.name() == name);
    (pos.unwrap_or(usize::MAX), name.to_string())
}

fn experiment_order(name: &str) -> (usize, String) {
    const KNOWN: [&str; 5] = ["single", "multi_random", "multi_sequential", "multi_random_session", "finetune"];
    (KNOWN.iter().position(|k| *k == name).unwrap_or(usize::MAX), name.to_string())
}

struct Cell {
    mean: f64,
    stderr: f64,
    n: usize,
}

impl Cell {
    fn of(values: &[f64]) -> Option<Cell> {
        let (mean, stderr) = mean_stderr(values);
        Some(Cell {
            mean: mean?,
            stderr: stderr?,
            n: values.len(),
        })
    }

    fn show(&self, style: Style) -> String {
        let f = |x: f64| match style {
            Style::Score => format!("{x:.3}"),
            Style::Seconds => format!("{x:.3e}"),
            Style::Count => format!("{x:.0}"),
        };
        if self.n == 1 {
            f(self.mean)
        } else {
            format!("{} ± {}", f(self.mean), f(self.stderr))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    Score,
    Seconds,
    /// Totals rather than means.
    Count,
}

/// `indicator → model → values`, in insertion order of indicators.
struct Block {
    name: String,
    rows: Vec<(String, Style, BTreeMap<(usize, String), Vec<f64>>)>,
    params: BTreeMap<(usize, String), Vec<usize>>,
}

impl Block {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            rows: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, indicator: &str, style: Style, model: &str, v: f64) {
        let i = match self.rows.iter().position(|r| r.0 == indicator) {
            Some(i) => i,
            None => {
                self.rows.push((indicator.to_string(), style, BTreeMap::new()));
                self.rows.len() - 1
            }
        };
        self.rows[i].2.entry(model_order(model)).or_default().push(v);
    }
}

fn experiment_block(name: &str, records: &[&MetricsRecord]) -> Block {
    let mut b = Block::new(name);
    let pooled = records.iter().any(|r| r.session == "pooled");
    let main: Vec<&&MetricsRecord> = records.iter().filter(|r| !pooled || r.session == "pooled").collect();
    for r in &main {
        b.params.entry(model_order(&r.model)).or_default().push(r.params);
        if let Some(v) = r.r2_avg {
            b.push("Average R²", Style::Score, &r.model, v);
        }
    }
    for r in &main {
        if let Some(v) = r.zero_shot_r2 {
            b.push("Zero-shot R²", Style::Score, &r.model, v);
        }
    }
    for r in &main {
        match r.recovery_s {
            Some(Recovery::Seconds(s)) => b.push("Recovery time/s", Style::Score, &r.model, s),
            Some(Recovery::NotRecovered) => b.push("Not recovered (runs)", Style::Count, &r.model, 1.0),
            None => {}
        }
    }
    for r in &main {
        if let Some(v) = r.latency_median_s {
            b.push("Inference time/s", Style::Seconds, &r.model, v);
        }
    }
    for r in &main {
        if r.status == RunStatus::NotConverged {
            b.push("Not converged (runs)", Style::Count, &r.model, 1.0);
        }
    }
    for row in &mut b.rows {
        if row.1 == Style::Count {
            for v in row.2.values_mut() {
                *v = vec![v.len() as f64];
            }
        }
    }
    b
}

fn latency_block(rows: &[LatencyRow]) -> Block {
    let mut b = Block::new("inference");
    let mut steps: Vec<usize> = rows.iter().filter_map(|r| r.steps).collect();
    steps.sort_unstable();
    steps.dedup();
    for s in steps {
        let label = match rows.iter().find_map(|r| (r.steps == Some(s)).then_some(r.window_ms).flatten()) {
            Some(ms) => format!("Inference time/s (S={s}, {ms:.0} ms)"),
            None => format!("Inference time/s (S={s})"),
        };
        for r in rows.iter().filter(|r| r.steps == Some(s)) {
            if let Some(m) = r.median_s {
                b.push(&label, Style::Seconds, &r.model, m);
            }
        }
    }
    for r in rows {
        if let Some(x) = r.ratio {
            b.push("Latency ratio (longest/shortest)", Style::Score, &r.model, x);
        }
        b.params.entry(model_order(&r.model)).or_default().push(r.params);
    }
    b
}

fn column_label(model: &(usize, String), params: Option<&Vec<usize>>) -> String {
    let mut p = params.cloned().unwrap_or_default();
    p.sort_unstable();
    p.dedup();
    match p.as_slice() {
        [one] => format!("{} ({:.0}k)", model.1, *one as f64 / 1e3),
        _ => model.1.clone(),
    }
}

pub fn summarize(t: &Tables) -> Summary {
    let mut groups: BTreeMap<(usize, String), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in t.records.iter().filter(|r| r.experiment != "scale") {
        groups.entry(experiment_order(&r.experiment)).or_default().push(r);
    }
    let mut blocks: Vec<Block> = groups.iter().map(|(k, v)| experiment_block(&k.1, v)).collect();
    if !t.latency.is_empty() {
        blocks.push(latency_block(&t.latency));
    }

    let mut md = String::new();
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["block", "indicator", "model", "mean", "stderr", "n"]).expect("in-memory csv");
    for b in blocks.iter().filter(|b| !b.rows.is_empty()) {
        let models: Vec<(usize, String)> = {
            let mut m: Vec<_> = b.rows.iter().flat_map(|r| r.2.keys().cloned()).collect();
            m.sort();
            m.dedup();
            m
        };
        let _ = writeln!(md, "## {}\n", b.name);
        let labels: Vec<String> = models.iter().map(|m| column_label(m, b.params.get(m))).collect();
        let _ = writeln!(md, "| indicator | {} |", labels.join(" | "));
        let _ = writeln!(md, "|---|{}", "---|".repeat(models.len()));
        for (indicator, style, values) in &b.rows {
            let cells: Vec<String> = models
                .iter()
                .map(|m| {
                    let cell = values.get(m).and_then(|v| Cell::of(v));
                    if let Some(c) = &cell {
                        csv.write_record([
                            b.name.clone(),
                            indicator.clone(),
                            m.1.clone(),
                            c.mean.to_string(),
                            c.stderr.to_string(),
                            c.n.to_string(),
                        ])
                        .expect("in-memory csv");
                    }
                    cell.map_or_else(|| "".to_string(), |c| c.show(*style))
                })
                .collect();
            let _ = writeln!(md, "| {indicator} | {} |", cells.join(" | "));
        }
        md.push('\n');
    }

    let mut series: BTreeMap<((usize, String), usize), (Vec<f64>, usize)> = BTreeMap::new();
    for r in t.records.iter().filter(|r| r.experiment == "scale") {
        let e = series.entry((model_order(&r.model), r.params)).or_default();
        match r.r2_avg {
            Some(v) if r.status == RunStatus::Converged => e.0.push(v),
            _ => e.1 += 1,
        }
    }
    let mut sc = csv::Writer::from_writer(Vec::new());
    sc.write_record(["model", "params", "r2_mean", "r2_stderr", "n", "not_converged"]).expect("in-memory csv");
    for (((_, model), params), (values, failed)) in &series {
        let (m, s) = mean_stderr(values);
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        sc.write_record([
            model.clone(),
            params.to_string(),
            opt(m),
            opt(s),
            values.len().to_string(),
            failed.to_string(),
        ])
        .expect("in-memory csv");
    }
    if !series.is_empty() {
        let _ = writeln!(md, "## scale\n\n| model | params | R² |\n|---|---|---|");
        for (((_, model), params), (values, failed)) in &series {
            let cell = Cell::of(values).map_or_else(|| "not converged".to_string(), |c| c.show(Style::Score));
            let note = if *failed > 0 { format!(" ({failed} not converged)") } else { String::new() };
            let _ = writeln!(md, "| {model} | {params} | {cell}{note} |");
        }
        md.push('\n');
    }
    Summary {
        markdown: md,
        csv: csv.into_inner().expect("in-memory csv"),
        scaling: sc.into_inner().expect("in-memory csv"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(exp: &str, model: &str, session: &str, r2: f64, seed: u64) -> MetricsRecord {
        MetricsRecord {
            r2_avg: Some(r2),
            ..MetricsRecord::new(exp, model, session, 1000, seed)
        }
    }

    fn cells(md: &str) -> Vec<String> {
        md.lines()
            .filter(|l| l.starts_with("| ") && !l.starts_with("| indicator") && !l.starts_with("| model"))
            .flat_map(|l| l.split('|').skip(2).map(str::trim).filter(|c| !c.is_empty()).map(String::from).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn single_run_is_one_cell() {
        let t = Tables {
            records: vec![rec("single", "gru", "d0", 0.8125, 0)],
            latency: vec![],
        };
        let s = summarize(&t);
        assert_eq!(cells(&s.markdown), ["0.812"]);
    }

    #[test]
    fn seeds_give_mean_and_stderr() {
        let t = Tables {
            records: vec![
                rec("single", "mamba", "d0", 0.7, 0),
                rec("single", "mamba", "d0", 0.8, 1),
                rec("single", "mamba", "d0", 0.9, 2),
            ],
            latency: vec![],
        };
        let s = summarize(&t);
        // stderr = sqrt(0.01 / 3)
        assert_eq!(cells(&s.markdown), ["0.800 ± 0.058"]);
    }

    #[test]
    fn experiments_form_separate_blocks_and_pooled_rows_win() {
        let t = Tables {
            records: vec![
                rec("multi_random", "gru", "pooled", 0.9, 0),
                rec("multi_random", "gru", "d0", 0.1, 0),
                rec("single", "rwkv", "d0", 0.5, 0),
                MetricsRecord {
                    zero_shot_r2: Some(0.2),
                    recovery_s: Some(Recovery::Seconds(20.0)),
                    ..rec("finetune", "rwkv", "d1", 0.75, 0)
                },
            ],
            latency: vec![],
        };
        let md = summarize(&t).markdown;
        let order: Vec<&str> = md.lines().filter(|l| l.starts_with("## ")).collect();
        assert_eq!(order, ["## single", "## multi_random", "## finetune"]);
        assert_eq!(cells(&md), ["0.500", "0.900", "0.750", "0.200", "20.000"]);
    }

    #[test]
    fn scaling_series_groups_by_params() {
        let mut failed = rec("scale", "gru", "pooled", 0.0, 1).not_converged();
        failed.params = 2000;
        let mut big = rec("scale", "gru", "pooled", 0.6, 0);
        big.params = 2000;
        let t = Tables {
            records: vec![rec("scale", "gru", "pooled", 0.5, 0), rec("scale", "gru", "pooled", 0.7, 1), big, failed],
            latency: vec![],
        };
        let s = summarize(&t);
        let text = String::from_utf8(s.scaling).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model,params,r2_mean,r2_stderr,n,not_converged");
        assert!(lines[1].starts_with("gru,1000,0.6"), "{}", lines[1]);
        assert!(lines[1].ends_with(",2,0"));
        assert_eq!(lines[2], "gru,2000,0.6,0,1,1");
    }
}

//! Resolution sweeps over a base config, Pareto filtering and table I/O.
//!
//! Numeric formatting: integers are written in decimal; floats use Rust's
//! shortest round-trip representation and always carry a `.` or an exponent,
//! so a re-parsed table reproduces every value exactly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;
use toml::Table as TomlTable;

use crate::config::{parse_config, preset, PyramidConfig};
use crate::costmodel::cost_report;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Float(f) => Some(*f),
            _ => None,
        }
    }

    /// Text form used in CSV cells and join keys.
    pub fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(f) => format!("{f:?}"),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }

    fn parse(s: &str) -> Cell {
        if let Ok(i) = s.parse::<i64>() {
            return Cell::Int(i);
        }
        match s {
            "true" => return Cell::Bool(true),
            "false" => return Cell::Bool(false),
            _ => {}
        }
        let numeric = s.contains(['.', 'e', 'E']) || matches!(s, "NaN" | "inf" | "-inf");
        match s.parse::<f64>() {
            Ok(f) if numeric => Cell::Float(f),
            _ => Cell::Text(s.to_string()),
        }
    }

    fn to_json(&self) -> Result<Value> {
        Ok(match self {
            Cell::Int(i) => Value::from(*i),
            Cell::Float(f) => Value::from(
                serde_json::Number::from_f64(*f)
                    .ok_or_else(|| Error::Validation(format!("non-finite value {f} cannot be written as JSON")))?,
            ),
            Cell::Text(s) => Value::from(s.as_str()),
            Cell::Bool(b) => Value::from(*b),
        })
    }

    fn from_json(v: &Value) -> Result<Cell> {
        match v {
            Value::Bool(b) => Ok(Cell::Bool(*b)),
            Value::String(s) => Ok(Cell::Text(s.clone())),
            Value::Number(n) => match n.as_i64() {
                Some(i) => Ok(Cell::Int(i)),
                None => Ok(Cell::Float(n.as_f64().unwrap_or(f64::NAN))),
            },
            other => Err(Error::Validation(format!("unsupported cell value {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Table { columns, rows: Vec::new() }
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns.iter().position(|c| c == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    fn numeric(&self, row: usize, col: usize) -> Result<f64> {
        self.rows[row][col].as_f64().ok_or_else(|| {
            Error::Validation(format!("column `{}` row {row} is not numeric", self.columns[col]))
        })
    }
}

/// Inclusive resolution range for one branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolutionRange {
    pub from: usize,
    pub to: usize,
    pub step: usize,
}

impl ResolutionRange {
    pub fn single(r: usize) -> Self {
        ResolutionRange { from: r, to: r, step: 1 }
    }

    pub fn values(&self) -> Vec<usize> {
        if self.from > self.to {
            return Vec::new();
        }
        (self.from..=self.to).step_by(self.step.max(1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: PyramidConfig,
    /// One range per branch, in branch order.
    pub ranges: Vec<ResolutionRange>,
    pub budget_gflops: Option<f64>,
}

impl SweepSpec {
    /// Every branch fixed at its base resolution.
    pub fn fixed(base: PyramidConfig) -> Self {
        let ranges = base.branches.iter().map(|b| ResolutionRange::single(b.resolution)).collect();
        SweepSpec { base, ranges, budget_gflops: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.len() != self.base.branches.len() {
            return Err(Error::Validation(format!(
                "sweep has {} ranges for {} branches",
                self.ranges.len(),
                self.base.branches.len()
            )));
        }
        for (j, (r, b)) in self.ranges.iter().zip(&self.base.branches).enumerate() {
            if r.step == 0 {
                return Err(Error::Validation(format!("branch{}: step must be positive", j + 1)));
            }
            let p = b.patch_size;
            if r.from % p != 0 || (r.from != r.to && r.step % p != 0) {
                return Err(Error::Validation(format!(
                    "branch{}: range {}..={} step {} does not respect patch size {p}",
                    j + 1,
                    r.from,
                    r.to,
                    r.step
                )));
            }
        }
        if matches!(self.budget_gflops, Some(b) if !(b.is_finite() && b > 0.0)) {
            return Err(Error::Validation("budget must be a positive number of GFLOPs".into()));
        }
        Ok(())
    }
}

/// Parses a sweep document:
///
/// ```toml
/// base = "piip-b"          # preset name; or base_path = "model.toml"
/// budget_gflops = 12.0     # optional
/// [branch3]
/// from = 384
/// to = 640
/// step = 64
/// ```
///
/// Branches without a section keep the base resolution. `base_path` is
/// resolved relative to `dir`.
pub fn parse_sweep(text: &str, dir: &Path) -> Result<SweepSpec> {
    let doc: TomlTable = text.parse().map_err(|e: toml::de::Error| Error::parse("<document>", e.message()))?;
    let base = match (doc.get("base"), doc.get("base_path")) {
        (Some(toml::Value::String(name)), None) => preset(name)?,
        (None, Some(toml::Value::String(p))) => parse_config(&std::fs::read_to_string(dir.join(p))?)?,
        (Some(_), Some(_)) => return Err(Error::parse("base", "give either `base` or `base_path`, not both")),
        (None, None) => return Err(Error::parse("base", "missing required key")),
        (Some(_), None) => return Err(Error::parse("base", "expected a preset name")),
        (None, Some(_)) => return Err(Error::parse("base_path", "expected a path string")),
    };
    let mut spec = SweepSpec::fixed(base);
    for (key, value) in &doc {
        match key.as_str() {
            "base" | "base_path" => {}
            "budget_gflops" => {
                spec.budget_gflops = Some(match value {
                    toml::Value::Float(f) => *f,
                    toml::Value::Integer(i) => *i as f64,
                    _ => return Err(Error::parse(key, "expected a number")),
                })
            }
            _ => {
                let idx = key
                    .strip_prefix("branch")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&i| i >= 1 && i <= spec.ranges.len())
                    .ok_or_else(|| Error::parse(key, "unknown key"))?;
                let toml::Value::Table(t) = value else {
                    return Err(Error::parse(key, "expected a section with from/to/step"));
                };
                let get = |k: &str| -> Result<Option<usize>> {
                    match t.get(k) {
                        None => Ok(None),
                        Some(toml::Value::Integer(i)) if *i > 0 => Ok(Some(*i as usize)),
                        Some(_) => Err(Error::parse(format!("{key}.{k}"), "expected a positive integer")),
                    }
                };
                if let Some(bad) = t.keys().find(|k| !["from", "to", "step"].contains(&k.as_str())) {
                    return Err(Error::parse(format!("{key}.{bad}"), "unknown key"));
                }
                let from = get("from")?.ok_or_else(|| Error::parse(format!("{key}.from"), "missing required key"))?;
                let to = get("to")?.unwrap_or(from);
                let step = get("step")?.unwrap_or(spec.base.branches[idx - 1].patch_size);
                spec.ranges[idx - 1] = ResolutionRange { from, to, step };
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

pub fn sweep_columns(branches: usize) -> Vec<String> {
    let mut c = vec!["config_id".to_string()];
    c.extend((1..=branches).map(|j| format!("res{j}")));
    c.extend(["params", "flops", "within_budget"].map(String::from));
    c
}

pub fn config_id(resolutions: &[usize]) -> String {
    let parts: Vec<String> = resolutions.iter().map(|r| r.to_string()).collect();
    format!("r{}", parts.join("-"))
}

/// Exhaustive grid over the ranges (branch 1 varies slowest). Combinations
/// that break the parameter-inverted ordering are skipped; rows over budget
/// are kept and flagged.
pub fn sweep(spec: &SweepSpec) -> Result<Table> {
    spec.validate()?;
    let axes: Vec<Vec<usize>> = spec.ranges.iter().map(ResolutionRange::values).collect();
    if axes.iter().any(Vec::is_empty) {
        return Err(Error::EmptyGrid("a branch range contains no resolutions".into()));
    }
    let mut table = Table::new(sweep_columns(axes.len()));
    let mut idx = vec![0usize; axes.len()];
    loop {
        let res: Vec<usize> = idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect();
        let mut cfg = spec.base.clone();
        for (b, &r) in cfg.branches.iter_mut().zip(&res) {
            b.resolution = r;
        }
        if cfg.validate().is_ok() {
            let report = cost_report(&cfg);
            let flops = report.total_flops();
            let within = spec.budget_gflops.is_none_or(|b| flops as f64 <= b * 1e9);
            let mut row = vec![Cell::Text(config_id(&res))];
            row.extend(res.iter().map(|&r| Cell::Int(r as i64)));
            row.push(Cell::Int(report.total_params() as i64));
            row.push(Cell::Int(flops as i64));
            row.push(Cell::Bool(within));
            table.rows.push(row);
        }
        // Odometer increment, last axis fastest.
        let mut k = axes.len();
        loop {
            if k == 0 {
                if table.rows.is_empty() {
                    return Err(Error::EmptyGrid("no combination satisfies the branch ordering".into()));
                }
                return Ok(table);
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// True when `b` is at least as good as `a` on both axes and strictly better on one.
pub fn dominates(cost_b: f64, q_b: f64, cost_a: f64, q_a: f64) -> bool {
    cost_b <= cost_a && q_b >= q_a && (cost_b < cost_a || q_b > q_a)
}

/// Rows not dominated on (lower cost, higher quality), ordered by cost with
/// ties kept in input order.
pub fn pareto_front(table: &Table, cost_col: &str, quality_col: &str) -> Result<Table> {
    let (ci, qi) = (table.column(cost_col)?, table.column(quality_col)?);
    let mut pts = Vec::with_capacity(table.rows.len());
    for r in 0..table.rows.len() {
        pts.push((r, table.numeric(r, ci)?, table.numeric(r, qi)?));
    }
    pts.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    // After sorting by cost, a point is dominated iff some point with cost <= its
    // cost has higher quality, or equal quality at strictly lower cost.
    let mut keep = Vec::new();
    let mut i = 0;
    let mut best_q = f64::NEG_INFINITY;
    while i < pts.len() {
        let mut j = i;
        while j < pts.len() && pts[j].1 == pts[i].1 {
            j += 1;
        }
        let group_best = pts[i..j].iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
        if group_best > best_q {
            keep.extend(pts[i..j].iter().filter(|p| p.2 == group_best).map(|p| p.0));
            best_q = group_best;
        }
        i = j;
    }
    Ok(Table { columns: table.columns.clone(), rows: keep.into_iter().map(|r| table.rows[r].clone()).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// `.json` selects JSON; anything else CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

pub fn write_csv<W: Write>(table: &Table, w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(w);
    wr.write_record(&table.columns)?;
    for row in &table.rows {
        wr.write_record(row.iter().map(Cell::render))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Table> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let columns: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        rows.push(rec?.iter().map(Cell::parse).collect());
    }
    Ok(Table { columns, rows })
}

pub fn to_json(table: &Table) -> Result<Value> {
    let rows = table
        .rows
        .iter()
        .map(|r| r.iter().map(Cell::to_json).collect::<Result<Vec<_>>>().map(Value::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::json!({ "columns": table.columns, "rows": rows }))
}

pub fn from_json(v: &Value) -> Result<Table> {
    let bad = || Error::Validation("expected an object with `columns` and `rows` arrays".into());
    let columns = v
        .get("columns")
        .and_then(Value::as_array)
        .ok_or_else(bad)?
        .iter()
        .map(|c| c.as_str().map(String::from).ok_or_else(bad))
        .collect::<Result<Vec<_>>>()?;
    let rows = v
        .get("rows")
        .and_then(Value::as_array)
        .ok_or_else(bad)?
        .iter()
        .map(|r| r.as_array().ok_or_else(bad)?.iter().map(Cell::from_json).collect())
        .collect::<Result<Vec<Vec<Cell>>>>()?;
    if rows.iter().any(|r| r.len() != columns.len()) {
        return Err(Error::Validation("row length differs from the column count".into()));
    }
    Ok(Table { columns, rows })
}

/// Writes `table` to `path` in the given format.
pub fn emit(table: &Table, path: &Path, format: Format) -> Result<()> {
    let file = std::fs::File::create(path)?;
    match format {
        Format::Csv => write_csv(table, std::io::BufWriter::new(file)),
        Format::Json => {
            let mut w = std::io::BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, &to_json(table)?)?;
            w.write_all(b"\n")?;
            w.flush()?;
            Ok(())
        }
    }
}

pub fn load_table(path: &Path) -> Result<Table> {
    let file = std::fs::File::open(path)?;
    match Format::from_path(path) {
        Format::Csv => read_csv(file),
        Format::Json => from_json(&serde_json::from_reader(std::io::BufReader::new(file))?),
    }
}

/// Inner join of `table` with a metrics table (`config_id`, `step`, and a
/// quality column) on `config_id`, using each config's last step. The joined
/// column is appended under the same name.
pub fn join_quality(table: &Table, metrics: &Table, quality_col: &str) -> Result<Table> {
    let key = table.column("config_id")?;
    let (mk, ms, mq) = (metrics.column("config_id")?, metrics.column("step")?, metrics.column(quality_col)?);
    let mut last: HashMap<String, (f64, f64)> = HashMap::new();
    for r in 0..metrics.rows.len() {
        let id = metrics.rows[r][mk].render();
        let step = metrics.numeric(r, ms)?;
        let q = metrics.numeric(r, mq)?;
        let e = last.entry(id).or_insert((step, q));
        if step >= e.0 {
            *e = (step, q);
        }
    }
    let mut columns = table.columns.clone();
    columns.push(quality_col.to_string());
    let rows = table
        .rows
        .iter()
        .filter_map(|row| {
            last.get(&row[key].render()).map(|&(_, q)| {
                let mut r = row.clone();
                r.push(Cell::Float(q));
                r
            })
        })
        .collect();
    Ok(Table { columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(points: &[(f64, f64)]) -> Table {
        Table {
            columns: vec!["id".into(), "flops".into(), "acc".into()],
            rows: points
                .iter()
                .enumerate()
                .map(|(i, &(c, q))| vec![Cell::Int(i as i64), Cell::Float(c), Cell::Float(q)])
                .collect(),
        }
    }

    #[test]
    fn pareto_cases() {
        let t = table(&[(3.0, 0.5), (1.0, 0.5), (2.0, 0.5)]);
        assert_eq!(pareto_front(&t, "flops", "acc").unwrap().rows, vec![t.rows[1].clone()]);
        let t = table(&[(2.0, 2.0), (1.0, 1.0)]);
        let p = pareto_front(&t, "flops", "acc").unwrap();
        assert_eq!(p.rows, vec![t.rows[1].clone(), t.rows[0].clone()]);
        assert!(matches!(pareto_front(&t, "cost", "acc"), Err(Error::MissingColumn(_))));
    }

    #[test]
    fn csv_round_trip_and_empty() {
        let mut t = table(&[(0.1, 1e-300), (3.0, -2.5e10)]);
        t.rows[0].push(Cell::Text("a,\"b\"".into()));
        t.rows[1].push(Cell::Bool(true));
        t.columns.push("note".into());
        let mut buf = Vec::new();
        write_csv(&t, &mut buf).unwrap();
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back, t);

        let empty = Table::new(vec!["a".into(), "b".into()]);
        let mut buf = Vec::new();
        write_csv(&empty, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "a,b\r\n");
        assert_eq!(read_csv(&buf[..]).unwrap(), empty);
    }

    #[test]
    fn json_round_trip() {
        let t = table(&[(0.1, 0.7), (12.0, 1.0)]);
        assert_eq!(from_json(&to_json(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn single_point_sweep_matches_cost_model() {
        let base = preset("piip-b").unwrap();
        let t = sweep(&SweepSpec::fixed(base.clone())).unwrap();
        assert_eq!(t.rows.len(), 1);
        let r = cost_report(&base);
        assert_eq!(t.rows[0][4], Cell::Int(r.total_params() as i64));
        assert_eq!(t.rows[0][5], Cell::Int(r.total_flops() as i64));
    }

    #[test]
    fn sweep_filters_ordering_and_flags_budget() {
        let mut spec = SweepSpec::fixed(preset("piip-b").unwrap());
        spec.ranges[1] = ResolutionRange { from: 96, to: 320, step: 32 };
        spec.budget_gflops = Some(18.0);
        let t = sweep(&spec).unwrap();
        // 96 is below branch 1's 128 and is dropped.
        assert!(t.rows.iter().all(|r| r[2].as_f64().unwrap() >= 128.0));
        assert_eq!(t.rows.len(), 7);
        let flags: Vec<_> = t.rows.iter().map(|r| r[6].clone()).collect();
        assert!(flags.contains(&Cell::Bool(true)) && flags.contains(&Cell::Bool(false)));
    }

    #[test]
    fn sweep_document_parses() {
        let text = "base = \"piip-b\"\nbudget_gflops = 20\n[branch3]\nfrom = 384\nto = 640\nstep = 128\n";
        let spec = parse_sweep(text, Path::new(".")).unwrap();
        assert_eq!(spec.ranges[2].values(), vec![384, 512, 640]);
        assert!(parse_sweep("base = \"piip-b\"\n[branch3]\nfrom = 390\n", Path::new(".")).is_err());
        assert!(matches!(
            parse_sweep("base = \"piip-b\"\n[branch9]\nfrom = 32\n", Path::new(".")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn join_uses_last_step() {
        let t = sweep(&SweepSpec::fixed(preset("piip-tiny-test").unwrap())).unwrap();
        let id = match &t.rows[0][0] {
            Cell::Text(s) => s.clone(),
            _ => unreachable!(),
        };
        let m = Table {
            columns: vec!["config_id".into(), "step".into(), "loss".into(), "acc".into()],
            rows: vec![
                vec![Cell::Text(id.clone()), Cell::Int(200), Cell::Float(0.1), Cell::Float(0.9)],
                vec![Cell::Text(id), Cell::Int(100), Cell::Float(0.5), Cell::Float(0.4)],
                vec![Cell::Text("other".into()), Cell::Int(100), Cell::Float(0.5), Cell::Float(0.4)],
            ],
        };
        let j = join_quality(&t, &m, "acc").unwrap();
        assert_eq!(j.rows.len(), 1);
        assert_eq!(j.rows[0].last(), Some(&Cell::Float(0.9)));
    }
}

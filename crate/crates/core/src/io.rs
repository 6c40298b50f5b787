//! Panel and trade-flow CSV files, the differencing/standardization pipeline
//! and trade-based weight matrices.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SigmarError};
use crate::kronlin::Mat;
use crate::model::{PanelSeries, WeightMatrix};

#[derive(Debug, Serialize, Deserialize)]
struct PanelRecord {
    t: i64,
    variable: String,
    country: String,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TradeRecord {
    year: i64,
    reporter: String,
    partner: String,
    value: f64,
}

fn check_headers<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers()?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(SigmarError::Validation(format!(
            "expected columns {}, found {}",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn index_of(labels: &mut Vec<String>, lookup: &mut HashMap<String, usize>, label: &str) -> usize {
    if let Some(&i) = lookup.get(label) {
        return i;
    }
    labels.push(label.to_string());
    lookup.insert(label.to_string(), labels.len() - 1);
    labels.len() - 1
}

fn row_error(line: usize, e: csv::Error) -> SigmarError {
    SigmarError::Validation(format!("line {line}: {e}"))
}

/// Long-format panel: one `t,variable,country,value` row per cell. Variables
/// and countries keep their order of first appearance; frames are sorted by `t`.
pub fn read_panel_csv<R: Read>(reader: R) -> Result<PanelSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_headers(&mut rdr, &["t", "variable", "country", "value"])?;

    let (mut vars, mut var_idx) = (Vec::new(), HashMap::new());
    let (mut countries, mut country_idx) = (Vec::new(), HashMap::new());
    let mut cells: BTreeMap<i64, HashMap<(usize, usize), f64>> = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<PanelRecord>().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| row_error(line, e))?;
        if !rec.value.is_finite() {
            return Err(SigmarError::Validation(format!("line {line}: non-finite value")));
        }
        let v = index_of(&mut vars, &mut var_idx, &rec.variable);
        let c = index_of(&mut countries, &mut country_idx, &rec.country);
        if cells.entry(rec.t).or_default().insert((v, c), rec.value).is_some() {
            return Err(SigmarError::Validation(format!(
                "duplicate cell (t={}, variable={}, country={})",
                rec.t, rec.variable, rec.country
            )));
        }
    }
    if cells.is_empty() {
        return Err(SigmarError::Validation("panel file has no rows".into()));
    }

    let (k, n) = (vars.len(), countries.len());
    let mut frames = Vec::with_capacity(cells.len());
    for (t, grid) in &cells {
        let mut m = Mat::zeros(k, n);
        for v in 0..k {
            for c in 0..n {
                m[(v, c)] = *grid.get(&(v, c)).ok_or_else(|| {
                    SigmarError::Validation(format!(
                        "missing cell (t={t}, variable={}, country={})",
                        vars[v], countries[c]
                    ))
                })?;
            }
        }
        frames.push(m);
    }
    PanelSeries::new(frames)?.with_labels(vars, countries)
}

pub fn load_panel_csv(path: &Path) -> Result<PanelSeries> {
    let file = std::fs::File::open(path).map_err(|e| SigmarError::Validation(format!("{}: {e}", path.display())))?;
    read_panel_csv(file)
}

fn labels_or_default(labels: &Option<Vec<String>>, prefix: &str, len: usize) -> Vec<String> {
    labels
        .clone()
        .unwrap_or_else(|| (0..len).map(|i| format!("{prefix}{i}")).collect())
}

/// Writes periods `0..T`; unlabeled panels get `v0, v1, ...` and `c0, c1, ...`.
pub fn write_panel_csv<W: Write>(series: &PanelSeries, out: W) -> Result<()> {
    let vars = labels_or_default(&series.variable_labels, "v", series.k());
    let countries = labels_or_default(&series.country_labels, "c", series.n());
    let mut wtr = csv::Writer::from_writer(out);
    for (t, frame) in series.frames().iter().enumerate() {
        for (v, var) in vars.iter().enumerate() {
            for (c, country) in countries.iter().enumerate() {
                wtr.serialize(PanelRecord {
                    t: t as i64,
                    variable: var.clone(),
                    country: country.clone(),
                    value: frame[(v, c)],
                })?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_panel_csv(series: &PanelSeries, path: &Path) -> Result<()> {
    write_panel_csv(series, std::fs::File::create(path)?)
}

/// A dense matrix as headerless comma-separated rows.
pub fn read_matrix_csv<R: Read>(reader: R) -> Result<Mat> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| row_error(i + 1, e))?;
        let row = rec
            .iter()
            .map(|x| x.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| SigmarError::Validation(format!("line {}: non-numeric entry", i + 1)))?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(SigmarError::Validation("matrix file is empty".into()));
    }
    Ok(Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn load_matrix_csv(path: &Path) -> Result<Mat> {
    let file = std::fs::File::open(path).map_err(|e| SigmarError::Validation(format!("{}: {e}", path.display())))?;
    read_matrix_csv(file)
}

pub fn write_matrix_csv<W: Write>(m: &Mat, out: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.nrows() {
        wtr.write_record(m.row(i).iter().map(|x| x.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// First differences, then each (variable, country) series demeaned, then each
/// variable divided by its standard deviation pooled over countries and periods.
pub fn preprocess(series: &PanelSeries) -> Result<PanelSeries> {
    if series.len() < 3 {
        return Err(SigmarError::Validation(format!(
            "preprocessing needs at least 3 periods, got {}",
            series.len()
        )));
    }
    let (k, n) = (series.k(), series.n());
    let mut diffs: Vec<Mat> = series.frames().windows(2).map(|f| &f[1] - &f[0]).collect();
    let len = diffs.len() as f64;

    let mean = diffs.iter().fold(Mat::zeros(k, n), |acc, d| acc + d) / len;
    for d in &mut diffs {
        *d -= &mean;
    }

    let vars = labels_or_default(&series.variable_labels, "v", k);
    for v in 0..k {
        let ss: f64 = diffs.iter().map(|d| d.row(v).norm_squared()).sum();
        let var = ss / (len * n as f64);
        let scale = var.sqrt();
        if !(scale > 1e-12 * (1.0 + mean.row(v).amax())) {
            return Err(SigmarError::Degenerate(format!(
                "variable '{}' has zero pooled variance after differencing",
                vars[v]
            )));
        }
        for d in &mut diffs {
            d.row_mut(v).unscale_mut(scale);
        }
    }

    let out = PanelSeries::new(diffs)?;
    match (&series.variable_labels, &series.country_labels) {
        (Some(v), Some(c)) => out.with_labels(v.clone(), c.clone()),
        _ => Ok(out),
    }
}

/// Annual bilateral flows; `flows[y][(i, j)]` is the trade of `countries[i]`
/// with `countries[j]` in `years[y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeFlowPanel {
    pub years: Vec<i64>,
    pub flows: Vec<Mat>,
    pub countries: Vec<String>,
}

impl TradeFlowPanel {
    pub fn new(years: Vec<i64>, flows: Vec<Mat>, countries: Vec<String>) -> Result<Self> {
        let n = countries.len();
        if years.len() != flows.len() {
            return Err(SigmarError::Dimension("one flow matrix per year required".into()));
        }
        if years.windows(2).any(|y| y[0] >= y[1]) {
            return Err(SigmarError::Validation("years must be strictly increasing".into()));
        }
        for (y, f) in years.iter().zip(&flows) {
            if f.shape() != (n, n) {
                return Err(SigmarError::Dimension(format!("flows for {y} are not {n}x{n}")));
            }
            if f.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(SigmarError::Validation(format!("flows for {y} must be finite and nonnegative")));
            }
        }
        Ok(Self { years, flows, countries })
    }
}

/// Reads `year,reporter,partner,value` rows; absent pairs count as zero.
/// With `countries` given, rows are aligned to that order and unknown
/// countries are rejected.
pub fn read_trade_csv<R: Read>(reader: R, countries: Option<&[String]>) -> Result<TradeFlowPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_headers(&mut rdr, &["year", "reporter", "partner", "value"])?;

    let fixed = countries.is_some();
    let mut labels: Vec<String> = countries.map(<[String]>::to_vec).unwrap_or_default();
    let mut lookup: HashMap<String, usize> = labels.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<TradeRecord>().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| row_error(line, e))?;
        let mut idx = |name: &str| -> Result<usize> {
            if fixed {
                lookup
                    .get(name)
                    .copied()
                    .ok_or_else(|| SigmarError::Validation(format!("line {line}: unknown country '{name}'")))
            } else {
                Ok(index_of(&mut labels, &mut lookup, name))
            }
        };
        let r = idx(&rec.reporter)?;
        let p = idx(&rec.partner)?;
        rows.push((rec.year, r, p, rec.value, line));
    }

    let n = labels.len();
    let mut by_year: BTreeMap<i64, Mat> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for (year, r, p, value, line) in rows {
        if !seen.insert((year, r, p)) {
            return Err(SigmarError::Validation(format!(
                "line {line}: duplicate flow ({year}, {}, {})",
                labels[r], labels[p]
            )));
        }
        by_year.entry(year).or_insert_with(|| Mat::zeros(n, n))[(r, p)] = value;
    }
    let (years, flows) = by_year.into_iter().unzip();
    TradeFlowPanel::new(years, flows, labels)
}

pub fn load_trade_csv(path: &Path, countries: Option<&[String]>) -> Result<TradeFlowPanel> {
    let file = std::fs::File::open(path).map_err(|e| SigmarError::Validation(format!("{}: {e}", path.display())))?;
    read_trade_csv(file, countries)
}

pub fn write_trade_csv<W: Write>(panel: &TradeFlowPanel, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for (year, f) in panel.years.iter().zip(&panel.flows) {
        for (i, reporter) in panel.countries.iter().enumerate() {
            for (j, partner) in panel.countries.iter().enumerate() {
                if i != j {
                    wtr.serialize(TradeRecord {
                        year: *year,
                        reporter: reporter.clone(),
                        partner: partner.clone(),
                        value: f[(i, j)],
                    })?;
                }
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Average of the row-normalized flow matrices (diagonal dropped) of the
/// `window` latest years not after `as_of_year`.
pub fn build_weight_from_trade(panel: &TradeFlowPanel, as_of_year: i64, window: usize) -> Result<WeightMatrix> {
    if window == 0 {
        return Err(SigmarError::Validation("trade window must be positive".into()));
    }
    let available: Vec<usize> = (0..panel.years.len()).filter(|&y| panel.years[y] <= as_of_year).collect();
    if available.len() < window {
        return Err(SigmarError::Validation(format!(
            "{window} years of trade needed up to {as_of_year}, {} available",
            available.len()
        )));
    }
    let n = panel.countries.len();
    let mut avg = Mat::zeros(n, n);
    for &y in &available[available.len() - window..] {
        let mut f = panel.flows[y].clone();
        f.fill_diagonal(0.0);
        for i in 0..n {
            let total: f64 = f.row(i).sum();
            if !(total > 0.0) {
                return Err(SigmarError::Degenerate(format!(
                    "country '{}' has zero total trade in {}",
                    panel.countries[i], panel.years[y]
                )));
            }
            f.row_mut(i).unscale_mut(total);
        }
        avg += f;
    }
    avg /= window as f64;
    for i in 0..n {
        let sum: f64 = avg.row(i).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SigmarError::Numerical(format!("row {i} of the trade weights sums to {sum}")));
        }
    }
    WeightMatrix::new(avg)
}

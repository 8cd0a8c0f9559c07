//! Balanced panel data: outcomes, treatments and covariates observed on a
//! regular time grid `0..=K` for every subject.
//!
//! Within a period the temporal order is covariates `Z_m`, outcome `Y_m`,
//! treatment `A_m`. The observed history used for adjustment at time `m`
//! ([`LBar`]) therefore contains `Z_0..Z_m`, `Y_0..Y_{m-1}` and
//! `A_0..A_{m-1}`, but never `Y_m` or `A_m`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular panel of `n` subjects observed at times `0..=K`.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    subject_ids: Vec<String>,
    time_labels: Vec<i64>,
    outcome_name: String,
    treatment_names: Vec<String>,
    covariate_names: Vec<String>,
    y: Vec<f64>,
    a: Vec<f64>,
    z: Vec<f64>,
}

impl PanelDataset {
    /// Builds a dataset from row-major buffers.
    ///
    /// `y` is `n * (K+1)`, `a` is `n * (K+1) * p`, `z` is `n * (K+1) * q`,
    /// all indexed by subject, then time, then component.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        subject_ids: Vec<String>,
        time_labels: Vec<i64>,
        outcome_name: impl Into<String>,
        treatment_names: Vec<String>,
        covariate_names: Vec<String>,
        y: Vec<f64>,
        a: Vec<f64>,
        z: Vec<f64>,
    ) -> Result<Self> {
        let n = subject_ids.len();
        let nt = time_labels.len();
        let p = treatment_names.len();
        let q = covariate_names.len();
        if n == 0 {
            return Err(Error::Data("panel has no subjects".into()));
        }
        if nt == 0 {
            return Err(Error::Data("panel has no time points".into()));
        }
        if p == 0 {
            return Err(Error::Data("panel needs at least one treatment column".into()));
        }
        if y.len() != n * nt || a.len() != n * nt * p || z.len() != n * nt * q {
            return Err(Error::Dimension(format!(
                "buffers do not match n={n}, times={nt}, treatments={p}, covariates={q}"
            )));
        }
        for w in time_labels.windows(2) {
            if w[1] != w[0] + 1 {
                return Err(Error::Data(format!(
                    "time labels must be consecutive integers, found {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let unique: BTreeSet<&String> = subject_ids.iter().collect();
        if unique.len() != n {
            return Err(Error::Data("duplicate subject identifiers".into()));
        }
        let data = PanelDataset {
            subject_ids,
            time_labels,
            outcome_name: outcome_name.into(),
            treatment_names,
            covariate_names,
            y,
            a,
            z,
        };
        data.check_finite()?;
        Ok(data)
    }

    fn check_finite(&self) -> Result<()> {
        for i in 0..self.n_subjects() {
            for t in 0..self.n_times() {
                let bad = |col: String| Error::MissingCell {
                    subject: self.subject_ids[i].clone(),
                    time: self.time_labels[t],
                    column: col,
                };
                if !self.outcome(i, t).is_finite() {
                    return Err(bad(self.outcome_name.clone()));
                }
                for (c, v) in self.treatment(i, t).iter().enumerate() {
                    if !v.is_finite() {
                        return Err(bad(self.treatment_names[c].clone()));
                    }
                }
                for (j, v) in self.covariates(i, t).iter().enumerate() {
                    if !v.is_finite() {
                        return Err(bad(self.covariate_names[j].clone()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    /// Number of time points, `K + 1`.
    pub fn n_times(&self) -> usize {
        self.time_labels.len()
    }

    /// Final time index `K`.
    pub fn horizon(&self) -> usize {
        self.time_labels.len() - 1
    }

    pub fn n_treatments(&self) -> usize {
        self.treatment_names.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn subject_id(&self, i: usize) -> &str {
        &self.subject_ids[i]
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    /// Calendar label of time index `t` (e.g. a year).
    pub fn time_label(&self, t: usize) -> i64 {
        self.time_labels[t]
    }

    pub fn time_labels(&self) -> &[i64] {
        &self.time_labels
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn treatment_names(&self) -> &[String] {
        &self.treatment_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn treatment_index(&self, name: &str) -> Option<usize> {
        self.treatment_names.iter().position(|c| c == name)
    }

    #[inline]
    pub fn outcome(&self, i: usize, t: usize) -> f64 {
        self.y[i * self.n_times() + t]
    }

    #[inline]
    pub fn treatment(&self, i: usize, t: usize) -> &[f64] {
        let p = self.n_treatments();
        let off = (i * self.n_times() + t) * p;
        &self.a[off..off + p]
    }

    #[inline]
    pub fn covariates(&self, i: usize, t: usize) -> &[f64] {
        let q = self.n_covariates();
        let off = (i * self.n_times() + t) * q;
        &self.z[off..off + q]
    }

    /// History of subject `i` at time `m`.
    pub fn history(&self, i: usize, m: usize) -> HistoryView<'_> {
        assert!(i < self.n_subjects() && m < self.n_times());
        HistoryView {
            data: self,
            subject: i,
            time: m,
        }
    }

    /// First time any treatment component departs from baseline 0.
    pub fn initiation_time(&self, i: usize) -> InitiationTime {
        let all: Vec<usize> = (0..self.n_treatments()).collect();
        self.initiation_time_for(i, &all)
    }

    /// Initiation time restricted to the given treatment components.
    pub fn initiation_time_for(&self, i: usize, components: &[usize]) -> InitiationTime {
        for t in 0..self.n_times() {
            let a = self.treatment(i, t);
            if components.iter().any(|&c| a[c] != 0.0) {
                return InitiationTime::At {
                    time: t,
                    value: a.to_vec(),
                };
            }
        }
        InitiationTime::Never
    }

    /// True iff every subject's treatment stays at its initiation value.
    pub fn is_staggered_adoption(&self) -> bool {
        (0..self.n_subjects()).all(|i| match self.initiation_time(i) {
            InitiationTime::Never => true,
            InitiationTime::At { time, value } => {
                (time..self.n_times()).all(|t| self.treatment(i, t) == value.as_slice())
            }
        })
    }

    /// True iff treatment component `c` only takes values 0 and 1.
    pub fn is_binary_treatment(&self, c: usize) -> bool {
        (0..self.n_subjects())
            .all(|i| (0..self.n_times()).all(|t| matches!(self.treatment(i, t)[c], v if v == 0.0 || v == 1.0)))
    }

    /// New dataset holding the listed subjects in order. Repeated subjects
    /// get a `#r` suffix so identifiers stay unique.
    pub fn select_subjects(&self, rows: &[usize]) -> Result<PanelDataset> {
        let nt = self.n_times();
        let p = self.n_treatments();
        let q = self.n_covariates();
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let mut ids = Vec::with_capacity(rows.len());
        let mut y = Vec::with_capacity(rows.len() * nt);
        let mut a = Vec::with_capacity(rows.len() * nt * p);
        let mut z = Vec::with_capacity(rows.len() * nt * q);
        for &i in rows {
            let c = seen.entry(i).or_insert(0);
            ids.push(if *c == 0 {
                self.subject_ids[i].clone()
            } else {
                format!("{}#{}", self.subject_ids[i], c)
            });
            *c += 1;
            y.extend_from_slice(&self.y[i * nt..(i + 1) * nt]);
            a.extend_from_slice(&self.a[i * nt * p..(i + 1) * nt * p]);
            z.extend_from_slice(&self.z[i * nt * q..(i + 1) * nt * q]);
        }
        PanelDataset::new(
            ids,
            self.time_labels.clone(),
            self.outcome_name.clone(),
            self.treatment_names.clone(),
            self.covariate_names.clone(),
            y,
            a,
            z,
        )
    }

    /// Copy with covariate `j` at time `t` set to `value` for every subject.
    pub fn with_covariate_value(&self, j: usize, t: usize, value: f64) -> PanelDataset {
        let mut d = self.clone();
        let (nt, q) = (self.n_times(), self.n_covariates());
        for i in 0..self.n_subjects() {
            d.z[(i * nt + t) * q + j] = value;
        }
        d
    }

    /// Histogram of initiation times keyed by calendar label (`None` = never).
    pub fn initiation_histogram(&self) -> BTreeMap<Option<i64>, usize> {
        let mut h = BTreeMap::new();
        for i in 0..self.n_subjects() {
            let key = self.initiation_time(i).time().map(|t| self.time_labels[t]);
            *h.entry(key).or_insert(0) += 1;
        }
        h
    }

    /// Observed range of covariate `j` at time `t`.
    pub fn covariate_range(&self, j: usize, t: usize) -> (f64, f64) {
        (0..self.n_subjects())
            .map(|i| self.covariates(i, t)[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    /// Writes the canonical long CSV: `subject_id,time,y,a_<name>..,z_<name>..`,
    /// rows ordered by subject then time, numbers in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["subject_id".to_string(), "time".into(), "y".into()];
        header.extend(self.treatment_names.iter().map(|n| format!("a_{n}")));
        header.extend(self.covariate_names.iter().map(|n| format!("z_{n}")));
        wr.write_record(&header)?;
        for i in 0..self.n_subjects() {
            for t in 0..self.n_times() {
                let mut rec = vec![
                    self.subject_ids[i].clone(),
                    self.time_labels[t].to_string(),
                    fmt_num(self.outcome(i, t)),
                ];
                rec.extend(self.treatment(i, t).iter().map(|v| fmt_num(*v)));
                rec.extend(self.covariates(i, t).iter().map(|v| fmt_num(*v)));
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        // collapse -0
        "0".into()
    } else {
        format!("{v}")
    }
}

/// Time of first departure from baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitiationTime {
    At { time: usize, value: Vec<f64> },
    Never,
}

impl InitiationTime {
    pub fn time(&self) -> Option<usize> {
        match self {
            InitiationTime::At { time, .. } => Some(*time),
            InitiationTime::Never => None,
        }
    }

    /// `T >= m`.
    pub fn at_risk(&self, m: usize) -> bool {
        self.time().is_none_or(|t| t >= m)
    }

    pub fn is(&self, m: usize) -> bool {
        self.time() == Some(m)
    }
}

/// Full history of one subject at time `m`: the adjustment history
/// [`LBar`] plus the treatment path through `m`.
#[derive(Debug, Clone, Copy)]
pub struct HistoryView<'a> {
    data: &'a PanelDataset,
    subject: usize,
    time: usize,
}

impl<'a> HistoryView<'a> {
    pub fn subject(&self) -> usize {
        self.subject
    }

    pub fn time(&self) -> usize {
        self.time
    }

    /// `L̄_m = (Z̄_m, Ȳ_{m-1}, Ā_{m-1})`.
    pub fn lbar(&self) -> LBar<'a> {
        LBar {
            data: self.data,
            subject: self.subject,
            time: self.time,
        }
    }

    /// `A_m`.
    pub fn current_treatment(&self) -> &'a [f64] {
        self.data.treatment(self.subject, self.time)
    }

    /// Treatment at `t <= m`; `None` outside `0..=m`.
    pub fn treatment(&self, t: i64) -> Option<&'a [f64]> {
        (t >= 0 && t as usize <= self.time).then(|| self.data.treatment(self.subject, t as usize))
    }
}

/// Adjustment history at time `m`. Never exposes `Y_m` or `A_m`.
#[derive(Debug, Clone, Copy)]
pub struct LBar<'a> {
    data: &'a PanelDataset,
    subject: usize,
    time: usize,
}

impl<'a> LBar<'a> {
    pub fn subject(&self) -> usize {
        self.subject
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn time_label(&self) -> i64 {
        self.data.time_label(self.time)
    }

    pub fn data(&self) -> &'a PanelDataset {
        self.data
    }

    /// `Z_t[j]` for `0 <= t <= m`; `None` otherwise (the null value).
    pub fn covariate(&self, t: i64, j: usize) -> Option<f64> {
        self.covariates(t).map(|z| z[j])
    }

    pub fn covariates(&self, t: i64) -> Option<&'a [f64]> {
        (t >= 0 && t as usize <= self.time).then(|| self.data.covariates(self.subject, t as usize))
    }

    /// `Y_t` for `0 <= t < m`.
    pub fn outcome(&self, t: i64) -> Option<f64> {
        (t >= 0 && (t as usize) < self.time).then(|| self.data.outcome(self.subject, t as usize))
    }

    /// `A_t` for `0 <= t < m`.
    pub fn treatment(&self, t: i64) -> Option<&'a [f64]> {
        (t >= 0 && (t as usize) < self.time).then(|| self.data.treatment(self.subject, t as usize))
    }
}

/// Maps CSV columns to panel roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub subject: String,
    pub time: String,
    pub outcome: String,
    pub treatments: Vec<String>,
    pub covariates: Vec<String>,
}

impl Schema {
    /// Canonical roles: `subject_id`, `time`, `y`, `a_*`, `z_*`.
    pub fn canonical(header: &[String]) -> Result<Schema> {
        let treatments: Vec<String> = header.iter().filter(|h| h.starts_with("a_")).cloned().collect();
        let covariates: Vec<String> = header.iter().filter(|h| h.starts_with("z_")).cloned().collect();
        for need in ["subject_id", "time", "y"] {
            if !header.iter().any(|h| h == need) {
                return Err(Error::Data(format!("missing required column `{need}`")));
            }
        }
        Ok(Schema {
            subject: "subject_id".into(),
            time: "time".into(),
            outcome: "y".into(),
            treatments,
            covariates,
        })
    }
}

fn strip_role(name: &str, prefix: &str) -> String {
    name.strip_prefix(prefix).unwrap_or(name).to_string()
}

/// Loads a long-format panel. With `schema = None` the canonical column
/// names are used.
pub fn load_csv(path: impl AsRef<Path>, schema: Option<&Schema>) -> Result<PanelDataset> {
    let f = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_csv(std::io::BufReader::new(f), schema)
}

pub fn read_csv<R: Read>(reader: R, schema: Option<&Schema>) -> Result<PanelDataset> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rd.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => Schema::canonical(&header)?,
    };
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column `{name}` not found")))
    };
    let sc = col(&schema.subject)?;
    let tc = col(&schema.time)?;
    let yc = col(&schema.outcome)?;
    let acs: Vec<usize> = schema.treatments.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let zcs: Vec<usize> = schema.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
    if acs.is_empty() {
        return Err(Error::Data("schema names no treatment column".into()));
    }

    type Row = (f64, Vec<f64>, Vec<f64>);
    let mut cells: BTreeMap<String, BTreeMap<i64, Row>> = BTreeMap::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let subject = rec.get(sc).unwrap_or("").trim().to_string();
        if subject.is_empty() {
            return Err(Error::Data(format!("row {}: empty subject id", line + 2)));
        }
        let traw = rec.get(tc).unwrap_or("").trim();
        let time: i64 = traw
            .parse()
            .map_err(|_| Error::Data(format!("row {}: time `{traw}` is not an integer", line + 2)))?;
        let num = |c: usize, name: &str| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("").trim();
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
                return Err(Error::MissingCell {
                    subject: subject.clone(),
                    time,
                    column: name.to_string(),
                });
            }
            let v: f64 = raw.parse().map_err(|_| {
                Error::Data(format!(
                    "subject `{subject}` time {time}: column `{name}` value `{raw}` is not numeric"
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::MissingCell {
                    subject: subject.clone(),
                    time,
                    column: name.to_string(),
                });
            }
            Ok(v)
        };
        let y = num(yc, &schema.outcome)?;
        let a = acs
            .iter()
            .zip(&schema.treatments)
            .map(|(&c, n)| num(c, n))
            .collect::<Result<Vec<_>>>()?;
        let z = zcs
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, n)| num(c, n))
            .collect::<Result<Vec<_>>>()?;
        let prev = cells.entry(subject.clone()).or_default().insert(time, (y, a, z));
        if prev.is_some() {
            return Err(Error::Data(format!("duplicate row for subject `{subject}` at time {time}")));
        }
    }
    if cells.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }

    let times: BTreeSet<i64> = cells.values().flat_map(|m| m.keys().copied()).collect();
    let labels: Vec<i64> = times.into_iter().collect();
    for w in labels.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(Error::Data(format!(
                "irregular time grid: no observations between {} and {}",
                w[0], w[1]
            )));
        }
    }
    for (s, rows) in &cells {
        if rows.len() != labels.len() {
            let missing = labels.iter().find(|t| !rows.contains_key(t)).copied().unwrap_or_default();
            return Err(Error::Data(format!(
                "ragged panel: subject `{s}` has no row for time {missing}"
            )));
        }
    }

    let mut ids: Vec<String> = cells.keys().cloned().collect();
    if ids.iter().all(|s| s.parse::<i64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<i64>().unwrap_or_default());
    }
    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut z = Vec::new();
    for id in &ids {
        for (yy, aa, zz) in cells[id].values() {
            y.push(*yy);
            a.extend_from_slice(aa);
            z.extend_from_slice(zz);
        }
    }
    PanelDataset::new(
        ids,
        labels,
        strip_role(&schema.outcome, "y_"),
        schema.treatments.iter().map(|n| strip_role(n, "a_")).collect(),
        schema.covariates.iter().map(|n| strip_role(n, "z_")).collect(),
        y,
        a,
        z,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(paths: &[&[f64]]) -> PanelDataset {
        let n = paths.len();
        let nt = paths[0].len();
        let ids = (0..n).map(|i| i.to_string()).collect();
        let y = vec![0.0; n * nt];
        let a = paths.iter().flat_map(|p| p.iter().copied()).collect();
        PanelDataset::new(ids, (0..nt as i64).collect(), "y", vec!["d".into()], vec![], y, a, vec![])
            .unwrap()
    }

    #[test]
    fn initiation_time_definition() {
        let d = toy(&[&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 0.0, 0.0]]);
        assert_eq!(
            d.initiation_time(0),
            InitiationTime::At {
                time: 2,
                value: vec![1.0]
            }
        );
        assert_eq!(d.initiation_time(1), InitiationTime::Never);
        assert!(d.initiation_time(1).at_risk(3));
        assert!(!d.initiation_time(0).at_risk(3));
    }

    #[test]
    fn staggered_detection() {
        assert!(toy(&[&[0.0, 1.0, 1.0], &[0.0, 0.0, 0.0]]).is_staggered_adoption());
        assert!(!toy(&[&[0.0, 1.0, 0.0]]).is_staggered_adoption());
    }

    #[test]
    fn history_hides_current_outcome_and_treatment() {
        let d = PanelDataset::new(
            vec!["a".into()],
            vec![0, 1, 2],
            "y",
            vec!["d".into()],
            vec!["x".into()],
            vec![10.0, 11.0, 12.0],
            vec![0.0, 1.0, 1.0],
            vec![5.0, 6.0, 7.0],
        )
        .unwrap();
        let h = d.history(0, 1);
        let l = h.lbar();
        assert_eq!(l.outcome(0), Some(10.0));
        assert_eq!(l.outcome(1), None);
        assert_eq!(l.treatment(1), None);
        assert_eq!(l.treatment(0), Some(&[0.0][..]));
        assert_eq!(l.covariate(1, 0), Some(6.0));
        assert_eq!(l.covariate(2, 0), None);
        assert_eq!(l.covariate(-1, 0), None);
        assert_eq!(h.current_treatment(), &[1.0]);
        assert_eq!(h.treatment(-1), None);
    }

    #[test]
    fn load_rejects_missing_cell() {
        let csv = "subject_id,time,y,a_d\n1,0,1.0,0\n1,1,,0\n";
        match read_csv(csv.as_bytes(), None) {
            Err(Error::MissingCell { subject, time, .. }) => {
                assert_eq!(subject, "1");
                assert_eq!(time, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_ragged_and_non_numeric() {
        let ragged = "subject_id,time,y,a_d\n1,0,1,0\n1,1,1,0\n2,0,1,0\n";
        assert!(matches!(read_csv(ragged.as_bytes(), None), Err(Error::Data(m)) if m.contains("ragged")));
        let bad = "subject_id,time,y,a_d\n1,0,abc,0\n";
        assert!(matches!(read_csv(bad.as_bytes(), None), Err(Error::Data(m)) if m.contains("not numeric")));
    }

    #[test]
    fn zero_covariates_load() {
        let csv = "subject_id,time,y,a_d\n1,0,1,0\n1,1,2,1\n";
        let d = read_csv(csv.as_bytes(), None).unwrap();
        assert_eq!(d.n_covariates(), 0);
        assert_eq!(d.horizon(), 1);
    }

    #[test]
    fn custom_schema_and_label_normalization() {
        let csv = "county,year,price,dereg,mort\nB,1996,2,1,0.5\nA,1995,1,0,0.1\nA,1996,1.5,0,0.2\nB,1995,1,0,0.3\n";
        let schema = Schema {
            subject: "county".into(),
            time: "year".into(),
            outcome: "price".into(),
            treatments: vec!["dereg".into()],
            covariates: vec!["mort".into()],
        };
        let d = read_csv(csv.as_bytes(), Some(&schema)).unwrap();
        assert_eq!(d.subject_ids(), &["A".to_string(), "B".to_string()]);
        assert_eq!(d.time_labels(), &[1995, 1996]);
        assert_eq!(d.outcome(1, 1), 2.0);
        assert_eq!(d.covariates(0, 1), &[0.2]);
    }

    #[test]
    fn bootstrap_selection_renames_duplicates() {
        let d = toy(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let b = d.select_subjects(&[1, 1, 0]).unwrap();
        assert_eq!(b.subject_ids(), &["1".to_string(), "1#1".into(), "0".into()]);
    }
}

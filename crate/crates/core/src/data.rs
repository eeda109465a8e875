//! Subject records, datasets, weighting schemes and CSV ingestion.
//!
//! A dataset always describes a full phase-I cohort of `N` subjects. Under
//! random sampling every subject is selected with probability one; under
//! two-phase sampling the covariates of unselected subjects are absent and
//! are never read.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower bound on the design probabilities.
pub const DEFAULT_SIGMA: f64 = 1e-6;

/// One study subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    /// Observed follow-up time `min(event time, censoring time)`.
    pub time: f64,
    pub event: bool,
    /// Covariates; entries may be `None` only when `selected` is false.
    pub covariates: Vec<Option<f64>>,
    /// Phase-I auxiliary variables used for calibration.
    pub auxiliary: Vec<f64>,
    pub selected: bool,
    /// Known phase-II selection probability.
    pub sampling_prob: f64,
}

impl SubjectRecord {
    /// Fully observed subject from a random sample.
    pub fn complete(time: f64, event: bool, covariates: Vec<f64>) -> Self {
        SubjectRecord {
            time,
            event,
            covariates: covariates.into_iter().map(Some).collect(),
            auxiliary: Vec::new(),
            selected: true,
            sampling_prob: 1.0,
        }
    }

    pub fn has_covariates(&self) -> bool {
        self.covariates.iter().all(Option::is_some)
    }

    /// Covariate value `k`, zero when absent.
    pub(crate) fn z(&self, k: usize) -> f64 {
        self.covariates[k].unwrap_or(0.0)
    }
}

/// Validated, immutable cohort with its administrative horizon `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    tau: f64,
    p: usize,
    q: usize,
    sigma: f64,
}

impl Dataset {
    /// Builds a dataset with the default probability floor.
    pub fn new(records: Vec<SubjectRecord>, tau: f64) -> Result<Self> {
        Self::with_sigma(records, tau, DEFAULT_SIGMA)
    }

    /// Builds a dataset, requiring every sampling probability to be at
    /// least `sigma`.
    pub fn with_sigma(records: Vec<SubjectRecord>, tau: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma <= 1.0) {
            return Err(Error::ConfigError(format!("sigma must lie in (0, 1], got {sigma}")));
        }
        let (p, q) = records
            .first()
            .map(|r| (r.covariates.len(), r.auxiliary.len()))
            .unwrap_or((0, 0));
        let ds = Dataset {
            records,
            tau,
            p,
            q,
            sigma,
        };
        ds.check_invariants()?;
        Ok(ds)
    }

    fn check_invariants(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::ConfigError(format!("tau must be positive, got {}", self.tau)));
        }
        if self.records.is_empty() {
            return Err(Error::ConfigError("dataset has no records".into()));
        }
        for (row, r) in self.records.iter().enumerate() {
            if r.covariates.len() != self.p || r.auxiliary.len() != self.q {
                return Err(Error::InvalidRecord {
                    row,
                    message: format!(
                        "expected {} covariates and {} auxiliaries, found {} and {}",
                        self.p,
                        self.q,
                        r.covariates.len(),
                        r.auxiliary.len()
                    ),
                });
            }
            if !(r.time >= 0.0 && r.time.is_finite()) {
                return Err(Error::InvalidRecord {
                    row,
                    message: format!("time must be finite and nonnegative, got {}", r.time),
                });
            }
            if r.event && r.time == 0.0 {
                return Err(Error::InvalidRecord {
                    row,
                    message: "event at time 0".into(),
                });
            }
            if !(r.sampling_prob > 0.0 && r.sampling_prob <= 1.0 && r.sampling_prob >= self.sigma)
            {
                return Err(Error::ProbabilityOutOfRange {
                    row,
                    value: r.sampling_prob,
                    sigma: self.sigma,
                });
            }
            if r.selected && !r.has_covariates() {
                return Err(Error::InvalidRecord {
                    row,
                    message: "selected subject has missing covariates".into(),
                });
            }
            if r.covariates.iter().flatten().any(|z| !z.is_finite())
                || r.auxiliary.iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidRecord {
                    row,
                    message: "non-finite covariate or auxiliary".into(),
                });
            }
        }
        if !self.records.iter().any(|r| r.time >= self.tau) {
            return Err(Error::NoSubjectAtRiskAtTau(self.tau));
        }
        Ok(())
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Covariate dimension.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Auxiliary dimension.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// True when every subject is selected with probability one.
    pub fn is_random_sample(&self) -> bool {
        self.records.iter().all(|r| r.selected && r.sampling_prob == 1.0)
    }

    /// Same subjects with the auxiliary variables replaced.
    pub fn with_auxiliary(&self, auxiliary: Vec<Vec<f64>>) -> Result<Self> {
        if auxiliary.len() != self.len() {
            return Err(Error::ConfigError("auxiliary rows do not match records".into()));
        }
        let records = self
            .records
            .iter()
            .zip(auxiliary)
            .map(|(r, v)| SubjectRecord {
                auxiliary: v,
                ..r.clone()
            })
            .collect();
        Self::with_sigma(records, self.tau, self.sigma)
    }
}

/// Which empirical measure the estimators use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    /// Random sampling: every weight is one.
    Unit,
    /// Two-phase sampling with weights `R / pi`.
    Ipw,
    /// Two-phase sampling with calibrated weights `R exp(-gamma' v) / pi`.
    Calibrated { gamma: Vec<f64> },
}

impl WeightScheme {
    pub fn label(&self) -> &'static str {
        match self {
            WeightScheme::Unit => "rs",
            WeightScheme::Ipw => "ipw",
            WeightScheme::Calibrated { .. } => "cal",
        }
    }

    /// Per-subject weights. Unselected subjects get weight zero under the
    /// two-phase schemes.
    pub fn weights(&self, dataset: &Dataset) -> Vec<f64> {
        match self {
            WeightScheme::Unit => vec![1.0; dataset.len()],
            WeightScheme::Ipw => dataset
                .records()
                .iter()
                .map(|r| if r.selected { 1.0 / r.sampling_prob } else { 0.0 })
                .collect(),
            WeightScheme::Calibrated { gamma } => {
                crate::calibration::calibrated_weights(gamma, dataset)
            }
        }
    }
}

/// Checks that `scheme` can be applied to `dataset`.
pub fn validate(dataset: &Dataset, scheme: &WeightScheme) -> Result<()> {
    dataset.check_invariants()?;
    match scheme {
        WeightScheme::Unit => {
            if let Some(row) = dataset
                .records()
                .iter()
                .position(|r| !r.selected || r.sampling_prob != 1.0)
            {
                return Err(Error::SchemeDataMismatch(format!(
                    "unit weights need a fully observed random sample; row {row} is a two-phase record"
                )));
            }
        }
        WeightScheme::Ipw => {}
        WeightScheme::Calibrated { gamma } => {
            if dataset.q() == 0 {
                return Err(Error::SchemeDataMismatch(
                    "calibration needs auxiliary variables".into(),
                ));
            }
            if gamma.len() != dataset.q() {
                return Err(Error::SchemeDataMismatch(format!(
                    "gamma has dimension {} but there are {} auxiliaries",
                    gamma.len(),
                    dataset.q()
                )));
            }
        }
    }
    Ok(())
}

/// Column names used to read a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub time: String,
    pub event: String,
    /// When absent every row is treated as selected.
    pub selected: Option<String>,
    /// When absent every probability is one.
    pub prob: Option<String>,
    pub covariates: Vec<String>,
    pub auxiliary: Vec<String>,
}

impl CsvSchema {
    /// The standard layout `time, event, selected, prob, z1..zp, vtilde1..vtildeq`.
    pub fn standard(p: usize, q: usize) -> Self {
        CsvSchema {
            time: "time".into(),
            event: "event".into(),
            selected: Some("selected".into()),
            prob: Some("prob".into()),
            covariates: (1..=p).map(|k| format!("z{k}")).collect(),
            auxiliary: (1..=q).map(|k| format!("vtilde{k}")).collect(),
        }
    }

    /// Infers the standard layout from a header row: counts the `z<k>` and
    /// `vtilde<k>` columns and keeps `selected`/`prob` only if present.
    pub fn detect(headers: &[String]) -> Self {
        let count = |prefix: &str| {
            (1..)
                .take_while(|k| headers.iter().any(|h| h == &format!("{prefix}{k}")))
                .count()
        };
        let mut schema = Self::standard(count("z"), count("vtilde"));
        if !headers.iter().any(|h| h == "selected") {
            schema.selected = None;
        }
        if !headers.iter().any(|h| h == "prob") {
            schema.prob = None;
        }
        schema
    }
}

/// Reads a dataset from a CSV file. With `schema = None` the layout is
/// detected from the header.
pub fn load_csv(path: &Path, schema: Option<&CsvSchema>, tau: f64) -> Result<Dataset> {
    load_csv_with_sigma(path, schema, tau, DEFAULT_SIGMA)
}

pub fn load_csv_with_sigma(
    path: &Path,
    schema: Option<&CsvSchema>,
    tau: f64,
    sigma: f64,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => CsvSchema::detect(&headers),
    };
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let time_col = col(&schema.time)?;
    let event_col = col(&schema.event)?;
    let selected_col = schema.selected.as_deref().map(col).transpose()?;
    let prob_col = schema.prob.as_deref().map(col).transpose()?;
    let z_cols = schema.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let v_cols = schema.auxiliary.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let real = |c: usize| -> Result<f64> {
            field(c).parse::<f64>().map_err(|_| Error::InvalidRecord {
                row,
                message: format!("column `{}`: cannot parse `{}` as a number", headers[c], field(c)),
            })
        };
        let indicator = |c: usize| -> Result<bool> {
            match field(c) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::NonBinaryIndicator {
                    row,
                    column: headers[c].clone(),
                    value: other.to_owned(),
                }),
            }
        };
        let selected = selected_col.map(indicator).transpose()?.unwrap_or(true);
        let sampling_prob = prob_col.map(real).transpose()?.unwrap_or(1.0);
        if !(sampling_prob > 0.0 && sampling_prob <= 1.0) {
            return Err(Error::ProbabilityOutOfRange {
                row,
                value: sampling_prob,
                sigma,
            });
        }
        let mut covariates = Vec::with_capacity(z_cols.len());
        for &c in &z_cols {
            if field(c).is_empty() {
                if selected {
                    return Err(Error::InvalidRecord {
                        row,
                        message: format!("selected subject is missing `{}`", headers[c]),
                    });
                }
                covariates.push(None);
            } else {
                covariates.push(Some(real(c)?));
            }
        }
        records.push(SubjectRecord {
            time: real(time_col)?,
            event: indicator(event_col)?,
            covariates,
            auxiliary: v_cols.iter().map(|&c| real(c)).collect::<Result<_>>()?,
            selected,
            sampling_prob,
        });
    }
    Dataset::with_sigma(records, tau, sigma)
}

/// Writes a dataset in the standard layout. Reals are written with full
/// round-trip precision; absent covariates are empty fields.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let schema = CsvSchema::standard(dataset.p(), dataset.q());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![
        schema.time.clone(),
        schema.event.clone(),
        "selected".to_owned(),
        "prob".to_owned(),
    ];
    header.extend(schema.covariates.iter().cloned());
    header.extend(schema.auxiliary.iter().cloned());
    writer.write_record(&header)?;
    for r in dataset.records() {
        let mut row = vec![
            format!("{:?}", r.time),
            u8::from(r.event).to_string(),
            u8::from(r.selected).to_string(),
            format!("{:?}", r.sampling_prob),
        ];
        row.extend(r.covariates.iter().map(|z| z.map(|z| format!("{z:?}")).unwrap_or_default()));
        row.extend(r.auxiliary.iter().map(|v| format!("{v:?}")));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_random_sample() {
        let f = write("time,event,selected,prob,z1\n1,1,1,1,0.5\n2,0,1,1,0.1\n3,1,1,1,0.2\n4,0,1,1,0.3\n");
        let ds = load_csv(f.path(), None, 3.0).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.p(), 1);
        assert!(validate(&ds, &WeightScheme::Unit).is_ok());
    }

    #[test]
    fn unselected_rows_may_omit_covariates() {
        let f = write("time,event,selected,prob,z1,z2\n1,1,1,1,0.5,1\n2,0,0,0.5,,\n3,0,1,0.5,1,2\n");
        let ds = load_csv(f.path(), None, 3.0).unwrap();
        assert_eq!(ds.records()[1].covariates, vec![None, None]);
        assert!(validate(&ds, &WeightScheme::Ipw).is_ok());
        assert!(matches!(
            validate(&ds, &WeightScheme::Unit),
            Err(Error::SchemeDataMismatch(_))
        ));
    }

    #[test]
    fn zero_probability_is_rejected() {
        let f = write("time,event,selected,prob,z1\n1,1,1,0,0.5\n3,0,1,1,0.1\n");
        assert!(matches!(
            load_csv(f.path(), None, 3.0),
            Err(Error::ProbabilityOutOfRange { row: 0, .. })
        ));
    }

    #[test]
    fn probability_below_sigma_is_rejected() {
        let f = write("time,event,selected,prob,z1\n1,1,1,0.01,0.5\n3,0,1,1,0.1\n");
        assert!(load_csv_with_sigma(f.path(), None, 3.0, 0.05).is_err());
        assert!(load_csv_with_sigma(f.path(), None, 3.0, 0.005).is_ok());
    }

    #[test]
    fn selected_row_with_missing_covariate_is_rejected() {
        let f = write("time,event,selected,prob,z1,z2\n1,1,1,0.5,0.5,\n3,0,1,1,0.1,1\n");
        assert!(matches!(load_csv(f.path(), None, 3.0), Err(Error::InvalidRecord { .. })));
        let rec = SubjectRecord {
            covariates: vec![Some(1.0), None],
            ..SubjectRecord::complete(1.0, true, vec![])
        };
        let other = SubjectRecord::complete(3.0, false, vec![1.0, 2.0]);
        assert!(Dataset::new(vec![rec, other], 3.0).is_err());
    }

    #[test]
    fn ingestion_errors() {
        let f = write("time,event,z1\n1,2,0.5\n3,0,0.1\n");
        assert!(matches!(
            load_csv(f.path(), None, 3.0),
            Err(Error::NonBinaryIndicator { .. })
        ));
        let f = write("time,z1\n1,0.5\n");
        assert!(matches!(load_csv(f.path(), None, 3.0), Err(Error::MissingColumn(c)) if c == "event"));
        let f = write("time,event,z1\n1,1,0.5\n2,0,0.1\n");
        assert!(matches!(
            load_csv(f.path(), None, 3.0),
            Err(Error::NoSubjectAtRiskAtTau(_))
        ));
    }

    #[test]
    fn optional_design_columns_default_to_random_sampling() {
        let f = write("time,event,z1\n1,1,0.5\n3,0,0.1\n");
        let ds = load_csv(f.path(), None, 3.0).unwrap();
        assert!(ds.is_random_sample());
    }

    #[test]
    fn calibrated_scheme_needs_matching_auxiliaries() {
        let ds = Dataset::new(
            vec![
                SubjectRecord::complete(1.0, true, vec![0.0]),
                SubjectRecord::complete(2.0, false, vec![1.0]),
            ],
            2.0,
        )
        .unwrap();
        assert!(validate(&ds, &WeightScheme::Calibrated { gamma: vec![] }).is_err());
    }

    #[test]
    fn validate_does_not_mutate() {
        let f = write("time,event,selected,prob,z1\n1,1,1,1,0.5\n3,0,0,0.5,\n");
        let ds = load_csv(f.path(), None, 3.0).unwrap();
        let before = ds.clone();
        let _ = validate(&ds, &WeightScheme::Unit);
        let _ = validate(&ds, &WeightScheme::Ipw);
        assert_eq!(ds, before);
    }
}

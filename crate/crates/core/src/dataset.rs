//! Tabular data model and CSV ingestion.
//!
//! A [`Dataset`] is a `q x p` feature matrix (one row per record) together
//! with a label per row. Binary labels are always stored as `-1.0` / `+1.0`;
//! any other encoding found in an input file is mapped at ingestion time.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Class labels, each exactly `-1.0` or `+1.0`.
    Binary(Vec<f64>),
    /// Real-valued regression targets.
    Real(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Labels::Binary(v) | Labels::Real(v) => v,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, Labels::Binary(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: Labels,
    feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Labels) -> Result<Self> {
        let (q, p) = features.shape();
        if q == 0 || p == 0 {
            return Err(Error::Data(format!("dataset must be non-empty, got {q}x{p}")));
        }
        if labels.len() != q {
            return Err(Error::dim("dataset labels", q, labels.len()));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature at row {}, column {}",
                pos % q,
                pos / q
            )));
        }
        match &labels {
            Labels::Binary(v) => {
                if let Some((i, y)) = v.iter().enumerate().find(|(_, y)| **y != 1.0 && **y != -1.0) {
                    return Err(Error::Data(format!("binary label at row {i} is {y}, expected -1 or +1")));
                }
            }
            Labels::Real(v) => {
                if let Some(i) = v.iter().position(|y| !y.is_finite()) {
                    return Err(Error::Data(format!("non-finite response at row {i}")));
                }
            }
        }
        Ok(Self {
            features,
            labels,
            feature_names: None,
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::dim("feature names", self.p(), names.len()));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    /// Number of records.
    pub fn q(&self) -> usize {
        self.features.nrows()
    }

    /// Number of features.
    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn label_values(&self) -> &[f64] {
        self.labels.values()
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn row(&self, i: usize) -> RowDVector<f64> {
        self.features.row(i).into_owned()
    }

    /// Returns a copy with the same labels and names but new features.
    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::dim("replacement features", self.q() * self.p(), features.len()));
        }
        let mut out = Dataset::new(features, self.labels.clone())?;
        out.feature_names = self.feature_names.clone();
        Ok(out)
    }

    /// Row-major stacking `[x_1; ...; x_q]` of length `q * p`.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(self.q() * self.p(), self.features.transpose().iter().copied())
    }

    /// Inverse of [`Dataset::stacked`] keeping labels and names.
    pub fn from_stacked(&self, stacked: &DVector<f64>) -> Result<Self> {
        let (q, p) = (self.q(), self.p());
        if stacked.len() != q * p {
            return Err(Error::dim("stacked features", q * p, stacked.len()));
        }
        let features = DMatrix::from_row_slice(q, p, stacked.as_slice());
        self.with_features(features)
    }
}

/// Per-column affine map `z = (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    /// Fits column means and (population) standard deviations. Constant
    /// columns get scale 1 so they map to zero instead of NaN.
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let q = features.nrows() as f64;
        let mut means = Vec::with_capacity(features.ncols());
        let mut scales = Vec::with_capacity(features.ncols());
        for col in features.column_iter() {
            let mean = col.sum() / q;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / q;
            let sd = var.sqrt();
            means.push(mean);
            scales.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Self { means, scales }
    }

    pub fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.means[j]) / self.scales[j]
        })
    }

    pub fn invert(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            features[(i, j)] * self.scales[j] + self.means[j]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

impl LabelColumn {
    /// Numeric strings are read as column indices, anything else as a name.
    pub fn parse(s: &str) -> Self {
        match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelEncoding {
    /// Map raw label strings to `-1` / `+1`. Unmapped values are an error.
    Binary(BTreeMap<String, f64>),
    /// Accept `-1/+1` or `0/1` numerics (0 maps to -1).
    BinaryNumeric,
    /// Parse labels as real responses.
    Real,
}

impl LabelEncoding {
    /// Parses `"M=1,B=-1"` style maps.
    pub fn parse_map(spec: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("label map entry '{part}' lacks '='")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("label map value '{v}' is not a number")))?;
            if v != 1.0 && v != -1.0 {
                return Err(Error::Config(format!("label map value {v} must be -1 or 1")));
            }
            map.insert(k.trim().to_string(), v);
        }
        if map.is_empty() {
            return Err(Error::Config("empty label map".into()));
        }
        Ok(LabelEncoding::Binary(map))
    }
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub label_column: LabelColumn,
    pub encoding: LabelEncoding,
    pub standardize: bool,
    /// Columns dropped on load (identifiers); they do not appear in releases.
    pub ignore_columns: Vec<LabelColumn>,
}

/// A CSV file as loaded: the dataset plus what is needed to write a release
/// with the same schema.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub label_index: usize,
    pub raw_labels: Vec<String>,
    pub dataset: Dataset,
    pub standardization: Option<Standardization>,
}

impl CsvTable {
    pub fn read(path: &Path, options: &CsvOptions) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, options)
    }

    pub fn from_bytes(bytes: &[u8], options: &CsvOptions) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let full_header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut kept = vec![true; full_header.len()];
        for col in &options.ignore_columns {
            let j = match col {
                LabelColumn::Index(i) if *i < full_header.len() => *i,
                LabelColumn::Index(i) => return Err(Error::Data(format!("ignored column index {i} out of range"))),
                LabelColumn::Name(n) => full_header
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| Error::Data(format!("ignored column '{n}' not in header")))?,
            };
            kept[j] = false;
        }
        let header: Vec<String> = full_header
            .iter()
            .zip(&kept)
            .filter(|(_, k)| **k)
            .map(|(h, _)| h.clone())
            .collect();
        if header.len() < 2 {
            return Err(Error::Data("need a label column and at least one feature column".into()));
        }
        let label_index = match &options.label_column {
            LabelColumn::Index(i) if *i < full_header.len() && kept[*i] => {
                kept[..*i].iter().filter(|k| **k).count()
            }
            LabelColumn::Index(i) => {
                return Err(Error::Data(format!("label column index {i} out of range")));
            }
            LabelColumn::Name(n) => header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::Data(format!("label column '{n}' not in header")))?,
        };
        let p = header.len() - 1;
        let mut values = Vec::new();
        let mut raw_labels = Vec::new();
        for (row_idx, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != full_header.len() {
                return Err(Error::Data(format!(
                    "row {} has {} fields, header has {}",
                    row_idx + 1,
                    record.len(),
                    full_header.len()
                )));
            }
            let fields = record.iter().zip(&kept).filter(|(_, k)| **k).map(|(f, _)| f);
            for (j, field) in fields.enumerate() {
                if j == label_index {
                    raw_labels.push(field.trim().to_string());
                    continue;
                }
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Data(format!(
                        "row {}, column '{}': '{}' is not a number",
                        row_idx + 1,
                        header[j],
                        field
                    ))
                })?;
                values.push(v);
            }
        }
        let q = raw_labels.len();
        if q == 0 {
            return Err(Error::Data("no data rows".into()));
        }
        let labels = encode_labels(&raw_labels, &options.encoding)?;
        let mut features = DMatrix::from_row_slice(q, p, &values);
        let standardization = if options.standardize {
            let s = Standardization::fit(&features);
            features = s.apply(&features);
            Some(s)
        } else {
            None
        };
        let names = header
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != label_index)
            .map(|(_, h)| h.clone())
            .collect();
        let dataset = Dataset::new(features, labels)?.with_feature_names(names)?;
        Ok(Self {
            header,
            label_index,
            raw_labels,
            dataset,
            standardization,
        })
    }

    /// Writes `released` under the original header, label strings untouched.
    pub fn write_release<W: std::io::Write>(&self, released: &Dataset, out: W) -> Result<()> {
        if released.q() != self.raw_labels.len() || released.p() + 1 != self.header.len() {
            return Err(Error::dim("release rows", self.raw_labels.len(), released.q()));
        }
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(&self.header)?;
        let mut row = Vec::with_capacity(self.header.len());
        for i in 0..released.q() {
            row.clear();
            let mut feature = 0;
            for j in 0..self.header.len() {
                if j == self.label_index {
                    row.push(self.raw_labels[i].clone());
                } else {
                    row.push(format!("{}", released.features()[(i, feature)]));
                    feature += 1;
                }
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn encode_labels(raw: &[String], encoding: &LabelEncoding) -> Result<Labels> {
    match encoding {
        LabelEncoding::Binary(map) => raw
            .iter()
            .enumerate()
            .map(|(i, s)| {
                map.get(s)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("row {}: label '{s}' not in label map", i + 1)))
            })
            .collect::<Result<Vec<_>>>()
            .map(Labels::Binary),
        LabelEncoding::BinaryNumeric => raw
            .iter()
            .enumerate()
            .map(|(i, s)| match s.parse::<f64>() {
                Ok(1.0) => Ok(1.0),
                Ok(v) if v == -1.0 || v == 0.0 => Ok(-1.0),
                _ => Err(Error::Data(format!("row {}: label '{s}' is not binary", i + 1))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Labels::Binary),
        LabelEncoding::Real => raw
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .map_err(|_| Error::Data(format!("row {}: response '{s}' is not a number", i + 1)))
            })
            .collect::<Result<Vec<_>>>()
            .map(Labels::Real),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn options(encoding: LabelEncoding, standardize: bool) -> CsvOptions {
        CsvOptions {
            label_column: LabelColumn::Name("y".into()),
            encoding,
            standardize,
            ignore_columns: Vec::new(),
        }
    }

    #[test]
    fn rejects_bad_binary_labels() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(Dataset::new(x.clone(), Labels::Binary(vec![1.0, 0.0])).is_err());
        assert!(Dataset::new(x, Labels::Binary(vec![1.0, -1.0])).is_ok());
    }

    #[test]
    fn rejects_non_finite_features() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        assert!(matches!(
            Dataset::new(x, Labels::Real(vec![0.0, 1.0])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn stacked_round_trip() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = Dataset::new(x, Labels::Real(vec![0.0, 1.0])).unwrap();
        let s = d.stacked();
        assert_eq!(s.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(d.from_stacked(&s).unwrap(), d);
    }

    #[test]
    fn csv_with_label_map_and_standardization() {
        let csv = b"a,y,b\n1,M,10\n3,B,10\n";
        let map = LabelEncoding::parse_map("M=1,B=-1").unwrap();
        let t = CsvTable::from_bytes(csv, &options(map, true)).unwrap();
        assert_eq!(t.dataset.label_values(), &[1.0, -1.0]);
        let s = t.standardization.as_ref().unwrap();
        assert_eq!(s.means, vec![2.0, 10.0]);
        assert_eq!(s.scales, vec![1.0, 1.0]);
        assert_eq!(t.dataset.features()[(0, 0)], -1.0);
        assert_eq!(t.dataset.feature_names().unwrap(), &["a".to_string(), "b".to_string()]);
        let back = s.invert(t.dataset.features());
        assert_eq!(back[(1, 0)], 3.0);
    }

    #[test]
    fn csv_numeric_zero_one_labels() {
        let csv = b"y,x\n0,1.5\n1,2.5\n";
        let mut o = options(LabelEncoding::BinaryNumeric, false);
        o.label_column = LabelColumn::Index(0);
        let t = CsvTable::from_bytes(csv, &o).unwrap();
        assert_eq!(t.dataset.label_values(), &[-1.0, 1.0]);
    }

    #[test]
    fn ignored_columns_are_dropped() {
        let csv = b"id,x,y\n7,1.5,1\n8,2.5,0\n";
        let mut o = options(LabelEncoding::BinaryNumeric, false);
        o.ignore_columns = vec![LabelColumn::Name("id".into())];
        let t = CsvTable::from_bytes(csv, &o).unwrap();
        assert_eq!(t.header, vec!["x".to_string(), "y".to_string()]);
        assert_eq!(t.dataset.p(), 1);
        o.label_column = LabelColumn::Index(2);
        assert_eq!(CsvTable::from_bytes(csv, &o).unwrap().label_index, 1);
        o.label_column = LabelColumn::Index(0);
        assert!(CsvTable::from_bytes(csv, &o).is_err());
    }

    #[test]
    fn csv_errors() {
        let o = options(LabelEncoding::Real, false);
        assert!(CsvTable::from_bytes(b"x,z\n1,2\n", &o).is_err());
        assert!(CsvTable::from_bytes(b"x,y\nfoo,2\n", &o).is_err());
        assert!(CsvTable::from_bytes(b"x,y\n", &o).is_err());
    }

    #[test]
    fn release_keeps_schema_and_labels() {
        let csv = b"a,y\n1,yes\n2,no\n";
        let map = LabelEncoding::parse_map("yes=1,no=-1").unwrap();
        let t = CsvTable::from_bytes(csv, &options(map, false)).unwrap();
        let released = t.dataset.with_features(DMatrix::from_row_slice(2, 1, &[1.5, 2.5])).unwrap();
        let mut out = Vec::new();
        t.write_release(&released, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "a,y\n1.5,yes\n2.5,no\n");
    }
}

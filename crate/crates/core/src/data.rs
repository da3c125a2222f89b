//! Long-format data ingestion and factor encoding.
//!
//! All downstream modules work on integer level codes; labels are kept only
//! for reporting. Rows with a missing response or a missing value in any
//! requested factor column are dropped (listwise deletion) and counted.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::num::Scalar;

/// One encoded factor column: level labels plus per-observation codes.
#[derive(Debug, Clone)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    pub codes: Vec<u32>,
}

impl Factor {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Label of the level behind observation `obs`.
    pub fn label(&self, obs: usize) -> &str {
        &self.levels[self.codes[obs] as usize]
    }
}

/// Immutable column table: one numeric response plus encoded factors.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    response_name: String,
    response: Vec<F>,
    factors: Vec<Factor>,
    dropped: usize,
}

impl<F: Scalar> Dataset<F> {
    /// Assemble a dataset from already-encoded columns (used by simulators
    /// and tests; `read_csv` is the file-based entry point).
    pub fn from_parts(response_name: &str, response: Vec<F>, factors: Vec<Factor>) -> Result<Self> {
        let n = response.len();
        if n == 0 {
            return Err(Error::EmptyData { dropped: 0 });
        }
        for f in &factors {
            if f.codes.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "factor `{}` has {} codes for {} observations",
                    f.name,
                    f.codes.len(),
                    n
                )));
            }
            if let Some(&c) = f.codes.iter().find(|&&c| c as usize >= f.levels.len()) {
                return Err(Error::Invalid(format!(
                    "factor `{}` has code {} out of range",
                    f.name, c
                )));
            }
        }
        Ok(Dataset { response_name: response_name.to_string(), response, factors, dropped: 0 })
    }

    pub fn n_obs(&self) -> usize {
        self.response.len()
    }

    pub fn response(&self) -> &[F] {
        &self.response
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    /// Number of rows removed by missing-data filtering during ingestion.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor_index(&self, name: &str) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::UnknownFactor(name.to_string()))
    }

    pub fn factor(&self, name: &str) -> Result<&Factor> {
        Ok(&self.factors[self.factor_index(name)?])
    }

    /// Number of distinct observed levels of `factor`.
    pub fn level_counts(&self, factor: &str) -> Result<usize> {
        Ok(self.factor(factor)?.n_levels())
    }

    /// Dataset with the same factors and a new response vector.
    pub fn with_response(&self, response: Vec<F>) -> Result<Self> {
        if response.len() != self.n_obs() {
            return Err(Error::DimensionMismatch("response length".into()));
        }
        let mut ds = self.clone();
        ds.response = response;
        Ok(ds)
    }
}

/// `new_name = left:right` combined-factor request.
#[derive(Debug, Clone)]
pub struct CombineSpec {
    pub new_name: String,
    pub left: String,
    pub right: String,
}

#[derive(Debug, Clone, Default)]
pub struct ReadOptions {
    /// Re-encode levels in lexicographic order instead of first appearance.
    pub sort_levels: bool,
    /// Combined factors to synthesize after reading, labels joined with ":".
    pub combine: Vec<CombineSpec>,
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

/// Read a CSV file (header row, comma separator, "." decimal mark, UTF-8)
/// into a [`Dataset`]. `factor_cols` names the columns to encode; rows with
/// a missing response or missing factor value are dropped.
pub fn read_csv<F: Scalar, P: AsRef<Path>>(
    path: P,
    response: &str,
    factor_cols: &[&str],
    opts: &ReadOptions,
) -> Result<Dataset<F>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = rdr.headers()?.clone();
    let col_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    // Raw columns to read: requested factors except combine targets (those
    // are synthesized later), plus the columns the combine specs consume.
    let mut raw_cols: Vec<&str> = factor_cols
        .iter()
        .copied()
        .filter(|name| !opts.combine.iter().any(|c| c.new_name == *name))
        .collect();
    for c in &opts.combine {
        for part in [c.left.as_str(), c.right.as_str()] {
            if !raw_cols.contains(&part) {
                raw_cols.push(part);
            }
        }
    }
    let resp_idx = col_of(response)?;
    let raw_idx: Vec<usize> = raw_cols.iter().map(|c| col_of(c)).collect::<Result<_>>()?;

    let mut y: Vec<F> = Vec::new();
    let mut raw_values: Vec<Vec<String>> = vec![Vec::new(); raw_cols.len()];
    let mut dropped = 0usize;

    for (rownum, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let resp_field = rec.get(resp_idx).unwrap_or("");
        let factor_fields: Vec<&str> =
            raw_idx.iter().map(|&i| rec.get(i).unwrap_or("")).collect();
        if is_missing(resp_field) || factor_fields.iter().any(|f| is_missing(f)) {
            dropped += 1;
            continue;
        }
        let v: f64 = resp_field.trim().parse().map_err(|_| Error::ParseNumber {
            row: rownum + 2, // 1-based, counting the header line
            value: resp_field.to_string(),
        })?;
        y.push(F::of(v));
        for (store, field) in raw_values.iter_mut().zip(&factor_fields) {
            store.push(field.trim().to_string());
        }
    }

    if y.is_empty() {
        return Err(Error::EmptyData { dropped });
    }

    let mut columns: HashMap<String, Vec<String>> = raw_cols
        .iter()
        .zip(raw_values)
        .map(|(name, vals)| (name.to_string(), vals))
        .collect();

    for c in &opts.combine {
        let left = columns
            .get(&c.left)
            .ok_or_else(|| Error::MissingColumn(c.left.clone()))?;
        let right = columns
            .get(&c.right)
            .ok_or_else(|| Error::MissingColumn(c.right.clone()))?;
        let combined: Vec<String> = left
            .iter()
            .zip(right)
            .map(|(l, r)| format!("{l}:{r}"))
            .collect();
        columns.insert(c.new_name.clone(), combined);
    }

    let mut wanted: Vec<String> = factor_cols.iter().map(|s| s.to_string()).collect();
    for c in &opts.combine {
        if !wanted.iter().any(|w| w == &c.new_name) {
            wanted.push(c.new_name.clone());
        }
    }

    let factors = wanted
        .iter()
        .map(|name| {
            let vals = columns
                .get(name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))?;
            Ok(encode_factor(name, vals, opts.sort_levels))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ds = Dataset::from_parts(response, y, factors)?;
    ds.dropped = dropped;
    Ok(ds)
}

fn encode_factor(name: &str, values: &[String], sort_levels: bool) -> Factor {
    let mut levels: Vec<String> = Vec::new();
    let mut index: HashMap<&str, u32> = HashMap::new();
    for v in values {
        if !index.contains_key(v.as_str()) {
            index.insert(v.as_str(), levels.len() as u32);
            levels.push(v.clone());
        }
    }
    if sort_levels {
        let mut sorted = levels.clone();
        sorted.sort();
        index = sorted
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        let codes = values.iter().map(|v| index[v.as_str()]).collect();
        return Factor { name: name.to_string(), levels: sorted, codes };
    }
    let codes = values.iter().map(|v| index[v.as_str()]).collect();
    Factor { name: name.to_string(), levels, codes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct TmpCsv {
        path: std::path::PathBuf,
    }

    impl Drop for TmpCsv {
        fn drop(&mut self) {
            let _ = std::fs::remove_file(&self.path);
        }
    }

    fn write_tmp(contents: &str) -> TmpCsv {
        static COUNTER: AtomicUsize = AtomicUsize::new(0);
        let mut path = std::env::temp_dir();
        path.push(format!(
            "mumix-data-test-{}-{}.csv",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&path, contents).unwrap();
        TmpCsv { path }
    }

    #[test]
    fn reads_all_valid_rows() {
        let f = write_tmp("y,g\n1.0,a\n2.5,b\n3.5,a\n");
        let ds: Dataset<f64> = read_csv(&f.path, "y", &["g"], &ReadOptions::default()).unwrap();
        assert_eq!(ds.n_obs(), 3);
        assert_eq!(ds.dropped(), 0);
        assert_eq!(ds.factor("g").unwrap().levels, vec!["a", "b"]);
        assert_eq!(ds.factor("g").unwrap().codes, vec![0, 1, 0]);
    }

    #[test]
    fn drops_rows_with_missing_response() {
        let f = write_tmp("y,g\n1.0,a\n,b\n3.5,a\nNA,b\n");
        let ds: Dataset<f64> = read_csv(&f.path, "y", &["g"], &ReadOptions::default()).unwrap();
        assert_eq!(ds.n_obs(), 2);
        assert_eq!(ds.dropped(), 2);
    }

    #[test]
    fn drops_rows_with_missing_factor() {
        let f = write_tmp("y,g\n1.0,a\n2.0,\n3.5,NA\n4.0,b\n");
        let ds: Dataset<f64> = read_csv(&f.path, "y", &["g"], &ReadOptions::default()).unwrap();
        assert_eq!(ds.n_obs(), 2);
        assert_eq!(ds.dropped(), 2);
    }

    #[test]
    fn missing_column_is_named() {
        let f = write_tmp("y,g\n1.0,a\n");
        let err = read_csv::<f64, _>(&f.path, "y", &["judge"], &ReadOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::MissingColumn(name) if name == "judge"));
    }

    #[test]
    fn unparseable_response_reports_row() {
        let f = write_tmp("y,g\n1.0,a\nnot_a_number,b\n");
        let err =
            read_csv::<f64, _>(&f.path, "y", &["g"], &ReadOptions::default()).unwrap_err();
        match err {
            Error::ParseNumber { row, value } => {
                assert_eq!(row, 3);
                assert_eq!(value, "not_a_number");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn all_rows_missing_is_empty_data() {
        let f = write_tmp("y,g\nNA,a\n,b\n");
        let err =
            read_csv::<f64, _>(&f.path, "y", &["g"], &ReadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyData { dropped: 2 }));
    }

    #[test]
    fn sort_levels_recodes_lexicographically() {
        let f = write_tmp("y,g\n1.0,b\n2.0,a\n3.0,b\n");
        let opts = ReadOptions { sort_levels: true, ..Default::default() };
        let ds: Dataset<f64> = read_csv(&f.path, "y", &["g"], &opts).unwrap();
        assert_eq!(ds.factor("g").unwrap().levels, vec!["a", "b"]);
        assert_eq!(ds.factor("g").unwrap().codes, vec![1, 0, 1]);
    }

    #[test]
    fn combine_concatenates_labels_with_colon() {
        let f = write_tmp("y,tv,pic\n1.0,t1,p1\n2.0,t1,p2\n3.0,t2,p1\n");
        let opts = ReadOptions {
            sort_levels: false,
            combine: vec![CombineSpec {
                new_name: "prod".into(),
                left: "tv".into(),
                right: "pic".into(),
            }],
        };
        let ds: Dataset<f64> = read_csv(&f.path, "y", &["prod"], &opts).unwrap();
        let prod = ds.factor("prod").unwrap();
        assert_eq!(prod.levels, vec!["t1:p1", "t1:p2", "t2:p1"]);
        assert_eq!(ds.level_counts("prod").unwrap(), 3);
    }

    #[test]
    fn level_roundtrip_reproduces_labels() {
        let f = write_tmp("y,g\n1.0,north\n2.0,south\n3.0,north\n4.0,east\n");
        let ds: Dataset<f64> = read_csv(&f.path, "y", &["g"], &ReadOptions::default()).unwrap();
        let g = ds.factor("g").unwrap();
        let decoded: Vec<&str> = (0..ds.n_obs()).map(|o| g.label(o)).collect();
        assert_eq!(decoded, vec!["north", "south", "north", "east"]);
    }

    #[test]
    fn single_level_column_counts_one() {
        let f = write_tmp("y,g\n1.0,only\n2.0,only\n");
        let ds: Dataset<f64> = read_csv(&f.path, "y", &["g"], &ReadOptions::default()).unwrap();
        assert_eq!(ds.level_counts("g").unwrap(), 1);
    }

    #[test]
    fn permuting_rows_keeps_level_sets() {
        let rows = ["1.0,a,x", "2.0,b,y", "3.0,c,x", "4.0,a,y"];
        let f1 = write_tmp(&format!("y,g,h\n{}\n", rows.join("\n")));
        let perm = [rows[2], rows[0], rows[3], rows[1]];
        let f2 = write_tmp(&format!("y,g,h\n{}\n", perm.join("\n")));
        let d1: Dataset<f64> = read_csv(&f1.path, "y", &["g", "h"], &ReadOptions::default()).unwrap();
        let d2: Dataset<f64> = read_csv(&f2.path, "y", &["g", "h"], &ReadOptions::default()).unwrap();
        for name in ["g", "h"] {
            let mut l1 = d1.factor(name).unwrap().levels.clone();
            let mut l2 = d2.factor(name).unwrap().levels.clone();
            l1.sort();
            l2.sort();
            assert_eq!(l1, l2);
        }
    }

    #[test]
    fn from_parts_validates_codes() {
        let ds = Dataset::from_parts(
            "y",
            vec![1.0f64, 2.0],
            vec![Factor { name: "g".into(), levels: vec!["a".into()], codes: vec![0, 0] }],
        )
        .unwrap();
        assert_eq!(ds.n_obs(), 2);
        let bad = Dataset::from_parts(
            "y",
            vec![1.0f64, 2.0],
            vec![Factor { name: "g".into(), levels: vec!["a".into()], codes: vec![0, 1] }],
        );
        assert!(bad.is_err());
    }
}

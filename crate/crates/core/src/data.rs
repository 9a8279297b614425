//! Expression matrices, sample metadata and cohort merging.
//!
//! Matrices are stored genes × samples. Files carry a header row whose first
//! cell names the gene column (conventionally `gene_id`) followed by sample IDs,
//! and one gene per subsequent row.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Tsv,
    Csv,
}

impl MatrixFormat {
    pub fn delimiter(self) -> u8 {
        match self {
            MatrixFormat::Tsv => b'\t',
            MatrixFormat::Csv => b',',
        }
    }

    /// Guess from the file extension; anything other than `.csv` is TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Tsv,
        }
    }
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(MatrixFormat::Tsv),
            "csv" => Ok(MatrixFormat::Csv),
            other => Err(Error::InvalidParameter(format!("unknown matrix format '{other}'"))),
        }
    }
}

/// Dense genes × samples expression matrix with unique row and column identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    gene_ids: Vec<String>,
    sample_ids: Vec<String>,
    values: Array2<f64>,
}

impl ExpressionMatrix {
    pub fn new(gene_ids: Vec<String>, sample_ids: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if gene_ids.is_empty() || sample_ids.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if values.dim() != (gene_ids.len(), sample_ids.len()) {
            return Err(Error::Shape(format!(
                "values are {:?} but there are {} genes and {} samples",
                values.dim(),
                gene_ids.len(),
                sample_ids.len()
            )));
        }
        check_unique("gene", &gene_ids)?;
        check_unique("sample", &sample_ids)?;
        for ((g, s), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    gene: gene_ids[g].clone(),
                    sample: sample_ids[s].clone(),
                });
            }
        }
        Ok(Self {
            gene_ids,
            sample_ids,
            values,
        })
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn gene_index(&self, gene: &str) -> Option<usize> {
        self.gene_ids.iter().position(|g| g == gene)
    }

    /// Same identifiers, new values.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        Self::new(self.gene_ids.clone(), self.sample_ids.clone(), values)
    }

    pub fn select_genes(&self, rows: &[usize]) -> Self {
        Self {
            gene_ids: rows.iter().map(|&r| self.gene_ids[r].clone()).collect(),
            sample_ids: self.sample_ids.clone(),
            values: self.values.select(Axis(0), rows),
        }
    }

    pub fn select_samples(&self, cols: &[usize]) -> Self {
        Self {
            gene_ids: self.gene_ids.clone(),
            sample_ids: cols.iter().map(|&c| self.sample_ids[c].clone()).collect(),
            values: self.values.select(Axis(1), cols),
        }
    }

    /// Samples × genes copy of the values, the layout models consume.
    pub fn samples_by_genes(&self) -> Array2<f64> {
        self.values.t().to_owned()
    }

    pub fn read<R: Read>(reader: R, format: MatrixFormat, transpose: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(format.delimiter())
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(h) => h?,
            None => return Err(Error::EmptyMatrix),
        };
        let col_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let mut row_ids = Vec::new();
        let mut data = Vec::new();
        for (i, rec) in records.enumerate() {
            let rec = rec?;
            let row = i + 2;
            if rec.len() == 1 && rec[0].trim().is_empty() {
                continue;
            }
            if rec.len() != col_ids.len() + 1 {
                return Err(Error::Parse {
                    row,
                    col: rec.len(),
                    message: format!("expected {} fields, found {}", col_ids.len() + 1, rec.len()),
                });
            }
            row_ids.push(rec[0].trim().to_string());
            for (j, cell) in rec.iter().enumerate().skip(1) {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    row,
                    col: j + 1,
                    message: format!("'{cell}' is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        col: j + 1,
                        message: format!("'{cell}' is not finite"),
                    });
                }
                data.push(v);
            }
        }
        if row_ids.is_empty() || col_ids.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        let values =
            Array2::from_shape_vec((row_ids.len(), col_ids.len()), data).map_err(|e| Error::Shape(e.to_string()))?;
        if transpose {
            Self::new(col_ids, row_ids, values.reversed_axes().as_standard_layout().to_owned())
        } else {
            Self::new(row_ids, col_ids, values)
        }
    }

    pub fn write<W: Write>(&self, writer: W, format: MatrixFormat) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .delimiter(format.delimiter())
            .from_writer(writer);
        let mut header = Vec::with_capacity(self.n_samples() + 1);
        header.push("gene_id".to_string());
        header.extend(self.sample_ids.iter().cloned());
        wtr.write_record(&header)?;
        for (g, row) in self.values.outer_iter().enumerate() {
            let mut rec = Vec::with_capacity(row.len() + 1);
            rec.push(self.gene_ids[g].clone());
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<matrix writer>", e))?;
        Ok(())
    }

    pub fn write_path(&self, path: &Path, format: MatrixFormat) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file), format)
    }
}

fn check_unique(kind: &'static str, ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId { kind, id: id.clone() });
        }
    }
    Ok(())
}

/// Read a matrix file. `transpose` accepts samples × genes files.
pub fn load_matrix(path: &Path, format: MatrixFormat, transpose: bool) -> Result<ExpressionMatrix> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ExpressionMatrix::read(std::io::BufReader::new(file), format, transpose)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Control,
    Case,
}

impl Condition {
    /// Positive class is `Case`.
    pub fn label(self) -> u8 {
        match self {
            Condition::Control => 0,
            Condition::Case => 1,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Control => f.write_str("Control"),
            Condition::Case => f.write_str("Case"),
        }
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "control" => Ok(Condition::Control),
            "case" | "ms" => Ok(Condition::Case),
            _ => Err(s.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub sample_id: String,
    pub subject_id: String,
    pub batch: String,
    pub condition: Condition,
}

const METADATA_COLUMNS: [&str; 4] = ["sample_id", "subject_id", "batch", "condition"];

pub fn read_metadata<R: Read>(reader: R) -> Result<Vec<SampleMetadata>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(METADATA_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |k: usize| rec.get(idx[k]).map(str::trim).unwrap_or("");
        let condition = field(3)
            .parse::<Condition>()
            .map_err(|value| Error::UnknownCondition { value, line })?;
        out.push(SampleMetadata {
            sample_id: field(0).to_string(),
            subject_id: field(1).to_string(),
            batch: field(2).to_string(),
            condition,
        });
    }
    Ok(out)
}

pub fn load_metadata(path: &Path) -> Result<Vec<SampleMetadata>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metadata(std::io::BufReader::new(file))
}

pub fn write_metadata<W: Write>(writer: W, records: &[SampleMetadata]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().delimiter(b'\t').from_writer(writer);
    wtr.write_record(METADATA_COLUMNS)?;
    for r in records {
        let cond = r.condition.to_string();
        wtr.write_record([&r.sample_id, &r.subject_id, &r.batch, &cond])?;
    }
    wtr.flush().map_err(|e| Error::io("<metadata writer>", e))?;
    Ok(())
}

pub fn write_metadata_path(path: &Path, records: &[SampleMetadata]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metadata(std::io::BufWriter::new(file), records)
}

/// A matrix together with one metadata record per column, stored in column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    matrix: ExpressionMatrix,
    metadata: Vec<SampleMetadata>,
}

impl Dataset {
    pub fn new(matrix: ExpressionMatrix, metadata: Vec<SampleMetadata>) -> Result<Self> {
        let mut by_id: HashMap<&str, &SampleMetadata> = HashMap::with_capacity(metadata.len());
        for rec in &metadata {
            if by_id.insert(rec.sample_id.as_str(), rec).is_some() {
                return Err(Error::DuplicateId {
                    kind: "metadata sample",
                    id: rec.sample_id.clone(),
                });
            }
        }
        if metadata.len() != matrix.n_samples() {
            return Err(Error::MetadataMismatch(format!(
                "{} metadata records for {} matrix samples",
                metadata.len(),
                matrix.n_samples()
            )));
        }
        let mut ordered = Vec::with_capacity(metadata.len());
        for s in matrix.sample_ids() {
            let rec = by_id
                .get(s.as_str())
                .ok_or_else(|| Error::MetadataMismatch(format!("no metadata for sample '{s}'")))?;
            ordered.push((*rec).clone());
        }
        let mut subject_condition: HashMap<&str, Condition> = HashMap::new();
        for rec in &ordered {
            if let Some(prev) = subject_condition.insert(rec.subject_id.as_str(), rec.condition) {
                if prev != rec.condition {
                    return Err(Error::InconsistentSubject(rec.subject_id.clone()));
                }
            }
        }
        Ok(Self {
            matrix,
            metadata: ordered,
        })
    }

    pub fn matrix(&self) -> &ExpressionMatrix {
        &self.matrix
    }

    pub fn metadata(&self) -> &[SampleMetadata] {
        &self.metadata
    }

    pub fn into_parts(self) -> (ExpressionMatrix, Vec<SampleMetadata>) {
        (self.matrix, self.metadata)
    }

    /// Replace the matrix, keeping metadata. Sample IDs must match in order.
    pub fn with_matrix(&self, matrix: ExpressionMatrix) -> Result<Self> {
        if matrix.sample_ids() != self.matrix.sample_ids() {
            return Err(Error::MetadataMismatch(
                "replacement matrix has different samples".into(),
            ));
        }
        Ok(Self {
            matrix,
            metadata: self.metadata.clone(),
        })
    }

    /// Sorted distinct batch labels.
    pub fn batches(&self) -> Vec<String> {
        self.metadata
            .iter()
            .map(|m| m.batch.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.metadata.iter().map(|m| m.condition).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.metadata.iter().map(|m| m.condition.label()).collect()
    }

    pub fn subjects(&self) -> Vec<String> {
        self.metadata.iter().map(|m| m.subject_id.clone()).collect()
    }

    pub fn select_samples(&self, cols: &[usize]) -> Self {
        Self {
            matrix: self.matrix.select_samples(cols),
            metadata: cols.iter().map(|&c| self.metadata[c].clone()).collect(),
        }
    }

    pub fn select_genes(&self, rows: &[usize]) -> Self {
        Self {
            matrix: self.matrix.select_genes(rows),
            metadata: self.metadata.clone(),
        }
    }

    /// Column indices grouped by batch label, batches in sorted order.
    pub fn batch_columns(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (j, m) in self.metadata.iter().enumerate() {
            out.entry(m.batch.clone()).or_default().push(j);
        }
        out
    }
}

/// Intersect gene sets (sorted lexicographically) and concatenate samples.
pub fn merge_on_common_genes(datasets: &[Dataset]) -> Result<Dataset> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::InvalidParameter("merge needs at least one dataset".into()))?;
    let mut common: BTreeSet<&str> = first.matrix.gene_ids().iter().map(String::as_str).collect();
    for d in &datasets[1..] {
        let genes: HashSet<&str> = d.matrix.gene_ids().iter().map(String::as_str).collect();
        common.retain(|g| genes.contains(g));
    }
    if common.is_empty() {
        return Err(Error::NoCommonGenes);
    }

    let mut seen_samples = HashSet::new();
    let mut batch_owner: HashMap<&str, usize> = HashMap::new();
    for (i, d) in datasets.iter().enumerate() {
        for m in d.metadata() {
            if !seen_samples.insert(m.sample_id.as_str()) {
                return Err(Error::DuplicateSample(m.sample_id.clone()));
            }
            if let Some(&owner) = batch_owner.get(m.batch.as_str()) {
                if owner != i {
                    return Err(Error::DuplicateBatch(m.batch.clone()));
                }
            } else {
                batch_owner.insert(m.batch.as_str(), i);
            }
        }
    }

    let genes: Vec<String> = common.iter().map(|g| g.to_string()).collect();
    let n_samples: usize = datasets.iter().map(|d| d.matrix.n_samples()).sum();
    let mut values = Array2::zeros((genes.len(), n_samples));
    let mut sample_ids = Vec::with_capacity(n_samples);
    let mut metadata = Vec::with_capacity(n_samples);
    let mut offset = 0;
    for d in datasets {
        let index: HashMap<&str, usize> = d
            .matrix
            .gene_ids()
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect();
        let n = d.matrix.n_samples();
        for (out_row, g) in genes.iter().enumerate() {
            let src = d.matrix.values().row(index[g.as_str()]);
            values
                .row_mut(out_row)
                .slice_mut(ndarray::s![offset..offset + n])
                .assign(&src);
        }
        sample_ids.extend(d.matrix.sample_ids().iter().cloned());
        metadata.extend(d.metadata.iter().cloned());
        offset += n;
    }
    Dataset::new(ExpressionMatrix::new(genes, sample_ids, values)?, metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn meta(sample: &str, subject: &str, batch: &str, c: Condition) -> SampleMetadata {
        SampleMetadata {
            sample_id: sample.into(),
            subject_id: subject.into(),
            batch: batch.into(),
            condition: c,
        }
    }

    #[test]
    fn parses_small_tsv() {
        let text = "gene_id\tS1\tS2\nG1\t1\t2\nG2\t3.5\t4\nG3\t-1e-3\t0\n";
        let m = ExpressionMatrix::read(text.as_bytes(), MatrixFormat::Tsv, false).unwrap();
        assert_eq!(m.values().dim(), (3, 2));
        assert_eq!(m.values()[[1, 0]], 3.5);
        assert_eq!(m.gene_ids(), &ids(&["G1", "G2", "G3"])[..]);
    }

    #[test]
    fn transpose_flag_reads_samples_by_genes() {
        let text = "sample_id,G1,G2\nS1,1,2\nS2,3,4\nS3,5,6\n";
        let m = ExpressionMatrix::read(text.as_bytes(), MatrixFormat::Csv, true).unwrap();
        assert_eq!(m.values().dim(), (2, 3));
        assert_eq!(m.values()[[1, 2]], 6.0);
        assert_eq!(m.sample_ids(), &ids(&["S1", "S2", "S3"])[..]);
    }

    #[test]
    fn duplicate_gene_rejected() {
        let text = "gene_id\tS1\tS2\nGENE1\t1\t2\nGENE1\t3\t4\n";
        let err = ExpressionMatrix::read(text.as_bytes(), MatrixFormat::Tsv, false).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { kind: "gene", ref id } if id == "GENE1"));
    }

    #[test]
    fn bad_cell_reports_location() {
        let text = "gene_id\tS1\tS2\nG1\t1\tabc\nG2\t3\t4\n";
        let err = ExpressionMatrix::read(text.as_bytes(), MatrixFormat::Tsv, false).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, col: 3, .. }), "{err:?}");
    }

    #[test]
    fn empty_file_rejected() {
        let err = ExpressionMatrix::read("gene_id\tS1\n".as_bytes(), MatrixFormat::Tsv, false).unwrap_err();
        assert!(matches!(err, Error::EmptyMatrix));
        let err = ExpressionMatrix::read("".as_bytes(), MatrixFormat::Tsv, false).unwrap_err();
        assert!(matches!(err, Error::EmptyMatrix));
    }

    #[test]
    fn nan_cell_rejected() {
        let text = "gene_id\tS1\nG1\tNaN\n";
        assert!(matches!(
            ExpressionMatrix::read(text.as_bytes(), MatrixFormat::Tsv, false),
            Err(Error::Parse { row: 2, col: 2, .. })
        ));
    }

    #[test]
    fn metadata_parsing() {
        let text =
            "sample_id\tsubject_id\tbatch\tcondition\nS1\tP1\tGSE1\tControl\nS2\tP2\tGSE1\tMS\nS3\tP3\tGSE2\tcase\n";
        let recs = read_metadata(text.as_bytes()).unwrap();
        assert_eq!(recs[0], meta("S1", "P1", "GSE1", Condition::Control));
        assert_eq!(recs[1].condition, Condition::Case);
        assert_eq!(recs[2].condition, Condition::Case);

        let bad = "sample_id\tsubject_id\tbatch\tcondition\nS1\tP1\tGSE1\tremission\n";
        assert!(matches!(
            read_metadata(bad.as_bytes()),
            Err(Error::UnknownCondition { ref value, line: 2 }) if value == "remission"
        ));

        let missing = "sample_id\tsubject_id\tcondition\nS1\tP1\tControl\n";
        assert!(matches!(read_metadata(missing.as_bytes()), Err(Error::MissingColumn(ref c)) if c == "batch"));
    }

    #[test]
    fn subject_with_two_conditions_rejected() {
        let m = ExpressionMatrix::new(ids(&["G"]), ids(&["S1", "S2"]), array![[1.0, 2.0]]).unwrap();
        let md = vec![
            meta("S1", "P1", "B", Condition::Control),
            meta("S2", "P1", "B", Condition::Case),
        ];
        assert!(matches!(Dataset::new(m, md), Err(Error::InconsistentSubject(_))));
    }

    fn dataset(genes: &[&str], samples: &[&str], batch: &str) -> Dataset {
        let n = genes.len() * samples.len();
        let values = Array2::from_shape_vec(
            (genes.len(), samples.len()),
            (0..n).map(|v| v as f64 + batch.len() as f64).collect(),
        )
        .unwrap();
        let m = ExpressionMatrix::new(ids(genes), ids(samples), values).unwrap();
        let md = samples
            .iter()
            .map(|s| meta(s, &format!("p{s}"), batch, Condition::Control))
            .collect();
        Dataset::new(m, md).unwrap()
    }

    #[test]
    fn merge_intersects_genes() {
        let a = dataset(&["A", "B", "C"], &["s1", "s2"], "b1");
        let b = dataset(&["D", "C", "B"], &["s3"], "b2");
        let merged = merge_on_common_genes(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(merged.matrix().gene_ids(), &ids(&["B", "C"])[..]);
        assert_eq!(merged.matrix().sample_ids(), &ids(&["s1", "s2", "s3"])[..]);
        // B in `b` is row 2, sample s3 col 0 -> value 2*1+0 + len("b2")
        assert_eq!(merged.matrix().values()[[0, 2]], 2.0 + 2.0);
        assert_eq!(merged.batches(), ids(&["b1", "b2"]));

        let again = merge_on_common_genes(std::slice::from_ref(&merged)).unwrap();
        assert_eq!(again, merged);
    }

    #[test]
    fn merge_single_sorts_genes() {
        let a = dataset(&["Z", "A", "M"], &["s1"], "b1");
        let merged = merge_on_common_genes(std::slice::from_ref(&a)).unwrap();
        assert_eq!(merged.matrix().gene_ids(), &ids(&["A", "M", "Z"])[..]);
        assert_eq!(merged.matrix().values()[[0, 0]], a.matrix().values()[[1, 0]]);
    }

    #[test]
    fn merge_errors() {
        let a = dataset(&["A"], &["s1"], "b1");
        let b = dataset(&["B"], &["s2"], "b2");
        assert!(matches!(
            merge_on_common_genes(&[a.clone(), b]),
            Err(Error::NoCommonGenes)
        ));
        let c = dataset(&["A"], &["s1"], "b3");
        assert!(matches!(
            merge_on_common_genes(&[a.clone(), c]),
            Err(Error::DuplicateSample(_))
        ));
        let d = dataset(&["A"], &["s9"], "b1");
        assert!(matches!(merge_on_common_genes(&[a, d]), Err(Error::DuplicateBatch(_))));
    }

    #[test]
    fn write_then_read_round_trips() {
        let a = dataset(&["A", "B"], &["s1", "s2", "s3"], "bb");
        let m = a.matrix().with_values(a.matrix().values().mapv(|v| v / 3.0)).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf, MatrixFormat::Tsv).unwrap();
        let back = ExpressionMatrix::read(&buf[..], MatrixFormat::Tsv, false).unwrap();
        assert_eq!(back, m);

        let mut buf = Vec::new();
        write_metadata(&mut buf, a.metadata()).unwrap();
        assert_eq!(read_metadata(&buf[..]).unwrap(), a.metadata());
    }
}

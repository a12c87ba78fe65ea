use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DataError, Dataset};
use crate::nn::Tensor;

/// Reads a headed CSV with one example per row: `C·H·W` pixel columns then
/// the integer label. `classes` defaults to one past the largest label.
pub fn import_csv(path: &Path, dims: [usize; 3], classes: Option<usize>) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let per: usize = dims.iter().product();
    if per == 0 {
        return Err(DataError::InvalidSpec(format!("dims must be positive, got {dims:?}")));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(&bytes[..]);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| DataError::Csv(format!("line {line}: {e}")))?;
        if record.len() != per + 1 {
            return Err(DataError::Csv(format!(
                "line {line}: expected {} columns, found {}",
                per + 1,
                record.len()
            )));
        }
        for field in record.iter().take(per) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| DataError::Csv(format!("line {line}: {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(DataError::Csv(format!("line {line}: non-finite pixel")));
            }
            data.push(v);
        }
        let label = &record[per];
        labels.push(
            label
                .trim()
                .parse::<usize>()
                .map_err(|_| DataError::Csv(format!("line {line}: label {label:?} is not a class index")))?,
        );
    }
    if labels.is_empty() {
        return Err(DataError::Csv("no data rows".into()));
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let provenance = Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect();
    let images = Tensor::new(vec![labels.len(), dims[0], dims[1], dims[2]], data)?;
    Dataset::new(images, labels, classes, provenance)
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
    fn reads_rows() {
        let f = write("p0,p1,p2,p3,label\n0,0.5,1,0.25,1\n1,1,1,1,0\n");
        let d = import_csv(f.path(), [1, 2, 2], None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.classes(), 2);
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.example(0).data(), &[0.0, 0.5, 1.0, 0.25]);
    }

    #[test]
    fn reports_bad_rows() {
        let f = write("a,b,label\n0,1,x\n");
        let err = import_csv(f.path(), [1, 1, 2], None).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let f = write("a,b,label\n0,1\n");
        assert!(import_csv(f.path(), [1, 1, 2], None).is_err());
        let f = write("a,b,label\n0,1,5\n");
        assert!(import_csv(f.path(), [1, 1, 2], Some(3)).is_err());
    }
}

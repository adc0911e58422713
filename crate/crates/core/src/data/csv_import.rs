use std::io::Read;
use std::path::Path;

use ndarray::Array3;

use super::sequence::MotionSequence;
use crate::error::{Error, Result};

/// Reads one frame per row with `joints * dims` columns ordered joint-major.
/// A first row that does not parse as numbers is treated as a header.
pub fn csv_import(path: &Path, fps: u32, joints: usize, dims: usize) -> Result<MotionSequence> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv_import_reader(file, fps, joints, dims)
}

pub fn csv_import_reader<R: Read>(reader: R, fps: u32, joints: usize, dims: usize) -> Result<MotionSequence> {
    let width = joints * dims;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut frames = 0;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Csv {
            row,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f32, _>> = record.iter().map(str::parse::<f32>).collect();
        if i == 0 && parsed.iter().all(|p| p.is_err()) {
            continue;
        }
        if record.len() != width {
            return Err(Error::Csv {
                row,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (col, p) in parsed.into_iter().enumerate() {
            let v = p.map_err(|_| Error::Csv {
                row,
                message: format!("column {} is not numeric: {:?}", col + 1, &record[col]),
            })?;
            values.push(v);
        }
        frames += 1;
    }
    let coords =
        Array3::from_shape_vec((frames, joints, dims), values).map_err(|e| Error::InvalidSequence(e.to_string()))?;
    MotionSequence::new(coords, fps, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_frames_one_joint() {
        let seq = csv_import_reader("0,0,0\n1,0,0".as_bytes(), 25, 1, 3).unwrap();
        assert_eq!(seq.coords().dim(), (2, 1, 3));
        assert_eq!(seq.coords()[[1, 0, 0]], 1.0);
    }

    #[test]
    fn header_is_optional() {
        let text = "j0x,j0y,j1x,j1y\n1,2,3,4\n5,6,7,8\n";
        let seq = csv_import_reader(text.as_bytes(), 25, 2, 2).unwrap();
        assert_eq!(seq.frames(), 2);
        assert_eq!(seq.coords()[[1, 1, 0]], 7.0);
    }

    #[test]
    fn ragged_row_reports_row() {
        let err = csv_import_reader("0,0,0\n1,0\n".as_bytes(), 25, 1, 3).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 2, .. }), "{err}");
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let err = csv_import_reader("0,0,0\n1,x,0\n".as_bytes(), 25, 1, 3).unwrap_err();
        match err {
            Error::Csv { row, message } => {
                assert_eq!(row, 2);
                assert!(message.contains("column 2"));
            }
            other => panic!("{other:?}"),
        }
    }
}

use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};
use crate::gz2::{DecisionTree, NUM_ANSWERS};
use crate::tensor::{Real, Tensor};

/// Six significant digits, fixed notation.
fn format_value(v: f64) -> String {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let decimals = if v == 0.0 { 6 } else { (5 - v.log10().floor() as i32).max(6) as usize };
    format!("{v:.decimals$}")
}

/// Writes one `GalaxyID,Class1.1,...,Class11.6` row per id. Values are
/// clamped to [0, 1].
pub fn write_submission<T: Real, W: Write>(out: W, ids: &[String], preds: &Tensor<T>) -> Result<()> {
    if preds.shape() != [ids.len(), NUM_ANSWERS] {
        return Err(shape_err!("{} ids need predictions [{}, {NUM_ANSWERS}], got {:?}", ids.len(), ids.len(), preds.shape()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["GalaxyID".to_string()];
    header.extend(DecisionTree::gz2().column_names());
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(preds.data().chunks(NUM_ANSWERS)) {
        let mut record = vec![id.clone()];
        record.extend(row.iter().map(|v| format_value(v.as_f64())));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<submission>", e))
}

pub fn read_submission<R: Read>(input: R) -> Result<(Vec<String>, Tensor<f32>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let mut expected = vec!["GalaxyID".to_string()];
    expected.extend(DecisionTree::gz2().column_names());
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Schema("submission header does not match the 37 answer columns".into()));
    }
    let (mut ids, mut values) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        for field in rec.iter().skip(1) {
            let v = field
                .parse::<f32>()
                .map_err(|_| Error::Schema(format!("row {}: bad value {field:?}", line + 2)))?;
            values.push(v);
        }
    }
    let n = ids.len();
    if n == 0 {
        return Err(Error::Schema("submission has no rows".into()));
    }
    Ok((ids, Tensor::new(vec![n, NUM_ANSWERS], values)?))
}

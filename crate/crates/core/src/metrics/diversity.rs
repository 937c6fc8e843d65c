use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::schema::TokenTable;

fn distinct(table: &TokenTable, j: usize) -> BTreeSet<u32> {
    (0..table.n_rows()).filter_map(|i| table.get(i, j)).collect()
}

/// Mean over fields of the share of real distinct values that also appear
/// in the synthetic table.
pub fn diversity(synth: &TokenTable, real: &TokenTable) -> Result<f64> {
    let l = real.n_fields();
    if synth.n_fields() != l {
        return Err(Error::Shape(format!("{} fields against {l}", synth.n_fields())));
    }
    let mut total = 0.0;
    let mut counted = 0;
    for j in 0..l {
        let r = distinct(real, j);
        if r.is_empty() {
            continue;
        }
        let s = distinct(synth, j);
        total += r.intersection(&s).count() as f64 / r.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::invalid("real table has no observed values"));
    }
    Ok(total / counted as f64)
}

//! Count-matrix ingestion and the on-disk matrix cache.
//!
//! Input is a CSV with header `user,item,count`. Cells absent from the file
//! are zero counts, values are `log(1 + count)`, and the cells are split into
//! equal-sized train and held-out halves by a seeded shuffle.
//!
//! The cache is a dense CSV (`user,<item>,...`) plus a sidecar of the same
//! shape whose entries are `1` for train, `2` for held-out and `0` otherwise.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{LcviError, Result};
use crate::models::MatrixData;
use crate::reparam::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub data: MatrixData<f64>,
}

fn parse_err(line: usize, message: impl Into<String>) -> LcviError {
    LcviError::Parse {
        line,
        message: message.into(),
    }
}

/// Reads `user,item,count` triples, keeps the `top_items` items with the
/// largest total count (ties broken by item id) and splits the cells 50/50.
pub fn ingest_count_matrix_str(text: &str, top_items: Option<usize>, seed: u64) -> Result<LabeledMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut counts: HashMap<(String, String), u64> = HashMap::new();
    let mut seen_header = false;
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 1;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if !seen_header {
            seen_header = true;
            let fields: Vec<&str> = rec.iter().collect();
            if fields != ["user", "item", "count"] {
                return Err(parse_err(line, "expected header `user,item,count`"));
            }
            continue;
        }
        if rec.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, found {}", rec.len())));
        }
        let (user, item, raw) = (&rec[0], &rec[1], &rec[2]);
        if user.is_empty() || item.is_empty() {
            return Err(parse_err(line, "empty user or item id"));
        }
        let count: i64 = raw
            .parse()
            .map_err(|_| parse_err(line, format!("count `{raw}` is not an integer")))?;
        if count < 0 {
            return Err(parse_err(line, format!("negative count {count}")));
        }
        let key = (user.to_string(), item.to_string());
        if counts.contains_key(&key) {
            return Err(parse_err(line, format!("duplicate pair (user `{user}`, item `{item}`)")));
        }
        counts.insert(key, count as u64);
    }
    if !seen_header {
        return Err(parse_err(1, "empty file"));
    }
    if counts.is_empty() {
        return Err(LcviError::Empty("count triples"));
    }

    let users: Vec<String> = counts.keys().map(|(u, _)| u.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
    for ((_, item), c) in &counts {
        *totals.entry(item.as_str()).or_default() += c;
    }
    let mut ranked: Vec<(&str, u64)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if let Some(n) = top_items {
        if n == 0 {
            return Err(LcviError::InvalidParameter("top_items must be at least 1".into()));
        }
        ranked.truncate(n);
    }
    let mut items: Vec<String> = ranked.into_iter().map(|(i, _)| i.to_string()).collect();
    items.sort();

    let (n, m) = (users.len(), items.len());
    let item_index: HashMap<&str, usize> = items.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    let user_index: HashMap<&str, usize> = users.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut values = vec![0.0; n * m];
    for ((u, it), &c) in &counts {
        if let Some(&j) = item_index.get(it.as_str()) {
            values[user_index[u.as_str()] * m + j] = (c as f64).ln_1p();
        }
    }

    let mut order: Vec<usize> = (0..n * m).collect();
    RngState::seed(seed).shuffle(&mut order);
    let mut mask = vec![false; n * m];
    for &cell in &order[..(n * m).div_ceil(2)] {
        mask[cell] = true;
    }
    let test_mask = mask.iter().map(|b| !b).collect();
    Ok(LabeledMatrix {
        users,
        items,
        data: MatrixData::new(n, m, values, mask, test_mask)?,
    })
}

pub fn ingest_count_matrix(path: impl AsRef<Path>, top_items: Option<usize>, seed: u64) -> Result<LabeledMatrix> {
    let text = std::fs::read_to_string(path)?;
    ingest_count_matrix_str(&text, top_items, seed)
}

/// `data.csv` → `data.mask.csv`.
pub fn mask_sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.mask.csv"))
}

fn dense_csv(header_note: &str, m: &LabeledMatrix, cell: impl Fn(usize) -> String) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {header_note}");
    out.push_str("user");
    for it in &m.items {
        out.push(',');
        out.push_str(it);
    }
    out.push('\n');
    let cols = m.items.len();
    for (i, u) in m.users.iter().enumerate() {
        out.push_str(u);
        for j in 0..cols {
            out.push(',');
            out.push_str(&cell(i * cols + j));
        }
        out.push('\n');
    }
    out
}

/// Writes the value CSV at `path` and the mask sidecar next to it. `note` is
/// recorded as a leading `#` comment in both files.
pub fn write_matrix_cache(path: impl AsRef<Path>, matrix: &LabeledMatrix, note: &str) -> Result<()> {
    let path = path.as_ref();
    let d = &matrix.data;
    std::fs::write(path, dense_csv(note, matrix, |c| format!("{}", d.values[c])))?;
    let mask = dense_csv(note, matrix, |c| {
        if d.mask[c] {
            "1".into()
        } else if d.test_mask[c] {
            "2".into()
        } else {
            "0".into()
        }
    });
    std::fs::write(mask_sidecar_path(path), mask)?;
    Ok(())
}

fn read_dense(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("user") {
        return Err(parse_err(hline + 1, "header must start with `user`"));
    }
    let items: Vec<String> = cols.map(str::to_string).collect();
    let mut users = Vec::new();
    let mut cells = Vec::new();
    for (idx, line) in lines {
        let mut f = line.split(',');
        users.push(f.next().unwrap_or_default().to_string());
        let row: Vec<String> = f.map(str::to_string).collect();
        if row.len() != items.len() {
            return Err(parse_err(
                idx + 1,
                format!("expected {} cells, found {}", items.len(), row.len()),
            ));
        }
        cells.extend(row);
    }
    Ok((users, items, cells))
}

pub fn read_matrix_cache(path: impl AsRef<Path>) -> Result<LabeledMatrix> {
    let path = path.as_ref();
    let (users, items, raw) = read_dense(path)?;
    let (mu, mi, mraw) = read_dense(&mask_sidecar_path(path))?;
    if mu != users || mi != items {
        return Err(LcviError::InvalidParameter("mask sidecar labels differ from the value file".into()));
    }
    let values = raw
        .iter()
        .map(|s| s.parse::<f64>().map_err(|_| LcviError::InvalidParameter(format!("bad cell value `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let mut mask = Vec::with_capacity(mraw.len());
    let mut test_mask = Vec::with_capacity(mraw.len());
    for s in &mraw {
        let (a, b) = match s.as_str() {
            "0" => (false, false),
            "1" => (true, false),
            "2" => (false, true),
            other => return Err(LcviError::InvalidParameter(format!("bad mask entry `{other}`"))),
        };
        mask.push(a);
        test_mask.push(b);
    }
    let data = MatrixData::new(users.len(), items.len(), values, mask, test_mask)?;
    Ok(LabeledMatrix { users, items, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "user,item,count\nu1,a,9\nu1,b,0\nu2,b,3\nu3,c,1\n";

    #[test]
    fn log1p_values_and_zero_fill() {
        let m = ingest_count_matrix_str(SAMPLE, None, 0).unwrap();
        assert_eq!(m.users, ["u1", "u2", "u3"]);
        assert_eq!(m.items, ["a", "b", "c"]);
        assert!((m.data.get(0, 0) - 10f64.ln()).abs() < 1e-15);
        assert!((m.data.get(0, 0) - 2.3026).abs() < 1e-4);
        assert_eq!(m.data.get(0, 1), 0.0);
        assert_eq!(m.data.get(1, 0), 0.0);
        assert_eq!(m.data.get(1, 1), 4f64.ln());
    }

    #[test]
    fn split_is_even_and_seeded() {
        let m = ingest_count_matrix_str(SAMPLE, None, 3).unwrap();
        assert_eq!(m.data.n_train() + m.data.n_test(), 9);
        assert_eq!(m.data.n_train(), 5);
        assert_eq!(m, ingest_count_matrix_str(SAMPLE, None, 3).unwrap());
    }

    #[test]
    fn top_items_keeps_largest_totals() {
        let m = ingest_count_matrix_str(SAMPLE, Some(2), 0).unwrap();
        assert_eq!(m.items, ["a", "b"]);
        assert_eq!(m.users.len(), 3);
        assert!(m.data.values[2 * 2..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn errors_name_the_line_or_pair() {
        let neg = "user,item,count\nu1,a,2\nu1,b,-1\n";
        match ingest_count_matrix_str(neg, None, 0) {
            Err(LcviError::Parse { line: 3, message }) => assert!(message.contains("negative")),
            other => panic!("unexpected {other:?}"),
        }
        let bad = "user,item,count\nu1,a\n";
        assert!(matches!(ingest_count_matrix_str(bad, None, 0), Err(LcviError::Parse { line: 2, .. })));
        let frac = "user,item,count\nu1,a,1.5\n";
        assert!(matches!(ingest_count_matrix_str(frac, None, 0), Err(LcviError::Parse { line: 2, .. })));
        let dup = "user,item,count\nu1,a,1\nu2,a,1\nu1,a,4\n";
        match ingest_count_matrix_str(dup, None, 0) {
            Err(LcviError::Parse { line: 4, message }) => {
                assert!(message.contains("u1") && message.contains("`a`"), "{message}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cache_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = ingest_count_matrix_str(SAMPLE, None, 11).unwrap();
        write_matrix_cache(&path, &m, "test").unwrap();
        assert!(mask_sidecar_path(&path).ends_with("m.mask.csv"));
        assert_eq!(read_matrix_cache(&path).unwrap(), m);
    }
}

use crate::error::{Error, Result};

/// Operation counts of one minimal alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditOps {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }
}

/// Unit-cost Levenshtein distance over Unicode scalar values.
pub fn edit_distance(reference: &str, hypothesis: &str) -> usize {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0; h.len() + 1];
    for (i, rc) in r.iter().enumerate() {
        cur[0] = i + 1;
        for (j, hc) in h.iter().enumerate() {
            let sub = prev[j] + usize::from(rc != hc);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[h.len()]
}

/// Insertions, deletions and substitutions turning `reference` into
/// `hypothesis`, read back from the full table.
pub fn edit_ops(reference: &str, hypothesis: &str) -> EditOps {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                ops.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    ops
}

/// Character error rate `(i + d + s) / M`, `M` the reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let m = reference.chars().count();
    if m == 0 {
        return Err(Error::invalid("character error rate of an empty reference is undefined"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / m as f64)
}

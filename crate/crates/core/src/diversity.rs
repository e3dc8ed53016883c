//! Maximum-diversity selection of knowledge entries: cosine dissimilarity,
//! an exact solver for small candidate sets, a greedy solver for the rest,
//! and assembly of the per-code static knowledge matrices.

use alloc::collections::BTreeMap;
use alloc::string::String;
#[cfg(test)]
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::knowledge::{KnowledgeBase, KnowledgeEntry};
use crate::tensor::{cosine, Tensor};

/// Candidate counts up to this go through the exact solver.
pub const EXACT_SOLVER_CAP: usize = 16;

/// Cosine distance `1 - cos(a, b)`, in `[0, 2]`.
///
/// Zero-norm vectors are a hard error: they indicate an upstream encoder bug.
pub fn dissimilarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(a, b)?)
}

/// Symmetric pairwise dissimilarity matrix over candidate embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseDissimilarity {
    n: usize,
    data: Vec<f64>,
}

impl PairwiseDissimilarity {
    pub fn from_embeddings(embeddings: &[Vec<f64>]) -> Result<Self> {
        let n = embeddings.len();
        if n > 0 {
            let d = embeddings[0].len();
            for (i, e) in embeddings.iter().enumerate() {
                if e.len() != d {
                    return Err(CoreError::DimensionMismatch { expected: d, got: e.len() });
                }
                if e.iter().all(|v| *v == 0.0) {
                    return Err(CoreError::ZeroNormEmbedding(i));
                }
            }
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = dissimilarity(&embeddings[i], &embeddings[j])?;
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Ok(PairwiseDissimilarity { n, data })
    }

    /// Wrap an explicit matrix; must be square and symmetric.
    pub fn from_matrix(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(CoreError::BadDissimilarityMatrix);
        }
        for i in 0..n {
            for j in 0..n {
                if (data[i * n + j] - data[j * n + i]).abs() > 1e-12 {
                    return Err(CoreError::BadDissimilarityMatrix);
                }
            }
        }
        Ok(PairwiseDissimilarity { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Total pairwise dissimilarity of a subset.
pub fn subset_objective(d: &PairwiseDissimilarity, subset: &[usize]) -> f64 {
    let mut total = 0.0;
    for (k, &i) in subset.iter().enumerate() {
        for &j in &subset[k + 1..] {
            total += d.at(i, j);
        }
    }
    total
}

/// Exhaustive maximum-diversity solver.
///
/// Enumerates size-`min(m, n)` subsets in lexicographic order and keeps the
/// strictly best objective, so ties resolve to the lexicographically
/// smallest index set. Candidate counts above [`EXACT_SOLVER_CAP`] are
/// rejected; callers fall back to [`solve_mdp_greedy`].
pub fn solve_mdp_exact(d: &PairwiseDissimilarity, m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(CoreError::BadSubsetSize);
    }
    let n = d.n();
    if n > EXACT_SOLVER_CAP {
        return Err(CoreError::ExactSolverCap { n, cap: EXACT_SOLVER_CAP });
    }
    let k = m.min(n);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut indices: Vec<usize> = (0..k).collect();
    let mut best = indices.clone();
    let mut best_obj = subset_objective(d, &indices);
    while next_combination(&mut indices, n) {
        let obj = subset_objective(d, &indices);
        if obj > best_obj + 0.0 && obj > best_obj {
            best_obj = obj;
            best = indices.clone();
        }
    }
    Ok(best)
}

/// Advance `indices` to the next size-k combination of `0..n` in
/// lexicographic order; false when exhausted.
fn next_combination(indices: &mut [usize], n: usize) -> bool {
    let k = indices.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    loop {
        if i == 0 {
            return false;
        }
        i -= 1;
        if indices[i] != i + n - k {
            break;
        }
    }
    indices[i] += 1;
    for j in i + 1..k {
        indices[j] = indices[j - 1] + 1;
    }
    true
}

/// Greedy maximum-diversity heuristic.
///
/// Seeds with the maximum-dissimilarity pair (index 0 when only one item is
/// requested), then repeatedly adds the index with the largest summed
/// dissimilarity to the current set. All ties break to the lowest index.
pub fn solve_mdp_greedy(d: &PairwiseDissimilarity, m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(CoreError::BadSubsetSize);
    }
    let n = d.n();
    let k = m.min(n);
    if k == 0 {
        return Ok(Vec::new());
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    let mut selected = {
        let (mut bi, mut bj, mut bv) = (0, 1, f64::NEG_INFINITY);
        for i in 0..n {
            for j in (i + 1)..n {
                if d.at(i, j) > bv {
                    bv = d.at(i, j);
                    bi = i;
                    bj = j;
                }
            }
        }
        vec![bi, bj]
    };
    while selected.len() < k {
        let mut best_idx = usize::MAX;
        let mut best_gain = f64::NEG_INFINITY;
        for cand in 0..n {
            if selected.contains(&cand) {
                continue;
            }
            let gain: f64 = selected.iter().map(|&s| d.at(cand, s)).sum();
            if gain > best_gain {
                best_gain = gain;
                best_idx = cand;
            }
        }
        selected.push(best_idx);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Pick the per-code subset: exact when small enough, greedy otherwise.
pub fn select_diverse(d: &PairwiseDissimilarity, m: usize, exact_cap: usize) -> Result<Vec<usize>> {
    if d.n() <= exact_cap.min(EXACT_SOLVER_CAP) {
        solve_mdp_exact(d, m)
    } else {
        solve_mdp_greedy(d, m)
    }
}

/// The static knowledge matrix of one code: the selected entries, their
/// embeddings stacked to exactly `m` rows (cyclic repetition when fewer
/// entries exist), and the average-pooled vector of the stacked rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeMatrix {
    pub entries: Vec<KnowledgeEntry>,
    /// Row `r` holds the embedding of `entries[r % entries.len()]`.
    pub matrix: Tensor,
    pub avg: Vec<f64>,
}

impl KnowledgeMatrix {
    pub fn m(&self) -> usize {
        self.matrix.rows()
    }

    /// The entry backing stacked row `r`.
    pub fn entry_for_row(&self, r: usize) -> &KnowledgeEntry {
        &self.entries[r % self.entries.len()]
    }
}

/// All per-code knowledge matrices plus the config hash they were built under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeMatrixSet {
    pub m: usize,
    pub d: usize,
    pub config_hash: String,
    pub per_code: BTreeMap<String, KnowledgeMatrix>,
}

impl KnowledgeMatrixSet {
    pub fn get(&self, code: &str) -> Option<&KnowledgeMatrix> {
        self.per_code.get(code)
    }
}

/// Embed every candidate of every code and select the `m` most mutually
/// diverse entries per code.
///
/// `embed` maps an entry to its pooled sentence vector; failures carry the
/// offending entry text. Selection runs per code independently.
pub fn build_knowledge_matrices<F>(
    kb: &KnowledgeBase,
    mut embed: F,
    m: usize,
    exact_cap: usize,
    config_hash: String,
) -> Result<KnowledgeMatrixSet>
where
    F: FnMut(&KnowledgeEntry) -> Result<Vec<f64>>,
{
    if m == 0 {
        return Err(CoreError::BadSubsetSize);
    }
    let mut per_code = BTreeMap::new();
    let mut dim = 0;
    for code in kb.codes() {
        let candidates = kb.entries_for(code);
        if candidates.is_empty() {
            return Err(CoreError::MissingKnowledge(code.clone()));
        }
        let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
        for entry in candidates {
            let v = embed(entry).map_err(|e| CoreError::BadConfig(alloc::format!(
                "failed to embed knowledge entry {:?}: {}",
                entry.text,
                e
            )))?;
            embeddings.push(v);
        }
        dim = embeddings[0].len();
        let d = PairwiseDissimilarity::from_embeddings(&embeddings)?;
        let picked = select_diverse(&d, m, exact_cap)?;
        let entries: Vec<KnowledgeEntry> = picked.iter().map(|&i| candidates[i].clone()).collect();
        let mut matrix = Tensor::zeros(&[m, dim]);
        for r in 0..m {
            let src = &embeddings[picked[r % picked.len()]];
            matrix.row_mut(r).copy_from_slice(src);
        }
        let mut avg = vec![0.0; dim];
        for r in 0..m {
            for (a, v) in avg.iter_mut().zip(matrix.row(r)) {
                *a += v / m as f64;
            }
        }
        per_code.insert(code.clone(), KnowledgeMatrix { entries, matrix, avg });
    }
    Ok(KnowledgeMatrixSet { m, d: dim, config_hash, per_code })
}

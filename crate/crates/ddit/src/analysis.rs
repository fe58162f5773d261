//! HSIC/CKA representation-similarity analysis over per-block features.
//!
//! Feature rows are token instances (N·T rows per block), which keeps the
//! Gram matrices well-conditioned at small batch sizes. The default kernel
//! is RBF with the median heuristic; the linear kernel's invariances
//! (orthogonal transforms, isotropic scaling) are exact and carry the
//! invariance test suite.

use crate::config::RunConfig;
use crate::container::{write_container, Container};
use crate::error::{Error, Result};
use crate::tensor::{Rng, TensorValue};
use std::io::Write as _;
use std::path::Path;

/// Rng stream id for row subsampling.
const SUBSAMPLE_STREAM: u64 = 0xC0DE;

/// `n` samples × `p` dimensions, row-major.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dims: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dims: usize, data: Vec<f64>) -> Result<FeatureMatrix> {
        if rows < 2 {
            return Err(Error::InvalidArgument(
                "feature matrix needs n ≥ 2 rows".into(),
            ));
        }
        if data.len() != rows * dims {
            return Err(Error::ShapeMismatch {
                op: "feature_matrix",
                details: format!("{rows}×{dims} vs {} values", data.len()),
            });
        }
        Ok(FeatureMatrix { rows, dims, data })
    }

    /// Flattens a `[n,t,d]` block-feature tensor into `(n·t) × d` rows.
    pub fn from_block(features: &TensorValue) -> Result<FeatureMatrix> {
        let s = features.shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "feature_matrix",
                details: format!("expected [n,t,d], got {s:?}"),
            });
        }
        FeatureMatrix::new(s[0] * s[1], s[2], features.data().to_vec())
    }

    /// Row subset, preserving order of `indices`.
    pub fn select_rows(&self, indices: &[usize]) -> Result<FeatureMatrix> {
        let mut data = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(&self.data[i * self.dims..(i + 1) * self.dims]);
        }
        FeatureMatrix::new(indices.len(), self.dims, data)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind {
    Linear,
    /// RBF with the median heuristic: bandwidth = median nonzero pairwise
    /// distance.
    Rbf,
    Polynomial { degree: u32 },
}

impl KernelKind {
    pub fn describe(&self) -> String {
        match self {
            KernelKind::Linear => "linear".to_string(),
            KernelKind::Rbf => "rbf{median}".to_string(),
            KernelKind::Polynomial { degree } => format!("polynomial{{{degree}}}"),
        }
    }

    pub fn parse(name: &str) -> Result<KernelKind> {
        match name {
            "linear" => Ok(KernelKind::Linear),
            "rbf" => Ok(KernelKind::Rbf),
            "polynomial" => Ok(KernelKind::Polynomial { degree: 2 }),
            other => Err(Error::InvalidArgument(format!(
                "unknown kernel {other:?} (expected linear|rbf|polynomial)"
            ))),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gram matrix `K_ij = k(x_i, x_j)`.
pub fn gram(features: &FeatureMatrix, kernel: &KernelKind) -> Result<Vec<f64>> {
    let n = features.rows;
    let mut k = vec![0.0; n * n];
    match kernel {
        KernelKind::Linear => {
            for i in 0..n {
                for j in i..n {
                    let v = dot(features.row(i), features.row(j));
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                }
            }
        }
        KernelKind::Polynomial { degree } => {
            for i in 0..n {
                for j in i..n {
                    let v = (1.0 + dot(features.row(i), features.row(j))).powi(*degree as i32);
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                }
            }
        }
        KernelKind::Rbf => {
            let mut dists = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in i + 1..n {
                    let d = sq_dist(features.row(i), features.row(j)).sqrt();
                    if d > 0.0 {
                        dists.push(d);
                    }
                }
            }
            if dists.is_empty() {
                return Err(Error::Numeric(
                    "rbf bandwidth undefined: all rows identical".into(),
                ));
            }
            dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let mid = dists.len() / 2;
            let sigma = if dists.len() % 2 == 1 {
                dists[mid]
            } else {
                0.5 * (dists[mid - 1] + dists[mid])
            };
            let denom = 2.0 * sigma * sigma;
            for i in 0..n {
                for j in i..n {
                    let v = (-sq_dist(features.row(i), features.row(j)) / denom).exp();
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                }
            }
        }
    }
    Ok(k)
}

/// `HSIC(K, L) = Tr(K H L H) / (n−1)²` with `H = I − 11ᵀ/n`, computed via
/// double-centering of K.
pub fn hsic(k: &[f64], l: &[f64], n: usize) -> Result<f64> {
    if n < 2 || k.len() != n * n || l.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "hsic",
            details: format!("need two n×n Grams with n ≥ 2, got {} and {}", k.len(), l.len()),
        });
    }
    let mut row_mean = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += k[i * n + j];
        }
        row_mean[i] = s / n as f64;
        total += s;
    }
    let grand = total / (n * n) as f64;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let centered = k[i * n + j] - row_mean[i] - row_mean[j] + grand;
            acc += centered * l[i * n + j];
        }
    }
    Ok(acc / ((n - 1) * (n - 1)) as f64)
}

/// `CKA(X,Y) = HSIC(x,y) / √(HSIC(x,x)·HSIC(y,y))`.
pub fn cka(x: &FeatureMatrix, y: &FeatureMatrix, kernel: &KernelKind) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::ShapeMismatch {
            op: "cka",
            details: format!("{} vs {} rows", x.rows, y.rows),
        });
    }
    let kx = gram(x, kernel)?;
    let ky = gram(y, kernel)?;
    let cross = hsic(&kx, &ky, x.rows)?;
    let sx = hsic(&kx, &kx, x.rows)?;
    let sy = hsic(&ky, &ky, x.rows)?;
    if sx <= 0.0 || sy <= 0.0 {
        return Err(Error::Numeric(
            "cka undefined: zero self-HSIC (constant features)".into(),
        ));
    }
    Ok(cross / (sx * sy).sqrt())
}

/// L×L block-similarity matrix with metadata.
#[derive(Debug, Clone)]
pub struct CkaMatrix {
    pub size: usize,
    /// Row-major L×L values.
    pub values: Vec<f64>,
    pub kernel: String,
    pub step: u64,
    pub timestep: f64,
    pub batch: usize,
}

impl CkaMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

/// Pairwise CKA over all block pairs. Rows are subsampled once (seeded,
/// identical subset for every block, so pairs stay row-aligned) down to
/// `max_rows` before Gram construction.
pub fn similarity_matrix(
    features: &[TensorValue],
    kernel: &KernelKind,
    max_rows: usize,
    subsample_seed: u64,
    step: u64,
    timestep: f64,
) -> Result<CkaMatrix> {
    let l = features.len();
    if l < 2 {
        return Err(Error::InvalidArgument(
            "similarity matrix needs at least two blocks".into(),
        ));
    }
    let full: Vec<FeatureMatrix> = features
        .iter()
        .map(FeatureMatrix::from_block)
        .collect::<Result<_>>()?;
    let rows = full[0].rows;
    let mats: Vec<FeatureMatrix> = if rows > max_rows {
        let picks =
            Rng::with_stream(subsample_seed, SUBSAMPLE_STREAM).choose_indices(rows, max_rows);
        full.iter()
            .map(|m| m.select_rows(&picks))
            .collect::<Result<_>>()?
    } else {
        full
    };
    let mut values = vec![0.0; l * l];
    for i in 0..l {
        values[i * l + i] = cka(&mats[i], &mats[i], kernel)?;
        for j in i + 1..l {
            let v = cka(&mats[i], &mats[j], kernel)?;
            values[i * l + j] = v;
            values[j * l + i] = v;
        }
    }
    Ok(CkaMatrix {
        size: l,
        values,
        kernel: kernel.describe(),
        step,
        timestep,
        batch: mats[0].rows,
    })
}

/// Mean of the strict upper triangle: the scalar cross-block similarity.
pub fn diversity_summary(m: &CkaMatrix) -> Result<f64> {
    if m.size < 2 {
        return Err(Error::InvalidArgument(
            "diversity summary needs L ≥ 2".into(),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..m.size {
        for j in i + 1..m.size {
            sum += m.at(i, j);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// CSV export: header row `,b0,b1,…`, then `bi,v,…` rows, 10 significant
/// digits.
pub fn matrix_to_csv(m: &CkaMatrix) -> String {
    let mut out = String::new();
    for j in 0..m.size {
        out.push_str(&format!(",b{j}"));
    }
    out.push('\n');
    for i in 0..m.size {
        out.push_str(&format!("b{i}"));
        for j in 0..m.size {
            out.push_str(&format!(",{:.9e}", m.at(i, j)));
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, m: &CkaMatrix) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(matrix_to_csv(m).as_bytes())?;
    file.flush()?;
    Ok(())
}

/// Feature dump: tensors `block_00..block_{L−1}` plus the capture step and
/// timestep in the manifest.
pub fn write_feature_dump(
    path: &Path,
    run_cfg: &RunConfig,
    features: &[TensorValue],
    step: u64,
    t: f64,
) -> Result<()> {
    let named: Vec<(String, &TensorValue)> = features
        .iter()
        .enumerate()
        .map(|(i, f)| (format!("block_{i:02}"), f))
        .collect();
    write_container(path, run_cfg, step, &Rng::new(0).to_hex(), Some(t), &named)
}

/// Reads back a feature dump written by [`write_feature_dump`].
pub fn read_feature_dump(path: &Path) -> Result<(Vec<TensorValue>, u64, Option<f64>)> {
    let c = Container::read(path)?;
    let mut names: Vec<String> = c
        .tensor_names()
        .into_iter()
        .filter(|n| n.starts_with("block_"))
        .map(|n| n.to_string())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::MissingTensor("block_00".into()));
    }
    let features = names
        .iter()
        .map(|n| c.tensor(n))
        .collect::<Result<Vec<_>>>()?;
    Ok((features, c.manifest.step, c.manifest.t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: usize, dims: usize, seed: u64) -> FeatureMatrix {
        let mut rng = Rng::new(seed);
        FeatureMatrix::new(rows, dims, rng.fill_uniform(rows * dims, -2.0, 2.0)).unwrap()
    }

    // ── gram ─────────────────────────────────────────────────────────────────

    #[test]
    fn linear_gram_on_orthonormal_rows_is_identity() {
        let x = FeatureMatrix::new(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let k = gram(&x, &KernelKind::Linear).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(k[i * 3 + j], want);
            }
        }
    }

    #[test]
    fn rbf_gram_diagonal_is_one() {
        let x = fm(5, 3, 1);
        let k = gram(&x, &KernelKind::Rbf).unwrap();
        for i in 0..5 {
            assert!((k[i * 5 + i] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gram_matches_brute_force_double_loop() {
        let x = fm(3, 2, 2);
        let k = gram(&x, &KernelKind::Linear).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut want = 0.0;
                for d in 0..2 {
                    want += x.data[i * 2 + d] * x.data[j * 2 + d];
                }
                assert!((k[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rbf_on_identical_rows_is_error() {
        let x = FeatureMatrix::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!(gram(&x, &KernelKind::Rbf).is_err());
    }

    // ── hsic ─────────────────────────────────────────────────────────────────

    /// Expanded brute-force definition:
    /// `Tr(KHLH) = ΣᵢⱼKᵢⱼLᵢⱼ − (2/n)ΣᵢⱼₖKᵢⱼLᵢₖ + (1/n²)(ΣK)(ΣL)`, all sums
    /// evaluated as literal loops.
    fn hsic_oracle(k: &[f64], l: &[f64], n: usize) -> f64 {
        let mut term1 = 0.0;
        for i in 0..n {
            for j in 0..n {
                term1 += k[i * n + j] * l[i * n + j];
            }
        }
        let mut term2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for m in 0..n {
                    term2 += k[i * n + j] * l[i * n + m];
                }
            }
        }
        let sk: f64 = k.iter().sum();
        let sl: f64 = l.iter().sum();
        (term1 - 2.0 / n as f64 * term2 + sk * sl / (n * n) as f64)
            / ((n - 1) * (n - 1)) as f64
    }

    #[test]
    fn hsic_of_constant_gram_is_zero() {
        let k = vec![3.7; 16];
        let l: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let v = hsic(&k, &l, 4).unwrap();
        assert!(v.abs() < 1e-12, "centering must annihilate constants: {v}");
    }

    #[test]
    fn self_hsic_is_nonnegative() {
        for seed in 0..10 {
            let x = fm(6, 3, seed);
            let k = gram(&x, &KernelKind::Linear).unwrap();
            let v = hsic(&k, &k, 6).unwrap();
            assert!(v >= -1e-12, "seed {seed}: {v}");
        }
    }

    #[test]
    fn hsic_matches_expanded_brute_force() {
        for (n, d, seed) in [(4usize, 3usize, 11u64), (8, 5, 12)] {
            let x = fm(n, d, seed);
            let y = fm(n, d, seed + 100);
            let kx = gram(&x, &KernelKind::Linear).unwrap();
            let ky = gram(&y, &KernelKind::Linear).unwrap();
            let got = hsic(&kx, &ky, n).unwrap();
            let want = hsic_oracle(&kx, &ky, n);
            assert!(
                (got - want).abs() < 1e-10,
                "n={n}: matrix {got} vs brute force {want}"
            );
        }
    }

    // ── cka ──────────────────────────────────────────────────────────────────

    #[test]
    fn cka_self_is_one() {
        let x = fm(8, 4, 20);
        for kernel in [KernelKind::Linear, KernelKind::Rbf] {
            let v = cka(&x, &x, &kernel).unwrap();
            assert!((v - 1.0).abs() < 1e-10, "{kernel:?}: {v}");
        }
    }

    /// Random orthogonal matrix via Gram-Schmidt on a random square matrix.
    fn random_orthogonal(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        let mut cols: Vec<Vec<f64>> = (0..d).map(|_| rng.fill_normal(d)).collect();
        for i in 0..d {
            for j in 0..i {
                let proj: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let prev = cols[j].clone();
                for (a, b) in cols[i].iter_mut().zip(prev) {
                    *a -= proj * b;
                }
            }
            let norm: f64 = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for a in cols[i].iter_mut() {
                *a /= norm;
            }
        }
        let mut q = vec![0.0; d * d];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..d {
                q[i * d + j] = col[i];
            }
        }
        q
    }

    fn matmul_rows(x: &FeatureMatrix, q: &[f64]) -> FeatureMatrix {
        let d = x.dims;
        let mut out = vec![0.0; x.rows * d];
        for r in 0..x.rows {
            for j in 0..d {
                let mut s = 0.0;
                for i in 0..d {
                    s += x.data[r * d + i] * q[i * d + j];
                }
                out[r * d + j] = s;
            }
        }
        FeatureMatrix::new(x.rows, d, out).unwrap()
    }

    #[test]
    fn linear_cka_invariant_to_orthogonal_transform() {
        let x = fm(10, 4, 30);
        let y = fm(10, 4, 31);
        let q = random_orthogonal(4, 32);
        let base = cka(&x, &y, &KernelKind::Linear).unwrap();
        let rotated = cka(&matmul_rows(&x, &q), &y, &KernelKind::Linear).unwrap();
        assert!((base - rotated).abs() < 1e-8, "{base} vs {rotated}");
    }

    #[test]
    fn linear_cka_invariant_to_isotropic_scaling() {
        let x = fm(10, 4, 33);
        let y = fm(10, 4, 34);
        let scaled = FeatureMatrix::new(10, 4, x.data.iter().map(|v| 3.7 * v).collect()).unwrap();
        let base = cka(&x, &y, &KernelKind::Linear).unwrap();
        let after = cka(&scaled, &y, &KernelKind::Linear).unwrap();
        assert!((base - after).abs() < 1e-8);
    }

    #[test]
    fn rbf_cka_median_heuristic_scale_invariance() {
        let x = fm(10, 4, 35);
        let y = fm(10, 4, 36);
        let sx = FeatureMatrix::new(10, 4, x.data.iter().map(|v| 5.1 * v).collect()).unwrap();
        let sy = FeatureMatrix::new(10, 4, y.data.iter().map(|v| 5.1 * v).collect()).unwrap();
        let base = cka(&x, &y, &KernelKind::Rbf).unwrap();
        let after = cka(&sx, &sy, &KernelKind::Rbf).unwrap();
        assert!((base - after).abs() < 1e-8, "{base} vs {after}");
    }

    #[test]
    fn cka_rejects_constant_features() {
        let x = FeatureMatrix::new(4, 2, vec![1.0; 8]).unwrap();
        let y = fm(4, 2, 40);
        assert!(cka(&x, &y, &KernelKind::Linear).is_err());
    }

    #[test]
    fn cka_bounded_above_by_one() {
        for seed in 0..20 {
            let x = fm(8, 3, 500 + seed);
            let y = fm(8, 5, 600 + seed);
            for kernel in [KernelKind::Linear, KernelKind::Rbf] {
                let v = cka(&x, &y, &kernel).unwrap();
                assert!(v <= 1.0 + 1e-10, "seed {seed} {kernel:?}: {v}");
                assert!(v >= -1e-10, "seed {seed} {kernel:?}: {v}");
            }
        }
    }

    // ── similarity matrix ────────────────────────────────────────────────────

    fn block_stack(l: usize, seed: u64) -> Vec<TensorValue> {
        let mut rng = Rng::new(seed);
        (0..l)
            .map(|_| TensorValue::randn(vec![4, 3, 5], &mut rng))
            .collect()
    }

    #[test]
    fn duplicated_stack_gives_all_ones() {
        let mut rng = Rng::new(50);
        let block = TensorValue::randn(vec![4, 3, 5], &mut rng);
        let stack = vec![block.clone(), block.clone(), block];
        let m = similarity_matrix(&stack, &KernelKind::Linear, 512, 0, 0, 0.5).unwrap();
        for v in &m.values {
            assert!((v - 1.0).abs() < 1e-10);
        }
        assert!((diversity_summary(&m).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let stack = block_stack(4, 51);
        let m = similarity_matrix(&stack, &KernelKind::Rbf, 512, 0, 0, 0.5).unwrap();
        for i in 0..4 {
            assert!((m.at(i, i) - 1.0).abs() < 1e-10);
            for j in 0..4 {
                assert!((m.at(i, j) - m.at(j, i)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matrix_matches_independent_cka_calls() {
        let stack = block_stack(3, 52);
        let m = similarity_matrix(&stack, &KernelKind::Linear, 512, 0, 0, 0.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = cka(
                    &FeatureMatrix::from_block(&stack[i]).unwrap(),
                    &FeatureMatrix::from_block(&stack[j]).unwrap(),
                    &KernelKind::Linear,
                )
                .unwrap();
                assert!((m.at(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn block_order_permutation_permutes_the_matrix() {
        let stack = block_stack(3, 53);
        let m = similarity_matrix(&stack, &KernelKind::Linear, 512, 0, 0, 0.5).unwrap();
        let permuted = vec![stack[2].clone(), stack[0].clone(), stack[1].clone()];
        let mp = similarity_matrix(&permuted, &KernelKind::Linear, 512, 0, 0, 0.5).unwrap();
        let perm = [2usize, 0, 1];
        for i in 0..3 {
            for j in 0..3 {
                assert!((mp.at(i, j) - m.at(perm[i], perm[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn subsampling_is_deterministic_and_row_aligned() {
        let stack = block_stack(3, 54);
        let a = similarity_matrix(&stack, &KernelKind::Linear, 6, 9, 0, 0.5).unwrap();
        let b = similarity_matrix(&stack, &KernelKind::Linear, 6, 9, 0, 0.5).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.batch, 6);
        for i in 0..3 {
            assert!((a.at(i, i) - 1.0).abs() < 1e-10, "alignment broken");
        }
    }

    #[test]
    fn diversity_summary_cases() {
        let ones = CkaMatrix {
            size: 3,
            values: vec![1.0; 9],
            kernel: "linear".into(),
            step: 0,
            timestep: 0.5,
            batch: 8,
        };
        assert_eq!(diversity_summary(&ones).unwrap(), 1.0);

        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let id = CkaMatrix {
            size: 3,
            values: eye,
            kernel: "linear".into(),
            step: 0,
            timestep: 0.5,
            batch: 8,
        };
        assert_eq!(diversity_summary(&id).unwrap(), 0.0);

        let mut vals = vec![1.0; 9];
        vals[1] = 0.2; // (0,1)
        vals[2] = 0.4; // (0,2)
        vals[5] = 0.6; // (1,2)
        let m = CkaMatrix {
            size: 3,
            values: vals,
            kernel: "linear".into(),
            step: 0,
            timestep: 0.5,
            batch: 8,
        };
        assert!((diversity_summary(&m).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn csv_format_shape_and_digits() {
        let stack = block_stack(3, 55);
        let m = similarity_matrix(&stack, &KernelKind::Linear, 512, 0, 7, 0.25).unwrap();
        let csv = matrix_to_csv(&m);
        let lines: Vec<&str> = csv.trim_end().split('\n').collect();
        assert_eq!(lines.len(), 4, "L+1 rows");
        assert_eq!(lines[0], ",b0,b1,b2");
        for (i, line) in lines[1..].iter().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 4, "L+1 columns");
            assert_eq!(cells[0], format!("b{i}"));
            // 10 significant digits in scientific notation
            assert!(cells[1].contains('e'), "{}", cells[1]);
        }
    }

    #[test]
    fn feature_dump_roundtrip() {
        let dir = std::env::temp_dir().join("ddit-analysis-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("features.ddit");
        let stack = block_stack(3, 56);
        let cfg = RunConfig::default();
        write_feature_dump(&path, &cfg, &stack, 42, 0.75).unwrap();
        let (loaded, step, t) = read_feature_dump(&path).unwrap();
        assert_eq!(step, 42);
        assert_eq!(t, Some(0.75));
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&stack) {
            assert_eq!(a.data(), b.data());
        }
    }
}

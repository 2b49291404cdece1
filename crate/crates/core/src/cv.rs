//! Fold construction and the out-of-fold prediction matrix.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_models::{Learner, Predictor};
use crate::dataset::Dataset;
use crate::error::{invalid, CdstError, Result};
use crate::linalg::{select_entries, select_rows};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    /// Fold id of every row.
    pub assignment: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldPlan {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

/// Seeded permutation dealt round-robin into `k` folds. `k = n` is
/// leave-one-out.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(invalid(format!("fold count {k} must lie in [2, {n}]")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (t, &i) in perm.iter().enumerate() {
        assignment[i] = t % k;
    }
    Ok(FoldPlan {
        assignment,
        k,
        seed,
    })
}

/// `n x J` matrix whose entry `(i, j)` comes from model `j` trained with the
/// fold containing row `i` withheld.
#[derive(Debug, Clone, PartialEq)]
pub struct OofMatrix {
    pub values: DMatrix<f64>,
    pub labels: Vec<String>,
    pub folds: FoldPlan,
}

impl OofMatrix {
    pub fn n_models(&self) -> usize {
        self.values.ncols()
    }

    /// Debug export: columns `f1..fJ` plus `fold`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<String> = (1..=self.n_models()).map(|j| format!("f{j}")).collect();
        header.push("fold".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.values.nrows() {
            let mut cells: Vec<String> =
                self.values.row(i).iter().map(|v| format!("{v}")).collect();
            cells.push(self.folds.assignment[i].to_string());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn build_oof<L: Learner>(
    learners: &[L],
    data: &Dataset,
    folds: &FoldPlan,
) -> Result<OofMatrix> {
    if folds.n() != data.n() {
        return Err(CdstError::DimensionMismatch {
            context: "fold plan rows",
            expected: data.n(),
            found: folds.n(),
        });
    }
    if learners.is_empty() {
        return Err(invalid("need at least one base model"));
    }
    let tasks: Vec<(usize, usize)> = (0..folds.k)
        .flat_map(|f| (0..learners.len()).map(move |j| (f, j)))
        .collect();
    let pieces: Vec<(usize, Vec<usize>, Vec<f64>)> = tasks
        .par_iter()
        .map(|&(fold, j)| {
            let train = folds.complement(fold);
            let held = folds.members(fold);
            let annotate = |e: CdstError| CdstError::Fit {
                fold,
                model: j,
                source: Box::new(e),
            };
            let fitted = learners[j]
                .fit(
                    &select_rows(data.x(), &train),
                    &select_entries(data.y(), &train),
                )
                .map_err(annotate)?;
            let pred = fitted
                .predict(&select_rows(data.x(), &held))
                .map_err(annotate)?;
            Ok((j, held, pred.iter().copied().collect()))
        })
        .collect::<Result<_>>()?;

    let mut values = DMatrix::zeros(data.n(), learners.len());
    for (j, rows, preds) in pieces {
        for (i, v) in rows.into_iter().zip(preds) {
            values[(i, j)] = v;
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CdstError::NonFinite("out-of-fold predictions".into()));
    }
    Ok(OofMatrix {
        values,
        labels: learners.iter().map(Learner::label).collect(),
        folds: folds.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_models::{BaseModelSpec, ModelKind};
    use crate::dataset::ColumnRoles;
    use nalgebra::DVector;

    fn toy(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |i, _| {
            1.0 + 2.0 * x[(i, 0)] - x[(i, 1)] + rng.random::<f64>()
        });
        Dataset::new(
            x.clone(),
            x,
            y,
            ColumnRoles {
                response: "y".into(),
                features: vec!["a".into(), "b".into()],
                weights: vec!["a".into(), "b".into()],
            },
        )
        .unwrap()
    }

    struct Fixed(f64);
    struct FixedFit(f64);
    impl Learner for Fixed {
        type Fitted = FixedFit;
        fn fit(&self, _: &DMatrix<f64>, _: &DVector<f64>) -> Result<FixedFit> {
            Ok(FixedFit(self.0))
        }
        fn label(&self) -> String {
            "fixed".into()
        }
    }
    impl Predictor for FixedFit {
        fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
            Ok(DVector::from_element(x.nrows(), self.0))
        }
    }

    #[test]
    fn loo_and_pigeonhole_sizes() {
        let f = make_folds(5, 5, 3).unwrap();
        let mut s = f.assignment.clone();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
        let mut sizes = make_folds(10, 3, 1).unwrap().sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert_eq!(make_folds(300, 300, 0).unwrap().sizes(), vec![1; 300]);
    }

    #[test]
    fn fold_count_out_of_range() {
        assert!(make_folds(5, 1, 0).is_err());
        assert!(make_folds(5, 6, 0).is_err());
    }

    #[test]
    fn loo_mean_oracle() {
        let d = toy(12, 4);
        let folds = make_folds(12, 12, 9).unwrap();
        // intercept-only model via an overwhelming slope penalty
        let spec = BaseModelSpec::new(ModelKind::Ridge { alpha: 1e16 }, vec![0]);
        let oof = build_oof(&[spec], &d, &folds).unwrap();
        let total: f64 = d.y().sum();
        for i in 0..12 {
            let want = (total - d.y()[i]) / 11.0;
            assert!((oof.values[(i, 0)] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn fixed_output_double_gives_constant_matrix() {
        let d = toy(9, 1);
        let folds = make_folds(9, 3, 2).unwrap();
        let oof = build_oof(&[Fixed(2.5), Fixed(-1.0)], &d, &folds).unwrap();
        assert!(oof.values.column(0).iter().all(|&v| v == 2.5));
        assert!(oof.values.column(1).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn fit_errors_carry_fold_and_model() {
        let d = toy(6, 1);
        let folds = make_folds(6, 3, 0).unwrap();
        let bad = BaseModelSpec::new(
            ModelKind::RegionalOls {
                column: 0,
                threshold: -10.0,
                side: crate::base_models::Side::Below,
            },
            vec![0],
        );
        let good = BaseModelSpec::new(ModelKind::Ols, vec![0]);
        let err = build_oof(&[good, bad], &d, &folds).unwrap_err();
        assert!(matches!(err, CdstError::Fit { model: 1, .. }));
    }

    #[test]
    fn loo_is_seed_independent() {
        let d = toy(15, 2);
        let specs = vec![
            BaseModelSpec::new(ModelKind::Ols, vec![0, 1]),
            BaseModelSpec::new(ModelKind::Knn { k: 3 }, vec![0, 1]),
        ];
        let a = build_oof(&specs, &d, &make_folds(15, 15, 1).unwrap()).unwrap();
        let b = build_oof(&specs, &d, &make_folds(15, 15, 99).unwrap()).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn perturbing_a_row_leaves_its_fold_untouched() {
        let d = toy(20, 5);
        let folds = make_folds(20, 4, 7).unwrap();
        let specs = vec![
            BaseModelSpec::new(ModelKind::Ols, vec![0, 1]),
            BaseModelSpec::new(ModelKind::Knn { k: 2 }, vec![0]),
        ];
        let base = build_oof(&specs, &d, &folds).unwrap();
        let mut y = d.y().clone();
        y[3] += 100.0;
        let d2 = Dataset::new(d.x().clone(), d.xtilde().clone(), y, d.roles().clone()).unwrap();
        let moved = build_oof(&specs, &d2, &folds).unwrap();
        for i in folds.members(folds.assignment[3]) {
            assert_eq!(base.values.row(i), moved.values.row(i));
        }
    }

    #[test]
    fn single_thread_matches_parallel() {
        let d = toy(40, 8);
        let folds = make_folds(40, 5, 3).unwrap();
        let specs = vec![
            BaseModelSpec::new(
                ModelKind::PolyRidge {
                    degree: 2,
                    alpha: 0.1,
                },
                vec![0, 1],
            ),
            BaseModelSpec::new(ModelKind::Knn { k: 4 }, vec![0, 1]),
        ];
        let par = build_oof(&specs, &d, &folds).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let seq = pool.install(|| build_oof(&specs, &d, &folds).unwrap());
        assert_eq!(par, seq);
    }
}

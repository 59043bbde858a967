use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One candidate weighting: task weight and method weight (transfer or KD).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSelection {
    pub best: GridCell,
    pub table: Vec<GridRow>,
}

pub fn grid_cells(lambda1: &[f64], lambda2: &[f64]) -> Vec<GridCell> {
    lambda1.iter().flat_map(|&l1| lambda2.iter().map(move |&l2| GridCell { lambda1: l1, lambda2: l2 })).collect()
}

/// Highest validation accuracy; ties go to smaller `lambda2`, then smaller
/// `lambda1`.
pub fn pick_best(rows: &[GridRow]) -> Option<GridCell> {
    rows.iter()
        .min_by(|a, b| {
            b.val_acc
                .total_cmp(&a.val_acc)
                .then(a.lambda2.total_cmp(&b.lambda2))
                .then(a.lambda1.total_cmp(&b.lambda1))
        })
        .map(|r| GridCell { lambda1: r.lambda1, lambda2: r.lambda2 })
}

/// Runs `run` once per cell and selects the best by validation accuracy.
pub fn grid_select<F>(cells: &[GridCell], mut run: F) -> Result<GridSelection>
where
    F: FnMut(GridCell) -> Result<GridRow>,
{
    if cells.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let table = cells.iter().map(|&c| run(c)).collect::<Result<Vec<_>>>()?;
    let best = pick_best(&table).expect("non-empty table");
    Ok(GridSelection { best, table })
}

/// CSV with columns `lambda1,lambda2,seed,val_acc,test_acc`.
pub fn write_grid_csv(rows: &[GridRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("lambda1,lambda2,seed,val_acc,test_acc\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.lambda1, r.lambda2, r.seed, r.val_acc, r.test_acc));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(l1: f64, l2: f64, acc: f64) -> GridRow {
        GridRow { lambda1: l1, lambda2: l2, seed: 0, val_acc: acc, test_acc: 0.0 }
    }

    #[test]
    fn two_by_two_grid_has_four_cells() {
        assert_eq!(grid_cells(&[0.1, 1.0], &[10.0, 100.0]).len(), 4);
    }

    #[test]
    fn singleton_grid_returns_its_cell() {
        let cells = [GridCell { lambda1: 1.0, lambda2: 10.0 }];
        let sel = grid_select(&cells, |c| Ok(row(c.lambda1, c.lambda2, 0.3))).unwrap();
        assert_eq!(sel.best, cells[0]);
    }

    #[test]
    fn ties_prefer_less_regularization() {
        let cells = grid_cells(&[0.1, 1.0], &[10.0, 100.0]);
        let sel = grid_select(&cells, |c| Ok(row(c.lambda1, c.lambda2, 0.5))).unwrap();
        assert_eq!(sel.best, GridCell { lambda1: 0.1, lambda2: 10.0 });
        let best = pick_best(&[row(1.0, 10.0, 0.5), row(0.1, 100.0, 0.5), row(1.0, 100.0, 0.6)]).unwrap();
        assert_eq!(best, GridCell { lambda1: 1.0, lambda2: 100.0 });
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(grid_select(&[], |_| unreachable!()).is_err());
    }
}

//! The per-partner dataset bundle and its directory layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::{CsrError, CsrMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "CLS")]
    Cls,
    #[serde(rename = "REG")]
    Reg,
    #[serde(rename = "AUX")]
    Aux,
    #[serde(rename = "CATALOGUE")]
    Catalogue,
}

impl TaskKind {
    /// Kinds whose labels live in the classification matrix.
    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::Reg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task_id: u32,
    pub kind: TaskKind,
    pub threshold: Option<f64>,
    pub train_weight: f64,
    pub eval_included: bool,
    /// Owning partners of a catalogue task; empty otherwise.
    #[serde(default)]
    pub catalogue_partners: Vec<u32>,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Matrix(#[from] CsrError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("tasks.json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Labels for a set of rows, one column per task.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    /// Classification labels in {−1, +1}.
    pub cls: CsrMatrix,
    /// Regression values.
    pub reg: CsrMatrix,
    /// Censoring codes on the `reg` pattern: −1 `<`, 0 `=`, +1 `>`.
    pub censor: CsrMatrix,
}

impl Labels {
    pub fn n_rows(&self) -> usize {
        self.cls.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.cls.n_cols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, CsrError> {
        Ok(Self {
            cls: self.cls.select_rows(rows)?,
            reg: self.reg.select_rows(rows)?,
            censor: self.censor.select_rows(rows)?,
        })
    }

    /// Observed label entries.
    pub fn nnz(&self) -> usize {
        self.cls.nnz() + self.reg.nnz()
    }
}

/// Features, labels, folds and task list of one partner.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub x: CsrMatrix,
    pub labels: Labels,
    pub folds: Vec<u8>,
    pub tasks: Vec<TaskMeta>,
}

impl DatasetBundle {
    pub fn n_rows(&self) -> usize {
        self.x.n_rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.n_cols()
    }

    /// Number of private-head columns; catalogue columns follow them.
    pub fn n_head_tasks(&self) -> usize {
        self.tasks
            .iter()
            .filter(|t| t.kind != TaskKind::Catalogue)
            .count()
    }

    pub fn n_catalogue_tasks(&self) -> usize {
        self.tasks.len() - self.n_head_tasks()
    }

    /// Row indices whose fold is in `folds`.
    pub fn rows_in_folds(&self, folds: &[u8]) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(_, f)| folds.contains(f))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, BundleError> {
        Ok(Self {
            x: self.x.select_rows(rows)?,
            labels: self.labels.select_rows(rows)?,
            folds: rows.iter().map(|&r| self.folds[r]).collect(),
            tasks: self.tasks.clone(),
        })
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        let bad = |m: &str| Err(BundleError::Invariant(m.to_string()));
        let n = self.x.n_rows();
        let l = &self.labels;
        if l.cls.n_rows() != n || l.reg.n_rows() != n || l.censor.n_rows() != n {
            return bad("label rows differ from feature rows");
        }
        if self.folds.len() != n {
            return bad("fold vector length differs from feature rows");
        }
        let t = self.tasks.len();
        if l.cls.n_cols() != t || l.reg.n_cols() != t || l.censor.n_cols() != t {
            return bad("label columns differ from task count");
        }
        if l.reg.row_ptr() != l.censor.row_ptr() || l.reg.col_idx() != l.censor.col_idx() {
            return bad("censor pattern differs from regression pattern");
        }
        if l.cls.values().iter().any(|&v| v != 1.0 && v != -1.0) {
            return bad("classification labels must be ±1");
        }
        if l.censor.values().iter().any(|&v| ![-1.0, 0.0, 1.0].contains(&v)) {
            return bad("censor codes must be −1, 0 or +1");
        }
        if l.reg.values().iter().any(|v| !v.is_finite()) {
            return bad("non-finite regression value");
        }
        let head = self.n_head_tasks();
        if self.tasks[..head].iter().any(|t| t.kind == TaskKind::Catalogue) {
            return bad("catalogue tasks must follow all head tasks");
        }
        for task in &self.tasks {
            if task.kind == TaskKind::Aux && task.eval_included {
                return bad("auxiliary tasks cannot be evaluated");
            }
            if task.train_weight < 0.0 {
                return bad("negative task weight");
            }
            if (task.kind == TaskKind::Catalogue) == task.catalogue_partners.is_empty() {
                return bad("catalogue partner set must be present exactly for catalogue tasks");
            }
        }
        for i in 0..n {
            for (c, _) in l.cls.row_iter(i) {
                if !self.tasks[c].kind.is_classification() {
                    return bad("classification label in a regression column");
                }
            }
            for (c, _) in l.reg.row_iter(i) {
                if self.tasks[c].kind != TaskKind::Reg {
                    return bad("regression label in a classification column");
                }
            }
        }
        Ok(())
    }

    /// Writes `X.mdys`, `Y_cls.mdys`, `Y_reg.mdys`, `Y_censor.mdys`,
    /// `folds.bin` and `tasks.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), BundleError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("X.mdys"), self.x.to_bytes())?;
        fs::write(dir.join("Y_cls.mdys"), self.labels.cls.to_bytes())?;
        fs::write(dir.join("Y_reg.mdys"), self.labels.reg.to_bytes())?;
        fs::write(dir.join("Y_censor.mdys"), self.labels.censor.to_bytes())?;
        fs::write(dir.join("folds.bin"), &self.folds)?;
        fs::write(dir.join("tasks.json"), serde_json::to_vec_pretty(&self.tasks)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, BundleError> {
        let mat = |name: &str| -> Result<CsrMatrix, BundleError> {
            Ok(CsrMatrix::from_bytes(&fs::read(dir.join(name))?)?)
        };
        let bundle = Self {
            x: mat("X.mdys")?,
            labels: Labels {
                cls: mat("Y_cls.mdys")?,
                reg: mat("Y_reg.mdys")?,
                censor: mat("Y_censor.mdys")?,
            },
            folds: fs::read(dir.join("folds.bin"))?,
            tasks: serde_json::from_slice(&fs::read(dir.join("tasks.json"))?)?,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

//! Raw records → dataset bundle: plausibility filter, replicate aggregation,
//! thresholding and per-fold quorum filtering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::bundle::{BundleError, DatasetBundle, Labels, TaskKind, TaskMeta};
use super::featurize::{assign_fold, featurize_matrix};
use super::raw::{ActivityRecord, Qualifier, CATALOGUE_TASK_BASE};
use crate::primitives::{CsrMatrix, Seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CLS")]
    Cls,
    #[serde(rename = "CLSAUX")]
    ClsAux,
    #[serde(rename = "REG")]
    Reg,
    #[serde(rename = "HYB")]
    Hyb,
}

impl Variant {
    fn has_cls(self) -> bool {
        !matches!(self, Variant::Reg)
    }

    fn has_reg(self) -> bool {
        matches!(self, Variant::Reg | Variant::Hyb)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cls => "CLS",
            Variant::ClsAux => "CLSAUX",
            Variant::Reg => "REG",
            Variant::Hyb => "HYB",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CLS" => Ok(Variant::Cls),
            "CLSAUX" => Ok(Variant::ClsAux),
            "REG" => Ok(Variant::Reg),
            "HYB" => Ok(Variant::Hyb),
            other => Err(format!("unknown variant {other:?} (expected CLS, CLSAUX, REG or HYB)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub variant: Variant,
    /// Minimum actives and inactives (CLS) or values (REG) per fold.
    pub quorum: usize,
    pub n_folds: u8,
    pub fold_seed: Seed,
    pub feature_dim: usize,
    pub n_active: usize,
    /// Plausible activity range; values outside are dropped.
    pub value_range: (f64, f64),
    pub aux_weight: f64,
    pub n_catalogue_tasks: usize,
    /// Partners owning the catalogue tasks; non-empty iff catalogue is on.
    pub catalogue_partners: Vec<u32>,
    /// Whether this partner contributes to the catalogue.
    pub in_catalogue: bool,
    /// Per-task classification thresholds overriding the median rule.
    pub thresholds: BTreeMap<u32, f64>,
}

impl PrepConfig {
    pub fn new(variant: Variant, fold_seed: Seed, feature_dim: usize, n_active: usize) -> Self {
        Self {
            variant,
            quorum: 5,
            n_folds: 5,
            fold_seed,
            feature_dim,
            n_active,
            value_range: (0.0, 14.0),
            aux_weight: 0.5,
            n_catalogue_tasks: 0,
            catalogue_partners: Vec::new(),
            in_catalogue: false,
            thresholds: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("every task was filtered out")]
    AllTasksFiltered,
    #[error("inconsistent records: {0}")]
    Inconsistent(String),
    #[error("invalid preparation config: {0}")]
    Config(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Collapses replicate measurements of one (compound, task) pair.
///
/// Exact measurements win over censored ones; among exact values the median
/// is kept. Censored-only groups keep the median bound when all replicates
/// agree on the direction, and are dropped otherwise.
pub fn aggregate_replicates(replicates: &[(f64, Qualifier)]) -> Option<(f64, Qualifier)> {
    let mut exact: Vec<f64> = replicates
        .iter()
        .filter(|(_, q)| *q == Qualifier::Eq)
        .map(|(v, _)| *v)
        .collect();
    if !exact.is_empty() {
        return Some((median(&mut exact), Qualifier::Eq));
    }
    let q = replicates.first()?.1;
    if replicates.iter().any(|(_, other)| *other != q) {
        return None;
    }
    let mut vals: Vec<f64> = replicates.iter().map(|(v, _)| *v).collect();
    Some((median(&mut vals), q))
}

/// Turns raw records into a validated bundle.
pub fn prepare(records: &[ActivityRecord], cfg: &PrepConfig) -> Result<DatasetBundle, PrepError> {
    if cfg.n_folds < 2 {
        return Err(PrepError::Config("n_folds must be at least 2".into()));
    }
    if cfg.in_catalogue && cfg.catalogue_partners.is_empty() {
        return Err(PrepError::Config("catalogue member without catalogue partner set".into()));
    }

    // kind of every raw assay, checked for consistency
    let mut aux_flag: BTreeMap<u32, bool> = BTreeMap::new();
    for r in records {
        if r.is_auxiliary && r.qualifier != Qualifier::Eq {
            return Err(PrepError::Inconsistent(format!(
                "auxiliary task {} carries a censored value",
                r.task_id
            )));
        }
        if r.task_id >= CATALOGUE_TASK_BASE {
            if r.is_auxiliary {
                return Err(PrepError::Inconsistent("auxiliary catalogue task".into()));
            }
            if !cfg.in_catalogue {
                return Err(PrepError::Inconsistent(format!(
                    "catalogue task {} at a non-catalogue partner",
                    r.task_id
                )));
            }
            if (r.task_id - CATALOGUE_TASK_BASE) as usize >= cfg.n_catalogue_tasks {
                return Err(PrepError::Inconsistent(format!(
                    "catalogue task {} beyond the configured catalogue",
                    r.task_id
                )));
            }
        }
        if let Some(prev) = aux_flag.insert(r.task_id, r.is_auxiliary) {
            if prev != r.is_auxiliary {
                return Err(PrepError::Inconsistent(format!(
                    "task {} is both auxiliary and primary",
                    r.task_id
                )));
            }
        }
    }

    // (1) plausibility and (2) replicate aggregation
    let (lo, hi) = cfg.value_range;
    let mut grouped: BTreeMap<(u32, u64), Vec<(f64, Qualifier)>> = BTreeMap::new();
    for r in records {
        if r.value.is_finite() && (lo..=hi).contains(&r.value) {
            grouped
                .entry((r.task_id, r.compound_id))
                .or_default()
                .push((r.value, r.qualifier));
        }
    }
    let mut per_task: BTreeMap<u32, Vec<(u64, f64, Qualifier)>> = BTreeMap::new();
    for ((task, cid), reps) in &grouped {
        if let Some((v, q)) = aggregate_replicates(reps) {
            per_task.entry(*task).or_default().push((*cid, v, q));
        }
    }

    // column plan: CLS, AUX, REG head columns, then catalogue columns
    let mut columns: Vec<(TaskMeta, u32)> = Vec::new();
    let primary: Vec<u32> = per_task
        .keys()
        .copied()
        .filter(|t| *t < CATALOGUE_TASK_BASE && !aux_flag[t])
        .collect();
    let aux: Vec<u32> = per_task.keys().copied().filter(|t| aux_flag[t]).collect();
    let meta = |task_id, kind, train_weight, eval_included| TaskMeta {
        task_id,
        kind,
        threshold: None,
        train_weight,
        eval_included,
        catalogue_partners: Vec::new(),
    };
    if cfg.variant.has_cls() {
        columns.extend(primary.iter().map(|&t| (meta(t, TaskKind::Cls, 1.0, true), t)));
    }
    if cfg.variant == Variant::ClsAux {
        columns.extend(aux.iter().map(|&t| (meta(t, TaskKind::Aux, cfg.aux_weight, false), t)));
    }
    if cfg.variant.has_reg() {
        columns.extend(primary.iter().map(|&t| (meta(t, TaskKind::Reg, 1.0, true), t)));
    }
    if cfg.in_catalogue {
        for k in 0..cfg.n_catalogue_tasks as u32 {
            let mut m = meta(CATALOGUE_TASK_BASE + k, TaskKind::Catalogue, 1.0, true);
            m.catalogue_partners = cfg.catalogue_partners.clone();
            columns.push((m, CATALOGUE_TASK_BASE + k));
        }
    }

    // (3) thresholds; fill label entries per compound
    let compounds: BTreeSet<u64> = grouped.keys().map(|(_, c)| *c).collect();
    let row_of: BTreeMap<u64, usize> = compounds.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let n = compounds.len();
    let mut cls_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut reg_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut cen_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (col, (task, raw_id)) in columns.iter_mut().enumerate() {
        let Some(entries) = per_task.get(raw_id) else {
            continue;
        };
        if task.kind.is_classification() {
            let threshold = match cfg.thresholds.get(raw_id) {
                Some(t) => *t,
                None => median(&mut entries.iter().map(|e| e.1).collect::<Vec<_>>()),
            };
            task.threshold = Some(threshold);
            for &(cid, v, _) in entries {
                let y = if v >= threshold { 1.0 } else { -1.0 };
                cls_rows[row_of[&cid]].push((col, y));
            }
        } else {
            for &(cid, v, q) in entries {
                reg_rows[row_of[&cid]].push((col, v));
                cen_rows[row_of[&cid]].push((col, q.code()));
            }
        }
    }

    let ids: Vec<u64> = compounds.into_iter().collect();
    let n_cols = columns.len();
    let bundle = DatasetBundle {
        x: featurize_matrix(&ids, cfg.feature_dim, cfg.n_active),
        labels: Labels {
            cls: CsrMatrix::from_rows(n_cols, &cls_rows).map_err(BundleError::from)?,
            reg: CsrMatrix::from_rows(n_cols, &reg_rows).map_err(BundleError::from)?,
            censor: CsrMatrix::from_rows(n_cols, &cen_rows).map_err(BundleError::from)?,
        },
        folds: ids
            .iter()
            .map(|&c| assign_fold(c, cfg.n_folds, &cfg.fold_seed))
            .collect(),
        tasks: columns.into_iter().map(|(m, _)| m).collect(),
    };

    // (4) quorum
    let out = apply_quorum(&bundle, cfg.quorum, cfg.n_folds)?;
    out.validate()?;
    Ok(out)
}

/// Per-fold label counts of one column: `(positives, negatives)` for
/// classification columns, `(values, 0)` for regression columns.
pub fn fold_counts(bundle: &DatasetBundle, col: usize, n_folds: u8) -> Vec<(usize, usize)> {
    let mut counts = vec![(0usize, 0usize); n_folds as usize];
    let classification = bundle.tasks[col].kind.is_classification();
    for i in 0..bundle.n_rows() {
        let f = bundle.folds[i] as usize;
        if f >= counts.len() {
            continue;
        }
        if classification {
            match bundle.labels.cls.get(i, col) {
                Some(y) if y > 0.0 => counts[f].0 += 1,
                Some(_) => counts[f].1 += 1,
                None => {}
            }
        } else if bundle.labels.reg.get(i, col).is_some() {
            counts[f].0 += 1;
        }
    }
    counts
}

/// Whether a column meets the quorum in one fold.
pub fn meets_quorum_in_fold(counts: (usize, usize), classification: bool, quorum: usize) -> bool {
    if classification {
        counts.0 >= quorum && counts.1 >= quorum
    } else {
        counts.0 >= quorum
    }
}

/// Drops columns failing the per-fold quorum and rows left without labels.
///
/// Catalogue columns are kept so the catalogue head has the same shape at
/// every member; a failing catalogue column only loses its local labels and
/// training weight.
pub fn apply_quorum(
    bundle: &DatasetBundle,
    quorum: usize,
    n_folds: u8,
) -> Result<DatasetBundle, PrepError> {
    let mut keep = Vec::new();
    let mut emptied = Vec::new();
    for (col, task) in bundle.tasks.iter().enumerate() {
        let cls = task.kind.is_classification();
        let ok = fold_counts(bundle, col, n_folds)
            .into_iter()
            .all(|c| meets_quorum_in_fold(c, cls, quorum));
        if ok {
            keep.push(col);
        } else if task.kind == TaskKind::Catalogue {
            keep.push(col);
            emptied.push(col);
        }
    }
    if keep.iter().all(|c| emptied.contains(c)) {
        return Err(PrepError::AllTasksFiltered);
    }
    let strip = |m: &CsrMatrix| -> Result<CsrMatrix, PrepError> {
        let rows: Vec<Vec<(usize, f64)>> = (0..m.n_rows())
            .map(|i| {
                m.row_iter(i)
                    .filter(|(c, _)| !emptied.contains(c))
                    .collect()
            })
            .collect();
        let m = CsrMatrix::from_rows(m.n_cols(), &rows).map_err(BundleError::from)?;
        Ok(m.select_cols(&keep).map_err(BundleError::from)?)
    };
    let labels = Labels {
        cls: strip(&bundle.labels.cls)?,
        reg: strip(&bundle.labels.reg)?,
        censor: strip(&bundle.labels.censor)?,
    };
    let mut tasks: Vec<TaskMeta> = keep.iter().map(|&c| bundle.tasks[c].clone()).collect();
    for (new, &old) in keep.iter().enumerate() {
        if emptied.contains(&old) {
            tasks[new].train_weight = 0.0;
            tasks[new].eval_included = false;
        }
    }
    let rows: Vec<usize> = (0..bundle.n_rows())
        .filter(|&i| !labels.cls.row(i).0.is_empty() || !labels.reg.row(i).0.is_empty())
        .collect();
    let out = DatasetBundle {
        x: bundle.x.clone(),
        labels,
        folds: bundle.folds.clone(),
        tasks,
    };
    Ok(out.select_rows(&rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(cid: u64, task: u32, value: f64) -> ActivityRecord {
        ActivityRecord {
            compound_id: cid,
            task_id: task,
            value,
            qualifier: Qualifier::Eq,
            is_auxiliary: false,
        }
    }

    fn cfg(variant: Variant) -> PrepConfig {
        let mut c = PrepConfig::new(variant, Seed::from_u64(3), 64, 4);
        c.quorum = 1;
        c
    }

    /// Compounds spread over all folds, half above and half below 5.0 per fold.
    fn balanced_task(task: u32, per_fold: usize, c: &PrepConfig) -> Vec<ActivityRecord> {
        let mut out = Vec::new();
        let mut need = vec![(per_fold, per_fold); c.n_folds as usize];
        let mut cid = task as u64 * 1_000_000;
        while need.iter().any(|&(a, b)| a > 0 || b > 0) {
            cid += 1;
            let f = assign_fold(cid, c.n_folds, &c.fold_seed) as usize;
            if need[f].0 > 0 {
                need[f].0 -= 1;
                out.push(rec(cid, task, 7.0));
            } else if need[f].1 > 0 {
                need[f].1 -= 1;
                out.push(rec(cid, task, 3.0));
            }
        }
        out
    }

    #[test]
    fn median_of_replicates() {
        let reps = [(1.0, Qualifier::Eq), (3.0, Qualifier::Eq), (2.0, Qualifier::Eq)];
        assert_eq!(aggregate_replicates(&reps), Some((2.0, Qualifier::Eq)));
        let mixed = [(1.0, Qualifier::Lt), (3.0, Qualifier::Eq)];
        assert_eq!(aggregate_replicates(&mixed), Some((3.0, Qualifier::Eq)));
        let conflict = [(1.0, Qualifier::Lt), (3.0, Qualifier::Gt)];
        assert_eq!(aggregate_replicates(&conflict), None);
    }

    #[test]
    fn replicates_collapse_in_bundle() {
        let mut c = cfg(Variant::Reg);
        c.quorum = 0;
        let records = vec![rec(1, 0, 1.0), rec(1, 0, 3.0), rec(1, 0, 2.0)];
        let b = prepare(&records, &c).unwrap();
        assert_eq!(b.n_rows(), 1);
        assert_eq!(b.labels.reg.get(0, 0), Some(2.0));
    }

    #[test]
    fn quorum_drops_thin_task() {
        let c = PrepConfig {
            quorum: 5,
            ..cfg(Variant::Cls)
        };
        let mut records = balanced_task(0, 5, &c);
        // task 1: only three positives in total
        records.extend((0..3).map(|i| rec(9_000_000 + i, 1, 9.0)));
        records.extend(balanced_task(1, 0, &c));
        let b = prepare(&records, &c).unwrap();
        assert_eq!(b.tasks.len(), 1);
        assert_eq!(b.tasks[0].task_id, 0);
    }

    #[test]
    fn plausibility_drops_bad_values() {
        let mut c = cfg(Variant::Reg);
        c.quorum = 0;
        let records = vec![rec(1, 0, f64::NAN), rec(2, 0, 1.0e6), rec(3, 0, 4.0)];
        let b = prepare(&records, &c).unwrap();
        assert_eq!(b.n_rows(), 1);
    }

    #[test]
    fn clsaux_counts_add_up() {
        let c = cfg(Variant::ClsAux);
        let mut records = Vec::new();
        for t in 0..3 {
            records.extend(balanced_task(t, 2, &c));
        }
        for t in 3..5 {
            records.extend(balanced_task(t, 2, &c).into_iter().map(|mut r| {
                r.is_auxiliary = true;
                r
            }));
        }
        let clsaux = prepare(&records, &c).unwrap();
        let cls = prepare(&records, &cfg(Variant::Cls)).unwrap();
        let n_aux = clsaux.tasks.iter().filter(|t| t.kind == TaskKind::Aux).count();
        assert_eq!(n_aux, 2);
        assert_eq!(clsaux.tasks.len(), cls.tasks.len() + n_aux);
        assert!(clsaux
            .tasks
            .iter()
            .filter(|t| t.kind == TaskKind::Aux)
            .all(|t| !t.eval_included));
    }

    #[test]
    fn hybrid_has_both_views() {
        let c = cfg(Variant::Hyb);
        let records = balanced_task(0, 2, &c);
        let b = prepare(&records, &c).unwrap();
        let kinds: Vec<TaskKind> = b.tasks.iter().map(|t| t.kind).collect();
        assert_eq!(kinds, vec![TaskKind::Cls, TaskKind::Reg]);
        assert_eq!(b.tasks[0].threshold, Some(5.0));
    }

    #[test]
    fn inconsistent_records_rejected() {
        let c = cfg(Variant::Cls);
        let mut a = rec(1, 0, 5.0);
        a.is_auxiliary = true;
        let b = rec(2, 0, 5.0);
        assert!(matches!(
            prepare(&[a.clone(), b], &c),
            Err(PrepError::Inconsistent(_))
        ));
        a.qualifier = Qualifier::Lt;
        assert!(matches!(prepare(&[a], &c), Err(PrepError::Inconsistent(_))));
        let cat = rec(1, CATALOGUE_TASK_BASE, 5.0);
        assert!(matches!(prepare(&[cat], &c), Err(PrepError::Inconsistent(_))));
    }

    #[test]
    fn everything_filtered_is_an_error() {
        let c = PrepConfig {
            quorum: 50,
            ..cfg(Variant::Cls)
        };
        let records = balanced_task(0, 2, &c);
        assert!(matches!(prepare(&records, &c), Err(PrepError::AllTasksFiltered)));
    }

    #[test]
    fn variant_parse() {
        assert_eq!("hyb".parse::<Variant>(), Ok(Variant::Hyb));
        assert!("XYZ".parse::<Variant>().is_err());
    }
}

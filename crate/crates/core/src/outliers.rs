//! Intra-class nearest-neighbor distances and the two-sigma outlier rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::ClassId;

/// Distance from one instance to its nearest same-class neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceDistance {
    pub id: u64,
    pub distance: f64,
}

/// Per-class nearest-neighbour distances plus warnings for skipped classes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassDistances {
    pub by_class: BTreeMap<ClassId, Vec<InstanceDistance>>,
    pub warnings: Vec<String>,
}

/// For every labeled bank row, the Euclidean distance to the closest other
/// row of the same class. Classes with a single row are skipped.
pub fn intra_class_nn_distances(bank: &MemoryBank) -> Result<ClassDistances> {
    let labels = bank.labels().ok_or(Error::UnlabeledBank)?;
    let mut members: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        members.entry(c).or_default().push(i);
    }
    let mut out = ClassDistances::default();
    for (class, rows) in members {
        if rows.len() < 2 {
            let msg = format!("class {class} has a single instance and was skipped");
            log::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        let points: Vec<Vec<f64>> = rows
            .iter()
            .map(|&i| bank.row(i).iter().map(|&x| x as f64).collect())
            .collect();
        let tree = KdTree::build(&points, &rows)?;
        let dists = rows
            .iter()
            .zip(&points)
            .map(|(&i, p)| {
                let hit = tree.nearest_filtered(p, 1, |id| id == i)?;
                Ok(InstanceDistance {
                    id: bank.ids()[i],
                    distance: hit[0].distance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.by_class.insert(class, dists);
    }
    Ok(out)
}

/// Standard deviation convention for the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdConvention {
    /// Divide by `n`.
    #[default]
    Population,
    /// Divide by `n − 1`.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassOutliers {
    pub class: ClassId,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
    pub flagged: Vec<InstanceDistance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub sigmas: f64,
    pub std: StdConvention,
    pub classes: Vec<ClassOutliers>,
    pub warnings: Vec<String>,
}

impl OutlierReport {
    pub fn flagged_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self
            .classes
            .iter()
            .flat_map(|c| c.flagged.iter().map(|f| f.id))
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Flags instances whose distance exceeds `μ_c + sigmas·σ_c` strictly.
/// Flagged entries are listed by (distance descending, id).
pub fn flag_outliers(distances: &ClassDistances, sigmas: f64, std: StdConvention) -> OutlierReport {
    let mut warnings = distances.warnings.clone();
    let mut classes = Vec::new();
    for (&class, ds) in &distances.by_class {
        let n = ds.len();
        if n < 2 {
            warnings.push(format!(
                "class {class} has fewer than two distances and was skipped"
            ));
            continue;
        }
        let mean = ds.iter().map(|d| d.distance).sum::<f64>() / n as f64;
        let ss: f64 = ds.iter().map(|d| (d.distance - mean).powi(2)).sum();
        let denom = match std {
            StdConvention::Population => n as f64,
            StdConvention::Sample => (n - 1) as f64,
        };
        let sd = (ss / denom).sqrt();
        let threshold = mean + sigmas * sd;
        let mut flagged: Vec<InstanceDistance> = ds
            .iter()
            .filter(|d| d.distance > threshold)
            .copied()
            .collect();
        flagged.sort_by(|a, b| b.distance.total_cmp(&a.distance).then(a.id.cmp(&b.id)));
        classes.push(ClassOutliers {
            class,
            count: n,
            mean,
            std: sd,
            threshold,
            flagged,
        });
    }
    OutlierReport {
        sigmas,
        std,
        classes,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ufl_autodiff::{Real, Tensor};

    fn bank(rows: Vec<Real>, d: usize, labels: Vec<ClassId>) -> MemoryBank {
        let n = rows.len() / d;
        MemoryBank::from_embeddings(&Tensor::new(vec![n, d], rows).unwrap())
            .unwrap()
            .with_labels(labels)
            .unwrap()
    }

    fn single_class(values: &[f64]) -> ClassDistances {
        let mut by_class = BTreeMap::new();
        by_class.insert(
            0,
            values
                .iter()
                .enumerate()
                .map(|(i, &distance)| InstanceDistance {
                    id: i as u64,
                    distance,
                })
                .collect(),
        );
        ClassDistances {
            by_class,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn worked_example_flags_only_the_twenty() {
        let mut v = vec![1.0; 9];
        v.push(20.0);
        let r = flag_outliers(&single_class(&v), 2.0, StdConvention::Population);
        let c = &r.classes[0];
        assert!((c.mean - 2.9).abs() < 1e-12);
        assert!((c.std - 5.7).abs() < 1e-12);
        assert!((c.threshold - 14.3).abs() < 1e-12);
        assert_eq!(r.flagged_ids(), vec![9]);
    }

    #[test]
    fn equal_distances_flag_nothing() {
        let r = flag_outliers(&single_class(&[0.4; 6]), 2.0, StdConvention::Population);
        assert!(r.classes[0].std < 1e-12);
        assert!(r.flagged_ids().is_empty());
    }

    #[test]
    fn sample_std_is_wider() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let p = flag_outliers(&single_class(&v), 2.0, StdConvention::Population);
        let s = flag_outliers(&single_class(&v), 2.0, StdConvention::Sample);
        assert!(s.classes[0].std > p.classes[0].std);
    }

    #[test]
    fn distance_examples() {
        let d = intra_class_nn_distances(&bank(vec![0.6, 0.8, 0.6, 0.8], 2, vec![0, 0])).unwrap();
        assert!(d.by_class[&0].iter().all(|x| x.distance == 0.0));

        let d = intra_class_nn_distances(&bank(vec![1.0, 0.0, 0.0, 1.0], 2, vec![4, 4])).unwrap();
        for x in &d.by_class[&4] {
            assert!((x.distance - 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn other_classes_do_not_interfere_and_singletons_skip() {
        let base =
            intra_class_nn_distances(&bank(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 0])).unwrap();
        let more =
            intra_class_nn_distances(&bank(vec![1.0, 0.0, 0.0, 1.0, 0.8, 0.6], 2, vec![0, 0, 1]))
                .unwrap();
        assert_eq!(base.by_class[&0], more.by_class[&0]);
        assert!(!more.by_class.contains_key(&1));
        assert_eq!(more.warnings.len(), 1);
    }

    proptest! {
        #[test]
        fn flags_ignore_order(mut values in proptest::collection::vec(0.0f64..10.0, 2..40), seed in any::<u64>()) {
            let a = flag_outliers(&single_class(&values), 2.0, StdConvention::Population);
            let flagged_a: Vec<f64> = a.classes[0].flagged.iter().map(|f| f.distance).collect();
            let k = (seed as usize) % values.len();
            values.rotate_left(k);
            values.reverse();
            let b = flag_outliers(&single_class(&values), 2.0, StdConvention::Population);
            let flagged_b: Vec<f64> = b.classes[0].flagged.iter().map(|f| f.distance).collect();
            prop_assert_eq!(flagged_a, flagged_b);
        }
    }
}

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{PreparedSet, Regressor};
use crate::data::Gender;
use crate::error::{Error, Result};

const EVAL_BATCH: usize = 64;

/// Eval-mode predictions for every sample, in set order.
pub fn predict_set<M: Regressor>(model: &M, set: &PreparedSet) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend(model.predict(&set.eval_batch(chunk))?);
    }
    Ok(out)
}

/// Mean absolute error; NaN for empty input.
pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    #[default]
    None,
    Gender,
    Region,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMae {
    pub group: String,
    pub count: usize,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaeReport {
    pub count: usize,
    pub mae: f64,
    /// Only groups with at least one sample appear.
    pub groups: Vec<GroupMae>,
}

impl MaeReport {
    pub fn from_predictions(
        pred: &[f64],
        set: &PreparedSet,
        group_by: GroupBy,
    ) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if pred.len() != set.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} samples",
                pred.len(),
                set.len()
            )));
        }
        let group = |name: String, keep: &dyn Fn(usize) -> bool| {
            let idx: Vec<usize> = (0..set.len()).filter(|&i| keep(i)).collect();
            (!idx.is_empty()).then(|| GroupMae {
                group: name,
                count: idx.len(),
                mae: idx.iter().map(|&i| (pred[i] - set.ages[i]).abs()).sum::<f64>() / idx.len() as f64,
            })
        };
        let groups = match group_by {
            GroupBy::None => Vec::new(),
            GroupBy::Gender => [Gender::Female, Gender::Male]
                .into_iter()
                .filter_map(|gdr| group(gdr.to_string(), &|i| set.genders[i] == gdr))
                .collect(),
            GroupBy::Region => group(set.region.to_string(), &|_| true).into_iter().collect(),
        };
        Ok(MaeReport {
            count: set.len(),
            mae: mae(pred, &set.ages),
            groups,
        })
    }

    /// `group,count,mae` with an `all` row first.
    pub fn to_csv(&self) -> String {
        let mut s = format!("group,count,mae\nall,{},{:.9}\n", self.count, self.mae);
        for g in &self.groups {
            s.push_str(&format!("{},{},{:.9}\n", g.group, g.count, g.mae));
        }
        s
    }
}

impl fmt::Display for MaeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MAE {:.4} years (n={})", self.mae, self.count)?;
        for g in &self.groups {
            write!(f, "\n  {}: {:.4} years (n={})", g.group, g.mae, g.count)?;
        }
        Ok(())
    }
}

pub fn evaluate<M: Regressor>(model: &M, set: &PreparedSet, group_by: GroupBy) -> Result<MaeReport> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    MaeReport::from_predictions(&predict_set(model, set)?, set, group_by)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Region;

    fn set(ages: &[f64], genders: &[Gender]) -> PreparedSet {
        PreparedSet {
            target: 1,
            region: Region::Upper,
            ids: (0..ages.len() as u32).collect(),
            images: Vec::new(),
            ages: ages.to_vec(),
            genders: genders.to_vec(),
        }
    }

    #[test]
    fn perfect_and_constant_predictors() {
        use Gender::*;
        let s = set(&[10.0, 30.0], &[Female, Female]);
        assert_eq!(MaeReport::from_predictions(&[10.0, 30.0], &s, GroupBy::None).unwrap().mae, 0.0);
        let r = MaeReport::from_predictions(&[25.0, 25.0], &s, GroupBy::Gender).unwrap();
        assert_eq!(r.mae, 10.0);
        assert_eq!(r.groups.len(), 1, "absent male group must not appear");
        assert_eq!(r.groups[0].group, "F");
    }

    #[test]
    fn gender_groups_recombine() {
        use Gender::*;
        let s = set(&[1.0, 5.0, 9.0, 20.0, 40.0], &[Female, Male, Female, Female, Male]);
        let pred = [2.0, 1.0, 9.5, 30.0, 39.0];
        let r = MaeReport::from_predictions(&pred, &s, GroupBy::Gender).unwrap();
        let weighted: f64 = r.groups.iter().map(|g| g.mae * g.count as f64).sum::<f64>() / 5.0;
        assert!((weighted - r.mae).abs() < 1e-12);
        let r = MaeReport::from_predictions(&pred, &s, GroupBy::Region).unwrap();
        assert_eq!(r.groups[0].group, "upper");
        assert!(r.to_csv().starts_with("group,count,mae\nall,5,"));
    }

    #[test]
    fn empty_set_rejected() {
        let s = set(&[], &[]);
        assert!(matches!(MaeReport::from_predictions(&[], &s, GroupBy::None), Err(Error::EmptyDataset)));
    }
}

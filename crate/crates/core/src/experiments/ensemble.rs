use crate::classifier::ClassifierModel;
use crate::dataset::LesionPatch;
use crate::error::{Error, Result};

/// Classifiers whose scores are averaged.
#[derive(Debug, Clone)]
pub struct EnsemblePredictor {
    members: Vec<ClassifierModel>,
}

impl EnsemblePredictor {
    pub fn new(members: Vec<ClassifierModel>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::EmptyInput("ensemble without members".into()))?;
        if members.iter().any(|m| m.class_order != first.class_order) {
            return Err(Error::IncompatibleMembers);
        }
        Ok(EnsemblePredictor { members })
    }

    pub fn members(&self) -> &[ClassifierModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Elementwise mean of per-member score tables `[member][sample][class]`.
///
/// Values are summed in sorted order so the result does not depend on the
/// order of the members.
pub fn mean_scores(member_scores: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = member_scores.first().ok_or_else(|| Error::EmptyInput("no member scores".into()))?;
    let shape_ok = member_scores
        .iter()
        .all(|m| m.len() == first.len() && m.iter().zip(first).all(|(a, b)| a.len() == b.len()));
    if !shape_ok {
        return Err(Error::Shape("member score tables differ in shape".into()));
    }
    let n = member_scores.len() as f64;
    let mut buf = Vec::with_capacity(member_scores.len());
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, row)| {
            (0..row.len())
                .map(|c| {
                    buf.clear();
                    buf.extend(member_scores.iter().map(|m| m[i][c]));
                    buf.sort_by(f64::total_cmp);
                    buf.iter().sum::<f64>() / n
                })
                .collect()
        })
        .collect())
}

/// Mean of the member score vectors for each patch.
pub fn ensemble_predict(ensemble: &EnsemblePredictor, patches: &[LesionPatch]) -> Result<Vec<Vec<f64>>> {
    let scores = ensemble
        .members
        .iter()
        .map(|m| m.predict_proba(patches))
        .collect::<Result<Vec<_>>>()?;
    mean_scores(&scores)
}

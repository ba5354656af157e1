//! Centroid annotations stored as JSON arrays of `{"z", "y", "x", "score"?}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CentroidRecord {
    z: f64,
    y: f64,
    x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

/// Approximate cell centres in voxel coordinates, `[z, y, x]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CentroidSet {
    points: Vec<[f64; 3]>,
    scores: Option<Vec<f64>>,
}

impl CentroidSet {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            scores: None,
        }
    }

    pub fn with_scores(points: Vec<[f64; 3]>, scores: Vec<f64>) -> Result<Self> {
        if points.len() != scores.len() {
            return Err(Error::Argument(format!(
                "{} points but {} scores",
                points.len(),
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Argument(format!("score {s} outside [0, 1]")));
        }
        Ok(Self {
            points,
            scores: Some(scores),
        })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks every point against the bounds of a volume of extent `dims`.
    pub fn validate_bounds(&self, dims: Dims) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            let inside = p
                .iter()
                .zip(dims.iter())
                .all(|(&c, &d)| c.is_finite() && c >= 0.0 && c <= (d - 1) as f64);
            if !inside {
                return Err(Error::Argument(format!(
                    "centroid {i} at {p:?} lies outside volume {dims:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let records: Vec<CentroidRecord> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| CentroidRecord {
                z: p[0],
                y: p[1],
                x: p[2],
                score: self.scores.as_ref().map(|s| s[i]),
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("centroid records serialize")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let records: Vec<CentroidRecord> = serde_json::from_str(text)
            .map_err(|e| Error::format(path, "centroids", e.to_string()))?;
        let points = records.iter().map(|r| [r.z, r.y, r.x]).collect();
        let n_scored = records.iter().filter(|r| r.score.is_some()).count();
        if n_scored == 0 {
            return Ok(Self::new(points));
        }
        if n_scored != records.len() {
            return Err(Error::format(
                path,
                "score",
                "scores must be given for all records or none",
            ));
        }
        let scores = records.iter().map(|r| r.score.unwrap()).collect();
        Self::with_scores(points, scores)
            .map_err(|e| Error::format(path, "score", e.to_string()))
    }
}

pub fn read_centroids(path: impl AsRef<Path>) -> Result<CentroidSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    CentroidSet::from_json(&text, path)
}

pub fn write_centroids(set: &CentroidSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_json()).map_err(|e| Error::storage(path, e))
}

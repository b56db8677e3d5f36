//! Demonstration and rollout trajectories, plus the JSON-lines interchange
//! format shared by every tool in the repo: one step per line,
//! `{"traj": id, "t": int, "state": [floats], "obs": [floats]}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: i64,
    pub state: Vec<f64>,
    pub obs: Vec<f64>,
}

/// An ordered sequence of (time index, agent state, observation) from one
/// demonstration or rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, steps: Vec<Step>) -> Result<Self> {
        let traj = Trajectory { id: id.into(), steps };
        traj.validate()?;
        Ok(traj)
    }

    fn validate(&self) -> Result<()> {
        for w in self.steps.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::invalid(format!(
                    "trajectory {}: time indices must be strictly increasing ({} then {})",
                    self.id, w[0].t, w[1].t
                )));
            }
        }
        if let Some(first) = self.steps.first() {
            let d = first.obs.len();
            if self.steps.iter().any(|s| s.obs.len() != d) {
                return Err(Error::invalid(format!(
                    "trajectory {}: observations must share one dimension",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.obs.len())
    }
}

#[derive(Serialize, Deserialize)]
struct StepLine<'a> {
    traj: std::borrow::Cow<'a, str>,
    t: i64,
    state: Vec<f64>,
    obs: Vec<f64>,
}

/// Write trajectories in the shared JSON-lines step format.
pub fn write_jsonl<W: Write>(trajectories: &[Trajectory], mut w: W) -> Result<()> {
    for traj in trajectories {
        for step in &traj.steps {
            let line = StepLine {
                traj: std::borrow::Cow::Borrowed(&traj.id),
                t: step.t,
                state: step.state.clone(),
                obs: step.obs.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Read trajectories from JSON-lines, grouping steps by trajectory id in
/// first-seen order. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, Vec<Step>> = std::collections::HashMap::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StepLine = serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("trajectory line {}: {e}", lineno + 1))
        })?;
        let id = parsed.traj.into_owned();
        if !by_id.contains_key(&id) {
            order.push(id.clone());
        }
        by_id.entry(id).or_default().push(Step {
            t: parsed.t,
            state: parsed.state,
            obs: parsed.obs,
        });
    }
    order
        .into_iter()
        .map(|id| {
            let steps = by_id.remove(&id).unwrap();
            Trajectory::new(id, steps)
        })
        .collect()
}

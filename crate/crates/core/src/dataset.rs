//! Demonstration segments and their on-disk format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{SystemKind, SystemModel};
use crate::error::{Error, Result};

/// One optimal demonstration: N+1 states, N inputs, absolute start time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySegment {
    pub system: SystemKind,
    pub ts: f64,
    pub n: usize,
    pub t_start: f64,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub profile: String,
    pub seed: u64,
}

impl TrajectorySegment {
    pub fn x0(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn x_terminal(&self) -> &[f64] {
        &self.states[self.n]
    }

    /// Absolute time of stage `i`.
    pub fn time(&self, i: usize) -> f64 {
        self.t_start + i as f64 * self.ts
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu) = self.system.dims();
        if self.n == 0 {
            return Err(Error::Invalid("segment horizon must be at least 1".into()));
        }
        if self.states.len() != self.n + 1 || self.inputs.len() != self.n {
            return Err(Error::dim(format!(
                "segment with N = {} has {} states and {} inputs",
                self.n,
                self.states.len(),
                self.inputs.len()
            )));
        }
        if self.states.iter().any(|x| x.len() != nx) || self.inputs.iter().any(|u| u.len() != nu) {
            return Err(Error::dim(format!("{:?} segment has wrong vector sizes", self.system)));
        }
        Ok(())
    }

    /// Largest deviation between the stored states and a re-simulation of
    /// the stored inputs.
    pub fn dynamics_defect(&self, model: &SystemModel) -> Result<f64> {
        let traj = model.rollout_f64(self.x0(), &self.inputs)?;
        Ok(traj
            .iter()
            .zip(&self.states)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max))
    }
}

/// Training and validation splits sharing one system, Ts and N.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub train: Vec<TrajectorySegment>,
    pub validation: Vec<TrajectorySegment>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let all: Vec<&TrajectorySegment> = self.train.iter().chain(&self.validation).collect();
        let Some(first) = all.first() else {
            return Ok(());
        };
        for seg in &all {
            seg.validate()?;
            if seg.system != first.system || seg.ts != first.ts || seg.n != first.n {
                return Err(Error::Invalid(
                    "dataset segments must share system, Ts and N".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn segment(values: &[f64], t_start: f64) -> TrajectorySegment {
        TrajectorySegment {
            system: SystemKind::Spring1,
            ts: 0.1,
            n: 2,
            t_start,
            states: vec![
                vec![values[0], values[1]],
                vec![values[2], values[3]],
                vec![values[4], values[5]],
            ],
            inputs: vec![vec![values[6]], vec![values[7]]],
            profile: "theta_m1".into(),
            seed: 9,
        }
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 8), t in 0.0f64..1e3) {
            let ds = Dataset { train: vec![segment(&values, t)], validation: vec![segment(&values, t + 0.1)] };
            let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
            for (a, b) in ds.train.iter().chain(&ds.validation).zip(back.train.iter().chain(&back.validation)) {
                prop_assert_eq!(a.t_start.to_bits(), b.t_start.to_bits());
                for (p, q) in a.states.iter().flatten().chain(a.inputs.iter().flatten())
                    .zip(b.states.iter().flatten().chain(b.inputs.iter().flatten())) {
                    prop_assert_eq!(p.to_bits(), q.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_inconsistent_segments() {
        let mut s = segment(&[0.0; 8], 0.0);
        s.inputs.pop();
        assert!(s.validate().is_err());
        let a = segment(&[0.0; 8], 0.0);
        let mut b = a.clone();
        b.ts = 0.2;
        assert!(Dataset { train: vec![a], validation: vec![b] }.validate().is_err());
    }
}

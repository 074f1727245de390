use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::IndexedInput;

/// Samples of one covariate: strictly increasing times (hours) and values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Channel {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Channel {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// A single observation in a time-ordered stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub covariate: usize,
    pub time: f64,
    pub value: f64,
}

/// Ragged multi-channel time series of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub patient_id: String,
    pub covariate_names: Vec<String>,
    pub channels: Vec<Channel>,
}

impl ObservationSet {
    pub fn new(patient_id: impl Into<String>, covariate_names: Vec<String>) -> Self {
        let channels = vec![Channel::default(); covariate_names.len()];
        Self { patient_id: patient_id.into(), covariate_names, channels }
    }

    pub fn from_channels(
        patient_id: impl Into<String>,
        covariate_names: Vec<String>,
        channels: Vec<Channel>,
    ) -> Result<Self> {
        let set = Self { patient_id: patient_id.into(), covariate_names, channels };
        set.validate()?;
        Ok(set)
    }

    /// Builds a set from a stream; observations are appended in the given order.
    pub fn from_stream(
        patient_id: impl Into<String>,
        covariate_names: Vec<String>,
        stream: &[Observation],
    ) -> Result<Self> {
        let mut set = Self::new(patient_id, covariate_names);
        for o in stream {
            set.push(o.covariate, o.time, o.value)?;
        }
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.covariate_names.len() {
            return Err(Error::domain(format!(
                "{} channels but {} covariate names",
                self.channels.len(),
                self.covariate_names.len()
            )));
        }
        for (d, ch) in self.channels.iter().enumerate() {
            if ch.times.len() != ch.values.len() {
                return Err(Error::domain(format!("channel {d}: times and values differ in length")));
            }
            if ch.times.iter().chain(&ch.values).any(|x| !x.is_finite()) {
                return Err(Error::domain(format!("channel {d}: non-finite entry")));
            }
            if ch.times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::domain(format!(
                    "channel {d} ({}): times must be strictly increasing",
                    self.covariate_names[d]
                )));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, covariate: usize, time: f64, value: f64) -> Result<()> {
        let ch = self
            .channels
            .get_mut(covariate)
            .ok_or_else(|| Error::domain(format!("covariate index {covariate} out of range")))?;
        if !time.is_finite() || !value.is_finite() {
            return Err(Error::domain("observation must be finite"));
        }
        if let Some(&last) = ch.times.last() {
            if time <= last {
                return Err(Error::domain(format!(
                    "covariate {covariate}: time {time} does not follow {last}"
                )));
            }
        }
        ch.times.push(time);
        ch.values.push(value);
        Ok(())
    }

    pub fn n_covariates(&self) -> usize {
        self.channels.len()
    }

    /// Total number of observations across covariates.
    pub fn len(&self) -> usize {
        self.channels.iter().map(Channel::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs in covariate-major order (all of covariate 0, then 1, ...).
    pub fn inputs(&self) -> Vec<IndexedInput> {
        self.channels
            .iter()
            .enumerate()
            .flat_map(|(d, ch)| ch.times.iter().map(move |&t| IndexedInput::new(d, t)))
            .collect()
    }

    /// Values in the same order as [`ObservationSet::inputs`].
    pub fn targets(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.channels.iter().flat_map(|ch| ch.values.iter().copied()))
    }

    /// All observations sorted by time, ties broken by covariate index.
    pub fn to_stream(&self) -> Vec<Observation> {
        let mut out: Vec<Observation> = self
            .channels
            .iter()
            .enumerate()
            .flat_map(|(d, ch)| {
                ch.times
                    .iter()
                    .zip(&ch.values)
                    .map(move |(&time, &value)| Observation { covariate: d, time, value })
            })
            .collect();
        out.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.covariate.cmp(&b.covariate)));
        out
    }

    /// Observations with `from <= time <= to`.
    pub fn window(&self, from: f64, to: f64) -> ObservationSet {
        let channels = self
            .channels
            .iter()
            .map(|ch| {
                let mut out = Channel::default();
                for (&t, &v) in ch.times.iter().zip(&ch.values) {
                    if t >= from && t <= to {
                        out.times.push(t);
                        out.values.push(v);
                    }
                }
                out
            })
            .collect();
        ObservationSet { patient_id: self.patient_id.clone(), covariate_names: self.covariate_names.clone(), channels }
    }

    /// Copy with every value mapped through `f(covariate, value)`.
    pub fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> ObservationSet {
        let mut out = self.clone();
        for (d, ch) in out.channels.iter_mut().enumerate() {
            for v in ch.values.iter_mut() {
                *v = f(d, *v);
            }
        }
        out
    }

    /// Single-covariate view of channel `d`.
    pub fn select(&self, d: usize) -> ObservationSet {
        ObservationSet {
            patient_id: self.patient_id.clone(),
            covariate_names: vec![self.covariate_names[d].clone()],
            channels: vec![self.channels[d].clone()],
        }
    }
}

/// Per-covariate affine standardization `(x - mean) / sd`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    pub fn identity(n_covariates: usize) -> Self {
        Self { mean: vec![0.0; n_covariates], sd: vec![1.0; n_covariates] }
    }

    /// Per-channel sample mean and standard deviation. Channels with fewer than
    /// two samples or no spread keep unit scale.
    pub fn fit(obs: &ObservationSet) -> Self {
        let mut mean = Vec::with_capacity(obs.n_covariates());
        let mut sd = Vec::with_capacity(obs.n_covariates());
        for ch in &obs.channels {
            let n = ch.len();
            if n == 0 {
                mean.push(0.0);
                sd.push(1.0);
                continue;
            }
            let m = ch.values.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                ch.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            mean.push(m);
            sd.push(if var > 1e-24 { var.sqrt() } else { 1.0 });
        }
        Self { mean, sd }
    }

    pub fn apply(&self, obs: &ObservationSet) -> ObservationSet {
        obs.map_values(|d, v| self.forward(d, v))
    }

    #[inline]
    pub fn forward(&self, d: usize, v: f64) -> f64 {
        (v - self.mean[d]) / self.sd[d]
    }

    #[inline]
    pub fn inverse_mean(&self, d: usize, z: f64) -> f64 {
        z * self.sd[d] + self.mean[d]
    }

    #[inline]
    pub fn inverse_var(&self, d: usize, var: f64) -> f64 {
        var * self.sd[d] * self.sd[d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn push_enforces_ordering() {
        let mut s = ObservationSet::new("p", names(2));
        s.push(0, 1.0, 3.0).unwrap();
        s.push(1, 1.0, 3.0).unwrap();
        assert!(s.push(0, 1.0, 2.0).is_err());
        assert!(s.push(0, 0.5, 2.0).is_err());
        assert!(s.push(2, 5.0, 2.0).is_err());
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn stream_roundtrip_and_order() {
        let mut s = ObservationSet::new("p", names(3));
        s.push(2, 0.0, 1.0).unwrap();
        s.push(0, 1.0, 2.0).unwrap();
        s.push(1, 1.0, 3.0).unwrap();
        s.push(2, 4.0, 4.0).unwrap();
        let st = s.to_stream();
        let order: Vec<(usize, f64)> = st.iter().map(|o| (o.covariate, o.time)).collect();
        assert_eq!(order, vec![(2, 0.0), (0, 1.0), (1, 1.0), (2, 4.0)]);
        let back = ObservationSet::from_stream("p", names(3), &st).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.inputs().len(), 4);
        assert_eq!(s.targets().as_slice(), &[2.0, 3.0, 1.0, 4.0]);
    }

    #[test]
    fn standardization_roundtrip() {
        let mut s = ObservationSet::new("p", names(2));
        for (i, v) in [1.0, 3.0, 5.0].iter().enumerate() {
            s.push(0, i as f64, *v).unwrap();
        }
        s.push(1, 0.0, 7.0).unwrap();
        let st = Standardization::fit(&s);
        assert_eq!(st.mean, vec![3.0, 7.0]);
        assert_eq!(st.sd, vec![2.0, 1.0]);
        let z = st.apply(&s);
        assert_eq!(z.channels[0].values, vec![-1.0, 0.0, 1.0]);
        assert_eq!(st.inverse_mean(0, 1.0), 5.0);
        assert_eq!(st.inverse_var(0, 1.0), 4.0);
    }
}

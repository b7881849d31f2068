use ndarray::{s, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Same-time-of-day mean over the most recent training days.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalAverage {
    profile: Array3<f64>,
    start_slot: usize,
}

impl HistoricalAverage {
    /// `train` is N x N x T with slot 0 at absolute time `start_slot`; time of
    /// day is `(start_slot + t) mod slots_per_day`. `days` limits the fit to the
    /// last that many whole days (all of them when `None`).
    pub fn fit(train: ArrayView3<f64>, start_slot: usize, slots_per_day: usize, days: Option<usize>) -> Result<Self> {
        let (n, _, t) = train.dim();
        if slots_per_day == 0 || t < slots_per_day {
            return Err(Error::InvalidInput(format!(
                "historical average needs at least one full day ({slots_per_day} slots), got {t}"
            )));
        }
        let whole_days = t / slots_per_day;
        let used = days.unwrap_or(whole_days).clamp(1, whole_days) * slots_per_day;
        let from = t - used;
        let mut profile = Array3::<f64>::zeros((n, n, slots_per_day));
        let mut counts = vec![0usize; slots_per_day];
        for tt in from..t {
            let slot = (start_slot + tt) % slots_per_day;
            counts[slot] += 1;
            let mut dst = profile.index_axis_mut(Axis(2), slot);
            dst += &train.index_axis(Axis(2), tt);
        }
        for (slot, &c) in counts.iter().enumerate() {
            profile.index_axis_mut(Axis(2), slot).mapv_inplace(|v| v / c as f64);
        }
        Ok(Self { profile, start_slot })
    }

    pub fn slots_per_day(&self) -> usize {
        self.profile.dim().2
    }

    /// Forecast for the slot at time `t` on the training clock.
    pub fn forecast(&self, t: usize) -> ArrayView2<'_, f64> {
        let p = self.slots_per_day();
        self.profile.index_axis(Axis(2), (self.start_slot + t) % p)
    }

    pub fn forecast_many(&self, times: impl IntoIterator<Item = usize>) -> Array3<f64> {
        let parts: Vec<_> = times.into_iter().map(|t| self.forecast(t).insert_axis(Axis(2)).to_owned()).collect();
        let n = self.profile.dim().0;
        crate::training::stack(parts, n)
    }

    pub fn profile(&self) -> ArrayView3<'_, f64> {
        self.profile.slice(s![.., .., ..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series() {
        let x = Array3::from_elem((2, 2, 48), 3.0);
        let ha = HistoricalAverage::fit(x.view(), 0, 24, None).unwrap();
        assert!(ha.forecast(100).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn two_days_average() {
        let mut x = Array3::zeros((1, 1, 4));
        x[[0, 0, 1]] = 2.0;
        x[[0, 0, 3]] = 4.0;
        let ha = HistoricalAverage::fit(x.view(), 0, 2, None).unwrap();
        assert_eq!(ha.forecast(5)[[0, 0]], 3.0);
        assert_eq!(ha.forecast(4)[[0, 0]], 0.0);
        let last = HistoricalAverage::fit(x.view(), 0, 2, Some(1)).unwrap();
        assert_eq!(last.forecast(5)[[0, 0]], 4.0);
    }

    #[test]
    fn recovers_noiseless_profile() {
        let p = 24;
        let f = |t: usize| 5.0 + 3.0 * (std::f64::consts::TAU * (t % p) as f64 / p as f64).sin();
        let x = Array3::from_shape_fn((2, 2, 10 * p), |(_, _, t)| f(t + 7));
        let ha = HistoricalAverage::fit(x.view(), 7, p, None).unwrap();
        for t in 240..300 {
            assert!((ha.forecast(t)[[1, 0]] - f(t + 7)).abs() < 1e-12);
        }
    }

    #[test]
    fn short_series_rejected() {
        assert!(HistoricalAverage::fit(Array3::zeros((1, 1, 5)).view(), 0, 24, None).is_err());
    }
}

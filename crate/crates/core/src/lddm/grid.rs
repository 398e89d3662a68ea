use crate::error::{ensure, invalid, Result};

/// Sampling-time step grid `T = t_B > ... > t_0 = 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeGrid {
    steps: Vec<usize>,
}

impl TimeGrid {
    pub fn from_steps(steps: Vec<usize>) -> Result<Self> {
        ensure!(steps.len() >= 2, invalid!("a grid needs at least two points"));
        ensure!(*steps.last().unwrap() == 0, invalid!("grid must end at 0"));
        ensure!(
            steps.windows(2).all(|w| w[0] > w[1]),
            invalid!("grid must be strictly decreasing")
        );
        Ok(TimeGrid { steps })
    }

    /// Descending grid points, starting at `T` and ending at 0.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn budget(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn horizon(&self) -> usize {
        self.steps[0]
    }

    /// `(t, s)` pairs in sampling order.
    pub fn intervals(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps.windows(2).map(|w| (w[0], w[1]))
    }
}

/// `t_k = round(k T / B)` for `k = B, ..., 0`.
pub fn make_time_grid(t_max: usize, budget: usize) -> Result<TimeGrid> {
    ensure!(budget >= 1, invalid!("budget must be at least 1"));
    ensure!(budget <= t_max, invalid!("budget {budget} exceeds the {t_max} diffusion steps"));
    let mut steps: Vec<usize> = (0..=budget)
        .rev()
        .map(|k| (k as f64 * t_max as f64 / budget as f64).round() as usize)
        .collect();
    steps.dedup();
    steps[0] = t_max;
    *steps.last_mut().unwrap() = 0;
    TimeGrid::from_steps(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_examples() {
        let full = make_time_grid(4000, 4000).unwrap();
        assert_eq!(full.steps().len(), 4001);
        assert!(full.steps().iter().rev().enumerate().all(|(i, &t)| i == t));
        assert_eq!(make_time_grid(4000, 2).unwrap().steps(), &[4000, 2000, 0]);
        assert!(make_time_grid(4, 8).is_err());
        assert_eq!(make_time_grid(10, 1).unwrap().steps(), &[10, 0]);
        assert_eq!(make_time_grid(10, 3).unwrap().steps(), &[10, 7, 3, 0]);
    }

    proptest! {
        #[test]
        fn grids_are_strictly_decreasing_with_fixed_ends(t in 1usize..5000, frac in 0.0f64..1.0) {
            let b = 1 + ((t - 1) as f64 * frac) as usize;
            let g = make_time_grid(t, b).unwrap();
            prop_assert_eq!(g.budget(), b);
            prop_assert_eq!(g.horizon(), t);
            prop_assert_eq!(*g.steps().last().unwrap(), 0);
            prop_assert!(g.steps().windows(2).all(|w| w[0] > w[1]));
        }
    }
}

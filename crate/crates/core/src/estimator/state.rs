use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sim::{Environment, Episode, Group};

/// Everything an experimenter has observed so far in a trial.
///
/// Per subpopulation `i` it keeps the counts `n_i^(0)`, `n_i^(1)`, the
/// per-group running means of the post-treatment response, and the pooled
/// running means of the pre-treatment responses (pooled over both groups).
///
/// Internally each subpopulation owns one constraint column
/// `[x_i; yhat_{i,pre}; 1]`, which is what the synthetic-weight QP reads.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialState {
    k: usize,
    feature_dim: usize,
    pre_periods: usize,
    counts: Vec<[u32; 2]>,
    final_means: Vec<[f64; 2]>,
    columns: Vec<f64>,
    episodes: usize,
}

impl TrialState {
    /// Empty state for a trial over `features` (one column per subpopulation)
    /// with `periods` periods, the last being post-treatment.
    pub fn new(features: &DMatrix<f64>, periods: usize) -> Result<Self> {
        if periods < 1 {
            return Err(Error::Dimension("at least one period required".into()));
        }
        let k = features.ncols();
        let feature_dim = features.nrows();
        let pre_periods = periods - 1;
        let m = feature_dim + pre_periods + 1;
        let mut columns = vec![0.0; k * m];
        for (j, col) in columns.chunks_exact_mut(m).enumerate() {
            for (d, x) in features.column(j).iter().enumerate() {
                col[d] = *x;
            }
            col[m - 1] = 1.0;
        }
        Ok(TrialState {
            k,
            feature_dim,
            pre_periods,
            counts: vec![[0; 2]; k],
            final_means: vec![[0.0; 2]; k],
            columns,
            episodes: 0,
        })
    }

    pub fn for_environment(env: &Environment) -> Self {
        TrialState::new(env.features(), env.periods()).expect("environment has at least two periods")
    }

    /// Builds a state from summary statistics directly.
    ///
    /// `pre_means` is `(T-1) x K`; `final_means[i][alpha]` is ignored where the
    /// matching count is zero, as is column `i` of `pre_means` when
    /// subpopulation `i` has no samples.
    pub fn from_summaries(
        features: &DMatrix<f64>,
        counts: &[[u32; 2]],
        final_means: &[[f64; 2]],
        pre_means: &DMatrix<f64>,
    ) -> Result<Self> {
        let k = features.ncols();
        if counts.len() != k || final_means.len() != k || pre_means.ncols() != k {
            return Err(Error::Dimension(
                "counts, final means and pre-treatment means need one entry per subpopulation".into(),
            ));
        }
        let mut state = TrialState::new(features, pre_means.nrows() + 1)?;
        let m = state.constraint_dim();
        for j in 0..k {
            state.counts[j] = counts[j];
            for g in 0..2 {
                if counts[j][g] > 0 {
                    state.final_means[j][g] = final_means[j][g];
                }
            }
            if counts[j][0] + counts[j][1] > 0 {
                let col = &mut state.columns[j * m..(j + 1) * m];
                for (t, v) in pre_means.column(j).iter().enumerate() {
                    col[state.feature_dim + t] = *v;
                }
            }
            state.episodes += (counts[j][0] + counts[j][1]) as usize;
        }
        Ok(state)
    }

    /// Folds one episode into the running means.
    pub fn record(&mut self, i: usize, group: Group, episode: &Episode) -> Result<()> {
        self.check(i)?;
        if episode.pre.len() != self.pre_periods {
            return Err(Error::Dimension(format!(
                "expected {} pre-treatment observations, got {}",
                self.pre_periods,
                episode.pre.len()
            )));
        }
        let g = group.index();
        self.counts[i][g] += 1;
        self.episodes += 1;

        let n_group = self.counts[i][g] as f64;
        let mean = &mut self.final_means[i][g];
        *mean += (episode.outcome - *mean) / n_group;

        let n_total = self.total(i) as f64;
        let m = self.constraint_dim();
        let start = i * m + self.feature_dim;
        for (yhat, y) in self.columns[start..start + self.pre_periods].iter_mut().zip(&episode.pre) {
            *yhat += (y - *yhat) / n_total;
        }
        Ok(())
    }

    pub fn subpopulations(&self) -> usize {
        self.k
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn pre_periods(&self) -> usize {
        self.pre_periods
    }

    /// Rows of the synthetic-weight constraint system: features, pre-treatment
    /// periods, and the sum-to-one row.
    pub fn constraint_dim(&self) -> usize {
        self.feature_dim + self.pre_periods + 1
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn counts(&self) -> &[[u32; 2]] {
        &self.counts
    }

    pub fn count(&self, i: usize, group: Group) -> u32 {
        self.counts[i][group.index()]
    }

    pub fn total(&self, i: usize) -> u32 {
        self.counts[i][0] + self.counts[i][1]
    }

    pub fn features_of(&self, i: usize) -> &[f64] {
        let m = self.constraint_dim();
        &self.columns[i * m..i * m + self.feature_dim]
    }

    /// Post-treatment running mean of subpopulation `i` in `group`.
    pub fn final_mean(&self, i: usize, group: Group) -> Result<f64> {
        self.check(i)?;
        if self.count(i, group) == 0 {
            return Err(Error::UndefinedMean {
                subpopulation: i,
                group,
            });
        }
        Ok(self.final_means[i][group.index()])
    }

    /// Pooled pre-treatment running means of subpopulation `i`, or `None`
    /// before its first sample.
    pub fn pre_means(&self, i: usize) -> Option<&[f64]> {
        if self.total(i) == 0 {
            return None;
        }
        let m = self.constraint_dim();
        let start = i * m + self.feature_dim;
        Some(&self.columns[start..start + self.pre_periods])
    }

    pub(crate) fn constraint_column(&self, i: usize) -> &[f64] {
        let m = self.constraint_dim();
        &self.columns[i * m..(i + 1) * m]
    }

    pub(crate) fn check(&self, i: usize) -> Result<()> {
        if i >= self.k {
            return Err(Error::SubpopulationOutOfRange { index: i, k: self.k });
        }
        Ok(())
    }
}

/// Counts seen by the variance bound: the observed counts, optionally with
/// one phantom sample added, or an arbitrary hypothetical count matrix.
#[derive(Debug, Clone, Copy)]
pub struct CountView<'a> {
    base: &'a [[u32; 2]],
    phantom: Option<(usize, Group)>,
}

impl<'a> CountView<'a> {
    pub fn new(counts: &'a [[u32; 2]]) -> Self {
        CountView {
            base: counts,
            phantom: None,
        }
    }

    pub fn observed(state: &'a TrialState) -> Self {
        CountView::new(state.counts())
    }

    /// The same counts plus one extra sample in `(i, group)`.
    pub fn with_phantom(self, i: usize, group: Group) -> Self {
        CountView {
            phantom: Some((i, group)),
            ..self
        }
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    #[inline]
    pub fn get(&self, j: usize, group: Group) -> u32 {
        let extra = match self.phantom {
            Some((p, g)) if p == j && g == group => 1,
            _ => 0,
        };
        self.base[j][group.index()] + extra
    }

    #[inline]
    pub fn total(&self, j: usize) -> u32 {
        self.get(j, Group::Control) + self.get(j, Group::Treatment)
    }
}

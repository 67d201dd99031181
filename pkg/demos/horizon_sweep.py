"""Early-warning evaluation: performance as the prediction moves earlier.

Scores a test cohort at horizons 0..12 hours before the event with a simple
points-based threshold score (no training needed) and prints the sweep CSV.
"""
import numpy as np

from mgprnn.data import SyntheticSpec, generate_cohort, split_cohort
from mgprnn.metrics import ThresholdScoreTable, horizon_sweep, sweep_csv, threshold_score

spec = SyntheticSpec(M=2, B=1, P=1, num_encounters=1500, mean_los=30, los_sd=10, max_los=60,
                     intensities=[0.5, 0.5], missing_prob=[0, 0], task_cov=[[1, .5], [.5, 1]],
                     noise_vars=[0.1, 0.1], length_scale=12.0, link_coef=[1.0, 0.5], link_window=6, seed=1)
records, _ = generate_cohort(spec)
test = split_cohort(records)["test"]

inf = np.inf
table = ThresholdScoreTable({
    0: [(-inf, 0.5, 0), (0.5, 1.5, 1), (1.5, inf, 3)],
    1: [(-inf, 0.5, 0), (0.5, inf, 1)],
})


def scorer(recs):
    return np.array([threshold_score(r, table, r.event_time) for r in recs], dtype=float)


print(sweep_csv(horizon_sweep(test, scorer)), end="")

"""Encounter records, cohort files, preprocessing and a synthetic cohort generator.

Cohort files are JSON lines, one encounter per line, with exactly these keys::

    {"id": "enc000001", "baseline": [..B floats..],
     "obs": [[t_hours, variable_index, value], ...],
     "meds": [[t_hours, [0/1 per medication class]], ...],
     "label": 0, "event_time": 37.5}

``event_time`` is sepsis onset for positives and discharge for negatives.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import DataError, GenerationError

log = logging.getLogger(__name__)

RECORD_KEYS = ("id", "baseline", "obs", "meds", "label", "event_time")


@dataclass(eq=False)
class EncounterRecord:
    id: str
    baseline: np.ndarray
    times: np.ndarray          # observation times (hours), sorted
    variables: np.ndarray      # variable index per observation
    values: np.ndarray
    med_times: np.ndarray
    med_classes: np.ndarray    # (U, P) binary
    label: int
    event_time: float

    @property
    def obs(self):
        return list(zip(self.times.tolist(), self.variables.tolist(), self.values.tolist()))

    @property
    def num_grid(self):
        return int(np.floor(self.event_time)) + 1

    def grid_times(self):
        return np.arange(self.num_grid, dtype=float)

    def same_as(self, other) -> bool:
        """Exact equality of every field (arrays compared bitwise)."""
        if self.id != other.id or self.label != other.label or self.event_time != other.event_time:
            return False
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("baseline", "times", "variables", "values", "med_times", "med_classes")
        )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "baseline": self.baseline.tolist(),
            "obs": [[t, int(m), v] for t, m, v in self.obs],
            "meds": [[t, [int(b) for b in bits]] for t, bits in zip(self.med_times.tolist(), self.med_classes)],
            "label": int(self.label),
            "event_time": self.event_time,
        }


def make_record(id, baseline, obs, meds, label, event_time, n_meds=None) -> EncounterRecord:
    """Validate and normalize raw fields into an :class:`EncounterRecord`.

    Observations are sorted by ``(time, variable)``; repeated ``(time,
    variable)`` pairs are averaged. Data after ``event_time`` is discarded.
    """
    event_time = float(event_time)
    if not np.isfinite(event_time) or event_time < 0:
        raise DataError(f"encounter {id}: event_time must be a nonnegative number")
    if label not in (0, 1):
        raise DataError(f"encounter {id}: label must be 0 or 1")
    obs = np.asarray(obs, dtype=float).reshape(-1, 3)
    if len(obs):
        if np.any(obs[:, 0] < 0):
            raise DataError(f"encounter {id}: negative observation time")
        if not np.all(np.isfinite(obs)):
            raise DataError(f"encounter {id}: non-finite observation")
        if np.any(obs[:, 1] < 0) or np.any(obs[:, 1] != np.round(obs[:, 1])):
            raise DataError(f"encounter {id}: variable indices must be nonnegative integers")
    late = obs[:, 0] > event_time
    if late.any():
        obs = obs[~late]
    order = np.lexsort((obs[:, 1], obs[:, 0]))
    obs = obs[order]
    times, variables, values = obs[:, 0], obs[:, 1].astype(int), obs[:, 2]
    if len(times) > 1:
        key_change = np.r_[True, (np.diff(times) != 0) | (np.diff(variables) != 0)]
        if not key_change.all():
            groups = np.cumsum(key_change) - 1
            counts = np.bincount(groups)
            values = np.bincount(groups, weights=values) / counts
            times, variables = times[key_change], variables[key_change]

    med_times, med_classes = [], []
    for t, bits in meds:
        med_times.append(float(t))
        med_classes.append([int(b) for b in bits])
    P = n_meds if n_meds is not None else (len(med_classes[0]) if med_classes else 0)
    med_times = np.asarray(med_times, dtype=float)
    med_classes = np.asarray(med_classes, dtype=int).reshape(len(med_times), P)
    if len(med_times) and np.any(med_times < 0):
        raise DataError(f"encounter {id}: negative medication time")
    if med_classes.size and not np.isin(med_classes, (0, 1)).all():
        raise DataError(f"encounter {id}: medication class vectors must be binary")
    keep = med_times <= event_time
    return EncounterRecord(
        id=str(id), baseline=np.asarray(baseline, dtype=float).reshape(-1),
        times=times, variables=variables, values=values,
        med_times=med_times[keep], med_classes=med_classes[keep],
        label=int(label), event_time=event_time,
    )


def record_from_json(obj, n_meds=None) -> EncounterRecord:
    if not isinstance(obj, dict):
        raise DataError("each line must be a JSON object")
    keys = set(obj)
    if keys != set(RECORD_KEYS):
        missing = set(RECORD_KEYS) - keys
        extra = keys - set(RECORD_KEYS)
        raise DataError(f"bad keys (missing {sorted(missing)}, unexpected {sorted(extra)})")
    return make_record(obj["id"], obj["baseline"], obj["obs"], obj["meds"], obj["label"],
                       obj["event_time"], n_meds=n_meds)


def save_cohort(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_cohort(path, n_meds=None):
    """Parse and validate a cohort file without any value transformation."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(json.loads(line), n_meds=n_meds))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from None
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if n_meds is None and records:
        P = max(r.med_classes.shape[1] for r in records)
        records = [r if r.med_classes.shape[1] == P else replace(r, med_classes=r.med_classes.reshape(0, P))
                   for r in records]
    return records


# ---------------------------------------------------------------------------
# splits and standardization


def split_of(encounter_id) -> str:
    """Deterministic 80/10/10 assignment from a hash of the encounter id."""
    h = int(hashlib.sha256(str(encounter_id).encode()).hexdigest()[:12], 16) % 10
    return "train" if h < 8 else ("valid" if h == 8 else "test")


def split_cohort(records):
    out = {"train": [], "valid": [], "test": []}
    for r in records:
        out[split_of(r.id)].append(r)
    return out


@dataclass
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    log_variables: tuple = ()
    dropped: np.ndarray = None
    baseline_mean: Optional[np.ndarray] = None
    baseline_std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.dropped is None:
            self.dropped = np.zeros(len(self.mean), dtype=bool)
        self.dropped = np.asarray(self.dropped, dtype=bool)
        if np.any(self.std[~self.dropped] <= 0):
            raise DataError("standard deviations must be positive")
        self.log_variables = tuple(int(m) for m in self.log_variables)

    @property
    def M(self):
        return len(self.mean)

    def transform_values(self, variables, values, enc_id="?"):
        values = np.array(values, dtype=float)
        if self.log_variables:
            is_log = np.isin(variables, self.log_variables)
            bad = is_log & (values <= 0)
            if bad.any():
                m = int(variables[bad][0])
                raise DataError(f"encounter {enc_id}: non-positive value for log-transformed variable {m}")
            values[is_log] = np.log(values[is_log])
        std = np.where(self.dropped, 1.0, self.std)
        return (values - self.mean[variables]) / std[variables]

    def apply(self, rec: EncounterRecord) -> EncounterRecord:
        if len(rec.variables) and rec.variables.max() >= self.M:
            raise DataError(f"encounter {rec.id}: variable index {rec.variables.max()} >= {self.M}")
        keep = ~self.dropped[rec.variables]
        values = self.transform_values(rec.variables[keep], rec.values[keep], rec.id)
        baseline = rec.baseline
        if self.baseline_mean is not None:
            baseline = (baseline - self.baseline_mean) / self.baseline_std
        return replace(rec, times=rec.times[keep], variables=rec.variables[keep], values=values,
                       baseline=baseline)

    def to_json(self):
        return {
            "mean": self.mean.tolist(), "std": self.std.tolist(),
            "log_variables": list(self.log_variables), "dropped": self.dropped.tolist(),
            "baseline_mean": None if self.baseline_mean is None else np.asarray(self.baseline_mean).tolist(),
            "baseline_std": None if self.baseline_std is None else np.asarray(self.baseline_std).tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        for k in ("baseline_mean", "baseline_std"):
            if obj.get(k) is not None:
                obj[k] = np.asarray(obj[k], dtype=float)
        return cls(**obj)


def fit_standardization(train_records, n_variables, log_variables=()) -> StandardizationStats:
    """Per-variable mean/std of training observations (after optional log).

    Variables with fewer than two training observations or zero spread are
    flagged as dropped; their observations are removed on :meth:`apply`.
    """
    log_variables = tuple(int(m) for m in log_variables)
    probe = StandardizationStats(np.zeros(n_variables), np.ones(n_variables), log_variables)
    sums = np.zeros(n_variables)
    sq = np.zeros(n_variables)
    counts = np.zeros(n_variables)
    B = None
    base = []
    for r in train_records:
        if len(r.variables):
            if r.variables.max() >= n_variables:
                raise DataError(f"encounter {r.id}: variable index {r.variables.max()} >= {n_variables}")
            v = probe.transform_values(r.variables, r.values, r.id)
            np.add.at(sums, r.variables, v)
            np.add.at(sq, r.variables, v * v)
            np.add.at(counts, r.variables, 1)
        base.append(r.baseline)
        B = len(r.baseline)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        var = np.where(counts > 1, (sq - counts * mean ** 2) / np.maximum(counts - 1, 1), 0.0)
    std = np.sqrt(np.maximum(var, 0.0))
    dropped = (counts < 2) | ~(std > 1e-12)
    if dropped.any():
        log.warning("dropping variables without spread in training data: %s", np.flatnonzero(dropped).tolist())
    std = np.where(dropped, 1.0, std)
    if base:
        bm = np.mean(base, axis=0)
        bs = np.std(base, axis=0)
        bs = np.where(bs > 0, bs, 1.0)
    else:
        bm = bs = None
    del B
    return StandardizationStats(mean, std, log_variables, dropped, bm, bs)


def infer_num_variables(records):
    return max([0] + [int(r.variables.max()) + 1 for r in records if len(r.variables)])


def load_cohort(path, n_variables=None, log_variables=(), stats=None, standardize=True, n_meds=None):
    """Read, validate and standardize a cohort file.

    Standardization statistics come from the training split (by id hash)
    unless ``stats`` is given. Returns ``(records, stats)``; ``stats`` is
    ``None`` when ``standardize`` is false.
    """
    records = read_cohort(path, n_meds=n_meds)
    if not standardize:
        return records, None
    if stats is None:
        M = n_variables if n_variables is not None else infer_num_variables(records)
        train = [r for r in records if split_of(r.id) == "train"]
        stats = fit_standardization(train, M, log_variables)
    return [stats.apply(r) for r in records], stats


# ---------------------------------------------------------------------------
# horizon truncation and raw-feature imputation


def truncate_to_horizon(rec: EncounterRecord, horizon) -> Optional[EncounterRecord]:
    """Hide everything later than ``event_time - horizon``; ``None`` if too short."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if horizon > rec.event_time:
        return None
    if horizon == 0:
        return rec
    cutoff = rec.event_time - horizon
    keep = rec.times <= cutoff
    mkeep = rec.med_times <= cutoff
    return replace(rec, times=rec.times[keep], variables=rec.variables[keep], values=rec.values[keep],
                   med_times=rec.med_times[mkeep], med_classes=rec.med_classes[mkeep], event_time=cutoff)


def hourly_impute(rec: EncounterRecord, n_variables, population_mean=None):
    """Hourly-binned raw features ``(M, X)``: window means, LOCF, else population mean.

    Window ``h`` covers ``[h, h+1)``. Before a variable's first observation the
    population mean is used (0 for standardized data).
    """
    X = rec.num_grid
    fill = np.zeros(n_variables) if population_mean is None else np.asarray(population_mean, dtype=float)
    bins = np.minimum(np.floor(rec.times).astype(int), X - 1)
    sums = np.zeros((n_variables, X))
    counts = np.zeros((n_variables, X))
    np.add.at(sums, (rec.variables, bins), rec.values)
    np.add.at(counts, (rec.variables, bins), 1)
    out = np.empty((n_variables, X))
    for m in range(n_variables):
        last = fill[m]
        for h in range(X):
            if counts[m, h] > 0:
                last = sums[m, h] / counts[m, h]
            out[m, h] = last
    return out


def medication_counts(rec: EncounterRecord, n_meds, num_grid=None):
    """Per-class counts ``(X, P)`` of doses in ``(x_{j-1}, x_j]`` (hour 0 takes ``t <= 0``)."""
    X = rec.num_grid if num_grid is None else num_grid
    out = np.zeros((X, n_meds))
    if len(rec.med_times) and n_meds:
        idx = np.clip(np.ceil(rec.med_times).astype(int), 0, X - 1)
        np.add.at(out, idx, rec.med_classes[:, :n_meds])
    return out


# ---------------------------------------------------------------------------
# synthetic cohorts


def _default_task_cov(M):
    i = np.arange(M)
    return 0.6 ** np.abs(i[:, None] - i[None, :])


@dataclass
class SyntheticSpec:
    """Knobs of the synthetic cohort generator.

    ``link_coef`` weights the mean latent value of each variable over the last
    ``link_window`` hours before the event; ``link_mode`` is ``"logistic"``
    (Bernoulli labels) or ``"threshold"`` (deterministic, separable labels).
    ``missing_prob`` is the chance a variable is never measured in an
    encounter.
    """

    M: int = 6
    B: int = 4
    P: int = 2
    num_encounters: int = 1000
    task_cov: Optional[list] = None
    noise_vars: Optional[list] = None
    length_scale: float = 4.0
    mean_los: float = 120.0
    los_sd: float = 108.0
    min_los: float = 1.0
    max_los: float = 720.0
    intensities: Optional[list] = None
    missing_prob: Optional[list] = None
    med_rate: float = 0.05
    link_coef: Optional[list] = None
    link_window: float = 6.0
    link_scale: float = 1.0
    link_mode: str = "logistic"
    prevalence: float = 0.214
    fine_step: float = 0.5
    seed: int = 0

    def __post_init__(self):
        M = self.M
        if self.task_cov is None:
            self.task_cov = _default_task_cov(M).tolist()
        if self.noise_vars is None:
            self.noise_vars = [0.1] * M
        if self.intensities is None:
            base = [2.0, 1.0, 0.5, 0.2, 0.05, 0.02]
            self.intensities = [base[m] if m < len(base) else 0.02 for m in range(M)]
        if self.missing_prob is None:
            base = [0.0, 0.0, 0.1, 0.3, 0.6, 0.9]
            self.missing_prob = [base[m] if m < len(base) else 0.9 for m in range(M)]
        if self.link_coef is None:
            self.link_coef = [1.0] + [0.0] * (M - 1)
        for name in ("task_cov", "noise_vars", "intensities", "missing_prob", "link_coef"):
            setattr(self, name, [list(map(float, r)) if isinstance(r, (list, tuple, np.ndarray)) else float(r)
                                 for r in np.asarray(getattr(self, name), dtype=float).tolist()])
        if not 0 < self.prevalence < 1:
            raise GenerationError("prevalence must lie in (0, 1)")
        if any(x < 0 for x in self.intensities):
            raise GenerationError("intensities must be nonnegative")
        if len(self.intensities) != M or len(self.missing_prob) != M or len(self.link_coef) != M:
            raise GenerationError("per-variable lists must have length M")
        if self.link_mode not in ("logistic", "threshold"):
            raise GenerationError(f"unknown link_mode {self.link_mode!r}")
        if self.mean_los <= 0 or self.los_sd < 0:
            raise GenerationError("mean_los must be positive and los_sd nonnegative")

    def to_json(self):
        return asdict(self)


def _ou_paths(times, length_scales, rng):
    """Independent unit-variance OU paths at sorted ``times``, shape ``(M, n)``.

    Exact Markov recursion ``g_k = rho_k g_{k-1} + sqrt(1 - rho_k^2) eps_k``,
    evaluated with cumulative sums over chunks short enough to avoid overflow.
    """
    M = len(length_scales)
    n = len(times)
    eps = rng.standard_normal((M, n))
    out = np.empty((M, n))
    for m, ls in enumerate(length_scales):
        dt = np.diff(times)
        rho = np.exp(-dt / ls)
        scale = np.sqrt(np.maximum(1.0 - rho * rho, 0.0))
        g = eps[m, 0]
        out[m, 0] = g
        start = 1
        while start < n:
            # decay over the chunk stays above exp(-200)
            span = np.cumsum(dt[start - 1:] / ls)
            stop = start + max(1, int(np.searchsorted(span, 200.0)))
            stop = min(stop, n)
            logdecay = -np.cumsum(dt[start - 1:stop - 1] / ls)
            decay = np.exp(logdecay)
            incr = scale[start - 1:stop - 1] * eps[m, start:stop] / decay
            out[m, start:stop] = decay * (g + np.cumsum(incr))
            g = out[m, stop - 1]
            start = stop
    return out


def generate_cohort(spec: SyntheticSpec):
    """Draw a synthetic cohort from a ground-truth multitask GP.

    Returns ``(records, manifest)``; the manifest holds the ground-truth
    hyperparameters, the calibrated label intercept and the seed.
    """
    rng = np.random.default_rng(spec.seed)
    M, B, P = spec.M, spec.B, spec.P
    K = np.asarray(spec.task_cov, dtype=float)
    Lk = np.linalg.cholesky(K)
    noise_sd = np.sqrt(np.asarray(spec.noise_vars, dtype=float))
    ls = np.broadcast_to(np.asarray(spec.length_scale, dtype=float), (M,))
    lam = np.asarray(spec.intensities, dtype=float)
    miss = np.asarray(spec.missing_prob, dtype=float)
    coef = np.asarray(spec.link_coef, dtype=float)
    sigma2 = np.log1p((spec.los_sd / spec.mean_los) ** 2)
    mu = np.log(spec.mean_los) - sigma2 / 2

    drafts = []
    summaries = np.empty(spec.num_encounters)
    for i in range(spec.num_encounters):
        los = float(np.clip(rng.lognormal(mu, np.sqrt(sigma2)), spec.min_los, spec.max_los))
        obs_t, obs_m = [], []
        for m in range(M):
            if rng.random() < miss[m]:
                continue
            k = rng.poisson(lam[m] * los)
            obs_t.append(np.sort(rng.uniform(0.0, los, k)))
            obs_m.append(np.full(k, m))
        obs_t = np.concatenate(obs_t) if obs_t else np.zeros(0)
        obs_m = np.concatenate(obs_m) if obs_m else np.zeros(0, dtype=int)
        fine = np.append(np.arange(0.0, los, spec.fine_step), los)
        all_t = np.concatenate([fine, obs_t])
        order = np.argsort(all_t, kind="stable")
        paths = np.empty((M, len(all_t)))
        paths[:, order] = Lk @ _ou_paths(all_t[order], ls, rng)
        f_fine = paths[:, :len(fine)]
        f_obs = paths[obs_m, len(fine) + np.arange(len(obs_t))]
        values = f_obs + noise_sd[obs_m] * rng.standard_normal(len(obs_t))
        window = fine >= los - spec.link_window
        summaries[i] = coef @ f_fine[:, window].mean(axis=1)

        n_med = rng.poisson(spec.med_rate * los)
        med_t = np.sort(rng.uniform(0.0, los, n_med))
        med_c = (rng.random((n_med, P)) < 0.5).astype(int)
        baseline = rng.standard_normal(B)
        drafts.append((los, obs_t, obs_m, values, med_t, med_c, baseline))

    link = spec.link_scale * summaries
    if np.std(link) < 1e-6:
        raise GenerationError("label link carries no signal; rescale link_coef or link_scale")
    if spec.link_mode == "threshold":
        intercept = -float(np.quantile(link, 1.0 - spec.prevalence))
        labels = (link + intercept > 0).astype(int)
    else:
        def gap(a):
            return expit(a + link).mean() - spec.prevalence
        try:
            intercept = brentq(gap, -50.0, 50.0)
        except ValueError:
            raise GenerationError("cannot calibrate the intercept to the target prevalence; "
                                  "rescale link_coef or link_scale") from None
        labels = (rng.random(spec.num_encounters) < expit(intercept + link)).astype(int)

    records = []
    for i, (los, obs_t, obs_m, values, med_t, med_c, baseline) in enumerate(drafts):
        obs = np.column_stack([obs_t, obs_m, values]) if len(obs_t) else np.zeros((0, 3))
        records.append(make_record(f"enc{i:06d}", baseline, obs, list(zip(med_t, med_c)),
                                   int(labels[i]), los, n_meds=P))
    manifest = {
        "spec": spec.to_json(),
        "ground_truth": {
            "task_cov": K.tolist(),
            "noise_vars": list(spec.noise_vars),
            "length_scales": ls.tolist(),
            "link_coef": coef.tolist(),
            "link_scale": spec.link_scale,
            "intercept": float(intercept),
        },
        "seed": spec.seed,
        "prevalence": float(np.mean(labels)) if len(labels) else 0.0,
    }
    return records, manifest

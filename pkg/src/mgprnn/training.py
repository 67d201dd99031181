"""End-to-end training of the MGP layer and the LSTM classifier.

The loss of one encounter is the Monte Carlo average of the classifier's
cross-entropy over reparameterized posterior draws of the grid latents, so a
single reverse sweep produces gradients for both the MGP hyperparameters and
the network weights.

Model variants:

``mgp-rnn``         multitask GP, sampled latents
``mgp-rnn-mean``    multitask GP, posterior mean only
``gp-rnn-shared``   independent GPs (identity task covariance), one length-scale
``gp-rnn-indep``    independent GPs, one length-scale per variable
``raw-rnn``         LSTM on hourly-binned, carried-forward raw values
``plr``             penalized logistic regression on a feature snapshot
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .data import hourly_impute, medication_counts
from .errors import ConfigError, DataError, NumericalError, TrainingError
from .krylov import DEFAULT_CG_MAX_ITER, DEFAULT_CG_TOL, DEFAULT_JITTER, DEFAULT_KRYLOV_DIM
from .mgp import BatchedPosterior, MgpHyperparams, draw_xi, hourly_grid, observation_batch, resolve
from .rnn import bce_loss, init_rnn_params, load_checkpoint, rnn_logits, save_checkpoint

log = logging.getLogger(__name__)

VARIANT_MODES = {
    "mgp-rnn": "multitask",
    "mgp-rnn-mean": "multitask",
    "gp-rnn-shared": "independent-shared",
    "gp-rnn-indep": "independent-per-variable",
    "raw-rnn": None,
    "plr": None,
}
VARIANTS = tuple(VARIANT_MODES)
MGP_PREFIX = "mgp."
CENTERING_TOL = 0.1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    minibatch_size: int = 100
    mc_samples_train: int = 10
    mc_samples_test: int = 25
    l2_lambda: float = 1e-4
    max_epochs: int = 20
    patience: int = 2
    krylov_k: int = DEFAULT_KRYLOV_DIM
    cg_tol: float = DEFAULT_CG_TOL
    cg_max_iter: int = DEFAULT_CG_MAX_ITER
    jitter: float = DEFAULT_JITTER
    seed: int = 0
    model_variant: str = "mgp-rnn"
    hidden_size: int = 64
    num_layers: int = 2
    clip_norm: float = 5.0
    # encounters per tape; minibatch gradients are summed over chunks
    chunk_size: int = 25
    init_noise_var: float = 0.1
    init_length_scale: object = 4.0
    freeze: tuple = ()
    log_wall_time: bool = True
    plr_lambdas: tuple = (1e-3, 1e-2, 1e-1)

    def __post_init__(self):
        if self.model_variant not in VARIANT_MODES:
            raise ConfigError(f"unknown model_variant {self.model_variant!r}; choose from {VARIANTS}")
        for name in ("minibatch_size", "mc_samples_train", "mc_samples_test", "max_epochs",
                     "krylov_k", "cg_max_iter", "hidden_size", "num_layers", "chunk_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.patience, (int, np.integer)) or self.patience < 1:
            raise ConfigError("patience must be a positive integer")
        for name in ("cg_tol", "clip_norm", "init_noise_var"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("learning_rate", "l2_lambda", "jitter"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not np.all(np.asarray(self.init_length_scale, dtype=float) > 0):
            raise ConfigError("init_length_scale must be positive")
        if isinstance(self.init_length_scale, (list, tuple, np.ndarray)):
            self.init_length_scale = [float(x) for x in self.init_length_scale]
        self.freeze = tuple(self.freeze)
        self.plr_lambdas = tuple(float(x) for x in self.plr_lambdas)
        if not self.plr_lambdas or min(self.plr_lambdas) <= 0:
            raise ConfigError("plr_lambdas must be positive")

    @property
    def mgp_mode(self):
        return VARIANT_MODES[self.model_variant]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        d["plr_lambdas"] = list(self.plr_lambdas)
        return d


# ---------------------------------------------------------------------------
# model container


@dataclass
class Model:
    """Fitted (or initial) parameters of one variant.

    ``tensors`` is a flat dict: MGP entries carry an ``mgp.`` prefix, LSTM
    entries use the names from :mod:`mgprnn.rnn`, PLR entries ``plr.*``.
    """

    variant: str
    M: int
    B: int
    P: int
    tensors: dict = field(default_factory=dict)

    @property
    def mode(self):
        return VARIANT_MODES[self.variant]

    @property
    def input_dim(self):
        return self.M + self.B + self.P

    @property
    def hp(self) -> Optional[MgpHyperparams]:
        if self.mode is None:
            return None
        t = self.tensors
        factor = t.get(MGP_PREFIX + "task_factor", np.eye(self.M) * np.log(np.expm1(1.0)))
        return MgpHyperparams(factor, t[MGP_PREFIX + "log_noise"], t[MGP_PREFIX + "log_lengthscale"], self.mode)

    @property
    def rnn(self):
        return {k: v for k, v in self.tensors.items() if not k.startswith((MGP_PREFIX, "plr."))}

    def with_tensors(self, tensors):
        merged = dict(self.tensors)
        merged.update(tensors)
        return replace(self, tensors=merged)

    def save(self, path, **extra):
        save_checkpoint(path, self.tensors, variant=self.variant, dims={"M": self.M, "B": self.B, "P": self.P},
                        **extra)

    @classmethod
    def load(cls, path):
        tensors, meta = load_checkpoint(path)
        try:
            dims = meta["dims"]
            model = cls(meta["variant"], dims["M"], dims["B"], dims["P"], tensors)
        except KeyError as exc:
            raise DataError(f"checkpoint {path} lacks {exc}") from None
        return model, meta


def init_model(cfg: TrainConfig, M, B, P) -> Model:
    """Initial parameters: ``K = I``, ``sigma^2 = init_noise_var``, ``l = init_length_scale``."""
    tensors = {}
    mode = cfg.mgp_mode
    if mode is not None:
        ls = np.asarray(cfg.init_length_scale, dtype=float)
        if mode == "independent-per-variable":
            ls = np.broadcast_to(ls, (M,))
        elif ls.size != 1:
            raise ConfigError(f"{cfg.model_variant} uses one shared length-scale")
        hp = MgpHyperparams.initial(M, mode, cfg.init_noise_var, 4.0)
        hp = hp.replace(log_lengthscale=np.log(ls).reshape(hp.log_lengthscale.shape))
        tensors.update({MGP_PREFIX + k: v for k, v in hp.tensors().items()})
    if cfg.model_variant == "plr":
        tensors["plr.coef"] = np.zeros(M + B + P)
        tensors["plr.intercept"] = np.zeros(())
    else:
        tensors.update(init_rnn_params(M + B + P, cfg.hidden_size, cfg.num_layers, seed=cfg.seed))
    unknown = set(cfg.freeze) - {k[len(MGP_PREFIX):] if k.startswith(MGP_PREFIX) else k for k in tensors}
    if unknown:
        raise ConfigError(f"cannot freeze unknown tensors {sorted(unknown)}")
    return Model(cfg.model_variant, M, B, P, tensors)


def cohort_dims(records):
    """``(M, B, P)`` inferred from a cohort."""
    if not records:
        raise ConfigError("empty cohort")
    M = max([0] + [int(r.variables.max()) + 1 for r in records if len(r.variables)])
    return M, len(records[0].baseline), records[0].med_classes.shape[1]


def _id_seed(encounter_id):
    return int(hashlib.sha256(str(encounter_id).encode()).hexdigest()[:8], 16)


# ---------------------------------------------------------------------------
# forward pass for a chunk of encounters


@dataclass
class _Chunk:
    records: list
    batch: object
    X: int
    static: np.ndarray       # (E, X, B + P)
    raw: Optional[np.ndarray]  # (E, M, X) imputed raw values for raw-rnn


def _make_chunk(records, model: Model) -> _Chunk:
    grids = [hourly_grid(r.event_time) for r in records]
    batch = observation_batch(records, grids, model.M)
    E, X = batch.E, batch.X
    static = np.zeros((E, X, model.B + model.P))
    raw = np.zeros((E, model.M, X)) if model.variant == "raw-rnn" else None
    for e, (r, g) in enumerate(zip(records, grids)):
        n = len(g)
        static[e, :n, :model.B] = r.baseline
        static[e, :n, model.B:] = medication_counts(r, model.P, n)
        if raw is not None:
            raw[e, :, :n] = hourly_impute(r, model.M)
    return _Chunk(records, batch, X, static, raw)


def _latents(tensors, model: Model, chunk: _Chunk, xi, cfg, mean_only):
    """Grid latents ``(E, S, M*X)`` for the chunk."""
    if model.mode is None:
        return chunk.raw.reshape(chunk.batch.E, 1, -1)
    mgp = {k[len(MGP_PREFIX):]: v for k, v in tensors.items() if k.startswith(MGP_PREFIX)}
    K, noise, ls = resolve(mgp, model.mode, model.M)
    post = BatchedPosterior(chunk.batch, K, noise, ls, cfg.jitter, cfg.cg_tol, cfg.cg_max_iter)
    if mean_only:
        return post.mean
    return post.sample(xi, cfg.krylov_k)


def chunk_probs(tensors, model: Model, chunk: _Chunk, xi, cfg, mean_only=False):
    """Classifier probabilities ``(E, S)`` for every encounter and latent draw."""
    E, M, X = chunk.batch.E, model.M, chunk.X
    Z = _latents(tensors, model, chunk, xi, cfg, mean_only)
    S = np.shape(ad.value(Z))[1]
    Z = ad.swapaxes(ad.reshape(Z, (E, S, M, X)), -1, -2)         # (E, S, X, M)
    static = np.broadcast_to(chunk.static[:, None], (E, S, X, model.B + model.P))
    D = ad.concat([Z, static], axis=-1) if model.B + model.P else Z
    D = ad.reshape(D, (E * S, X, model.input_dim))
    step_mask = np.repeat(chunk.batch.grid_mask, S, axis=0)
    logits = rnn_logits(tensors, D, step_mask)
    return ad.sigmoid(ad.reshape(logits, (E, S)))


def _uses_samples(model: Model):
    return model.variant in ("mgp-rnn", "gp-rnn-shared", "gp-rnn-indep")


def chunk_loss_sum(tensors, model, chunk, xi, cfg):
    """Sum over the chunk of each encounter's Monte Carlo mean cross-entropy."""
    mean_only = not _uses_samples(model)
    probs = chunk_probs(tensors, model, chunk, xi, cfg, mean_only)
    labels = np.array([r.label for r in chunk.records], dtype=float)[:, None]
    per = ad.mean(bce_loss(probs, labels), axis=1)
    return ad.sum(per)


def _check_centering(records, M):
    sums = np.zeros(M)
    counts = np.zeros(M)
    for r in records:
        np.add.at(sums, r.variables, r.values)
        np.add.at(counts, r.variables, 1)
    means = sums / np.maximum(counts, 1)
    bad = np.flatnonzero(np.abs(means) >= CENTERING_TOL)
    if len(bad):
        raise DataError(f"variables {bad.tolist()} are not centred (training means {means[bad].round(3).tolist()}); "
                        "standardize the cohort first")


# ---------------------------------------------------------------------------
# public single-encounter objective


def mc_expected_loss(enc, hp: MgpHyperparams, rnn, S=10, k=DEFAULT_KRYLOV_DIM, seed=0, tape=None,
                     mean_only=False, cg_tol=DEFAULT_CG_TOL, cg_max_iter=DEFAULT_CG_MAX_ITER,
                     jitter=DEFAULT_JITTER, xi=None, B=None, P=None):
    """Monte Carlo estimate of the expected cross-entropy for one encounter.

    With a ``tape`` every MGP hyperparameter and network tensor becomes a
    named leaf on it (MGP names carry the ``mgp.`` prefix) and the returned
    loss is a :class:`~mgprnn.autodiff.Var`. ``xi`` (shape ``(S, M*X)``)
    overrides the seeded standard normal draws.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    M = hp.M
    B = len(enc.baseline) if B is None else B
    P = enc.med_classes.shape[1] if P is None else P
    variant = {"multitask": "mgp-rnn", "independent-shared": "gp-rnn-shared",
               "independent-per-variable": "gp-rnn-indep"}[hp.mode]
    tensors = {MGP_PREFIX + n: v for n, v in hp.tensors().items()}
    tensors.update(rnn)
    model = Model(variant, M, B, P, tensors)
    cfg = TrainConfig(krylov_k=k, cg_tol=cg_tol, cg_max_iter=cg_max_iter, jitter=jitter,
                      model_variant=variant, mc_samples_train=S)
    if tape is not None:
        tensors = {n: tape.var(v, name=n) for n, v in tensors.items()}
    chunk = _make_chunk([enc], model)
    if xi is None:
        xi = draw_xi(chunk.batch, S, np.random.default_rng(seed))
    else:
        xi = np.asarray(xi, dtype=float).reshape(1, S, -1)
    try:
        probs = chunk_probs(tensors, model, chunk, xi, cfg, mean_only)
    except NumericalError as exc:
        exc.encounter_id = enc.id
        raise
    return ad.mean(bce_loss(probs, float(enc.label)))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected ADAM update; returns ``(new_params, new_state)``."""
    for name, g in grads.items():
        if name not in params or np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient for {name!r} does not match any parameter shape")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_p[name], new_m[name], new_v[name] = p, state.m[name], state.v[name]
            continue
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, replace(state, m=new_m, v=new_v, step=t)


def _clip(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        log.info("clipping gradient norm %.3g to %.3g", norm, max_norm)
        return {k: g * (max_norm / norm) for k, g in grads.items()}, True
    return grads, False


# ---------------------------------------------------------------------------
# scoring


def _chunks(records, size):
    """Chunks of similar grid length (sorted by length, then input order)."""
    order = sorted(range(len(records)), key=lambda i: (records[i].num_grid, i))
    return [order[s:s + size] for s in range(0, len(order), size)]


def _scoring_xi(chunk, M, S, seed):
    """Per-encounter draws seeded from (seed, encounter id), independent of batching."""
    b = chunk.batch
    xi = np.zeros((b.E, S, M, b.X))
    for e, (r, n) in enumerate(zip(chunk.records, b.n_grid)):
        rng = np.random.default_rng([seed, _id_seed(r.id)])
        xi[e, :, :, :n] = rng.standard_normal((S, M * n)).reshape(S, M, n)
    return xi.reshape(b.E, S, M * b.X)


def _shifted_mean(p, axis):
    # exact when all samples agree
    p0 = np.take(p, [0], axis=axis)
    return np.squeeze(p0, axis) + np.mean(p - p0, axis=axis)


def predict_samples(model: Model, records, cfg: TrainConfig, S=None, seed=None):
    """Per-draw probabilities ``(E, S)``; deterministic variants return ``S = 1``."""
    S = cfg.mc_samples_test if S is None else S
    seed = cfg.seed if seed is None else seed
    if model.variant == "plr":
        return plr_predict(model, records)[:, None]
    out = [None] * len(records)
    for idx in _chunks(records, cfg.chunk_size):
        chunk = _make_chunk([records[i] for i in idx], model)
        xi = _scoring_xi(chunk, model.M, S, seed) if _uses_samples(model) else None
        try:
            probs = np.asarray(chunk_probs(model.tensors, model, chunk, xi, cfg,
                                           mean_only=not _uses_samples(model)))
        except NumericalError as exc:
            if exc.encounter_id is None:
                exc.encounter_id = chunk.records[0].id
            raise
        for j, i in enumerate(idx):
            out[i] = probs[j]
    return np.array(out).reshape(len(records), -1)


def score_cohort(model: Model, records, cfg: TrainConfig, S=None, seed=None):
    """Risk score of every encounter: mean predicted probability over posterior draws."""
    if not records:
        return np.zeros(0)
    return _shifted_mean(predict_samples(model, records, cfg, S, seed), axis=1)


def risk_score(enc, model: Model, S_test=25, k=DEFAULT_KRYLOV_DIM, seed=0, cfg: TrainConfig = None):
    """Risk score of one encounter (see :func:`score_cohort`)."""
    cfg = cfg or TrainConfig(model_variant=model.variant, krylov_k=k, mc_samples_test=S_test, seed=seed)
    return float(score_cohort(model, [enc], replace(cfg, krylov_k=k, mc_samples_test=S_test, seed=seed))[0])


# ---------------------------------------------------------------------------
# PLR baseline


def plr_features(rec, M, P):
    """``[last hourly-imputed values, baseline, cumulative medication counts]``."""
    last = hourly_impute(rec, M)[:, -1]
    meds = rec.med_classes[:, :P].sum(axis=0) if len(rec.med_times) else np.zeros(P)
    return np.concatenate([last, rec.baseline, meds])


def plr_predict(model: Model, records):
    F = np.array([plr_features(r, model.M, model.P) for r in records]).reshape(len(records), -1)
    return expit(F @ model.tensors["plr.coef"] + model.tensors["plr.intercept"])


def fit_plr(train, valid, cfg: TrainConfig, M, B, P):
    """L2-penalized logistic regression; penalty picked by validation log-loss.

    The objective is ``mean log-loss + lambda * ||coef||^2``, i.e. scikit-learn's
    ``C = 1 / (2 * lambda * n)``.
    """
    from sklearn.linear_model import LogisticRegression

    Ft = np.array([plr_features(r, M, P) for r in train])
    yt = np.array([r.label for r in train])
    if len(np.unique(yt)) < 2:
        raise ConfigError("PLR needs both classes in the training split")
    Fv = np.array([plr_features(r, M, P) for r in valid])
    yv = np.array([r.label for r in valid], dtype=float)
    best = None
    history = []
    t0 = time.perf_counter()
    for lam in cfg.plr_lambdas:
        clf = LogisticRegression(C=1.0 / (2.0 * lam * len(yt)), max_iter=5000, tol=1e-10)
        clf.fit(Ft, yt)
        model = Model("plr", M, B, P, {"plr.coef": clf.coef_[0].astype(float),
                                       "plr.intercept": np.asarray(float(clf.intercept_[0]))})
        p = np.clip(plr_predict(model, valid), 1e-12, 1 - 1e-12)
        vloss = float(np.mean(-(yv * np.log(p) + (1 - yv) * np.log(1 - p))))
        history.append((lam, vloss))
        if best is None or vloss < best[0]:
            best = (vloss, lam, model, p)
    from .metrics import auroc
    vloss, lam, model, p = best
    try:
        va = auroc(p, yv)
    except Exception:
        va = None
    entry = {"epoch": 1, "train_loss": None, "valid_loss": vloss, "valid_auroc": va,
             "seconds": time.perf_counter() - t0 if cfg.log_wall_time else None, "plr_lambda": lam}
    log.info("PLR validation log-loss by lambda: %s", history)
    return model, [entry]


# ---------------------------------------------------------------------------
# training loop


def _trainable(model: Model, cfg: TrainConfig):
    frozen = set(cfg.freeze)
    return {k: v for k, v in model.tensors.items()
            if (k[len(MGP_PREFIX):] if k.startswith(MGP_PREFIX) else k) not in frozen}


def minibatch_gradient(model: Model, records, cfg: TrainConfig, rng, trainable=None):
    """Mean Monte Carlo loss over ``records`` and its gradient for the trainable tensors."""
    trainable = _trainable(model, cfg) if trainable is None else trainable
    S = cfg.mc_samples_train if _uses_samples(model) else 1
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in trainable.items()}
    for idx in _chunks(records, cfg.chunk_size):
        chunk = _make_chunk([records[i] for i in idx], model)
        xi = draw_xi(chunk.batch, S, rng) if _uses_samples(model) else None
        tape = ad.Tape()
        tensors = dict(model.tensors)
        leaves = {k: tape.var(v, name=k) for k, v in trainable.items()}
        tensors.update(leaves)
        loss = chunk_loss_sum(tensors, model, chunk, xi, cfg)
        if not ad.is_var(loss):
            total += float(loss)
            continue
        total += float(loss.value)
        g = ad.backward(tape, loss)
        for k, leaf in leaves.items():
            grads[k] += g[leaf]
    n = len(records)
    return total / n, {k: g / n for k, g in grads.items()}


def _evaluate(model, valid, cfg):
    from .metrics import auroc

    probs = predict_samples(model, valid, cfg, seed=cfg.seed)
    labels = np.array([r.label for r in valid], dtype=float)
    p = np.clip(probs, 1e-12, 1 - 1e-12)
    loss = float(np.mean(-(labels[:, None] * np.log(p) + (1 - labels[:, None]) * np.log(1 - p))))
    scores = _shifted_mean(probs, axis=1)
    try:
        va = float(auroc(scores, labels))
    except Exception:
        va = None
    return loss, va


def fit(train, valid, cfg: TrainConfig, dims=None, init: Model = None, on_epoch=None):
    """Minimize the Monte Carlo objective with ADAM and early stopping.

    Returns ``(best_model, log)``; ``log`` has one dict per epoch with keys
    ``epoch, train_loss, valid_loss, valid_auroc, seconds``. ``train_loss`` is
    the mean data loss over the epoch's minibatches (without the L2 term).
    """
    if not train or not valid:
        raise ConfigError("training and validation cohorts must be nonempty")
    overlap = {r.id for r in train} & {r.id for r in valid}
    if overlap:
        raise ConfigError(f"train and valid share encounter ids, e.g. {sorted(overlap)[:3]}")
    if dims is None:
        M, B, P = cohort_dims(list(train) + list(valid))
    else:
        M, B, P = dims
    if cfg.model_variant == "plr":
        return fit_plr(train, valid, cfg, M, B, P)
    model = init if init is not None else init_model(cfg, M, B, P)
    if model.variant != cfg.model_variant:
        raise ConfigError(f"initial model is {model.variant}, config asks for {cfg.model_variant}")
    if model.mode is not None:
        _check_centering(train, M)

    params = _trainable(model, cfg)
    state = AdamState.zeros(params)
    rnn_names = [k for k in params if not k.startswith(MGP_PREFIX)]
    history = []
    best = (np.inf, model)
    stale = 0
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses, sizes, clipped = [], [], 0
        for b, start in enumerate(range(0, n, cfg.minibatch_size)):
            recs = [train[i] for i in order[start:start + cfg.minibatch_size]]
            rng = np.random.default_rng([cfg.seed, epoch, b])
            try:
                loss, grads = minibatch_gradient(model, recs, cfg, rng, params)
            except NumericalError as exc:
                raise TrainingError(f"epoch {epoch}, minibatch {b}: {exc}",
                                    encounter_id=exc.encounter_id) from exc
            for k in rnn_names:
                grads[k] = grads[k] + 2.0 * cfg.l2_lambda * params[k]
            grads, was_clipped = _clip(grads, cfg.clip_norm)
            clipped += was_clipped
            params, state = adam_step(params, grads, state, cfg.learning_rate)
            model = model.with_tensors(params)
            losses.append(loss)
            sizes.append(len(recs))
        if clipped:
            log.info("epoch %d: gradient clipped in %d of %d minibatches", epoch, clipped, len(sizes))
        vloss, vauc = _evaluate(model, valid, cfg)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.average(losses, weights=sizes)),
            "valid_loss": vloss,
            "valid_auroc": vauc,
            "seconds": time.perf_counter() - t0 if cfg.log_wall_time else None,
        }
        history.append(entry)
        log.info("epoch %d: train %.4f valid %.4f auroc %s", epoch, entry["train_loss"], vloss, vauc)
        if on_epoch is not None:
            on_epoch(entry, model)
        if vloss < best[0]:
            best = (vloss, model)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stopping after epoch %d", epoch)
                break
    return best[1], history

"""Stacked LSTM classifier and its checkpoint format.

Parameters live in a flat ``{name: array}`` dict::

    lstm{l}.W_x  (D_l, 4H)   input weights, gate blocks ordered i, f, g, o
    lstm{l}.W_h  (H, 4H)     recurrent weights
    lstm{l}.b    (4H,)       biases
    head.w       (H,)        output head
    head.b       ()

Any entry may be a :class:`~mgprnn.autodiff.Var` when gradients are needed.
"""
from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

CHECKPOINT_VERSION = 1
PROB_CLIP = 1e-12


def init_rnn_params(input_dim, hidden=64, layers=2, seed=0, init_scale=0.1, forget_bias=1.0):
    """Uniform(-init_scale, init_scale) weights; zero biases except the forget gate."""
    rng = np.random.default_rng(seed)
    params = {}
    d = input_dim
    for layer in range(layers):
        params[f"lstm{layer}.W_x"] = rng.uniform(-init_scale, init_scale, (d, 4 * hidden))
        params[f"lstm{layer}.W_h"] = rng.uniform(-init_scale, init_scale, (hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        params[f"lstm{layer}.b"] = b
        d = hidden
    params["head.w"] = rng.uniform(-init_scale, init_scale, hidden)
    params["head.b"] = np.zeros(())
    return params


def num_layers(params):
    return sum(1 for k in params if k.endswith(".W_h"))


def hidden_size(params):
    return np.shape(ad.value(params["lstm0.W_h"]))[0]


def input_size(params):
    return np.shape(ad.value(params["lstm0.W_x"]))[0]


def _cell(gates, c_prev, H):
    i = ad.sigmoid(gates[..., :H])
    f = ad.sigmoid(gates[..., H:2 * H])
    g = ad.tanh(gates[..., 2 * H:3 * H])
    o = ad.sigmoid(gates[..., 3 * H:])
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def lstm_step(layer, x_t, h_prev, c_prev):
    """One LSTM cell update; ``layer`` is ``(W_x, W_h, b)``."""
    W_x, W_h, b = layer
    H = np.shape(ad.value(W_h))[0]
    if np.shape(ad.value(x_t))[-1] != np.shape(ad.value(W_x))[0]:
        raise ShapeError(f"input has {np.shape(ad.value(x_t))[-1]} features, "
                         f"layer expects {np.shape(ad.value(W_x))[0]}")
    gates = ad.matmul(x_t, W_x) + ad.matmul(h_prev, W_h) + b
    return _cell(gates, c_prev, H)


def rnn_logits(params, inputs, step_mask=None):
    """Final-step logits for a batch of sequences.

    ``inputs`` is ``(R, X, D)``. Rows shorter than ``X`` carry a ``step_mask``
    ``(R, X)``; their state is frozen past the last real step, so each row
    sees exactly its own steps.
    """
    shape = np.shape(ad.value(inputs))
    if len(shape) != 3:
        raise ShapeError(f"inputs must be (R, X, D), got {shape}")
    R, X, D = shape
    if X < 1:
        raise ShapeError("sequences need at least one step")
    if D != input_size(params):
        raise ShapeError(f"inputs have {D} features, network expects {input_size(params)}")
    H = hidden_size(params)
    if step_mask is not None:
        step_mask = np.asarray(step_mask, dtype=bool)
        if step_mask.all():
            step_mask = None
    seq = ad.swapaxes(inputs, 0, 1)
    h = None
    for layer in range(num_layers(params)):
        W_h = params[f"lstm{layer}.W_h"]
        proj = ad.matmul(seq, params[f"lstm{layer}.W_x"]) + params[f"lstm{layer}.b"]
        h = np.zeros((R, H))
        c = np.zeros((R, H))
        outs = []
        for j in range(X):
            gates = proj[j] if j == 0 else proj[j] + ad.matmul(h, W_h)
            h_new, c_new = _cell(gates, c, H)
            if step_mask is not None and not step_mask[:, j].all():
                m = step_mask[:, j:j + 1]
                h, c = ad.where(m, h_new, h), ad.where(m, c_new, c)
            else:
                h, c = h_new, c_new
            outs.append(h)
        seq = ad.stack(outs, axis=0)
    return ad.matmul(h, params["head.w"]) + params["head.b"]


def rnn_forward(params, seq):
    """Probability for one ``(D, X)`` input matrix (features by time)."""
    D, X = np.shape(ad.value(seq))
    logit = rnn_logits(params, ad.reshape(ad.swapaxes(seq, 0, 1), (1, X, D)))
    return ad.sigmoid(logit)[0]


def bce_loss(p, o):
    """Binary cross-entropy with probabilities clipped to ``[1e-12, 1 - 1e-12]``."""
    p = ad.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    return -(o * ad.log(p) + (1.0 - o) * ad.log(1.0 - p))


# ---------------------------------------------------------------------------
# checkpoints


def tensors_to_json(tensors):
    return {name: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=float).reshape(-1).tolist()}
            for name, v in tensors.items()}


def tensors_from_json(obj):
    return {name: np.asarray(t["values"], dtype=float).reshape(t["shape"]) for name, t in obj.items()}


def save_checkpoint(path, tensors, **extra):
    """JSON manifest: version, named row-major tensors, and any extra metadata."""
    doc = {"version": CHECKPOINT_VERSION, "tensors": tensors_to_json(tensors)}
    doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(tensors, metadata)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    tensors = tensors_from_json(doc.pop("tensors"))
    return tensors, doc

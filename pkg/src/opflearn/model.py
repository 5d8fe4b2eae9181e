"""Policy network mapping demand to the decision vector.

A small MLP (ELU hidden layers) reads the standardized demand vector and
emits raw scores that a logistic squash maps into the decision box:
x = lo + sigmoid(raw) * (hi - lo), with the box taken from generator and
voltage limits.  Forward, backward (vector-Jacobian) and forward-mode
(Jacobian-vector) passes are hand-rolled so the whole pipeline stays in
numpy and stays bitwise reproducible.

Checkpoints carry a format version and a fingerprint of the bus
partition they were trained against; loading onto a different partition
is refused.
"""

import numpy as np
from scipy.special import expit

CHECKPOINT_VERSION = "1"


class CheckpointError(Exception):
    pass


def _elu(a):
    # both where-branches are evaluated; clamp so exp never overflows
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _elu_prime(a):
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


class PolicyModel:
    def __init__(self, ws, bs, mean, std, lo, hi, hidden, seed, fingerprint):
        self.ws = ws
        self.bs = bs
        self.mean = mean
        self.std = std
        self.lo = lo
        self.hi = hi
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = int(seed)
        self.fingerprint = fingerprint

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.ws, self.bs))

    def __repr__(self):
        dims = [self.ws[0].shape[1]] + [w.shape[0] for w in self.ws]
        return "PolicyModel(%s, %d params)" % ("-".join(map(str, dims)),
                                               self.n_params)


def decode_bounds(grid):
    """Box [lo, hi] for the decision vector from the grid's limits."""
    part = grid.part
    lo = np.empty(part.n_decision)
    hi = np.empty(part.n_decision)
    for b in part.gen:
        k = grid.gen_of_bus[int(b)]
        lo[part.pos_in_gen[int(b)]] = grid.pg_min[k]
        hi[part.pos_in_gen[int(b)]] = grid.pg_max[k]
    lo[part.gen.size:] = grid.v_min[part.grv]
    hi[part.gen.size:] = grid.v_max[part.grv]
    return lo, hi


def init_model(grid, hidden=(200, 200), seed=0):
    """Fresh model: uniform +-1/sqrt(fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [2 * grid.n_bus] + list(hidden) + [grid.part.n_decision]
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    lo, hi = decode_bounds(grid)
    mean = np.zeros(dims[0])
    std = np.ones(dims[0])
    return PolicyModel(ws, bs, mean, std, lo, hi, hidden, seed, grid.fingerprint)


def fit_scaler(model, samples):
    """Set input standardization from training demand rows (count, 2n)."""
    samples = np.asarray(samples, dtype=float)
    model.mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    std[std < 1e-8] = 1.0  # constant inputs pass through unscaled
    model.std = std


def model_forward(model, d):
    """Decision vector and the cache the backward/forward passes reuse."""
    s = (d - model.mean) / model.std
    acts = [s]
    pre = []
    h = s
    for w, b in zip(model.ws[:-1], model.bs[:-1]):
        a = w @ h + b
        pre.append(a)
        h = _elu(a)
        acts.append(h)
    raw = model.ws[-1] @ h + model.bs[-1]
    sig = expit(raw)
    x = model.lo + sig * (model.hi - model.lo)
    cache = (acts, pre, raw, sig)
    return x, cache


def model_backward(model, cache, gx):
    """Flat dL/dparams from dL/dx (the vector-Jacobian pass)."""
    acts, pre, raw, sig = cache
    span = model.hi - model.lo
    ga = gx * sig * (1.0 - sig) * span
    grads = []
    g = ga
    for layer in range(len(model.ws) - 1, -1, -1):
        gw = np.outer(g, acts[layer])
        gb = g
        grads.append((gw, gb))
        if layer > 0:
            g = (model.ws[layer].T @ g) * _elu_prime(pre[layer - 1])
    grads.reverse()
    return pack_arrays([a for pair in grads for a in pair])


def model_jvp(model, cache, flat_dir):
    """dx for a parameter direction (the Jacobian-vector pass)."""
    acts, pre, raw, sig = cache
    shapes = []
    for w, b in zip(model.ws, model.bs):
        shapes.extend([w.shape, b.shape])
    parts = unpack_arrays(flat_dir, shapes)
    dh = np.zeros_like(acts[0])
    for layer in range(len(model.ws)):
        dw = parts[2 * layer]
        db = parts[2 * layer + 1]
        da = dw @ acts[layer] + db + model.ws[layer] @ dh
        if layer < len(model.ws) - 1:
            dh = _elu_prime(pre[layer]) * da
        else:
            draw = da
    span = model.hi - model.lo
    return sig * (1.0 - sig) * span * draw


def pack_arrays(arrays):
    return np.concatenate([a.ravel() for a in arrays])


def unpack_arrays(flat, shapes):
    out = []
    at = 0
    for shp in shapes:
        size = int(np.prod(shp))
        out.append(flat[at:at + size].reshape(shp))
        at += size
    return out


def pack_params(model):
    return pack_arrays([a for w, b in zip(model.ws, model.bs) for a in (w, b)])


def unpack_params(model, flat):
    shapes = []
    for w, b in zip(model.ws, model.bs):
        shapes.extend([w.shape, b.shape])
    parts = unpack_arrays(np.asarray(flat, float), shapes)
    for layer in range(len(model.ws)):
        model.ws[layer] = parts[2 * layer].copy()
        model.bs[layer] = parts[2 * layer + 1].copy()


def save_checkpoint(model, path):
    payload = {
        "version": np.array(CHECKPOINT_VERSION),
        "fingerprint": np.array(model.fingerprint),
        "hidden": np.array(model.hidden, dtype=int),
        "seed": np.array(model.seed),
        "mean": model.mean, "std": model.std,
        "lo": model.lo, "hi": model.hi,
    }
    for i, (w, b) in enumerate(zip(model.ws, model.bs)):
        payload["w%d" % i] = w
        payload["b%d" % i] = b
    np.savez(path, **payload)


def load_checkpoint(path, grid=None):
    with np.load(path, allow_pickle=False) as zf:
        if str(zf["version"]) != CHECKPOINT_VERSION:
            raise CheckpointError("unsupported checkpoint version %s"
                                  % zf["version"])
        fingerprint = str(zf["fingerprint"])
        if grid is not None and fingerprint != grid.fingerprint:
            raise CheckpointError(
                "checkpoint partition %s does not match grid %s"
                % (fingerprint, grid.fingerprint))
        hidden = tuple(int(h) for h in zf["hidden"])
        ws, bs = [], []
        i = 0
        while "w%d" % i in zf.files:
            ws.append(zf["w%d" % i].copy())
            bs.append(zf["b%d" % i].copy())
            i += 1
        return PolicyModel(ws, bs, zf["mean"].copy(), zf["std"].copy(),
                           zf["lo"].copy(), zf["hi"].copy(), hidden,
                           int(zf["seed"]), fingerprint)

"""Minimal deterministic dense-tensor layer.

Values are numpy arrays (float32 by default, float64 in test mode). Each
primitive returns a Var whose backward closure produces exact input and
parameter gradients; a forward pass is an explicit recorded sequence of
Vars, replayed in reverse for backprop. No general expression graph: the
architecture is fixed and small, so this keeps determinism trivial.
"""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Switch the storage dtype for newly created parameters (test mode)."""
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    DEFAULT_DTYPE = dtype


class Var:
    """A value on the tape: ndarray payload plus a backward closure."""

    __slots__ = ("value", "grad", "parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype)
        else:
            self.grad += g


def leaf(value, name=None) -> Var:
    return Var(value, name=name)


def backward(output: Var, seed_grad) -> None:
    """Accumulate gradients of `seed_grad`-weighted output into all leaves.

    Walks the recorded sequence in reverse topological order; repeated
    calls on outputs that share leaves accumulate into the same .grad.
    """
    seed = np.asarray(seed_grad, dtype=output.value.dtype)
    if seed.shape != output.value.shape:
        raise ValueError(f"seed gradient shape {seed.shape} does not match "
                         f"output shape {output.value.shape}")
    order = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    output.add_grad(seed)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _check_2d(x: Var, who: str) -> None:
    if x.value.ndim != 2:
        raise ValueError(f"{who} expects a 2-D input, got shape {x.shape}")


def affine(x: Var, w: Var, b: Var) -> Var:
    """x @ w + b for x: (R, Cin), w: (Cin, Cout), b: (Cout,)."""
    _check_2d(x, "affine")
    if x.value.shape[1] != w.value.shape[0]:
        raise ValueError(
            f"affine shape mismatch: x {x.shape} vs w {w.shape}"
            + (f" (param {w.name})" if w.name else ""))
    out = Var(x.value @ w.value + b.value, parents=(x, w, b))

    def _bwd(g):
        x.add_grad(g @ w.value.T)
        w.add_grad(x.value.T @ g)
        b.add_grad(g.sum(axis=0, dtype=np.float64).astype(b.value.dtype))
    out._backward = _bwd
    return out


def relu(x: Var) -> Var:
    mask = x.value > 0
    out = Var(np.where(mask, x.value, 0.0).astype(x.value.dtype), parents=(x,))
    out._backward = lambda g: x.add_grad(g * mask)
    return out


def sigmoid(x: Var) -> Var:
    # exp overflow for very negative inputs saturates to inf and the
    # quotient to exactly 0.0, which is the correct limit; silence it
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-x.value))
    y = y.astype(x.value.dtype)
    out = Var(y, parents=(x,))
    out._backward = lambda g: x.add_grad(g * y * (1.0 - y))
    return out


def add(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, parents=(a, b))

    def _bwd(g):
        a.add_grad(_unbroadcast(g, a.value.shape))
        b.add_grad(_unbroadcast(g, b.value.shape))
    out._backward = _bwd
    return out


def mul(a: Var, b: Var) -> Var:
    out = Var(a.value * b.value, parents=(a, b))

    def _bwd(g):
        a.add_grad(_unbroadcast(g * b.value, a.value.shape))
        b.add_grad(_unbroadcast(g * a.value, b.value.shape))
    out._backward = _bwd
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.astype(np.result_type(g))


def concat(parts, axis: int = 1) -> Var:
    values = [p.value for p in parts]
    out = Var(np.concatenate(values, axis=axis), parents=tuple(parts))
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def _bwd(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            part.add_grad(g[tuple(sl)])
    out._backward = _bwd
    return out


def row_mean_pool(x: Var) -> Var:
    """Mean over rows of (N, C) -> (C,); accumulates in 64-bit."""
    _check_2d(x, "row_mean_pool")
    n = x.value.shape[0]
    out = Var(x.value.mean(axis=0, dtype=np.float64).astype(x.value.dtype),
              parents=(x,))
    out._backward = lambda g: x.add_grad(
        np.broadcast_to(g / n, x.value.shape).astype(x.value.dtype))
    return out


def row_max_pool(x: Var) -> Var:
    """Max over rows of (N, C) -> (C,); ties route to the first arg-max."""
    _check_2d(x, "row_max_pool")
    arg = np.argmax(x.value, axis=0)
    out = Var(x.value[arg, np.arange(x.value.shape[1])], parents=(x,))

    def _bwd(g):
        gx = np.zeros_like(x.value)
        gx[arg, np.arange(x.value.shape[1])] = g
        x.add_grad(gx)
    out._backward = _bwd
    return out


def mean_over_channels(x: Var) -> Var:
    """Mean over columns of (N, C) -> (N, 1)."""
    _check_2d(x, "mean_over_channels")
    c = x.value.shape[1]
    out = Var(x.value.mean(axis=1, keepdims=True, dtype=np.float64)
              .astype(x.value.dtype), parents=(x,))
    out._backward = lambda g: x.add_grad(
        np.broadcast_to(g / c, x.value.shape).astype(x.value.dtype))
    return out


def max_over_channels(x: Var) -> Var:
    """Max over columns of (N, C) -> (N, 1); first arg-max on ties."""
    _check_2d(x, "max_over_channels")
    arg = np.argmax(x.value, axis=1)
    rows = np.arange(x.value.shape[0])
    out = Var(x.value[rows, arg][:, None], parents=(x,))

    def _bwd(g):
        gx = np.zeros_like(x.value)
        gx[rows, arg] = g[:, 0]
        x.add_grad(gx)
    out._backward = _bwd
    return out


def l2_normalize(v: Var, eps: float = 0.0) -> Var:
    """v / ||v|| for a 1-D vector; the gradient is tangent to the output."""
    if v.value.ndim != 1:
        raise ValueError(f"l2_normalize expects a vector, got {v.shape}")
    norm = float(np.linalg.norm(v.value.astype(np.float64)))
    if norm <= eps or norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    y = (v.value / norm).astype(v.value.dtype)
    out = Var(y, parents=(v,))

    def _bwd(g):
        v.add_grad(((g - y * np.dot(y, g)) / norm).astype(v.value.dtype))
    out._backward = _bwd
    return out


def softmax_with_temperature(logits: Var, tau: float) -> Var:
    """Softmax of logits / tau for a 1-D logit vector."""
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    z = logits.value.astype(np.float64) / tau
    z -= z.max()
    e = np.exp(z)
    p = (e / e.sum()).astype(logits.value.dtype)
    out = Var(p, parents=(logits,))

    def _bwd(g):
        inner = np.dot(p, g)
        logits.add_grad(((g - inner) * p / tau).astype(logits.value.dtype))
    out._backward = _bwd
    return out


def reshape(x: Var, shape) -> Var:
    out = Var(x.value.reshape(shape), parents=(x,))
    out._backward = lambda g: x.add_grad(g.reshape(x.value.shape))
    return out


def gather_rows(x: Var, idx: np.ndarray) -> Var:
    """Row gather out[i] = x[idx[i]]; backward scatter-adds."""
    _check_2d(x, "gather_rows")
    idx = np.asarray(idx, dtype=np.int64)
    out = Var(x.value[idx], parents=(x,))

    def _bwd(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        x.add_grad(gx)
    out._backward = _bwd
    return out


def group_max(x: Var, n_groups: int, group_size: int) -> Var:
    """Max over contiguous row groups: (n*k, C) -> (n, C), first arg-max ties."""
    _check_2d(x, "group_max")
    c = x.value.shape[1]
    if x.value.shape[0] != n_groups * group_size:
        raise ValueError("group_max: rows != n_groups * group_size")
    blocks = x.value.reshape(n_groups, group_size, c)
    arg = np.argmax(blocks, axis=1)  # (n, C)
    gi = np.arange(n_groups)[:, None]
    ci = np.arange(c)[None, :]
    out = Var(blocks[gi, arg, ci], parents=(x,))

    def _bwd(g):
        gb = np.zeros_like(blocks)
        gb[gi, arg, ci] = g
        x.add_grad(gb.reshape(x.value.shape))
    out._backward = _bwd
    return out


def interpolate_rows(x: Var, idx: np.ndarray, weights: np.ndarray) -> Var:
    """Weighted combination out[i] = sum_t w[i,t] * x[idx[i,t]].

    idx and weights are fixed (geometry-derived); gradients flow into x only.
    """
    _check_2d(x, "interpolate_rows")
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(weights, dtype=x.value.dtype)
    out = Var(np.einsum("ntc,nt->nc", x.value[idx], w), parents=(x,))

    def _bwd(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx.ravel(), (g[:, None, :] * w[:, :, None])
                  .reshape(-1, x.value.shape[1]))
        x.add_grad(gx)
    out._backward = _bwd
    return out


_PRIMITIVES = {
    "affine": affine,
    "relu": relu,
    "sigmoid": sigmoid,
    "row-max-pool": row_max_pool,
    "row-mean-pool": row_mean_pool,
    "l2-normalize": l2_normalize,
    "concat": concat,
    "softmax-with-temperature": softmax_with_temperature,
}


def primitive_forward_backward(kind: str, *inputs, **kwargs):
    """Dispatch a named primitive; returns the output Var.

    The Var carries the backward contract: engine.backward(out, g) routes
    gradients to every input leaf.
    """
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind {kind!r}; "
                         f"known: {sorted(_PRIMITIVES)}")
    return _PRIMITIVES[kind](*inputs, **kwargs)


@dataclass
class ModelParameters:
    """Named trainable tensors plus Adam moment state."""

    values: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.values[name] = np.asarray(value, dtype=DEFAULT_DTYPE)
        self.adam_m[name] = np.zeros_like(self.values[name])
        self.adam_v[name] = np.zeros_like(self.values[name])

    def leaves(self) -> dict:
        """Fresh leaf Vars wrapping the parameter arrays, grads cleared."""
        return {name: leaf(v, name=name) for name, v in self.values.items()}

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            values={k: v.copy() for k, v in self.values.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step_count=self.step_count,
        )


def glorot_uniform(rng: np.random.Generator, fan_in: int,
                   fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(DEFAULT_DTYPE)


def harvest_grads(leaves: dict, scale: float = 1.0) -> dict:
    """Collect accumulated leaf gradients as a name -> array map."""
    out = {}
    for name, lf in leaves.items():
        if lf.grad is not None:
            out[name] = lf.grad * scale
    return out


def adam_step(params: ModelParameters, grads: dict, lr: float = 0.01,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place; t advances once."""
    for name, g in grads.items():
        if name not in params.values:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    t = params.step_count + 1
    for name, g in grads.items():
        g = g.astype(params.values[name].dtype)
        m = params.adam_m[name]
        v = params.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        params.values[name] -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(
            params.values[name].dtype)
    params.step_count = t


def gradient_check(loss_and_grad_fn, params: dict, eps: float = 1e-5,
                   n_samples: int = 200, rng: np.random.Generator = None,
                   mode: str = "central") -> float:
    """Max relative error between analytic gradients and central differences.

    loss_and_grad_fn maps a name -> array dict to (loss, grads dict) and must
    be deterministic. Finite differences run on float64 copies regardless of
    the parameter dtype, so the reference is not noise-limited. Coordinates
    where two step sizes disagree wildly (ReLU/max kinks) are skipped and
    resampled.

    Relative error per coordinate: |analytic - numeric| /
    max(1e-8, |analytic| + |numeric|).
    """
    if mode != "central":
        raise ValueError("only central differences are implemented")
    if rng is None:
        rng = np.random.default_rng(0)
    _, grads = loss_and_grad_fn(params)
    p64 = {k: v.astype(np.float64) for k, v in params.items()}

    def loss64(p):
        return float(loss_and_grad_fn(p)[0])

    base_loss = loss64(p64)
    coords = []
    for name in sorted(grads):
        for flat in range(params[name].size):
            coords.append((name, flat))
    if not coords:
        return 0.0

    max_err = 0.0
    checked = 0
    attempts = 0
    budget = 4 * n_samples
    while checked < min(n_samples, len(coords)) and attempts < budget:
        attempts += 1
        name, flat = coords[int(rng.integers(len(coords)))]
        base = p64[name].flat[flat]

        def at(step):
            p64[name].flat[flat] = base + step
            val = loss64(p64)
            p64[name].flat[flat] = base
            return val

        up, down = at(eps), at(-eps)
        up2, down2 = at(2.0 * eps), at(-2.0 * eps)
        if not all(np.isfinite(v) for v in (up, down, up2, down2)):
            continue
        num = (up - down) / (2.0 * eps)
        num2 = (up2 - down2) / (4.0 * eps)
        fwd = (up - base_loss) / eps
        bwd = (base_loss - down) / eps
        # a max/relu crease inside the stencil shows up either as step-size
        # dependence or as one-sided slopes that disagree; skip and resample
        scale = max(abs(num), abs(num2), 1e-4)
        if abs(num - num2) > 0.25 * scale:
            continue
        if abs(fwd - bwd) > 0.25 * max(abs(fwd), abs(bwd), 1e-4):
            continue
        ana = float(grads[name].flat[flat])
        err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
        max_err = max(max_err, err)
        checked += 1
    if checked == 0:
        raise RuntimeError("gradient check could not evaluate any coordinate")
    return max_err

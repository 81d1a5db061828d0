"""Reverse-mode automatic differentiation on a recorded operation tape.

All values are float64 numpy arrays wrapped in :class:`Var`.  Ops append
a backward closure to the owning :class:`Tape` as they execute, so the
record order is already topological; ``Tape.backward`` just walks it in
reverse, accumulating gradients into the participating variables and
flushing leaf gradients into their :class:`ParamStore` slots.

The primitive set is exactly what the decoder needs: dense linear
algebra, the usual pointwise nonlinearities in stabilized form, a fused
LSTM cell, inverted dropout, 3x3-convolution support via im2col, and
numerically safe cross-entropy / binary cross-entropy on logits.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; same seed gives the same stream everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64(0))
    rng.bit_generator.state = state
    return rng


class ParamStore:
    """Named parameter tensors with parallel same-shaped gradient slots."""

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> None:
        if name in self.values:
            raise ValueError(f"parameter {name!r} already present")
        arr = np.asarray(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        if frozen:
            self.frozen.add(name)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def trainable_names(self) -> list[str]:
        return [n for n in self.values if n not in self.frozen]

    def scale_grads(self, factor: float) -> None:
        for g in self.grads.values():
            g *= factor


class Var:
    """A tensor value on a tape; ``grad`` is allocated lazily."""

    __slots__ = ("data", "grad", "requires")

    def __init__(self, data, requires: bool) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires = requires

    @property
    def shape(self):
        return self.data.shape


def _acc(var: Var, delta) -> None:
    if not var.requires:
        return
    if var.grad is None:
        var.grad = np.zeros_like(var.data)
    var.grad += delta


def _grad_or_zero(var: Var) -> np.ndarray:
    return var.grad if var.grad is not None else np.zeros_like(var.data)


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeMismatch(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class Tape:
    """One computation graph; single-threaded, discarded after backward."""

    def __init__(self) -> None:
        self._nodes: list[tuple[tuple[Var, ...], callable]] = []
        self._param_leaves: list[tuple[Var, ParamStore, str]] = []

    # --- leaves ---

    def const(self, data) -> Var:
        return Var(data, requires=False)

    def leaf(self, data) -> Var:
        return Var(data, requires=True)

    def param(self, store: ParamStore, name: str) -> Var:
        """Wrap a stored parameter; frozen entries enter as constants."""
        frozen = name in store.frozen
        var = Var(store.values[name], requires=not frozen)
        if not frozen:
            self._param_leaves.append((var, store, name))
        return var

    def _record(self, outputs: tuple[Var, ...], backward) -> None:
        self._nodes.append((outputs, backward))

    def _unary(self, x: Var, out_data, backward) -> Var:
        out = Var(out_data, requires=x.requires)
        if x.requires:
            self._record((out,), backward(out))
        return out

    # --- arithmetic ---

    def add(self, a: Var, b: Var) -> Var:
        _check(a.shape == b.shape, "add", a.shape, b.shape)
        out = Var(a.data + b.data, a.requires or b.requires)
        if out.requires:
            def bwd():
                g = out.grad
                _acc(a, g)
                _acc(b, g)
            self._record((out,), bwd)
        return out

    def add_n(self, terms: list[Var]) -> Var:
        first = terms[0]
        for t in terms[1:]:
            _check(t.shape == first.shape, "add_n", first.shape, t.shape)
        out = Var(sum(t.data for t in terms), any(t.requires for t in terms))
        if out.requires:
            def bwd():
                g = out.grad
                for t in terms:
                    _acc(t, g)
            self._record((out,), bwd)
        return out

    def sub(self, a: Var, b: Var) -> Var:
        _check(a.shape == b.shape, "sub", a.shape, b.shape)
        out = Var(a.data - b.data, a.requires or b.requires)
        if out.requires:
            def bwd():
                g = out.grad
                _acc(a, g)
                _acc(b, -g)
            self._record((out,), bwd)
        return out

    def mul(self, a: Var, b: Var) -> Var:
        _check(a.shape == b.shape, "mul", a.shape, b.shape)
        out = Var(a.data * b.data, a.requires or b.requires)
        if out.requires:
            def bwd():
                g = out.grad
                _acc(a, g * b.data)
                _acc(b, g * a.data)
            self._record((out,), bwd)
        return out

    def scale(self, x: Var, k: float) -> Var:
        return self._unary(x, x.data * k, lambda out: lambda: _acc(x, out.grad * k))

    def scale_var(self, x: Var, s: Var) -> Var:
        """Multiply a tensor by a scalar variable."""
        _check(s.data.ndim == 0, "scale_var", s.shape)
        out = Var(x.data * s.data, x.requires or s.requires)
        if out.requires:
            def bwd():
                g = out.grad
                _acc(x, g * s.data)
                _acc(s, np.sum(g * x.data))
            self._record((out,), bwd)
        return out

    def add_scalar(self, x: Var, s: Var) -> Var:
        """Add a scalar variable to every entry."""
        _check(s.data.ndim == 0, "add_scalar", s.shape)
        out = Var(x.data + s.data, x.requires or s.requires)
        if out.requires:
            def bwd():
                g = out.grad
                _acc(x, g)
                _acc(s, np.sum(g))
            self._record((out,), bwd)
        return out

    def matmul(self, a: Var, b: Var) -> Var:
        ad, bd = a.data, b.data
        _check(ad.ndim in (1, 2) and bd.ndim in (1, 2), "matmul", a.shape, b.shape)
        _check(ad.shape[-1] == (bd.shape[0] if bd.ndim >= 1 else 0), "matmul", a.shape, b.shape)
        out = Var(np.matmul(ad, bd), a.requires or b.requires)
        if out.requires:
            def bwd():
                g = out.grad
                if ad.ndim == 2 and bd.ndim == 2:
                    _acc(a, g @ bd.T)
                    _acc(b, ad.T @ g)
                elif ad.ndim == 2 and bd.ndim == 1:
                    _acc(a, np.outer(g, bd))
                    _acc(b, ad.T @ g)
                elif ad.ndim == 1 and bd.ndim == 2:
                    _acc(a, bd @ g)
                    _acc(b, np.outer(ad, g))
                else:
                    _acc(a, g * bd)
                    _acc(b, g * ad)
            self._record((out,), bwd)
        return out

    def affine(self, x: Var, w: Var, b: Var) -> Var:
        """w @ x + b for a vector x."""
        _check(x.data.ndim == 1 and w.data.ndim == 2, "affine", w.shape, x.shape)
        _check(w.shape[1] == x.shape[0] and b.shape == (w.shape[0],), "affine",
               w.shape, x.shape, b.shape)
        out = Var(w.data @ x.data + b.data, x.requires or w.requires or b.requires)
        if out.requires:
            def bwd():
                g = out.grad
                _acc(w, np.outer(g, x.data))
                _acc(b, g)
                _acc(x, w.data.T @ g)
            self._record((out,), bwd)
        return out

    def add_colvec(self, m: Var, v: Var) -> Var:
        """Add a length-m vector to every column of an (m, n) matrix."""
        _check(m.data.ndim == 2 and v.shape == (m.shape[0],), "add_colvec", m.shape, v.shape)
        out = Var(m.data + v.data[:, None], m.requires or v.requires)
        if out.requires:
            def bwd():
                g = out.grad
                _acc(m, g)
                _acc(v, g.sum(axis=1))
            self._record((out,), bwd)
        return out

    # --- nonlinearities ---

    def tanh(self, x: Var) -> Var:
        t = np.tanh(x.data)
        return self._unary(x, t, lambda out: lambda: _acc(x, out.grad * (1.0 - t * t)))

    def sigmoid(self, x: Var) -> Var:
        s = _sigmoid(x.data)
        return self._unary(x, s, lambda out: lambda: _acc(x, out.grad * s * (1.0 - s)))

    def softmax(self, x: Var) -> Var:
        """Stabilized softmax over a 1-D vector."""
        _check(x.data.ndim == 1, "softmax", x.shape)
        z = x.data - x.data.max()
        e = np.exp(z)
        y = e / e.sum()

        def bwd_factory(out):
            def bwd():
                g = out.grad
                _acc(x, y * (g - np.dot(y, g)))
            return bwd

        return self._unary(x, y, bwd_factory)

    def maximum_const(self, x: Var, floor: float) -> Var:
        mask = x.data > floor
        return self._unary(
            x, np.maximum(x.data, floor),
            lambda out: lambda: _acc(x, out.grad * mask)
        )

    def reciprocal(self, x: Var) -> Var:
        inv = 1.0 / x.data
        return self._unary(x, inv, lambda out: lambda: _acc(x, -out.grad * inv * inv))

    # --- restructuring ---

    def concat(self, parts: list[Var]) -> Var:
        for p in parts:
            _check(p.data.ndim == 1, "concat", p.shape)
        out = Var(np.concatenate([p.data for p in parts]), any(p.requires for p in parts))
        if out.requires:
            sizes = [p.data.shape[0] for p in parts]
            def bwd():
                g = out.grad
                off = 0
                for p, size in zip(parts, sizes):
                    _acc(p, g[off:off + size])
                    off += size
            self._record((out,), bwd)
        return out

    def reshape(self, x: Var, shape: tuple[int, ...]) -> Var:
        orig = x.data.shape
        return self._unary(
            x, x.data.reshape(shape),
            lambda out: lambda: _acc(x, out.grad.reshape(orig))
        )

    def row(self, m: Var, i: int) -> Var:
        """Extract row i of a matrix; gradient flows into that row only."""
        _check(m.data.ndim == 2, "row", m.shape)
        if not 0 <= i < m.shape[0]:
            raise IndexError(f"row {i} out of range for shape {m.shape}")

        def bwd_factory(out):
            def bwd():
                if m.grad is None:
                    m.grad = np.zeros_like(m.data)
                m.grad[i] += out.grad
            return bwd

        return self._unary(m, m.data[i].copy(), bwd_factory)

    # --- reductions ---

    def sum_all(self, x: Var) -> Var:
        return self._unary(
            x, np.sum(x.data),
            lambda out: lambda: _acc(x, np.broadcast_to(out.grad, x.data.shape))
        )

    def mean_all(self, x: Var) -> Var:
        n = x.data.size
        return self._unary(
            x, np.mean(x.data),
            lambda out: lambda: _acc(x, np.broadcast_to(out.grad / n, x.data.shape))
        )

    # --- structured primitives ---

    def dropout(self, x: Var, rate: float, rng: np.random.Generator,
                training: bool) -> tuple[Var, np.ndarray]:
        """Inverted dropout; identity (and no rng draw) when inactive."""
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        if not training or rate == 0.0:
            return x, np.ones_like(x.data)
        keep = (rng.random(x.data.shape) >= rate).astype(np.float64)
        factor = keep / (1.0 - rate)
        out = self._unary(x, x.data * factor,
                          lambda o: lambda: _acc(x, o.grad * factor))
        return out, keep

    def lstm_step(self, x: Var, h: Var, c: Var,
                  w_x: Var, w_h: Var, b: Var) -> tuple[Var, Var]:
        """One LSTM cell step; gate blocks ordered (input, forget, cell, output)."""
        hid = h.shape[0]
        _check(w_x.shape == (4 * hid, x.shape[0]), "lstm_step", w_x.shape, x.shape)
        _check(w_h.shape == (4 * hid, hid) and b.shape == (4 * hid,), "lstm_step",
               w_h.shape, b.shape)
        z = w_x.data @ x.data + w_h.data @ h.data + b.data
        gi = _sigmoid(z[:hid])
        gf = _sigmoid(z[hid:2 * hid])
        gg = np.tanh(z[2 * hid:3 * hid])
        go = _sigmoid(z[3 * hid:])
        c2_data = gf * c.data + gi * gg
        tc = np.tanh(c2_data)
        requires = any(v.requires for v in (x, h, c, w_x, w_h, b))
        c2 = Var(c2_data, requires)
        h2 = Var(go * tc, requires)
        if requires:
            def bwd():
                gh = _grad_or_zero(h2)
                gc = _grad_or_zero(c2) + gh * go * (1.0 - tc * tc)
                dz = np.concatenate([
                    gc * gg * gi * (1.0 - gi),
                    gc * c.data * gf * (1.0 - gf),
                    gc * gi * (1.0 - gg * gg),
                    gh * tc * go * (1.0 - go),
                ])
                _acc(w_x, np.outer(dz, x.data))
                _acc(w_h, np.outer(dz, h.data))
                _acc(b, dz)
                _acc(x, w_x.data.T @ dz)
                _acc(h, w_h.data.T @ dz)
                _acc(c, gc * gf)
            self._record((h2, c2), bwd)
        return h2, c2

    # --- losses on logits ---

    def cross_entropy_logits(self, z: Var, target: int, clamp: float = 30.0) -> Var:
        """-log softmax(z)[target], with logits clamped to +-clamp."""
        _check(z.data.ndim == 1, "cross_entropy_logits", z.shape)
        zc = np.clip(z.data, -clamp, clamp)
        m = zc.max()
        lse = m + np.log(np.sum(np.exp(zc - m)))
        out = Var(lse - zc[target], z.requires)
        if z.requires:
            inside = (np.abs(z.data) < clamp).astype(np.float64)
            def bwd():
                p = np.exp(zc - lse)
                p[target] -= 1.0
                _acc(z, out.grad * p * inside)
            self._record((out,), bwd)
        return out

    def bce_logits_mean(self, z: Var, targets: np.ndarray, clamp: float = 30.0) -> Var:
        """Mean over entries of binary cross-entropy against 0/1 targets.

        Computed directly from logits (never sigmoid-then-log):
        max(z, 0) - z*y + log1p(exp(-|z|)).
        """
        _check(z.data.ndim == 1 and targets.shape == z.data.shape,
               "bce_logits_mean", z.shape, targets.shape)
        y = np.asarray(targets, dtype=np.float64)
        zc = np.clip(z.data, -clamp, clamp)
        per = np.maximum(zc, 0.0) - zc * y + np.log1p(np.exp(-np.abs(zc)))
        out = Var(np.mean(per), z.requires)
        if z.requires:
            inside = (np.abs(z.data) < clamp).astype(np.float64)
            n = z.data.size
            def bwd():
                _acc(z, out.grad * (_sigmoid(zc) - y) * inside / n)
            self._record((out,), bwd)
        return out

    # --- convolution support ---

    def im2col3x3(self, x: Var) -> Var:
        """(C, H, W) -> (C*9, H*W) patch matrix for a zero-padded 3x3 window."""
        _check(x.data.ndim == 3, "im2col3x3", x.shape)
        ch, hh, ww = x.data.shape
        xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
        cols = np.empty((ch, 9, hh * ww), dtype=np.float64)
        for di in range(3):
            for dj in range(3):
                cols[:, di * 3 + dj, :] = xp[:, di:di + hh, dj:dj + ww].reshape(ch, -1)
        out = Var(cols.reshape(ch * 9, hh * ww), x.requires)
        if x.requires:
            def bwd():
                g = out.grad.reshape(ch, 9, hh * ww)
                dxp = np.zeros_like(xp)
                for di in range(3):
                    for dj in range(3):
                        dxp[:, di:di + hh, dj:dj + ww] += g[:, di * 3 + dj, :].reshape(ch, hh, ww)
                _acc(x, dxp[:, 1:hh + 1, 1:ww + 1])
            self._record((out,), bwd)
        return out

    def avgpool2(self, x: Var) -> Var:
        """2x2 average pooling; spatial dims must be even."""
        _check(x.data.ndim == 3, "avgpool2", x.shape)
        ch, hh, ww = x.data.shape
        _check(hh % 2 == 0 and ww % 2 == 0, "avgpool2", x.shape)
        pooled = x.data.reshape(ch, hh // 2, 2, ww // 2, 2).mean(axis=(2, 4))

        def bwd_factory(out):
            def bwd():
                g = np.repeat(np.repeat(out.grad, 2, axis=1), 2, axis=2) * 0.25
                _acc(x, g)
            return bwd

        return self._unary(x, pooled, bwd_factory)

    # --- reverse pass ---

    def backward(self, loss: Var) -> None:
        """Accumulate d(loss)/d(leaf) for every reachable leaf."""
        _check(loss.data.ndim == 0, "backward", loss.shape)
        loss.grad = np.ones_like(loss.data)
        for outputs, bwd in reversed(self._nodes):
            if any(o.grad is not None for o in outputs):
                bwd()
        for var, store, name in self._param_leaves:
            if var.grad is not None:
                store.grads[name] += var.grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def grad_check(f, store: ParamStore, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the store to a scalar loss and must leave its analytic
    gradients in ``store.grads`` (built on a fresh tape per call, with any
    dropout masks held fixed across calls).  Frozen entries are skipped:
    they are constants by contract, so their analytic gradient is zero by
    construction and no finite difference is taken.
    """
    store.zero_grads()
    base = float(f(store))
    if not np.isfinite(base):
        raise NonFiniteLoss(f"f(params) = {base}")
    analytic = {name: store.grads[name].copy() for name in store.trainable_names()}

    worst = 0.0
    for name in store.trainable_names():
        values = store.values[name].reshape(-1)
        grads = analytic[name].reshape(-1)
        for i in range(values.size):
            orig = values[i]
            values[i] = orig + eps
            f_plus = float(f(store))
            values[i] = orig - eps
            f_minus = float(f(store))
            values[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteLoss(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = grads[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst

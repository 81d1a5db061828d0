"""Radical-aware attention decoder with a toy convolutional encoder.

Per decode step: the previous character's learnable embedding is fused
with its binary radical presence row (projected, scaled, dropped out,
then concatenated with the raw row), an LSTM cell turns the fusion into
a contextual query, 2D attention over the visual feature map produces a
glimpse, a moment-matched Gaussian re-mask of the attention map produces
a refined glimpse, and the element-wise sum of the two feeds both the
character head and the radical-presence head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape, Var
from .errors import DegenerateAttention, IndexOutOfRange, ShapeMismatch

VARIANCE_FLOOR = 1e-4


@dataclass
class ModelConfig:
    d_emb: int
    d_hidden: int
    d_vis: int
    feat_h: int
    feat_w: int
    num_radicals: int
    num_classes: int
    dropout_rate: float = 0.1
    max_decode_len: int = 8
    heads_input: str = "fused"   # "fused" = glimpse + refined, "glimpse" = attention output only
    use_cvfm: bool = True        # fuse radical rows into the embedding
    re_zero: bool = False        # ablation: radical row forced to zero
    use_scaler: bool = True      # ablation: learnable scalar on the embedding

    def __post_init__(self) -> None:
        for name in ("d_emb", "d_hidden", "d_vis", "feat_h", "feat_w",
                     "num_radicals", "num_classes", "max_decode_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.heads_input not in ("fused", "glimpse"):
            raise ValueError(f"heads_input must be 'fused' or 'glimpse', got {self.heads_input!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def lstm_input_size(self) -> int:
        return self.d_emb + self.num_radicals if self.use_cvfm else self.d_emb


def init_params(config: ModelConfig, bor_matrix: np.ndarray,
                rng: np.random.Generator, pad_id: int | None = None) -> ParamStore:
    """Seeded uniform(-a, a) init with a = 1/sqrt(fan_in); radical rows frozen."""
    if bor_matrix.shape != (config.num_classes, config.num_radicals):
        raise ShapeMismatch(
            f"bor matrix {bor_matrix.shape} vs config "
            f"({config.num_classes}, {config.num_radicals})"
        )
    store = ParamStore()

    def uniform(shape, fan_in):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    embed = uniform((config.num_classes, config.d_emb), config.d_emb)
    if pad_id is not None:
        embed[pad_id] = 0.0
    store.add("char_embed", embed)
    store.add("bor_rows", np.asarray(bor_matrix, dtype=np.float64), frozen=True)
    store.add("radical_proj", uniform((config.d_emb, config.num_radicals), config.num_radicals))
    store.add("embed_scale", np.asarray(1.0))

    d_in, d_h = config.lstm_input_size, config.d_hidden
    store.add("lstm_wx", uniform((4 * d_h, d_in), d_in))
    store.add("lstm_wh", uniform((4 * d_h, d_h), d_h))
    lstm_b = np.zeros(4 * d_h)
    lstm_b[d_h:2 * d_h] = 1.0  # forget gate open at init
    store.add("lstm_b", lstm_b)

    d_att = config.d_hidden
    store.add("attn_query", uniform((d_att, config.d_hidden), config.d_hidden))
    store.add("attn_key", uniform((d_att, config.d_vis), config.d_vis))
    store.add("attn_score", uniform((d_att,), d_att))
    store.add("refine_proj", uniform((config.d_vis, config.d_vis), config.d_vis))
    store.add("holistic_proj", uniform((config.d_hidden, config.d_vis), config.d_vis))

    store.add("cls_w", uniform((config.num_classes, config.d_vis), config.d_vis))
    store.add("cls_b", np.zeros(config.num_classes))
    store.add("rad_w", uniform((config.num_radicals, config.d_vis), config.d_vis))
    store.add("rad_b", np.zeros(config.num_radicals))

    store.add("enc1_w", uniform((config.d_vis, 9), 9))
    store.add("enc1_b", np.zeros(config.d_vis))
    store.add("enc2_w", uniform((config.d_vis, config.d_vis * 9), config.d_vis * 9))
    store.add("enc2_b", np.zeros(config.d_vis))
    store.add("enc_proj_w", uniform((config.d_vis, config.d_vis), config.d_vis))
    store.add("enc_proj_b", np.zeros(config.d_vis))
    return store


class ParamView:
    """Per-tape cache of parameter leaves so each tensor is wrapped once."""

    def __init__(self, tape: Tape, store: ParamStore) -> None:
        self.tape = tape
        self.store = store
        self._cache: dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        var = self._cache.get(name)
        if var is None:
            var = self.tape.param(self.store, name)
            self._cache[name] = var
        return var


def fuse_prev_char(tape: Tape, params: ParamView, config: ModelConfig, y_prev: int,
                   rng: np.random.Generator | None, training: bool) -> Var:
    """Fused input vector for the LSTM from the previous predicted class.

    Fusion is concat(dropout(radical_proj @ r + scale * embedding), r); the
    raw radical row is concatenated untouched, so its block survives both
    train and eval modes verbatim.
    """
    if not 0 <= y_prev < config.num_classes:
        raise IndexOutOfRange(f"class id {y_prev} not in [0, {config.num_classes})")
    o = tape.row(params["char_embed"], y_prev)
    if not config.use_cvfm:
        return o
    if config.re_zero:
        r = tape.const(np.zeros(config.num_radicals))
    else:
        r = tape.row(params["bor_rows"], y_prev)
    scaled = tape.scale_var(o, params["embed_scale"]) if config.use_scaler else o
    pre = tape.add(tape.matmul(params["radical_proj"], r), scaled)
    dropped, _ = tape.dropout(pre, config.dropout_rate, rng, training)
    return tape.concat([dropped, r])


def attend_2d(tape: Tape, params: ParamView, h_prime: Var, v2d: Var,
              keys: Var | None = None) -> tuple[Var, Var]:
    """Additive 2D attention over all spatial positions.

    ``v2d`` is the feature map flattened to (channels, positions).  Returns
    the glimpse vector and the attention weights (sum to 1).
    """
    if keys is None:
        keys = tape.matmul(params["attn_key"], v2d)
    query = tape.matmul(params["attn_query"], h_prime)
    scores = tape.matmul(params["attn_score"], tape.tanh(tape.add_colvec(keys, query)))
    alpha = tape.softmax(scores)
    glimpse = tape.matmul(v2d, alpha)
    return glimpse, alpha


def _grid_coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(h, dtype=np.float64), w)
    cols = np.tile(np.arange(w, dtype=np.float64), h)
    return rows, cols


def gaussian_refine(tape: Tape, params: ParamView, alpha: Var, v2d: Var,
                    h_prime: Var, h: int, w: int) -> tuple[Var, Var]:
    """Re-glimpse through a Gaussian fitted to the attention map.

    Moment-matches a diagonal Gaussian (mean and per-axis variance, floored
    at VARIANCE_FLOOR) to the attention weights, renders it over the grid,
    renormalizes to sum 1, and projects the masked feature sum.  Returns
    (refined vector, mask).  ``h_prime`` is accepted for interface parity
    with the attention step but the simplified refinement does not use it.
    """
    if not np.sum(alpha.data) > 0.0:
        raise DegenerateAttention("attention weights sum to zero")
    rows, cols = _grid_coords(h, w)
    terms = []
    for coords in (rows, cols):
        coords_c = tape.const(coords)
        mean = tape.matmul(alpha, coords_c)
        second = tape.matmul(alpha, tape.const(coords * coords))
        var = tape.maximum_const(tape.sub(second, tape.mul(mean, mean)), VARIANCE_FLOOR)
        delta = tape.add_scalar(coords_c, tape.scale(mean, -1.0))
        terms.append(tape.scale_var(tape.mul(delta, delta), tape.reciprocal(var)))
    mask = tape.softmax(tape.scale(tape.add(terms[0], terms[1]), -0.5))
    refined = tape.matmul(params["refine_proj"], tape.matmul(v2d, mask))
    return refined, mask


def fit_gaussian_moments(alpha: np.ndarray, h: int, w: int):
    """Mean and floored variance of an attention map, as plain numbers."""
    rows, cols = _grid_coords(h, w)
    a = alpha.reshape(-1)
    mu = (float(a @ rows), float(a @ cols))
    var = (
        max(float(a @ (rows * rows)) - mu[0] ** 2, VARIANCE_FLOOR),
        max(float(a @ (cols * cols)) - mu[1] ** 2, VARIANCE_FLOOR),
    )
    return mu, var


@dataclass
class EncodedImage:
    """Per-sample graph values reused across decode steps."""

    v2d: Var
    keys: Var
    h: int
    w: int


@dataclass
class DecoderState:
    h: Var
    c: Var
    t: int
    y_prev: int


def toy_encode(tape: Tape, params: ParamView, config: ModelConfig,
               image: np.ndarray) -> Var:
    """Two conv3x3/tanh/avgpool stages plus a 1x1 projection.

    Input (1, H, W) with H, W divisible by 4; output (d_vis, H/4, W/4).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 1:
        raise ShapeMismatch(f"expected (1, H, W) image, got {img.shape}")
    if img.shape[1] % 4 or img.shape[2] % 4:
        raise ShapeMismatch(f"image dims {img.shape[1:]} must be divisible by 4")
    x = tape.const(img)
    for w_name, b_name in (("enc1_w", "enc1_b"), ("enc2_w", "enc2_b")):
        ch, hh, ww = x.data.shape
        cols = tape.im2col3x3(x)
        pre = tape.add_colvec(tape.matmul(params[w_name], cols), params[b_name])
        act = tape.reshape(tape.tanh(pre), (config.d_vis, hh, ww))
        x = tape.avgpool2(act)
    ch, hh, ww = x.data.shape
    flat = tape.reshape(x, (ch, hh * ww))
    proj = tape.add_colvec(tape.matmul(params["enc_proj_w"], flat), params["enc_proj_b"])
    return tape.reshape(proj, (config.d_vis, hh, ww))


def prepare_encoded(tape: Tape, params: ParamView, v: Var) -> EncodedImage:
    """Flatten a feature map and precompute attention keys for reuse."""
    d_vis, h, w = v.data.shape
    v2d = tape.reshape(v, (d_vis, h * w))
    keys = tape.matmul(params["attn_key"], v2d)
    return EncodedImage(v2d=v2d, keys=keys, h=h, w=w)


def init_decoder_state(tape: Tape, params: ParamView, config: ModelConfig,
                       enc: EncodedImage, start_class: int) -> DecoderState:
    """State at t=0: hidden from the pooled feature map, previous = start class."""
    n = enc.v2d.data.shape[1]
    gap = tape.matmul(enc.v2d, tape.const(np.full(n, 1.0 / n)))
    h0 = tape.matmul(params["holistic_proj"], gap)
    c0 = tape.const(np.zeros(config.d_hidden))
    return DecoderState(h=h0, c=c0, t=0, y_prev=start_class)


def decode_step(tape: Tape, params: ParamView, config: ModelConfig,
                state: DecoderState, enc: EncodedImage,
                rng: np.random.Generator | None, training: bool,
                ) -> tuple[Var, Var, DecoderState, Var]:
    """One decoder timestep.

    Returns (class logits, radical logits, next state, attention map).  The
    caller decides the next ``y_prev``: the ground-truth class under teacher
    forcing, the argmax under greedy decoding.
    """
    if state.t >= config.max_decode_len:
        raise ValueError(f"decode step {state.t} beyond max_decode_len {config.max_decode_len}")
    fused = fuse_prev_char(tape, params, config, state.y_prev, rng, training)
    h2, c2 = tape.lstm_step(fused, state.h, state.c,
                            params["lstm_wx"], params["lstm_wh"], params["lstm_b"])
    glimpse, alpha = attend_2d(tape, params, h2, enc.v2d, keys=enc.keys)
    refined, _ = gaussian_refine(tape, params, alpha, enc.v2d, h2, enc.h, enc.w)
    fused_vis = tape.add(glimpse, refined)
    heads_in = fused_vis if config.heads_input == "fused" else glimpse
    y_logits = tape.affine(heads_in, params["cls_w"], params["cls_b"])
    radical_logits = tape.affine(heads_in, params["rad_w"], params["rad_b"])
    new_state = DecoderState(h=h2, c=c2, t=state.t + 1, y_prev=state.y_prev)
    return y_logits, radical_logits, new_state, alpha


def forward_teacher_forced(tape: Tape, params: ParamView, config: ModelConfig,
                           image: np.ndarray, target_ids: list[int], start_class: int,
                           rng: np.random.Generator | None, training: bool = True,
                           ) -> tuple[list[Var], list[Var]]:
    """Run the decoder feeding ground-truth classes; one logit pair per target."""
    v = toy_encode(tape, params, config, image)
    enc = prepare_encoded(tape, params, v)
    state = init_decoder_state(tape, params, config, enc, start_class)
    y_logits, r_logits = [], []
    for target in target_ids:
        yl, rl, state, _ = decode_step(tape, params, config, state, enc, rng, training)
        y_logits.append(yl)
        r_logits.append(rl)
        state.y_prev = target
    return y_logits, r_logits


def decode_greedy(store: ParamStore, config: ModelConfig, image: np.ndarray,
                  charset) -> str:
    """Greedy eval-mode decode of one image to a string.

    Stops at EOS or max_decode_len; EOS/PAD never appear in the output.
    Ties in the argmax resolve to the lowest class id.
    """
    tape = Tape()
    params = ParamView(tape, store)
    v = toy_encode(tape, params, config, image)
    enc = prepare_encoded(tape, params, v)
    state = init_decoder_state(tape, params, config, enc, charset.eos_id)
    out: list[str] = []
    for _ in range(config.max_decode_len):
        y_logits, _, state, _ = decode_step(tape, params, config, state, enc,
                                            rng=None, training=False)
        y = int(np.argmax(y_logits.data))
        if y == charset.eos_id:
            break
        if y != charset.pad_id:
            out.append(charset.char_of(y))
        state.y_prev = y
    return "".join(out)

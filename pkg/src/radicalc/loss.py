"""Hybrid training loss: character cross-entropy plus masked radical BCE.

The radical branch is supervised only where the target character is CJK:
Latin letters, digits, EOS and PAD have no radical decomposition, so
their timesteps are masked out of the binary cross-entropy entirely and
contribute exactly zero gradient to the radical head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var
from .bank import Charset, is_cjk
from .errors import NonFiniteLoss, ShapeMismatch


@dataclass
class TargetSequence:
    """Per-timestep supervision, EOS step included."""

    class_ids: list[int]
    bor_rows: np.ndarray   # (T, D) 0/1
    mask: np.ndarray       # (T,) 1.0 where the target is a charset CJK character

    def __len__(self) -> int:
        return len(self.class_ids)


@dataclass
class LossReport:
    total: float
    l_o: float
    l_r: float
    per_step_ce: list[float]
    per_step_bce: list[float]
    masked_steps: int
    loss_var: Var | None = None

    def to_json(self) -> dict:
        return {
            "L": self.total,
            "l_o": self.l_o,
            "l_r": self.l_r,
            "masked_steps": self.masked_steps,
        }


def latin_mask(text: str, charset: Charset) -> np.ndarray:
    """1.0 per character that is CJK and resolves to a real class, else 0.0.

    Characters outside the charset fall to UNK, whose radical row is zero,
    so they are masked out along with Latin/digits/symbols.
    """
    return np.array(
        [1.0 if is_cjk(ch) and ch in charset.index else 0.0 for ch in text],
        dtype=np.float64,
    )


def make_targets(text: str, charset: Charset, bor_matrix: np.ndarray) -> TargetSequence:
    """Teacher-forcing targets for a transcript: its classes then EOS."""
    ids = [charset.class_of(ch) for ch in text] + [charset.eos_id]
    mask = np.append(latin_mask(text, charset), 0.0)
    rows = np.asarray(bor_matrix, dtype=np.float64)[ids]
    return TargetSequence(class_ids=ids, bor_rows=rows, mask=mask)


def hybrid_loss(tape: Tape, y_logits, radical_logits,
                targets: TargetSequence) -> LossReport:
    """Sum of mean character cross-entropy and mask-averaged radical BCE.

    ``y_logits`` / ``radical_logits`` are length-T lists of graph vectors
    (raw arrays are wrapped as constants).  Cross-entropy is averaged over
    all timesteps; BCE is the per-timestep mean over radicals, averaged
    over masked timesteps only — masked-out steps never enter the graph,
    so their gradient contribution is exactly zero.
    """
    y_logits = [z if isinstance(z, Var) else tape.const(z) for z in y_logits]
    radical_logits = [z if isinstance(z, Var) else tape.const(z) for z in radical_logits]
    steps = len(targets)
    if len(y_logits) != steps or len(radical_logits) != steps:
        raise ShapeMismatch(
            f"got {len(y_logits)} class / {len(radical_logits)} radical logit rows "
            f"for {steps} targets"
        )

    ce_terms = [tape.cross_entropy_logits(z, targets.class_ids[t])
                for t, z in enumerate(y_logits)]
    l_o = tape.scale(tape.add_n(ce_terms), 1.0 / steps)

    per_step_bce = [0.0] * steps
    bce_terms = []
    for t in range(steps):
        if targets.mask[t] == 0.0:
            continue
        term = tape.bce_logits_mean(radical_logits[t], targets.bor_rows[t])
        per_step_bce[t] = float(term.data)
        bce_terms.append(term)
    if bce_terms:
        l_r = tape.scale(tape.add_n(bce_terms), 1.0 / len(bce_terms))
    else:
        l_r = tape.const(0.0)
    total = tape.add(l_o, l_r)

    if not np.isfinite(total.data):
        raise NonFiniteLoss(f"hybrid loss is {float(total.data)}")
    return LossReport(
        total=float(total.data),
        l_o=float(l_o.data),
        l_r=float(l_r.data),
        per_step_ce=[float(c.data) for c in ce_terms],
        per_step_bce=per_step_bce,
        masked_steps=len(bce_terms),
        loss_var=total,
    )

"""Separation training objectives and their scoring-side twins.

The SNR is 10*log10(||s||^2 / (||s - s_hat||^2 + eps)); the permutation-
invariant loss maximizes summed two-ear SNR over the two speaker
assignments, applying one permutation to both ears. Training uses terms
capped at 30 dB to bound gradients near perfect reconstruction; metrics
always use the uncapped value.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .dsp import BinauralBuffer

SNR_EPS = 1e-12
SNR_CAP_DB = 30.0
PERMUTATIONS = ((0, 1), (1, 0))


def snr_db(s: np.ndarray, s_hat: np.ndarray, eps: float = SNR_EPS) -> float:
    """Uncapped SNR in dB; +inf sentinel when the residual vanishes."""
    s = np.asarray(s, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s.shape != s_hat.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {s_hat.shape}")
    num = float(np.sum(s**2))
    if num == 0.0:
        raise ValueError("reference signal has zero energy")
    resid = float(np.sum((s - s_hat) ** 2))
    if resid < eps:
        return math.inf
    return 10.0 * math.log10(num / (resid + eps))


def snr_db_t(s: torch.Tensor, s_hat: torch.Tensor, eps: float = SNR_EPS,
             cap_db: float | None = None) -> torch.Tensor:
    """Differentiable SNR; optionally hard-capped for the training objective."""
    num = torch.sum(s**2)
    if num.item() == 0.0:
        raise ValueError("reference signal has zero energy")
    resid = torch.sum((s - s_hat) ** 2) + eps
    val = 10.0 * torch.log10(num / resid)
    if cap_db is not None:
        val = torch.clamp(val, max=cap_db)
    return val


def _as_speaker_array(buffers) -> np.ndarray:
    """(speaker, ear, time) array from two BinauralBuffers or an ndarray."""
    if isinstance(buffers, np.ndarray):
        if buffers.ndim != 3 or buffers.shape[0] != 2 or buffers.shape[1] != 2:
            raise ValueError(f"expected (2, 2, T) array, got {buffers.shape}")
        return buffers
    pair = list(buffers)
    if len(pair) != 2 or not all(isinstance(b, BinauralBuffer) for b in pair):
        raise ValueError("expected two BinauralBuffers")
    return np.stack([b.as_array() for b in pair])


def permutation_scores(refs, ests, cap_db: float | None = None) -> list[float]:
    """Summed two-ear SNR for each speaker permutation (same pi both ears)."""
    r = _as_speaker_array(refs)
    e = _as_speaker_array(ests)
    if r.shape != e.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {e.shape}")
    scores = []
    for perm in PERMUTATIONS:
        terms = []
        for c in range(2):
            for ear in range(2):
                val = snr_db(r[perm[c], ear], e[c, ear])
                if cap_db is not None:
                    val = min(val, cap_db)
                terms.append(val)
        # Sorted accumulation keeps the score bit-identical under any
        # simultaneous relabeling of references and estimates.
        scores.append(float(np.sum(np.sort(terms))))
    return scores


def best_permutation(refs, ests, cap_db: float | None = None) -> tuple:
    """Permutation maximizing summed SNR; ties break toward identity."""
    scores = permutation_scores(refs, ests, cap_db)
    return PERMUTATIONS[0] if scores[0] >= scores[1] else PERMUTATIONS[1]


def pit_loss(refs, ests, cap_db: float = SNR_CAP_DB) -> tuple[float, tuple]:
    """Negative best capped permutation score and the permutation used."""
    scores = permutation_scores(refs, ests, cap_db)
    if scores[0] >= scores[1]:
        return -scores[0], PERMUTATIONS[0]
    return -scores[1], PERMUTATIONS[1]


def pit_loss_t(refs: torch.Tensor, ests: torch.Tensor,
               cap_db: float = SNR_CAP_DB) -> tuple[torch.Tensor, tuple]:
    """Differentiable PIT loss on (speaker, ear, time) tensors.

    The winning permutation is fixed at its argmax; gradients flow only
    through the selected branch.
    """
    if refs.shape != ests.shape:
        raise ValueError(f"shape mismatch: {refs.shape} vs {ests.shape}")
    totals = []
    for perm in PERMUTATIONS:
        terms = [
            snr_db_t(refs[perm[c], ear], ests[c, ear], cap_db=cap_db)
            for c in range(2)
            for ear in range(2)
        ]
        totals.append(torch.stack(terms).sum())
    best = 0 if totals[0].item() >= totals[1].item() else 1
    return -totals[best], PERMUTATIONS[best]


def azimuth_to_class(azimuth_deg: float, n_classes: int = 37) -> int:
    """Map a grid azimuth in [-90, 90] to its class index (0 is -90)."""
    idx = (azimuth_deg + 90) / 5.0
    if abs(idx - round(idx)) > 1e-9 or not 0 <= round(idx) < n_classes:
        raise ValueError(f"azimuth {azimuth_deg} is not on the {n_classes}-class grid")
    return int(round(idx))


def doa_ce_loss_t(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over speakers and frames.

    logits: (speakers, frames, classes); labels: (speakers, frames) int64,
    already aligned to the estimate ordering by the PIT permutation.
    """
    if logits.shape[:2] != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    flat = logits.reshape(-1, logits.shape[-1])
    return torch.nn.functional.cross_entropy(flat, labels.reshape(-1))

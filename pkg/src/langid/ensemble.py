"""Probability-sum ensembling and validation-driven subset selection."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metrics import TrialScores, bac, eer
from .nn.model import softmax

MAX_EXHAUSTIVE = 15


def ensemble_probs(members: Sequence[np.ndarray], mode: str = "sum_softmax") -> np.ndarray:
    """Fuse per-member (N, K) probabilities.

    ``sum_softmax`` adds member probabilities and applies a softmax to the
    sums. ``mean`` (plain probability averaging) exists for comparison only.
    """
    if not members:
        raise ValueError("need at least one ensemble member")
    # summing in sorted order makes the result exactly independent of member order
    stack = np.sort(np.stack([np.asarray(m, dtype=np.float64) for m in members]), axis=0)
    if mode == "sum_softmax":
        return softmax(stack.sum(axis=0), axis=1)
    if mode == "mean":
        return stack.sum(axis=0) / len(members)
    raise ValueError(f"unknown fusion mode {mode!r}")


class EnsemblePool:
    """Member score sets aligned to the first member's utterance order."""

    def __init__(self, member_ids: Sequence[str], members: Sequence[TrialScores]):
        if len(member_ids) != len(members) or not members:
            raise ValueError("need one id per member and at least one member")
        if len(set(member_ids)) != len(member_ids):
            raise ValueError("member ids must be unique")
        ref = members[0]
        order = {u: i for i, u in enumerate(ref.utt_ids)}
        aligned = []
        for mid, m in zip(member_ids, members):
            if set(m.utt_ids) != set(order) or len(m.utt_ids) != len(order):
                raise ValueError(f"member {mid!r} covers a different utterance set")
            perm = np.argsort([order[u] for u in m.utt_ids])
            m = m.subset(perm)
            if m.classes != ref.classes or not np.array_equal(m.labels, ref.labels):
                raise ValueError(f"member {mid!r} disagrees on labels")
            aligned.append(m)
        self.member_ids = list(member_ids)
        self.members = aligned

    def __len__(self) -> int:
        return len(self.members)

    def fuse(self, subset: Sequence[int], mode: str = "sum_softmax") -> TrialScores:
        ref = self.members[0]
        probs = ensemble_probs([self.members[i].probs for i in subset], mode)
        return TrialScores(ref.utt_ids, probs, ref.labels, ref.classes)


@dataclass(frozen=True)
class SubsetResult:
    member_ids: tuple[str, ...]
    indices: tuple[int, ...]
    eer: float
    bac: float


# EERs equal up to float noise count as ties, so the size/name rule decides
EER_TIE_DECIMALS = 12


def _key(pool: EnsemblePool, subset: tuple[int, ...], value: float):
    return (round(value, EER_TIE_DECIMALS), len(subset), tuple(sorted(pool.member_ids[i] for i in subset)))


def subset_search(pool: EnsemblePool, positive_class: str = "en", greedy: bool = False,
                  mode: str = "sum_softmax") -> SubsetResult:
    """Subset with minimum validation EER over all non-empty subsets.

    Ties prefer the smaller subset, then the lexicographically smaller sorted
    member ids. Pools above ``MAX_EXHAUSTIVE`` need ``greedy=True`` (forward
    selection).
    """
    n = len(pool)
    if n > MAX_EXHAUSTIVE and not greedy:
        raise ValueError(f"pool of {n} exceeds the exhaustive limit of {MAX_EXHAUSTIVE}; use greedy")

    def score(subset):
        return eer(pool.fuse(subset, mode), positive_class)

    if greedy and n > MAX_EXHAUSTIVE:
        chosen: tuple[int, ...] = ()
        best = None
        while len(chosen) < n:
            cands = [tuple(sorted(chosen + (i,))) for i in range(n) if i not in chosen]
            step = min((_key(pool, c, score(c)), c) for c in cands)
            if best is not None and step[0] >= best[0]:
                break
            best = step
            chosen = step[1]
    else:
        best = None
        for r in range(1, n + 1):
            for c in itertools.combinations(range(n), r):
                k = (_key(pool, c, score(c)), c)
                if best is None or k < best:
                    best = k
    subset = best[1]
    fused = pool.fuse(subset, mode)
    return SubsetResult(tuple(pool.member_ids[i] for i in subset), subset, eer(fused, positive_class), bac(fused))

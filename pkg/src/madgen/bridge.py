"""Endpoint-conditioned discrete Markov bridge over categorical edge states.

Edge states live in D=5 classes (0 = non-edge, 1..4 = single/double/triple/
aromatic). Each step applies an absorbing transition that keeps the current
state with probability alpha_t and jumps to the endpoint state otherwise;
the final step has alpha = 0, so a trajectory always terminates exactly at
the endpoint sampled on its last step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import torch

from madgen.chemgraph.mol import AROMATIC, DOUBLE, SINGLE, TRIPLE, MolGraph

EDGE_CLASSES = 5
NON_EDGE = 0
BOND_TO_CLASS = {SINGLE: 1, DOUBLE: 2, TRIPLE: 3, AROMATIC: 4}
CLASS_TO_BOND = {v: k for k, v in BOND_TO_CLASS.items()}

_LOG_EPS = 1e-30


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention probabilities alpha_0..alpha_{T-1}.

    alpha_bars[t] = prod_{tau < t} alpha_tau, so alpha_bars[0] == 1 and
    alpha_bars[T] == 0 (the last step is forced absorbing).
    """

    alphas: np.ndarray
    kind: str = "cosine"

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", alphas)
        if alphas.ndim != 1 or len(alphas) < 2:
            raise ValueError("schedule needs at least two steps")
        if ((alphas < 0) | (alphas > 1)).any():
            raise ValueError("alphas must lie in [0, 1]")
        if alphas[-1] != 0.0:
            raise ValueError("final alpha must be exactly 0 (terminal absorption)")

    @property
    def n_steps(self) -> int:
        return len(self.alphas)

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        bars = np.empty(self.n_steps + 1, dtype=np.float64)
        bars[0] = 1.0
        np.cumprod(self.alphas, out=bars[1:])
        return bars

    def cumulative(self, t: int) -> float:
        """prod_{tau <= t} alpha_tau for 0 <= t < T."""
        if not 0 <= t < self.n_steps:
            raise IndexError(f"step {t} outside [0, {self.n_steps})")
        return float(self.alpha_bars[t + 1])


def cosine_schedule(n_steps: int, offset: float = 0.008) -> NoiseSchedule:
    """Cosine retention schedule with terminal absorption forced to zero."""
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    t = np.arange(n_steps + 1, dtype=np.float64)
    f = np.cos((t / n_steps + offset) / (1 + offset) * math.pi / 2.0) ** 2
    bars = f / f[0]
    alphas = np.clip(bars[1:] / bars[:-1], 0.0, 1.0)
    alphas[-1] = 0.0
    return NoiseSchedule(alphas=alphas, kind="cosine")


def transition_matrix(alpha: float, target_class: int,
                      n_classes: int = EDGE_CLASSES) -> np.ndarray:
    """Q = alpha*I + (1-alpha) * onehot(target) 1^T (column-stochastic)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if not 0 <= target_class < n_classes:
        raise ValueError("target class out of range")
    q = alpha * np.eye(n_classes)
    q[target_class, :] += 1.0 - alpha
    return q


def marginal_matrix(schedule: NoiseSchedule, t: int, target_class: int,
                    n_classes: int = EDGE_CLASSES) -> np.ndarray:
    """Closed form of prod_{tau<=t} Q_tau: same family with alpha_bar(t)."""
    return transition_matrix(schedule.cumulative(t), target_class, n_classes)


def sample_intermediate(schedule: NoiseSchedule, t: int, e_start: int,
                        e_end: int, rng: np.random.Generator) -> int:
    """Draw from Categorical(marginal_matrix(t) . onehot(e_start)).

    For this absorbing family the draw is e_start with probability
    alpha_bar(t) and e_end otherwise.
    """
    return e_start if rng.random() < schedule.cumulative(t) else e_end


@dataclass
class EdgeStateTensor:
    """Categorical edge states over all unordered atom pairs.

    Pairs are ordered (0,1), (0,2), ..., (0,n-1), (1,2), ...; scaffold-
    internal pairs (bonds and non-bonds alike) are frozen for all t.
    """

    n_atoms: int
    states: np.ndarray  # (n_pairs,) int8
    frozen: np.ndarray  # (n_pairs,) bool

    def __post_init__(self):
        expected = self.n_atoms * (self.n_atoms - 1) // 2
        if len(self.states) != expected or len(self.frozen) != expected:
            raise ValueError("state arrays do not cover all atom pairs")

    @property
    def n_pairs(self) -> int:
        return len(self.states)

    @staticmethod
    def pair_index(i: int, j: int, n_atoms: int) -> int:
        if i > j:
            i, j = j, i
        return i * (2 * n_atoms - i - 1) // 2 + (j - i - 1)

    @staticmethod
    def pairs(n_atoms: int):
        for i in range(n_atoms):
            for j in range(i + 1, n_atoms):
                yield i, j

    @classmethod
    def initial(cls, n_atoms: int, scaffold_bonds, n_scaffold: int) -> "EdgeStateTensor":
        """State at t=0: scaffold pairs frozen at their bond class, all other
        pairs non-edge."""
        n_pairs = n_atoms * (n_atoms - 1) // 2
        states = np.zeros(n_pairs, dtype=np.int8)
        frozen = np.zeros(n_pairs, dtype=bool)
        for i, j in cls.pairs(n_atoms):
            if i < n_scaffold and j < n_scaffold:
                frozen[cls.pair_index(i, j, n_atoms)] = True
        for i, j, kind in scaffold_bonds:
            states[cls.pair_index(i, j, n_atoms)] = BOND_TO_CLASS[kind]
        return cls(n_atoms=n_atoms, states=states, frozen=frozen)

    @classmethod
    def from_molgraph(cls, mol: MolGraph, n_scaffold: int) -> "EdgeStateTensor":
        """Endpoint tensor of a molecule laid out scaffold-first."""
        tensor = cls.initial(mol.n_atoms, [], n_scaffold)
        for i, j, kind in mol.bonds:
            tensor.states[cls.pair_index(i, j, mol.n_atoms)] = BOND_TO_CLASS[kind]
        return tensor

    def to_bonds(self) -> list[tuple[int, int, str]]:
        bonds = []
        for (i, j), state in zip(self.pairs(self.n_atoms), self.states):
            if state != NON_EDGE:
                bonds.append((i, j, CLASS_TO_BOND[int(state)]))
        return bonds

    def copy(self) -> "EdgeStateTensor":
        return EdgeStateTensor(self.n_atoms, self.states.copy(),
                               self.frozen.copy())


def elbo_loss(schedule: NoiseSchedule, predicted_endpoint_logits: torch.Tensor,
              true_endpoint: EdgeStateTensor, e_t: EdgeStateTensor,
              t: int) -> torch.Tensor:
    """T x mean KL over non-frozen pairs between the true and predicted
    one-step transition distributions at step t.

    ``predicted_endpoint_logits`` holds one D-vector per non-frozen pair, in
    pair order. Frozen pairs contribute zero. Exactly zero when the predicted
    endpoint distribution is one-hot on the truth.
    """
    free = ~e_t.frozen
    n_free = int(free.sum())
    if (predicted_endpoint_logits.ndim != 2
            or predicted_endpoint_logits.shape[0] != n_free
            or predicted_endpoint_logits.shape[1] < 2):
        raise ValueError(
            f"expected logits of shape ({n_free}, D), "
            f"got {tuple(predicted_endpoint_logits.shape)}")
    if n_free == 0:
        return torch.zeros((), dtype=predicted_endpoint_logits.dtype)
    n_classes = predicted_endpoint_logits.shape[1]
    dtype = predicted_endpoint_logits.dtype
    alpha = float(schedule.alphas[t])
    cur = torch.as_tensor(e_t.states[free], dtype=torch.long)
    end = torch.as_tensor(true_endpoint.states[free], dtype=torch.long)
    cur_onehot = torch.nn.functional.one_hot(cur, n_classes).to(dtype)
    end_onehot = torch.nn.functional.one_hot(end, n_classes).to(dtype)
    p = alpha * cur_onehot + (1.0 - alpha) * end_onehot
    q = alpha * cur_onehot + (1.0 - alpha) * torch.softmax(
        predicted_endpoint_logits, dim=-1)
    kl = kl_categorical(p, q)
    return schedule.n_steps * kl.mean()


def kl_categorical(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Row-wise KL(p || q); zero-probability p entries contribute nothing."""
    safe_q = torch.clamp(q, min=_LOG_EPS)
    ratio = torch.where(p > 0, torch.log(torch.clamp(p, min=_LOG_EPS)) -
                        torch.log(safe_q), torch.zeros_like(p))
    return (p * ratio).sum(dim=-1)


PredictorFn = Callable[[EdgeStateTensor, int], np.ndarray]
BatchPredictorFn = Callable[[np.ndarray, int], np.ndarray]


def sample_trajectory(schedule: NoiseSchedule, scaffold_edges: EdgeStateTensor,
                      endpoint_predictor: PredictorFn,
                      rng: np.random.Generator) -> EdgeStateTensor:
    """Run one bridge trajectory from the scaffold state to a molecule.

    ``endpoint_predictor(state, t)`` returns logits of shape
    (n_nonfrozen_pairs, D). Because the final alpha is zero, the returned
    tensor equals the last endpoint sample on every non-frozen pair.
    """

    def batch_predictor(states: np.ndarray, t: int) -> np.ndarray:
        tensor = EdgeStateTensor(scaffold_edges.n_atoms, states[0].copy(),
                                 scaffold_edges.frozen)
        return endpoint_predictor(tensor, t)[None, :, :]

    tensors, _ = sample_trajectories(schedule, scaffold_edges, batch_predictor,
                                     rng, n_samples=1)
    return tensors[0]


def sample_trajectories(schedule: NoiseSchedule,
                        scaffold_edges: EdgeStateTensor,
                        batch_predictor: BatchPredictorFn,
                        rng: np.random.Generator,
                        n_samples: int) -> tuple[list[EdgeStateTensor], np.ndarray]:
    """Vectorized trajectories sharing one scaffold.

    ``batch_predictor(states, t)`` maps (n_samples, n_pairs) int states to
    (n_samples, n_nonfrozen, D) logits for the non-frozen pairs in pair
    order. Returns the terminal tensors and each trajectory's log-likelihood
    under the sampling distribution.
    """
    free = ~scaffold_edges.frozen
    n_free = int(free.sum())
    states = np.tile(scaffold_edges.states, (n_samples, 1))
    loglik = np.zeros(n_samples, dtype=np.float64)
    if n_free == 0:
        return [scaffold_edges.copy() for _ in range(n_samples)], loglik

    for t in range(schedule.n_steps):
        logits = np.asarray(batch_predictor(states, t), dtype=np.float64)
        if logits.ndim != 3 or logits.shape[:2] != (n_samples, n_free):
            raise ValueError(f"predictor returned shape {logits.shape}, "
                             f"expected ({n_samples}, {n_free}, D)")
        probs = _softmax(logits)
        endpoint = _sample_rows(probs, rng)
        alpha = float(schedule.alphas[t])
        cur = states[:, free]
        jump = rng.random((n_samples, n_free)) >= alpha
        new = np.where(jump, endpoint, cur)
        # Marginal transition probability, endpoint sample integrated out.
        p_new = np.take_along_axis(probs, new[..., None], axis=-1)[..., 0]
        p_trans = alpha * (new == cur) + (1.0 - alpha) * p_new
        loglik += np.log(np.maximum(p_trans, _LOG_EPS)).sum(axis=1)
        states[:, free] = new

    tensors = [EdgeStateTensor(scaffold_edges.n_atoms,
                               states[k].astype(np.int8),
                               scaffold_edges.frozen.copy())
               for k in range(n_samples)]
    return tensors, loglik


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Categorical draw along the last axis for every leading index."""
    cumulative = probs.cumsum(axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    idx = (u > cumulative).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)

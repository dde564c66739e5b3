"""Stage 1: contrastive spectrum-scaffold alignment and candidate ranking.

A binned-spectrum MLP and a message-passing scaffold encoder project both
modalities into one latent space; candidates are ranked by cosine
similarity, per-formula predictions aggregate the top-k by frequency, and
an oracle mode returns the ground-truth scaffold from a lookup table.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from madgen.chemgraph.mol import MolGraph, SUPPORTED_ELEMENTS
from madgen.chemgraph.scaffold import Scaffold, murcko_scaffold
from madgen.chemgraph.smiles import write_smiles
from madgen.errors import (
    ConfigError,
    EmptyPoolError,
    MissingRecordError,
    ZeroVectorError,
)
from madgen.seeding import derive_seed
from madgen.spectra import Spectrum, bin_spectrum

DEFAULT_TEMPERATURE = 0.07
_BOND_CHANNELS = {"single": 0, "double": 1, "triple": 2, "aromatic": 3}
_ELEMENT_INDEX = {el: i for i, el in enumerate(SUPPORTED_ELEMENTS)}
_NODE_FEATURES = len(SUPPORTED_ELEMENTS) + 2  # one-hot element, charge, aromatic


@dataclass(frozen=True)
class RetrievalConfig:
    embed_dim: int = 64
    spectrum_hidden: int = 256
    scaffold_hidden: int = 64
    message_passing_layers: int = 3
    temperature: float = DEFAULT_TEMPERATURE
    bin_width: float = 1.0
    max_mz: float = 1000.0
    batch_size: int = 64
    learning_rate: float = 2e-4
    weight_decay: float = 1e-12
    epochs: int = 50
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2")

    @property
    def n_bins(self) -> int:
        return math.ceil(self.max_mz / self.bin_width)


class SpectrumEncoder(nn.Module):
    """MLP over the binned spectrum vector."""

    def __init__(self, config: RetrievalConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(config.n_bins, config.spectrum_hidden),
            nn.ReLU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.spectrum_hidden, config.embed_dim),
        )

    def forward(self, binned: torch.Tensor) -> torch.Tensor:
        return self.net(binned)


class ScaffoldEncoder(nn.Module):
    """Bond-type-aware message passing with max pooling and a projection head.

    Empty scaffolds (acyclic molecules) map to a dedicated learned vector.
    """

    def __init__(self, config: RetrievalConfig):
        super().__init__()
        hidden = config.scaffold_hidden
        self.node_embed = nn.Linear(_NODE_FEATURES, hidden)
        self.self_weights = nn.ModuleList(
            nn.Linear(hidden, hidden) for _ in range(config.message_passing_layers))
        self.bond_weights = nn.ModuleList(
            nn.Linear(hidden, hidden * len(_BOND_CHANNELS))
            for _ in range(config.message_passing_layers))
        self.head = nn.Sequential(
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, config.embed_dim))
        self.empty_embedding = nn.Parameter(torch.randn(config.embed_dim) * 0.1)
        self.hidden = hidden

    def forward(self, node_feat: torch.Tensor, adjacency: torch.Tensor,
                node_mask: torch.Tensor) -> torch.Tensor:
        """node_feat (B,N,F), adjacency (B,N,N,4), node_mask (B,N) bool."""
        h = self.node_embed(node_feat)
        n_types = len(_BOND_CHANNELS)
        for self_w, bond_w in zip(self.self_weights, self.bond_weights):
            messages = bond_w(h).reshape(*h.shape[:-1], n_types, self.hidden)
            agg = torch.einsum("bijt,bjtd->bid", adjacency, messages)
            h = torch.relu(self_w(h) + agg)
            h = h * node_mask[..., None]
        pooled = h.masked_fill(~node_mask[..., None], float("-inf")).amax(dim=1)
        out = self.head(pooled)
        empty = ~node_mask.any(dim=1)
        if empty.any():
            out = torch.where(empty[:, None], self.empty_embedding[None, :], out)
        return out


class RetrievalModel(nn.Module):
    def __init__(self, config: RetrievalConfig):
        super().__init__()
        self.config = config
        self.spectrum_encoder = SpectrumEncoder(config)
        self.scaffold_encoder = ScaffoldEncoder(config)
        self.temperature = config.temperature

    @torch.no_grad()
    def embed_spectrum(self, spec: Spectrum) -> np.ndarray:
        self.eval()
        binned = bin_spectrum(spec, self.config.bin_width, self.config.max_mz)
        x = torch.as_tensor(binned.bins, dtype=torch.float32)[None, :]
        return self.spectrum_encoder(x)[0].numpy()

    @torch.no_grad()
    def embed_scaffolds(self, scaffolds: list[Scaffold]) -> np.ndarray:
        self.eval()
        node_feat, adjacency, mask = collate_scaffolds(scaffolds)
        return self.scaffold_encoder(node_feat, adjacency, mask).numpy()


def scaffold_features(graph: MolGraph) -> tuple[np.ndarray, np.ndarray]:
    """Per-atom features and bond-type adjacency channels."""
    n = graph.n_atoms
    feat = np.zeros((n, _NODE_FEATURES), dtype=np.float32)
    for i, atom in enumerate(graph.atoms):
        feat[i, _ELEMENT_INDEX[atom.element]] = 1.0
        feat[i, len(SUPPORTED_ELEMENTS)] = atom.formal_charge
        feat[i, len(SUPPORTED_ELEMENTS) + 1] = 1.0 if atom.aromatic else 0.0
    adjacency = np.zeros((n, n, len(_BOND_CHANNELS)), dtype=np.float32)
    for i, j, kind in graph.bonds:
        channel = _BOND_CHANNELS[kind]
        adjacency[i, j, channel] = 1.0
        adjacency[j, i, channel] = 1.0
    return feat, adjacency


def collate_scaffolds(scaffolds: list[Scaffold]):
    n_max = max((s.graph.n_atoms for s in scaffolds), default=0)
    n_max = max(n_max, 1)
    batch = len(scaffolds)
    node_feat = torch.zeros(batch, n_max, _NODE_FEATURES)
    adjacency = torch.zeros(batch, n_max, n_max, len(_BOND_CHANNELS))
    mask = torch.zeros(batch, n_max, dtype=torch.bool)
    for b, scaffold in enumerate(scaffolds):
        n = scaffold.graph.n_atoms
        if n == 0:
            continue
        feat, adj = scaffold_features(scaffold.graph)
        node_feat[b, :n] = torch.from_numpy(feat)
        adjacency[b, :n, :n] = torch.from_numpy(adj)
        mask[b, :n] = True
    return node_feat, adjacency, mask


def similarity_score(z_spec: np.ndarray, z_mol: np.ndarray,
                     temperature: float = DEFAULT_TEMPERATURE) -> float:
    """exp(cosine / temperature); the exponentiated score of the loss."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return math.exp(cosine(z_spec, z_mol) / temperature)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("embedding dimensions differ")
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        raise ZeroVectorError("cosine undefined for zero vectors")
    return float(np.dot(a, b) / norm)


def contrastive_loss(spec_embs: torch.Tensor, scaf_embs: torch.Tensor,
                     temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Mean InfoNCE over the batch: matched pairs sit on the diagonal."""
    if spec_embs.shape != scaf_embs.shape or spec_embs.ndim != 2:
        raise ValueError("embedding matrices must share shape (k, d)")
    spec_norm = torch.nn.functional.normalize(spec_embs, dim=1, eps=1e-12)
    scaf_norm = torch.nn.functional.normalize(scaf_embs, dim=1, eps=1e-12)
    logits = spec_norm @ scaf_norm.T / temperature
    matched = torch.diagonal(logits)
    return (torch.logsumexp(logits, dim=1) - matched).mean()


@dataclass(frozen=True)
class RankedScaffolds:
    """Candidate scaffolds for one query, highest cosine first."""

    query_id: str
    entries: tuple[tuple[Scaffold, float], ...]

    def top(self, k: int) -> list[tuple[Scaffold, float]]:
        return list(self.entries[:k])


def train_retrieval(dataset: list[tuple[Spectrum, Scaffold]],
                    config: RetrievalConfig,
                    log_every: int = 0) -> tuple[RetrievalModel, list[float]]:
    """Train the two encoders with the in-batch contrastive objective.

    Returns the model and the per-step loss curve. Requires at least two
    distinct scaffolds, otherwise there is nothing to contrast against.
    """
    if len(dataset) < 2:
        raise ConfigError("need at least two training pairs")
    scaffold_keys = {write_smiles(s.graph) for _, s in dataset}
    if len(scaffold_keys) < 2:
        raise ConfigError("need at least two distinct scaffolds to contrast")

    torch.manual_seed(derive_seed(config.seed, "init"))
    model = RetrievalModel(config)
    binned = torch.stack([
        torch.as_tensor(bin_spectrum(spec, config.bin_width,
                                     config.max_mz).bins, dtype=torch.float32)
        for spec, _ in dataset
    ])
    node_feat, adjacency, mask = collate_scaffolds([s for _, s in dataset])

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    rng = np.random.default_rng(derive_seed(config.seed, "data"))
    losses: list[float] = []
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            idx_t = torch.as_tensor(idx, dtype=torch.long)
            z_spec = model.spectrum_encoder(binned[idx_t])
            z_scaf = model.scaffold_encoder(node_feat[idx_t], adjacency[idx_t],
                                            mask[idx_t])
            loss = contrastive_loss(z_spec, z_scaf, config.temperature)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            if log_every and len(losses) % log_every == 0:
                print(f"retrieval step {len(losses)}: loss {losses[-1]:.4f}")
    model.eval()
    return model, losses


def rank_candidates(model: RetrievalModel, spec: Spectrum,
                    pool: list[Scaffold]) -> RankedScaffolds:
    """Rank pool scaffolds by cosine similarity to the spectrum embedding.

    The pool is deduplicated by canonical SMILES; ties break
    lexicographically on the scaffold SMILES.
    """
    if not pool:
        raise EmptyPoolError(f"no candidate scaffolds for {spec.record_id!r}")
    unique: dict[str, Scaffold] = {}
    for scaffold in pool:
        unique.setdefault(write_smiles(scaffold.graph), scaffold)
    keys = sorted(unique)
    z_spec = model.embed_spectrum(spec)
    z_scafs = model.embed_scaffolds([unique[k] for k in keys])
    scored = []
    for key, z in zip(keys, z_scafs):
        scored.append((cosine(z_spec, z), key))
    scored.sort(key=lambda item: (-item[0], item[1]))
    entries = tuple((unique[key], score) for score, key in scored)
    return RankedScaffolds(query_id=spec.record_id, entries=entries)


def aggregate_topk_frequency(rankings: list[RankedScaffolds],
                             k: int = 10) -> Scaffold:
    """Most frequent scaffold among each ranking's top-k.

    Ties break by lowest total rank, then canonical SMILES order.
    """
    if not rankings:
        raise ValueError("no rankings to aggregate")
    counts: Counter = Counter()
    rank_sums: dict[str, int] = {}
    instance: dict[str, Scaffold] = {}
    for ranking in rankings:
        for rank, (scaffold, _) in enumerate(ranking.top(k), start=1):
            key = write_smiles(scaffold.graph)
            counts[key] += 1
            rank_sums[key] = rank_sums.get(key, 0) + rank
            instance.setdefault(key, scaffold)
    best = min(counts,
               key=lambda key: (-counts[key], rank_sums[key], key))
    return instance[best]


def oracle_scaffold(record_id: str,
                    lookup: dict[str, MolGraph]) -> Scaffold:
    """Ground-truth scaffold of the molecule behind a record."""
    if record_id not in lookup:
        raise MissingRecordError(f"no ground-truth molecule for {record_id!r}")
    return murcko_scaffold(lookup[record_id])


def spa(predicted: list[Scaffold], truth: list[Scaffold]) -> float:
    """Scaffold prediction accuracy: fraction of canonical-SMILES matches."""
    if len(predicted) != len(truth):
        raise ValueError("prediction/truth lengths differ")
    if not predicted:
        raise ValueError("empty prediction list")
    hits = sum(
        write_smiles(p.graph) == write_smiles(t.graph)
        for p, t in zip(predicted, truth))
    return hits / len(predicted)

"""Stage 2: spectrum-guided endpoint prediction and molecule generation.

A fully-connected graph transformer predicts the endpoint edge class of
every non-frozen atom pair from the current bridge state; the spectrum
enters as peak tokens through cross-attention (or as a global vector
through concatenation), and classifier-free guidance mixes conditional and
unconditional logits at sampling time.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, replace as dc_replace

import numpy as np
import torch
from torch import nn

from madgen.bridge import (
    BOND_TO_CLASS,
    EDGE_CLASSES,
    EdgeStateTensor,
    NoiseSchedule,
    cosine_schedule,
    kl_categorical,
    sample_trajectories,
)
from madgen.chemgraph.mol import (
    AROMATIC,
    Atom,
    BOND_ORDER,
    MolGraph,
    SIGMA_ORDER,
    SUPPORTED_ELEMENTS,
    allowed_valences,
    hill_formula,
    infer_implicit_h,
)
from madgen.chemgraph.scaffold import Scaffold, free_atoms, murcko_scaffold
from madgen.chemgraph.smiles import write_smiles
from madgen.errors import (
    CompositionError,
    ConfigError,
    DataError,
    EmptySpectrumError,
    UncalibratedError,
    ValenceError,
)
from madgen.results import GeneratedCandidate, RankedMolecules
from madgen.seeding import derive_seed
from madgen.spectra import Spectrum, bin_spectrum

_ELEMENT_INDEX = {el: i for i, el in enumerate(SUPPORTED_ELEMENTS)}
# one-hot element + charge + scaffold flag
_NODE_BASE_FEATURES = len(SUPPORTED_ELEMENTS) + 2
_EDGE_IN_FEATURES = EDGE_CLASSES + 1  # one-hot state + frozen flag
_CLASS_SIGMA = np.array([0.0, 1.0, 2.0, 3.0, 1.0])  # sigma order per edge class

ENCODINGS = ("binned", "tokens", "tokens_selfattn")
CONDITIONINGS = ("concat", "cross_attn")
CFG_TARGETS = ("none", "node", "edge", "both")


@dataclass(frozen=True)
class GeneratorConfig:
    embed_dim: int = 64
    node_hidden: int = 256
    edge_hidden: int = 128
    spectral_hidden: int = 256
    n_layers: int = 5
    n_heads: int = 8
    n_steps: int = 50
    encoding: str = "tokens_selfattn"
    conditioning: str = "cross_attn"
    cfg_target: str = "node"
    cfg_scale: float = 1.0
    condition_dropout: float = 0.1
    n_samples: int = 100
    valence_masking: bool = False
    batch_size: int = 64
    learning_rate: float = 1e-5
    weight_decay: float = 1e-12
    train_steps: int = 2000
    bin_width: float = 1.0
    max_mz: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if self.encoding not in ENCODINGS:
            raise ConfigError(f"encoding must be one of {ENCODINGS}")
        if self.conditioning not in CONDITIONINGS:
            raise ConfigError(f"conditioning must be one of {CONDITIONINGS}")
        if self.cfg_target not in CFG_TARGETS:
            raise ConfigError(f"cfg target must be one of {CFG_TARGETS}")
        if not 0 <= self.condition_dropout < 1:
            raise ConfigError("condition dropout must be in [0, 1)")
        if self.cfg_scale < 0:
            raise ConfigError("guidance scale must be >= 0")
        if self.n_samples < 1:
            raise ConfigError("samples per spectrum must be >= 1")

    @property
    def n_bins(self) -> int:
        return math.ceil(self.max_mz / self.bin_width)

    @property
    def uses_cfg(self) -> bool:
        return self.cfg_target != "none"

    @property
    def cross_attends_nodes(self) -> bool:
        if self.conditioning != "cross_attn":
            return False
        return self.cfg_target in ("none", "node", "both")

    @property
    def cross_attends_edges(self) -> bool:
        if self.conditioning != "cross_attn":
            return False
        return self.cfg_target in ("edge", "both")


@dataclass
class PeakTokens:
    """One embedding row per peak, after the spectrum encoder."""

    tokens: torch.Tensor  # (K, d)

    @property
    def n_peaks(self) -> int:
        return self.tokens.shape[0]


@dataclass
class DenoiserInput:
    """Everything the endpoint predictor sees for one molecule at step t."""

    edge_states: EdgeStateTensor
    atoms: tuple[Atom, ...]
    scaffold_size: int
    t: int
    n_steps: int
    spectrum: Spectrum | None


def node_feature_matrix(atoms, scaffold_size: int) -> np.ndarray:
    feat = np.zeros((len(atoms), _NODE_BASE_FEATURES), dtype=np.float32)
    for i, atom in enumerate(atoms):
        feat[i, _ELEMENT_INDEX[atom.element]] = 1.0
        feat[i, len(SUPPORTED_ELEMENTS)] = atom.formal_charge
        feat[i, len(SUPPORTED_ELEMENTS) + 1] = 1.0 if i < scaffold_size else 0.0
    return feat


class _SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, key_padding_mask=None):
        attn_out, _ = self.attn(x, x, x, key_padding_mask=key_padding_mask,
                                need_weights=False)
        x = self.norm1(x + attn_out)
        return self.norm2(x + self.ffn(x))


class _NodeEdgeBlock(nn.Module):
    """One transformer layer updating node and edge states jointly.

    Node self-attention scores carry an additive per-head bias from the edge
    features; edges update from their endpoints' summed features, which
    keeps the whole block permutation-equivariant and edge-symmetric.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        d = config.embed_dim
        heads = config.n_heads
        self.heads = heads
        self.head_dim = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.edge_bias = nn.Linear(d, heads)
        self.attn_out = nn.Linear(d, d)
        self.node_norm1 = nn.LayerNorm(d)
        self.node_ffn = nn.Sequential(
            nn.Linear(d, config.node_hidden), nn.ReLU(),
            nn.Linear(config.node_hidden, d))
        self.node_norm2 = nn.LayerNorm(d)
        self.edge_mlp = nn.Sequential(
            nn.Linear(2 * d, config.edge_hidden), nn.ReLU(),
            nn.Linear(config.edge_hidden, d))
        self.edge_norm1 = nn.LayerNorm(d)
        self.edge_ffn = nn.Sequential(
            nn.Linear(d, config.edge_hidden), nn.ReLU(),
            nn.Linear(config.edge_hidden, d))
        self.edge_norm2 = nn.LayerNorm(d)
        self.node_cross = None
        self.edge_cross = None
        if config.cross_attends_nodes:
            self.node_cross = nn.MultiheadAttention(d, heads, batch_first=True)
            self.node_cross_norm = nn.LayerNorm(d)
        if config.cross_attends_edges:
            self.edge_cross = nn.MultiheadAttention(d, heads, batch_first=True)
            self.edge_cross_norm = nn.LayerNorm(d)

    def forward(self, h, e, node_mask, spec_tokens, spec_mask):
        bsz, n, d = h.shape
        q = self.q(h).reshape(bsz, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(h).reshape(bsz, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(h).reshape(bsz, n, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores + self.edge_bias(e).permute(0, 3, 1, 2)
        scores = scores.masked_fill(~node_mask[:, None, None, :], -1e9)
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(bsz, n, d)
        h = self.node_norm1(h + self.attn_out(mixed))

        if self.node_cross is not None:
            cross, _ = self.node_cross(h, spec_tokens, spec_tokens,
                                       key_padding_mask=~spec_mask,
                                       need_weights=False)
            h = self.node_cross_norm(h + cross)

        h = self.node_norm2(h + self.node_ffn(h))
        h = h * node_mask[..., None]

        pair_sum = h[:, :, None, :] + h[:, None, :, :]
        e = self.edge_norm1(e + self.edge_mlp(torch.cat([e, pair_sum], dim=-1)))

        if self.edge_cross is not None:
            flat = e.reshape(bsz, n * n, d)
            cross, _ = self.edge_cross(flat, spec_tokens, spec_tokens,
                                       key_padding_mask=~spec_mask,
                                       need_weights=False)
            e = e + cross.reshape(bsz, n, n, d)
            e = self.edge_cross_norm(e)

        e = self.edge_norm2(e + self.edge_ffn(e))
        pair_mask = (node_mask[:, :, None] & node_mask[:, None, :])
        e = e * pair_mask[..., None]
        return h, e


class GeneratorModel(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        half = d // 2
        self.mz_mlp = nn.Sequential(
            nn.Linear(1, config.spectral_hidden), nn.ReLU(),
            nn.Linear(config.spectral_hidden, half))
        self.intensity_mlp = nn.Sequential(
            nn.Linear(1, config.spectral_hidden), nn.ReLU(),
            nn.Linear(config.spectral_hidden, d - half))
        self.peak_self_attn = _SelfAttentionBlock(d, config.n_heads,
                                                  config.spectral_hidden)
        self.binned_encoder = nn.Sequential(
            nn.Linear(config.n_bins, config.spectral_hidden), nn.ReLU(),
            nn.Linear(config.spectral_hidden, d))
        self.null_spectrum = nn.Parameter(torch.zeros(d))
        self.time_mlp = nn.Sequential(nn.Linear(1, d), nn.SiLU(),
                                      nn.Linear(d, d))
        node_in = _NODE_BASE_FEATURES + d
        if config.conditioning == "concat":
            node_in += d
        self.node_in = nn.Linear(node_in, d)
        self.edge_in = nn.Linear(_EDGE_IN_FEATURES, d)
        self.blocks = nn.ModuleList(
            _NodeEdgeBlock(config) for _ in range(config.n_layers))
        self.head = nn.Sequential(
            nn.Linear(d, config.edge_hidden), nn.ReLU(),
            nn.Linear(config.edge_hidden, EDGE_CLASSES))
        self.unconditional_trained = False

    def encode_peaks(self, peak_mz: torch.Tensor,
                     peak_intensity: torch.Tensor,
                     token_mask: torch.Tensor) -> torch.Tensor:
        """(B, K) m/z and intensity arrays to (B, K, d) tokens."""
        mz = self.mz_mlp((peak_mz / self.config.max_mz)[..., None])
        it = self.intensity_mlp(peak_intensity[..., None])
        tokens = torch.cat([mz, it], dim=-1)
        if self.config.encoding == "tokens_selfattn":
            tokens = self.peak_self_attn(tokens, key_padding_mask=~token_mask)
        return tokens * token_mask[..., None]

    def forward(self, node_feat, edge_feat, node_mask, t_frac,
                spec_tokens, spec_mask):
        """Per-pair endpoint logits (B, N, N, D), symmetric in (i, j).

        ``spec_tokens`` already contains either encoded peaks, the binned
        global vector, or the null embedding row per sample.
        """
        bsz, n, _ = node_feat.shape
        time_emb = self.time_mlp(t_frac[:, None])
        node_parts = [node_feat, time_emb[:, None, :].expand(bsz, n, -1)]
        if self.config.conditioning == "concat":
            denom = spec_mask.sum(dim=1, keepdim=True).clamp(min=1)
            pooled = spec_tokens.sum(dim=1) / denom
            node_parts.append(pooled[:, None, :].expand(bsz, n, -1))
        h = self.node_in(torch.cat(node_parts, dim=-1))
        h = h * node_mask[..., None]
        e = self.edge_in(edge_feat)
        for block in self.blocks:
            h, e = block(h, e, node_mask, spec_tokens, spec_mask)
        return self.head(e)


def tokenize_peaks(spec: Spectrum, model: GeneratorModel) -> PeakTokens:
    """Encode a spectrum's peaks into tokens (with self-attention when the
    configured encoding uses it)."""
    if not spec.peaks:
        raise EmptySpectrumError(f"spectrum {spec.record_id!r} has no peaks")
    mz = torch.tensor([[p.mz for p in spec.peaks]], dtype=torch.float32)
    intensity = torch.tensor([[p.intensity for p in spec.peaks]],
                             dtype=torch.float32)
    mask = torch.ones_like(mz, dtype=torch.bool)
    tokens = model.encode_peaks(mz, intensity, mask)
    return PeakTokens(tokens=tokens[0])


def cfg_logits(cond: torch.Tensor, uncond: torch.Tensor,
               scale: float) -> torch.Tensor:
    """Classifier-free guidance: (1 + scale) * cond - scale * uncond."""
    if cond.shape != uncond.shape:
        raise ValueError("conditional/unconditional logit shapes differ")
    return (1.0 + scale) * cond - scale * uncond


# ---------------------------------------------------------------------------
# Layout: molecule -> scaffold-first atom ordering
# ---------------------------------------------------------------------------

@dataclass
class MoleculeLayout:
    """Scaffold-first atom ordering of a molecule for the edge process."""

    atoms: tuple[Atom, ...]
    scaffold: Scaffold
    scaffold_size: int
    endpoint: EdgeStateTensor
    initial: EdgeStateTensor


def molecule_layout(mol: MolGraph, scaffold: Scaffold | None = None) -> MoleculeLayout:
    if scaffold is None:
        scaffold = murcko_scaffold(mol)
    n_scaf = scaffold.graph.n_atoms
    scaffold_parents = [scaffold.parent_atom_index[i] for i in range(n_scaf)]
    in_scaffold = set(scaffold_parents)
    free_parents = sorted(
        (i for i in range(mol.n_atoms) if i not in in_scaffold),
        key=lambda i: (mol.atoms[i].element, i))
    order = scaffold_parents + free_parents
    position = {parent: idx for idx, parent in enumerate(order)}

    atoms = tuple(scaffold.graph.atoms[i] for i in range(n_scaf)) + tuple(
        mol.atoms[i] for i in free_parents)
    n = mol.n_atoms
    endpoint = EdgeStateTensor.initial(n, [], n_scaf)
    for i, j, kind in mol.bonds:
        endpoint.states[EdgeStateTensor.pair_index(
            position[i], position[j], n)] = BOND_TO_CLASS[kind]
    initial = endpoint.copy()
    initial.states[~initial.frozen] = 0
    return MoleculeLayout(atoms=atoms, scaffold=scaffold, scaffold_size=n_scaf,
                          endpoint=endpoint, initial=initial)


def generation_layout(spec: Spectrum, scaffold: Scaffold) -> MoleculeLayout:
    """Layout for generation: scaffold atoms plus formula free atoms."""
    free = free_atoms(spec.formula, scaffold)
    free_list = []
    for element in sorted(free):
        free_list.extend([element] * free[element])
    atoms = tuple(scaffold.graph.atoms) + tuple(
        Atom(element) for element in free_list)
    n = len(atoms)
    n_scaf = scaffold.graph.n_atoms
    scaffold_bonds = [(i, j, kind) for i, j, kind in scaffold.graph.bonds]
    initial = EdgeStateTensor.initial(n, scaffold_bonds, n_scaf)
    return MoleculeLayout(atoms=atoms, scaffold=scaffold, scaffold_size=n_scaf,
                          endpoint=initial.copy(), initial=initial)


def edge_tensor_to_molgraph(tensor: EdgeStateTensor, layout: MoleculeLayout) -> MolGraph:
    """Materialize a molecule from terminal edge states; raises ValenceError
    if the result violates valence."""
    bonds = tensor.to_bonds()
    n = tensor.n_atoms
    aromatic = [False] * n
    orders: list[list[float]] = [[] for _ in range(n)]
    for i, j, kind in bonds:
        orders[i].append(BOND_ORDER[kind])
        orders[j].append(BOND_ORDER[kind])
        if kind == AROMATIC:
            aromatic[i] = True
            aromatic[j] = True

    scaffold_graph = layout.scaffold.graph
    atoms = []
    for idx in range(n):
        template = layout.atoms[idx]
        if idx < layout.scaffold_size:
            old_total = sum(scaffold_graph.bond_orders(idx))
            is_aromatic = template.aromatic or aromatic[idx]
            if sum(orders[idx]) == old_total and is_aromatic == template.aromatic:
                atoms.append(template)
                continue
            implicit_h = infer_implicit_h(template.element,
                                          template.formal_charge, is_aromatic,
                                          orders[idx])
            atoms.append(Atom(template.element, template.formal_charge,
                              is_aromatic, implicit_h))
        else:
            implicit_h = infer_implicit_h(template.element, 0, aromatic[idx],
                                          orders[idx])
            atoms.append(Atom(template.element, 0, aromatic[idx], implicit_h))
    mol = MolGraph.from_lists(atoms, bonds)
    mol.validate()
    return mol


def contains_scaffold(mol: MolGraph, layout: MoleculeLayout) -> bool:
    """Structural check that the scaffold sits frozen at the front of ``mol``."""
    scaffold_graph = layout.scaffold.graph
    k = layout.scaffold_size
    if mol.n_atoms < k:
        return False
    for idx in range(k):
        got, want = mol.atoms[idx], scaffold_graph.atoms[idx]
        if (got.element, got.formal_charge) != (want.element, want.formal_charge):
            return False
    mol_internal = {(i, j, kind) for i, j, kind in mol.bonds
                    if i < k and j < k}
    return mol_internal == set(scaffold_graph.bonds)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _spectrum_bundle(model: GeneratorModel, spectra: list[Spectrum | None],
                     dtype=torch.float32):
    """Stack per-sample spectrum tokens, substituting the null embedding when
    a sample is unconditioned."""
    config = model.config
    if config.encoding == "binned":
        rows = []
        null_rows = []
        for spec in spectra:
            if spec is None:
                rows.append(torch.zeros(config.n_bins, dtype=dtype))
                null_rows.append(True)
            else:
                binned = bin_spectrum(spec, config.bin_width, config.max_mz)
                rows.append(torch.as_tensor(binned.bins, dtype=dtype))
                null_rows.append(False)
        encoded = model.binned_encoder(torch.stack(rows))[:, None, :]
        null = torch.tensor(null_rows)
        if null.any():
            encoded = torch.where(null[:, None, None],
                                  model.null_spectrum[None, None, :].to(dtype),
                                  encoded)
        mask = torch.ones(len(spectra), 1, dtype=torch.bool)
        return encoded, mask

    k_max = max((len(s.peaks) for s in spectra if s is not None), default=1)
    k_max = max(k_max, 1)
    mz = torch.zeros(len(spectra), k_max, dtype=dtype)
    intensity = torch.zeros(len(spectra), k_max, dtype=dtype)
    mask = torch.zeros(len(spectra), k_max, dtype=torch.bool)
    null = torch.zeros(len(spectra), dtype=torch.bool)
    for b, spec in enumerate(spectra):
        if spec is None:
            null[b] = True
            mask[b, 0] = True
            continue
        for k, peak in enumerate(spec.peaks):
            mz[b, k] = peak.mz
            intensity[b, k] = peak.intensity
            mask[b, k] = True
    tokens = model.encode_peaks(mz, intensity, mask)
    if null.any():
        null_token = model.null_spectrum[None, None, :].to(dtype)
        tokens = torch.where(null[:, None, None], null_token, tokens)
    return tokens, mask


def _dense_edge_features(states: np.ndarray, frozen: np.ndarray,
                         n_atoms: int, dtype=torch.float32) -> torch.Tensor:
    """(B, P) pair states to dense (B, N, N, D+1) one-hot + frozen flag."""
    bsz = states.shape[0]
    feat = torch.zeros(bsz, n_atoms, n_atoms, _EDGE_IN_FEATURES, dtype=dtype)
    pair_i, pair_j = np.triu_indices(n_atoms, k=1)
    onehot = torch.nn.functional.one_hot(
        torch.as_tensor(states, dtype=torch.long), EDGE_CLASSES).to(dtype)
    frozen_t = torch.as_tensor(frozen, dtype=dtype).expand(bsz, -1)
    feat[:, pair_i, pair_j, :EDGE_CLASSES] = onehot
    feat[:, pair_j, pair_i, :EDGE_CLASSES] = onehot
    feat[:, pair_i, pair_j, EDGE_CLASSES] = frozen_t
    feat[:, pair_j, pair_i, EDGE_CLASSES] = frozen_t
    return feat


def predict_endpoint(input: DenoiserInput, model: GeneratorModel) -> torch.Tensor:
    """Endpoint logits for every non-frozen pair, in pair order."""
    tensor = input.edge_states
    if input.spectrum is None and not model.unconditional_trained:
        raise UncalibratedError(
            "model was trained without condition dropout; unconditional "
            "inference is uncalibrated")
    n = tensor.n_atoms
    free = ~tensor.frozen
    node_feat = torch.from_numpy(
        node_feature_matrix(input.atoms, input.scaffold_size))[None, ...]
    edge_feat = _dense_edge_features(tensor.states[None, :], tensor.frozen, n)
    node_mask = torch.ones(1, n, dtype=torch.bool)
    t_frac = torch.tensor([input.t / input.n_steps], dtype=torch.float32)
    spec_tokens, spec_mask = _spectrum_bundle(model, [input.spectrum])
    logits = model(node_feat, edge_feat, node_mask, t_frac, spec_tokens,
                   spec_mask)
    pair_i, pair_j = np.triu_indices(n, k=1)
    per_pair = logits[0, pair_i, pair_j, :]
    return per_pair[torch.as_tensor(free)]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class _TrainItem:
    layout: MoleculeLayout
    spectrum: Spectrum


def prepare_training_items(dataset: list[tuple[Spectrum, MolGraph]]) -> list[_TrainItem]:
    items = []
    for spec, mol in dataset:
        if hill_formula(mol) != str(spec.formula):
            raise DataError(
                f"record {spec.record_id!r}: formula {spec.formula} does not "
                f"match molecule {hill_formula(mol)}")
        items.append(_TrainItem(layout=molecule_layout(mol), spectrum=spec))
    return items


def _batch_loss(model: GeneratorModel, items: list[_TrainItem],
                schedule: NoiseSchedule, t_values: np.ndarray,
                e_t_states: list[np.ndarray], conditioned: np.ndarray,
                dtype=torch.float32) -> torch.Tensor:
    """ELBO estimate for one batch of noisy states (shared by training and
    the finite-difference tests)."""
    bsz = len(items)
    n_max = max(item.layout.endpoint.n_atoms for item in items)
    node_feat = torch.zeros(bsz, n_max, _NODE_BASE_FEATURES, dtype=dtype)
    edge_feat = torch.zeros(bsz, n_max, n_max, _EDGE_IN_FEATURES, dtype=dtype)
    node_mask = torch.zeros(bsz, n_max, dtype=torch.bool)
    t_frac = torch.as_tensor(t_values, dtype=dtype) / schedule.n_steps
    free_mask = torch.zeros(bsz, n_max, n_max, dtype=torch.bool)
    cur_dense = torch.zeros(bsz, n_max, n_max, dtype=torch.long)
    end_dense = torch.zeros(bsz, n_max, n_max, dtype=torch.long)

    for b, item in enumerate(items):
        n = item.layout.endpoint.n_atoms
        node_mask[b, :n] = True
        node_feat[b, :n] = torch.from_numpy(
            node_feature_matrix(item.layout.atoms, item.layout.scaffold_size))
        edge_feat[b, :n, :n] = _dense_edge_features(
            e_t_states[b][None, :], item.layout.endpoint.frozen, n, dtype)[0]
        pair_i, pair_j = np.triu_indices(n, k=1)
        free = ~item.layout.endpoint.frozen
        fi = torch.as_tensor(pair_i[free]), torch.as_tensor(pair_j[free])
        free_mask[b, fi[0], fi[1]] = True
        cur_dense[b, fi[0], fi[1]] = torch.as_tensor(
            e_t_states[b][free], dtype=torch.long)
        end_dense[b, fi[0], fi[1]] = torch.as_tensor(
            item.layout.endpoint.states[free], dtype=torch.long)

    spectra = [item.spectrum if conditioned[b] else None
               for b, item in enumerate(items)]
    spec_tokens, spec_mask = _spectrum_bundle(model, spectra, dtype)
    logits = model(node_feat, edge_feat, node_mask, t_frac, spec_tokens,
                   spec_mask)

    alphas = torch.as_tensor(schedule.alphas, dtype=dtype)[
        torch.as_tensor(t_values, dtype=torch.long)]
    alpha = alphas[:, None, None, None]
    cur_onehot = torch.nn.functional.one_hot(cur_dense, EDGE_CLASSES).to(dtype)
    end_onehot = torch.nn.functional.one_hot(end_dense, EDGE_CLASSES).to(dtype)
    p = alpha * cur_onehot + (1 - alpha) * end_onehot
    q = alpha * cur_onehot + (1 - alpha) * torch.softmax(logits, dim=-1)
    kl = kl_categorical(p.reshape(-1, EDGE_CLASSES),
                        q.reshape(-1, EDGE_CLASSES)).reshape(bsz, n_max, n_max)
    kl = kl * free_mask
    n_free = free_mask.sum(dim=(1, 2)).clamp(min=1)
    per_sample = schedule.n_steps * kl.sum(dim=(1, 2)) / n_free
    return per_sample.mean()


def sample_noisy_states(item: _TrainItem, schedule: NoiseSchedule, t: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw e_t for every pair: e_0 with prob prod_{tau<t} alpha_tau, else
    the endpoint; frozen pairs stay at the scaffold state."""
    endpoint = item.layout.endpoint
    stay = schedule.alpha_bars[t]
    states = endpoint.states.copy()
    free = ~endpoint.frozen
    keep = rng.random(free.sum()) < stay
    noisy = np.where(keep, 0, endpoint.states[free])
    states[free] = noisy
    return states


def train_generator(dataset: list[tuple[Spectrum, MolGraph]],
                    schedule: NoiseSchedule, config: GeneratorConfig,
                    log_every: int = 0) -> tuple[GeneratorModel, list[float]]:
    """Train the endpoint predictor on (spectrum, molecule) pairs.

    Scaffolds come from the molecules themselves; the spectrum condition is
    dropped with ``config.condition_dropout`` probability to calibrate the
    unconditional branch for guidance.
    """
    items = prepare_training_items(dataset)
    if not items:
        raise ConfigError("empty training set")
    torch.manual_seed(derive_seed(config.seed, "init"))
    model = GeneratorModel(config)
    optimizer = torch.optim.AdamW(model.parameters(),
                                  lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    data_rng = np.random.default_rng(derive_seed(config.seed, "data"))
    dropout_rng = np.random.default_rng(derive_seed(config.seed, "dropout"))
    losses: list[float] = []
    model.train()
    for step in range(config.train_steps):
        batch_idx = data_rng.integers(0, len(items),
                                      size=min(config.batch_size, len(items)))
        batch = [items[i] for i in batch_idx]
        t_values = data_rng.integers(0, schedule.n_steps, size=len(batch))
        e_t_states = [sample_noisy_states(item, schedule, int(t), data_rng)
                      for item, t in zip(batch, t_values)]
        conditioned = dropout_rng.random(len(batch)) >= config.condition_dropout
        loss = _batch_loss(model, batch, schedule, t_values, e_t_states,
                           conditioned)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean(losses[-log_every:])
            print(f"generator step {step + 1}: loss {recent:.4f}")
    model.eval()
    model.unconditional_trained = config.condition_dropout > 0
    return model, losses


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def generate(spec: Spectrum, scaffold: Scaffold, model: GeneratorModel,
             config: GeneratorConfig, rng: np.random.Generator) -> RankedMolecules:
    """Sample N trajectories, keep valence-valid molecules, rank by
    frequency then mean trajectory log-likelihood then canonical SMILES."""
    layout = generation_layout(spec, scaffold)
    schedule = cosine_schedule(config.n_steps)
    free = ~layout.initial.frozen
    if not free.any():
        mol = edge_tensor_to_molgraph(layout.initial, layout)
        entry = GeneratedCandidate(smiles=write_smiles(mol),
                                   frequency=config.n_samples,
                                   mean_log_likelihood=0.0)
        return RankedMolecules(query_id=spec.record_id, entries=(entry,),
                               valid_fraction=1.0)

    use_cfg = config.uses_cfg and config.cfg_scale != 0.0
    if use_cfg and not model.unconditional_trained:
        raise UncalibratedError(
            "guidance needs an unconditionally-calibrated model; train with "
            "condition_dropout > 0 or set the guidance scale to 0")

    predictor = _make_batch_predictor(model, config, layout, spec, use_cfg)
    if config.valence_masking:
        tensors, loglik = _masked_trajectories(schedule, layout, predictor,
                                               rng, config.n_samples)
    else:
        tensors, loglik = sample_trajectories(schedule, layout.initial,
                                              predictor, rng, config.n_samples)

    by_smiles: dict[str, list[float]] = defaultdict(list)
    n_valid = 0
    for tensor, ll in zip(tensors, loglik):
        try:
            mol = edge_tensor_to_molgraph(tensor, layout)
        except ValenceError:
            continue
        n_valid += 1
        by_smiles[write_smiles(mol)].append(float(ll))

    entries = [
        GeneratedCandidate(smiles=smiles, frequency=len(lls),
                           mean_log_likelihood=float(np.mean(lls)))
        for smiles, lls in by_smiles.items()
    ]
    entries.sort(key=lambda c: (-c.frequency, -c.mean_log_likelihood, c.smiles))
    return RankedMolecules(query_id=spec.record_id, entries=tuple(entries),
                           valid_fraction=n_valid / config.n_samples)


def _make_batch_predictor(model: GeneratorModel, config: GeneratorConfig,
                          layout: MoleculeLayout, spec: Spectrum,
                          use_cfg: bool):
    n = layout.initial.n_atoms
    frozen = layout.initial.frozen
    free = ~frozen
    pair_i, pair_j = np.triu_indices(n, k=1)
    free_i = torch.as_tensor(pair_i[free])
    free_j = torch.as_tensor(pair_j[free])
    node_feat_single = torch.from_numpy(
        node_feature_matrix(layout.atoms, layout.scaffold_size))

    @torch.no_grad()
    def batch_predictor(states: np.ndarray, t: int) -> np.ndarray:
        bsz = states.shape[0]
        node_feat = node_feat_single[None, ...].expand(bsz, -1, -1)
        edge_feat = _dense_edge_features(states, frozen, n)
        node_mask = torch.ones(bsz, n, dtype=torch.bool)
        t_frac = torch.full((bsz,), t / config.n_steps, dtype=torch.float32)

        def run(spectra):
            tokens, mask = _spectrum_bundle(model, spectra)
            logits = model(node_feat, edge_feat, node_mask, t_frac, tokens,
                           mask)
            return logits[:, free_i, free_j, :]

        cond = run([spec] * bsz)
        if use_cfg:
            uncond = run([None] * bsz)
            cond = cfg_logits(cond, uncond, config.cfg_scale)
        return cond.numpy()

    return batch_predictor


def _masked_trajectories(schedule: NoiseSchedule, layout: MoleculeLayout,
                         batch_predictor, rng: np.random.Generator,
                         n_samples: int):
    """Trajectory sampling with per-pair valence-aware logit masking.

    Pairs are resolved sequentially within each step against running sigma
    occupancies, so every accepted jump keeps both endpoints within their
    maximum valence and the terminal molecule is always valid.
    """
    init = layout.initial
    n = init.n_atoms
    free_idx = np.flatnonzero(~init.frozen)
    pair_i, pair_j = np.triu_indices(n, k=1)
    caps = np.array([
        max(allowed_valences(atom.element, atom.formal_charge))
        for atom in layout.atoms
    ], dtype=np.float64)

    states = np.tile(init.states, (n_samples, 1))
    loglik = np.zeros(n_samples)
    occupancy = np.zeros((n_samples, n))
    for p, (i, j) in enumerate(zip(pair_i, pair_j)):
        sigma = _CLASS_SIGMA[states[:, p]]
        occupancy[:, i] += sigma
        occupancy[:, j] += sigma

    for t in range(schedule.n_steps):
        logits = np.asarray(batch_predictor(states, t), dtype=np.float64)
        alpha = float(schedule.alphas[t])
        for f_pos, p in enumerate(free_idx):
            i, j = int(pair_i[p]), int(pair_j[p])
            cur = states[:, p]
            cur_sigma = _CLASS_SIGMA[cur]
            head_i = caps[i] - (occupancy[:, i] - cur_sigma)
            head_j = caps[j] - (occupancy[:, j] - cur_sigma)
            headroom = np.minimum(head_i, head_j)
            allowed = _CLASS_SIGMA[None, :] <= headroom[:, None] + 1e-9
            allowed[:, 0] = True
            row = logits[:, f_pos, :].copy()
            row[~allowed] = -np.inf
            shifted = row - row.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            cumulative = probs.cumsum(axis=1)
            u = rng.random((n_samples, 1))
            endpoint = np.minimum((u > cumulative).sum(axis=1),
                                  EDGE_CLASSES - 1)
            jump = rng.random(n_samples) >= alpha
            new = np.where(jump, endpoint, cur)
            p_new = probs[np.arange(n_samples), new]
            p_trans = alpha * (new == cur) + (1 - alpha) * p_new
            loglik += np.log(np.maximum(p_trans, 1e-30))
            delta = _CLASS_SIGMA[new] - cur_sigma
            occupancy[:, i] += delta
            occupancy[:, j] += delta
            states[:, p] = new

    tensors = [EdgeStateTensor(n, states[k].astype(np.int8),
                               init.frozen.copy()) for k in range(n_samples)]
    return tensors, loglik

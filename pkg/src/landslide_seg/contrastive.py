"""Hyper-pixel contrastive learning: candidates, anchors, queues, keys and loss.

A hyper-pixel is a ``stride x stride`` patch of the input rasters; it lines
up with one pixel of the stride-``stride`` encoder feature map. Landslide
anchors come from patches on the upper rim of a landslide (partially
labelled and higher than the landslide's median elevation), background
anchors from patches with no landslide pixels at all.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .config import ContrastiveConfig

BACKGROUND = 0
LANDSLIDE = 1

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class QueueUnderfilledError(RuntimeError):
    pass


class EmptyCandidateClassError(RuntimeError):
    pass


@dataclass(frozen=True)
class HyperPixelCandidate:
    grid_pos: Tuple[int, int]
    cls: int
    landslide_pixel_count: int
    mean_elevation_m: float
    component_id: Optional[int] = None
    batch_index: int = 0


class CandidateSet(list):
    """A list of candidates that also reports whether any landslide anchor exists."""

    @property
    def landslide(self) -> List[HyperPixelCandidate]:
        return [c for c in self if c.cls == LANDSLIDE]

    @property
    def background(self) -> List[HyperPixelCandidate]:
        return [c for c in self if c.cls == BACKGROUND]

    @property
    def has_landslide(self) -> bool:
        return any(c.cls == LANDSLIDE for c in self)

    def positions(self, cls: int) -> np.ndarray:
        rows = [(c.batch_index, *c.grid_pos) for c in self if c.cls == cls]
        return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def _patch_view(a: np.ndarray, s: int) -> np.ndarray:
    h, w = a.shape
    return a.reshape(h // s, s, w // s, s).swapaxes(1, 2)


def enumerate_candidates(label, dem, config: Optional[ContrastiveConfig] = None,
                         batch_index: int = 0) -> CandidateSet:
    """Scan every hyper-pixel of one image and return the anchor candidates.

    A patch is a landslide candidate when its landslide pixel count lies in
    ``[min_pixels, max_pixels]`` and its mean elevation is strictly greater
    than the median elevation of the 8-connected landslide component that
    contributes most pixels to it (lowest component id on ties). Patches
    with zero landslide pixels are background candidates.
    """
    cfg = config or ContrastiveConfig()
    s = cfg.stride
    label = np.asarray(label)
    dem = np.asarray(dem, dtype=np.float64)
    if label.shape != dem.shape or label.ndim != 2:
        raise ValueError(f"label {label.shape} and dem {dem.shape} must be equal 2-D shapes")
    h, w = label.shape
    if h % s or w % s:
        raise ValueError(f"raster size {h}x{w} is not a multiple of stride {s}")

    mask = label.astype(bool)
    components, n_comp = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    medians = (np.asarray(ndimage.median(dem, components, np.arange(1, n_comp + 1)))
               if n_comp else np.zeros(0))
    counts = _patch_view(mask.astype(np.int64), s).sum(axis=(2, 3))
    means = _patch_view(dem, s).mean(axis=(2, 3))
    comp_patches = _patch_view(components, s)

    out = CandidateSet()
    for u, v in zip(*np.nonzero(counts == 0)):
        out.append(HyperPixelCandidate((int(u), int(v)), BACKGROUND, 0, float(means[u, v]),
                                       None, batch_index))
    boundary = (counts >= cfg.min_pixels) & (counts <= cfg.max_pixels)
    for u, v in zip(*np.nonzero(boundary)):
        ids = comp_patches[u, v].ravel()
        tally = np.bincount(ids[ids > 0])
        comp = int(np.argmax(tally))  # argmax picks the lowest id on ties
        if means[u, v] > medians[comp - 1]:
            out.append(HyperPixelCandidate((int(u), int(v)), LANDSLIDE, int(counts[u, v]),
                                           float(means[u, v]), comp, batch_index))
    out.sort(key=lambda c: (c.batch_index, -c.cls, c.grid_pos))
    return out


@dataclass
class AnchorSet:
    embeddings: torch.Tensor  # (n, D)
    classes: torch.Tensor  # (n,) int64
    positions: np.ndarray  # (n, 3): batch index, row, col on the feature grid
    short_sampled: Dict[int, bool] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.classes)

    def empty_classes(self) -> List[int]:
        present = set(self.classes.tolist())
        return [c for c in (LANDSLIDE, BACKGROUND) if c not in present]


def choose_anchor_positions(candidates: Sequence[HyperPixelCandidate], K: int,
                            rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, Dict[int, bool]]:
    """Draw up to K positions per class uniformly without replacement.

    Landslide positions come first. A class with fewer than K candidates
    contributes all of them and is flagged as short-sampled.
    """
    cset = candidates if isinstance(candidates, CandidateSet) else CandidateSet(candidates)
    positions, classes, short = [], [], {}
    for cls in (LANDSLIDE, BACKGROUND):
        pos = cset.positions(cls)
        n = min(K, len(pos))
        short[cls] = len(pos) < K
        if n:
            idx = np.sort(rng.choice(len(pos), size=n, replace=False))
            positions.append(pos[idx])
            classes.append(np.full(n, cls, dtype=np.int64))
    if not positions:
        return np.zeros((0, 3), np.int64), np.zeros(0, np.int64), short
    return np.concatenate(positions), np.concatenate(classes), short


def gather_pixels(feature_map: torch.Tensor, positions: np.ndarray) -> torch.Tensor:
    """Rows of ``feature_map[b, :, u, v]`` for each (b, u, v) in ``positions``."""
    if feature_map.dim() == 3:
        feature_map = feature_map.unsqueeze(0)
    pos = torch.as_tensor(np.asarray(positions, dtype=np.int64).reshape(-1, 3))
    B, _, h, w = feature_map.shape
    if len(pos) and ((pos[:, 0] >= B).any() or (pos[:, 1] >= h).any() or (pos[:, 2] >= w).any()
                     or (pos < 0).any()):
        raise IndexError(f"anchor position outside the {B}x{h}x{w} feature grid")
    return feature_map[pos[:, 0], :, pos[:, 1], pos[:, 2]]


def sample_anchors(candidates, feature_map: torch.Tensor, K: int,
                   rng: np.random.Generator, strict: bool = False) -> AnchorSet:
    """Anchors are projection-head pixels at sampled candidate positions.

    An empty class shows up in ``AnchorSet.empty_classes()``; with
    ``strict=True`` it raises :class:`EmptyCandidateClassError` instead.
    """
    positions, classes, short = choose_anchor_positions(candidates, K, rng)
    anchors = AnchorSet(gather_pixels(feature_map, positions), torch.as_tensor(classes),
                        positions, short)
    if strict and anchors.empty_classes():
        raise EmptyCandidateClassError(f"no candidates for class(es) {anchors.empty_classes()}")
    return anchors


class CategoryQueue:
    """Fixed-length FIFO ring buffer of unit-norm keys for one class."""

    def __init__(self, buffer: torch.Tensor, cls: int):
        self.buffer = buffer.detach().clone()
        self.cls = cls
        self.head = 0
        self.age = torch.full((len(buffer),), -1, dtype=torch.int64)
        self.real_count = 0  # keys enqueued since initialisation
        self.updates = 0

    @property
    def length(self) -> int:
        return self.buffer.shape[0]

    @property
    def warm(self) -> bool:
        """True once every random initial key has been overwritten."""
        return self.real_count >= self.length

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor, tag: Optional[int] = None) -> torch.Tensor:
        """Write ``keys`` over the oldest rows and return the evicted rows."""
        keys = keys.detach()
        k = keys.shape[0]
        if k > self.length:
            raise ValueError(f"cannot enqueue {k} keys into a queue of length {self.length}")
        if k == 0:
            return keys
        norms = keys.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError("keys must be unit-normalised before enqueueing")
        slots = (self.head + torch.arange(k)) % self.length
        evicted = self.buffer[slots].clone()
        self.buffer[slots] = keys.to(self.buffer.dtype)
        self.age[slots] = self.updates if tag is None else tag
        self.head = (self.head + k) % self.length
        self.real_count += k
        self.updates += 1
        return evicted

    def newest(self, k: int) -> torch.Tensor:
        slots = (self.head - k + torch.arange(k)) % self.length
        return self.buffer[slots]

    def fifo_order(self) -> torch.Tensor:
        """Slot indices from oldest to newest."""
        return (self.head + torch.arange(self.length)) % self.length

    def state_dict(self) -> Dict[str, object]:
        return {"buffer": self.buffer, "age": self.age, "head": self.head,
                "real_count": self.real_count, "updates": self.updates}

    def load_state_dict(self, state) -> None:
        self.buffer = torch.as_tensor(state["buffer"]).clone()
        self.age = torch.as_tensor(state["age"]).clone()
        self.head = int(state["head"])
        self.real_count = int(state["real_count"])
        self.updates = int(state["updates"])


def initialize_queues(config: ContrastiveConfig, seed: int = 0,
                      dtype: torch.dtype = torch.float32) -> Dict[int, CategoryQueue]:
    gen = torch.Generator().manual_seed(seed)
    queues = {}
    for cls in (BACKGROUND, LANDSLIDE):
        raw = torch.randn(config.L, config.D, generator=gen, dtype=torch.float64)
        queues[cls] = CategoryQueue(F.normalize(raw, dim=1).to(dtype), cls)
    return queues


def _stable_rank(sims: np.ndarray, descending: bool) -> np.ndarray:
    slots = np.arange(len(sims))
    return np.lexsort((slots, -sims if descending else sims))


def select_key_indices(similarities: np.ndarray, M: int, hard_fraction: float,
                       rng: np.random.Generator, hardest: str) -> np.ndarray:
    """Slot indices of M keys: the hard ones first, then uniform picks.

    ``hardest="lowest"`` takes the least similar keys as hard (positives);
    ``"highest"`` the most similar (negatives). Ties fall to the lower slot.
    """
    sims = np.asarray(similarities, dtype=np.float64)
    if len(sims) < M:
        raise QueueUnderfilledError(f"queue holds {len(sims)} keys, need M={M}")
    n_hard = int(np.floor(hard_fraction * M + 1e-9))
    order = _stable_rank(sims, descending=(hardest == "highest"))
    hard = order[:n_hard]
    rest = order[n_hard:]
    extra = rng.choice(len(rest), size=M - n_hard, replace=False)
    return np.concatenate([hard, rest[np.sort(extra)]])


def sample_keys(anchor: torch.Tensor, cls: int, queues: Dict[int, CategoryQueue], M: int,
                hard_fraction: float, rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Positive keys from the anchor's own class queue, negatives from the other."""
    a = anchor.detach().to(torch.float64).cpu().numpy()
    same, other = queues[cls], queues[1 - cls]
    for q in (same, other):
        if q.length < M:
            raise QueueUnderfilledError(f"class {q.cls} queue has {q.length} keys, need M={M}")
    pos_idx = select_key_indices(same.buffer.to(torch.float64).numpy() @ a, M, hard_fraction,
                                 rng, "lowest")
    neg_idx = select_key_indices(other.buffer.to(torch.float64).numpy() @ a, M, hard_fraction,
                                 rng, "highest")
    return same.buffer[torch.as_tensor(pos_idx)], other.buffer[torch.as_tensor(neg_idx)]


def supervised_contrastive_loss(anchor: torch.Tensor, positives: torch.Tensor,
                                negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-anchor loss averaged over positives.

    For each positive ``p`` the term is ``-log(e^{a.p/t} / (e^{a.p/t} +
    sum_n e^{a.n/t}))``, evaluated as ``log(1 + exp(LSE_n - a.p/t))`` so
    that large logits never overflow. Leading batch dimensions of
    ``anchor`` (..., D) broadcast against keys of shape (..., M, D).
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    pos_logits = torch.einsum("...d,...md->...m", anchor, positives) / tau
    neg_logits = torch.einsum("...d,...md->...m", anchor, negatives) / tau
    neg_lse = torch.logsumexp(neg_logits, dim=-1, keepdim=True)
    terms = torch.logaddexp(torch.zeros_like(pos_logits), neg_lse - pos_logits)
    return terms.mean(dim=-1)


def contrastive_term(anchors: AnchorSet, queues: Dict[int, CategoryQueue], config: ContrastiveConfig,
                     rng: np.random.Generator) -> torch.Tensor:
    """Mean supervised contrastive loss over all anchors of a batch."""
    pos, neg = [], []
    for emb, cls in zip(anchors.embeddings, anchors.classes.tolist()):
        p, n = sample_keys(emb, cls, queues, config.M, config.hard_fraction, rng)
        pos.append(p)
        neg.append(n)
    dtype = anchors.embeddings.dtype
    pos_t = torch.stack(pos).to(dtype)
    neg_t = torch.stack(neg).to(dtype)
    return supervised_contrastive_loss(anchors.embeddings, pos_t, neg_t, config.tau).mean()


class MomentumPair:
    """Online encoder/projection and their moving-average twins.

    The twins are deep copies with gradients switched off; they only
    change through :meth:`update`.
    """

    def __init__(self, encoder: nn.Module, projection: nn.Module, m: float = 0.999):
        if not 0.0 <= m < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {m}")
        self.encoder_q = encoder
        self.projection_q = projection
        self.encoder_k = copy.deepcopy(encoder)
        self.projection_k = copy.deepcopy(projection)
        for p in self._momentum_params():
            p.requires_grad_(False)
        self.m = m

    def _momentum_params(self) -> Iterable[nn.Parameter]:
        yield from self.encoder_k.parameters()
        yield from self.projection_k.parameters()

    def pairs(self):
        for online, twin in ((self.encoder_q, self.encoder_k),
                             (self.projection_q, self.projection_k)):
            q_params = dict(online.named_parameters())
            k_params = dict(twin.named_parameters())
            if q_params.keys() != k_params.keys():
                raise ValueError("online and momentum networks have different parameter names")
            for name, q in q_params.items():
                k = k_params[name]
                if q.shape != k.shape:
                    raise ValueError(f"shape mismatch for {name}: {tuple(q.shape)} vs {tuple(k.shape)}")
                yield name, q, k

    @torch.no_grad()
    def update(self) -> None:
        momentum_update(self)

    def train(self, mode: bool = True) -> "MomentumPair":
        self.encoder_k.train(mode)
        self.projection_k.train(mode)
        return self

    def to(self, *args, **kwargs) -> "MomentumPair":
        self.encoder_k.to(*args, **kwargs)
        self.projection_k.to(*args, **kwargs)
        return self


@torch.no_grad()
def momentum_update(pair: MomentumPair) -> MomentumPair:
    """theta_k <- m * theta_k + (1 - m) * theta_q, written as an increment.

    ``theta_k + (1 - m) * (theta_q - theta_k)`` leaves equal parameters
    bit-identical, which the plain weighted sum does not.
    """
    for _, q, k in list(pair.pairs()):
        k.add_(q.detach() - k, alpha=1.0 - pair.m)
    return pair


@torch.no_grad()
def reencode_anchors(hrsi: torch.Tensor, dem: torch.Tensor, positions: np.ndarray,
                     pair: MomentumPair) -> torch.Tensor:
    """Keys for the anchor positions computed by the momentum networks."""
    fused = pair.encoder_k(hrsi, dem).fused
    emb = pair.projection_k(fused)
    return gather_pixels(emb, positions)

"""Prototype scoring, losses, the Dice metric, and the assembled pipeline.

The query map is scored per pixel against the foreground prototype and the
strongest background prototype; a temperature-scaled two-way softmax gives
class probabilities, which are bilinearly upsampled to image scale for the
cross-entropy losses. Hard decisions (the background argmax, cluster
assignments) stay off the tape and can be frozen via plans so a rebuilt
graph is differentiable through the identical structure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import bcma, fspa, numerics as nx, ran
from .encoder import Encoder
from .errors import (
    ConfigError,
    NoBackgroundError,
    ProbabilityFloorWarning,
    ShapeMismatchError,
)

PROB_FLOOR = 1e-12


@dataclass
class Episode:
    """One 1-way 1-shot task: a support pair and a query to segment."""

    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_mask: np.ndarray | None = None
    class_id: int = -1
    support_id: int = -1
    query_id: int = -1


@dataclass
class StagePlan:
    """Frozen hard decisions of one forward pass."""

    clusters: fspa.ClusterResult | None = None
    bg_choice: np.ndarray | None = None


@dataclass
class EpisodePlan:
    """Stage plans for the forward run and the role-swapped run."""

    forward: StagePlan = field(default_factory=StagePlan)
    swapped: StagePlan = field(default_factory=StagePlan)


@dataclass
class PredictionBundle:
    """Probabilities, the hard mask, and retained similarity maps."""

    probabilities: nx.Tensor  # (2, H, W) at image scale; channel 1 = foreground
    feature_probabilities: nx.Tensor  # (2, H', W') before upsampling
    mask: np.ndarray  # (H, W) uint8 argmax, foreground = 1
    fg_similarity: np.ndarray  # (H', W') cosine against the foreground prototype
    bg_similarity: np.ndarray  # (B, H', W') cosine per background prototype
    bg_choice: np.ndarray | None  # winning background row per pixel (max mode)


def _cols(fm: nx.Tensor) -> nx.Tensor:
    d = fm.shape[0]
    return nx.transpose(nx.reshape(fm, (d, fm.shape[1] * fm.shape[2])))


def segment(f_q: nx.Tensor, p_f: nx.Tensor, p_b: nx.Tensor, temperature: float,
            image_hw=None, bg_aggregate: str = "max",
            bg_choice: np.ndarray | None = None) -> PredictionBundle:
    """Score the query map against the prototypes and produce probabilities.

    bg_choice freezes the winning background prototype per pixel; left as
    None the argmax is taken fresh (and recorded as a constant index).
    """
    f_q, p_f, p_b = nx.as_tensor(f_q), nx.as_tensor(p_f), nx.as_tensor(p_b)
    d = f_q.shape[0]
    if p_f.shape != (d,):
        raise ShapeMismatchError(f"foreground prototype {p_f.data.shape} vs dim {d}")
    if p_b.ndim != 2 or p_b.shape[1] != d:
        raise ShapeMismatchError(f"background prototypes {p_b.data.shape} vs dim {d}")
    nb = p_b.shape[0]
    if nb == 0:
        raise NoBackgroundError("no background support")
    h, w = f_q.shape[1], f_q.shape[2]
    n = h * w
    cols_t = _cols(f_q)  # (N, D)
    qn = nx.l2norm(cols_t, axis=1)  # (N,)
    fdots = nx.reduce_sum(nx.mul(cols_t, nx.reshape(p_f, (1, d))), axis=1)
    s_f = nx.clip(fdots / (qn * nx.l2norm(p_f)), -1.0, 1.0)  # (N,)
    bdots = nx.reduce_sum(
        nx.mul(nx.reshape(p_b, (nb, 1, d)), nx.reshape(cols_t, (1, n, d))), axis=2
    )  # (B, N)
    bn = nx.l2norm(p_b, axis=1, keepdims=True)
    s_all = nx.clip(bdots / (bn * nx.reshape(qn, (1, n))), -1.0, 1.0)
    if bg_aggregate == "max":
        if bg_choice is None:
            bg_choice = np.argmax(s_all.data, axis=0)
        onehot = np.zeros((nb, n))
        onehot[bg_choice, np.arange(n)] = 1.0
        s_b = nx.reduce_sum(nx.mul(s_all, nx.Tensor(onehot)), axis=0)
    elif bg_aggregate == "mean":
        bg_choice = None
        s_b = nx.reduce_mean(s_all, axis=0)
    else:
        raise ConfigError(f"unknown background aggregate {bg_aggregate!r}")
    logits = nx.mul(
        nx.concat([nx.reshape(s_b, (1, n)), nx.reshape(s_f, (1, n))], axis=0),
        float(temperature),
    )
    probs_feat = nx.reshape(nx.softmax(logits, axis=0), (2, h, w))
    if image_hw is None or tuple(image_hw) == (h, w):
        probs_img = probs_feat
    else:
        probs_img = nx.bilinear_resize(probs_feat, tuple(image_hw))
    mask = (probs_img.data[1] > probs_img.data[0]).astype(np.uint8)
    return PredictionBundle(
        probabilities=probs_img,
        feature_probabilities=probs_feat,
        mask=mask,
        fg_similarity=s_f.data.reshape(h, w).copy(),
        bg_similarity=s_all.data.reshape(nb, h, w).copy(),
        bg_choice=bg_choice,
    )


def seg_loss(probs: nx.Tensor, mask: np.ndarray) -> nx.Tensor:
    """Mean two-class cross-entropy against a binary mask at the same scale."""
    probs = nx.as_tensor(probs)
    m = np.asarray(mask, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] != 2 or probs.shape[1:] != m.shape:
        raise ShapeMismatchError(
            f"probabilities {probs.data.shape} do not match mask {m.shape}"
        )
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError("loss target mask must be binary")
    if (probs.data < PROB_FLOOR).any():
        warnings.warn(
            f"probabilities below {PROB_FLOOR:g} clamped before log",
            ProbabilityFloorWarning,
            stacklevel=2,
        )
    logp = nx.log(nx.clip(probs, PROB_FLOOR, None))
    target = nx.Tensor(np.stack([1.0 - m, m]))
    return nx.neg(nx.reduce_sum(nx.mul(target, logp))) / float(m.size)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap score 2|A∩B|/(|A|+|B|) scaled to [0,100]; empty vs empty is 100."""
    a = np.asarray(pred)
    b = np.asarray(gt)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a != 0
    b = b != 0
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 200.0 * int((a & b).sum()) / total


class Model:
    """The full pipeline with ablation switches.

    use_ran=False feeds raw support features forward; use_fspa=False pools
    the foreground prototype straight off the attended map; use_bcma=False
    selects unrefined grid prototypes as background.
    """

    def __init__(self, feature_dim: int = 32, encoder_seed=0,
                 num_clusters: int = 5, kmeans_max_iters: int = 50, cluster_seed=0,
                 band=(0.3, 0.6, 0.3), beta: float = 0.2, pool_window=(4, 4),
                 bg_threshold: float = 0.5, temperature: float = 20.0,
                 bg_aggregate: str = "max", use_ran: bool = True,
                 use_fspa: bool = True, use_bcma: bool = True,
                 freeze_bank: bool = False, no_adjust: bool = False,
                 random_bank: bool = False, bank_seed=0):
        self.params = nx.ParamStore()
        self.encoder = Encoder(feature_dim, encoder_seed, self.params)
        self.bcma = bcma.BackgroundAttention(
            feature_dim, self.params, band=band, beta=beta,
            pool_window=pool_window, bg_threshold=bg_threshold,
            freeze_a=freeze_bank, no_adjust=no_adjust,
            random_init=random_bank, seed=bank_seed,
        )
        self.num_clusters = int(num_clusters)
        self.kmeans_max_iters = int(kmeans_max_iters)
        self.cluster_seed = cluster_seed
        self.temperature = float(temperature)
        self.bg_aggregate = bg_aggregate
        self.use_ran = bool(use_ran)
        self.use_fspa = bool(use_fspa)
        self.use_bcma = bool(use_bcma)

    def forward(self, support_image, support_mask, query_image,
                plan: StagePlan | None = None, support_features=None,
                query_features=None):
        """Run one episode; returns (bundle, plan actually used)."""
        f_s = (nx.as_tensor(support_features) if support_features is not None
               else self.encoder.encode(support_image))
        f_q = (nx.as_tensor(query_features) if query_features is not None
               else self.encoder.encode(query_image))
        f_hat = ran.fuse(f_s, f_q) if self.use_ran else f_s
        feat_hw = (f_hat.shape[1], f_hat.shape[2])
        fg_frac = fspa.downsample_mask(support_mask, feat_hw)
        clusters = None
        if self.use_fspa:
            clusters = fspa.cluster_prototypes(
                f_hat, fg_frac, self.num_clusters, self.cluster_seed,
                max_iters=self.kmeans_max_iters,
                reuse=plan.clusters if plan else None,
            )
            sims = fspa.similarity_maps(f_hat, clusters.prototypes)
            f_bar = fspa.fuse_channelwise(sims, clusters.prototypes, feat_hw)
            p_f = fspa.foreground_prototype(f_bar, fg_frac)
        else:
            p_f = fspa.foreground_prototype(f_hat, fg_frac)
        if self.use_bcma:
            p_b = self.bcma.background_prototypes(f_hat, fg_frac)
        else:
            p_b = self.bcma.raw_background(f_hat, fg_frac)
        image_hw = (np.asarray(query_image).shape if query_image is not None
                    else np.asarray(support_mask).shape)
        bundle = segment(
            f_q, p_f, p_b, self.temperature, image_hw=image_hw,
            bg_aggregate=self.bg_aggregate,
            bg_choice=plan.bg_choice if plan else None,
        )
        return bundle, StagePlan(clusters=clusters, bg_choice=bundle.bg_choice)

    def predict(self, episode: Episode) -> PredictionBundle:
        """Inference-only forward pass (no graph)."""
        with nx.no_grad():
            bundle, _ = self.forward(
                episode.support_image, episode.support_mask, episode.query_image
            )
        return bundle

    def seg_loss(self, episode: Episode, plan: StagePlan | None = None):
        bundle, used = self.forward(
            episode.support_image, episode.support_mask, episode.query_image,
            plan=plan,
        )
        return seg_loss(bundle.probabilities, episode.query_mask), used

    def reg_loss(self, episode: Episode, plan: StagePlan | None = None):
        """Alignment loss: swap roles (query becomes support) and score the
        support mask with the swapped prediction."""
        if episode.query_mask is None:
            raise ValueError("alignment loss needs the query mask (training only)")
        bundle, used = self.forward(
            episode.query_image, episode.query_mask, episode.support_image,
            plan=plan,
        )
        return seg_loss(bundle.probabilities, episode.support_mask), used

    def total_loss(self, episode: Episode, plan: EpisodePlan | None = None):
        """L = L_seg + L_reg; returns (loss, plan used, float components)."""
        l_seg, fwd = self.seg_loss(episode, plan.forward if plan else None)
        l_reg, swp = self.reg_loss(episode, plan.swapped if plan else None)
        total = l_seg + l_reg
        parts = {"seg": l_seg.item(), "reg": l_reg.item()}
        return total, EpisodePlan(forward=fwd, swapped=swp), parts

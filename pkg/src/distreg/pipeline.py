"""Training loop and experiment protocols: curriculum training,
distance-binned evaluation, alignment-disturbance robustness, and density
variation.

Randomness discipline: every random choice draws from a purpose-specific
generator seeded as ``[seed, tag, step]``, so streams never shift when an
unrelated computation is skipped, and identical (seed, config, data) give
bit-identical training logs and parameters.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import model as mdl
from .aggregate import ApgConfig, DisturbConfig, generate_apc, select_nonkey_frames
from .dataio import FrameSequence, PairSpec, distill_records
from .errors import EmptyResults, NonFinite, NonFiniteLoss, NoPairs
from .geometry import (
    Correspondences,
    Points,
    RigidTransform,
    apply_transform,
    as_points,
    voxel_downsample,
)
from .losses import LossConfig, LossReport, chamfer, hardest_contrastive, l2_offset_reg, total_loss
from .register import (
    CRITERIA,
    Criterion,
    PairResult,
    RansacConfig,
    evaluate,
    match_features,
    ransac_register,
)

_TAG_SHUFFLE = 101
_TAG_DISTURB = 211
_TAG_METRIC = 307
_TAG_DENSITY = 401


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    input_voxel_size: float = 0.0      # 0 disables key-frame pre-voxelization
    crop_to_scope: bool = True         # crop training key frames to the scope sphere
    gt_corr_radius: float = 0.3
    val_inlier_radius: float = 0.6
    model: mdl.ModelConfig = field(default_factory=mdl.ModelConfig)
    apg: ApgConfig = field(default_factory=ApgConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    n_disturb: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


@dataclass(frozen=True)
class CurriculumSpec:
    """Pre-train on a near-distance bin, then finetune on [d1, d2] when the
    far edge reaches 30 m; below that no finetuning is applied."""

    pretrain_bin: tuple[float, float] = (5.0, 20.0)
    d2: float = 20.0
    overlap_max: float = 1.0
    tau: float = 0.5

    def __post_init__(self):
        lo, hi = self.pretrain_bin
        if not 0 <= lo < hi:
            raise ValueError("invalid pretrain bin")

    @property
    def finetune_active(self) -> bool:
        return self.d2 >= 30.0

    @property
    def finetune_bin(self) -> tuple[float, float]:
        return (self.pretrain_bin[0], self.d2)


@dataclass(frozen=True)
class ExperimentConfig:
    distance_bins: tuple[tuple[float, float], ...] = ((5.0, 10.0), (10.0, 20.0), (20.0, 30.0))
    n_disturb_sweep: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    downsample_ratios: tuple[float, ...] = (0.1, 0.2, 0.5, 1.0)

    def __post_init__(self):
        if any(not 0 < r <= 1 for r in self.downsample_ratios):
            raise ValueError("downsample ratios must be in (0, 1]")


@dataclass(frozen=True)
class StepRecord:
    step: int
    l_ml: float
    l_cd: float
    l_l2: float
    total: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    val_inlier_ratio: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)


def write_train_log(path, log: TrainLog) -> None:
    lines = ["kind,index,l_ml,l_cd,l_l2,total,val_inlier_ratio"]
    for s in log.steps:
        lines.append(f"step,{s.step},{s.l_ml:.17g},{s.l_cd:.17g},{s.l_l2:.17g},{s.total:.17g},")
    for e in log.epochs:
        lines.append(f"epoch,{e.epoch},,,,,{e.val_inlier_ratio:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Correspondence and validation helpers
# ---------------------------------------------------------------------------

def gt_correspondences(cloud_a, cloud_b, gt: RigidTransform, radius: float = 0.3) -> Correspondences:
    """Mutual-closest point pairs within ``radius`` after ground-truth
    alignment of A onto B."""
    a = apply_transform(as_points(cloud_a), gt)
    b = as_points(cloud_b)
    d_ab, a_to_b = cKDTree(b).query(a, k=1)
    _, b_to_a = cKDTree(a).query(b, k=1)
    ia = np.arange(a.shape[0])
    mutual = (b_to_a[a_to_b] == ia) & (d_ab < radius)
    pairs = np.stack([ia[mutual], a_to_b[mutual]], axis=1)
    return Correspondences(pairs.astype(np.int64))


def feature_inlier_ratio(
    features_a, features_b, cloud_a, cloud_b, gt: RigidTransform, radius: float = 0.6
) -> float:
    """Fraction of mutual-NN feature matches whose points land within
    ``radius`` under the ground-truth alignment."""
    matches = match_features(features_a, features_b)
    if len(matches) == 0:
        return 0.0
    a = apply_transform(as_points(cloud_a), gt)
    b = as_points(cloud_b)
    d = np.linalg.norm(a[matches.pairs[:, 0]] - b[matches.pairs[:, 1]], axis=1)
    return float(np.count_nonzero(d < radius)) / len(matches)


def _prepare_cloud(cloud, input_voxel_size: float) -> Points:
    if input_voxel_size > 0:
        return voxel_downsample(cloud, input_voxel_size)
    return as_points(cloud)


def relative_gt(frame_a, frame_b) -> RigidTransform:
    """Ground-truth transform mapping frame A sensor coords into frame B's."""
    return frame_b.pose.inverse().compose(frame_a.pose)


# ---------------------------------------------------------------------------
# Per-pair loss (the training step core; also the gradient-check target)
# ---------------------------------------------------------------------------

def pair_loss_and_grads(
    cloud_a,
    cloud_b,
    apc_a,
    apc_b,
    gt_pairs: Correspondences,
    enc: mdl.EncoderParams,
    dec: mdl.DecoderParams,
    cfg: LossConfig,
    rng: np.random.Generator | None = None,
) -> tuple[LossReport, mdl.Gradients]:
    """Full loss l_ml + lambda1·l_cd + lambda2·l_l2 for one training pair,
    with exact gradients for every encoder and decoder tensor.

    The chamfer term reconstructs each cloud against its own aggregate;
    the L2 term sums the two per-cloud offset means.
    """
    fa, cache_a = mdl.encoder_forward_cached(cloud_a, enc)
    fb, cache_b = mdl.encoder_forward_cached(cloud_b, enc)

    l_ml, d_fa, d_fb = hardest_contrastive(fa, fb, gt_pairs, cfg, rng=rng)

    run_decoder = cfg.lambda1 > 0 or cfg.lambda2 > 0
    l_cd = 0.0
    l_l2 = 0.0
    grads: mdl.Gradients | None = None
    if run_decoder:
        per_cloud = []
        for cloud, feats, apc in ((cloud_a, fa, apc_a), (cloud_b, fb, apc_b)):
            offsets, dec_cache = mdl.decoder_forward_cached(feats, dec, cloud=cloud)
            recon = mdl.fuse(cloud, offsets)
            cd, d_recon = chamfer(recon.points, apc)
            reg, d_reg = l2_offset_reg(offsets)
            l_cd += cd
            l_l2 += reg
            d_off = cfg.lambda1 * d_recon.reshape(offsets.shape) + cfg.lambda2 * d_reg
            per_cloud.append((dec_cache, d_off))
        g_a = mdl.backward(enc, cache_a, d_fa, dec, per_cloud[0][0], per_cloud[0][1])
        g_b = mdl.backward(enc, cache_b, d_fb, dec, per_cloud[1][0], per_cloud[1][1])
        grads = mdl.add_gradients(g_a, g_b)
    else:
        g_a = mdl.backward(enc, cache_a, d_fa, dec_params=dec)
        g_b = mdl.backward(enc, cache_b, d_fb, dec_params=dec)
        grads = mdl.add_gradients(g_a, g_b)

    report = total_loss(l_ml, l_cd, l_l2, cfg)
    return report, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class _PairContext:
    """Immutable per-pair data reused across epochs."""

    cloud_a: Points
    cloud_b: Points
    gt: RigidTransform
    gt_pairs: Correspondences
    key_a: int
    key_b: int


def _build_pair_context(seq_a, seq_b, i, j, cfg: TrainConfig) -> _PairContext:
    fa = seq_a[seq_a.position_of(i)]
    fb = seq_b[seq_b.position_of(j)]
    ca, cb = fa.cloud, fb.cloud
    if cfg.crop_to_scope:
        # keep training inputs within the geometry the aggregate target covers
        r = cfg.apg.scope_radius
        ca = ca[np.linalg.norm(ca, axis=1) <= r]
        cb = cb[np.linalg.norm(cb, axis=1) <= r]
    ca = _prepare_cloud(ca, cfg.input_voxel_size)
    cb = _prepare_cloud(cb, cfg.input_voxel_size)
    gt = relative_gt(fa, fb)
    pairs = gt_correspondences(ca, cb, gt, cfg.gt_corr_radius)
    return _PairContext(ca, cb, gt, pairs, i, j)


def train(
    seq_a: FrameSequence,
    seq_b: FrameSequence,
    pairs: list[tuple[int, int]],
    cfg: TrainConfig,
    init: tuple[mdl.EncoderParams, mdl.DecoderParams] | None = None,
    val_pairs: list[tuple[int, int]] | None = None,
) -> tuple[mdl.EncoderParams, mdl.DecoderParams, TrainLog]:
    """Momentum-SGD over per-pair steps; one epoch visits every pair once
    in a seeded shuffled order. The learning rate halves at 2/3 of the
    epochs. Deterministic for a fixed (seed, config, data).

    Raises NoPairs on an empty pair list and NonFiniteLoss (with the step
    index) if the loss diverges.
    """
    if not pairs:
        raise NoPairs("training requires at least one distilled pair")
    if init is not None:
        enc, dec = copy.deepcopy(init[0]), copy.deepcopy(init[1])
    else:
        enc, dec = mdl.init_params(cfg.seed, cfg.model)

    contexts = {(i, j): _build_pair_context(seq_a, seq_b, i, j, cfg) for i, j in pairs}
    apc_cache: dict[tuple[int, int, int], Points] = {}

    def apc_for(seq, which, key_index, step):
        if cfg.n_disturb > 0:
            # near sequence boundaries fewer non-key frames exist; disturb
            # at most what the selector can provide
            available = len(select_nonkey_frames(seq, key_index, cfg.apg))
            disturb = DisturbConfig(min(cfg.n_disturb, available),
                                    seed=_derive(cfg.seed, _TAG_DISTURB, step))
            return generate_apc(seq, key_index, cfg.apg, disturb)
        cache_key = (which, key_index, 0)
        if cache_key not in apc_cache:
            apc_cache[cache_key] = generate_apc(seq, key_index, cfg.apg)
        return apc_cache[cache_key]

    velocity = {name: np.zeros_like(t) for name, t in mdl.named_parameters(enc, dec)}
    log = TrainLog()
    decay_epoch = int(np.ceil(cfg.epochs * 2 / 3))
    step = 0
    run_decoder = cfg.loss.lambda1 > 0 or cfg.loss.lambda2 > 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, _TAG_SHUFFLE, epoch]).permutation(len(pairs))
        lr = cfg.learning_rate * (0.5 if epoch >= decay_epoch else 1.0)
        for pos in order:
            i, j = pairs[int(pos)]
            ctx = contexts[(i, j)]
            apc_a = apc_for(seq_a, 0, i, step) if run_decoder else None
            apc_b = apc_for(seq_b, 1, j, step) if run_decoder else None
            rng_metric = np.random.default_rng([cfg.seed, _TAG_METRIC, step])
            try:
                report, grads = pair_loss_and_grads(
                    ctx.cloud_a, ctx.cloud_b, apc_a, apc_b, ctx.gt_pairs,
                    enc, dec, cfg.loss, rng=rng_metric,
                )
            except NonFinite as exc:
                raise NonFiniteLoss(step) from exc
            if not np.isfinite(report.total):
                raise NonFiniteLoss(step)
            for name, tensor in mdl.named_parameters(enc, dec):
                v = cfg.momentum * velocity[name] + grads[name]
                velocity[name] = v
                mdl.set_parameter(enc, dec, name, tensor - lr * v)
            log.steps.append(StepRecord(step, report.l_ml, report.l_cd, report.l_l2, report.total))
            step += 1
        if val_pairs:
            ratios = []
            for vi, vj in val_pairs:
                key = (vi, vj)
                if key not in contexts:
                    contexts[key] = _build_pair_context(seq_a, seq_b, vi, vj, cfg)
                vctx = contexts[key]
                fa = mdl.encoder_forward(vctx.cloud_a, enc)
                fb = mdl.encoder_forward(vctx.cloud_b, enc)
                ratios.append(feature_inlier_ratio(
                    fa, fb, vctx.cloud_a, vctx.cloud_b, vctx.gt, cfg.val_inlier_radius))
            log.epochs.append(EpochRecord(epoch, float(np.mean(ratios))))
    return enc, dec, log


def _derive(seed: int, tag: int, step: int) -> list[int]:
    return [int(seed), int(tag), int(step)]


def train_curriculum(
    seq_a: FrameSequence,
    seq_b: FrameSequence,
    cfg: TrainConfig,
    spec: CurriculumSpec,
) -> tuple[mdl.EncoderParams, mdl.DecoderParams, list[TrainLog]]:
    """Pre-train on the near bin, then (for d2 >= 30) continue from the
    resulting parameters on the widened bin."""
    pre_pairs = distill_records(
        seq_a, seq_b, PairSpec(*spec.pretrain_bin, spec.overlap_max), spec.tau)
    enc, dec, log0 = train(seq_a, seq_b, [(r.i, r.j) for r in pre_pairs], cfg)
    logs = [log0]
    if spec.finetune_active:
        fine_pairs = distill_records(
            seq_a, seq_b, PairSpec(*spec.finetune_bin, spec.overlap_max), spec.tau)
        enc, dec, log1 = train(
            seq_a, seq_b, [(r.i, r.j) for r in fine_pairs], cfg, init=(enc, dec))
        logs.append(log1)
    return enc, dec, logs


# ---------------------------------------------------------------------------
# Evaluation protocols (encoder only: no aggregation or decoder on this path)
# ---------------------------------------------------------------------------

def register_pair(
    cloud_a,
    cloud_b,
    enc: mdl.EncoderParams,
    ransac: RansacConfig,
    input_voxel_size: float = 0.0,
):
    """Online registration: encode both key frames, match features
    mutually, estimate the transform robustly."""
    ca = _prepare_cloud(cloud_a, input_voxel_size)
    cb = _prepare_cloud(cloud_b, input_voxel_size)
    fa = mdl.encoder_forward(ca, enc)
    fb = mdl.encoder_forward(cb, enc)
    corr = match_features(fa, fb)
    return ransac_register(corr, ca, cb, ransac)


def evaluate_pairs(
    seq_a: FrameSequence,
    seq_b: FrameSequence,
    pairs,
    enc: mdl.EncoderParams,
    ransac: RansacConfig,
    input_voxel_size: float = 0.0,
    downsample: tuple[float, int] | None = None,
) -> list[PairResult]:
    """Register and score each pair against its ground-truth transform.

    ``pairs`` holds (i, j) tuples or PairRecord-likes carrying distance and
    overlap. ``downsample=(ratio, seed)`` keeps ceil(ratio*N) points of the
    first cloud of every pair before registration."""
    out = []
    for pair in pairs:
        if isinstance(pair, tuple):
            i, j = pair
            dist = float("nan")
            overlap = float("nan")
        else:
            i, j, dist, overlap = pair.i, pair.j, pair.distance, pair.overlap
        fa = seq_a[seq_a.position_of(i)]
        fb = seq_b[seq_b.position_of(j)]
        cloud_a = fa.cloud
        if downsample is not None:
            ratio, seed = downsample
            cloud_a = random_downsample(cloud_a, ratio, np.random.default_rng(
                _derive(seed, _TAG_DENSITY, i * 1_000_003 + j)))
        gt = relative_gt(fa, fb)
        est = register_pair(cloud_a, fb.cloud, enc, ransac, input_voxel_size)
        res = evaluate(est.transform, gt, CRITERIA, est.inlier_count)
        out.append(PairResult(i, j, dist, overlap, res.rre, res.rte, res.success,
                              res.inlier_count))
    return out


def random_downsample(cloud, ratio: float, rng: np.random.Generator) -> Points:
    """Uniformly keep ceil(ratio*N) points, preserving input order."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    pts = as_points(cloud)
    n = pts.shape[0]
    keep = int(np.ceil(ratio * n))
    if keep >= n:
        return pts
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return pts[idx]


def _recall(results: list[PairResult], criterion: Criterion) -> float:
    if not results:
        raise EmptyResults("no results to aggregate")
    return float(np.mean([r.success[criterion.name] for r in results]))


def eval_distance_bins(
    enc: mdl.EncoderParams,
    seq_a: FrameSequence,
    seq_b: FrameSequence,
    bins,
    criterion: Criterion,
    ransac: RansacConfig,
    tau: float = 0.5,
    overlap_max: float = 1.0,
    input_voxel_size: float = 0.0,
) -> dict[tuple[float, float], dict]:
    """Distill pairs per distance bin and report recall per bin. Empty bins
    are reported with rr=None rather than failing."""
    bins = [tuple(b) for b in bins]
    for (a1, a2), (b1, b2) in zip(sorted(bins), sorted(bins)[1:]):
        if b1 < a2:
            raise ValueError("distance bins must be non-overlapping")
    out = {}
    for bin_ in bins:
        records = distill_records(seq_a, seq_b, PairSpec(bin_[0], bin_[1], overlap_max), tau)
        if not records:
            out[bin_] = {"rr": None, "n_pairs": 0}
            continue
        results = evaluate_pairs(seq_a, seq_b, records, enc, ransac, input_voxel_size)
        out[bin_] = {"rr": _recall(results, criterion), "n_pairs": len(records)}
    return out


def eval_disturb(
    seq_a: FrameSequence,
    seq_b: FrameSequence,
    train_pairs,
    val_pairs,
    cfg: TrainConfig,
    sweep,
    criterion: Criterion,
    ransac: RansacConfig,
) -> dict[int, float]:
    """Train one model per disturbance count (disturbance only perturbs the
    aggregation targets during training) and report recall on a clean
    validation set."""
    max_nonkey = 2 * cfg.apg.psi
    if any(n > max_nonkey for n in sweep):
        raise ValueError(f"sweep values must be <= {max_nonkey}")
    out = {}
    for n in sweep:
        run_cfg = replace(cfg, n_disturb=int(n))
        enc, _, _ = train(seq_a, seq_b, list(train_pairs), run_cfg)
        results = evaluate_pairs(seq_a, seq_b, list(val_pairs), enc, ransac,
                                 cfg.input_voxel_size)
        out[int(n)] = _recall(results, criterion)
    return out


def eval_density(
    enc: mdl.EncoderParams,
    seq_a: FrameSequence,
    seq_b: FrameSequence,
    val_pairs,
    ratios,
    criterion: Criterion,
    ransac: RansacConfig,
    seed: int = 0,
    input_voxel_size: float = 0.0,
) -> dict[float, float]:
    """Registration recall with the first cloud of every pair uniformly
    downsampled to each ratio."""
    out = {}
    for r in ratios:
        if not 0 < r <= 1:
            raise ValueError("ratios must be in (0, 1]")
        results = evaluate_pairs(
            seq_a, seq_b, list(val_pairs), enc, ransac, input_voxel_size,
            downsample=(float(r), seed) if r < 1 else None,
        )
        out[float(r)] = _recall(results, criterion)
    return out

"""Desk-scale two-stage distillation on synthetic liver cases.

Pipeline per case::

    CT, PET --preprocess--> fixed random encoder --masked GAP--> region graph
           --graph statistics--> linear head --> 3 grade logits

Encoders are fixed; only the parts after pooling are trained.  The teacher
head sees features of a two-branch encoder (stride-2 stem + Swin block per
modality, CBAM fusion).  The student has a SegResNet-style encoder on the
stacked (CT, PET) input and shares the teacher's CBAM parameters.  An affine
adapter maps its region nodes into the teacher's node space, where the
region-graph losses compare them and where, by default, a copy of the
teacher's classifier reads them.  The adapter gives the graph losses a
trainable path into the logits.

Randomness is counter based: every draw for case ``i`` in epoch ``e`` comes
from ``np.random.default_rng([seed, stream, e, i])``, so results do not
depend on evaluation order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .errors import ConfigError, DivergenceError
from .losses import (
    FocalConfig,
    RgdWeights,
    TotalWeights,
    focal_loss,
    kd_loss,
    rgd_loss,
    rgd_value_from_components,
    soft_predictions,
)
from .metrics import ScoreSet, summarize
from .otgw import GwConfig
from .regiongraph import extract_regions, masked_gap, match_mask_to_features
from .volio import MaskVolume, PreprocessConfig, Volume, preprocess_ct, preprocess_pet, refine_mask

N_CLASSES = 3
MODALITIES = ("pet", "ct")

# RNG stream ids
_STREAM_DATA, _STREAM_DROPOUT, _STREAM_ORDER, _STREAM_DEGRADE, _STREAM_SPLIT = 1, 2, 3, 4, 5

# Published count levels, taken as labelled (see DegradeConfig).
LEVEL_COUNTS = {"mild": 1e4, "severe": 5e4}


def case_rng(seed: int, stream: int, *counters) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, *(int(c) for c in counters)])


# ----------------------------------------------------------------- configs


@dataclass(frozen=True)
class DropoutConfig:
    p_drop: float = 0.5
    seed: int = 0
    eligible: tuple = MODALITIES

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError(f"p_drop must be in [0, 1], got {self.p_drop}")
        if not self.eligible or any(m not in MODALITIES for m in self.eligible):
            raise ConfigError(f"eligible modalities must be a non-empty subset of {MODALITIES}")


@dataclass(frozen=True)
class DegradeConfig:
    """CT degradation level.

    ``mild`` and ``severe`` use 1e4 and 5e4 photons per ray as labelled in the
    reference table (note: more photons normally means *less* noise).
    ``counts`` overrides the level's photon count; ``mixed`` picks native or
    severe per case with probability 1/2.
    """

    level: str = "native"
    counts: float = None
    seed: int = 0

    def __post_init__(self):
        if self.level not in ("native", "mild", "severe", "mixed", "counts"):
            raise ConfigError(f"unknown degradation level {self.level!r}")
        if self.level == "counts" and self.counts is None:
            raise ConfigError("level 'counts' needs an explicit photon count")
        if self.counts is not None and not self.counts > 0:
            raise ConfigError(f"photon counts must be positive, got {self.counts}")


@dataclass(frozen=True)
class TrainConfig:
    teacher_epochs: int = 150
    student_epochs: int = 50
    teacher_batch: int = 2
    student_batch: int = 8
    teacher_lr: float = 2e-4
    student_lr: float = 1e-4
    tau: float = 4.0
    weights: TotalWeights = TotalWeights()
    focal: FocalConfig = FocalConfig()
    rgd: RgdWeights = RgdWeights()
    gw: GwConfig = GwConfig()
    seed: int = 0

    def __post_init__(self):
        if self.teacher_epochs < 0 or self.student_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.teacher_batch <= 0 or self.student_batch <= 0:
            raise ConfigError("batch sizes must be positive")
        if self.teacher_lr < 0 or self.student_lr < 0 or not self.tau > 0:
            raise ConfigError("learning rates must be >= 0 and tau > 0")


@dataclass(frozen=True)
class SyntheticCase:
    ct: Volume
    pet: Volume
    mask: MaskVolume
    grade: int
    index: int = 0


# -------------------------------------------------------- modality dropout


@dataclass(frozen=True)
class DropRecord:
    dropped: str = None  # "pet", "ct" or None


def drop_draw(cfg: DropoutConfig, rng: np.random.Generator) -> DropRecord:
    """Decide which modality (if any) to drop; at most one, never both."""
    if rng.random() < cfg.p_drop:
        return DropRecord(cfg.eligible[int(rng.integers(len(cfg.eligible)))])
    return DropRecord(None)


def modality_dropout(case: SyntheticCase, cfg: DropoutConfig, rng: np.random.Generator):
    record = drop_draw(cfg, rng)
    if record.dropped is None:
        return case, record
    zeroed = lambda v: Volume(np.zeros_like(v.data), v.spacing)  # noqa: E731
    if record.dropped == "pet":
        return replace(case, pet=zeroed(case.pet)), record
    return replace(case, ct=zeroed(case.ct)), record


# ------------------------------------------------------------ degradation

# HU -> line-integral proxy: water (0 HU) maps to WATER_LINE_INTEGRAL, roughly
# mu_water = 0.2 / cm over a 30 cm abdominal path.
WATER_LINE_INTEGRAL = 6.0


def resolve_level(cfg: DegradeConfig, rng: np.random.Generator):
    """(applied level, photon count or None) for one case."""
    level = cfg.level
    if level == "mixed":
        level = "severe" if rng.random() < 0.5 else "native"
    if level == "native":
        return "native", None
    counts = cfg.counts if cfg.counts is not None else LEVEL_COUNTS[level]
    return level, float(counts)


def poisson_ct(v: Volume, counts: float, rng: np.random.Generator) -> Volume:
    """Image-domain low-dose proxy: Poisson photon counts on exp(-attenuation), log back to HU."""
    if not counts > 0:
        raise ConfigError(f"photon counts must be positive, got {counts}")
    hu = v.data.astype(np.float64)
    line = np.maximum(WATER_LINE_INTEGRAL * (1.0 + hu / 1000.0), 0.0)
    detected = np.maximum(rng.poisson(counts * np.exp(-line)), 1)
    noisy = -np.log(detected / counts)
    return Volume((noisy / WATER_LINE_INTEGRAL - 1.0) * 1000.0, v.spacing)


def degrade_ct(v: Volume, cfg: DegradeConfig, rng: np.random.Generator = None) -> Volume:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    _, counts = resolve_level(cfg, rng)
    if counts is None:
        return v
    return poisson_ct(v, counts, rng)


def degrade_dataset(cases, cfg: DegradeConfig):
    """Degrade every case's CT; returns (cases, per-case applied level)."""
    out, record = [], []
    for case in cases:
        rng = case_rng(cfg.seed, _STREAM_DEGRADE, case.index)
        level, counts = resolve_level(cfg, rng)
        ct = case.ct if counts is None else poisson_ct(case.ct, counts, rng)
        out.append(replace(case, ct=ct))
        record.append(level)
    return out, record


# ---------------------------------------------------------------- synthesis

GRADE_MIXTURE = (0.3, 0.4, 0.3)
DEFAULT_DIMS = (16, 32, 32)


def _ellipsoid(dims, centre, axes):
    z, y, x = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    return ((z - centre[0]) / axes[0]) ** 2 + ((y - centre[1]) / axes[1]) ** 2 + ((x - centre[2]) / axes[2]) ** 2 <= 1.0


def synthesize_case(index: int, seed: int, dims=DEFAULT_DIMS, mixture=GRADE_MIXTURE) -> SyntheticCase:
    """One synthetic case.  Generative rule:

    * grade ~ Categorical(mixture)
    * tumour count = 1 + Binomial(2, 0.15 + 0.3 * grade)
    * tumour CT mean 45 - 15 * grade HU, PET uptake 1.3 + 0.7 * grade (liver: 60 HU / 1.0),
      each with a per-tumour jitter, plus per-voxel noise
    * two bright kidney-like blobs (30 HU, uptake 4.0) outside the liver, so the
      PET upper percentile is set by them and not by the tumours
    * an ellipsoidal liver with spherical tumours fully inside it, kept apart
      by at least two voxels; the mask is passed through :func:`refine_mask`
    """
    rng = case_rng(seed, _STREAM_DATA, index)
    dims = tuple(int(d) for d in dims)
    grade = int(rng.choice(N_CLASSES, p=mixture))
    n_tumors = 1 + int(rng.binomial(2, 0.15 + 0.3 * grade))

    centre = np.array(dims) / 2.0 - 0.5 + rng.uniform(-1.0, 1.0, 3)
    axes = np.array(dims) * rng.uniform(0.40, 0.45, 3)
    liver = _ellipsoid(dims, centre, axes)
    labels = liver.astype(np.int64)

    scale = min(dims) / 16.0
    placed = []
    for _ in range(500):
        if len(placed) == n_tumors:
            break
        radius = rng.uniform(2.0, 3.0) * scale
        # centre drawn uniformly from the liver shrunk by radius + 1.5 voxels
        room = axes - (radius + 1.5)
        if room.min() <= 0:
            continue
        direction = rng.normal(size=3)
        c = centre + room * direction / np.linalg.norm(direction) * rng.uniform() ** (1.0 / 3.0)
        if any(np.linalg.norm(c - pc) < radius + pr + 2.0 for pc, pr in placed):
            continue
        placed.append((c, radius))
    for k, (c, r) in enumerate(sorted(placed, key=lambda t: -t[1])):
        labels[_ellipsoid(dims, c, (r, r, r)) & liver] = 2 + k
    mask = refine_mask(MaskVolume(labels))

    ct = rng.normal(-80.0, 10.0, dims)
    pet = 0.6 * np.exp(rng.normal(0.0, 0.1, dims))
    for corner in (0.1, 0.9):
        c = (dims[0] / 2.0, corner * dims[1], corner * dims[2])
        blob = _ellipsoid(dims, c, (0.3 * dims[0], 0.13 * dims[1], 0.13 * dims[2])) & (mask.labels == 0)
        ct[blob] = rng.normal(30.0, 8.0, int(blob.sum()))
        pet[blob] = 4.0 * np.exp(rng.normal(0.0, 0.1, int(blob.sum())))
    ct[mask.labels == 1] = rng.normal(60.0, 8.0, int((mask.labels == 1).sum()))
    pet[mask.labels == 1] = 1.0 * np.exp(rng.normal(0.0, 0.1, int((mask.labels == 1).sum())))
    for lab in range(2, int(mask.labels.max()) + 1):
        region = mask.labels == lab
        n = int(region.sum())
        ct[region] = rng.normal(45.0 - 15.0 * grade + rng.normal(0.0, 3.0), 8.0, n)
        pet[region] = (1.3 + 0.7 * grade + rng.normal(0.0, 0.1)) * np.exp(rng.normal(0.0, 0.1, n))
    return SyntheticCase(Volume(ct), Volume(pet), mask, grade, index)


def synthesize_dataset(n_cases: int, seed: int, dims=DEFAULT_DIMS, mixture=GRADE_MIXTURE) -> list:
    if n_cases < 1:
        raise ConfigError("n_cases must be >= 1")
    return [synthesize_case(i, seed, dims, mixture) for i in range(n_cases)]


def split_indices(n: int, seed: int, test_fraction: float = 0.3):
    """Seeded shuffle, then the last ``round(test_fraction * n)`` cases are held out."""
    order = case_rng(seed, _STREAM_SPLIT).permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(order[: n - n_test]), np.sort(order[n - n_test :])


# ----------------------------------------------------------------- encoders


@dataclass(frozen=True)
class Encoders:
    """Fixed random encoder parameters for teacher and student."""

    ct_stem: np.ndarray
    pet_stem: np.ndarray
    ct_swin: tuple
    pet_swin: tuple
    cbam: nets.CbamParams
    teacher_reduce: np.ndarray
    teacher_reduce_bias: np.ndarray
    student_stem: np.ndarray
    student_res: nets.ResUnitParams
    student_reduce_bias: np.ndarray

    @property
    def feature_channels(self) -> int:
        return self.teacher_reduce.shape[0]


def build_encoders(seed: int = 0, width: int = 4, feature_channels: int = 8, window=(2, 4, 4)) -> Encoders:
    rng = np.random.default_rng([int(seed), 99])
    fused = 2 * width

    def kernel(c_out, c_in, k):
        return rng.normal(0.0, np.sqrt(2.0 / (c_in * k**3)), (c_out, c_in, k, k, k))

    def swin_pair():
        return tuple(nets.init_attention_params(width, window, heads=2, rng=rng, scale=0.3) for _ in range(2))

    student_res = nets.init_resunit_params(fused, mid=fused, down=fused, reduced=feature_channels, rng=rng)
    return Encoders(
        ct_stem=kernel(width, 1, 3),
        pet_stem=kernel(width, 1, 3),
        ct_swin=swin_pair(),
        pet_swin=swin_pair(),
        cbam=nets.init_cbam_params(fused, reduction=2, kernel_size=7, rng=rng),
        teacher_reduce=kernel(feature_channels, fused, 1),
        teacher_reduce_bias=rng.normal(0.0, 0.1, feature_channels),
        student_stem=kernel(fused, 2, 3),
        student_res=student_res,
        student_reduce_bias=student_res.reduce_bias,
    )


def _branch(x, stem, swin):
    h = nets.relu(nets.conv3d(x[None], stem, stride=2))
    grid = np.transpose(h, (1, 2, 3, 0))
    grid = nets.swin_block_forward(grid, swin[0], swin[1])
    return np.transpose(grid, (3, 0, 1, 2))


def teacher_features(ct: np.ndarray, pet: np.ndarray, enc: Encoders) -> np.ndarray:
    fused = np.concatenate([_branch(ct, enc.ct_stem, enc.ct_swin), _branch(pet, enc.pet_stem, enc.pet_swin)])
    fused = nets.cbam3d_forward(fused, enc.cbam)
    return nets.conv3d(fused, enc.teacher_reduce, enc.teacher_reduce_bias, padding=0)


def student_features(ct: np.ndarray, pet: np.ndarray, enc: Encoders) -> np.ndarray:
    h = nets.relu(nets.conv3d(np.stack([ct, pet]), enc.student_stem))
    h = nets.resunit_forward(h, enc.student_res)
    down_only = replace(enc.student_res, reduce=None, reduce_bias=None)
    h = nets.downsample_reduce(h, down_only)
    h = nets.cbam3d_forward(h, enc.cbam)
    return nets.conv3d(h, enc.student_res.reduce, enc.student_reduce_bias, padding=0)


def preprocessed_inputs(case: SyntheticCase, cfg: PreprocessConfig = PreprocessConfig(), dropped: str = None):
    """Preprocessed (ct, pet) arrays; a dropped modality is an all-zero input."""
    ct = np.zeros(case.ct.dims) if dropped == "ct" else preprocess_ct(case.ct, cfg).data.astype(np.float64)
    pet = np.zeros(case.pet.dims) if dropped == "pet" else preprocess_pet(case.pet, cfg).data.astype(np.float64)
    return ct, pet


def node_features(features: np.ndarray, mask: MaskVolume) -> np.ndarray:
    labels = match_mask_to_features(mask.labels, features.shape[1:])
    return np.stack([masked_gap(features, r) for r in extract_regions(labels)])


def graph_stats(nodes: np.ndarray) -> np.ndarray:
    """[liver node, mean tumour node, tumour count / 3]."""
    tumour_mean = nodes[1:].mean(axis=0) if nodes.shape[0] > 1 else np.zeros(nodes.shape[1])
    return np.concatenate([nodes[0], tumour_mean, [(nodes.shape[0] - 1) / 3.0]])


def graph_stats_vjp(nodes: np.ndarray, grad_stats: np.ndarray) -> np.ndarray:
    c = nodes.shape[1]
    grad = np.zeros_like(nodes)
    grad[0] = grad_stats[:c]
    if nodes.shape[0] > 1:
        grad[1:] = grad_stats[c : 2 * c] / (nodes.shape[0] - 1)
    return grad


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Standardizer":
        std = rows.std(axis=0)
        return cls(rows.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def __call__(self, x):
        return (x - self.mean) / self.std


# ----------------------------------------------------------------- training


class Adam:
    """Adam with bias correction over a dict of named arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(base: float, epoch: int, n_epochs: int) -> float:
    """Learning rate for 0-based ``epoch`` under cosine decay to 0."""
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / max(n_epochs, 1)))


HISTORY_COLUMNS = ("epoch", "total", "focal", "kd", "rgd_node", "rgd_edge", "rgd_gw", "dropped_modality_rate")


@dataclass
class History:
    rows: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            writer.writerow([r["epoch"]] + [repr(float(r[c])) for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    def check_monotone(self, column="total", window=5):
        """Record (not raise) increases of the moving-averaged loss."""
        y = self.column(column)
        if y.size < window + 1:
            return
        smooth = np.convolve(y, np.ones(window) / window, mode="valid")
        bad = np.flatnonzero(np.diff(smooth) > 1e-12)
        if bad.size:
            self.warnings.append(f"{column}: {window}-epoch moving average rises at {bad.size} epoch(s)")


def _batches(order, size):
    return [order[i : i + size] for i in range(0, len(order), size)]


@dataclass
class TeacherModel:
    head: nets.StudentHead
    scaler: Standardizer

    def logits(self, nodes: np.ndarray) -> np.ndarray:
        return nets.student_head_forward(self.scaler(graph_stats(nodes)), self.head)


def _check_finite(value, what, epoch):
    if not np.isfinite(value):
        raise DivergenceError(f"{what} became non-finite at epoch {epoch}")


def train_teacher_head(nodes: list, grades, cfg: TrainConfig):
    """Stage 1: focal-loss training of the teacher head on fixed teacher node features.

    Returns ``(TeacherModel, History)``.  History row ``e`` (e >= 1) is the
    mean focal loss over the batches of epoch ``e``, each evaluated before its
    update; row 0 is the initial loss.
    """
    if not nodes:
        raise ConfigError("train_teacher_head: no training data")
    grades = np.asarray(grades, dtype=np.int64)
    stats = np.stack([graph_stats(n) for n in nodes])
    scaler = Standardizer.fit(stats)
    x = scaler(stats)
    head = nets.StudentHead.init(x.shape[1], N_CLASSES, seed=cfg.seed)
    params = {"weight": head.weight, "bias": head.bias}
    opt = Adam()
    history = History()

    def case_loss(i, params):
        z = params["weight"] @ x[i] + params["bias"]
        return focal_loss(z, int(grades[i]), cfg.focal)

    def row(epoch, values):
        mean = float(np.mean(values))
        _check_finite(mean, "teacher focal loss", epoch)
        history.rows.append(
            dict(epoch=epoch, total=mean, focal=mean, kd=0.0, rgd_node=0.0, rgd_edge=0.0, rgd_gw=0.0,
                 dropped_modality_rate=0.0)
        )

    row(0, [case_loss(i, params).value for i in range(len(nodes))])
    for epoch in range(1, cfg.teacher_epochs + 1):
        lr = cosine_lr(cfg.teacher_lr, epoch - 1, cfg.teacher_epochs)
        order = case_rng(cfg.seed, _STREAM_ORDER, 0, epoch).permutation(len(nodes))
        values = []
        for batch in _batches(order, cfg.teacher_batch):
            gw_ = np.zeros_like(params["weight"])
            gb = np.zeros_like(params["bias"])
            for i in batch:
                rep = case_loss(i, params)
                values.append(rep.value)
                g = nets.student_head_backward(x[i], rep.gradients["logits"])
                gw_ += g["weight"]
                gb += g["bias"]
            opt.step(params, {"weight": gw_ / len(batch), "bias": gb / len(batch)}, lr)
        row(epoch, values)
    history.check_monotone("total")
    return TeacherModel(nets.StudentHead(params["weight"], params["bias"]), scaler), history


@dataclass
class StudentModel:
    """Affine node adapter into the teacher's node space, then a classifier on graph statistics.

    ``logits = W stats_scaler(graph_stats(node_scaler(raw) A^T + offset)) + b``
    with ``A``, ``offset``, ``W`` and ``b`` trainable.
    """

    adapter: np.ndarray  # (C_teacher, C_student)
    offset: np.ndarray  # (C_teacher,)
    head: nets.StudentHead
    node_scaler: Standardizer  # per channel, on raw student node features
    stats_scaler: Standardizer  # frozen, per statistic

    def project(self, raw_nodes):
        return self.node_scaler(raw_nodes) @ self.adapter.T + self.offset

    def logits(self, raw_nodes):
        return nets.student_head_forward(self.stats_scaler(graph_stats(self.project(raw_nodes))), self.head)

    def params(self) -> dict:
        return {"adapter": self.adapter, "offset": self.offset, "weight": self.head.weight, "bias": self.head.bias}

    def with_params(self, params) -> "StudentModel":
        head = nets.StudentHead(params["weight"], params["bias"])
        return replace(self, adapter=params["adapter"], offset=params["offset"], head=head)


def init_student(train_nodes: list, teacher_nodes: list, teacher: TeacherModel = None, seed: int = 0) -> StudentModel:
    """Student initialisation from unlabelled training nodes.

    The adapter starts as a per-channel moment match: standardised student
    channel ``k`` is rescaled to the teacher's channel-``k`` node mean and
    spread.  With ``teacher`` given, the student reuses the teacher's
    classifier and statistics standardiser; otherwise it gets a fresh
    small-weight head and its own standardiser.
    """
    node_scaler = Standardizer.fit(np.concatenate(train_nodes))
    target = Standardizer.fit(np.concatenate(teacher_nodes))
    c_teacher, c_student = target.mean.size, train_nodes[0].shape[1]
    adapter = np.eye(c_teacher, c_student) * target.std[:, None]
    offset = target.mean.copy()
    if teacher is not None:
        return StudentModel(adapter, offset, teacher.head.copy(), node_scaler, teacher.scaler)
    stats = np.stack([graph_stats(node_scaler(n) @ adapter.T + offset) for n in train_nodes])
    head = nets.StudentHead.init(stats.shape[1], N_CLASSES, seed=seed + 1)
    return StudentModel(adapter, offset, head, node_scaler, Standardizer.fit(stats))


def student_case_loss(model: StudentModel, raw_nodes, teacher_nodes, teacher_logits, grade, cfg: TrainConfig):
    """Total loss and parameter gradients for one case.

    Returns ``(components, grads)`` where components holds the raw focal, kd,
    rgd node/edge/gw values and the weighted total.
    """
    z_nodes = model.node_scaler(raw_nodes)
    proj = z_nodes @ model.adapter.T + model.offset
    stats = model.stats_scaler(graph_stats(proj))
    logits = model.head.weight @ stats + model.head.bias

    w = cfg.weights
    focal = focal_loss(logits, grade, cfg.focal)
    kd = kd_loss(teacher_logits, logits, cfg.tau)
    grad_logits = w.lambda_focal * focal.gradients["logits"] + w.lambda_logits * kd.gradients["logits"]
    grad_stats = (model.head.weight.T @ grad_logits) / model.stats_scaler.std
    grad_proj = graph_stats_vjp(proj, grad_stats)

    comps = {"focal": focal.value, "kd": kd.value, "rgd_node": 0.0, "rgd_edge": 0.0, "rgd_gw": 0.0, "rgd": 0.0}
    if w.lambda_rgd > 0:
        rgd = rgd_loss(proj, teacher_nodes, cfg.rgd, cfg.gw)
        comps["rgd"] = rgd.value
        for key in ("node", "edge", "gw"):
            comps[f"rgd_{key}"] = 0.0 if rgd.components[key] is None else rgd.components[key]
        grad_proj = grad_proj + w.lambda_rgd * rgd.gradients["node_features"]
    comps["total"] = w.lambda_focal * comps["focal"] + w.lambda_logits * comps["kd"] + w.lambda_rgd * comps["rgd"]
    grads = {
        "adapter": grad_proj.T @ z_nodes,
        "offset": grad_proj.sum(axis=0),
        "weight": np.outer(grad_logits, stats),
        "bias": grad_logits,
    }
    return comps, grads


def train_student(data, teacher_nodes, teacher_logits, cfg: TrainConfig, drop: DropoutConfig, model: StudentModel):
    """Stage 2: minimise the weighted focal + KD + RGD objective under modality dropout.

    ``data`` is a list of ``(variants, grade)`` where ``variants`` maps the
    dropped modality (None, "pet", "ct") to raw student node features.
    Returns ``(StudentModel, History)``; row 0 evaluates the initial model.
    """
    params = {k: v.copy() for k, v in model.params().items()}
    opt = Adam()
    history = History()
    n = len(data)

    def evaluate(i, epoch, params):
        record = drop_draw(drop, case_rng(drop.seed, _STREAM_DROPOUT, epoch, i))
        variants, grade = data[i]
        comps, grads = student_case_loss(
            model.with_params(params), variants[record.dropped], teacher_nodes[i], teacher_logits[i], grade, cfg
        )
        return comps, grads, record.dropped is not None

    def add_row(epoch, comps_list, dropped):
        row = {"epoch": epoch, "dropped_modality_rate": float(np.mean(dropped))}
        for key in ("total", "focal", "kd", "rgd_node", "rgd_edge", "rgd_gw"):
            row[key] = float(np.mean([c[key] for c in comps_list]))
        # keep the recorded total consistent with the recorded components
        w, r = cfg.weights, cfg.rgd
        rgd = rgd_value_from_components(
            {"node": row["rgd_node"], "edge": row["rgd_edge"], "gw": row["rgd_gw"]}, r
        ) if w.lambda_rgd > 0 else 0.0
        row["total"] = w.lambda_focal * row["focal"] + w.lambda_logits * row["kd"] + w.lambda_rgd * rgd
        _check_finite(row["total"], "student total loss", epoch)
        history.rows.append(row)

    results = [evaluate(i, 0, params) for i in range(n)]
    add_row(0, [r[0] for r in results], [r[2] for r in results])
    for epoch in range(1, cfg.student_epochs + 1):
        order = case_rng(cfg.seed, _STREAM_ORDER, 1, epoch).permutation(n)
        comps_list, dropped = [], []
        for batch in _batches(order, cfg.student_batch):
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            for i in batch:
                comps, grads, was_dropped = evaluate(int(i), epoch, params)
                comps_list.append(comps)
                dropped.append(was_dropped)
                for k in acc:
                    acc[k] += grads[k]
            opt.step(params, {k: v / len(batch) for k, v in acc.items()}, cfg.student_lr)
        add_row(epoch, comps_list, dropped)
    history.check_monotone("total")
    return model.with_params(params), history


# -------------------------------------------------------------- end to end


@dataclass
class DemoResult:
    teacher: TeacherModel
    student: StudentModel
    baseline: StudentModel
    teacher_history: History
    student_history: History
    metrics: dict
    baseline_metrics: dict
    test_scores: ScoreSet
    train_idx: np.ndarray
    test_idx: np.ndarray
    encoders: Encoders = None
    cases: list = None


def case_features(case: SyntheticCase, enc: Encoders, prep=PreprocessConfig()):
    """Teacher node features and student node features per dropout variant."""
    ct, pet = preprocessed_inputs(case, prep)
    t_nodes = node_features(teacher_features(ct, pet, enc), case.mask)
    variants = {}
    for dropped in (None, "pet", "ct"):
        c = np.zeros_like(ct) if dropped == "ct" else ct
        p = np.zeros_like(pet) if dropped == "pet" else pet
        variants[dropped] = node_features(student_features(c, p, enc), case.mask)
    return t_nodes, variants


def predict(model, nodes_list) -> np.ndarray:
    return np.stack([soft_predictions(model.logits(n), 1.0) for n in nodes_list])


def run_demo(n_cases: int = 200, cfg: TrainConfig = TrainConfig(), drop: DropoutConfig = DropoutConfig(),
             dims=DEFAULT_DIMS, test_fraction: float = 0.3, reuse_teacher_head: bool = True,
             teacher: TeacherModel = None) -> DemoResult:
    """Synthesize, train teacher then student, and evaluate on the held-out split.

    A given ``teacher`` skips stage 1 (its history is then empty).  The
    untrained baseline is the student at initialisation.
    """
    cases = synthesize_dataset(n_cases, cfg.seed, dims)
    enc = build_encoders(cfg.seed)
    feats = [case_features(c, enc) for c in cases]
    grades = np.array([c.grade for c in cases])
    train_idx, test_idx = split_indices(n_cases, cfg.seed, test_fraction)

    if teacher is None:
        teacher, t_hist = train_teacher_head([feats[i][0] for i in train_idx], grades[train_idx], cfg)
    else:
        t_hist = History()
    t_nodes = [feats[i][0] for i in train_idx]
    t_logits = [teacher.logits(n) for n in t_nodes]

    teacher_for_init = teacher if reuse_teacher_head else None
    baseline = init_student([feats[i][1][None] for i in train_idx], t_nodes, teacher_for_init, cfg.seed)
    data = [(feats[i][1], int(grades[i])) for i in train_idx]
    student, s_hist = train_student(data, t_nodes, t_logits, cfg, drop, baseline)

    test_nodes = [feats[i][1][None] for i in test_idx]
    scores = ScoreSet(predict(student, test_nodes), grades[test_idx])
    base_scores = ScoreSet(predict(baseline, test_nodes), grades[test_idx])
    return DemoResult(
        teacher, student, baseline, t_hist, s_hist, summarize(scores), summarize(base_scores), scores,
        train_idx, test_idx, enc, cases,
    )


def evaluate_degraded(result: DemoResult, counts: float, seed: int, ct_only: bool = True) -> dict:
    """Metrics of the trained student on held-out cases with Poisson-degraded CT."""
    cfg = DegradeConfig(level="counts", counts=counts, seed=seed)
    held_out = [result.cases[i] for i in result.test_idx]
    degraded, _ = degrade_dataset(held_out, cfg)
    nodes = []
    for case in degraded:
        ct, pet = preprocessed_inputs(case, dropped="pet" if ct_only else None)
        nodes.append(node_features(student_features(ct, pet, result.encoders), case.mask))
    labels = np.array([c.grade for c in held_out])
    return summarize(ScoreSet(predict(result.student, nodes), labels))

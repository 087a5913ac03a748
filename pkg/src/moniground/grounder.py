"""Candidate-point grounding model: fusion, localization, loss, training.

Visual candidate features and the sentence feature are projected into a
shared space, concatenated per candidate, and fused by an MLP. A
localization head scores each candidate; softmax confidences select the
candidate nearest the referred object's center, and a small head decodes a
7-DoF box from that candidate's residuals. Training optimizes the weighted
sum of candidate classification, box regression, center-shift, language
category, and reference losses.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import langenc, tensor as T
from .geom3d import Box7, points_in_box
from .langenc import LangConfig, Vocabulary
from .pointenc import (
    CandidateSet,
    EncoderConfig,
    PointEncoder,
    assemble_features,
    modality_feature_dim,
)
from .seeding import substream
from .synthdata import CATEGORIES, CATEGORY_INDEX, SIZE_PRIORS, Scene

RESIDUAL_DIM = 8  # dx, dy, dz, 3 log size ratios, sin yaw, cos yaw


class CheckpointCompatError(RuntimeError):
    """Checkpoint, vocabulary, and model configuration disagree."""


@dataclass(frozen=True)
class LossWeights:
    cls: float = 10.0
    reg: float = 10.0
    shift: float = 10.0
    lang: float = 1.0
    ref: float = 1.0

    def __post_init__(self):
        if min(self.cls, self.reg, self.shift, self.lang, self.ref) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.cls, self.reg, self.shift, self.lang, self.ref)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lang: LangConfig = field(default_factory=LangConfig)
    shared_dim: int = 128   # width of the joint projection space
    fused_dim: int = 128    # per-candidate fused feature width
    modality: str = "xyz+rgb+intensity"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 10
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    decay_epochs: tuple[int, ...] = (35, 45)
    decay_factor: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("bad optimizer settings")
        if any(d >= self.epochs for d in self.decay_epochs):
            raise ValueError("decay epochs must precede the final epoch")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-indexed epoch; decays apply after each decay epoch."""
        drops = sum(1 for d in self.decay_epochs if epoch > d)
        return self.learning_rate * self.decay_factor**drops


@dataclass
class ModelOutput:
    candidates: CandidateSet
    raw_scores: T.Tensor      # (1, M) pre-softmax localization scores
    confidences: T.Tensor     # (1, M) softmax, sums to 1
    cls_logits: T.Tensor      # (M, 1) candidate objectness
    residuals: T.Tensor       # (M, 8) box residuals per candidate
    lang_logits: T.Tensor     # (1, 12) category prediction from text
    sentence: T.Tensor        # (1, C_l)


@dataclass
class Targets:
    cls: np.ndarray           # (M,) binary
    pos_mask: np.ndarray      # (M,) candidates inside any box
    reg: np.ndarray           # (M, 8) residual targets, zero where not positive
    shift: np.ndarray         # (M, 3) seed-to-center targets, zero where unmasked
    shift_mask: np.ndarray    # (M,) seeds inside any box
    ref_index: int
    lang_index: int


def encode_box_residual(box: Box7, anchor: np.ndarray, category: str) -> np.ndarray:
    prior = SIZE_PRIORS[category]
    return np.array(
        [
            box.center[0] - anchor[0],
            box.center[1] - anchor[1],
            box.center[2] - anchor[2],
            math.log(box.l / prior[0]),
            math.log(box.w / prior[1]),
            math.log(box.h / prior[2]),
            math.sin(box.yaw),
            math.cos(box.yaw),
        ]
    )


def decode_box_residual(residual: np.ndarray, anchor: np.ndarray, category: str) -> Box7:
    prior = SIZE_PRIORS[category]
    center = anchor + residual[:3]
    sizes = np.exp(np.clip(residual[3:6], -6.0, 6.0)) * np.array(prior)
    yaw = math.atan2(residual[6], residual[7])
    return Box7(center, sizes[0], sizes[1], sizes[2], yaw)


def assign_targets(candidates: np.ndarray, seeds: np.ndarray, scene: Scene, target_id: str) -> Targets:
    """Supervision for one sample.

    A candidate is positive when its shifted position lies inside any
    ground-truth box; its regression target encodes the containing box. A
    seed inside an object is supervised to shift to that object's center.
    The reference target is the candidate nearest the referred center
    (lowest index on ties).
    """
    m = len(candidates)
    cls = np.zeros(m)
    reg = np.zeros((m, RESIDUAL_DIM))
    shift = np.zeros((m, 3))
    shift_mask = np.zeros(m)
    for obj in scene.objects:
        inside_c = points_in_box(obj.box, candidates)
        fresh = inside_c & (cls == 0)
        if np.any(fresh):
            cls[fresh] = 1.0
            for i in np.flatnonzero(fresh):
                reg[i] = encode_box_residual(obj.box, candidates[i], obj.category)
        inside_s = points_in_box(obj.box, seeds) & (shift_mask == 0)
        if np.any(inside_s):
            shift_mask[inside_s] = 1.0
            shift[inside_s] = obj.box.center - seeds[inside_s]
    target = scene.object_by_id(target_id)
    dists = np.linalg.norm(candidates - target.box.center, axis=1)
    return Targets(
        cls=cls,
        pos_mask=cls.copy(),
        reg=reg,
        shift=shift,
        shift_mask=shift_mask,
        ref_index=int(np.argmin(dists)),
        lang_index=CATEGORY_INDEX[target.category],
    )


class GroundingModel:
    """End-to-end network; parameters live in one flat named dict."""

    def __init__(self, config: ModelConfig, vocab_size: int,
                 params: dict[str, T.Tensor] | None = None, seed: int = 0):
        self.config = config
        self.vocab_size = vocab_size
        in_dim = modality_feature_dim(config.modality)
        if params is None:
            rng = substream(seed, "model-init")
            params = {}
            self.encoder = PointEncoder(config.encoder, in_dim, rng=rng)
            params.update(self.encoder.params)
            params.update(langenc.init_lang_params(vocab_size, config.lang, rng))
            c_v, c_l = config.encoder.feature_dim, config.lang.out_dim
            c_s, c_m = config.shared_dim, config.fused_dim
            params["fuse.wv"] = T.uniform_init((c_v, c_s), c_v, rng)
            params["fuse.wl"] = T.uniform_init((c_l, c_s), c_l, rng)
            params["fuse.mlp.w0"] = T.uniform_init((2 * c_s, c_m), 2 * c_s, rng)
            params["fuse.mlp.b0"] = T.uniform_init((1, c_m), 2 * c_s, rng)
            params["fuse.mlp.w1"] = T.uniform_init((c_m, c_m), c_m, rng)
            params["fuse.mlp.b1"] = T.uniform_init((1, c_m), c_m, rng)
            for head, width in (("loc", 1), ("cls", 1), ("reg", RESIDUAL_DIM)):
                params[f"head.{head}.w"] = T.uniform_init((c_m, width), c_m, rng)
                params[f"head.{head}.b"] = T.uniform_init((1, width), c_m, rng)
            params["head.lang.w"] = T.uniform_init((c_l, len(CATEGORIES)), c_l, rng)
            params["head.lang.b"] = T.uniform_init((1, len(CATEGORIES)), c_l, rng)
        else:
            self.encoder = PointEncoder(config.encoder, in_dim, params=params)
        self.params = params

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params

    def fuse(self, f_v: T.Tensor, f_l: T.Tensor) -> T.Tensor:
        m = f_v.shape[0]
        proj_v = T.matmul(f_v, self.params["fuse.wv"])
        proj_l = T.repeat_rows(T.matmul(f_l, self.params["fuse.wl"]), m)
        x = T.concat([proj_v, proj_l])
        x = T.relu(T.add(T.matmul(x, self.params["fuse.mlp.w0"]), self.params["fuse.mlp.b0"]))
        return T.relu(T.add(T.matmul(x, self.params["fuse.mlp.w1"]), self.params["fuse.mlp.b1"]))

    def localize(self, f_m: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        raw = T.add(T.matmul(f_m, self.params["head.loc.w"]), self.params["head.loc.b"])
        row = T.reshape(raw, (1, f_m.shape[0]))
        return row, T.row_softmax(row)

    def forward(self, xyz: np.ndarray, feats: np.ndarray, token_ids: np.ndarray, length: int,
                plan=None) -> ModelOutput:
        cand = self.encoder.forward(xyz, T.constant(feats), plan)
        f_w = langenc.embed(token_ids, self.params)
        f_l = langenc.bigru_encode(f_w, length, self.params, self.config.lang)
        f_m = self.fuse(cand.features, f_l)
        raw, conf = self.localize(f_m)
        cls_logits = T.add(T.matmul(f_m, self.params["head.cls.w"]), self.params["head.cls.b"])
        residuals = T.add(T.matmul(f_m, self.params["head.reg.w"]), self.params["head.reg.b"])
        lang_logits = T.add(T.matmul(f_l, self.params["head.lang.w"]), self.params["head.lang.b"])
        return ModelOutput(cand, raw, conf, cls_logits, residuals, lang_logits, f_l)


def ground(output: ModelOutput) -> tuple[int, Box7]:
    """Pick the highest-confidence candidate and decode its box.

    Ties break to the lowest index. Sizes decode against the prior of the
    category predicted from the expression.
    """
    idx = int(np.argmax(output.confidences.data[0]))
    category = CATEGORIES[int(np.argmax(output.lang_logits.data[0]))]
    anchor = output.candidates.positions.data[idx]
    return idx, decode_box_residual(output.residuals.data[idx], anchor, category)


def compute_loss(output: ModelOutput, targets: Targets, weights: LossWeights) -> tuple[T.Tensor, dict[str, float]]:
    """Weighted five-term training loss; also returns per-term values."""
    m = output.cls_logits.shape[0]
    l_cls = T.mean(T.bce_with_logits(output.cls_logits, T.constant(targets.cls.reshape(m, 1))))

    n_pos = int(targets.pos_mask.sum())
    if n_pos:
        mask = np.repeat(targets.pos_mask.reshape(m, 1), RESIDUAL_DIM, axis=1)
        per_elem = T.smooth_l1(output.residuals, T.constant(targets.reg))
        l_reg = T.scale(T.tensor_sum(T.mul(per_elem, T.constant(mask))), 1.0 / (RESIDUAL_DIM * n_pos))
    else:
        l_reg = T.constant(0.0)

    n_shift = int(targets.shift_mask.sum())
    if n_shift:
        mask = np.repeat(targets.shift_mask.reshape(m, 1), 3, axis=1)
        per_elem = T.smooth_l1(output.candidates.shifts, T.constant(targets.shift))
        l_shift = T.scale(T.tensor_sum(T.mul(per_elem, T.constant(mask))), 1.0 / (3 * n_shift))
    else:
        l_shift = T.constant(0.0)

    l_lang = T.cross_entropy(output.lang_logits, targets.lang_index)
    l_ref = T.cross_entropy(output.raw_scores, targets.ref_index)

    terms = (l_cls, l_reg, l_shift, l_lang, l_ref)
    total = None
    for weight, term in zip(weights.as_tuple(), terms):
        piece = T.scale(term, weight) if term.requires_grad else T.constant(term.data * weight)
        total = piece if total is None else T.add(total, piece)
    components = {
        "cls": float(l_cls.data),
        "reg": float(l_reg.data),
        "shift": float(l_shift.data),
        "lang": float(l_lang.data),
        "ref": float(l_ref.data),
        "total": float(total.data),
    }
    return total, components


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    lr: float
    total: float
    cls: float
    reg: float
    shift: float
    lang: float
    ref: float


@dataclass
class TrainResult:
    model: GroundingModel
    vocab: Vocabulary
    curve: list[EpochStats]
    wall_seconds: float


class _SampleBatchItem:
    """Per-sample constants hoisted out of the epoch loop."""

    __slots__ = ("scene", "target_id", "xyz", "feats", "token_ids", "length", "plan")

    def __init__(self, scene: Scene, sample, model: GroundingModel, vocab: Vocabulary):
        pc = scene.points
        self.scene = scene
        self.target_id = sample.target_id
        self.xyz = pc.xyz
        self.feats = assemble_features(pc.rgb, pc.intensity, model.config.modality)
        self.token_ids, self.length = vocab.encode(sample.tokens, model.config.lang.max_len)
        self.plan = model.encoder.precompute_plan(pc.xyz)


def train_model(
    scenes: dict[str, Scene],
    samples: list,
    model_config: ModelConfig,
    train_config: TrainConfig,
    log=None,
) -> TrainResult:
    """Seeded, bit-deterministic training loop over grounding samples."""
    if not samples:
        raise ValueError("cannot train on an empty sample list")
    started = time.perf_counter()
    vocab = Vocabulary.build(s.tokens for s in samples)
    model = GroundingModel(model_config, len(vocab), seed=train_config.seed)
    items = [_SampleBatchItem(scenes[s.scene_id], s, model, vocab) for s in samples]
    state = T.AdamState(
        learning_rate=train_config.learning_rate, weight_decay=train_config.weight_decay
    )
    weights = train_config.loss_weights
    params = model.parameters()
    emb = params["lang.embed"]
    curve: list[EpochStats] = []
    for epoch in range(1, train_config.epochs + 1):
        lr = train_config.lr_at(epoch)
        state.learning_rate = lr
        order = substream(train_config.seed, "train", "shuffle", epoch).permutation(len(items))
        sums = np.zeros(6)
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            T.zero_grads(params)
            inv = 1.0 / len(batch)
            for idx in batch:
                item = items[idx]
                out = model.forward(item.xyz, item.feats, item.token_ids, item.length, item.plan)
                targets = assign_targets(
                    out.candidates.positions.data, out.candidates.seeds, item.scene, item.target_id
                )
                loss, comps = compute_loss(out, targets, weights)
                T.backward(T.scale(loss, inv))
                sums += [comps["total"], comps["cls"], comps["reg"], comps["shift"], comps["lang"], comps["ref"]]
            if emb.grad is not None:
                emb.grad[langenc.PAD_ID, :] = 0.0  # keep the padding row frozen at zero
            T.adam_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, state)
        avg = sums / len(order)
        curve.append(EpochStats(epoch, lr, *avg))
        if log is not None:
            log(curve[-1])
    return TrainResult(model, vocab, curve, time.perf_counter() - started)


def predict(model: GroundingModel, vocab: Vocabulary, scene: Scene, text: str) -> tuple[Box7, np.ndarray, int]:
    """Full forward pass on one scene + expression; deterministic."""
    pc = scene.points
    if pc is None:
        raise ValueError(f"scene {scene.scene_id} has no point cloud")
    feats = assemble_features(pc.rgb, pc.intensity, model.config.modality)
    token_ids, length = vocab.encode(langenc.tokenize(text), model.config.lang.max_len)
    if length < 1:
        raise ValueError("expression has no usable tokens")
    out = model.forward(pc.xyz, feats, token_ids, length)
    idx, box = ground(out)
    return box, out.confidences.data[0].copy(), idx


# ---------------------------------------------------------------------------
# Checkpoint bundle (tensor checkpoint + vocabulary + config echo)
# ---------------------------------------------------------------------------


def model_config_to_dict(config: ModelConfig) -> dict:
    return json.loads(json.dumps(asdict(config)))


def model_config_from_dict(d: dict) -> ModelConfig:
    enc = d["encoder"]
    from .pointenc import SALayerSpec

    layers = tuple(
        SALayerSpec(tuple(spec["branches"]), spec["out_points"], spec["radius"], spec["cap"], tuple(spec["mlp"]))
        for spec in enc["sa_layers"]
    )
    encoder = EncoderConfig(
        sa_layers=layers,
        m_candidates=enc["m_candidates"],
        feature_dim=enc["feature_dim"],
        cg_radius=enc["cg_radius"],
        cg_cap=enc["cg_cap"],
        shift_hidden=enc["shift_hidden"],
        lambda_fps=enc["lambda_fps"],
    )
    lang = LangConfig(**d["lang"])
    return ModelConfig(encoder, lang, d["shared_dim"], d["fused_dim"], d["modality"])


def save_model(directory: str, model: GroundingModel, vocab: Vocabulary, extra_meta: dict | None = None) -> str:
    """Write checkpoint.bin, vocab.json, and config.json atomically.

    Returns the checkpoint path.
    """
    os.makedirs(directory, exist_ok=True)
    blob = T.checkpoint_save(model.parameters())
    ckpt_path = os.path.join(directory, "checkpoint.bin")
    _atomic_write_bytes(ckpt_path, blob)
    _atomic_write_text(os.path.join(directory, "vocab.json"), vocab.to_json())
    meta = {"model": model_config_to_dict(model.config), "vocab_size": len(vocab)}
    meta.update(extra_meta or {})
    _atomic_write_text(os.path.join(directory, "config.json"), json.dumps(meta, sort_keys=True, indent=1))
    return ckpt_path


def load_model(directory: str) -> tuple[GroundingModel, Vocabulary]:
    for name in ("checkpoint.bin", "vocab.json", "config.json"):
        if not os.path.isfile(os.path.join(directory, name)):
            raise CheckpointCompatError(f"checkpoint bundle is missing {name} under {directory!r}")
    with open(os.path.join(directory, "config.json"), encoding="utf-8") as f:
        meta = json.load(f)
    with open(os.path.join(directory, "vocab.json"), encoding="utf-8") as f:
        vocab = Vocabulary.from_json(f.read())
    if len(vocab) != meta["vocab_size"]:
        raise CheckpointCompatError(
            f"vocabulary size {len(vocab)} does not match config echo {meta['vocab_size']}"
        )
    config = model_config_from_dict(meta["model"])
    with open(os.path.join(directory, "checkpoint.bin"), "rb") as f:
        arrays = T.checkpoint_load(f.read())
    reference = GroundingModel(config, len(vocab), seed=0)
    expected = {k: p.data.shape for k, p in reference.parameters().items()}
    got = {k: v.shape for k, v in arrays.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        shapes = sorted(k for k in expected.keys() & got.keys() if expected[k] != got[k])
        raise CheckpointCompatError(
            f"checkpoint does not fit configuration (missing={missing}, unexpected={extra}, reshaped={shapes})"
        )
    params = {k: T.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return GroundingModel(config, len(vocab), params=params), vocab


def _atomic_write_bytes(path: str, blob: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def tiny_model_config(modality: str = "xyz+rgb+intensity") -> ModelConfig:
    """Small dimensions for fast gradient checks and unit tests."""
    from .pointenc import SALayerSpec

    encoder = EncoderConfig(
        sa_layers=(
            SALayerSpec(("distance",), 8, 3.0, 4, (6, 8)),
            SALayerSpec(("distance", "feature"), 6, 6.0, 4, (8, 10)),
        ),
        m_candidates=4,
        feature_dim=12,
        cg_radius=6.0,
        cg_cap=4,
        shift_hidden=6,
    )
    lang = LangConfig(embed_dim=6, hidden_dim=5, max_len=8)
    return ModelConfig(encoder, lang, shared_dim=10, fused_dim=12, modality=modality)

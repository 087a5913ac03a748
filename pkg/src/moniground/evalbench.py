"""Rotated-box Acc@K evaluation and the constructive baselines.

Accuracy counts predictions whose 3D IoU with the ground truth strictly
exceeds the threshold. Reports partition samples by the stored subset tags
(Unique/Multiple and Near/Medium/Far) plus Overall, and render both as a
fixed-width text table and a machine-readable JSON document. Baselines:
a category-level random pick over ground-truth boxes, and random/best picks
over detector-style proposals synthesized by perturbing the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geom3d import Box7, iou_3d, normalize_angle
from .seeding import substream
from .synthdata import CATEGORIES, GroundingSample, Scene, tag_subsets

SUBSET_ORDER = ("Unique", "Multiple", "Near", "Medium", "Far", "Overall")
THRESHOLDS = (0.25, 0.5)


@dataclass
class EvalSample:
    sample: GroundingSample
    predicted: Box7
    ground_truth: Box7


@dataclass
class SubsetStats:
    count: int
    acc25: float  # percent
    acc50: float  # percent


@dataclass
class EvalReport:
    subsets: dict[str, SubsetStats]
    warnings: list[str]
    meta: dict


@dataclass(frozen=True)
class NoiseConfig:
    center_sigma: float = 0.3
    size_sigma: float = 0.05   # multiplicative
    yaw_sigma: float = 0.05
    distractors: int = 2

    def __post_init__(self):
        if min(self.center_sigma, self.size_sigma, self.yaw_sigma) < 0 or self.distractors < 0:
            raise ValueError("noise settings must be non-negative")


@dataclass
class Proposal:
    box: Box7
    category: str
    score: float

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"proposal category {self.category!r} is not a known class")


def acc_at_k(samples: list[EvalSample], k: float) -> float:
    """Fraction of samples with IoU(predicted, ground truth) > k.

    Empty input reports 0.0; callers flag the empty subset separately.
    """
    if not 0.0 < k < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if not samples:
        return 0.0
    hits = sum(1 for s in samples if iou_3d(s.predicted, s.ground_truth) > k)
    return hits / len(samples)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def baseline_catrandgt(sample: GroundingSample, scene: Scene, rng: np.random.Generator) -> Box7:
    """Uniform pick among ground-truth boxes of the referred category."""
    target = scene.object_by_id(sample.target_id)
    peers = [o for o in scene.objects if o.category == target.category]
    return peers[int(rng.integers(len(peers)))].box


def make_oracle_proposals(scene: Scene, rng: np.random.Generator, noise: NoiseConfig) -> list[Proposal]:
    """Detector-style proposals: one noisy clone per ground-truth box plus a
    configured number of extra noisy clones of random boxes. Categories are
    preserved."""
    picks = list(range(len(scene.objects)))
    picks += [int(rng.integers(len(scene.objects))) for _ in range(noise.distractors)]
    proposals = []
    for i in picks:
        obj = scene.objects[i]
        box = obj.box
        center = box.center + rng.normal(0.0, noise.center_sigma, size=3)
        sizes = np.array([box.l, box.w, box.h]) * np.maximum(
            1.0 + rng.normal(0.0, noise.size_sigma, size=3), 0.05
        )
        yaw = normalize_angle(box.yaw + rng.normal(0.0, noise.yaw_sigma))
        proposals.append(
            Proposal(Box7(center, sizes[0], sizes[1], sizes[2], yaw), obj.category, float(rng.uniform()))
        )
    return proposals


def baseline_detrand(sample: GroundingSample, scene: Scene, proposals: list[Proposal],
                     rng: np.random.Generator) -> Box7:
    """Uniform pick among correct-class proposals (any proposal as fallback)."""
    if not proposals:
        raise ValueError(f"empty proposal set for scene {sample.scene_id}")
    category = scene.object_by_id(sample.target_id).category
    pool = [p for p in proposals if p.category == category] or proposals
    return pool[int(rng.integers(len(pool)))].box


def baseline_detbest(sample: GroundingSample, scene: Scene, proposals: list[Proposal]) -> Box7:
    """Proposal with the highest IoU against the ground truth (lowest index on ties)."""
    if not proposals:
        raise ValueError(f"empty proposal set for scene {sample.scene_id}")
    gt = scene.object_by_id(sample.target_id).box
    ious = [iou_3d(p.box, gt) for p in proposals]
    return proposals[int(np.argmax(ious))].box


Predictor = Callable[[Scene, GroundingSample, np.random.Generator], Box7]


def model_predictor(model, vocab) -> Predictor:
    from .grounder import predict

    def run(scene: Scene, sample: GroundingSample, rng: np.random.Generator) -> Box7:
        return predict(model, vocab, scene, sample.text)[0]

    return run


def baseline_predictor(kind: str, noise: NoiseConfig, seed: int) -> Predictor:
    """catrandgt / detrand / detbest as predictors.

    Proposal sets are derived per scene from (seed, scene id), so every
    baseline sees the same proposals for a given scene.
    """
    if kind not in ("catrandgt", "detrand", "detbest"):
        raise ValueError(f"unknown baseline {kind!r}")

    proposal_cache: dict[str, list[Proposal]] = {}

    def proposals_for(scene: Scene) -> list[Proposal]:
        if scene.scene_id not in proposal_cache:
            rng = substream(seed, "proposals", scene.scene_id)
            proposal_cache[scene.scene_id] = make_oracle_proposals(scene, rng, noise)
        return proposal_cache[scene.scene_id]

    def run(scene: Scene, sample: GroundingSample, rng: np.random.Generator) -> Box7:
        if kind == "catrandgt":
            return baseline_catrandgt(sample, scene, rng)
        if kind == "detrand":
            return baseline_detrand(sample, scene, proposals_for(scene), rng)
        return baseline_detbest(sample, scene, proposals_for(scene))

    return run


# ---------------------------------------------------------------------------
# Evaluation protocol
# ---------------------------------------------------------------------------


def evaluate(
    predictor: Predictor,
    scenes: dict[str, Scene],
    samples: list[GroundingSample],
    seed: int = 0,
    meta: dict | None = None,
) -> EvalReport:
    """Run the predictor over samples and aggregate Acc@0.25 / Acc@0.5 per subset.

    Samples are processed in a deterministic order (sorted by scene id,
    target id, then position) with one named random sub-stream each, so
    reports are bit-identical across runs with the same seed.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty sample list")
    warnings: list[str] = []
    evaluated: list[EvalSample] = []
    indexed = sorted(enumerate(samples), key=lambda pair: (pair[1].scene_id, pair[1].target_id, pair[0]))
    for position, sample in indexed:
        scene = scenes[sample.scene_id]
        expected = tag_subsets(scene, sample.target_id)
        if (sample.uniqueness, sample.distance_bin) != expected:
            warnings.append(
                f"tag mismatch for {sample.scene_id}/{sample.target_id}: "
                f"stored {(sample.uniqueness, sample.distance_bin)}, derived {expected}"
            )
        rng = substream(seed, "eval", sample.scene_id, sample.target_id, position)
        predicted = predictor(scene, sample, rng)
        evaluated.append(EvalSample(sample, predicted, scene.object_by_id(sample.target_id).box))

    def members(name: str) -> list[EvalSample]:
        if name == "Overall":
            return evaluated
        if name in ("Unique", "Multiple"):
            return [e for e in evaluated if e.sample.uniqueness == name]
        return [e for e in evaluated if e.sample.distance_bin == name]

    subsets = {}
    for name in SUBSET_ORDER:
        part = members(name)
        if not part:
            warnings.append(f"subset {name} is empty; accuracy reported as 0")
            subsets[name] = SubsetStats(0, 0.0, 0.0)
        else:
            subsets[name] = SubsetStats(
                len(part), 100.0 * acc_at_k(part, 0.25), 100.0 * acc_at_k(part, 0.5)
            )
    return EvalReport(subsets, warnings, dict(meta or {}))


def render_report(report: EvalReport) -> str:
    """Fixed-width table: Unique/Multiple block, then the distance block."""
    lines = []
    title = report.meta.get("predictor-id", "predictor")
    lines.append(f"results for {title} (split={report.meta.get('split', '?')})")
    header = f"{'subset':<10}{'count':>8}{'Acc@0.25':>12}{'Acc@0.5':>12}"
    lines.append(header)
    lines.append("-" * len(header))
    for name in SUBSET_ORDER:
        s = report.subsets[name]
        lines.append(f"{name:<10}{s.count:>8}{s.acc25:>12.2f}{s.acc50:>12.2f}")
    for w in report.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines)


def report_to_json(report: EvalReport) -> dict:
    doc = {
        "split": report.meta.get("split"),
        "seed": report.meta.get("seed"),
        "subsets": {
            name: {"count": s.count, "acc25": s.acc25, "acc50": s.acc50}
            for name, s in report.subsets.items()
        },
        "predictor-id": report.meta.get("predictor-id"),
        "checkpoint-hash": report.meta.get("checkpoint-hash"),
        "warnings": list(report.warnings),
    }
    for key, value in report.meta.items():
        if key not in ("split", "seed", "predictor-id", "checkpoint-hash"):
            doc[key] = value
    return doc


def check_report_invariants(report: EvalReport) -> None:
    """Raise AssertionError when partition sums or accuracy ordering break."""
    subs = report.subsets
    for name, s in subs.items():
        assert s.acc25 >= s.acc50 - 1e-9, f"Acc@0.25 < Acc@0.5 in subset {name}"
    assert subs["Unique"].count + subs["Multiple"].count == subs["Overall"].count
    assert subs["Near"].count + subs["Medium"].count + subs["Far"].count == subs["Overall"].count

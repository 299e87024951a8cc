"""Dataset schema, JSON ingestion, and a synthetic bag generator.

A dataset is a list of bags; each bag is a set of box proposals with
precomputed feature vectors plus a binary image-level label vector.
Ground-truth boxes, when present, are evaluation-only — training code
receives a view with them stripped.

The synthetic generator builds a "part domination" trap: for every object
it emits a handful of near-object boxes whose features carry the full
class prototype at moderate amplitude, and a larger crowd of part boxes
(IoU 0.2–0.5 with the object) whose features carry only a third of the
prototype's support but at higher amplitude.  A per-proposal classifier
therefore concentrates on the many high-scoring parts, while grouping
overlapping boxes and scoring groups by their mean lets the near-object
group win — the behavior the training objective is supposed to exhibit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, iou
from .jsonio import read_json, write_json


class DataError(ValueError):
    """Malformed dataset content (schema, dimensions, labels)."""


class GenerationError(RuntimeError):
    """Synthetic generation could not satisfy its geometric constraints."""


# rejection-sampling budget per generated box
_MAX_TRIES = 1000


@dataclass(frozen=True)
class Proposal:
    box: Box
    feature: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=float))
        if self.feature.ndim != 1:
            raise DataError(f"proposal feature must be a vector, got shape {self.feature.shape}")


@dataclass
class Bag:
    """One image: proposals + a binary label per class.

    ``ground_truth`` is a list of (class index, Box) pairs used only by
    evaluation; ``training_view`` strips it.
    """

    id: str
    labels: np.ndarray
    proposals: list[Proposal]
    ground_truth: list[tuple[int, Box]] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)

    @property
    def num_proposals(self) -> int:
        return len(self.proposals)

    def feature_matrix(self) -> np.ndarray:
        """(num_proposals, D) stack of proposal features."""
        return np.stack([p.feature for p in self.proposals])

    def box_array(self) -> np.ndarray:
        """(num_proposals, 4) corner-format boxes."""
        return np.array([p.box.as_list() for p in self.proposals])

    def positive_classes(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    def training_view(self) -> "Bag":
        return Bag(id=self.id, labels=self.labels, proposals=self.proposals, ground_truth=None)


@dataclass
class Dataset:
    classes: list[str]
    feature_dim: int
    bags: list[Bag]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def training_view(self) -> "Dataset":
        return Dataset(
            classes=self.classes,
            feature_dim=self.feature_dim,
            bags=[b.training_view() for b in self.bags],
        )

    def bag_by_id(self, bag_id: str) -> Bag:
        for b in self.bags:
            if b.id == bag_id:
                return b
        raise KeyError(f"no bag with id '{bag_id}'")

    def has_ground_truth(self) -> bool:
        return any(b.ground_truth for b in self.bags)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 2
    bags_per_class: int = 100
    negatives: int = 50
    proposals_per_bag: int = 30
    feature_dim: int = 24
    part_fraction: float = 0.4
    noise_sigma: float = 0.0225
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise DataError("num_classes must be >= 1")
        if self.bags_per_class < 1:
            raise DataError("bags_per_class must be >= 1")
        if self.negatives < 0:
            raise DataError("negatives must be >= 0")
        if self.proposals_per_bag < 3:
            raise DataError("proposals_per_bag must be >= 3")
        if self.feature_dim < 3 * self.num_classes:
            raise DataError(
                f"feature_dim must be >= 3*num_classes "
                f"({3 * self.num_classes}), got {self.feature_dim}"
            )
        if not 0.0 <= self.part_fraction <= 1.0:
            raise DataError("part_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")


def validate_dataset(ds: Dataset) -> None:
    """Check every invariant; raise DataError naming the offending bag/field."""
    n = ds.num_classes
    if n < 1:
        raise DataError("dataset declares no classes")
    if ds.feature_dim < 1:
        raise DataError(f"feature_dim must be positive, got {ds.feature_dim}")
    if not ds.bags:
        raise DataError("dataset contains no bags")
    seen_ids = set()
    for bag in ds.bags:
        if bag.id in seen_ids:
            raise DataError(f"bag '{bag.id}': duplicate id")
        seen_ids.add(bag.id)
        if len(bag.proposals) == 0:
            raise DataError(f"bag '{bag.id}': needs at least one proposal")
        if bag.labels.shape != (n,):
            raise DataError(
                f"bag '{bag.id}': labels must have length {n}, got {bag.labels.shape}"
            )
        if not np.isin(bag.labels, (0, 1)).all():
            raise DataError(f"bag '{bag.id}': labels must be 0 or 1")
        for j, p in enumerate(bag.proposals):
            if p.feature.shape != (ds.feature_dim,):
                raise DataError(
                    f"bag '{bag.id}': proposal {j} feature has length "
                    f"{p.feature.shape[0]}, expected {ds.feature_dim}"
                )
            if not np.isfinite(p.feature).all():
                raise DataError(f"bag '{bag.id}': proposal {j} feature has non-finite values")
        if bag.ground_truth is not None:
            for k, (cls, _box) in enumerate(bag.ground_truth):
                if not 0 <= cls < n:
                    raise DataError(
                        f"bag '{bag.id}': ground_truth {k} class {cls} out of range [0, {n})"
                    )


def _bag_to_record(bag: Bag) -> dict:
    rec = {
        "id": bag.id,
        "labels": [int(v) for v in bag.labels],
        "proposals": [
            {"box": p.box.as_list(), "feature": [float(v) for v in p.feature]}
            for p in bag.proposals
        ],
    }
    if bag.ground_truth is not None:
        rec["ground_truth"] = [
            {"class": int(cls), "box": box.as_list()} for cls, box in bag.ground_truth
        ]
    return rec


def _bag_from_record(rec: dict, num_classes: int) -> Bag:
    bag_id = rec.get("id")
    if not isinstance(bag_id, str) or not bag_id:
        raise DataError(f"bag record missing string 'id': {rec.get('id')!r}")
    try:
        proposals = [
            Proposal(box=Box.from_list(p["box"]), feature=np.asarray(p["feature"], dtype=float))
            for p in rec["proposals"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"bag '{bag_id}': malformed proposal: {e}") from e
    gt = None
    if "ground_truth" in rec:
        try:
            gt = [(int(g["class"]), Box.from_list(g["box"])) for g in rec["ground_truth"]]
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bag '{bag_id}': malformed ground_truth: {e}") from e
    labels = rec.get("labels")
    if not isinstance(labels, list):
        raise DataError(f"bag '{bag_id}': missing labels list")
    return Bag(id=bag_id, labels=np.asarray(labels, dtype=int), proposals=proposals, ground_truth=gt)


def save_dataset(ds: Dataset, path: str) -> None:
    validate_dataset(ds)
    doc = {
        "classes": list(ds.classes),
        "feature_dim": int(ds.feature_dim),
        "bags": [_bag_to_record(b) for b in ds.bags],
    }
    write_json(doc, path)


def load_dataset(path: str) -> Dataset:
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise DataError("dataset file must contain a JSON object")
    for key in ("classes", "feature_dim", "bags"):
        if key not in doc:
            raise DataError(f"dataset file missing '{key}'")
    classes = doc["classes"]
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        raise DataError("'classes' must be a list of strings")
    ds = Dataset(
        classes=classes,
        feature_dim=int(doc["feature_dim"]),
        bags=[_bag_from_record(rec, len(classes)) for rec in doc["bags"]],
    )
    validate_dataset(ds)
    return ds


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

# Near-object features carry the class prototype across its whole block;
# part features carry a larger amplitude on the first third of the block
# only.  The amplitude gap keeps per-proposal part scores competitive (the
# trap) while group-mean scores favor the near-object group.  The absolute
# scale of both amplitudes (and of the matching noise default) is kept low
# on purpose: it sets the SGD convergence speed, and the default 20-epoch
# schedule should still be descending in its final epochs rather than
# orbiting a long-converged optimum.
_NEAR_AMPLITUDE = 0.1575
_PART_AMPLITUDE = 0.225
# fraction of the object's width/height kept by the part anchor box
_PART_SCALE = 0.55
# corner jitter as a fraction of the anchor's side length
_JITTER = 0.03
# mutual-IoU floor among boxes of one group, so a group stays one clique
# under the default overlap threshold 0.7
_GROUP_COHESION = 0.72


def _jittered(rng: np.random.Generator, anchor: Box) -> Box | None:
    w = anchor.x2 - anchor.x1
    h = anchor.y2 - anchor.y1
    dx1, dx2 = rng.uniform(-_JITTER, _JITTER, size=2) * w
    dy1, dy2 = rng.uniform(-_JITTER, _JITTER, size=2) * h
    x1, y1 = anchor.x1 + dx1, anchor.y1 + dy1
    x2, y2 = anchor.x2 + dx2, anchor.y2 + dy2
    if x1 < 0 or y1 < 0 or x2 > 1 or y2 > 1 or x1 >= x2 or y1 >= y2:
        return None
    return Box(x1, y1, x2, y2)


def _sample_group(rng, anchor: Box, count: int, accept, bag_id: str, kind: str) -> list[Box]:
    """Rejection-sample ``count`` jitters of ``anchor`` that pass ``accept``
    and stay mutually tight (one clique's worth of boxes)."""
    group: list[Box] = []
    for _ in range(count):
        for _try in range(_MAX_TRIES):
            b = _jittered(rng, anchor)
            if b is None or not accept(b):
                continue
            if all(iou(b, other) > _GROUP_COHESION for other in group):
                group.append(b)
                break
        else:
            raise GenerationError(f"bag '{bag_id}': could not place {kind} box {len(group)}")
    return group


def _sample_background(rng, obj: Box | None, bag_id: str) -> Box:
    for _try in range(_MAX_TRIES):
        w, h = rng.uniform(0.08, 0.25, size=2)
        x1 = rng.uniform(0.0, 1.0 - w)
        y1 = rng.uniform(0.0, 1.0 - h)
        b = Box(x1, y1, x1 + w, y1 + h)
        if obj is None or iou(b, obj) < 0.2:
            return b
    raise GenerationError(f"bag '{bag_id}': could not place background box")


def _proposal_counts(cfg: SynthConfig) -> tuple[int, int, int]:
    p = cfg.proposals_per_bag
    n_part = min(int(round(cfg.part_fraction * p)), p - 2)
    n_near = max(1, (p - n_part) // 3)
    n_near = min(n_near, p - n_part)
    return n_near, n_part, p - n_part - n_near


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministically build the part-domination benchmark for ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.num_classes, cfg.feature_dim
    block = d // n  # per-class prototype support
    sub = max(1, block // 3)  # "discriminative part" sub-support
    n_near, n_part, n_bg = _proposal_counts(cfg)

    def noise() -> np.ndarray:
        return cfg.noise_sigma * rng.standard_normal(d)

    bags: list[Bag] = []
    for cls in range(n):
        lo = cls * block
        for i in range(cfg.bags_per_class):
            bag_id = f"pos-c{cls}-{i:04d}"
            w, h = rng.uniform(0.25, 0.6, size=2)
            x1 = rng.uniform(0.0, 1.0 - w)
            y1 = rng.uniform(0.0, 1.0 - h)
            obj = Box(x1, y1, x1 + w, y1 + h)
            part_anchor = Box(x1, y1, x1 + _PART_SCALE * w, y1 + _PART_SCALE * h)

            nears = [obj] + _sample_group(
                rng, obj, n_near - 1, lambda b: iou(b, obj) >= 0.7, bag_id, "near"
            )
            parts = _sample_group(
                rng, part_anchor, n_part, lambda b: 0.2 <= iou(b, obj) < 0.5, bag_id, "part"
            )
            bgs = [_sample_background(rng, obj, bag_id) for _ in range(n_bg)]

            proposals = []
            for b in nears:
                f = noise()
                f[lo : lo + block] += _NEAR_AMPLITUDE
                proposals.append(Proposal(box=b, feature=f))
            for b in parts:
                f = noise()
                f[lo : lo + sub] += _PART_AMPLITUDE
                proposals.append(Proposal(box=b, feature=f))
            for b in bgs:
                proposals.append(Proposal(box=b, feature=noise()))

            labels = np.zeros(n, dtype=int)
            labels[cls] = 1
            bags.append(
                Bag(id=bag_id, labels=labels, proposals=proposals, ground_truth=[(cls, obj)])
            )

    for i in range(cfg.negatives):
        bag_id = f"neg-{i:04d}"
        proposals = [
            Proposal(box=_sample_background(rng, None, bag_id), feature=noise())
            for _ in range(cfg.proposals_per_bag)
        ]
        bags.append(Bag(id=bag_id, labels=np.zeros(n, dtype=int), proposals=proposals))

    ds = Dataset(classes=[f"class-{c}" for c in range(n)], feature_dim=d, bags=bags)
    validate_dataset(ds)
    return ds

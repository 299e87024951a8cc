"""Training loop: per-bag SGD over the composite discovery+localization
objective, with score-feedback recurrence and branch accumulation.

Each epoch visits bags one at a time (batch size 1) in a seeded shuffle
that is fixed across epochs, keeping per-epoch loss series comparable.
For a bag, the discovery head's softmax supplies per-proposal objectness;
overlapping top proposals are grouped into cliques; the discovery loss and
per-branch localization losses produce analytic gradients that are chained
through the heads and applied with momentum SGD.  After the parameter
update, the final active branch's probabilities become the bag's new
per-proposal scores s(h), which scale that bag's features on its next
visit.  Inference never applies the scaling.

Ablation tiers stack the mechanisms (each includes the previous ones):

    base    singleton cliques, no localization training, discovery detection
    clique  real clique grouping
    d       localization branch trained (detection still from discovery)
    l       detection from the localization branch
    l-rl    score feedback s(h) enabled
    l-arl   all branches trained, each inheriting its predecessors' picks

Ground truth never reaches the learning path: losses and gradients are
computed from a stripped training view, and the original dataset is read
only to fill the per-epoch localization accuracy/variance diagnostics.
"""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset
from .entropy import (
    discovery_loss,
    localization_loss,
    partition_cliques,
    row_softmax,
    select_object,
    singleton_partition,
)
from .evaluate import dataset_loc_stats
from .jsonio import read_json, write_json
from .model import ModelParams, backward_head, forward, init_params

ABLATION_TIERS = ("base", "clique", "d", "l", "l-rl", "l-arl")

CHECKPOINT_FORMAT = "minent-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A loss became non-finite during training."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 5e-3
    lr_late: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 1
    loc_weight: float = 1.0  # balance of localization vs discovery loss
    tau: float = 0.7
    top_k: int = 200
    kernel_a: float = 4.0
    branches: int = 3
    seed: int = 0
    ablation: str = "l-arl"
    hidden_dim: int = 0
    shared_hidden: bool = True
    init_scale: float = 0.01

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        # zero is admitted so a no-op run can serve as a diagnostic
        if self.lr < 0 or self.lr_late < 0:
            raise ValueError("learning rates must be >= 0")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be >= 0")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.kernel_a <= 0:
            raise ValueError(f"kernel_a must be > 0, got {self.kernel_a}")
        if self.loc_weight < 0:
            raise ValueError(f"loc_weight must be >= 0, got {self.loc_weight}")
        if self.branches < 1:
            raise ValueError(f"branches must be >= 1, got {self.branches}")
        if self.ablation not in ABLATION_TIERS:
            raise ValueError(f"ablation must be one of {ABLATION_TIERS}, got {self.ablation!r}")
        if self.hidden_dim < 0:
            raise ValueError(f"hidden_dim must be >= 0, got {self.hidden_dim}")

    def effective_hidden_dim(self) -> int:
        # a hidden layer only exists when it can be shared by all heads
        return self.hidden_dim if self.shared_hidden else 0

    def lr_for_epoch(self, epoch: int) -> float:
        """Step schedule: the early rate for roughly the first three
        quarters of the run, the late rate afterwards."""
        late_start = max(2, (3 * self.epochs) // 4 + 1)
        return self.lr if epoch < late_start else self.lr_late


@dataclass(frozen=True)
class TierSwitches:
    use_cliques: bool
    train_loc: bool
    use_feedback: bool
    active_branches: int
    detect_head: object  # "disc" or a branch index


def tier_switches(cfg: TrainConfig) -> TierSwitches:
    tier = cfg.ablation
    if tier == "base":
        return TierSwitches(False, False, False, 0, "disc")
    if tier == "clique":
        return TierSwitches(True, False, False, 0, "disc")
    if tier == "d":
        return TierSwitches(True, True, False, 1, "disc")
    if tier == "l":
        return TierSwitches(True, True, False, 1, 0)
    if tier == "l-rl":
        return TierSwitches(True, True, True, 1, 0)
    if tier == "l-arl":
        return TierSwitches(True, True, True, cfg.branches, cfg.branches - 1)
    raise ValueError(f"unknown ablation tier {tier!r}")


@dataclass
class TrainState:
    params: ModelParams
    buffers: dict[str, np.ndarray]
    s_h: dict[str, np.ndarray]
    epoch: int  # completed epochs
    rng: np.random.Generator
    config: TrainConfig


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    disc_loss: float
    loc_losses: tuple[float, ...]
    global_entropy: float
    local_entropy: float
    loc_acc: float
    loc_var: float
    seconds: float

    def key(self) -> tuple:
        """All trained quantities — everything except wall time."""
        return (
            self.epoch,
            self.disc_loss,
            self.loc_losses,
            self.global_entropy,
            self.local_entropy,
            self.loc_acc,
            self.loc_var,
        )

    def csv_row(self) -> str:
        cells = [str(self.epoch), repr(self.disc_loss)]
        cells += [repr(v) for v in self.loc_losses]
        cells += [
            repr(self.global_entropy),
            repr(self.local_entropy),
            repr(self.loc_acc),
            repr(self.loc_var),
            repr(self.seconds),
        ]
        return ",".join(cells)


def csv_header(branches: int) -> str:
    loc_cols = ",".join(f"loc_loss_{k}" for k in range(1, branches + 1))
    return f"epoch,disc_loss,{loc_cols},global_entropy,local_entropy,loc_acc,loc_var,seconds"


def sgd_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place momentum update: buf = m*buf + grad + wd*param; param -= lr*buf."""
    for name, arr in params.named_arrays():
        g = grads.get(name)
        update = weight_decay * arr if g is None else g + weight_decay * arr
        buf = buffers[name]
        buf *= momentum
        buf += update
        arr -= lr * buf


def init_state(ds: Dataset, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    params = init_params(
        feature_dim=ds.feature_dim,
        num_classes=ds.num_classes,
        branches=cfg.branches,
        hidden_dim=cfg.effective_hidden_dim(),
        seed=cfg.seed,
        scale=cfg.init_scale,
    )
    buffers = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
    s_h = {bag.id: np.ones(bag.num_proposals) for bag in ds.bags}
    return TrainState(
        params=params,
        buffers=buffers,
        s_h=s_h,
        epoch=0,
        rng=np.random.default_rng(cfg.seed),
        config=cfg,
    )


def _check_compat(state: TrainState, ds: Dataset) -> None:
    if state.params.feature_dim != ds.feature_dim:
        raise CheckpointError(
            f"checkpoint feature_dim {state.params.feature_dim} "
            f"!= dataset feature_dim {ds.feature_dim}"
        )
    if state.params.num_classes != ds.num_classes:
        raise CheckpointError(
            f"checkpoint num_classes {state.params.num_classes} "
            f"!= dataset num_classes {ds.num_classes}"
        )
    missing = [bag.id for bag in ds.bags if bag.id not in state.s_h]
    if missing:
        raise CheckpointError(f"checkpoint has no score state for bags: {missing[:3]}")


def _bag_step(state: TrainState, cfg: TrainConfig, switches: TierSwitches, bag_data, stats) -> None:
    """One SGD step on one bag; appends report quantities to ``stats``."""
    bag_id, features, boxes, labels = bag_data
    params = state.params

    s = state.s_h[bag_id] if switches.use_feedback else None
    feats_eff = features * s[:, None] if s is not None else features

    disc_scores = forward(params, feats_eff, "disc")
    if not np.isfinite(disc_scores).all():
        raise TrainingDiverged(
            f"discovery scores non-finite at epoch {stats['epoch']}, bag '{bag_id}'"
        )
    positives = np.flatnonzero(labels == 1)

    partition = None
    q_disc = None
    if positives.size:
        q_disc = row_softmax(disc_scores)
        objectness = q_disc[:, positives].max(axis=1)
        if switches.use_cliques:
            partition = partition_cliques(boxes, objectness, cfg.tau, cfg.top_k)
        else:
            partition = singleton_partition(boxes, objectness, cfg.top_k)

    disc_out, disc_grad = discovery_loss(labels, partition, disc_scores)
    if not np.isfinite(disc_out.loss):
        raise TrainingDiverged(f"discovery loss non-finite at epoch {stats['epoch']}, bag '{bag_id}'")
    grads = backward_head(params, feats_eff, "disc", disc_grad)

    bag_loc_losses = [0.0] * cfg.branches
    if switches.train_loc and positives.size:
        # pseudo objects accumulated across branches, per class
        inherited: dict[int, list[int]] = {int(y): [] for y in positives}
        pool = np.array(partition.pool)
        for k in range(switches.active_branches):
            probs_k = row_softmax(forward(params, feats_eff, k))
            branch_grad = np.zeros_like(probs_k)
            for y in positives:
                y = int(y)
                clique = partition.cliques[disc_out.selected[y]]
                anchors = [select_object(clique, q_disc, y)]
                for h_prev in inherited[y]:
                    if h_prev not in anchors:
                        anchors.append(h_prev)
                for h_star in anchors:
                    home = partition.cliques[partition.clique_of(h_star)]
                    loc_out, g = localization_loss(
                        home, h_star, probs_k, boxes, cfg.kernel_a, y
                    )
                    if not np.isfinite(loc_out.loss):
                        raise TrainingDiverged(
                            f"localization loss non-finite at epoch {stats['epoch']}, "
                            f"bag '{bag_id}', branch {k + 1}"
                        )
                    bag_loc_losses[k] += loc_out.loss
                    stats["local_entropy_terms"].append(loc_out.local_entropy)
                    branch_grad += g
                # this branch's own pick feeds later branches
                own = int(pool[np.argmax(probs_k[pool, y])])
                if own not in inherited[y]:
                    inherited[y].append(own)
            branch_grads = backward_head(params, feats_eff, k, cfg.loc_weight * branch_grad)
            for name, g in branch_grads.items():
                if name in grads:
                    grads[name] = grads[name] + g
                else:
                    grads[name] = g

    sgd_step(params, grads, state.buffers, stats["lr"], cfg.momentum, cfg.weight_decay)

    if switches.use_feedback and positives.size:
        final_k = switches.active_branches - 1
        probs_final = row_softmax(forward(params, feats_eff, final_k))
        state.s_h[bag_id] = probs_final[:, positives].max(axis=1)

    stats["disc_losses"].append(disc_out.loss)
    for k in range(cfg.branches):
        stats["loc_losses"][k].append(bag_loc_losses[k])
    stats["global_entropy_terms"].extend(disc_out.entropies.values())


def train(
    ds: Dataset,
    cfg: TrainConfig,
    state: TrainState | None = None,
    csv_path: str | None = None,
    stop_after: int | None = None,
) -> tuple[TrainState, list[EpochReport]]:
    """Run epochs ``state.epoch + 1 .. cfg.epochs``; returns the final state
    and the reports for the epochs run by this call.

    ``stop_after`` simulates an interruption: the loop exits once that many
    epochs are complete (the schedule still derives from ``cfg.epochs``).
    Passing a loaded checkpoint as ``state`` resumes exactly where it left
    off — an interrupted run and an uninterrupted one produce identical
    report series (wall time aside).
    """
    cfg.validate()
    if not ds.bags:
        raise ValueError("dataset has no bags")
    switches = tier_switches(cfg)
    if state is None:
        state = init_state(ds, cfg)
    else:
        _check_compat(state, ds)
    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    # learning path sees the stripped view; diagnostics read the original
    train_ds = ds.training_view()
    bag_data = [
        (bag.id, bag.feature_matrix(), bag.box_array(), bag.labels)
        for bag in train_ds.bags
    ]

    # One seeded shuffle, fixed across epochs: every bag is visited (and its
    # running losses measured) at a stable phase of each epoch, so per-epoch
    # report series reflect parameter progress rather than visit-order
    # resampling noise.  Recomputed from the seed, so resumed runs follow
    # the same order.
    visit_order = np.random.default_rng(cfg.seed).permutation(len(bag_data))

    csv_file = None
    if csv_path is not None:
        fresh = not os.path.exists(csv_path)
        csv_file = open(csv_path, "a")
        if fresh:
            csv_file.write(csv_header(cfg.branches) + "\n")

    reports: list[EpochReport] = []
    try:
        for epoch in range(state.epoch + 1, last_epoch + 1):
            started = time.perf_counter()
            stats = {
                "epoch": epoch,
                "lr": cfg.lr_for_epoch(epoch),
                "disc_losses": [],
                "loc_losses": [[] for _ in range(cfg.branches)],
                "global_entropy_terms": [],
                "local_entropy_terms": [],
            }
            for i in visit_order:
                _bag_step(state, cfg, switches, bag_data[int(i)], stats)
            state.epoch = epoch

            loc_acc, loc_var = dataset_loc_stats(
                state.params, ds, head=switches.detect_head
            )
            report = EpochReport(
                epoch=epoch,
                disc_loss=float(np.mean(stats["disc_losses"])),
                loc_losses=tuple(
                    float(np.mean(v)) if v else 0.0 for v in stats["loc_losses"]
                ),
                global_entropy=(
                    float(np.mean(stats["global_entropy_terms"]))
                    if stats["global_entropy_terms"]
                    else 0.0
                ),
                local_entropy=(
                    float(np.mean(stats["local_entropy_terms"]))
                    if stats["local_entropy_terms"]
                    else 0.0
                ),
                loc_acc=loc_acc,
                loc_var=loc_var,
                seconds=time.perf_counter() - started,
            )
            reports.append(report)
            if csv_file is not None:
                csv_file.write(report.csv_row() + "\n")
                csv_file.flush()
    finally:
        if csv_file is not None:
            csv_file.close()
    return state, reports


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "feature_dim": state.params.feature_dim,
        "num_classes": state.params.num_classes,
        "hidden_dim": state.params.hidden_dim,
        "branches": state.params.branches,
        "epoch": state.epoch,
        "config": asdict(state.config),
        "params": {name: arr.tolist() for name, arr in state.params.named_arrays()},
        "buffers": {name: arr.tolist() for name, arr in state.buffers.items()},
        "s_h": {bag_id: arr.tolist() for bag_id, arr in state.s_h.items()},
        "rng_state": state.rng.bit_generator.state,
    }
    write_json(doc, path)


def load_checkpoint(path: str) -> TrainState:
    try:
        doc = read_json(path)
    except ValueError as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    try:
        cfg = TrainConfig(**doc["config"])
        raw = doc["params"]
        d, n = doc["feature_dim"], doc["num_classes"]
        hidden = doc["hidden_dim"]
        params = ModelParams(
            feature_dim=d,
            num_classes=n,
            hidden_w=np.array(raw["hidden_w"]) if hidden else None,
            hidden_b=np.array(raw["hidden_b"]) if hidden else None,
            disc_w=np.array(raw["disc_w"]),
            disc_b=np.array(raw["disc_b"]),
            loc_w=[np.array(raw[f"loc_w.{k}"]) for k in range(doc["branches"])],
            loc_b=[np.array(raw[f"loc_b.{k}"]) for k in range(doc["branches"])],
        )
        params.validate()
        buffers = {name: np.array(v) for name, v in doc["buffers"].items()}
        s_h = {bag_id: np.array(v) for bag_id, v in doc["s_h"].items()}
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng_state"]
        return TrainState(
            params=params,
            buffers=buffers,
            s_h=s_h,
            epoch=int(doc["epoch"]),
            rng=rng,
            config=cfg,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e

"""Deterministic simulated-user protocol for multi-round evaluation.

Round 1 prompts come from ground truth (seeded); later rounds target the
most significant error area: the largest 4-connected component of the
pred-vs-gt disagreement map. Clicks land on the region's interior points
farthest from its boundary; scribbles trace the longest path of the region
skeleton. Box and text modes are single-round and read straight off ground
truth. Round indices are 1-based.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from . import _kernels, prompts as prompt_mod
from .conflict import ConflictMap, empty_conflict_map, update_conflict_map
from .core import AlphaMatte, Image, InstanceMask, InstanceRecord, binarize
from .metrics import iou as iou_metric, sad as sad_metric
from .prompts import Prompt

MODES = ("click", "scribble", "box", "text", "mixed")
SINGLE_ROUND_MODES = ("box", "text")
CLICK_EXCLUSION_RADIUS = 5.0
MAX_SCRIBBLE_WAYPOINTS = 20
DEFAULT_NOC_CAP = 20


class SimulationError(RuntimeError):
    """The sample cannot support the requested interaction mode."""


@dataclass(frozen=True)
class SimulationPolicy:
    mode: str = "click"
    rounds: int = 5
    clicks_per_round: int = 3
    scribbles_per_round: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown simulation mode {self.mode!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    @property
    def effective_rounds(self) -> int:
        return 1 if self.mode in SINGLE_ROUND_MODES else self.rounds


@dataclass(frozen=True)
class RoundRecord:
    round: int
    prompts: tuple[Prompt, ...]
    iou: float
    sad: float


@dataclass(frozen=True, eq=False)
class SessionTrace:
    rounds: tuple[RoundRecord, ...]
    final_matte: AlphaMatte | None = None

    def __len__(self) -> int:
        return len(self.rounds)


def significant_region(pred: InstanceMask, gt: InstanceMask) -> np.ndarray:
    """Largest 4-connected component of the binarized disagreement map."""
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} vs gt {gt.shape}")
    error = pred.binarized ^ gt.binarized
    if not error.any():
        return np.zeros_like(error)
    labels, count = _kernels.label_components(error)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def error_components(pred: InstanceMask, gt: InstanceMask) -> list[np.ndarray]:
    """All disagreement components, largest first (ties by first label)."""
    error = pred.binarized ^ gt.binarized
    labels, count = _kernels.label_components(error)
    if count == 0:
        return []
    sizes = np.bincount(labels.ravel())[1:]
    order = np.argsort(-sizes, kind="stable")
    return [labels == (int(i) + 1) for i in order]


def _region_polarity(region: np.ndarray, pred_fg: np.ndarray, gt_fg: np.ndarray) -> str:
    """fg for a mostly false-negative region, bg for false-positive; ties fg."""
    fn = int((region & gt_fg & ~pred_fg).sum())
    fp = int((region & pred_fg & ~gt_fg).sum())
    return prompt_mod.FOREGROUND if fn >= fp else prompt_mod.BACKGROUND


def farthest_interior_points(region: np.ndarray, count: int,
                             exclusion_radius: float = CLICK_EXCLUSION_RADIUS) -> list[tuple[float, float]]:
    """Successive interior points farthest from the region boundary; each pick
    masks an exclusion disc around itself. Falls back to the global farthest
    point when the region is exhausted."""
    h, w = region.shape
    dist = scipy.ndimage.distance_transform_edt(region)
    global_best = int(np.argmax(dist))
    eligible = dist.copy()
    out = []
    for _ in range(count):
        if eligible.max() <= 0.0:
            flat = global_best
        else:
            flat = int(np.argmax(eligible))
        y, x = divmod(flat, w)
        out.append((float(x), float(y)))
        disc = _kernels.disc_footprint(h, w, float(x), float(y), exclusion_radius)
        eligible[disc] = 0.0
    return out


def _skeleton(region: np.ndarray) -> np.ndarray:
    from skimage.morphology import skeletonize  # deferred: skimage import is slow

    return skeletonize(region)


def _longest_skeleton_path(skel: np.ndarray) -> list[tuple[int, int]]:
    """Longest hop path through the 8-connected skeleton (double BFS)."""
    ys, xs = np.nonzero(skel)
    if len(ys) == 0:
        return []
    pixels = set(zip(ys.tolist(), xs.tolist()))

    def bfs(start):
        seen = {start: None}
        queue = deque([start])
        last = start
        while queue:
            cy, cx = queue.popleft()
            last = (cy, cx)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy == 0 and dx == 0:
                        continue
                    nxt = (cy + dy, cx + dx)
                    if nxt in pixels and nxt not in seen:
                        seen[nxt] = (cy, cx)
                        queue.append(nxt)
        return last, seen

    start = (int(ys[0]), int(xs[0]))
    far, _ = bfs(start)
    end, parents = bfs(far)
    path = [end]
    while parents[path[-1]] is not None:
        path.append(parents[path[-1]])
    return path[::-1]


def _scribble_from_region(region: np.ndarray, polarity: str, round_idx: int) -> Prompt:
    path = _longest_skeleton_path(_skeleton(region))
    if not path:
        ys, xs = np.nonzero(region)
        path = [(int(ys[0]), int(xs[0]))]
    if len(path) > MAX_SCRIBBLE_WAYPOINTS:
        keep = np.round(np.linspace(0, len(path) - 1, MAX_SCRIBBLE_WAYPOINTS)).astype(int)
        path = [path[i] for i in keep]
    points = [(float(x), float(y)) for y, x in path]
    if len(points) == 1:
        points = points * 2
    return prompt_mod.scribble(points, polarity=polarity, round=round_idx)


def _tight_box(alpha: np.ndarray, round_idx: int) -> Prompt:
    fg = alpha > 0.0
    if not fg.any():
        raise SimulationError("empty ground-truth foreground; cannot derive a box")
    ys, xs = np.nonzero(fg)
    x1, x2 = float(xs.min()), float(xs.max())
    y1, y2 = float(ys.min()), float(ys.max())
    h, w = alpha.shape
    if x1 == x2:  # single-column foreground: nudge to keep a nonzero area
        x2 = min(x1 + 1.0, w - 1.0)
        x1 = max(x2 - 1.0, 0.0)
    if y1 == y2:
        y2 = min(y1 + 1.0, h - 1.0)
        y1 = max(y2 - 1.0, 0.0)
    return prompt_mod.box((x1, y1), (x2, y2), round=round_idx)


def _first_round_clicks(gt_fg: np.ndarray, count: int, rng: np.random.Generator,
                        round_idx: int) -> list[Prompt]:
    ys, xs = np.nonzero(gt_fg)
    if len(ys) == 0:
        raise SimulationError("empty ground-truth foreground; cannot place clicks")
    replace = len(ys) < count
    picks = rng.choice(len(ys), size=count, replace=replace)
    return [prompt_mod.click(float(xs[i]), float(ys[i]), polarity=prompt_mod.FOREGROUND,
                             round=round_idx) for i in picks]


def _first_round_scribbles(gt_fg: np.ndarray, count: int, round_idx: int) -> list[Prompt]:
    if not gt_fg.any():
        raise SimulationError("empty ground-truth foreground; cannot trace scribbles")
    labels, n = _kernels.label_components(gt_fg)
    sizes = np.bincount(labels.ravel())[1:]
    order = np.argsort(-sizes, kind="stable")
    comps = [labels == (int(i) + 1) for i in order]
    return [_scribble_from_region(comps[i % len(comps)], prompt_mod.FOREGROUND, round_idx)
            for i in range(count)]


def _later_round_clicks(pred: InstanceMask, gt_mask: InstanceMask, count: int,
                        round_idx: int) -> list[Prompt]:
    region = significant_region(pred, gt_mask)
    if not region.any():
        return []
    polarity = _region_polarity(region, pred.binarized, gt_mask.binarized)
    points = farthest_interior_points(region, count)
    return [prompt_mod.click(x, y, polarity=polarity, round=round_idx) for x, y in points]


def _later_round_scribbles(pred: InstanceMask, gt_mask: InstanceMask, count: int,
                           round_idx: int) -> list[Prompt]:
    comps = error_components(pred, gt_mask)
    if not comps:
        return []
    out = []
    for i in range(count):
        region = comps[i % len(comps)]
        polarity = _region_polarity(region, pred.binarized, gt_mask.binarized)
        out.append(_scribble_from_region(region, polarity, round_idx))
    return out


def generate_round_prompts(policy: SimulationPolicy, round_idx: int,
                           pred: InstanceMask | None, gt_record: InstanceRecord,
                           rng: np.random.Generator) -> list[Prompt]:
    """Prompts the simulated user issues for one round."""
    if round_idx < 1:
        raise ValueError("round indices are 1-based")
    if round_idx > 1 and pred is None:
        raise ValueError("rounds after the first need the previous prediction")
    gt_alpha = gt_record.matte.alpha
    gt_mask = InstanceMask(gt_alpha)
    gt_fg = binarize(gt_alpha)

    mode = policy.mode
    if mode == "mixed":
        if gt_record.text_description is None:
            raise SimulationError("mixed mode needs a text annotation on the sample")
        if round_idx == 1:
            visual_kind = ("click", "scribble", "box")[rng.integers(0, 3)]
            out = [prompt_mod.text_prompt(gt_record.text_description, round=round_idx)]
            if visual_kind == "click":
                out += _first_round_clicks(gt_fg, policy.clicks_per_round, rng, round_idx)
            elif visual_kind == "scribble":
                out += _first_round_scribbles(gt_fg, policy.scribbles_per_round, round_idx)
            else:
                out.append(_tight_box(gt_alpha, round_idx))
            return out
        kind = ("click", "scribble")[rng.integers(0, 2)]
        if kind == "click":
            return _later_round_clicks(pred, gt_mask, policy.clicks_per_round, round_idx)
        return _later_round_scribbles(pred, gt_mask, policy.scribbles_per_round, round_idx)

    if mode == "click":
        if round_idx == 1:
            return _first_round_clicks(gt_fg, policy.clicks_per_round, rng, round_idx)
        return _later_round_clicks(pred, gt_mask, policy.clicks_per_round, round_idx)

    if mode == "scribble":
        if round_idx == 1:
            return _first_round_scribbles(gt_fg, policy.scribbles_per_round, round_idx)
        return _later_round_scribbles(pred, gt_mask, policy.scribbles_per_round, round_idx)

    if mode == "box":
        return [_tight_box(gt_alpha, round_idx)]

    # text mode
    if gt_record.text_description is None:
        raise SimulationError("text mode needs a text annotation on the sample")
    return [prompt_mod.text_prompt(gt_record.text_description, round=round_idx)]


def run_session(model, policy: SimulationPolicy, image: Image, gt_record: InstanceRecord,
                aggregate: bool = False) -> SessionTrace:
    """Drive one multi-round session and record per-round metrics.

    ``model`` exposes ``predict_round(image, prompts, prev_mask, conflict)``
    returning (InstanceMask, AlphaMatte). With ``aggregate`` set, each round
    feeds the union of all prompts so far with no conflict map or previous
    mask, replicating the treatment of round-unaware baselines.
    """
    rng = np.random.default_rng(policy.seed)
    gt_mask = InstanceMask(gt_record.matte.alpha)
    records = []
    history: list[Prompt] = []
    prev_mask: InstanceMask | None = None
    final_matte: AlphaMatte | None = None
    cmap = empty_conflict_map(image.height, image.width)

    for round_idx in range(1, policy.effective_rounds + 1):
        try:
            new_prompts = generate_round_prompts(policy, round_idx, prev_mask, gt_record, rng)
        except SimulationError as exc:
            raise SimulationError(f"round {round_idx}: {exc}") from exc
        history.extend(new_prompts)

        if aggregate:
            feed, feed_prev, cmap = list(history), None, empty_conflict_map(image.height, image.width)
        else:
            cmap = update_conflict_map(prev_mask, new_prompts, cmap)
            feed, feed_prev = new_prompts, prev_mask

        try:
            mask, matte = model.predict_round(image, feed, feed_prev, cmap)
        except Exception as exc:
            raise RuntimeError(f"model failed at round {round_idx}: {exc}") from exc

        records.append(RoundRecord(
            round=round_idx,
            prompts=tuple(new_prompts),
            iou=iou_metric(mask, gt_mask),
            sad=sad_metric(matte, gt_record.matte),
        ))
        prev_mask, final_matte = mask, matte

    return SessionTrace(rounds=tuple(records), final_matte=final_matte)


def noc_at(traces: list[SessionTrace], iou_threshold: float = 0.9,
           cap: int = DEFAULT_NOC_CAP) -> float:
    """Mean number of rounds to reach the IoU threshold; cap when never reached."""
    if not traces:
        raise ValueError("noc_at needs at least one trace")
    firsts = []
    for trace in traces:
        hit = next((r.round for r in trace.rounds if r.iou >= iou_threshold), cap)
        firsts.append(hit)
    return float(np.mean(firsts))


def trace_to_dict(trace: SessionTrace) -> dict:
    return {
        "rounds": [
            {
                "round": r.round,
                "prompts": [prompt_mod.prompt_to_dict(p) for p in r.prompts],
                "iou": r.iou,
                "sad": r.sad,
            }
            for r in trace.rounds
        ]
    }


def traces_to_jsonl(traces: list[SessionTrace]) -> str:
    """One session per line, for the report CLI and replay tooling."""
    return "\n".join(json.dumps(trace_to_dict(t)) for t in traces) + ("\n" if traces else "")

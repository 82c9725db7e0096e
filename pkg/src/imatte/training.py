"""Training regimes and checkpoint IO.

Three regimes:

* ``decoupled``     - train the localizer, freeze it, then train the refiner.
* ``coupled-training`` - one joint loss over localizer + refiner from scratch.
* ``coupled-network``  - localizer with a direct matting head, no refiner.

All regimes use Adam at base lr 5e-4 with a cosine schedule. Checkpoints are
npz archives of named parameter arrays plus a JSON config and format version.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import simulate
from .conflict import empty_conflict_map, update_conflict_map
from .core import HUMAN, AlphaMatte, Image, InstanceMask, InstanceRecord, binarize
from .localizer import (InstanceLocalizer, IscnConfig, Mlp, iscn_loss, match_query,
                        select_target, target_query_index)
from .metrics import iou as iou_metric, sad as sad_metric
from .prompts import Prompt
from .refiner import MatteRefiner, MrnConfig, MrnInput, mrn_loss_torch, refine_matte

REGIMES = ("decoupled", "coupled-training", "coupled-network")
CHECKPOINT_FORMAT_VERSION = 1
UNMATCHED_CLASS_WEIGHT = 0.1
BASE_LR = 5e-4


@dataclass(frozen=True)
class TrainSettings:
    regime: str = "decoupled"
    steps_iscn: int = 200
    steps_mrn: int = 200
    lr: float = BASE_LR
    batch_size: int = 4
    seed: int = 0
    prompt_mode: str = "click"
    sim_rounds: int = 1

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.prompt_mode not in ("click", "scribble", "box", "mixed"):
            raise ValueError(f"unsupported training prompt mode {self.prompt_mode!r}")

    @property
    def total_steps(self) -> int:
        # every regime spends the same budget: decoupled splits it, the
        # coupled regimes run it as one phase
        return self.steps_iscn + self.steps_mrn


Sample = tuple[Image, list[InstanceRecord]]
Pair = tuple[Image, InstanceRecord]


def flatten_pairs(samples: list[Sample]) -> list[Pair]:
    return [(img, rec) for img, recs in samples for rec in recs]


def draw_prompts(record: InstanceRecord, mode: str, rng: np.random.Generator,
                 round_idx: int = 1) -> list[Prompt]:
    """First-round prompt draw used for training and fixed-seed evaluation."""
    policy = simulate.SimulationPolicy(mode=mode, seed=0)
    return simulate.generate_round_prompts(policy, round_idx, None, record, rng)


def gt_mask_of(record: InstanceRecord) -> InstanceMask:
    return InstanceMask(binarize(record.matte.alpha).astype(np.float32))


def _class_supervision(out, matched: int) -> torch.Tensor:
    """Cross-entropy pushing unmatched queries toward the non-human class."""
    n = out.class_logits.shape[0]
    idx = [q for q in range(n) if q != matched]
    if not idx:
        return torch.zeros((), dtype=out.class_logits.dtype)
    target = torch.full((len(idx),), 1, dtype=torch.long, device=out.class_logits.device)
    return F.cross_entropy(out.class_logits[idx], target)


def _supervised_stage_loss(outs, gt_mask) -> torch.Tensor:
    """Deep supervision: the combined loss averaged over decoder stages. The
    query is matched once on the final stage so every stage pulls the same
    query toward the target."""
    matched = match_query(outs[-1], gt_mask, HUMAN)
    terms = []
    for out in outs:
        term = iscn_loss(out, gt_mask, HUMAN, query=matched)
        terms.append(term + UNMATCHED_CLASS_WEIGHT * _class_supervision(out, matched))
    return torch.stack(terms).mean()


def _localizer_pair_loss(model: InstanceLocalizer, image: Image, record: InstanceRecord,
                         rng: np.random.Generator, settings: TrainSettings) -> torch.Tensor:
    gt_mask = gt_mask_of(record)
    prompts = draw_prompts(record, settings.prompt_mode, rng)
    outs = model.forward_all_stages(image, prompts)
    out = outs[-1]
    loss = _supervised_stage_loss(outs, gt_mask)

    for extra_round in range(2, settings.sim_rounds + 1):
        with torch.no_grad():
            pred_mask, _ = select_target(out)
        policy = simulate.SimulationPolicy(mode="click", seed=0)
        round_prompts = simulate.generate_round_prompts(policy, extra_round, pred_mask,
                                                        record, rng)
        if not round_prompts:
            break
        cmap = update_conflict_map(pred_mask, round_prompts,
                                   empty_conflict_map(*pred_mask.shape))
        out = model(image, round_prompts, prev_mask=pred_mask, conflict=cmap)
        matched = match_query(out, gt_mask, HUMAN)
        loss = loss + iscn_loss(out, gt_mask, HUMAN, query=matched)
        loss = loss + UNMATCHED_CLASS_WEIGHT * _class_supervision(out, matched)
    return loss


def _make_optimizer(params, lr: float, steps: int):
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    return opt, sched


def train_localizer(model: InstanceLocalizer, samples: list[Sample],
                    settings: TrainSettings) -> list[float]:
    """Train the localizer alone; returns per-step losses."""
    pairs = flatten_pairs(samples)
    rng = np.random.default_rng(settings.seed)
    opt, sched = _make_optimizer(model.parameters(), settings.lr, settings.steps_iscn)
    model.train()
    history = []
    for _ in range(settings.steps_iscn):
        batch = [pairs[i] for i in rng.choice(len(pairs), size=min(settings.batch_size,
                                                                   len(pairs)), replace=False)]
        opt.zero_grad()
        losses = [_localizer_pair_loss(model, img, rec, rng, settings) for img, rec in batch]
        loss = torch.stack(losses).mean()
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
    model.eval()
    return history


def _coarse_mask(model: InstanceLocalizer, image: Image, record: InstanceRecord,
                 rng: np.random.Generator, settings: TrainSettings) -> InstanceMask:
    prompts = draw_prompts(record, settings.prompt_mode, rng)
    with torch.no_grad():
        out = model(image, prompts)
    mask, _ = select_target(out)
    return mask


def train_refiner(localizer: InstanceLocalizer, refiner: MatteRefiner,
                  samples: list[Sample], settings: TrainSettings) -> list[float]:
    """Train the refiner against the frozen localizer's coarse masks."""
    pairs = flatten_pairs(samples)
    rng = np.random.default_rng(settings.seed + 1)
    opt, sched = _make_optimizer(refiner.parameters(), settings.lr, settings.steps_mrn)
    localizer.eval()
    refiner.train()
    dtype = next(refiner.parameters()).dtype
    history = []
    for _ in range(settings.steps_mrn):
        batch = [pairs[i] for i in rng.choice(len(pairs), size=min(settings.batch_size,
                                                                   len(pairs)), replace=False)]
        opt.zero_grad()
        losses = []
        for img, rec in batch:
            coarse = _coarse_mask(localizer, img, rec, rng, settings)
            pixels = torch.as_tensor(np.ascontiguousarray(img.pixels.transpose(2, 0, 1))).to(dtype)
            pred = refiner(pixels, torch.as_tensor(coarse.mask).to(dtype))
            gt = torch.as_tensor(rec.matte.alpha).to(dtype)
            losses.append(mrn_loss_torch(pred, gt))
        loss = torch.stack(losses).mean()
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
    refiner.eval()
    return history


def train_coupled_training(localizer: InstanceLocalizer, refiner: MatteRefiner,
                           samples: list[Sample], settings: TrainSettings) -> list[float]:
    """Joint training: one optimizer over both networks, summed losses, with
    gradients flowing from the matte loss through the coarse mask."""
    pairs = flatten_pairs(samples)
    rng = np.random.default_rng(settings.seed)
    steps = settings.total_steps
    opt, sched = _make_optimizer(list(localizer.parameters()) + list(refiner.parameters()),
                                 settings.lr, steps)
    localizer.train()
    refiner.train()
    dtype = next(refiner.parameters()).dtype
    history = []
    for _ in range(steps):
        batch = [pairs[i] for i in rng.choice(len(pairs), size=min(settings.batch_size,
                                                                   len(pairs)), replace=False)]
        opt.zero_grad()
        losses = []
        for img, rec in batch:
            gt_mask = gt_mask_of(rec)
            prompts = draw_prompts(rec, settings.prompt_mode, rng)
            outs = localizer.forward_all_stages(img, prompts)
            loc_loss = _supervised_stage_loss(outs, gt_mask)
            matched = match_query(outs[-1], gt_mask, HUMAN)
            pixels = torch.as_tensor(np.ascontiguousarray(img.pixels.transpose(2, 0, 1))).to(dtype)
            pred = refiner(pixels, outs[-1].masks[matched])
            gt = torch.as_tensor(rec.matte.alpha).to(dtype)
            losses.append(loc_loss + mrn_loss_torch(pred, gt))
        loss = torch.stack(losses).mean()
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
    localizer.eval()
    refiner.eval()
    return history


class DirectMattingNetwork(nn.Module):
    """Coupled-network regime: the localizer with a direct matting head and
    no refinement stage."""

    def __init__(self, cfg: IscnConfig | None = None):
        super().__init__()
        self.localizer = InstanceLocalizer(cfg)
        c = self.localizer.cfg
        self.matte_embed = Mlp(c.d, c.mask_width, layers=3)
        self.matte_pixel_proj = InstanceLocalizer._build_pixel_decoder(c.d, c.mask_width, c.stride)

    def forward(self, image: Image, prompts: list[Prompt], all_stages: bool = False, **kw):
        outs, fmap = self.localizer.forward_all_stages(image, prompts, with_features=True, **kw)
        pix = self.matte_pixel_proj(fmap.data.permute(2, 0, 1).unsqueeze(0)).squeeze(0)
        emb = self.matte_embed(outs[-1].mask_embeddings)
        logits = torch.einsum("nd,dhw->nhw", emb, pix)[:, :image.height, :image.width]
        return (outs if all_stages else outs[-1]), torch.sigmoid(logits)

    def predict_round(self, image, prompts, prev_mask=None, conflict=None):
        with torch.no_grad():
            out, mattes = self.forward(image, prompts, prev_mask=prev_mask, conflict=conflict)
        mask, _ = select_target(out)
        q = target_query_index(out)
        matte = AlphaMatte(np.clip(mattes[q].detach().cpu().numpy(), 0.0, 1.0).astype(np.float32))
        return mask, matte


def train_coupled_network(model: DirectMattingNetwork, samples: list[Sample],
                          settings: TrainSettings) -> list[float]:
    pairs = flatten_pairs(samples)
    rng = np.random.default_rng(settings.seed)
    steps = settings.total_steps
    opt, sched = _make_optimizer(model.parameters(), settings.lr, steps)
    model.train()
    history = []
    for _ in range(steps):
        batch = [pairs[i] for i in rng.choice(len(pairs), size=min(settings.batch_size,
                                                                   len(pairs)), replace=False)]
        opt.zero_grad()
        losses = []
        for img, rec in batch:
            gt_mask = gt_mask_of(rec)
            prompts = draw_prompts(rec, settings.prompt_mode, rng)
            outs, mattes = model(img, prompts, all_stages=True)
            loss = _supervised_stage_loss(outs, gt_mask)
            matched = match_query(outs[-1], gt_mask, HUMAN)
            gt = torch.as_tensor(rec.matte.alpha, dtype=mattes.dtype)
            losses.append(loss + mrn_loss_torch(mattes[matched], gt))
        loss = torch.stack(losses).mean()
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
    model.eval()
    return history


# --- fixed-seed evaluation over a suite --------------------------------------

def evaluate_localizer_iou(model: InstanceLocalizer, samples: list[Sample],
                           prompt_mode: str = "click", prompt_seed: int = 1234) -> float:
    rng = np.random.default_rng(prompt_seed)
    ious = []
    for img, rec in flatten_pairs(samples):
        prompts = draw_prompts(rec, prompt_mode, rng)
        with torch.no_grad():
            out = model(img, prompts)
        mask, _ = select_target(out)
        ious.append(iou_metric(mask, gt_mask_of(rec)))
    return float(np.mean(ious))


def evaluate_pipeline_sad(predict_round, samples: list[Sample], prompt_mode: str = "click",
                          prompt_seed: int = 1234) -> tuple[float, float]:
    """Returns (mean coarse-mask SAD, mean refined SAD) over the suite."""
    rng = np.random.default_rng(prompt_seed)
    coarse_sads, refined_sads = [], []
    for img, rec in flatten_pairs(samples):
        prompts = draw_prompts(rec, prompt_mode, rng)
        mask, matte = predict_round(img, prompts, None,
                                    empty_conflict_map(img.height, img.width))
        coarse_sads.append(sad_metric(AlphaMatte(mask.mask), rec.matte))
        refined_sads.append(sad_metric(matte, rec.matte))
    return float(np.mean(coarse_sads)), float(np.mean(refined_sads))


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model: nn.Module, kind: str, config: dict) -> None:
    meta = json.dumps({"format_version": CHECKPOINT_FORMAT_VERSION, "kind": kind,
                       "config": config})
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path, __meta__=np.array(meta), **arrays)


def read_checkpoint(path) -> tuple[dict, dict]:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["__meta__"]))
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {meta.get('format_version')}")
    state = {k[len("param/"):]: torch.as_tensor(data[k])
             for k in data.files if k.startswith("param/")}
    return meta, state


def load_localizer(path) -> InstanceLocalizer:
    meta, state = read_checkpoint(path)
    if meta["kind"] != "localizer":
        raise ValueError(f"checkpoint {path} holds a {meta['kind']!r}, not a localizer")
    model = InstanceLocalizer(IscnConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model


def load_refiner(path) -> MatteRefiner:
    meta, state = read_checkpoint(path)
    if meta["kind"] != "refiner":
        raise ValueError(f"checkpoint {path} holds a {meta['kind']!r}, not a refiner")
    model = MatteRefiner(MrnConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model


def load_direct_network(path) -> DirectMattingNetwork:
    meta, state = read_checkpoint(path)
    if meta["kind"] != "direct":
        raise ValueError(f"checkpoint {path} holds a {meta['kind']!r}, not a direct network")
    model = DirectMattingNetwork(IscnConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model

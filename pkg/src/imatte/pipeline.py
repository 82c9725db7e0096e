"""End-to-end per-round predictor: localizer -> target selection -> refiner.

This is the object the service, simulator, and evaluation CLI drive. One
round takes the image, the round's prompts, the previous mask, and the
current conflict map, and returns (instance mask, alpha matte).
"""

from __future__ import annotations

import torch

from .conflict import ConflictMap
from .core import AlphaMatte, Image, InstanceMask
from .localizer import InstanceLocalizer, select_target
from .prompts import Prompt
from .refiner import MatteRefiner, MrnInput, refine_matte


class InteractivePipeline:
    def __init__(self, localizer: InstanceLocalizer, refiner: MatteRefiner):
        self.localizer = localizer
        self.refiner = refiner
        self.localizer.eval()
        self.refiner.eval()

    def predict_round(self, image: Image, prompts: list[Prompt],
                      prev_mask: InstanceMask | None = None,
                      conflict: ConflictMap | None = None) -> tuple[InstanceMask, AlphaMatte]:
        with torch.no_grad():
            out = self.localizer(image, prompts, prev_mask=prev_mask, conflict=conflict)
        mask, _ = select_target(out)
        matte = refine_matte(self.refiner, MrnInput(image=image, coarse_mask=mask))
        return mask, matte

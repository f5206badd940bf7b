"""Live image-text backend wrapping a CLIP checkpoint from ``transformers``.

The checkpoint name or local path comes from ``PLMINE_CLIP_MODEL``.
``transformers`` and ``torch`` are imported only when the backend is built,
so the rest of the package does not depend on them.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .geometry import BBox, ImageExtent

MODEL_ENV = "PLMINE_CLIP_MODEL"
LIVE_TEMPERATURE = 0.01


class LiveBackendUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class ImageItem:
    """An image on disk, as handed to proposal sources and scoring backends."""

    image_id: Any
    extent: ImageExtent
    path: Path | None = None


class ClipBackend:
    """Region and text embeddings from a CLIP model; not shareable across workers."""

    shareable = False
    batched_tolerance = 0.02
    default_temperature = LIVE_TEMPERATURE

    def __init__(self, model: str | None = None, device: str = "cpu"):
        model = model or os.environ.get(MODEL_ENV)
        if not model:
            raise LiveBackendUnavailable(f"set {MODEL_ENV} to a CLIP checkpoint name or path")
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover - depends on the environment
            raise LiveBackendUnavailable(f"live backend needs torch and transformers: {exc}") from exc
        self._torch = torch
        self.model = CLIPModel.from_pretrained(model).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model)
        self.device = device
        self.identifier = f"clip:{model}"
        self._image_cache: dict[Any, Any] = {}

    def _image(self, item: ImageItem):
        from PIL import Image
        if item.image_id not in self._image_cache:
            if item.path is None:
                raise LiveBackendUnavailable(f"image {item.image_id!r} has no file")
            self._image_cache.clear()
            self._image_cache[item.image_id] = Image.open(item.path).convert("RGB")
        return self._image_cache[item.image_id]

    def embed_text(self, prompts):
        with self._torch.no_grad():
            tok = self.processor(text=list(prompts), return_tensors="pt", padding=True).to(self.device)
            return self.model.get_text_features(**tok).cpu().numpy().astype(float)

    def embed_regions(self, item: ImageItem, boxes, scale_tag="1x"):
        img = self._image(item)
        crops = [img.crop((int(b.x1), int(b.y1), max(int(b.x1) + 1, int(np.ceil(b.x2))),
                           max(int(b.y1) + 1, int(np.ceil(b.y2))))) for b in boxes]
        with self._torch.no_grad():
            px = self.processor(images=crops, return_tensors="pt").to(self.device)
            return self.model.get_image_features(**px).cpu().numpy().astype(float)

    def embed_region(self, item: ImageItem, box: BBox, scale_tag="1x"):
        return self.embed_regions(item, [box], scale_tag)[0]

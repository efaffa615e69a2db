"""Vanilla input-gradient saliency for image models."""

from __future__ import annotations

import numpy as np

from ..core.imaging import normalize_zscore, prepare_image
from ..core.types import Case, ValidationError
from .network import Network, input_gradient


def saliency_map(net: Network, case: Case, output: str | int = 0) -> np.ndarray:
    """|d score / d pixel|, max over channels, scaled so the maximum is 1.

    ``output`` is an output name (e.g. ``'amoeba'``) or column index. The
    map has the spatial shape of the model input; an all-zero gradient gives
    an all-zero map.
    """
    cfg = net.config
    if case.payload is None or not case.is_image or cfg.payload_mode != "image":
        raise ValidationError("saliency maps need an image payload and a conv trunk")
    index = cfg.output_names.index(output) if isinstance(output, str) else int(output)
    x = normalize_zscore(prepare_image(case.payload, cfg.image_size))[None]
    g = np.abs(input_gradient(net, x, index)[0]).max(axis=-1)
    peak = g.max()
    return g / peak if peak > 0 else np.zeros_like(g)

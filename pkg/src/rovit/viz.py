"""Positional-embedding similarity export (CSV tiles + PGM mosaic)."""

from __future__ import annotations

import os

from .encoders import DualEncoder, load_checkpoint
from .pe import pe_similarity_map, similarity_map_to_csv, similarity_map_to_pgm


def export_pe_viz(model, out_dir, gap: int = 1):
    """Write ``pe_similarity.csv`` and ``pe_similarity.pgm``; returns (csv, pgm, map)."""
    if not isinstance(model, DualEncoder):
        model = load_checkpoint(model)
    if "image.pe" not in model.params or model.vit.pe_mode in ("sincos", "none"):
        raise ValueError("model has no learnable positional-embedding grid")
    sim = pe_similarity_map(model.params["image.pe"])
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "pe_similarity.csv")
    pgm_path = os.path.join(out_dir, "pe_similarity.pgm")
    with open(csv_path, "w") as fh:
        fh.write(similarity_map_to_csv(sim))
    with open(pgm_path, "wb") as fh:
        fh.write(similarity_map_to_pgm(sim, gap=gap))
    return csv_path, pgm_path, sim

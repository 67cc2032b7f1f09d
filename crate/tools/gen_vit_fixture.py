#!/usr/bin/env python3
"""Generate the tiny CLIP-vision fixture used by the Rust encoder tests.

Builds a small randomly initialized CLIPVisionModelWithProjection with the
reference implementation (transformers), saves its weights in safetensors
layout, and records the embedding of a fixed random image so the Rust
forward pass can be checked against an implementation it shares no code
with. Run from the repository root:

    python3 tools/gen_vit_fixture.py
"""

import json
import pathlib

import numpy as np
import torch
from transformers import CLIPVisionConfig, CLIPVisionModelWithProjection

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates/cdasr/tests/fixtures/tiny_clip"

CLIP_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
CLIP_STD = np.array([0.26862954, 0.26130258, 0.27577711])


def main() -> None:
    torch.manual_seed(0)
    cfg = CLIPVisionConfig(
        hidden_size=32,
        intermediate_size=64,
        num_hidden_layers=2,
        num_attention_heads=4,
        image_size=32,
        patch_size=16,
        projection_dim=24,
        hidden_act="quick_gelu",
        layer_norm_eps=1e-5,
    )
    model = CLIPVisionModelWithProjection(cfg).eval()

    rng = np.random.RandomState(7)
    px = rng.rand(32, 32, 3)  # HWC in [0, 1]
    x = (px - CLIP_MEAN) / CLIP_STD
    t = torch.tensor(x.transpose(2, 0, 1)[None], dtype=torch.float32)
    with torch.no_grad():
        raw = model(pixel_values=t).image_embeds[0].numpy().astype(np.float64)
    emb = raw / np.linalg.norm(raw)

    OUT.mkdir(parents=True, exist_ok=True)
    model.save_pretrained(OUT, safe_serialization=True)
    with open(OUT / "reference.json", "w") as f:
        json.dump(
            {
                "pixels_hwc": px.tolist(),
                "embedding": emb.tolist(),
                "raw_embedding": raw.tolist(),
            },
            f,
        )
    print(f"wrote fixture to {OUT}")


if __name__ == "__main__":
    main()

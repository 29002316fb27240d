"""Visualize the overlap gate: score-gap maps across denoising, both orders.

Writes PGM maps of the per-location score gap at early/mid/late sampling
steps, for the original and the relabeled object order (the second order's
maps are the sign-flipped first: the gate is order-agnostic).

    python scripts/gate_maps.py --checkpoint out/demo/model.pics --out out/gates
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from paircomp import imageio
from paircomp.config import Config
from paircomp.data import decompose, generate_scene
from paircomp.diffusion import (
    ModelState,
    NoiseSchedule,
    ddim_sample,
    encode_canvases,
    object_canvas,
    pair_routing,
)
from paircomp.tensor import no_grad


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--scene-seed", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/gates")
    args = ap.parse_args()

    cfg = Config(seed=args.seed)
    state = ModelState.load(args.checkpoint, cfg)
    sched = NoiseSchedule.from_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    scene = generate_scene(args.scene_seed, cfg.width, cfg.height, cfg.n_objects)
    sample = decompose(scene, (0, 1))
    with no_grad():
        codes = [encode_canvases(
            state, object_canvas(sample, p, cfg.width, cfg.height)[None])
            for p in range(2)]
    routings = pair_routing(sample.boxes, cfg)

    orders = {
        "ab": ([0, 1], codes, routings),
        "ba": ([1, 0], [codes[1], codes[0]], [g.permuted([1, 0]) for g in routings]),
    }
    for tag, (slots, ordered_codes, ordered_routs) in orders.items():
        image, maps = ddim_sample(state, sched, sample.background, ordered_codes,
                                  ordered_routs, steps=cfg.ddim_steps,
                                  cfg_scale=cfg.cfg_scale, seed=cfg.seed,
                                  slots=slots, record_gate_steps=(0, 24, 49))
        imageio.write_ppm(out / f"composite_{tag}.ppm", np.clip(image, 0, 1))
        for step, gap in maps.items():
            imageio.write_score_map(out / f"delta_s_step{step:02d}_{tag}.pgm", gap)
            print(f"order {tag} step {step}: gap range [{gap.min():+.3f}, {gap.max():+.3f}]")
    imageio.write_ppm(out / "target.ppm", scene.image)


if __name__ == "__main__":
    main()

"""Command-line surface: corpus generation, box selection, training,
sampling, evaluation, heatmaps, and gate-map dumps.

Every subcommand takes ``--config`` / ``--seed`` / ``--set key=value`` /
``--out`` and writes a resolved-config snapshot next to its artifacts, so
a run can be reproduced from its output directory alone.  Errors leave a
machine-readable JSON description on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import imageio
from .config import Config, load_config
from .data import (
    decompose,
    generate_scene,
    load_scene,
    overlap_heatmap,
    save_scene,
    select_boxes,
    select_multi,
)
from .diffusion import (
    ModelState,
    NoiseSchedule,
    ddim_sample,
    encode_canvases,
    eval_recomposition,
    object_canvas,
    pair_routing,
    train_model,
)
from .masks import BBox
from .tensor import no_grad

log = logging.getLogger("paircomp")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("PICS_LOG", "warn").lower()
    if level not in LOG_LEVELS:
        raise ValueError(f"PICS_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level],
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve_config(args) -> Config:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _prepare_out(args, config: Config) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(config.to_json())
    return out


def _load_corpus(data_dir) -> list:
    manifest = json.loads((Path(data_dir) / "manifest.json").read_text())
    return [load_scene(Path(data_dir) / rel) for rel in manifest["scenes"]]


# -- subcommands -----------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    config = _resolve_config(args)
    out = _prepare_out(args, config)
    rel_paths = []
    for i in range(config.n_scenes):
        scene = generate_scene(config.seed + i, config.width, config.height,
                               config.n_objects)
        scene.validate()
        rel = f"scenes/scene_{i:05d}"
        save_scene(out / rel, scene)
        rel_paths.append(rel)
    manifest = {"seed": config.seed, "count": config.n_scenes, "scenes": rel_paths}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    log.info("wrote %d scenes to %s", config.n_scenes, out)
    return 0


def _parse_boxes_line(line: str, lineno: int) -> tuple:
    try:
        record = json.loads(line)
        image_id = record["id"]
        boxes = [BBox.from_json(b) for b in record["boxes"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"line {lineno}: malformed boxes record ({exc})") from exc
    return image_id, boxes


def cmd_select(args) -> int:
    config = _resolve_config(args)
    out = _prepare_out(args, config)
    mode = args.mode
    if mode != "pair" and not mode.startswith("multi:"):
        raise ValueError(f"mode must be 'pair' or 'multi:M', got {mode!r}")
    results = []
    for lineno, line in enumerate(Path(args.input).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        image_id, boxes = _parse_boxes_line(line, lineno)
        if mode == "pair":
            sel = select_boxes(boxes, literal_guard=not args.corrected_guard)
        else:
            m = int(mode.split(":", 1)[1])
            sel = select_multi(boxes, m, area_threshold=config.area_threshold)
        if sel is None:
            results.append({"id": image_id, "mode": mode, "sentinel": True})
        else:
            indices = list(sel)
            results.append({"id": image_id, "mode": mode, "sentinel": False,
                            "indices": indices,
                            "boxes": [boxes[i].to_json() for i in indices]})
    (out / "selections.json").write_text(json.dumps(results, indent=2) + "\n")
    return 0


def cmd_train(args) -> int:
    config = _resolve_config(args)
    out = _prepare_out(args, config)
    scenes = _load_corpus(args.data)
    samples = [decompose(scene, (0, 1)) for scene in scenes]
    schedule = NoiseSchedule.from_config(config)
    state = ModelState.create(config)
    losses = train_model(state, samples, schedule)
    state.save(out / "model.pics")
    with open(out / "losses.jsonl", "w") as f:
        for k, v in enumerate(losses):
            f.write(json.dumps({"step": k + 1, "loss": v}) + "\n")
    log.info("trained %d steps, final loss %.4f", len(losses), losses[-1])
    return 0


def _scene_inputs(state: ModelState, scene, pair=(0, 1)):
    config = state.config
    sample = decompose(scene, pair)
    with no_grad():
        codes = [encode_canvases(
            state, object_canvas(sample, p, config.width, config.height)[None])
            for p in range(2)]
    routings = pair_routing(sample.boxes, config)
    return sample, codes, routings


def cmd_sample(args) -> int:
    config = _resolve_config(args)
    out = _prepare_out(args, config)
    state = ModelState.load(args.checkpoint, config)
    schedule = NoiseSchedule.from_config(config)
    scene = load_scene(args.scene)
    sample, codes, routings = _scene_inputs(state, scene)
    image, _ = ddim_sample(state, schedule, sample.background, codes, routings,
                           steps=config.ddim_steps, cfg_scale=config.cfg_scale,
                           seed=config.seed, record_gate_steps=())
    imageio.write_ppm(out / "composite.ppm", np.clip(image, 0.0, 1.0))
    imageio.write_ppm(out / "background.ppm", sample.background)
    return 0


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    out = _prepare_out(args, config)
    state = ModelState.load(args.checkpoint, config)
    schedule = NoiseSchedule.from_config(config)
    scenes = _load_corpus(args.data)
    records = eval_recomposition(state, schedule, scenes, seed=config.seed)
    with open(out / "metrics.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    agg = {k: float(np.mean([r[k] for r in records]))
           for k in ("psnr", "ssim", "mpsnr", "mssim")}
    log.info("eval aggregate: %s", agg)
    (out / "metrics_summary.json").write_text(json.dumps(agg, indent=2) + "\n")
    return 0


def _random_intersecting_pairs(rng: np.random.Generator, n: int,
                               span: int = 64) -> list[tuple[BBox, BBox]]:
    """Box pairs with guaranteed intersection, sizes and offsets randomized."""
    pairs = []
    while len(pairs) < n:
        w_a, h_a = rng.integers(8, span // 2 + 1, size=2)
        x_a, y_a = rng.integers(0, span - w_a), rng.integers(0, span - h_a)
        a = BBox(int(x_a), int(y_a), int(x_a + w_a), int(y_a + h_a))
        w_b, h_b = rng.integers(8, span // 2 + 1, size=2)
        # center b near a random point of a so the two intersect often
        cx = rng.integers(a.x0, a.x1)
        cy = rng.integers(a.y0, a.y1)
        x_b = int(np.clip(cx - w_b // 2, 0, span - w_b))
        y_b = int(np.clip(cy - h_b // 2, 0, span - h_b))
        b = BBox(x_b, y_b, int(x_b + w_b), int(y_b + h_b))
        if min(a.x1, b.x1) > max(a.x0, b.x0) and min(a.y1, b.y1) > max(a.y0, b.y0):
            pairs.append((a, b))
    return pairs


def cmd_heatmap(args) -> int:
    config = _resolve_config(args)
    out = _prepare_out(args, config)
    rng = np.random.default_rng(config.seed)
    pairs = _random_intersecting_pairs(rng, args.pairs)
    heat = overlap_heatmap(pairs, grid_n=config.heatmap_grid)
    imageio.write_score_map(out / "heatmap.pgm", heat)
    return 0


def cmd_dump_alpha(args) -> int:
    config = _resolve_config(args)
    out = _prepare_out(args, config)
    state = ModelState.load(args.checkpoint, config)
    schedule = NoiseSchedule.from_config(config)
    scene = load_scene(args.scene)
    sample, codes, routings = _scene_inputs(state, scene)
    record = (0, 24, 49) if config.ddim_steps >= 50 else (0,)
    orders = {"ab": ([0, 1], codes, routings),
              "ba": ([1, 0], [codes[1], codes[0]],
                     [g.permuted([1, 0]) for g in routings])}
    for tag, (slots, ordered_codes, ordered_routs) in orders.items():
        _, gate_maps = ddim_sample(state, schedule, sample.background, ordered_codes,
                                   ordered_routs, steps=config.ddim_steps,
                                   cfg_scale=config.cfg_scale, seed=config.seed,
                                   slots=slots, record_gate_steps=record)
        for step, ds in gate_maps.items():
            imageio.write_score_map(out / f"delta_s_step{step:02d}_{tag}.pgm", ds)
    return 0


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paircomp",
        description="parallel pairwise compositing pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field (repeatable)")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-corpus", help="generate a synthetic scene corpus")
    common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("select", help="pairwise / multi-object box selection")
    common(p)
    p.add_argument("--input", required=True, help="JSONL file: {id, boxes} per line")
    p.add_argument("--mode", default="pair", help="'pair' or 'multi:M'")
    p.add_argument("--corrected-guard", action="store_true",
                   help="use the corrected < 2 length guard instead of <= 2")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="train the compositing model")
    common(p)
    p.add_argument("--data", required=True, help="corpus directory from gen-corpus")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="composite one scene with a trained model")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene directory")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="recomposition metrics on a corpus")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="pairwise spatial-relation heatmap")
    common(p)
    p.add_argument("--pairs", type=int, default=10000)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("dump-alpha", help="write gate score-gap maps for both "
                                          "object orders")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_dump_alpha)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # surface a machine-readable failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

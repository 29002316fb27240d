"""Denoising-diffusion training and sampling around the interaction stack.

The model predicts the noise added to a target image, conditioned on the
hole-punched background (channel-concatenated with the noisy image),
per-object codes from the patch encoder, and box-derived routing masks at
every stack resolution.  Sampling is deterministic DDIM with
classifier-free guidance against a learned null code; pixels outside the
generation region follow the forward-diffused background each step and
are restored exactly at the end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .data import TrainSample
from .interaction import ITBParams, RoutingGates, itb_stack_forward, stack_resolutions
from .masks import BBox, bbox_to_mask, build_routing_masks, single_object_routing
from .shape_prior import (
    MultiViewFusion,
    fuse_multiview,
    image_patches,
    rotate_augment,
    synth_multiview,
)
from .tensor import (
    FFNParams,
    LayerNormParams,
    LinearParams,
    Tensor,
    linear,
    no_grad,
)

log = logging.getLogger("paircomp")

CHANNELS = 3
POS_FREQS = 2  # sin/cos pairs per axis in the positional channels


def positional_channels(height: int, width: int) -> np.ndarray:
    """Fixed sinusoidal position features, flattened to (h*w, 4*POS_FREQS).

    The token grid itself carries no location information, and the
    hole-punched background is zero inside the generation region, so
    without these channels the queries at erased pixels are position-blind
    and attention cannot fetch spatially matching object tokens.
    """
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    feats = []
    for k in range(POS_FREQS):
        freq = 2.0 * np.pi * (k + 1)
        feats.extend([np.sin(freq * xs / width), np.cos(freq * xs / width),
                      np.sin(freq * ys / height), np.cos(freq * ys / height)])
    return np.stack(feats, axis=-1).reshape(height * width, 4 * POS_FREQS)


@dataclass
class NoiseSchedule:
    """Forward-process schedule; ``alpha_bars[t]`` is the signal fraction
    after t steps, with ``alpha_bars[0] = 1``."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    @staticmethod
    def linear(timesteps: int, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        sched = NoiseSchedule(betas=betas,
                              alpha_bars=np.concatenate([[1.0], np.cumprod(1.0 - betas)]))
        sched.validate()
        return sched

    @staticmethod
    def from_config(config: Config) -> "NoiseSchedule":
        return NoiseSchedule.linear(config.timesteps, config.beta_start, config.beta_end)

    def validate(self) -> None:
        b = self.betas
        if not ((b > 0).all() and (b < 1).all() and (np.diff(b) > 0).all()):
            raise ValueError("betas must be strictly increasing within (0, 1)")
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("cumulative signal fractions must strictly decrease")


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Diffuse a clean signal to noise level t:
    ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar in [1, T] or a per-sample integer array that
    broadcasts against leading dimensions.
    """
    t_arr = np.asarray(t)
    if t_arr.min() < 1 or t_arr.max() > schedule.timesteps:
        raise ValueError(f"t={t} outside [1, {schedule.timesteps}]")
    x0 = np.asarray(x0)
    if np.shape(eps) != x0.shape:
        raise ValueError("noise must match the signal's shape")
    abar = self_broadcast(schedule.alpha_bars[t_arr], x0.ndim - t_arr.ndim)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def self_broadcast(values: np.ndarray, extra_dims: int) -> np.ndarray:
    return np.asarray(values).reshape(np.shape(values) + (1,) * extra_dims)


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, abar_t: float,
              abar_next: float, clip_range: tuple | None = None) -> np.ndarray:
    """One deterministic (eta=0) DDIM update from level t to the next level.

    ``clip_range`` optionally clamps the clean-signal estimate; the sampler
    passes the pixel range to keep early high-noise mispredictions from
    compounding through the 1/sqrt(abar) amplification.
    """
    x0_pred = (x_t - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
    if clip_range is not None:
        x0_pred = np.clip(x0_pred, *clip_range)
    return np.sqrt(abar_next) * x0_pred + np.sqrt(1.0 - abar_next) * eps_hat


def ddim_timesteps(timesteps: int, steps: int) -> np.ndarray:
    """Evenly strided descending subsequence of 1..T used by the sampler."""
    if steps > timesteps:
        raise ValueError(f"{steps} sampling steps exceed {timesteps} training steps")
    return np.rint(np.linspace(timesteps, 1, steps)).astype(np.int64)


def combine_cfg(eps_cond: np.ndarray, eps_uncond: np.ndarray,
                scale: float) -> np.ndarray:
    """Classifier-free guidance blend, affine in the scale.

    Scales 1 and 0 return the conditional / unconditional branch verbatim
    (bit-exact, not merely algebraically equal).
    """
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


# -- model state -----------------------------------------------------------------

class ModelState:
    """All learned parameters plus optimizer moments and the step counter."""

    def __init__(self, config: Config, in_proj: LinearParams, blocks: list[ITBParams],
                 head: LinearParams, patch_embed: LinearParams,
                 mv_fusion: MultiViewFusion, null_code: Tensor,
                 step: int = 0, seed: int = 0):
        self.config = config
        self.in_proj = in_proj
        self.blocks = blocks
        self.head = head
        self.patch_embed = patch_embed
        self.mv_fusion = mv_fusion
        self.null_code = null_code
        self.step = step
        self.seed = seed
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}

    @property
    def dtype(self):
        return np.float32 if self.config.dtype == "f32" else np.float64

    @staticmethod
    def create(config: Config, seed: int | None = None) -> "ModelState":
        seed = config.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        dtype = np.float32 if config.dtype == "f32" else np.float64
        d = config.d_model

        def lin(d_in, d_out, zero=False):
            scale = 0.0 if zero else d_in**-0.5
            w = (rng.normal(0.0, 1.0, size=(d_in, d_out)) * scale).astype(dtype)
            b = np.zeros(d_out, dtype=dtype)
            return LinearParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))

        blocks = [ITBParams.create(rng, d, n_slots=2, tau=config.tau, dtype=dtype,
                                   init="aligned")
                  for _ in range(config.stack_depth)]
        n_pix = config.patch_size * config.patch_size
        pos_dim = 4 * POS_FREQS
        # pixel embeddings and patch-token embeddings share their color and
        # position projections, so query/token inner products start out
        # measuring appearance+position match instead of random geometry;
        # patch rows keep a random full-rank component so intra-patch detail
        # stays addressable
        color = rng.normal(0.0, 0.25, size=(CHANNELS, d))
        bg_rows = rng.normal(0.0, 0.25, size=(CHANNELS, d))
        pos_rows = rng.normal(0.0, 0.25, size=(pos_dim, d))
        in_w = np.concatenate([color, bg_rows, pos_rows]).astype(dtype)
        in_proj = LinearParams(Tensor(in_w, requires_grad=True),
                               Tensor(np.zeros(d, dtype=dtype), requires_grad=True))
        pe_pixel_rows = (np.tile(color / n_pix, (n_pix, 1))
                         + rng.normal(0.0, 0.5 * (n_pix * CHANNELS)**-0.5,
                                      size=(n_pix * CHANNELS, d)))
        pe_w = np.concatenate([pe_pixel_rows, pos_rows]).astype(dtype)
        patch_embed = LinearParams(Tensor(pe_w, requires_grad=True),
                                   Tensor(np.zeros(d, dtype=dtype), requires_grad=True))

        mv_fusion = MultiViewFusion(
            ln=LayerNormParams(Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                               Tensor(np.zeros(d, dtype=dtype), requires_grad=True)),
            mlp=FFNParams(lin(d, 2 * d), lin(2 * d, d)),
        )
        null_code = Tensor(rng.normal(0.0, 0.02, size=(1, d)).astype(dtype),
                           requires_grad=True)
        return ModelState(
            config=config,
            in_proj=in_proj,
            blocks=blocks,
            head=lin(d, CHANNELS, zero=True),  # zero head: initial loss = E|eps|^2
            patch_embed=patch_embed,
            mv_fusion=mv_fusion,
            null_code=null_code,
            seed=seed,
        )

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, lp in (("in_proj", self.in_proj), ("head", self.head),
                         ("patch_embed", self.patch_embed)):
            out[f"{name}.w"] = lp.weight
            out[f"{name}.b"] = lp.bias
        for i, block in enumerate(self.blocks):
            out.update(block.named(prefix=f"block{i}."))
        out["mv.ln.g"] = self.mv_fusion.ln.gain
        out["mv.ln.b"] = self.mv_fusion.ln.bias
        out["mv.mlp1.w"] = self.mv_fusion.mlp.lin1.weight
        out["mv.mlp1.b"] = self.mv_fusion.mlp.lin1.bias
        out["mv.mlp2.w"] = self.mv_fusion.mlp.lin2.weight
        out["mv.mlp2.b"] = self.mv_fusion.mlp.lin2.bias
        out["null_code"] = self.null_code
        return out

    def save(self, path) -> None:
        # step/seed ride along as f32 blobs; the u64 seed is bit-packed so
        # arbitrarily large seeds survive the float container exactly
        seed_bits = np.frombuffer(np.uint64(self.seed).tobytes(), dtype="<f4").copy()
        arrays: dict[str, np.ndarray] = {"_step": np.array([self.step], dtype=np.float32),
                                         "_seed_bits": seed_bits}
        for name, t in self.named_tensors().items():
            arrays[f"param/{name}"] = t.data
            arrays[f"opt_m/{name}"] = self.adam_m.get(name, np.zeros_like(t.data))
            arrays[f"opt_v/{name}"] = self.adam_v.get(name, np.zeros_like(t.data))
        save_checkpoint(path, arrays)

    @staticmethod
    def load(path, config: Config) -> "ModelState":
        arrays = load_checkpoint(path)
        seed = int(np.frombuffer(arrays["_seed_bits"].tobytes(), dtype="<u8")[0])
        state = ModelState.create(config, seed=seed)
        state.step = int(arrays["_step"][0])
        dtype = state.dtype
        for name, t in state.named_tensors().items():
            blob = arrays[f"param/{name}"]
            if tuple(blob.shape) != tuple(t.data.shape):
                raise ValueError(f"checkpoint shape mismatch for {name}: "
                                 f"{blob.shape} vs {t.data.shape}")
            t.data = blob.astype(dtype)
            state.adam_m[name] = arrays[f"opt_m/{name}"].astype(dtype)
            state.adam_v[name] = arrays[f"opt_v/{name}"].astype(dtype)
        return state


# -- conditioning inputs ----------------------------------------------------------

def object_canvas(sample: TrainSample, p: int, width: int, height: int) -> np.ndarray:
    """Visible-object crop pasted at its box position on a zero canvas."""
    canvas = np.zeros((height, width, CHANNELS), dtype=np.float64)
    b = sample.boxes[p]
    canvas[b.y0:b.y1, b.x0:b.x1] = sample.object_crops[p]
    return canvas


def encode_canvases(state: ModelState, canvases: np.ndarray,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Encode a (B, H, W, C) batch of object canvases into (B, n, d) codes.

    With the multi-view augmentation enabled, each canvas is expanded into
    K synthetic views whose codes are permuted, fused, and returned in
    place of the single-view code (one permutation per call).
    """
    cfg = state.config
    grid = (cfg.height // cfg.patch_size, cfg.width // cfg.patch_size)
    pos = positional_channels(*grid)

    def embed(imgs: np.ndarray) -> Tensor:
        pats = np.stack([image_patches(im, cfg.patch_size) for im in imgs])
        pats = np.concatenate([pats, np.broadcast_to(pos, pats.shape[:-1] + (pos.shape[-1],))],
                              axis=-1)
        return linear(Tensor(pats.astype(state.dtype), _check=False), state.patch_embed)

    if not cfg.use_multiview:
        return embed(canvases)
    rng = rng or np.random.default_rng(0)
    view_seeds = rng.integers(0, 2**31, size=len(canvases))
    views = np.stack([synth_multiview(c, cfg.mv_views, int(s)).views
                      for c, s in zip(canvases, view_seeds)])  # (B, K, H, W, C)
    per_view = [embed(views[:, k]) for k in range(cfg.mv_views)]
    perm = list(rng.permutation(cfg.mv_views))
    return fuse_multiview(per_view, perm, state.mv_fusion)


def pair_routing(boxes: list[BBox], config: Config, batch: bool = False) -> list[RoutingGates]:
    """Box-derived routing gates at each stack-stage resolution."""
    masks = [bbox_to_mask(b, config.width, config.height) for b in boxes]
    res = stack_resolutions(config.height, config.width, config.stack_depth)
    dtype = np.float32 if config.dtype == "f32" else np.float64
    if len(masks) == 1:
        rms = [single_object_routing(masks[0], h, w) for h, w in res]
    else:
        rms = [build_routing_masks(masks, h, w) for h, w in res]
    return [RoutingGates.from_masks(rm, dtype) for rm in rms]


def stack_scene_routings(per_scene: list[list[RoutingGates]]) -> list[RoutingGates]:
    """Merge per-scene stage routings into batched stage routings."""
    return [RoutingGates.stack([scene[s] for scene in per_scene])
            for s in range(len(per_scene[0]))]


def predict_noise(state: ModelState, z_t: np.ndarray, z_bg: np.ndarray,
                  codes: list[Tensor], routings: list[RoutingGates],
                  slots: list[int] | None = None,
                  collect_gates: list | None = None) -> Tensor:
    """Noise estimate for (possibly batched) noisy latents given conditioning."""
    cfg = state.config
    pos = positional_channels(cfg.height, cfg.width)
    pos_b = np.broadcast_to(pos, z_t.shape[:-1] + (pos.shape[-1],))
    x = Tensor(np.concatenate([z_t, z_bg, pos_b], axis=-1).astype(state.dtype),
               _check=False)
    feat = linear(x, state.in_proj)
    feat = itb_stack_forward(feat, codes, routings, state.blocks,
                             h=cfg.height, w=cfg.width, bg_mode=cfg.bg_mode,
                             slots=slots, collect_gates=collect_gates)
    return linear(feat, state.head)


# -- training ----------------------------------------------------------------------

def adam_step(state: ModelState, lr: float | None = None) -> None:
    """Apply one Adam update from the gradients stored on the parameters."""
    cfg = state.config
    lr = cfg.lr if lr is None else lr
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, 1e-8
    state.step += 1
    t = state.step
    for name, p in state.named_tensors().items():
        g = p.grad
        if g is None:
            continue
        m = state.adam_m.setdefault(name, np.zeros_like(p.data))
        v = state.adam_v.setdefault(name, np.zeros_like(p.data))
        m[:] = b1 * m + (1.0 - b1) * g
        v[:] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        p.grad = None


def train_step(state: ModelState, batch: list[TrainSample],
               schedule: NoiseSchedule, seed: int) -> tuple[ModelState, float]:
    """One noise-prediction step on a batch of decomposed scenes.

    Draws a timestep and Gaussian noise per sample, optionally applies the
    rotation augmentation and null-code dropout, runs the stack on the
    noisy target concatenated with the background, and applies one Adam
    update on the mean squared noise error.  Mutates ``state`` in place
    and returns it with the scalar loss.
    """
    if not batch:
        raise ValueError("empty training batch")
    cfg = state.config
    rng = np.random.default_rng(seed)
    hw = cfg.height * cfg.width
    bsz = len(batch)

    x0 = np.stack([s.target.reshape(hw, CHANNELS) for s in batch])
    z_bg = np.stack([s.background.reshape(hw, CHANNELS) for s in batch])
    ts = rng.integers(1, schedule.timesteps + 1, size=bsz)
    eps = rng.standard_normal((bsz, hw, CHANNELS))
    z_t = q_sample(x0, ts, eps, schedule)

    n_objects = len(batch[0].boxes)
    canvases = [np.stack([object_canvas(s, p, cfg.width, cfg.height) for s in batch])
                for p in range(n_objects)]
    if cfg.use_rotation:
        for p in range(n_objects):
            for i, s in enumerate(batch):
                if rng.random() < cfg.rotation_prob:
                    theta = rng.uniform(-np.pi / 6, np.pi / 6)
                    canvases[p][i], _ = rotate_augment(canvases[p][i], s.masks[p], theta)

    codes = [encode_canvases(state, canvases[p], rng) for p in range(n_objects)]
    if cfg.cfg_drop_prob > 0:
        drop = (rng.random(bsz) < cfg.cfg_drop_prob).astype(np.float64)
        codes = [_mix_null(state, c, drop) for c in codes]

    routings = stack_scene_routings([pair_routing(s.boxes, cfg) for s in batch])
    eps_hat = predict_noise(state, z_t, z_bg, codes, routings)
    diff = eps_hat - Tensor(eps.astype(state.dtype), _check=False)
    loss = (diff * diff).mean()
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise RuntimeError(f"non-finite training loss {loss_val} at step {state.step + 1} "
                           f"(seed {seed}, timesteps {ts.tolist()})")
    loss.backward()
    adam_step(state)
    return state, loss_val


def _mix_null(state: ModelState, codes: Tensor, drop: np.ndarray) -> Tensor:
    """Per-sample convex switch between encoded codes and the learned null
    code (tiled to the code's token count); keeps both paths differentiable."""
    bsz, n_tok, _ = codes.shape
    sel = Tensor(drop.reshape(bsz, 1, 1).astype(state.dtype), _check=False)
    ones = Tensor(np.ones((bsz, n_tok, 1), dtype=state.dtype), _check=False)
    null_b = ones * state.null_code
    return codes * (1.0 - sel) + null_b * sel


def train_model(state: ModelState, samples: list[TrainSample], schedule: NoiseSchedule,
                steps: int | None = None, log_every: int = 50) -> list[float]:
    """Deterministic training loop cycling the corpus in order."""
    cfg = state.config
    steps = cfg.train_steps if steps is None else steps
    bsz = cfg.batch_size
    losses = []
    for k in range(steps):
        batch = [samples[(k * bsz + i) % len(samples)] for i in range(bsz)]
        _, loss = train_step(state, batch, schedule, seed=cfg.seed * 1_000_003 + k)
        losses.append(loss)
        if log_every and (k + 1) % log_every == 0:
            log.info("step %d/%d loss %.4f", k + 1, steps, loss)
    return losses


# -- sampling ----------------------------------------------------------------------

def _null_codes_like(state: ModelState, codes: list[Tensor]) -> list[Tensor]:
    out = []
    for c in codes:
        bsz, n_tok, _ = c.shape
        out.append(Tensor(np.broadcast_to(state.null_code.data,
                                          (bsz, n_tok, state.config.d_model)).copy(),
                          _check=False))
    return out


def _doubled_gates(routings: list[RoutingGates]) -> list[RoutingGates]:
    def twice(t: Tensor) -> Tensor:
        if t.data.ndim == 2:  # unbatched (hw, 1) gate
            return Tensor(np.stack([t.data, t.data]), _check=False)
        return Tensor(np.concatenate([t.data, t.data], axis=0), _check=False)

    return [RoutingGates(bg=twice(g.bg), ex=[twice(e) for e in g.ex],
                         overlap=twice(g.overlap), resolution=g.resolution)
            for g in routings]


def ddim_sample_batch(state: ModelState, schedule: NoiseSchedule, z_bg: np.ndarray,
                      codes: list[Tensor], routings: list[RoutingGates],
                      steps: int = 50, cfg_scale: float = 5.0, seed: int = 0,
                      slots: list[int] | None = None,
                      record_gate_steps: tuple = ()) -> tuple[np.ndarray, dict]:
    """Deterministic DDIM over a batch of scenes; returns flat images.

    ``z_bg`` is (B, hw, C).  Pixels where the full-resolution background
    gate is 1 are known: they track the forward-diffused background during
    sampling and are restored exactly afterwards.  When ``cfg_scale`` is
    exactly 1 (or 0) only the conditional (unconditional) branch runs, so
    those settings are bit-exact, not just algebraically equal.
    """
    bsz, hw, _ = z_bg.shape
    rng = np.random.default_rng(seed)
    ts = ddim_timesteps(schedule.timesteps, steps)
    x = rng.standard_normal((bsz, hw, CHANNELS))

    gen = (1.0 - routings[0].bg.data > 1e-9).astype(np.float64)  # (B, hw, 1)
    use_cfg = cfg_scale not in (0.0, 1.0)
    if use_cfg:
        cfg_codes = [
            Tensor(np.concatenate([c.data, n.data], axis=0), _check=False)
            for c, n in zip(codes, _null_codes_like(state, codes))
        ]
        cfg_routings = _doubled_gates(routings)
    elif cfg_scale == 0.0:
        cfg_codes = _null_codes_like(state, codes)
        cfg_routings = routings
    else:
        cfg_codes, cfg_routings = codes, routings

    gate_maps: dict[int, np.ndarray] = {}
    with no_grad():
        for k, t in enumerate(ts):
            known_noise = rng.standard_normal((bsz, hw, CHANNELS))
            x = gen * x + (1.0 - gen) * q_sample(z_bg, int(t), known_noise, schedule)
            collect: list | None = [] if k in record_gate_steps else None
            if use_cfg:
                z2 = np.concatenate([x, x], axis=0)
                bg2 = np.concatenate([z_bg, z_bg], axis=0)
                both = predict_noise(state, z2, bg2, cfg_codes, cfg_routings,
                                     slots=slots, collect_gates=collect).data
                eps_hat = combine_cfg(both[:bsz], both[bsz:], cfg_scale)
            else:
                eps_hat = predict_noise(state, x, z_bg, cfg_codes, cfg_routings,
                                        slots=slots, collect_gates=collect).data
            if collect is not None and collect and collect[-1].delta_s is not None:
                gate_maps[k] = collect[-1].delta_s[:bsz].copy()
            abar_next = schedule.alpha_bars[ts[k + 1]] if k + 1 < steps else 1.0
            x = ddim_step(x, eps_hat.astype(np.float64),
                          schedule.alpha_bars[t], abar_next, clip_range=(0.0, 1.0))
    composite = gen * x + (1.0 - gen) * z_bg
    return composite, gate_maps


def ddim_sample(state: ModelState, schedule: NoiseSchedule, background: np.ndarray,
                codes: list[Tensor], routings: list[RoutingGates], steps: int = 50,
                cfg_scale: float = 5.0, seed: int = 0,
                slots: list[int] | None = None,
                record_gate_steps: tuple = (0, 24, 49)) -> tuple[np.ndarray, dict]:
    """Single-scene DDIM sampling; returns the composite image (H, W, C)
    and the recorded score-gap maps keyed by sampling-step index."""
    cfg = state.config
    h, w = cfg.height, cfg.width
    z_bg = background.reshape(1, h * w, CHANNELS)
    batched = [Tensor(c.data[None] if c.ndim == 2 else c.data, _check=False) for c in codes]
    img, gates = ddim_sample_batch(state, schedule, z_bg, batched, routings,
                                   steps=steps, cfg_scale=cfg_scale, seed=seed,
                                   slots=slots, record_gate_steps=record_gate_steps)
    return img[0].reshape(h, w, CHANNELS), {k: v[0].reshape(h, w) for k, v in gates.items()}


def sequential_baseline(state: ModelState, schedule: NoiseSchedule,
                        background: np.ndarray, codes: list[Tensor],
                        boxes: list[BBox], order: list[int], steps: int = 50,
                        cfg_scale: float = 5.0, seed: int = 0) -> np.ndarray:
    """Insert objects one per turn, feeding each output as the next
    background.

    Each turn runs the sampler with single-object routing (one exclusive
    region, no overlap expert); the object keeps its own expert slot so a
    turn matches the parallel pass's treatment of that object.  Every turn
    reuses the same seed, making the disjoint-objects case directly
    comparable with the parallel sampler.
    """
    cfg = state.config
    current = background
    for p in order:
        routings = pair_routing([boxes[p]], cfg)
        img, _ = ddim_sample(state, schedule, current, [codes[p]], routings,
                             steps=steps, cfg_scale=cfg_scale, seed=seed,
                             slots=[p], record_gate_steps=())
        current = img
    return current


# -- evaluation ---------------------------------------------------------------------

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio on unit-range images, capped at 99 dB."""
    se = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2
    if mask is not None:
        if not mask.any():
            raise ValueError("PSNR mask selects no pixels")
        se = se[mask.astype(bool)]
    mse = se.mean()
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 7) -> np.ndarray:
    """Per-pixel structural similarity, channels averaged (uniform window)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    c1, c2 = 0.01**2, 0.03**2
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = uniform_filter(x, window)
        mu_y = uniform_filter(y, window)
        var_x = uniform_filter(x * x, window) - mu_x**2
        var_y = uniform_filter(y * y, window) - mu_y**2
        cov = uniform_filter(x * y, window) - mu_x * mu_y
        maps.append(((2 * mu_x * mu_y + c1) * (2 * cov + c2))
                    / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)))
    return np.mean(maps, axis=0)


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    smap = ssim_map(a, b)
    if mask is not None:
        if not mask.any():
            raise ValueError("SSIM mask selects no pixels")
        return float(smap[mask.astype(bool)].mean())
    return float(smap.mean())


def eval_recomposition(state: ModelState, schedule: NoiseSchedule, scenes,
                       pairs=None, steps: int | None = None,
                       cfg_scale: float | None = None, seed: int = 0,
                       eval_batch: int = 8) -> list[dict]:
    """Sample a composite per scene and score it against the ground truth.

    Reports PSNR/SSIM on the full image and restricted to the pair's box
    intersection (the ``m``-prefixed variants).  Returns one record per
    scene.
    """
    from .data import decompose

    cfg = state.config
    steps = cfg.ddim_steps if steps is None else steps
    cfg_scale = cfg.cfg_scale if cfg_scale is None else cfg_scale
    pairs = [(0, 1)] * len(scenes) if pairs is None else pairs
    records: list[dict] = []
    for lo in range(0, len(scenes), eval_batch):
        chunk = list(zip(scenes, pairs))[lo:lo + eval_batch]
        samples = [decompose(scene, pair) for scene, pair in chunk]
        z_bg = np.stack([s.background.reshape(-1, CHANNELS) for s in samples])
        with no_grad():
            codes = [encode_canvases(
                state,
                np.stack([object_canvas(s, p, cfg.width, cfg.height) for s in samples]))
                for p in range(2)]
        routings = stack_scene_routings([pair_routing(s.boxes, cfg) for s in samples])
        images, _ = ddim_sample_batch(state, schedule, z_bg, codes, routings,
                                      steps=steps, cfg_scale=cfg_scale, seed=seed + lo)
        for i, (scene, pair) in enumerate(chunk):
            target = scene.image
            composite = images[i].reshape(cfg.height, cfg.width, CHANNELS)
            sample = samples[i]
            inter = (bbox_to_mask(sample.boxes[0], cfg.width, cfg.height)
                     * bbox_to_mask(sample.boxes[1], cfg.width, cfg.height))
            inter3 = np.repeat(inter[:, :, None].astype(bool), CHANNELS, axis=2)
            records.append({
                "scene": lo + i,
                "psnr": psnr(composite, target),
                "ssim": ssim(composite, target),
                "mpsnr": psnr(composite, target, mask=inter3),
                "mssim": ssim(composite, target, mask=inter.astype(bool)),
            })
    return records

"""Training, sampling, evaluation, ablations and checkpoints."""
from __future__ import annotations

import ast
import configparser
import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .codec import encode_mask_batch
from .data import DatasetIndex, clip_indices, sample_clip, to_unit_range
from .losses import LossWeights
from .metrics import FrameScore, MetricReport, aggregate_report, score_frame
from .networks import ModelConfig, PolypDiffusionNet
from .schedule import NoiseSchedule, make_schedule, make_step_schedule, reverse_step, forward_diffuse

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionConfig:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    K: int = 10
    scale_b: float = 1.0
    eta: float = 0.0
    ensemble: int = 1

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.kind, self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 1e-4
    poly_power: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    delta: int = 4
    patch_size: int = 64
    seed: int = 0
    mdm_on: bool = True
    trm_on: bool = True
    ass_on: bool = True
    box_loss: str = "bce"
    hflip: bool = True
    val_fraction: float = 0.05
    val_every: int = 1
    val_max_frames: int = 48
    max_steps: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")

    def effective_weights(self) -> LossWeights:
        """Loss weights after applying the ablation toggles."""
        w = self.loss
        return replace(
            w,
            cls=w.cls if self.mdm_on else 0.0,
            det=w.det if self.mdm_on else 0.0,
            trm=w.trm if self.trm_on else 0.0,
            adv=w.adv if (self.trm_on and self.ass_on) else 0.0,
        )

    @property
    def d_updates(self) -> bool:
        return self.trm_on and self.ass_on

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["model"] = self.model.to_dict()
        for k in ("channels", "sr_ratios", "disc_channels"):
            d["model"][k] = list(d["model"][k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        d["loss"] = LossWeights(**d.get("loss", {}))
        d["diffusion"] = DiffusionConfig(**d.get("diffusion", {}))
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


ABLATIONS = {
    "#1": dict(mdm_on=False, trm_on=False, ass_on=False),
    "#2": dict(mdm_on=True, trm_on=False, ass_on=False),
    "#3": dict(mdm_on=False, trm_on=True, ass_on=False),
    "#4": dict(mdm_on=False, trm_on=True, ass_on=True),
    "full": dict(mdm_on=True, trm_on=True, ass_on=True),
}

_SECTIONS = {"model": ModelConfig, "loss": LossWeights, "diffusion": DiffusionConfig}


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply ``{"key" | "section.key": value}`` overrides, validating names."""
    top, nested = {}, {s: {} for s in _SECTIONS}
    valid_top = {f.name for f in fields(TrainConfig)}
    for key, value in overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS or name not in {f.name for f in fields(_SECTIONS[section])}:
                raise KeyError(f"unknown config key {key!r}")
            if isinstance(value, list):
                value = tuple(value)
            nested[section][name] = value
        else:
            if key not in valid_top or key in _SECTIONS:
                raise KeyError(f"unknown config key {key!r}")
            top[key] = tuple(value) if isinstance(value, list) else value
    for section, vals in nested.items():
        if vals:
            top[section] = replace(getattr(cfg, section), **vals)
    return replace(cfg, **top)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read an INI-style config: ``[train]`` keys plus ``[model]``, ``[loss]``, ``[diffusion]``."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise FileNotFoundError(path)
    overrides = {}
    for section in parser.sections():
        if section not in ("train", *_SECTIONS):
            raise KeyError(f"unknown config section [{section}] in {path}")
        for key, raw in parser.items(section):
            name = key if section == "train" else f"{section}.{key}"
            overrides[name] = _parse_value(raw)
    return apply_overrides(base or TrainConfig(), overrides)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"PDIFFCKP"
CKPT_VERSION = 1


def _dtype_name(t: torch.Tensor) -> str:
    return str(t.dtype).replace("torch.", "")


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict):
    """Write ``MAGIC | u32 version | u64 header length | JSON header | raw data``.

    The header lists every tensor's dtype, shape and byte range; keys are
    sorted so identical content yields identical bytes.
    """
    entries, blobs, offset = {}, [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous()
        raw = arr.numpy().astype(arr.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        entries[name] = {"dtype": _dtype_name(arr), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": CKPT_VERSION, "meta": meta, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for name, e in header["tensors"].items():
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        tensors[name] = torch.from_numpy(np.frombuffer(buf, dtype=dtype).astype(dtype.newbyteorder("="))
                                         .reshape(e["shape"]).copy())
    return tensors, header["meta"]


@dataclass
class TrainState:
    cfg: TrainConfig
    model: PolypDiffusionNet
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    best_dice: float = -1.0


def _opt_to_flat(prefix: str, opt: torch.optim.Optimizer):
    sd = opt.state_dict()
    tensors = {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"{prefix}/{pid}/{k}"] = torch.as_tensor(v)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, groups


def _opt_from_flat(prefix: str, tensors: dict, groups: list) -> dict:
    state: dict[int, dict] = {}
    for name, t in tensors.items():
        if name.startswith(prefix + "/"):
            _, pid, key = name.split("/")
            state.setdefault(int(pid), {})[key] = t
    return {"state": state, "param_groups": [dict(g, betas=tuple(g["betas"])) if "betas" in g else g for g in groups]}


def save_state(path, state: TrainState):
    tensors = {f"model/{k}": v for k, v in state.model.state_dict().items()}
    tg, groups_g = _opt_to_flat("opt_g", state.opt_g)
    td, groups_d = _opt_to_flat("opt_d", state.opt_d)
    tensors.update(tg)
    tensors.update(td)
    meta = {"config": state.cfg.to_dict(), "step": state.step, "epoch": state.epoch,
            "best_dice": state.best_dice, "opt_g_groups": groups_g, "opt_d_groups": groups_d,
            "init": "trunc_normal(std=0.02) weights, zero biases"}
    save_checkpoint(path, tensors, meta)


def build_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = PolypDiffusionNet(cfg.model)
    opt_kw = dict(lr=cfg.learning_rate, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps, foreach=False)
    opt_g = torch.optim.Adam(model.generator_parameters(), **opt_kw)
    opt_d = torch.optim.Adam(model.discriminator_parameters(), **opt_kw)
    return TrainState(cfg, model, opt_g, opt_d)


def load_state(path) -> TrainState:
    tensors, meta = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    state = build_state(cfg)
    own = state.model.state_dict()
    model_sd = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    missing = set(own) - set(model_sd)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for k, v in model_sd.items():
        if k not in own:
            raise ValueError(f"checkpoint has unknown parameter {k!r}")
        if tuple(v.shape) != tuple(own[k].shape):
            raise ValueError(f"{k}: checkpoint shape {tuple(v.shape)} != model shape {tuple(own[k].shape)}")
    state.model.load_state_dict(model_sd)
    state.opt_g.load_state_dict(_opt_from_flat("opt_g", tensors, meta["opt_g_groups"]))
    state.opt_d.load_state_dict(_opt_from_flat("opt_d", tensors, meta["opt_d_groups"]))
    state.step, state.epoch, state.best_dice = meta["step"], meta["epoch"], meta["best_dice"]
    return state


def params_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def train_items(index: DatasetIndex, exclude_lineages=()) -> list[tuple[str, int]]:
    return [(c.case_id, i) for c in index.by_role("train") if c.lineage not in exclude_lineages
            for i in range(c.n_frames)]


def validation_lineages(index: DatasetIndex, fraction: float, seed: int) -> list[str]:
    """Train-only lineages held out for per-epoch validation."""
    test_lineages = {c.lineage for c in index.by_role("test")}
    pool = sorted({c.lineage for c in index.by_role("train")} - test_lineages)
    n = int(round(fraction * len(pool)))
    if n == 0:
        return []
    rng = np.random.default_rng([seed, 7919])
    return sorted(rng.choice(pool, size=n, replace=False).tolist())


def make_batch(index: DatasetIndex, items, delta: int, size: int | None = None) -> dict[str, torch.Tensor]:
    """Collate ``(case_id, frame)`` items into tensors (targets, prev, masks, labels)."""
    targets, prevs, masks, cls, boxes = [], [], [], [], []
    for case_id, i in items:
        case = index.case(case_id)
        stored = case.frames().shape[1]
        if size is None or size == stored:
            ids = clip_indices(i, delta) + [i]
            x = to_unit_range(case.frames()[ids])
            targets.append(x[-1])
            prevs.append(x[:-1])
            masks.append(case.masks()[i].astype(np.float32))
            cls.append(case.annotations[i]["class_id"])
            boxes.append(case.annotations[i]["box"])
        else:
            clip = sample_clip(index, case_id, i, delta, size)
            targets.append(clip.target)
            prevs.append(clip.prev)
            masks.append(clip.mask.astype(np.float32))
            cls.append(clip.class_id)
            boxes.append(clip.box)
    return {
        "target": torch.from_numpy(np.stack(targets)),
        "prev": torch.from_numpy(np.stack(prevs)),
        "mask": torch.from_numpy(np.stack(masks))[:, None],
        "cls": torch.as_tensor(cls, dtype=torch.long),
        "box": torch.as_tensor(np.asarray(boxes, dtype=np.float32)),
    }


def hflip_batch(batch: dict, flip: torch.Tensor) -> dict:
    """Mirror the selected samples left-right (boxes follow)."""
    if not bool(flip.any()):
        return batch
    out = dict(batch)
    sel = flip.nonzero()[:, 0]
    for k in ("target", "prev", "mask"):
        v = batch[k].clone()
        v[sel] = v[sel].flip(-1)
        out[k] = v
    box = batch["box"].clone()
    box[sel, 0] = 1.0 - box[sel, 0]
    out["box"] = box
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def lr_at(step: int, total_steps: int, lr0: float = 1e-4, power: float = 0.9) -> float:
    """Polynomial decay ``lr0 * (1 - step / total) ** power``."""
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power


def _check_finite(components: dict):
    vals = {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in components.items()}
    bad = [k for k, v in vals.items() if not math.isfinite(v)]
    if bad:
        dump = ", ".join(f"{k}={v:.6g}" for k, v in vals.items())
        raise FloatingPointError(f"non-finite loss component(s) {sorted(bad)}; all components: {dump}")


def compute_losses(model: PolypDiffusionNet, cfg: TrainConfig, batch: dict, schedule: NoiseSchedule,
                   t: torch.Tensor, eps: torch.Tensor):
    """Total generator-side loss for given timesteps and noise.

    Returns ``(L_total, components, frame_hat)``; ``frame_hat`` is None when
    the temporal branch is off.
    """
    w = cfg.effective_weights()
    mask = batch["mask"]
    z0 = encode_mask_batch(mask, cfg.diffusion.scale_b).to(batch["target"].dtype)
    z_t = forward_diffuse(z0, t, eps.to(z0.dtype), schedule)
    spatial = model.image_encode(batch["target"])
    temporal = model.temporal_encode(batch["prev"]) if cfg.trm_on else model.zero_temporal(batch["target"])
    prior = model.fuse_prior(spatial, temporal)
    z0_hat, pred = model.denoise(z_t, prior, t)
    prob = torch.sigmoid(pred.mask_logits)
    l_seg, seg_parts = L.seg_loss(prob, z0_hat, z0, mask, return_parts=True)
    l_mdm, mdm_parts = L.mdm_loss(l_seg, pred.cls_logits, batch["cls"], pred.box, batch["box"], w,
                                  box_kind=cfg.box_loss, return_parts=True)
    zero = torch.zeros((), dtype=l_seg.dtype)
    frame_hat = None
    if cfg.trm_on:
        frame_hat = model.reconstruct(temporal)
        d_fake = model.discriminate(frame_hat) if w.adv > 0 else None
        l_trm, g_parts = L.gen_loss(frame_hat, batch["target"], d_fake, w.adv, return_parts=True)
    else:
        l_trm, g_parts = zero, {"mse": zero, "adv": zero}
    l_total = L.total_loss(l_mdm, l_trm, w)
    components = {
        "L_seg": l_seg, "L_seg_ce": seg_parts["ce"], "L_seg_mse": seg_parts["mse"],
        "L_seg_iou": seg_parts["iou"], "L_cls": mdm_parts["cls"], "L_det": mdm_parts["det"],
        "L_MDM": l_mdm, "L_G_mse": g_parts["mse"], "L_G_adv": g_parts["adv"], "L_TRM": l_trm,
        "L_total": l_total,
    }
    return l_total, components, frame_hat


def generator_update(state: TrainState, batch: dict, schedule: NoiseSchedule, gen: torch.Generator):
    """Update every non-discriminator parameter on the total loss, with D frozen.

    Returns the log record and the detached reconstruction (None when the
    temporal branch is off).
    """
    model = state.model
    b = batch["target"].shape[0]
    t = torch.randint(0, schedule.T, (b,), generator=gen)
    lat = (b, model.cfg.latent_channels, batch["mask"].shape[-2] // 4, batch["mask"].shape[-1] // 4)
    eps = torch.randn(lat, generator=gen, dtype=batch["target"].dtype)
    d_params = model.discriminator_parameters()
    for p in d_params:
        p.requires_grad_(False)
    try:
        l_total, record, frame_hat = compute_losses(model, state.cfg, batch, schedule, t, eps)
        _check_finite(record)
        state.opt_g.zero_grad(set_to_none=True)
        l_total.backward()
        state.opt_g.step()
    finally:
        for p in d_params:
            p.requires_grad_(True)
    record = {k: float(v.detach()) for k, v in record.items()}
    return record, (frame_hat.detach() if frame_hat is not None else None)


def discriminator_update(state: TrainState, batch: dict, frame_hat: torch.Tensor) -> float:
    """Update D on real frames vs detached reconstructions (G untouched)."""
    model = state.model
    g_params = model.generator_parameters()
    for p in g_params:
        p.requires_grad_(False)
    try:
        d_fake = model.discriminate(frame_hat.detach())
        d_real = model.discriminate(batch["target"])
        l_d = L.disc_loss(d_fake, d_real)
        _check_finite({"L_D": l_d})
        state.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        state.opt_d.step()
    finally:
        for p in g_params:
            p.requires_grad_(True)
    return float(l_d.detach())


def train_step(state: TrainState, batch: dict, schedule: NoiseSchedule, gen: torch.Generator,
               total_steps: int) -> dict:
    cfg = state.cfg
    lr = lr_at(min(state.step, total_steps), total_steps, cfg.learning_rate, cfg.poly_power)
    for opt in (state.opt_g, state.opt_d):
        for g in opt.param_groups:
            g["lr"] = lr
    record, frame_hat = generator_update(state, batch, schedule, gen)
    record["L_D"] = 0.0
    if cfg.d_updates and frame_hat is not None:
        record["L_D"] = discriminator_update(state, batch, frame_hat)
    state.step += 1
    return {"step": state.step, "epoch": state.epoch, "lr": lr, **record}


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    val_history: list[dict]


def train(cfg: TrainConfig, index: DatasetIndex, out_dir=None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Full training run; writes ``last.ckpt``, ``best.ckpt`` and ``train_log.jsonl`` to ``out_dir``."""
    torch.use_deterministic_algorithms(True)
    state = build_state(cfg)
    schedule = cfg.diffusion.schedule()
    val_lineages = validation_lineages(index, cfg.val_fraction, cfg.seed) if cfg.val_every else []
    items = train_items(index, exclude_lineages=set(val_lineages))
    if not items and cfg.epochs:
        raise ValueError("no training frames")
    steps_per_epoch = math.ceil(len(items) / cfg.batch_size) if items else 0
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    records, val_history = [], []
    try:
        for epoch in range(cfg.epochs):
            if state.step >= total:
                break
            state.epoch = epoch
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(items))
            state.model.train()
            for s in range(steps_per_epoch):
                if state.step >= total:
                    break
                chunk = [items[k] for k in order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
                batch = make_batch(index, chunk, cfg.delta, cfg.patch_size)
                if cfg.hflip:
                    batch = hflip_batch(batch, torch.rand(len(chunk), generator=gen) < 0.5)
                rec = train_step(state, batch, schedule, gen, total)
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if on_step:
                    on_step(rec)
            if val_lineages and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
                vd = validate(state, index, val_lineages)
                val_history.append({"epoch": epoch, "dice": vd})
                log.info("epoch %d validation dice %.4f", epoch, vd)
                if vd > state.best_dice:
                    state.best_dice = vd
                    if out is not None:
                        save_state(out / "best.ckpt", state)
        state.epoch = cfg.epochs
    finally:
        if log_fh:
            log_fh.close()
    if out is not None:
        save_state(out / "last.ckpt", state)
        if not (out / "best.ckpt").exists():
            save_state(out / "best.ckpt", state)
    return TrainResult(state, records, val_history)


def validate(state: TrainState, index: DatasetIndex, lineages) -> float:
    cfg = state.cfg
    items = [(c.case_id, i) for c in index.by_role("train") if c.lineage in set(lineages)
             for i in range(c.n_frames)]
    items = items[: cfg.val_max_frames]
    scores = []
    for s in range(0, len(items), 32):
        chunk = items[s:s + 32]
        batch = make_batch(index, chunk, cfg.delta, cfg.patch_size)
        probs = predict_batch(state.model, cfg, batch, chunk, seed=cfg.seed)
        for p, m in zip(probs, batch["mask"][:, 0].numpy()):
            scores.append(float(((p >= 0.5) & (m > 0)).sum() * 2 / max(1, (p >= 0.5).sum() + m.sum())))
    return float(np.mean(scores)) if scores else 0.0


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def frame_seed(seed: int, case_id: str, i: int, k: int = 0) -> int:
    return (seed * 1_000_003 + zlib.crc32(f"{case_id}:{i}:{k}".encode())) % (2 ** 63)


@torch.no_grad()
def sample_chain(model: PolypDiffusionNet, target, prev, schedule: NoiseSchedule, K: int, z_T,
                 trm_on: bool = True, head=None, scale_b: float = 1.0, eta: float = 0.0,
                 gen: torch.Generator | None = None):
    """Run the reverse chain from ``z_T``; return (mask probabilities, final latent).

    ``head(z_t, prior, t) -> (z0_hat, prediction)`` defaults to the model's
    denoising head; tests inject an oracle here.
    """
    if head is None:
        spatial = model.image_encode(target)
        temporal = model.temporal_encode(prev) if trm_on else model.zero_temporal(target)
        prior = model.fuse_prior(spatial, temporal)
        head = model.denoise
    else:
        prior = None
    steps = make_step_schedule(schedule.T, K)
    z = z_T
    pred = None
    for k, t in enumerate(steps):
        t_vec = torch.full((z.shape[0],), int(t), dtype=torch.long)
        z0_hat, pred = head(z, prior, t_vec)
        z0_hat = z0_hat.clamp(-scale_b, scale_b)
        t_prev = int(steps[k + 1]) if k + 1 < len(steps) else -1
        noise = None
        if eta > 0 and t_prev >= 0:
            noise = torch.randn(z.shape, generator=gen, dtype=z.dtype)
        z = reverse_step(z, z0_hat, int(t), t_prev, schedule, eta=eta, noise=noise)
    return torch.sigmoid(pred.mask_logits), z


def predict_batch(model: PolypDiffusionNet, cfg: TrainConfig, batch: dict, items, seed: int,
                  K: int | None = None, head=None) -> np.ndarray:
    """Mask probabilities ``(B, H, W)`` for a batch; each frame has its own noise seed."""
    model.eval()
    schedule = cfg.diffusion.schedule()
    K = cfg.diffusion.K if K is None else K
    target = batch["target"]
    b, _, h, w = target.shape
    acc = torch.zeros(b, 1, h, w, dtype=target.dtype)
    n = max(1, cfg.diffusion.ensemble)
    for k in range(n):
        zs = []
        for case_id, i in items:
            g = torch.Generator().manual_seed(frame_seed(seed, case_id, i, k))
            zs.append(torch.randn(1, cfg.model.latent_channels, h // 4, w // 4, generator=g, dtype=target.dtype))
        gen = torch.Generator().manual_seed(frame_seed(seed, "eta", k))
        prob, _ = sample_chain(model, target, batch["prev"], schedule, K, torch.cat(zs), cfg.trm_on, head,
                               cfg.diffusion.scale_b, cfg.diffusion.eta, gen)
        acc += prob
    return (acc / n)[:, 0].numpy().astype(np.float64)


def infer_clip(state: TrainState, clip, K: int | None = None, seed: int = 0, head=None) -> np.ndarray:
    """Probability map ``(H, W)`` for a single :class:`~polypdiff.data.VideoClip`."""
    batch = {"target": torch.from_numpy(clip.target)[None], "prev": torch.from_numpy(clip.prev)[None]}
    return predict_batch(state.model, state.cfg, batch, [(clip.case_id, clip.frame_index)], seed, K, head)[0]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

Predictor = Callable[[dict, list], np.ndarray]


def evaluate(state: TrainState | None, index: DatasetIndex, splits=None, seed: int = 0, K: int | None = None,
             per_case: bool = False, batch_size: int = 32, predictor: Predictor | None = None,
             out_dir=None) -> tuple[MetricReport, list[FrameScore]]:
    """Score every test frame (optionally only ``splits``) and aggregate per split."""
    cases = [c for c in index.by_role("test") if splits is None or c.split in splits]
    if not cases:
        raise ValueError(f"no test frames for splits {splits!r}")
    cfg = state.cfg if state is not None else TrainConfig()
    if predictor is None:
        if state is None:
            raise ValueError("evaluate needs a model state or a predictor")

        def predictor(batch, items):
            return predict_batch(state.model, cfg, batch, items, seed, K)

    scores, split_map = [], {}
    for case in cases:
        split_map[case.case_id] = case.split
        items = [(case.case_id, i) for i in range(case.n_frames)]
        for s in range(0, len(items), batch_size):
            chunk = items[s:s + batch_size]
            batch = make_batch(index, chunk, cfg.delta, cfg.patch_size)
            probs = predictor(batch, chunk)
            for (cid, i), prob, gt in zip(chunk, probs, batch["mask"][:, 0].numpy()):
                scores.append(score_frame(prob, gt > 0.5, frame_id=f"{i:05d}", case_id=cid))
    report = aggregate_report(scores, split_map, per_case=per_case)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv())
        (out / "report.json").write_text(report.to_json() + "\n")
    return report, scores


def pooled(scores: list[FrameScore], index: DatasetIndex, visibility: str) -> dict[str, float]:
    """Frame-pooled means over every test case with the given visibility."""
    keep = {c.case_id for c in index.by_role("test") if c.visibility == visibility}
    sel = [s for s in scores if s.case_id in keep]
    if not sel:
        return {}
    return {m: float(np.mean([getattr(s, m) for s in sel])) for m in ("s_alpha", "e_phi_mn", "f_w_beta", "dice")}


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def run_ablation(cfg: TrainConfig, index: DatasetIndex, out_dir=None, names=None, seed: int | None = None):
    """Train and evaluate each ablation row with matched seeds; returns {name: (report, scores)}."""
    results = {}
    for name in names or ABLATIONS:
        run_cfg = replace(cfg, **ABLATIONS[name])
        sub = Path(out_dir) / name.replace("#", "abl") if out_dir is not None else None
        log.info("ablation %s: %s", name, ABLATIONS[name])
        res = train(run_cfg, index, sub)
        results[name] = evaluate(res.state, index, seed=cfg.seed if seed is None else seed, out_dir=sub)
    return results


def ablation_table(results: dict) -> str:
    """Table with one row per model (MDM/TRM/ASS marks) and Dice etc. per split."""
    splits = None
    lines = []
    for name, (report, _) in results.items():
        if splits is None:
            splits = report.splits
            head = ["model", "MDM", "TRM", "ASS"] + [f"{s}:{m}" for s in splits
                                                     for m in ("S_alpha", "E_phi_mn", "F_w_beta", "Dice")]
            lines.append(",".join(head))
        tog = ABLATIONS[name]
        row = [name] + ["x" if tog[k] else "" for k in ("mdm_on", "trm_on", "ass_on")]
        for s in splits:
            r = report[s]
            row += [f"{r.s_alpha:.3f}", f"{r.e_phi_mn:.3f}", f"{r.f_w_beta:.3f}", f"{r.dice:.3f}"]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"

"""Training and evaluation loops, run configuration, and ablation grids."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import (
    CLASS_NAMES,
    CLUTTER,
    SplitArrays,
    augment,
    load_split,
    normalize_rgb,
    prepare_labels,
    standardize_dsm,
)
from .errors import ConfigError, DataError, NumericError, VersioningError
from .metrics import ConfusionMatrix, accumulate, append_jsonl, metrics_record
from .model import AMMNet, ModelConfig, final_loss, load_checkpoint, save_checkpoint, supervised_loss
from .nn import AdamW, ParamStore, cosine_factor, init_params

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 5e-4
# fields that do not change what a run computes
_UNHASHED = {"out_dir", "resume", "stop_after", "eval_every", "save_predictions"}


@dataclass
class RunConfig(ModelConfig):
    da_alpha: float | None = None
    epochs: int = 30
    batch: int = 4
    lr: float = 5e-3
    weight_decay: float = 0.01
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"
    precision: str = "f32"
    augment: bool = True
    eval_every: int = 1
    resume: bool = False
    stop_after: int = 0
    save_predictions: bool = False

    def validate(self) -> "RunConfig":
        if not self.da_enabled and self.da_alpha is not None and self.da_alpha > 0:
            raise ConfigError(f"da_alpha={self.da_alpha} conflicts with da_enabled=false")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        self.model_config().validate()
        return self

    @property
    def alpha(self) -> float:
        if self.da_alpha is not None:
            return self.da_alpha
        return DEFAULT_ALPHA if self.da_enabled else 0.0

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        kw = {n: getattr(self, n) for n in names}
        kw["da_alpha"] = self.alpha
        return ModelConfig(**kw)

    # -- serialization ---------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def config_hash(self) -> str:
        text = "".join(
            f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in sorted(fields(self), key=lambda f: f.name)
            if f.name not in _UNHASHED
        )
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(known[key], raw)
        return cls(**kw)


PROFILES = {
    "desk": {},
    "paper": {"crop": 256, "epochs": 100, "batch": 8, "lr": 2e-4},
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    return str(v)


def _coerce(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    typ = str(f.type)
    try:
        if "bool" in typ:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "float" in typ:
            return None if text.lower() == "none" else float(text)
        if "int" in typ:
            return int(text)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {f.name} ({typ})") from None
    return text


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------
def make_batch(split: SplitArrays, idx, rng: np.random.Generator | None, dtype, ignore_clutter: bool = True):
    rgb, dsm, lab = [], [], []
    for i in idx:
        scene = split.scene(int(i))
        if rng is not None:
            scene = augment(scene, rng)
        rgb.append(scene.rgb.data)
        dsm.append(scene.dsm.data)
        lab.append(scene.labels.data[0])
    labels = np.stack(lab)
    labels = prepare_labels(labels) if ignore_clutter else labels.astype(np.int64)
    return normalize_rgb(np.stack(rgb), dtype), standardize_dsm(np.stack(dsm), dtype), labels


def predict(model: AMMNet, split: SplitArrays, batch: int = 8, ignore_classes=(CLUTTER,)) -> np.ndarray:
    dtype = T.get_dtype()
    preds = []
    model.eval()
    with T.no_grad():
        for lo in range(0, len(split), batch):
            rgb, dsm, _ = make_batch(split, range(lo, min(lo + batch, len(split))), None, dtype)
            logits, _ = model(rgb, dsm, training=False)
            scores = logits.data.copy()
            # classes excluded from supervision are never predicted
            scores[:, [c for c in ignore_classes if c < scores.shape[1]]] = -np.inf
            preds.append(scores.argmax(axis=1).astype(np.uint8))
    return np.concatenate(preds) if preds else np.zeros((0,) + split.labels.shape[1:], np.uint8)


def evaluate(model: AMMNet, split: SplitArrays, num_classes: int, batch: int = 8) -> tuple[ConfusionMatrix, np.ndarray]:
    preds = predict(model, split, batch)
    gt = prepare_labels(split.labels)
    cm = accumulate(ConfusionMatrix(num_classes), preds, gt)
    return cm, preds


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: AMMNet
    epoch_losses: list[float]
    history: list[dict]
    config: RunConfig
    best_miou: float | None = None


def _grads(store: ParamStore) -> dict[str, np.ndarray]:
    # parameters unreachable from this step's loss (detached alignment
    # targets, for instance) take a zero gradient
    return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in store.items()}


def _write_checkpoint(path: Path, model: AMMNet, cfg: RunConfig) -> None:
    save_checkpoint(path, model.state_dict())
    Path(str(path) + ".meta").write_text(f"config_hash={cfg.config_hash()}\n")


def _save_state(path: Path, model: AMMNet, opt: AdamW, epoch: int, best: float | None, losses: list[float]) -> None:
    arrays = {f"p:{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"m:{k}": v for k, v in opt.m.items()})
    arrays.update({f"v:{k}": v for k, v in opt.v.items()})
    arrays["meta"] = np.array([epoch, opt.step_count, -1.0 if best is None else best], dtype=np.float64)
    arrays["losses"] = np.asarray(losses, dtype=np.float64)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def _load_state(path: Path, model: AMMNet, opt: AdamW):
    with np.load(path) as z:
        model.load_state_dict({k[2:]: z[k] for k in z.files if k.startswith("p:")})
        opt.load_state({"step": int(z["meta"][1]), "m": {k[2:]: z[k] for k in z.files if k.startswith("m:")},
                        "v": {k[2:]: z[k] for k in z.files if k.startswith("v:")}})
        epoch = int(z["meta"][0])
        best = float(z["meta"][2])
        losses = list(z["losses"])
    return epoch, (None if best < 0 else best), losses


def build_model(cfg: RunConfig) -> tuple[AMMNet, ParamStore]:
    model = AMMNet(cfg.model_config())
    store = ParamStore.from_module(model)
    init_params(store, cfg.seed)
    return model, store


def train(cfg: RunConfig, train_split: SplitArrays | None = None, val_split: SplitArrays | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train one model; writes checkpoints and JSON-lines metrics under ``cfg.out_dir``."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    if train_split is None:
        train_split = load_split(cfg.data_dir, "train")
    if val_split is None and cfg.eval_every > 0:
        val_split = load_split(cfg.data_dir, "val")
    if len(train_split) == 0:
        raise DataError(f"no training scenes under {cfg.data_dir}")
    if train_split.labels.shape[-1] != cfg.crop:
        raise DataError(f"scenes are {train_split.labels.shape[-1]} px but crop is {cfg.crop}")

    with T.precision(cfg.precision):
        dtype = T.get_dtype()
        model, store = build_model(cfg)
        opt = AdamW(store, lr=cfg.lr, weight_decay=cfg.weight_decay)
        state_path = out / "state.npz"
        start, best, losses = 0, None, []
        if cfg.resume:
            if not state_path.exists():
                raise DataError(f"cannot resume: {state_path} does not exist")
            prev = out / "run.cfg"
            if prev.exists() and RunConfig.from_mapping(load_config_file(prev)).config_hash() != chash:
                raise VersioningError(f"resume config differs from the one recorded in {prev}")
            start, best, losses = _load_state(state_path, model, opt)
        (out / "run.cfg").write_text(cfg.to_text(), encoding="utf-8")
        history = []
        n = len(train_split)
        stop = cfg.epochs if cfg.stop_after <= 0 else min(cfg.epochs, start + cfg.stop_after)
        for epoch in range(start, stop):
            t0 = time.time()
            model.train()
            lr_scale = cosine_factor(epoch, cfg.epochs)
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(n)
            tot, tot_sup, tot_align, steps = 0.0, 0.0, 0.0, 0
            for lo in range(0, n, cfg.batch):
                idx = order[lo : lo + cfg.batch]
                rgb, dsm, labels = make_batch(train_split, idx, rng if cfg.augment else None, dtype)
                logits, align = model(rgb, dsm, training=True, noise_seed=[cfg.seed, epoch, lo])
                sup = supervised_loss(logits, labels)
                loss = final_loss(sup, align, cfg.alpha)
                model.zero_grad()
                loss.backward()
                opt.step(_grads(store), lr_scale)
                tot += float(loss.data)
                tot_sup += float(sup.data)
                tot_align += 0.0 if align is None else float(align.data)
                steps += 1
            if not np.isfinite(tot):
                raise NumericError(f"training loss diverged at epoch {epoch}")
            losses.append(tot / steps)
            rec = {"epoch": epoch, "split": "train", "loss": tot / steps, "sup_loss": tot_sup / steps,
                   "align_loss": tot_align / steps, "lr": cfg.lr * lr_scale, "seed": cfg.seed,
                   "config_hash": chash, "seconds": round(time.time() - t0, 3)}
            append_jsonl(out / "metrics.jsonl", rec)
            history.append(rec)
            if progress:
                progress(rec)
            last = epoch == cfg.epochs - 1
            if val_split is not None and len(val_split) and cfg.eval_every > 0 and ((epoch + 1) % cfg.eval_every == 0 or last):
                cm, _ = evaluate(model, val_split, cfg.num_classes)
                vrec = metrics_record(cm, epoch=epoch, split="val", seed=cfg.seed, config_hash=chash)
                append_jsonl(out / "metrics.jsonl", vrec)
                history.append(vrec)
                if progress:
                    progress(vrec)
                if best is None or vrec["miou"] > best:
                    best = vrec["miou"]
                    _write_checkpoint(out / "best.ammn", model, cfg)
            _save_state(state_path, model, opt, epoch + 1, best, losses)
        if stop == cfg.epochs:
            _write_checkpoint(out / "final.ammn", model, cfg)
    return TrainResult(model, losses, history, cfg, best)


# ---------------------------------------------------------------------------
# evaluation from disk
# ---------------------------------------------------------------------------
PALETTE = {
    0: (255, 255, 255),
    1: (0, 0, 255),
    2: (0, 255, 255),
    3: (0, 255, 0),
    4: (255, 255, 0),
    5: (255, 0, 0),
}


def colorize(labels: np.ndarray) -> np.ndarray:
    lut = np.zeros((256, 3), dtype=np.uint8)
    for k, rgb in PALETTE.items():
        lut[k] = rgb
    return lut[labels]


def load_model_from_checkpoint(ckpt, cfg: RunConfig | None = None) -> tuple[AMMNet, RunConfig]:
    ckpt = Path(ckpt)
    if cfg is None:
        cfg_path = ckpt.parent / "run.cfg"
        if not cfg_path.exists():
            raise VersioningError(f"no run.cfg next to checkpoint {ckpt}")
        cfg = RunConfig.from_mapping(load_config_file(cfg_path))
    meta = Path(str(ckpt) + ".meta")
    if meta.exists():
        recorded = parse_config_text(meta.read_text()).get("config_hash")
        if recorded != cfg.config_hash():
            raise VersioningError(f"checkpoint was written for config {recorded}, current config is {cfg.config_hash()}")
    model = AMMNet(cfg.model_config())
    state = load_checkpoint(ckpt)
    try:
        model.load_state_dict(state)
    except Exception as exc:
        raise VersioningError(f"checkpoint does not match the configured architecture: {exc}") from None
    return model, cfg


def eval_checkpoint(ckpt, split: str, data_dir=None, out_dir=None, cfg: RunConfig | None = None,
                    save_predictions: bool = False) -> dict:
    model, cfg = load_model_from_checkpoint(ckpt, cfg)
    data_dir = data_dir or cfg.data_dir
    arrays = load_split(data_dir, split)
    cm, preds = evaluate(model, arrays, cfg.num_classes)
    rec = metrics_record(cm, epoch=cfg.epochs - 1, split=split, seed=cfg.seed, config_hash=cfg.config_hash(),
                         checkpoint=Path(ckpt).name)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        append_jsonl(out / "eval.jsonl", rec)
        (out / "legend.json").write_text(json.dumps(
            {name: PALETTE[k] for k, name in enumerate(CLASS_NAMES)},
            indent=2))
        if save_predictions:
            from PIL import Image

            from .data import Raster, write_raster

            pdir = out / f"pred_{split}"
            pdir.mkdir(exist_ok=True)
            for sid, p in zip(arrays.ids, preds):
                write_raster(pdir / f"{sid}.pred.amrd", Raster(p[None]))
                Image.fromarray(colorize(p)).save(pdir / f"{sid}.png")
    return rec


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------
TIER_NAMES = ("tiny", "small", "base")
ALPHA_GRID = (1e-3, 75e-5, 5e-4, 25e-5, 1e-4)


def components_grid(base: RunConfig) -> list[tuple[str, RunConfig]]:
    """Eight toggles of (APF, DA, ADE) in the order of the component table."""
    toggles = [
        (False, False, False),
        (True, False, False),
        (False, True, False),
        (False, False, True),
        (False, True, True),
        (True, False, True),
        (True, True, False),
        (True, True, True),
    ]
    rows = []
    for apf, da, ade in toggles:
        cfg = replace(
            base,
            modality="multi",
            fusion="apf" if apf else "concat",
            da_enabled=da,
            da_alpha=(base.da_alpha if da else None),
            dsm_tier=base.dsm_tier if ade else base.rgb_tier,
        )
        label = f"APF={'on' if apf else 'off'} DA={'on' if da else 'off'} ADE={'on' if ade else 'off'}"
        rows.append((label, cfg))
    return rows


def tiers_grid(base: RunConfig) -> list[tuple[str, RunConfig]]:
    return [(f"RGB={r} DSM={d}", replace(base, modality="multi", rgb_tier=r, dsm_tier=d))
            for r in TIER_NAMES for d in TIER_NAMES]


def alpha_grid(base: RunConfig) -> list[tuple[str, RunConfig]]:
    return [(f"alpha={a:g}", replace(base, modality="multi", da_enabled=True, da_alpha=a)) for a in ALPHA_GRID]


GRIDS = {"components": components_grid, "tiers": tiers_grid, "alpha": alpha_grid}


def study_grid(study: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    try:
        return GRIDS[study](base)
    except KeyError:
        raise ConfigError(f"unknown ablation study {study!r}; expected one of {sorted(GRIDS)}") from None


def run_config_on_test(cfg: RunConfig, splits: dict | None = None) -> dict:
    """Train ``cfg`` and return the test-split metrics record."""
    splits = splits or {}
    result = train(cfg, splits.get("train"), splits.get("val"))
    test = splits.get("test") or load_split(cfg.data_dir, "test")
    cm, _ = evaluate(result.model, test, cfg.num_classes)
    return metrics_record(cm, epoch=cfg.epochs - 1, split="test", seed=cfg.seed, config_hash=cfg.config_hash())


def _run_job(args):
    cfg, = args
    return run_config_on_test(cfg)


def run_study(study: str, base: RunConfig, seeds, out_root, jobs: int = 1) -> list[dict]:
    """Run every grid row for every seed; rows come back ranked by mean test mIoU."""
    grid = study_grid(study, base)
    out_root = Path(out_root)
    work = []
    for r, (label, cfg) in enumerate(grid):
        for s in seeds:
            work.append((r, label, replace(cfg, seed=s, out_dir=str(out_root / study / f"row{r}_seed{s}"))))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            records = list(pool.map(_run_job, [(w[2],) for w in work]))
    else:
        records = [run_config_on_test(w[2]) for w in work]
    rows = []
    for r, (label, cfg) in enumerate(grid):
        recs = [rec for (rr, _, _), rec in zip(work, records) if rr == r]
        rows.append({
            "row": r,
            "label": label,
            "seeds": list(seeds),
            "moa": float(np.mean([x["moa"] for x in recs])),
            "mf1": float(np.mean([x["mf1"] for x in recs])),
            "miou": float(np.mean([x["miou"] for x in recs])),
            "per_seed": recs,
        })
    rows.sort(key=lambda row: -row["miou"])
    return rows


def format_study(rows: list[dict]) -> str:
    lines = [f"{'rank':>4s}  {'configuration':34s} {'mOA':>7s} {'mF1':>7s} {'mIoU':>7s}  seeds"]
    for i, row in enumerate(rows, 1):
        lines.append(f"{i:4d}  {row['label']:34s} {100 * row['moa']:7.2f} {100 * row['mf1']:7.2f} "
                     f"{100 * row['miou']:7.2f}  {','.join(map(str, row['seeds']))}")
    return "\n".join(lines)

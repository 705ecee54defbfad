"""Two-path multi-resolution segmentation network: build, train, predict.

The local path is a U-shaped encoder-decoder on the full-resolution volume;
the global path is the same design applied to the 2x block-averaged volume,
so identical kernels cover twice the physical extent.  The global logits are
upsampled back and the two 4-channel logit maps are fused by a 1x1x1
convolution (or plain averaging).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_engine as te
from ._grid_ops import downsample2
from .errors import BadConfig, EmptyDataset, NonFiniteLoss, ShapeMismatch
from .preprocess import plan_crop_pad
from .volume_io import MultimodalCase, VoxelGrid

log = logging.getLogger(__name__)

CLASS_COUNT = 4
CLASS_TO_LABEL = np.array([0, 1, 2, 4], dtype=np.uint8)
LABEL_TO_CLASS = {0: 0, 1: 1, 2: 2, 4: 3}
# head bias starts at log class frequencies so early softmax is background-heavy
HEAD_PRIOR = (0.97, 0.01, 0.01, 0.01)


@dataclass(frozen=True)
class PathConfig:
    levels: int = 3
    base_channels: int = 8
    input_resolution: str = "original"

    def validate(self):
        if self.levels < 2:
            raise BadConfig(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 4:
            raise BadConfig(f"base_channels must be >= 4, got {self.base_channels}")
        if self.input_resolution not in ("original", "half"):
            raise BadConfig(f"input_resolution must be 'original' or 'half', got {self.input_resolution!r}")

    def channels(self) -> list[int]:
        return [self.base_channels * 2**lvl for lvl in range(self.levels)]


def _conv_params(rng, cin, cout, k, dtype, std=None):
    std = math.sqrt(2.0 / (cin * k**3)) if std is None else std
    w = (rng.standard_normal((cout, cin, k, k, k)) * std).astype(dtype)
    b = np.zeros(cout, dtype=dtype)
    return te.Parameter(w), te.Parameter(b)


class UNetPath:
    """Encoder-decoder with (conv3 -> instance norm -> relu) x2 per level."""

    def __init__(self, cfg: PathConfig, in_channels: int, rng, dtype, prefix: str):
        cfg.validate()
        self.cfg = cfg
        self.prefix = prefix
        self.params: dict[str, te.Parameter] = {}
        ch = cfg.channels()
        cin = in_channels
        for lvl, c in enumerate(ch):
            self._block(rng, f"enc{lvl}", cin, c, dtype)
            cin = c
        for lvl in range(cfg.levels - 2, -1, -1):
            self._block(rng, f"dec{lvl}", ch[lvl] + ch[lvl + 1], ch[lvl], dtype)
        w, b = _conv_params(rng, ch[0], CLASS_COUNT, 1, dtype, std=math.sqrt(1.0 / ch[0]))
        b.data = np.log(np.asarray(HEAD_PRIOR)).astype(dtype)
        self.params["head.w"], self.params["head.b"] = w, b

    def _block(self, rng, name, cin, cout, dtype):
        for j, ci in enumerate((cin, cout)):
            w, b = _conv_params(rng, ci, cout, 3, dtype)
            self.params[f"{name}.conv{j}.w"] = w
            self.params[f"{name}.conv{j}.b"] = b

    def _apply_block(self, x, name):
        for j in range(2):
            x = te.conv3d(x, self.params[f"{name}.conv{j}.w"], self.params[f"{name}.conv{j}.b"])
            x = te.relu(te.instance_norm(x))
        return x

    def forward(self, x: te.Tensor) -> te.Tensor:
        skips = []
        for lvl in range(self.cfg.levels):
            if lvl > 0:
                x = te.max_pool3d(x)
            x = self._apply_block(x, f"enc{lvl}")
            skips.append(x)
        for lvl in range(self.cfg.levels - 2, -1, -1):
            x = te.concat_channels(te.upsample_trilinear(x), skips[lvl])
            x = self._apply_block(x, f"dec{lvl}")
        return te.conv3d(x, self.params["head.w"], self.params["head.b"])


class DualPathModel:
    def __init__(self, local: PathConfig, global_cfg: PathConfig, seed: int = 0,
                 dtype=np.float32, fusion: str = "conv", in_channels: int = 4,
                 volume_dims: tuple | None = None):
        if fusion not in ("conv", "mean"):
            raise BadConfig(f"fusion must be 'conv' or 'mean', got {fusion!r}")
        if in_channels < 1:
            raise BadConfig("in_channels must be positive")
        self.local_cfg, self.global_cfg = local, global_cfg
        self.seed, self.dtype, self.fusion = seed, np.dtype(dtype), fusion
        self.in_channels = in_channels
        self.volume_dims = tuple(volume_dims) if volume_dims else None
        self.class_count = CLASS_COUNT
        self.steps_trained = 0
        rng = np.random.default_rng(seed)
        self.path_local = UNetPath(local, in_channels, rng, self.dtype, "local")
        self.path_global = UNetPath(global_cfg, in_channels, rng, self.dtype, "global")
        # start the fusion head as an average of the two logit maps
        fw = np.zeros((CLASS_COUNT, 2 * CLASS_COUNT, 1, 1, 1), dtype=self.dtype)
        for c in range(CLASS_COUNT):
            fw[c, c] = fw[c, CLASS_COUNT + c] = 0.5
        self.fusion_w = te.Parameter(fw)
        self.fusion_b = te.Parameter(np.zeros(CLASS_COUNT, dtype=self.dtype))

    # -- parameters -------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, te.Parameter]]:
        out = [(f"local.{k}", p) for k, p in self.path_local.params.items()]
        out += [(f"global.{k}", p) for k, p in self.path_global.params.items()]
        if self.fusion == "conv":
            out += [("fusion.w", self.fusion_w), ("fusion.b", self.fusion_b)]
        return out

    def parameters(self) -> list[te.Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    @property
    def divisor(self) -> int:
        """Spatial dims must be multiples of this."""
        return max(2 ** (self.local_cfg.levels - 1), 2 ** self.global_cfg.levels)

    def config_dict(self) -> dict:
        return {
            "local": asdict(self.local_cfg),
            "global": asdict(self.global_cfg),
            "seed": self.seed,
            "dtype": self.dtype.str,
            "fusion": self.fusion,
            "in_channels": self.in_channels,
            "volume_dims": list(self.volume_dims) if self.volume_dims else None,
        }

    # -- forward ----------------------------------------------------------
    def forward(self, x) -> dict[str, te.Tensor]:
        """Return fused, local and (upsampled) global logits, each (N,4,D,H,W)."""
        data = x.data if isinstance(x, te.Tensor) else np.asarray(x)
        if data.ndim != 5 or data.shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected (N,{self.in_channels},D,H,W) input, got {data.shape}")
        bad = [d for d in data.shape[2:] if d % self.divisor]
        if bad:
            raise ShapeMismatch(f"spatial dims {data.shape[2:]} must be multiples of {self.divisor}")
        data = data.astype(self.dtype, copy=False)
        x_full = te.Tensor(data)
        x_half = te.Tensor(downsample2(data))
        local = self.path_local.forward(x_full)
        glob = te.upsample_trilinear(self.path_global.forward(x_half))
        if self.fusion == "conv":
            fused = te.conv3d(te.concat_channels(local, glob), self.fusion_w, self.fusion_b)
        else:
            fused = te.scale(te.add(local, glob), 0.5)
        return {"fused": fused, "local": local, "global": glob}


def build_model(local: PathConfig, global_cfg: PathConfig, **kw) -> DualPathModel:
    local.validate()
    global_cfg.validate()
    model = DualPathModel(local, global_cfg, **kw)
    log.info("built dual-path model with %d parameters", model.parameter_count())
    return model


def closed_form_parameter_count(cfg: PathConfig, in_channels: int = 4) -> int:
    """Parameter count of one path from its configuration alone."""
    def conv(cin, cout, k):
        return cout * cin * k**3 + cout

    ch = [cfg.base_channels * 2**i for i in range(cfg.levels)]
    total = 0
    prev = in_channels
    for c in ch:
        total += conv(prev, c, 3) + conv(c, c, 3)
        prev = c
    for lvl in range(cfg.levels - 1):
        total += conv(ch[lvl] + ch[lvl + 1], ch[lvl], 3) + conv(ch[lvl], ch[lvl], 3)
    return total + conv(ch[0], CLASS_COUNT, 1)


# ---------------------------------------------------------------------------
# data plumbing


def labels_to_classes(labels: np.ndarray) -> np.ndarray:
    lut = np.zeros(256, dtype=np.uint8)
    for lab, cls in LABEL_TO_CLASS.items():
        lut[lab] = cls
    return lut[np.asarray(labels, dtype=np.uint8)]


def one_hot(classes: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(D,H,W) class indices -> (1, 4, D, H, W) one-hot."""
    out = np.zeros((1, CLASS_COUNT) + classes.shape, dtype=dtype)
    for c in range(CLASS_COUNT):
        out[0, c] = classes == c
    return out


def target_dims_for(model: DualPathModel, dims) -> tuple[int, int, int]:
    if model.volume_dims:
        return tuple(model.volume_dims)
    q = model.divisor
    return tuple(int(math.ceil(d / q) * q) for d in dims)


def case_to_input(model: DualPathModel, case: MultimodalCase):
    rec = plan_crop_pad(case.dims, target_dims_for(model, case.dims))
    x = rec.forward(case.stacked(model.dtype))[None]
    return x, rec


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    class_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    volume_dims: tuple = (64, 64, 64)
    checkpoint_every: int = 0  # epochs; 0 disables
    checkpoint_dir: str | None = None
    aux_weight: float = 0.5
    shuffle: bool = True

    def validate(self, model: DualPathModel):
        if self.epochs < 1:
            raise BadConfig("epochs must be >= 1")
        if not self.lr > 0:
            raise BadConfig("lr must be positive")
        if len(self.class_weights) != CLASS_COUNT:
            raise BadConfig(f"need {CLASS_COUNT} class weights")
        bad = [d for d in self.volume_dims if d % model.divisor]
        if bad:
            raise BadConfig(f"volume dims {self.volume_dims} must be multiples of {model.divisor}")


@dataclass
class TrainResult:
    loss_curve: list = field(default_factory=list)
    wt_dice_curve: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    seconds: float = 0.0


def _case_loss(model, outs, target, cfg: TrainConfig):
    w = cfg.class_weights
    loss = te.dice_ce_loss(te.softmax_channels(outs["fused"]), target, w)
    if cfg.aux_weight > 0:
        for key in ("local", "global"):
            aux = te.dice_ce_loss(te.softmax_channels(outs[key]), target, w)
            loss = te.add(loss, te.scale(aux, cfg.aux_weight))
    return loss


def _soft_wt_dice(probs: np.ndarray, target: np.ndarray) -> float:
    p = probs[:, 1:].sum(axis=1)
    t = target[:, 1:].sum(axis=1)
    inter = float((p * t).sum(dtype=np.float64))
    return (2 * inter + 1.0) / (float(p.sum(dtype=np.float64)) + float(t.sum(dtype=np.float64)) + 1.0)


def train(model: DualPathModel, dataset: list[MultimodalCase], cfg: TrainConfig,
          progress=None) -> TrainResult:
    """Optimize all paths jointly with Adam; one whole volume per step."""
    if not dataset:
        raise EmptyDataset("training needs at least one case")
    cfg.validate(model)
    if model.volume_dims is None:
        model.volume_dims = tuple(cfg.volume_dims)
    inputs, targets = [], []
    for case in dataset:
        if case.labels is None:
            raise EmptyDataset(f"case {case.case_id} has no labels")
        x, rec = case_to_input(model, case)
        inputs.append(x)
        targets.append(rec.forward(labels_to_classes(case.labels.values)))

    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(inputs)) if cfg.shuffle else np.arange(len(inputs))
        losses, dices = [], []
        for i in order:
            target = one_hot(targets[i], model.dtype)
            outs = model.forward(inputs[i])
            loss = _case_loss(model, outs, target, cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(
                    f"epoch {epoch}, case {dataset[i].case_id}: loss {value}; "
                    "lower the learning rate or check the input normalization"
                )
            te.backward(loss)
            te.adam_step(params, lr=cfg.lr)
            model.steps_trained += 1
            losses.append(value)
            probs = np.exp(outs["fused"].data - outs["fused"].data.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            dices.append(_soft_wt_dice(probs, target))
        result.loss_curve.append(float(np.mean(losses)))
        result.wt_dice_curve.append(float(np.mean(dices)))
        log.info("epoch %d/%d loss %.4f soft WT dice %.4f", epoch, cfg.epochs,
                 result.loss_curve[-1], result.wt_dice_curve[-1])
        if progress is not None:
            progress(epoch, result)
        if cfg.checkpoint_every and cfg.checkpoint_dir and epoch % cfg.checkpoint_every == 0:
            path = Path(cfg.checkpoint_dir) / f"epoch_{epoch:04d}.ckpt"
            save_model(model, path, extra={"epoch": epoch, "loss_curve": result.loss_curve})
            result.checkpoints.append(str(path))
    result.seconds = time.perf_counter() - t0
    return result


# ---------------------------------------------------------------------------
# inference


def predict_probabilities(model: DualPathModel, case: MultimodalCase) -> tuple[dict, object]:
    x, rec = case_to_input(model, case)
    outs = model.forward(x)
    probs = {}
    for key, t in outs.items():
        z = t.data - t.data.max(axis=1, keepdims=True)
        e = np.exp(z.astype(np.float64))
        probs[key] = e / e.sum(axis=1, keepdims=True)
    return probs, rec


def classes_to_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax over the class axis (ties -> lowest index), mapped to {0,1,2,4}."""
    return CLASS_TO_LABEL[np.argmax(probs, axis=0)]


def predict_labels(model: DualPathModel, case: MultimodalCase, path: str = "fused") -> VoxelGrid:
    probs, rec = predict_probabilities(model, case)
    labels = rec.inverse(classes_to_labels(probs[path][0]))
    return case.flair.with_values(labels.astype(np.uint8))


def predict_all_paths(model: DualPathModel, case: MultimodalCase) -> dict[str, VoxelGrid]:
    probs, rec = predict_probabilities(model, case)
    return {
        key: case.flair.with_values(rec.inverse(classes_to_labels(p[0])).astype(np.uint8))
        for key, p in probs.items()
    }


# ---------------------------------------------------------------------------
# persistence


def _op_list(model: DualPathModel) -> list[str]:
    ops = ["conv3d", "instance_norm", "relu", "max_pool3d", "upsample_trilinear",
           "concat_channels", "softmax_channels", "dice_ce_loss"]
    if model.fusion == "mean":
        ops += ["add", "scale"]
    return ops


def save_model(model: DualPathModel, path, extra: dict | None = None) -> Path:
    manifest = {
        "ops": _op_list(model),
        "seed": model.seed,
        "step_count": model.steps_trained,
        "model": model.config_dict(),
    }
    manifest.update(extra or {})
    return te.save_checkpoint(path, model.named_parameters(), manifest)


def load_model(path) -> DualPathModel:
    manifest, tensors = te.read_checkpoint(path)
    cfg = manifest["model"]
    model = DualPathModel(
        PathConfig(**cfg["local"]),
        PathConfig(**cfg["global"]),
        seed=cfg["seed"],
        dtype=np.dtype(cfg["dtype"]),
        fusion=cfg["fusion"],
        in_channels=cfg["in_channels"],
        volume_dims=cfg.get("volume_dims"),
    )
    for name, p in model.named_parameters():
        if name not in tensors:
            raise BadConfig(f"checkpoint lacks parameter {name}")
        vals, m, v, step = tensors[name]
        if vals.shape != p.data.shape:
            raise BadConfig(f"{name}: checkpoint shape {vals.shape} != model {p.data.shape}")
        p.data = vals.astype(model.dtype)
        if m is not None:
            p.m, p.v, p.step = m, v, step
    model.steps_trained = int(manifest.get("step_count", 0))
    return model

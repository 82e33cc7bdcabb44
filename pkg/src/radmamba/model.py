"""CP-Mamba block and the end-to-end classifier."""

from __future__ import annotations

import enum
import json
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import preprocess as pp
from .preprocess import ChanDsConfig, ConvBnParams, PatchGeometry
from .ssm import DISCRETIZATIONS, SCAN_METHODS, SsmWeights, selective_ssm
from .tensor import Precision, ShapeError, Tensor, TensorError, conv1d, get_default_precision, silu
from .tensor import serialize
from .tensor.functional import layer_norm, linear

__all__ = [
    "ConfigError",
    "ProjectionKind",
    "ModelConfig",
    "BlockWeights",
    "RadMamba",
    "param_shapes",
    "init_weights",
    "seq_conv",
    "block_forward",
    "model_forward",
    "corr_avg",
    "corr_pair",
    "CAPTURE_POINTS",
    "save_checkpoint",
    "load_checkpoint",
]

CAPTURE_POINTS = ("p1.in", "p1.out", "p2.in", "p2.out", "p3.in", "p3.out")
CHECKPOINT_FORMAT = "radmamba-checkpoint/1"


class ConfigError(ValueError):
    """Invalid model configuration; ``problems`` lists every violation found."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid model config:\n  - " + "\n  - ".join(self.problems))


class ProjectionKind(str, enum.Enum):
    LINEAR1 = "linear1"
    LINEAR3 = "linear3"
    CONV1D_K3 = "conv1d_k3"

    @classmethod
    def parse(cls, v) -> "ProjectionKind":
        if isinstance(v, cls):
            return v
        key = str(v).lower().replace("-", "_")
        aliases = {"linear": "linear1", "conv1dk3": "conv1d_k3", "conv": "conv1d_k3", "conv1d": "conv1d_k3"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown projection kind {v!r}; expected one of {[k.value for k in cls]}") from None


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (1, 224, 224)
    chan_ds: ChanDsConfig = field(default_factory=lambda: ChanDsConfig(factors=(2, 32)))
    geometry: PatchGeometry = field(default_factory=PatchGeometry.doppler_aligned)
    dim: int = 16
    d_state: int = 16
    dt_rank: int = 4
    projection: ProjectionKind = ProjectionKind.CONV1D_K3
    depth: int = 1
    n_classes: int = 6
    discretization: str = "zoh"
    scan: str = "parallel"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "projection", ProjectionKind.parse(self.projection))

    def problems(self) -> list[str]:
        out: list[str] = []
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            out.append(f"input_shape must be three positive extents (C, H, W), got {self.input_shape}")
        out.extend(self.chan_ds.problems())
        for name in ("dim", "d_state", "depth"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.dim % 2:
            out.append(f"dim must be even for the sinusoidal position encoding, got {self.dim}")
        if self.dt_rank < 0:
            out.append(f"dt_rank must be >= 0, got {self.dt_rank}")
        if self.n_classes < 2:
            out.append(f"n_classes must be >= 2, got {self.n_classes}")
        if self.discretization not in DISCRETIZATIONS:
            out.append(f"discretization must be one of {DISCRETIZATIONS}, got {self.discretization!r}")
        if self.scan not in SCAN_METHODS:
            out.append(f"scan must be one of {SCAN_METHODS}, got {self.scan!r}")
        if len(self.input_shape) == 3 and not self.chan_ds.problems():
            _, H, W = self.input_shape
            rh, rw = self.chan_ds.factors
            if H % rh or W % rw:
                out.append(f"chan_ds.factors {self.chan_ds.factors} do not divide input extents {(H, W)}")
            else:
                hs, ws = self.geometry.patch_size(H // rh, W // rw)
                if (H // rh) % hs or (W // rw) % ws:
                    out.append(f"patch size {(hs, ws)} does not divide fused extents {(H // rh, W // rw)}")
        return out

    def validate(self) -> "ModelConfig":
        probs = self.problems()
        if probs:
            raise ConfigError(probs)
        return self

    @property
    def fused_shape(self) -> tuple[int, int, int]:
        return pp.chan_ds_output_shape(self.input_shape, self.chan_ds)

    @property
    def n_patches(self) -> int:
        return self.geometry.n_patches(*self.fused_shape)

    @property
    def patch_dim(self) -> int:
        return self.geometry.patch_dim(*self.fused_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["chan_ds"] = {
            "n_blocks": self.chan_ds.n_blocks,
            "channels": self.chan_ds.channels,
            "kernel": list(self.chan_ds.kernel),
            "factors": list(self.chan_ds.factors),
            "use_avgpool": self.chan_ds.use_avgpool,
        }
        d["geometry"] = self.geometry.to_dict()
        d["projection"] = self.projection.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown model config key {k!r}" for k in unknown])
        if "chan_ds" in d and isinstance(d["chan_ds"], Mapping):
            cd = dict(d["chan_ds"])
            for k in ("kernel", "factors"):
                if k in cd:
                    cd[k] = tuple(cd[k])
            d["chan_ds"] = ChanDsConfig(**cd)
        if "geometry" in d and not isinstance(d["geometry"], PatchGeometry):
            d["geometry"] = PatchGeometry.from_dict(d["geometry"])
        if "input_shape" in d:
            d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# ----------------------------------------------------------------------------
# Parameter layout


def _proj_shapes(prefix: str, kind: ProjectionKind, dim: int, k: int) -> list[tuple[str, tuple, int]]:
    if kind is ProjectionKind.CONV1D_K3:
        return [(f"{prefix}.weight", (dim, dim, k), dim * k), (f"{prefix}.bias", (dim,), 0)]
    if kind is ProjectionKind.LINEAR3 and k == 3:
        out = []
        for i in range(3):
            out += [(f"{prefix}.{i}.weight", (dim, dim), dim), (f"{prefix}.{i}.bias", (dim,), 0)]
        return out
    return [(f"{prefix}.weight", (dim, dim), dim), (f"{prefix}.bias", (dim,), 0)]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple, int]]:
    """``(name, shape, fan_in)`` for every learned tensor in a fixed order.

    ``fan_in`` of 0 marks tensors with a fixed (non-uniform) init.
    """
    cfg.validate()
    C = cfg.input_shape[0]
    cd = cfg.chan_ds
    kh, kw = cd.kernel
    out: list[tuple[str, tuple, int]] = []
    c_in = C
    for i in range(cd.n_blocks):
        p = f"chan_ds.{i}"
        out += [
            (f"{p}.conv.weight", (cd.channels, c_in, kh, kw), c_in * kh * kw),
            (f"{p}.conv.bias", (cd.channels,), 0),
            (f"{p}.bn.weight", (cd.channels,), 0),
            (f"{p}.bn.bias", (cd.channels,), 0),
        ]
        c_in = cd.channels
    d, s, r = cfg.dim, cfg.d_state, cfg.dt_rank
    out += [("embed.weight", (cfg.patch_dim, d), cfg.patch_dim), ("embed.bias", (d,), 0)]
    for j in range(cfg.depth):
        p = f"blocks.{j}"
        out += [(f"{p}.norm.weight", (d,), 0), (f"{p}.norm.bias", (d,), 0)]
        out += _proj_shapes(f"{p}.p1", cfg.projection, d, 3)
        out += _proj_shapes(f"{p}.p2", cfg.projection, d, 3)
        out += _proj_shapes(f"{p}.p3", cfg.projection, d, 1)
        for br in ("fw", "bw"):
            q = f"{p}.{br}"
            out += [
                (f"{q}.conv.weight", (d, d, 1), d),
                (f"{q}.conv.bias", (d,), 0),
                (f"{q}.norm.weight", (d,), 0),
                (f"{q}.norm.bias", (d,), 0),
                (f"{q}.ssm.A_log", (d, s), 0),
                (f"{q}.ssm.D", (d,), 0),
                (f"{q}.ssm.W_B", (d, s), d),
                (f"{q}.ssm.W_C", (d, s), d),
            ]
            if r > 0:
                out += [(f"{q}.ssm.W_dt1", (d, r), d), (f"{q}.ssm.W_dt2", (r, d), r)]
            out += [(f"{q}.ssm.dt_bias", (d,), 0)]
    out += [("head.weight", (d, cfg.n_classes), d), ("head.bias", (cfg.n_classes,), 0)]
    return out


def buffer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    out = []
    for i in range(cfg.chan_ds.n_blocks):
        out += [(f"chan_ds.{i}.bn.running_mean", (cfg.chan_ds.channels,)), (f"chan_ds.{i}.bn.running_var", (cfg.chan_ds.channels,))]
    return out


def _fixed_init(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "A_log":
        return np.log(np.broadcast_to(np.arange(1, shape[1] + 1, dtype=np.float64), shape).copy())
    if leaf == "dt_bias":
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=shape))
        return dt + np.log(-np.expm1(-dt))
    if leaf == "D" or (leaf == "weight" and (".norm." in name or ".bn." in name)):
        return np.ones(shape)
    return np.zeros(shape)


def init_weights(cfg: ModelConfig, seed: int | None = None, precision: Precision | str | None = None) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Deterministic initial parameters and buffers for ``cfg``.

    Affine and convolution weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    biases start at zero and normalisation scales at one.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    prec = Precision(precision) if isinstance(precision, str) else (precision or get_default_precision())
    params: dict[str, Tensor] = {}
    for name, shape, fan_in in param_shapes(cfg):
        if fan_in > 0:
            b = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-b, b, size=shape)
        else:
            data = _fixed_init(name, shape, rng)
        params[name] = Tensor(data, requires_grad=True, precision=prec, name=name)
    buffers = {}
    for name, shape in buffer_shapes(cfg):
        buffers[name] = (np.zeros if name.endswith("mean") else np.ones)(shape, dtype=prec.dtype)
    return params, buffers


# ----------------------------------------------------------------------------
# Building blocks


def seq_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Convolution over the sequence axis of ``x`` (..., N, dim_in).

    ``weight`` is (dim_out, dim_in, k) with odd ``k``; padding keeps N.
    """
    k = weight.shape[2]
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"sequence conv: input width {x.shape[-1]} does not match kernel {weight.shape}")
    if k == 1:
        y = x @ weight.reshape(weight.shape[0], weight.shape[1]).T
        return y if bias is None else y + bias
    squeeze = x.ndim == 2
    xb = x.reshape((1,) + x.shape) if squeeze else x
    y = conv1d(xb.swapaxes(-1, -2), weight, bias, padding=k // 2).swapaxes(-1, -2)
    return y.reshape(y.shape[1:]) if squeeze else y


@dataclass
class Projection:
    kind: ProjectionKind
    layers: list[tuple[Tensor, Tensor]]

    def __call__(self, x: Tensor) -> Tensor:
        for w, b in self.layers:
            x = seq_conv(x, w, b) if w.ndim == 3 else linear(x, w, b)
        return x


@dataclass
class Branch:
    conv_weight: Tensor
    conv_bias: Tensor
    norm_weight: Tensor
    norm_bias: Tensor
    ssm: SsmWeights


@dataclass
class BlockWeights:
    norm_weight: Tensor
    norm_bias: Tensor
    p1: Projection
    p2: Projection
    p3: Projection
    fw: Branch
    bw: Branch

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str, kind: ProjectionKind) -> "BlockWeights":
        def proj(name):
            p = f"{prefix}.{name}"
            if f"{p}.weight" in params:
                return Projection(kind, [(params[f"{p}.weight"], params[f"{p}.bias"])])
            layers = []
            i = 0
            while f"{p}.{i}.weight" in params:
                layers.append((params[f"{p}.{i}.weight"], params[f"{p}.{i}.bias"]))
                i += 1
            if not layers:
                raise KeyError(f"missing projection weights for {p}")
            return Projection(kind, layers)

        def branch(br):
            q = f"{prefix}.{br}"
            ssm = SsmWeights(
                A_log=params[f"{q}.ssm.A_log"],
                D=params[f"{q}.ssm.D"],
                W_B=params[f"{q}.ssm.W_B"],
                W_C=params[f"{q}.ssm.W_C"],
                W_dt1=params.get(f"{q}.ssm.W_dt1"),
                W_dt2=params.get(f"{q}.ssm.W_dt2"),
                dt_bias=params[f"{q}.ssm.dt_bias"],
            )
            return Branch(params[f"{q}.conv.weight"], params[f"{q}.conv.bias"], params[f"{q}.norm.weight"], params[f"{q}.norm.bias"], ssm)

        return cls(
            params[f"{prefix}.norm.weight"],
            params[f"{prefix}.norm.bias"],
            proj("p1"),
            proj("p2"),
            proj("p3"),
            branch("fw"),
            branch("bw"),
        )


def _run_branch(x: Tensor, br: Branch, scan: str, discretization: str) -> Tensor:
    h = seq_conv(x, br.conv_weight, br.conv_bias)
    h = layer_norm(h, br.norm_weight, br.norm_bias)
    return selective_ssm(h, br.ssm, scan, discretization)


def block_forward(
    x_p: Tensor,
    w: BlockWeights,
    scan: str = "parallel",
    discretization: str = "zoh",
    capture: dict | None = None,
    branch_outputs: dict | None = None,
) -> Tensor:
    """One CP-Mamba block on (..., N, dim).

    Both branches read the same P2 output; the backward branch sees it
    reversed in time and its output is reversed back before gating.
    """
    x_proj = layer_norm(x_p, w.norm_weight, w.norm_bias)
    z = w.p1(x_proj)
    x_fw = w.p2(x_proj)
    x_bw = x_fw.flip(-2)
    y_fw = _run_branch(x_fw, w.fw, scan, discretization)
    y_bw = _run_branch(x_bw, w.bw, scan, discretization).flip(-2)
    gate = silu(z)
    yg_fw = y_fw * gate
    yg_bw = y_bw * gate
    y_sum = yg_fw + yg_bw
    out = w.p3(y_sum)
    if capture is not None:
        capture.setdefault("p1.in", []).append(x_proj.data.copy())
        capture.setdefault("p1.out", []).append(z.data.copy())
        capture.setdefault("p2.in", []).append(x_proj.data.copy())
        capture.setdefault("p2.out", []).append(x_fw.data.copy())
        capture.setdefault("p3.in", []).append(y_sum.data.copy())
        capture.setdefault("p3.out", []).append(out.data.copy())
    if branch_outputs is not None:
        branch_outputs["fw"] = yg_fw
        branch_outputs["bw"] = yg_bw
    return out + x_proj


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except TensorError as e:
        raise type(e)(f"[{name}] {e}") from e


def model_forward(
    x: Tensor,
    cfg: ModelConfig,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray] | None = None,
    training: bool = False,
    capture: dict | None = None,
    return_features: bool = False,
) -> Tensor:
    """Logits (B, Q) for a batch (B, C, H, W), or (Q,) for one (C, H, W) sample."""
    if not isinstance(x, Tensor):
        x = Tensor(x, precision=params["head.weight"].precision)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if tuple(x.shape[1:]) != cfg.input_shape:
        raise ShapeError(f"input shape {tuple(x.shape[1:])} does not match configured {cfg.input_shape}")
    buffers = buffers if buffers is not None else {}
    blocks = []
    for i in range(cfg.chan_ds.n_blocks):
        p = f"chan_ds.{i}"
        if f"{p}.bn.running_mean" not in buffers:
            raise KeyError(f"missing batchnorm buffers for {p}")
        blocks.append(
            ConvBnParams(
                params[f"{p}.conv.weight"],
                params[f"{p}.conv.bias"],
                params[f"{p}.bn.weight"],
                params[f"{p}.bn.bias"],
                buffers[f"{p}.bn.running_mean"],
                buffers[f"{p}.bn.running_var"],
            )
        )
    h = _stage("chan_ds", pp.chan_ds, x, cfg.chan_ds, blocks, training)
    h = _stage("segment", pp.segment, h, cfg.geometry)
    h = _stage("patch_embed", pp.patch_embed, h, params["embed.weight"], params["embed.bias"])
    h = _stage("pos_encode", pp.pos_encode, h)
    for j in range(cfg.depth):
        bw = BlockWeights.from_params(params, f"blocks.{j}", cfg.projection)
        h = _stage(f"blocks.{j}", block_forward, h, bw, cfg.scan, cfg.discretization, capture)
    feats = h.mean(axis=-2)
    if return_features:
        return feats.reshape(feats.shape[1:]) if squeeze else feats
    logits = linear(feats, params["head.weight"], params["head.bias"])
    return logits.reshape(logits.shape[1:]) if squeeze else logits


# ----------------------------------------------------------------------------
# Correlation statistic


def corr_pair(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_m sum_m' a[m] * b[m + m']`` with out-of-range terms dropped.

    Reduces over the last axis; equals ``a . revcumsum(b)``.
    """
    tail = np.cumsum(b[..., ::-1], axis=-1)[..., ::-1]
    return np.sum(a * tail, axis=-1)


def corr_avg(x: np.ndarray | Tensor) -> float:
    """Mean over batch and over all ordered patch pairs (n, n') of corr(x[b,n], x[b,n'])."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] == 0 or x.shape[1] == 0:
        raise ValueError(f"corr_avg needs a non-empty (B, N, D) array, got shape {x.shape}")
    mean_a = x.mean(axis=1)
    tail = np.cumsum(x[..., ::-1], axis=-1)[..., ::-1].mean(axis=1)
    return float(np.mean(np.sum(mean_a * tail, axis=-1)))


# ----------------------------------------------------------------------------
# Model object and checkpoints


class RadMamba:
    """Configuration plus parameters and batchnorm buffers."""

    def __init__(self, cfg: ModelConfig, params=None, buffers=None, precision: Precision | str | None = None):
        self.cfg = cfg.validate()
        if params is None:
            params, init_buffers = init_weights(cfg, precision=precision)
            buffers = init_buffers if buffers is None else buffers
        self.params: dict[str, Tensor] = dict(params)
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})
        self.extra: dict = {}
        expected = [n for n, _, _ in param_shapes(cfg)]
        missing = [n for n in expected if n not in self.params]
        if missing:
            raise KeyError(f"missing parameters: {missing}")

    def __call__(self, x, training: bool = False, capture: dict | None = None) -> Tensor:
        return model_forward(x, self.cfg, self.params, self.buffers, training, capture)

    def features(self, x) -> Tensor:
        return model_forward(x, self.cfg, self.params, self.buffers, False, return_features=True)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for n, _, _ in param_shapes(self.cfg):
            yield n, self.params[n]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_params(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: t.data.copy() for n, t in self.named_parameters()}
        out.update({n: b.copy() for n, b in self.buffers.items()})
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            if n not in state:
                raise KeyError(f"state is missing {n}")
            if state[n].shape != t.shape:
                raise ShapeError(f"{n}: stored shape {state[n].shape} != expected {t.shape}")
            t.data = np.array(state[n], dtype=t.dtype)
        for n in self.buffers:
            if n in state:
                self.buffers[n] = np.array(state[n], dtype=self.buffers[n].dtype)

    def copy(self) -> "RadMamba":
        m = RadMamba(self.cfg, {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}, {n: b.copy() for n, b in self.buffers.items()})
        return m

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "RadMamba":
        return load_checkpoint(path)


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(model: RadMamba, path, extra: Mapping | None = None) -> None:
    """Zip archive: ``manifest.json`` plus ``tensors/<name>.rmt`` per tensor.

    Entry timestamps are fixed so identical models give identical bytes.
    """
    manifest = {"format": CHECKPOINT_FORMAT, "config": model.cfg.to_dict(), "parameters": [], "buffers": sorted(model.buffers)}
    if extra:
        manifest["extra"] = dict(extra)
    entries = []
    for n, t in model.named_parameters():
        manifest["parameters"].append(n)
        entries.append((n, t.data))
    for n in sorted(model.buffers):
        entries.append((n, model.buffers[n]))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("manifest.json", _ZIP_DATE)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for n, arr in entries:
            info = zipfile.ZipInfo(f"tensors/{n}.rmt", _ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, serialize.to_bytes(Tensor(arr, precision=Precision.from_dtype(arr.dtype))))


def load_checkpoint(path) -> RadMamba:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as e:
        raise serialize.FormatError(f"cannot open checkpoint {path}: {e}") from e
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise serialize.FormatError(f"{path}: checkpoint has no manifest.json") from None
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise serialize.FormatError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
        cfg = ModelConfig.from_dict(manifest["config"])
        params, buffers = {}, {}
        for n in manifest["parameters"]:
            t = serialize.from_bytes(zf.read(f"tensors/{n}.rmt"))
            params[n] = Tensor(t.data, requires_grad=True, name=n)
        for n in manifest["buffers"]:
            buffers[n] = serialize.from_bytes(zf.read(f"tensors/{n}.rmt")).data.copy()
    model = RadMamba(cfg, params, buffers)
    model.extra = dict(manifest.get("extra", {}))
    return model

"""Point classifier built from sample-and-group stages with skip joins, topped by a
max-pooled global descriptor and a fully connected head."""
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .autograd import (
    Tensor,
    add,
    batch_norm,
    concat_last,
    dropout,
    gather_rows,
    matmul,
    max_over_axis,
    relu,
    reshape,
)

SKIP_MODES = ("concatenation", "addition")
_SKIP_ALIASES = {"concat": "concatenation", "add": "addition"}


class ConfigError(ValueError):
    pass


class InputSizeError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    n_out: int
    radius: float
    group_size: int
    mlp_widths: Tuple[int, ...]
    reduce_width: int

    def __post_init__(self):
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))


def _default_stages():
    return (
        StageConfig(512, 0.2, 32, (64, 64, 128), 128),
        StageConfig(128, 0.4, 64, (128, 128, 256), 256),
    )


@dataclass(frozen=True)
class ModelConfig:
    stages: Tuple[StageConfig, ...] = field(default_factory=_default_stages)
    global_widths: Tuple[int, ...] = (512, 1024)
    fc_widths: Tuple[int, ...] = (512, 256)
    n_classes: int = 40
    skip_mode: str = "concatenation"
    dropout_rate: float = 0.4
    # learned linear lift of the center row so an addition join can match widths
    skip_projection: bool = False
    in_features: int = 0
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "global_widths", tuple(int(w) for w in self.global_widths))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        object.__setattr__(self, "skip_mode", _SKIP_ALIASES.get(self.skip_mode, self.skip_mode))
        self.validate()

    @property
    def global_width(self) -> int:
        return self.global_widths[-1]

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.skip_mode not in SKIP_MODES:
            raise ConfigError(f"unknown skip mode {self.skip_mode!r}")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        if self.class_names and len(self.class_names) != self.n_classes:
            raise ConfigError(f"{len(self.class_names)} class names for {self.n_classes} classes")
        if not self.global_widths:
            raise ConfigError("global_widths must not be empty")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        widths = list(self.global_widths) + list(self.fc_widths)
        prev_n = None
        c_in = self.in_features
        for i, st in enumerate(self.stages):
            widths += list(st.mlp_widths) + [st.reduce_width, st.n_out, st.group_size]
            if not st.mlp_widths:
                raise ConfigError(f"stage {i} has no MLP layers")
            if st.radius <= 0:
                raise ConfigError(f"stage {i} radius must be positive")
            if prev_n is not None and st.n_out > prev_n:
                raise ConfigError(f"stage {i} samples {st.n_out} > {prev_n} input points")
            if (self.skip_mode == "addition" and not self.skip_projection
                    and 3 + c_in != st.mlp_widths[-1]):
                raise ConfigError(
                    f"stage {i} addition join: center row width {3 + c_in} "
                    f"!= pooled width {st.mlp_widths[-1]}")
            prev_n = st.n_out
            c_in = st.reduce_width
        if any(w <= 0 for w in widths):
            raise ConfigError("all widths and counts must be positive")

    # -- plain key/value text form ------------------------------------------

    def to_text(self) -> str:
        lines = [
            f"n_classes = {self.n_classes}",
            f"skip_mode = {self.skip_mode}",
            f"skip_projection = {str(self.skip_projection).lower()}",
            f"dropout_rate = {self.dropout_rate!r}",
            f"in_features = {self.in_features}",
            f"global_widths = {_join(self.global_widths)}",
            f"fc_widths = {_join(self.fc_widths)}",
            f"n_stages = {len(self.stages)}",
        ]
        if self.class_names:
            lines.append(f"class_names = {','.join(self.class_names)}")
        for i, st in enumerate(self.stages, 1):
            lines += [
                f"stage{i}.n_out = {st.n_out}",
                f"stage{i}.radius = {st.radius!r}",
                f"stage{i}.group_size = {st.group_size}",
                f"stage{i}.mlp_widths = {_join(st.mlp_widths)}",
                f"stage{i}.reduce_width = {st.reduce_width}",
            ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, kv: Dict[str, str], base: Optional["ModelConfig"] = None):
        """Build a config from string key/values; missing keys keep ``base``."""
        base = base or cls()
        kw = {}
        conv = {
            "n_classes": int, "skip_mode": str, "dropout_rate": float,
            "skip_projection": _parse_bool, "in_features": int,
            "global_widths": _ints, "fc_widths": _ints,
            "class_names": lambda v: tuple(x.strip() for x in v.split(",") if x.strip()),
        }
        for key, fn in conv.items():
            if key in kv:
                kw[key] = fn(kv[key])
        n_stages = int(kv.get("n_stages", len(base.stages)))
        stages = []
        for i in range(1, n_stages + 1):
            old = base.stages[i - 1] if i <= len(base.stages) else None
            vals = {}
            for f in fields(StageConfig):
                key = f"stage{i}.{f.name}"
                if key in kv:
                    vals[f.name] = _ints(kv[key]) if f.name == "mlp_widths" else (
                        float(kv[key]) if f.name == "radius" else int(kv[key]))
                elif old is not None:
                    vals[f.name] = getattr(old, f.name)
                else:
                    raise ConfigError(f"missing {key}")
            stages.append(StageConfig(**vals))
        kw["stages"] = tuple(stages)
        try:
            return replace(base, **kw)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None

    @classmethod
    def from_text(cls, text: str, base=None):
        return cls.from_dict(parse_kv(text), base)


MODEL_KEYS = ("n_classes", "skip_mode", "skip_projection", "dropout_rate", "in_features",
              "global_widths", "fc_widths", "n_stages", "class_names")


def is_model_key(key: str) -> bool:
    return key in MODEL_KEYS or (key.startswith("stage") and "." in key)


def parse_kv(text: str) -> Dict[str, str]:
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _join(ws):
    return ",".join(str(w) for w in ws)


def _ints(s):
    if isinstance(s, (tuple, list)):
        return tuple(int(x) for x in s)
    s = s.strip()
    return tuple(int(x) for x in s.split(",") if x.strip()) if s else ()


def _parse_bool(s):
    if isinstance(s, bool):
        return s
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


# ---------------------------------------------------------------------------
# parameters

Params = Dict[str, Tensor]


def is_trainable(name: str) -> bool:
    return not name.endswith((".running_mean", ".running_var"))


def _kaiming(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _add_conv(params, rng, prefix, fan_in, fan_out):
    params[f"{prefix}.weight"] = Tensor(_kaiming(rng, fan_in, fan_out), requires_grad=True)
    params[f"{prefix}.bn.gamma"] = Tensor(np.ones(fan_out), requires_grad=True)
    params[f"{prefix}.bn.beta"] = Tensor(np.zeros(fan_out), requires_grad=True)
    params[f"{prefix}.bn.running_mean"] = Tensor(np.zeros(fan_out))
    params[f"{prefix}.bn.running_var"] = Tensor(np.ones(fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Fan-in scaled uniform weights, zero biases, identity batch norms."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    c_in = cfg.in_features
    for i, st in enumerate(cfg.stages):
        w = 3 + c_in
        for j, out in enumerate(st.mlp_widths):
            _add_conv(params, rng, f"stage{i}.mlp{j}", w, out)
            w = out
        pooled = st.mlp_widths[-1]
        center = 3 + c_in
        if cfg.skip_mode == "addition":
            if cfg.skip_projection:
                params[f"stage{i}.skip_proj.weight"] = Tensor(
                    _kaiming(rng, center, pooled), requires_grad=True)
            join = pooled
        else:
            join = center + pooled
        _add_conv(params, rng, f"stage{i}.reduce", join, st.reduce_width)
        c_in = st.reduce_width
    w = 3 + c_in
    for j, out in enumerate(cfg.global_widths):
        _add_conv(params, rng, f"global.mlp{j}", w, out)
        w = out
    for j, out in enumerate(cfg.fc_widths):
        params[f"fc{j}.weight"] = Tensor(_kaiming(rng, w, out), requires_grad=True)
        params[f"fc{j}.bias"] = Tensor(np.zeros(out), requires_grad=True)
        w = out
    params["out.weight"] = Tensor(_kaiming(rng, w, cfg.n_classes), requires_grad=True)
    params["out.bias"] = Tensor(np.zeros(cfg.n_classes), requires_grad=True)
    return params


def parameter_count(params_or_cfg) -> int:
    params = params_or_cfg
    if isinstance(params_or_cfg, ModelConfig):
        params = init_params(params_or_cfg)
    return int(sum(t.size for name, t in params.items() if is_trainable(name)))


# ---------------------------------------------------------------------------
# forward pieces


def shared_layer(x: Tensor, params: Params, prefix: str, training: bool) -> Tensor:
    """Linear (no bias) -> batch norm -> ReLU, applied to every row of ``x``."""
    lead = x.shape[:-1]
    h = matmul(reshape(x, (-1, x.shape[-1])), params[f"{prefix}.weight"])
    h = batch_norm(h, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"],
                   params[f"{prefix}.bn.running_mean"].data,
                   params[f"{prefix}.bn.running_var"].data, training)
    h = relu(h)
    return reshape(h, lead + (h.shape[-1],))


def stage_forward(grouped_rows: Tensor, center_rows: Tensor, stage: StageConfig,
                  params: Params, index: int, skip_mode: str = "concatenation",
                  training: bool = False) -> Tensor:
    """Feature path of one stage.

    ``grouped_rows`` is ``[..., k, 3 + c]`` (relative xyz then gathered
    features); ``center_rows`` is ``[..., 3 + c]`` (center xyz then its own
    input features).  Returns ``[..., reduce_width]``.
    """
    h = grouped_rows
    for j in range(len(stage.mlp_widths)):
        h = shared_layer(h, params, f"stage{index}.mlp{j}", training)
    pooled = max_over_axis(h, axis=-2)
    skip_mode = _SKIP_ALIASES.get(skip_mode, skip_mode)
    if skip_mode == "concatenation":
        joined = concat_last(center_rows, pooled)
    elif skip_mode == "addition":
        c = center_rows
        proj = params.get(f"stage{index}.skip_proj.weight")
        if proj is not None:
            lead = c.shape[:-1]
            c = reshape(matmul(reshape(c, (-1, c.shape[-1])), proj), lead + (proj.shape[1],))
        if c.shape[-1] != pooled.shape[-1]:
            raise ConfigError(
                f"addition join width mismatch: {c.shape[-1]} vs {pooled.shape[-1]}")
        joined = add(c, pooled)
    else:
        raise ConfigError(f"unknown skip mode {skip_mode!r}")
    return shared_layer(joined, params, f"stage{index}.reduce", training)


def global_feature(xyz, feats: Tensor, cfg: ModelConfig, params: Params,
                   training: bool = False) -> Tensor:
    xyz = xyz if isinstance(xyz, Tensor) else Tensor(xyz)
    if xyz.shape[:-1] != feats.shape[:-1]:
        raise ValueError(f"xyz {xyz.shape} and features {feats.shape} row counts differ")
    h = concat_last(xyz, feats)
    for j in range(len(cfg.global_widths)):
        h = shared_layer(h, params, f"global.mlp{j}", training)
    return max_over_axis(h, axis=-2)


def classify(f_global: Tensor, cfg: ModelConfig, params: Params, training: bool = False,
             rng: Optional[np.random.Generator] = None) -> Tensor:
    h = f_global
    for j in range(len(cfg.fc_widths)):
        h = add(matmul(h, params[f"fc{j}.weight"]), params[f"fc{j}.bias"])
        h = relu(h)
        h = dropout(h, cfg.dropout_rate, rng, training)
    return add(matmul(h, params["out.weight"]), params["out.bias"])


def _as_batch(clouds) -> np.ndarray:
    if isinstance(clouds, geometry.PointCloud):
        clouds = clouds.points
    arr = np.asarray(clouds, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise InputSizeError(f"expected B x N x 3 or N x 3 clouds, got {arr.shape}")
    return np.ascontiguousarray(arr)


def _start_index(pts, rng, random_start):
    if random_start:
        return int(rng.integers(pts.shape[0]))
    return geometry.lexicographic_min_index(pts)


def forward(clouds, cfg: ModelConfig, params: Params, training: bool = False,
            rng: Optional[np.random.Generator] = None, random_start: bool = False,
            features: Optional[np.ndarray] = None) -> Tensor:
    """Logits ``[B, K]`` for a batch of (already normalised) clouds."""
    xyz = _as_batch(clouds)
    b, n, _ = xyz.shape
    if n < cfg.stages[0].n_out:
        raise InputSizeError(f"cloud has {n} points, first stage samples {cfg.stages[0].n_out}")
    if (training and cfg.dropout_rate > 0 or random_start) and rng is None:
        rng = np.random.default_rng(0)
    feats = None
    if features is not None:
        f = np.asarray(features, dtype=np.float64).reshape(b, n, -1)
        feats = Tensor(f)
    for i, st in enumerate(cfg.stages):
        m, k = st.n_out, st.group_size
        cidx = np.empty((b, m), dtype=np.int64)
        gidx = np.empty((b, m, k), dtype=np.int64)
        for s in range(b):
            g = geometry.sample_and_group(xyz[s], m, st.radius, k,
                                          start=_start_index(xyz[s], rng, random_start))
            cidx[s] = g.center_indices
            gidx[s] = g.indices
        rows = np.arange(b)[:, None]
        centers = xyz[rows, cidx]                                  # B x M x 3
        rel = xyz[rows[:, :, None], gidx] - centers[:, :, None, :]  # B x M x k x 3
        if feats is None:
            grouped = Tensor(rel)
            center_rows = Tensor(centers)
        else:
            c = feats.shape[-1]
            flat = reshape(feats, (b * n, c))
            off = (np.arange(b) * n)
            grouped = concat_last(Tensor(rel), gather_rows(flat, gidx + off[:, None, None]))
            center_rows = concat_last(Tensor(centers), gather_rows(flat, cidx + off[:, None]))
        feats = stage_forward(grouped, center_rows, st, params, i, cfg.skip_mode, training)
        xyz = np.ascontiguousarray(centers)
        n = m
    f_global = global_feature(xyz, feats, cfg, params, training)
    return classify(f_global, cfg, params, training, rng)


def predict(clouds, cfg: ModelConfig, params: Params) -> np.ndarray:
    return np.argmax(forward(clouds, cfg, params, training=False).data, axis=1)

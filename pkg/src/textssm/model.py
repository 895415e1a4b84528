"""Query-conditioned selective SSM network: blocks, full model, loss and checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import AgcnLayer, SkeletonGraph, agcn_forward, default_skeleton, relational_concat
from .selective import SelectionProjections, select_params, select_params_text, selective_scan

LOSS_EPS = 1e-7


@dataclass
class ModelConfig:
    D: int = 64
    num_blocks: int = 3
    N: int = 16
    V: int = 8
    max_len: int = 2000
    expansion: int = 2
    C_in: int = 3
    conv_width: int = 4
    use_conv: bool = True
    text_control: bool = True
    relational: bool = True
    bidirectional: bool = True

    def __post_init__(self):
        for f in ("D", "num_blocks", "N", "V", "max_len", "expansion", "C_in"):
            if getattr(self, f) <= 0:
                raise ValueError(f"ModelConfig.{f} must be positive")

    @property
    def inner(self) -> int:
        return self.D * self.expansion

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Module:
    """Parameter container; collects Tensors and nested modules by attribute name."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (SelectionProjections, AgcnLayer)):
                out.update({f"{key}.{k}": v for k, v in val.parameters().items()})
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _dense(rng, n_in, n_out, scale=1.0):
    return ad.parameter(rng.normal(0.0, scale / np.sqrt(n_in), (n_in, n_out)))


class TmMambaBlock(Module):
    """Pre-norm residual block: AGCN relational features, bidirectional
    text-controlled selective scans, SiLU gate and output projection."""

    def __init__(self, config: ModelConfig, graph: SkeletonGraph, rng):
        c = config
        self.config = c
        Di = c.inner
        qdim = c.D if c.text_control else 0
        self.norm_scale = ad.parameter(np.ones(c.D))
        if c.relational:
            self.agcn = AgcnLayer(graph, c.D, rng=rng)
        self.W_in = _dense(rng, 2 * c.D if c.relational else c.D, Di)
        self.b_in = ad.parameter(np.zeros(Di))
        self.W_gate = _dense(rng, Di, Di)
        self.b_gate = ad.parameter(np.zeros(Di))
        if c.use_conv:
            self.conv_fwd = ad.parameter(rng.normal(0, 0.5, (c.conv_width, Di)))
            if c.bidirectional:
                self.conv_bwd = ad.parameter(rng.normal(0, 0.5, (c.conv_width, Di)))
        self.sel_fwd = SelectionProjections(Di, c.N, query_dim=qdim, rng=rng)
        if c.bidirectional:
            self.sel_bwd = SelectionProjections(Di, c.N, query_dim=qdim, rng=rng)
        self.W_out = _dense(rng, Di, c.D, scale=0.5)
        self.b_out = ad.parameter(np.zeros(c.D))

    def swap_directions(self) -> None:
        """Exchange forward/backward scan parameters (time-reversal symmetry)."""
        self.sel_fwd, self.sel_bwd = self.sel_bwd, self.sel_fwd
        if self.config.use_conv:
            self.conv_fwd, self.conv_bwd = self.conv_bwd, self.conv_fwd

    def _direction(self, z, q, proj, conv):
        u = z
        if conv is not None:
            u = ad.silu(ad.causal_depthwise_conv(z, conv, axis=-2))
        sp = select_params_text(u, q, proj) if self.config.text_control else select_params(u, proj)
        return selective_scan(u, sp)

    def forward(self, X, q=None) -> Tensor:
        c = self.config
        X = ad.as_tensor(X)
        if c.text_control:
            if q is None or q.shape[-1] != c.D:
                raise ValueError(f"query width {None if q is None else q.shape[-1]} != D={c.D}")
        xn = ad.rms_norm(X, self.norm_scale)
        feats = relational_concat(xn, agcn_forward(xn, self.agcn)) if c.relational else xn
        z = ad.linear(feats, self.W_in, self.b_in)
        y = self._direction(z, q, self.sel_fwd, self.conv_fwd if c.use_conv else None)
        if c.bidirectional:
            zr = ad.flip(z, -2)
            yb = self._direction(zr, q, self.sel_bwd, self.conv_bwd if c.use_conv else None)
            y = ad.add(y, ad.flip(yb, -2))
        gate = ad.silu(ad.linear(z, self.W_gate, self.b_gate))
        out = ad.linear(ad.mul(y, gate), self.W_out, self.b_out)
        return ad.add(out, X)


def block_forward(X, q, block: TmMambaBlock) -> Tensor:
    return block.forward(X, q)


@dataclass
class FrameScores:
    s: Tensor
    logits: Tensor


class TmMamba(Module):
    """Embedding -> stacked blocks -> node mean-pool -> MLP head -> sigmoid."""

    def __init__(self, config: ModelConfig, graph: SkeletonGraph | None = None, seed: int = 0):
        self.config = config
        self.graph = graph if graph is not None else default_skeleton(config.V)
        if self.graph.V != config.V:
            raise ValueError(f"graph has {self.graph.V} nodes, config expects {config.V}")
        rng = np.random.default_rng(seed)
        c = config
        self.W_embed = _dense(rng, c.C_in, c.D)
        self.b_embed = ad.parameter(np.zeros(c.D))
        if not c.text_control:
            # query fused into the sequence once, before plain selective scans
            self.W_fuse1 = _dense(rng, 2 * c.D, c.D)
            self.b_fuse1 = ad.parameter(np.zeros(c.D))
            self.W_fuse2 = _dense(rng, c.D, c.D)
            self.b_fuse2 = ad.parameter(np.zeros(c.D))
        self.blocks = [TmMambaBlock(c, self.graph, rng) for _ in range(c.num_blocks)]
        self.W_head1 = _dense(rng, c.D, c.D)
        self.b_head1 = ad.parameter(np.zeros(c.D))
        self.W_head2 = _dense(rng, c.D, 1)
        self.b_head2 = ad.parameter(np.zeros(1))

    def forward(self, motion, q) -> FrameScores:
        """Frame scores for ``motion`` of shape ``(B, V, L, C_in)`` (or unbatched)."""
        c = self.config
        motion, q = ad.as_tensor(motion), ad.as_tensor(q)
        unbatched = motion.ndim == 3
        if unbatched:
            motion = ad.reshape(motion, (1,) + motion.shape)
            q = ad.reshape(q, (1,) + q.shape)
        if motion.shape[-1] != c.C_in:
            raise ValueError(f"input has {motion.shape[-1]} channels, model expects C_in={c.C_in}")
        if motion.shape[-2] > c.max_len:
            raise ValueError(f"sequence length {motion.shape[-2]} exceeds max_len={c.max_len}")
        if q.shape[-1] != c.D:
            raise ValueError(f"query width {q.shape[-1]} != D={c.D}")
        x = ad.linear(motion, self.W_embed, self.b_embed)  # (B, V, L, D)
        if not c.text_control:
            qb = ad.broadcast_to(ad.reshape(q, (q.shape[0], 1, 1, c.D)), x.shape)
            h = ad.silu(ad.linear(ad.concat([x, qb], -1), self.W_fuse1, self.b_fuse1))
            x = ad.linear(h, self.W_fuse2, self.b_fuse2)
        for block in self.blocks:
            x = block.forward(x, q if c.text_control else None)
        pooled = ad.mean_axis(x, -3)  # (B, L, D)
        hidden = ad.silu(ad.linear(pooled, self.W_head1, self.b_head1))
        logits = ad.reshape(ad.linear(hidden, self.W_head2, self.b_head2), pooled.shape[:-1])
        if unbatched:
            logits = ad.reshape(logits, logits.shape[1:])
        return FrameScores(s=ad.sigmoid(logits), logits=logits)

    __call__ = forward


def model_forward(motion, q, model: TmMamba) -> FrameScores:
    return model.forward(motion, q)


def loss_ce(scores, labels, eps: float = LOSS_EPS) -> Tensor:
    """Mean binary cross-entropy between frame scores and 0/1 labels.

    Scores are clamped to ``[eps, 1 - eps]``; the mean runs over every frame
    (and batch item, if batched).
    """
    s = scores.s if isinstance(scores, FrameScores) else ad.as_tensor(scores)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"scores shape {s.shape} != labels shape {y.shape}")
    sc = ad.clamp(s, eps, 1.0 - eps)
    ll = ad.add(ad.mul(ad.log(sc), y), ad.mul(ad.log(ad.sub(1.0, sc)), 1.0 - y))
    return ad.mul(ad.mean_axis(ll), -1.0)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: TmMamba, path, extra: dict | None = None) -> None:
    """Directory with ``manifest.json`` plus one little-endian raw file per parameter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters().items():
        fname = f"{name}.bin"
        arr = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<"))
        (path / fname).write_bytes(arr.tobytes())
        entries.append({"name": name, "shape": list(p.shape), "dtype": arr.dtype.str, "file": fname})
    manifest = {
        "config": asdict(model.config),
        "graph": {"num_nodes": model.graph.V, "edges": [list(e) for e in model.graph.edges]},
        "dtype": "<f8",
        "parameters": entries,
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path) -> TmMamba:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_file.read_text())
    config = ModelConfig.from_dict(manifest["config"])
    g = manifest["graph"]
    model = TmMamba(config, SkeletonGraph(g["num_nodes"], [tuple(e) for e in g["edges"]]))
    params = model.named_parameters()
    names = {e["name"] for e in manifest["parameters"]}
    if names != set(params):
        raise ValueError(f"checkpoint parameters do not match model: {sorted(names ^ set(params))}")
    for e in manifest["parameters"]:
        arr = np.frombuffer((path / e["file"]).read_bytes(), dtype=np.dtype(e["dtype"]))
        params[e["name"]].data[...] = arr.reshape(e["shape"]).astype(np.float64)
    return model

"""Dense feed-forward bodies for the encoder, generator, regressor and the three critics.

Parameters are plain torch tensors so gradients of arbitrary scalar losses,
including gradient-penalty terms that contain an input gradient, come from
nested reverse-mode differentiation (``create_graph=True``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

LEAKY_SLOPE = 0.2
HEADS = ("linear", "l2", "gaussian", "sigmoid")


class DegenerateOutputError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass
class DenseNet:
    """Stack of affine layers with leaky-rectifier hidden activations and an output head.

    ``head`` is one of ``linear``, ``l2`` (rows rescaled to norm ``radius``),
    ``gaussian`` (output split into mean and log-variance) or ``sigmoid``.
    """

    weights: list[torch.Tensor]
    biases: list[torch.Tensor]
    head: str = "linear"
    radius: float = 1.0
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {tuple(w.shape)} / bias {tuple(b.shape)} inconsistent")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input {w.shape[1]} != layer {i - 1} output {self.weights[i - 1].shape[0]}")
        if self.head == "gaussian" and self.out_dim % 2:
            raise ValueError("gaussian head needs an even final width")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_dims(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    def parameters(self) -> list[torch.Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def requires_grad_(self, flag: bool = True) -> "DenseNet":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def clone(self) -> "DenseNet":
        return DenseNet(
            [w.detach().clone() for w in self.weights],
            [b.detach().clone() for b in self.biases],
            self.head, self.radius, self.slope,
        )

    def __call__(self, x: torch.Tensor):
        return forward(self, x)


def init_net(in_dim: int, hidden_dims: Sequence[int], out_dim: int, head: str = "linear",
             seed: int = 0, radius: float = 1.0, dtype=torch.float64) -> DenseNet:
    """Weights i.i.d. normal(0, 0.02), zero biases; deterministic in ``seed``.

    For the ``gaussian`` head ``out_dim`` is the latent size k and the final layer has 2k outputs.
    """
    dims = [in_dim, *hidden_dims, 2 * out_dim if head == "gaussian" else out_dim]
    if any(int(d) <= 0 for d in dims):
        raise ValueError(f"all layer dims must be positive, got {dims}")
    gen = torch.Generator().manual_seed(int(seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append((0.02 * torch.randn(fan_out, fan_in, generator=gen, dtype=torch.float64)).to(dtype))
        biases.append(torch.zeros(fan_out, dtype=dtype))
    return DenseNet(weights, biases, head=head, radius=radius)


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return torch.where(x > 0, x, slope * x)


def l2_head(x: torch.Tensor, r: float) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateOutputError("zero vector reached the L2-normalization head")
    return r * x / norm


def _body(net: DenseNet, x: torch.Tensor, keep_first: bool = False):
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != net input {net.in_dim}")
    first = None
    n = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        x = x @ w.T + b
        if i < n - 1:
            pre = x
            x = leaky_relu(x, net.slope)
            if i == 0 and keep_first:
                first = (pre, x)
    return x, first


def _apply_head(net: DenseNet, out: torch.Tensor):
    if net.head == "l2":
        return l2_head(out, net.radius)
    if net.head == "sigmoid":
        return torch.sigmoid(out)
    if net.head == "gaussian":
        k = out.shape[-1] // 2
        return out[..., :k], out[..., k:]
    return out


def forward(net: DenseNet, x: torch.Tensor):
    """Evaluate ``net``; the gaussian head returns ``(mean, logvar)``."""
    out, _ = _body(net, x)
    return _apply_head(net, out)


def forward_hidden(net: DenseNet, x: torch.Tensor, post_activation: bool = True):
    """Return ``(h, output)`` where ``h`` is the first layer's output (post-activation by default)."""
    if len(net.weights) < 2:
        raise ValueError("forward_hidden needs at least one hidden layer")
    out, (pre, post) = _body(net, x, keep_first=True)
    return (post if post_activation else pre), _apply_head(net, out)


def reparameterize(mean: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if not (mean.shape == logvar.shape == eps.shape):
        raise ValueError("mean, logvar and eps must share a shape")
    return mean + torch.exp(0.5 * logvar) * eps


def input_gradient(net: DenseNet, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Per-row gradient of a scalar-output net with respect to its input."""
    if net.out_dim != 1 or net.head != "linear":
        raise ValueError("input_gradient needs a scalar linear-head net")
    x = x.detach().requires_grad_(True) if not x.requires_grad else x
    out = forward(net, x)
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=create_graph)
    return grad


def param_gradients(loss_fn: Callable[[], torch.Tensor], nets: Sequence[DenseNet],
                    name: str = "loss") -> tuple[torch.Tensor, list[list[torch.Tensor]]]:
    """Evaluate ``loss_fn()`` and return ``(loss, [grads per net])``.

    Each grads list mirrors ``net.parameters()`` order (W0, b0, W1, b1, ...).
    Parameters the loss does not reach get zero gradients.
    """
    params = [p for net in nets for p in net.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
    try:
        loss = loss_fn()
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NonFiniteLossError(name, value)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    out, i = [], 0
    for net in nets:
        n = len(net.parameters())
        out.append(list(grads[i:i + n]))
        i += n
    return loss.detach(), out


@dataclass
class ModelSet:
    encoder: DenseNet
    generator: DenseNet
    regressor: DenseNet
    critic: DenseNet
    critic_unseen: DenseNet
    critic_attr: DenseNet

    NAMES = ("encoder", "generator", "regressor", "critic", "critic_unseen", "critic_attr")

    def items(self):
        return [(n, getattr(self, n)) for n in self.NAMES]

    def clone(self) -> "ModelSet":
        return ModelSet(*(getattr(self, n).clone() for n in self.NAMES))


def build_models(feature_dim: int, attribute_dim: int, latent_dim: int | None = None,
                 hidden: int = 4096, radius: float = 1.0, seed: int = 0,
                 dtype=torch.float64, generator_head: str = "l2") -> ModelSet:
    k = attribute_dim if latent_dim is None else latent_dim
    h = [hidden]
    return ModelSet(
        encoder=init_net(feature_dim + attribute_dim, h, k, "gaussian", seed, dtype=dtype),
        generator=init_net(attribute_dim + k, h, feature_dim, generator_head, seed + 1, radius, dtype),
        regressor=init_net(feature_dim, h, attribute_dim, "l2", seed + 2, radius, dtype),
        critic=init_net(feature_dim + attribute_dim, h, 1, "linear", seed + 3, dtype=dtype),
        critic_unseen=init_net(feature_dim, h, 1, "linear", seed + 4, dtype=dtype),
        critic_attr=init_net(attribute_dim, h, 1, "linear", seed + 5, dtype=dtype),
    )


# ---------------------------------------------------------------- checkpoints

_BLOB_DTYPES = {"f32": "<f4", "f64": "<f8"}


def save_checkpoint(models: ModelSet, path, extra: dict | None = None, precision: str = "f32") -> Path:
    """One ``manifest.json`` plus little-endian blobs (f32 or f64) per layer tensor."""
    if precision not in _BLOB_DTYPES:
        raise ValueError(f"checkpoint precision must be one of {sorted(_BLOB_DTYPES)}")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"nets": {}, "extra": extra or {}}
    for name, net in models.items():
        layers = []
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            entry = {}
            for kind, t in (("weight", w), ("bias", b)):
                fname = f"{name}.{i}.{kind}.bin"
                arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_BLOB_DTYPES[precision])
                (root / fname).write_bytes(arr.tobytes())
                entry[kind] = {"file": fname, "dtype": precision, "shape": list(arr.shape)}
            layers.append(entry)
        manifest["nets"][name] = {"head": net.head, "radius": net.radius, "slope": net.slope, "layers": layers}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_checkpoint(path, dtype=torch.float64) -> tuple[ModelSet, dict]:
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {root / 'manifest.json'}")
    manifest = json.loads((root / "manifest.json").read_text())
    nets = {}
    for name in ModelSet.NAMES:
        spec = manifest["nets"][name]
        ws, bs = [], []
        for layer in spec["layers"]:
            for kind, dest in (("weight", ws), ("bias", bs)):
                e = layer[kind]
                blob = (root / e["file"]).read_bytes()
                raw = np.frombuffer(blob, dtype=_BLOB_DTYPES[e["dtype"]]).reshape(e["shape"])
                dest.append(torch.from_numpy(raw.copy()).to(dtype))
        nets[name] = DenseNet(ws, bs, spec["head"], spec["radius"], spec["slope"])
    return ModelSet(**nets), manifest.get("extra", {})

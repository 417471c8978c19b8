"""Two-branch embedding network: u = f(x) for images, v = g(y) for texts.

Each branch is ``hidden linear -> ReLU -> dropout -> top linear -> l2 norm``.
In ``share-top`` mode both branches hold the very same top ``LayerParams``
object, so updates through either branch are seen by both and gradients
from the two paths are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DimensionError, StateError

SHARING_MODES = ("no-sharing", "share-top")
BRANCHES = ("image", "text")


@dataclass(frozen=True)
class BranchConfig:
    input_dim: int
    hidden_dim: int = 2048
    embed_dim: int = 64

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class BranchCache:
    x: np.ndarray
    pre: np.ndarray
    dropout: nn.DropoutMask
    dropped: np.ndarray
    z: np.ndarray
    u: np.ndarray


def _validate_configs(image: BranchConfig, text: BranchConfig, sharing: str) -> None:
    if sharing not in SHARING_MODES:
        raise ValueError(f"unknown sharing mode {sharing!r}")
    if image.embed_dim != text.embed_dim:
        raise DimensionError("image and text branches must share the embedding dimension")
    if sharing == "share-top" and image.hidden_dim != text.hidden_dim:
        raise DimensionError("share-top requires equal hidden dims in both branches")


class TwoBranchModel:
    def __init__(
        self,
        image: BranchConfig,
        text: BranchConfig,
        sharing: str = "no-sharing",
        keep_prob: float = 0.5,
        seed: int | np.random.Generator = 0,
    ):
        _validate_configs(image, text, sharing)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        image_hidden = nn.he_uniform(image.input_dim, image.hidden_dim, rng)
        image_top = nn.he_uniform(image.hidden_dim, image.embed_dim, rng)
        text_hidden = nn.he_uniform(text.input_dim, text.hidden_dim, rng)
        text_top = image_top if sharing == "share-top" else nn.he_uniform(text.hidden_dim, text.embed_dim, rng)
        self._setup(image, text, sharing, keep_prob, image_hidden, image_top, text_hidden, text_top)

    def _setup(self, image, text, sharing, keep_prob, image_hidden, image_top, text_hidden, text_top):
        self.image_config = image
        self.text_config = text
        self.sharing = sharing
        self.keep_prob = keep_prob
        self.layers = {"image": (image_hidden, image_top), "text": (text_hidden, text_top)}

    @classmethod
    def from_layers(cls, image_layers, text_layers=None, sharing="no-sharing", keep_prob=0.5):
        """Build a model from explicit ``(hidden, top)`` layer pairs.

        In share-top mode the text top layer is taken to be the image top layer.
        """
        image_hidden, image_top = image_layers
        if sharing == "share-top":
            text_hidden = text_layers[0] if isinstance(text_layers, (tuple, list)) else text_layers
            text_top = image_top
        else:
            text_hidden, text_top = text_layers
        image = BranchConfig(image_hidden.in_dim, image_hidden.out_dim, image_top.out_dim)
        text = BranchConfig(text_hidden.in_dim, text_hidden.out_dim, text_top.out_dim)
        _validate_configs(image, text, sharing)
        if image_top.in_dim != image.hidden_dim or text_top.in_dim != text.hidden_dim:
            raise DimensionError("top layer input does not match hidden layer output")
        model = cls.__new__(cls)
        model._setup(image, text, sharing, keep_prob, image_hidden, image_top, text_hidden, text_top)
        return model

    @property
    def embed_dim(self) -> int:
        return self.image_config.embed_dim

    # parameter bookkeeping

    def _layer_names(self, branch: str):
        top = "shared_top" if self.sharing == "share-top" else f"{branch}_top"
        return f"{branch}_hidden", top

    def named_layers(self) -> dict:
        """Unique layers in storage order: image hidden, image top, text hidden, text top.

        The shared top appears once, in the image slot.
        """
        out = {}
        for branch in BRANCHES:
            for name, layer in zip(self._layer_names(branch), self.layers[branch]):
                out.setdefault(name, layer)
        return out

    def parameters(self) -> dict:
        """Name -> live parameter array (mutating these mutates the model)."""
        params = {}
        for name, layer in self.named_layers().items():
            params[f"{name}.weight"] = layer.weight
            params[f"{name}.bias"] = layer.bias
        return params

    def branch_param_names(self, branch: str) -> list:
        names = []
        for layer in self._layer_names(branch):
            names += [f"{layer}.weight", f"{layer}.bias"]
        return names

    # forward / backward

    def _config(self, branch):
        return self.image_config if branch == "image" else self.text_config

    def forward(self, branch: str, x, train: bool = False, rng=None):
        """Embed rows of ``x`` with one branch; returns ``(u, cache)``."""
        hidden, top = self.layers[branch]
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self._config(branch).input_dim:
            raise DimensionError(
                f"{branch} input has {x.shape[-1]} features, expected {self._config(branch).input_dim}"
            )
        pre = nn.linear_forward(x, hidden)
        act = nn.relu_forward(pre)
        mask = nn.DropoutMask(self.keep_prob, train=train)
        dropped = nn.dropout_forward(act, mask, rng)
        z = nn.linear_forward(dropped, top)
        u = nn.l2_normalize(z)
        return u, BranchCache(x, pre, mask, dropped, z, u)

    def embed(self, branch: str, x, train: bool = False, rng=None) -> np.ndarray:
        return self.forward(branch, x, train, rng)[0]

    def embed_image(self, x, train: bool = False, rng=None) -> np.ndarray:
        return self.embed("image", x, train, rng)

    def embed_text(self, y, train: bool = False, rng=None) -> np.ndarray:
        return self.embed("text", y, train, rng)

    def pre_norm_output(self, branch: str, x) -> tuple:
        """Eval-mode top-layer output before normalization, plus hidden activations."""
        hidden, top = self.layers[branch]
        act = nn.relu_forward(nn.linear_forward(x, hidden))
        return nn.linear_forward(act, top), act

    def backward(self, branch: str, cache: BranchCache | None, d_u: np.ndarray, grads: dict | None = None) -> dict:
        """Accumulate parameter gradients of a scalar loss given ``dL/du``.

        Gradients are added into ``grads`` (created if absent) so that the
        shared top layer receives the sum of both branch paths.
        """
        if cache is None:
            raise StateError("backward called without a forward cache")
        grads = {} if grads is None else grads
        hidden, top = self.layers[branch]
        h_name, t_name = self._layer_names(branch)
        d_z = nn.l2_normalize_backward(d_u, cache.z)
        d_top_w, d_top_b, d_dropped = nn.linear_backward(d_z, cache.dropped, top)
        d_act = nn.dropout_backward(d_dropped, cache.dropout)
        d_pre = nn.relu_backward(d_act, cache.pre)
        d_hid_w, d_hid_b, _ = nn.linear_backward(d_pre, cache.x, hidden)
        for name, g in (
            (f"{t_name}.weight", d_top_w),
            (f"{t_name}.bias", d_top_b),
            (f"{h_name}.weight", d_hid_w),
            (f"{h_name}.bias", d_hid_b),
        ):
            if name in grads:
                grads[name] = grads[name] + g
            else:
                grads[name] = g
        return grads

    # snapshots

    def snapshot(self, task_index: int = 0) -> "ModelSnapshot":
        return ModelSnapshot(
            task_index=task_index,
            sharing=self.sharing,
            image_config=self.image_config,
            text_config=self.text_config,
            params={k: v.copy() for k, v in self.parameters().items()},
        )

    def load_snapshot(self, snap: "ModelSnapshot") -> None:
        """Copy snapshot values into this model's arrays (aliasing preserved)."""
        if (snap.sharing, snap.image_config, snap.text_config) != (
            self.sharing,
            self.image_config,
            self.text_config,
        ):
            raise DimensionError("snapshot layout does not match model")
        live = self.parameters()
        if set(live) != set(snap.params):
            raise DimensionError("snapshot parameter names do not match model")
        for name, arr in live.items():
            arr[...] = snap.params[name]

    def copy(self) -> "TwoBranchModel":
        return self.snapshot().restore(self.keep_prob)


def distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"embedding length mismatch: {u.shape} vs {v.shape}")
    return float(np.sqrt(np.sum((u - v) ** 2)))


@dataclass
class ModelSnapshot:
    task_index: int
    sharing: str
    image_config: BranchConfig
    text_config: BranchConfig
    params: dict = field(repr=False)

    def restore(self, keep_prob: float = 0.5) -> TwoBranchModel:
        model = TwoBranchModel.__new__(TwoBranchModel)
        image_hidden = nn.LayerParams(
            self.params["image_hidden.weight"].copy(), self.params["image_hidden.bias"].copy()
        )
        text_hidden = nn.LayerParams(
            self.params["text_hidden.weight"].copy(), self.params["text_hidden.bias"].copy()
        )
        if self.sharing == "share-top":
            image_top = nn.LayerParams(
                self.params["shared_top.weight"].copy(), self.params["shared_top.bias"].copy()
            )
            text_top = image_top
        else:
            image_top = nn.LayerParams(
                self.params["image_top.weight"].copy(), self.params["image_top.bias"].copy()
            )
            text_top = nn.LayerParams(
                self.params["text_top.weight"].copy(), self.params["text_top.bias"].copy()
            )
        _validate_configs(self.image_config, self.text_config, self.sharing)
        model._setup(
            self.image_config, self.text_config, self.sharing, keep_prob,
            image_hidden, image_top, text_hidden, text_top,
        )
        for name, arr in model.parameters().items():
            if arr.shape != self.params[name].shape:
                raise DimensionError(f"snapshot array {name} has shape {self.params[name].shape}")
        return model

    def branch_param_names(self, branch: str) -> list:
        top = "shared_top" if self.sharing == "share-top" else f"{branch}_top"
        return [f"{branch}_hidden.weight", f"{branch}_hidden.bias", f"{top}.weight", f"{top}.bias"]

    def flat(self, branch: str) -> np.ndarray:
        """Flattened parameter vector of one branch (theta for image, omega for text)."""
        return np.concatenate([self.params[n].ravel() for n in self.branch_param_names(branch)])

    def equals(self, other: "ModelSnapshot") -> bool:
        return (
            self.sharing == other.sharing
            and self.image_config == other.image_config
            and self.text_config == other.text_config
            and self.params.keys() == other.params.keys()
            and all(self.params[k].tobytes() == other.params[k].tobytes() for k in self.params)
        )

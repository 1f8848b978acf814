"""LightFormer assembly: residual backbone, buffer loop and two arcface heads."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .arcface import ClusterCenterBank, _cosines, init_bank, margin_logits
from .attention import HistoryBank, encoder_layer, init_encoder_params, subparams
from .config import ModelConfig
from .errors import ContractError, ShapeError
from .functional import conv2d
from .rng import make_rng
from .tensor import Tensor

DIRECTIONS = ("straight", "left")
PASS, STOP = 0, 1
CLASS_NAMES = ("pass", "stop")


# -- backbone -----------------------------------------------------------------
def _conv_param(rng, cout, cin, k, dtype, gain=1.0):
    std = gain * np.sqrt(2.0 / (cin * k * k))
    return Tensor(rng.standard_normal((cout, cin, k, k)) * std, requires_grad=True, dtype=dtype)


def _bias(n, dtype):
    return Tensor(np.zeros(n), requires_grad=True, dtype=dtype)


def init_backbone_params(rng, config, dtype=np.float32):
    """Weights for a ResNet-18-shaped network: stem + stages of basic blocks.

    Every stage downsamples by 2 in its first block (1x1 strided shortcut).
    There is no batch norm, so the second convolution of each block starts
    at half the He scale to keep the residual stream bounded.
    """
    p = {}
    p["stem.w"] = _conv_param(rng, config.stem_width, config.in_channels, 3, dtype)
    p["stem.b"] = _bias(config.stem_width, dtype)
    cin = config.stem_width
    for s, (width, blocks) in enumerate(zip(config.stage_widths, config.blocks_per_stage)):
        for b in range(blocks):
            pre = f"stage{s}.block{b}"
            block_in = cin if b == 0 else width
            p[f"{pre}.conv1.w"] = _conv_param(rng, width, block_in, 3, dtype)
            p[f"{pre}.conv1.b"] = _bias(width, dtype)
            p[f"{pre}.conv2.w"] = _conv_param(rng, width, width, 3, dtype, gain=0.5)
            p[f"{pre}.conv2.b"] = _bias(width, dtype)
            if b == 0:
                p[f"{pre}.down.w"] = _conv_param(rng, width, block_in, 1, dtype)
                p[f"{pre}.down.b"] = _bias(width, dtype)
        cin = width
    p["proj.w"] = _conv_param(rng, config.embed_dim, cin, 1, dtype, gain=np.sqrt(0.5))
    p["proj.b"] = _bias(config.embed_dim, dtype)
    return p


def backbone_forward(images, params, config):
    """Map (B, C_in, H, W) images to (B, D, H/32, W/32) feature maps."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    expected = (config.in_channels, config.image_height, config.image_width)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"backbone expects images of shape (B, {expected}), got {images.shape}")
    x = T.relu(conv2d(images, params["stem.w"], params["stem.b"], stride=2, padding=1))
    for s, blocks in enumerate(config.blocks_per_stage):
        for b in range(blocks):
            pre = f"stage{s}.block{b}"
            stride = 2 if b == 0 else 1
            h = T.relu(conv2d(x, params[f"{pre}.conv1.w"], params[f"{pre}.conv1.b"],
                              stride=stride, padding=1))
            h = conv2d(h, params[f"{pre}.conv2.w"], params[f"{pre}.conv2.b"], padding=1)
            shortcut = x if b else conv2d(x, params[f"{pre}.down.w"], params[f"{pre}.down.b"],
                                          stride=2)
            x = T.relu(h + shortcut)
    return conv2d(x, params["proj.w"], params["proj.b"])


# -- full model ---------------------------------------------------------------
@dataclass
class ModelOutput:
    straight_logits: Tensor  # (B, 2)
    left_logits: Tensor  # (B, 2)
    embedding: Tensor  # (B, D), the last history embedding
    straight_cosines: Tensor
    left_cosines: Tensor
    history: list  # E^1..E^N, each (B, 1, D)
    scale: float = 64.0

    def probabilities(self):
        """Margin-free class probabilities per direction, shape (B, 2, 2)."""
        z = np.stack([self.straight_cosines.data, self.left_cosines.data], axis=1) * self.scale
        z = np.exp(z - z.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def predictions(self):
        """Predicted class index per direction, shape (B, 2); 0 = pass, 1 = stop."""
        return np.stack([self.straight_cosines.data.argmax(-1),
                         self.left_cosines.data.argmax(-1)], axis=1)


class LightFormer:
    """Buffered right-of-way recogniser with a flat named parameter table."""

    def __init__(self, config=None, params=None, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else self._init_params()

    def _init_params(self):
        cfg = self.config
        params = {}
        rng = make_rng(cfg.seed, "backbone")
        for k, v in init_backbone_params(rng, cfg, self.dtype).items():
            params[f"backbone.{k}"] = v
        rng = make_rng(cfg.seed, "encoder")
        for k, v in init_encoder_params(rng, cfg.embed_dim, cfg.num_heads, cfg.num_points,
                                        self.dtype).items():
            params[f"encoder.{k}"] = v
        rng = make_rng(cfg.seed, "query")
        params["query"] = Tensor(rng.standard_normal((1, cfg.embed_dim)), requires_grad=True,
                                 dtype=self.dtype)
        for direction in DIRECTIONS:
            bank = init_bank(make_rng(cfg.seed, f"decoder.{direction}"), cfg.embed_dim,
                             cfg.centres_per_class, dtype=self.dtype)
            params[f"{direction}.centres"] = bank.centres
        return params

    def bank(self, direction):
        return ClusterCenterBank(self.params[f"{direction}.centres"], self.config.margin,
                                 self.config.scale)

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _check_buffers(self, buffers):
        x = buffers if isinstance(buffers, Tensor) else Tensor(np.asarray(buffers), dtype=self.dtype)
        cfg = self.config
        if x.ndim == 4:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 5:
            raise ShapeError(f"buffers must be (B, N, C, H, W), got {x.shape}")
        if x.shape[1] != cfg.buffer_size:
            raise ContractError(
                f"image buffer holds {x.shape[1]} frames, model expects N={cfg.buffer_size}")
        frame = (cfg.in_channels, cfg.image_height, cfg.image_width)
        if x.shape[2:] != frame:
            raise ShapeError(f"frames must be {frame}, got {x.shape[2:]}")
        return x

    def feature_maps(self, buffers):
        """Backbone features for every frame, shape (B, N, D, h, w)."""
        x = self._check_buffers(buffers)
        b, n = x.shape[:2]
        flat = T.reshape(x, (b * n,) + x.shape[2:])
        maps = backbone_forward(flat, subparams(self.params, "backbone"), self.config)
        return T.reshape(maps, (b, n) + maps.shape[1:])

    def forward(self, buffers, targets=None):
        """Run the buffer loop and both decoders.

        ``targets`` (B, 2) of class indices switches on the arcface margin for
        the training loss; predictions never use it.
        """
        cfg = self.config
        maps = self.feature_maps(buffers)
        b = maps.shape[0]
        enc = subparams(self.params, "encoder")
        query = T.broadcast_to(T.reshape(self.params["query"], (1, 1, cfg.embed_dim)),
                               (b, 1, cfg.embed_dim))
        history = HistoryBank(cfg.history_mode)
        produced = []
        for i in range(cfg.buffer_size):
            e = encoder_layer(query, maps[:, i], history, enc, cfg.num_heads, cfg.num_points,
                              ablate_tsa=cfg.ablate_tsa)
            history.append(e)
            produced.append(e)
        embedding = T.reshape(produced[-1], (b, cfg.embed_dim))

        if targets is not None:
            targets = np.asarray(targets)
            if targets.shape != (b, 2):
                raise ShapeError(f"targets must be (B, 2) = ({b}, 2), got {targets.shape}")
        out = {}
        for col, direction in enumerate(DIRECTIONS):
            bank = self.bank(direction)
            cos = _cosines(embedding, bank)
            tgt = None if targets is None else targets[:, col].astype(np.int64)
            out[direction] = (cos, margin_logits(cos, bank.scale, bank.margin, tgt))
        return ModelOutput(out["straight"][1], out["left"][1], embedding,
                           out["straight"][0], out["left"][0], produced, cfg.scale)

    __call__ = forward

    def predict(self, buffers):
        with T.no_grad():
            return self.forward(buffers).predictions()

    def predict_proba(self, buffers):
        with T.no_grad():
            return self.forward(buffers).probabilities()

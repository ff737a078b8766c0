"""U-Net encoder-decoder with named activation taps and complexity accounting."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError, TapLookupError


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    num_classes: int = 2
    encoder_widths: tuple[int, ...] = (64, 128, 256, 512)
    bottleneck_width: int = 1024
    conv_kernel: int = 3
    pool_factor: int = 2
    batch_norm: bool = False
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.encoder_widths)
        object.__setattr__(self, "encoder_widths", widths)
        if len(widths) < 2:
            raise ConfigError(f"U-Net depth must be >= 2, got {len(widths)}")
        chain = widths + (self.bottleneck_width,)
        if any(b <= a for a, b in zip(chain, chain[1:])) or widths[0] < 1:
            raise ConfigError(f"widths must be strictly increasing, got {chain}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.pool_factor < 2:
            raise ConfigError("pool_factor must be >= 2")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("in_channels must be >= 1 and num_classes >= 2")

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d


@dataclass
class Prediction:
    """Channels-last outputs, B x S x S x C."""

    probs: torch.Tensor
    logits: torch.Tensor


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, k: int, batch_norm: bool):
        layers: list[nn.Module] = []
        for c in (cin, cout):
            layers.append(nn.Conv2d(c, cout, k, padding=k // 2, bias=not batch_norm))
            if batch_norm:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.ReLU(inplace=False))
        super().__init__(*layers)


class UNet(nn.Module):
    """Same-padding U-Net: output spatial size equals input size."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        k, pf, bn = config.conv_kernel, config.pool_factor, config.batch_norm
        widths = config.encoder_widths

        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for w in widths:
            self.encoders.append(DoubleConv(cin, w, k, bn))
            cin = w
        self.pool = nn.MaxPool2d(pf)
        self.bottleneck = DoubleConv(cin, config.bottleneck_width, k, bn)

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        cin = config.bottleneck_width
        for w in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(cin, w, pf, stride=pf))
            self.decoders.append(DoubleConv(2 * w, w, k, bn))
            cin = w
        self.head = nn.Conv2d(cin, config.num_classes, 1)

        self.tap_names = (
            [f"enc{i}" for i in range(config.depth)]
            + ["bottleneck"]
            + [f"dec{i}" for i in range(config.depth)]
        )
        self.reset_parameters(config.seed)

    @property
    def last_decoder_tap(self) -> str:
        return self.tap_names[-1]

    def reset_parameters(self, seed: int, modules=None):
        """He fan-in normal weights and zero biases, drawn from a private generator."""
        gen = torch.Generator().manual_seed(int(seed))
        for root in modules if modules is not None else [self]:
            for mod in root.modules():
                if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                    # fan_in of a transposed conv is in_channels * k * k
                    fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                    std = (2.0 / fan_in) ** 0.5
                    with torch.no_grad():
                        mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * std)
                        if mod.bias is not None:
                            mod.bias.zero_()
                elif isinstance(mod, nn.BatchNorm2d):
                    mod.reset_parameters()

    def check_input(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected B x {self.config.in_channels} x S x S input, got {tuple(x.shape)}")
        div = self.config.pool_factor ** self.config.depth
        h, w = x.shape[-2:]
        if h % div or w % div:
            raise ShapeError(f"spatial size {h}x{w} must be divisible by {div} (pool_factor^depth)")

    def forward_with_taps(self, x: torch.Tensor, skip_scale: float = 1.0):
        """Return (logits NCHW, ordered dict tap name -> activation)."""
        self.check_input(x)
        taps: dict[str, torch.Tensor] = {}
        skips = []
        h = x
        for i, enc in enumerate(self.encoders):
            h = enc(h)
            taps[f"enc{i}"] = h
            skips.append(h)
            h = self.pool(h)
        h = self.bottleneck(h)
        taps["bottleneck"] = h
        for i, (up, dec) in enumerate(zip(self.ups, self.decoders)):
            h = up(h)
            skip = skips[-(i + 1)]
            h = dec(torch.cat([h, skip * skip_scale if skip_scale != 1.0 else skip], dim=1))
            taps[f"dec{i}"] = h
        return self.head(h), taps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(x)[0]


def build_unet(config: UNetConfig | None = None) -> UNet:
    return UNet(config or UNetConfig())


def _to_nchw(batch) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.ascontiguousarray(batch))
    if batch.ndim == 3:
        batch = batch[None]
    return batch.permute(0, 3, 1, 2).contiguous()


def _prediction(logits: torch.Tensor) -> Prediction:
    logits = logits.permute(0, 2, 3, 1)
    return Prediction(probs=torch.softmax(logits, dim=-1), logits=logits)


def forward(model: UNet, batch) -> Prediction:
    """Inference on a channels-last batch (B x S x S x C in [0, 1])."""
    x = _to_nchw(batch).to(next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(x)
    finally:
        model.train(was_training)
    return _prediction(logits)


class TapCapture:
    """Per-call handle over retained tap activations and their gradients."""

    def __init__(self, activations: dict[str, torch.Tensor]):
        self.activations = activations

    def _get(self, name: str) -> torch.Tensor:
        try:
            return self.activations[name]
        except KeyError:
            raise TapLookupError(f"unknown tap {name!r}; available: {', '.join(self.activations)}") from None

    def activation(self, name: str) -> torch.Tensor:
        return self._get(name)

    def gradient(self, scalar: torch.Tensor, name: str) -> torch.Tensor:
        """d(scalar)/d(activation) for one tap, without touching parameter .grad."""
        act = self._get(name)
        (grad,) = torch.autograd.grad(scalar, act, retain_graph=True, allow_unused=True)
        return torch.zeros_like(act) if grad is None else grad


def forward_with_taps(model: UNet, batch, taps=None):
    """Differentiable forward returning (Prediction, {tap: activation NCHW}, TapCapture).

    ``taps`` restricts the returned map to the named taps; unknown names raise
    :class:`TapLookupError`.
    """
    x = _to_nchw(batch).to(next(model.parameters()).dtype)
    logits, acts = model.forward_with_taps(x)
    if taps is not None:
        missing = [t for t in taps if t not in acts]
        if missing:
            raise TapLookupError(f"unknown tap(s) {missing}; available: {', '.join(acts)}")
        acts = {t: acts[t] for t in taps}
    return _prediction(logits), acts, TapCapture(acts)


# -- accounting -------------------------------------------------------------

REFERENCE_PARAMS = 32_521_250
REFERENCE_GFLOPS = 50.902


@dataclass
class Complexity:
    params: int
    macs: int
    flops: int
    breakdown: dict = field(default_factory=dict)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def complexity(model: nn.Module, input_shape) -> Complexity:
    """Count MACs and FLOPs for one forward pass of ``input_shape`` (B, C, H, W).

    FLOPs are 2 * MACs for conv / transposed conv / linear, plus one op per
    output element for bias adds, ReLU and batch norm, k*k per pooled output,
    and 3 per element for the trailing softmax. Shapes are propagated on the
    meta device so no real compute is spent.
    """
    counts = {"conv_macs": 0, "elementwise": 0}

    def hook(mod, inputs, out):
        n_out = out.numel()
        if isinstance(mod, nn.Conv2d):
            kh, kw = mod.kernel_size
            counts["conv_macs"] += n_out * (mod.in_channels // mod.groups) * kh * kw
            if mod.bias is not None:
                counts["elementwise"] += n_out
        elif isinstance(mod, nn.ConvTranspose2d):
            kh, kw = mod.kernel_size
            counts["conv_macs"] += inputs[0].numel() * mod.out_channels * kh * kw // mod.groups
            if mod.bias is not None:
                counts["elementwise"] += n_out
        elif isinstance(mod, nn.Linear):
            counts["conv_macs"] += n_out * mod.in_features
            if mod.bias is not None:
                counts["elementwise"] += n_out
        elif isinstance(mod, (nn.ReLU, nn.BatchNorm2d)):
            counts["elementwise"] += n_out
        elif isinstance(mod, nn.MaxPool2d):
            k = mod.kernel_size if isinstance(mod.kernel_size, int) else mod.kernel_size[0]
            counts["elementwise"] += n_out * k * k

    meta = copy.deepcopy(model).to("meta")
    handles = [m.register_forward_hook(hook) for m in meta.modules()]
    try:
        with torch.no_grad():
            out = meta(torch.empty(tuple(input_shape), device="meta"))
    finally:
        for h in handles:
            h.remove()
    softmax_ops = 3 * out.numel()
    macs = counts["conv_macs"]
    flops = 2 * macs + counts["elementwise"] + softmax_ops
    return Complexity(
        params=count_params(model),
        macs=macs,
        flops=flops,
        breakdown={**counts, "softmax": softmax_ops},
    )


def count_flops(model: nn.Module, input_shape) -> int:
    return complexity(model, input_shape).flops

"""The trainable networks.

Grounding path: a small VGG-like audio encoder with global max pooling, an MLP
object encoder and a 3-layer MLP grounding head with softmax. Separation path: a
U-Net over the mixture magnitude whose C-channel output is combined with each
object's projected embedding by a per-pixel dot product, a scalar affine map and
a sigmoid. The object encoder is shared by both paths; audio encoder and U-Net share
nothing.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn

from .exceptions import ConfigurationError, InputError, NumericalError
from .logger import get_logger
from .tfspace import MagSpec, StftConfig

logger = get_logger(__name__)


@dataclass(frozen=True)
class ArchConfig:
    feature_dim: int = 64
    embed_dim: int = 128
    object_hidden: int = 128
    audio_widths: Tuple[int, ...] = (16, 32, 64)
    grounder_widths: Tuple[int, ...] = (128, 64)
    unet_base: int = 16
    unet_levels: int = 5
    sep_channels: int = 32
    net_freq: int = 256
    net_time: int = 256
    log_compress: bool = False

    def __post_init__(self):
        if len(self.grounder_widths) != 2:
            raise ConfigurationError("the grounding head has exactly two hidden layers")
        if min(self.net_freq, self.net_time) < 8:
            raise ConfigurationError("the network grid must be at least 8x8")
        scale = 2**self.unet_depth
        if self.net_freq % scale or self.net_time % scale:
            raise ConfigurationError(
                f"net grid {self.net_grid} must be divisible by {scale} for a {self.unet_depth}-level U-Net"
            )

    @property
    def net_grid(self) -> Tuple[int, int]:
        return (self.net_freq, self.net_time)

    @property
    def unet_depth(self) -> int:
        # 256x256 -> 5 levels, 64x64 -> 4, 32x32 -> 3
        fit = int(math.log2(min(self.net_freq, self.net_time))) - 2
        return max(1, min(self.unet_levels, fit))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["audio_widths"] = list(self.audio_widths)
        data["grounder_widths"] = list(self.grounder_widths)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArchConfig":
        data = dict(data)
        data["audio_widths"] = tuple(data["audio_widths"])
        data["grounder_widths"] = tuple(data["grounder_widths"])
        return cls(**data)

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> "ArchConfig":
        model = settings["model"]
        stft = settings["stft"]
        return cls(
            feature_dim=settings["world"]["feature_dim"],
            embed_dim=model["embed_dim"],
            object_hidden=model["object_hidden"],
            audio_widths=tuple(model["audio_widths"]),
            grounder_widths=tuple(model["grounder_widths"]),
            unet_base=model["unet_base"],
            unet_levels=model["unet_levels"],
            sep_channels=model["sep_channels"],
            net_freq=stft["net_freq"],
            net_time=stft["net_time"],
            log_compress=stft["log_compress"],
        )


@dataclass(frozen=True)
class GroundingScore:
    probs: Tuple[float, float]

    @classmethod
    def from_tensor(cls, probs: Tensor) -> "GroundingScore":
        values = probs.detach().reshape(-1).tolist()
        return cls((float(values[0]), float(values[1])))


@dataclass
class SeparatorOutput:
    feature_map: Tensor  # [C, F, T]
    masks: Tensor  # [N, F, T]
    separated: Tensor  # [N, F, T]


def global_max_pool(x: Tensor) -> Tensor:
    return torch.amax(x, dim=(-2, -1))


class AudioEncoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        layers: List[nn.Module] = []
        in_ch = 1
        for width in (*arch.audio_widths, arch.embed_dim):
            layers += [nn.Conv2d(in_ch, width, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            in_ch = width
        self.blocks = nn.Sequential(*layers)

    def feature_map(self, spec: Tensor) -> Tensor:
        return self.blocks(spec)

    def forward(self, spec: Tensor) -> Tensor:
        return global_max_pool(self.feature_map(spec))


class ObjectEncoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(arch.feature_dim, arch.object_hidden),
            nn.ReLU(),
            nn.Linear(arch.object_hidden, arch.embed_dim),
        )

    def forward(self, features: Tensor) -> Tensor:
        return self.mlp(features)


class GroundingHead(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        w1, w2 = arch.grounder_widths
        self.mlp = nn.Sequential(
            nn.Linear(2 * arch.embed_dim, w1),
            nn.ReLU(),
            nn.Linear(w1, w2),
            nn.ReLU(),
            nn.Linear(w2, 2),
        )
        # start at maximal uncertainty
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, f_s: Tensor, f_o: Tensor) -> Tensor:
        f_s, f_o = torch.broadcast_tensors(f_s, f_o)
        return torch.softmax(self.mlp(torch.cat([f_s, f_o], dim=-1)), dim=-1)


class UNet(nn.Module):
    def __init__(self, base: int, depth: int, out_channels: int):
        super().__init__()
        widths = [base * 2 ** min(i, 3) for i in range(depth)]

        self.downs = nn.ModuleList()
        in_ch = 1
        for width in widths:
            self.downs.append(
                nn.Sequential(nn.Conv2d(in_ch, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2))
            )
            in_ch = width

        self.ups = nn.ModuleList()
        for i in range(depth):
            level = depth - 2 - i
            out = widths[level] if level >= 0 else base
            skip = widths[level] if level >= 0 else 1
            self.ups.append(
                nn.Sequential(nn.ConvTranspose2d(in_ch, out, 4, stride=2, padding=1), nn.ReLU())
            )
            in_ch = out + skip

        self.head = nn.Conv2d(in_ch, out_channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        skips = [x]
        h = x
        for down in self.downs:
            h = down(h)
            skips.append(h)
        for i, up in enumerate(self.ups):
            h = torch.cat([up(h), skips[-(i + 2)]], dim=1)
        return self.head(h)


class Synthesizer(nn.Module):
    """Mask logits from a linearly transformed dot product of audio and object features."""

    def __init__(self, embed_dim: int, channels: int):
        super().__init__()
        self.project = nn.Linear(embed_dim, channels)
        self.scale = nn.Parameter(torch.ones(1))
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, feature_map: Tensor, f_o: Tensor) -> Tensor:
        v = self.project(f_o)
        return self.scale * torch.einsum("nc,cft->nft", v, feature_map) + self.bias


class Separator(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.unet = UNet(arch.unet_base, arch.unet_depth, arch.sep_channels)
        self.synth = Synthesizer(arch.embed_dim, arch.sep_channels)


class ColearnModel(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.audio_encoder = AudioEncoder(arch)
        self.object_encoder = ObjectEncoder(arch)
        self.grounder = GroundingHead(arch)
        self.separator = Separator(arch)

    def _net_input(self, mags: Tensor) -> Tensor:
        if tuple(mags.shape[-2:]) != self.arch.net_grid:
            raise InputError(f"spectrogram shape {tuple(mags.shape[-2:])} != net grid {self.arch.net_grid}")
        if self.arch.log_compress:
            mags = torch.log1p(mags)
        return mags.unsqueeze(-3)

    def encode_audio(self, mags: Tensor) -> Tensor:
        """[B, F, T] magnitudes -> [B, E] embeddings."""
        return self.audio_encoder(self._net_input(mags))

    def encode_objects(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.arch.feature_dim:
            raise InputError(f"object feature dimension {features.shape[-1]} != {self.arch.feature_dim}")
        return self.object_encoder(features)

    def ground(self, f_s: Tensor, f_o: Tensor) -> Tensor:
        if f_s.shape[-1] != self.arch.embed_dim or f_o.shape[-1] != self.arch.embed_dim:
            raise InputError("grounding needs embeddings of dimension embed_dim")
        return self.grounder(f_s, f_o)

    def separation_features(self, mixtures: Tensor) -> Tensor:
        """[B, F, T] mixture magnitudes -> [B, C, F, T] U-Net features."""
        return self.separator.unet(self._net_input(mixtures))

    def masks(self, feature_map: Tensor, f_o: Tensor) -> Tensor:
        """One sample's [C, F, T] features and [N, E] objects -> [N, F, T] soft masks."""
        return torch.sigmoid(self.separator.synth(feature_map, f_o))

    def grounding_parameters(self):
        for module in (self.audio_encoder, self.object_encoder, self.grounder):
            yield from module.parameters()

    def separation_parameters(self):
        for module in (self.object_encoder, self.separator):
            yield from module.parameters()


@dataclass
class ModelState:
    model: ColearnModel
    stft: StftConfig
    mode: str = "ccol"
    stage: int = 0
    epoch: int = 0
    step: int = 0
    optimizer_state: Optional[Dict[str, Any]] = None
    settings_hash: str = ""
    complete: bool = False
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def arch(self) -> ArchConfig:
        return self.model.arch

    @classmethod
    def fresh(cls, arch: ArchConfig, stft: StftConfig, seed: int = 0, mode: str = "ccol",
              dtype: torch.dtype = torch.float32) -> "ModelState":
        torch.manual_seed(seed)
        model = ColearnModel(arch).to(dtype)
        return cls(model=model, stft=stft, mode=mode)


def parameter_checksum(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# Operation-level helpers


def _as_tensor(values, model: nn.Module) -> Tensor:
    ref = next(model.parameters())
    if isinstance(values, MagSpec):
        values = values.values
    return torch.as_tensor(np.asarray(values) if not torch.is_tensor(values) else values,
                           dtype=ref.dtype, device=ref.device)


def encode_audio(model: ColearnModel, spec) -> Tensor:
    mags = _as_tensor(spec, model)
    if mags.dim() == 2:
        return model.encode_audio(mags.unsqueeze(0))[0]
    return model.encode_audio(mags)


def encode_object(model: ColearnModel, obj) -> Tensor:
    feature = _as_tensor(getattr(obj, "raw_feature", obj), model)
    if feature.dim() == 1:
        return model.encode_objects(feature.unsqueeze(0))[0]
    return model.encode_objects(feature)


def ground(model: ColearnModel, f_s: Tensor, f_o: Tensor) -> Tensor:
    return model.ground(f_s, f_o)


def binarize(score: Union[GroundingScore, Sequence[float], Tensor]):
    """1 when g[0] >= 0.5 (inclusive), else 0. Tensors map elementwise over the last axis."""
    if torch.is_tensor(score):
        return (score[..., 0] >= 0.5).long()
    probs = score.probs if isinstance(score, GroundingScore) else score
    return int(probs[0] >= 0.5)


def separate(model: ColearnModel, mixture, f_o: Tensor) -> SeparatorOutput:
    mix = _as_tensor(mixture, model)
    if mix.dim() != 2:
        raise InputError("separate expects a single [F, T] mixture magnitude")
    if f_o.dim() == 1:
        f_o = f_o.unsqueeze(0)
    feature_map = model.separation_features(mix.unsqueeze(0))[0]
    masks = model.masks(feature_map, f_o)
    return SeparatorOutput(feature_map=feature_map, masks=masks, separated=mix.unsqueeze(0) * masks)


def gradients(
    model: nn.Module,
    loss_fn: Callable[[], Tensor],
    parameters: Optional[Dict[str, Tensor]] = None,
) -> Dict[str, Tensor]:
    """Gradient of ``loss_fn()`` with respect to every trainable parameter, by name."""
    named = parameters or {n: p for n, p in model.named_parameters() if p.requires_grad}
    loss = loss_fn()
    if not torch.is_tensor(loss):
        loss = torch.as_tensor(loss)
    if not torch.isfinite(loss).all():
        raise NumericalError(
            f"loss is not finite ({loss.item()})",
            diagnostics={"loss": float(loss.detach().item())},
        )
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named.items()}

    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
    result = {}
    for (name, p), g in zip(named.items(), grads):
        result[name] = torch.zeros_like(p) if g is None else g
    return result

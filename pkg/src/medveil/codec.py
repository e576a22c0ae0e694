"""Neural codec: face encoding, medical fusion, password-conditioned identity
encryption/decryption, image decoding, and the patch discriminator.

Feature shapes for an input [3,H,W]:
    face feature   [512, H/32, W/32]
    medical feature[320, H/16, W/16]   (produced by medveil.medenc)
    fused feature  [512, H/32, W/32]
    encrypted      [T, 512] tokens, T = (H/32)*(W/32)

All forward operations are pure functions of (parameters, inputs): no dropout,
no batch statistics, so repeated calls are bit-identical and concurrent
read-only use is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ShapeMismatchError, TokenCountError
from .imaging import validate_image

FACE_CHANNELS = 512
MED_CHANNELS = 320
PASSWORD_DIM = 512
FACE_STRIDE = 32
MED_STRIDE = 16
DECODER_ARCH_ID = "res-upsample-v1"


def _gn(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int | None = None):
        super().__init__()
        cout = cout or cin
        self.norm1 = _gn(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


def _stage_widths(base: int, stages: int, final: int) -> list[int]:
    widths = [min(base * 2 ** (i + 1), final) for i in range(stages)]
    widths[-1] = final
    return widths


class FaceEncoder(nn.Module):
    """Strided-convolution residual encoder: 5 downsampling stages to /32."""

    def __init__(self, base: int = 64):
        super().__init__()
        widths = _stage_widths(base, 5, FACE_CHANNELS)
        self.stem = nn.Conv2d(3, base, 3, padding=1)
        stages = []
        cin = base
        for w in widths:
            stages.append(
                nn.Sequential(nn.Conv2d(cin, w, 3, stride=2, padding=1), ResBlock(w))
            )
            cin = w
        self.stages = nn.Sequential(*stages)

    def forward(self, x):
        return self.stages(self.stem(x))


class ImageDecoder(nn.Module):
    """Nearest-upsample + convolution residual decoder, tanh-bounded output."""

    def __init__(self, base: int = 64):
        super().__init__()
        widths = _stage_widths(base, 5, FACE_CHANNELS)
        self.entry = ResBlock(FACE_CHANNELS)
        stages = []
        cin = FACE_CHANNELS
        for w in list(reversed(widths[:-1])) + [base]:
            stages.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(cin, w, 3, padding=1),
                    ResBlock(w),
                )
            )
            cin = w
        self.stages = nn.Sequential(*stages)
        self.head = nn.Sequential(_gn(base), nn.SiLU(), nn.Conv2d(base, 3, 3, padding=1))

    def forward(self, f):
        h = self.stages(self.entry(f))
        return torch.tanh(self.head(h))


class MedicalFusion(nn.Module):
    """Downscale the medical feature 2x, concatenate with the face feature,
    and reduce 832 -> 512 channels through three residual blocks.

    With ``use_medical=False`` the concatenation is skipped and the residual
    stack runs on the face feature alone (ablation hook).
    """

    def __init__(self, use_medical: bool = True):
        super().__init__()
        self.use_medical = use_medical
        if use_medical:
            self.downscale = nn.Conv2d(MED_CHANNELS, MED_CHANNELS, 3, stride=2, padding=1)
            first = FACE_CHANNELS + MED_CHANNELS
        else:
            first = FACE_CHANNELS
        self.blocks = nn.Sequential(
            ResBlock(first, FACE_CHANNELS),
            ResBlock(FACE_CHANNELS),
            ResBlock(FACE_CHANNELS),
        )

    def forward(self, f_face: torch.Tensor, f_med: torch.Tensor | None):
        if f_face.shape[-3] != FACE_CHANNELS:
            raise ShapeMismatchError(f"face feature must have {FACE_CHANNELS} channels")
        if not self.use_medical:
            return self.blocks(f_face)
        if f_med is None:
            raise ShapeMismatchError("medical fusion is enabled but f_med is missing")
        if f_med.shape[-3] != MED_CHANNELS:
            raise ShapeMismatchError(f"medical feature must have {MED_CHANNELS} channels")
        if (f_med.shape[-2], f_med.shape[-1]) != (2 * f_face.shape[-2], 2 * f_face.shape[-1]):
            raise ShapeMismatchError(
                f"medical feature spatial dims {tuple(f_med.shape[-2:])} must be "
                f"2x the face feature dims {tuple(f_face.shape[-2:])}"
            )
        h = self.downscale(f_med)
        return self.blocks(torch.cat([f_face, h], dim=-3))


@dataclass
class EncryptedFeature:
    """Flattened encrypted feature: [B,T,512] tokens plus spatial metadata."""

    tokens: torch.Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.tokens.ndim == 2:
            self.tokens = self.tokens.unsqueeze(0)
        if self.tokens.ndim != 3 or self.tokens.shape[-1] != FACE_CHANNELS:
            raise TokenCountError(
                f"tokens must be [B,T,{FACE_CHANNELS}], got {tuple(self.tokens.shape)}"
            )
        if self.tokens.shape[1] != self.h * self.w:
            raise TokenCountError(
                f"token count {self.tokens.shape[1]} != {self.h}x{self.w}"
            )

    def to_map(self) -> torch.Tensor:
        """Unflatten back to [B,512,h,w]; exact inverse of flatten_feature."""
        b, t, c = self.tokens.shape
        return self.tokens.transpose(1, 2).reshape(b, c, self.h, self.w)


def flatten_feature(f: torch.Tensor) -> EncryptedFeature:
    if f.ndim == 3:
        f = f.unsqueeze(0)
    b, c, h, w = f.shape
    return EncryptedFeature(f.flatten(2).transpose(1, 2), h, w)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TokenTransformer(nn.Module):
    """Pre-norm transformer over spatial feature tokens plus one password token.

    Spatial tokens carry learned factored 2-D position embeddings; the
    password token has its own distinguished position embedding. The
    password token is stripped from the output.
    """

    def __init__(self, depth: int = 4, heads: int = 8, mlp_ratio: int = 4, max_grid: int = 32):
        super().__init__()
        dim = FACE_CHANNELS
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, heads, mlp_ratio) for _ in range(depth)
        )
        self.row_pos = nn.Parameter(torch.randn(max_grid, dim) * 0.02)
        self.col_pos = nn.Parameter(torch.randn(max_grid, dim) * 0.02)
        self.password_pos = nn.Parameter(torch.randn(dim) * 0.02)
        self.norm = nn.LayerNorm(dim)
        self.max_grid = max_grid
        self.depth = depth

    def forward(self, tokens: torch.Tensor, hw: tuple[int, int], password: torch.Tensor):
        h, w = hw
        if h > self.max_grid or w > self.max_grid:
            raise ShapeMismatchError(
                f"token grid {h}x{w} exceeds the positional table ({self.max_grid})"
            )
        b, t, dim = tokens.shape
        if t != h * w:
            raise TokenCountError(f"token count {t} != {h}x{w}")
        if password.ndim == 1:
            password = password.unsqueeze(0)
        if password.shape[-1] != PASSWORD_DIM:
            raise ShapeMismatchError(f"password must have dimension {PASSWORD_DIM}")
        if password.shape[0] == 1 and b > 1:
            password = password.expand(b, -1)
        pos = (self.row_pos[:h, None, :] + self.col_pos[None, :w, :]).reshape(1, t, dim)
        x = tokens + pos
        pw = (password + self.password_pos).unsqueeze(1)
        x = torch.cat([x, pw], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[:, :t, :]


class PatchDiscriminator(nn.Module):
    """Patch realness critic: n stride-2 conv stages, one score per patch cell."""

    def __init__(self, base: int = 64, n_layers: int = 4):
        super().__init__()
        layers = [nn.Conv2d(3, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        cin = base
        for i in range(1, n_layers):
            cout = min(base * 2**i, 512)
            layers += [
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                _gn(cout),
                nn.LeakyReLU(0.2),
            ]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)
        self.n_layers = n_layers

    def forward(self, x):
        return self.net(x)


@dataclass
class ModelConfig:
    image_size: int = 256
    base_channels: int = 64
    encryptor_depth: int = 4
    encryptor_heads: int = 8
    mlp_ratio: int = 4
    disc_base_channels: int = 64
    disc_layers: int = 4
    use_medical_fusion: bool = True
    max_grid: int = 32

    def __post_init__(self):
        if self.image_size % FACE_STRIDE:
            raise ShapeMismatchError("image_size must be a multiple of 32")
        if self.base_channels % 8:
            raise ShapeMismatchError("base_channels must be a multiple of 8")


def _ensure_batch(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    if x.ndim == ndim - 1:
        return x.unsqueeze(0), True
    return x, False


class CodecModel(nn.Module):
    """The full de-identification codec plus its adversarial critic."""

    def __init__(self, config: ModelConfig | None = None, med_meta: dict | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        self.face_encoder = FaceEncoder(c.base_channels)
        self.fusion = MedicalFusion(c.use_medical_fusion)
        self.encryptor = TokenTransformer(c.encryptor_depth, c.encryptor_heads, c.mlp_ratio, c.max_grid)
        self.decryptor = TokenTransformer(c.encryptor_depth, c.encryptor_heads, c.mlp_ratio, c.max_grid)
        self.image_decoder = ImageDecoder(c.base_channels)
        self.discriminator = PatchDiscriminator(c.disc_base_channels, c.disc_layers)
        # provenance of the frozen medical encoder this codec was trained with
        self.med_meta = dict(med_meta or {})

    # ---- sub-operations -------------------------------------------------

    def encode_face(self, x: torch.Tensor) -> torch.Tensor:
        x, squeeze = _ensure_batch(x, 4)
        validate_image(x)
        f = self.face_encoder(x)
        return f[0] if squeeze else f

    def fuse_medical(self, f_face: torch.Tensor, f_med: torch.Tensor | None) -> torch.Tensor:
        f_face, squeeze = _ensure_batch(f_face, 4)
        if f_med is not None:
            f_med, _ = _ensure_batch(f_med, 4)
        f = self.fusion(f_face, f_med)
        return f[0] if squeeze else f

    def encrypt(self, f: torch.Tensor, password: torch.Tensor) -> EncryptedFeature:
        f, _ = _ensure_batch(f, 4)
        enc = flatten_feature(f)
        out = self.encryptor(enc.tokens, (enc.h, enc.w), password)
        return EncryptedFeature(out, enc.h, enc.w)

    def decrypt(self, enc: EncryptedFeature, password: torch.Tensor) -> torch.Tensor:
        if enc.tokens.shape[1] != enc.h * enc.w:
            raise TokenCountError(f"token count {enc.tokens.shape[1]} != {enc.h}x{enc.w}")
        out = self.decryptor(enc.tokens, (enc.h, enc.w), password)
        return EncryptedFeature(out, enc.h, enc.w).to_map()

    def decode_image(self, f: torch.Tensor) -> torch.Tensor:
        f, squeeze = _ensure_batch(f, 4)
        if f.shape[-3] != FACE_CHANNELS:
            raise ShapeMismatchError(f"decoder expects {FACE_CHANNELS} channels")
        x = self.image_decoder(f)
        return x[0] if squeeze else x

    def discriminate(self, x: torch.Tensor) -> torch.Tensor:
        x, squeeze = _ensure_batch(x, 4)
        s = self.discriminator(x)
        return s[0] if squeeze else s

    # ---- composite paths -------------------------------------------------

    def deidentify(
        self, x: torch.Tensor, password: torch.Tensor, med_encoder=None
    ) -> tuple[torch.Tensor, EncryptedFeature]:
        """Full encryption path; returns the encrypted image and feature."""
        x_b, squeeze = _ensure_batch(x, 4)
        f_face = self.encode_face(x_b)
        f_med = med_encoder.extract(x_b) if self.config.use_medical_fusion else None
        f = self.fuse_medical(f_face, f_med)
        enc = self.encrypt(f, password)
        x_enc = self.decode_image(enc.to_map())
        return (x_enc[0] if squeeze else x_enc), enc

    def recover_from_feature(self, enc: EncryptedFeature, password: torch.Tensor) -> torch.Tensor:
        """Exact recovery path from a stored encrypted feature."""
        return self.decode_image(self.decrypt(enc, password))

    def recover_from_image(
        self, x_enc: torch.Tensor, password: torch.Tensor, med_encoder=None
    ) -> torch.Tensor:
        """Best-effort recovery: re-encode the encrypted image to approximate
        the encrypted feature, then decrypt. Callers must flag the result as
        approximate."""
        x_b, squeeze = _ensure_batch(x_enc, 4)
        f_face = self.encode_face(x_b)
        f_med = med_encoder.extract(x_b) if self.config.use_medical_fusion else None
        f = self.fuse_medical(f_face, f_med)
        out = self.recover_from_feature(flatten_feature(f), password)
        return out[0] if squeeze else out

    # ---- parameter groups -------------------------------------------------

    def generator_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("discriminator."):
                yield p

    def discriminator_parameters(self):
        return self.discriminator.parameters()

    def header_fields(self, training_step: int = 0) -> dict:
        return {
            "format_version": 1,
            "image_size": self.config.image_size,
            "password_dim": PASSWORD_DIM,
            "encryptor_depth": self.config.encryptor_depth,
            "decoder_arch_id": DECODER_ARCH_ID,
            "training_step": training_step,
        }


def build_codec(config: ModelConfig, seed: int = 0, med_meta: dict | None = None) -> CodecModel:
    """Construct a codec with seeded parameter initialization."""
    torch.manual_seed(seed)
    return CodecModel(config, med_meta=med_meta)

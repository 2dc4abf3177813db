"""Transformer geometry and closed-form cost models.

Everything in this module is plain arithmetic over a static model profile:
parameter counts, forward/backward FLOPs on either side of the cut layer,
per-block and device-side memory, and communication payload sizes. All
functions are pure and deterministic.

Unit discipline: parameter counts are element counts, memory and payloads are
bytes (multiplied by the per-parameter byte width), FLOPs are raw operation
counts. Conversion to bits happens only at the link-rate boundary in
``sftsim.wireless``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class OptimizerKind(str, Enum):
    """Optimizer state footprint class.

    SGD keeps one momentum copy, Adam keeps momentum plus variance, and
    mixed-precision Adam additionally keeps a full-precision parameter copy.
    """

    SGD = "sgd"
    ADAM = "adam"
    ADAM_MIXED = "adam_mixed"

    @property
    def state_multiplier(self) -> int:
        return {OptimizerKind.SGD: 1, OptimizerKind.ADAM: 2, OptimizerKind.ADAM_MIXED: 3}[self]


@dataclass(frozen=True)
class ModelProfile:
    """Static geometry of the transformer being fine-tuned.

    ``num_tokens`` counts the class token (197 for 224x224 images with 16x16
    patches); ``mlp_dim`` must equal ``4 * embed_dim``.
    """

    num_layers: int
    embed_dim: int
    num_heads: int
    num_tokens: int
    patch_size: int
    img_channels: int
    num_classes: int
    lora_rank: int
    mlp_dim: int = 0
    bytes_per_param: int = 4
    optimizer_kind: OptimizerKind = OptimizerKind.SGD

    def __post_init__(self) -> None:
        if self.mlp_dim == 0:
            object.__setattr__(self, "mlp_dim", 4 * self.embed_dim)
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.mlp_dim != 4 * self.embed_dim:
            raise ValueError("mlp_dim must equal 4 * embed_dim")
        if not 0 <= self.lora_rank < min(self.embed_dim, self.mlp_dim):
            raise ValueError("lora_rank must satisfy 0 <= r < min(embed_dim, mlp_dim)")
        if self.bytes_per_param not in (2, 4):
            raise ValueError("bytes_per_param must be 2 (fp16) or 4 (fp32)")
        for name in ("num_heads", "num_tokens", "patch_size", "img_channels", "num_classes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class SplitConfig:
    """Cut position and training loop sizes.

    ``cut_layer`` is the number of transformer blocks executed on the device.
    Degenerate values (cut_layer 0 or L, batch 0) are accepted here so the
    cost formulas can be evaluated at their boundaries; the scenario loader
    enforces the operational ranges 0 < l < L and batch >= 1.
    """

    cut_layer: int
    batch: int
    local_epochs: int = 1
    rounds: int = 1

    def __post_init__(self) -> None:
        if self.cut_layer < 0:
            raise ValueError("cut_layer must be non-negative")
        if self.batch < 0:
            raise ValueError("batch must be non-negative")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass(frozen=True)
class MemoryBreakdown:
    """Per-block memory split plus the device-side total, all in bytes."""

    model: int
    optimizer: int
    gradient: int
    activation: int
    block_total: int
    device_total: int


@dataclass(frozen=True)
class PayloadSizes:
    """Transmission payload sizes in bytes for one device and one round."""

    block_dist: int      # initial device-side block distribution
    lora_dist: int       # per-round adapter broadcast / upload
    activation: int      # uplink activations, uncompressed
    gradient: int        # downlink activation gradients, uncompressed


# Activation-memory coefficients (Megatron-style estimate).
_ACT_LINEAR_COEF = 34
_ACT_QUADRATIC_COEF = 5


def params_per_block(profile: ModelProfile) -> int:
    """Parameter count of one transformer block with its LoRA pair: 12*D^2 + 18*D*r."""
    d, r = profile.embed_dim, profile.lora_rank
    return 12 * d * d + 18 * d * r


def params_embedding(profile: ModelProfile) -> int:
    """Embedding layer parameters: (P^2*C + N + 3) * D."""
    p, c, n, d = profile.patch_size, profile.img_channels, profile.num_tokens, profile.embed_dim
    return (p * p * c + n + 3) * d


def params_cls(profile: ModelProfile) -> int:
    """Classification head parameters: D*K + K."""
    return profile.embed_dim * profile.num_classes + profile.num_classes


def params_total(profile: ModelProfile) -> int:
    """Whole-model parameter count: L blocks plus embedding and head."""
    return (
        profile.num_layers * params_per_block(profile)
        + params_embedding(profile)
        + params_cls(profile)
    )


def _block_flops_fp(profile: ModelProfile, batch: int) -> int:
    b, n, d = batch, profile.num_tokens, profile.embed_dim
    return 24 * b * n * d * d + 4 * b * n * n * d


def flops_device_fp(profile: ModelProfile, split: SplitConfig) -> int:
    """Device forward-pass FLOPs: l*(24*B*N*D^2 + 4*B*N^2*D) + 2*B*N*D*K."""
    b, n, d, k = split.batch, profile.num_tokens, profile.embed_dim, profile.num_classes
    return split.cut_layer * _block_flops_fp(profile, b) + 2 * b * n * d * k


def flops_device_bp(profile: ModelProfile, split: SplitConfig) -> int:
    """Device backward-pass FLOPs: l*(48*B*N*D^2 + 8*B*N^2*D) + 4*B*N*D*K."""
    b, n, d, k = split.batch, profile.num_tokens, profile.embed_dim, profile.num_classes
    return 2 * split.cut_layer * _block_flops_fp(profile, b) + 4 * b * n * d * k


def flops_server_fp(profile: ModelProfile, split: SplitConfig) -> int:
    """Server forward-pass FLOPs: (L-l)*(24*B*N*D^2 + 4*B*N^2*D)."""
    remaining = profile.num_layers - split.cut_layer
    return remaining * _block_flops_fp(profile, split.batch)


def flops_server_bp(profile: ModelProfile, split: SplitConfig) -> int:
    """Server backward-pass FLOPs: (L-l)*(48*B*N*D^2 + 8*B*N^2*D) + 4*B*N*D*K."""
    b, n, d, k = split.batch, profile.num_tokens, profile.embed_dim, profile.num_classes
    remaining = profile.num_layers - split.cut_layer
    return 2 * remaining * _block_flops_fp(profile, b) + 4 * b * n * d * k


def memory_block(profile: ModelProfile, split: SplitConfig) -> MemoryBreakdown:
    """Memory of one transformer block and the resulting device-side total.

    Block total is M_m + M_o + M_g + M_a where the first three scale with the
    per-block parameter count (optimizer state weighted by the optimizer's
    state multiplier) and the activation term is 34*B*N*D + 5*B*N^2*A.
    """
    alpha = profile.bytes_per_param
    alpha_hat = alpha * profile.optimizer_kind.state_multiplier
    block_params = params_per_block(profile)
    b, n, a = split.batch, profile.num_tokens, profile.num_heads

    m_model = alpha * block_params
    m_opt = alpha_hat * block_params
    m_grad = alpha * block_params
    m_act = _ACT_LINEAR_COEF * b * n * profile.embed_dim + _ACT_QUADRATIC_COEF * b * n * n * a
    m_block = m_model + m_opt + m_grad + m_act
    return MemoryBreakdown(
        model=m_model,
        optimizer=m_opt,
        gradient=m_grad,
        activation=m_act,
        block_total=m_block,
        device_total=memory_device(profile, split),
    )


def memory_device(profile: ModelProfile, split: SplitConfig) -> int:
    """Device-side memory in bytes: 16*D^2 + B*N*D + l*M_t. Affine in the cut layer."""
    d = profile.embed_dim
    b, n = split.batch, profile.num_tokens
    alpha = profile.bytes_per_param
    alpha_hat = alpha * profile.optimizer_kind.state_multiplier
    block_params = params_per_block(profile)
    m_act = _ACT_LINEAR_COEF * b * n * d + _ACT_QUADRATIC_COEF * b * n * n * profile.num_heads
    m_block = (2 * alpha + alpha_hat) * block_params + m_act
    return 16 * d * d + b * n * d + split.cut_layer * m_block


def payload_sizes(profile: ModelProfile, split: SplitConfig) -> PayloadSizes:
    """Communication payloads in bytes for the current cut.

    The block-distribution and adapter payload formulas carry the batch
    factor as written in the underlying cost model, even though it is
    dimensionally surprising for model parameters. The gradient payload
    equals the activation payload by construction.
    """
    alpha = profile.bytes_per_param
    b, l = split.batch, split.cut_layer
    d, r = profile.embed_dim, profile.lora_rank
    activation = alpha * b * profile.num_tokens * d
    embed_params = (profile.patch_size ** 2 * profile.img_channels + profile.num_tokens + 3) * d
    block_dist = alpha * b * l * (18 * d * r + 12 * d * d + embed_params)
    lora_dist = alpha * 2 * l * b * d * r
    return PayloadSizes(
        block_dist=block_dist,
        lora_dist=lora_dist,
        activation=activation,
        gradient=activation,
    )

"""Training objectives: ground-truth regression, correlation-based distillation
losses (inter/intra temporal matching and selective RBF correlation maps),
baseline distillers (temperature KD, attention transfer, similarity
preserving), and representation-learning objectives (AE / VAE / adversarial).

All losses are pure functions of tensors, dtype-preserving, and differentiable,
so they can be checked against finite differences in float64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .models import TapBundle, spatial_average_pool, temporal_resize

logger = logging.getLogger(__name__)

PEARSON_EPS = 1e-8


def _scalar(x: torch.Tensor) -> float:
    return float(x.detach())

DEFAULT_LAYER_PAIRS = (("E2", "E2"), ("Mid", "Mid"), ("D1", "D1"))


@dataclass
class SckdParams:
    """Hyperparameters of the selective-correlation objective."""

    lambda1: float = 1.0  # weight of the inter/intra output-matching term
    lambda2: float = 10.0  # weight of the latent (Mid) correlation term
    lambda3: float = 1.0  # weight of the remaining feature correlation terms
    gamma: float = 0.4  # RBF width
    taylor_order: int = 2  # truncation order P in taylor mode
    q: int = 8  # number of selected correlation maps per layer pair
    layer_pairs: tuple[tuple[str, str], ...] = DEFAULT_LAYER_PAIRS
    kernel_mode: str = "exact"  # "exact" | "taylor"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.taylor_order < 0:
            raise ValueError("taylor_order must be >= 0")
        if self.kernel_mode not in ("exact", "taylor"):
            raise ValueError(f"unknown kernel_mode {self.kernel_mode!r}")
        self.layer_pairs = tuple((str(a), str(b)) for a, b in self.layer_pairs)


@dataclass
class BaselineKdParams:
    """Knobs of the temperature-softened output-matching baseline."""

    tau: float = 4.0  # softening temperature, > 1
    alpha: float = 0.5  # mix between supervised and distillation terms

    def __post_init__(self):
        if self.tau <= 1:
            raise ValueError("tau must be > 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


def ground_truth_loss(y_hat: torch.Tensor, y_gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if y_hat.shape != y_gt.shape:
        raise ValueError(f"shape mismatch: {tuple(y_hat.shape)} vs {tuple(y_gt.shape)}")
    return ((y_hat - y_gt) ** 2).mean()


def temporal_softmax(y: torch.Tensor) -> torch.Tensor:
    """Softmax along the temporal (last) axis, per sample and channel."""
    return torch.softmax(y, dim=-1)


def _pearson_rows(a: torch.Tensor, b: torch.Tensor, eps: float = PEARSON_EPS) -> torch.Tensor:
    """Row-wise Pearson correlation of two (n, d) tensors.

    Rows where either variance falls below ``eps`` correlate as 0 by contract,
    which keeps gradients finite on constant inputs.
    """
    ac = a - a.mean(dim=-1, keepdim=True)
    bc = b - b.mean(dim=-1, keepdim=True)
    var_a = (ac * ac).mean(dim=-1)
    var_b = (bc * bc).mean(dim=-1)
    cov = (ac * bc).mean(dim=-1)
    ok = (var_a >= eps) & (var_b >= eps)
    denom = (var_a.clamp_min(eps) * var_b.clamp_min(eps)).sqrt()
    rho = cov / denom
    return torch.where(ok, rho, torch.zeros_like(rho))


def pearson(x: torch.Tensor, y: torch.Tensor, eps: float = PEARSON_EPS) -> torch.Tensor:
    """Pearson correlation of two flat vectors; degenerate inputs give 0."""
    x = x.reshape(1, -1)
    y = y.reshape(1, -1)
    if x.shape[-1] < 2:
        raise ValueError("need at least 2 elements")
    if x.shape != y.shape:
        raise ValueError("length mismatch")
    return _pearson_rows(x, y, eps)[0]


def inter_intra_kd_loss(h_T: torch.Tensor, h_S: torch.Tensor) -> torch.Tensor:
    """Match softened outputs along both temporal axes of a mini-batch.

    Per channel: the inter term correlates each sample's temporal profile
    between the two models; the intra term correlates the cross-batch
    distribution at each time step. Batches of one sample skip the intra term.
    """
    if h_T.shape != h_S.shape:
        raise ValueError(f"shape mismatch: {tuple(h_T.shape)} vs {tuple(h_S.shape)}")
    b, c, t = h_T.shape
    total = h_T.new_zeros(())
    for ch in range(c):
        rows_t, rows_s = h_T[:, ch, :], h_S[:, ch, :]
        inter = 1.0 - _pearson_rows(rows_t, rows_s).mean()
        if b >= 2:
            intra = 1.0 - _pearson_rows(rows_t.T, rows_s.T).mean()
        else:
            logger.warning("batch of 1: intra-temporal term disabled")
            intra = h_T.new_zeros(())
        total = total + inter + intra
    return total / c


def select_channel_indices(c: int, q: int) -> list[int]:
    """Channel indices at regular interval m = ceil(c / q), all below c."""
    if c < 1:
        raise ValueError("c must be >= 1")
    if q < 1:
        raise ValueError("q must be >= 1")
    if q > c:
        logger.warning("q=%d exceeds channel count %d; clamping", q, c)
        q = c
    m = math.ceil(c / q)
    return list(range(0, c, m))


def rbf_correlation_map(
    feature: torch.Tensor,
    gamma: float = 0.4,
    mode: str = "exact",
    taylor_order: int = 2,
) -> torch.Tensor:
    """Batch-by-batch Gaussian RBF correlation map of (b, t) feature rows.

    Rows are L2-normalized first (zero rows become uniform unit vectors),
    which also makes the truncated-series mode a genuine approximation of the
    exact kernel: with unit rows, exp(-g*||Fi-Fj||^2) equals
    exp(-2g) * sum_p (2g)^p / p! * (Fi.Fj)^p in the limit.
    """
    if feature.dim() != 2:
        raise ValueError(f"expected (batch, t), got {tuple(feature.shape)}")
    if mode not in ("exact", "taylor"):
        raise ValueError(f"unknown kernel mode {mode!r}")
    t = feature.shape[-1]
    norms = feature.norm(dim=-1, keepdim=True)
    zero = norms <= 1e-12
    if bool(zero.any()):
        logger.debug("zero-norm feature row replaced by uniform unit vector")
    uniform = feature.new_full(feature.shape, 1.0 / math.sqrt(t))
    unit = torch.where(zero, uniform, feature / norms.clamp_min(1e-12))
    dot = unit @ unit.T
    if mode == "exact":
        sq_dist = (2.0 - 2.0 * dot).clamp_min(0.0)
        return torch.exp(-gamma * sq_dist)
    scale = math.exp(-2.0 * gamma)
    total = torch.zeros_like(dot)
    coeff = 1.0
    power = torch.ones_like(dot)
    for p in range(taylor_order + 1):
        if p > 0:
            coeff *= 2.0 * gamma / p
            power = power * dot
        total = total + coeff * power
    return scale * total


def _pooled(tap: torch.Tensor) -> torch.Tensor:
    return spatial_average_pool(tap) if tap.dim() == 5 else tap


def selective_correlation_loss(
    taps_T: TapBundle,
    taps_S: TapBundle,
    params: SckdParams,
    pairs: tuple[tuple[str, str], ...] | None = None,
) -> torch.Tensor:
    """Frobenius mismatch of selected per-channel correlation maps.

    Encoder taps are spatially pooled, teacher features are temporally resized
    to the student's extent, and q channels per pair are selected at regular
    intervals. Each pair is normalized by batch^2 times its selected-map count;
    the result is averaged over pairs.
    """
    pairs = params.layer_pairs if pairs is None else pairs
    if not pairs:
        raise ValueError("no layer pairs configured")
    total = None
    for name_t, name_s in pairs:
        f_t = _pooled(taps_T.get(name_t))
        f_s = _pooled(taps_S.get(name_s))
        if f_t.shape[-1] != f_s.shape[-1]:
            f_t = temporal_resize(f_t, f_s.shape[-1])
        c = min(f_t.shape[1], f_s.shape[1])
        indices = select_channel_indices(c, params.q)
        b = f_t.shape[0]
        pair_sum = None
        for k in indices:
            g_t = rbf_correlation_map(f_t[:, k, :], params.gamma, params.kernel_mode, params.taylor_order)
            g_s = rbf_correlation_map(f_s[:, k, :], params.gamma, params.kernel_mode, params.taylor_order)
            diff = ((g_t - g_s) ** 2).sum()
            pair_sum = diff if pair_sum is None else pair_sum + diff
        pair_loss = pair_sum / (b * b * len(indices))
        total = pair_loss if total is None else total + pair_loss
    return total / len(pairs)


def total_sckd_loss(
    y_hat_S: torch.Tensor,
    y_gt: torch.Tensor,
    y_hat_T: torch.Tensor,
    taps_T: TapBundle,
    taps_S: TapBundle,
    params: SckdParams,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Combined objective plus a per-term breakdown.

    total = L_gt + lambda1 * L_KD_c + lambda2 * L_sc_r + lambda3 * L_sc_f,
    where L_sc_r covers the (Mid, Mid) pair and L_sc_f the remaining pairs.
    Terms with a zero weight are skipped and reported as 0.
    """
    l_gt = ground_truth_loss(y_hat_S, y_gt)
    zero = y_hat_S.new_zeros(())
    mid_pairs = tuple(p for p in params.layer_pairs if p[0] == "Mid" and p[1] == "Mid")
    feat_pairs = tuple(p for p in params.layer_pairs if p not in mid_pairs)

    l_kd = zero
    if params.lambda1 != 0.0:
        l_kd = inter_intra_kd_loss(temporal_softmax(y_hat_T), temporal_softmax(y_hat_S))
    l_sc_r = zero
    if params.lambda2 != 0.0 and mid_pairs:
        l_sc_r = selective_correlation_loss(taps_T, taps_S, params, pairs=mid_pairs)
    l_sc_f = zero
    if params.lambda3 != 0.0 and feat_pairs:
        l_sc_f = selective_correlation_loss(taps_T, taps_S, params, pairs=feat_pairs)

    total = l_gt + params.lambda1 * l_kd + params.lambda2 * l_sc_r + params.lambda3 * l_sc_f
    breakdown = {
        "L_gt": _scalar(l_gt),
        "L_KD_c": _scalar(l_kd),
        "L_sc_r": _scalar(l_sc_r),
        "L_sc_f": _scalar(l_sc_f),
        "total": _scalar(total),
    }
    return total, breakdown


def sp_map(flat: torch.Tensor) -> torch.Tensor:
    """Similarity map of row-normalized flattened features: M = G_hat @ G_hat.T."""
    if flat.dim() != 2:
        raise ValueError(f"expected (batch, features), got {tuple(flat.shape)}")
    unit = flat / flat.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return unit @ unit.T


def sp_loss(
    taps_T: TapBundle, taps_S: TapBundle, pair: tuple[str, str] = ("Mid", "Mid")
) -> torch.Tensor:
    """Similarity-preserving mismatch: ||M_T - M_S||_F^2 / b^2 on flattened taps."""
    f_t = taps_T.get(pair[0])
    f_s = taps_S.get(pair[1])
    b = f_t.shape[0]
    m_t = sp_map(f_t.reshape(b, -1))
    m_s = sp_map(f_s.reshape(b, -1))
    return ((m_t - m_s) ** 2).sum() / (b * b)


def at_loss(
    taps_T: TapBundle, taps_S: TapBundle, pair: tuple[str, str] = ("Mid", "Mid")
) -> torch.Tensor:
    """Attention-transfer mismatch on channel-mean squared activations.

    Encoder taps are pooled to (b, c, t) first; the attention vector is the
    channel mean of squared features, L2-normalized per sample.
    """

    def attention(tap: torch.Tensor) -> torch.Tensor:
        pooled = _pooled(tap)
        a = (pooled**2).mean(dim=1)
        return a / a.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    a_t = attention(taps_T.get(pair[0]))
    a_s = attention(taps_S.get(pair[1]))
    return ((a_t - a_s) ** 2).sum(dim=-1).mean()


def vanilla_kd_loss(
    y_hat_T: torch.Tensor, y_hat_S: torch.Tensor, params: BaselineKdParams
) -> torch.Tensor:
    """Temperature-softened KL divergence of teacher vs student outputs.

    tau^2 * KL(softmax(y_T / tau) || softmax(y_S / tau)) along the temporal
    axis, averaged over batch and channels. In training this combines with the
    supervised term as alpha * L_gt + (1 - alpha) * this.
    """
    if y_hat_T.shape != y_hat_S.shape:
        raise ValueError("shape mismatch")
    tau = params.tau
    log_p = torch.log_softmax(y_hat_T / tau, dim=-1)
    log_q = torch.log_softmax(y_hat_S / tau, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return (tau * tau) * kl.mean()


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean per-element KL(N(mu, sigma^2) || N(0, 1))."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).mean()


def wae_discriminator_loss(
    codes: torch.Tensor, prior_codes: torch.Tensor, discriminator: torch.nn.Module
) -> torch.Tensor:
    """Cross-entropy of the code discriminator: prior codes real, encoded fake."""
    logits_real = discriminator(prior_codes)
    logits_fake = discriminator(codes.detach())
    ones = torch.ones_like(logits_real)
    zeros = torch.zeros_like(logits_fake)
    return F.binary_cross_entropy_with_logits(logits_real, ones) + F.binary_cross_entropy_with_logits(
        logits_fake, zeros
    )


def wae_model_loss(
    y_hat: torch.Tensor,
    y_gt: torch.Tensor,
    codes: torch.Tensor,
    discriminator: torch.nn.Module,
    lambda_adv: float = 1.0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reconstruction plus the adversarial term that pushes codes toward the prior."""
    mse = ground_truth_loss(y_hat, y_gt)
    logits = discriminator(codes)
    adv = F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits))
    return mse + lambda_adv * adv, mse, adv


@dataclass
class RepresentationLossResult:
    total: torch.Tensor
    parts: dict[str, torch.Tensor] = field(default_factory=dict)


def representation_loss(
    mode: str,
    x: torch.Tensor,
    y_gt: torch.Tensor,
    network,
    discriminator: torch.nn.Module | None = None,
    vae_head: torch.nn.Module | None = None,
    beta: float = 1.0,
    lambda_adv: float = 1.0,
    generator: torch.Generator | None = None,
) -> RepresentationLossResult:
    """Representation-learning objective for one batch.

    ``ae``: plain supervised reconstruction of the force series. ``vae``: adds
    beta-weighted Gaussian KL on the latent head. ``wae``: returns both the
    discriminator objective and the reconstruction+adversarial objective.
    """
    mode = mode.lower()
    if mode == "ae":
        y_hat = network(x)
        return RepresentationLossResult(total=ground_truth_loss(y_hat, y_gt))
    if mode == "vae":
        if vae_head is None:
            raise ValueError("vae mode needs a latent head emitting mean and log-variance")
        _, _, mid = network.encode(x)
        stats = vae_head(mid)
        mu, logvar = stats.chunk(2, dim=1)
        noise = torch.empty_like(mu).normal_(generator=generator)
        z = mu + (0.5 * logvar).exp() * noise
        _, _, y_hat = network.decode(z)
        mse = ground_truth_loss(y_hat, y_gt)
        kl = gaussian_kl(mu, logvar)
        return RepresentationLossResult(total=mse + beta * kl, parts={"mse": mse, "kl": kl})
    if mode == "wae":
        if discriminator is None:
            raise ValueError("wae mode needs a code discriminator")
        _, _, mid = network.encode(x)
        codes = mid.mean(dim=-1)  # prior lives on time-pooled codes
        prior = torch.empty_like(codes).normal_(generator=generator)
        disc_loss = wae_discriminator_loss(codes, prior, discriminator)
        _, _, y_hat = network.decode(mid)
        model_loss, mse, adv = wae_model_loss(y_hat, y_gt, codes, discriminator, lambda_adv)
        return RepresentationLossResult(
            total=model_loss,
            parts={"mse": mse, "adv": adv, "disc_loss": disc_loss},
        )
    raise ValueError(f"unknown representation mode {mode!r}")

"""Stacked invertible transport maps with exact per-layer densities.

A path with K segments is represented by one network of K invertible
"path layers"; the prefix composition of the first k layers transports the
base distribution to the k-th intermediate distribution.  Each path layer
stacks two coupling sub-blocks with complementary masks so that every
coordinate is transformed.  Log-densities along the path follow from the
change-of-variables formula,

    log p_k(x_k) = log rho_0(z) - sum_{j<=k} log|det J_j|,

and spatial scores are obtained by differentiating the log-density map
x -> log p_k(x) through the analytic layer inverses.

Everything runs in float64; couplings are initialized at the identity so a
fresh model represents the constant path at the base distribution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

CHECKPOINT_FORMAT = "wgpath-checkpoint"
CHECKPOINT_VERSION = 1

# softplus(x) = 1 at this offset; zero-initialized spline derivative heads
# then start at slope one, making the spline the identity.


class FlowEvaluationError(RuntimeError):
    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"{message} (path layer {layer})"
        super().__init__(message)
        self.layer = layer


# ---------------------------------------------------------------------------
# base distributions
# ---------------------------------------------------------------------------


class BaseDistribution:
    """Reference distribution with exact sampler, log-density and score."""

    dim: int

    def sample(self, n, generator=None):
        raise NotImplementedError

    def log_prob(self, x):
        raise NotImplementedError

    def score(self, x):
        """grad_x log rho_0(x)."""
        raise NotImplementedError

    def to_config(self) -> dict:
        raise NotImplementedError


class StandardGaussian(BaseDistribution):
    def __init__(self, dim):
        self.dim = int(dim)

    def sample(self, n, generator=None):
        return torch.randn(n, self.dim, dtype=torch.float64, generator=generator)

    def log_prob(self, x):
        return -0.5 * (x**2).sum(dim=-1) - 0.5 * self.dim * math.log(2.0 * math.pi)

    def score(self, x):
        return -x

    def to_config(self):
        return {"kind": "standard_gaussian", "dim": self.dim}


class GaussianMixture(BaseDistribution):
    """Mixture of isotropic Gaussians with a shared variance."""

    def __init__(self, weights, means, variance):
        means = torch.as_tensor(means, dtype=torch.float64)
        weights = torch.as_tensor(weights, dtype=torch.float64)
        if means.ndim != 2 or weights.ndim != 1 or weights.numel() != means.shape[0]:
            raise ValueError("means must be (n_components, dim), weights (n_components,)")
        if (weights <= 0).any():
            raise ValueError("mixture weights must be positive")
        if variance <= 0:
            raise ValueError("shared variance must be positive")
        self.weights = weights / weights.sum()
        self.means = means
        self.variance = float(variance)
        self.dim = means.shape[1]

    def sample(self, n, generator=None):
        idx = torch.multinomial(
            self.weights, n, replacement=True, generator=generator
        )
        eps = torch.randn(n, self.dim, dtype=torch.float64, generator=generator)
        return self.means[idx] + math.sqrt(self.variance) * eps

    def _component_logs(self, x):
        d2 = ((x.unsqueeze(-2) - self.means) ** 2).sum(dim=-1)
        log_norm = -0.5 * self.dim * math.log(2.0 * math.pi * self.variance)
        return torch.log(self.weights) + log_norm - 0.5 * d2 / self.variance

    def log_prob(self, x):
        return torch.logsumexp(self._component_logs(x), dim=-1)

    def score(self, x):
        resp = torch.softmax(self._component_logs(x), dim=-1)
        pull = (self.means - x.unsqueeze(-2)) / self.variance
        return (resp.unsqueeze(-1) * pull).sum(dim=-2)

    def to_config(self):
        return {
            "kind": "gaussian_mixture",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variance": self.variance,
        }


class UniformBox(BaseDistribution):
    """Uniform distribution on a box, optionally mollified by a Gaussian.

    With ``smoothing > 0`` the density is the box indicator convolved with an
    isotropic Gaussian of that width, which restores a finite score
    everywhere; the plain box has no score and refuses to provide one.
    """

    def __init__(self, lo, hi, smoothing=0.0):
        lo = torch.as_tensor(lo, dtype=torch.float64)
        hi = torch.as_tensor(hi, dtype=torch.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo/hi must be 1-D vectors of equal length")
        if (hi <= lo).any():
            raise ValueError("box must have positive side lengths")
        if smoothing < 0:
            raise ValueError("smoothing width must be nonnegative")
        self.lo = lo
        self.hi = hi
        self.smoothing = float(smoothing)
        self.dim = lo.numel()

    def sample(self, n, generator=None):
        u = torch.rand(n, self.dim, dtype=torch.float64, generator=generator)
        x = self.lo + (self.hi - self.lo) * u
        if self.smoothing > 0:
            x = x + self.smoothing * torch.randn(
                n, self.dim, dtype=torch.float64, generator=generator
            )
        return x

    def _per_dim_log(self, x):
        width = self.hi - self.lo
        if self.smoothing == 0:
            inside = (x >= self.lo) & (x <= self.hi)
            lp = torch.where(
                inside, -torch.log(width).expand_as(x), torch.full_like(x, -math.inf)
            )
            return lp
        s = self.smoothing
        normal = torch.distributions.Normal(
            torch.zeros((), dtype=torch.float64), torch.ones((), dtype=torch.float64)
        )
        mass = normal.cdf((self.hi - x) / s) - normal.cdf((self.lo - x) / s)
        return torch.log(mass.clamp_min(1e-300)) - torch.log(width)

    def log_prob(self, x):
        return self._per_dim_log(x).sum(dim=-1)

    def score(self, x):
        if self.smoothing == 0:
            raise FlowEvaluationError(
                "uniform box has no smooth score; set a positive smoothing width"
            )
        s = self.smoothing
        phi_hi = torch.exp(-0.5 * ((self.hi - x) / s) ** 2) / math.sqrt(2 * math.pi)
        phi_lo = torch.exp(-0.5 * ((self.lo - x) / s) ** 2) / math.sqrt(2 * math.pi)
        normal = torch.distributions.Normal(
            torch.zeros((), dtype=torch.float64), torch.ones((), dtype=torch.float64)
        )
        mass = (normal.cdf((self.hi - x) / s) - normal.cdf((self.lo - x) / s)).clamp_min(
            1e-300
        )
        return (phi_lo - phi_hi) / (s * mass)

    def to_config(self):
        return {
            "kind": "uniform_box",
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "smoothing": self.smoothing,
        }


def base_from_config(cfg: dict) -> BaseDistribution:
    kind = cfg["kind"]
    if kind == "standard_gaussian":
        return StandardGaussian(cfg["dim"])
    if kind == "gaussian_mixture":
        return GaussianMixture(cfg["weights"], cfg["means"], cfg["variance"])
    if kind == "uniform_box":
        return UniformBox(cfg["lo"], cfg["hi"], cfg.get("smoothing", 0.0))
    raise ValueError(f"unknown base distribution kind: {kind}")


# ---------------------------------------------------------------------------
# coupling sub-blocks
# ---------------------------------------------------------------------------


def _make_subnet(in_dim, out_dim, width, depth):
    layers = [nn.Linear(in_dim, width), nn.LeakyReLU()]
    for _ in range(depth - 1):
        layers += [nn.Linear(width, width), nn.LeakyReLU()]
    final = nn.Linear(width, out_dim)
    # identity initialization: the head starts at zero
    nn.init.zeros_(final.weight)
    nn.init.zeros_(final.bias)
    layers.append(final)
    net = nn.Sequential(*layers)
    return net.to(torch.float64)


class AffineCoupling(nn.Module):
    """Masked affine transform y = x * exp(s(x_m)) + t(x_m) on unmasked coordinates.

    The scale head is squashed by ``scale_cap * tanh`` so the block stays a
    diffeomorphism with bounded per-layer Lipschitz constant.
    """

    def __init__(self, dim, mask, width=64, depth=2, scale_cap=3.0):
        super().__init__()
        self.register_buffer("mask", torch.as_tensor(mask, dtype=torch.float64))
        self.dim = dim
        self.scale_cap = float(scale_cap)
        self.net = _make_subnet(dim, 2 * dim, width, depth)

    def _heads(self, x_masked):
        s, t = torch.chunk(self.net(x_masked), 2, dim=-1)
        free = 1.0 - self.mask
        s = self.scale_cap * torch.tanh(s) * free
        t = t * free
        return s, t

    def forward(self, x):
        x_masked = x * self.mask
        s, t = self._heads(x_masked)
        y = x_masked + (1.0 - self.mask) * (x * torch.exp(s) + t)
        return y, s.sum(dim=-1)

    def inverse(self, y):
        y_masked = y * self.mask
        s, t = self._heads(y_masked)
        x = y_masked + (1.0 - self.mask) * (y - t) * torch.exp(-s)
        return x, s.sum(dim=-1)


class MonotoneSplineCoupling(nn.Module):
    """Masked monotone rational-quadratic spline transform with identity tails.

    Unmasked coordinates pass through a strictly increasing piecewise
    rational-quadratic map on [-bound, bound] (uniform bins and unit slopes at
    zero initialization, i.e. the identity) and through the identity outside.
    """

    def __init__(self, dim, mask, width=64, depth=2, num_bins=8, bound=6.0):
        super().__init__()
        self.register_buffer("mask", torch.as_tensor(mask, dtype=torch.float64))
        self.dim = dim
        self.num_bins = int(num_bins)
        self.bound = float(bound)
        self.min_bin = 1e-3
        self.min_deriv = 1e-4
        self.net = _make_subnet(dim, dim * (3 * self.num_bins - 1), width, depth)

    def _knots(self, x_masked):
        n = x_masked.shape[0]
        raw = self.net(x_masked).view(n, self.dim, 3 * self.num_bins - 1)
        w_raw = raw[..., : self.num_bins]
        h_raw = raw[..., self.num_bins : 2 * self.num_bins]
        d_raw = raw[..., 2 * self.num_bins :]

        widths = torch.softmax(w_raw, dim=-1)
        widths = self.min_bin + (1 - self.min_bin * self.num_bins) * widths
        heights = torch.softmax(h_raw, dim=-1)
        heights = self.min_bin + (1 - self.min_bin * self.num_bins) * heights

        span = 2.0 * self.bound
        xk = torch.cumsum(widths, dim=-1) * span - self.bound
        xk = torch.cat([torch.full_like(xk[..., :1], -self.bound), xk], dim=-1)
        xk[..., -1] = self.bound
        yk = torch.cumsum(heights, dim=-1) * span - self.bound
        yk = torch.cat([torch.full_like(yk[..., :1], -self.bound), yk], dim=-1)
        yk[..., -1] = self.bound

        # offset chosen so zero-initialized nets give exactly unit slopes
        offset = math.log(math.expm1(1.0 - self.min_deriv))
        deriv = self.min_deriv + torch.nn.functional.softplus(d_raw + offset)
        ones = torch.ones_like(deriv[..., :1])
        deriv = torch.cat([ones, deriv, ones], dim=-1)  # identity tails: slope 1
        return xk, yk, deriv

    def _spline(self, v, xk, yk, deriv, inverse):
        """Apply the rational-quadratic map (or its inverse) elementwise.

        Returns the transformed values and log of the forward derivative at
        the forward-input point.
        """
        inside = (v > -self.bound) & (v < self.bound)
        out = v.clone()
        logd = torch.zeros_like(v)
        if inside.any():
            vi = v[inside]
            ref = yk if inverse else xk
            idx = (
                torch.searchsorted(ref[inside], vi.unsqueeze(-1).contiguous()).squeeze(-1)
                - 1
            ).clamp(0, self.num_bins - 1)

            x0 = torch.gather(xk[inside], -1, idx.unsqueeze(-1)).squeeze(-1)
            x1 = torch.gather(xk[inside], -1, (idx + 1).unsqueeze(-1)).squeeze(-1)
            y0 = torch.gather(yk[inside], -1, idx.unsqueeze(-1)).squeeze(-1)
            y1 = torch.gather(yk[inside], -1, (idx + 1).unsqueeze(-1)).squeeze(-1)
            d0 = torch.gather(deriv[inside], -1, idx.unsqueeze(-1)).squeeze(-1)
            d1 = torch.gather(deriv[inside], -1, (idx + 1).unsqueeze(-1)).squeeze(-1)

            w = x1 - x0
            h = y1 - y0
            s = h / w
            if inverse:
                # solve the rational quadratic for the relative position xi
                dy = vi - y0
                a = h * (s - d0) + dy * (d0 + d1 - 2 * s)
                b = h * d0 - dy * (d0 + d1 - 2 * s)
                c = -s * dy
                disc = (b**2 - 4 * a * c).clamp_min(0.0)
                xi = 2 * c / (-b - torch.sqrt(disc))
                xi = xi.clamp(0.0, 1.0)
                out_vals = x0 + xi * w
            else:
                xi = ((vi - x0) / w).clamp(0.0, 1.0)
                num = h * (s * xi**2 + d0 * xi * (1 - xi))
                den = s + (d0 + d1 - 2 * s) * xi * (1 - xi)
                out_vals = y0 + num / den

            den = s + (d0 + d1 - 2 * s) * xi * (1 - xi)
            dnum = s**2 * (d1 * xi**2 + 2 * s * xi * (1 - xi) + d0 * (1 - xi) ** 2)
            logd_vals = torch.log(dnum) - 2 * torch.log(den)

            out = torch.masked_scatter(out, inside, out_vals)
            logd = torch.masked_scatter(logd, inside, logd_vals)
        return out, logd

    def _transform(self, x, inverse):
        x_masked = x * self.mask
        xk, yk, deriv = self._knots(x_masked)
        out, logd = self._spline(x, xk, yk, deriv, inverse)
        free = 1.0 - self.mask
        out = x_masked + free * out
        return out, (free * logd).sum(dim=-1)

    def forward(self, x):
        return self._transform(x, inverse=False)

    def inverse(self, y):
        return self._transform(y, inverse=True)


def alternating_masks(dim):
    m = torch.zeros(dim, dtype=torch.float64)
    m[::2] = 1.0
    return m, 1.0 - m


class PathLayer(nn.Module):
    """One path segment: two coupling sub-blocks with complementary masks."""

    def __init__(self, dim, coupling="affine", **kwargs):
        super().__init__()
        m1, m2 = alternating_masks(dim)
        if coupling == "affine":
            blocks = [AffineCoupling(dim, m1, **kwargs), AffineCoupling(dim, m2, **kwargs)]
        elif coupling == "spline":
            blocks = [
                MonotoneSplineCoupling(dim, m1, **kwargs),
                MonotoneSplineCoupling(dim, m2, **kwargs),
            ]
        else:
            raise ValueError(f"unknown coupling kind: {coupling}")
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        logdet = None
        for b in self.blocks:
            x, ld = b(x)
            logdet = ld if logdet is None else logdet + ld
        return x, logdet

    def inverse(self, y):
        logdet = None
        for b in reversed(self.blocks):
            y, ld = b.inverse(y)
            logdet = ld if logdet is None else logdet + ld
        return y, logdet


# ---------------------------------------------------------------------------
# the stacked model and path batches
# ---------------------------------------------------------------------------


@dataclass
class PathBatch:
    """Per-layer particle data for one batch of base samples.

    positions[k] are the images of z under the k-th prefix composition,
    log_densities[k] the exact log-densities there, and layer_logdets[k-1]
    the log|det| of segment k at those particles.
    """

    z: torch.Tensor  # (N, d)
    positions: torch.Tensor  # (K+1, N, d)
    log_densities: torch.Tensor  # (K+1, N)
    layer_logdets: torch.Tensor  # (K, N)

    @property
    def n_segments(self):
        return self.layer_logdets.shape[0]

    @property
    def batch_size(self):
        return self.z.shape[0]


class FlowModel(nn.Module):
    """K stacked invertible path layers over a base distribution."""

    def __init__(
        self,
        base: BaseDistribution,
        n_layers: int,
        coupling: str = "affine",
        width: int = 64,
        depth: int = 2,
        scale_cap: float = 3.0,
        num_bins: int = 8,
        bound: float = 6.0,
    ):
        super().__init__()
        if n_layers < 1:
            raise ValueError("need at least one path layer")
        self.base = base
        self.coupling = coupling
        self.arch = {
            "coupling": coupling,
            "n_layers": int(n_layers),
            "width": int(width),
            "depth": int(depth),
            "scale_cap": float(scale_cap),
            "num_bins": int(num_bins),
            "bound": float(bound),
        }
        kwargs = {"width": width, "depth": depth}
        if coupling == "affine":
            kwargs["scale_cap"] = scale_cap
        else:
            kwargs["num_bins"] = num_bins
            kwargs["bound"] = bound
        self.layers = nn.ModuleList(
            [PathLayer(base.dim, coupling, **kwargs) for _ in range(n_layers)]
        )
        self.to(torch.float64)

    @property
    def n_segments(self):
        return len(self.layers)

    @property
    def dim(self):
        return self.base.dim

    def push_forward(self, z) -> PathBatch:
        """Run base samples through all layers, tracking densities exactly."""
        if not torch.isfinite(z).all():
            raise FlowEvaluationError("non-finite base samples")
        positions = [z]
        lp = self.base.log_prob(z)
        log_densities = [lp]
        logdets = []
        x = z
        for k, layer in enumerate(self.layers, start=1):
            x, ld = layer(x)
            if not torch.isfinite(x).all():
                raise FlowEvaluationError("non-finite particle positions", layer=k)
            lp = lp - ld
            positions.append(x)
            log_densities.append(lp)
            logdets.append(ld)
        return PathBatch(
            z=z,
            positions=torch.stack(positions),
            log_densities=torch.stack(log_densities),
            layer_logdets=torch.stack(logdets),
        )

    def inverse(self, k, x):
        """Preimage of x under the k-th prefix composition."""
        if k > self.n_segments:
            raise ValueError(f"layer index {k} out of range")
        for layer in reversed(self.layers[:k]):
            x, _ = layer.inverse(x)
        return x

    def log_density(self, k, x):
        """log p_k at arbitrary points, differentiable in x and parameters."""
        logdet = x.new_zeros(x.shape[0])
        for layer in reversed(self.layers[:k]):
            x, ld = layer.inverse(x)
            logdet = logdet + ld
        return self.base.log_prob(x) - logdet

    def score(self, k, x, create_graph=False):
        """Spatial gradient of log p_k at x, via autodiff through the inverse."""
        if k == 0:
            return self.base.score(x)
        x = x if x.requires_grad else x.detach().requires_grad_(True)
        lp = self.log_density(k, x)
        (grad,) = torch.autograd.grad(lp.sum(), x, create_graph=create_graph)
        return grad

    # -- parameter plumbing (used by gradient checks and checkpoints) --------

    def flat_parameters(self):
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def set_flat_parameters(self, vec):
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(vec[offset : offset + n].view_as(p))
                offset += n
        if offset != vec.numel():
            raise ValueError("parameter vector length mismatch")

    def save_checkpoint(self, path, metadata: Optional[dict] = None):
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "base": self.base.to_config(),
            "arch": self.arch,
            "metadata": metadata or {},
            "parameters": self.flat_parameters().tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load_checkpoint(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a flow checkpoint file")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
        base = base_from_config(payload["base"])
        arch = payload["arch"]
        model = cls(
            base,
            n_layers=arch["n_layers"],
            coupling=arch["coupling"],
            width=arch["width"],
            depth=arch["depth"],
            scale_cap=arch["scale_cap"],
            num_bins=arch["num_bins"],
            bound=arch["bound"],
        )
        model.set_flat_parameters(torch.tensor(payload["parameters"], dtype=torch.float64))
        return model, payload["metadata"]


def score_finite_difference(model, k, x, step=1e-5):
    """Central finite-difference score, the independent cross-check route."""
    grads = torch.zeros_like(x)
    for j in range(x.shape[1]):
        e = torch.zeros_like(x)
        e[:, j] = step
        with torch.no_grad():
            hi = model.log_density(k, x + e)
            lo = model.log_density(k, x - e)
        grads[:, j] = (hi - lo) / (2 * step)
    return grads

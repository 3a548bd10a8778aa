"""Sensitivity probes for a trained model: exact input gradients and their
statistics, a Monte-Carlo directional derivative estimator, an element-wise
Jacobian upper bound with the implied Lipschitz constant, and measured
input/output error ratios under concrete distortions.

The scalar the probes differentiate is the sum of the metric saliency map
with the background centroid frozen (so the map is a fixed function of the
input), or optionally the sum of the predicted-salient probabilities.  The
upper bound G is obtained by one backward pass through the "absolute
network": every linear coefficient replaced by its absolute value, every
nonlinearity's derivative by 1.  G then dominates |g| at every input, and
M = ‖G‖ bounds the output change per unit input change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, Rng
from .layers import ConvParams, BatchNormParams
from .model import ModelParams, forward
from .saliency import partition_regions, background_centroid
from .distortions import DistortionSpec, apply as apply_distortion

_NORM_EPS = 1e-12
_HEADS = ("metric", "ce")
_NORMS = ("l1", "l2", "linf")


@dataclass
class JacobianReport:
    """Statistics of |g| per image plus their arithmetic means."""
    per_image: list   # dicts with keys max, min, median, mean, var
    summary: dict

    columns = ("max", "min", "median", "mean", "var")

    def to_dict(self):
        return {"per_image": self.per_image, "summary": self.summary}


@dataclass
class DirectionalEstimate:
    p: float
    t: float
    n_samples: int
    estimate: float
    stderr: float


@dataclass
class BoundReport:
    bound_field: np.ndarray  # G, same shape as one input image, >= 0
    l1: float
    l2: float
    linf: float
    norm: str
    lipschitz: float

    def to_dict(self):
        return {"l1": self.l1, "l2": self.l2, "linf": self.linf,
                "norm": self.norm, "lipschitz": self.lipschitz}


@dataclass
class SensitivityRecord:
    e_input: float
    e_output: float
    ratio: float


def _check_head(head):
    if head not in _HEADS:
        raise ValueError(f"unknown scalarization head {head!r}")


def _frozen_centroid(out, image_index=0):
    probs = out.ce_probs.data[image_index]
    emb = out.embedding.data[image_index]
    part = partition_regions(probs)
    return background_centroid(emb, part, probs)


def _scalarize(out, head, centroid=None):
    """Scalar summary of a single-image ForwardOutput as a Tensor.

    ``metric``: sum of per-pixel embedding distances to the (frozen)
    background centroid.  ``ce``: sum of the salient-class probabilities.
    """
    if head == "ce":
        pick = np.zeros((1, 2, 1, 1))
        pick[0, 1] = 1.0
        return (out.ce_probs * pick).sum()
    if centroid is None:
        centroid = _frozen_centroid(out)
    c = centroid.reshape(1, -1, 1, 1).astype(out.embedding.data.dtype)
    diff = out.embedding - c
    # the epsilon keeps the gradient finite where a pixel sits exactly on
    # the centroid; the per-channel derivative stays bounded by 1
    return ((diff.square().sum(axis=1) + _NORM_EPS).sqrt()).sum()


def scalarized_output(params: ModelParams, image, head="metric",
                      centroid=None) -> float:
    """Value of the probe scalar at one (C, H, W) image."""
    _check_head(head)
    x = Tensor(np.asarray(image)[None])
    out = forward(params, x, mode="inference", update_running=False)
    return float(_scalarize(out, head, centroid).data)


def input_gradient(params: ModelParams, image, head="metric",
                   mode="inference") -> np.ndarray:
    """Exact gradient of the probe scalar with respect to one (C, H, W)
    input image; one forward and one backward pass."""
    _check_head(head)
    if mode != "inference":
        raise ValueError("input gradients require inference mode; train-mode "
                         "batch statistics make the scalar batch-dependent")
    x = Tensor(np.asarray(image, dtype=np.float64)[None], requires_grad=True)
    out = forward(params, x, mode="inference", update_running=False)
    _scalarize(out, head).backward(np.ones(()))
    return x.grad[0]


def _field_stats(g):
    a = np.abs(np.asarray(g, dtype=np.float64)).reshape(-1)
    return {"max": float(a.max()), "min": float(a.min()),
            "median": float(np.median(a)), "mean": float(a.mean()),
            "var": float(a.var())}


def jacobian_stats(gradients) -> JacobianReport:
    """Per-image statistics of |g| and their dataset means.  Variance is the
    population variance."""
    per_image = [_field_stats(g) for g in gradients]
    if not per_image:
        raise ValueError("jacobian_stats needs at least one gradient field")
    summary = {k: float(np.mean([row[k] for row in per_image]))
               for k in JacobianReport.columns}
    return JacobianReport(per_image=per_image, summary=summary)


def mc_directional_fn(f, x, p, t, n_samples, rng: Rng) -> DirectionalEstimate:
    """Monte-Carlo estimate of E over unit directions of |f(x+t·n) - f(x)|^p / t^p.

    For a linear f and p = 2 this converges to ‖∇f‖² / d, where d is the
    input dimension; the estimator keeps that d factor rather than
    correcting for it.
    """
    if t <= 0:
        raise ValueError("step t must be positive")
    if p < 1:
        raise ValueError("order p must be >= 1")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    f0 = float(f(x))
    vals = np.empty(n_samples)
    for i in range(n_samples):
        direction = rng.uniform_sphere(d).reshape(x.shape)
        vals[i] = abs(float(f(x + t * direction)) - f0) ** p / t ** p
    est = float(vals.mean())
    stderr = float(vals.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return DirectionalEstimate(p=float(p), t=float(t), n_samples=n_samples,
                               estimate=est, stderr=stderr)


def mc_directional_norm(params: ModelParams, image, p=2.0, t=1e-4,
                        n_samples=100, rng: Rng = None,
                        head="metric") -> DirectionalEstimate:
    """Directional estimator applied to the model's probe scalar around one
    image, with the centroid frozen at the unperturbed input."""
    _check_head(head)
    if rng is None:
        rng = Rng(0)
    image = np.asarray(image, dtype=np.float64)
    centroid = None
    if head == "metric":
        out = forward(params, Tensor(image[None]), mode="inference",
                      update_running=False)
        centroid = _frozen_centroid(out)

    def f(x):
        return scalarized_output(params, x, head, centroid)

    return mc_directional_fn(f, image, p, t, n_samples, rng)


def _absolute_params(params: ModelParams) -> ModelParams:
    """Copy of the model whose every linear coefficient is replaced by its
    absolute value and every shift dropped; batch norm keeps its running
    variance so the affine gain becomes |gamma| / sqrt(var + eps)."""

    def abs_conv(cp):
        return ConvParams(weight=Tensor(np.abs(cp.weight.data)),
                          bias=Tensor(np.zeros_like(cp.bias.data)),
                          stride=cp.stride)

    def abs_bn(bn):
        return BatchNormParams(gamma=Tensor(np.abs(bn.gamma.data)),
                               beta=Tensor(np.zeros_like(bn.beta.data)),
                               running_mean=np.zeros_like(bn.running_mean),
                               running_var=bn.running_var.copy(), eps=bn.eps)

    out = ModelParams(config=params.config,
                      input_conv=abs_conv(params.input_conv),
                      input_bn=abs_bn(params.input_bn),
                      emb_head=abs_conv(params.emb_head),
                      ce_head=abs_conv(params.ce_head))
    out.enc_blocks = [[(abs_conv(cp), abs_bn(bn)) for cp, bn in block]
                      for block in params.enc_blocks]
    out.dec_blocks = [[(abs_conv(cp), abs_bn(bn)) for cp, bn in block]
                      for block in params.dec_blocks]
    out.scale_convs = [abs_conv(cp) for cp in params.scale_convs]
    out.scale_bns = [abs_bn(bn) for bn in params.scale_bns]
    return out


def lipschitz_bound(params: ModelParams, norm="l2", head="metric") -> BoundReport:
    """Element-wise upper bound G on |input_gradient| at any input, obtained
    by backpropagating ones through the absolute network, and the Lipschitz
    constant M = ‖G‖ in the selected norm."""
    _check_head(head)
    if norm not in _NORMS:
        raise ValueError(f"unknown norm {norm!r}; expected one of {_NORMS}")
    cfg = params.config
    abs_params = _absolute_params(params)
    x = Tensor(np.ones((1, cfg.in_channels, cfg.input_size, cfg.input_size)),
               requires_grad=True)
    out = forward(abs_params, x, mode="inference", update_running=False,
                  _linearize=True)
    if head == "ce":
        pick = np.zeros((1, 2, 1, 1))
        pick[0, 1] = 1.0
        scalar = (out.ce_probs * pick).sum()
    else:
        # the distance-to-centroid derivative is bounded by 1 per channel,
        # so summing the embedding dominates the metric scalarization
        scalar = out.embedding.sum()
    scalar.backward(np.ones(()))
    g = x.grad[0]
    l1 = float(np.abs(g).sum())
    l2 = float(np.sqrt((g ** 2).sum()))
    linf = float(np.abs(g).max())
    m = {"l1": l1, "l2": l2, "linf": linf}[norm]
    return BoundReport(bound_field=g, l1=l1, l2=l2, linf=linf, norm=norm,
                       lipschitz=m)


def distortion_sensitivity(params: ModelParams, image, spec: DistortionSpec,
                           rng: Rng = None, head="metric") -> SensitivityRecord:
    """Measured ‖f(x̂) - f(x)‖ / ‖x̂ - x‖ for a concrete distortion, with the
    probe scalar's centroid frozen at the clean input."""
    _check_head(head)
    image = np.asarray(image, dtype=np.float64)
    perturbed = apply_distortion(image, spec, rng)
    e_in = float(np.linalg.norm((perturbed - image).reshape(-1)))
    if e_in == 0.0:
        raise ValueError("distortion left the input unchanged; ratio undefined")
    centroid = None
    if head == "metric":
        out = forward(params, Tensor(image[None]), mode="inference",
                      update_running=False)
        centroid = _frozen_centroid(out)
    f0 = scalarized_output(params, image, head, centroid)
    f1 = scalarized_output(params, perturbed, head, centroid)
    e_out = abs(f1 - f0)
    return SensitivityRecord(e_input=e_in, e_output=e_out, ratio=e_out / e_in)

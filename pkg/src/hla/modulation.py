"""Output modulation: mix raw values back into the attention output.

    modulate(t, v) = t + phi1(t) * phi2(v)   (elementwise product)

Both maps must keep their natural sign, so constructing the op with a
ReLU-bearing feature map is a contract violation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .feature_maps import FeatureMapGrads, FeatureMapParams, phi_backward, phi_forward
from .tensor import check_dtype


@dataclass
class ModulateGrads:
    t: np.ndarray
    v: np.ndarray
    p1: FeatureMapGrads
    p2: FeatureMapGrads


def _validate(t, v, p1, p2):
    check_dtype(t, v)
    if t.shape != v.shape:
        raise DimensionError(f"t shape {t.shape} != v shape {v.shape}")
    if p1.use_relu_output or p2.use_relu_output:
        raise ValueError("modulation maps must not use a ReLU output")
    width = t.shape[-1]
    for name, p in (("p1", p1), ("p2", p2)):
        if p.d_in != width or p.d_out != width:
            raise DimensionError(
                f"{name} maps {p.d_in}->{p.d_out}, need {width}->{width}"
            )


def modulate(
    t: np.ndarray, v: np.ndarray, p1: FeatureMapParams, p2: FeatureMapParams
) -> np.ndarray:
    """Gated residual update of the attention output t by the raw values v."""
    t = np.asarray(t)
    v = np.asarray(v)
    _validate(t, v, p1, p2)
    return t + phi_forward(p1, t) * phi_forward(p2, v)


def modulate_backward(
    t: np.ndarray,
    v: np.ndarray,
    p1: FeatureMapParams,
    p2: FeatureMapParams,
    grad_out: np.ndarray,
) -> ModulateGrads:
    """Gradients of modulate for both inputs and both map parameter sets."""
    t = np.asarray(t)
    v = np.asarray(v)
    grad_out = np.asarray(grad_out)
    _validate(t, v, p1, p2)
    if grad_out.shape != t.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != {t.shape}")
    a = phi_forward(p1, t)
    b = phi_forward(p2, v)
    p1_grads, g_t_phi = phi_backward(p1, t, grad_out * b)
    p2_grads, g_v = phi_backward(p2, v, grad_out * a)
    return ModulateGrads(t=grad_out + g_t_phi, v=g_v, p1=p1_grads, p2=p2_grads)

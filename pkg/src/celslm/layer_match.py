"""Layer-wise structural similarity between an edge and a cloud model.

CKA compares linear-kernel Gram matrices after double centering; RSA
correlates the lower triangles of cosine-similarity matrices. ``match_layers``
pairs each edge layer with the most CKA-similar cloud layer that passes both
thresholds, preferring the shallower layer on ties.
"""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .serialize import dumps
from .tensor import as_matrix, frobenius_norm, matmul, pearson_corr
from .transformer import prefill

# CKA scores closer than this are treated as equal for tie-breaking
TIE_TOL = 1e-12


@dataclass(frozen=True)
class SimilarityConfig:
    theta_cka: float = 0.5
    theta_rsa: float = 0.3
    num_probe_samples: int = 64

    def __post_init__(self):
        # thresholds above 1 are allowed: they make every pair infeasible
        if self.theta_cka < 0:
            raise ValueError(f"theta_cka must be >= 0, got {self.theta_cka}")
        if self.theta_rsa < -1:
            raise ValueError(f"theta_rsa must be >= -1, got {self.theta_rsa}")
        if self.num_probe_samples < 3:
            raise ValueError("need at least 3 probe samples")


@dataclass(frozen=True)
class LayerMatch:
    edge_layer: int
    cloud_layer: int
    cka: float
    rsa: float


@dataclass
class LayerMatchReport:
    cka: np.ndarray  # (edge layers, cloud layers)
    rsa: np.ndarray
    matches: list
    shared_layers: list
    unmatched: list = field(default_factory=list)
    config: SimilarityConfig | None = None
    score_rule: str = "argmax cka, rsa gate, ties -> shallower cloud layer"

    def to_dict(self):
        return {
            "score_rule": self.score_rule,
            "layer_indexing": "1-based",
            "theta_cka": self.config.theta_cka if self.config else None,
            "theta_rsa": self.config.theta_rsa if self.config else None,
            "cka": self.cka.tolist(),
            "rsa": self.rsa.tolist(),
            "matches": [
                {"edge_layer": m.edge_layer, "cloud_layer": m.cloud_layer, "cka": m.cka, "rsa": m.rsa}
                for m in self.matches
            ],
            "shared_layers": list(self.shared_layers),
            "unmatched": list(self.unmatched),
        }

    def to_json(self):
        return dumps(self.to_dict())

    def to_csv(self):
        """One row per (edge layer, cloud layer) pair."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["l_e", "l_c", "cka", "rsa"])
        for i in range(self.cka.shape[0]):
            for j in range(self.cka.shape[1]):
                w.writerow([i + 1, j + 1, f"{self.cka[i, j]:.17g}", f"{self.rsa[i, j]:.17g}"])
        return buf.getvalue()


def rsm(o):
    """Linear-kernel representational similarity matrix ``O @ O.T``."""
    o = as_matrix(o, "O")
    if o.shape[0] < 2:
        raise ShapeError("rsm needs at least 2 samples")
    return matmul(o, np.ascontiguousarray(o.T))


def _center(s):
    # H S H without forming H
    return s - s.mean(axis=0, keepdims=True) - s.mean(axis=1, keepdims=True) + s.mean()


def hsic(s_e, s_c):
    """``tr(H S_e H S_c) / (N-1)^2`` with the centering matrix ``H``."""
    s_e = as_matrix(s_e, "S_e")
    s_c = as_matrix(s_c, "S_c")
    if s_e.shape != s_c.shape or s_e.shape[0] != s_e.shape[1]:
        raise ShapeError(f"hsic needs equal square matrices, got {s_e.shape} and {s_c.shape}")
    n = s_e.shape[0]
    if n < 2:
        raise ShapeError("hsic needs N >= 2")
    # tr(A B) = sum(A * B.T)
    return float(np.sum(_center(s_e) * s_c.T)) / (n - 1) ** 2


def cka(o_e, o_c):
    """Linear CKA between two representations of the same ``N`` samples.

    Each input is first divided by its Frobenius norm (CKA is scale
    invariant), so the degeneracy test on self-HSIC is independent of the
    activations' magnitude.
    """
    o_e = as_matrix(o_e, "O_e")
    o_c = as_matrix(o_c, "O_c")
    if o_e.shape[0] != o_c.shape[0]:
        raise ShapeError(f"sample counts differ: {o_e.shape[0]} vs {o_c.shape[0]}")
    if o_e.shape[0] < 2:
        raise ShapeError("cka needs N >= 2")
    ne, nc = frobenius_norm(o_e), frobenius_norm(o_c)
    if ne == 0.0 or nc == 0.0:
        raise DegenerateInputError("degenerate representation")
    s_e = rsm(o_e / ne)
    s_c = rsm(o_c / nc)
    h_ee = hsic(s_e, s_e)
    h_cc = hsic(s_c, s_c)
    if h_ee < 1e-15 or h_cc < 1e-15:
        raise DegenerateInputError("degenerate representation")
    return hsic(s_e, s_c) / math.sqrt(h_ee * h_cc)


def cosine_matrix(o):
    o = as_matrix(o, "O")
    norms = np.sqrt(np.sum(o * o, axis=1))
    for i, nrm in enumerate(norms):
        if nrm == 0.0:
            raise DegenerateInputError(f"zero-norm row {i}")
    u = o / norms[:, None]
    return u @ u.T


def rsa(o_e, o_c):
    """Pearson correlation of the strictly-lower-triangular cosine similarities."""
    o_e = as_matrix(o_e, "O_e")
    o_c = as_matrix(o_c, "O_c")
    if o_e.shape[0] != o_c.shape[0]:
        raise ShapeError(f"sample counts differ: {o_e.shape[0]} vs {o_c.shape[0]}")
    if o_e.shape[0] < 3:
        raise ShapeError("rsa needs N >= 3")
    idx = np.tril_indices(o_e.shape[0], k=-1)
    return pearson_corr(cosine_matrix(o_e)[idx], cosine_matrix(o_c)[idx])


def similarity_matrices(edge_outputs, cloud_outputs):
    if not edge_outputs or not cloud_outputs:
        raise ValueError("both output lists must be nonempty")
    n = edge_outputs[0].shape[0]
    for o in list(edge_outputs) + list(cloud_outputs):
        if o.shape[0] != n:
            raise ShapeError(f"probe row-count mismatch: {o.shape[0]} vs {n}")
    ck = np.empty((len(edge_outputs), len(cloud_outputs)))
    rs = np.empty_like(ck)
    for i, oe in enumerate(edge_outputs):
        for j, oc in enumerate(cloud_outputs):
            ck[i, j] = cka(oe, oc)
            rs[i, j] = rsa(oe, oc)
    return ck, rs


def select_matches(ck, rs, cfg):
    """Thresholded, shallow-preferring argmax over a precomputed score grid."""
    matches, unmatched = [], []
    for i in range(ck.shape[0]):
        best = None
        for j in range(ck.shape[1]):
            if ck[i, j] < cfg.theta_cka or rs[i, j] < cfg.theta_rsa:
                continue
            # strict improvement beyond tolerance; scanning shallow-first keeps ties shallow
            if best is None or ck[i, j] > ck[i, best] + TIE_TOL:
                best = j
        if best is None:
            unmatched.append(i + 1)
        else:
            matches.append(LayerMatch(i + 1, best + 1, float(ck[i, best]), float(rs[i, best])))
    return matches, unmatched


def match_layers(edge_outputs, cloud_outputs, cfg=None):
    """Pair edge layers with cloud layers. Layer numbers in the report are 1-based."""
    cfg = cfg or SimilarityConfig()
    ck, rs = similarity_matrices(edge_outputs, cloud_outputs)
    matches, unmatched = select_matches(ck, rs, cfg)
    shared = [m.edge_layer for m in matches]
    return LayerMatchReport(ck, rs, matches, shared, unmatched, cfg)


def probe_embeddings(num_samples, width, seed):
    """Seeded standard-normal probe rows. Models of different widths use the
    leading columns of one shared draw."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((num_samples, width))


def probe_outputs(model, probes):
    """Per-layer outputs of ``model`` on the probe rows (as a causal sequence)."""
    _, outputs = prefill(model, probes[:, : model.config.hidden_size])
    return outputs


def match_models(edge_model, cloud_model, cfg=None, seed=0):
    cfg = cfg or SimilarityConfig()
    width = max(edge_model.config.hidden_size, cloud_model.config.hidden_size)
    probes = probe_embeddings(cfg.num_probe_samples, width, seed)
    return match_layers(probe_outputs(edge_model, probes), probe_outputs(cloud_model, probes), cfg)

"""Per-client ownership signatures: key generation, embedding regularizers
with exact gradients, and white-box / black-box / aggregated verification.

A signature is a vector of target bits in {-1,+1}.  White-box extraction
reads values b = w^T E from a selected parameter pool w (normalization
scales or a kernel weight tensor) through a secret extraction key E, and
decodes bits as their signs.  Two embedding regularizers are supported:

* hinge:  sum_j max(margin - t_j * b_j, 0)   (zero iff every bit holds
  with the given margin),
* bce:    binary cross-entropy between sigmoid(b_j) and the bits mapped
  to {0,1}.

Black-box verification feeds a client's secret trigger set through the
model and compares predictions with the designated target labels.
"""

import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import io
from .data import TriggerSet, forge_pattern_triggers, forge_pgd_triggers, trigger_error
from .errors import CapacityError, KeyMismatchError, ShapeError
from .nn import rng_for

DEFAULT_MARGIN = 0.1
DEFAULT_EPS_Y = 0.2


def default_eps_h(n_bits):
    """Hamming radius: 5% of the bit length, rounded up."""
    return math.ceil(0.05 * n_bits)


# ---------------------------------------------------------------------------
# key material

@dataclass
class ExtractionKey:
    """Selector naming the embedding pool plus the extraction map.

    Exactly one of `coords` (distinct flat indices into the selected pool;
    the identity-matrix scheme generalized to a coordinate subset) or
    `matrix` (dense pool_size x n_bits Gaussian map) is set.
    """

    selector: tuple
    pool_size: int
    coords: Optional[np.ndarray] = None
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.coords is None) == (self.matrix is None):
            raise KeyMismatchError("exactly one of coords/matrix must be set")

    @property
    def n_bits(self):
        return len(self.coords) if self.coords is not None else self.matrix.shape[1]

    def dense(self):
        """Materialize the extraction matrix (one-hot columns in coord mode)."""
        if self.matrix is not None:
            return self.matrix
        e = np.zeros((self.pool_size, len(self.coords)))
        e[self.coords, np.arange(len(self.coords))] = 1.0
        return e


@dataclass
class WatermarkKey:
    client_id: int
    bits: np.ndarray  # {-1,+1}, int8
    extractor: ExtractionKey
    triggers: Optional[TriggerSet]
    margin: float = DEFAULT_MARGIN
    seed: int = 0

    @property
    def n_bits(self):
        return len(self.bits)


@dataclass
class VerificationResult:
    mode: str  # white | black | aggregated
    detection_rate: float
    verdict: bool
    hamming: Optional[int] = None
    trigger_error: Optional[float] = None
    degenerate: bool = False

    def summary(self):
        parts = [f"mode={self.mode}", f"detection_rate={self.detection_rate:.4f}"]
        if self.hamming is not None:
            parts.append(f"hamming={self.hamming}")
        if self.trigger_error is not None:
            parts.append(f"trigger_error={self.trigger_error:.4f}")
        parts.append("PASS" if self.verdict else "FAIL")
        if self.degenerate:
            parts.append("(degenerate: no keys)")
        return " ".join(parts)


def bits_to_binary(bits):
    return ((np.asarray(bits) + 1) // 2).astype(np.int8)


def binary_to_bits(binary):
    return (2 * np.asarray(binary) - 1).astype(np.int8)


# ---------------------------------------------------------------------------
# selectors

def default_selector(net, mode):
    """Embedding pool policy: all scale-norm layers for scale mode, the
    last non-head kernel tensor for kernel mode."""
    if mode == "scale":
        sel = tuple((i, "scale") for i, l in enumerate(net.layers) if l.kind == "scale-norm")
        if not sel:
            raise KeyMismatchError("network has no scale-norm layers")
        return sel
    if mode == "kernel":
        convs = [i for i, l in enumerate(net.layers) if l.kind == "conv2d"]
        if convs:
            return ((convs[-1], "kernel"),)
        dense = [i for i, l in enumerate(net.layers) if l.kind == "dense"]
        if len(dense) < 2:
            raise KeyMismatchError("network has no non-head kernel tensor")
        return ((dense[-2], "kernel"),)
    raise KeyMismatchError(f"unknown embedding mode {mode!r}")


def flatten_selected(params, selector):
    """Columnized vector of the selected parameter pool, in selector order."""
    parts = []
    for key in selector:
        if key not in params:
            raise KeyMismatchError(f"selector entry {key} not present in parameters")
        parts.append(params[key].ravel())
    return np.concatenate(parts)


def _scatter_selected(params, selector, flat):
    """Zero gradient ModelParams with `flat` distributed over the selected pool."""
    grads = params.zeros_like()
    pos = 0
    for key in selector:
        arr = grads[key]
        arr += flat[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return grads


# ---------------------------------------------------------------------------
# key generation

def keygen(net, client_id, n_bits, n_triggers, mode, seed, dataset=None,
           trigger_kind="pattern", vanilla=None, pgd_eps=0.3, pgd_lr=0.01,
           pgd_iters=80, margin=DEFAULT_MARGIN):
    """Generate one client's secret key: bits, extraction key, trigger set.

    Bits are i.i.d. uniform {-1,+1}.  In scale mode the coordinates come
    from slices of one seed-shared channel permutation, offset by client
    id, so clients stay disjoint while the total bit count fits the pool;
    in kernel mode the extraction matrix is dense i.i.d. standard normal.
    Deterministic per (seed, client_id).
    """
    if n_bits < 1:
        raise ShapeError("n_bits must be >= 1")
    selector = default_selector(net, mode)
    pool = flatten_selected(net.params, selector).size
    bits = rng_for(seed, "wm-bits", client_id).choice(np.array([-1, 1], dtype=np.int8),
                                                      size=n_bits)
    if mode == "scale":
        if n_bits > pool:
            raise CapacityError(f"{n_bits} bits exceed the {pool}-channel pool")
        perm = rng_for(seed, "wm-coords").permutation(pool)
        offsets = (client_id * n_bits + np.arange(n_bits)) % pool
        extractor = ExtractionKey(selector, pool, coords=perm[offsets])
    else:
        matrix = rng_for(seed, "wm-matrix", client_id).normal(size=(pool, n_bits))
        extractor = ExtractionKey(selector, pool, matrix=matrix)

    triggers = None
    if n_triggers > 0:
        if dataset is None:
            raise ShapeError("trigger forging needs a dataset")
        target = client_id % dataset.class_count
        if trigger_kind == "pattern":
            triggers = forge_pattern_triggers(dataset, n_triggers, target,
                                              seed=rng_seed_int(seed, client_id))
        elif trigger_kind == "pgd":
            if vanilla is None:
                raise ShapeError("pgd triggers need a trained vanilla model")
            triggers = forge_pgd_triggers(vanilla, dataset, n_triggers, target,
                                          eps=pgd_eps, lr=pgd_lr, iters=pgd_iters,
                                          seed=rng_seed_int(seed, client_id))
        else:
            raise ShapeError(f"unknown trigger kind {trigger_kind!r}")
    # keyfiles record an integer provenance seed even for composite seeds
    stored = int(seed) if isinstance(seed, (int, np.integer)) else rng_seed_int(seed, client_id)
    return WatermarkKey(client_id, bits, extractor, triggers, margin, stored)


def rng_seed_int(seed, client_id):
    """Stable per-client sub-seed derived from an arbitrary seed object."""
    return int(rng_for(seed, "sub-seed", client_id).integers(0, 2**31))


# ---------------------------------------------------------------------------
# extraction and regularizers

def extract(params, extractor):
    """Real-valued signature readout: flatten(selected pool)^T E."""
    w = flatten_selected(params, extractor.selector)
    if w.size != extractor.pool_size:
        raise KeyMismatchError(
            f"pool size {w.size} does not match key's {extractor.pool_size}")
    if extractor.coords is not None:
        return w[extractor.coords]
    return w @ extractor.matrix


def read_bits(values):
    """Elementwise sign with sign(0) := +1."""
    return np.where(np.asarray(values) >= 0, 1, -1).astype(np.int8)


def _bit_grad_to_params(params, extractor, dloss_db):
    if extractor.coords is not None:
        flat = np.zeros(extractor.pool_size)
        np.add.at(flat, extractor.coords, dloss_db)
    else:
        flat = extractor.matrix @ dloss_db
    return _scatter_selected(params, extractor.selector, flat)


def hinge_reg(params, key):
    """Sign hinge loss sum_j max(margin - t_j b_j, 0) and its gradient."""
    b = extract(params, key.extractor)
    t = key.bits.astype(np.float64)
    slack = key.margin - t * b
    active = slack > 0
    loss = float(slack[active].sum())
    dloss_db = np.where(active, -t, 0.0)
    return loss, _bit_grad_to_params(params, key.extractor, dloss_db)


def bce_reg(params, key):
    """Binary cross-entropy between sigmoid(b_j) and bits mapped to {0,1}."""
    b = extract(params, key.extractor)
    t01 = bits_to_binary(key.bits).astype(np.float64)
    # stable: bce_j = softplus(-b) for t=1, softplus(b) for t=0
    z = np.where(t01 > 0.5, -b, b)
    loss = float((np.logaddexp(0.0, z)).sum())
    f = 1.0 / (1.0 + np.exp(-b))
    return loss, _bit_grad_to_params(params, key.extractor, f - t01)


# ---------------------------------------------------------------------------
# verification

def verify_white(params, key, eps_h=None):
    """Hamming test of extracted signs against the client's target bits."""
    if eps_h is None:
        eps_h = default_eps_h(key.n_bits)
    decoded = read_bits(extract(params, key.extractor))
    hamming = int((decoded != key.bits).sum())
    eta = 1.0 - hamming / key.n_bits
    return VerificationResult("white", eta, hamming <= eps_h, hamming=hamming)


def verify_black(net, triggers, eps_y=DEFAULT_EPS_Y):
    """Trigger-set test: misclassification rate of designated labels."""
    if triggers.samples.shape[1:] != net.input_shape:
        raise KeyMismatchError("trigger samples do not match the network input")
    err = trigger_error(net, triggers)
    return VerificationResult("black", 1.0 - err, err <= eps_y, trigger_error=err)


def verify_aggregated(net, params, keys, eps_h=None, eps_y=DEFAULT_EPS_Y):
    """Server-side conjunction over all registered clients: every white
    check and every black check must pass.  An empty key set is vacuously
    TRUE and flagged degenerate."""
    keys = list(keys)
    if not keys:
        return VerificationResult("aggregated", 1.0, True, degenerate=True)
    hamming = 0
    total_bits = 0
    errors = []
    verdict = True
    for key in keys:
        white = verify_white(params, key, eps_h)
        hamming += white.hamming
        total_bits += key.n_bits
        verdict &= white.verdict
        if key.triggers is not None:
            black = verify_black(net, key.triggers, eps_y)
            errors.append(black.trigger_error)
            verdict &= black.verdict
    eta = 1.0 - hamming / total_bits
    trig = float(np.mean(errors)) if errors else None
    return VerificationResult("aggregated", eta, bool(verdict), hamming=hamming,
                              trigger_error=trig)


# ---------------------------------------------------------------------------
# keyfile serialization

def save_key(key, path, trigger_path=None):
    """Write the secret keyfile (0600).  Triggers, if any, go to a sibling
    artifact referenced by relative name."""
    ref = ""
    if key.triggers is not None:
        if trigger_path is None:
            trigger_path = str(path) + ".triggers"
        key.triggers.save(trigger_path)
        os.chmod(trigger_path, 0o600)
        ref = os.path.basename(trigger_path)
    io.save_keyfile(
        path, client_id=key.client_id, mode="scale" if key.extractor.coords is not None else "kernel",
        seed=key.seed, bits=key.bits, selector=key.extractor.selector,
        pool_size=key.extractor.pool_size, coords=key.extractor.coords,
        matrix=key.extractor.matrix, trigger_ref=ref, margin=key.margin)


def load_key(path):
    raw = io.load_keyfile(path)
    extractor = ExtractionKey(raw["selector"], raw["pool_size"],
                              coords=raw["coords"], matrix=raw["matrix"])
    triggers = None
    if raw["trigger_ref"]:
        triggers = TriggerSet.load(os.path.join(os.path.dirname(os.path.abspath(path)),
                                                raw["trigger_ref"]))
    return WatermarkKey(raw["client_id"], raw["bits"], extractor, triggers,
                        raw["margin"], raw["seed"])

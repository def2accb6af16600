"""From-scratch feedforward Q network with a permutation-invariant vehicle encoder.

Pure numpy, float64, manual backprop. Three head modes:
  * monolithic          -- shared per-vehicle tower, sum-pool, merged layers, one q head
  * factored-min        -- per-vehicle q heads, final q(a) = min over present vehicles
  * factored-plus-merged -- per-vehicle q heads whose min is fed back into the merged path

Per-vehicle towers literally share weights, which forces permutation invariance;
pooling sorts contributions before summing so the invariance is bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LexidriveError, ModelValidationError

HEAD_MODES = ("monolithic", "factored-min", "factored-plus-merged")


class NumericsError(LexidriveError):
    """Non-finite value encountered in a loss, gradient, or update."""


@dataclass(frozen=True)
class NetworkSpec:
    ego_dim: int
    veh_dim: int
    m: int
    shared_sizes: tuple = (64, 64, 64, 64)
    merged_sizes: tuple = (64, 64)
    head_mode: str = "monolithic"
    n_actions: int = 9

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise ModelValidationError(f"unknown head mode {self.head_mode!r}")
        sizes = (self.ego_dim, self.veh_dim, self.m, self.n_actions,
                 *self.shared_sizes, *self.merged_sizes)
        if any(int(s) < 1 for s in sizes):
            raise ModelValidationError("all spec sizes must be >= 1")

    @property
    def has_factored_heads(self) -> bool:
        return self.head_mode in ("factored-min", "factored-plus-merged")

    @property
    def has_merged_path(self) -> bool:
        return self.head_mode in ("monolithic", "factored-plus-merged")

    def layer_shapes(self) -> list[tuple[str, tuple]]:
        """Ordered (name, shape) pairs; the order defines the flat layout."""
        shapes = []
        d = self.ego_dim + self.veh_dim
        for i, h in enumerate(self.shared_sizes):
            shapes.append((f"shared_w{i}", (d, h)))
            shapes.append((f"shared_b{i}", (h,)))
            d = h
        if self.has_factored_heads:
            shapes.append(("head_w", (d, self.n_actions)))
            shapes.append(("head_b", (self.n_actions,)))
            shapes.append(("free_q", (self.n_actions,)))
        if self.has_merged_path:
            dm = self.ego_dim + d
            if self.head_mode == "factored-plus-merged":
                dm += self.n_actions
            for i, h in enumerate(self.merged_sizes):
                shapes.append((f"merged_w{i}", (dm, h)))
                shapes.append((f"merged_b{i}", (h,)))
                dm = h
            shapes.append(("out_w", (dm, self.n_actions)))
            shapes.append(("out_b", (self.n_actions,)))
        return shapes


class Parameters:
    """Flat float64 vector with named reshaped views into it."""

    def __init__(self, spec: NetworkSpec, flat: np.ndarray | None = None):
        self.spec = spec
        shapes = spec.layer_shapes()
        total = sum(int(np.prod(s)) for _, s in shapes)
        if flat is None:
            flat = np.zeros(total)
        flat = np.ascontiguousarray(flat, dtype=float)
        if flat.shape != (total,):
            raise ModelValidationError(f"expected {total} parameters, got {flat.shape}")
        self.flat = flat
        self.views = {}
        ofs = 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            self.views[name] = self.flat[ofs:ofs + n].reshape(shape)
            ofs += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def __setitem__(self, name: str, value) -> None:
        self.views[name][...] = value

    def copy(self) -> "Parameters":
        return Parameters(self.spec, self.flat.copy())


def init_parameters(spec: NetworkSpec, rng: np.random.Generator) -> Parameters:
    """Fan-in-scaled uniform init; biases and the free-road head start at zero."""
    params = Parameters(spec)
    for name, view in params.views.items():
        if name.endswith("b") or "_b" in name or name == "free_q":
            continue
        bound = 1.0 / np.sqrt(view.shape[0])
        view[...] = rng.uniform(-bound, bound, size=view.shape)
    return params


def copy_parameters(src: Parameters) -> Parameters:
    return src.copy()


def _canonical_sum(contrib: np.ndarray) -> np.ndarray:
    """Sum over the vehicle axis in a permutation-independent order."""
    return np.sort(contrib, axis=1).sum(axis=1)


def _masked_min(q_fact: np.ndarray, mask: np.ndarray, free_q: np.ndarray):
    """Elementwise min over present vehicles; free-road rows fall back to free_q.

    Returns (q, argmin index array, any_present). Ties go to the lowest slot.
    """
    big = np.where(mask[:, :, None], q_fact, np.inf)
    any_present = mask.any(axis=1)
    arg = big.argmin(axis=1)                        # (B, A), lowest index on ties
    q = np.take_along_axis(big, arg[:, None, :], axis=1)[:, 0, :]
    q = np.where(any_present[:, None], q, free_q[None, :])
    return q, arg, any_present


def forward(spec: NetworkSpec, params: Parameters, ego: np.ndarray,
            vehicles: np.ndarray, mask: np.ndarray):
    """Batch forward pass.

    ego: (B, ego_dim); vehicles: (B, m, veh_dim); mask: (B, m) bool.
    Returns (q, q_fact, cache); q_fact is None in monolithic mode.
    """
    ego = np.asarray(ego, dtype=float)
    vehicles = np.asarray(vehicles, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if ego.ndim == 1:
        ego, vehicles, mask = ego[None], vehicles[None], mask[None]
        squeeze = True
    else:
        squeeze = False
    b = ego.shape[0]
    if ego.shape != (b, spec.ego_dim) or vehicles.shape != (b, spec.m, spec.veh_dim) \
            or mask.shape != (b, spec.m):
        raise ModelValidationError("feature shapes do not match the network spec")

    x = np.concatenate([np.broadcast_to(ego[:, None, :], (b, spec.m, spec.ego_dim)),
                        vehicles], axis=2)
    shared_pre, shared_post = [], []
    h = x
    n_shared = len(spec.shared_sizes)
    for i in range(n_shared):
        z = h @ params[f"shared_w{i}"] + params[f"shared_b{i}"]
        shared_pre.append(z)
        if i < n_shared - 1:
            h = np.maximum(z, 0.0)
            shared_post.append(h)
    z_last = shared_pre[-1]                     # (B, m, H) pre-activation
    a_last = np.maximum(z_last, 0.0)            # per-vehicle post-activation

    q_fact = None
    min_arg = any_present = None
    if spec.has_factored_heads:
        q_fact = a_last @ params["head_w"] + params["head_b"]
        q_min, min_arg, any_present = _masked_min(q_fact, mask, params["free_q"])

    cache = {"x": x, "shared_pre": shared_pre, "shared_post": shared_post,
             "a_last": a_last, "mask": mask, "ego": ego,
             "min_arg": min_arg, "any_present": any_present, "squeeze": squeeze}

    if spec.head_mode == "factored-min":
        q = q_min
    else:
        pooled = _canonical_sum(z_last * mask[:, :, None])
        g = np.maximum(pooled, 0.0)
        parts = [ego, g]
        if spec.head_mode == "factored-plus-merged":
            parts.append(q_min)
        hm = np.concatenate(parts, axis=1)
        merged_pre, merged_post = [], [hm]
        for i in range(len(spec.merged_sizes)):
            z = merged_post[-1] @ params[f"merged_w{i}"] + params[f"merged_b{i}"]
            merged_pre.append(z)
            merged_post.append(np.maximum(z, 0.0))
        q = merged_post[-1] @ params["out_w"] + params["out_b"]
        cache.update({"pooled": pooled, "merged_pre": merged_pre,
                      "merged_post": merged_post})

    if squeeze:
        q = q[0]
        q_fact = None if q_fact is None else q_fact[0]
    return q, q_fact, cache


def backward(spec: NetworkSpec, params: Parameters, cache: dict,
             dq: np.ndarray, dq_fact: np.ndarray | None = None) -> np.ndarray:
    """Exact gradient of sum(dq * q) + sum(dq_fact * q_fact) w.r.t. the flat vector.

    The min merge routes dq only to the per-action argmin head (lowest slot on
    ties); absent slots never receive gradient.
    """
    dq = np.asarray(dq, dtype=float)
    if cache["squeeze"]:
        dq = dq[None]
        if dq_fact is not None:
            dq_fact = np.asarray(dq_fact, dtype=float)[None]
    if not np.isfinite(dq).all() or (dq_fact is not None and not np.isfinite(dq_fact).all()):
        bad = int(np.argwhere(~np.isfinite(dq).all(axis=-1)).ravel()[0]) \
            if not np.isfinite(dq).all() else -1
        raise NumericsError(f"non-finite loss gradient (batch index {bad})")

    grads = Parameters(spec)  # zero-initialized accumulator
    mask = cache["mask"]
    b, m = mask.shape

    d_qfact = np.zeros((b, m, spec.n_actions))
    if dq_fact is not None:
        d_qfact += np.where(mask[:, :, None], dq_fact, 0.0)

    d_z_last = np.zeros_like(cache["shared_pre"][-1])
    d_free = np.zeros(spec.n_actions)
    d_minq = None

    if spec.head_mode == "factored-min":
        d_minq = dq
    if spec.has_merged_path:
        # merged trunk backward
        d_out = dq
        grads["out_w"] += cache["merged_post"][-1].reshape(b, -1).T @ d_out
        grads["out_b"] += d_out.sum(axis=0)
        d_h = d_out @ params["out_w"].T
        for i in reversed(range(len(spec.merged_sizes))):
            d_z = d_h * (cache["merged_pre"][i] > 0)
            grads[f"merged_w{i}"] += cache["merged_post"][i].T @ d_z
            grads[f"merged_b{i}"] += d_z.sum(axis=0)
            d_h = d_z @ params[f"merged_w{i}"].T
        # split the merged input gradient: [ego | pooled | (minq)]
        ofs = spec.ego_dim
        h_pool = spec.shared_sizes[-1]
        d_g = d_h[:, ofs:ofs + h_pool]
        if spec.head_mode == "factored-plus-merged":
            d_minq = d_h[:, ofs + h_pool:]
        d_pooled = d_g * (cache["pooled"] > 0)
        d_z_last += d_pooled[:, None, :] * mask[:, :, None]

    if d_minq is not None:
        # route through the min: only the argmin slot per action gets gradient
        any_present = cache["any_present"]
        arg = cache["min_arg"]
        routed = np.zeros((b, m, spec.n_actions))
        np.put_along_axis(routed, arg[:, None, :],
                          (d_minq * any_present[:, None])[:, None, :], axis=1)
        d_qfact += routed
        d_free += (d_minq * ~any_present[:, None]).sum(axis=0)

    if spec.has_factored_heads:
        grads["free_q"] += d_free
        a_last = cache["a_last"]
        grads["head_w"] += a_last.reshape(-1, a_last.shape[-1]).T @ d_qfact.reshape(-1, spec.n_actions)
        grads["head_b"] += d_qfact.sum(axis=(0, 1))
        d_a_last = d_qfact @ params["head_w"].T
        d_z_last += d_a_last * (cache["shared_pre"][-1] > 0)

    # shared tower backward (weights shared across slots: fold B and m together)
    d_z = d_z_last
    n_shared = len(spec.shared_sizes)
    for i in reversed(range(n_shared)):
        inp = cache["shared_post"][i - 1] if i > 0 else cache["x"]
        grads[f"shared_w{i}"] += inp.reshape(-1, inp.shape[-1]).T @ d_z.reshape(-1, d_z.shape[-1])
        grads[f"shared_b{i}"] += d_z.sum(axis=(0, 1))
        if i > 0:
            d_h = d_z @ params[f"shared_w{i}"].T
            d_z = d_h * (cache["shared_pre"][i - 1] > 0)
    return grads.flat


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for one parameter vector."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def ensure(self, n: int) -> None:
        if self.m is None:
            self.m = np.zeros(n)
            self.v = np.zeros(n)


def apply_update(params: Parameters, gradient: np.ndarray, state: AdamState) -> Parameters:
    """One clipped adaptive-moment step, in place. Raises on non-finite input."""
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != params.flat.shape:
        raise ModelValidationError("gradient/parameter dimensionality mismatch")
    if not np.isfinite(gradient).all():
        raise NumericsError("non-finite gradient; update refused")
    state.ensure(params.flat.size)
    norm = float(np.linalg.norm(gradient))
    if state.clip_norm and norm > state.clip_norm:
        gradient = gradient * (state.clip_norm / norm)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * gradient
    state.v = state.beta2 * state.v + (1 - state.beta2) * gradient ** 2
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    params.flat -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.isfinite(params.flat).all():
        raise NumericsError("parameters became non-finite after update")
    return params


CHECKPOINT_VERSION = 1


def save_parameters(path, params: Parameters) -> None:
    """Bit-exact checkpoint: spec header + raw float64 flat vector (.npz)."""
    spec = params.spec
    np.savez(path,
             version=np.int64(CHECKPOINT_VERSION),
             ego_dim=spec.ego_dim, veh_dim=spec.veh_dim, m=spec.m,
             shared_sizes=np.array(spec.shared_sizes, dtype=np.int64),
             merged_sizes=np.array(spec.merged_sizes, dtype=np.int64),
             head_mode=np.str_(spec.head_mode), n_actions=spec.n_actions,
             flat=params.flat)


def load_parameters(path) -> Parameters:
    with np.load(path) as data:
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ModelValidationError(
                f"unsupported checkpoint version {int(data['version'])}")
        spec = NetworkSpec(
            ego_dim=int(data["ego_dim"]), veh_dim=int(data["veh_dim"]),
            m=int(data["m"]),
            shared_sizes=tuple(int(s) for s in data["shared_sizes"]),
            merged_sizes=tuple(int(s) for s in data["merged_sizes"]),
            head_mode=str(data["head_mode"]), n_actions=int(data["n_actions"]))
        return Parameters(spec, data["flat"].copy())

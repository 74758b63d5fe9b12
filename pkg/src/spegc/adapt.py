"""Per-sample continual test-time adaptation over a stream.

One stream sample goes through MC-dropout node selection, prompt
enhancement, pseudo-batch assembly, the graph clustering solver, the joint
loss, exactly one SGD step on every learnable, and a dropout-free
prediction with the updated weights.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import dgcs, losses
from . import tape as T
from .backbone import Backbone, extract_patches
from .nodes import FeatureQueue, NodeBlock, NodeSelection, Projection, PseudoBatch, estimate_uncertainty, select_nodes
from .numerics import NonFiniteError
from .rng import Rng
from .spfe import PromptPool, RetrievalResult, commonality_prompts, enhance_nodes, init_context
from .stream import StreamSample, foreground_dice
from .tape import Value

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    lam: float = 0.2
    p: float = 0.5
    queue_size: int = 3
    n_clusters: int = 48
    mc_passes: int = 4
    n_prompts: int = 8
    theta: float = 0.05
    tau: float = 1.0
    h: int = 16
    n_target: int = 32
    lr: float = 0.005
    momentum: float = 0.9
    cost_mode: str = "squared"
    cost_normalize: bool = True
    rounds: int = 1
    seed: int = 0
    max_iter: int = 200
    tol: float = 1e-6
    density_r: int | None = None
    zero_diagonal: bool = False
    prompt_init: float = 0.5
    grad_clip: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.lam < 0:
            problems.append("lam must be >= 0")
        if not 0 < self.p <= 1:
            problems.append("p must lie in (0, 1]")
        for name in ("n_clusters", "n_prompts", "h", "n_target", "rounds", "max_iter"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.queue_size < 0:
            problems.append("queue_size must be >= 0")
        if self.mc_passes < 2:
            problems.append("mc_passes must be >= 2")
        if self.theta <= 0 or self.tau <= 0:
            problems.append("theta and tau must be > 0")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            problems.append("lr must be >= 0 and momentum in [0, 1)")
        if self.cost_mode not in dgcs.COST_MODES:
            problems.append(f"cost_mode must be one of {dgcs.COST_MODES}")
        if self.seed < 0:
            problems.append("seed must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            problems.append("grad_clip must be > 0 or None")
        if problems:
            raise ValueError("invalid AdaptConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class AdapterParams:
    """Learnables created at adaptation start (everything except the backbone)."""

    projection: Projection
    pool_co: PromptPool
    pool_he: PromptPool
    c_p: Value
    sim: dgcs.SimilarityParams

    @classmethod
    def init(cls, feature_dim: int, config: AdaptConfig, rng: Rng) -> "AdapterParams":
        h, M = config.h, config.n_prompts
        return cls(
            projection=Projection.init(feature_dim, h, rng),
            pool_co=PromptPool.init("CO", M, h, rng, config.prompt_init),
            pool_he=PromptPool.init("HE", M, h, rng, config.prompt_init),
            c_p=init_context(h, rng),
            sim=dgcs.SimilarityParams.init(h, rng),
        )

    def params(self) -> dict[str, Value]:
        return {
            **self.projection.params(),
            "P_CO": self.pool_co.prompts,
            "P_HE": self.pool_he.prompts,
            "c_p": self.c_p,
            "W_q": self.sim.W_q,
            "W_k": self.sim.W_k,
        }


PARAM_GROUPS = {
    "backbone": ("enc_w", "enc_b", "feat_w", "feat_b", "head_w", "head_b"),
    "P_CO": ("P_CO",),
    "P_HE": ("P_HE",),
    "W_q": ("W_q",),
    "W_k": ("W_k",),
    "c_p": ("c_p",),
    "projection": ("proj_w1", "proj_b1", "proj_w2", "proj_b2"),
}


class SGD:
    """SGD with heavy-ball momentum: ``v <- m v + g``, ``w <- w - lr v``."""

    def __init__(self, params: dict[str, Value], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.steps = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        sgd_update(self.params, grads, self)
        self.steps += 1

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.velocity.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.velocity = {k: v.copy() for k, v in state.items()}


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None
                     ) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients jointly so their combined L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def sgd_update(params: dict[str, Value], grads: dict[str, np.ndarray], state: SGD) -> None:
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        v = state.velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        v *= state.momentum
        v += g
        p.data -= state.lr * v


@dataclass
class AdaptState:
    model: Backbone
    adapter: AdapterParams
    optimizer: SGD
    queue: FeatureQueue
    config: AdaptConfig
    step: int = 0

    @classmethod
    def create(cls, model: Backbone, config: AdaptConfig) -> "AdaptState":
        adapter = AdapterParams.init(model.config.feature_dim, config, Rng(config.seed).child("adapter"))
        params = {**model.params, **adapter.params()}
        return cls(model=model, adapter=adapter,
                   optimizer=SGD(params, config.lr, config.momentum),
                   queue=FeatureQueue(config.queue_size), config=config)

    @property
    def params(self) -> dict[str, Value]:
        return self.optimizer.params

    def snapshot(self) -> dict:
        return {
            "params": {k: p.data.copy() for k, p in self.params.items()},
            "velocity": self.optimizer.state(),
            "queue": self.queue.snapshot(),
            "optimizer_steps": self.optimizer.steps,
        }

    def restore(self, snap: dict) -> None:
        for k, v in snap["params"].items():
            self.params[k].data[...] = v
        self.optimizer.load_state(snap["velocity"])
        self.queue.restore(snap["queue"])
        self.optimizer.steps = snap["optimizer_steps"]


@dataclass
class StepReport:
    step: int
    round: int
    sample_index: int
    domain_id: str
    L: float
    L_G: float
    L_C: float
    dsc: dict
    dsc_mean: float
    sinkhorn_iterations: int
    sinkhorn_residual: float
    sinkhorn_converged: bool
    V: int
    k: int
    B: int
    k_clamped: bool
    foreground_fallback: bool
    aborted: bool = False
    abort_reason: str = ""
    optimizer_steps: int = 0
    grad_norm: float = math.nan

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps({"kind": "step", **self.to_dict()}, sort_keys=True)


@dataclass
class LossBundle:
    loss: Value
    L_G: Value
    L_C: Value
    batch: PseudoBatch
    cluster: dgcs.ClusterResult
    retrieval: RetrievalResult
    current: NodeBlock


def select_for_image(model: Backbone, image: np.ndarray, config: AdaptConfig, rng: Rng
                     ) -> NodeSelection:
    """MC-dropout passes, uncertainty map, and low-uncertainty foreground sampling."""
    passes = [model.forward(image, dropout_active=True, rng=rng.child("mc", i))[0]
              for i in range(config.mc_passes)]
    U = estimate_uncertainty(passes)
    _, probs = model.forward(image, dropout_active=False)
    return select_nodes(U, probs, config.p, config.n_target, rng.child("select"))


def node_patches(model: Backbone, image: np.ndarray, coords: np.ndarray) -> np.ndarray:
    W = np.asarray(image).shape[1]
    flat = coords[:, 0] * W + coords[:, 1]
    return extract_patches(image, model.config.patch)[flat]


def pipeline_loss(model: Backbone, adapter: AdapterParams, patches: np.ndarray,
                  queue: FeatureQueue, config: AdaptConfig, image_id: int = -1,
                  ref_logit_offset: Value | None = None) -> LossBundle:
    """Taped forward pass from the current image's node patches to the total loss.

    ``queue`` is rotated (the current block is enqueued detached).
    ``ref_logit_offset`` is added to the logits used only behind the
    stop-gradient; it exists to probe barrier soundness.
    """
    feats = model.features(patches)
    V_i = adapter.projection(feats)
    V_star, retrieval = enhance_nodes(V_i, adapter.c_p, adapter.pool_co, adapter.pool_he)
    current = NodeBlock(enhanced=V_star, features=feats, query=retrieval.query, image_id=image_id)
    batch = queue.assemble_and_rotate(current)

    cluster = dgcs.cluster(batch.enhanced(), adapter.sim, config.n_clusters, tau=config.tau,
                           density_r=config.density_r, theta=config.theta,
                           cost_mode=config.cost_mode, max_iter=config.max_iter,
                           tol=config.tol, zero_diagonal=config.zero_diagonal,
                           normalize=config.cost_normalize)
    all_feats = batch.features()
    logits = model.logits(all_feats)
    P = T.softmax(logits, axis=1)
    P_ref = None if ref_logit_offset is None else T.softmax(logits + ref_logit_offset, axis=1)
    L_G = losses.graph_consistency_loss(cluster.S_star, P, P_ref)
    L_C = losses.clustering_loss(commonality_prompts(batch.queries(), adapter.pool_co))
    loss = losses.total_loss(L_G, L_C, config.lam)
    return LossBundle(loss, L_G, L_C, batch, cluster, retrieval, current)


def _dice_report(model: Backbone, sample: StreamSample) -> tuple[dict, float]:
    dsc = foreground_dice(model.predict(sample.image), sample.mask)
    return dsc, float(np.mean(list(dsc.values())))


def adapt_step(state: AdaptState, sample: StreamSample, round_index: int = 0) -> StepReport:
    """Run one sample through the full adaptation step and report on it.

    A non-finite value anywhere in the step restores parameters, optimizer
    state and queue to their pre-step values; the stream then continues.
    """
    config = state.config
    rng = Rng(config.seed).child("step", state.step)
    snap = state.snapshot()
    aborted, reason = False, ""
    L = L_G = L_C = grad_norm = math.nan
    iters, residual, converged = 0, math.nan, False
    V = k = B = 0
    k_clamped = False
    selection = None
    try:
        selection = select_for_image(state.model, sample.image, config, rng)
        patches = node_patches(state.model, sample.image, selection.coords)
        bundle = pipeline_loss(state.model, state.adapter, patches, state.queue, config,
                               image_id=sample.index)
        plan = bundle.cluster.plan
        iters, residual, converged = plan.iterations, plan.residual, plan.converged
        V, B, k, k_clamped = bundle.batch.V, bundle.batch.B, bundle.cluster.k, bundle.cluster.k_clamped
        L, L_G, L_C = bundle.loss.item(), bundle.L_G.item(), bundle.L_C.item()
        grads = T.backward(bundle.loss, state.params)
        grads, grad_norm = clip_global_norm(grads, config.grad_clip)
        if not math.isfinite(grad_norm):
            raise NonFiniteError("backward", "gradient norm")
        state.optimizer.step(grads)
        for name, p in state.params.items():
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError("sgd_update", name)
    except NonFiniteError as exc:
        state.restore(snap)
        aborted, reason = True, str(exc)
        log.warning("step %d aborted and rolled back: %s", state.step, exc)
    dsc, dsc_mean = _dice_report(state.model, sample)
    report = StepReport(
        step=state.step, round=round_index, sample_index=sample.index, domain_id=sample.domain_id,
        L=L, L_G=L_G, L_C=L_C, dsc=dsc, dsc_mean=dsc_mean,
        sinkhorn_iterations=iters, sinkhorn_residual=residual, sinkhorn_converged=converged,
        V=V, k=k, B=B, k_clamped=k_clamped,
        foreground_fallback=bool(selection.fallback) if selection is not None else False,
        aborted=aborted, abort_reason=reason, optimizer_steps=state.optimizer.steps,
        grad_norm=grad_norm,
    )
    state.step += 1
    return report


def evaluate_frozen(model: Backbone, stream: Sequence[StreamSample]) -> list[dict]:
    """Dropout-free predictions of an un-adapted model over the stream."""
    out = []
    for s in stream:
        dsc, mean = _dice_report(model, s)
        out.append({"sample_index": s.index, "domain_id": s.domain_id, "dsc": dsc, "dsc_mean": mean})
    return out


def _mean_by_domain(rows: Sequence, key) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for r in rows:
        groups.setdefault(r["domain_id"], []).append(key(r))
    return {d: float(np.mean(v)) for d, v in groups.items()}


@dataclass
class RunResult:
    reports: list[StepReport]
    baseline: list[dict]
    summary: dict = field(default_factory=dict)
    state: AdaptState | None = None


def run_stream(model: Backbone, stream: Sequence[StreamSample], config: AdaptConfig) -> RunResult:
    """Adapt over ``stream`` ``config.rounds`` times in order without resets.

    ``model`` is not modified; adaptation works on a copy. The no-adapt
    baseline is a separate frozen pass over the same samples.
    """
    baseline = evaluate_frozen(model, stream)
    state = AdaptState.create(model.copy(), config)
    reports = []
    for r in range(config.rounds):
        for sample in stream:
            reports.append(adapt_step(state, sample, round_index=r))
    rows = [rep.to_dict() for rep in reports]
    summary = {
        "kind": "summary",
        "seed": config.seed,
        "config": config.to_dict(),
        "n_steps": len(reports),
        "rounds": config.rounds,
        "aborted_steps": sum(r.aborted for r in reports),
        "adapted_dsc_mean": float(np.mean([r.dsc_mean for r in reports])),
        "no_adapt_dsc_mean": float(np.mean([b["dsc_mean"] for b in baseline])),
        "adapted_dsc_by_domain": _mean_by_domain(rows, lambda r: r["dsc_mean"]),
        "no_adapt_dsc_by_domain": _mean_by_domain(baseline, lambda r: r["dsc_mean"]),
        "adapted_dsc_by_class": {c: float(np.mean([r.dsc[c] for r in reports])) for c in ("disc", "cup")},
        "no_adapt_dsc_by_class": {c: float(np.mean([b["dsc"][c] for b in baseline])) for c in ("disc", "cup")},
        "max_sinkhorn_residual": float(np.nanmax([r.sinkhorn_residual for r in reports])),
    }
    return RunResult(reports, baseline, summary, state)

"""Self-checks shipped with the package: end-to-end gradient check and the
Sinkhorn-versus-hard-top-k comparison table."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dgcs
from . import tape as T
from .adapt import PARAM_GROUPS, AdaptConfig, AdapterParams, pipeline_loss
from .backbone import Backbone, BackboneConfig, extract_patches
from .nodes import FeatureQueue, NodeBlock
from .rng import Rng
from .spfe import enhance_nodes
from .stream import DEFAULT_TARGETS, generate_stream

SG_PROBE = "sg_probe"


@dataclass
class GradcheckConfig:
    nodes_per_block: int = 3
    blocks: int = 4  # queued blocks + the current image
    h: int = 8
    n_prompts: int = 4
    n_clusters: int = 4
    iters: int = 5
    seed: int = 2
    rel_step: float = 1e-4
    tolerance: float = 1e-4

    @property
    def V(self) -> int:
        return self.nodes_per_block * self.blocks

    def validate(self) -> None:
        if self.blocks < 1 or self.nodes_per_block < 1:
            raise ValueError("need at least one block with one node")
        if self.V > 16:
            raise ValueError(f"gradcheck instance too large: V={self.V} > 16")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")


@dataclass
class GroupResult:
    group: str
    max_rel_error: float
    max_abs_grad: float
    n_params: int
    passed: bool


@dataclass
class GradcheckReport:
    config: dict
    groups: list[GroupResult]
    loss: float
    sinkhorn_iterations: int
    seconds: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(g.passed for g in self.groups)

    def failing(self) -> list[str]:
        return [g.group for g in self.groups if not g.passed]

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}

    def table(self) -> str:
        lines = [f"{'group':<12} {'params':>6} {'max_rel_err':>12} {'max|grad|':>11}  status"]
        for g in self.groups:
            lines.append(f"{g.group:<12} {g.n_params:>6} {g.max_rel_error:>12.3e} "
                         f"{g.max_abs_grad:>11.3e}  {'ok' if g.passed else 'FAIL'}")
        return "\n".join(lines)


@dataclass
class GradcheckInstance:
    model: Backbone
    adapter: AdapterParams
    config: AdaptConfig
    patches: np.ndarray
    queued: list[NodeBlock]
    probe: T.Value

    def params(self) -> dict[str, T.Value]:
        return {**self.model.params, **self.adapter.params(), SG_PROBE: self.probe}

    def loss(self):
        queue = FeatureQueue(self.config.queue_size)
        queue.restore(self.queued)
        return pipeline_loss(self.model, self.adapter, self.patches, queue, self.config,
                             ref_logit_offset=self.probe)


def build_gradcheck_instance(cfg: GradcheckConfig) -> GradcheckInstance:
    cfg.validate()
    rng = Rng(cfg.seed).child("gradcheck")
    model = Backbone.init(BackboneConfig(), rng.child("backbone"))
    config = AdaptConfig(h=cfg.h, n_prompts=cfg.n_prompts, n_clusters=cfg.n_clusters,
                         queue_size=cfg.blocks - 1, max_iter=cfg.iters, tol=-1.0, seed=cfg.seed)
    adapter = AdapterParams.init(model.config.feature_dim, config, rng.child("adapter"))
    images = generate_stream(cfg.seed, [DEFAULT_TARGETS[0]], cfg.blocks, purpose="gradcheck")
    node_patches = []
    for i, sample in enumerate(images):
        all_patches = extract_patches(sample.image, model.config.patch)
        pick = rng.child("pixels", i).permutation(all_patches.shape[0])[:cfg.nodes_per_block]
        node_patches.append(all_patches[np.sort(pick)])
    queued = []
    for i, patches in enumerate(node_patches[:-1]):
        feats = model.features(patches)
        enhanced, retrieval = enhance_nodes(adapter.projection(feats), adapter.c_p,
                                            adapter.pool_co, adapter.pool_he)
        queued.append(NodeBlock(enhanced, feats, retrieval.query, image_id=i).detached())
    probe = T.param(rng.child("probe").normal(0.0, 0.1, (cfg.V, model.config.n_classes)), SG_PROBE)
    return GradcheckInstance(model, adapter, config, node_patches[-1], queued, probe)


def run_gradcheck(cfg: GradcheckConfig | None = None) -> GradcheckReport:
    """Compare ``backward`` with central differences for every parameter group."""
    cfg = cfg or GradcheckConfig()
    start = time.perf_counter()
    inst = build_gradcheck_instance(cfg)
    params = inst.params()
    bundle = inst.loss()
    analytic = T.backward(bundle.loss, params)
    numeric = T.fd_oracle(lambda: inst.loss().loss, params, rel_step=cfg.rel_step)
    groups = {**PARAM_GROUPS, SG_PROBE: (SG_PROBE,)}
    results = []
    for group, names in groups.items():
        a = np.concatenate([analytic[n].ravel() for n in names])
        n = np.concatenate([numeric[n].ravel() for n in names])
        err = T.max_relative_error(a, n)
        ok = err <= cfg.tolerance
        if group == SG_PROBE:
            # a parameter seen only through the barrier must get exactly nothing
            ok = ok and not np.any(a)
        results.append(GroupResult(group, err, float(np.max(np.abs(a), initial=0.0)), a.size, bool(ok)))
    return GradcheckReport(asdict(cfg), results, bundle.loss.item(),
                           bundle.cluster.plan.iterations, time.perf_counter() - start)


# Sinkhorn versus the hard top-k oracle -------------------------------------------------

@dataclass
class OracleRow:
    theta: float
    cost_mode: str
    agreement: float  # fraction of the oracle's top-k set recovered by Gamma[:, 2]
    gap_to_oracle: float  # L-inf distance to the binary assignment
    gap_to_uniform: float  # L-inf distance to k/E
    iterations: int
    residual: float
    converged: bool


def oracle_row(d: np.ndarray, k: int, theta: float, cost_mode: str = "squared",
               max_iter: int = 5000, tol: float = 1e-6) -> OracleRow:
    d = np.asarray(d, dtype=np.float64).reshape(-1, 1)
    plan = dgcs.sinkhorn_solve(dgcs.SparsifyProblem(T.Value(d), k, theta, cost_mode, max_iter, tol))
    sel = plan.select_numpy().ravel()
    hard = dgcs.topk_oracle(d, k)
    soft_top = dgcs.topk_oracle(sel, k)
    return OracleRow(
        theta=theta, cost_mode=cost_mode,
        agreement=float(np.sum(soft_top * hard) / k),
        gap_to_oracle=float(np.max(np.abs(sel - hard))),
        gap_to_uniform=float(np.max(np.abs(sel - k / d.size))),
        iterations=plan.iterations, residual=plan.residual, converged=plan.converged,
    )


def oracle_table(E: int, k: int, thetas, cost_mode: str = "squared", seed: int = 0,
                 max_iter: int = 5000, tol: float = 1e-6) -> list[OracleRow]:
    """One row per theta, all on the same random affinity vector with distinct entries."""
    if E > 10_000:
        raise ValueError(f"E={E} exceeds 10^4")
    if not 0 < k < E:
        raise ValueError(f"k={k} must satisfy 0 < k < E={E}")
    d = Rng(seed).child("oracle").uniform(0.0, 1.0, E)
    return [oracle_row(d, k, float(t), cost_mode, max_iter, tol) for t in thetas]

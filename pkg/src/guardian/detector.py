"""Unsupervised detector over temporal agent graphs.

Per round the pipeline feeds a batch of snapshots through:

  1. a shared two-layer graph convolution producing, per node, a mean and
     a log-variance (encoder output width 2d, split in half),
  2. a diagonal-Gaussian reparameterization whose KL to a standard normal
     prior is the information-compression penalty,
  3. per-agent self-attention across rounds that fuses the latent
     trajectory into one embedding per currently active agent,
  4. two decoders: a 2-layer perceptron rebuilding node attributes and an
     inner-product decoder rebuilding the (self-looped, symmetrized)
     adjacency.

Training minimizes  l_total = alpha*l_att + (1-alpha)*l_stru + gamma*kl
by full-batch Adam; inference disables sampling and hands the
reconstruction residuals to the scoring module.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .graph import HistoryBatch, normalized_adjacency, self_looped_adjacency
from .numerics import NonFiniteError, ParamStore, Tensor2D

__all__ = [
    "DetectorError",
    "TrainingDiverged",
    "DetectorConfig",
    "LatentState",
    "Reconstruction",
    "LossBreakdown",
    "gib_gamma",
    "init_params",
    "gcn_forward",
    "split_latent",
    "reparameterize",
    "kl_term",
    "positional_encoding",
    "temporal_fuse",
    "decode_attributes",
    "decode_structure",
    "compose_losses",
    "compute_losses",
    "run_forward",
    "fit",
    "infer",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = "GUARDIAN-CKPT-1"

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


class DetectorError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries epoch and last breakdown."""

    def __init__(self, epoch: int, breakdown: "LossBreakdown | None", cause: str):
        self.epoch = epoch
        self.breakdown = breakdown
        super().__init__(
            f"training diverged at epoch {epoch}: {cause}; last finite losses: {breakdown}"
        )


def gib_gamma(lambda_: float, beta: float) -> float:
    """Effective weight of the compression term: lambda / (1 + lambda*beta)."""
    if lambda_ < 0.0 or beta < 0.0:
        raise DetectorError("gib_gamma requires lambda >= 0 and beta >= 0")
    return lambda_ / (1.0 + lambda_ * beta)


@dataclass
class DetectorConfig:
    k: int = 64
    d: int = 32
    gcn_layers: int = 2
    heads: int = 1
    alpha: float = 0.4
    beta: float = 1.0
    lambda_: float = 0.01
    lr: float = 0.02
    epochs_initial: int = 50
    epochs_incremental: int = 10
    seed: int = 0
    variant: str = "temporal"

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise DetectorError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta <= 0.0:
            raise DetectorError(f"beta must be > 0, got {self.beta}")
        if self.lambda_ < 0.0:
            raise DetectorError(f"lambda must be >= 0, got {self.lambda_}")
        if self.k < 1 or self.d < 1:
            raise DetectorError("k and d must be positive")
        if self.gcn_layers != 2:
            raise DetectorError("only the two-layer graph encoder is supported")
        if self.heads != 1:
            raise DetectorError("only single-head temporal attention is supported")
        if self.variant not in ("temporal", "static"):
            raise DetectorError(f"unknown variant {self.variant!r}")

    @property
    def gamma(self) -> float:
        return gib_gamma(self.lambda_, self.beta)


@dataclass
class LatentState:
    mean: Tensor2D
    log_variance: Tensor2D
    sample: Tensor2D


@dataclass
class Reconstruction:
    round: int
    agents: list[int]
    x_hat: Tensor2D
    edge_probs: Tensor2D
    r_x: Tensor2D  # observed attributes minus x_hat
    r_e: Tensor2D  # observed (self-looped symmetrized) adjacency minus edge_probs


@dataclass(frozen=True)
class LossBreakdown:
    l_att: float
    l_stru: float
    l_rec: float
    kl: float
    l_total: float


def compose_losses(
    l_att: float, l_stru: float, kl: float, alpha: float, gamma: float
) -> LossBreakdown:
    l_rec = alpha * l_att + (1.0 - alpha) * l_stru
    l_total = l_rec + gamma * kl
    return LossBreakdown(l_att=l_att, l_stru=l_stru, l_rec=l_rec, kl=kl, l_total=l_total)


def init_params(cfg: DetectorConfig, rng: np.random.Generator) -> ParamStore:
    """Glorot-uniform weights, zero biases. Draw order is fixed by name."""

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    store = ParamStore()
    store.add("attn.wk", glorot(cfg.d, cfg.d))
    store.add("attn.wq", glorot(cfg.d, cfg.d))
    store.add("attn.wv", glorot(cfg.d, cfg.d))
    store.add("dec.b0", np.zeros((1, cfg.d)))
    store.add("dec.b1", np.zeros((1, cfg.k)))
    store.add("dec.w0", glorot(cfg.d, cfg.d))
    store.add("dec.w1", glorot(cfg.d, cfg.k))
    store.add("gcn.w0", glorot(cfg.k, 2 * cfg.d))
    store.add("gcn.w1", glorot(2 * cfg.d, 2 * cfg.d))
    return store


def gcn_forward(features: Tensor2D, norm_adj: Tensor2D, params: ParamStore) -> Tensor2D:
    """Two rounds of propagate-and-transform; the last layer stays linear
    so the downstream mean/log-variance split is sign-unconstrained."""
    w0 = params.leaf("gcn.w0")
    w1 = params.leaf("gcn.w1")
    if norm_adj.rows != norm_adj.cols or norm_adj.rows != features.rows:
        raise DetectorError(
            f"adjacency {norm_adj.shape} incompatible with features {features.shape}"
        )
    if features.cols != w0.rows:
        raise DetectorError(
            f"feature dim {features.cols} does not match encoder input {w0.rows}"
        )
    h1 = nm.relu(nm.matmul(nm.matmul(norm_adj, features), w0))
    return nm.matmul(nm.matmul(norm_adj, h1), w1)


def split_latent(hidden: Tensor2D, d: int) -> tuple[Tensor2D, Tensor2D]:
    """Split encoder output into mean and clamped log-variance halves."""
    if hidden.cols != 2 * d:
        raise DetectorError(f"encoder output width {hidden.cols} != 2*d ({2 * d})")
    mean = nm.slice_cols(hidden, 0, d)
    log_variance = nm.clamp(nm.slice_cols(hidden, d, 2 * d), LOGVAR_MIN, LOGVAR_MAX)
    return mean, log_variance


def reparameterize(
    mean: Tensor2D, log_variance: Tensor2D, rng: np.random.Generator | None
) -> Tensor2D:
    """mean + exp(log_variance / 2) * standard normal; mean when rng is None."""
    if mean.shape != log_variance.shape:
        raise DetectorError("mean and log-variance shapes differ")
    if rng is None:
        return mean
    noise = Tensor2D(rng.standard_normal(mean.shape))
    std = nm.exp(nm.scale(log_variance, 0.5))
    return nm.add(mean, nm.mul(std, noise))


def kl_term(mean: Tensor2D, log_variance: Tensor2D) -> Tensor2D:
    """Per-node average KL( N(mean, exp(logvar)) || N(0, I) ), a 1x1 tensor."""
    if mean.shape != log_variance.shape:
        raise DetectorError("mean and log-variance shapes differ")
    var = nm.exp(log_variance)
    sq = nm.mul(mean, mean)
    inner = nm.sub(nm.add_const(nm.add(var, sq), -1.0), log_variance)
    return nm.scale(nm.sum_all(inner), 0.5 / mean.rows)


def positional_encoding(rounds: list[int], d: int) -> np.ndarray:
    """Sinusoidal encodings of absolute round numbers, one row per round."""
    pe = np.zeros((len(rounds), d), dtype=np.float64)
    for r_idx, t in enumerate(rounds):
        for j in range(d):
            angle = t / (10000.0 ** (2 * (j // 2) / d))
            pe[r_idx, j] = math.sin(angle) if j % 2 == 0 else math.cos(angle)
    return pe


def temporal_fuse(
    samples: list[Tensor2D],
    batch: HistoryBatch,
    params: ParamStore,
    d: int,
    positional: bool = True,
    collect_weights: list | None = None,
) -> Tensor2D:
    """Fuse each final-round agent's latent trajectory with self-attention.

    The attention sequence contains only rounds where the agent is present
    (absent rounds never enter the softmax); the output at the last
    position is the fused embedding. With a single round this degenerates
    to the value projection of that round's latent row.
    """
    snapshots = batch.snapshots
    if len(samples) != len(snapshots):
        raise DetectorError("one latent sample per snapshot required")
    final = snapshots[-1]
    if not final.agents:
        raise DetectorError("no active agents at the final round")
    wq = params.leaf("attn.wq")
    wk = params.leaf("attn.wk")
    wv = params.leaf("attn.wv")
    inv_sqrt_d = 1.0 / math.sqrt(d)

    fused_rows: list[Tensor2D] = []
    for agent in final.agents:
        present = [ti for ti in range(len(snapshots)) if batch.presence[agent][ti]]
        seq = nm.vstack(
            [nm.row(samples[ti], snapshots[ti].agents.index(agent)) for ti in present]
        )
        if positional:
            pe = positional_encoding([snapshots[ti].round for ti in present], d)
            seq = nm.add(seq, Tensor2D(pe))
        q = nm.matmul(seq, wq)
        k = nm.matmul(seq, wk)
        v = nm.matmul(seq, wv)
        attn = nm.softmax_rows(nm.scale(nm.matmul(q, nm.transpose(k)), inv_sqrt_d))
        if collect_weights is not None:
            collect_weights.append(attn.data.copy())
        out = nm.matmul(attn, v)
        fused_rows.append(nm.row(out, out.rows - 1))
    return nm.vstack(fused_rows)


def decode_attributes(z: Tensor2D, params: ParamStore) -> Tensor2D:
    w0 = params.leaf("dec.w0")
    b0 = params.leaf("dec.b0")
    w1 = params.leaf("dec.w1")
    b1 = params.leaf("dec.b1")
    if z.cols != w0.rows:
        raise DetectorError(f"latent dim {z.cols} does not match decoder input {w0.rows}")
    hidden = nm.relu(nm.add_rowvec(nm.matmul(z, w0), b0))
    return nm.add_rowvec(nm.matmul(hidden, w1), b1)


def decode_structure(z: Tensor2D) -> Tensor2D:
    """Edge probabilities sigmoid(z_i . z_j) over all ordered pairs."""
    return nm.sigmoid(nm.matmul(z, nm.transpose(z)))


def _attribute_loss(features: Tensor2D, x_hat: Tensor2D) -> Tensor2D:
    r = nm.sub(features, x_hat)
    return nm.scale(nm.sum_all(nm.mul(r, r)), 1.0 / features.rows)


def _structure_loss(adj_target: np.ndarray, edge_probs: Tensor2D) -> Tensor2D:
    n = edge_probs.rows
    pos = Tensor2D(adj_target)
    neg = Tensor2D(1.0 - adj_target)
    ll = nm.add(
        nm.mul(pos, nm.log(edge_probs)),
        nm.mul(neg, nm.log(nm.rsub_const(1.0, edge_probs))),
    )
    return nm.scale(nm.sum_all(ll), -1.0 / (n * n))


@dataclass
class ForwardResult:
    latents: list[LatentState]
    fused: Tensor2D
    x_hat: Tensor2D
    edge_probs: Tensor2D
    kl: Tensor2D
    l_att: Tensor2D
    l_stru: Tensor2D
    loss_total: Tensor2D
    breakdown: LossBreakdown


def run_forward(
    batch: HistoryBatch,
    cfg: DetectorConfig,
    params: ParamStore,
    rng: np.random.Generator | None,
) -> ForwardResult:
    """One full differentiable pass; rng=None disables sampling (inference)."""
    if not batch.snapshots:
        raise DetectorError("empty snapshot batch")
    latents: list[LatentState] = []
    kl_parts: list[Tensor2D] = []
    for snap in batch.snapshots:
        hidden = gcn_forward(snap.features, normalized_adjacency(snap), params)
        mean, log_variance = split_latent(hidden, cfg.d)
        sample = reparameterize(mean, log_variance, rng)
        latents.append(LatentState(mean=mean, log_variance=log_variance, sample=sample))
        kl_parts.append(kl_term(mean, log_variance))

    kl = kl_parts[0]
    for part in kl_parts[1:]:
        kl = nm.add(kl, part)
    kl = nm.scale(kl, 1.0 / len(kl_parts))

    fused = temporal_fuse([ls.sample for ls in latents], batch, params, cfg.d)
    x_hat = decode_attributes(fused, params)
    edge_probs = decode_structure(fused)

    final = batch.snapshots[-1]
    l_att = _attribute_loss(final.features, x_hat)
    l_stru = _structure_loss(self_looped_adjacency(final), edge_probs)
    l_rec = nm.add(nm.scale(l_att, cfg.alpha), nm.scale(l_stru, 1.0 - cfg.alpha))
    loss_total = nm.add(l_rec, nm.scale(kl, cfg.gamma))
    breakdown = compose_losses(
        l_att.item(), l_stru.item(), kl.item(), cfg.alpha, cfg.gamma
    )
    return ForwardResult(
        latents=latents,
        fused=fused,
        x_hat=x_hat,
        edge_probs=edge_probs,
        kl=kl,
        l_att=l_att,
        l_stru=l_stru,
        loss_total=loss_total,
        breakdown=breakdown,
    )


def compute_losses(
    features: Tensor2D,
    observed_adj: np.ndarray,
    recon: Reconstruction,
    kl: float,
    cfg: DetectorConfig,
) -> LossBreakdown:
    """Loss terms from a finished reconstruction (reporting path, no tape).

    `observed_adj` is the raw boolean adjacency; the structure target is
    its self-looped symmetrization, matching training.
    """
    x_hat = recon.x_hat.data
    if x_hat.shape != features.shape:
        raise DetectorError("reconstruction/feature shape mismatch")
    n = features.rows
    l_att = float(((features.data - x_hat) ** 2).sum() / n)
    target = ((observed_adj | observed_adj.T) | np.eye(n, dtype=bool)).astype(np.float64)
    p = recon.edge_probs.data
    ll = target * np.log(p) + (1.0 - target) * np.log(1.0 - p)
    l_stru = float(-ll.sum() / (n * n))
    return compose_losses(l_att, l_stru, kl, cfg.alpha, cfg.gamma)


def fit(
    batch: HistoryBatch,
    cfg: DetectorConfig,
    params: ParamStore,
    rng: np.random.Generator,
    epochs: int | None = None,
) -> list[LossBreakdown]:
    """Full-batch gradient descent on l_total; returns per-epoch losses."""
    if epochs is None:
        epochs = cfg.epochs_initial
    trace: list[LossBreakdown] = []
    for epoch in range(epochs):
        params.zero_grads()
        try:
            result = run_forward(batch, cfg, params, rng)
        except NonFiniteError as err:
            raise TrainingDiverged(epoch, trace[-1] if trace else None, str(err)) from err
        trace.append(result.breakdown)
        result.loss_total.backward()
        nm.adam_step(params, lr=cfg.lr)
    return trace


def infer(
    batch: HistoryBatch, cfg: DetectorConfig, params: ParamStore
) -> tuple[Reconstruction, LossBreakdown]:
    """Deterministic reconstruction of the final snapshot (no sampling)."""
    result = run_forward(batch, cfg, params, rng=None)
    final = batch.snapshots[-1]
    target = self_looped_adjacency(final)
    recon = Reconstruction(
        round=final.round,
        agents=list(final.agents),
        x_hat=Tensor2D(result.x_hat.data.copy()),
        edge_probs=Tensor2D(result.edge_probs.data.copy()),
        r_x=Tensor2D(final.features.data - result.x_hat.data),
        r_e=Tensor2D(target - result.edge_probs.data),
    )
    return recon, result.breakdown


def _config_to_doc(cfg: DetectorConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["lambda"] = doc.pop("lambda_")
    return doc


def _config_from_doc(doc: dict) -> DetectorConfig:
    doc = dict(doc)
    doc["lambda_"] = doc.pop("lambda")
    return DetectorConfig(**doc)


def save_checkpoint(path: str | Path, cfg: DetectorConfig, params: ParamStore) -> None:
    doc = {
        "config": _config_to_doc(cfg),
        "params": [
            {
                "name": name,
                "rows": value.shape[0],
                "cols": value.shape[1],
                "values": value.ravel().tolist(),
            }
            for name, value in params.entries()
        ],
    }
    Path(path).write_text(CHECKPOINT_MAGIC + "\n" + json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[DetectorConfig, ParamStore]:
    text = Path(path).read_text()
    header, _, body = text.partition("\n")
    if header != CHECKPOINT_MAGIC:
        raise DetectorError(f"not a checkpoint file (bad magic {header!r})")
    doc = json.loads(body)
    cfg = _config_from_doc(doc["config"])
    params = ParamStore()
    for rec in doc["params"]:
        values = np.asarray(rec["values"], dtype=np.float64).reshape(rec["rows"], rec["cols"])
        params.add(rec["name"], values)
    return cfg, params
